//! Gradient cosine study, CSV logs and seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::algorithms::{AlgoVariant, EpochMetrics, Trainer};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Norms below this count as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub const CSV_HEADER: &str =
    "epoch,env_steps,episodic_return,policy_loss,critic_loss,model_nll,grad_norm,cos_dmo_true,cos_fwd_true,alpha,wallclock_s";

const METRIC_NAMES: [&str; 9] = [
    "episodic_return",
    "policy_loss",
    "critic_loss",
    "model_nll",
    "grad_norm",
    "cos_dmo_true",
    "cos_fwd_true",
    "alpha",
    "wallclock_s",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either vector is (numerically) zero; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(g1: &[f64], g2: &[f64]) -> Result<Cosine> {
    if g1.len() != g2.len() {
        return Err(Error::shape("cosine_similarity", &[&[g1.len()], &[g2.len()]]));
    }
    let n1 = g1.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n2 = g2.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n1 < DEGENERATE_NORM || n2 < DEGENERATE_NORM {
        return Ok(Cosine { value: 0.0, degenerate: true });
    }
    let dot: f64 = g1.iter().zip(g2).map(|(a, b)| a * b).sum();
    Ok(Cosine { value: (dot / (n1 * n2)).clamp(-1.0, 1.0), degenerate: false })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub epoch: u64,
    pub cos_dmo_true: Cosine,
    pub cos_fwd_true: Cosine,
    pub norm_true: f64,
    pub norm_dmo: f64,
    pub norm_forward: f64,
    /// NLL of the model on the transitions collected in the epoch that
    /// preceded the report, if any.
    pub model_nll: Option<f64>,
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Trains `config` for `seed` with the decoupled gradient, comparing the
/// three gradient pathways every `report_every` epochs.
pub fn run_cosine_study(config: &ExperimentConfig, seed: u64) -> Result<Vec<GradientReport>> {
    if !matches!(config.algo, AlgoVariant::DmoShac | AlgoVariant::DmoBptt) {
        return Err(Error::InvalidArgument(format!("cosine study needs dmo_shac or dmo_bptt, got {}", config.algo.name())));
    }
    let mut trainer = Trainer::new(config, seed)?;
    let epochs = config.total_epochs();
    let mut reports = Vec::new();
    let mut last_nll = None;
    for _ in 0..epochs {
        if trainer.epoch % config.report_every as u64 == 0 {
            let t = trainer.gradient_triplet()?;
            reports.push(GradientReport {
                epoch: trainer.epoch,
                cos_dmo_true: cosine_similarity(&t.dmo, &t.true_grad)?,
                cos_fwd_true: cosine_similarity(&t.forward, &t.true_grad)?,
                norm_true: norm(&t.true_grad),
                norm_dmo: norm(&t.dmo),
                norm_forward: norm(&t.forward),
                model_nll: last_nll,
            });
        }
        last_nll = trainer.train_epoch()?.model_nll;
    }
    Ok(reports)
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV line (no trailing newline) in [`CSV_HEADER`] order.
pub fn csv_row(m: &EpochMetrics) -> String {
    let mut s = format!("{},{}", m.epoch, m.env_steps);
    for v in [
        m.episodic_return,
        m.policy_loss,
        m.critic_loss,
        m.model_nll,
        m.grad_norm,
        m.cos_dmo_true,
        m.cos_fwd_true,
        m.alpha,
        m.wallclock_s,
    ] {
        s.push(',');
        s.push_str(&field(v));
    }
    s
}

/// Per-epoch metrics of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub group: String,
    pub seed: Option<u64>,
    pub config_hash: Option<u64>,
    pub rows: Vec<EpochMetrics>,
}

impl RunLog {
    pub fn new(group: impl Into<String>, rows: Vec<EpochMetrics>) -> Result<Self> {
        if rows.windows(2).any(|w| w[1].epoch <= w[0].epoch) {
            return Err(Error::InvalidArgument("run log epochs must be strictly increasing".into()));
        }
        Ok(Self { group: group.into(), seed: None, config_hash: None, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&csv_row(r));
            s.push('\n');
        }
        s
    }

    /// Parses a log written by [`RunLog::to_csv`].
    pub fn from_csv(group: impl Into<String>, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::InvalidArgument("unexpected CSV header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 11 {
                return Err(Error::InvalidArgument(format!("CSV row {} has {} fields", i + 2, cols.len())));
            }
            let bad = |c: &str| Error::InvalidArgument(format!("CSV row {}: bad field `{c}`", i + 2));
            let opt = |c: &str| -> Result<Option<f64>> {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse().map(Some).map_err(|_| bad(c))
                }
            };
            rows.push(EpochMetrics {
                epoch: cols[0].parse().map_err(|_| bad(cols[0]))?,
                env_steps: cols[1].parse().map_err(|_| bad(cols[1]))?,
                episodic_return: opt(cols[2])?,
                policy_loss: opt(cols[3])?,
                critic_loss: opt(cols[4])?,
                model_nll: opt(cols[5])?,
                grad_norm: opt(cols[6])?,
                cos_dmo_true: opt(cols[7])?,
                cos_fwd_true: opt(cols[8])?,
                alpha: opt(cols[9])?,
                wallclock_s: opt(cols[10])?,
            });
        }
        Self::new(group, rows)
    }
}

fn metric(m: &EpochMetrics, k: usize) -> Option<f64> {
    [
        m.episodic_return,
        m.policy_loss,
        m.critic_loss,
        m.model_nll,
        m.grad_norm,
        m.cos_dmo_true,
        m.cos_fwd_true,
        m.alpha,
        m.wallclock_s,
    ][k]
}

/// Mean and normal-approximation 95% half-width (`1.96 s / sqrt(n)`, sample
/// standard deviation). The half-width needs at least two values.
pub fn mean_ci95(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, Some(1.96 * var.sqrt() / n.sqrt()))
}

/// Per-group, per-epoch mean and 95% CI of every metric, as CSV with
/// columns `group,epoch,env_steps,n` then `<metric>_mean,<metric>_ci95`.
/// A metric is left empty when any run lacks it at that epoch.
pub fn summarize(runs: &[RunLog]) -> Result<String> {
    let mut groups: BTreeMap<&str, Vec<&RunLog>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.group.as_str()).or_default().push(r);
    }
    let mut out = String::from("group,epoch,env_steps,n");
    for m in METRIC_NAMES {
        let _ = write!(out, ",{m}_mean,{m}_ci95");
    }
    out.push('\n');
    for (group, members) in groups {
        let grid: Vec<(u64, u64)> = members[0].rows.iter().map(|r| (r.epoch, r.env_steps)).collect();
        for m in &members[1..] {
            let other: Vec<(u64, u64)> = m.rows.iter().map(|r| (r.epoch, r.env_steps)).collect();
            if other != grid {
                return Err(Error::InvalidArgument(format!("runs in group `{group}` have different epoch grids")));
            }
        }
        for (row, (epoch, steps)) in grid.iter().enumerate() {
            let _ = write!(out, "{group},{epoch},{steps},{}", members.len());
            for k in 0..METRIC_NAMES.len() {
                let vals: Option<Vec<f64>> = members.iter().map(|m| metric(&m.rows[row], k)).collect();
                match vals {
                    Some(v) => {
                        let (mean, ci) = mean_ci95(&v);
                        let _ = write!(out, ",{mean},{}", field(ci));
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Group name of a run file stem such as `dmo_shac_pendulum_seed3`.
pub fn group_of(stem: &str) -> String {
    match stem.rfind("_seed") {
        Some(i) if stem[i + 5..].chars().all(|c| c.is_ascii_digit()) && i + 5 < stem.len() => stem[..i].to_string(),
        _ => stem.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(epoch: u64, ret: f64) -> EpochMetrics {
        EpochMetrics { epoch, env_steps: epoch * 10, episodic_return: Some(ret), ..Default::default() }
    }

    #[test]
    fn cosine_examples() {
        let g = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&g, &g).unwrap().value - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&g, &neg).unwrap().value + 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let d = cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(d.degenerate && d.value == 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_scale_invariance(
            g1 in prop::collection::vec(-10.0f64..10.0, 1..20),
            seed in any::<u64>(),
            a in 0.01f64..100.0,
        ) {
            let g2: Vec<f64> = g1.iter().enumerate().map(|(i, x)| x.sin() + ((seed >> (i % 64)) & 1) as f64).collect();
            let c = cosine_similarity(&g1, &g2).unwrap();
            prop_assume!(!c.degenerate);
            prop_assert!((-1.0..=1.0).contains(&c.value));
            let scaled: Vec<f64> = g1.iter().map(|x| a * x).collect();
            let flipped: Vec<f64> = g1.iter().map(|x| -a * x).collect();
            prop_assert!((cosine_similarity(&scaled, &g2).unwrap().value - c.value).abs() < 1e-12);
            prop_assert!((cosine_similarity(&flipped, &g2).unwrap().value + c.value).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut m = row(3, -1.5);
        m.alpha = Some(0.25);
        let log = RunLog::new("g", vec![row(1, 0.0), m]).unwrap();
        let text = log.to_csv();
        assert!(text.starts_with(
            "epoch,env_steps,episodic_return,policy_loss,critic_loss,model_nll,grad_norm,cos_dmo_true,cos_fwd_true,alpha,wallclock_s\n"
        ));
        assert!(text.contains("\n3,30,-1.5,,,,,,,0.25,\n"));
        assert_eq!(RunLog::from_csv("g", &text).unwrap(), log);
    }

    #[test]
    fn rows_must_increase() {
        assert!(RunLog::new("g", vec![row(2, 0.0), row(2, 1.0)]).is_err());
    }

    #[test]
    fn summarize_examples() {
        let a = RunLog::new("x", vec![row(1, 0.0)]).unwrap();
        let b = RunLog::new("x", vec![row(1, 2.0)]).unwrap();
        let out = summarize(&[a.clone(), b]).unwrap();
        let line = out.lines().nth(1).unwrap();
        assert!(line.starts_with("x,1,10,2,1,"), "{line}");
        let same = summarize(&[a.clone(), a.clone()]).unwrap();
        assert!(same.lines().nth(1).unwrap().starts_with("x,1,10,2,0,0,"));
        assert_eq!(summarize(&[a.clone(), a.clone()]).unwrap(), same);
        let shifted = RunLog::new("x", vec![row(2, 0.0)]).unwrap();
        assert!(summarize(&[a, shifted]).is_err());
    }

    #[test]
    fn five_seed_aggregate_matches_hand_computation() {
        let returns = [[-10.0, -4.0], [-12.0, -3.0], [-9.0, -5.0], [-11.0, -2.5], [-8.0, -6.0]];
        let runs: Vec<RunLog> = returns
            .iter()
            .map(|r| RunLog::new("dmo", vec![row(1, r[0]), row(2, r[1])]).unwrap())
            .collect();
        let out = summarize(&runs).unwrap();
        // epoch 1: mean -10, sample var 2.5, ci 1.96 * sqrt(2.5 / 5)
        // epoch 2: mean -4.1, sample var 2.05, ci 1.96 * sqrt(2.05 / 5)
        let want = [(-10.0, 1.96 * 0.5f64.sqrt()), (-4.1, 1.96 * (2.05f64 / 5.0).sqrt())];
        for (line, (mean, ci)) in out.lines().skip(1).zip(want) {
            let cols: Vec<&str> = line.split(',').collect();
            let m: f64 = cols[4].parse().unwrap();
            let c: f64 = cols[5].parse().unwrap();
            assert!((m - mean).abs() < 1e-12 && (c - ci).abs() < 1e-12, "{line}");
        }
    }

    #[test]
    fn group_names() {
        assert_eq!(group_of("dmo_shac_pendulum_seed3"), "dmo_shac_pendulum");
        assert_eq!(group_of("plain"), "plain");
        assert_eq!(group_of("x_seedy"), "x_seedy");
    }
}
