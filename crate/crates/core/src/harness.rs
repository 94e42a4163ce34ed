//! Experiment runner: per-seed training loops, CSV logs, checkpoints and
//! evaluation.
//!
//! Each seed writes `{out_dir}/{algo}_{env}_seed{seed}.csv`, a final
//! checkpoint `{stem}.dmo1`, and every `checkpoint_every` epochs a resumable
//! checkpoint `{stem}_epoch{E}.dmo1`. A diverged run leaves
//! `{stem}_diverged.dmo1` behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::algorithms::{EpochMetrics, Trainer};
use crate::checkpoint::Archive;
use crate::config::ExperimentConfig;
use crate::diagnostics::{csv_row, group_of, summarize, RunLog, CSV_HEADER};
use crate::envs::EnvState;
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRole};
use crate::tensor::Tensor;

pub const CHECKPOINT_EXT: &str = "dmo1";

pub fn run_stem(config: &ExperimentConfig, seed: u64) -> String {
    format!("{}_{}_seed{seed}", config.algo.name(), config.env.name())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
    pub last: Option<EpochMetrics>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct CsvSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvSink {
    /// Opens the log, keeping rows up to `keep_through` epochs when resuming.
    fn open(path: &Path, keep_through: Option<u64>) -> Result<Self> {
        let mut text = String::from(CSV_HEADER);
        text.push('\n');
        if let Some(epoch) = keep_through {
            if let Ok(existing) = fs::read_to_string(path) {
                for line in existing.lines().skip(1).filter(|l| !l.is_empty()) {
                    let e: u64 = line.split(',').next().and_then(|f| f.parse().ok()).unwrap_or(u64::MAX);
                    if e <= epoch {
                        text.push_str(line);
                        text.push('\n');
                    }
                }
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), out })
    }

    fn row(&mut self, m: &EpochMetrics) -> Result<()> {
        writeln!(self.out, "{}", csv_row(m)).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains one seed to `total_env_steps`, optionally continuing from a
/// checkpoint of the same run.
pub fn run_seed(config: &ExperimentConfig, seed: u64, resume: Option<&Archive>) -> Result<RunOutcome> {
    run_seed_with(config, seed, resume, |_| false)
}

/// As [`run_seed`], with `report(epoch)` choosing the epochs at which the
/// gradient cosines are measured and logged.
pub fn run_seed_with(
    config: &ExperimentConfig,
    seed: u64,
    resume: Option<&Archive>,
    report: impl Fn(u64) -> bool,
) -> Result<RunOutcome> {
    let dir = Path::new(&config.out_dir);
    create_dir(dir)?;
    let stem = run_stem(config, seed);
    let csv = dir.join(format!("{stem}.csv"));
    let checkpoint = dir.join(format!("{stem}.{CHECKPOINT_EXT}"));
    let mut trainer = match resume {
        Some(a) => {
            let t = Trainer::load(a)?;
            if t.seed != seed || t.config.algo != config.algo || t.config.env != config.env {
                return Err(Error::Checkpoint(format!("checkpoint does not belong to run {stem}")));
            }
            t
        }
        None => Trainer::new(config, seed)?,
    };
    let mut sink = CsvSink::open(&csv, resume.map(|_| trainer.epoch))?;
    let mut last = None;
    while trainer.env_steps < config.total_env_steps {
        let epoch = trainer.epoch;
        let m = match trainer.train_epoch_with(report(epoch)) {
            Ok(m) => m,
            Err(e @ (Error::Divergence(_) | Error::NonFinite(_))) => {
                let dump = dir.join(format!("{stem}_diverged.{CHECKPOINT_EXT}"));
                trainer.save().write(&dump)?;
                return Err(Error::Divergence(format!("{e}; state dumped to {}", dump.display())));
            }
            Err(e) => return Err(e),
        };
        sink.row(&m)?;
        if config.checkpoint_every > 0 && trainer.epoch % config.checkpoint_every as u64 == 0 {
            trainer.save().write(&dir.join(format!("{stem}_epoch{}.{CHECKPOINT_EXT}", trainer.epoch)))?;
        }
        last = Some(m);
    }
    trainer.save().write(&checkpoint)?;
    Ok(RunOutcome { seed, csv, checkpoint, last })
}

/// Runs every seed in the config in turn.
pub fn run(config: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    config.seeds.iter().map(|&s| run_seed(config, s, None)).collect()
}

/// Training runs that also log gradient cosines every `report_every` epochs.
/// Logs are written as `cosine_{stem}.csv`.
pub fn cosine_study(config: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    let every = config.report_every.max(1) as u64;
    config
        .seeds
        .iter()
        .map(|&seed| {
            let mut out = run_seed_with(config, seed, None, |e| e % every == 0)?;
            let renamed = out.csv.with_file_name(format!("cosine_{}.csv", run_stem(config, seed)));
            fs::rename(&out.csv, &renamed).map_err(|e| Error::io(&renamed, e))?;
            out.csv = renamed;
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub returns: Vec<f64>,
    pub discounted_returns: Vec<f64>,
    pub final_states: Vec<Vec<f64>>,
    pub mean_return: f64,
    pub mean_discounted_return: f64,
}

/// Rolls `episodes` full episodes with the mean action. Start states come
/// from an evaluation stream disjoint from training resets; discounting uses
/// the run's `gamma`.
pub fn evaluate(trainer: &Trainer, episodes: usize) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let env = &trainer.env;
    let spec = env.spec();
    let gamma = trainer.config.gamma;
    let starts: Vec<EnvState> =
        (0..episodes).map(|e| env.sample_initial(&mut stream(trainer.seed, StreamRole::Eval, &[e as u64]))).collect();
    let mut states = Tensor::from_parts(vec![episodes, spec.state_dim], starts.into_iter().flat_map(|s| s.values).collect());
    let mut returns = vec![0.0; episodes];
    let mut discounted = vec![0.0; episodes];
    let mut disc = 1.0;
    for _ in 0..spec.max_episode_steps {
        let actions = trainer.actor.mean_action(&states)?;
        let batch = crate::envs::BatchState {
            states: states.clone(),
            steps_elapsed: vec![0; episodes],
            episodes: vec![0; episodes],
            seed: trainer.seed,
        };
        let step = env.batch_step(&batch, &actions)?;
        for (i, r) in step.rewards.iter().enumerate() {
            returns[i] += r;
            discounted[i] += disc * r;
        }
        disc *= gamma;
        states = step.terminal_states;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalReport {
        mean_return: mean(&returns),
        mean_discounted_return: mean(&discounted),
        final_states: (0..episodes).map(|i| states.row(i).to_vec()).collect(),
        returns,
        discounted_returns: discounted,
    })
}

pub fn evaluate_checkpoint(path: &Path, episodes: usize) -> Result<EvalReport> {
    evaluate(&Trainer::load(&Archive::read(path)?)?, episodes)
}

/// Aggregates every CSV matching `pattern`, grouping files by name with the
/// seed suffix removed, and writes the table to `out`.
pub fn summarize_glob(pattern: &str, out: &Path) -> Result<usize> {
    let paths = glob::glob(pattern).map_err(|e| Error::InvalidArgument(format!("bad glob `{pattern}`: {e}")))?;
    let mut runs = Vec::new();
    for p in paths {
        let p = p.map_err(|e| Error::io(e.path(), std::io::Error::other(e.to_string())))?;
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        runs.push(RunLog::from_csv(group_of(stem), &text)?);
    }
    if runs.is_empty() {
        return Err(Error::InvalidArgument(format!("no CSV files match `{pattern}`")));
    }
    let table = summarize(&runs)?;
    fs::write(out, table).map_err(|e| Error::io(out, e))?;
    Ok(runs.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::AlgoVariant;
    use crate::envs::EnvKind;

    fn config(dir: &Path, algo: AlgoVariant) -> ExperimentConfig {
        ExperimentConfig {
            algo,
            env: EnvKind::DoubleIntegrator,
            seeds: vec![0],
            num_actors: 4,
            horizon: 4,
            total_env_steps: 16 * 6,
            max_episode_steps: 10,
            actor_hidden: vec![8],
            critic_hidden: vec![8],
            model_hidden: vec![8],
            critic_ensemble: if algo.is_sapo() { 2 } else { 1 },
            critic_mini_epochs: 2,
            critic_minibatches: 2,
            model_minibatches: 2,
            model_batch_size: 8,
            out_dir: dir.to_string_lossy().into_owned(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn zero_budget_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { total_env_steps: 0, ..config(dir.path(), AlgoVariant::DmoShac) };
        let out = run(&cfg).unwrap();
        assert_eq!(fs::read_to_string(&out[0].csv).unwrap(), format!("{CSV_HEADER}\n"));
        assert!(out[0].last.is_none());
    }

    #[test]
    fn repeated_runs_write_identical_logs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run(&config(a.path(), AlgoVariant::DmoShac)).unwrap();
        let rb = run(&config(b.path(), AlgoVariant::DmoShac)).unwrap();
        let ta = fs::read(&ra[0].csv).unwrap();
        assert_eq!(ta, fs::read(&rb[0].csv).unwrap());
        assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 7);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_log() {
        let full = tempfile::tempdir().unwrap();
        let part = tempfile::tempdir().unwrap();
        let whole = run(&config(full.path(), AlgoVariant::DmoSapo)).unwrap();
        let cfg = ExperimentConfig { checkpoint_every: 2, ..config(part.path(), AlgoVariant::DmoSapo) };
        run(&cfg).unwrap();
        // simulate a crash after epoch 4: the log holds rows written later
        let stem = run_stem(&cfg, 0);
        let ckpt = Archive::read(&part.path().join(format!("{stem}_epoch4.dmo1"))).unwrap();
        let resumed = run_seed(&cfg, 0, Some(&ckpt)).unwrap();
        assert_eq!(fs::read(&whole[0].csv).unwrap(), fs::read(&resumed.csv).unwrap());
        fs::remove_file(&resumed.csv).unwrap();
        let again = run_seed(&cfg, 0, Some(&ckpt)).unwrap();
        let text = fs::read_to_string(&again.csv).unwrap();
        let full_text = fs::read_to_string(&whole[0].csv).unwrap();
        let suffix: Vec<&str> = full_text.lines().skip(5).collect();
        assert_eq!(text.lines().skip(1).collect::<Vec<_>>(), suffix);
    }

    #[test]
    fn foreign_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), AlgoVariant::DmoShac);
        let t = Trainer::new(&cfg, 3).unwrap();
        assert!(matches!(run_seed(&cfg, 0, Some(&t.save())), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn divergence_dumps_state() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), AlgoVariant::ShacTrue);
        let mut t = Trainer::new(&cfg, 0).unwrap();
        t.actor.net.biases[0].data_mut()[0] = f64::NAN;
        let err = run_seed(&cfg, 0, Some(&t.save())).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(dir.path().join("shac_true_double_integrator_seed0_diverged.dmo1").exists());
    }

    #[test]
    fn evaluation_uses_config_discount() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), AlgoVariant::BpttTrue);
        let t = Trainer::new(&cfg, 0).unwrap();
        let r = evaluate(&t, 3).unwrap();
        assert_eq!(r.returns.len(), 3);
        let spec = t.env.spec().clone();
        // replay the first episode by hand
        let mut s = t.env.sample_initial(&mut stream(0, StreamRole::Eval, &[0]));
        let (mut total, mut disc_total, mut d) = (0.0, 0.0, 1.0);
        for _ in 0..spec.max_episode_steps {
            let a = t.actor.mean_action(&Tensor::from_parts(vec![1, 2], s.values.clone())).unwrap();
            let (next, rew, _) = t.env.step(&s, a.data()).unwrap();
            total += rew;
            disc_total += d * rew;
            d *= cfg.gamma;
            s = next;
        }
        assert!((r.returns[0] - total).abs() < 1e-12);
        assert!((r.discounted_returns[0] - disc_total).abs() < 1e-12);
        assert_eq!(r.final_states[0], s.values);
        assert!(evaluate(&t, 0).is_err());
    }

    #[test]
    fn summarize_groups_seed_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { seeds: vec![0, 1], ..config(dir.path(), AlgoVariant::BpttTrue) };
        run(&cfg).unwrap();
        let out = dir.path().join("table.csv");
        let n = summarize_glob(&format!("{}/*.csv", dir.path().display()), &out).unwrap();
        assert_eq!(n, 2);
        let table = fs::read_to_string(&out).unwrap();
        assert!(table.lines().nth(1).unwrap().starts_with("bptt_true_double_integrator,1,16,2,"));
    }
}
