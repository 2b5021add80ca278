//! Round-robin training loop.
//!
//! Step `s` (0-based) trains robot `s mod K` on a batch drawn with
//! replacement from that robot's windows. Every random draw of step `s`
//! comes from substreams indexed by `s`, so a run resumed from a checkpoint
//! written before step `s` replays it bit-identically.

pub mod checkpoint;
pub mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::features::NormStats;
use crate::model::{AdaMorph, Mode};
use crate::physics::{total_loss, Batch, CurriculumSchedule, LossBreakdown};
use crate::rng::substream;
use crate::synth::{Dataset, Split, Window};

pub use optim::{adamw_step, cosine_lr, AdamHyper, AdamState};

pub const LOG_HEADER: &str = "step,robot,l_inst,l_rot,l_traj,l_total,lambda,alpha,lr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub lambda_max: f64,
    /// Fraction of `total_steps` over which λ warms up.
    pub lambda_warmup_fraction: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2000,
            batch_size: 16,
            base_lr: 1e-3,
            warmup_fraction: 0.03,
            weight_decay: 0.01,
            lambda_max: 0.5,
            lambda_warmup_fraction: 0.2,
            checkpoint_interval: 0,
            adam: AdamHyper::default(),
        }
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        TrainConfig {
            total_steps: 200_000,
            base_lr: 5e-5,
            ..TrainConfig::default()
        }
    }

    pub fn warmup_steps(&self) -> usize {
        (self.total_steps as f64 * self.warmup_fraction).round() as usize
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule {
            warmup_steps: (self.total_steps as f64 * self.lambda_warmup_fraction).round() as usize,
            ..CurriculumSchedule::new(self.total_steps, self.lambda_max)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        if self.warmup_steps() >= self.total_steps {
            return Err(Error::Config("warmup must be shorter than training".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("base_lr must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Per-robot window pools over one split.
pub struct RoundRobin<'a> {
    windows: &'a [Window],
    pools: Vec<Vec<usize>>,
    batch_size: usize,
    seed: u64,
}

impl<'a> RoundRobin<'a> {
    pub fn new(windows: &'a [Window], robots: usize, batch_size: usize, seed: u64) -> Result<Self> {
        let mut pools = vec![Vec::new(); robots];
        for (i, w) in windows.iter().enumerate() {
            let pool = pools.get_mut(w.robot).ok_or_else(|| Error::UnknownRobot {
                id: w.robot,
                known: (0..robots).collect(),
            })?;
            pool.push(i);
        }
        if pools.is_empty() || pools.iter().any(Vec::is_empty) {
            return Err(Error::EmptyDataset);
        }
        Ok(RoundRobin {
            windows,
            pools,
            batch_size,
            seed,
        })
    }

    pub fn robots(&self) -> usize {
        self.pools.len()
    }

    /// Robot id and window indices of step `s`.
    pub fn indices(&self, s: usize) -> (usize, Vec<usize>) {
        let robot = s % self.pools.len();
        let pool = &self.pools[robot];
        let mut rng = substream(self.seed, "data", s as u64);
        let idx = (0..self.batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        (robot, idx)
    }

    pub fn batch(&self, s: usize) -> (usize, Vec<&'a Window>) {
        let (robot, idx) = self.indices(s);
        (robot, idx.into_iter().map(|i| &self.windows[i]).collect())
    }

    /// Endless `(robot, batch)` sequence starting at step `start`.
    pub fn iter_from(&self, start: usize) -> impl Iterator<Item = (usize, Vec<&'a Window>)> + '_ {
        (start..).map(move |s| self.batch(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub robot: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, self.robot, l.l_inst, l.l_rot, l.l_traj, l.l_total, l.lambda, l.alpha, self.lr
        )
    }
}

/// Model, optimiser state and the step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: AdaMorph,
    pub opt: AdamState,
    pub stats: NormStats,
    pub config: TrainConfig,
    pub seed: u64,
    /// Next step to run.
    pub step: usize,
    pub dataset_fingerprint: u64,
}

/// FNV-1a over the per-split file checksums, identifying the training data.
pub fn dataset_fingerprint(ds: &Dataset) -> u64 {
    let mut h = crate::rng::Fnv1a::default();
    for split in Split::ALL {
        h.update(&crate::synth::io::checksum_windows(ds.split(split)).to_le_bytes());
    }
    h.finish()
}

/// Normalisation statistics of the training split.
pub fn fit_stats(ds: &Dataset) -> Result<NormStats> {
    let human: Vec<_> = ds.train.iter().map(|w| &w.human).collect();
    let robots: Vec<_> = ds.train.iter().map(|w| (w.robot, &w.target)).collect();
    NormStats::fit(ds.joints(), &human, &robots, &ds.robot_dofs())
}

impl Trainer {
    pub fn new(model: AdaMorph, stats: NormStats, config: TrainConfig, seed: u64, dataset_fingerprint: u64) -> Result<Self> {
        config.validate()?;
        if stats.robots.len() != model.config.robot_dofs.len() {
            return Err(Error::Config(format!(
                "model has {} robots, statistics cover {}",
                model.config.robot_dofs.len(),
                stats.robots.len()
            )));
        }
        let opt = AdamState::new(&model.params);
        Ok(Trainer {
            model,
            opt,
            stats,
            config,
            seed,
            step: 0,
            dataset_fingerprint,
        })
    }

    pub(crate) fn restore(
        model: AdaMorph,
        opt: AdamState,
        stats: NormStats,
        config: TrainConfig,
        seed: u64,
        step: usize,
        dataset_fingerprint: u64,
    ) -> Self {
        Trainer {
            model,
            opt,
            stats,
            config,
            seed,
            step,
            dataset_fingerprint,
        }
    }

    pub fn lr_at(&self, s: usize) -> f64 {
        cosine_lr(s, self.config.base_lr, self.config.warmup_steps(), self.config.total_steps)
    }

    /// Runs step `self.step` on the batch it is assigned.
    pub fn step_once(&mut self, data: &RoundRobin) -> Result<StepRecord> {
        let s = self.step;
        let (robot, windows) = data.batch(s);
        let batch = Batch::from_windows(&windows, &self.stats)?;
        let schedule = self.config.schedule();
        let mut g = Graph::new();
        let mut dropout_rng = substream(self.seed, "dropout", s as u64);
        let pred = self.model.forward(&mut g, &batch.x, &batch.beta, robot, Mode::Train(&mut dropout_rng))?;
        let mut tf_rng = substream(self.seed, "teacher-forcing", s as u64);
        let obj = total_loss(&mut g, pred, &batch, &self.stats, &schedule, s, &mut tf_rng)?;
        if !obj.breakdown.l_total.is_finite() {
            return Err(Error::NonFinite { step: s });
        }
        let grads = g.backward(obj.total)?;
        let lr = self.lr_at(s);
        adamw_step(&mut self.model.params, &mut self.opt, &grads, lr, self.config.weight_decay, self.config.adam);
        self.step += 1;
        Ok(StepRecord {
            step: s,
            robot,
            losses: obj.breakdown,
            lr,
        })
    }

    /// Trains until `until` (exclusive, capped at `total_steps`), calling
    /// `on_step` after every step.
    pub fn run_until(
        &mut self,
        data: &RoundRobin,
        until: usize,
        mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>,
    ) -> Result<()> {
        let end = until.min(self.config.total_steps);
        while self.step < end {
            let rec = self.step_once(data)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }
}

/// Output locations of a training run.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn checkpoint_at(&self, step: usize) -> PathBuf {
        self.dir.join(format!("step_{step:06}.ckpt"))
    }
}

/// Full run: log every step to CSV, checkpoint at the configured interval
/// and at the end. A resumed trainer appends to the existing log after
/// truncating rows at or beyond its step.
pub fn train(trainer: &mut Trainer, ds: &Dataset, out: &Path) -> Result<Vec<StepRecord>> {
    let paths = RunPaths { dir: out.to_path_buf() };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = RoundRobin::new(&ds.train, ds.robots.len(), trainer.config.batch_size, trainer.seed)?;
    let log_path = paths.log();
    let mut rows = vec![LOG_HEADER.to_string()];
    if trainer.step > 0 {
        if let Ok(text) = std::fs::read_to_string(&log_path) {
            rows.extend(
                text.lines()
                    .skip(1)
                    .filter(|l| l.split(',').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s < trainer.step))
                    .map(str::to_string),
            );
        }
    }
    let mut file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for r in &rows {
        writeln!(file, "{r}").map_err(|e| Error::io(&log_path, e))?;
    }
    let interval = trainer.config.checkpoint_interval;
    let mut records = Vec::new();
    trainer.run_until(&data, usize::MAX, |t, rec| {
        writeln!(file, "{}", rec.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        records.push(*rec);
        if interval > 0 && t.step % interval == 0 && t.step < t.config.total_steps {
            checkpoint::save(&paths.checkpoint_at(t.step), t)?;
        }
        Ok(())
    })?;
    file.flush().map_err(|e| Error::io(&log_path, e))?;
    checkpoint::save(&paths.final_checkpoint(), trainer)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synth::{generate_dataset, DataConfig};

    fn tiny_setup() -> (Dataset, Trainer) {
        let dcfg = DataConfig {
            families: 1,
            robots_per_family: 2,
            window: 4,
            train_windows: 6,
            val_windows: 2,
            test_windows: 2,
            zero_shot_windows: 2,
            sequence_seconds: 1.0,
            ..DataConfig::default()
        };
        let ds = generate_dataset(&dcfg, 5).unwrap();
        let mcfg = ModelConfig {
            d_model: 8,
            n_enc_layers: 1,
            n_dec_layers: 1,
            n_heads: 2,
            ffn_ratio: 2,
            prompt_len: 2,
            human_prompt_len: 2,
            window: 4,
            ..ModelConfig::desk(ds.robot_dofs())
        };
        let model = AdaMorph::new(mcfg, 5).unwrap();
        let tcfg = TrainConfig {
            total_steps: 10,
            batch_size: 3,
            base_lr: 1e-3,
            checkpoint_interval: 5,
            ..TrainConfig::default()
        };
        let stats = fit_stats(&ds).unwrap();
        let fp = dataset_fingerprint(&ds);
        let t = Trainer::new(model, stats, tcfg, 5, fp).unwrap();
        (ds, t)
    }

    #[test]
    fn round_robin_cycles_and_is_homogeneous() {
        let (ds, _) = tiny_setup();
        let rr = RoundRobin::new(&ds.train, 2, 4, 1).unwrap();
        for (s, (robot, batch)) in rr.iter_from(0).take(6).enumerate() {
            assert_eq!(robot, s % 2);
            assert_eq!(batch.len(), 4);
            assert!(batch.iter().all(|w| w.robot == robot));
        }
        let one: Vec<Window> = ds.train.iter().filter(|w| w.robot == 0).cloned().collect();
        let rr1 = RoundRobin::new(&one, 1, 2, 1).unwrap();
        assert!(rr1.iter_from(0).take(5).all(|(r, _)| r == 0));
        assert!(matches!(RoundRobin::new(&one, 2, 2, 1), Err(Error::EmptyDataset)));
    }

    #[test]
    fn log_rows_and_resume_are_bit_exact() {
        let (ds, mut t) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let recs = train(&mut t, &ds, dir.path()).unwrap();
        assert_eq!(recs.len(), 10);
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 11);
        for (i, l) in lines[1..].iter().enumerate() {
            let cols: Vec<f64> = l.split(',').map(|c| c.parse().unwrap()).collect();
            assert_eq!(cols[0] as usize, i);
            assert_eq!(cols[1] as usize, i % 2);
            assert!((cols[5] - (cols[2] + cols[6] * (cols[3] + cols[4]))).abs() < 1e-12);
        }
        let final_bytes = std::fs::read(dir.path().join("final.ckpt")).unwrap();

        let mut resumed = checkpoint::load(&dir.path().join("step_000005.ckpt")).unwrap();
        assert_eq!(resumed.step, 5);
        let dir2 = tempfile::tempdir().unwrap();
        std::fs::copy(dir.path().join("train_log.csv"), dir2.path().join("train_log.csv")).unwrap();
        let recs2 = train(&mut resumed, &ds, dir2.path()).unwrap();
        assert_eq!(recs2, recs[5..].to_vec());
        assert_eq!(std::fs::read(dir2.path().join("final.ckpt")).unwrap(), final_bytes);
        assert_eq!(std::fs::read_to_string(dir2.path().join("train_log.csv")).unwrap(), log);
    }

    #[test]
    fn non_sampled_robot_parameters_are_untouched() {
        let (ds, mut t) = tiny_setup();
        let rr = RoundRobin::new(&ds.train, 2, 3, t.seed).unwrap();
        for _ in 0..4 {
            let before = t.model.params.clone();
            let rec = t.step_once(&rr).unwrap();
            for ((_, a), (_, b)) in before.iter().zip(t.model.params.iter()) {
                if let Some(k) = AdaMorph::robot_of(&a.name) {
                    if k != rec.robot {
                        assert_eq!(a.value, b.value, "{}", a.name);
                    }
                }
            }
        }
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let (_, t) = tiny_setup();
        let mut bytes = checkpoint::encode(&t).unwrap();
        let back = checkpoint::decode(&bytes, Path::new("c")).unwrap();
        assert!(checkpoint::same_values(&back.model.params, &t.model.params));
        assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
        let n = bytes.len();
        bytes[n - 20] ^= 0xff;
        assert!(matches!(checkpoint::decode(&bytes, Path::new("c")), Err(Error::ChecksumMismatch { .. })));
    }
}
