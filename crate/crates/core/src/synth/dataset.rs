//! Temporal formatting and paired dataset generation.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::embodiment::{make_embodiments, oracle_retarget, EmbodimentDescriptor};
use super::motion::{generate_human_sequence, sample_beta, MotionStyleParams, StyleFamily, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::features::{
    humanseq_to_features, robotseq_to_targets, FeatureRows, HumanFeatureSeq, HumanSequence,
    RobotSequence, RobotTarget, BETA_DIM,
};
use crate::rng::substream;
use crate::so3::Rotation;

/// Frame subsampling shared by human and robot sequences.
pub trait Downsample: Sized {
    fn frames(&self) -> usize;
    fn keep_every(&self, factor: usize) -> Self;

    /// Keeps frames `0, factor, 2·factor, …` and scales `dt` by `factor`.
    fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("downsample factor must be at least 1".into()));
        }
        if self.frames() <= factor && factor > 1 {
            return Err(Error::TooShort {
                len: self.frames(),
                need: factor + 1,
            });
        }
        Ok(self.keep_every(factor))
    }
}

fn every<T: Clone>(v: &[T], factor: usize) -> Vec<T> {
    v.iter().step_by(factor).cloned().collect()
}

impl Downsample for HumanSequence {
    fn frames(&self) -> usize {
        self.len()
    }
    fn keep_every(&self, factor: usize) -> Self {
        HumanSequence {
            dt: self.dt * factor as f64,
            p: every(&self.p, factor),
            r: every(&self.r, factor),
            theta: every(&self.theta, factor),
            beta: self.beta,
        }
    }
}

impl Downsample for RobotSequence {
    fn frames(&self) -> usize {
        self.len()
    }
    fn keep_every(&self, factor: usize) -> Self {
        RobotSequence {
            dt: self.dt * factor as f64,
            p: every(&self.p, factor),
            r: every(&self.r, factor),
            q: every(&self.q, factor),
        }
    }
}

/// Start frames of every full window of length `t` at `stride`.
pub fn window_starts(len: usize, t: usize, stride: usize) -> Result<Vec<usize>> {
    if t == 0 || stride == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    if len < t {
        return Err(Error::TooShort { len, need: t });
    }
    Ok((0..=(len - t) / stride).map(|i| i * stride).collect())
}

/// One training segment: standardisable features plus the absolute base
/// trajectory the integration losses start from.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub robot: usize,
    pub sequence: u32,
    pub style: StyleFamily,
    pub start: u32,
    pub dt: f64,
    pub beta: [f64; BETA_DIM],
    pub human: HumanFeatureSeq,
    pub target: RobotTarget,
    /// Ground-truth robot base positions; `p[0]` is the initial state.
    pub p: Vec<Vector3<f64>>,
    pub r: Vec<Rotation>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

fn slice_rows(data: &[f64], width: usize, start: usize, len: usize) -> Vec<f64> {
    data[start * width..(start + len) * width].to_vec()
}

/// Cuts a paired sequence into windows. Features are computed on the whole
/// sequence first so only frame 0 of the sequence uses copy-forward.
#[allow(clippy::too_many_arguments)]
pub fn window_pair(
    human: &HumanSequence,
    robot_seq: &RobotSequence,
    robot: usize,
    sequence: u32,
    style: StyleFamily,
    t: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    let hf = humanseq_to_features(human)?;
    let rt = robotseq_to_targets(robot_seq)?;
    let (hw, rw) = (hf.width(), rt.width());
    window_starts(human.len(), t, stride)?
        .into_iter()
        .map(|s| {
            Ok(Window {
                robot,
                sequence,
                style,
                start: s as u32,
                dt: human.dt,
                beta: human.beta,
                human: HumanFeatureSeq {
                    joints: hf.joints,
                    data: slice_rows(&hf.data, hw, s, t),
                },
                target: RobotTarget {
                    dof: rt.dof,
                    data: slice_rows(&rt.data, rw, s, t),
                },
                p: robot_seq.p[s..s + t].to_vec(),
                r: robot_seq.r[s..s + t].to_vec(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    ZeroShot,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::ZeroShot];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::ZeroShot => "zero_shot",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown split {s:?}; expected train, val, test or zero_shot"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub families: usize,
    pub robots_per_family: usize,
    pub capture_rate_hz: f64,
    pub downsample: usize,
    pub window: usize,
    /// Defaults to `window / 2`.
    pub stride: Option<usize>,
    pub sequence_seconds: f64,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
    pub zero_shot_windows: usize,
    pub held_out_style: StyleFamily,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            families: 2,
            robots_per_family: 3,
            capture_rate_hz: 120.0,
            downsample: 4,
            window: 16,
            stride: None,
            sequence_seconds: 8.0,
            train_windows: 2000,
            val_windows: 200,
            test_windows: 400,
            zero_shot_windows: 400,
            held_out_style: StyleFamily::Squat,
        }
    }
}

impl DataConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.window / 2).max(1))
    }

    pub fn dt(&self) -> f64 {
        self.downsample as f64 / self.capture_rate_hz
    }

    pub fn windows_per_robot(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_windows,
            Split::Val => self.val_windows,
            Split::Test => self.test_windows,
            Split::ZeroShot => self.zero_shot_windows,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.families == 0 || self.robots_per_family == 0 {
            return bad("need at least one family and one robot per family");
        }
        if !(self.capture_rate_hz > 0.0) || self.downsample == 0 {
            return bad("capture rate and downsample factor must be positive");
        }
        if self.window < 2 {
            return bad("window must be at least 2 frames");
        }
        if self.stride == Some(0) {
            return bad("stride must be positive");
        }
        if self.frames_per_sequence() < self.window {
            return bad("sequence_seconds too short for one window");
        }
        Ok(())
    }

    fn frames_per_sequence(&self) -> usize {
        let raw = (self.sequence_seconds * self.capture_rate_hz).floor() as usize + 1;
        (raw - 1) / self.downsample.max(1) + 1
    }

    fn windows_per_sequence(&self) -> usize {
        (self.frames_per_sequence() - self.window) / self.stride() + 1
    }

    fn styles(&self, split: Split) -> Vec<StyleFamily> {
        match split {
            Split::ZeroShot => vec![self.held_out_style],
            _ => StyleFamily::ALL
                .into_iter()
                .filter(|s| *s != self.held_out_style)
                .collect(),
        }
    }
}

/// Windows of every split for every robot.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: DataConfig,
    pub robots: Vec<EmbodimentDescriptor>,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
    pub zero_shot: Vec<Window>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Window] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::ZeroShot => &self.zero_shot,
        }
    }

    pub fn split_mut(&mut self, split: Split) -> &mut Vec<Window> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
            Split::ZeroShot => &mut self.zero_shot,
        }
    }

    pub fn robot_dofs(&self) -> Vec<usize> {
        self.robots.iter().map(|r| r.dof).collect()
    }

    pub fn joints(&self) -> usize {
        NUM_JOINTS
    }

    /// Indices into `split` grouped by robot id.
    pub fn by_robot(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.robots.len()];
        for (i, w) in self.split(split).iter().enumerate() {
            out[w.robot].push(i);
        }
        out
    }
}

/// Human clip `index` of a split; a pure function of `(seed, split, index)`.
pub fn split_sequence(config: &DataConfig, seed: u64, split: Split, index: usize) -> (StyleFamily, HumanSequence) {
    let styles = config.styles(split);
    let style = styles[index % styles.len()];
    let mut rng = substream(seed, &format!("sequence-{}", split.name()), index as u64);
    let params = MotionStyleParams::sample(style, &mut rng);
    let beta = sample_beta(&mut rng);
    let seq = generate_human_sequence(&params, &beta, config.sequence_seconds, config.capture_rate_hz);
    (style, seq)
}

fn split_windows(
    config: &DataConfig,
    seed: u64,
    split: Split,
    robots: &[EmbodimentDescriptor],
    offset: u32,
) -> Result<Vec<Window>> {
    let per_robot = config.windows_per_robot(split);
    let n_seq = per_robot.div_ceil(config.windows_per_sequence());
    let stride = config.stride();
    let per_seq: Vec<Vec<Vec<Window>>> = (0..n_seq)
        .into_par_iter()
        .map(|i| {
            let (style, seq) = split_sequence(config, seed, split, i);
            let human = seq.downsample(config.downsample)?;
            robots
                .iter()
                .map(|e| {
                    let robot_seq = oracle_retarget(&human, e);
                    window_pair(&human, &robot_seq, e.id, offset + i as u32, style, config.window, stride)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(per_robot * robots.len());
    for r in 0..robots.len() {
        out.extend(per_seq.iter().flat_map(|s| s[r].iter().cloned()).take(per_robot));
    }
    Ok(out)
}

/// Generates every split. Sequence ids are unique across splits.
pub fn generate_dataset(config: &DataConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let robots = make_embodiments(seed, config.families, config.robots_per_family);
    let mut ds = Dataset {
        seed,
        config: config.clone(),
        robots,
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        zero_shot: Vec::new(),
    };
    let mut offset = 0u32;
    for split in Split::ALL {
        let windows = split_windows(config, seed, split, &ds.robots, offset)?;
        offset += config.windows_per_robot(split).div_ceil(config.windows_per_sequence()) as u32;
        *ds.split_mut(split) = windows;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureRows;

    fn small() -> DataConfig {
        DataConfig {
            train_windows: 40,
            val_windows: 5,
            test_windows: 10,
            zero_shot_windows: 10,
            sequence_seconds: 2.0,
            ..DataConfig::default()
        }
    }

    #[test]
    fn downsample_examples() {
        let p = MotionStyleParams::still(StyleFamily::Walk);
        let seq = generate_human_sequence(&p, &[0.0; BETA_DIM], 1.0, 120.0);
        assert_eq!(seq.len(), 121);
        assert_eq!(seq.downsample(1).unwrap(), seq);
        let d = seq.downsample(4).unwrap();
        assert_eq!(d.len(), 31);
        assert!((d.dt - 1.0 / 30.0).abs() < 1e-15);
        assert_eq!(d.p[1], seq.p[4]);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(60, 60, 7).unwrap(), vec![0]);
        assert_eq!(window_starts(120, 60, 30).unwrap().len(), 3);
        assert!(matches!(window_starts(10, 16, 8), Err(Error::TooShort { len: 10, need: 16 })));
    }

    #[test]
    fn first_window_keeps_initial_state() {
        let cfg = small();
        let (style, seq) = split_sequence(&cfg, 3, Split::Train, 0);
        let human = seq.downsample(4).unwrap();
        let e = &make_embodiments(3, 1, 1)[0];
        let r = oracle_retarget(&human, e);
        let w = window_pair(&human, &r, 0, 0, style, 16, 8).unwrap();
        assert_eq!(w[0].p[0], r.p[0]);
        assert_eq!(w[0].r[0], r.r[0]);
        assert_eq!(w[1].p[0], r.p[8]);
        assert_eq!(w[1].target.frame(0), robotseq_to_targets(&r).unwrap().frame(8));
    }

    #[test]
    fn dataset_counts_and_styles() {
        let cfg = small();
        let ds = generate_dataset(&cfg, 11).unwrap();
        assert_eq!(ds.robots.len(), 6);
        for split in Split::ALL {
            let by = ds.by_robot(split);
            for ids in &by {
                assert_eq!(ids.len(), cfg.windows_per_robot(split));
            }
        }
        assert!(ds.train.iter().all(|w| w.style != StyleFamily::Squat));
        assert!(ds.zero_shot.iter().all(|w| w.style == StyleFamily::Squat));
        let train_seqs: std::collections::BTreeSet<_> = ds.train.iter().map(|w| w.sequence).collect();
        assert!(ds.test.iter().all(|w| !train_seqs.contains(&w.sequence)));
    }

    #[test]
    fn generation_is_pure() {
        let cfg = small();
        assert_eq!(generate_dataset(&cfg, 2).unwrap(), generate_dataset(&cfg, 2).unwrap());
        assert_ne!(generate_dataset(&cfg, 2).unwrap().train, generate_dataset(&cfg, 3).unwrap().train);
    }
}
