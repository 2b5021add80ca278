//! Consistency metrics, prompt analysis and report files.
//!
//! Undefined correlations (stationary or constant series) are kept as
//! `None`, excluded from medians and counted per robot.

pub mod metrics;
pub mod prompts;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph};
use crate::error::{Error, Result};
use crate::features::{FeatureRows, NormStats, RobotTarget, BETA_DIM, ROOT_WIDTH};
use crate::model::{AdaMorph, Mode};
use crate::physics::integrate_plain;
use crate::so3::Rotation;
use crate::synth::{EmbodimentDescriptor, Split, Window};

pub use metrics::{activity_pcc, pearson, quantile, root_velocity_pcc, Distribution};
pub use prompts::{cosine_matrix, family_medians, pca_2d, prompt_cosine_matrix, prompt_pca_2d, PromptPoint};

pub const REPORT_SCHEMA: &str = "adamorph-eval/1";
pub const REPORT_FILE: &str = "report.json";
pub const PCC_FILE: &str = "pcc_per_window.csv";
pub const SIMILARITY_FILE: &str = "prompt_similarity.csv";
pub const PCA_FILE: &str = "prompt_pca.csv";

/// Windows per forward pass during inference.
const EVAL_BATCH: usize = 64;

/// Destandardised model output for one window, integrated from the
/// window's stored initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub robot: usize,
    pub target: RobotTarget,
    pub p: Vec<Vector3<f64>>,
    pub r: Vec<Rotation>,
}

impl Prediction {
    /// `source` with its robot side replaced by this prediction.
    pub fn into_window(self, source: &Window) -> Window {
        Window {
            robot: self.robot,
            target: self.target,
            p: self.p,
            r: self.r,
            ..source.clone()
        }
    }
}

/// Retargets the human side of equal-length windows to `robot`.
pub fn predict_batch(model: &AdaMorph, stats: &NormStats, windows: &[&Window], robot: usize) -> Result<Vec<Prediction>> {
    let first = windows.first().ok_or(Error::EmptyDataset)?;
    let t = first.len();
    let hw = stats.human.width();
    let mut x = Vec::with_capacity(windows.len() * t * hw);
    let mut beta = Vec::with_capacity(windows.len() * BETA_DIM);
    for w in windows {
        if w.human.data.len() != t * hw {
            return Err(Error::WidthMismatch {
                expected: t * hw,
                got: w.human.data.len(),
            });
        }
        let start = x.len();
        x.extend_from_slice(&w.human.data);
        stats.human.standardize(&mut x[start..]);
        beta.extend_from_slice(&w.beta);
    }
    let x = Array::new(vec![windows.len(), t, hw], x)?;
    let beta = Array::new(vec![windows.len(), BETA_DIM], beta)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &x, &beta, robot, Mode::Eval)?;
    let y: &Array = g.value(out);
    let rstats = stats.robot(robot)?;
    let width = rstats.width();
    let dof = width - ROOT_WIDTH;
    windows
        .iter()
        .zip(y.data().chunks(t * width))
        .map(|(w, chunk)| {
            let mut data = chunk.to_vec();
            rstats.destandardize(&mut data);
            let target = RobotTarget { dof, data };
            let v: Vec<_> = (0..t).map(|k| target.v(k)).collect();
            let om: Vec<_> = (0..t).map(|k| target.omega(k)).collect();
            let (r, p) = integrate_plain(&v, &om, &w.r[0], &w.p[0], w.dt)?;
            Ok(Prediction { robot, target, p, r })
        })
        .collect()
}

fn unknown_robot(id: usize, robots: usize) -> Error {
    Error::UnknownRobot {
        id,
        known: (0..robots).collect(),
    }
}

/// Predictions in input order. Each window goes to `robot`, or to its own
/// robot when `robot` is `None`.
pub fn predict_for(model: &AdaMorph, stats: &NormStats, windows: &[Window], robot: Option<usize>) -> Result<Vec<Prediction>> {
    let robots = model.config.robot_dofs.len();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); robots];
    for (i, w) in windows.iter().enumerate() {
        let k = robot.unwrap_or(w.robot);
        groups.get_mut(k).ok_or_else(|| unknown_robot(k, robots))?.push(i);
    }
    let mut chunks: Vec<(usize, Vec<usize>)> = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        // windows of one robot may still differ in length
        let mut by_len: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for &i in g {
            by_len.entry(windows[i].len()).or_default().push(i);
        }
        for idx in by_len.values() {
            chunks.extend(idx.chunks(EVAL_BATCH).map(|c| (k, c.to_vec())));
        }
    }
    let results = chunks
        .par_iter()
        .map(|(k, idx)| {
            let ws: Vec<&Window> = idx.iter().map(|&i| &windows[i]).collect();
            predict_batch(model, stats, &ws, *k)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Option<Prediction>> = vec![None; windows.len()];
    for ((_, idx), preds) in chunks.iter().zip(results) {
        for (&i, p) in idx.iter().zip(preds) {
            out[i] = Some(p);
        }
    }
    Ok(out.into_iter().map(|p| p.expect("every window predicted")).collect())
}

pub fn predict(model: &AdaMorph, stats: &NormStats, windows: &[Window]) -> Result<Vec<Prediction>> {
    predict_for(model, stats, windows, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub robot: usize,
    pub split: Split,
    /// Index of the window within its split.
    pub window_id: usize,
    pub root_pcc: Option<f64>,
    pub activity_pcc: Option<f64>,
}

pub fn score_windows(model: &AdaMorph, stats: &NormStats, split: Split, windows: &[Window]) -> Result<Vec<WindowScore>> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(model, stats, windows)?;
    Ok(windows
        .iter()
        .zip(&preds)
        .enumerate()
        .map(|(window_id, (w, p))| WindowScore {
            robot: w.robot,
            split,
            window_id,
            root_pcc: root_velocity_pcc(&w.human, &p.target),
            activity_pcc: activity_pcc(&w.human, &p.target, w.dt),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotConsistency {
    pub robot: usize,
    pub name: String,
    pub family: usize,
    pub windows: usize,
    pub root_velocity_pcc: Distribution,
    pub activity_pcc: Distribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub split: Split,
    /// `in_distribution` or `zero_shot_style`.
    pub label: String,
    pub robots: Vec<RobotConsistency>,
}

pub fn split_label(split: Split) -> &'static str {
    match split {
        Split::ZeroShot => "zero_shot_style",
        _ => "in_distribution",
    }
}

pub fn aggregate(split: Split, scores: &[WindowScore], robots: &[EmbodimentDescriptor]) -> ConsistencyReport {
    let robots = robots
        .iter()
        .map(|e| {
            let mine: Vec<&WindowScore> = scores.iter().filter(|s| s.robot == e.id).collect();
            RobotConsistency {
                robot: e.id,
                name: e.name.clone(),
                family: e.family,
                windows: mine.len(),
                root_velocity_pcc: Distribution::from_values(mine.iter().map(|s| s.root_pcc)),
                activity_pcc: Distribution::from_values(mine.iter().map(|s| s.activity_pcc)),
            }
        })
        .collect();
    ConsistencyReport {
        split,
        label: split_label(split).into(),
        robots,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAnalysis {
    pub similarity: Vec<Vec<f64>>,
    pub families: Vec<usize>,
    pub within_family_median: Option<f64>,
    pub across_family_median: Option<f64>,
    pub pca: Vec<PromptPoint>,
}

pub fn analyse_prompts(model: &AdaMorph, robots: &[EmbodimentDescriptor], seed: u64) -> Result<PromptAnalysis> {
    let similarity = prompt_cosine_matrix(model)?;
    let families: Vec<usize> = robots.iter().map(|e| e.family).collect();
    let (within, across) = family_medians(&similarity, &families);
    Ok(PromptAnalysis {
        similarity,
        families,
        within_family_median: within,
        across_family_median: across,
        pca: prompt_pca_2d(model, seed)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    /// Training step the evaluated parameters came from.
    pub checkpoint_step: usize,
    pub splits: Vec<ConsistencyReport>,
    pub prompts: PromptAnalysis,
    #[serde(skip)]
    pub windows: Vec<WindowScore>,
}

impl EvalReport {
    pub fn split(&self, split: Split) -> Option<&ConsistencyReport> {
        self.splits.iter().find(|s| s.split == split)
    }
}

/// Scores every requested split and analyses the prompt banks.
pub fn evaluate(
    model: &AdaMorph,
    stats: &NormStats,
    robots: &[EmbodimentDescriptor],
    splits: &[(Split, &[Window])],
    checkpoint_step: usize,
    seed: u64,
) -> Result<EvalReport> {
    if splits.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut reports = Vec::new();
    let mut windows = Vec::new();
    for &(split, ws) in splits {
        let scores = score_windows(model, stats, split, ws)?;
        reports.push(aggregate(split, &scores, robots));
        windows.extend(scores);
    }
    Ok(EvalReport {
        schema: REPORT_SCHEMA.into(),
        checkpoint_step,
        splits: reports,
        prompts: analyse_prompts(model, robots, seed)?,
        windows,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub fn pcc_csv(scores: &[WindowScore]) -> String {
    let mut s = String::from("robot,split,window_id,root_pcc,activity_pcc\n");
    for w in scores {
        let _ = writeln!(s, "{},{},{},{},{}", w.robot, w.split.name(), w.window_id, opt(w.root_pcc), opt(w.activity_pcc));
    }
    s
}

pub fn similarity_csv(sim: &[Vec<f64>]) -> String {
    let mut s = String::from("robot");
    for j in 0..sim.len() {
        let _ = write!(s, ",{j}");
    }
    s.push('\n');
    for (i, row) in sim.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn pca_csv(points: &[PromptPoint]) -> String {
    let mut s = String::from("robot,token,pc1,pc2\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.robot, p.token, p.x, p.y);
    }
    s
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (REPORT_FILE, serde_json::to_string_pretty(report)? + "\n"),
        (PCC_FILE, pcc_csv(&report.windows)),
        (SIMILARITY_FILE, similarity_csv(&report.prompts.similarity)),
        (PCA_FILE, pca_csv(&report.prompts.pca)),
    ];
    for (name, body) in files {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
