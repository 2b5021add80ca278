//! Verification suites run by `adamorph check`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::autodiff::{grad_check, grad_check_params, Array, Graph, Var};
use crate::error::{Error, Result};
use crate::features::{angular_velocity, linear_velocity, ChannelStats, BETA_DIM, ROOT_WIDTH};
use crate::model::{AdaMorph, ModelConfig, Mode};
use crate::physics::{integrate_with, total_loss, Batch, CurriculumSchedule};
use crate::rng::substream;
use crate::so3::{self, Rotation};
use crate::synth::{generate_human_sequence, sample_beta, MotionStyleParams, StyleFamily};

pub const GRAD_TOL: f64 = 1e-4;
pub const ROUND_TRIP_TOL: f64 = 1e-8;
pub const SIX_D_TOL: f64 = 1e-10;
pub const ORTHO_TOL: f64 = 1e-9;
pub const CHAIN_STEPS: usize = 10_000;
/// Trials per differentiation primitive.
pub const GRAD_TRIALS: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Geometry,
    Grad,
    Kinematics,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometry" => Ok(Suite::Geometry),
            "grad" => Ok(Suite::Grad),
            "kinematics" => Ok(Suite::Kinematics),
            "all" => Ok(Suite::All),
            _ => Err(Error::Config(format!("unknown suite {s:?}"))),
        }
    }
}

/// Deliberate defects for negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SkipGramSchmidt,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip-gram-schmidt" => Ok(Fault::SkipGramSchmidt),
            _ => Err(Error::Config(format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(suite: &'static str, name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckResult {
            suite,
            name: name.into(),
            value,
            tolerance,
            passed: value < tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}/{}: {:.3e} (tol {:.0e})", self.suite, self.name, self.value, self.tolerance)
    }
}

pub fn run(suite: Suite, seed: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Geometry | Suite::All) {
        out.extend(geometry(seed)?);
    }
    if matches!(suite, Suite::Grad | Suite::All) {
        out.extend(grad(seed)?);
    }
    if matches!(suite, Suite::Kinematics | Suite::All) {
        out.extend(kinematics(seed, fault)?);
    }
    Ok(out)
}

/// Chains `R ← R·exp(ω dt)·(I + N)` with small non-orthogonal noise `N`,
/// re-projecting each step when `project` is set. Returns the final
/// matrix's orthonormality defect and determinant.
pub fn chained_drift(seed: u64, steps: usize, project: bool) -> Result<(f64, f64)> {
    let mut rng = substream(seed, "chain", 0);
    let mut r = Matrix3::identity();
    for _ in 0..steps {
        let w = Vector3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let noise = Matrix3::from_fn(|_, _| rng.random_range(-1e-7..1e-7));
        let m = r * so3::exp_map(&(w / 30.0)).matrix() * (Matrix3::identity() + noise);
        r = if project { *so3::gram_schmidt_project(&m)?.matrix() } else { m };
    }
    let defect = (r.transpose() * r - Matrix3::identity()).abs().max();
    Ok((defect, r.determinant()))
}

pub fn geometry(seed: u64) -> Result<Vec<CheckResult>> {
    const S: &str = "geometry";
    let mut rng = substream(seed, "geometry", 0);
    let mut exp_log: f64 = 0.0;
    for _ in 0..1000 {
        let axis = so3::sample_unit(&mut rng);
        let angle = rng.random_range(0.0..std::f64::consts::PI - 1e-3);
        let w = axis * angle;
        exp_log = exp_log.max((so3::log_map(&so3::exp_map(&w)) - w).norm());
    }
    let mut six: f64 = 0.0;
    for _ in 0..1000 {
        let r = so3::sample_rotation(&mut rng);
        let back = so3::from_6d(&so3::to_6d(&r))?;
        six = six.max((back.matrix() - r.matrix()).abs().max());
    }
    let (defect, det) = chained_drift(seed, CHAIN_STEPS, true)?;
    Ok(vec![
        CheckResult::below(S, "exp-log round trip (1000 samples)", exp_log, ROUND_TRIP_TOL),
        CheckResult::below(S, "6d round trip (1000 samples)", six, SIX_D_TOL),
        CheckResult::below(S, "gram-schmidt orthonormal after 10000 steps", defect, ORTHO_TOL),
        CheckResult::below(S, "gram-schmidt det +1 after 10000 steps", (det - 1.0).abs(), ORTHO_TOL),
    ])
}

/// Ground-truth base trajectories of `n` random synthetic sequences with
/// `frames` frames at `rate` Hz.
pub fn random_trajectories(seed: u64, n: usize, frames: usize, rate: f64) -> Vec<(Vec<Vector3<f64>>, Vec<Rotation>)> {
    (0..n)
        .map(|i| {
            let mut rng = substream(seed, "trajectory", i as u64);
            let style = StyleFamily::ALL[i % StyleFamily::ALL.len()];
            let params = MotionStyleParams::sample(style, &mut rng);
            let beta = sample_beta(&mut rng);
            let seq = generate_human_sequence(&params, &beta, (frames as f64 + 0.5) / rate, rate);
            (seq.p[..frames].to_vec(), seq.r[..frames].to_vec())
        })
        .collect()
}

/// Max position and geodesic-angle error of dead reckoning from extracted
/// velocities with α = 0, on the tape recursion used in training.
pub fn round_trip_error(trajectories: &[(Vec<Vector3<f64>>, Vec<Rotation>)], dt: f64, project: bool) -> Result<(f64, f64)> {
    let b = trajectories.len();
    let t = trajectories.first().map(|(p, _)| p.len()).ok_or(Error::EmptyDataset)?;
    let (mut v, mut w, mut rgt, mut p0) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, r) in trajectories {
        for x in linear_velocity(p, r, dt)? {
            v.extend_from_slice(x.as_slice());
        }
        for x in angular_velocity(r, dt)? {
            w.extend_from_slice(x.as_slice());
        }
        for x in r {
            rgt.extend_from_slice(&x.to_row_array());
        }
        p0.extend_from_slice(p[0].as_slice());
    }
    let mut g = Graph::new();
    let vv = g.constant(Array::new(vec![b, t, 3], v)?);
    let wv = g.constant(Array::new(vec![b, t, 3], w)?);
    let rgt = Array::new(vec![b, t, 3, 3], rgt)?;
    let p0 = Array::new(vec![b, 3], p0)?;
    let stats = ChannelStats::identity(ROOT_WIDTH);
    let mut rng = substream(0, "unused", 0);
    let traj = integrate_with(&mut g, vv, wv, &stats, &rgt, &p0, dt, 0.0, &mut rng, project)?;
    let (mut pos, mut rot) = (0.0f64, 0.0f64);
    for (bi, (p, r)) in trajectories.iter().enumerate() {
        for i in 0..t {
            let pd = &g.value(traj.p[i]).data()[bi * 3..bi * 3 + 3];
            pos = pos.max((Vector3::from_row_slice(pd) - p[i]).norm());
            let rd = &g.value(traj.r[i]).data()[bi * 9..bi * 9 + 9];
            let rhat = Rotation::from_matrix_unchecked(Matrix3::from_row_slice(rd));
            rot = rot.max(so3::geodesic_angle(&rhat, &r[i]));
        }
    }
    Ok((pos, rot))
}

pub fn kinematics(seed: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    const S: &str = "kinematics";
    let project = fault != Some(Fault::SkipGramSchmidt);
    let trajectories = random_trajectories(seed, 100, 60, 30.0);
    let (pos, rot) = round_trip_error(&trajectories, 1.0 / 30.0, project)?;
    let (defect, det) = chained_drift(seed, CHAIN_STEPS, project)?;
    Ok(vec![
        CheckResult::below(S, "round-trip position error (100 sequences)", pos, ROUND_TRIP_TOL),
        CheckResult::below(S, "round-trip rotation error (100 sequences)", rot, ROUND_TRIP_TOL),
        CheckResult::below(S, "integrated rotation orthonormal after 10000 steps", defect.max((det - 1.0).abs()), ORTHO_TOL),
    ])
}

/// Carves variables of the given shapes out of one flat variable.
pub fn split_var(g: &mut Graph, x: Var, shapes: &[&[usize]]) -> Result<Vec<Var>> {
    let mut at = 0;
    let mut out = Vec::new();
    for s in shapes {
        let n: usize = s.iter().product();
        let part = g.slice(x, 0, at, n)?;
        out.push(g.reshape(part, s)?);
        at += n;
    }
    Ok(out)
}

type Primitive = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Each primitive's operand shapes and an input sampler.
struct PrimitiveCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    positive: bool,
    op: Primitive,
}

fn primitive_cases() -> Vec<PrimitiveCase> {
    macro_rules! case {
        ($name:expr, $shapes:expr, $pos:expr, |$g:ident, $v:ident| $body:expr) => {
            PrimitiveCase {
                name: $name,
                shapes: $shapes,
                positive: $pos,
                op: |$g: &mut Graph, $v: &[Var]| -> Result<Var> { $body },
            }
        };
    }
    vec![
        case!("add", &[&[2, 3, 4], &[4]], false, |g, v| g.add(v[0], v[1])),
        case!("sub", &[&[2, 3], &[2, 3]], false, |g, v| g.sub(v[0], v[1])),
        case!("mul", &[&[2, 3, 4], &[3, 4]], false, |g, v| g.mul(v[0], v[1])),
        case!("scale", &[&[5]], false, |g, v| Ok(g.scale(v[0], -1.7))),
        case!("shift", &[&[5]], false, |g, v| {
            let s = g.shift(v[0], 0.3);
            g.mul(s, s)
        }),
        case!("matmul", &[&[2, 3, 4], &[4, 2]], false, |g, v| g.matmul(v[0], v[1])),
        case!("matmul-batched", &[&[2, 2, 3, 3], &[2, 3, 1]], false, |g, v| g.matmul(v[0], v[1])),
        case!("permute", &[&[2, 3, 4]], false, |g, v| g.permute(v[0], &[2, 0, 1])),
        case!("transpose", &[&[3, 4]], false, |g, v| g.transpose(v[0])),
        case!("reshape", &[&[2, 6]], false, |g, v| g.reshape(v[0], &[3, 4])),
        case!("concat", &[&[2, 3], &[2, 2]], false, |g, v| g.concat(&[v[0], v[1]], 1)),
        case!("slice", &[&[4, 3]], false, |g, v| g.slice(v[0], 0, 1, 2)),
        case!("sum", &[&[3, 4]], false, |g, v| g.sum(v[0], 1)),
        case!("mean", &[&[3, 4]], false, |g, v| g.mean(v[0], 0)),
        case!("sum_all", &[&[3, 2]], false, |g, v| {
            let s = g.sum_all(v[0]);
            g.mul(s, s)
        }),
        case!("mean_all", &[&[3, 2]], false, |g, v| {
            let s = g.mean_all(v[0]);
            g.mul(s, s)
        }),
        case!("softmax", &[&[2, 5]], false, |g, v| g.softmax(v[0], 1)),
        case!("layer_norm", &[&[3, 6]], false, |g, v| g.layer_norm(v[0], 1, crate::autodiff::LN_EPS)),
        case!("gelu", &[&[6]], false, |g, v| Ok(g.gelu(v[0]))),
        case!("tanh", &[&[6]], false, |g, v| Ok(g.tanh(v[0]))),
        case!("sin", &[&[6]], false, |g, v| Ok(g.sin(v[0]))),
        case!("cos", &[&[6]], false, |g, v| Ok(g.cos(v[0]))),
        case!("sqrt", &[&[6]], true, |g, v| Ok(g.sqrt(v[0]))),
        case!("reciprocal", &[&[6]], true, |g, v| Ok(g.reciprocal(v[0]))),
        case!("huber", &[&[8]], false, |g, v| Ok(g.huber(v[0], 0.25))),
        case!("embedding", &[&[4, 3]], false, |g, v| g.embedding(v[0], &[2, 0, 2, 3])),
        case!("dropout", &[&[8]], false, |g, v| {
            let mut rng = substream(0, "dropout-mask", 0);
            Ok(g.dropout(v[0], 0.3, &mut rng))
        }),
        case!("so3_exp", &[&[3, 3]], false, |g, v| g.so3_exp(v[0])),
        case!("gram_schmidt", &[&[2, 3, 3]], false, |g, v| g.gram_schmidt(v[0])),
    ]
}

fn sample_input<R: Rng + ?Sized>(case: &PrimitiveCase, rng: &mut R) -> Array {
    let n: usize = case.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    match case.name {
        // rotation vectors away from the small-angle branch
        "so3_exp" => Array::from_fn(&[n], |_| rng.random_range(0.2..1.0) * if rng.random() { 1.0 } else { -1.0 }),
        // well-conditioned near-rotations
        "gram_schmidt" => Array::from_fn(&[n], |k| {
            let diag = if (k % 9) % 4 == 0 { 1.0 } else { 0.0 };
            diag + rng.random_range(-0.3..0.3)
        }),
        _ if case.positive => Array::from_fn(&[n], |_| rng.random_range(0.5..2.0)),
        _ => Array::from_fn(&[n], |_| rng.random_range(-2.0..2.0)),
    }
}

/// Worst relative error of each primitive over [`GRAD_TRIALS`] random
/// inputs, each reduced against fixed random weights.
pub fn primitive_grad_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut out = Vec::new();
    for case in primitive_cases() {
        let mut worst: f64 = 0.0;
        for trial in 0..GRAD_TRIALS {
            let mut rng = substream(seed, case.name, trial);
            let x = sample_input(&case, &mut rng);
            let shapes: Vec<&[usize]> = case.shapes.to_vec();
            // probe the output shape once to build matching weights
            let mut probe = Graph::new();
            let xv = probe.variable(x.clone());
            let parts = split_var(&mut probe, xv, &shapes)?;
            let y = (case.op)(&mut probe, &parts)?;
            let weights = Array::uniform(probe.shape(y), 1.0, &mut rng);
            let report = grad_check(
                |g, xv| {
                    let parts = split_var(g, xv, &shapes)?;
                    let y = (case.op)(g, &parts)?;
                    let w = g.constant(weights.clone());
                    let yw = g.mul(y, w)?;
                    Ok(g.sum_all(yw))
                },
                &x,
                GRAD_TOL,
            )?;
            worst = worst.max(report.max_rel_error);
        }
        out.push((case.name, worst));
    }
    Ok(out)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_heads: 2,
        ffn_ratio: 2,
        prompt_len: 2,
        human_prompt_len: 2,
        dropout: 0.1,
        joints: 2,
        robot_dofs: vec![3, 5],
        window: 3,
    }
}

/// Moves prompts, modulation heads and attention projections away from
/// their initial values so attention is peaked and every parameter
/// receives a gradient well above finite-difference noise.
pub fn randomise_conditioning(model: &mut AdaMorph, seed: u64) {
    let mut rng = substream(seed, "conditioning", 0);
    for (_, p) in model.params.iter_mut() {
        let bound = if p.name.ends_with(".prompt") {
            2.0
        } else if p.name.contains("self_attn.q.w") || p.name.contains("self_attn.k.w") {
            1.0
        } else if p.name.contains(".mod") {
            0.5
        } else {
            continue;
        };
        for x in p.value.data_mut() {
            *x = rng.random_range(-bound..bound);
        }
    }
}

/// Relative error of the full forward pass of the tiny model.
pub fn model_grad_error(seed: u64) -> Result<f64> {
    let cfg = tiny_model_config();
    let mut model = AdaMorph::new(cfg.clone(), seed)?;
    randomise_conditioning(&mut model, seed);
    let mut rng = substream(seed, "model-inputs", 0);
    let x = Array::randn(&[2, cfg.window, cfg.input_width()], 1.0, &mut rng);
    let beta = Array::randn(&[2, BETA_DIM], 1.0, &mut rng);
    let report = grad_check_params(
        |g, store| {
            let y = model.forward_with(store, g, &x, &beta, 1, Mode::Eval)?;
            let s = g.sin(y);
            Ok(g.sum_all(s))
        },
        &model.params,
        GRAD_TOL,
    )?;
    Ok(report.max_rel_error)
}

/// A two-window batch of length 4 for the objective check.
pub fn tiny_objective_batch(seed: u64) -> Result<(Batch, crate::features::NormStats)> {
    let cfg = crate::synth::DataConfig {
        window: 4,
        stride: Some(4),
        train_windows: 2,
        val_windows: 1,
        test_windows: 1,
        zero_shot_windows: 1,
        sequence_seconds: 0.5,
        families: 1,
        robots_per_family: 1,
        ..crate::synth::DataConfig::default()
    };
    let ds = crate::synth::generate_dataset(&cfg, seed)?;
    let stats = crate::trainer::fit_stats(&ds)?;
    let ws: Vec<_> = ds.train.iter().collect();
    Ok((Batch::from_windows(&ws, &stats)?, stats))
}

/// Relative error of the total loss through the integration recursion,
/// at steps with and without teacher forcing.
pub fn objective_grad_error(seed: u64) -> Result<f64> {
    let (batch, stats) = tiny_objective_batch(seed)?;
    let sched = CurriculumSchedule::new(10, 0.5);
    let pred0 = batch.y.map(|v| v * 0.9 + 0.05);
    let mut worst: f64 = 0.0;
    for step in [2, 5, 10] {
        let report = grad_check(
            |g, pred| {
                let mut rng = substream(seed, "teacher-forcing", step as u64);
                Ok(total_loss(g, pred, &batch, &stats, &sched, step, &mut rng)?.total)
            },
            &pred0,
            GRAD_TOL,
        )?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(worst)
}

pub fn grad(seed: u64) -> Result<Vec<CheckResult>> {
    const S: &str = "grad";
    let mut out: Vec<CheckResult> = primitive_grad_errors(seed)?
        .into_iter()
        .map(|(name, e)| CheckResult::below(S, name, e, GRAD_TOL))
        .collect();
    out.push(CheckResult::below(S, "model forward (tiny config)", model_grad_error(seed)?, GRAD_TOL));
    out.push(CheckResult::below(S, "total loss through integration", objective_grad_error(seed)?, GRAD_TOL));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinematics_pass_and_fault_is_detected() {
        let ok = kinematics(3, None).unwrap();
        assert!(ok.iter().all(|c| c.passed), "{ok:?}");
        let bad = kinematics(3, Some(Fault::SkipGramSchmidt)).unwrap();
        assert!(bad.iter().any(|c| !c.passed), "{bad:?}");
    }

    #[test]
    fn geometry_suite_passes() {
        let r = geometry(1).unwrap();
        assert!(r.iter().all(|c| c.passed), "{r:?}");
    }

    #[test]
    fn suite_and_fault_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert_eq!("skip-gram-schmidt".parse::<Fault>().unwrap(), Fault::SkipGramSchmidt);
        assert!("nope".parse::<Suite>().is_err());
    }
}
