//! Training objective: feature reconstruction plus dead-reckoning
//! consistency of the integrated base trajectory.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Var};
use crate::error::{Error, Result};
use crate::features::{ChannelStats, NormStats, BETA_DIM};
use crate::so3::{self, Rotation};
use crate::synth::Window;

pub const HUBER_DELTA: f64 = 0.25;

/// Loss weight warmup and teacher-forcing decay, both linear in the step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub lambda_max: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub tf_start: f64,
    pub tf_end: f64,
}

impl CurriculumSchedule {
    /// Warmup over the first 20% of `total_steps`.
    pub fn new(total_steps: usize, lambda_max: f64) -> Self {
        CurriculumSchedule {
            lambda_max,
            warmup_steps: (total_steps as f64 * 0.2).round() as usize,
            total_steps,
            tf_start: 1.0,
            tf_end: 0.0,
        }
    }

    pub fn lambda_at(&self, s: usize) -> f64 {
        if s >= self.warmup_steps {
            self.lambda_max
        } else {
            self.lambda_max * s as f64 / self.warmup_steps as f64
        }
    }

    pub fn alpha_at(&self, s: usize) -> f64 {
        if self.total_steps == 0 {
            return self.tf_end;
        }
        let frac = (s as f64 / self.total_steps as f64).min(1.0);
        self.tf_start + (self.tf_end - self.tf_start) * frac
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_inst: f64,
    pub l_rot: f64,
    pub l_traj: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub alpha: f64,
}

/// Windows of one robot packed into dense arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub robot: usize,
    pub dt: f64,
    /// `[B, T, 9+6J]`, standardised.
    pub x: Array,
    /// `[B, 10]`.
    pub beta: Array,
    /// `[B, T, 9+N]`, standardised.
    pub y: Array,
    /// `[B, T, 3]` ground-truth base positions.
    pub p: Array,
    /// `[B, T, 3, 3]` ground-truth base orientations.
    pub r: Array,
}

impl Batch {
    pub fn from_windows(windows: &[&Window], stats: &NormStats) -> Result<Self> {
        let first = windows.first().ok_or(Error::EmptyDataset)?;
        let (robot, t, dt) = (first.robot, first.len(), first.dt);
        let b = windows.len();
        let hw = first.human.data.len() / t;
        let rw = first.target.data.len() / t;
        let rstats = stats.robot(robot)?;
        if stats.human.width() != hw {
            return Err(Error::WidthMismatch {
                expected: stats.human.width(),
                got: hw,
            });
        }
        if rstats.width() != rw {
            return Err(Error::WidthMismatch {
                expected: rstats.width(),
                got: rw,
            });
        }
        let mut x = Vec::with_capacity(b * t * hw);
        let mut beta = Vec::with_capacity(b * BETA_DIM);
        let mut y = Vec::with_capacity(b * t * rw);
        let mut p = Vec::with_capacity(b * t * 3);
        let mut r = Vec::with_capacity(b * t * 9);
        for w in windows {
            if w.robot != robot || w.len() != t || w.human.data.len() != t * hw || w.target.data.len() != t * rw {
                return Err(Error::Config("batch windows must share robot and shape".into()));
            }
            let start = x.len();
            x.extend_from_slice(&w.human.data);
            stats.human.standardize(&mut x[start..]);
            let start = y.len();
            y.extend_from_slice(&w.target.data);
            rstats.standardize(&mut y[start..]);
            beta.extend_from_slice(&w.beta);
            for pt in &w.p {
                p.extend_from_slice(pt.as_slice());
            }
            for rt in &w.r {
                r.extend_from_slice(&rt.to_row_array());
            }
        }
        Ok(Batch {
            robot,
            dt,
            x: Array::new(vec![b, t, hw], x)?,
            beta: Array::new(vec![b, BETA_DIM], beta)?,
            y: Array::new(vec![b, t, rw], y)?,
            p: Array::new(vec![b, t, 3], p)?,
            r: Array::new(vec![b, t, 3, 3], r)?,
        })
    }

    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.x.shape()[1]
    }
}

/// Mean over batch and frames of the squared per-frame L2 error.
pub fn loss_inst(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (g.shape(pred).to_vec(), g.shape(target).to_vec());
    if ps != ts || ps.is_empty() {
        return Err(Error::shape("loss_inst", &ps, &ts));
    }
    let frames: usize = ps[..ps.len() - 1].iter().product();
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq);
    Ok(g.scale(s, 1.0 / frames as f64))
}

/// Integrated base trajectory on the tape: per-frame `[B, 3, 3]` rotations
/// and `[B, 3]` positions, frame 0 being the initial state.
pub struct Trajectory {
    pub r: Vec<Var>,
    pub p: Vec<Var>,
}

fn destandardize(g: &mut Graph, x: Var, stats: &ChannelStats, offset: usize) -> Result<Var> {
    let std = g.constant(Array::from_vec(stats.std[offset..offset + 3].to_vec()));
    let mean = g.constant(Array::from_vec(stats.mean[offset..offset + 3].to_vec()));
    let y = g.mul(x, std)?;
    g.add(y, mean)
}

fn frame(g: &mut Graph, x: Var, t: usize) -> Result<Var> {
    let mut shape = g.shape(x).to_vec();
    let f = g.slice(x, 1, t, 1)?;
    shape.remove(1);
    g.reshape(f, &shape)
}

/// `R̂_t = GS(R̂_{t−1} exp(ω̂_t dt))`, `p̂_t = p̂_{t−1} + R̃_t v̂_t dt`, where
/// `R̃_t` is the ground-truth rotation with probability `alpha` (drawn per
/// window and frame) and `R̂_t` otherwise. `v_std`, `w_std` are `[B, T, 3]`
/// standardised network outputs; `r_gt` is `[B, T, 3, 3]`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_trajectory<R: Rng + ?Sized>(
    g: &mut Graph,
    v_std: Var,
    w_std: Var,
    stats: &ChannelStats,
    r_gt: &Array,
    p0: &Array,
    dt: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<Trajectory> {
    integrate_with(g, v_std, w_std, stats, r_gt, p0, dt, alpha, rng, true)
}

/// Same recursion with the projection switchable, for fault injection.
#[allow(clippy::too_many_arguments)]
pub fn integrate_with<R: Rng + ?Sized>(
    g: &mut Graph,
    v_std: Var,
    w_std: Var,
    stats: &ChannelStats,
    r_gt: &Array,
    p0: &Array,
    dt: f64,
    alpha: f64,
    rng: &mut R,
    project: bool,
) -> Result<Trajectory> {
    let s = g.shape(v_std).to_vec();
    if s.len() != 3 || s[2] != 3 || g.shape(w_std) != s.as_slice() {
        return Err(Error::shape("integrate_trajectory", &s, g.shape(w_std)));
    }
    let (b, t) = (s[0], s[1]);
    if r_gt.shape() != [b, t, 3, 3] {
        return Err(Error::shape("integrate_trajectory r_gt", &[b, t, 3, 3], r_gt.shape()));
    }
    let v = destandardize(g, v_std, stats, 0)?;
    let w = destandardize(g, w_std, stats, 3)?;
    let wdt = g.scale(w, dt);
    let exps = g.so3_exp(wdt)?;

    let gt_frame = |i: usize| -> Array {
        let mut out = Vec::with_capacity(b * 9);
        for bi in 0..b {
            let at = (bi * t + i) * 9;
            out.extend_from_slice(&r_gt.data()[at..at + 9]);
        }
        Array::new(vec![b, 3, 3], out).expect("frame shape")
    };
    let mut rs = vec![g.constant(gt_frame(0))];
    let mut ps = vec![g.constant(p0.clone())];
    for i in 1..t {
        let e = frame(g, exps, i)?;
        let prod = g.matmul(rs[i - 1], e)?;
        let r_i = if project { g.gram_schmidt(prod)? } else { prod };
        rs.push(r_i);

        let mask: Vec<bool> = (0..b).map(|_| alpha > 0.0 && rng.random::<f64>() < alpha).collect();
        let r_tilde = if mask.iter().any(|&m| m) {
            let m = Array::from_fn(&[b, 3, 3], |k| if mask[k / 9] { 1.0 } else { 0.0 });
            let keep = m.map(|x| 1.0 - x);
            let gt = g.constant(gt_frame(i));
            let mv = g.constant(m);
            let kv = g.constant(keep);
            let a = g.mul(gt, mv)?;
            let c = g.mul(r_i, kv)?;
            g.add(a, c)?
        } else {
            r_i
        };
        let v_i = frame(g, v, i)?;
        let v_i = g.reshape(v_i, &[b, 3, 1])?;
        let step = g.matmul(r_tilde, v_i)?;
        let step = g.reshape(step, &[b, 3])?;
        let step = g.scale(step, dt);
        ps.push(g.add(ps[i - 1], step)?);
    }
    Ok(Trajectory { r: rs, p: ps })
}

fn stack_from_one(g: &mut Graph, frames: &[Var]) -> Result<Var> {
    let mut parts = Vec::with_capacity(frames.len() - 1);
    for &f in &frames[1..] {
        let mut shape = g.shape(f).to_vec();
        shape.insert(1, 1);
        parts.push(g.reshape(f, &shape)?);
    }
    g.concat(&parts, 1)
}

fn gt_from_one(a: &Array) -> Array {
    let s = a.shape();
    let (b, t) = (s[0], s[1]);
    let per: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(b * (t - 1) * per);
    for bi in 0..b {
        out.extend_from_slice(&a.data()[(bi * t + 1) * per..(bi + 1) * t * per]);
    }
    let mut shape = s.to_vec();
    shape[1] = t - 1;
    Array::new(shape, out).expect("consistent shape")
}

/// Mean over frames `t ≥ 1` of `1 − (tr(R̂ᵀR) − 1)/2`.
pub fn loss_rot(g: &mut Graph, traj: &Trajectory, r_gt: &Array) -> Result<Var> {
    if traj.r.len() < 2 {
        return Ok(g.constant(Array::scalar(0.0)));
    }
    let pred = stack_from_one(g, &traj.r)?;
    let gt = g.constant(gt_from_one(r_gt));
    let prod = g.mul(pred, gt)?;
    let s = g.sum(prod, 3)?;
    let tr = g.sum(s, 2)?;
    let term = g.scale(tr, -0.5);
    let term = g.shift(term, 1.5);
    Ok(g.mean_all(term))
}

/// Mean over frames `t ≥ 1` of the per-axis Huber loss on displacements
/// from frame 0, summed over axes.
pub fn loss_traj(g: &mut Graph, traj: &Trajectory, p_gt: &Array, delta: f64) -> Result<Var> {
    if traj.p.len() < 2 {
        return Ok(g.constant(Array::scalar(0.0)));
    }
    let b = p_gt.shape()[0];
    let t = traj.p.len();
    let pred = stack_from_one(g, &traj.p)?;
    let p0 = traj.p[0];
    let p0 = g.reshape(p0, &[b, 1, 3])?;
    let p0 = g.concat(&vec![p0; t - 1], 1)?;
    let d_pred = g.sub(pred, p0)?;
    let gt = gt_from_one(p_gt);
    let d_gt = Array::from_fn(gt.shape(), |k| {
        let bi = k / ((t - 1) * 3);
        gt.data()[k] - p_gt.data()[bi * t * 3 + k % 3]
    });
    let d_gt = g.constant(d_gt);
    let err = g.sub(d_pred, d_gt)?;
    let h = g.huber(err, delta);
    let s = g.sum_all(h);
    Ok(g.scale(s, 1.0 / (b * (t - 1)) as f64))
}

/// `l_inst + λ(s)(l_rot + l_traj)` for network output `pred: [B, T, 9+N]`.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

pub fn total_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    pred: Var,
    batch: &Batch,
    stats: &NormStats,
    schedule: &CurriculumSchedule,
    step: usize,
    rng: &mut R,
) -> Result<Objective> {
    let lambda = schedule.lambda_at(step);
    let alpha = schedule.alpha_at(step);
    let y = g.constant(batch.y.clone());
    let l_inst = loss_inst(g, pred, y)?;
    let rstats = stats.robot(batch.robot)?;
    let v = g.slice(pred, 2, 0, 3)?;
    let w = g.slice(pred, 2, 3, 3)?;
    let b = batch.size();
    let p0 = Array::new(vec![b, 3], (0..b).flat_map(|i| {
        let at = i * batch.frames() * 3;
        batch.p.data()[at..at + 3].to_vec()
    }).collect())?;
    let traj = integrate_trajectory(g, v, w, rstats, &batch.r, &p0, batch.dt, alpha, rng)?;
    let l_rot = loss_rot(g, &traj, &batch.r)?;
    let l_traj = loss_traj(g, &traj, &batch.p, HUBER_DELTA)?;
    let phys = g.add(l_rot, l_traj)?;
    let weighted = g.scale(phys, lambda);
    let total = g.add(l_inst, weighted)?;
    let (li, lr, lt) = (g.value(l_inst).item(), g.value(l_rot).item(), g.value(l_traj).item());
    Ok(Objective {
        total,
        breakdown: LossBreakdown {
            l_inst: li,
            l_rot: lr,
            l_traj: lt,
            l_total: g.value(total).item(),
            lambda,
            alpha,
        },
    })
}

/// Off-tape dead reckoning from physical velocities.
pub fn integrate_plain(
    v: &[Vector3<f64>],
    w: &[Vector3<f64>],
    r0: &Rotation,
    p0: &Vector3<f64>,
    dt: f64,
) -> Result<(Vec<Rotation>, Vec<Vector3<f64>>)> {
    let mut rs = vec![*r0];
    let mut ps = vec![*p0];
    for t in 1..v.len() {
        let m: Matrix3<f64> = rs[t - 1].matrix() * so3::exp_map(&(w[t] * dt)).matrix();
        let r = so3::gram_schmidt_project(&m)?;
        ps.push(ps[t - 1] + r.rotate(&v[t]) * dt);
        rs.push(r);
    }
    Ok((rs, ps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::features::{robot_width, FeatureRows};
    use crate::rng::substream;
    use crate::synth::{generate_dataset, DataConfig};

    fn identity_stats(dof: usize) -> ChannelStats {
        ChannelStats::identity(robot_width(dof))
    }

    fn rot_array(rs: &[Rotation], b: usize) -> Array {
        let t = rs.len();
        Array::from_fn(&[b, t, 3, 3], |k| rs[(k / 9) % t].to_row_array()[k % 9])
    }

    #[test]
    fn schedule_endpoints() {
        let s = CurriculumSchedule::new(2000, 0.5);
        assert_eq!(s.warmup_steps, 400);
        assert_eq!(s.lambda_at(0), 0.0);
        assert_eq!(s.lambda_at(200), 0.25);
        assert_eq!(s.lambda_at(400), 0.5);
        assert_eq!(s.lambda_at(5000), 0.5);
        assert_eq!(s.alpha_at(0), 1.0);
        assert_eq!(s.alpha_at(2000), 0.0);
        for k in 1..2000 {
            assert!(s.lambda_at(k) >= s.lambda_at(k - 1));
            assert!(s.alpha_at(k) <= s.alpha_at(k - 1));
        }
    }

    #[test]
    fn loss_inst_examples() {
        let mut g = Graph::new();
        let y = Array::from_fn(&[2, 3, 4], |i| (i as f64).cos());
        let yv = g.constant(y.clone());
        let l = loss_inst(&mut g, yv, yv).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let shifted = Array::from_fn(&[2, 3, 4], |i| y.data()[i] + if i % 4 == 2 { 1.0 } else { 0.0 });
        let sv = g.constant(shifted.clone());
        let l = loss_inst(&mut g, sv, yv).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        let pred = Array::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin());
        let pv = g.constant(pred.clone());
        let l = loss_inst(&mut g, pv, yv).unwrap();
        let mut brute = 0.0;
        for f in 0..6 {
            for c in 0..4 {
                brute += (pred.data()[f * 4 + c] - y.data()[f * 4 + c]).powi(2);
            }
        }
        assert!((g.value(l).item() - brute / 6.0).abs() < 1e-12);
        let other = g.constant(Array::zeros(&[2, 3, 5]));
        assert!(loss_inst(&mut g, pv, other).is_err());
    }

    #[test]
    fn constant_velocity_integrates_to_one_metre() {
        let t = 31;
        let mut g = Graph::new();
        let v = g.constant(Array::from_fn(&[1, t, 3], |k| if k % 3 == 0 { 1.0 } else { 0.0 }));
        let w = g.constant(Array::zeros(&[1, t, 3]));
        let r_gt = rot_array(&vec![Rotation::identity(); t], 1);
        let traj = integrate_trajectory(
            &mut g,
            v,
            w,
            &identity_stats(0),
            &r_gt,
            &Array::zeros(&[1, 3]),
            1.0 / 30.0,
            0.0,
            &mut substream(0, "tf", 0),
        )
        .unwrap();
        let last = g.value(traj.p[t - 1]).data().to_vec();
        assert!((last[0] - 1.0).abs() < 1e-12 && last[1].abs() < 1e-15 && last[2].abs() < 1e-15);
    }

    fn ground_truth_case(alpha: f64, seed: u64) -> (f64, f64) {
        let cfg = DataConfig {
            window: 60,
            train_windows: 1,
            val_windows: 1,
            test_windows: 1,
            zero_shot_windows: 1,
            sequence_seconds: 2.5,
            families: 1,
            robots_per_family: 1,
            ..DataConfig::default()
        };
        let ds = generate_dataset(&cfg, seed).unwrap();
        let w = &ds.train[0];
        let t = w.len();
        let mut g = Graph::new();
        let v = g.constant(Array::from_fn(&[1, t, 3], |k| w.target.frame(k / 3)[k % 3]));
        let om = g.constant(Array::from_fn(&[1, t, 3], |k| w.target.frame(k / 3)[3 + k % 3]));
        let r_gt = rot_array(&w.r, 1);
        let p0 = Array::from_vec(w.p[0].as_slice().to_vec()).reshape(&[1, 3]).unwrap();
        let traj = integrate_trajectory(
            &mut g,
            v,
            om,
            &identity_stats(w.target.dof),
            &r_gt,
            &p0,
            w.dt,
            alpha,
            &mut substream(seed, "tf", 0),
        )
        .unwrap();
        let mut perr: f64 = 0.0;
        let mut rerr: f64 = 0.0;
        for i in 0..t {
            let p = g.value(traj.p[i]).data();
            perr = perr.max((Vector3::from_row_slice(p) - w.p[i]).norm());
            let r = Rotation::from_matrix_unchecked(Matrix3::from_row_slice(g.value(traj.r[i]).data()));
            rerr = rerr.max(so3::geodesic_term(&r, &w.r[i]));
        }
        (perr, rerr)
    }

    #[test]
    fn ground_truth_round_trip_is_exact() {
        for seed in 0..3 {
            let (perr, rerr) = ground_truth_case(0.0, seed);
            assert!(perr < 1e-8 && rerr < 1e-8, "{perr} {rerr}");
        }
    }

    #[test]
    fn full_teacher_forcing_ignores_rng() {
        let run = |seed: u64| {
            let mut g = Graph::new();
            let v = g.constant(Array::from_fn(&[2, 5, 3], |k| (k as f64 * 0.3).sin()));
            let w = g.constant(Array::from_fn(&[2, 5, 3], |k| (k as f64 * 0.2).cos()));
            let rs: Vec<Rotation> = (0..5).map(|i| Rotation::yaw(i as f64 * 0.1)).collect();
            let traj = integrate_trajectory(
                &mut g,
                v,
                w,
                &identity_stats(0),
                &rot_array(&rs, 2),
                &Array::zeros(&[2, 3]),
                0.1,
                1.0,
                &mut substream(seed, "tf", 0),
            )
            .unwrap();
            g.value(*traj.p.last().unwrap()).clone()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn rot_loss_examples() {
        let t = 4;
        let rs: Vec<Rotation> = (0..t).map(|i| Rotation::yaw(i as f64 * 0.2)).collect();
        let flip = so3::exp_map(&Vector3::new(std::f64::consts::PI, 0.0, 0.0));
        let mut g = Graph::new();
        let exact = Trajectory {
            r: rs.iter().map(|r| g.constant(Array::new(vec![1, 3, 3], r.to_row_array().to_vec()).unwrap())).collect(),
            p: vec![],
        };
        let l = loss_rot(&mut g, &exact, &rot_array(&rs, 1)).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
        let off = Trajectory {
            r: rs
                .iter()
                .map(|r| g.constant(Array::new(vec![1, 3, 3], r.compose(&flip).to_row_array().to_vec()).unwrap()))
                .collect(),
            p: vec![],
        };
        let l = loss_rot(&mut g, &off, &rot_array(&rs, 1)).unwrap();
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn traj_loss_examples() {
        let t = 5;
        let gt = Array::from_fn(&[1, t, 3], |k| k as f64 * 0.1);
        let mut g = Graph::new();
        let frames = |g: &mut Graph, off: f64| -> Trajectory {
            Trajectory {
                r: vec![],
                p: (0..t)
                    .map(|i| {
                        let e = if i == 0 { 0.0 } else { off };
                        g.constant(Array::from_fn(&[1, 3], |c| gt.data()[i * 3 + c] + e))
                    })
                    .collect(),
            }
        };
        let exact = frames(&mut g, 0.0);
        let l = loss_traj(&mut g, &exact, &gt, 0.25).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);
        let small = frames(&mut g, 0.1);
        let l = loss_traj(&mut g, &small, &gt, 0.25).unwrap();
        assert!((g.value(l).item() - 0.015).abs() < 1e-12);
        let big = frames(&mut g, 1.0);
        let l = loss_traj(&mut g, &big, &gt, 0.25).unwrap();
        assert!((g.value(l).item() - 3.0 * 0.25 * (1.0 - 0.125)).abs() < 1e-12);
    }

    fn tiny_batch() -> (Batch, NormStats) {
        let cfg = DataConfig {
            window: 4,
            stride: Some(4),
            train_windows: 2,
            val_windows: 1,
            test_windows: 1,
            zero_shot_windows: 1,
            sequence_seconds: 0.5,
            families: 1,
            robots_per_family: 1,
            ..DataConfig::default()
        };
        let ds = generate_dataset(&cfg, 7).unwrap();
        let h: Vec<_> = ds.train.iter().map(|w| &w.human).collect();
        let r: Vec<_> = ds.train.iter().map(|w| (w.robot, &w.target)).collect();
        let stats = NormStats::fit(12, &h, &r, &ds.robot_dofs()).unwrap();
        let ws: Vec<&Window> = ds.train.iter().collect();
        (Batch::from_windows(&ws, &stats).unwrap(), stats)
    }

    #[test]
    fn breakdown_identity_and_lambda_zero() {
        let (batch, stats) = tiny_batch();
        let sched = CurriculumSchedule::new(100, 0.5);
        let noisy = batch.y.map(|v| v + 0.1);
        for step in [0, 10, 50] {
            let mut g = Graph::new();
            let pred = g.variable(noisy.clone());
            let o = total_loss(&mut g, pred, &batch, &stats, &sched, step, &mut substream(0, "tf", step as u64)).unwrap();
            let b = o.breakdown;
            assert!((b.l_total - (b.l_inst + b.lambda * (b.l_rot + b.l_traj))).abs() < 1e-12);
            assert!(b.l_rot >= 0.0 && b.l_traj >= 0.0 && b.l_inst >= 0.0);
            if step == 0 {
                assert_eq!(b.l_total, b.l_inst);
            }
        }
    }

    #[test]
    fn total_loss_gradient_through_integration() {
        let (batch, stats) = tiny_batch();
        let sched = CurriculumSchedule::new(10, 0.5);
        let pred0 = batch.y.map(|v| v * 0.9 + 0.05);
        for step in [2, 5] {
            let report = grad_check(
                |g, pred| {
                    let o = total_loss(g, pred, &batch, &stats, &sched, step, &mut substream(3, "tf", step as u64))?;
                    Ok(o.total)
                },
                &pred0,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn plain_integration_matches_tape() {
        let (batch, stats) = tiny_batch();
        let rs = stats.robot(0).unwrap();
        let t = batch.frames();
        let mut phys = batch.y.clone();
        rs.destandardize(phys.data_mut());
        let w = phys.shape()[2];
        let v: Vec<_> = (0..t).map(|i| Vector3::from_row_slice(&phys.data()[i * w..i * w + 3])).collect();
        let om: Vec<_> = (0..t).map(|i| Vector3::from_row_slice(&phys.data()[i * w + 3..i * w + 6])).collect();
        let r0 = Rotation::from_row_slice(&batch.r.data()[..9]).unwrap();
        let p0 = Vector3::from_row_slice(&batch.p.data()[..3]);
        let (_, ps) = integrate_plain(&v, &om, &r0, &p0, batch.dt).unwrap();
        for i in 0..t {
            let gt = Vector3::from_row_slice(&batch.p.data()[i * 3..i * 3 + 3]);
            assert!((ps[i] - gt).norm() < 1e-10);
        }
    }
}
