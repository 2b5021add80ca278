//! Canonical base-frame motion features and their standardisation.
//!
//! Human frames are laid out as `[v(3), ω(3), g(3), J6(6·J)]`, robot frames
//! as `[v(3), ω(3), g(3), q(N)]`. Velocities are expressed in the root frame,
//! and frame 0 copies the finite differences of frame 1.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::so3::{self, Rotation};

/// Number of root-state channels shared by both layouts.
pub const ROOT_WIDTH: usize = 9;
pub const BETA_DIM: usize = 10;
/// Smallest standard deviation used for standardisation.
pub const STD_FLOOR: f64 = 1e-6;

const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -1.0);

/// Raw human trajectory: root pose plus local joint rotations.
#[derive(Clone, Debug, PartialEq)]
pub struct HumanSequence {
    pub dt: f64,
    pub p: Vec<Vector3<f64>>,
    pub r: Vec<Rotation>,
    /// `theta[t][j]`: local rotation of joint `j` (root excluded).
    pub theta: Vec<Vec<Rotation>>,
    pub beta: [f64; BETA_DIM],
}

/// Raw robot trajectory: base pose plus joint positions.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotSequence {
    pub dt: f64,
    pub p: Vec<Vector3<f64>>,
    pub r: Vec<Rotation>,
    pub q: Vec<Vec<f64>>,
}

impl HumanSequence {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.theta.first().map_or(0, Vec::len)
    }
}

impl RobotSequence {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Row-major `frames × width` feature matrix.
pub trait FeatureRows {
    fn width(&self) -> usize;
    fn data(&self) -> &[f64];

    fn frames(&self) -> usize {
        self.data().len() / self.width()
    }

    fn frame(&self, t: usize) -> &[f64] {
        let w = self.width();
        &self.data()[t * w..(t + 1) * w]
    }

    fn v(&self, t: usize) -> Vector3<f64> {
        Vector3::from_row_slice(&self.frame(t)[0..3])
    }

    fn omega(&self, t: usize) -> Vector3<f64> {
        Vector3::from_row_slice(&self.frame(t)[3..6])
    }

    fn g(&self, t: usize) -> Vector3<f64> {
        Vector3::from_row_slice(&self.frame(t)[6..9])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HumanFeatureSeq {
    pub joints: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotTarget {
    pub dof: usize,
    pub data: Vec<f64>,
}

pub fn human_width(joints: usize) -> usize {
    ROOT_WIDTH + 6 * joints
}

pub fn robot_width(dof: usize) -> usize {
    ROOT_WIDTH + dof
}

impl FeatureRows for HumanFeatureSeq {
    fn width(&self) -> usize {
        human_width(self.joints)
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
}

impl FeatureRows for RobotTarget {
    fn width(&self) -> usize {
        robot_width(self.dof)
    }
    fn data(&self) -> &[f64] {
        &self.data
    }
}

impl HumanFeatureSeq {
    pub fn j6(&self, t: usize, joint: usize) -> so3::Rotation6D {
        let s = &self.frame(t)[ROOT_WIDTH + 6 * joint..ROOT_WIDTH + 6 * joint + 6];
        so3::Rotation6D(s.try_into().expect("six entries"))
    }
}

impl RobotTarget {
    pub fn q(&self, t: usize) -> &[f64] {
        &self.frame(t)[ROOT_WIDTH..]
    }
}

fn check_inputs(len: usize, dt: f64) -> Result<()> {
    if !(dt > 0.0) {
        return Err(Error::InvalidDt(dt));
    }
    if len < 2 {
        return Err(Error::TooShort { len, need: 2 });
    }
    Ok(())
}

/// `v_t = R_tᵀ (p_t − p_{t−1}) / dt`, with `v_0 = v_1`.
pub fn linear_velocity(p: &[Vector3<f64>], r: &[Rotation], dt: f64) -> Result<Vec<Vector3<f64>>> {
    check_inputs(p.len(), dt)?;
    if r.len() != p.len() {
        return Err(Error::WidthMismatch {
            expected: p.len(),
            got: r.len(),
        });
    }
    let mut v: Vec<Vector3<f64>> = Vec::with_capacity(p.len());
    v.push(Vector3::zeros());
    for t in 1..p.len() {
        v.push(r[t].matrix().transpose() * ((p[t] - p[t - 1]) / dt));
    }
    v[0] = v[1];
    Ok(v)
}

/// `ω_t = log(R_{t−1}ᵀ R_t) / dt`, with `ω_0 = ω_1`.
pub fn angular_velocity(r: &[Rotation], dt: f64) -> Result<Vec<Vector3<f64>>> {
    check_inputs(r.len(), dt)?;
    let mut w: Vec<Vector3<f64>> = Vec::with_capacity(r.len());
    w.push(Vector3::zeros());
    for t in 1..r.len() {
        let delta = so3::log_map(&r[t - 1].transpose().compose(&r[t]));
        if std::f64::consts::PI - delta.norm() < 1e-9 {
            return Err(Error::AmbiguousLog(t));
        }
        w.push(delta / dt);
    }
    w[0] = w[1];
    Ok(w)
}

/// World down-vector in the root frame, `Rᵀ [0, 0, −1]`.
pub fn projected_gravity(r: &Rotation) -> Vector3<f64> {
    r.matrix().transpose() * GRAVITY
}

fn root_channels(
    p: &[Vector3<f64>],
    r: &[Rotation],
    dt: f64,
) -> Result<Vec<[f64; ROOT_WIDTH]>> {
    let v = linear_velocity(p, r, dt)?;
    let w = angular_velocity(r, dt)?;
    Ok((0..p.len())
        .map(|t| {
            let g = projected_gravity(&r[t]);
            [v[t].x, v[t].y, v[t].z, w[t].x, w[t].y, w[t].z, g.x, g.y, g.z]
        })
        .collect())
}

pub fn humanseq_to_features(seq: &HumanSequence) -> Result<HumanFeatureSeq> {
    let root = root_channels(&seq.p, &seq.r, seq.dt)?;
    let joints = seq.joints();
    let mut data = Vec::with_capacity(seq.len() * human_width(joints));
    for (t, frame) in root.iter().enumerate() {
        if seq.theta[t].len() != joints {
            return Err(Error::WidthMismatch {
                expected: joints,
                got: seq.theta[t].len(),
            });
        }
        data.extend_from_slice(frame);
        for rot in &seq.theta[t] {
            data.extend_from_slice(&so3::to_6d(rot).0);
        }
    }
    Ok(HumanFeatureSeq { joints, data })
}

pub fn robotseq_to_targets(seq: &RobotSequence) -> Result<RobotTarget> {
    let root = root_channels(&seq.p, &seq.r, seq.dt)?;
    let dof = seq.q.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(seq.len() * robot_width(dof));
    for (t, frame) in root.iter().enumerate() {
        if seq.q[t].len() != dof {
            return Err(Error::WidthMismatch {
                expected: dof,
                got: seq.q[t].len(),
            });
        }
        data.extend_from_slice(frame);
        data.extend_from_slice(&seq.q[t]);
    }
    Ok(RobotTarget { dof, data })
}

/// Per-channel affine standardisation for one feature layout. Channels that
/// pass through unchanged carry mean 0 and std 1, which makes the affine
/// map exactly the identity on them.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(width: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    /// Fits mean and (population) std on the channels where `mask` is true.
    pub fn fit<'a, I>(rows: I, mask: &[bool]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]> + Clone,
    {
        let width = mask.len();
        let mut sum = vec![0.0; width];
        let mut count = 0usize;
        for row in rows.clone() {
            if row.len() != width {
                return Err(Error::WidthMismatch {
                    expected: width,
                    got: row.len(),
                });
            }
            for (s, x) in sum.iter_mut().zip(row) {
                *s += x;
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; width];
        for row in rows {
            for ((s, x), m) in sq.iter_mut().zip(row).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let mut stats = ChannelStats::identity(width);
        for c in 0..width {
            if mask[c] {
                stats.mean[c] = mean[c];
                stats.std[c] = (sq[c] / count as f64).sqrt().max(STD_FLOOR);
            }
        }
        Ok(stats)
    }

    pub fn standardize(&self, data: &mut [f64]) {
        let w = self.width();
        for row in data.chunks_exact_mut(w) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
    }

    pub fn destandardize(&self, data: &mut [f64]) {
        let w = self.width();
        for row in data.chunks_exact_mut(w) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = *x * s + m;
            }
        }
    }
}

/// Velocity and joint channels are standardised; gravity and 6D articulation
/// pass through.
pub fn human_mask(joints: usize) -> Vec<bool> {
    (0..human_width(joints)).map(|c| c < 6).collect()
}

pub fn robot_mask(dof: usize) -> Vec<bool> {
    (0..robot_width(dof)).map(|c| !(6..ROOT_WIDTH).contains(&c)).collect()
}

/// Standardisation statistics fitted on the training split only.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormStats {
    pub human: ChannelStats,
    /// Indexed by robot id.
    pub robots: Vec<ChannelStats>,
}

impl NormStats {
    /// Fits human statistics over `human` feature windows and per-robot
    /// statistics over `(robot_id, target)` pairs.
    pub fn fit<'a>(
        joints: usize,
        human: &[&'a HumanFeatureSeq],
        robots: &[(usize, &'a RobotTarget)],
        robot_dofs: &[usize],
    ) -> Result<Self> {
        if human.is_empty() || robots.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let hrows = human.iter().flat_map(|h| h.data.chunks_exact(human_width(joints)));
        let human_stats = ChannelStats::fit(hrows, &human_mask(joints))?;
        let mut per_robot = Vec::with_capacity(robot_dofs.len());
        for (id, &dof) in robot_dofs.iter().enumerate() {
            let rows = robots
                .iter()
                .filter(move |(r, _)| *r == id)
                .flat_map(move |(_, t)| t.data.chunks_exact(robot_width(dof)));
            per_robot.push(ChannelStats::fit(rows, &robot_mask(dof))?);
        }
        Ok(NormStats {
            human: human_stats,
            robots: per_robot,
        })
    }

    pub fn robot(&self, id: usize) -> Result<&ChannelStats> {
        self.robots.get(id).ok_or_else(|| Error::UnknownRobot {
            id,
            known: (0..self.robots.len()).collect(),
        })
    }
}
