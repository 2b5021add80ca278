//! Synthetic robot embodiments and the linear-in-angles oracle retargeter.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::motion::{joint_axes, NUM_JOINTS};
use crate::features::{HumanSequence, RobotSequence};
use crate::rng::substream;
use crate::so3;

pub const DOF_RANGE: (usize, usize) = (5, 12);
pub const VELOCITY_SCALE_RANGE: (f64, f64) = (0.6, 1.1);
/// Per-row noise norm of family members, relative to the base row norm.
pub const MEMBER_NOISE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentDescriptor {
    pub id: usize,
    pub name: String,
    pub family: usize,
    pub dof: usize,
    /// `dof × joints` row-major mixing matrix.
    pub mixing: Vec<f64>,
    pub offset: Vec<f64>,
    pub velocity_scale: f64,
    pub limits_lo: Vec<f64>,
    pub limits_hi: Vec<f64>,
}

impl EmbodimentDescriptor {
    pub fn joints(&self) -> usize {
        self.mixing.len() / self.dof
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let j = self.joints();
        &self.mixing[i * j..(i + 1) * j]
    }

    /// Maps joint angles to clamped joint positions.
    pub fn joint_positions(&self, angles: &[f64]) -> Vec<f64> {
        (0..self.dof)
            .map(|i| {
                let raw: f64 = self.row(i).iter().zip(angles).map(|(a, x)| a * x).sum::<f64>()
                    + self.offset[i];
                raw.clamp(self.limits_lo[i], self.limits_hi[i])
            })
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        let rows_ok = (0..self.dof).all(|i| {
            let n = self.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            n > 0.0 && n <= 2.0
        });
        (DOF_RANGE.0..=DOF_RANGE.1).contains(&self.dof)
            && self.mixing.len() == self.dof * NUM_JOINTS
            && self.offset.len() == self.dof
            && rows_ok
            && (VELOCITY_SCALE_RANGE.0..=VELOCITY_SCALE_RANGE.1).contains(&self.velocity_scale)
            && self.limits_lo.iter().zip(&self.limits_hi).all(|(lo, hi)| lo < hi)
    }
}

/// Relative Frobenius distance between mixing matrices over their common
/// rows, normalised by the larger of the two norms.
pub fn mixing_distance(a: &EmbodimentDescriptor, b: &EmbodimentDescriptor) -> f64 {
    let rows = a.dof.min(b.dof);
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for i in 0..rows {
        for (x, y) in a.row(i).iter().zip(b.row(i)) {
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
    }
    diff.sqrt() / f64::max(na, nb).sqrt()
}

struct FamilyBase {
    rows: Vec<[f64; NUM_JOINTS]>,
    offset: Vec<f64>,
    half_width: Vec<f64>,
    velocity_scale: f64,
    base_dof: usize,
}

fn signed<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    let x = rng.random_range(lo..=hi);
    if rng.random_bool(0.5) {
        x
    } else {
        -x
    }
}

fn sample_base<R: Rng + ?Sized>(rng: &mut R, rows: usize, base_dof: usize) -> FamilyBase {
    let mut joints: Vec<usize> = (0..NUM_JOINTS).collect();
    joints.shuffle(rng);
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let mut row = [0.0; NUM_JOINTS];
        let primary = joints[i % NUM_JOINTS];
        let mut secondary = rng.random_range(0..NUM_JOINTS);
        if secondary == primary {
            secondary = (secondary + 1) % NUM_JOINTS;
        }
        row[primary] = signed(rng, 0.7, 1.2);
        row[secondary] = signed(rng, 0.1, 0.3);
        out.push(row);
    }
    FamilyBase {
        rows: out,
        offset: (0..rows).map(|_| rng.random_range(-0.3..=0.3)).collect(),
        half_width: (0..rows).map(|_| rng.random_range(1.2..=1.8)).collect(),
        velocity_scale: rng.random_range(0.7..=1.0),
        base_dof,
    }
}

fn member_dof(base: usize, m: usize) -> usize {
    let dof = match m % 3 {
        0 => base,
        1 => base - 1,
        _ => base + 1,
    };
    dof.clamp(DOF_RANGE.0, DOF_RANGE.1)
}

/// Builds `count` robots sharing one family base. Member 0 is the base
/// itself; later members add per-row noise of norm `MEMBER_NOISE · |row|`
/// and alternate their DoF count around the base.
pub fn make_embodiment_family(
    seed: u64,
    family: usize,
    count: usize,
    first_id: usize,
) -> Vec<EmbodimentDescriptor> {
    assert!(count >= 1, "a family needs at least one member");
    let mut rng = substream(seed, "embodiment-family", family as u64);
    let base_dof = rng.random_range(6..=10);
    // one spare row so that larger members extend the base
    let base = sample_base(&mut rng, base_dof + 1, base_dof);

    (0..count)
        .map(|m| {
            let dof = member_dof(base.base_dof, m);
            let mut mrng = substream(seed, "embodiment-member", ((family as u64) << 32) | m as u64);
            let perturb = m > 0;
            let mut mixing = Vec::with_capacity(dof * NUM_JOINTS);
            let mut offset = Vec::with_capacity(dof);
            for i in 0..dof {
                let row = base.rows[i];
                if perturb {
                    let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let dir: Vec<f64> =
                        (0..NUM_JOINTS).map(|_| mrng.sample(rand_distr::StandardNormal)).collect();
                    let dn = dir.iter().map(|a| a * a).sum::<f64>().sqrt();
                    mixing.extend(row.iter().zip(&dir).map(|(a, d)| a + MEMBER_NOISE * norm * d / dn));
                    offset.push(base.offset[i] + mrng.random_range(-0.03..=0.03));
                } else {
                    mixing.extend_from_slice(&row);
                    offset.push(base.offset[i]);
                }
            }
            let velocity_scale = if perturb {
                (base.velocity_scale * (1.0 + mrng.random_range(-0.1..=0.1)))
                    .clamp(VELOCITY_SCALE_RANGE.0, VELOCITY_SCALE_RANGE.1)
            } else {
                base.velocity_scale
            };
            let limits_lo = (0..dof).map(|i| offset[i] - base.half_width[i]).collect();
            let limits_hi = (0..dof).map(|i| offset[i] + base.half_width[i]).collect();
            EmbodimentDescriptor {
                id: first_id + m,
                name: format!("family{family}-robot{m}"),
                family,
                dof,
                mixing,
                offset,
                velocity_scale,
                limits_lo,
                limits_hi,
            }
        })
        .collect()
}

/// `families × per_family` robots with consecutive ids.
pub fn make_embodiments(seed: u64, families: usize, per_family: usize) -> Vec<EmbodimentDescriptor> {
    (0..families)
        .flat_map(|f| make_embodiment_family(seed, f, per_family, f * per_family))
        .collect()
}

/// Signed angle of every joint about its own axis.
pub fn joint_angles(theta: &[so3::Rotation]) -> Vec<f64> {
    let axes = joint_axes();
    theta
        .iter()
        .zip(axes.iter())
        .map(|(r, axis): (&so3::Rotation, &Vector3<f64>)| so3::log_map(r).dot(axis))
        .collect()
}

/// Reference robot motion for a human clip: clamped linear joint map, scaled
/// base translation, copied base orientation.
pub fn oracle_retarget(h: &HumanSequence, e: &EmbodimentDescriptor) -> RobotSequence {
    RobotSequence {
        dt: h.dt,
        p: h.p.iter().map(|p| p * e.velocity_scale).collect(),
        r: h.r.clone(),
        q: h.theta.iter().map(|th| e.joint_positions(&joint_angles(th))).collect(),
    }
}
