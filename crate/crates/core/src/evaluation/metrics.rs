use crate::features::{FeatureRows, HumanFeatureSeq, RobotTarget};
use crate::so3;

/// Pearson correlation; `None` when the lengths differ, fewer than two
/// samples are given, or either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    // Relative floor: a series whose spread is rounding noise of its mean is constant.
    let floor = |s: f64, m: f64| s <= (1e-12 * (1.0 + m.abs())).powi(2) * n;
    if floor(saa, ma) || floor(sbb, mb) {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn speed_profile<F: FeatureRows>(rows: &F) -> Vec<f64> {
    (0..rows.frames()).map(|t| rows.v(t).norm()).collect()
}

/// Mean joint angular speed between consecutive frames, length `T − 1`.
pub fn human_activity(human: &HumanFeatureSeq, dt: f64) -> Vec<f64> {
    let t = human.frames();
    let j = human.joints;
    let rots: Vec<Vec<so3::Rotation>> = (0..t)
        .map(|k| {
            (0..j)
                .map(|i| so3::from_6d(&human.j6(k, i)).unwrap_or_else(|_| so3::Rotation::identity()))
                .collect()
        })
        .collect();
    (1..t)
        .map(|k| {
            let total: f64 = (0..j)
                .map(|i| so3::geodesic_angle(&rots[k - 1][i], &rots[k][i]))
                .sum();
            total / (j as f64 * dt)
        })
        .collect()
}

/// Mean absolute joint speed between consecutive frames, length `T − 1`.
pub fn robot_activity(robot: &RobotTarget, dt: f64) -> Vec<f64> {
    let n = robot.dof as f64;
    (1..robot.frames())
        .map(|k| {
            let s: f64 = robot.q(k).iter().zip(robot.q(k - 1)).map(|(a, b)| (a - b).abs()).sum();
            s / (n * dt)
        })
        .collect()
}

pub fn root_velocity_pcc(human: &HumanFeatureSeq, robot: &RobotTarget) -> Option<f64> {
    pearson(&speed_profile(human), &speed_profile(robot))
}

pub fn activity_pcc(human: &HumanFeatureSeq, robot: &RobotTarget, dt: f64) -> Option<f64> {
    if human.frames() < 3 || human.frames() != robot.frames() {
        return None;
    }
    pearson(&human_activity(human, dt), &robot_activity(robot, dt))
}

/// Order statistics over the defined values; `None` entries are counted.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub undefined: usize,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

impl Distribution {
    pub fn from_values(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut undefined = 0;
        let mut v: Vec<f64> = values
            .into_iter()
            .filter_map(|x| {
                if x.is_none() {
                    undefined += 1;
                }
                x
            })
            .collect();
        v.sort_by(f64::total_cmp);
        Distribution {
            count: v.len(),
            undefined,
            median: quantile(&v, 0.5),
            q1: quantile(&v, 0.25),
            q3: quantile(&v, 0.75),
            min: v.first().copied(),
            max: v.last().copied(),
        }
    }
}
