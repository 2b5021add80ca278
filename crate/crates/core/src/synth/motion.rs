//! Analytic synthetic human motion.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::{HumanSequence, BETA_DIM};
use crate::so3::{self, Rotation};

pub const NUM_JOINTS: usize = 12;
pub const CAPTURE_RATE_HZ: f64 = 120.0;
pub const FREQ_RANGE: (f64, f64) = (0.3, 2.5);
pub const SPEED_RANGE: (f64, f64) = (0.0, 1.5);
pub const LIMB_SCALE_RANGE: (f64, f64) = (0.7, 1.3);
const ROOT_HEIGHT: f64 = 0.9;

// Joint layout: 0-2 left hip/knee/ankle, 3-5 right hip/knee/ankle, 6 spine,
// 7 neck, 8-9 left shoulder/elbow, 10-11 right shoulder/elbow.
const SPINE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StyleFamily {
    Walk,
    Turn,
    Wave,
    Squat,
    Mixed,
}

impl StyleFamily {
    pub const ALL: [StyleFamily; 5] = [
        StyleFamily::Walk,
        StyleFamily::Turn,
        StyleFamily::Wave,
        StyleFamily::Squat,
        StyleFamily::Mixed,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            StyleFamily::Walk => "walk",
            StyleFamily::Turn => "turn",
            StyleFamily::Wave => "wave",
            StyleFamily::Squat => "squat",
            StyleFamily::Mixed => "mixed",
        }
    }
}

impl std::str::FromStr for StyleFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown style family {s:?}"))
    }
}

/// Joint axes and the shape-dependent limb scales.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSkeleton {
    pub axes: [Vector3<f64>; NUM_JOINTS],
    pub limb_scales: [f64; NUM_JOINTS],
}

/// Fixed unit rotation axis of every joint.
pub fn joint_axes() -> [Vector3<f64>; NUM_JOINTS] {
    let raw = [
        [1.0, 0.1, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 0.0, 0.15],
        [1.0, -0.1, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 0.0, -0.15],
        [0.6, 0.0, 0.8],
        [0.3, 0.0, 1.0],
        [0.8, 0.6, 0.0],
        [0.2, 1.0, 0.1],
        [0.8, -0.6, 0.0],
        [0.2, -1.0, -0.1],
    ];
    raw.map(|a| Vector3::from(a).normalize())
}

impl SyntheticSkeleton {
    /// Limb scales are an affine function of `beta`, clamped to
    /// [`LIMB_SCALE_RANGE`].
    pub fn new(beta: &[f64; BETA_DIM]) -> Self {
        let limb_scales = std::array::from_fn(|j| {
            let proj: f64 = (0..BETA_DIM)
                .map(|i| (1.3 * j as f64 + 0.7 * i as f64 + 0.5).sin() * beta[i])
                .sum();
            (1.0 + 0.06 * proj).clamp(LIMB_SCALE_RANGE.0, LIMB_SCALE_RANGE.1)
        });
        SyntheticSkeleton {
            axes: joint_axes(),
            limb_scales,
        }
    }
}

/// Parameters of one analytic motion clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionStyleParams {
    pub style: StyleFamily,
    /// Per-joint amplitude (rad), frequency (Hz), phase (rad).
    pub amplitude: [f64; NUM_JOINTS],
    pub frequency: [f64; NUM_JOINTS],
    pub phase: [f64; NUM_JOINTS],
    /// Geometric path curvature (1/m); heading = heading0 + curvature · distance.
    pub curvature: f64,
    pub heading0: f64,
    /// Mean forward speed (m/s).
    pub speed: f64,
    /// Relative speed oscillation, `speed · (1 + m sin(2π f t + φ))`.
    pub speed_modulation: f64,
    pub gait_frequency: f64,
    pub gait_phase: f64,
    pub bob_amplitude: f64,
    pub bob_frequency: f64,
    pub roll_amplitude: f64,
    pub pitch_amplitude: f64,
}

impl MotionStyleParams {
    /// Stationary clip with every joint at rest.
    pub fn still(style: StyleFamily) -> Self {
        MotionStyleParams {
            style,
            amplitude: [0.0; NUM_JOINTS],
            frequency: [1.0; NUM_JOINTS],
            phase: [0.0; NUM_JOINTS],
            curvature: 0.0,
            heading0: 0.0,
            speed: 0.0,
            speed_modulation: 0.0,
            gait_frequency: 1.0,
            gait_phase: 0.0,
            bob_amplitude: 0.0,
            bob_frequency: 1.0,
            roll_amplitude: 0.0,
            pitch_amplitude: 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(style: StyleFamily, rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..=hi);
        let mut p = MotionStyleParams::still(style);
        let (f_lo, f_hi, speed, modulation, curvature, bob) = match style {
            StyleFamily::Walk => (0.8, 1.4, (0.8, 1.4), (0.25, 0.4), 0.2, (0.02, 0.04)),
            StyleFamily::Turn => (0.6, 1.0, (0.3, 0.7), (0.2, 0.35), 1.5, (0.01, 0.03)),
            StyleFamily::Wave => (0.8, 1.6, (0.05, 0.3), (0.3, 0.5), 0.3, (0.01, 0.02)),
            StyleFamily::Squat => (0.3, 0.6, (0.0, 0.0), (0.0, 0.0), 0.0, (0.15, 0.25)),
            StyleFamily::Mixed => (0.5, 1.5, (0.3, 1.0), (0.2, 0.4), 0.6, (0.01, 0.04)),
        };
        let f0 = u(f_lo, f_hi);
        let phi0 = u(0.0, TAU);
        p.gait_frequency = f0;
        p.gait_phase = phi0;
        p.speed = u(speed.0, speed.1);
        p.speed_modulation = u(modulation.0, modulation.1);
        p.curvature = match style {
            StyleFamily::Turn => {
                let k = u(0.8, curvature);
                if u(0.0, 1.0) < 0.5 {
                    -k
                } else {
                    k
                }
            }
            _ => u(-curvature, curvature),
        };
        p.heading0 = u(-PI, PI);
        p.bob_amplitude = u(bob.0, bob.1);
        p.bob_frequency = if style == StyleFamily::Squat { f0 } else { 2.0 * f0 };
        p.roll_amplitude = u(0.02, 0.08);
        p.pitch_amplitude = u(0.02, 0.08);

        let arm_f = if style == StyleFamily::Mixed { u(0.5, 1.5) } else { f0 };
        p.frequency = std::array::from_fn(|j| if j >= SPINE { arm_f } else { f0 });
        let arm_phi = if style == StyleFamily::Mixed { u(0.0, TAU) } else { phi0 };
        let (left, right) = if style == StyleFamily::Squat {
            (0.0, 0.0)
        } else {
            (0.0, PI)
        };
        p.phase = [
            phi0 + left,
            phi0 + left + 0.5,
            phi0 + left + 1.0,
            phi0 + right,
            phi0 + right + 0.5,
            phi0 + right + 1.0,
            arm_phi,
            arm_phi + 0.3,
            arm_phi + right,
            arm_phi + right + 0.4,
            arm_phi + left,
            arm_phi + left + 0.4,
        ];
        let ranges: [(f64, f64); NUM_JOINTS] = match style {
            StyleFamily::Walk => [
                (0.4, 0.8), (0.5, 0.9), (0.2, 0.4), (0.4, 0.8), (0.5, 0.9), (0.2, 0.4),
                (0.05, 0.15), (0.05, 0.1), (0.2, 0.5), (0.2, 0.4), (0.2, 0.5), (0.2, 0.4),
            ],
            StyleFamily::Turn => [
                (0.2, 0.4), (0.3, 0.5), (0.1, 0.2), (0.2, 0.4), (0.3, 0.5), (0.1, 0.2),
                (0.1, 0.3), (0.1, 0.2), (0.1, 0.3), (0.1, 0.3), (0.1, 0.3), (0.1, 0.3),
            ],
            StyleFamily::Wave => [
                (0.0, 0.1), (0.0, 0.1), (0.0, 0.05), (0.0, 0.1), (0.0, 0.1), (0.0, 0.05),
                (0.05, 0.15), (0.05, 0.15), (0.1, 0.3), (0.1, 0.3), (0.8, 1.2), (0.6, 1.0),
            ],
            StyleFamily::Squat => [
                (0.6, 1.0), (0.9, 1.3), (0.3, 0.5), (0.6, 1.0), (0.9, 1.3), (0.3, 0.5),
                (0.2, 0.4), (0.05, 0.1), (0.2, 0.5), (0.1, 0.3), (0.2, 0.5), (0.1, 0.3),
            ],
            StyleFamily::Mixed => [
                (0.3, 0.7), (0.3, 0.7), (0.1, 0.3), (0.3, 0.7), (0.3, 0.7), (0.1, 0.3),
                (0.1, 0.3), (0.05, 0.15), (0.4, 0.9), (0.3, 0.8), (0.4, 0.9), (0.3, 0.8),
            ],
        };
        p.amplitude = ranges.map(|(lo, hi)| u(lo, hi));
        p
    }

    pub fn is_valid(&self) -> bool {
        let f_ok = |f: f64| (FREQ_RANGE.0..=FREQ_RANGE.1).contains(&f);
        self.frequency.iter().all(|&f| f_ok(f))
            && f_ok(self.gait_frequency)
            && (SPEED_RANGE.0..=SPEED_RANGE.1).contains(&self.speed)
    }

    /// Distance travelled along the path after `t` seconds.
    pub fn distance(&self, t: f64) -> f64 {
        let w = TAU * self.gait_frequency;
        let m = self.speed_modulation;
        self.speed * (t - m / w * ((w * t + self.gait_phase).cos() - self.gait_phase.cos()))
    }

    pub fn heading(&self, t: f64) -> f64 {
        self.heading0 + self.curvature * self.distance(t)
    }

    /// Closed-form root position.
    pub fn root_position(&self, t: f64) -> Vector3<f64> {
        let s = self.distance(t);
        let psi0 = self.heading0;
        let (x, y) = if self.curvature.abs() < 1e-12 {
            (s * psi0.cos(), s * psi0.sin())
        } else {
            let k = self.curvature;
            let psi = psi0 + k * s;
            ((psi.sin() - psi0.sin()) / k, (psi0.cos() - psi.cos()) / k)
        };
        let z = ROOT_HEIGHT + self.bob_amplitude * (TAU * self.bob_frequency * t).sin();
        Vector3::new(x, y, z)
    }

    pub fn root_orientation(&self, t: f64) -> Rotation {
        let w = TAU * self.gait_frequency;
        let tilt = Vector3::new(
            self.roll_amplitude * (w * t + self.gait_phase).sin(),
            self.pitch_amplitude * (2.0 * w * t).sin(),
            0.0,
        );
        Rotation::yaw(self.heading(t)).compose(&so3::exp_map(&tilt))
    }

    /// Signed rotation angle of joint `j` about its axis (before limb scaling).
    pub fn joint_angle(&self, j: usize, t: f64) -> f64 {
        self.amplitude[j] * (TAU * self.frequency[j] * t + self.phase[j]).sin()
    }
}

/// Samples `frames = floor(duration · rate) + 1` frames of an analytic clip.
pub fn generate_human_sequence(
    style: &MotionStyleParams,
    beta: &[f64; BETA_DIM],
    duration: f64,
    rate_hz: f64,
) -> HumanSequence {
    let frames = ((duration * rate_hz).floor() as usize + 1).max(2);
    let dt = 1.0 / rate_hz;
    let skeleton = SyntheticSkeleton::new(beta);
    let mut seq = HumanSequence {
        dt,
        p: Vec::with_capacity(frames),
        r: Vec::with_capacity(frames),
        theta: Vec::with_capacity(frames),
        beta: *beta,
    };
    for i in 0..frames {
        let t = i as f64 * dt;
        seq.p.push(style.root_position(t));
        seq.r.push(style.root_orientation(t));
        seq.theta.push(
            (0..NUM_JOINTS)
                .map(|j| {
                    let angle = style.joint_angle(j, t) * skeleton.limb_scales[j];
                    so3::exp_map(&(skeleton.axes[j] * angle))
                })
                .collect(),
        );
    }
    seq
}

/// Shape code drawn from a standard normal, clipped to [-2, 2].
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R) -> [f64; BETA_DIM] {
    std::array::from_fn(|_| {
        let x: f64 = rng.sample(rand_distr::StandardNormal);
        x.clamp(-2.0, 2.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::humanseq_to_features;
    use crate::features::FeatureRows;
    use crate::rng::substream;

    #[test]
    fn still_clip_is_stationary() {
        let seq = generate_human_sequence(
            &MotionStyleParams::still(StyleFamily::Walk),
            &[0.0; BETA_DIM],
            0.5,
            CAPTURE_RATE_HZ,
        );
        let f = humanseq_to_features(&seq).unwrap();
        for t in 0..f.frames() {
            assert!(f.v(t).norm() < 1e-12);
            assert!(f.omega(t).norm() < 1e-12);
        }
    }

    #[test]
    fn straight_line_path_integral() {
        let mut p = MotionStyleParams::still(StyleFamily::Walk);
        p.speed = 1.0;
        p.bob_amplitude = 0.03;
        p.bob_frequency = 2.0;
        let seq = generate_human_sequence(&p, &[0.0; BETA_DIM], 1.0, CAPTURE_RATE_HZ);
        assert_eq!(seq.len(), 121);
        let last = seq.p.last().unwrap();
        let z_bob = ROOT_HEIGHT + 0.03 * (TAU * 2.0).sin();
        assert!((last - Vector3::new(1.0, 0.0, z_bob)).norm() < 1e-12);
    }

    #[test]
    fn curved_path_matches_numeric_integration() {
        let mut rng = substream(5, "test", 0);
        let p = MotionStyleParams::sample(StyleFamily::Turn, &mut rng);
        // trapezoid integration of speed·[cos ψ, sin ψ]
        let n = 200_000;
        let dt = 2.0 / n as f64;
        let w = TAU * p.gait_frequency;
        let vel = |t: f64| {
            let sp = p.speed * (1.0 + p.speed_modulation * (w * t + p.gait_phase).sin());
            let psi = p.heading(t);
            Vector3::new(sp * psi.cos(), sp * psi.sin(), 0.0)
        };
        let mut pos = Vector3::zeros();
        for i in 0..n {
            let t = i as f64 * dt;
            pos += (vel(t) + vel(t + dt)) * (0.5 * dt);
        }
        let analytic = p.root_position(2.0) - p.root_position(0.0);
        assert!((pos.xy() - analytic.xy()).norm() < 1e-8);
    }

    #[test]
    fn sampled_params_are_valid_and_deterministic() {
        for style in StyleFamily::ALL {
            for i in 0..20 {
                let a = MotionStyleParams::sample(style, &mut substream(1, "style", i));
                let b = MotionStyleParams::sample(style, &mut substream(1, "style", i));
                assert!(a.is_valid(), "{a:?}");
                assert_eq!(a, b);
            }
        }
        let beta = sample_beta(&mut substream(1, "beta", 0));
        let p = MotionStyleParams::sample(StyleFamily::Mixed, &mut substream(1, "style", 0));
        let s1 = generate_human_sequence(&p, &beta, 1.0, CAPTURE_RATE_HZ);
        let s2 = generate_human_sequence(&p, &beta, 1.0, CAPTURE_RATE_HZ);
        assert_eq!(s1, s2);
    }

    #[test]
    fn skeleton_invariants() {
        let mut rng = substream(2, "beta", 0);
        for _ in 0..50 {
            let mut beta = sample_beta(&mut rng);
            beta[0] *= 10.0;
            let sk = SyntheticSkeleton::new(&beta);
            assert!(sk.axes.iter().all(|a| (a.norm() - 1.0).abs() < 1e-15));
            assert!(sk
                .limb_scales
                .iter()
                .all(|s| (LIMB_SCALE_RANGE.0..=LIMB_SCALE_RANGE.1).contains(s)));
        }
        let neutral = SyntheticSkeleton::new(&[0.0; BETA_DIM]);
        assert!(neutral.limb_scales.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn generated_rotations_are_valid() {
        let p = MotionStyleParams::sample(StyleFamily::Walk, &mut substream(3, "s", 0));
        let seq = generate_human_sequence(&p, &[0.5; BETA_DIM], 1.0, CAPTURE_RATE_HZ);
        for (r, th) in seq.r.iter().zip(&seq.theta) {
            let (o, d) = r.defect();
            assert!(o < 1e-12 && (d - 1.0).abs() < 1e-12);
            for j in th {
                let (o, d) = j.defect();
                assert!(o < 1e-12 && (d - 1.0).abs() < 1e-12);
            }
        }
    }
}
