use adamorph::autodiff::{Array, Graph};
use adamorph::features::{angular_velocity, linear_velocity, ChannelStats};
use adamorph::model::{adaln, pool_prompt, AdaMorph, ModelConfig};
use adamorph::physics::{integrate_plain, CurriculumSchedule};
use adamorph::rng::substream;
use adamorph::so3::{self, Rotation};
use adamorph::synth::{make_embodiments, mixing_distance};
use adamorph::trainer::cosine_lr;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

fn vec3(r: f64) -> impl Strategy<Value = Vector3<f64>> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = Rotation> {
    any::<u64>().prop_map(|s| so3::sample_rotation(&mut substream(s, "prop", 0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exp_lands_on_so3(w in vec3(6.0)) {
        let (orth, det) = so3::exp_map(&w).defect();
        prop_assert!(orth < 1e-12);
        prop_assert!((det - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_inverts_exp_below_pi(axis in vec3(1.0), frac in 0.0f64..1.0) {
        prop_assume!(axis.norm() > 1e-3);
        let w = axis.normalize() * frac * (std::f64::consts::PI - 1e-3);
        prop_assert!((so3::log_map(&so3::exp_map(&w)) - w).norm() < 1e-8);
    }

    #[test]
    fn six_d_round_trip(r in rotation()) {
        let back = so3::from_6d(&so3::to_6d(&r)).unwrap();
        prop_assert!((back.matrix() - r.matrix()).abs().max() < 1e-10);
    }

    #[test]
    fn gram_schmidt_is_idempotent_on_rotations(r in rotation(), noise in proptest::collection::vec(-1e-3f64..1e-3, 9)) {
        let m = r.matrix() + Matrix3::from_row_slice(&noise);
        let p = so3::gram_schmidt_project(&m).unwrap();
        let (orth, det) = p.defect();
        prop_assert!(orth < 1e-12 && (det - 1.0).abs() < 1e-12);
        let again = so3::gram_schmidt_project(p.matrix()).unwrap();
        prop_assert!((again.matrix() - p.matrix()).abs().max() < 1e-14);
    }

    #[test]
    fn geodesic_term_bounds(a in rotation(), b in rotation()) {
        let d = so3::geodesic_term(&a, &b);
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&d));
        prop_assert!((d - so3::geodesic_term(&b, &a)).abs() < 1e-12);
        prop_assert!(so3::geodesic_term(&a, &a).abs() < 1e-12);
    }

    #[test]
    fn velocity_extraction_integrates_back(
        r0 in rotation(),
        steps in proptest::collection::vec((vec3(0.1), vec3(0.05)), 2..30),
    ) {
        let dt = 1.0 / 30.0;
        let mut r = vec![r0];
        let mut p = vec![Vector3::zeros()];
        for (w, dp) in &steps {
            let next = r.last().unwrap().compose(&so3::exp_map(w));
            p.push(p.last().unwrap() + dp);
            r.push(next);
        }
        let v = linear_velocity(&p, &r, dt).unwrap();
        let om = angular_velocity(&r, dt).unwrap();
        let (ri, pi) = integrate_plain(&v, &om, &r[0], &p[0], dt).unwrap();
        for t in 0..r.len() {
            prop_assert!((pi[t] - p[t]).norm() < 1e-10);
            prop_assert!(so3::geodesic_angle(&ri[t], &r[t]) < 1e-10);
        }
    }

    #[test]
    fn standardize_round_trips(rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 4), 2..20)) {
        let mask = [true, false, true, true];
        let stats = ChannelStats::fit(rows.iter().map(|r| r.as_slice()), &mask).unwrap();
        for row in &rows {
            let mut x = row.clone();
            stats.standardize(&mut x);
            prop_assert_eq!(x[1], row[1]);
            stats.destandardize(&mut x);
            for (a, b) in x.iter().zip(row) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pooled_prompt_is_the_row_mean(rows in 1usize..6, data in proptest::collection::vec(-3.0f64..3.0, 24)) {
        let d = 4;
        let bank = Array::new(vec![rows, d], data[..rows * d].to_vec()).unwrap();
        let mut g = Graph::new();
        let b = g.constant(bank.clone());
        let c = pool_prompt(&mut g, b).unwrap();
        for j in 0..d {
            let brute: f64 = (0..rows).map(|i| bank.data()[i * d + j]).sum::<f64>() / rows as f64;
            prop_assert!((g.value(c).data()[j] - brute).abs() < 1e-12);
        }
    }

    #[test]
    fn adaln_with_zero_modulation_is_layer_norm(seed in any::<u64>()) {
        let mut rng = substream(seed, "adaln", 0);
        let h = Array::randn(&[3, 8], 2.0, &mut rng);
        let mut g = Graph::new();
        let hv = g.constant(h);
        let gamma = g.constant(Array::zeros(&[8]));
        let b = g.constant(Array::zeros(&[8]));
        let out = adaln(&mut g, hv, gamma, b).unwrap();
        let ln = g.layer_norm(hv, 1, adamorph::autodiff::LN_EPS).unwrap();
        prop_assert_eq!(g.value(out), g.value(ln));
    }

    #[test]
    fn schedules_stay_in_range(total in 10usize..5000, s in 0usize..5000) {
        let s = s.min(total);
        let warm = (total as f64 * 0.03).round() as usize;
        let lr = cosine_lr(s, 1e-3, warm, total);
        prop_assert!((0.0..=1e-3 + 1e-18).contains(&lr));
        let c = CurriculumSchedule::new(total, 0.5);
        prop_assert!((0.0..=0.5).contains(&c.lambda_at(s)));
        prop_assert!((0.0..=1.0).contains(&c.alpha_at(s)));
        if s > 0 {
            prop_assert!(c.alpha_at(s) <= c.alpha_at(s - 1));
            prop_assert!(c.lambda_at(s) >= c.lambda_at(s - 1));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn families_are_tighter_than_across(seed in any::<u64>()) {
        let robots = make_embodiments(seed, 2, 3);
        let mut worst_within: f64 = 0.0;
        let mut best_across = f64::INFINITY;
        for a in &robots {
            for b in &robots {
                if a.id < b.id {
                    let d = mixing_distance(a, b);
                    if a.family == b.family {
                        worst_within = worst_within.max(d);
                    } else {
                        best_across = best_across.min(d);
                    }
                }
            }
        }
        prop_assert!(worst_within < best_across, "{worst_within} vs {best_across}");
    }

    #[test]
    fn modulation_is_zero_at_construction(seed in any::<u64>()) {
        let m = AdaMorph::new(ModelConfig::desk(vec![6, 7]), seed).unwrap();
        let mut rng = substream(seed, "cond", 0);
        let mut g = Graph::new();
        let c = g.constant(Array::randn(&[64], 1.0, &mut rng));
        for layer in 0..4 {
            for sub in 0..3 {
                let (gamma, b) = m.modulation(&m.params, &mut g, layer, sub, c).unwrap();
                prop_assert!(g.value(gamma).data().iter().chain(g.value(b).data()).all(|&x| x == 0.0));
            }
        }
    }
}
