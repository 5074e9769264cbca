use gmmq::gradcheck::{random_instance, random_spd, random_sym, LayoutChoice};
use gmmq::manifold::{
    lyapunov_solve, product_inner, retract, spd_exp, spd_inner, MetricKind, ProductTangent,
};
use gmmq::SymTangent;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lyapunov_residual(seed in any::<u64>(), d in 1usize..6) {
        let mut r = rng(seed);
        let c = random_spd(&mut r, d);
        let g = random_sym(&mut r, d);
        let l = lyapunov_solve(&c, &g).unwrap();
        let cm = c.as_matrix();
        let res = cm * l.as_matrix() + l.as_matrix() * cm - g.as_matrix();
        prop_assert!(res.norm() < 1e-10, "residual {}", res.norm());
        prop_assert!((l.as_matrix() - l.as_matrix().transpose()).norm() == 0.0);
    }

    #[test]
    fn metrics_are_symmetric_and_positive(seed in any::<u64>(), d in 1usize..5) {
        let mut r = rng(seed);
        let c = random_spd(&mut r, d);
        let (g1, g2) = (random_sym(&mut r, d), random_sym(&mut r, d));
        for metric in MetricKind::ALL {
            let a = spd_inner(&c, &g1, &g2, metric).unwrap();
            let b = spd_inner(&c, &g2, &g1, metric).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
            prop_assert!(spd_inner(&c, &g1, &g1, metric).unwrap() > 0.0);
        }
    }

    #[test]
    fn product_inner_is_an_inner_product(seed in any::<u64>(), shared in any::<bool>()) {
        let mut r = rng(seed);
        let layout = if shared { LayoutChoice::Shared } else { LayoutChoice::PerAction };
        let (model, _, _) = random_instance(&mut r, layout);
        let rand_tangent = |r: &mut ChaCha8Rng| {
            let mut t = ProductTangent::zeros_like(&model);
            t.weights.iter_mut().for_each(|w| *w = r.gen_range(-1.0..1.0));
            t.means.iter_mut().for_each(|m| m.iter_mut().for_each(|x| *x = r.gen_range(-1.0..1.0)));
            t.covs = (0..model.k()).map(|_| random_sym(r, model.dim())).collect();
            t
        };
        let (t1, t2, t3) = (rand_tangent(&mut r), rand_tangent(&mut r), rand_tangent(&mut r));
        let s = r.gen_range(-3.0..3.0);
        for metric in MetricKind::ALL {
            let ip = |a: &ProductTangent, b: &ProductTangent| product_inner(&model, a, b, metric).unwrap();
            let a12 = ip(&t1, &t2);
            prop_assert!((a12 - ip(&t2, &t1)).abs() <= 1e-10 * (1.0 + a12.abs()));
            // linearity in the first slot: ⟨s·t1 + t3, t2⟩ = s⟨t1, t2⟩ + ⟨t3, t2⟩
            let mut comb = t1.scaled(s);
            comb.weights.iter_mut().zip(&t3.weights).for_each(|(a, b)| *a += b);
            comb.means.iter_mut().zip(&t3.means).for_each(|(a, b)| *a += b);
            comb.covs = comb
                .covs
                .iter()
                .zip(&t3.covs)
                .map(|(a, b)| SymTangent::new(a.as_matrix() + b.as_matrix()).unwrap())
                .collect();
            let lhs = ip(&comb, &t2);
            let rhs = s * a12 + ip(&t3, &t2);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
            prop_assert!(ip(&t1, &t1) > 0.0);
            prop_assert_eq!(ip(&t1, &ProductTangent::zeros_like(&model)), 0.0);
        }
    }
}

#[test]
fn exponential_maps_stay_spd_over_1000_draws() {
    for metric in MetricKind::ALL {
        let mut r = rng(42);
        for _ in 0..1000 {
            let d = r.gen_range(1..=4);
            let c = random_spd(&mut r, d);
            let scale = r.gen_range(0.01..5.0);
            let g = random_sym(&mut r, d).scaled(scale);
            let out = spd_exp(&c, &g, metric).unwrap();
            let ev = out.point.eigenvalues();
            assert!(ev.iter().all(|&l| l > 0.0), "{metric}: {ev}");
            let m = out.point.as_matrix();
            assert_eq!(m, &m.transpose());
        }
    }
}

#[test]
fn retraction_defect_is_second_order() {
    // ‖R_Ω(tΥ) − (Ω + tΥ)‖ = O(t²): shrinking t tenfold shrinks the defect about a hundredfold
    let mut r = rng(7);
    for metric in MetricKind::ALL {
        for _ in 0..10 {
            let (model, _, _) = random_instance(&mut r, LayoutChoice::Shared);
            let mut t = ProductTangent::zeros_like(&model);
            t.weights
                .iter_mut()
                .for_each(|w| *w = r.gen_range(-1.0..1.0));
            t.covs = (0..model.k())
                .map(|_| random_sym(&mut r, model.dim()))
                .collect();
            let defect = |step: f64| {
                let p = retract(&model, &t, step, metric).unwrap().point;
                let mut acc = 0.0;
                for (k, c) in p.covs().iter().enumerate() {
                    let linear: DMatrix<f64> =
                        model.covs()[k].as_matrix() + t.covs[k].as_matrix() * step;
                    acc += (c.as_matrix() - linear).norm_squared();
                }
                for (w, (w0, dw)) in p
                    .weights()
                    .iter()
                    .zip(model.weights().iter().zip(&t.weights))
                {
                    acc += (w - (w0 + step * dw)).powi(2);
                }
                acc.sqrt()
            };
            let steps = [1e-1, 1e-2, 1e-3];
            let d: Vec<f64> = steps.iter().map(|&s| defect(s)).collect();
            for w in d.windows(2) {
                let ratio = w[0] / w[1];
                assert!((60.0..170.0).contains(&ratio), "{metric}: defects {d:?}");
            }
        }
    }
}

#[test]
fn retraction_at_zero_step_is_identity() {
    let mut r = rng(3);
    let (model, _, _) = random_instance(&mut r, LayoutChoice::PerAction);
    let mut t = ProductTangent::zeros_like(&model);
    t.covs = (0..model.k())
        .map(|_| random_sym(&mut r, model.dim()))
        .collect();
    for metric in MetricKind::ALL {
        let out = retract(&model, &t, 0.0, metric).unwrap();
        assert_eq!(out.point, model);
        assert!(retract(&model, &t, -1e-3, metric).is_err());
    }
}
