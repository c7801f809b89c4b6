mod common;

use common::{fd_check_tensor, rng, uniform};
use proptest::prelude::*;
use rand::Rng;
use reform::geometry::{
    billiard_step, integrate, integrate_values, project_step, reflect_cube, squash_radial,
    squash_radial_values, BallDomain, IntegratorConfig, IntegratorMode, RolloutStats, RADIUS_SLACK,
};
use reform::nn::{norm, Mlp, MlpSpec, Tape, Tensor, Var};
use reform::Error;

const MODES: [IntegratorMode; 4] = [
    IntegratorMode::Plain,
    IntegratorMode::ReflectProject,
    IntegratorMode::ReflectCube,
    IntegratorMode::ReflectBilliard,
];

#[test]
fn ball_samples_stay_inside() {
    let ball = BallDomain::new(2, 1.0).unwrap();
    let z = ball.sample(&mut rng(1), 100_000);
    assert_eq!(z.shape(), &[100_000, 2]);
    assert!(z.row_norms().into_iter().all(|n| n <= 1.0));
}

#[test]
fn ball_second_moment_matches_closed_form() {
    // E||z||^2 = d / (d + 2) l^2
    let ball = BallDomain::new(2, 1.0).unwrap();
    let z = ball.sample(&mut rng(2), 100_000);
    let m = z.row_norms().iter().map(|n| n * n).sum::<f64>() / 100_000.0;
    assert!((m - 0.5).abs() < 0.01, "{m}");
}

#[test]
fn ball_volume_fraction_matches_closed_form() {
    // P(||z|| <= r) = (r / l)^d
    let ball = BallDomain::new(3, 2.0).unwrap();
    let z = ball.sample(&mut rng(3), 100_000);
    let frac = z.row_norms().iter().filter(|&&n| n <= 1.0).count() as f64 / 100_000.0;
    assert!((frac - 0.125).abs() < 0.01, "{frac}");
}

#[test]
fn ball_radius_law_passes_a_ks_check() {
    for (d, l) in [(1, 0.5), (2, 1.0), (5, 3.0), (8, 8f64.sqrt())] {
        let ball = BallDomain::new(d, l).unwrap();
        let mut u: Vec<f64> = ball.sample(&mut rng(d as u64), 100_000).row_norms().iter().map(|n| n / l).collect();
        u.sort_by(f64::total_cmp);
        let n = u.len() as f64;
        let ks = u
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let f = r.powi(d as i32);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "d={d}: KS distance {ks}");
        // Directions are uniform, so the mean is near the origin.
        let z = ball.sample(&mut rng(100 + d as u64), 20_000);
        for c in 0..d {
            let mean = (0..z.rows()).map(|r| z.row(r)[c]).sum::<f64>() / z.rows() as f64;
            assert!(mean.abs() < 0.03 * l, "d={d} c={c}: {mean}");
        }
    }
}

#[test]
fn ball_rejects_bad_parameters() {
    assert!(BallDomain::new(0, 1.0).is_err());
    assert!(BallDomain::new(2, 0.0).is_err());
    assert!(BallDomain::new(2, f64::NAN).is_err());
    assert_eq!(BallDomain::for_action_box(4).radius(), 2.0);
}

fn constant_field(c: Vec<f64>) -> impl FnMut(f64, &Tensor) -> reform::Result<Tensor> {
    move |_, z| {
        let data = (0..z.rows()).flat_map(|_| c.iter().copied()).collect();
        Ok(Tensor::matrix(z.rows(), c.len(), data))
    }
}

#[test]
fn plain_euler_examples() {
    let ball = BallDomain::new(2, 1.0).unwrap();
    let cfg = IntegratorConfig::plain(10);
    let z0 = Tensor::matrix(2, 2, vec![0.1, -0.2, 3.0, 4.0]);

    let (z, _) = integrate_values(&z0, &ball, &cfg, constant_field(vec![0.0, 0.0])).unwrap();
    assert_eq!(z, z0);

    let (z, _) = integrate_values(&z0, &ball, &cfg, constant_field(vec![0.5, -1.5])).unwrap();
    for r in 0..2 {
        assert!((z.row(r)[0] - (z0.row(r)[0] + 0.5)).abs() < 1e-14);
        assert!((z.row(r)[1] - (z0.row(r)[1] - 1.5)).abs() < 1e-14);
    }

    let line = BallDomain::new(1, 1.0).unwrap();
    let (z, stats) = integrate_values(&Tensor::matrix(1, 1, vec![1.0]), &line, &cfg, |_, z| Ok(z.clone())).unwrap();
    assert!((z.item() - 1.1f64.powi(10)).abs() < 1e-12);
    assert!((z.item() - 2.5937).abs() < 1e-4);
    assert_eq!(stats.evals, 10);
    assert_eq!(cfg.dt(), 0.1);
}

#[test]
fn euler_sees_the_current_iterate_and_time() {
    let line = BallDomain::new(1, 1.0).unwrap();
    let mut seen = Vec::new();
    let (_, _) = integrate_values(&Tensor::matrix(1, 1, vec![0.0]), &line, &IntegratorConfig::plain(4), |t, z| {
        seen.push((t, z.item()));
        Ok(Tensor::matrix(1, 1, vec![1.0]))
    })
    .unwrap();
    assert_eq!(seen, vec![(0.0, 0.0), (0.25, 0.25), (0.5, 0.5), (0.75, 0.75)]);
}

#[test]
fn reflect_project_examples_through_the_integrator() {
    let ball = BallDomain::new(2, 1.0).unwrap();
    let one = IntegratorConfig::reflect(1);
    let run = |z: [f64; 2], v: [f64; 2]| {
        integrate_values(&Tensor::matrix(1, 2, z.to_vec()), &ball, &one, constant_field(v.to_vec())).unwrap()
    };

    let (z, s) = run([0.8, 0.0], [0.5, 0.0]);
    assert!((z.row(0)[0] - 0.8).abs() < 1e-15 && z.row(0)[1].abs() < 1e-15);
    assert_eq!(s.reflections, 1);

    let (z, s) = run([0.0, 0.0], [0.3, 0.4]);
    assert_eq!(z.data(), &[0.3, 0.4]);
    assert_eq!(s.reflections, 0);

    let (z, s) = run([0.0, 0.6], [0.9, 0.9]);
    let n = norm(z.row(0));
    assert!((z.row(0)[0] - 0.2647).abs() < 1e-4 && (z.row(0)[1] - 0.4412).abs() < 1e-4);
    assert!((n - 0.5145).abs() < 1e-4 && n <= 0.6);
    assert_eq!((s.reflections, s.contraction_violations), (1, 0));
}

#[test]
fn projection_equals_inner_product_with_the_normal() {
    let mut r = rng(8);
    let mut fired = 0;
    for _ in 0..10_000 {
        let d = r.gen_range(1..6);
        let l = r.gen_range(0.2..3.0);
        let z: Vec<f64> = BallDomain::new(d, l).unwrap().sample(&mut r, 1).into_data();
        let delta: Vec<f64> = (0..d).map(|_| r.gen_range(-3.0..3.0) * l).collect();
        let mut out = vec![0.0; d];
        if project_step(&z, &delta, l, &mut out) {
            fired += 1;
            let zhat: Vec<f64> = z.iter().zip(&delta).map(|(a, b)| a + b).collect();
            let rho = norm(&zhat);
            let c: f64 = z.iter().zip(&zhat).map(|(a, b)| a * b / rho).sum();
            for i in 0..d {
                assert!((out[i] - c * zhat[i] / rho).abs() <= 1e-12 * l, "{out:?}");
            }
        }
    }
    assert!(fired > 1000);
}

#[test]
fn cube_and_billiard_examples() {
    assert_eq!(reflect_cube(0.5), 0.5);
    assert!((reflect_cube(1.3) - 0.7).abs() < 1e-15);
    assert_eq!(reflect_cube(-3.0), 1.0);
    assert!((reflect_cube(2.5) - (-0.5)).abs() < 1e-15);
    assert!((reflect_cube(-1.25) - (-0.75)).abs() < 1e-15);

    let mut out = [0.0; 2];
    assert!(!billiard_step(&[0.2, 0.1], &[0.1, 0.1], 1.0, &mut out));
    assert_eq!(out, [0.2 + 0.1, 0.1 + 0.1]);
    assert!(billiard_step(&[0.5, 0.0], &[1.0, 0.0], 1.0, &mut out));
    assert!((out[0] - 0.5).abs() < 1e-15 && out[1].abs() < 1e-15);
    assert!(billiard_step(&[0.0, 1.0], &[0.5, 0.0], 1.0, &mut out));
    assert!((norm(&out) - 1.0).abs() < 1e-12);
}

#[test]
fn starting_outside_the_domain_is_a_precondition_error() {
    let ball = BallDomain::new(2, 1.0).unwrap();
    let z0 = Tensor::matrix(2, 2, vec![0.0, 0.0, 0.9, 0.9]);
    for mode in [IntegratorMode::ReflectProject, IntegratorMode::ReflectBilliard] {
        let err = integrate_values(&z0, &ball, &IntegratorConfig::new(10, mode), constant_field(vec![0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)), "{err}");
        assert!(err.to_string().contains("row 1"), "{err}");
    }
    let outside_cube = Tensor::matrix(1, 2, vec![0.0, 1.5]);
    let err = integrate_values(&outside_cube, &ball, &IntegratorConfig::new(10, IntegratorMode::ReflectCube), constant_field(vec![0.0, 0.0])).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
    // Plain Euler has no domain.
    assert!(integrate_values(&z0, &ball, &IntegratorConfig::plain(2), constant_field(vec![0.0, 0.0])).is_ok());
}

#[test]
fn non_finite_velocity_names_the_step() {
    let ball = BallDomain::new(2, 1.0).unwrap();
    let z0 = Tensor::zeros(&[1, 2]);
    let err = integrate_values(&z0, &ball, &IntegratorConfig::reflect(10), |t, z| {
        let v = if t > 0.25 { f64::NAN } else { 0.1 };
        Ok(Tensor::full(z.shape(), v))
    })
    .unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("step 3"), "{err}");
}

/// A random velocity network `v(t, z)` scaled by `gain`.
fn random_field(d: usize, gain: f64, seed: u64) -> Mlp {
    let mut net = Mlp::new(MlpSpec::new(1 + d, &[16, 16], d), &mut rng(seed));
    for p in net.params_mut() {
        if p.name() == "layer2/weight" {
            p.value = p.value.map(|x| x * gain);
        }
    }
    net
}

fn net_velocity(net: &Mlp, t: f64, z: &Tensor) -> reform::Result<Tensor> {
    let mut x = Vec::with_capacity(z.rows() * (z.cols() + 1));
    for r in 0..z.rows() {
        x.push(t);
        x.extend_from_slice(z.row(r));
    }
    net.predict(&Tensor::matrix(z.rows(), z.cols() + 1, x))
}

fn net_velocity_on(net: &Mlp, tape: &mut Tape, t: f64, z: Var) -> reform::Result<Var> {
    let n = tape.value(z).rows();
    let tc = tape.constant(Tensor::full(&[n, 1], t));
    let x = tape.concat(&[tc, z])?;
    net.forward(tape, x, false)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reflect_project_stays_in_the_ball(seed in 0u64..100_000, d in 1usize..9, l in 0.1f64..4.0, gain in 0.1f64..50.0, steps in 1usize..20) {
        let ball = BallDomain::new(d, l).unwrap();
        let net = random_field(d, gain, seed);
        let z0 = ball.sample(&mut rng(seed), 64);
        let (z, stats) = integrate_values(&z0, &ball, &IntegratorConfig::reflect(steps), |t, z| net_velocity(&net, t, z)).unwrap();
        prop_assert!(stats.max_norm <= l * (1.0 + RADIUS_SLACK), "{} > {l}", stats.max_norm);
        prop_assert!(z.row_norms().iter().all(|&n| n <= l * (1.0 + RADIUS_SLACK)));
        prop_assert_eq!(stats.contraction_violations, 0);
        prop_assert_eq!(stats.evals, steps);
    }

    #[test]
    fn outward_field_cannot_escape(seed in 0u64..100_000, d in 1usize..9, l in 0.1f64..4.0, speed in 1.0f64..1000.0) {
        let ball = BallDomain::new(d, l).unwrap();
        let z0 = ball.sample(&mut rng(seed), 64);
        for mode in [IntegratorMode::ReflectProject, IntegratorMode::ReflectBilliard] {
            let (_, stats) = integrate_values(&z0, &ball, &IntegratorConfig::new(10, mode), |_, z| {
                let mut v = z.clone();
                for r in 0..v.rows() {
                    let n = norm(z.row(r)).max(1e-300);
                    v.row_mut(r).iter_mut().for_each(|x| *x *= speed / n);
                }
                Ok(v)
            }).unwrap();
            prop_assert!(stats.max_norm <= l * (1.0 + RADIUS_SLACK));
            prop_assert!(stats.reflections > 0);
        }
    }

    #[test]
    fn projection_never_grows_the_norm(seed in 0u64..1_000_000, d in 1usize..9, l in 0.1f64..4.0, scale in 0.0f64..5.0, radial in any::<bool>()) {
        let mut r = rng(seed);
        let z = BallDomain::new(d, l).unwrap().sample(&mut r, 1).into_data();
        let delta: Vec<f64> = if radial {
            z.iter().map(|x| x * scale).collect()
        } else {
            (0..d).map(|_| r.gen_range(-1.0..1.0) * scale * l).collect()
        };
        let mut out = vec![0.0; d];
        if project_step(&z, &delta, l, &mut out) {
            prop_assert!(norm(&out) <= norm(&z) * (1.0 + RADIUS_SLACK));
            prop_assert!(norm(&out) <= l * (1.0 + RADIUS_SLACK));
        }
    }

    #[test]
    fn cube_wrap_lands_in_the_box(x in -1e6f64..1e6) {
        let y = reflect_cube(x);
        prop_assert!((-1.0..=1.0).contains(&y));
        if x.abs() <= 1.0 {
            prop_assert_eq!(y, x);
        }
        // Period 4 and mirror symmetry.
        prop_assert!((reflect_cube(x + 4.0) - y).abs() < 1e-9);
        prop_assert!((reflect_cube(-x) + y).abs() < 1e-9);
    }

    #[test]
    fn billiard_stays_in_the_ball(seed in 0u64..1_000_000, d in 1usize..6, l in 0.1f64..4.0, scale in 0.0f64..5.0) {
        let mut r = rng(seed);
        let z = BallDomain::new(d, l).unwrap().sample(&mut r, 1).into_data();
        let delta: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0) * scale * l).collect();
        let mut out = vec![0.0; d];
        let hit = billiard_step(&z, &delta, l, &mut out);
        prop_assert!(norm(&out) <= l * (1.0 + RADIUS_SLACK));
        if !hit {
            for i in 0..d {
                prop_assert_eq!(out[i], z[i] + delta[i]);
            }
        }
    }

    #[test]
    fn radial_squash_lands_in_the_ball(seed in 0u64..100_000, d in 1usize..6, l in 0.1f64..4.0, scale in 0.0f64..100.0) {
        let x = uniform(&mut rng(seed), 16, d, scale);
        let y = squash_radial_values(&x, l);
        for r in 0..16 {
            let (nx, ny) = (norm(x.row(r)), norm(y.row(r)));
            prop_assert!(ny <= l * (1.0 + RADIUS_SLACK));
            prop_assert!((ny - l * nx.tanh()).abs() <= 1e-12 * l);
        }
    }
}

#[test]
fn velocity_evaluations_match_across_modes() {
    let ball = BallDomain::new(2, 2f64.sqrt()).unwrap();
    let net = random_field(2, 20.0, 4);
    let z0 = ball.sample(&mut rng(4), 100);
    for steps in [1, 3, 10, 25] {
        let mut counts = Vec::new();
        for mode in MODES {
            let z0 = if mode == IntegratorMode::ReflectCube { z0.map(|x| x.clamp(-1.0, 1.0)) } else { z0.clone() };
            let mut calls = 0;
            let (_, stats) = integrate_values(&z0, &ball, &IntegratorConfig::new(steps, mode), |t, z| {
                calls += 1;
                net_velocity(&net, t, z)
            })
            .unwrap();
            assert_eq!(stats.evals, calls);
            counts.push(calls);
            let mut tape = Tape::new();
            let zv = tape.constant(z0.clone());
            let mut taped_calls = 0;
            let (_, taped) = integrate(&mut tape, zv, &ball, &IntegratorConfig::new(steps, mode), |tape, t, z| {
                taped_calls += 1;
                net_velocity_on(&net, tape, t, z)
            })
            .unwrap();
            assert_eq!((taped.evals, taped_calls), (steps, steps));
        }
        assert!(counts.iter().all(|&c| c == steps), "{counts:?}");
    }
}

#[test]
fn taped_and_plain_integration_agree() {
    let ball = BallDomain::new(3, 1.2).unwrap();
    let net = random_field(3, 8.0, 12);
    let z0 = ball.sample(&mut rng(12), 40).map(|x| x.clamp(-1.0, 1.0));
    for mode in MODES {
        let mut cfg = IntegratorConfig::new(10, mode);
        cfg.stop_reflection_grad = mode == IntegratorMode::ReflectCube;
        let (plain, s1) = integrate_values(&z0, &ball, &cfg, |t, z| net_velocity(&net, t, z)).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z0.clone());
        let (taped, s2) = integrate(&mut tape, zv, &ball, &cfg, |tape, t, z| net_velocity_on(&net, tape, t, z)).unwrap();
        assert_eq!(&plain, tape.value(taped), "{mode:?}");
        assert_eq!(s1, s2);
    }
}

/// `sum(c * z_N)` through the integrator, plus the reflection count as the
/// branch signature.
fn endpoint_loss(net: &Mlp, ball: &BallDomain, cfg: &IntegratorConfig, z0: &Tensor, c: &Tensor) -> (f64, u64) {
    let (z, stats) = integrate_values(z0, ball, cfg, |t, z| net_velocity(net, t, z)).unwrap();
    let v = z.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
    (v, signature(&stats, &z))
}

fn signature(stats: &RolloutStats, z: &Tensor) -> u64 {
    // Reflection count plus, for the cube, which fold each coordinate is in.
    let folds = z.data().iter().fold(0u64, |h, x| h.wrapping_mul(31).wrapping_add(((x + 1.0) / 2.0).floor() as i64 as u64));
    (stats.reflections as u64) ^ folds.rotate_left(20)
}

#[test]
fn endpoint_jacobian_matches_finite_differences() {
    let mut worst = 0.0f64;
    let mut fired_total = 0;
    for seed in 0..24u64 {
        let d = 1 + (seed as usize % 4);
        let l = if seed % 2 == 0 { 1.0 } else { (d as f64).sqrt() };
        let ball = BallDomain::new(d, l).unwrap();
        let mode = MODES[seed as usize % 4];
        let cfg = IntegratorConfig::new(10, mode);
        let net = random_field(d, 6.0, seed);
        let mut r = rng(1000 + seed);
        let z0 = ball.sample(&mut r, 5);
        let z0 = if mode == IntegratorMode::ReflectCube { z0.map(|x| x.clamp(-0.999, 0.999)) } else { z0 };
        let c = uniform(&mut r, 5, d, 1.0);

        let mut tape = Tape::new();
        let zv = tape.leaf(z0.clone());
        let (z, stats) = integrate(&mut tape, zv, &ball, &cfg, |tape, t, z| net_velocity_on(&net, tape, t, z)).unwrap();
        let cv = tape.constant(c.clone());
        let prod = tape.mul(z, cv).unwrap();
        let loss = tape.sum_all(prod);
        let ad = tape.backward(loss).unwrap().wrt(zv).unwrap().clone();
        fired_total += stats.reflections;

        let rep = fd_check_tensor(&z0, &ad, |z0| endpoint_loss(&net, &ball, &cfg, z0, &c));
        assert!(rep.checked > 0);
        assert!(rep.max_rel <= 1e-6, "seed {seed} {mode:?}: {rep:?}");
        worst = worst.max(rep.max_rel);
    }
    assert!(fired_total > 0, "no path exercised a reflection");
}

#[test]
fn stop_gradient_changes_only_the_backward_pass() {
    let ball = BallDomain::new(2, 1.0).unwrap();
    let net = random_field(2, 15.0, 3);
    let z0 = ball.sample(&mut rng(3), 8);
    let grads = |stop: bool| {
        let mut cfg = IntegratorConfig::reflect(10);
        cfg.stop_reflection_grad = stop;
        let mut tape = Tape::new();
        let zv = tape.leaf(z0.clone());
        let (z, stats) = integrate(&mut tape, zv, &ball, &cfg, |tape, t, z| net_velocity_on(&net, tape, t, z)).unwrap();
        assert!(stats.reflections > 0);
        let value = tape.value(z).clone();
        let loss = tape.sum_all(z);
        (value, tape.backward(loss).unwrap().wrt(zv).unwrap().clone())
    };
    let (v1, g1) = grads(false);
    let (v2, g2) = grads(true);
    assert_eq!(v1, v2);
    assert_ne!(g1, g2);
}

#[test]
fn radial_squash_gradient_matches_finite_differences() {
    let l = 1.3;
    let x = uniform(&mut rng(6), 6, 3, 2.0);
    let mut x = x;
    // One row near the origin exercises the series branch.
    x.row_mut(0).copy_from_slice(&[0.01, -0.02, 0.005]);
    let c = uniform(&mut rng(7), 6, 3, 1.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = squash_radial(&mut tape, xv, l);
    let cv = tape.constant(c.clone());
    let p = tape.mul(y, cv).unwrap();
    let loss = tape.sum_all(p);
    let ad = tape.backward(loss).unwrap().wrt(xv).unwrap().clone();
    let rep = fd_check_tensor(&x, &ad, |x| {
        let y = squash_radial_values(x, l);
        (y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum(), 0)
    });
    assert!(rep.max_rel <= 1e-6, "{rep:?}");
}
