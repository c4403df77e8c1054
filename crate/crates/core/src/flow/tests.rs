use std::cell::Cell;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::nn::{AdamW, AdamWConfig, Linear, ParameterStore};

fn t64(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(rows, cols, data)
}

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = SeedStream::new(seed).rng("t");
    t64(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
}

/// Adaptive Simpson quadrature.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    rec(f, a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, 40)
}

fn density_or_zero(m: f64, s: f64) -> impl Fn(f64) -> f64 {
    move |t| if t <= 0.0 || t >= 1.0 { 0.0 } else { logit_normal_density(t, m, s).unwrap() }
}

#[test]
fn interpolant_endpoints_and_midpoint() {
    let x0 = random_tensor(3, 4, 1);
    let x1 = random_tensor(3, 4, 2);
    assert_eq!(interpolant(&x0, &x1, 0.0).unwrap(), x0);
    assert_eq!(interpolant(&x0, &x1, 1.0).unwrap(), x1);
    let mid = interpolant(&x0, &x1, 0.5).unwrap();
    for i in 0..12 {
        assert!((mid.data[i] - 0.5 * (x0.data[i] + x1.data[i])).abs() < 1e-15);
    }
    assert!(interpolant(&x0, &x1, 1.5).unwrap_err().is_validation());
    assert!(interpolant(&x0, &x1, -1e-9).is_err());
    assert!(interpolant(&x0, &random_tensor(4, 3, 0), 0.5).is_err());
}

#[test]
fn interpolant_rows_uses_per_row_times() {
    let x0 = random_tensor(3, 2, 1);
    let x1 = random_tensor(3, 2, 2);
    let out = interpolant_rows(&x0, &x1, &[0.0, 0.25, 1.0]).unwrap();
    assert_eq!(out.row(0), x0.row(0));
    assert_eq!(out.row(2), x1.row(2));
    assert_eq!(out.row(1), interpolant(&x0, &x1, 0.25).unwrap().row(1));
}

#[test]
fn velocity_target_examples() {
    let x = random_tensor(2, 3, 4);
    assert!(velocity_target(&x, &x).unwrap().data.iter().all(|&v| v == 0.0));
    let v = velocity_target(&Tensor::zeros(2, 3), &Tensor::full(2, 3, 1.0)).unwrap();
    assert!(v.data.iter().all(|&v| v == 1.0));
}

proptest! {
    #[test]
    fn interpolant_plus_remaining_velocity_reaches_data(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let x0 = random_tensor(4, 3, seed);
        let x1 = random_tensor(4, 3, seed.wrapping_add(1));
        let xt = interpolant(&x0, &x1, t).unwrap();
        let v = velocity_target(&x0, &x1).unwrap();
        for i in 0..12 {
            prop_assert!((xt.data[i] + (1.0 - t) * v.data[i] - x1.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn guidance_of_identical_predictions_is_inert(seed in any::<u64>(), w in -20.0f64..20.0) {
        let a = random_tensor(3, 3, seed);
        let out = cfg_single(&a, &a, w).unwrap();
        for i in 0..9 {
            prop_assert!((out.data[i] - a.data[i]).abs() < 1e-12 * (1.0 + w.abs()) * 4.0);
        }
        let dual = cfg_dual(&a, &a, &a, w, -w / 2.0).unwrap();
        for i in 0..9 {
            prop_assert!((dual.data[i] - a.data[i]).abs() < 1e-11 * (1.0 + w.abs()) * 4.0);
        }
    }

    #[test]
    fn cfg_is_linear_in_weight(seed in any::<u64>(), w1 in -10.0f64..10.0, w2 in -10.0f64..10.0) {
        let a = random_tensor(2, 5, seed);
        let b = random_tensor(2, 5, seed ^ 7);
        let lhs = cfg_single(&a, &b, w1).unwrap().zip_map(&cfg_single(&a, &b, w2).unwrap(), |x, y| x + y);
        let rhs = cfg_single(&a, &b, 0.5 * (w1 + w2)).unwrap();
        for i in 0..10 {
            prop_assert!((lhs.data[i] - 2.0 * rhs.data[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn masked_flow_loss_equals_truncated_loss(seed in any::<u64>(), len in 1usize..7, pad in 0usize..5) {
        let pred = random_tensor(len + pad, 3, seed);
        let target = random_tensor(len + pad, 3, seed ^ 11);
        let mask: Vec<bool> = (0..len + pad).map(|r| r < len).collect();
        let masked = flow_loss(&pred, &target, &mask).unwrap();
        let truncated = flow_loss(&pred.slice_rows(0, len), &target.slice_rows(0, len), &vec![true; len]).unwrap();
        prop_assert_eq!(masked, truncated);
        let mut oracle = 0.0;
        for i in 0..len * 3 {
            oracle += (pred.data[i] - target.data[i]).powi(2);
        }
        prop_assert!((masked - oracle / (len * 3) as f64).abs() < 1e-12);
    }
}

#[test]
fn flow_loss_examples() {
    let x = random_tensor(4, 2, 3);
    assert_eq!(flow_loss(&x, &x, &[true; 4]).unwrap(), 0.0);
    let loss = flow_loss(&Tensor::<f64>::zeros(4, 2), &Tensor::full(4, 2, 1.0), &[true, true, false, false]).unwrap();
    assert_eq!(loss, 1.0);
    assert!(flow_loss(&x, &x, &[false; 4]).unwrap_err().is_validation());
    assert!(flow_loss(&x, &x, &[true; 3]).is_err());
}

#[test]
fn cfg_reference_identities() {
    let (u, c, i) = (random_tensor(2, 3, 1), random_tensor(2, 3, 2), random_tensor(2, 3, 3));
    assert_eq!(cfg_single(&u, &c, 0.0).unwrap(), u);
    assert_eq!(cfg_single(&u, &c, 1.0).unwrap(), c);
    assert_eq!(cfg_dual(&u, &c, &i, 1.0, 1.0).unwrap(), i);
    assert_eq!(cfg_dual(&u, &c, &i, 0.0, 0.0).unwrap(), u);
    assert_eq!(cfg_dual(&u, &c, &i, 2.5, 0.0).unwrap(), cfg_single(&u, &c, 2.5).unwrap());
    let w = 8.0;
    let direct = cfg_single(&u, &c, w).unwrap();
    for k in 0..6 {
        assert!((direct.data[k] - (u.data[k] + w * (c.data[k] - u.data[k]))).abs() < 1e-12);
    }
    assert_eq!(CfgWeights::SINGLE_DEFAULT, CfgWeights::Single(8.0));
    assert_eq!(CfgWeights::DUAL_DEFAULT, CfgWeights::Dual(1.0, 5.0));
    assert!(CfgWeights::Single(f64::NAN).validate().is_err());
}

#[test]
fn density_reference_values() {
    let d = logit_normal_density(0.5, 0.0, 1.0).unwrap();
    assert!((d - 4.0 / (2.0 * PI).sqrt()).abs() < 1e-12);
    for t in [0.01, 0.2, 0.37, 0.49] {
        let a = logit_normal_density(t, 0.0, 1.3).unwrap();
        let b = logit_normal_density(1.0 - t, 0.0, 1.3).unwrap();
        assert!((a - b).abs() < 1e-12 * a.max(1.0));
    }
    assert!(logit_normal_density(0.0, 0.5, 1.0).unwrap_err().is_validation());
    assert!(logit_normal_density(1.0, 0.5, 1.0).is_err());
    assert!(logit_normal_density(0.5, 0.5, 0.0).is_err());
}

#[test]
fn density_integrates_to_one() {
    for (m, s) in [(0.5, 1.0), (0.0, 1.0), (-1.0, 0.5), (1.5, 2.0)] {
        let total = simpson(&density_or_zero(m, s), 0.0, 1.0, 1e-10);
        assert!((total - 1.0).abs() < 1e-4, "m={m} s={s} integral={total}");
    }
}

#[test]
fn sampler_limits_and_determinism() {
    let ts = TimeSampler::default();
    assert_eq!((ts.m, ts.s), (0.5, 1.0));
    assert_eq!(sample_time(&ts, 9), sample_time(&ts, 9));
    assert_ne!(sample_time(&ts, 9), sample_time(&ts, 10));
    let narrow = TimeSampler::new(0.5, 1e-9).unwrap();
    let expected = 1.0 / (1.0 + (-0.5f64).exp());
    assert!((sample_time(&narrow, 3) - expected).abs() < 1e-8);
    assert!(TimeSampler::new(0.0, -1.0).is_err());
}

#[test]
fn sampler_matches_density_ks() {
    let ts = TimeSampler::default();
    let mut rng = SeedStream::new(1).rng("time");
    let n = 100_000;
    let mut draws: Vec<f64> = (0..n).map(|_| ts.sample(&mut rng)).collect();
    assert!(draws.iter().all(|&t| t > 0.0 && t < 1.0));
    draws.sort_by(f64::total_cmp);
    let f = density_or_zero(ts.m, ts.s);
    let mut cdf = 0.0;
    let mut prev = 0.0;
    let mut ks: f64 = 0.0;
    for (i, &t) in draws.iter().enumerate() {
        cdf += simpson(&f, prev, t, 1e-13);
        prev = t;
        ks = ks.max((cdf - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - cdf).abs());
    }
    assert!(ks < 0.01, "KS statistic {ks}");
}

fn counting_field<'a>(
    counter: &'a Cell<usize>,
    v: impl Fn(&Tensor<f64>, f64, Branch) -> Tensor<f64> + 'a,
) -> FnField<impl Fn(&Tensor<f64>, f64, Branch) -> Result<Tensor<f64>> + 'a> {
    FnField(move |z: &Tensor<f64>, t: f64, b: Branch| {
        counter.set(counter.get() + 1);
        Ok(v(z, t, b))
    })
}

#[test]
fn euler_is_exact_on_constant_fields() {
    let c = random_tensor(3, 2, 5);
    let calls = Cell::new(0);
    let field = counting_field(&calls, |_, _, _| c.clone());
    let z0 = random_tensor(3, 2, 6);
    for steps in [1, 7, 50] {
        let out = euler_integrate(&field, z0.clone(), steps, CfgWeights::Off).unwrap();
        for i in 0..6 {
            assert!((out.z.data[i] - (z0.data[i] + c.data[i])).abs() < 1e-13);
        }
    }
    // Dyadic step sizes and values keep every addition exact.
    let c = Tensor::full(2, 2, 0.75);
    let field = counting_field(&calls, |_, _, _| c.clone());
    let out = euler_integrate(&field, Tensor::full(2, 2, 1.5), 64, CfgWeights::Off).unwrap();
    assert!(out.z.data.iter().all(|&x| x == 2.25));
}

#[test]
fn euler_linear_field_matches_closed_form_and_is_first_order() {
    let neg = |z: &Tensor<f64>, _: f64, _: Branch| Ok(z.map(|x| -x));
    let z0 = random_tensor(4, 3, 8);
    let run = |steps| euler_integrate(&FnField(neg), z0.clone(), steps, CfgWeights::Off).unwrap().z;
    let z50 = run(50);
    let factor = (1.0 - 1.0 / 50.0f64).powi(50);
    for i in 0..12 {
        assert!((z50.data[i] - z0.data[i] * factor).abs() < 1e-6);
    }
    let err = |z: &Tensor<f64>| z.data.iter().zip(&z0.data).map(|(a, b)| (a - b * (-1.0f64).exp()).abs()).sum::<f64>();
    let ratio = err(&run(25)) / err(&z50);
    assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn evaluation_count_depends_only_on_steps_and_guidance() {
    let calls = Cell::new(0);
    let field = counting_field(&calls, |z, _, _| z.map(|x| 0.1 * x));
    for (cfg, per_step) in [(CfgWeights::Off, 1), (CfgWeights::SINGLE_DEFAULT, 2), (CfgWeights::DUAL_DEFAULT, 3)] {
        for rows in [1, 12, 800] {
            calls.set(0);
            let out = euler_sample(&field, rows, 8, 20, cfg, 3).unwrap();
            assert_eq!(out.evaluations, 20 * per_step);
            assert_eq!(calls.get(), 20 * per_step);
            assert_eq!(out.trace.len(), 20);
        }
    }
}

#[test]
fn guidance_branches_are_combined() {
    let field = FnField(|z: &Tensor<f64>, _: f64, b: Branch| {
        Ok(Tensor::full(z.rows, z.cols, match b {
            Branch::Null => 1.0,
            Branch::Face => 2.0,
            Branch::Full => 4.0,
        }))
    });
    let z0 = Tensor::zeros(1, 1);
    let single = euler_integrate(&field, z0.clone(), 1, CfgWeights::Single(3.0)).unwrap().z.item();
    assert!((single - (1.0 + 3.0 * 3.0)).abs() < 1e-12);
    let dual = euler_integrate(&field, z0, 1, CfgWeights::Dual(1.0, 5.0)).unwrap().z.item();
    assert!((dual - (1.0 + 1.0 + 5.0 * 2.0)).abs() < 1e-12);
}

#[test]
fn non_finite_state_aborts_with_step() {
    let field = FnField(|z: &Tensor<f64>, t: f64, _| Ok(z.map(|_| if t >= 0.5 { f64::INFINITY } else { 1.0 })));
    match euler_sample(&field, 3, 2, 10, CfgWeights::Off, 0) {
        Err(Error::Generation { reason, tokens, latent_dim }) => {
            assert!(reason.contains("step 5"), "{reason}");
            assert_eq!((tokens.len(), latent_dim), (6, 2));
        }
        other => panic!("expected generation error, got {other:?}"),
    }
    assert!(euler_sample(&field, 3, 2, 0, CfgWeights::Off, 0).unwrap_err().is_validation());
}

#[test]
fn sampling_is_seeded() {
    let field = FnField(|z: &Tensor<f64>, _: f64, _| Ok(z.map(|x| -0.5 * x)));
    let a = euler_sample(&field, 5, 3, 10, CfgWeights::Off, 1).unwrap();
    assert_eq!(a, euler_sample(&field, 5, 3, 10, CfgWeights::Off, 1).unwrap());
    assert_ne!(a.z, euler_sample(&field, 5, 3, 10, CfgWeights::Off, 2).unwrap().z);
}

#[test]
fn repaint_extremes() {
    let field = FnField(|z: &Tensor<f64>, t: f64, _| Ok(z.map(|x| (1.0 - t) * x + 0.3)));
    let known = random_tensor(6, 4, 2);
    let all = repaint_complete(&field, &known, &[true; 6], 20, CfgWeights::Off, 4).unwrap();
    assert_eq!((all.z, all.evaluations), (known.clone(), 0));
    let none = repaint_complete(&field, &known, &[false; 6], 20, CfgWeights::Single(2.0), 4).unwrap();
    assert_eq!(none, euler_sample(&field, 6, 4, 20, CfgWeights::Single(2.0), 4).unwrap());
    assert!(repaint_complete(&field, &known, &[true; 5], 20, CfgWeights::Off, 4).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn repaint_preserves_known_rows_bitwise(seed in any::<u64>(), rows in 2usize..10, steps in 1usize..30) {
        let mut rng = SeedStream::new(seed).rng("mask");
        let mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.5)).collect();
        let known = random_tensor(rows, 3, seed).map(|x| x * 1e3);
        let field = FnField(|z: &Tensor<f64>, t: f64, _| Ok(z.map(|x| x.sin() * (1.0 + t))));
        let out = repaint_complete(&field, &known, &mask, steps, CfgWeights::Off, seed).unwrap();
        for r in (0..rows).filter(|&r| mask[r]) {
            let same = out.z.row(r).iter().zip(known.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}

/// Two-layer MLP velocity field on 2-D points with a sinusoidal time feature.
struct Mlp {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl Mlp {
    fn features(z: &Tensor<f64>, t: &[f64]) -> Tensor<f64> {
        let mut x = Tensor::zeros(z.rows, 6);
        for r in 0..z.rows {
            let tr = t[r];
            x.row_mut(r).copy_from_slice(&[z.at(r, 0), z.at(r, 1), tr, (PI * tr).sin(), (PI * tr).cos(), (2.0 * PI * tr).sin()]);
        }
        x
    }

    fn forward(&self, g: &Graph<f64>, p: &crate::nn::Bound, x: Var) -> Var {
        let h = g.silu(self.l1.forward(g, p, x));
        let h = g.silu(self.l2.forward(g, p, h));
        self.l3.forward(g, p, h)
    }
}

#[test]
fn toy_mixture_is_recovered() {
    let sigma = 0.25;
    let modes = [[-2.0, 0.0], [2.0, 0.0]];
    let mut store = ParameterStore::<f64>::new(1);
    let mlp = Mlp {
        l1: Linear::new(&mut store, "l1", 6, 64, true),
        l2: Linear::new(&mut store, "l2", 64, 64, true),
        l3: Linear::new(&mut store, "l3", 64, 2, true),
    };
    let steps = 1500;
    let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, total_steps: steps, warmup_steps: 50, ..Default::default() }, &store);
    let ts = TimeSampler::default();
    let seed = SeedStream::new(2);
    let batch = 256;
    for k in 0..steps {
        let s = seed.index(k);
        let mut rng = s.rng("data");
        let x1 = t64(batch, 2, (0..batch).flat_map(|_| {
            let m = modes[rng.random_range(0..2)];
            let e: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
            [m[0] + sigma * e[0], m[1] + sigma * e[1]]
        }).collect());
        let x0 = gaussian_noise(batch, 2, s.derive("noise"));
        let mut trng = s.rng("time");
        let t: Vec<f64> = (0..batch).map(|_| ts.sample(&mut trng)).collect();
        let xt = interpolant_rows(&x0, &x1, &t).unwrap();
        let target = velocity_target(&x0, &x1).unwrap();
        let g = Graph::new();
        let p = store.bind(&g);
        let pred = mlp.forward(&g, &p, g.constant(Mlp::features(&xt, &t)));
        let loss = flow_loss_var(&g, pred, g.constant(target), &vec![true; batch]);
        let mut grads = g.backward(loss);
        let grads = store.gradients(&p, &mut grads);
        drop(g);
        opt.step(&mut store, &grads).unwrap();
    }
    let field = FnField(|z: &Tensor<f64>, t: f64, _| {
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let out = mlp.forward(&g, &p, g.constant(Mlp::features(z, &vec![t; z.rows])));
        Ok((*g.value(out)).clone())
    });
    let out = euler_sample(&field, 1000, 2, 50, CfgWeights::Off, 7).unwrap();
    let near = (0..1000)
        .filter(|&r| modes.iter().any(|m| ((out.z.at(r, 0) - m[0]).powi(2) + (out.z.at(r, 1) - m[1]).powi(2)).sqrt() <= 3.0 * sigma))
        .count();
    let left = (0..1000).filter(|&r| out.z.at(r, 0) < 0.0).count();
    assert!(near >= 950, "{near}/1000 samples near a mode");
    assert!((300..=700).contains(&left), "mode balance {left}/1000");
}
