use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::density::{density_loss_log, feature_density, scale_density, DensityBatch, EPSILON};
use crate::model::{GridTransform, ModelConfig, HIDDEN};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_model(seed: u64) -> ApmgModel<f64> {
    let cfg = ModelConfig::new(4, 1, [4, 4, 4]);
    let mut m = ApmgModel::<f64>::init(&cfg, seed).unwrap();
    let mut r = rng(seed ^ 0xABCD);
    for v in &mut m.grids.data {
        *v = r.gen_range(-1.0..1.0);
    }
    m.set_range(-0.5, 2.0);
    m
}

fn random_batch(seed: u64, n: usize, spread: f64) -> (Vec<[f64; 3]>, Vec<f64>) {
    let mut r = rng(seed);
    let coords = (0..n).map(|_| [0; 3].map(|_| r.gen_range(-spread..spread))).collect();
    let values = (0..n).map(|_| r.gen_range(-0.5..2.0)).collect();
    (coords, values)
}

fn flatten(m: &ApmgModel<f64>) -> Vec<f64> {
    let mut v = m.grids.data.clone();
    v.extend(&m.decoder.w1);
    v.extend(&m.decoder.w2);
    v.extend(&m.decoder.w3);
    v
}

fn unflatten(m: &mut ApmgModel<f64>, p: &[f64]) {
    let mut at = 0;
    for dst in [
        &mut m.grids.data,
        &mut m.decoder.w1,
        &mut m.decoder.w2,
        &mut m.decoder.w3,
    ] {
        let n = dst.len();
        dst.copy_from_slice(&p[at..at + n]);
        at += n;
    }
}

fn flatten_grads(g: &GradientSet<f64>) -> Vec<f64> {
    let mut v = g.grids.clone();
    v.extend(&g.w1);
    v.extend(&g.w2);
    v.extend(&g.w3);
    v
}

fn transform_rows(m: &ApmgModel<f64>) -> Vec<f64> {
    m.transforms.iter().flat_map(|g| g.m[..3].iter().flatten().copied()).collect()
}

fn set_transform_rows(m: &mut ApmgModel<f64>, p: &[f64]) {
    for (g, c) in m.transforms.iter_mut().zip(p.chunks_exact(12)) {
        for r in 0..3 {
            g.m[r].copy_from_slice(&c[r * 4..r * 4 + 4]);
        }
    }
}

fn mse(m: &ApmgModel<f64>, coords: &[[f64; 3]], targets: &[f64]) -> f64 {
    coords.iter().zip(targets).map(|(x, t)| (m.forward(*x) - t).powi(2)).sum::<f64>() / coords.len() as f64
}

#[test]
fn recon_exact_targets_give_zero() {
    let m = random_model(1);
    let (coords, _) = random_batch(2, 300, 1.0);
    let mut targets = vec![0.0; coords.len()];
    m.forward_batch(&coords, &mut targets);
    let r = recon_loss_and_grads(&m, &coords, &targets).unwrap();
    assert_eq!(r.loss, 0.0);
    assert!(r.errors.iter().all(|&e| e == 0.0));
    let g = r.grads;
    assert!(flatten_grads(&g).iter().all(|&v| v == 0.0));
    assert!(g.transforms.iter().flatten().flatten().all(|&v| v == 0.0));
}

#[test]
fn recon_zero_output_layer_example() {
    let mut m = random_model(3);
    for v in &mut m.grids.data {
        *v = v.abs();
    }
    m.decoder.w3.fill(0.0);
    m.set_range(0.0, 1.0);
    let (coords, _) = random_batch(4, 50, 1.0);
    let targets = vec![1.0; 50];
    let r = recon_loss_and_grads(&m, &coords, &targets).unwrap();
    assert_eq!(r.loss, 1.0);
    // with f ≡ 0: dW3 = (1/N) Σ 2(0 - 1) h2
    let inp = m.feature_len();
    let mut want = [0.0; HIDDEN];
    for x in &coords {
        let y = m.encode(*x);
        let h1: Vec<f64> = (0..HIDDEN)
            .map(|o| (0..inp).map(|i| m.decoder.w1[o * inp + i] * y[i]).sum::<f64>().max(0.0))
            .collect();
        for (o, w) in want.iter_mut().enumerate() {
            let h2 = (0..HIDDEN).map(|i| m.decoder.w2[o * HIDDEN + i] * h1[i]).sum::<f64>().max(0.0);
            *w += -2.0 * h2 / 50.0;
        }
    }
    assert!(r.grads.w3.iter().any(|&v| v != 0.0));
    for (a, b) in r.grads.w3.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    // nothing upstream of a zero output layer moves
    assert!(r.grads.w2.iter().chain(&r.grads.w1).chain(&r.grads.grids).all(|&v| v == 0.0));
}

#[test]
fn recon_gradients_match_finite_differences() {
    for seed in 0..3 {
        let model = random_model(10 + seed);
        let (coords, targets) = random_batch(20 + seed, 64, 0.95);
        let r = recon_loss_and_grads(&model, &coords, &targets).unwrap();
        assert!((r.loss - mse(&model, &coords, &targets)).abs() < 1e-12);
        let params = flatten(&model);
        let analytic = flatten_grads(&r.grads);
        let mut pr = rng(seed);
        // every tensor gets some coverage
        let g = model.grids.data.len();
        let w1 = model.decoder.w1.len();
        let w2 = model.decoder.w2.len();
        let mut idx: Vec<usize> = (0..50).map(|_| pr.gen_range(0..params.len())).collect();
        idx.extend((0..10).map(|_| pr.gen_range(0..g)));
        idx.extend((0..10).map(|_| g + pr.gen_range(0..w1)));
        idx.extend((0..10).map(|_| g + w1 + pr.gen_range(0..w2)));
        idx.extend((0..10).map(|_| g + w1 + w2 + pr.gen_range(0..HIDDEN)));
        let mut scratch = model.clone();
        let err = finite_diff_check(
            |p| {
                unflatten(&mut scratch, p);
                mse(&scratch, &coords, &targets)
            },
            &params,
            &analytic,
            &idx,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn recon_batches_spanning_chunks_agree_with_pointwise_oracle() {
    let model = random_model(5);
    let (coords, targets) = random_batch(6, 2500, 1.0);
    let r = recon_loss_and_grads(&model, &coords, &targets).unwrap();
    let mut w3 = vec![0.0; HIDDEN];
    for (x, t) in coords.iter().zip(&targets) {
        let part = recon_loss_and_grads(&model, &[*x], &[*t]).unwrap();
        for (a, b) in w3.iter_mut().zip(&part.grads.w3) {
            *a += b / coords.len() as f64;
        }
    }
    for (a, b) in r.grads.w3.iter().zip(&w3) {
        assert!((a - b).abs() < 1e-10);
    }
    let again = recon_loss_and_grads(&model, &coords, &targets).unwrap();
    assert_eq!(again.grads, r.grads);
    assert_eq!(again.loss.to_bits(), r.loss.to_bits());
}

#[test]
fn recon_input_errors() {
    let m = random_model(0);
    assert!(matches!(recon_loss_and_grads(&m, &[], &[]), Err(Error::EmptyBatch)));
    assert!(matches!(recon_loss_and_grads(&m, &[[0.0; 3]], &[]), Err(Error::Shape(_))));
}

/// Loss with the target frozen at its value for `base`.
fn frozen_density_loss(model: &ApmgModel<f64>, coords: &[[f64; 3]], base: &DensityBatch<f64>) -> f64 {
    let rho: Vec<f64> = coords
        .iter()
        .map(|x| feature_density(&model.transforms, *x, model.config.flat_top_p))
        .collect();
    let rs = scale_density(&rho).unwrap();
    density_loss_log(&rs, &base.log_target, EPSILON)
}

#[test]
fn density_gradients_match_finite_differences() {
    for seed in 0..3 {
        let model = random_model(30 + seed);
        let (coords, _) = random_batch(40 + seed, 128, 1.0);
        let mut r = rng(50 + seed);
        let errors: Vec<f64> = (0..128).map(|_| r.gen_range(0.0..1.0f64).powi(3)).collect();
        let d = density_loss_and_grads(&model, &coords, &errors).unwrap();
        let base = DensityBatch::new(&model.transforms, &coords, &errors, 10, EPSILON).unwrap();
        assert!((d.loss - base.loss()).abs() < 1e-15, "{} {}", d.loss, base.loss());
        let params = transform_rows(&model);
        let analytic = d.grads.transform_rows();
        let idx: Vec<usize> = (0..params.len()).chain((0..50).map(|_| r.gen_range(0..params.len()))).collect();
        let mut scratch = model.clone();
        let err = finite_diff_check(
            |p| {
                set_transform_rows(&mut scratch, p);
                frozen_density_loss(&scratch, &coords, &base)
            },
            &params,
            &analytic,
            &idx,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn density_uniform_errors_are_a_fixed_point() {
    let model = random_model(7);
    let (coords, _) = random_batch(8, 256, 1.0);
    let d = density_loss_and_grads(&model, &coords, &vec![0.3; 256]).unwrap();
    assert!(d.loss.abs() <= 1e-6);
    let norm: f64 = d.grads.transform_rows().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm <= 1e-4, "{norm}");
}

/// One small grid, a high-error point just outside it along +x, and
/// low-error points inside placed in mirrored pairs.
fn pull_setup(local_x: f64) -> (ApmgModel<f64>, Vec<[f64; 3]>, Vec<f64>) {
    let mut model = ApmgModel::<f64>::zeros(&ModelConfig::new(1, 1, [2, 2, 2])).unwrap();
    model.transforms[0] = GridTransform::scale([3.0, 3.0, 3.0]);
    let far = [local_x / 3.0, 0.0, 0.0];
    let mut coords = vec![far];
    let mut errors = vec![10.0];
    let mut r = rng(9);
    for _ in 0..16 {
        let x = [0; 3].map(|_| r.gen_range(-0.15..0.15));
        coords.push(x);
        coords.push(x.map(|v| -v));
        errors.extend([0.01, 0.01]);
    }
    (model, coords, errors)
}

#[test]
fn density_pulls_grid_towards_high_error_point() {
    for local_x in [1.2, 1.05] {
        let (mut model, coords, errors) = pull_setup(local_x);
        assert!((model.transforms[0].to_local(coords[0])[0] - local_x).abs() < 1e-12);
        let d = density_loss_and_grads(&model, &coords, &errors).unwrap();
        let dt = d.grads.transforms[0][0][3];
        assert!(dt > 0.0, "{local_x}: {dt}");

        // a descent step moves the grid center towards the point
        let center = |g: &GridTransform<f64>| -g.m[0][3] / g.m[0][0];
        let before = center(&model.transforms[0]);
        let mut st = AdamState::for_transforms(&model);
        step_transforms(&mut model, &d.grads, &mut st, 1e-3).unwrap();
        assert!(center(&model.transforms[0]) > before);
    }

    let (model, coords, errors) = pull_setup(1.05);
    let base = DensityBatch::new(&model.transforms, &coords, &errors, 10, EPSILON).unwrap();
    let mut probe = model.clone();
    probe.transforms[0].m[0][3] = 1e-5;
    let up = frozen_density_loss(&probe, &coords, &base);
    probe.transforms[0].m[0][3] = -1e-5;
    let down = frozen_density_loss(&probe, &coords, &base);
    assert!(up > down);
}

#[test]
fn density_bottom_rows_are_zero() {
    let model = random_model(11);
    let (coords, _) = random_batch(12, 64, 1.0);
    let errors: Vec<f64> = (0..64).map(|i| i as f64 * 0.1).collect();
    let d = density_loss_and_grads(&model, &coords, &errors).unwrap();
    assert!(d.grads.transforms.iter().all(|g| g[3] == [0.0; 4]));
    assert!(flatten_grads(&d.grads).iter().all(|&v| v == 0.0));
}

#[test]
fn density_input_errors() {
    let model = random_model(0);
    assert!(matches!(density_loss_and_grads(&model, &[[0.0; 3]], &[1.0]), Err(Error::Shape(_))));
    assert!(matches!(density_loss_and_grads::<f64>(&model, &[], &[]), Err(Error::EmptyBatch)));
    assert!(matches!(
        density_loss_and_grads(&model, &[[9.0; 3], [-9.0; 3]], &[1.0, 2.0]),
        Err(Error::DegenerateDensity)
    ));
}

#[test]
fn masked_updates_leave_other_tensors_bit_identical() {
    let mut model = random_model(13).cast::<f32>();
    let (coords, targets) = random_batch(14, 200, 1.0);
    let coords: Vec<[f32; 3]> = coords.iter().map(|x| x.map(|v| v as f32)).collect();
    let targets: Vec<f32> = targets.iter().map(|&v| v as f32).collect();
    let mut main = AdamState::for_main(&model);
    let mut tr = AdamState::for_transforms(&model);

    let before = model.clone();
    let r = recon_loss_and_grads(&model, &coords, &targets).unwrap();
    step_main(&mut model, &r.grads, &mut main, 0.01).unwrap();
    assert_eq!(model.transforms, before.transforms);
    assert_ne!(model.grids, before.grids);

    let before = model.clone();
    let d = density_loss_and_grads(&model, &coords, &r.errors).unwrap();
    step_transforms(&mut model, &d.grads, &mut tr, 0.001).unwrap();
    assert_eq!(model.grids, before.grids);
    assert_eq!(model.decoder, before.decoder);
    assert_ne!(model.transforms, before.transforms);
    assert!(model.transforms.iter().all(|g| g.m[3] == [0.0, 0.0, 0.0, 1.0]));
}

#[test]
fn adam_examples() {
    let mut w = vec![0.5f64, -1.0];
    let mut st = AdamState::new(&[2]);
    adam_step(&mut [&mut w], &[&[0.0, 0.0]], &mut st, 0.01).unwrap();
    assert_eq!(w, vec![0.5, -1.0]);
    assert_eq!(st.t, 1);

    for g in [3.0, -0.02, 1e-3] {
        let mut w = vec![1.0f64];
        let mut st = AdamState::new(&[1]);
        adam_step(&mut [&mut w], &[&[g]], &mut st, 0.01).unwrap();
        let moved = 1.0 - w[0];
        assert!((moved.abs() - 0.01).abs() < 1e-4, "{moved}");
        assert_eq!(moved.signum(), g.signum());
    }

    let mut w = vec![1.0f64];
    let mut st = AdamState::new(&[1]);
    let mut prev = w[0];
    for _ in 0..10 {
        let g = 2.0 * w[0];
        adam_step(&mut [&mut w], &[&[g]], &mut st, 0.1).unwrap();
        assert!(w[0] < prev && w[0] > 0.0);
        prev = w[0];
    }

    let mut st = AdamState::<f64>::new(&[2]);
    assert!(matches!(adam_step(&mut [&mut [0.0][..]], &[&[1.0]], &mut st, 0.1), Err(Error::Shape(_))));
    assert!(matches!(adam_step(&mut [], &[], &mut st, 0.1), Err(Error::Shape(_))));
}

/// Textbook Adam in 64-bit.
fn reference_adam(w: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, lr: f64) {
    for i in 0..w.len() {
        m[i] = 0.9 * m[i] + 0.1 * g[i];
        v[i] = 0.99 * v[i] + 0.01 * g[i] * g[i];
        let mh = m[i] / (1.0 - 0.9f64.powi(t));
        let vh = v[i] / (1.0 - 0.99f64.powi(t));
        w[i] -= lr * mh / (vh.sqrt() + 1e-8);
    }
}

#[test]
fn adam_matches_reference() {
    let mut r = rng(15);
    let mut w: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
    let mut ws = w.clone();
    let (mut m, mut v) = (vec![0.0; 20], vec![0.0; 20]);
    let mut st = AdamState::new(&[20]);
    for t in 1..=200 {
        let g: Vec<f64> = (0..20).map(|_| r.gen_range(-2.0..2.0)).collect();
        reference_adam(&mut w, &mut m, &mut v, &g, t, 0.01);
        adam_step(&mut [&mut ws], &[&g], &mut st, 0.01).unwrap();
    }
    for (a, b) in w.iter().zip(&ws) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn adam_zero_gradient_is_a_no_op(
        w in prop::collection::vec(-10.0f64..10.0, 1..16),
        m0 in -1.0f64..1.0,
        v0 in 0.0f64..1.0,
        t0 in 0u64..1000,
        lr in 1e-5f64..1.0,
    ) {
        let n = w.len();
        let mut st = AdamState::new(&[n]);
        st.m[0].fill(m0);
        st.v[0].fill(v0);
        st.t = t0;
        let mut p = w.clone();
        adam_step(&mut [&mut p], &[&vec![0.0; n]], &mut st, lr).unwrap();
        prop_assert_eq!(p, w);
        prop_assert_eq!(st.t, t0 + 1);
    }
}

#[test]
fn finite_diff_check_examples() {
    let a = [1.5, -2.0, 0.25];
    let quad = |p: &[f64]| p.iter().zip(&a).map(|(x, c)| c * x * x).sum::<f64>();
    let params = [0.3, -0.7, 2.0];
    let grad: Vec<f64> = params.iter().zip(&a).map(|(x, c)| 2.0 * c * x).collect();
    let err = finite_diff_check(quad, &params, &grad, &[0, 1, 2], 1e-4).unwrap();
    assert!(err <= 1e-6, "{err}");

    let lin = |p: &[f64]| 2.0 * p[0] - 3.0 * p[1];
    let err = finite_diff_check(lin, &[0.5, 0.5], &[2.0, -3.0], &[0, 1], 1e-3).unwrap();
    assert!(err < 1e-10);

    assert!(matches!(finite_diff_check(lin, &[0.0, 0.0], &[2.0, -3.0], &[0], 0.0), Err(Error::InvalidStep(_))));
}
