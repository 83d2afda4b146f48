//! Statistical and model-level sanity checks against independent oracles.

use gat_core::analysis::{block_contribution, frechet_proxy, TeacherConfig, TeacherEncoder, FRECHET_EPS};
use gat_core::config::RunConfig;
use gat_core::data::{decode_latents, diff_augment, diff_augment_tape, draw_aug, encode_latents, gen_synthetic, max_shift, DataError};
use gat_core::generator::{sample_latents, GeneratorLayout};
use gat_core::graph::Graph;
use gat_core::mng::{make_schedule, sample_noise_stack, ScheduleKind};
use gat_core::nn::ModelConfig;
use gat_core::optim::ema_update;
use gat_core::probe::update_probe;
use gat_core::trainer::TrainState;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig { width: 16, depth: 4, heads: 2, patch: 2, latent_dim: 8, stages: 2, num_classes: 3, image_channels: 2, image_hw: 4 }
}

fn moments(x: &[f64]) -> (f64, f64, f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let c = |p: i32| x.iter().map(|v| (v - m).powi(p)).sum::<f64>() / n;
    let var = c(2);
    (m, var, c(3) / var.powf(1.5), c(4) / (var * var) - 3.0)
}

#[test]
fn noise_levels_are_standard_normal() {
    let s = make_schedule(4, ScheduleKind::Exponential).unwrap();
    let stack = sample_noise_stack::<f64, _>(100_000, &s, &mut ChaCha8Rng::seed_from_u64(11));
    for (k, eps) in stack.eps.iter().enumerate() {
        let (m, var, skew, kurt) = moments(eps);
        assert!(m.abs() < 0.02, "level {k} mean {m}");
        assert!((var - 1.0).abs() < 0.02, "level {k} var {var}");
        assert!(skew.abs() < 0.05, "level {k} skew {skew}");
        assert!(kurt.abs() < 0.1, "level {k} kurtosis {kurt}");
    }
}

#[test]
fn synthetic_set_is_normalized_and_linearly_separable() {
    let ds = gen_synthetic(10, 200, 4, 8, 7).unwrap();
    for s in ds.channel_stats() {
        assert!(s.mean.abs() < 1e-3 && (s.std - 1.0).abs() < 1e-3, "{s:?}");
    }
    let (train, held) = ds.split(400, 3);
    // Closed-form ridge least squares onto one-hot targets.
    let d = train.sample_len() + 1;
    let design = |set: &gat_core::data::LatentDataset| {
        DMatrix::from_fn(set.len(), d, |i, j| if j + 1 == d { 1.0 } else { set.sample(i)[j] as f64 })
    };
    let x = design(&train);
    let y = DMatrix::from_fn(train.len(), 10, |i, c| if train.labels[i] as usize == c { 1.0 } else { 0.0 });
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * 1e-3;
    let w = gram.cholesky().expect("positive definite").solve(&(x.transpose() * y));
    let scores = design(&held) * w;
    let correct = (0..held.len()).filter(|&i| scores.row(i).transpose().argmax().0 == held.labels[i] as usize).count();
    let acc = correct as f64 / held.len() as f64;
    println!("linear probe accuracy {acc}");
    assert!(acc > 0.9, "{acc}");
}

#[test]
fn truncated_glt1_is_rejected() {
    let ds = gen_synthetic(5, 2, 4, 8, 1).unwrap();
    let bytes = encode_latents(&ds);
    assert!(matches!(decode_latents(&bytes[..bytes.len() - 1]), Err(DataError::TruncatedBody { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_latents(&long), Err(DataError::TrailingBytes { .. })));
}

#[test]
fn augmentation_preserves_the_interior_mean() {
    let (ch, hw) = (4, 8);
    let ds = gen_synthetic(2, 1, ch, hw, 5).unwrap();
    let x: Vec<f64> = ds.sample(0).iter().map(|&v| v as f64 + 3.0).collect();
    let input_mean = x.iter().sum::<f64>() / x.len() as f64;
    let s = max_shift(hw) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut acc, mut n) = (0.0, 0usize);
    for _ in 0..4000 {
        let p = draw_aug(&mut rng, 1, ch, hw);
        let y = diff_augment(&x, &p, ch, hw);
        for c in 0..ch {
            for r in s..hw - s {
                for col in s..hw - s {
                    acc += y[c * hw * hw + r * hw + col];
                    n += 1;
                }
            }
        }
    }
    let out_mean = acc / n as f64;
    assert!((out_mean / input_mean - 1.0).abs() < 0.02, "{out_mean} vs {input_mean}");
}

#[test]
fn augmentation_gradient_matches_finite_differences() {
    let (ch, hw, batch) = (2, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = draw_aug(&mut rng, batch, ch, hw);
    let x: Vec<f64> = sample_latents(&mut rng, batch * ch * hw * hw, 1);
    let weights: Vec<f64> = sample_latents(&mut rng, x.len(), 1);
    let objective = |x: &[f64]| -> f64 { diff_augment(x, &params, ch, hw).iter().zip(&weights).map(|(a, b)| a * b).sum() };
    let mut g = Graph::new();
    let xv = g.input(x.clone(), &[batch, ch, hw, hw]);
    let y = diff_augment_tape(&mut g, xv, &params, ch, hw);
    let wv = g.constant(weights.clone(), &[x.len()]);
    let prod = g.mul(y, wv);
    let loss = g.sum(prod);
    g.backward(loss);
    let grad = g.grad(xv).unwrap().to_vec();
    let h = 1e-5;
    for i in (0..x.len()).step_by(7) {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
        assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-8) + 1e-9, "index {i}: {fd} vs {}", grad[i]);
    }
}

fn sample_cov(x: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = x.len() as f64;
    let mu = [x.iter().map(|r| r[0]).sum::<f64>() / n, x.iter().map(|r| r[1]).sum::<f64>() / n];
    let mut c = [[0.0; 2]; 2];
    for r in x {
        for i in 0..2 {
            for j in 0..2 {
                c[i][j] += (r[i] - mu[i]) * (r[j] - mu[j]) / (n - 1.0);
            }
        }
    }
    (mu, c)
}

#[test]
fn frechet_matches_two_dimensional_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let draw = |rng: &mut ChaCha8Rng, shift: f64, mix: f64| -> Vec<[f64; 2]> {
        (0..500)
            .map(|_| {
                let z: Vec<f64> = sample_latents(rng, 1, 2);
                [z[0] + shift, mix * z[0] + 0.5 * z[1] - shift]
            })
            .collect()
    };
    let (a, b) = (draw(&mut rng, 0.0, 0.3), draw(&mut rng, 0.7, -0.9));
    let (ma, mut ca) = sample_cov(&a);
    let (mb, mut cb) = sample_cov(&b);
    for c in [&mut ca, &mut cb] {
        c[0][0] += FRECHET_EPS;
        c[1][1] += FRECHET_EPS;
    }
    // For 2x2 PSD M, Tr(sqrt(M)) = sqrt(Tr M + 2 sqrt(det M)).
    let prod = [
        [ca[0][0] * cb[0][0] + ca[0][1] * cb[1][0], ca[0][0] * cb[0][1] + ca[0][1] * cb[1][1]],
        [ca[1][0] * cb[0][0] + ca[1][1] * cb[1][0], ca[1][0] * cb[0][1] + ca[1][1] * cb[1][1]],
    ];
    let det = |m: [[f64; 2]; 2]| m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let tr_sqrt = (prod[0][0] + prod[1][1] + 2.0 * (det(ca) * det(cb)).sqrt()).sqrt();
    let oracle = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1] - 2.0 * tr_sqrt;
    let rows = |x: &[[f64; 2]]| x.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let got = frechet_proxy(&rows(&a), &rows(&b)).unwrap();
    assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
}

#[test]
fn teacher_is_deterministic_and_non_degenerate() {
    let model = ModelConfig::toy();
    let t = TeacherEncoder::new(TeacherConfig::default(), &model).unwrap();
    let x: Vec<f64> = sample_latents(&mut ChaCha8Rng::seed_from_u64(1), 200, model.image_len());
    let tok = t.encode(&x, 200).unwrap();
    assert_eq!(tok.len(), 200 * (model.num_patches() + 1) * t.cfg.dim);
    let again = TeacherEncoder::new(TeacherConfig::default(), &model).unwrap().encode(&x, 200).unwrap();
    assert_eq!(tok, again);
    let cls = t.cls_features(&x, 200).unwrap();
    let cos = |a: &[f64], b: &[f64]| {
        let (va, vb) = (DVector::from_column_slice(a), DVector::from_column_slice(b));
        va.dot(&vb) / (va.norm() * vb.norm())
    };
    let max = (0..100).map(|i| cos(&cls[2 * i], &cls[2 * i + 1])).fold(f64::MIN, f64::max);
    assert!(max < 0.99, "{max}");
}

#[test]
fn block_contribution_baselines() {
    let cfg = tiny();
    let (layout, mut params) = GeneratorLayout::new::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let z: Vec<f64> = sample_latents(&mut ChaCha8Rng::seed_from_u64(4), 32, cfg.latent_dim);
    let classes: Vec<usize> = (0..32).map(|i| i % cfg.num_classes).collect();
    let fresh = block_contribution(&layout, &params, &z, &classes, None).unwrap();
    assert_eq!(fresh.distances.len(), cfg.depth);
    let image_rms = {
        let img = layout.synthesize(&params, vec![layout.styles(&params, &z, &classes).unwrap(); cfg.depth], 32, Default::default()).unwrap();
        (img.final_image().iter().map(|v| v * v).sum::<f64>() / 32.0).sqrt()
    };
    for d in &fresh.distances {
        assert!(*d < 0.05 * image_rms.max(1e-12), "{d} vs image norm {image_rms}");
    }
    // Exactly zero alpha gates: block 1 is an identity, so bypassing it is free.
    for name in ["gen.block1.gates.alpha_attn.w", "gen.block1.gates.alpha_ffn.w"] {
        let id = params.find(name).unwrap();
        params.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }
    let r = block_contribution(&layout, &params, &z, &classes, None).unwrap();
    assert_eq!(r.distances[1], 0.0);
}

#[test]
fn ema_reaches_stationary_params() {
    let (_, params) = GeneratorLayout::new::<f64, _>(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut ema = params.clone();
    ema.tensors_mut().iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
    for _ in 0..2000 {
        ema_update(&mut ema, &params, 0.99).unwrap();
    }
    for (e, p) in ema.flatten().iter().zip(params.flatten()) {
        assert!((e - p).abs() <= 1e-8 * p.abs().max(1.0));
    }
    let before = ema.flatten();
    let same = ema.clone();
    ema_update(&mut ema, &same, 0.5).unwrap();
    assert_eq!(ema.flatten(), before);
}

fn tiny_run() -> RunConfig {
    RunConfig { model: tiny(), batch: 4, projector_hidden: 8, eval_interval: 0, ..RunConfig::default() }
}

#[test]
fn one_small_discriminator_step_descends() {
    let mut s = TrainState::<f64>::new(&tiny_run()).unwrap();
    let ds = gen_synthetic(3, 4, 2, 4, 1).unwrap();
    let (x, y) = s.next_batch(&ds);
    let inp = s.draw_d_inputs(&y).unwrap();
    let loss_at = |s: &TrainState<f64>| {
        let mut g = Graph::new();
        let t = s.d_losses(&mut g, &x, &y, &inp, &mut None).unwrap();
        g.scalar(t.total)
    };
    let mut g = Graph::new();
    let t = s.d_losses(&mut g, &x, &y, &inp, &mut None).unwrap();
    let before = g.scalar(t.total);
    g.backward(t.total);
    let grads = g.param_grads(&s.d);
    for (p, gr) in s.d.tensors_mut().iter_mut().zip(&grads) {
        for (v, d) in p.data.iter_mut().zip(gr) {
            *v -= 1e-4 * d;
        }
    }
    let after = loss_at(&s);
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn zero_learning_rate_probe_is_zero() {
    let out = update_probe(&tiny(), 0.0, 4, 1, 0).unwrap();
    assert_eq!(out.value(), Some(0.0));
}
