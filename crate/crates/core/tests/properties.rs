use std::sync::Arc;

use gat_core::analysis::{frechet_proxy, pca_features};
use gat_core::data::{decode_header, decode_latents, encode_latents, gen_synthetic, LatentDataset, Source};
use gat_core::discriminator::{discriminate, DiscSettings, DiscriminatorLayout};
use gat_core::generator::{generate, sample_latents, GeneratorLayout, SampleSettings};
use gat_core::graph::Graph;
use gat_core::mng::{make_schedule, perturb, replicate_real, sample_noise_stack, ImageStack, ScheduleKind};
use gat_core::nn::{gat_block, rope_table, BlockCtx, Bound, GateVars, GatBlockLayout, ModelConfig, ModulationGates};
use gat_core::objectives::{adv_losses, pairing_tape, repa_loss, softplus};
use gat_core::optim::adapt_lr;
use gat_core::params::ParamStore;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig { width: 16, depth: 4, heads: 2, patch: 2, latent_dim: 8, stages: 2, num_classes: 3, image_channels: 2, image_hw: 4 }
}

fn randn(seed: u64, n: usize) -> Vec<f64> {
    sample_latents(&mut ChaCha8Rng::seed_from_u64(seed), n, 1)
}

fn zero_tensor(store: &mut ParamStore<f64>, name: &str) {
    let id = store.find(name).unwrap_or_else(|| panic!("no tensor {name}"));
    store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapt_lr_is_homogeneous(eta in 1e-6f64..1e-1, c in 1usize..4096, k in 1usize..16) {
        let a = adapt_lr(eta, c as f64, (k * c) as f64).unwrap();
        prop_assert!(close(a, eta / k as f64, 4.0 * f64::EPSILON), "{a} vs {}", eta / k as f64);
        prop_assert_eq!(adapt_lr(eta, c as f64, c as f64).unwrap(), eta);
    }

    #[test]
    fn schedule_identities(stages in 1usize..16, linear in any::<bool>()) {
        let kind = if linear { ScheduleKind::Linear } else { ScheduleKind::Exponential };
        let s = make_schedule(stages, kind).unwrap();
        prop_assert_eq!(s.alphas[stages - 1], 1.0);
        for k in 2..=stages {
            let (r, sg) = (s.ratio(k), s.sigma(k));
            prop_assert!(close(r * s.alphas[k - 1], s.alphas[k - 2], f64::EPSILON), "k={k}");
            prop_assert!((r * r + sg * sg - 1.0).abs() < 1e-12);
        }
        if !linear {
            for k in 2..=stages {
                prop_assert_eq!(s.ratio(k) * s.alphas[k - 1], s.alphas[k - 2]);
            }
        }
    }

    #[test]
    fn softplus_gap_identity(t in -50.0f64..50.0) {
        prop_assert!((softplus(t) - softplus(-t) - t).abs() <= 1e-12 * t.abs().max(1.0));
    }

    #[test]
    fn adversarial_gap_equals_mean_logit_difference(pairs in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 1..32)) {
        let (r, f): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (lg, ld) = adv_losses(&r, &f).unwrap();
        let gap = f.iter().zip(&r).map(|(a, b)| a - b).sum::<f64>() / r.len() as f64;
        prop_assert!((lg - ld - gap).abs() < 1e-12, "{lg} - {ld} vs {gap}");
    }

    #[test]
    fn pairing_is_index_aligned(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..16)) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut g = Graph::<f64>::new();
        let (va, vb) = (g.constant(a.clone(), &[a.len()]), g.constant(b.clone(), &[b.len()]));
        let l = pairing_tape(&mut g, va, vb);
        let oracle = a.iter().zip(&b).map(|(x, y)| softplus(x - y)).sum::<f64>() / a.len() as f64;
        prop_assert!((g.scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn repa_is_bounded(seed in any::<u64>(), tokens in 1usize..8, dim in 1usize..12) {
        let p = randn(seed, tokens * dim);
        let t = randn(seed ^ 1, tokens * dim);
        let l = repa_loss(&p, &t, dim).unwrap();
        prop_assert!((-1.0..=1.0).contains(&l), "{l}");
        // Nonnegative features have nonnegative cosines.
        let (pa, ta): (Vec<f64>, Vec<f64>) = (p.iter().map(|v| v.abs()).collect(), t.iter().map(|v| v.abs()).collect());
        let l = repa_loss(&pa, &ta, dim).unwrap();
        prop_assert!((-1.0..=0.0).contains(&l), "{l}");
        prop_assert!((repa_loss(&p, &p, dim).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn glt1_round_trip(seed in any::<u64>(), count in 0usize..6, channels in 1usize..4, hw in 1usize..5, classes in 1usize..5) {
        let n = count * channels * hw * hw;
        let samples: Vec<f32> = randn(seed, n).into_iter().map(|v| v as f32).collect();
        let labels: Vec<u32> = (0..count).map(|i| (i % classes) as u32).collect();
        let ds = LatentDataset::from_parts(samples, labels, channels, hw, classes, Source::File).unwrap();
        let bytes = encode_latents(&ds);
        let h = decode_header(&bytes).unwrap();
        prop_assert_eq!(28 + h.body_len(), bytes.len());
        let back = decode_latents(&bytes).unwrap();
        prop_assert_eq!(back.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), ds.samples.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.labels, ds.labels);
        prop_assert_eq!(encode_latents(&decode_latents(&bytes).unwrap()), bytes);
    }

    #[test]
    fn frechet_is_symmetric_and_zero_on_self(seed in any::<u64>(), dim in 1usize..6) {
        let rows = |s: u64| -> Vec<Vec<f64>> { randn(s, 40 * dim).chunks(dim).map(|c| c.iter().map(|v| v * 1.5 + 0.3).collect()).collect() };
        let (a, b) = (rows(seed), rows(seed.wrapping_add(1)));
        let ab = frechet_proxy(&a, &b).unwrap();
        let ba = frechet_proxy(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        prop_assert!(frechet_proxy(&a, &a).unwrap().abs() < 1e-8);
    }

    #[test]
    fn final_level_is_transparent(seed in any::<u64>(), stages in 1usize..6) {
        let s = make_schedule(stages, ScheduleKind::Exponential).unwrap();
        let x = randn(seed, 2 * 3 * 4 * 4);
        let stack = replicate_real(&x, 2, 3, 4, stages);
        let noise = sample_noise_stack::<f64, _>(x.len(), &s, &mut ChaCha8Rng::seed_from_u64(seed));
        let out = perturb(&stack, &s, &noise).unwrap();
        prop_assert_eq!(&out.levels[stages - 1], &x);
    }

    #[test]
    fn pca_components_are_orthonormal(seed in any::<u64>()) {
        let feats = randn(seed, 3 * 4 * 6);
        let pca = pca_features(&feats, 3, 2, 2, 6).unwrap();
        prop_assert_eq!(pca.components.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = pca.components[i].iter().zip(&pca.components[j]).map(|(a, b)| a * b).sum();
                prop_assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-9, "{i},{j}: {d}");
            }
        }
    }

    #[test]
    fn synthetic_data_is_pure(seed in any::<u64>()) {
        let a = gen_synthetic(3, 4, 2, 4, seed).unwrap();
        let b = gen_synthetic(3, 4, 2, 4, seed).unwrap();
        prop_assert_eq!(a, b);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_gates_make_a_block_the_identity(seed in any::<u64>(), batch in 1usize..3) {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let layout = GatBlockLayout::new(&mut store, &mut rng, "b", &cfg);
        let n = cfg.num_patches();
        let mut g = Graph::new();
        let xv = randn(seed, batch * n * cfg.width);
        let x = g.constant(xv.clone(), &[batch, n, cfg.width]);
        let zeros = ModulationGates::zeros(cfg.width);
        let mut gates = GateVars::constant(&mut g, &zeros);
        if batch > 1 {
            let z = g.constant(vec![0.0; batch * cfg.width], &[batch, cfg.width]);
            gates = GateVars { gamma_attn: z, gamma_ffn: z, alpha_attn: z, alpha_ffn: z };
        }
        let rope = Arc::new(rope_table::<f64>(cfg.grid(), cfg.grid(), 0, cfg.head_dim(), true).unwrap());
        let ctx = BlockCtx { batch, tokens: n, width: cfg.width, heads: cfg.heads, rope: Some(rope) };
        let y = gat_block(&mut g, Bound::new(&store, false), &layout, x, &gates, &ctx).unwrap();
        prop_assert_eq!(g.value(y), &xv[..]);
    }

    #[test]
    fn generator_levels_accumulate_heads(seed in any::<u64>()) {
        let cfg = tiny();
        let (layout, params) = GeneratorLayout::new::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let z = randn(seed ^ 7, 2 * cfg.latent_dim);
        let classes = [0, 2];
        let full = generate(&layout, &params, &z, &classes, &SampleSettings::default()).unwrap();
        prop_assert_eq!(full.images.len(), cfg.stages);
        for level in &full.images {
            prop_assert_eq!(level.len(), 2 * cfg.image_len());
        }
        // Identical inputs give identical outputs.
        prop_assert_eq!(&generate(&layout, &params, &z, &classes, &SampleSettings::default()).unwrap(), &full);
        for k in 1..cfg.stages {
            // Only head k active: its level is exactly that head's output.
            let mut only = params.clone();
            for j in (0..cfg.stages).filter(|&j| j != k) {
                zero_tensor(&mut only, &format!("gen.head{j}.w"));
                zero_tensor(&mut only, &format!("gen.head{j}.b"));
            }
            let solo = generate(&layout, &only, &z, &classes, &SampleSettings::default()).unwrap();
            for ((a, b), h) in full.images[k].iter().zip(&full.images[k - 1]).zip(&solo.images[k]) {
                prop_assert!((a - b - h).abs() < 1e-12, "{} vs {h}", a - b);
            }
        }
        for j in 0..cfg.stages {
            let mut zeroed = params.clone();
            zero_tensor(&mut zeroed, &format!("gen.head{j}.w"));
            zero_tensor(&mut zeroed, &format!("gen.head{j}.b"));
            let out = generate(&layout, &zeroed, &z, &classes, &SampleSettings::default()).unwrap();
            for k in 0..cfg.stages {
                prop_assert_eq!(out.images[k] != full.images[k], k >= j, "head {} level {}", j, k);
            }
        }
    }

    #[test]
    fn discriminator_samples_are_independent(seed in any::<u64>()) {
        let cfg = tiny();
        let (layout, params) = DiscriminatorLayout::new::<f64, _>(&cfg, DiscSettings::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let stack = |s: u64| ImageStack { batch: 3, channels: 2, hw: 4, levels: (0..2).map(|k| randn(s + k, 3 * cfg.image_len())).collect() };
        let a = stack(seed);
        let mut b = stack(seed ^ 0xabc);
        for level in 0..2 {
            b.levels[level][..cfg.image_len()].copy_from_slice(&a.levels[level][..cfg.image_len()]);
        }
        let oa = discriminate(&layout, &params, &a, &[1, 0, 2]).unwrap();
        let ob = discriminate(&layout, &params, &b, &[1, 2, 0]).unwrap();
        prop_assert_eq!(oa.len(), 3);
        prop_assert!((oa[0].logit - ob[0].logit).abs() < 1e-12);
        prop_assert_eq!(oa[0].patch_tokens.len(), cfg.num_patches());
    }

    #[test]
    fn zero_layerscale_reduces_discriminator_to_patchify_and_head(seed in any::<u64>()) {
        let cfg = tiny();
        let (layout, mut params) = DiscriminatorLayout::new::<f64, _>(&cfg, DiscSettings::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for i in 0..cfg.depth {
            zero_tensor(&mut params, &format!("disc.block{i}.ls_attn"));
            zero_tensor(&mut params, &format!("disc.block{i}.ls_ffn"));
        }
        let stack = ImageStack { batch: 2, channels: 2, hw: 4, levels: (0..2).map(|k| randn(seed + k, 2 * cfg.image_len())).collect() };
        let base = discriminate(&layout, &params, &stack, &[0, 1]).unwrap();
        // Scramble every attention and FFN weight; the logits must not move.
        let mut scrambled = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
        for t in scrambled.tensors_mut().iter_mut().filter(|t| t.name.contains(".attn.") || t.name.contains(".ffn.")) {
            t.data = sample_latents(&mut rng, t.data.len(), 1);
        }
        let after = discriminate(&layout, &scrambled, &stack, &[0, 1]).unwrap();
        for (x, y) in base.iter().zip(&after) {
            prop_assert_eq!(x.logit, y.logit);
        }
    }
}
