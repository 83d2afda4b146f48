use std::fs;

use gat_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint, CheckpointError};
use gat_core::config::{DataConfig, RunConfig};
use gat_core::data::{gen_synthetic, save_latents, LatentDataset, Source};
use gat_core::graph::Graph;
use gat_core::nn::ModelConfig;
use gat_core::objectives::LossBreakdown;
use gat_core::trainer::{load_dataset, train, Branch, MetricRecord, Phase, RunOptions, Stage, TrainError, TrainState, DIVERGENCE_FILE, METRICS_FILE};
use tempfile::TempDir;

fn tiny() -> ModelConfig {
    ModelConfig { width: 16, depth: 4, heads: 2, patch: 2, latent_dim: 8, stages: 2, num_classes: 3, image_channels: 2, image_hw: 4 }
}

fn tiny_run() -> RunConfig {
    RunConfig {
        model: tiny(),
        batch: 4,
        projector_hidden: 8,
        steps: 6,
        eval_interval: 3,
        n_eval: 17,
        log_interval: 1,
        checkpoint_interval: 3,
        teacher: gat_core::analysis::TeacherConfig { dim: 16, heads: 2, blocks: 1, seed: 1 },
        data: DataConfig { per_class: 12, held_out: 17, ..DataConfig::default() },
        ..RunConfig::default()
    }
}

fn run_steps<T: gat_core::scalar::Scalar>(s: &mut TrainState<T>, ds: &LatentDataset, n: usize) -> Vec<LossBreakdown> {
    (0..n)
        .map(|_| {
            let (x, y) = s.next_batch(ds);
            s.train_step(&x, &y).unwrap()
        })
        .collect()
}

#[test]
fn branch_stages_run_in_order() {
    let mut s = TrainState::<f64>::new(&tiny_run()).unwrap();
    let (train_set, _) = load_dataset(&s.cfg).unwrap();
    s.trace = Some(Vec::new());
    run_steps(&mut s, &train_set, 1);
    let trace = s.trace.take().unwrap();
    let stages_of = |phase: Phase, branch: Branch| -> Vec<Stage> { trace.iter().filter(|e| e.phase == phase && e.branch == branch).map(|e| e.stage).collect() };
    use Stage::*;
    assert_eq!(stages_of(Phase::D, Branch::Real), [Augment, Replicate, Perturb, Discriminate]);
    assert_eq!(stages_of(Phase::D, Branch::RealGp), [GpNoise, Augment, Replicate, Perturb, Discriminate]);
    assert_eq!(stages_of(Phase::D, Branch::Fake), [Augment, Perturb, Discriminate]);
    assert_eq!(stages_of(Phase::D, Branch::FakeGp), [GpNoise, Augment, Perturb, Discriminate]);
    assert_eq!(stages_of(Phase::G, Branch::Fake), [Augment, Perturb, Discriminate]);
    assert_eq!(stages_of(Phase::G, Branch::Real), [Augment, Replicate, Perturb, Discriminate]);
    assert!(stages_of(Phase::G, Branch::RealGp).is_empty() && stages_of(Phase::G, Branch::FakeGp).is_empty());
    // Every discriminator event precedes every generator event.
    let first_g = trace.iter().position(|e| e.phase == Phase::G).unwrap();
    assert!(trace[first_g..].iter().all(|e| e.phase == Phase::G));
}

#[test]
fn alignment_never_reaches_the_generator() {
    let cfg = tiny_run();
    let mut s = TrainState::<f64>::new(&cfg).unwrap();
    let (train_set, _) = load_dataset(&s.cfg).unwrap();
    let (x, y) = s.next_batch(&train_set);
    let inp = s.draw_d_inputs(&y).unwrap();
    let mut g = Graph::new();
    let t = s.d_losses(&mut g, &x, &y, &inp, &mut None).unwrap();
    g.backward(t.total);
    assert!(g.param_grads(&s.g).iter().flatten().all(|&v| v == 0.0));
    assert!(g.param_grads(&s.p).iter().flatten().any(|&v| v != 0.0));

    // The generator objective is unchanged by the alignment weight.
    let ginp = s.draw_g_inputs(y.len());
    let grads = |lambda_repa: f64| {
        let mut st = s.clone();
        st.cfg.lambda_repa = lambda_repa;
        let mut g = Graph::new();
        let l = st.g_loss(&mut g, &x, &y, &ginp, &mut None).unwrap();
        g.backward(l);
        (g.scalar(l), g.param_grads(&st.g), g.param_grads(&st.p))
    };
    let (l0, g0, p0) = grads(0.0);
    let (l1, g1, _) = grads(5.0);
    assert_eq!(l0, l1);
    assert_eq!(g0, g1);
    assert!(p0.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn disabled_regularizers_leave_the_adversarial_loss() {
    let cfg = RunConfig { lambda_agp: 0.0, lambda_repa: 0.0, ..tiny_run() };
    let mut s = TrainState::<f64>::new(&cfg).unwrap();
    let (train_set, _) = load_dataset(&s.cfg).unwrap();
    for b in run_steps(&mut s, &train_set, 2) {
        assert_eq!(b.l_d_total, b.l_d_adv);
        assert_eq!(b.l_g_total, b.l_g_adv);
    }
}

#[test]
fn runs_are_deterministic() {
    let cfg = tiny_run();
    let go = || {
        let mut s = TrainState::<f32>::new(&cfg).unwrap();
        let (train_set, _) = load_dataset(&s.cfg).unwrap();
        let l = run_steps(&mut s, &train_set, 10);
        (l, s.ema.flatten())
    };
    assert_eq!(go(), go());
}

#[test]
fn checkpoint_round_trip_reproduces_training() {
    let dir = TempDir::new().unwrap();
    let mut s = TrainState::<f32>::new(&tiny_run()).unwrap();
    let (train_set, _) = load_dataset(&s.cfg).unwrap();
    run_steps(&mut s, &train_set, 3);
    let path = dir.path().join("c.gatc");
    save_checkpoint(&s, &path).unwrap();
    let mut loaded: TrainState<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 3);
    assert_eq!(loaded.ema.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), s.ema.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(loaded.g_opt, s.g_opt);
    assert_eq!(loaded.rng, s.rng);
    assert_eq!(encode(&loaded), encode(&s));
    let a = run_steps(&mut s, &train_set, 5);
    let b = run_steps(&mut loaded, &train_set, 5);
    assert_eq!(a, b);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let s = TrainState::<f32>::new(&tiny_run()).unwrap();
    let bytes = encode(&s);
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 1;
    assert!(matches!(decode::<f32>(&flipped), Err(CheckpointError::Checksum)));
    assert!(matches!(decode::<f32>(&bytes[..bytes.len() - 1]), Err(CheckpointError::Checksum)));
    assert!(matches!(decode::<f32>(b"nope"), Err(CheckpointError::BadMagic)));
    assert!(matches!(decode::<f64>(&bytes), Err(CheckpointError::DType { .. })));

    // A well-formed file of another version.
    let mut other = bytes[..bytes.len() - 32].to_vec();
    other[4..8].copy_from_slice(&99u32.to_le_bytes());
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(&other);
    other.extend_from_slice(&digest);
    assert!(matches!(decode::<f32>(&other), Err(CheckpointError::Version(99))));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny_run();
    let dir = TempDir::new().unwrap();
    let (full_dir, part_dir) = (dir.path().join("full"), dir.path().join("part"));
    let full = train::<f32>(&cfg, RunOptions { out_dir: Some(&full_dir), ..RunOptions::default() }).unwrap();
    let first = train::<f32>(&cfg, RunOptions { out_dir: Some(&part_dir), stop_at: Some(3), ..RunOptions::default() }).unwrap();
    assert_eq!(first.state.step, 3);
    let ckpt = part_dir.join("checkpoint.gatc");
    let rest = train::<f32>(&cfg, RunOptions { out_dir: Some(&part_dir), resume: Some(&ckpt), ..RunOptions::default() }).unwrap();
    assert_eq!(rest.losses, full.losses[3..]);
    assert_eq!(rest.state.step, 6);
    let read = |d: &std::path::Path| fs::read_to_string(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(&full_dir), read(&part_dir));

    let other = RunConfig { model: ModelConfig { width: 32, heads: 2, ..tiny() }, ..cfg };
    let err = train::<f32>(&other, RunOptions { resume: Some(&ckpt), ..RunOptions::default() }).unwrap_err();
    assert!(matches!(err, TrainError::Checkpoint(CheckpointError::Geometry(_))), "{err}");
}

#[test]
fn metric_log_follows_the_schema() {
    let dir = TempDir::new().unwrap();
    let summary = train::<f64>(&tiny_run(), RunOptions { out_dir: Some(dir.path()), ..RunOptions::default() }).unwrap();
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let mut steps = Vec::new();
    let mut evals = 0;
    for line in text.lines() {
        let rec: MetricRecord = serde_json::from_str(line).unwrap();
        // Records round-trip through the documented encoding.
        assert_eq!(serde_json::to_string(&rec).unwrap(), line);
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match rec {
            MetricRecord::Train { step, losses } => {
                steps.push(step);
                assert!(losses.is_finite());
                for key in ["l_g_adv", "l_d_adv", "l_ar1", "l_ar2", "l_repa", "l_d_total", "l_g_total", "lambda_agp", "lambda_repa"] {
                    assert!(v[key].is_number(), "{key} missing from {line}");
                }
            }
            MetricRecord::Eval { frechet_proxy, n_eval, .. } => {
                evals += 1;
                assert!(frechet_proxy.is_finite() && frechet_proxy >= 0.0);
                assert_eq!(n_eval, 17);
            }
        }
    }
    assert_eq!(steps, (1..=6).collect::<Vec<u64>>());
    assert_eq!(evals, 3);
    assert_eq!(summary.evals.iter().map(|e| e.0).collect::<Vec<_>>(), [0, 3, 6]);
}

#[test]
fn divergence_is_reported_and_persisted() {
    let dir = TempDir::new().unwrap();
    let m = tiny();
    let good = gen_synthetic(m.num_classes, 12, m.image_channels, m.image_hw, 1).unwrap();
    let mut samples = good.samples.clone();
    samples.iter_mut().for_each(|v| *v = f32::NAN);
    let bad = LatentDataset::from_parts(samples, good.labels.clone(), m.image_channels, m.image_hw, m.num_classes, Source::File).unwrap();
    let path = dir.path().join("nan.glt");
    save_latents(&bad, &path).unwrap();
    let cfg = RunConfig { eval_interval: 0, data: DataConfig { path: Some(path), held_out: 0, ..DataConfig::default() }, ..tiny_run() };
    let out = dir.path().join("out");
    match train::<f32>(&cfg, RunOptions { out_dir: Some(&out), ..RunOptions::default() }) {
        Err(TrainError::Diverged(r)) => {
            assert_eq!(r.step, 0);
            assert!(r.last_losses.len() <= 10);
        }
        other => panic!("expected divergence, got {:?}", other.map(|s| s.losses)),
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join(DIVERGENCE_FILE)).unwrap()).unwrap();
    assert!(report["reason"].as_str().unwrap().contains("non-finite"));
}

#[test]
fn io_errors_name_the_path() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let err = train::<f32>(&tiny_run(), RunOptions { out_dir: Some(&out), ..RunOptions::default() }).unwrap_err();
    assert!(matches!(err, TrainError::Io { .. }));
    assert!(err.to_string().contains(out.to_str().unwrap()), "{err}");
}

#[test]
fn toy_smoke_run_stays_finite() {
    let cfg = RunConfig { batch: 16, steps: 200, eval_interval: 0, data: DataConfig { per_class: 100, held_out: 0, ..DataConfig::default() }, ..RunConfig::default() };
    let summary = train::<f32>(&cfg, RunOptions::default()).unwrap();
    assert_eq!(summary.losses.len(), 200);
    assert!(summary.losses.iter().all(LossBreakdown::is_finite));
    assert!(summary.state.ema.all_finite());
}
