use std::fmt::Display;
use std::fs;
use std::path::Path;

use gat_core::analysis::{self, AnalysisError, BlockContributionReport, PcaBlock, TeacherConfig, TeacherEncoder};
use gat_core::checkpoint::{load_checkpoint, CheckpointError};
use gat_core::config::{DataConfig, RunConfig};
use gat_core::data::{self, DataError, LatentDataset, Source};
use gat_core::generator::{self, Guidance, SampleSettings, StyleOrder};
use gat_core::nn::ModelConfig;
use gat_core::optim::adapt_lr;
use gat_core::probe::{self, CrossCheck, ProbeOutcome};
use gat_core::trainer::{self, MetricRecord, RunOptions, TrainError, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::{BlocksArgs, FidArgs, InspectArgs, Order, PcaArgs, ProbeArgs, SampleArgs, SynthArgs, TrainArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Io,
    Diverged,
    Format,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Io => 3,
            Kind::Diverged => 4,
            Kind::Format => 5,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    fn new(kind: Kind, message: impl Display) -> Self {
        Self { kind, message: message.to_string() }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = if matches!(e, DataError::Io { .. }) { Kind::Io } else { Kind::Format };
        CliError::new(kind, e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let kind = match e {
            CheckpointError::Io { .. } => Kind::Io,
            CheckpointError::Config(_) => Kind::Config,
            _ => Kind::Format,
        };
        CliError::new(kind, e)
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::new(Kind::Config, e)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io { .. } => CliError::new(Kind::Io, e),
            TrainError::Diverged(_) => CliError::new(Kind::Diverged, e),
            TrainError::Config(_) | TrainError::Nn(_) | TrainError::Disc(_) | TrainError::Optim(_) | TrainError::Analysis(_) => CliError::new(Kind::Config, e),
        }
    }
}

impl From<generator::GenerateError> for CliError {
    fn from(e: generator::GenerateError) -> Self {
        CliError::new(Kind::Config, e)
    }
}

impl From<gat_core::nn::NnError> for CliError {
    fn from(e: gat_core::nn::NnError) -> Self {
        CliError::new(Kind::Config, e)
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Prints the effective configuration as the first stdout line.
fn echo(command: &str, args: &impl Serialize, extra: Option<serde_json::Value>) {
    let mut v = json!({ "command": command, "args": args });
    if let Some(e) = extra {
        v["config"] = e;
    }
    println!("{v}");
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::new(Kind::Io, format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::new(Kind::Io, format!("{}: {e}", path.display())))
}

fn load_state(path: &Path) -> Result<TrainState<f32>> {
    Ok(load_checkpoint::<f32>(path)?)
}

pub fn data_synth(a: &SynthArgs) -> Result<()> {
    echo("data synth", a, None);
    let ds = data::gen_synthetic(a.classes, a.per_class, a.channels, a.hw, a.seed)?;
    data::save_latents(&ds, &a.out)?;
    println!("{}", json!({ "path": a.out, "count": ds.len() }));
    Ok(())
}

#[derive(Serialize)]
struct InspectReport {
    header: data::Glt1Header,
    class_counts: Vec<usize>,
    channel_stats: Vec<data::ChannelStats>,
}

pub fn data_inspect(a: &InspectArgs) -> Result<()> {
    echo("data inspect", a, None);
    let bytes = fs::read(&a.path).map_err(|e| CliError::new(Kind::Io, format!("{}: {e}", a.path.display())))?;
    let header = data::decode_header(&bytes)?;
    let ds = data::decode_latents(&bytes)?;
    let mut class_counts = vec![0; ds.num_classes];
    for &l in &ds.labels {
        class_counts[l as usize] += 1;
    }
    let report = InspectReport { header, class_counts, channel_stats: ds.stats.clone() };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).map_err(|e| CliError::new(Kind::Io, format!("{}: {e}", a.config.display())))?;
    let cfg = RunConfig::from_json(&text).map_err(|e| CliError::new(Kind::Config, format!("{}: {e}", a.config.display())))?;
    let resolved = cfg.resolve().map_err(|e| CliError::new(Kind::Config, e))?;
    echo("train", a, Some(serde_json::to_value(&resolved).expect("config serializes")));
    let mut progress = |r: &MetricRecord| {
        if let MetricRecord::Eval { step, frechet_proxy, .. } = r {
            eprintln!("step {step}: frechet_proxy {frechet_proxy:.6}");
        }
    };
    let opts = RunOptions {
        out_dir: Some(&a.out),
        resume: a.resume.as_deref(),
        stop_at: None,
        on_record: Some(&mut progress),
    };
    let summary = trainer::train::<f32>(&resolved, opts)?;
    println!(
        "{}",
        json!({
            "steps": summary.state.step,
            "evals": summary.evals,
            "metrics": a.out.join(trainer::METRICS_FILE),
            "checkpoint": a.out.join(trainer::CHECKPOINT_FILE),
        })
    );
    Ok(())
}

fn check_finite(name: &str, v: Option<f64>) -> Result<()> {
    match v {
        Some(x) if !x.is_finite() || x < 0.0 => Err(CliError::new(Kind::Config, format!("--{name} must be finite and nonnegative, got {x}"))),
        _ => Ok(()),
    }
}

pub fn sample(a: &SampleArgs) -> Result<()> {
    check_finite("psi", a.psi)?;
    check_finite("guidance", a.guidance)?;
    if a.count == 0 {
        return Err(CliError::new(Kind::Config, "--count must be at least 1"));
    }
    let s = load_state(&a.checkpoint)?;
    let m = &s.cfg.model;
    echo("sample", a, Some(serde_json::to_value(&s.cfg).expect("config serializes")));
    if a.class >= m.num_classes {
        return Err(CliError::new(Kind::Config, format!("--class {} is outside [0, {})", a.class, m.num_classes)));
    }
    let stats = if a.psi.is_some() || a.guidance.is_some() {
        Some(generator::collect_style_stats(&s.gen, &s.ema, a.stats_samples, a.seed ^ 0x57a7)?)
    } else {
        None
    };
    let settings = SampleSettings {
        psi: a.psi,
        guidance: a.guidance.map(|strength| Guidance { strength, block_fraction: a.guidance_fraction }),
        order: match a.order {
            Order::TruncateThenGuide => StyleOrder::TruncateThenGuide,
            Order::GuideThenTruncate => StyleOrder::GuideThenTruncate,
        },
        stats: stats.as_ref(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let z: Vec<f32> = generator::sample_latents(&mut rng, a.count, m.latent_dim);
    let classes = vec![a.class; a.count];
    let out = generator::generate(&s.gen, &s.ema, &z, &classes, &settings)?;
    let ds = LatentDataset::from_parts(out.final_image().to_vec(), vec![a.class as u32; a.count], m.image_channels, m.image_hw, m.num_classes, Source::File)?;
    data::save_latents(&ds, &a.out)?;
    println!("{}", json!({ "path": a.out, "count": a.count }));
    Ok(())
}

#[derive(Serialize)]
struct ProbeRow {
    width: usize,
    eta: f64,
    /// Median over finite seeds; absent when every seed diverged.
    median: Option<f64>,
    per_seed: Vec<ProbeOutcome>,
    /// Median of this width over the previous width's.
    ratio: Option<f64>,
}

#[derive(Serialize)]
struct CrossReport {
    width: usize,
    lr_source_width: usize,
    matched: Vec<CrossCheck>,
    transferred: Vec<CrossCheck>,
    matched_slow: usize,
    transferred_slow: usize,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn parse_pair(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::new(Kind::Config, format!("--cross-check expects A:B widths, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

pub fn probe_lr(a: &ProbeArgs) -> Result<()> {
    echo("probe-lr", a, None);
    if !(a.eta > 0.0 && a.eta.is_finite()) {
        return Err(CliError::new(Kind::Config, format!("--eta must be positive, got {}", a.eta)));
    }
    let lr_for = |w: usize| -> Result<f64> {
        if a.adapted {
            adapt_lr(a.eta, a.c_base as f64, w as f64).map_err(|e| CliError::new(Kind::Config, e))
        } else {
            Ok(a.eta)
        }
    };
    let mut rows: Vec<ProbeRow> = Vec::new();
    for &w in &a.widths {
        let model = ModelConfig { width: w, depth: a.depth, ..ModelConfig::toy() };
        model.validate()?;
        let eta = lr_for(w)?;
        let per_seed = (0..a.seeds).map(|s| probe::update_probe(&model, eta, a.batch, a.steps, s)).collect::<std::result::Result<Vec<_>, _>>()?;
        let median = median(per_seed.iter().filter_map(ProbeOutcome::value).collect());
        let ratio = match (rows.last().and_then(|r| r.median), median) {
            (Some(prev), Some(cur)) if prev > 0.0 => Some(cur / prev),
            _ => None,
        };
        rows.push(ProbeRow { width: w, eta, median, per_seed, ratio });
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "diverged".to_string(), |x| format!("{x:.6e}"));
    println!("width,eta,median,ratio");
    for r in &rows {
        let ratio = r.ratio.map_or_else(String::new, |x| format!("{x:.4}"));
        println!("{},{:.6e},{},{}", r.width, r.eta, fmt(r.median), ratio);
    }
    let cross = match &a.cross_check {
        Some(pair) => {
            let (w, src) = parse_pair(pair)?;
            let base = RunConfig {
                batch: a.batch,
                n_eval: 128,
                data: DataConfig { per_class: 100, held_out: 128, ..DataConfig::default() },
                model: ModelConfig { depth: a.depth, ..ModelConfig::toy() },
                ..RunConfig::default()
            };
            let adapted = |cw: usize| adapt_lr(a.eta, a.c_base as f64, cw as f64).map_err(|e| CliError::new(Kind::Config, e));
            let (own, other) = (adapted(w)?, adapted(src)?);
            let mut matched = Vec::new();
            let mut transferred = Vec::new();
            for s in 0..a.seeds {
                matched.push(probe::cross_check(&base, w, own, a.cross_steps, s)?);
                transferred.push(probe::cross_check(&base, w, other, a.cross_steps, s)?);
            }
            let flagged = |v: &[CrossCheck]| v.iter().filter(|c| c.slow || c.diverged).count();
            let report = CrossReport { width: w, lr_source_width: src, matched_slow: flagged(&matched), transferred_slow: flagged(&transferred), matched, transferred };
            println!("cross_check,width,lr,seed,diverged,slow");
            for c in report.matched.iter().map(|c| ("matched", c)).chain(report.transferred.iter().map(|c| ("transferred", c))) {
                println!("{},{},{:.6e},{},{},{}", c.0, c.1.width, c.1.lr, c.1.seed, c.1.diverged, c.1.slow);
            }
            Some(report)
        }
        None => None,
    };
    if let Some(path) = &a.out {
        write_json(path, &json!({ "rows": rows, "cross_check": cross }))?;
    }
    Ok(())
}

fn eval_latents(s: &TrainState<f32>, count: usize, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let m = &s.cfg.model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = generator::sample_latents(&mut rng, count, m.latent_dim);
    (z, (0..count).map(|i| i % m.num_classes).collect())
}

pub fn analyze_blocks(a: &BlocksArgs) -> Result<()> {
    let s = load_state(&a.checkpoint)?;
    echo("analyze blocks", a, Some(serde_json::to_value(&s.cfg).expect("config serializes")));
    let (z, classes) = eval_latents(&s, a.samples, a.seed);
    let report: BlockContributionReport = analysis::block_contribution(&s.gen, &s.ema, &z, &classes, a.teacher.then_some(&s.teacher))?;
    write_json(&a.out, &report)?;
    let mut csv = String::from("block,distance\n");
    for (i, d) in report.distances.iter().enumerate() {
        csv += &format!("{i},{d:.6e}\n");
    }
    write_text(&a.out.with_extension("csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct PcaReport {
    samples: usize,
    blocks: Vec<PcaBlock>,
}

pub fn analyze_pca(a: &PcaArgs) -> Result<()> {
    let s = load_state(&a.checkpoint)?;
    echo("analyze pca", a, Some(serde_json::to_value(&s.cfg).expect("config serializes")));
    let m = &s.cfg.model;
    let (z, classes) = eval_latents(&s, a.samples, a.seed);
    let feats = analysis::block_features(&s.gen, &s.ema, &z, &classes)?;
    let blocks = feats
        .iter()
        .map(|f| analysis::pca_features(f, a.samples, m.grid(), m.grid(), m.width))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    println!("block,explained_1,explained_2,explained_3,rank_deficient");
    for (i, b) in blocks.iter().enumerate() {
        println!("{i},{:.6},{:.6},{:.6},{}", b.explained[0], b.explained[1], b.explained[2], b.rank_deficient);
    }
    write_json(&a.out, &PcaReport { samples: a.samples, blocks })
}

/// Model geometry matching a latent file, for a teacher without a checkpoint.
fn geometry_for(ds: &LatentDataset) -> ModelConfig {
    let patch = if ds.hw % 2 == 0 { 2 } else { 1 };
    ModelConfig { image_channels: ds.channels, image_hw: ds.hw, patch, num_classes: ds.num_classes, ..ModelConfig::toy() }
}

fn take(ds: &LatentDataset, n: usize) -> LatentDataset {
    ds.subset(&(0..n.min(ds.len())).collect::<Vec<_>>())
}

pub fn analyze_fid(a: &FidArgs) -> Result<()> {
    let reference = data::load_latents(&a.reference)?;
    let state = a.checkpoint.as_deref().map(load_state).transpose()?;
    echo("analyze fid", a, state.as_ref().map(|s| serde_json::to_value(&s.cfg).expect("config serializes")));
    let count = a.count.unwrap_or(reference.len()).min(reference.len());
    let reference = take(&reference, count);
    let (teacher, candidate) = match (&state, &a.candidate) {
        (Some(s), _) => {
            let m = &s.cfg.model;
            if (reference.channels, reference.hw) != (m.image_channels, m.image_hw) || reference.num_classes > m.num_classes {
                return Err(CliError::new(
                    Kind::Config,
                    format!(
                        "reference geometry {}x{}x{} with {} classes does not match the checkpoint model {}x{}x{} with {} classes",
                        reference.channels, reference.hw, reference.hw, reference.num_classes, m.image_channels, m.image_hw, m.image_hw, m.num_classes
                    ),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let z: Vec<f32> = generator::sample_latents(&mut rng, count, m.latent_dim);
            let classes: Vec<usize> = reference.labels.iter().map(|&l| l as usize).collect();
            let imgs = s.final_images(&s.ema, &z, &classes)?;
            (s.teacher.clone(), imgs)
        }
        (None, Some(path)) => {
            let cand = data::load_latents(path)?;
            if (cand.channels, cand.hw) != (reference.channels, reference.hw) {
                return Err(CliError::new(Kind::Config, format!("candidate geometry {}x{}x{} differs from the reference {}x{}x{}", cand.channels, cand.hw, cand.hw, reference.channels, reference.hw, reference.hw)));
            }
            let teacher = TeacherEncoder::new(TeacherConfig::default(), &geometry_for(&reference))?;
            (teacher, take(&cand, count).samples)
        }
        (None, None) => return Err(CliError::new(Kind::Config, "either --candidate or --checkpoint is required")),
    };
    let n_cand = candidate.len() / reference.sample_len();
    let fr = teacher.cls_features(&reference.samples, reference.len())?;
    let fc = teacher.cls_features(&candidate, n_cand)?;
    let value = analysis::frechet_proxy(&fr, &fc)?;
    let report = json!({ "frechet_proxy": value, "reference_count": reference.len(), "candidate_count": n_cand, "feature_dim": teacher.cfg.dim });
    println!("{report}");
    if let Some(path) = &a.out {
        write_json(path, &report)?;
    }
    Ok(())
}
