//! Adversarial training loop: alternating discriminator and generator
//! updates, EMA, evaluation, metric logging and checkpoints.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{frechet_proxy, AnalysisError, TeacherEncoder};
use crate::checkpoint::{self, CheckpointError};
use crate::config::RunConfig;
use crate::data::{self, AugParams, DataError, LatentDataset};
use crate::discriminator::{DiscError, DiscriminatorLayout, ProjectorLayout};
use crate::generator::{self, GenOptions, GeneratorLayout};
use crate::graph::{Graph, Var};
use crate::mng::{self, NoiseSchedule, NoiseStack};
use crate::nn::{Bound, NnError};
use crate::objectives::{self, combine, LossBreakdown, LossComponents};
use crate::optim::{ema_update, AdamW, OptimError};
use crate::params::ParamStore;
use crate::scalar::Scalar;

const HISTORY: usize = 10;
const EVAL_SALT: u64 = 0x5eed_e7a1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("training diverged at step {}: {}", .0.step, .0.reason)]
    Diverged(Box<DivergenceReport>),
}

impl From<generator::GenerateError> for TrainError {
    fn from(e: generator::GenerateError) -> Self {
        TrainError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: u64,
    pub reason: String,
    pub last_losses: Vec<LossBreakdown>,
}

/// Independent random streams of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Streams {
    pub data: ChaCha8Rng,
    pub mng: ChaCha8Rng,
    pub gp: ChaCha8Rng,
    pub aug: ChaCha8Rng,
    pub z: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let s = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { data: s(1), mng: s(2), gp: s(3), aug: s(4), z: s(5) }
    }

    pub fn all(&self) -> [&ChaCha8Rng; 5] {
        [&self.data, &self.mng, &self.gp, &self.aug, &self.z]
    }

    pub fn all_mut(&mut self) -> [&mut ChaCha8Rng; 5] {
        [&mut self.data, &mut self.mng, &mut self.gp, &mut self.aug, &mut self.z]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    D,
    G,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    Real,
    RealGp,
    Fake,
    FakeGp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Stage {
    GpNoise,
    Augment,
    Replicate,
    Perturb,
    Discriminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PipelineEvent {
    pub phase: Phase,
    pub branch: Branch,
    pub stage: Stage,
}

/// Random draws of one discriminator update.
#[derive(Debug, Clone)]
pub struct DInputs<T> {
    /// Generator levels, detached.
    pub fake: Vec<Vec<T>>,
    pub aug_real: Vec<AugParams>,
    pub aug_fake: Vec<AugParams>,
    pub noise_real: NoiseStack<T>,
    pub noise_fake: NoiseStack<T>,
    pub eps_real: Option<Vec<T>>,
    pub eps_fake: Option<Vec<T>>,
}

/// Random draws of one generator update.
#[derive(Debug, Clone)]
pub struct GInputs<T> {
    pub z: Vec<T>,
    pub aug_real: Vec<AugParams>,
    pub aug_fake: Vec<AugParams>,
    pub noise_real: NoiseStack<T>,
    pub noise_fake: NoiseStack<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct DTape {
    pub total: Var,
    pub adv: Var,
    pub ar1: Option<Var>,
    pub ar2: Option<Var>,
    pub repa: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub cfg: RunConfig,
    pub gen: GeneratorLayout,
    pub g: ParamStore<T>,
    pub ema: ParamStore<T>,
    pub disc: DiscriminatorLayout,
    pub d: ParamStore<T>,
    pub proj: ProjectorLayout,
    pub p: ParamStore<T>,
    pub teacher: TeacherEncoder,
    pub schedule: NoiseSchedule,
    pub g_opt: AdamW<T>,
    pub d_opt: AdamW<T>,
    pub p_opt: AdamW<T>,
    pub step: u64,
    pub rng: Streams,
    pub history: VecDeque<LossBreakdown>,
    /// Records the per-branch pipeline order when set.
    pub trace: Option<Vec<PipelineEvent>>,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state; `cfg` is resolved first.
    pub fn new(cfg: &RunConfig) -> Result<Self, TrainError> {
        let cfg = cfg.resolve().map_err(TrainError::Config)?;
        let m = &cfg.model;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (gen, g) = GeneratorLayout::new::<T, _>(m, &mut init)?;
        let (disc, d) = DiscriminatorLayout::new::<T, _>(m, cfg.discriminator, &mut init)?;
        let (proj, p) = ProjectorLayout::new::<T, _>(m.width, cfg.projector_hidden, cfg.teacher.dim, cfg.projector_activation, &mut init);
        let teacher = TeacherEncoder::new(cfg.teacher, m)?;
        let schedule = mng::make_schedule(m.stages, cfg.schedule).map_err(|e| TrainError::Config(e.to_string()))?;
        let lr = match cfg.lr_override {
            Some(lr) => lr,
            None => cfg.optim.lr_for_width(m.width)?,
        };
        Ok(Self {
            g_opt: AdamW::new(&g, &cfg.optim, lr),
            d_opt: AdamW::new(&d, &cfg.optim, lr),
            p_opt: AdamW::new(&p, &cfg.optim, lr),
            ema: g.clone(),
            rng: Streams::new(cfg.seed),
            cfg,
            gen,
            g,
            disc,
            d,
            proj,
            p,
            teacher,
            schedule,
            step: 0,
            history: VecDeque::new(),
            trace: None,
        })
    }

    pub fn lr(&self) -> f64 {
        self.g_opt.lr
    }

    fn image_shape(&self, batch: usize) -> [usize; 4] {
        let m = &self.cfg.model;
        [batch, m.image_channels, m.image_hw, m.image_hw]
    }

    fn level_len(&self, batch: usize) -> usize {
        batch * self.cfg.model.image_len()
    }

    fn record(trace: &mut Option<Vec<PipelineEvent>>, phase: Phase, branch: Branch, stage: Stage) {
        if let Some(t) = trace {
            t.push(PipelineEvent { phase, branch, stage });
        }
    }

    /// ε′ → augmentation → (replication) → MNG perturbation for one branch.
    #[allow(clippy::too_many_arguments)]
    fn branch(
        &self,
        g: &mut Graph<T>,
        trace: &mut Option<Vec<PipelineEvent>>,
        phase: Phase,
        branch: Branch,
        levels: &[Var],
        eps: Option<&[T]>,
        aug: &[AugParams],
        noise: &NoiseStack<T>,
    ) -> Result<Vec<Var>, TrainError> {
        let m = &self.cfg.model;
        let shape = self.image_shape(aug.len());
        let mut lv = levels.to_vec();
        if let Some(e) = eps {
            Self::record(trace, phase, branch, Stage::GpNoise);
            let ev = g.constant(e.to_vec(), &shape);
            lv = lv.iter().map(|&l| g.add(l, ev)).collect();
        }
        Self::record(trace, phase, branch, Stage::Augment);
        lv = lv.iter().map(|&l| data::diff_augment_tape(g, l, aug, m.image_channels, m.image_hw)).collect();
        if lv.len() == 1 && m.stages > 1 {
            Self::record(trace, phase, branch, Stage::Replicate);
            lv = vec![lv[0]; m.stages];
        }
        Self::record(trace, phase, branch, Stage::Perturb);
        let out = mng::perturb_tape(g, &lv, &self.schedule, noise).map_err(|e| TrainError::Config(e.to_string()))?;
        Self::record(trace, phase, branch, Stage::Discriminate);
        Ok(out)
    }

    /// Detached generator levels for latents `z`.
    pub fn generate_levels(&self, params: &ParamStore<T>, z: &[T], classes: &[usize]) -> Result<Vec<Vec<T>>, TrainError> {
        let mut g = Graph::new();
        let zv = g.constant(z.to_vec(), &[classes.len(), self.cfg.model.latent_dim]);
        let tape = self.gen.forward(&mut g, Bound::new(params, false), zv, classes, GenOptions::default())?;
        Ok(tape.levels.iter().map(|&v| g.value(v).to_vec()).collect())
    }

    pub fn draw_d_inputs(&mut self, classes: &[usize]) -> Result<DInputs<T>, TrainError> {
        let m = self.cfg.model.clone();
        let batch = classes.len();
        let len = self.level_len(batch);
        let z = generator::sample_latents(&mut self.rng.z, batch, m.latent_dim);
        let fake = self.generate_levels(&self.g, &z, classes)?;
        let aug_real = data::draw_aug(&mut self.rng.aug, batch, m.image_channels, m.image_hw);
        let aug_fake = data::draw_aug(&mut self.rng.aug, batch, m.image_channels, m.image_hw);
        let noise_real = mng::sample_noise_stack(len, &self.schedule, &mut self.rng.mng);
        let noise_fake = mng::sample_noise_stack(len, &self.schedule, &mut self.rng.mng);
        let (eps_real, eps_fake) = if self.cfg.lambda_agp > 0.0 {
            let s = self.cfg.gp_sigma;
            let e = |r: &mut ChaCha8Rng| objectives::gp_noise(len, s, r).map_err(|e| TrainError::Config(e.to_string()));
            (Some(e(&mut self.rng.gp)?), Some(e(&mut self.rng.gp)?))
        } else {
            (None, None)
        };
        Ok(DInputs { fake, aug_real, aug_fake, noise_real, noise_fake, eps_real, eps_fake })
    }

    pub fn draw_g_inputs(&mut self, batch: usize) -> GInputs<T> {
        let m = &self.cfg.model;
        let len = batch * m.image_len();
        GInputs {
            z: generator::sample_latents(&mut self.rng.z, batch, m.latent_dim),
            aug_real: data::draw_aug(&mut self.rng.aug, batch, m.image_channels, m.image_hw),
            aug_fake: data::draw_aug(&mut self.rng.aug, batch, m.image_channels, m.image_hw),
            noise_real: mng::sample_noise_stack(len, &self.schedule, &mut self.rng.mng),
            noise_fake: mng::sample_noise_stack(len, &self.schedule, &mut self.rng.mng),
        }
    }

    /// Builds the full discriminator objective with trainable D and projector.
    pub fn d_losses(&self, g: &mut Graph<T>, x: &[T], classes: &[usize], inp: &DInputs<T>, trace: &mut Option<Vec<PipelineEvent>>) -> Result<DTape, TrainError> {
        let batch = classes.len();
        let shape = self.image_shape(batch);
        let dp = Bound::new(&self.d, true);
        let xr = g.constant(x.to_vec(), &shape);
        let fl: Vec<Var> = inp.fake.iter().map(|l| g.constant(l.clone(), &shape)).collect();

        let real = self.branch(g, trace, Phase::D, Branch::Real, &[xr], None, &inp.aug_real, &inp.noise_real)?;
        let tr = self.disc.forward(g, dp, &real, classes)?;
        let fake = self.branch(g, trace, Phase::D, Branch::Fake, &fl, None, &inp.aug_fake, &inp.noise_fake)?;
        let tf = self.disc.forward(g, dp, &fake, classes)?;
        let adv = objectives::pairing_tape(g, tr.logit, tf.logit);
        let mut total = adv;
        let (mut ar1, mut ar2, mut repa) = (None, None, None);

        if let (Some(er), Some(ef)) = (&inp.eps_real, &inp.eps_fake) {
            let rgp = self.branch(g, trace, Phase::D, Branch::RealGp, &[xr], Some(er), &inp.aug_real, &inp.noise_real)?;
            let trg = self.disc.forward(g, dp, &rgp, classes)?;
            let fgp = self.branch(g, trace, Phase::D, Branch::FakeGp, &fl, Some(ef), &inp.aug_fake, &inp.noise_fake)?;
            let tfg = self.disc.forward(g, dp, &fgp, classes)?;
            let a1 = objectives::gp_tape(g, tr.logit, trg.logit, self.cfg.gp_sigma);
            let a2 = objectives::gp_tape(g, tf.logit, tfg.logit, self.cfg.gp_sigma);
            let s = g.add(a1, a2);
            let s = g.scale(s, T::lit(self.cfg.lambda_agp));
            total = g.add(total, s);
            (ar1, ar2) = (Some(a1), Some(a2));
        }
        if self.cfg.lambda_repa > 0.0 {
            let m = &self.cfg.model;
            let clean = data::diff_augment(x, &inp.aug_real, m.image_channels, m.image_hw);
            let target = self.teacher.encode(&clean, batch)?;
            let tdim = self.teacher.cfg.dim;
            let tv = g.constant(target, &[batch * self.disc.tokens_per_sample(), tdim]);
            let h = g.reshape(tr.tokens, &[batch * self.disc.tokens_per_sample(), m.width]);
            let proj = self.proj.forward(g, Bound::new(&self.p, true), h)?;
            let l = objectives::repa_tape(g, proj, tv, tdim);
            let s = g.scale(l, T::lit(self.cfg.lambda_repa));
            total = g.add(total, s);
            repa = Some(l);
        }
        Ok(DTape { total, adv, ar1, ar2, repa })
    }

    /// Builds `l_g_adv` with a trainable generator and a frozen D.
    pub fn g_loss(&self, g: &mut Graph<T>, x: &[T], classes: &[usize], inp: &GInputs<T>, trace: &mut Option<Vec<PipelineEvent>>) -> Result<Var, TrainError> {
        let batch = classes.len();
        let shape = self.image_shape(batch);
        let dp = Bound::new(&self.d, false);
        let zv = g.constant(inp.z.clone(), &[batch, self.cfg.model.latent_dim]);
        let tape = self.gen.forward(g, Bound::new(&self.g, true), zv, classes, GenOptions::default())?;
        let fake = self.branch(g, trace, Phase::G, Branch::Fake, &tape.levels, None, &inp.aug_fake, &inp.noise_fake)?;
        let tf = self.disc.forward(g, dp, &fake, classes)?;
        let xr = g.constant(x.to_vec(), &shape);
        let real = self.branch(g, trace, Phase::G, Branch::Real, &[xr], None, &inp.aug_real, &inp.noise_real)?;
        let tr = self.disc.forward(g, dp, &real, classes)?;
        Ok(objectives::pairing_tape(g, tf.logit, tr.logit))
    }

    fn diverged(&mut self, reason: String, last: Option<LossBreakdown>) -> TrainError {
        if let Some(l) = last {
            self.push_history(l);
        }
        TrainError::Diverged(Box::new(DivergenceReport {
            step: self.step,
            reason,
            last_losses: self.history.iter().copied().collect(),
        }))
    }

    fn push_history(&mut self, l: LossBreakdown) {
        if self.history.len() == HISTORY {
            self.history.pop_front();
        }
        self.history.push_back(l);
    }

    /// One discriminator update, one generator update, then EMA.
    pub fn train_step(&mut self, x: &[T], classes: &[usize]) -> Result<LossBreakdown, TrainError> {
        let m = &self.cfg.model;
        if x.len() != self.level_len(classes.len()) || classes.is_empty() {
            return Err(TrainError::Config(format!("batch of {} values does not hold {} images", x.len(), classes.len())));
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= m.num_classes) {
            return Err(NnError::ClassOutOfRange { class: c, num_classes: m.num_classes }.into());
        }
        let mut trace = self.trace.take();
        let result = self.step_inner(x, classes, &mut trace);
        self.trace = trace;
        result
    }

    fn step_inner(&mut self, x: &[T], classes: &[usize], trace: &mut Option<Vec<PipelineEvent>>) -> Result<LossBreakdown, TrainError> {
        let mut comp = LossComponents::default();
        for _ in 0..self.cfg.d_steps_per_g {
            let inp = self.draw_d_inputs(classes)?;
            let mut g = Graph::new();
            let tape = match self.d_losses(&mut g, x, classes, &inp, trace) {
                Ok(t) => t,
                Err(TrainError::Nn(NnError::Fault(f))) | Err(TrainError::Disc(DiscError::Nn(NnError::Fault(f)))) => return Err(self.diverged(f, None)),
                Err(e) => return Err(e),
            };
            let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).as_f64());
            comp.l_d_adv = g.scalar(tape.adv).as_f64();
            comp.l_ar1 = val(tape.ar1);
            comp.l_ar2 = val(tape.ar2);
            comp.l_repa = val(tape.repa);
            if !g.scalar(tape.total).is_finite() {
                let b = combine(comp, self.cfg.weights());
                return Err(self.diverged("non-finite discriminator loss".into(), Some(b)));
            }
            g.backward(tape.total);
            let gd = g.param_grads(&self.d);
            self.d_opt.step(&mut self.d, &gd)?;
            if tape.repa.is_some() {
                let gp = g.param_grads(&self.p);
                self.p_opt.step(&mut self.p, &gp)?;
            }
        }

        let inp = self.draw_g_inputs(classes.len());
        let mut g = Graph::new();
        let loss = match self.g_loss(&mut g, x, classes, &inp, trace) {
            Ok(l) => l,
            Err(TrainError::Nn(NnError::Fault(f))) | Err(TrainError::Disc(DiscError::Nn(NnError::Fault(f)))) => return Err(self.diverged(f, None)),
            Err(e) => return Err(e),
        };
        comp.l_g_adv = g.scalar(loss).as_f64();
        let b = combine(comp, self.cfg.weights());
        if !b.is_finite() {
            return Err(self.diverged("non-finite generator loss".into(), Some(b)));
        }
        g.backward(loss);
        let gg = g.param_grads(&self.g);
        self.g_opt.step(&mut self.g, &gg)?;
        ema_update(&mut self.ema, &self.g, self.cfg.optim.ema_decay)?;
        if !self.g.all_finite() || !self.d.all_finite() {
            return Err(self.diverged("non-finite parameters after update".into(), Some(b)));
        }
        self.push_history(b);
        self.step += 1;
        Ok(b)
    }

    pub fn next_batch(&mut self, ds: &LatentDataset) -> (Vec<T>, Vec<usize>) {
        ds.sample_batch(&mut self.rng.data, self.cfg.batch)
    }

    /// Fixed evaluation latents and classes drawn from the held-out labels.
    pub fn eval_inputs(&self, held: &LatentDataset, n: usize) -> (Vec<T>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ EVAL_SALT);
        let z = generator::sample_latents(&mut rng, n, self.cfg.model.latent_dim);
        let classes = (0..n).map(|i| held.labels[i % held.len()] as usize).collect();
        (z, classes)
    }

    /// Final images of `params` for `z`, in chunks.
    pub fn final_images(&self, params: &ParamStore<T>, z: &[T], classes: &[usize]) -> Result<Vec<T>, TrainError> {
        let dz = self.cfg.model.latent_dim;
        let mut out = Vec::with_capacity(classes.len() * self.cfg.model.image_len());
        for (zc, cc) in z.chunks(64 * dz).zip(classes.chunks(64)) {
            let levels = self.generate_levels(params, zc, cc)?;
            out.extend_from_slice(levels.last().expect("at least one stage"));
        }
        Ok(out)
    }

    /// Fréchet distance between teacher `[cls]` features of EMA samples and
    /// the first `n` held-out reals.
    pub fn evaluate(&self, held: &LatentDataset, n: usize) -> Result<f64, TrainError> {
        if held.len() < n {
            return Err(TrainError::Config(format!("held-out set has {} samples, evaluation needs {n}", held.len())));
        }
        let (z, classes) = self.eval_inputs(held, n);
        let fake = self.final_images(&self.ema, &z, &classes)?;
        let fake_f = self.teacher.cls_features(&fake, n)?;
        let real = &held.samples[..n * held.sample_len()];
        let real_f = self.teacher.cls_features(real, n)?;
        Ok(frechet_proxy(&fake_f, &real_f)?)
    }
}

/// Line record of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Train {
        step: u64,
        #[serde(flatten)]
        losses: LossBreakdown,
    },
    Eval {
        step: u64,
        frechet_proxy: f64,
        n_eval: usize,
    },
}

/// Dataset of a run: the GLT1 file when configured, synthetic otherwise,
/// split into `(train, held_out)`.
pub fn load_dataset(cfg: &RunConfig) -> Result<(LatentDataset, LatentDataset), TrainError> {
    let m = &cfg.model;
    let ds = match &cfg.data.path {
        Some(p) => data::load_latents(p)?,
        None => data::gen_synthetic(m.num_classes, cfg.data.per_class, m.image_channels, m.image_hw, cfg.data.seed)?,
    };
    if ds.channels != m.image_channels || ds.hw != m.image_hw || ds.num_classes > m.num_classes {
        return Err(TrainError::Config(format!(
            "dataset geometry {}x{}x{} with {} classes does not fit the model {}x{}x{} with {} classes",
            ds.channels, ds.hw, ds.hw, ds.num_classes, m.image_channels, m.image_hw, m.image_hw, m.num_classes
        )));
    }
    if ds.len() <= cfg.data.held_out {
        return Err(TrainError::Config(format!("dataset has {} samples but {} are held out", ds.len(), cfg.data.held_out)));
    }
    Ok(ds.split(cfg.data.held_out, cfg.data.seed))
}

#[derive(Debug, Clone)]
pub struct TrainSummary<T: Scalar> {
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<(u64, f64)>,
    pub state: TrainState<T>,
}

pub struct RunOptions<'a> {
    pub out_dir: Option<&'a Path>,
    pub resume: Option<&'a Path>,
    /// Stop after this step instead of `cfg.steps`.
    pub stop_at: Option<u64>,
    pub on_record: Option<&'a mut dyn FnMut(&MetricRecord)>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        Self { out_dir: None, resume: None, stop_at: None, on_record: None }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.gatc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DIVERGENCE_FILE: &str = "divergence.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Runs `cfg.steps` training steps with periodic evaluation, logging and
/// checkpoints under `opts.out_dir`.
pub fn train<T: Scalar>(cfg: &RunConfig, mut opts: RunOptions<'_>) -> Result<TrainSummary<T>, TrainError> {
    let mut state = match opts.resume {
        Some(p) => {
            let s: TrainState<T> = checkpoint::load_checkpoint(p)?;
            let resolved = cfg.resolve().map_err(TrainError::Config)?;
            if s.cfg.model != resolved.model {
                return Err(CheckpointError::Geometry(format!("checkpoint model {:?} differs from the configured {:?}", s.cfg.model, resolved.model)).into());
            }
            s
        }
        None => TrainState::new(cfg)?,
    };
    let (train_set, held) = load_dataset(&state.cfg)?;
    let mut log = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join(METRICS_FILE);
            let f = if opts.resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            }
            .map_err(io_err(&path))?;
            Some((BufWriter::new(f), path))
        }
        None => None,
    };
    let mut emit = |rec: MetricRecord, log: &mut Option<(BufWriter<File>, PathBuf)>| -> Result<(), TrainError> {
        if let Some(cb) = opts.on_record.as_mut() {
            cb(&rec);
        }
        if let Some((w, path)) = log {
            serde_json::to_writer(&mut *w, &rec).expect("record serializes");
            w.write_all(b"\n").map_err(io_err(path))?;
            w.flush().map_err(io_err(path))?;
        }
        Ok(())
    };
    let end = opts.stop_at.unwrap_or(state.cfg.steps).min(state.cfg.steps);
    let (eval_every, n_eval) = (state.cfg.eval_interval, state.cfg.n_eval);
    let mut losses = Vec::new();
    let mut evals = Vec::new();
    // Emits the train record and, when asked, evaluates and emits.
    let mut record = |state: &TrainState<T>, log: &mut Option<_>, evals: &mut Vec<(u64, f64)>, train: Option<LossBreakdown>, evaluate: bool| -> Result<(), TrainError> {
        if let Some(losses) = train {
            emit(MetricRecord::Train { step: state.step, losses }, log)?;
        }
        if evaluate {
            let f = state.evaluate(&held, n_eval)?;
            evals.push((state.step, f));
            emit(MetricRecord::Eval { step: state.step, frechet_proxy: f, n_eval }, log)?;
        }
        Ok(())
    };
    if eval_every > 0 && state.step == 0 {
        record(&state, &mut log, &mut evals, None, true)?;
    }
    while state.step < end {
        let (x, y) = state.next_batch(&train_set);
        let b = match state.train_step(&x, &y) {
            Ok(b) => b,
            Err(TrainError::Diverged(report)) => {
                if let Some(dir) = opts.out_dir {
                    let path = dir.join(DIVERGENCE_FILE);
                    fs::write(&path, serde_json::to_string_pretty(&*report).expect("report serializes")).map_err(io_err(&path))?;
                }
                return Err(TrainError::Diverged(report));
            }
            Err(e) => return Err(e),
        };
        losses.push(b);
        let step = state.step;
        let log_now = state.cfg.log_interval > 0 && (step % state.cfg.log_interval == 0 || step == end);
        let eval_now = eval_every > 0 && (step % eval_every == 0 || step == state.cfg.steps);
        record(&state, &mut log, &mut evals, log_now.then_some(b), eval_now)?;
        if let Some(dir) = opts.out_dir {
            let ci = state.cfg.checkpoint_interval;
            if (ci > 0 && step % ci == 0) || step == end {
                checkpoint::save_checkpoint(&state, &dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    Ok(TrainSummary { losses, evals, state })
}
