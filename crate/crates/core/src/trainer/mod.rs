//! Unpaired cycle training over patch corpora, per-epoch evaluation and
//! model selection, checkpointing, and failure-mode detectors.
//!
//! Naming: `g_x` maps domain X (low-resolution planes) to Y (acquired
//! plane) and is the network used for super-resolution; `g_y` maps back.
//! `d_y` judges Y-domain patches, `d_x` X-domain patches.

mod detect;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;
use crate::inference::{super_resolve_volume, InferenceOptions, DEFAULT_PERCENTILES};
use crate::losses::{
    cycle_loss, discriminator_loss, generator_adversarial_loss, gradient_mapping_loss,
    gradient_mapping_loss_literal, identity_loss, write_loss_csv, AdversarialMode, GmapForm,
    LossBreakdown, LossTerms, LossWeights,
};
use crate::metrics::{nr_scores_volume, summarize};
use crate::net::{
    build_discriminator, build_generator, discriminator_forward, generator_forward, Architecture,
    DiscriminatorSpec, Generator, GeneratorSpec, NetworkParams,
};
use crate::patchwork::{sample_training_patches, Domain, PatchSet, PATCH};
use crate::tensor::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, Checkpoint, Tape, Tensor, Var,
};
use crate::volume::{extract_slices, normalize_intensity, resample_to_isotropic, Plane, Volume3D};

pub use detect::{
    block_artifact_score_volume, detect_block_artifacts, detect_mode_collapse, mean_pairwise_l1,
    CollapseReport, COLLAPSE_RATIO, MIN_PROBES,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub adversarial_mode: AdversarialMode,
    pub gmap_form: GmapForm,
    pub demodulation: bool,
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    pub disc_base_channels: usize,
    /// Extra full-state checkpoint every this many steps (0: epoch ends only).
    pub checkpoint_every: u64,
    pub eval_stride: usize,
    /// Cap on steps per epoch; by default one pass over the smaller corpus.
    pub steps_per_epoch: Option<usize>,
    /// Percentile window used to normalize evaluation volumes.
    pub percentiles: (f64, f64),
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            adversarial_mode: AdversarialMode::default(),
            gmap_form: GmapForm::default(),
            demodulation: true,
            base_channels: 64,
            n_residual_blocks: 6,
            disc_base_channels: 64,
            checkpoint_every: 0,
            eval_stride: 12,
            steps_per_epoch: None,
            percentiles: DEFAULT_PERCENTILES,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.base_channels == 0 || self.disc_base_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if !(1..=PATCH).contains(&self.eval_stride) {
            return bad(format!("eval_stride must be in 1..={PATCH}"));
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1".into());
        }
        self.weights.validate()?;
        self.adam().map(|_| ())
    }

    fn adam(&self) -> Result<AdamConfig> {
        let c = AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        };
        AdamState::<f32>::new(c, &[])?;
        Ok(c)
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            base_channels: self.base_channels,
            n_residual_blocks: self.n_residual_blocks,
            demodulation: self.demodulation,
            ..GeneratorSpec::default()
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec::with_base_channels(self.disc_base_channels)
    }

    /// Which model family the config trains.
    pub fn variant(&self) -> &'static str {
        match (self.demodulation, self.weights.lambda_gmap > 0.0) {
            (true, true) => "clade",
            (true, false) => "clade_no_gmap",
            (false, false) => "conventional_cyclegan",
            (false, true) => "instance_norm_gmap",
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainingConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            kind: "training config",
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Independent seed streams from one user seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const NETS: [&str; 4] = ["g_x", "g_y", "d_x", "d_y"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub epoch: usize,
    pub score_mean: f64,
    pub score_std: f64,
    pub block_artifacts: f64,
    pub collapse_ratio: Option<f64>,
}

pub const EVAL_CSV_HEADER: [&str; 5] =
    ["epoch", "score_mean", "score_std", "block_artifacts", "collapse_ratio"];

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRunState {
    pub config: TrainingConfig,
    /// Current epoch, 0-based; equals the number of finished epochs at an
    /// epoch boundary.
    pub epoch: usize,
    /// Steps already taken inside `epoch`.
    pub epoch_step: usize,
    pub step: u64,
    pub g_x: NetworkParams<f32>,
    pub g_y: NetworkParams<f32>,
    pub d_x: NetworkParams<f32>,
    pub d_y: NetworkParams<f32>,
    pub adam: [AdamState<f32>; 4],
    pub losses: Vec<(u64, LossBreakdown)>,
    pub evals: Vec<EvalRow>,
}

impl TrainingRunState {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let gs = config.generator_spec();
        let ds = config.discriminator_spec();
        let g_x = build_generator(&gs, derive_seed(config.seed, 1))?;
        let g_y = build_generator(&gs, derive_seed(config.seed, 2))?;
        let d_x = build_discriminator(&ds, derive_seed(config.seed, 3))?;
        let d_y = build_discriminator(&ds, derive_seed(config.seed, 4))?;
        let a = config.adam()?;
        let adam = [
            AdamState::new(a, &g_x.tensors)?,
            AdamState::new(a, &g_y.tensors)?,
            AdamState::new(a, &d_x.tensors)?,
            AdamState::new(a, &d_y.tensors)?,
        ];
        Ok(TrainingRunState {
            config,
            epoch: 0,
            epoch_step: 0,
            step: 0,
            g_x,
            g_y,
            d_x,
            d_y,
            adam,
            losses: Vec::new(),
            evals: Vec::new(),
        })
    }

    fn nets(&self) -> [&NetworkParams<f32>; 4] {
        [&self.g_x, &self.g_y, &self.d_x, &self.d_y]
    }

    /// The super-resolving generator.
    pub fn generator(&self) -> Generator<f32> {
        Generator {
            spec: self.config.generator_spec(),
            params: self.g_x.clone(),
        }
    }

    pub fn backward_generator(&self) -> Generator<f32> {
        Generator {
            spec: self.config.generator_spec(),
            params: self.g_y.clone(),
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<f32>> {
        let mut tensors = Vec::new();
        for (net, params) in NETS.iter().zip(self.nets()) {
            for (n, t) in params.names.iter().zip(&params.tensors) {
                tensors.push((format!("{net}/{n}"), t.clone()));
            }
        }
        for (net, (params, adam)) in NETS.iter().zip(self.nets().into_iter().zip(&self.adam)) {
            for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
                for (n, t) in params.names.iter().zip(moments) {
                    tensors.push((format!("adam/{net}/{kind}/{n}"), t.clone()));
                }
            }
        }
        let gs = Architecture::Generator(self.config.generator_spec());
        let ds = Architecture::Discriminator(self.config.discriminator_spec());
        let metadata = serde_json::json!({
            "kind": "training_state",
            "code_version": CODE_VERSION,
            "variant": self.config.variant(),
            "config": self.config,
            "architectures": { "g_x": gs, "g_y": gs, "d_x": ds, "d_y": ds },
            "epoch": self.epoch,
            "epoch_step": self.epoch_step,
            "step": self.step,
            "adam_steps": self.adam.iter().map(|a| a.step).collect::<Vec<_>>(),
            "losses": self.losses,
            "evals": self.evals,
        });
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<f32>, path: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            kind: "training checkpoint",
            path: path.to_path_buf(),
            detail,
        };
        let meta = &ckpt.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("training_state") {
            return Err(bad("not a training-state checkpoint".into()));
        }
        fn field<V: serde::de::DeserializeOwned>(
            meta: &serde_json::Value,
            name: &str,
            path: &Path,
        ) -> Result<V> {
            let v = meta.get(name).cloned().ok_or_else(|| Error::Format {
                kind: "training checkpoint",
                path: path.to_path_buf(),
                detail: format!("missing {name}"),
            })?;
            serde_json::from_value(v).map_err(|e| Error::Format {
                kind: "training checkpoint",
                path: path.to_path_buf(),
                detail: format!("{name}: {e}"),
            })
        }
        let mut state = TrainingRunState::new(field(meta, "config", path)?)?;
        state.epoch = field(meta, "epoch", path)?;
        state.epoch_step = field(meta, "epoch_step", path)?;
        state.step = field(meta, "step", path)?;
        state.losses = field(meta, "losses", path)?;
        state.evals = field(meta, "evals", path)?;
        let adam_steps: Vec<u64> = field(meta, "adam_steps", path)?;
        if adam_steps.len() != 4 {
            return Err(bad("adam_steps must list four networks".into()));
        }
        let take = |name: String, like: &Tensor<f32>| -> Result<Tensor<f32>> {
            let t = ckpt.get(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(bad(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        let TrainingRunState {
            g_x,
            g_y,
            d_x,
            d_y,
            adam,
            ..
        } = &mut state;
        for (i, (net, params)) in NETS.iter().zip([g_x, g_y, d_x, d_y]).enumerate() {
            for j in 0..params.len() {
                let n = params.names[j].clone();
                params.tensors[j] = take(format!("{net}/{n}"), &params.tensors[j])?;
                adam[i].m[j] = take(format!("adam/{net}/m/{n}"), &params.tensors[j])?;
                adam[i].v[j] = take(format!("adam/{net}/v/{n}"), &params.tensors[j])?;
            }
            adam[i].step = adam_steps[i];
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        save_checkpoint(&self.to_checkpoint()?, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, path)
    }
}

fn sum_into(acc: &mut [Tensor<f32>], add: &[Tensor<f32>]) {
    for (a, g) in acc.iter_mut().zip(add) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += *y;
        }
    }
}

fn grads_of(tape: &Tape<f32>, vars: &[Var<'_, f32>]) -> Vec<Tensor<f32>> {
    vars.iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect()
}

fn scalar(v: &Var<'_, f32>) -> f64 {
    v.value().data()[0] as f64
}

struct DiscSample {
    grads_x: Vec<Tensor<f32>>,
    grads_y: Vec<Tensor<f32>>,
    loss_x: f64,
    loss_y: f64,
}

struct GenSample {
    grads_x: Vec<Tensor<f32>>,
    grads_y: Vec<Tensor<f32>>,
    terms: [f64; 5],
}

fn disc_sample(state: &TrainingRunState, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<DiscSample> {
    let cfg = &state.config;
    let (gs, ds) = (cfg.generator_spec(), cfg.discriminator_spec());
    let tape = Tape::new();
    let gx = state.g_x.bind(&tape, false);
    let gy = state.g_y.bind(&tape, false);
    let dx = state.d_x.bind(&tape, true);
    let dy = state.d_y.bind(&tape, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let fake_y = generator_forward(&gs, &gx, xv)?.detach();
    let fake_x = generator_forward(&gs, &gy, yv)?.detach();
    let loss_y = discriminator_loss(
        discriminator_forward(&ds, &dy, yv)?,
        discriminator_forward(&ds, &dy, fake_y)?,
        cfg.adversarial_mode,
    )?;
    let loss_x = discriminator_loss(
        discriminator_forward(&ds, &dx, xv)?,
        discriminator_forward(&ds, &dx, fake_x)?,
        cfg.adversarial_mode,
    )?;
    tape.backward(loss_x.add(&loss_y)?)?;
    Ok(DiscSample {
        grads_x: grads_of(&tape, &dx),
        grads_y: grads_of(&tape, &dy),
        loss_x: scalar(&loss_x),
        loss_y: scalar(&loss_y),
    })
}

fn gen_sample(state: &TrainingRunState, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<GenSample> {
    let cfg = &state.config;
    let w = &cfg.weights;
    let (gs, ds) = (cfg.generator_spec(), cfg.discriminator_spec());
    let tape = Tape::new();
    let gx = state.g_x.bind(&tape, true);
    let gy = state.g_y.bind(&tape, true);
    let dx = state.d_x.bind(&tape, false);
    let dy = state.d_y.bind(&tape, false);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let fake_y = generator_forward(&gs, &gx, xv)?;
    let fake_x = generator_forward(&gs, &gy, yv)?;
    let x_cyc = generator_forward(&gs, &gy, fake_y)?;
    let y_cyc = generator_forward(&gs, &gx, fake_x)?;
    let adv_forward =
        generator_adversarial_loss(discriminator_forward(&ds, &dy, fake_y)?, cfg.adversarial_mode);
    let adv_backward =
        generator_adversarial_loss(discriminator_forward(&ds, &dx, fake_x)?, cfg.adversarial_mode);
    let cyc = cycle_loss(xv, x_cyc, yv, y_cyc)?;
    // Terms with zero weight are not evaluated and reported as 0.
    let ident = if w.lambda_ident > 0.0 {
        identity_loss(
            generator_forward(&gs, &gx, yv)?,
            yv,
            generator_forward(&gs, &gy, xv)?,
            xv,
        )?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let gmap = match cfg.gmap_form {
        GmapForm::Symmetric => gradient_mapping_loss(xv, x_cyc, yv, y_cyc)?,
        GmapForm::Literal => {
            let y_xy = generator_forward(&gs, &gy, generator_forward(&gs, &gx, yv)?)?;
            gradient_mapping_loss_literal(yv, y_xy, y_cyc)?
        }
    };
    let terms = LossTerms {
        adv_forward,
        adv_backward,
        cyc,
        ident,
        gmap,
    };
    let (total, _) = terms.total(w)?;
    tape.backward(total)?;
    Ok(GenSample {
        grads_x: grads_of(&tape, &gx),
        grads_y: grads_of(&tape, &gy),
        terms: [
            scalar(&terms.adv_forward),
            scalar(&terms.adv_backward),
            scalar(&terms.cyc),
            scalar(&terms.ident),
            scalar(&terms.gmap),
        ],
    })
}

fn mean_grads(samples: Vec<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>) -> (Vec<Tensor<f32>>, Vec<Tensor<f32>>) {
    let n = samples.len() as f32;
    let mut it = samples.into_iter();
    let (mut a, mut b) = it.next().expect("non-empty batch");
    for (ga, gb) in it {
        sum_into(&mut a, &ga);
        sum_into(&mut b, &gb);
    }
    for t in a.iter_mut().chain(b.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    (a, b)
}

fn at_step(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { context } => Error::non_finite(format!("step {step}: {context}")),
        other => other,
    }
}

fn check_batch(xs: &[Tensor<f32>], ys: &[Tensor<f32>]) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::InvalidArgument(format!(
            "batches must be non-empty and equal in size, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    Ok(())
}

/// Discriminator phase: both discriminators step on real patches against
/// fakes from the current (frozen) generators. Returns the two mean losses.
pub fn discriminator_step(
    state: &mut TrainingRunState,
    xs: &[Tensor<f32>],
    ys: &[Tensor<f32>],
) -> Result<(f64, f64)> {
    check_batch(xs, ys)?;
    let st = &*state;
    let samples = xs
        .par_iter()
        .zip(ys)
        .map(|(x, y)| disc_sample(st, x, y))
        .collect::<Result<Vec<_>>>()
        .map_err(at_step(state.step))?;
    let n = samples.len() as f64;
    let loss_x = samples.iter().map(|s| s.loss_x).sum::<f64>() / n;
    let loss_y = samples.iter().map(|s| s.loss_y).sum::<f64>() / n;
    for (name, v) in [("discriminator d_x", loss_x), ("discriminator d_y", loss_y)] {
        if !v.is_finite() {
            return Err(Error::non_finite(format!("step {}: {name} loss = {v}", state.step)));
        }
    }
    let (gx, gy) = mean_grads(samples.into_iter().map(|s| (s.grads_x, s.grads_y)).collect());
    state.adam[2].update(&mut state.d_x.tensors, &gx)?;
    state.adam[3].update(&mut state.d_y.tensors, &gy)?;
    Ok((loss_x, loss_y))
}

/// Generator phase against the (already updated) discriminators.
pub fn generator_step(
    state: &mut TrainingRunState,
    xs: &[Tensor<f32>],
    ys: &[Tensor<f32>],
) -> Result<LossBreakdown> {
    check_batch(xs, ys)?;
    let st = &*state;
    let samples = xs
        .par_iter()
        .zip(ys)
        .map(|(x, y)| gen_sample(st, x, y))
        .collect::<Result<Vec<_>>>()
        .map_err(at_step(state.step))?;
    let n = samples.len() as f64;
    let mut t = [0.0; 5];
    for s in &samples {
        for (acc, v) in t.iter_mut().zip(s.terms) {
            *acc += v / n;
        }
    }
    let b = LossBreakdown::compose(t[0], t[1], t[2], t[3], t[4], &state.config.weights)
        .map_err(at_step(state.step))?;
    let (gx, gy) = mean_grads(samples.into_iter().map(|s| (s.grads_x, s.grads_y)).collect());
    state.adam[0].update(&mut state.g_x.tensors, &gx)?;
    state.adam[1].update(&mut state.g_y.tensors, &gy)?;
    Ok(b)
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    state: &mut TrainingRunState,
    xs: &[Tensor<f32>],
    ys: &[Tensor<f32>],
) -> Result<LossBreakdown> {
    discriminator_step(state, xs, ys)?;
    let b = generator_step(state, xs, ys)?;
    state.step += 1;
    state.losses.push((state.step, b));
    Ok(b)
}

/// `[1, 1, 32, 32]` tensors of a patch set.
pub fn patch_tensors(set: &PatchSet) -> Result<Vec<Tensor<f32>>> {
    set.patches
        .iter()
        .map(|p| Image2D::stack::<f32>(std::slice::from_ref(p)))
        .collect()
}

/// Unpaired corpora drawn from each volume: X from the low-resolution
/// primary plane, Y from the acquired plane, both after isotropic
/// resampling and percentile normalization.
pub fn prepare_corpus(
    volumes: &[Volume3D],
    patches_per_slice: usize,
    seed: u64,
    percentiles: (f64, f64),
) -> Result<(PatchSet, PatchSet)> {
    let mut x = PatchSet::empty(Domain::XLowres);
    let mut y = PatchSet::empty(Domain::YHighres);
    for (i, v) in volumes.iter().enumerate() {
        let iso = resample_to_isotropic(v)?;
        let norm = normalize_intensity(&iso, percentiles.0, percentiles.1)?.volume;
        let i64 = i as u64;
        x.append(sample_training_patches(
            &extract_slices(&norm, Plane::LrPrimary),
            i,
            patches_per_slice,
            derive_seed(seed, 2 * i64),
            Domain::XLowres,
        )?)?;
        y.append(sample_training_patches(
            &extract_slices(&norm, Plane::Hr),
            i,
            patches_per_slice,
            derive_seed(seed, 2 * i64 + 1),
            Domain::YHighres,
        )?)?;
    }
    Ok((x, y))
}

/// Epoch of the lowest score, 1-based; ties go to the earliest.
pub fn select_epoch(scores: &[f64]) -> Option<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_finite())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
}

/// Held-out material for per-epoch evaluation.
#[derive(Clone, Debug, Default)]
pub struct EvalSet {
    pub volume: Option<Volume3D>,
    /// Probe patches for the mode-collapse check (at least 16 to run it).
    pub probes: Vec<Image2D>,
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub state: TrainingRunState,
    pub selected_epoch: Option<usize>,
    pub run_dir: PathBuf,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_eval_csv<W: Write>(writer: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(EVAL_CSV_HEADER)?;
    for r in rows {
        w.serialize((r.epoch, r.score_mean, r.score_std, r.block_artifacts, r.collapse_ratio))?;
    }
    w.flush().map_err(|e| Error::io("eval csv", e))
}

pub fn checkpoint_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints")
}

pub fn epoch_checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    checkpoint_dir(run_dir).join(format!("epoch_{epoch:03}.ckpt"))
}

fn write_logs(state: &TrainingRunState, run_dir: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &state.losses)?;
    write_file(&run_dir.join("losses.csv"), &buf)?;
    let mut buf = Vec::new();
    write_eval_csv(&mut buf, &state.evals)?;
    write_file(&run_dir.join("eval.csv"), &buf)
}

fn evaluate_epoch(state: &TrainingRunState, eval: &EvalSet, epoch: usize) -> Result<Option<EvalRow>> {
    let Some(volume) = &eval.volume else {
        return Ok(None);
    };
    let cfg = &state.config;
    let g = state.generator();
    let opts = InferenceOptions {
        stride: cfg.eval_stride,
        percentiles: cfg.percentiles,
    };
    let out = super_resolve_volume(volume, &g, &opts)?;
    let range = out.intensity_range();
    let (score_mean, score_std) = summarize(&nr_scores_volume(&out, Plane::LrPrimary, range)?);
    let block_artifacts = block_artifact_score_volume(&out, Plane::LrPrimary, cfg.eval_stride, range)?;
    let collapse_ratio = if eval.probes.len() >= MIN_PROBES {
        Some(detect_mode_collapse(&g, &eval.probes)?.ratio)
    } else {
        None
    };
    Ok(Some(EvalRow {
        epoch,
        score_mean,
        score_std,
        block_artifacts,
        collapse_ratio,
    }))
}

/// Trains from `state` until `config.epochs` epochs are done, writing
/// checkpoints, CSVs, a manifest and the selected generator into `run_dir`.
pub fn continue_training(
    mut state: TrainingRunState,
    x: &PatchSet,
    y: &PatchSet,
    eval: &EvalSet,
    run_dir: &Path,
) -> Result<TrainingOutcome> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "both corpora must be non-empty (X {}, Y {})",
            x.len(),
            y.len()
        )));
    }
    let cfg = state.config.clone();
    let bs = cfg.batch_size;
    let per_epoch_full = x.len().min(y.len()) / bs;
    if per_epoch_full == 0 {
        return Err(Error::InvalidArgument(format!(
            "corpora of {} and {} patches hold no batch of {bs}",
            x.len(),
            y.len()
        )));
    }
    let steps_per_epoch = cfg.steps_per_epoch.map_or(per_epoch_full, |s| s.min(per_epoch_full));
    std::fs::create_dir_all(checkpoint_dir(run_dir)).map_err(|e| Error::io(run_dir, e))?;
    let manifest = serde_json::json!({
        "code_version": CODE_VERSION,
        "variant": cfg.variant(),
        "config": cfg,
        "architectures": {
            "generator": Architecture::Generator(cfg.generator_spec()),
            "discriminator": Architecture::Discriminator(cfg.discriminator_spec()),
        },
        "corpus": { "x": x.len(), "y": y.len() },
        "steps_per_epoch": steps_per_epoch,
    });
    write_file(&run_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;

    let xt = patch_tensors(x)?;
    let yt = patch_tensors(y)?;
    while state.epoch < cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + state.epoch as u64));
        let mut xi: Vec<usize> = (0..xt.len()).collect();
        let mut yi: Vec<usize> = (0..yt.len()).collect();
        xi.shuffle(&mut rng);
        yi.shuffle(&mut rng);
        while state.epoch_step < steps_per_epoch {
            let k = state.epoch_step * bs;
            let xs: Vec<Tensor<f32>> = xi[k..k + bs].iter().map(|&i| xt[i].clone()).collect();
            let ys: Vec<Tensor<f32>> = yi[k..k + bs].iter().map(|&i| yt[i].clone()).collect();
            let b = train_step(&mut state, &xs, &ys)?;
            state.epoch_step += 1;
            log::debug!("epoch {} step {}: total {:.4}", state.epoch + 1, state.step, b.total);
            if cfg.checkpoint_every > 0
                && state.step % cfg.checkpoint_every == 0
                && state.epoch_step < steps_per_epoch
            {
                state.save(&checkpoint_dir(run_dir).join(format!("step_{:08}.ckpt", state.step)))?;
                write_logs(&state, run_dir)?;
            }
        }
        state.epoch += 1;
        state.epoch_step = 0;
        if let Some(row) = evaluate_epoch(&state, eval, state.epoch)? {
            log::info!(
                "epoch {}: score {:.3} +- {:.3}, block artifacts {:.5}",
                row.epoch,
                row.score_mean,
                row.score_std,
                row.block_artifacts
            );
            state.evals.push(row);
        }
        state.save(&epoch_checkpoint_path(run_dir, state.epoch))?;
        write_logs(&state, run_dir)?;
    }

    let scores: Vec<f64> = state.evals.iter().map(|r| r.score_mean).collect();
    let selected_epoch = select_epoch(&scores).map(|i| state.evals[i - 1].epoch);
    let chosen = selected_epoch.unwrap_or(state.epoch);
    let chosen_state = if chosen == state.epoch {
        state.clone()
    } else {
        TrainingRunState::load(&epoch_checkpoint_path(run_dir, chosen))?
    };
    crate::inference::save_generator(&chosen_state.generator(), &run_dir.join("generator.ckpt"))?;
    let selection = serde_json::json!({
        "epoch": chosen,
        "by_score": selected_epoch.is_some(),
        "score_mean": state.evals.iter().find(|r| r.epoch == chosen).map(|r| r.score_mean),
    });
    write_file(&run_dir.join("selected.json"), serde_json::to_string_pretty(&selection)?.as_bytes())?;
    Ok(TrainingOutcome {
        state,
        selected_epoch,
        run_dir: run_dir.to_path_buf(),
    })
}

pub fn run_training(
    config: &TrainingConfig,
    x: &PatchSet,
    y: &PatchSet,
    eval: &EvalSet,
    run_dir: &Path,
) -> Result<TrainingOutcome> {
    continue_training(TrainingRunState::new(config.clone())?, x, y, eval, run_dir)
}

/// Resumes from a full-state checkpoint written by a previous run.
pub fn resume_training(
    checkpoint: &Path,
    x: &PatchSet,
    y: &PatchSet,
    eval: &EvalSet,
    run_dir: &Path,
) -> Result<TrainingOutcome> {
    let state = TrainingRunState::load(checkpoint)?;
    // Earlier epoch checkpoints stay selectable when resuming into a new
    // run directory.
    if let Some(src) = checkpoint.parent() {
        let dst = checkpoint_dir(run_dir);
        if !same_dir(src, &dst) {
            std::fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
            for epoch in 1..=state.epoch {
                let from = src.join(format!("epoch_{epoch:03}.ckpt"));
                if from.exists() {
                    let to = epoch_checkpoint_path(run_dir, epoch);
                    std::fs::copy(&from, &to).map_err(|e| Error::io(&to, e))?;
                }
            }
        }
    }
    continue_training(state, x, y, eval, run_dir)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

/// Most advanced full-state checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let dir = checkpoint_dir(run_dir);
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ckpt") {
            continue;
        }
        let ckpt: Checkpoint<f32> = load_checkpoint(&path)?;
        let step = ckpt.metadata.get("step").and_then(|s| s.as_u64()).unwrap_or(0);
        if best.as_ref().map_or(true, |(s, _)| step > *s) {
            best = Some((step, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda_cyc: f64,
    pub lambda_ident: f64,
    pub lambda_gmap: f64,
    pub score_mean: f64,
    pub score_std: f64,
}

pub const SWEEP_CSV_HEADER: [&str; 5] =
    ["lambda_cyc", "lambda_ident", "lambda_gmap", "score_mean", "score_std"];

/// Trains one run per combination of the three weight lists and reports
/// the selected epoch's evaluation score of each.
pub fn run_sweep(
    base: &TrainingConfig,
    lambda_cyc: &[f64],
    lambda_ident: &[f64],
    lambda_gmap: &[f64],
    x: &PatchSet,
    y: &PatchSet,
    eval: &EvalSet,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if eval.volume.is_none() {
        return Err(Error::InvalidArgument("a sweep needs an evaluation volume".into()));
    }
    let mut rows = Vec::new();
    for &c in lambda_cyc {
        for &i in lambda_ident {
            for &g in lambda_gmap {
                let mut cfg = base.clone();
                cfg.weights = LossWeights::new(c, i, g)?;
                let dir = out_dir.join(format!("cyc{c}_ident{i}_gmap{g}"));
                let outcome = run_training(&cfg, x, y, eval, &dir)?;
                let epoch = outcome.selected_epoch.expect("evaluation volume given");
                let row = outcome
                    .state
                    .evals
                    .iter()
                    .find(|r| r.epoch == epoch)
                    .expect("selected epoch was evaluated");
                rows.push(SweepRow {
                    lambda_cyc: c,
                    lambda_ident: i,
                    lambda_gmap: g,
                    score_mean: row.score_mean,
                    score_std: row.score_std,
                });
            }
        }
    }
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows)?;
    write_file(&out_dir.join("sweep.csv"), &buf)?;
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(writer: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in rows {
        w.serialize((r.lambda_cyc, r.lambda_ident, r.lambda_gmap, r.score_mean, r.score_std))?;
    }
    w.flush().map_err(|e| Error::io("sweep csv", e))
}
