//! Outer training loop: batch assembly, AdamW with a cosine schedule, global
//! gradient clipping, the auxiliary-prompt alignment term and EMA upkeep.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::{Dataset, Triplet};
use crate::encoders::{self, apply_ema, params_clone_for_ema, ImageBank, ModelConfig, ModelParams, TAU};
use crate::error::{Error, Result};
use crate::objective::{self, AlignNorm, AuxInit, AuxProblem, AuxiliaryConfig};
use crate::params::ParamSet;
use crate::prompting::{self, Mechanism, PromptMode, PromptState, QueryInputs};
use crate::tensor::{Mat, Real};

/// Input resolution of the pretrained backbones. Inert for synthetic features.
pub const IMAGE_SIZE: usize = 224;
/// Aspect padding ratio applied before resizing real images. Inert for synthetic features.
pub const PADDING_RATIO: f64 = 1.25;
/// Prompt length used by the full-scale configuration.
pub const FULL_SCALE_PROMPT_LENGTH: usize = 32;
/// Base learning rates of the full-scale configuration (CIRR, Fashion-IQ).
pub const FULL_SCALE_LR: [f64; 2] = [1e-5, 2e-5];
/// Prompt length for desk-scale runs.
pub const DESK_PROMPT_LENGTH: usize = 8;
/// Base learning rate for the toy model widths.
pub const DESK_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown precision {s:?}; valid values: f32, f64"))),
        }
    }
}

/// Flat training configuration. Every key has a default; unknown keys are rejected.
///
/// Defaults follow the full-scale recipe (`prompt_length = 32`, `lr = 1e-5`,
/// `gamma = 0.8`, `weight_decay = 0.05`, cosine schedule). For the toy model
/// use [`TrainConfig::desk`] or the shipped `desk.profile` (`prompt_length = 8`,
/// `lr = 1e-3`). `IMAGE_SIZE` and `PADDING_RATIO` document the image
/// preprocessing for real-data adapters and do not affect synthetic features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub prompt_length: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub ema_decay: f64,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub aux_init: AuxInit,
    pub backtracking: bool,
    pub mechanism: Mechanism,
    pub prompt_mode: PromptMode,
    pub align_norm: AlignNorm,
    pub clip_norm: f64,
    pub tau: f64,
    pub train_tau: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub precision: Precision,
    /// Fraction of triplets held out from training (0 trains and evaluates on all).
    pub holdout_fraction: f64,
    pub d_model: usize,
    pub d_embed: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers_text: usize,
    pub n_layers_img: usize,
    pub gen_layers: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub inv_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.8,
            prompt_length: FULL_SCALE_PROMPT_LENGTH,
            lr: FULL_SCALE_LR[0],
            weight_decay: 0.05,
            schedule: Schedule::Cosine,
            batch_size: 32,
            steps: 2000,
            seed: 0,
            ema_decay: 0.999,
            inner_steps: 5,
            inner_lr: 0.1,
            aux_init: AuxInit::FromCurrentPrompt,
            backtracking: true,
            mechanism: Mechanism::Sprc,
            prompt_mode: PromptMode::Full,
            align_norm: AlignNorm::Frobenius,
            clip_norm: 1.0,
            tau: 100.0,
            train_tau: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            precision: Precision::F64,
            holdout_fraction: 0.2,
            d_model: 32,
            d_embed: 32,
            n_heads: 2,
            d_ff: 64,
            n_layers_text: 1,
            n_layers_img: 1,
            gen_layers: 1,
            mlp_layers: 2,
            mlp_hidden: 64,
            inv_hidden: 64,
        }
    }
}

impl TrainConfig {
    /// Desk-scale overrides (short prompts and a learning rate suited to the
    /// toy model widths); the same values ship as `desk.profile`.
    pub fn desk() -> Self {
        Self { prompt_length: DESK_PROMPT_LENGTH, lr: DESK_LR, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn aux(&self) -> AuxiliaryConfig {
        AuxiliaryConfig {
            inner_steps: self.inner_steps,
            inner_lr: self.inner_lr,
            init_mode: self.aux_init,
            backtracking: self.backtracking,
        }
    }

    /// Range checks, then forces `gamma = 0` and `inner_steps = 0` for baselines.
    pub fn validated(mut self) -> Result<Self> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return fail(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return fail(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return fail("AdamW needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return fail(format!("holdout_fraction must lie in [0, 1), got {}", self.holdout_fraction));
        }
        if self.prompt_length == 0 && self.mechanism == Mechanism::Sprc {
            return fail("SPRC needs prompt_length >= 1".into());
        }
        self.aux().validate()?;
        if self.mechanism != Mechanism::Sprc && (self.gamma != 0.0 || self.inner_steps != 0) {
            log::info!("mechanism {} trains without the alignment term; forcing gamma = 0, inner_steps = 0", self.mechanism);
            self.gamma = 0.0;
            self.inner_steps = 0;
        }
        Ok(self)
    }

    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            vocab_size: dataset.vocab.len(),
            max_caption_len: dataset.meta.max_caption_len,
            d_img: dataset.meta.d_img,
            d_model: self.d_model,
            d_embed: self.d_embed,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            n_layers_text: self.n_layers_text,
            n_layers_img: self.n_layers_img,
            prompt_length: self.prompt_length,
            gen_layers: self.gen_layers,
            mlp_layers: self.mlp_layers,
            mlp_hidden: self.mlp_hidden,
            inv_hidden: self.inv_hidden,
            tau: self.tau,
        }
    }

    /// Whether `path` is updated by the optimizer under this configuration.
    pub fn is_trainable(&self, path: &str) -> bool {
        if encoders::is_frozen(path) {
            return false;
        }
        if path == TAU {
            return self.train_tau;
        }
        self.mechanism.trainable_prefixes().iter().any(|p| path.starts_with(p))
    }
}

/// `base_lr · ½ · (1 + cos(π · step / total))`; steps past the end clamp to 0.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> f64 {
    if step > total_steps {
        log::warn!("step {step} is past the schedule end {total_steps}; learning rate clamped to 0");
        return 0.0;
    }
    if total_steps == 0 {
        return base_lr;
    }
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// AdamW first and second moments, keyed like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>, trainable: impl Fn(&str) -> bool) -> Self {
        let mut m = ParamSet::new();
        for (k, p) in params.iter().filter(|(k, _)| trainable(k)) {
            m.insert(k.clone(), Mat::zeros(p.rows(), p.cols()));
        }
        Self { v: m.clone(), m, t: 0 }
    }
}

/// Hyperparameters of one AdamW update.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    /// Decoupled update: `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. Tensors without a
    /// gradient entry are treated as having zero gradient.
    pub fn step<T: Real>(&self, params: &mut ParamSet<T>, grads: &ParamSet<T>, state: &mut AdamState<T>) -> Result<()> {
        state.t += 1;
        let t = state.t as i32;
        let (b1, b2): (T, T) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        let shrink = T::one() - lr * T::from_f64_lossy(self.weight_decay);
        let paths: Vec<String> = state.m.iter().map(|(k, _)| k.clone()).collect();
        for path in paths {
            let g = grads.get(&path).ok();
            let m = state.m.get_mut(&path)?;
            let v_len = m.len();
            let p = params.get_mut(&path)?;
            if p.len() != v_len {
                return Err(Error::Shape(format!("optimizer state for {path} has the wrong size")));
            }
            let m_data = m.data_mut();
            let v_data = state.v.get_mut(&path)?.data_mut();
            for i in 0..v_len {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                m_data[i] = b1 * m_data[i] + (T::one() - b1) * gi;
                v_data[i] = b2 * v_data[i] + (T::one() - b2) * gi * gi;
                let mhat = m_data[i] / bc1;
                let vhat = v_data[i] / bc2;
                let pd = p.data_mut();
                pd[i] = pd[i] * shrink - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm` (0 disables).
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut ParamSet<T>, max_norm: f64) -> T {
    let total: T = grads.iter().map(|(_, g)| g.data().iter().map(|&x| x * x).sum::<T>()).sum::<T>().sqrt();
    let limit = T::from_f64_lossy(max_norm);
    if max_norm > 0.0 && total > limit {
        let k = limit / total;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    total
}

/// One metrics-log record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "Lc")]
    pub lc: f64,
    #[serde(rename = "La")]
    pub la: f64,
    #[serde(rename = "L")]
    pub loss: f64,
    pub lr: f64,
}

/// Per-step diagnostics beyond the logged losses.
#[derive(Clone, Debug)]
pub struct StepOutcome<T> {
    pub record: StepRecord,
    /// Largest gradient magnitude that reached any auxiliary-prompt leaf.
    pub aux_grad_max_abs: T,
    /// Global gradient norm before clipping.
    pub grad_norm: T,
    pub aux_prompts: Vec<PromptState<T>>,
    pub grads: ParamSet<T>,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub config: TrainConfig,
    pub params: ModelParams<T>,
    pub ema: ParamSet<T>,
    pub adam: AdamState<T>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> TrainState<T> {
    pub fn init(config: TrainConfig, model: ModelConfig) -> Result<Self> {
        let config = config.validated()?;
        let params = ModelParams::init(model, config.seed)?;
        let ema = params_clone_for_ema(&params);
        let adam = AdamState::new(&params.set, |p| config.is_trainable(p));
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ba7c);
        Ok(Self { config, params, ema, adam, step: 0, rng })
    }

    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.step, self.config.steps, self.config.lr)
    }
}

/// Read-only data for a run: training triplets and the frozen image bank.
pub struct TrainContext<'a, T> {
    pub dataset: &'a Dataset,
    pub train: Vec<Triplet>,
    pub bank: ImageBank<T>,
}

impl<'a, T: Real> TrainContext<'a, T> {
    pub fn new(dataset: &'a Dataset, train: Vec<Triplet>, params: &ModelParams<T>) -> Result<Self> {
        let bank = ImageBank::build(&dataset.corpus, params)?;
        for t in &train {
            for id in [&t.reference_id, &t.target_id] {
                if dataset.corpus.position(id).is_none() {
                    return Err(Error::Referential(format!("query {}: image {id} is not in the corpus", t.query_id)));
                }
            }
        }
        Ok(Self { dataset, train, bank })
    }

    fn distinct_targets(&self) -> usize {
        self.train.iter().map(|t| &t.target_id).collect::<HashSet<_>>().len()
    }
}

/// Draws `B` triplets with pairwise distinct targets so that no in-batch
/// negative is a copy of the positive.
pub fn sample_batch<T: Real>(state: &mut TrainState<T>, ctx: &TrainContext<'_, T>) -> Result<Vec<Triplet>> {
    let b = state.config.batch_size;
    if ctx.distinct_targets() < b {
        return Err(Error::Config(format!(
            "batch_size {b} exceeds the {} distinct targets among training triplets",
            ctx.distinct_targets()
        )));
    }
    let mut order: Vec<usize> = (0..ctx.train.len()).collect();
    order.shuffle(&mut state.rng);
    let mut seen = HashSet::with_capacity(b);
    let mut batch = Vec::with_capacity(b);
    for i in order {
        let t = &ctx.train[i];
        if seen.insert(t.target_id.as_str()) {
            batch.push(t.clone());
            if batch.len() == b {
                break;
            }
        }
    }
    Ok(batch)
}

/// Forward, backward, AdamW update and EMA update for one batch.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_, T>,
    batch: &[Triplet],
) -> Result<StepOutcome<T>> {
    let step = state.step;
    train_step_inner(state, ctx, batch).map_err(|e| e.at_step(step))
}

/// Losses and trainable-parameter gradients of one batch.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub lc: T,
    pub la: T,
    pub loss: T,
    pub grads: ParamSet<T>,
    pub aux_prompts: Vec<PromptState<T>>,
    /// Largest gradient magnitude that reached any auxiliary-prompt leaf.
    pub aux_grad_max_abs: T,
}

/// Forward and backward pass of `L = Lc + gamma * La` at the current
/// parameters. Auxiliary prompts are solved through the EMA encoder unless
/// `fixed_aux` supplies them; either way they enter as constants.
pub fn batch_loss<T: Real>(
    state: &TrainState<T>,
    ctx: &TrainContext<'_, T>,
    batch: &[Triplet],
    fixed_aux: Option<&[PromptState<T>]>,
) -> Result<BatchLoss<T>> {
    let cfg = &state.config;
    if batch.len() != cfg.batch_size {
        return Err(Error::Domain(format!("batch of {} triplets, configured batch_size is {}", batch.len(), cfg.batch_size)));
    }
    if let Some(a) = fixed_aux {
        if a.len() != batch.len() {
            return Err(Error::Shape(format!("{} auxiliary prompts for a batch of {}", a.len(), batch.len())));
        }
    }
    let params = &state.params;
    let mcfg = &params.config;
    let trainable = |p: &str| cfg.is_trainable(p);

    let mut g = Graph::new();
    let mut b = prompting::bind_for_query(&mut g, &params.set, cfg.mechanism, &trainable);
    b.merge(params.set.bind(&mut g, encoders::TARGET_HEAD, trainable));
    b.merge(params.set.bind(&mut g, TAU, trainable));

    let mut ref_rows = Vec::with_capacity(batch.len());
    let mut tgt_rows = Vec::with_capacity(batch.len());
    for t in batch {
        let r = ctx.dataset.corpus.position(&t.reference_id).ok_or_else(|| Error::Referential(t.reference_id.clone()))?;
        let v = ctx.dataset.corpus.position(&t.target_id).ok_or_else(|| Error::Referential(t.target_id.clone()))?;
        ref_rows.push(r);
        tgt_rows.push(v);
    }

    // Target side: frozen trunk means through the trainable head.
    let means = g.constant(ctx.bank.trunk_means.permute_rows(&tgt_rows));
    let head = b.get("target_head/w")?;
    let proj = g.matmul(means, head);
    let v = g.l2_normalize_rows(proj);

    let mut us = Vec::with_capacity(batch.len());
    let mut prompts = Vec::with_capacity(batch.len());
    for (t, &r) in batch.iter().zip(&ref_rows) {
        let reference_pooled = ctx.bank.reference.slice_rows(r, 1);
        let inputs = QueryInputs { patch_states: &ctx.bank.states[r], reference_pooled: &reference_pooled, caption: &t.caption };
        let (u, p) = prompting::query_graph(&mut g, &b, mcfg, cfg.mechanism, cfg.prompt_mode, &inputs)?;
        us.push(u);
        prompts.push(p);
    }
    let u = g.concat_rows(&us);
    let tau = b.get(TAU)?;
    let lc = objective::contrastive_graph(&mut g, u, v, tau);
    if !g.scalar(lc).is_finite() {
        return Err(Error::Numeric(format!("contrastive loss is {}", g.scalar(lc))));
    }

    let mut aux_prompts = Vec::new();
    let mut aux_vars: Vec<Var> = Vec::new();
    let (root, la_value) = if cfg.mechanism == Mechanism::Sprc && cfg.gamma > 0.0 {
        let targets = g.value(v).clone();
        let aux = cfg.aux();
        let tau_value = g.scalar(tau);
        let mut terms = Vec::with_capacity(batch.len());
        for (i, (t, p)) in batch.iter().zip(&prompts).enumerate() {
            let p = p.expect("SPRC produces a prompt");
            let solved = match fixed_aux {
                Some(a) => a[i].clone(),
                None => {
                    let init = match aux.init_mode {
                        AuxInit::FromCurrentPrompt => PromptState::new(g.value(p).clone())?,
                        AuxInit::Zero => PromptState::new(Mat::zeros(g.value(p).rows(), g.value(p).cols()))?,
                    };
                    let problem = AuxProblem {
                        caption: &t.caption,
                        targets: &targets,
                        index: i,
                        ema: &state.ema,
                        config: mcfg,
                        tau: tau_value,
                    };
                    objective::solve_auxiliary_prompt(&init, &problem, &aux)?.prompt
                }
            };
            let p_aux = g.constant(solved.tokens().clone());
            let term = objective::alignment_graph(&mut g, p, p_aux, cfg.align_norm);
            aux_vars.push(p_aux);
            terms.push(term);
            aux_prompts.push(solved);
        }
        let stacked = g.concat_rows(&terms);
        let s = g.sum(stacked);
        let la = g.scale(s, T::one() / T::from_f64_lossy(batch.len() as f64));
        let weighted = g.scale(la, T::from_f64_lossy(cfg.gamma));
        let total = g.add(lc, weighted);
        (total, g.scalar(la))
    } else {
        (lc, T::zero())
    };

    let loss = g.scalar(root);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("total loss is {loss}")));
    }
    let mut grads_raw = g.backward(root);
    let mut aux_grad_max_abs = T::zero();
    for &a in &aux_vars {
        if let Some(gr) = grads_raw.get(a) {
            aux_grad_max_abs = aux_grad_max_abs.max(gr.max_abs());
        }
    }

    let mut grads = ParamSet::new();
    for (path, &var) in b.iter() {
        if !trainable(path) {
            continue;
        }
        if let Some(gm) = grads_raw.take(var) {
            if !gm.is_finite() {
                return Err(Error::Numeric(format!("gradient of {path} is not finite")));
            }
            grads.insert(path.clone(), gm);
        }
    }
    Ok(BatchLoss { lc: g.scalar(lc), la: la_value, loss, grads, aux_prompts, aux_grad_max_abs })
}

fn train_step_inner<T: Real>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_, T>,
    batch: &[Triplet],
) -> Result<StepOutcome<T>> {
    let out = batch_loss(state, ctx, batch, None)?;
    let cfg = state.config.clone();
    let mut grads = out.grads.clone();
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);

    let lr = state.current_lr();
    let opt = AdamW { lr, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay };
    opt.step(&mut state.params.set, &grads, &mut state.adam)?;
    if cfg.train_tau {
        let t = state.params.set.get_mut(TAU)?;
        let floor = T::from_f64_lossy(1e-3);
        if t.data()[0] < floor {
            t.data_mut()[0] = floor;
        }
    }
    apply_ema(&mut state.ema, &state.params.set, T::from_f64_lossy(cfg.ema_decay))?;

    let record = StepRecord {
        step: state.step,
        lc: out.lc.to_f64().unwrap_or(f64::NAN),
        la: out.la.to_f64().unwrap_or(f64::NAN),
        loss: out.loss.to_f64().unwrap_or(f64::NAN),
        lr,
    };
    state.step += 1;
    Ok(StepOutcome {
        record,
        aux_grad_max_abs: out.aux_grad_max_abs,
        grad_norm,
        aux_prompts: out.aux_prompts,
        grads: out.grads,
    })
}

/// Trains for `steps` steps (or to the configured end), calling `on_step` after each.
pub fn run<T: Real>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_, T>,
    steps: Option<u64>,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let end = steps.map_or(state.config.steps, |n| (state.step + n).min(state.config.steps));
    let mut records = Vec::new();
    while state.step < end {
        let batch = sample_batch(state, ctx)?;
        let out = train_step(state, ctx, &batch)?;
        on_step(&out.record)?;
        records.push(out.record);
    }
    Ok(records)
}

/// Appends records as JSON lines.
pub fn append_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Deterministic train/held-out split by a seeded shuffle.
pub fn split_triplets(triplets: &[Triplet], holdout_fraction: f64, seed: u64) -> (Vec<Triplet>, Vec<Triplet>) {
    if holdout_fraction <= 0.0 {
        return (triplets.to_vec(), Vec::new());
    }
    let mut idx: Vec<usize> = (0..triplets.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x0005_9117));
    let n_hold = ((triplets.len() as f64) * holdout_fraction).round() as usize;
    let hold: HashSet<usize> = idx[..n_hold].iter().copied().collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, t) in triplets.iter().enumerate() {
        if hold.contains(&i) {
            test.push(t.clone());
        } else {
            train.push(t.clone());
        }
    }
    (train, test)
}
