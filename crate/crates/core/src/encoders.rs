//! Toy encoders: the frozen image trunk shared by the reference and target
//! sides, the trainable target head, and the prompt-aware text encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::{Corpus, ImageFeatures, TokenSequence};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, ParamSet};
use crate::prompting::PromptState;
use crate::tensor::{Mat, Real};

pub const TEXT: &str = "text/";
pub const IMAGE: &str = "image/";
pub const TARGET_HEAD: &str = "target_head";
pub const PROMPT_GEN: &str = "prompt_gen/";
pub const INVERSION: &str = "inversion/";
pub const STATIC_PROMPT: &str = "static_prompt";
pub const TAU: &str = "tau";

/// Architecture hyperparameters. Stored verbatim in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_caption_len: usize,
    pub d_img: usize,
    pub d_model: usize,
    pub d_embed: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers_text: usize,
    pub n_layers_img: usize,
    /// L_p; also the number of learnable queries in the prompt generator.
    pub prompt_length: usize,
    pub gen_layers: usize,
    pub mlp_layers: usize,
    pub mlp_hidden: usize,
    pub inv_hidden: usize,
    pub tau: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, max_caption_len: usize, d_img: usize) -> Self {
        Self {
            vocab_size,
            max_caption_len,
            d_img,
            d_model: 32,
            d_embed: 32,
            n_heads: 2,
            d_ff: 64,
            n_layers_text: 1,
            n_layers_img: 1,
            prompt_length: 8,
            gen_layers: 1,
            mlp_layers: 2,
            mlp_hidden: 64,
            inv_hidden: 64,
            tau: 100.0,
        }
    }

    /// Longest augmented query the text encoder accepts.
    pub fn max_text_len(&self) -> usize {
        self.prompt_length.max(1) + self.max_caption_len
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_caption_len", self.max_caption_len),
            ("d_img", self.d_img),
            ("d_model", self.d_model),
            ("d_embed", self.d_embed),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("mlp_layers", self.mlp_layers),
            ("mlp_hidden", self.mlp_hidden),
            ("inv_hidden", self.inv_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Which pooled head `encode_image` applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageHead {
    /// f_φ: frozen trunk, frozen head.
    Reference,
    /// f_θ: the same frozen trunk with the trainable target head.
    Target,
}

/// Every tensor of the model, including baselines' parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub set: ParamSet<T>,
}

impl<T: Real> ModelParams<T> {
    /// Seeded random initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let (d, e, ff) = (config.d_model, config.d_embed, config.d_ff);
        let mut set = ParamSet::new();

        set.insert("text/tok_emb", Mat::randn(config.vocab_size, d, 1.0, rng));
        set.insert("text/pos_emb", Mat::randn(config.max_text_len(), d, 0.1, rng));
        for l in 0..config.n_layers_text {
            nn::init_block(&mut set, &format!("text/layers/{l}"), d, ff, rng);
        }
        nn::init_linear(&mut set, "text/head/w", d, e, rng);

        nn::init_linear(&mut set, "image/proj/w", config.d_img, d, rng);
        for l in 0..config.n_layers_img {
            nn::init_block(&mut set, &format!("image/layers/{l}"), d, ff, rng);
        }
        nn::init_linear(&mut set, "image/ref_head/w", d, e, rng);
        nn::init_linear(&mut set, "target_head/w", d, e, rng);

        crate::prompting::init_prompt_gen(&mut set, &config, rng);
        crate::prompting::init_inversion(&mut set, &config, rng);
        set.insert(STATIC_PROMPT, Mat::randn(config.prompt_length, d, 1.0, rng));
        set.insert(TAU, Mat::scalar(T::from_f64_lossy(config.tau)));
        Ok(Self { config, set })
    }

    pub fn tau(&self) -> T {
        self.set.get(TAU).map(|m| m.data()[0]).unwrap_or_else(|_| T::from_f64_lossy(self.config.tau))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { config: self.config.clone(), set: self.set.cast() }
    }
}

/// Paths that never receive updates.
pub fn is_frozen(path: &str) -> bool {
    path.starts_with(IMAGE)
}

/// Runs the frozen trunk over one image's patches: `[n_patches × d_model]`.
pub(crate) fn image_trunk<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &ModelConfig, patches: Var) -> Result<Var> {
    let mut x = nn::linear(g, b, "image/proj", patches, false)?;
    for l in 0..cfg.n_layers_img {
        x = nn::block(g, b, &format!("image/layers/{l}"), x, cfg.n_heads)?;
    }
    Ok(x)
}

/// Mean-pools patch states, projects with `head` and L2-normalizes.
pub(crate) fn pool_and_project<T: Real>(g: &mut Graph<T>, states: Var, head: Var) -> Var {
    let m = g.mean_rows(states);
    let p = g.matmul(m, head);
    g.l2_normalize_rows(p)
}

/// Encodes one image. Returns `(patch_states, pooled)`.
pub fn encode_image<T: Real>(
    features: &ImageFeatures,
    params: &ModelParams<T>,
    head: ImageHead,
) -> Result<(Mat<T>, Mat<T>)> {
    let patches = features.patches().cast::<T>();
    if !patches.is_finite() {
        return Err(Error::Numeric("image features contain non-finite values".into()));
    }
    if patches.cols() != params.config.d_img {
        return Err(Error::Shape(format!(
            "image features have {} columns, model expects {}",
            patches.cols(),
            params.config.d_img
        )));
    }
    let mut g = Graph::new();
    let b = params.set.bind(&mut g, IMAGE, |_| false);
    let p = g.constant(patches);
    let states = image_trunk(&mut g, &b, &params.config, p)?;
    let head_path = match head {
        ImageHead::Reference => "image/ref_head/w",
        ImageHead::Target => "target_head/w",
    };
    let h = g.constant(params.set.get(head_path)?.clone());
    let pooled = pool_and_project(&mut g, states, h);
    Ok((g.value(states).clone(), g.value(pooled).clone()))
}

/// Text-encoder forward over `[prompt ⊕ caption]`. `text` must bind the `text/`
/// tensors (live or EMA). Returns a unit-norm `1 × d_embed` node.
pub(crate) fn text_forward<T: Real>(
    g: &mut Graph<T>,
    text: &Bound,
    cfg: &ModelConfig,
    prompt: Option<Var>,
    caption: &TokenSequence,
) -> Result<Var> {
    let lp = prompt.map_or(0, |p| g.value(p).rows());
    let len = lp + caption.len();
    if len > cfg.max_text_len() {
        return Err(Error::Length { len, max: cfg.max_text_len() });
    }
    let tok = g.gather(text.get("text/tok_emb")?, caption.ids());
    let x = match prompt {
        Some(p) if lp > 0 => g.concat_rows(&[p, tok]),
        _ => tok,
    };
    let pos = g.slice_rows(text.get("text/pos_emb")?, 0, len);
    let mut x = g.add(x, pos);
    for l in 0..cfg.n_layers_text {
        x = nn::block(g, text, &format!("text/layers/{l}"), x, cfg.n_heads)?;
    }
    let pooled = g.mean_rows(x);
    let proj = g.matmul(pooled, text.get("text/head/w")?);
    Ok(g.l2_normalize_rows(proj))
}

/// Precomputed frozen-trunk outputs for every corpus image.
///
/// The trunk and reference head are frozen, so these never change during
/// training; only the target head is applied on the fly.
#[derive(Clone, Debug)]
pub struct ImageBank<T> {
    pub ids: Vec<String>,
    /// Per-image patch states, `[n_patches × d_model]`.
    pub states: Vec<Mat<T>>,
    /// Mean-pooled trunk output per image, `[N × d_model]`.
    pub trunk_means: Mat<T>,
    /// f_φ pooled embeddings, `[N × d_embed]`.
    pub reference: Mat<T>,
}

impl<T: Real> ImageBank<T> {
    pub fn build(corpus: &Corpus, params: &ModelParams<T>) -> Result<Self> {
        let mut states = Vec::with_capacity(corpus.len());
        let mut means = Vec::with_capacity(corpus.len());
        let mut refs = Vec::with_capacity(corpus.len());
        for (id, feats) in corpus.iter() {
            let (s, pooled) = encode_image(feats, params, ImageHead::Reference)
                .map_err(|e| Error::Domain(format!("image {id}: {e}")))?;
            let mut mean = Mat::zeros(1, s.cols());
            for r in 0..s.rows() {
                for (o, &x) in mean.data_mut().iter_mut().zip(s.row(r)) {
                    *o += x;
                }
            }
            let n = T::from_f64_lossy(s.rows() as f64);
            mean.data_mut().iter_mut().for_each(|x| *x = *x / n);
            refs.push(pooled);
            means.push(mean);
            states.push(s);
        }
        let trunk_means = Mat::concat_rows(&means.iter().collect::<Vec<_>>())?;
        let reference = Mat::concat_rows(&refs.iter().collect::<Vec<_>>())?;
        Ok(Self { ids: corpus.ids().to_vec(), states, trunk_means, reference })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Target-side embeddings for every image under the current target head.
    pub fn target_embeddings(&self, params: &ModelParams<T>) -> Result<Mat<T>> {
        Ok(self.trunk_means.matmul(params.set.get("target_head/w")?).normalize_rows())
    }
}

/// Encodes an augmented query with the given text tensors (live or EMA shadow).
pub fn encode_text<T: Real>(query: &AugmentedQuery<T>, text: &ParamSet<T>, cfg: &ModelConfig) -> Result<Mat<T>> {
    let mut g = Graph::new();
    let b = text.bind(&mut g, TEXT, |_| false);
    let p = (!query.prompt.is_empty()).then(|| g.constant(query.prompt.tokens().clone()));
    let out = text_forward(&mut g, &b, cfg, p, &query.caption)?;
    Ok(g.value(out).clone())
}

/// `[prompt ⊕ caption]`, the input to the text encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedQuery<T> {
    pub prompt: PromptState<T>,
    pub caption: TokenSequence,
}

impl<T: Real> AugmentedQuery<T> {
    pub fn len(&self) -> usize {
        self.prompt.len() + self.caption.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Snapshot of the text encoder used to seed the EMA shadow.
pub fn params_clone_for_ema<T: Real>(params: &ModelParams<T>) -> ParamSet<T> {
    params.set.subset(TEXT)
}

/// `shadow ← m·shadow + (1 − m)·live` for every shadow tensor.
pub fn apply_ema<T: Real>(shadow: &mut ParamSet<T>, live: &ParamSet<T>, decay: T) -> Result<()> {
    if !(decay >= T::zero() && decay <= T::one()) {
        return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    let keep = T::one() - decay;
    for (path, s) in shadow.iter_mut() {
        let l = live.get(path)?;
        if l.shape() != s.shape() {
            return Err(Error::Shape(format!("{path}: shadow {:?} vs live {:?}", s.shape(), l.shape())));
        }
        for (x, &y) in s.data_mut().iter_mut().zip(l.data()) {
            *x = decay * *x + keep * y;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageFeatures;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::new(10, 3, 6);
        c.d_model = 8;
        c.d_embed = 8;
        c.d_ff = 16;
        c.prompt_length = 2;
        c
    }

    fn feats(n: usize, d: usize, seed: u64) -> ImageFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageFeatures::new(Mat::randn(n, d, 1.0, &mut rng)).unwrap()
    }

    fn norm(m: &Mat<f64>) -> f64 {
        m.frobenius()
    }

    #[test]
    fn single_patch_image_shapes() {
        let p = ModelParams::<f64>::init(cfg(), 1).unwrap();
        let (states, pooled) = encode_image(&feats(1, 6, 2), &p, ImageHead::Reference).unwrap();
        assert_eq!(states.shape(), (1, 8));
        assert_eq!(pooled.shape(), (1, 8));
        assert!((norm(&pooled) - 1.0).abs() < 1e-6);
        let again = encode_image(&feats(1, 6, 2), &p, ImageHead::Reference).unwrap();
        assert_eq!(again, (states, pooled));
    }

    #[test]
    fn linear_trunk_pooled_is_scale_invariant() {
        let mut c = cfg();
        c.n_layers_img = 0;
        let p = ModelParams::<f64>::init(c, 3).unwrap();
        let f = feats(3, 6, 4);
        let doubled = ImageFeatures::new(f.patches().map(|x| x * 2.0)).unwrap();
        let (_, a) = encode_image(&f, &p, ImageHead::Target).unwrap();
        let (_, b) = encode_image(&doubled, &p, ImageHead::Target).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn non_finite_features_rejected() {
        let p = ModelParams::<f64>::init(cfg(), 1).unwrap();
        let mut m = Mat::zeros(2, 6);
        m.set(0, 0, f32::NAN);
        let f = ImageFeatures::new_unchecked(m);
        assert!(matches!(encode_image(&f, &p, ImageHead::Reference), Err(Error::Numeric(_))));
    }

    #[test]
    fn degenerate_text_encoder_is_projected_token() {
        let mut c = cfg();
        c.n_layers_text = 0;
        let mut p = ModelParams::<f64>::init(c.clone(), 5).unwrap();
        *p.set.get_mut("text/pos_emb").unwrap() = Mat::zeros(c.max_text_len(), c.d_model);
        let caption = TokenSequence::new(vec![4], 3, 10).unwrap();
        let q = AugmentedQuery { prompt: PromptState::empty(c.d_model), caption };
        let out = encode_text(&q, &p.set, &c).unwrap();
        let tok = p.set.get("text/tok_emb").unwrap().slice_rows(4, 1);
        let expected = tok.matmul(p.set.get("text/head/w").unwrap()).normalize_rows();
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn prompt_vectors_change_text_embedding() {
        let c = cfg();
        let p = ModelParams::<f64>::init(c.clone(), 6).unwrap();
        let caption = TokenSequence::new(vec![1, 2, 3], 3, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prompt = Mat::randn(2, 8, 1.0, &mut rng);
        let a = encode_text(&AugmentedQuery { prompt: PromptState::new(prompt.clone()).unwrap(), caption: caption.clone() }, &p.set, &c).unwrap();
        let again = encode_text(&AugmentedQuery { prompt: PromptState::new(prompt.clone()).unwrap(), caption: caption.clone() }, &p.set, &c).unwrap();
        assert_eq!(a, again);
        let mut moved = prompt;
        moved.set(1, 3, moved.get(1, 3) + 0.5);
        let b = encode_text(&AugmentedQuery { prompt: PromptState::new(moved).unwrap(), caption }, &p.set, &c).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
        assert!((norm(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn overlong_query_is_length_error() {
        let c = cfg();
        let p = ModelParams::<f64>::init(c.clone(), 6).unwrap();
        let caption = TokenSequence::new(vec![1, 2, 3], 3, 10).unwrap();
        let q = AugmentedQuery { prompt: PromptState::new(Mat::zeros(3, 8)).unwrap(), caption };
        assert!(matches!(encode_text(&q, &p.set, &c), Err(Error::Length { len: 6, max: 5 })));
    }

    #[test]
    fn ema_edge_decays() {
        let mut shadow = ParamSet::<f64>::new();
        shadow.insert("text/x", Mat::scalar(1.0));
        let mut live = ParamSet::new();
        live.insert("text/x", Mat::scalar(0.0));
        let mut s = shadow.clone();
        apply_ema(&mut s, &live, 1.0).unwrap();
        assert_eq!(s, shadow);
        apply_ema(&mut s, &live, 0.9).unwrap();
        assert_eq!(s.get("text/x").unwrap().data()[0], 0.9);
        apply_ema(&mut s, &live, 0.0).unwrap();
        assert_eq!(s, live);
        live.insert("text/x", Mat::zeros(1, 2));
        assert!(matches!(apply_ema(&mut s, &live, 0.5), Err(Error::Shape(_))));
    }
}
