//! Sentence-level prompt generation and the three baseline query mechanisms.
//!
//! The generator is a small querying transformer: `L_p` learnable query tokens
//! self-attend together with the caption embeddings, cross-attend onto the
//! reference image's patch states, pass through a feed-forward layer, and an
//! MLP maps each query position into text-embedding space. The resulting
//! `L_p` vectors are prepended to the caption before text encoding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dataset::TokenSequence;
use crate::encoders::{self, AugmentedQuery, ModelConfig, ModelParams, TEXT};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{Bound, ParamSet};
use crate::tensor::{Mat, Real};

/// `L_p` continuous token embeddings in text-embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState<T> {
    tokens: Mat<T>,
}

impl<T: Real> PromptState<T> {
    pub fn new(tokens: Mat<T>) -> Result<Self> {
        if !tokens.is_finite() {
            return Err(Error::Numeric("prompt contains non-finite entries".into()));
        }
        Ok(Self { tokens })
    }

    pub fn empty(d_text: usize) -> Self {
        Self { tokens: Mat::zeros(0, d_text) }
    }

    pub fn tokens(&self) -> &Mat<T> {
        &self.tokens
    }

    pub fn into_tokens(self) -> Mat<T> {
        self.tokens
    }

    /// Number of prompt tokens.
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Which inputs feed the prompt generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptMode {
    /// Reference image and caption.
    Full,
    /// Caption only; cross-attention is skipped.
    RcOnly,
    /// Reference image only; self-attention runs over the queries alone.
    RiOnly,
}

/// How the query embedding is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mechanism {
    /// Generated sentence-level prompt ⊕ caption.
    Sprc,
    /// Sum of caption embedding and reference embedding.
    LateFusion,
    /// Single pseudo-word token from the reference embedding ⊕ caption.
    TextInversion,
    /// One learned static prompt shared by every query ⊕ caption.
    FixedPrompt,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, $($variant:ident => $name:literal),+ $(,)?) => {
        impl $ty {
            pub const NAMES: &'static [&'static str] = &[$($name),+];

            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_uppercase().replace('-', "_").as_str() {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?}; valid values: {}",
                        $what,
                        Self::NAMES.join(", ")
                    ))),
                }
            }
        }
    };
}

text_enum!(PromptMode, "prompt mode", Full => "FULL", RcOnly => "RC_ONLY", RiOnly => "RI_ONLY");
text_enum!(
    Mechanism,
    "mechanism",
    Sprc => "SPRC",
    LateFusion => "LATE_FUSION",
    TextInversion => "TEXT_INVERSION",
    FixedPrompt => "FIXED_PROMPT",
);

impl Mechanism {
    pub const ALL: [Mechanism; 4] =
        [Mechanism::Sprc, Mechanism::LateFusion, Mechanism::TextInversion, Mechanism::FixedPrompt];

    /// Parameter prefixes that receive gradients under this mechanism.
    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Mechanism::Sprc => &[TEXT, encoders::TARGET_HEAD, encoders::PROMPT_GEN],
            Mechanism::LateFusion => &[TEXT, encoders::TARGET_HEAD],
            Mechanism::TextInversion => &[TEXT, encoders::TARGET_HEAD, encoders::INVERSION],
            Mechanism::FixedPrompt => &[TEXT, encoders::TARGET_HEAD, encoders::STATIC_PROMPT],
        }
    }
}

pub(crate) fn init_prompt_gen<T: Real, R: Rng + ?Sized>(set: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut R) {
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    set.insert("prompt_gen/query_tokens", Mat::randn(cfg.prompt_length, d, 1.0, rng));
    set.insert("prompt_gen/caption_pos", Mat::randn(cfg.max_caption_len, d, 0.1, rng));
    for l in 0..cfg.gen_layers {
        let p = format!("prompt_gen/layers/{l}");
        nn::init_layer_norm(set, &format!("{p}/ln_self"), d);
        nn::init_attention(set, &format!("{p}/self"), d, rng);
        nn::init_layer_norm(set, &format!("{p}/ln_cross"), d);
        nn::init_layer_norm(set, &format!("{p}/ln_kv"), d);
        nn::init_attention(set, &format!("{p}/cross"), d, rng);
        nn::init_layer_norm(set, &format!("{p}/ln_ffn"), d);
        nn::init_ffn(set, &format!("{p}/ffn"), d, ff, rng);
    }
    let mut fan_in = d;
    for j in 0..cfg.mlp_layers {
        let out = if j + 1 == cfg.mlp_layers { d } else { cfg.mlp_hidden };
        nn::init_linear(set, &format!("prompt_gen/mlp/{j}/w"), fan_in, out, rng);
        set.insert(format!("prompt_gen/mlp/{j}/b"), Mat::zeros(1, out));
        fan_in = out;
    }
}

pub(crate) fn init_inversion<T: Real, R: Rng + ?Sized>(set: &mut ParamSet<T>, cfg: &ModelConfig, rng: &mut R) {
    nn::init_linear(set, "inversion/l1/w", cfg.d_embed, cfg.inv_hidden, rng);
    set.insert("inversion/l1/b", Mat::zeros(1, cfg.inv_hidden));
    nn::init_linear(set, "inversion/l2/w", cfg.inv_hidden, cfg.d_model, rng);
    set.insert("inversion/l2/b", Mat::zeros(1, cfg.d_model));
}

/// Generator forward. `b` must bind `prompt_gen/` and `text/tok_emb`.
pub(crate) fn prompt_graph<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    patch_states: Var,
    caption: &TokenSequence,
    mode: PromptMode,
) -> Result<Var> {
    let lp = cfg.prompt_length;
    let mut q = b.get("prompt_gen/query_tokens")?;
    if g.value(q).rows() != lp {
        return Err(Error::Shape(format!(
            "prompt generator has {} query tokens but the prompt length is {lp}",
            g.value(q).rows()
        )));
    }
    if caption.len() > cfg.max_caption_len {
        return Err(Error::Length { len: caption.len(), max: cfg.max_caption_len });
    }
    let tok = g.gather(b.get("text/tok_emb")?, caption.ids());
    let pos = g.slice_rows(b.get("prompt_gen/caption_pos")?, 0, caption.len());
    let mut cap = g.add(tok, pos);

    for l in 0..cfg.gen_layers {
        let p = format!("prompt_gen/layers/{l}");
        if mode == PromptMode::RiOnly {
            let n = nn::layer_norm(g, b, &format!("{p}/ln_self"), q)?;
            let a = nn::attention(g, b, &format!("{p}/self"), n, n, cfg.n_heads)?;
            q = g.add(q, a);
        } else {
            let h = g.concat_rows(&[q, cap]);
            let n = nn::layer_norm(g, b, &format!("{p}/ln_self"), h)?;
            let a = nn::attention(g, b, &format!("{p}/self"), n, n, cfg.n_heads)?;
            let h = g.add(h, a);
            q = g.slice_rows(h, 0, lp);
            cap = g.slice_rows(h, lp, caption.len());
        }
        if mode != PromptMode::RcOnly {
            let n = nn::layer_norm(g, b, &format!("{p}/ln_cross"), q)?;
            let kv = nn::layer_norm(g, b, &format!("{p}/ln_kv"), patch_states)?;
            let a = nn::attention(g, b, &format!("{p}/cross"), n, kv, cfg.n_heads)?;
            q = g.add(q, a);
        }
        let n = nn::layer_norm(g, b, &format!("{p}/ln_ffn"), q)?;
        let f = nn::ffn(g, b, &format!("{p}/ffn"), n)?;
        q = g.add(q, f);
    }

    let mut out = q;
    for j in 0..cfg.mlp_layers {
        out = nn::linear(g, b, &format!("prompt_gen/mlp/{j}"), out, true)?;
        if j + 1 < cfg.mlp_layers {
            out = g.gelu(out);
        }
    }
    Ok(out)
}

/// Pseudo-word token from a pooled reference embedding. `b` must bind `inversion/`.
pub(crate) fn inversion_graph<T: Real>(g: &mut Graph<T>, b: &Bound, reference_pooled: Var) -> Result<Var> {
    let h = nn::linear(g, b, "inversion/l1", reference_pooled, true)?;
    let h = g.gelu(h);
    nn::linear(g, b, "inversion/l2", h, true)
}

fn bind_for_prompt<T: Real>(g: &mut Graph<T>, set: &ParamSet<T>) -> Bound {
    let mut b = set.bind(g, encoders::PROMPT_GEN, |_| false);
    b.merge(set.bind(g, "text/tok_emb", |_| false));
    b
}

/// Generates the sentence-level prompt for one query.
pub fn generate_prompt<T: Real>(
    patch_states: &Mat<T>,
    caption: &TokenSequence,
    params: &ModelParams<T>,
    mode: PromptMode,
) -> Result<PromptState<T>> {
    let mut g = Graph::new();
    let b = bind_for_prompt(&mut g, &params.set);
    let ps = g.constant(patch_states.clone());
    let out = prompt_graph(&mut g, &b, &params.config, ps, caption, mode)?;
    PromptState::new(g.value(out).clone())
}

/// Prepends the prompt to the caption.
pub fn compose_query<T: Real>(
    prompt: &PromptState<T>,
    caption: &TokenSequence,
    cfg: &ModelConfig,
) -> Result<AugmentedQuery<T>> {
    let len = prompt.len() + caption.len();
    if len > cfg.max_text_len() {
        return Err(Error::Length { len, max: cfg.max_text_len() });
    }
    Ok(AugmentedQuery { prompt: prompt.clone(), caption: caption.clone() })
}

/// Caption-only text embedding.
pub fn caption_embed<T: Real>(caption: &TokenSequence, params: &ModelParams<T>) -> Result<Mat<T>> {
    let q = AugmentedQuery { prompt: PromptState::empty(params.config.d_model), caption: caption.clone() };
    encoders::encode_text(&q, &params.set, &params.config)
}

/// Below this norm a late-fusion sum counts as degenerate.
const DEGENERATE_SUM: f64 = 1e-9;

/// `normalize(caption_embedding + reference_pooled)`.
///
/// A sum that cancels to (near) zero falls back to the caption embedding and
/// logs a warning.
pub fn late_fusion_embed<T: Real>(
    reference_pooled: &Mat<T>,
    caption: &TokenSequence,
    params: &ModelParams<T>,
) -> Result<Mat<T>> {
    let mut g = Graph::new();
    let b = params.set.bind(&mut g, TEXT, |_| false);
    let r = g.constant(reference_pooled.clone());
    let u = late_fusion_graph(&mut g, &b, &params.config, r, caption)?;
    Ok(g.value(u).clone())
}

pub(crate) fn late_fusion_graph<T: Real>(
    g: &mut Graph<T>,
    text: &Bound,
    cfg: &ModelConfig,
    reference_pooled: Var,
    caption: &TokenSequence,
) -> Result<Var> {
    let t = encoders::text_forward(g, text, cfg, None, caption)?;
    let s = g.add(t, reference_pooled);
    if g.value(s).frobenius() < T::from_f64_lossy(DEGENERATE_SUM) {
        log::warn!("late fusion: caption and reference embeddings cancel; using the caption embedding");
        return Ok(t);
    }
    Ok(g.l2_normalize_rows(s))
}

/// Pseudo-word token for a pooled reference embedding.
pub fn inversion_token<T: Real>(reference_pooled: &Mat<T>, params: &ModelParams<T>) -> Result<PromptState<T>> {
    let mut g = Graph::new();
    let b = params.set.bind(&mut g, encoders::INVERSION, |_| false);
    let r = g.constant(reference_pooled.clone());
    let tok = inversion_graph(&mut g, &b, r)?;
    PromptState::new(g.value(tok).clone())
}

/// Encodes `[MLP(reference_pooled)] ⊕ caption`.
pub fn textual_inversion_embed<T: Real>(
    reference_pooled: &Mat<T>,
    caption: &TokenSequence,
    params: &ModelParams<T>,
) -> Result<Mat<T>> {
    let tok = inversion_token(reference_pooled, params)?;
    let q = compose_query(&tok, caption, &params.config)?;
    encoders::encode_text(&q, &params.set, &params.config)
}

/// Encodes `static_prompt ⊕ caption`; the same prompt for every query.
pub fn fixed_prompt_embed<T: Real>(
    caption: &TokenSequence,
    static_prompt: &PromptState<T>,
    params: &ModelParams<T>,
) -> Result<Mat<T>> {
    let q = compose_query(static_prompt, caption, &params.config)?;
    encoders::encode_text(&q, &params.set, &params.config)
}

/// Inputs for building one query embedding inside a graph.
pub(crate) struct QueryInputs<'a, T> {
    pub patch_states: &'a Mat<T>,
    pub reference_pooled: &'a Mat<T>,
    pub caption: &'a TokenSequence,
}

/// Query embedding `u` under `mechanism`; also returns the generated prompt
/// node for SPRC so the alignment loss can reach it.
pub(crate) fn query_graph<T: Real>(
    g: &mut Graph<T>,
    b: &Bound,
    cfg: &ModelConfig,
    mechanism: Mechanism,
    mode: PromptMode,
    inputs: &QueryInputs<'_, T>,
) -> Result<(Var, Option<Var>)> {
    match mechanism {
        Mechanism::Sprc => {
            let ps = g.constant(inputs.patch_states.clone());
            let p = prompt_graph(g, b, cfg, ps, inputs.caption, mode)?;
            let u = encoders::text_forward(g, b, cfg, Some(p), inputs.caption)?;
            Ok((u, Some(p)))
        }
        Mechanism::LateFusion => {
            let r = g.constant(inputs.reference_pooled.clone());
            Ok((late_fusion_graph(g, b, cfg, r, inputs.caption)?, None))
        }
        Mechanism::TextInversion => {
            let r = g.constant(inputs.reference_pooled.clone());
            let tok = inversion_graph(g, b, r)?;
            Ok((encoders::text_forward(g, b, cfg, Some(tok), inputs.caption)?, None))
        }
        Mechanism::FixedPrompt => {
            let p = b.get(encoders::STATIC_PROMPT)?;
            Ok((encoders::text_forward(g, b, cfg, Some(p), inputs.caption)?, None))
        }
    }
}

/// Binds every tensor a mechanism reads; gradients only where `trainable` says.
pub(crate) fn bind_for_query<T: Real>(
    g: &mut Graph<T>,
    set: &ParamSet<T>,
    mechanism: Mechanism,
    trainable: &dyn Fn(&str) -> bool,
) -> Bound {
    let mut b = set.bind(g, TEXT, trainable);
    match mechanism {
        Mechanism::Sprc => b.merge(set.bind(g, encoders::PROMPT_GEN, trainable)),
        Mechanism::LateFusion => {}
        Mechanism::TextInversion => b.merge(set.bind(g, encoders::INVERSION, trainable)),
        Mechanism::FixedPrompt => b.merge(set.bind(g, encoders::STATIC_PROMPT, trainable)),
    }
    b
}

/// Query embedding for evaluation (no gradients).
pub fn query_embed<T: Real>(
    params: &ModelParams<T>,
    mechanism: Mechanism,
    mode: PromptMode,
    patch_states: &Mat<T>,
    reference_pooled: &Mat<T>,
    caption: &TokenSequence,
) -> Result<Mat<T>> {
    let mut g = Graph::new();
    let b = bind_for_query(&mut g, &params.set, mechanism, &|_| false);
    let inputs = QueryInputs { patch_states, reference_pooled, caption };
    let (u, _) = query_graph(&mut g, &b, &params.config, mechanism, mode, &inputs)?;
    Ok(g.value(u).clone())
}
