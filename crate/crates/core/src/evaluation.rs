//! Ranking, Recall@K, Fashion-IQ style averages, two-stage re-ranking and
//! hyperparameter sweeps.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{generate_synthetic, Corpus, Dataset, EditKind, SyntheticSpec, Triplet, Vocabulary};
use crate::encoders::{encode_image, ImageBank, ImageHead, ModelParams};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::prompting::{query_embed, Mechanism, PromptMode};
use crate::tensor::{Mat, Real};
use crate::training::{self, AdamState, AdamW, StepRecord, TrainConfig, TrainContext, TrainState};

/// Cut-offs reported for the full corpus.
pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 50];
/// Cut-offs reported within per-query subsets.
pub const DEFAULT_SUBSET_KS: [usize; 3] = [1, 2, 3];
/// Environment variable bounding sweep parallelism.
pub const WORKERS_ENV: &str = "SPRC_NUM_WORKERS";

/// Target-side embeddings of every corpus image, in corpus order, unit-norm rows.
pub fn embed_corpus<T: Real>(corpus: &Corpus, params: &ModelParams<T>) -> Result<(Vec<String>, Mat<T>)> {
    let bank = ImageBank::build(corpus, params)?;
    let embs = bank.target_embeddings(params)?;
    Ok((bank.ids, embs))
}

/// Ordering of the candidate pool for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    /// Candidates best first.
    pub ranked_ids: Vec<String>,
    /// 1-based rank of the target in `ranked_ids`.
    pub target_rank: usize,
    /// 1-based rank of the target among the query's subset, when it has one.
    pub subset_rank: Option<usize>,
}

/// Ranks candidates by descending score; ties go to the lower corpus index.
/// The reference is dropped from the pool when `exclude_reference` is set.
pub fn rank_scores<T: Real>(
    triplet: &Triplet,
    ids: &[String],
    scores: &[T],
    exclude_reference: bool,
) -> Result<RankedResult> {
    if ids.len() != scores.len() {
        return Err(Error::Shape(format!("{} candidate ids but {} scores", ids.len(), scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Numeric(format!("query {}: score for {} is {}", triplet.query_id, ids[i], scores[i])));
    }
    let mut order: Vec<usize> =
        (0..ids.len()).filter(|&i| !(exclude_reference && ids[i] == triplet.reference_id)).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let ranked_ids: Vec<String> = order.iter().map(|&i| ids[i].clone()).collect();
    finish_result(triplet, ranked_ids)
}

fn finish_result(triplet: &Triplet, ranked_ids: Vec<String>) -> Result<RankedResult> {
    let target_rank = ranked_ids.iter().position(|id| *id == triplet.target_id).ok_or_else(|| {
        Error::Referential(format!("query {}: target {} is not a candidate", triplet.query_id, triplet.target_id))
    })? + 1;
    let subset_rank = match &triplet.subset_ids {
        None => None,
        Some(subset) => {
            if !subset.contains(&triplet.target_id) {
                return Err(Error::Referential(format!(
                    "query {}: target {} is missing from its subset",
                    triplet.query_id, triplet.target_id
                )));
            }
            let members: HashSet<&str> = subset.iter().map(String::as_str).collect();
            let pos = ranked_ids
                .iter()
                .filter(|id| members.contains(id.as_str()))
                .position(|id| *id == triplet.target_id)
                .expect("target is both ranked and in the subset");
            Some(pos + 1)
        }
    };
    Ok(RankedResult { query_id: triplet.query_id.clone(), ranked_ids, target_rank, subset_rank })
}

/// Ranks one query against precomputed corpus embeddings. Encodes the
/// reference image on the fly; use [`Retriever`] for many queries.
pub fn rank_query<T: Real>(
    triplet: &Triplet,
    corpus: &Corpus,
    corpus_embs: &Mat<T>,
    params: &ModelParams<T>,
    mechanism: Mechanism,
    mode: PromptMode,
) -> Result<RankedResult> {
    let features = corpus
        .get(&triplet.reference_id)
        .ok_or_else(|| Error::Referential(format!("query {}: unknown reference {}", triplet.query_id, triplet.reference_id)))?;
    if corpus.position(&triplet.target_id).is_none() {
        return Err(Error::Referential(format!("query {}: unknown target {}", triplet.query_id, triplet.target_id)));
    }
    let (states, pooled) = encode_image(features, params, ImageHead::Reference)?;
    let u = query_embed(params, mechanism, mode, &states, &pooled, &triplet.caption)?;
    let scores = u.matmul_bt(corpus_embs);
    rank_scores(triplet, corpus.ids(), scores.data(), true)
}

/// Precomputed image side of a trained model, ready to rank many queries.
pub struct Retriever<'a, T> {
    pub params: &'a ModelParams<T>,
    pub corpus: &'a Corpus,
    pub bank: ImageBank<T>,
    pub corpus_embs: Mat<T>,
    pub mechanism: Mechanism,
    pub mode: PromptMode,
    pub exclude_reference: bool,
}

impl<'a, T: Real> Retriever<'a, T> {
    pub fn new(corpus: &'a Corpus, params: &'a ModelParams<T>, mechanism: Mechanism, mode: PromptMode) -> Result<Self> {
        let bank = ImageBank::build(corpus, params)?;
        let corpus_embs = bank.target_embeddings(params)?;
        Ok(Self { params, corpus, bank, corpus_embs, mechanism, mode, exclude_reference: true })
    }

    fn index(&self, triplet: &Triplet, id: &str) -> Result<usize> {
        self.corpus
            .position(id)
            .ok_or_else(|| Error::Referential(format!("query {}: image {id} is not in the corpus", triplet.query_id)))
    }

    pub fn query_embedding(&self, triplet: &Triplet) -> Result<Mat<T>> {
        let r = self.index(triplet, &triplet.reference_id)?;
        let pooled = self.bank.reference.slice_rows(r, 1);
        query_embed(self.params, self.mechanism, self.mode, &self.bank.states[r], &pooled, &triplet.caption)
    }

    pub fn rank_query(&self, triplet: &Triplet) -> Result<RankedResult> {
        self.index(triplet, &triplet.target_id)?;
        let u = self.query_embedding(triplet)?;
        let scores = u.matmul_bt(&self.corpus_embs);
        rank_scores(triplet, &self.bank.ids, scores.data(), self.exclude_reference)
    }

    pub fn rank_all(&self, triplets: &[Triplet]) -> Result<Vec<RankedResult>> {
        triplets.iter().map(|t| self.rank_query(t)).collect()
    }
}

/// Recall per cut-off, over the full pool and within subsets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecallTable {
    pub recall_at: BTreeMap<usize, f64>,
    pub subset_recall_at: BTreeMap<usize, f64>,
    /// Per-class tables (for example one per edit kind).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<BTreeMap<String, RecallTable>>,
}

impl RecallTable {
    pub fn r(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// `R@{K}` columns followed by `Rs@{K}` columns.
    pub fn columns(&self) -> Vec<(String, f64)> {
        let full = self.recall_at.iter().map(|(k, v)| (format!("R@{k}"), *v));
        let sub = self.subset_recall_at.iter().map(|(k, v)| (format!("Rs@{k}"), *v));
        full.chain(sub).collect()
    }
}

impl RecallTable {
    /// One `all` row followed by one row per group.
    pub fn to_csv(&self) -> Result<String> {
        let names: Vec<String> = self.columns().into_iter().map(|(k, _)| k).collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut rows = vec![("all".to_string(), self)];
        if let Some(g) = &self.groups {
            rows.extend(g.iter().map(|(k, t)| (k.clone(), t)));
        }
        for (label, t) in rows {
            let vals: BTreeMap<String, f64> = t.columns().into_iter().collect();
            let mut rec = vec![label];
            rec.extend(names.iter().map(|n| vals.get(n).map_or(String::new(), |v| format!("{:.2}", 100.0 * v))));
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Recall over `results` with the same cut-offs for the full pool and subsets.
pub fn compute_recall(results: &[RankedResult], ks: &[usize]) -> Result<RecallTable> {
    compute_recall_split(results, ks, ks)
}

/// Recall with separate cut-offs for subsets. Subset recall is averaged over
/// the queries that carry a subset and left empty when none do.
pub fn compute_recall_split(results: &[RankedResult], ks: &[usize], subset_ks: &[usize]) -> Result<RecallTable> {
    if results.is_empty() {
        return Err(Error::Domain("recall over an empty result list".into()));
    }
    if ks.iter().chain(subset_ks).any(|&k| k == 0) {
        return Err(Error::Domain("recall cut-offs must be positive".into()));
    }
    let n = results.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, results.iter().filter(|r| r.target_rank <= k).count() as f64 / n))
        .collect();
    let subset_ranks: Vec<usize> = results.iter().filter_map(|r| r.subset_rank).collect();
    let subset_recall_at = if subset_ranks.is_empty() {
        BTreeMap::new()
    } else {
        let m = subset_ranks.len() as f64;
        subset_ks.iter().map(|&k| (k, subset_ranks.iter().filter(|&&r| r <= k).count() as f64 / m)).collect()
    };
    Ok(RecallTable { recall_at, subset_recall_at, groups: None })
}

/// Overall table plus one table per group label.
pub fn grouped_recall(
    results: &[RankedResult],
    labels: &[String],
    ks: &[usize],
    subset_ks: &[usize],
) -> Result<RecallTable> {
    if labels.len() != results.len() {
        return Err(Error::Shape(format!("{} labels for {} results", labels.len(), results.len())));
    }
    let mut table = compute_recall_split(results, ks, subset_ks)?;
    let mut by_label: BTreeMap<String, Vec<RankedResult>> = BTreeMap::new();
    for (r, l) in results.iter().zip(labels) {
        by_label.entry(l.clone()).or_default().push(r.clone());
    }
    let mut groups = BTreeMap::new();
    for (label, rs) in by_label {
        groups.insert(label, compute_recall_split(&rs, ks, subset_ks)?);
    }
    table.groups = Some(groups);
    Ok(table)
}

/// Edit-kind label of each synthetic triplet (`"other"` for free-form captions).
pub fn edit_kind_labels(triplets: &[Triplet], vocab: &Vocabulary) -> Vec<String> {
    triplets
        .iter()
        .map(|t| EditKind::of_caption(&t.caption, vocab).map_or("other".to_string(), |k| k.token().to_string()))
        .collect()
}

/// Class-averaged R@10 and R@50 and their mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FashionIqSummary {
    pub r10: f64,
    pub r50: f64,
    /// Mean of `r10` and `r50`, which equals the mean of all 2·C class cells.
    pub avg: f64,
}

/// Unweighted mean over classes of R@10 and R@50, plus the grand mean.
pub fn fashioniq_average(per_class: &BTreeMap<String, RecallTable>) -> Result<FashionIqSummary> {
    if per_class.is_empty() {
        return Err(Error::Domain("no classes to average".into()));
    }
    let mut sums = [0.0; 2];
    for (class, table) in per_class {
        for (slot, k) in [10, 50].into_iter().enumerate() {
            sums[slot] += table
                .r(k)
                .ok_or_else(|| Error::Shape(format!("class {class} has no R@{k}")))?;
        }
    }
    let n = per_class.len() as f64;
    let (r10, r50) = (sums[0] / n, sums[1] / n);
    Ok(FashionIqSummary { r10, r50, avg: (r10 + r50) / 2.0 })
}

/// Second-stage scorer for the re-ranking pass. Higher is better.
pub trait JointScorer {
    fn score(&self, triplet: &Triplet, candidates: &[String]) -> Result<Vec<f64>>;
}

/// Keeps the first-stage order.
pub struct IdentityScorer;

impl JointScorer for IdentityScorer {
    fn score(&self, _triplet: &Triplet, candidates: &[String]) -> Result<Vec<f64>> {
        Ok((0..candidates.len()).map(|i| -(i as f64)).collect())
    }
}

/// Scores 1 for the true target and 0 elsewhere. Only meaningful in tests.
pub struct OracleScorer;

impl JointScorer for OracleScorer {
    fn score(&self, triplet: &Triplet, candidates: &[String]) -> Result<Vec<f64>> {
        Ok(candidates.iter().map(|c| if *c == triplet.target_id { 1.0 } else { 0.0 }).collect())
    }
}

/// Re-ranked results and the queries whose scorer call failed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RerankOutcome {
    pub results: Vec<RankedResult>,
    /// `(query_id, error)` for queries left in first-stage order.
    pub failures: Vec<(String, String)>,
}

/// Re-scores each query's top `top_m` candidates and re-sorts that prefix
/// (stable, so equal scores keep first-stage order). The tail is untouched.
/// A failing scorer call leaves that query as it was and is reported.
pub fn rerank_two_stage(
    results: &[RankedResult],
    triplets: &[Triplet],
    top_m: usize,
    scorer: &dyn JointScorer,
) -> Result<RerankOutcome> {
    if top_m == 0 {
        return Err(Error::Domain("top_m must be at least 1".into()));
    }
    let by_id: HashMap<&str, &Triplet> = triplets.iter().map(|t| (t.query_id.as_str(), t)).collect();
    let mut out = RerankOutcome::default();
    for r in results {
        let t = by_id
            .get(r.query_id.as_str())
            .ok_or_else(|| Error::Referential(format!("no triplet for query {}", r.query_id)))?;
        let m = top_m.min(r.ranked_ids.len());
        let prefix = &r.ranked_ids[..m];
        let scores = scorer.score(t, prefix).and_then(|s| {
            if s.len() != m {
                Err(Error::Shape(format!("scorer returned {} scores for {m} candidates", s.len())))
            } else if s.iter().any(|x| !x.is_finite()) {
                Err(Error::Numeric("scorer returned a non-finite score".into()))
            } else {
                Ok(s)
            }
        });
        match scores {
            Ok(scores) => {
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
                let mut ranked: Vec<String> = order.iter().map(|&i| prefix[i].clone()).collect();
                ranked.extend_from_slice(&r.ranked_ids[m..]);
                out.results.push(finish_result(t, ranked)?);
            }
            Err(e) => {
                log::warn!("re-ranking skipped for query {}: {e}", r.query_id);
                out.failures.push((r.query_id.clone(), e.to_string()));
                out.results.push(r.clone());
            }
        }
    }
    Ok(out)
}

/// Trainable joint scorer: the query embedding attends over a candidate's
/// patch states and is compared with the attended summary.
pub struct CrossAttentionScorer<'r, 'a, T> {
    retriever: &'r Retriever<'a, T>,
    pub params: ParamSet<T>,
}

/// Optimisation settings for [`CrossAttentionScorer::train`].
#[derive(Clone, Copy, Debug)]
pub struct ScorerTraining {
    pub top_m: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ScorerTraining {
    fn default() -> Self {
        Self { top_m: 10, epochs: 5, lr: 1e-3, seed: 0 }
    }
}

impl<'r, 'a, T: Real> CrossAttentionScorer<'r, 'a, T> {
    pub fn new(retriever: &'r Retriever<'a, T>, seed: u64) -> Self {
        let cfg = &retriever.params.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let std_e = 1.0 / (cfg.d_embed as f64).sqrt();
        let std_m = 1.0 / (cfg.d_model as f64).sqrt();
        params.insert("rerank/wq", Mat::randn(cfg.d_embed, cfg.d_model, std_e, &mut rng));
        params.insert("rerank/wk", Mat::randn(cfg.d_model, cfg.d_model, std_m, &mut rng));
        params.insert("rerank/wv", Mat::randn(cfg.d_model, cfg.d_embed, std_m, &mut rng));
        Self { retriever, params }
    }

    /// Builds the score vector for `candidates` (corpus indices) inside `g`.
    fn score_graph(&self, g: &mut Graph<T>, b: &crate::params::Bound, u: &Mat<T>, candidates: &[usize]) -> Result<crate::autodiff::Var> {
        let d = self.retriever.params.config.d_model;
        let u_var = g.constant(u.clone());
        let q = g.matmul(u_var, b.get("rerank/wq")?);
        let wk = b.get("rerank/wk")?;
        let wv = b.get("rerank/wv")?;
        let tau = T::from_f64_lossy(self.retriever.params.config.tau);
        let mut scores = Vec::with_capacity(candidates.len());
        for &c in candidates {
            let states = g.constant(self.retriever.bank.states[c].clone());
            let k = g.matmul(states, wk);
            let att = g.matmul_bt(q, k);
            let att = g.scale(att, T::one() / T::from_f64_lossy(d as f64).sqrt());
            let att = g.softmax_rows(att);
            let v = g.matmul(states, wv);
            let summary = g.matmul(att, v);
            let summary = g.l2_normalize_rows(summary);
            let s = g.matmul_bt(u_var, summary);
            scores.push(g.scale(s, tau));
        }
        Ok(g.concat_cols(&scores))
    }

    fn candidate_indices(&self, triplet: &Triplet, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter().map(|id| self.retriever.index(triplet, id)).collect()
    }

    /// Fits the scorer with a softmax over each training query's first-stage
    /// top `top_m` candidates (the target is appended when missed).
    pub fn train(&mut self, triplets: &[Triplet], opts: &ScorerTraining) -> Result<Vec<f64>> {
        let mut adam = AdamState::new(&self.params, |_| true);
        let opt = AdamW { lr: opts.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut prepared = Vec::with_capacity(triplets.len());
        for t in triplets {
            let ranked = self.retriever.rank_query(t)?;
            let mut ids: Vec<String> = ranked.ranked_ids.iter().take(opts.top_m).cloned().collect();
            if !ids.contains(&t.target_id) {
                ids.push(t.target_id.clone());
            }
            let target = ids.iter().position(|i| *i == t.target_id).expect("target included");
            prepared.push((self.retriever.query_embedding(t)?, self.candidate_indices(t, &ids)?, target));
        }
        let mut losses = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            prepared.shuffle(&mut rng);
            let mut total = 0.0;
            for (u, cands, target) in &prepared {
                let mut g = Graph::new();
                let b = self.params.bind(&mut g, "rerank/", |_| true);
                let scores = self.score_graph(&mut g, &b, u, cands)?;
                let loss = g.softmax_xent(scores, &[*target]);
                total += g.scalar(loss).to_f64().unwrap_or(f64::NAN);
                let mut grads_raw = g.backward(loss);
                let mut grads = ParamSet::new();
                for (path, &var) in b.iter() {
                    if let Some(gm) = grads_raw.take(var) {
                        grads.insert(path.clone(), gm);
                    }
                }
                opt.step(&mut self.params, &grads, &mut adam)?;
            }
            losses.push(total / prepared.len().max(1) as f64);
        }
        Ok(losses)
    }
}

impl<T: Real> JointScorer for CrossAttentionScorer<'_, '_, T> {
    fn score(&self, triplet: &Triplet, candidates: &[String]) -> Result<Vec<f64>> {
        let u = self.retriever.query_embedding(triplet)?;
        let idx = self.candidate_indices(triplet, candidates)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, "rerank/", |_| false);
        let s = self.score_graph(&mut g, &b, &u, &idx)?;
        Ok(g.value(s).data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
    }
}

/// Cut-offs and pool options for an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
    pub exclude_reference: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec(), subset_ks: DEFAULT_SUBSET_KS.to_vec(), exclude_reference: true }
    }
}

/// Ranks `triplets` with a trained model and tabulates recall by edit kind.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    dataset: &Dataset,
    triplets: &[Triplet],
    mechanism: Mechanism,
    mode: PromptMode,
    opts: &EvalOptions,
) -> Result<(RecallTable, Vec<RankedResult>)> {
    let mut retriever = Retriever::new(&dataset.corpus, params, mechanism, mode)?;
    retriever.exclude_reference = opts.exclude_reference;
    let results = retriever.rank_all(triplets)?;
    let labels = edit_kind_labels(triplets, &dataset.vocab);
    let table = grouped_recall(&results, &labels, &opts.ks, &opts.subset_ks)?;
    Ok((table, results))
}

/// A trained model together with its evaluation.
pub struct RunOutcome<T> {
    pub state: TrainState<T>,
    pub records: Vec<StepRecord>,
    pub table: RecallTable,
    pub results: Vec<RankedResult>,
    pub n_train: usize,
    pub n_eval: usize,
}

/// Trains from scratch on `dataset` and evaluates on the held-out triplets
/// (or on the training triplets when `holdout_fraction` is 0).
pub fn train_and_evaluate<T: Real>(
    config: &TrainConfig,
    dataset: &Dataset,
    opts: &EvalOptions,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<RunOutcome<T>> {
    let config = config.clone().validated()?;
    let (train, held_out) = training::split_triplets(&dataset.triplets, config.holdout_fraction, config.seed);
    let eval_set = if held_out.is_empty() { train.clone() } else { held_out };
    let model = config.model_config(dataset);
    let mut state = TrainState::<T>::init(config, model)?;
    let ctx = TrainContext::new(dataset, train, &state.params)?;
    let records = training::run(&mut state, &ctx, None, &mut on_step)?;
    let (table, results) =
        evaluate(&state.params, dataset, &eval_set, state.config.mechanism, state.config.prompt_mode, opts)?;
    Ok(RunOutcome { n_train: ctx.train.len(), n_eval: eval_set.len(), state, records, table, results })
}

/// Where a sweep gets its data for a given seed.
pub enum DataSource<'a> {
    /// One dataset for every seed.
    Fixed(&'a Dataset),
    /// Regenerated per seed (the spec's own seed is replaced), optionally
    /// keeping only some edit kinds.
    Synthetic { spec: SyntheticSpec, kinds: Option<Vec<EditKind>> },
}

impl DataSource<'_> {
    pub fn dataset(&self, seed: u64) -> Result<Cow<'_, Dataset>> {
        match self {
            DataSource::Fixed(d) => Ok(Cow::Borrowed(*d)),
            DataSource::Synthetic { spec, kinds } => {
                let spec = SyntheticSpec { seed, ..spec.clone() };
                let task = generate_synthetic(&spec)?;
                let mut ds = Dataset::from_task(&task);
                if let Some(kinds) = kinds {
                    ds.triplets = task.filter_kinds(kinds);
                    ds.meta.n_triplets = ds.triplets.len();
                }
                Ok(Cow::Owned(ds))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    PromptLength,
    Mechanism,
    PromptMode,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gamma" => Ok(SweepAxis::Gamma),
            "prompt_length" => Ok(SweepAxis::PromptLength),
            "mechanism" => Ok(SweepAxis::Mechanism),
            "prompt_mode" => Ok(SweepAxis::PromptMode),
            _ => Err(Error::Config(format!(
                "unknown sweep axis {s:?}; valid values: gamma, prompt_length, mechanism, prompt_mode"
            ))),
        }
    }
}

impl SweepAxis {
    /// Returns `base` with the axis set to `value`.
    pub fn apply(self, base: &TrainConfig, value: &str) -> Result<TrainConfig> {
        let mut c = base.clone();
        let bad = |e: String| Error::Config(format!("bad {self:?} value {value:?}: {e}"));
        match self {
            SweepAxis::Gamma => c.gamma = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            SweepAxis::PromptLength => {
                c.prompt_length = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            SweepAxis::Mechanism => {
                c.mechanism = value.parse()?;
                if c.mechanism != Mechanism::Sprc {
                    c.gamma = 0.0;
                    c.inner_steps = 0;
                }
            }
            SweepAxis::PromptMode => c.prompt_mode = value.parse()?,
        }
        Ok(c)
    }
}

/// One (value, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub seed: u64,
    pub table: Option<RecallTable>,
    pub error: Option<String>,
    /// Training log of the run (not exported in the summary table).
    #[serde(skip)]
    pub records: Vec<StepRecord>,
}

/// All seeds of one value, with the mean over successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub cells: Vec<SweepCell>,
    pub mean: Option<RecallTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn failures(&self) -> usize {
        self.rows.iter().flat_map(|r| &r.cells).filter(|c| c.error.is_some()).count()
    }

    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// Delimiter-separated export: one line per cell plus one `mean` line per value.
    pub fn to_csv(&self) -> Result<String> {
        let columns: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.cells.iter().filter_map(|c| c.table.as_ref()))
            .next()
            .map(|t| t.columns().into_iter().map(|(k, _)| k).collect())
            .unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["value".to_string(), "seed".to_string()];
        header.extend(columns.iter().cloned());
        header.push("error".into());
        w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        let fmt_row = |label: &str, seed: &str, table: Option<&RecallTable>, err: &str| {
            let vals: BTreeMap<String, f64> = table.map(|t| t.columns().into_iter().collect()).unwrap_or_default();
            let mut rec = vec![label.to_string(), seed.to_string()];
            rec.extend(columns.iter().map(|c| vals.get(c).map_or(String::new(), |v| format!("{:.2}", 100.0 * v))));
            rec.push(err.to_string());
            rec
        };
        for row in &self.rows {
            for c in &row.cells {
                let rec = fmt_row(&row.value, &c.seed.to_string(), c.table.as_ref(), c.error.as_deref().unwrap_or(""));
                w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
            }
            let rec = fmt_row(&row.value, "mean", row.mean.as_ref(), "");
            w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Element-wise mean of tables that share cut-offs. Groups are averaged too.
pub fn mean_table(tables: &[&RecallTable]) -> Option<RecallTable> {
    let first = *tables.first()?;
    let n = tables.len() as f64;
    let avg = |pick: &dyn Fn(&RecallTable) -> &BTreeMap<usize, f64>| -> BTreeMap<usize, f64> {
        pick(first)
            .keys()
            .map(|k| (*k, tables.iter().map(|t| pick(t).get(k).copied().unwrap_or(f64::NAN)).sum::<f64>() / n))
            .collect()
    };
    let groups = first.groups.as_ref().map(|g| {
        g.keys()
            .filter_map(|label| {
                let members: Vec<&RecallTable> =
                    tables.iter().filter_map(|t| t.groups.as_ref().and_then(|g| g.get(label))).collect();
                (members.len() == tables.len()).then(|| mean_table(&members).map(|m| (label.clone(), m)))?
            })
            .collect()
    });
    Some(RecallTable { recall_at: avg(&|t| &t.recall_at), subset_recall_at: avg(&|t| &t.subset_recall_at), groups })
}

/// Number of sweep workers from [`WORKERS_ENV`] (default 1).
pub fn sweep_workers() -> usize {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).filter(|&n: &usize| n >= 1).unwrap_or(1)
}

/// Trains and evaluates one run per (value, seed). Failed runs are recorded
/// in their cell and the sweep carries on.
pub fn sweep<T: Real>(
    axis: SweepAxis,
    values: &[String],
    base: &TrainConfig,
    seeds: &[u64],
    data: &DataSource<'_>,
    opts: &EvalOptions,
    workers: usize,
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let configs: Vec<TrainConfig> = values.iter().map(|v| axis.apply(base, v)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..values.len()).flat_map(|vi| seeds.iter().map(move |&s| (vi, s))).collect();
    let done: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let run_job = |j: usize| {
        let (vi, seed) = jobs[j];
        let cfg = TrainConfig { seed, ..configs[vi].clone() };
        let outcome = data.dataset(seed).and_then(|ds| train_and_evaluate::<T>(&cfg, &ds, opts, |_| Ok(())));
        let cell = match outcome {
            Ok(o) => SweepCell { value: values[vi].clone(), seed, table: Some(o.table), error: None, records: o.records },
            Err(e) => {
                log::warn!("sweep cell {}={} seed {seed} failed: {e}", format!("{axis:?}").to_lowercase(), values[vi]);
                SweepCell { value: values[vi].clone(), seed, table: None, error: Some(e.to_string()), records: Vec::new() }
            }
        };
        done.lock().expect("sweep results lock")[j] = Some(cell);
    };
    let workers = workers.clamp(1, jobs.len());
    if workers == 1 {
        (0..jobs.len()).for_each(run_job);
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let j = next.fetch_add(1, Ordering::SeqCst);
                    if j >= jobs.len() {
                        break;
                    }
                    run_job(j);
                });
            }
        });
    }
    let mut cells = done.into_inner().expect("sweep results lock").into_iter().map(|c| c.expect("every job ran"));
    let rows = values
        .iter()
        .map(|v| {
            let cells: Vec<SweepCell> = cells.by_ref().take(seeds.len()).collect();
            let ok: Vec<&RecallTable> = cells.iter().filter_map(|c| c.table.as_ref()).collect();
            SweepRow { value: v.clone(), mean: mean_table(&ok), cells }
        })
        .collect();
    Ok(SweepTable { axis, rows })
}
