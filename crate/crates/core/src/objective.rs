//! Training objective: in-batch contrastive loss, prompt alignment loss, and
//! the inner optimization that produces the auxiliary prompt.

use serde::{Deserialize, Serialize};

use crate::autodiff::{row_nll, Graph, Var};
use crate::dataset::TokenSequence;
use crate::encoders::{self, ModelConfig, TEXT};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::prompting::PromptState;
use crate::tensor::{Mat, Real};

/// Query-side rows `u`, target-side rows `v` and the logit scale `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings<T> {
    pub u: Mat<T>,
    pub v: Mat<T>,
    pub tau: T,
}

impl<T: Real> BatchEmbeddings<T> {
    pub fn new(u: Mat<T>, v: Mat<T>, tau: T) -> Result<Self> {
        if u.rows() == 0 {
            return Err(Error::Domain("contrastive loss needs a batch of at least one".into()));
        }
        if u.shape() != v.shape() {
            return Err(Error::Shape(format!("U is {:?} but V is {:?}", u.shape(), v.shape())));
        }
        if !(tau > T::zero() && tau.is_finite()) {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { u, v, tau })
    }

    pub fn batch_size(&self) -> usize {
        self.u.rows()
    }
}

/// Mean over `i` of `-log softmax_j(tau · u_i·v_j)[i]`.
pub fn contrastive_loss<T: Real>(batch: &BatchEmbeddings<T>) -> Result<T> {
    let logits = batch.u.matmul_bt(&batch.v).scale(batch.tau);
    if !logits.is_finite() {
        return Err(Error::Numeric("similarity logits are not finite".into()));
    }
    let b = batch.batch_size();
    let total: T = (0..b).map(|i| row_nll(logits.row(i), i)).sum();
    Ok(total / T::from_f64_lossy(b as f64))
}

/// Graph form of [`contrastive_loss`]; `tau` is a `1 × 1` node.
pub(crate) fn contrastive_graph<T: Real>(g: &mut Graph<T>, u: Var, v: Var, tau: Var) -> Var {
    let sims = g.matmul_bt(u, v);
    let logits = g.scale_by(sims, tau);
    let targets: Vec<usize> = (0..g.value(u).rows()).collect();
    g.softmax_xent(logits, &targets)
}

/// Norm used by the alignment loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignNorm {
    /// Square root of the sum of squared entry differences.
    #[default]
    Frobenius,
    /// Mean over prompt tokens of each token's L2 distance.
    PerTokenMean,
}

/// `‖p − p_aux‖` under `norm`.
pub fn alignment_loss<T: Real>(p: &PromptState<T>, p_aux: &PromptState<T>, norm: AlignNorm) -> Result<T> {
    if p.tokens().shape() != p_aux.tokens().shape() {
        return Err(Error::Shape(format!(
            "prompt {:?} vs auxiliary prompt {:?}",
            p.tokens().shape(),
            p_aux.tokens().shape()
        )));
    }
    let d = p.tokens().sub(p_aux.tokens());
    Ok(match norm {
        AlignNorm::Frobenius => d.frobenius(),
        AlignNorm::PerTokenMean => {
            if d.rows() == 0 {
                return Ok(T::zero());
            }
            let s: T = (0..d.rows()).map(|r| d.row(r).iter().map(|&x| x * x).sum::<T>().sqrt()).sum();
            s / T::from_f64_lossy(d.rows() as f64)
        }
    })
}

/// Alignment loss; `p_aux` should be a constant node so no gradient reaches it.
pub(crate) fn alignment_graph<T: Real>(g: &mut Graph<T>, p: Var, p_aux: Var, norm: AlignNorm) -> Var {
    let d = g.sub(p, p_aux);
    match norm {
        AlignNorm::Frobenius => g.frobenius(d),
        AlignNorm::PerTokenMean => {
            let rows = g.value(d).rows();
            let norms: Vec<Var> = (0..rows)
                .map(|r| {
                    let row = g.slice_rows(d, r, 1);
                    g.frobenius(row)
                })
                .collect();
            let all = g.concat_rows(&norms);
            let s = g.sum(all);
            g.scale(s, T::one() / T::from_f64_lossy(rows.max(1) as f64))
        }
    }
}

/// `Lc + γ·La`.
pub fn total_loss<T: Real>(lc: T, la: T, gamma: T) -> T {
    lc + gamma * la
}

/// Where the inner optimization starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AuxInit {
    /// Detached copy of the generator's prompt.
    #[default]
    FromCurrentPrompt,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxiliaryConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub init_mode: AuxInit,
    pub backtracking: bool,
}

impl Default for AuxiliaryConfig {
    fn default() -> Self {
        Self { inner_steps: 5, inner_lr: 0.1, init_mode: AuxInit::FromCurrentPrompt, backtracking: true }
    }
}

impl AuxiliaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_lr > 0.0 && self.inner_lr <= 1.0) {
            return Err(Error::Config(format!("inner_lr must lie in (0, 1], got {}", self.inner_lr)));
        }
        Ok(())
    }
}

/// Maximum step halvings per inner step when backtracking.
pub const MAX_HALVINGS: usize = 10;

/// Everything the inner objective needs besides the prompt being optimized.
pub struct AuxProblem<'a, T> {
    pub caption: &'a TokenSequence,
    /// Detached target embeddings of the whole batch, `[B × d_embed]`.
    pub targets: &'a Mat<T>,
    /// Row of `targets` that is this query's positive.
    pub index: usize,
    /// EMA shadow of the text encoder.
    pub ema: &'a ParamSet<T>,
    pub config: &'a ModelConfig,
    pub tau: T,
}

impl<T: Real> AuxProblem<'_, T> {
    fn check(&self, prompt: &PromptState<T>) -> Result<()> {
        if self.index >= self.targets.rows() {
            return Err(Error::Domain(format!("row {} outside a batch of {}", self.index, self.targets.rows())));
        }
        if prompt.tokens().cols() != self.config.d_model {
            return Err(Error::Shape(format!(
                "prompt width {} does not match d_model {}",
                prompt.tokens().cols(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    /// `-log softmax_j(tau · v_j·u')[index]` with `u' = f_EMA(p' ⊕ caption)`,
    /// and its gradient with respect to `p'` when requested.
    pub fn evaluate(&self, prompt: &Mat<T>, with_grad: bool) -> Result<(T, Option<Mat<T>>)> {
        let mut g = Graph::new();
        let b = self.ema.bind(&mut g, TEXT, |_| false);
        let p = g.leaf(prompt.clone(), with_grad);
        let u = encoders::text_forward(&mut g, &b, self.config, Some(p), self.caption)?;
        let v = g.constant(self.targets.clone());
        let sims = g.matmul_bt(u, v);
        let logits = g.scale(sims, self.tau);
        let loss = g.softmax_xent(logits, &[self.index]);
        let value = g.scalar(loss);
        if !with_grad {
            return Ok((value, None));
        }
        let mut grads = g.backward(loss);
        let grad = grads.take(p).unwrap_or_else(|| Mat::zeros(prompt.rows(), prompt.cols()));
        Ok((value, Some(grad)))
    }

    pub fn objective(&self, prompt: &PromptState<T>) -> Result<T> {
        self.check(prompt)?;
        Ok(self.evaluate(prompt.tokens(), false)?.0)
    }
}

/// Result of the inner loop.
#[derive(Clone, Debug)]
pub struct AuxSolution<T> {
    pub prompt: PromptState<T>,
    /// Objective before the first step and after each accepted step.
    pub trace: Vec<T>,
}

/// Gradient descent on the prompt alone, all encoder weights held fixed.
///
/// With backtracking the step is halved (at most [`MAX_HALVINGS`] times) until
/// the objective does not increase; a step that still increases it is
/// rejected and the loop stops.
pub fn solve_auxiliary_prompt<T: Real>(
    p_init: &PromptState<T>,
    problem: &AuxProblem<'_, T>,
    cfg: &AuxiliaryConfig,
) -> Result<AuxSolution<T>> {
    cfg.validate()?;
    problem.check(p_init)?;
    if cfg.inner_steps == 0 || problem.targets.rows() == 1 {
        return Ok(AuxSolution { prompt: p_init.clone(), trace: Vec::new() });
    }
    let mut p = p_init.tokens().clone();
    let mut trace = Vec::with_capacity(cfg.inner_steps + 1);
    let lr = T::from_f64_lossy(cfg.inner_lr);
    for step in 0..cfg.inner_steps {
        let (obj, grad) = problem.evaluate(&p, true)?;
        if !obj.is_finite() {
            return Err(Error::Numeric(format!("auxiliary objective is {obj} at inner step {step}")));
        }
        let grad = grad.expect("gradient requested");
        if step == 0 || !cfg.backtracking {
            trace.push(obj);
        }
        if grad.max_abs() == T::zero() {
            break;
        }
        let mut eta = lr;
        let mut candidate = p.clone();
        candidate.axpy(-eta, &grad);
        if cfg.backtracking {
            let mut halvings = 0;
            let mut cand_obj = problem.evaluate(&candidate, false)?.0;
            while !(cand_obj <= obj) && halvings < MAX_HALVINGS {
                eta *= T::from_f64_lossy(0.5);
                candidate = p.clone();
                candidate.axpy(-eta, &grad);
                cand_obj = problem.evaluate(&candidate, false)?.0;
                halvings += 1;
            }
            if !(cand_obj <= obj) {
                break;
            }
            p = candidate;
            trace.push(cand_obj);
        } else {
            p = candidate;
            if !p.is_finite() {
                return Err(Error::Numeric(format!("auxiliary prompt diverged at inner step {step}")));
            }
        }
    }
    if !cfg.backtracking {
        let (obj, _) = problem.evaluate(&p, false)?;
        if !obj.is_finite() {
            return Err(Error::Numeric(format!("auxiliary objective is {obj} after {} inner steps", cfg.inner_steps)));
        }
        trace.push(obj);
    }
    Ok(AuxSolution { prompt: PromptState::new(p)?, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(rows: &[Vec<f64>]) -> Mat<f64> {
        Mat::from_rows(rows).unwrap()
    }

    #[test]
    fn single_row_batch_has_zero_loss() {
        let b = BatchEmbeddings::new(e(&[vec![0.6, 0.8]]), e(&[vec![1.0, 0.0]]), 100.0).unwrap();
        assert_eq!(contrastive_loss(&b).unwrap(), 0.0);
    }

    #[test]
    fn orthonormal_pair_closed_form() {
        let id = e(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = BatchEmbeddings::new(id.clone(), id, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((contrastive_loss(&b).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_domain_error() {
        let err = BatchEmbeddings::<f64>::new(Mat::zeros(0, 2), Mat::zeros(0, 2), 1.0).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn alignment_values() {
        let p = PromptState::new(Mat::<f64>::zeros(2, 3)).unwrap();
        assert_eq!(alignment_loss(&p, &p, AlignNorm::Frobenius).unwrap(), 0.0);
        let mut m = Mat::zeros(2, 3);
        m.set(1, 2, 3.0);
        let q = PromptState::new(m).unwrap();
        assert_eq!(alignment_loss(&p, &q, AlignNorm::Frobenius).unwrap(), 3.0);
        assert_eq!(alignment_loss(&p, &q, AlignNorm::PerTokenMean).unwrap(), 1.5);
        let bad = PromptState::new(Mat::zeros(3, 3)).unwrap();
        assert!(matches!(alignment_loss(&p, &bad, AlignNorm::Frobenius), Err(Error::Shape(_))));
    }

    #[test]
    fn alignment_graph_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p0: Mat<f64> = Mat::randn(3, 4, 1.0, &mut rng);
        let aux: Mat<f64> = Mat::randn(3, 4, 1.0, &mut rng);
        for norm in [AlignNorm::Frobenius, AlignNorm::PerTokenMean] {
            let loss = |p: &Mat<f64>| {
                let mut g = Graph::new();
                let pv = g.param(p.clone());
                let av = g.constant(aux.clone());
                let l = alignment_graph(&mut g, pv, av, norm);
                let grad = g.backward(l).get(pv).cloned().unwrap();
                (g.scalar(l), grad)
            };
            let (value, grad) = loss(&p0);
            let direct = alignment_loss(
                &PromptState::new(p0.clone()).unwrap(),
                &PromptState::new(aux.clone()).unwrap(),
                norm,
            )
            .unwrap();
            assert!((value - direct).abs() < 1e-12);
            for i in 0..p0.len() {
                let mut hi = p0.clone();
                hi.data_mut()[i] += 1e-6;
                let mut lo = p0.clone();
                lo.data_mut()[i] -= 1e-6;
                let fd = (loss(&hi).0 - loss(&lo).0) / 2e-6;
                assert!((fd - grad.data()[i]).abs() < 1e-7, "{norm:?} entry {i}: {fd} vs {}", grad.data()[i]);
            }
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(1.0, 0.5, 0.0), 1.0);
        assert!((total_loss(1.0f64, 0.5, 0.8) - 1.4).abs() < 1e-15);
        assert_eq!(total_loss(1.0, 0.0, 2.0), 1.0);
    }

    #[test]
    fn aux_config_rejects_large_lr() {
        let cfg = AuxiliaryConfig { inner_lr: 1.5, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
