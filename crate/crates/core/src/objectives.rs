//! Semi-supervised training objectives.
//!
//! Two families share the encoder, predictor bank and set-softmax step loss:
//!
//! - The plain semi-supervised objective: per labeled sequence, a
//!   classification negative log-likelihood plus the per-step contrastive
//!   losses with the context drawn once by reparameterization; unlabeled
//!   sequences keep only the contrastive part. A batch total adds an
//!   `alpha`-weighted mean classification loss on top (so labeled
//!   classification is effectively weighted `1 + alpha/|L|` per sample —
//!   kept literal rather than "corrected").
//! - The class-conditional variant: the context is generated given the
//!   label, the label becomes a latent for unlabeled data, and both cases
//!   are trained through single-sample variational bounds, with a
//!   Gumbel-Softmax relaxation carrying gradients through the label draw.
//!
//! All losses are returned as minimizable negatives of the bounds. Every
//! expectation uses one reparameterized Monte Carlo sample during training;
//! verification suites average many samples instead.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{CandidateRef, ContrastiveTask, SequenceSample};
use crate::error::{Error, Result};
use crate::model::{
    info_nce_step_loss, pool_features, sample_context_with, Affine, AggregatorParams, CpcConfig,
    ContextDistribution, EncoderParams, EncoderSpec, GruParams, PredictorBank, LOG_VAR_MAX,
    LOG_VAR_MIN,
};
use crate::params::ParamSet;
use crate::rng::RngState;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.8378770664093453;

/// Linear classification head producing log-probabilities.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub head: Affine,
    pub m_classes: usize,
    pub d_z: usize,
}

impl ClassifierParams {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut RngState,
        prefix: &str,
        m_classes: usize,
        d_z: usize,
    ) -> Self {
        // Small init: a fresh classifier is near-uniform.
        let head = Affine::init(ps, rng, prefix, m_classes, d_z, 0.01);
        Self {
            head,
            m_classes,
            d_z,
        }
    }
}

/// `log_softmax(W pooled + b)`.
pub fn classify(tape: &mut Tape, pooled: NodeId, cls: &ClassifierParams) -> Result<NodeId> {
    let logits = cls.head.apply(tape, pooled)?;
    tape.log_softmax(logits)
}

fn label_nll(tape: &mut Tape, log_probs: NodeId, label: usize, m_classes: usize) -> Result<NodeId> {
    if label >= m_classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: m_classes,
        });
    }
    let lp = tape.element(log_probs, label)?;
    Ok(tape.scale(lp, -1.0))
}

/// All sequences of a batch encoded once, shared between tasks so in-batch
/// negatives reuse latents instead of re-encoding.
pub struct EncodedBatch {
    latents: Vec<Vec<NodeId>>,
    index: HashMap<u64, usize>,
}

impl EncodedBatch {
    pub fn encode(
        tape: &mut Tape,
        samples: &[&SequenceSample],
        encoder: &EncoderParams,
    ) -> Result<Self> {
        let mut latents = Vec::with_capacity(samples.len());
        let mut index = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            latents.push(crate::model::encode_sequence(tape, &s.patches, encoder)?);
            index.insert(s.id, i);
        }
        Ok(Self { latents, index })
    }

    pub fn latents_of(&self, sample_id: u64) -> Result<&[NodeId]> {
        self.index
            .get(&sample_id)
            .map(|&i| self.latents[i].as_slice())
            .ok_or(Error::TaskRefNotInBatch { sample_id })
    }
}

fn resolve_candidates(
    batch: &EncodedBatch,
    own_id: u64,
    positive_position: usize,
    candidates: &[CandidateRef],
) -> Result<Vec<NodeId>> {
    candidates
        .iter()
        .map(|c| match c {
            CandidateRef::Positive => {
                let own = batch.latents_of(own_id)?;
                own.get(positive_position).copied().ok_or(Error::IndexOutOfRange {
                    what: "positive position",
                    index: positive_position,
                    len: own.len(),
                })
            }
            CandidateRef::Negative {
                sample_id,
                position,
            } => {
                let lat = batch.latents_of(*sample_id)?;
                lat.get(*position).copied().ok_or(Error::IndexOutOfRange {
                    what: "negative position",
                    index: *position,
                    len: lat.len(),
                })
            }
        })
        .collect()
}

/// Per-sequence loss pieces. `loss` is the minimizable node; the floats are
/// its already-evaluated parts for bookkeeping.
pub struct SampleLoss {
    pub loss: NodeId,
    pub nce_per_step: Vec<f64>,
    pub cls_nll_node: Option<NodeId>,
    pub cls_nll: f64,
    pub gaussian_entropy: f64,
    pub categorical_entropy: f64,
    pub generative_log_density: f64,
    pub prior_log_prob: f64,
}

/// Per-batch record of every objective term.
///
/// The bookkeeping identity, which [`parts_total`](Self::parts_total)
/// recomputes and tests assert to 1e-10, is
///
/// ```text
/// total = sum(nce_per_step) + cls_nll_sum
///       - generative_log_density_sum - prior_log_prob_sum
///       - gaussian_entropy_sum - categorical_entropy_sum
///       + alpha_used * cls_loss
/// ```
///
/// where `cls_loss` is the mean labeled negative log-likelihood and
/// `cls_nll_sum` its per-sample sum inside the labeled losses (zero for the
/// class-conditional variant, whose labeled bound has no label likelihood
/// term).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nce_per_step: Vec<f64>,
    pub cls_loss: f64,
    pub cls_nll_sum: f64,
    pub gaussian_entropy_sum: f64,
    pub categorical_entropy_sum: f64,
    pub generative_log_density_sum: f64,
    pub prior_log_prob_sum: f64,
    pub alpha_used: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts_total(&self) -> f64 {
        self.nce_per_step.iter().sum::<f64>() + self.cls_nll_sum
            - self.generative_log_density_sum
            - self.prior_log_prob_sum
            - self.gaussian_entropy_sum
            - self.categorical_entropy_sum
            + self.alpha_used * self.cls_loss
    }

    /// Mean per-step contrastive loss per sequence.
    pub fn nce_mean(&self) -> f64 {
        let n = (self.n_labeled + self.n_unlabeled) * self.nce_per_step.len().max(1);
        if n == 0 {
            0.0
        } else {
            self.nce_per_step.iter().sum::<f64>() / n as f64
        }
    }

    /// Confirms every term is finite, naming the first offender.
    pub fn check_finite(&self) -> Result<()> {
        let mut terms: Vec<(String, f64)> = Vec::new();
        for (k, v) in self.nce_per_step.iter().enumerate() {
            terms.push((format!("nce_step_{}", k + 1), *v));
        }
        terms.push(("cls_loss".into(), self.cls_loss));
        terms.push(("gaussian_entropy".into(), self.gaussian_entropy_sum));
        terms.push(("categorical_entropy".into(), self.categorical_entropy_sum));
        terms.push((
            "generative_log_density".into(),
            self.generative_log_density_sum,
        ));
        terms.push(("prior_log_prob".into(), self.prior_log_prob_sum));
        terms.push(("total".into(), self.total));
        for (term, value) in terms {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { term, value });
            }
        }
        Ok(())
    }
}

/// A batch objective: the loss node to backpropagate plus its breakdown.
pub struct BatchLoss {
    pub loss: NodeId,
    pub breakdown: LossBreakdown,
}

/// Full model of the plain semi-supervised objective.
#[derive(Clone, Debug)]
pub struct CpcModel {
    pub cfg: CpcConfig,
    pub encoder: EncoderParams,
    pub aggregator: AggregatorParams,
    pub predictors: PredictorBank,
    pub classifier: ClassifierParams,
}

impl CpcModel {
    pub fn init(
        cfg: CpcConfig,
        enc_spec: &EncoderSpec,
        m_classes: usize,
        ps: &mut ParamSet,
        rng: &mut RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        if m_classes < 2 {
            return Err(Error::InvalidConfig {
                what: "classifier",
                detail: format!("need at least 2 classes, got {m_classes}"),
            });
        }
        let encoder = EncoderParams::init(enc_spec, cfg.d_z, ps, rng)?;
        let aggregator = AggregatorParams::init(ps, rng, cfg.d_z, cfg.d_c);
        let predictors = PredictorBank::init(ps, rng, cfg.pred_steps, cfg.d_z, cfg.d_c);
        let classifier = ClassifierParams::init(ps, rng, "cls", m_classes, cfg.d_z);
        Ok(Self {
            cfg,
            encoder,
            aggregator,
            predictors,
            classifier,
        })
    }
}

fn check_task(task: &ContrastiveTask, sample: &SequenceSample, cfg: &CpcConfig) -> Result<()> {
    if sample.len() < cfg.min_seq_len() {
        return Err(Error::SequenceTooShort {
            needed: cfg.min_seq_len(),
            got: sample.len(),
        });
    }
    if task.sample_id != sample.id
        || task.context_len != cfg.context_len
        || task.steps.len() != cfg.pred_steps
    {
        return Err(Error::InvalidConfig {
            what: "contrastive task",
            detail: format!(
                "task (sample {}, t {}, steps {}) does not match sample {} under the active config",
                task.sample_id,
                task.context_len,
                task.steps.len(),
                sample.id
            ),
        });
    }
    Ok(())
}

fn nce_steps(
    tape: &mut Tape,
    batch: &EncodedBatch,
    sample: &SequenceSample,
    task: &ContrastiveTask,
    predictors: &PredictorBank,
    c: NodeId,
) -> Result<(Vec<NodeId>, Vec<f64>)> {
    let mut nodes = Vec::with_capacity(task.steps.len());
    let mut values = Vec::with_capacity(task.steps.len());
    for (k, step) in task.steps.iter().enumerate() {
        let w = tape.param(predictors.steps[k]);
        let cands = resolve_candidates(batch, sample.id, step.positive_position, &step.candidates)?;
        let loss_k = info_nce_step_loss(tape, c, &cands, step.positive_slot, w)?;
        values.push(tape.value(loss_k).item());
        nodes.push(loss_k);
    }
    Ok((nodes, values))
}

fn sum_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let stacked = tape.stack_scalars(nodes)?;
    Ok(tape.sum(stacked))
}

/// Minimizable labeled loss: classification negative log-likelihood on the
/// pooled true-sequence latents plus the per-step contrastive losses, with
/// the context sampled once via the frozen noise `eps` (a single-sample
/// estimate of the log expected likelihood, i.e. a Jensen lower bound).
pub fn labeled_loss_cpc(
    tape: &mut Tape,
    batch: &EncodedBatch,
    sample: &SequenceSample,
    task: &ContrastiveTask,
    model: &CpcModel,
    eps: &Tensor,
) -> Result<SampleLoss> {
    check_task(task, sample, &model.cfg)?;
    let label = sample.label.ok_or(Error::MissingLabel { id: sample.id })?;
    let own = batch.latents_of(sample.id)?.to_vec();
    let t = model.cfg.context_len;
    let dist = model.aggregator.aggregate_context(tape, &own[..t], t)?;
    let c = sample_context_with(tape, &dist, eps)?;
    let (mut nodes, nce_values) = nce_steps(tape, batch, sample, task, &model.predictors, c)?;
    let pooled = pool_features(tape, &own[..model.cfg.min_seq_len()])?;
    let logp = classify(tape, pooled, &model.classifier)?;
    let nll = label_nll(tape, logp, label, model.classifier.m_classes)?;
    let cls_value = tape.value(nll).item();
    nodes.push(nll);
    let loss = sum_nodes(tape, &nodes)?;
    Ok(SampleLoss {
        loss,
        nce_per_step: nce_values,
        cls_nll_node: Some(nll),
        cls_nll: cls_value,
        gaussian_entropy: 0.0,
        categorical_entropy: 0.0,
        generative_log_density: 0.0,
        prior_log_prob: 0.0,
    })
}

/// Unlabeled loss: the contrastive part of [`labeled_loss_cpc`] alone.
pub fn unlabeled_loss_cpc(
    tape: &mut Tape,
    batch: &EncodedBatch,
    sample: &SequenceSample,
    task: &ContrastiveTask,
    model: &CpcModel,
    eps: &Tensor,
) -> Result<SampleLoss> {
    check_task(task, sample, &model.cfg)?;
    let own = batch.latents_of(sample.id)?.to_vec();
    let t = model.cfg.context_len;
    let dist = model.aggregator.aggregate_context(tape, &own[..t], t)?;
    let c = sample_context_with(tape, &dist, eps)?;
    let (nodes, nce_values) = nce_steps(tape, batch, sample, task, &model.predictors, c)?;
    let loss = sum_nodes(tape, &nodes)?;
    Ok(SampleLoss {
        loss,
        nce_per_step: nce_values,
        cls_nll_node: None,
        cls_nll: 0.0,
        gaussian_entropy: 0.0,
        categorical_entropy: 0.0,
        generative_log_density: 0.0,
        prior_log_prob: 0.0,
    })
}

/// Mean classification negative log-likelihood over a labeled batch, using
/// pooled true-sequence features.
pub fn classification_loss(
    tape: &mut Tape,
    batch: &EncodedBatch,
    samples: &[&SequenceSample],
    pool_len: usize,
    cls: &ClassifierParams,
) -> Result<NodeId> {
    if samples.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut nlls = Vec::with_capacity(samples.len());
    for s in samples {
        let label = s.label.ok_or(Error::MissingLabel { id: s.id })?;
        let own = batch.latents_of(s.id)?.to_vec();
        if own.len() < pool_len {
            return Err(Error::SequenceTooShort {
                needed: pool_len,
                got: own.len(),
            });
        }
        let pooled = pool_features(tape, &own[..pool_len])?;
        let logp = classify(tape, pooled, cls)?;
        nlls.push(label_nll(tape, logp, label, cls.m_classes)?);
    }
    let total = sum_nodes(tape, &nlls)?;
    Ok(tape.scale(total, 1.0 / samples.len() as f64))
}

/// Frozen per-sequence noise for one batch (labeled sequences first).
pub struct CpcBatchNoise {
    pub context_eps: Vec<Tensor>,
}

impl CpcBatchNoise {
    pub fn draw(n_sequences: usize, d_c: usize, rng: &mut RngState) -> Self {
        Self {
            context_eps: (0..n_sequences).map(|_| rng.normal_tensor(&[d_c])).collect(),
        }
    }
}

fn assemble_total(
    tape: &mut Tape,
    sample_losses: &[SampleLoss],
    alpha: f64,
    n_labeled: usize,
    n_unlabeled: usize,
    pred_steps: usize,
) -> Result<BatchLoss> {
    let mut parts: Vec<NodeId> = sample_losses.iter().map(|s| s.loss).collect();
    let nll_nodes: Vec<NodeId> = sample_losses
        .iter()
        .filter_map(|s| s.cls_nll_node)
        .collect();
    let cls_mean = if nll_nodes.is_empty() {
        None
    } else {
        let s = sum_nodes(tape, &nll_nodes)?;
        Some(tape.scale(s, 1.0 / nll_nodes.len() as f64))
    };
    if let Some(m) = cls_mean {
        parts.push(tape.scale(m, alpha));
    }
    let loss = sum_nodes(tape, &parts)?;

    let mut nce_per_step = vec![0.0; pred_steps];
    let mut breakdown = LossBreakdown {
        nce_per_step: vec![],
        cls_loss: 0.0,
        cls_nll_sum: 0.0,
        gaussian_entropy_sum: 0.0,
        categorical_entropy_sum: 0.0,
        generative_log_density_sum: 0.0,
        prior_log_prob_sum: 0.0,
        alpha_used: alpha,
        n_labeled,
        n_unlabeled,
        total: tape.value(loss).item(),
    };
    for s in sample_losses {
        for (k, v) in s.nce_per_step.iter().enumerate() {
            nce_per_step[k] += v;
        }
        breakdown.cls_nll_sum += s.cls_nll;
        breakdown.gaussian_entropy_sum += s.gaussian_entropy;
        breakdown.categorical_entropy_sum += s.categorical_entropy;
        breakdown.generative_log_density_sum += s.generative_log_density;
        breakdown.prior_log_prob_sum += s.prior_log_prob;
    }
    breakdown.nce_per_step = nce_per_step;
    breakdown.cls_loss = cls_mean.map_or(0.0, |m| tape.value(m).item());
    Ok(BatchLoss {
        loss,
        breakdown,
    })
}

/// The batch objective: sum of labeled losses, plus sum of unlabeled losses,
/// plus `alpha` times the mean labeled classification loss. `noise` supplies
/// one context draw per sequence, labeled first; freeze it for gradient
/// checks, draw it per step during training.
pub fn total_objective_cpc(
    tape: &mut Tape,
    model: &CpcModel,
    labeled: &[(&SequenceSample, &ContrastiveTask)],
    unlabeled: &[(&SequenceSample, &ContrastiveTask)],
    alpha: f64,
    noise: &CpcBatchNoise,
) -> Result<BatchLoss> {
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(Error::BothBatchesEmpty);
    }
    if alpha < 0.0 {
        return Err(Error::InvalidConfig {
            what: "alpha",
            detail: format!("alpha must be >= 0, got {alpha}"),
        });
    }
    let all: Vec<&SequenceSample> = labeled
        .iter()
        .map(|(s, _)| *s)
        .chain(unlabeled.iter().map(|(s, _)| *s))
        .collect();
    let batch = EncodedBatch::encode(tape, &all, &model.encoder)?;
    let mut sample_losses = Vec::with_capacity(all.len());
    for (i, (s, task)) in labeled.iter().enumerate() {
        sample_losses.push(labeled_loss_cpc(
            tape,
            &batch,
            s,
            task,
            model,
            &noise.context_eps[i],
        )?);
    }
    for (j, (s, task)) in unlabeled.iter().enumerate() {
        sample_losses.push(unlabeled_loss_cpc(
            tape,
            &batch,
            s,
            task,
            model,
            &noise.context_eps[labeled.len() + j],
        )?);
    }
    assemble_total(
        tape,
        &sample_losses,
        alpha,
        labeled.len(),
        unlabeled.len(),
        model.cfg.pred_steps,
    )
}

/// Supervised-only objective: mean classification loss over the labeled
/// batch, nothing else. The contrastive machinery never runs.
pub fn supervised_loss(
    tape: &mut Tape,
    model: &CpcModel,
    labeled: &[&SequenceSample],
) -> Result<BatchLoss> {
    if labeled.is_empty() {
        return Err(Error::BothBatchesEmpty);
    }
    let batch = EncodedBatch::encode(tape, labeled, &model.encoder)?;
    let pool_len = model.cfg.min_seq_len();
    let loss = classification_loss(tape, &batch, labeled, pool_len, &model.classifier)?;
    let value = tape.value(loss).item();
    Ok(BatchLoss {
        loss,
        breakdown: LossBreakdown {
            nce_per_step: vec![0.0; model.cfg.pred_steps],
            cls_loss: value,
            cls_nll_sum: 0.0,
            gaussian_entropy_sum: 0.0,
            categorical_entropy_sum: 0.0,
            generative_log_density_sum: 0.0,
            prior_log_prob_sum: 0.0,
            alpha_used: 1.0,
            n_labeled: labeled.len(),
            n_unlabeled: 0,
            total: value,
        },
    })
}

/// Differential entropy of a diagonal Gaussian:
/// `0.5 * sum_i (1 + ln 2pi + log_var_i)`.
pub fn gaussian_entropy(tape: &mut Tape, dist: &ContextDistribution) -> NodeId {
    let d = tape.value(dist.log_var).len() as f64;
    let s = tape.sum(dist.log_var);
    let half = tape.scale(s, 0.5);
    tape.add_scalar(half, 0.5 * d * (1.0 + LN_2PI))
}

/// Log-density of `x` under a diagonal Gaussian given by `dist`:
/// `-0.5 * sum_i (ln 2pi + log_var_i + (x_i - mu_i)^2 / var_i)`.
pub fn gaussian_log_density(
    tape: &mut Tape,
    x: NodeId,
    dist: &ContextDistribution,
) -> Result<NodeId> {
    let d = tape.value(dist.log_var).len() as f64;
    let diff = tape.sub(x, dist.mu)?;
    let sq = tape.mul(diff, diff)?;
    let neg_lv = tape.scale(dist.log_var, -1.0);
    let inv_var = tape.exp(neg_lv);
    let quad = tape.mul(sq, inv_var)?;
    let qsum = tape.sum(quad);
    let lvsum = tape.sum(dist.log_var);
    let inner = tape.add(qsum, lvsum)?;
    let inner = tape.add_scalar(inner, d * LN_2PI);
    Ok(tape.scale(inner, -0.5))
}

/// Entropy of a probability vector, `-sum p_i ln p_i` with `0 ln 0 = 0`.
/// Rejects vectors that are not a simplex to within 1e-9.
pub fn categorical_entropy(probs: &[f64]) -> Result<f64> {
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| p < -1e-12) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidSimplex { sum });
    }
    Ok(probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Entropy of the categorical given by `log_probs` (a log-softmax output),
/// as a differentiable node: `-sum exp(lp) * lp`.
pub fn categorical_entropy_node(tape: &mut Tape, log_probs: NodeId) -> Result<NodeId> {
    let p = tape.exp(log_probs);
    let plp = tape.mul(p, log_probs)?;
    let s = tape.sum(plp);
    Ok(tape.scale(s, -1.0))
}

/// Temperature schedule of the label relaxation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GumbelConfig {
    pub tau: f64,
    pub anneal: f64,
    pub tau_min: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            anneal: 0.97,
            tau_min: 0.1,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0 && self.tau >= self.tau_min) || !(self.anneal > 0.0 && self.anneal <= 1.0) {
            return Err(Error::InvalidConfig {
                what: "GumbelConfig",
                detail: format!(
                    "need tau >= tau_min > 0 and 0 < anneal <= 1, got tau {} anneal {} tau_min {}",
                    self.tau, self.anneal, self.tau_min
                ),
            });
        }
        Ok(())
    }

    /// Temperature after `epoch` multiplicative decays, floored at `tau_min`.
    pub fn tau_at(&self, epoch: u64) -> f64 {
        (self.tau * self.anneal.powi(epoch.min(i32::MAX as u64) as i32)).max(self.tau_min)
    }
}

/// Relaxed one-hot draw: `softmax((log_probs + g) / tau)` with the given
/// standard Gumbel noise `g`. Differentiable in `log_probs`; its argmax is
/// distributed exactly as the underlying categorical for every temperature.
pub fn gumbel_softmax_sample_with(
    tape: &mut Tape,
    log_probs: NodeId,
    tau: f64,
    noise: &Tensor,
) -> Result<NodeId> {
    debug_assert!(tau > 0.0);
    if noise.shape() != tape.value(log_probs).shape() {
        return Err(Error::ShapeMismatch {
            op: "gumbel_softmax",
            lhs: crate::tensor::shape_str(tape.value(log_probs).shape()),
            rhs: crate::tensor::shape_str(noise.shape()),
        });
    }
    let g = tape.constant(noise.clone());
    let shifted = tape.add(log_probs, g)?;
    let scaled = tape.scale(shifted, 1.0 / tau);
    let ls = tape.log_softmax(scaled)?;
    Ok(tape.exp(ls))
}

/// Draws the Gumbel noise from `rng` and samples; returns the noise so
/// callers can freeze it.
pub fn gumbel_softmax_sample(
    tape: &mut Tape,
    log_probs: NodeId,
    tau: f64,
    rng: &mut RngState,
) -> Result<(NodeId, Tensor)> {
    let m = tape.value(log_probs).len();
    let noise = Tensor::vector((0..m).map(|_| rng.gumbel()).collect());
    let y = gumbel_softmax_sample_with(tape, log_probs, tau, &noise)?;
    Ok((y, noise))
}

/// Label-conditional Gaussian context head: a GRU over the context latents
/// whose final state, concatenated with the label vector (one-hot or
/// relaxed), feeds affine mean/log-variance heads.
#[derive(Clone, Debug)]
pub struct CondGaussianHead {
    pub gru: GruParams,
    pub mu_head: Affine,
    pub logvar_head: Affine,
    pub m_classes: usize,
    pub d_c: usize,
}

impl CondGaussianHead {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut RngState,
        prefix: &str,
        d_z: usize,
        d_c: usize,
        m_classes: usize,
    ) -> Self {
        let gru = GruParams::init(ps, rng, &format!("{prefix}.gru"), d_z, d_c);
        let mu_head = Affine::init(ps, rng, &format!("{prefix}.mu"), d_c, d_c + m_classes, 0.1);
        let logvar_head = Affine::init(ps, rng, &format!("{prefix}.logvar"), d_c, d_c + m_classes, 0.0);
        Self {
            gru,
            mu_head,
            logvar_head,
            m_classes,
            d_c,
        }
    }

    pub fn context(
        &self,
        tape: &mut Tape,
        z_context: &[NodeId],
        y: NodeId,
        expected_t: usize,
    ) -> Result<ContextDistribution> {
        if z_context.len() != expected_t || z_context.is_empty() {
            return Err(Error::WrongContextLength {
                expected: expected_t,
                got: z_context.len(),
            });
        }
        if tape.value(y).len() != self.m_classes {
            return Err(Error::DimensionMismatch {
                what: "label vector",
                expected: self.m_classes,
                got: tape.value(y).len(),
            });
        }
        let h = self.gru.fold(tape, z_context)?;
        let hy = tape.concat(&[h, y])?;
        let mu = self.mu_head.apply(tape, hy)?;
        let lv = self.logvar_head.apply(tape, hy)?;
        let log_var = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(ContextDistribution { mu, log_var })
    }
}

/// The class-conditional model: shared encoder and predictor bank, separate
/// generative and inference context heads, a fixed uniform class prior, and
/// a linear inference classifier over pooled latents.
#[derive(Clone, Debug)]
pub struct CcpcModel {
    pub cfg: CpcConfig,
    pub m_classes: usize,
    pub encoder: EncoderParams,
    pub predictors: PredictorBank,
    pub generative: CondGaussianHead,
    pub inference: CondGaussianHead,
    pub classifier: ClassifierParams,
    /// Fixed log prior over classes (uniform).
    pub log_pi: Tensor,
}

impl CcpcModel {
    pub fn init(
        cfg: CpcConfig,
        enc_spec: &EncoderSpec,
        m_classes: usize,
        ps: &mut ParamSet,
        rng: &mut RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        if m_classes < 2 {
            return Err(Error::InvalidConfig {
                what: "classifier",
                detail: format!("need at least 2 classes, got {m_classes}"),
            });
        }
        let encoder = EncoderParams::init(enc_spec, cfg.d_z, ps, rng)?;
        let predictors = PredictorBank::init(ps, rng, cfg.pred_steps, cfg.d_z, cfg.d_c);
        let generative = CondGaussianHead::init(ps, rng, "gen", cfg.d_z, cfg.d_c, m_classes);
        let inference = CondGaussianHead::init(ps, rng, "inf", cfg.d_z, cfg.d_c, m_classes);
        let classifier = ClassifierParams::init(ps, rng, "cls", m_classes, cfg.d_z);
        let log_pi = Tensor::filled(&[m_classes], -(m_classes as f64).ln());
        Ok(Self {
            cfg,
            m_classes,
            encoder,
            predictors,
            generative,
            inference,
            classifier,
            log_pi,
        })
    }

    fn one_hot(&self, label: usize) -> Result<Tensor> {
        if label >= self.m_classes {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.m_classes,
            });
        }
        let mut v = vec![0.0; self.m_classes];
        v[label] = 1.0;
        Ok(Tensor::vector(v))
    }
}

/// Minimizable labeled variational bound of the class-conditional model:
/// with one reparameterized draw `c ~ q(c | context, y)`,
/// `loss = sum_k nce_k(c) - log N(c; generative head) - H(q)`.
pub fn ccpc_labeled_bound(
    tape: &mut Tape,
    batch: &EncodedBatch,
    sample: &SequenceSample,
    task: &ContrastiveTask,
    model: &CcpcModel,
    eps: &Tensor,
) -> Result<SampleLoss> {
    check_task(task, sample, &model.cfg)?;
    let label = sample.label.ok_or(Error::MissingLabel { id: sample.id })?;
    let y = tape.constant(model.one_hot(label)?);
    let own = batch.latents_of(sample.id)?.to_vec();
    let t = model.cfg.context_len;
    let q = model.inference.context(tape, &own[..t], y, t)?;
    let c = sample_context_with(tape, &q, eps)?;
    let (nodes, nce_values) = nce_steps(tape, batch, sample, task, &model.predictors, c)?;
    let nce_sum = sum_nodes(tape, &nodes)?;
    let p = model.generative.context(tape, &own[..t], y, t)?;
    let log_pdf = gaussian_log_density(tape, c, &p)?;
    let entropy = gaussian_entropy(tape, &q);
    let neg_pdf = tape.scale(log_pdf, -1.0);
    let neg_ent = tape.scale(entropy, -1.0);
    let partial = tape.add(nce_sum, neg_pdf)?;
    let loss = tape.add(partial, neg_ent)?;
    Ok(SampleLoss {
        loss,
        nce_per_step: nce_values,
        cls_nll_node: None,
        cls_nll: 0.0,
        gaussian_entropy: tape.value(entropy).item(),
        categorical_entropy: 0.0,
        generative_log_density: tape.value(log_pdf).item(),
        prior_log_prob: 0.0,
    })
}

/// Minimizable unlabeled bound: the label is inferred from pooled latents,
/// relaxed with Gumbel-Softmax noise at temperature `tau`, and fed to both
/// context heads; the prior term is the relaxed dot product `y . log pi`;
/// the joint posterior entropy decomposes as
/// `H(q(y)) + E_{q(y)}[H(q(c | y))]` with the expectation estimated at the
/// sampled label.
#[allow(clippy::too_many_arguments)]
pub fn ccpc_unlabeled_bound(
    tape: &mut Tape,
    batch: &EncodedBatch,
    sample: &SequenceSample,
    task: &ContrastiveTask,
    model: &CcpcModel,
    tau: f64,
    eps: &Tensor,
    gumbel_noise: &Tensor,
) -> Result<SampleLoss> {
    check_task(task, sample, &model.cfg)?;
    let own = batch.latents_of(sample.id)?.to_vec();
    let t = model.cfg.context_len;
    let pooled = pool_features(tape, &own[..model.cfg.min_seq_len()])?;
    let q_logp = classify(tape, pooled, &model.classifier)?;
    let y_relaxed = gumbel_softmax_sample_with(tape, q_logp, tau, gumbel_noise)?;
    let q = model.inference.context(tape, &own[..t], y_relaxed, t)?;
    let c = sample_context_with(tape, &q, eps)?;
    let (nodes, nce_values) = nce_steps(tape, batch, sample, task, &model.predictors, c)?;
    let nce_sum = sum_nodes(tape, &nodes)?;
    let p = model.generative.context(tape, &own[..t], y_relaxed, t)?;
    let log_pdf = gaussian_log_density(tape, c, &p)?;
    let log_pi = tape.constant(model.log_pi.clone());
    let prior = tape.dot(y_relaxed, log_pi)?;
    let h_c = gaussian_entropy(tape, &q);
    let h_y = categorical_entropy_node(tape, q_logp)?;
    // loss = sum nce - log_pdf - prior - H(c) - H(y)
    let neg = |tape: &mut Tape, n: NodeId| tape.scale(n, -1.0);
    let mut loss = nce_sum;
    for term in [log_pdf, prior, h_c, h_y] {
        let nt = neg(tape, term);
        loss = tape.add(loss, nt)?;
    }
    Ok(SampleLoss {
        loss,
        nce_per_step: nce_values,
        cls_nll_node: None,
        cls_nll: 0.0,
        gaussian_entropy: tape.value(h_c).item(),
        categorical_entropy: tape.value(h_y).item(),
        generative_log_density: tape.value(log_pdf).item(),
        prior_log_prob: tape.value(prior).item(),
    })
}

/// Frozen noise for one class-conditional batch: a context draw per sequence
/// (labeled first) and a Gumbel vector per unlabeled sequence.
pub struct CcpcBatchNoise {
    pub context_eps: Vec<Tensor>,
    pub gumbel: Vec<Tensor>,
}

impl CcpcBatchNoise {
    pub fn draw(
        n_labeled: usize,
        n_unlabeled: usize,
        d_c: usize,
        m_classes: usize,
        rng: &mut RngState,
    ) -> Self {
        let context_eps = (0..n_labeled + n_unlabeled)
            .map(|_| rng.normal_tensor(&[d_c]))
            .collect();
        let gumbel = (0..n_unlabeled)
            .map(|_| Tensor::vector((0..m_classes).map(|_| rng.gumbel()).collect()))
            .collect();
        Self {
            context_eps,
            gumbel,
        }
    }
}

/// Batch objective of the class-conditional variant: labeled and unlabeled
/// bounds plus `alpha` times the mean classification loss of the inference
/// classifier on labeled sequences.
pub fn total_objective_ccpc(
    tape: &mut Tape,
    model: &CcpcModel,
    labeled: &[(&SequenceSample, &ContrastiveTask)],
    unlabeled: &[(&SequenceSample, &ContrastiveTask)],
    alpha: f64,
    tau: f64,
    noise: &CcpcBatchNoise,
) -> Result<BatchLoss> {
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(Error::BothBatchesEmpty);
    }
    if alpha < 0.0 {
        return Err(Error::InvalidConfig {
            what: "alpha",
            detail: format!("alpha must be >= 0, got {alpha}"),
        });
    }
    let all: Vec<&SequenceSample> = labeled
        .iter()
        .map(|(s, _)| *s)
        .chain(unlabeled.iter().map(|(s, _)| *s))
        .collect();
    let batch = EncodedBatch::encode(tape, &all, &model.encoder)?;
    let mut sample_losses = Vec::with_capacity(all.len());
    let pool_len = model.cfg.min_seq_len();
    for (i, (s, task)) in labeled.iter().enumerate() {
        let mut sl = ccpc_labeled_bound(tape, &batch, s, task, model, &noise.context_eps[i])?;
        // The explicit classification term on the inference classifier.
        let label = s.label.ok_or(Error::MissingLabel { id: s.id })?;
        let own = batch.latents_of(s.id)?.to_vec();
        let pooled = pool_features(tape, &own[..pool_len])?;
        let logp = classify(tape, pooled, &model.classifier)?;
        let nll = label_nll(tape, logp, label, model.m_classes)?;
        sl.cls_nll_node = Some(nll);
        sample_losses.push(sl);
    }
    for (j, (s, task)) in unlabeled.iter().enumerate() {
        sample_losses.push(ccpc_unlabeled_bound(
            tape,
            &batch,
            s,
            task,
            model,
            tau,
            &noise.context_eps[labeled.len() + j],
            &noise.gumbel[j],
        )?);
    }
    assemble_total(
        tape,
        &sample_losses,
        alpha,
        labeled.len(),
        unlabeled.len(),
        model.cfg.pred_steps,
    )
}
