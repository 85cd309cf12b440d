//! The contrastive predictive coding stack: patch/sentence encoders, a GRU
//! aggregator producing a diagonal-Gaussian context, bilinear per-step
//! scorers, and the InfoNCE step loss.
//!
//! Scores live in the log domain throughout; the exponential form of the
//! bilinear compatibility is never materialized, so large scores cannot
//! overflow.

use serde::{Deserialize, Serialize};

use crate::data::Patch;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::RngState;
use crate::tape::{gru_cell, NodeId, Tape};
use crate::tensor::{shape_str, Tensor};

/// Clamp range for the log-variance heads. Unbounded variance destabilizes
/// the entropy terms, so the heads saturate outside this range.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Core dimensions of the contrastive prediction task.
///
/// `context_len` is the number of conditioning steps, `pred_steps` the number
/// of future positions scored, `set_size` the number of candidates per step
/// (one positive, `set_size - 1` negatives).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpcConfig {
    pub context_len: usize,
    pub pred_steps: usize,
    pub set_size: usize,
    pub d_z: usize,
    pub d_c: usize,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self {
            context_len: 2,
            pred_steps: 1,
            set_size: 8,
            d_z: 64,
            d_c: 64,
        }
    }
}

impl CpcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::InvalidConfig {
            what: "CpcConfig",
            detail,
        };
        if self.context_len < 1 {
            return Err(bad("context_len must be >= 1".into()));
        }
        if self.pred_steps < 1 {
            return Err(bad("pred_steps must be >= 1".into()));
        }
        if self.set_size < 2 {
            return Err(bad("set_size must be >= 2".into()));
        }
        if self.d_z == 0 || self.d_c == 0 {
            return Err(bad("latent dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Minimum sequence length the task needs.
    pub fn min_seq_len(&self) -> usize {
        self.context_len + self.pred_steps
    }
}

/// Weight/bias pair of one affine map.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut RngState,
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        scale: f64,
    ) -> Self {
        let std = scale / (in_dim as f64).sqrt();
        let w = ps.add(
            &format!("{prefix}.w"),
            rng.normal_tensor(&[out_dim, in_dim]).map(|v| v * std),
        );
        let b = ps.add(&format!("{prefix}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        tape.affine(self.w, self.b, x)
    }
}

/// Gate parameters of one GRU cell.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub update: Affine,
    pub reset: Affine,
    pub candidate: Affine,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruParams {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut RngState,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Self {
        let cat = input_dim + hidden_dim;
        Self {
            update: Affine::init(ps, rng, &format!("{prefix}.update"), hidden_dim, cat, 1.0),
            reset: Affine::init(ps, rng, &format!("{prefix}.reset"), hidden_dim, cat, 1.0),
            candidate: Affine::init(ps, rng, &format!("{prefix}.cand"), hidden_dim, cat, 1.0),
            input_dim,
            hidden_dim,
        }
    }

    pub fn step(&self, tape: &mut Tape, h_prev: NodeId, x: NodeId) -> Result<NodeId> {
        if tape.value(x).len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                what: "gru input",
                expected: self.input_dim,
                got: tape.value(x).len(),
            });
        }
        let wu = tape.param(self.update.w);
        let bu = tape.param(self.update.b);
        let wr = tape.param(self.reset.w);
        let br = tape.param(self.reset.b);
        let wc = tape.param(self.candidate.w);
        let bc = tape.param(self.candidate.b);
        gru_cell(tape, h_prev, x, wu, bu, wr, br, wc, bc)
    }

    /// Runs the cell over `xs` in order from the zero state and returns the
    /// final hidden state.
    pub fn fold(&self, tape: &mut Tape, xs: &[NodeId]) -> Result<NodeId> {
        let mut h = tape.constant(Tensor::zeros(&[self.hidden_dim]));
        for &x in xs {
            h = self.step(tape, h, x)?;
        }
        Ok(h)
    }
}

/// One conv layer of the image encoder.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

/// Shape-level description of an encoder; turned into parameters by
/// [`EncoderParams::init`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EncoderSpec {
    /// Conv stack over `[C,H,W]` patches, each layer ReLU-activated, then a
    /// flatten and an affine head to `d_z`. An empty stack is a plain
    /// flatten + affine, which suits flat synthetic patch vectors.
    Conv {
        input_shape: Vec<usize>,
        /// `(out_channels, kernel_size, stride)` per layer.
        layers: Vec<(usize, usize, usize)>,
    },
    /// Sentence encoder: token embedding, three 1-D filter groups of widths
    /// 3/4/5 with `channels` outputs each, ReLU, max-pool over positions,
    /// concatenated. `d_z` must equal `3 * channels`.
    Text {
        vocab_size: usize,
        embed_dim: usize,
        channels: usize,
        sentence_len: usize,
    },
}

#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub layers: Vec<ConvLayer>,
    pub head: Affine,
    pub input_shape: Vec<usize>,
    pub d_z: usize,
}

#[derive(Clone, Debug)]
pub struct TextFilterGroup {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub groups: Vec<TextFilterGroup>,
    pub channels: usize,
    pub embed_dim: usize,
    pub sentence_len: usize,
    pub vocab_size: usize,
}

/// Encoder parameters; one variant per input modality.
#[derive(Clone, Debug)]
pub enum EncoderParams {
    Conv(ConvEncoder),
    Text(TextEncoder),
}

pub const TEXT_FILTER_WIDTHS: [usize; 3] = [3, 4, 5];

impl EncoderParams {
    pub fn init(
        spec: &EncoderSpec,
        d_z: usize,
        ps: &mut ParamSet,
        rng: &mut RngState,
    ) -> Result<Self> {
        match spec {
            EncoderSpec::Conv {
                input_shape,
                layers,
            } => {
                if input_shape.is_empty() {
                    return Err(Error::InvalidConfig {
                        what: "encoder",
                        detail: "empty input shape".into(),
                    });
                }
                if !layers.is_empty() && input_shape.len() != 3 {
                    return Err(Error::InvalidConfig {
                        what: "encoder",
                        detail: format!(
                            "conv layers require CxHxW patches, got {}",
                            shape_str(input_shape)
                        ),
                    });
                }
                let mut shape = input_shape.clone();
                let mut built = Vec::new();
                for (i, &(f, k, s)) in layers.iter().enumerate() {
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    if k > h || k > w || s == 0 {
                        return Err(Error::InvalidConfig {
                            what: "encoder",
                            detail: format!("conv layer {i}: kernel {k}/stride {s} invalid for {h}x{w}"),
                        });
                    }
                    let std = 1.0 / ((c * k * k) as f64).sqrt();
                    let kernel = ps.add(
                        &format!("enc.conv{i}.kernel"),
                        rng.normal_tensor(&[f, c, k, k]).map(|v| v * std),
                    );
                    let bias = ps.add(&format!("enc.conv{i}.bias"), Tensor::zeros(&[f]));
                    built.push(ConvLayer {
                        kernel,
                        bias,
                        stride: s,
                    });
                    shape = vec![f, (h - k) / s + 1, (w - k) / s + 1];
                }
                let flat: usize = shape.iter().product();
                let head = Affine::init(ps, rng, "enc.head", d_z, flat, 1.0);
                Ok(EncoderParams::Conv(ConvEncoder {
                    layers: built,
                    head,
                    input_shape: input_shape.clone(),
                    d_z,
                }))
            }
            EncoderSpec::Text {
                vocab_size,
                embed_dim,
                channels,
                sentence_len,
            } => {
                if d_z != 3 * channels {
                    return Err(Error::InvalidConfig {
                        what: "encoder",
                        detail: format!(
                            "text encoder yields d_z = 3*channels = {}, config says {d_z}",
                            3 * channels
                        ),
                    });
                }
                if *sentence_len < *TEXT_FILTER_WIDTHS.last().unwrap() {
                    return Err(Error::InvalidConfig {
                        what: "encoder",
                        detail: format!("sentence_len {sentence_len} shorter than widest filter"),
                    });
                }
                let estd = 1.0 / (*embed_dim as f64).sqrt();
                let embedding = ps.add(
                    "enc.embedding",
                    rng.normal_tensor(&[*vocab_size, *embed_dim])
                        .map(|v| v * estd),
                );
                let groups = TEXT_FILTER_WIDTHS
                    .iter()
                    .map(|&w| {
                        let std = 1.0 / ((w * embed_dim) as f64).sqrt();
                        TextFilterGroup {
                            kernel: ps.add(
                                &format!("enc.text{w}.kernel"),
                                rng.normal_tensor(&[*channels, w * embed_dim])
                                    .map(|v| v * std),
                            ),
                            bias: ps.add(&format!("enc.text{w}.bias"), Tensor::zeros(&[*channels])),
                            width: w,
                        }
                    })
                    .collect();
                Ok(EncoderParams::Text(TextEncoder {
                    embedding,
                    groups,
                    channels: *channels,
                    embed_dim: *embed_dim,
                    sentence_len: *sentence_len,
                    vocab_size: *vocab_size,
                }))
            }
        }
    }

    pub fn d_z(&self) -> usize {
        match self {
            EncoderParams::Conv(c) => c.d_z,
            EncoderParams::Text(t) => 3 * t.channels,
        }
    }

    /// Encodes one patch to a `d_z` latent.
    pub fn encode_patch(&self, tape: &mut Tape, patch: &Patch) -> Result<NodeId> {
        match (self, patch) {
            (EncoderParams::Conv(enc), Patch::Image(img)) => {
                if img.shape() != enc.input_shape.as_slice() {
                    return Err(Error::PatchShape {
                        expected: shape_str(&enc.input_shape),
                        got: shape_str(img.shape()),
                    });
                }
                let mut h = tape.constant(img.clone());
                for layer in &enc.layers {
                    let k = tape.param(layer.kernel);
                    let b = tape.param(layer.bias);
                    let c = tape.conv2d(h, k, layer.stride)?;
                    let c = tape.add_channel_bias(c, b)?;
                    h = tape.relu(c);
                }
                let flat = tape.flatten(h)?;
                enc.head.apply(tape, flat)
            }
            (EncoderParams::Text(enc), Patch::Tokens(ids)) => {
                if ids.len() != enc.sentence_len {
                    return Err(Error::DimensionMismatch {
                        what: "sentence length",
                        expected: enc.sentence_len,
                        got: ids.len(),
                    });
                }
                let table = tape.param(enc.embedding);
                let emb = tape.embedding(table, ids)?;
                let mut feats = Vec::with_capacity(enc.groups.len());
                for g in &enc.groups {
                    let k = tape.param(g.kernel);
                    let b = tape.param(g.bias);
                    let conv = tape.seq_conv(emb, k, g.width)?;
                    let conv = tape.add_channel_bias(conv, b)?;
                    let act = tape.relu(conv);
                    feats.push(tape.row_max(act)?);
                }
                tape.concat(&feats)
            }
            (EncoderParams::Conv(_), Patch::Tokens(_)) => Err(Error::PatchShape {
                expected: "image tensor".into(),
                got: "token ids".into(),
            }),
            (EncoderParams::Text(_), Patch::Image(_)) => Err(Error::PatchShape {
                expected: "token ids".into(),
                got: "image tensor".into(),
            }),
        }
    }
}

/// Encodes every patch of a sequence; entry `i` is the latent of patch `i`.
/// The encoder is deterministic, so identical patches yield identical rows.
pub fn encode_sequence(
    tape: &mut Tape,
    patches: &[Patch],
    enc: &EncoderParams,
) -> Result<Vec<NodeId>> {
    patches.iter().map(|p| enc.encode_patch(tape, p)).collect()
}

/// Diagonal Gaussian over the aggregated context, as tape nodes so sampling
/// stays differentiable.
#[derive(Clone, Copy, Debug)]
pub struct ContextDistribution {
    pub mu: NodeId,
    pub log_var: NodeId,
}

/// GRU aggregator with affine heads for the context mean and log-variance.
#[derive(Clone, Debug)]
pub struct AggregatorParams {
    pub gru: GruParams,
    pub mu_head: Affine,
    pub logvar_head: Affine,
    pub d_c: usize,
}

impl AggregatorParams {
    pub fn init(ps: &mut ParamSet, rng: &mut RngState, d_z: usize, d_c: usize) -> Self {
        let gru = GruParams::init(ps, rng, "agg.gru", d_z, d_c);
        // Zero-initialized log-variance head: sigma = 1 at initialization.
        let mu_head = Affine::init(ps, rng, "agg.mu", d_c, d_c, 0.1);
        let logvar_head = Affine::init(ps, rng, "agg.logvar", d_c, d_c, 0.0);
        Self {
            gru,
            mu_head,
            logvar_head,
            d_c,
        }
    }

    /// Consumes exactly `expected_t` latents in order from the zero state and
    /// maps the final hidden state to a clamped Gaussian.
    pub fn aggregate_context(
        &self,
        tape: &mut Tape,
        z_context: &[NodeId],
        expected_t: usize,
    ) -> Result<ContextDistribution> {
        if z_context.len() != expected_t || z_context.is_empty() {
            return Err(Error::WrongContextLength {
                expected: expected_t,
                got: z_context.len(),
            });
        }
        let h = self.gru.fold(tape, z_context)?;
        let mu = self.mu_head.apply(tape, h)?;
        let lv = self.logvar_head.apply(tape, h)?;
        let log_var = tape.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(ContextDistribution { mu, log_var })
    }
}

/// Reparameterized draw `c = mu + exp(log_var / 2) .* eps` with the given
/// noise, so gradients flow into both heads.
pub fn sample_context_with(
    tape: &mut Tape,
    dist: &ContextDistribution,
    eps: &Tensor,
) -> Result<NodeId> {
    if eps.shape() != tape.value(dist.mu).shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_context",
            lhs: shape_str(tape.value(dist.mu).shape()),
            rhs: shape_str(eps.shape()),
        });
    }
    let half = tape.scale(dist.log_var, 0.5);
    let std = tape.exp(half);
    let e = tape.constant(eps.clone());
    let noise = tape.mul(std, e)?;
    tape.add(dist.mu, noise)
}

/// Draws the noise from `rng` and samples; returns the noise so callers can
/// freeze it for gradient checks.
pub fn sample_context(
    tape: &mut Tape,
    dist: &ContextDistribution,
    rng: &mut RngState,
) -> Result<(NodeId, Tensor)> {
    let eps = rng.normal_tensor(tape.value(dist.mu).shape());
    let c = sample_context_with(tape, dist, &eps)?;
    Ok((c, eps))
}

/// Per-step bilinear scorer matrices, one `[d_z, d_c]` matrix per step.
#[derive(Clone, Debug)]
pub struct PredictorBank {
    pub steps: Vec<ParamId>,
    pub d_z: usize,
    pub d_c: usize,
}

impl PredictorBank {
    pub fn init(
        ps: &mut ParamSet,
        rng: &mut RngState,
        k_steps: usize,
        d_z: usize,
        d_c: usize,
    ) -> Self {
        // Tiny init keeps scores near zero, so fresh models sit at the
        // chance-level loss of the set-softmax.
        let std = 0.01 / ((d_z * d_c) as f64).sqrt();
        let steps = (0..k_steps)
            .map(|k| {
                ps.add(
                    &format!("pred.w{k}"),
                    rng.normal_tensor(&[d_z, d_c]).map(|v| v * std),
                )
            })
            .collect();
        Self { steps, d_z, d_c }
    }
}

/// The log-domain bilinear compatibility `z^T W c`.
pub fn score(tape: &mut Tape, z: NodeId, c: NodeId, w: NodeId) -> Result<NodeId> {
    let wc = tape.matvec(w, c)?;
    tape.dot(z, wc)
}

/// Cross-entropy of picking the positive among the candidate set:
/// `-log_softmax(scores)[positive]` where `scores_j = z_j^T W c`.
pub fn info_nce_step_loss(
    tape: &mut Tape,
    c: NodeId,
    candidates: &[NodeId],
    positive_index: usize,
    w: NodeId,
) -> Result<NodeId> {
    if positive_index >= candidates.len() {
        return Err(Error::IndexOutOfRange {
            what: "info_nce positive index",
            index: positive_index,
            len: candidates.len(),
        });
    }
    let wc = tape.matvec(w, c)?;
    let scores: Result<Vec<NodeId>> = candidates.iter().map(|&z| tape.dot(z, wc)).collect();
    let stacked = tape.stack_scalars(&scores?)?;
    let logp = tape.log_softmax(stacked)?;
    let pos = tape.element(logp, positive_index)?;
    Ok(tape.scale(pos, -1.0))
}

/// Arithmetic mean over latent rows. Only the true sequence's latents belong
/// here; contrastive negatives never enter the pooled feature.
pub fn pool_features(tape: &mut Tape, rows: &[NodeId]) -> Result<NodeId> {
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    tape.mean_vectors(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn flat_encoder(ps: &mut ParamSet, rng: &mut RngState, p: usize, d_z: usize) -> EncoderParams {
        EncoderParams::init(
            &EncoderSpec::Conv {
                input_shape: vec![p],
                layers: vec![],
            },
            d_z,
            ps,
            rng,
        )
        .unwrap()
    }

    fn zero_all(ps: &mut ParamSet) {
        let shapes: Vec<(ParamId, Vec<usize>)> = ps
            .iter()
            .map(|(id, _, t)| (id, t.shape().to_vec()))
            .collect();
        for (id, shape) in shapes {
            *ps.get_mut(id) = Tensor::zeros(&shape);
        }
    }

    #[test]
    fn encode_sequence_shape_contract() {
        let mut rng = RngState::new(1);
        let mut ps = ParamSet::new();
        let enc = flat_encoder(&mut ps, &mut rng, 10, 64);
        let patches: Vec<Patch> = (0..7)
            .map(|_| Patch::Image(rng.normal_tensor(&[10])))
            .collect();
        let mut tape = Tape::new(&ps);
        let rows = encode_sequence(&mut tape, &patches, &enc).unwrap();
        assert_eq!(rows.len(), 7);
        for r in rows {
            assert_eq!(tape.value(r).shape(), &[64]);
        }
    }

    #[test]
    fn identical_patches_encode_identically() {
        let mut rng = RngState::new(2);
        let mut ps = ParamSet::new();
        let enc = flat_encoder(&mut ps, &mut rng, 6, 8);
        let patch = Patch::Image(rng.normal_tensor(&[6]));
        let mut tape = Tape::new(&ps);
        let rows = encode_sequence(&mut tape, &[patch.clone(), patch], &enc).unwrap();
        assert_eq!(tape.value(rows[0]).data(), tape.value(rows[1]).data());
    }

    #[test]
    fn zero_weight_text_encoder_pools_to_zero() {
        let mut rng = RngState::new(3);
        let mut ps = ParamSet::new();
        let enc = EncoderParams::init(
            &EncoderSpec::Text {
                vocab_size: 11,
                embed_dim: 4,
                channels: 2,
                sentence_len: 6,
            },
            6,
            &mut ps,
            &mut rng,
        )
        .unwrap();
        zero_all(&mut ps);
        let mut tape = Tape::new(&ps);
        let z = enc
            .encode_patch(&mut tape, &Patch::Tokens(vec![1, 2, 3, 4, 5, 6]))
            .unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_encoder_gradients_match_fd() {
        let mut rng = RngState::new(31);
        let mut ps = ParamSet::new();
        let enc = EncoderParams::init(
            &EncoderSpec::Conv {
                input_shape: vec![1, 6, 6],
                layers: vec![(2, 3, 1)],
            },
            4,
            &mut ps,
            &mut rng,
        )
        .unwrap();
        let patch = Patch::Image(rng.normal_tensor(&[1, 6, 6]));
        let err = grad_check(&ps, 1e-5, |_, tape| {
            let z = enc.encode_patch(tape, &patch)?;
            tape.dot(z, z)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn text_encoder_gradients_match_fd() {
        let mut rng = RngState::new(32);
        let mut ps = ParamSet::new();
        let enc = EncoderParams::init(
            &EncoderSpec::Text {
                vocab_size: 9,
                embed_dim: 3,
                channels: 2,
                sentence_len: 7,
            },
            6,
            &mut ps,
            &mut rng,
        )
        .unwrap();
        let ids = vec![1, 3, 5, 2, 8, 0, 4];
        let err = grad_check(&ps, 1e-5, |_, tape| {
            let z = enc.encode_patch(tape, &Patch::Tokens(ids.clone()))?;
            tape.dot(z, z)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn patch_shape_mismatch_is_reported() {
        let mut rng = RngState::new(4);
        let mut ps = ParamSet::new();
        let enc = flat_encoder(&mut ps, &mut rng, 6, 8);
        let mut tape = Tape::new(&ps);
        let bad = Patch::Image(rng.normal_tensor(&[7]));
        assert!(matches!(
            enc.encode_patch(&mut tape, &bad),
            Err(Error::PatchShape { .. })
        ));
    }

    #[test]
    fn aggregate_zero_params_gives_standard_gaussian() {
        let mut rng = RngState::new(5);
        let mut ps = ParamSet::new();
        let agg = AggregatorParams::init(&mut ps, &mut rng, 4, 16);
        zero_all(&mut ps);
        let mut tape = Tape::new(&ps);
        let z: Vec<NodeId> = (0..2)
            .map(|_| tape.constant(rng.normal_tensor(&[4])))
            .collect();
        let dist = agg.aggregate_context(&mut tape, &z, 2).unwrap();
        assert!(tape.value(dist.mu).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(dist.log_var).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(dist.mu).len(), 16);
        assert_eq!(tape.value(dist.log_var).len(), 16);
    }

    #[test]
    fn aggregate_is_order_sensitive() {
        let mut rng = RngState::new(6);
        let mut ps = ParamSet::new();
        let agg = AggregatorParams::init(&mut ps, &mut rng, 4, 8);
        let a = rng.normal_tensor(&[4]);
        let b = rng.normal_tensor(&[4]);
        let mu_of = |first: &Tensor, second: &Tensor| {
            let mut tape = Tape::new(&ps);
            let x = tape.constant(first.clone());
            let y = tape.constant(second.clone());
            let dist = agg.aggregate_context(&mut tape, &[x, y], 2).unwrap();
            tape.value(dist.mu).data().to_vec()
        };
        assert_ne!(mu_of(&a, &b), mu_of(&b, &a));
    }

    #[test]
    fn aggregate_rejects_wrong_length() {
        let mut rng = RngState::new(7);
        let mut ps = ParamSet::new();
        let agg = AggregatorParams::init(&mut ps, &mut rng, 4, 8);
        let mut tape = Tape::new(&ps);
        let z = tape.constant(rng.normal_tensor(&[4]));
        assert!(matches!(
            agg.aggregate_context(&mut tape, &[z], 2),
            Err(Error::WrongContextLength { .. })
        ));
    }

    #[test]
    fn sample_at_logvar_floor_hugs_the_mean() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let mu = tape.constant(Tensor::vector(vec![3.0, -1.0]));
        let lv = tape.constant(Tensor::filled(&[2], LOG_VAR_MIN));
        let dist = ContextDistribution { mu, log_var: lv };
        let eps = Tensor::vector(vec![1.0, -1.0]);
        let c = sample_context_with(&mut tape, &dist, &eps).unwrap();
        let sigma = (0.5 * LOG_VAR_MIN).exp(); // ~6.7e-3
        let d = tape.value(c).data();
        assert!(close(d[0], 3.0 + sigma, 1e-12));
        assert!(close(d[1], -1.0 - sigma, 1e-12));
    }

    #[test]
    fn sample_mean_matches_mu_over_many_draws() {
        let ps = ParamSet::new();
        let mut rng = RngState::new(8);
        let mu = vec![0.5, -2.0];
        let log_var = vec![0.3, -0.7];
        let n = 100_000u32;
        let mut sums = [0.0f64; 2];
        for _ in 0..n {
            let mut tape = Tape::new(&ps);
            let m = tape.constant(Tensor::vector(mu.clone()));
            let lv = tape.constant(Tensor::vector(log_var.clone()));
            let dist = ContextDistribution { mu: m, log_var: lv };
            let (c, _) = sample_context(&mut tape, &dist, &mut rng).unwrap();
            let d = tape.value(c).data();
            sums[0] += d[0];
            sums[1] += d[1];
        }
        for i in 0..2 {
            let mean = sums[i] / f64::from(n);
            let sigma = (0.5 * log_var[i]).exp();
            let band = 4.0 * sigma / f64::from(n).sqrt();
            assert!(close(mean, mu[i], band), "coord {i}: {mean} vs {}", mu[i]);
        }
    }

    #[test]
    fn sample_gradient_wrt_heads_matches_fd_with_frozen_noise() {
        let mut rng = RngState::new(9);
        let mut ps = ParamSet::new();
        let mu = ps.add("mu", rng.normal_tensor(&[3]));
        let lv = ps.add("lv", rng.normal_tensor(&[3]).map(|v| 0.3 * v));
        let eps = rng.normal_tensor(&[3]);
        let err = grad_check(&ps, 1e-5, |_, tape| {
            let m = tape.param(mu);
            let l = tape.param(lv);
            let clamped = tape.clamp(l, LOG_VAR_MIN, LOG_VAR_MAX);
            let dist = ContextDistribution {
                mu: m,
                log_var: clamped,
            };
            let c = sample_context_with(tape, &dist, &eps)?;
            tape.dot(c, c)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn score_zero_latent_is_zero() {
        let mut rng = RngState::new(10);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let z = tape.constant(Tensor::zeros(&[3]));
        let c = tape.constant(rng.normal_tensor(&[4]));
        let w = tape.constant(rng.normal_tensor(&[3, 4]));
        let s = score(&mut tape, z, c, w).unwrap();
        assert_eq!(tape.value(s).item(), 0.0);
    }

    #[test]
    fn score_identity_hand_value() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let z = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let c = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let w = tape.constant(Tensor::matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let s = score(&mut tape, z, c, w).unwrap();
        assert_eq!(tape.value(s).item(), 1.0);
    }

    #[test]
    fn score_is_bilinear_in_z() {
        let mut rng = RngState::new(11);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let zt = rng.normal_tensor(&[3]);
        let z = tape.constant(zt.clone());
        let z2 = tape.constant(zt.map(|v| 2.0 * v));
        let c = tape.constant(rng.normal_tensor(&[4]));
        let w = tape.constant(rng.normal_tensor(&[3, 4]));
        let s1 = score(&mut tape, z, c, w).unwrap();
        let s2 = score(&mut tape, z2, c, w).unwrap();
        assert!(close(
            tape.value(s2).item(),
            2.0 * tape.value(s1).item(),
            1e-12
        ));
    }

    #[test]
    fn nce_all_equal_candidates_is_ln_n() {
        let mut rng = RngState::new(12);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let zt = rng.normal_tensor(&[3]);
        let cands: Vec<NodeId> = (0..4).map(|_| tape.constant(zt.clone())).collect();
        let c = tape.constant(rng.normal_tensor(&[4]));
        let w = tape.constant(rng.normal_tensor(&[3, 4]));
        let loss = info_nce_step_loss(&mut tape, c, &cands, 2, w).unwrap();
        assert!(close(tape.value(loss).item(), (4.0f64).ln(), 1e-12));
        assert!(close((4.0f64).ln(), 1.3863, 1e-4));
    }

    #[test]
    fn nce_matches_direct_softmax_oracle() {
        // Scores [2,0,0,0] with the positive at 0: loss = ln(1 + 3 e^-2).
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        // d_c = 1, W = [[1],[0]], c = [1]: score(z) = z[0].
        let w = tape.constant(Tensor::matrix(&[vec![1.0], vec![0.0]]).unwrap());
        let c = tape.constant(Tensor::vector(vec![1.0]));
        let cands: Vec<NodeId> = [2.0, 0.0, 0.0, 0.0]
            .iter()
            .map(|&s| tape.constant(Tensor::vector(vec![s, 7.0])))
            .collect();
        let loss = info_nce_step_loss(&mut tape, c, &cands, 0, w).unwrap();
        let expect = (1.0 + 3.0 * (-2.0f64).exp()).ln();
        assert!(close(tape.value(loss).item(), expect, 1e-12));
    }

    #[test]
    fn nce_decreases_as_positive_dominates() {
        let ps = ParamSet::new();
        let mut losses = Vec::new();
        for &s in &[5.0, 10.0, 20.0] {
            let mut tape = Tape::new(&ps);
            let w = tape.constant(Tensor::matrix(&[vec![1.0]]).unwrap());
            let c = tape.constant(Tensor::vector(vec![1.0]));
            let cands: Vec<NodeId> = [s, 0.0, 0.0, 0.0]
                .iter()
                .map(|&v| tape.constant(Tensor::vector(vec![v])))
                .collect();
            let loss = info_nce_step_loss(&mut tape, c, &cands, 0, w).unwrap();
            losses.push(tape.value(loss).item());
        }
        assert!(losses[0] > losses[1] && losses[1] > losses[2]);
        assert!(losses[2] < 1e-8);
    }

    #[test]
    fn nce_rejects_out_of_range_positive() {
        let mut rng = RngState::new(13);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let c = tape.constant(rng.normal_tensor(&[2]));
        let w = tape.constant(rng.normal_tensor(&[2, 2]));
        let cands: Vec<NodeId> = (0..3)
            .map(|_| tape.constant(rng.normal_tensor(&[2])))
            .collect();
        assert!(matches!(
            info_nce_step_loss(&mut tape, c, &cands, 3, w),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn nce_invariant_to_constant_score_shift() {
        // Adding a constant vector to all candidates shifts every score
        // equally through a fixed (W, c), leaving the set-softmax loss alone.
        let mut rng = RngState::new(14);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let w = tape.constant(rng.normal_tensor(&[3, 2]));
        let c = tape.constant(rng.normal_tensor(&[2]));
        let shift = tape.constant(rng.normal_tensor(&[3]));
        let zs: Vec<Tensor> = (0..4).map(|_| rng.normal_tensor(&[3])).collect();
        let plain: Vec<NodeId> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let mut shifted = Vec::new();
        for &z in &plain {
            shifted.push(tape.add(z, shift).unwrap());
        }
        let l0 = info_nce_step_loss(&mut tape, c, &plain, 1, w).unwrap();
        let l1 = info_nce_step_loss(&mut tape, c, &shifted, 1, w).unwrap();
        assert!(close(tape.value(l0).item(), tape.value(l1).item(), 1e-10));
    }

    #[test]
    fn nce_gradients_pass_grad_check() {
        let mut rng = RngState::new(15);
        let mut ps = ParamSet::new();
        let w = ps.add("w", rng.normal_tensor(&[3, 2]));
        let c = ps.add("c", rng.normal_tensor(&[2]));
        let cands: Vec<ParamId> = (0..4)
            .map(|i| ps.add(&format!("z{i}"), rng.normal_tensor(&[3])))
            .collect();
        let err = grad_check(&ps, 1e-5, |_, tape| {
            let wn = tape.param(w);
            let cn = tape.param(c);
            let zs: Vec<NodeId> = cands.iter().map(|&z| tape.param(z)).collect();
            info_nce_step_loss(tape, cn, &zs, 1, wn)
        })
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn pool_single_row_is_identity() {
        let mut rng = RngState::new(16);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let v = rng.normal_tensor(&[5]);
        let n = tape.constant(v.clone());
        let p = pool_features(&mut tape, &[n]).unwrap();
        assert_eq!(tape.value(p).data(), v.data());
    }

    #[test]
    fn pool_opposite_rows_cancel() {
        let mut rng = RngState::new(17);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let v = rng.normal_tensor(&[5]);
        let a = tape.constant(v.clone());
        let b = tape.constant(v.map(|x| -x));
        let p = pool_features(&mut tape, &[a, b]).unwrap();
        assert!(tape.value(p).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pool_three_rows_componentwise_mean() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 5.0]));
        let c = tape.constant(Tensor::vector(vec![5.0, 11.0]));
        let p = pool_features(&mut tape, &[a, b, c]).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 6.0]);
    }

    #[test]
    fn pool_rejects_empty() {
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        assert!(matches!(
            pool_features(&mut tape, &[]),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn pool_is_permutation_invariant() {
        let mut rng = RngState::new(18);
        let ps = ParamSet::new();
        let mut tape = Tape::new(&ps);
        let rows: Vec<Tensor> = (0..5).map(|_| rng.normal_tensor(&[4])).collect();
        let fwd: Vec<NodeId> = rows.iter().map(|r| tape.constant(r.clone())).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let p1 = pool_features(&mut tape, &fwd).unwrap();
        let p2 = pool_features(&mut tape, &rev).unwrap();
        for (a, b) in tape.value(p1).data().iter().zip(tape.value(p2).data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }
}
