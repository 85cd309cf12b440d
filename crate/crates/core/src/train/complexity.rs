//! Multiply-accumulate accounting.
//!
//! Per-unit costs are derived analytically from layer shapes; the same
//! quantities are then measured by running instrumented forward passes and
//! reading the tape's MAC counter. The training-cost formula prices each
//! candidate of each prediction step as a fresh encode — the accounting
//! model for a sampler that draws negatives from the data distribution —
//! so the measured pass mirrors that, while the production batch objective
//! shares in-batch encodings and is strictly cheaper.

use serde::Serialize;

use crate::data::{Patch, PatchGridSpec};
use crate::error::Result;
use crate::model::{encode_sequence, pool_features, EncoderParams};
use crate::objectives::{classify, CpcModel};
use crate::params::ParamSet;
use crate::rng::RngState;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Predicted and measured multiply-accumulate counts.
#[derive(Clone, Debug, Serialize)]
pub struct ComplexityReport {
    /// Encoder cost per patch.
    pub c_enc: u64,
    /// Aggregator cost per sequence (GRU over the context plus both heads).
    pub c_ag: u64,
    /// Classifier cost per item.
    pub c_cls: u64,
    /// `M (N K + t) c_enc + M c_ag + M c_cls` for one parameter update.
    pub predicted_train: u64,
    pub measured_train: u64,
    /// `patches * c_enc + c_ag + c_cls` for one test item.
    pub predicted_test: u64,
    pub measured_test: u64,
    /// Test cost relative to a supervised classifier over the same patches
    /// (`patches * c_enc + c_cls`).
    pub ssl_test_ratio: f64,
    /// Aggregator cost relative to one encode.
    pub agg_enc_ratio: f64,
    /// Encoder pixel coverage of the overlapping grid relative to one pass
    /// over the raw image (present when a grid spec is given). Overlapping
    /// crops re-encode shared pixels; this is the §-independent caveat a
    /// sequence scheme with less overlap would shrink.
    pub overlap_factor: Option<f64>,
    pub batch_size: usize,
    pub patches_per_item: usize,
}

fn encoder_macs(enc: &EncoderParams, ps: &ParamSet) -> u64 {
    match enc {
        EncoderParams::Conv(c) => {
            let mut shape = c.input_shape.clone();
            if shape.len() == 1 {
                shape = vec![1, 1, shape[0]];
            }
            let mut total = 0u64;
            for layer in &c.layers {
                let ks = ps.get(layer.kernel).shape();
                let (f, ci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
                let ho = (shape[1] - kh) / layer.stride + 1;
                let wo = (shape[2] - kw) / layer.stride + 1;
                total += (f * ci * kh * kw * ho * wo) as u64;
                shape = vec![f, ho, wo];
            }
            let flat: usize = shape.iter().product();
            total + (c.d_z * flat) as u64
        }
        EncoderParams::Text(t) => t
            .groups
            .iter()
            .map(|g| {
                let p = t.sentence_len - g.width + 1;
                (t.channels * g.width * t.embed_dim * p) as u64
            })
            .sum(),
    }
}

fn gru_macs(input_dim: usize, hidden_dim: usize) -> u64 {
    (3 * hidden_dim * (input_dim + hidden_dim)) as u64
}

fn dummy_patch(enc: &EncoderParams) -> Patch {
    match enc {
        EncoderParams::Conv(c) => Patch::Image(Tensor::zeros(&c.input_shape)),
        EncoderParams::Text(t) => Patch::Tokens(vec![0; t.sentence_len]),
    }
}

/// Builds the report for one update of batch size `batch_size` and one test
/// item of `patches_per_item` patches, measuring against instrumented
/// forward passes.
pub fn complexity_report(
    model: &CpcModel,
    ps: &ParamSet,
    batch_size: usize,
    patches_per_item: usize,
    grid: Option<&PatchGridSpec>,
) -> Result<ComplexityReport> {
    let cfg = &model.cfg;
    let c_enc = encoder_macs(&model.encoder, ps);
    let c_ag = cfg.context_len as u64 * gru_macs(cfg.d_z, cfg.d_c) + 2 * (cfg.d_c * cfg.d_c) as u64;
    let c_cls = (model.classifier.m_classes * cfg.d_z) as u64;
    let (m, n, k, t) = (
        batch_size as u64,
        cfg.set_size as u64,
        cfg.pred_steps as u64,
        cfg.context_len as u64,
    );
    let predicted_train = m * (n * k + t) * c_enc + m * c_ag + m * c_cls;
    let predicted_test = patches_per_item as u64 * c_enc + c_ag + c_cls;

    // Measured training pass, one sample at a time: t context encodes, then
    // N fresh candidate encodes per step, one aggregation, one classify.
    let patch = dummy_patch(&model.encoder);
    let measured_train = {
        let mut tape = Tape::new(ps);
        let mut rng = RngState::new(0);
        for _ in 0..batch_size {
            let context: Vec<Patch> = (0..cfg.context_len).map(|_| patch.clone()).collect();
            let z_ctx = encode_sequence(&mut tape, &context, &model.encoder)?;
            for _ in 0..cfg.pred_steps {
                let cands: Vec<Patch> = (0..cfg.set_size).map(|_| patch.clone()).collect();
                let _ = encode_sequence(&mut tape, &cands, &model.encoder)?;
            }
            let dist = model
                .aggregator
                .aggregate_context(&mut tape, &z_ctx, cfg.context_len)?;
            let (c, _) = crate::model::sample_context(&mut tape, &dist, &mut rng)?;
            let _ = c;
            let pooled = pool_features(&mut tape, &z_ctx)?;
            let _ = classify(&mut tape, pooled, &model.classifier)?;
        }
        tape.mac_count()
    };

    // Measured test pass for one item.
    let measured_test = {
        let mut tape = Tape::new(ps);
        let patches: Vec<Patch> = (0..patches_per_item).map(|_| patch.clone()).collect();
        let latents = encode_sequence(&mut tape, &patches, &model.encoder)?;
        let _ = model.aggregator.aggregate_context(
            &mut tape,
            &latents[..cfg.context_len.min(latents.len())],
            cfg.context_len.min(latents.len()),
        )?;
        let pooled = pool_features(&mut tape, &latents)?;
        let _ = classify(&mut tape, pooled, &model.classifier)?;
        tape.mac_count()
    };

    let supervised_test = patches_per_item as u64 * c_enc + c_cls;
    Ok(ComplexityReport {
        c_enc,
        c_ag,
        c_cls,
        predicted_train,
        measured_train,
        predicted_test,
        measured_test,
        ssl_test_ratio: measured_test as f64 / supervised_test as f64,
        agg_enc_ratio: c_ag as f64 / c_enc as f64,
        overlap_factor: grid.map(|g| {
            let side = g.grid_side();
            (side * side * g.patch * g.patch) as f64 / (g.image_size * g.image_size) as f64
        }),
        batch_size,
        patches_per_item,
    })
}

impl ComplexityReport {
    /// Relative gap between measurement and prediction.
    pub fn train_gap(&self) -> f64 {
        (self.measured_train as f64 - self.predicted_train as f64).abs()
            / self.predicted_train as f64
    }

    pub fn test_gap(&self) -> f64 {
        (self.measured_test as f64 - self.predicted_test as f64).abs()
            / self.predicted_test as f64
    }
}
