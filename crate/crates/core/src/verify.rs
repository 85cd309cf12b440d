//! Self-verification suites: gradient checks against central differences,
//! entropy oracles against Monte Carlo, Gumbel-Softmax distributional
//! checks, chance-level contrastive losses at initialization, and the
//! mutual-information bound against synthetic sequences with closed-form
//! ground truth.
//!
//! Each suite returns one [`CheckResult`] per check; the CLI prints them
//! and exits nonzero if any fails. The heavy numbers (draw counts, the
//! noise grid) are pinned here so the library, CLI and acceptance tests
//! all run the same checks.

use crate::data::{build_tasks, split_labeled, SequenceSample, SyntheticSampler, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::grad_check;
use crate::model::{CpcConfig, EncoderSpec};
use crate::objectives::{
    categorical_entropy, ccpc_labeled_bound, ccpc_unlabeled_bound, classify, gaussian_entropy,
    gumbel_softmax_sample, total_objective_cpc, unlabeled_loss_cpc, CcpcModel, CpcBatchNoise,
    CpcModel, EncodedBatch, LossBreakdown,
};
use crate::params::{ParamId, ParamSet};
use crate::rng::RngState;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{plan_epoch, AdamState, Mode, Trainer};

const LN_2PI: f64 = 1.8378770664093453;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

pub const SUITES: [&str; 5] = ["gradients", "entropy", "gumbel", "nce", "bounds"];

/// Runs a named suite ("all" chains every suite).
pub fn run_suite(name: &str) -> Result<Vec<CheckResult>> {
    match name {
        "gradients" => Ok(verify_gradients()),
        "entropy" => Ok(verify_entropy()),
        "gumbel" => Ok(verify_gumbel()),
        "nce" => Ok(verify_nce()),
        "bounds" => Ok(verify_bounds()),
        "all" => {
            let mut out = Vec::new();
            for s in SUITES {
                out.extend(run_suite(s)?);
            }
            Ok(out)
        }
        other => Err(Error::UnknownSuite {
            name: other.to_string(),
        }),
    }
}

fn tiny_cfg() -> CpcConfig {
    CpcConfig {
        context_len: 2,
        pred_steps: 2,
        set_size: 4,
        d_z: 4,
        d_c: 4,
    }
}

fn flat_spec(p: usize) -> EncoderSpec {
    EncoderSpec::Conv {
        input_shape: vec![p],
        layers: vec![],
    }
}

fn tiny_samples(rng: &mut RngState, n: usize, t_len: usize, p: usize, m: usize) -> Vec<SequenceSample> {
    (0..n)
        .map(|i| SequenceSample {
            id: i as u64,
            group: i as u64,
            label: Some(i % m),
            patches: (0..t_len)
                .map(|_| crate::data::Patch::Image(rng.normal_tensor(&[p])))
                .collect(),
        })
        .collect()
}

/// Swaps the near-zero training init of scorers and log-variance heads for
/// O(1)-scaled weights so finite differences are well conditioned.
fn condition(ps: &mut ParamSet, rng: &mut RngState) {
    let targets: Vec<(ParamId, Vec<usize>)> = ps
        .iter()
        .filter(|(_, n, _)| n.starts_with("pred.w") || n.contains("logvar"))
        .map(|(id, _, t)| (id, t.shape().to_vec()))
        .collect();
    for (id, shape) in targets {
        let fan_in = *shape.last().unwrap() as f64;
        *ps.get_mut(id) = rng.normal_tensor(&shape).map(|v| v * 0.5 / fan_in.sqrt());
    }
}

/// Gradient checks with frozen noise: the plain batch objective and both
/// class-conditional bounds, on tiny instances, against eps = 1e-4 central
/// differences.
pub fn verify_gradients() -> Vec<CheckResult> {
    let tol = 1e-4;
    let mut out = Vec::new();

    // Plain semi-supervised batch objective.
    {
        let mut rng = RngState::new(8015);
        let mut ps = ParamSet::new();
        let cfg = tiny_cfg();
        let model = CpcModel::init(cfg.clone(), &flat_spec(5), 3, &mut ps, &mut rng).unwrap();
        condition(&mut ps, &mut rng);
        let samples = tiny_samples(&mut rng, 4, 4, 5, 3);
        let refs: Vec<&SequenceSample> = samples.iter().collect();
        let tasks = build_tasks(&refs, &cfg, &mut rng.derive("tasks")).unwrap();
        let noise = CpcBatchNoise::draw(4, 4, &mut rng.derive("noise"));
        let err = grad_check(&ps, 1e-4, |_, tape| {
            let pairs: Vec<_> = refs.iter().copied().zip(tasks.iter()).collect();
            let out = total_objective_cpc(tape, &model, &pairs[..2], &pairs[2..], 2.0, &noise)?;
            Ok(out.loss)
        })
        .unwrap_or(f64::INFINITY);
        out.push(CheckResult::new(
            "gradients/cpc-total-objective",
            err < tol,
            format!("max rel err {err:.3e} (tol {tol:.0e})"),
        ));
    }

    // Class-conditional labeled and unlabeled bounds.
    {
        let mut rng = RngState::new(8042);
        let mut ps = ParamSet::new();
        let cfg = tiny_cfg();
        let model = CcpcModel::init(cfg.clone(), &flat_spec(5), 3, &mut ps, &mut rng).unwrap();
        condition(&mut ps, &mut rng);
        let samples = tiny_samples(&mut rng, 4, 4, 5, 3);
        let refs: Vec<&SequenceSample> = samples.iter().collect();
        let tasks = build_tasks(&refs, &cfg, &mut rng.derive("tasks")).unwrap();
        let eps = rng.normal_tensor(&[4]);
        let err = grad_check(&ps, 1e-4, |_, tape| {
            let batch = EncodedBatch::encode(tape, &refs, &model.encoder)?;
            let sl = ccpc_labeled_bound(tape, &batch, &samples[0], &tasks[0], &model, &eps)?;
            Ok(sl.loss)
        })
        .unwrap_or(f64::INFINITY);
        out.push(CheckResult::new(
            "gradients/ccpc-labeled-bound",
            err < tol,
            format!("max rel err {err:.3e} (tol {tol:.0e})"),
        ));

        let gumbel = Tensor::vector((0..3).map(|_| rng.gumbel()).collect());
        let err = grad_check(&ps, 1e-4, |_, tape| {
            let batch = EncodedBatch::encode(tape, &refs, &model.encoder)?;
            let sl = ccpc_unlabeled_bound(
                tape, &batch, &samples[1], &tasks[1], &model, 0.5, &eps, &gumbel,
            )?;
            Ok(sl.loss)
        })
        .unwrap_or(f64::INFINITY);
        out.push(CheckResult::new(
            "gradients/ccpc-unlabeled-bound",
            err < tol,
            format!("max rel err {err:.3e} (tol {tol:.0e})"),
        ));
    }
    out
}

/// Entropy closed forms against Monte Carlo `-E[log q]` over 1e5 draws,
/// asserted within three standard errors.
pub fn verify_entropy() -> Vec<CheckResult> {
    let n = 100_000usize;
    let mut out = Vec::new();

    {
        let mut rng = RngState::new(61);
        let mu: Vec<f64> = vec![0.4, -1.0, 0.9, 0.0];
        let log_var: Vec<f64> = vec![0.2, -0.5, 0.0, 0.8];
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let mut lq = 0.0;
            for i in 0..mu.len() {
                let sd = (0.5 * log_var[i]).exp();
                let x = mu[i] + sd * rng.normal();
                lq += -0.5 * (LN_2PI + log_var[i] + (x - mu[i]) * (x - mu[i]) / (sd * sd));
            }
            sum += -lq;
            sumsq += lq * lq;
        }
        let mc = sum / n as f64;
        let var = (sumsq / n as f64 - mc * mc).max(0.0);
        let se = (var / n as f64).sqrt();
        let closed = 0.5 * log_var.iter().map(|lv| 1.0 + LN_2PI + lv).sum::<f64>();
        out.push(CheckResult::new(
            "entropy/gaussian-vs-monte-carlo",
            (closed - mc).abs() <= 3.0 * se,
            format!("closed {closed:.5} vs mc {mc:.5} (3se {:.5})", 3.0 * se),
        ));
    }

    {
        let mut rng = RngState::new(62);
        let probs: [f64; 5] = [0.4, 0.25, 0.2, 0.1, 0.05];
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut pick = probs.len() - 1;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            let lq = probs[pick].ln();
            sum += -lq;
            sumsq += lq * lq;
        }
        let mc = sum / n as f64;
        let var = (sumsq / n as f64 - mc * mc).max(0.0);
        let se = (var / n as f64).sqrt();
        let closed = categorical_entropy(&probs).unwrap();
        out.push(CheckResult::new(
            "entropy/categorical-vs-monte-carlo",
            (closed - mc).abs() <= 3.0 * se,
            format!("closed {closed:.5} vs mc {mc:.5} (3se {:.5})", 3.0 * se),
        ));
    }
    out
}

/// Distributional checks of the label relaxation: argmax frequencies match
/// the target categorical (1e5 draws, four-sigma bands) for M in {3, 10}
/// and tau in {1.0, 0.1}; at tau = 0.01 the max coordinate exceeds 0.99 in
/// at least 99% of draws (on a skewed target, which sets the near-tie rate
/// of the top two relaxed logits).
pub fn verify_gumbel() -> Vec<CheckResult> {
    let n = 100_000usize;
    let ps = ParamSet::new();
    let mut out = Vec::new();
    let targets: [(&str, Vec<f64>); 2] = [
        ("m3", vec![0.5, 0.3, 0.2]),
        ("m10", vec![0.2, 0.17, 0.14, 0.12, 0.1, 0.08, 0.07, 0.05, 0.04, 0.03]),
    ];
    for (label, probs) in &targets {
        let lp_t = Tensor::vector(probs.iter().map(|p| p.ln()).collect());
        for &tau in &[1.0, 0.1] {
            let mut rng = RngState::new(63).derive(label).derive_u64((tau * 10.0) as u64);
            let mut counts = vec![0u32; probs.len()];
            for _ in 0..n {
                let mut tape = Tape::new(&ps);
                let lp = tape.constant(lp_t.clone());
                let (y, _) = gumbel_softmax_sample(&mut tape, lp, tau, &mut rng).unwrap();
                let d = tape.value(y).data();
                let argmax = (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
                counts[argmax] += 1;
            }
            let mut worst = 0.0f64;
            let mut ok = true;
            for (i, &p) in probs.iter().enumerate() {
                let freq = f64::from(counts[i]) / n as f64;
                let band = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
                let dev = (freq - p).abs() / band;
                worst = worst.max(dev);
                ok &= (freq - p).abs() <= band;
            }
            out.push(CheckResult::new(
                &format!("gumbel/argmax-frequencies-{label}-tau{tau}"),
                ok,
                format!("worst deviation {worst:.2} of the 4-sigma band"),
            ));
        }
    }
    {
        let target: [f64; 3] = [0.92, 0.05, 0.03];
        let lp_t = Tensor::vector(target.iter().map(|p| p.ln()).collect());
        let mut rng = RngState::new(64);
        let mut hard = 0u32;
        for _ in 0..n {
            let mut tape = Tape::new(&ps);
            let lp = tape.constant(lp_t.clone());
            let (y, _) = gumbel_softmax_sample(&mut tape, lp, 0.01, &mut rng).unwrap();
            let max = tape.value(y).data().iter().copied().fold(0.0, f64::max);
            if max > 0.99 {
                hard += 1;
            }
        }
        let rate = f64::from(hard) / n as f64;
        out.push(CheckResult::new(
            "gumbel/near-vertex-at-low-temperature",
            rate >= 0.99,
            format!("max coordinate > 0.99 in {:.2}% of draws", rate * 100.0),
        ));
    }
    out
}

/// Chance-level contrastive losses at random initialization: the mean
/// per-step loss over 20 fresh seeds must land within 10% of ln N.
pub fn verify_nce() -> Vec<CheckResult> {
    let cfg = CpcConfig {
        context_len: 2,
        pred_steps: 2,
        set_size: 8,
        d_z: 16,
        d_c: 16,
    };
    let ln_n = (cfg.set_size as f64).ln();
    let mut means = Vec::new();
    for seed in 0..20u64 {
        let mut rng = RngState::new(7000 + seed);
        let mut ps = ParamSet::new();
        let model = CpcModel::init(cfg.clone(), &flat_spec(8), 4, &mut ps, &mut rng).unwrap();
        let samples = tiny_samples(&mut rng, 8, 4, 8, 4);
        let refs: Vec<&SequenceSample> = samples.iter().collect();
        let tasks = build_tasks(&refs, &cfg, &mut rng.derive("tasks")).unwrap();
        let noise = CpcBatchNoise::draw(8, cfg.d_c, &mut rng.derive("noise"));
        let mut tape = Tape::new(&ps);
        let batch = EncodedBatch::encode(&mut tape, &refs, &model.encoder).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, s) in refs.iter().enumerate() {
            let sl = unlabeled_loss_cpc(&mut tape, &batch, s, &tasks[i], &model, &noise.context_eps[i])
                .unwrap();
            sum += sl.nce_per_step.iter().sum::<f64>();
            count += sl.nce_per_step.len();
        }
        means.push(sum / count as f64);
    }
    let grand = means.iter().sum::<f64>() / means.len() as f64;
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ok = means.iter().all(|m| *m >= 0.9 * ln_n && *m <= 1.1 * ln_n);
    vec![CheckResult::new(
        "nce/chance-level-at-initialization",
        ok,
        format!(
            "mean per-step loss over 20 seeds in [{lo:.4}, {hi:.4}] (grand {grand:.4}), ln N = {ln_n:.4}"
        ),
    )]
}

/// The sigma grid of the bound suite, chosen so the true mutual information
/// crosses 0.5 nats inside the grid.
pub const BOUND_SIGMA_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Result of one noise level of the bound suite.
#[derive(Clone, Debug)]
pub struct BoundPoint {
    pub sigma: f64,
    pub true_mi: f64,
    pub estimate: f64,
    pub se: f64,
}

fn nce_only_model(seed: u64, patch_dim: usize) -> (ParamSet, CpcModel) {
    let cfg = CpcConfig {
        context_len: 2,
        pred_steps: 1,
        set_size: 8,
        d_z: 8,
        d_c: 8,
    };
    let mut rng = RngState::new(seed);
    let mut ps = ParamSet::new();
    let model = CpcModel::init(cfg, &flat_spec(patch_dim), 2, &mut ps, &mut rng).unwrap();
    (ps, model)
}

fn train_nce_only(
    ps: &mut ParamSet,
    model: &CpcModel,
    data: &[SequenceSample],
    steps: usize,
    batch: usize,
    lr: f64,
    rng: &mut RngState,
) -> Result<()> {
    let mut adam = AdamState::new(ps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut pos = 0usize;
    rng.shuffle(&mut order);
    for step in 0..steps {
        let mut refs: Vec<&SequenceSample> = Vec::with_capacity(batch);
        for _ in 0..batch {
            if pos == order.len() {
                rng.shuffle(&mut order);
                pos = 0;
            }
            refs.push(&data[order[pos]]);
            pos += 1;
        }
        let mut task_rng = rng.derive("tasks").derive_u64(step as u64);
        let mut noise_rng = rng.derive("noise").derive_u64(step as u64);
        let tasks = build_tasks(&refs, &model.cfg, &mut task_rng)?;
        let noise = CpcBatchNoise::draw(refs.len(), model.cfg.d_c, &mut noise_rng);
        let grads = {
            let mut tape = Tape::new(ps);
            let batch_enc = EncodedBatch::encode(&mut tape, &refs, &model.encoder)?;
            let mut losses = Vec::with_capacity(refs.len());
            for (i, s) in refs.iter().enumerate() {
                let sl = unlabeled_loss_cpc(
                    &mut tape,
                    &batch_enc,
                    s,
                    &tasks[i],
                    model,
                    &noise.context_eps[i],
                )?;
                losses.push(sl.loss);
            }
            let stacked = tape.stack_scalars(&losses)?;
            let total = tape.sum(stacked);
            tape.backward(total)?
        };
        adam.apply(ps, &grads, lr, 0.0)?;
    }
    Ok(())
}

/// Mean per-step contrastive loss over fresh evaluation sequences, with the
/// standard error of the mean over per-sequence losses.
pub fn eval_nce_loss(
    ps: &ParamSet,
    model: &CpcModel,
    data: &[SequenceSample],
    rng: &mut RngState,
) -> Result<(f64, f64)> {
    let mut values = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let refs: Vec<&SequenceSample> = chunk.iter().collect();
        let tasks = build_tasks(&refs, &model.cfg, rng)?;
        let noise = CpcBatchNoise::draw(refs.len(), model.cfg.d_c, rng);
        let mut tape = Tape::new(ps);
        let batch = EncodedBatch::encode(&mut tape, &refs, &model.encoder)?;
        for (i, s) in refs.iter().enumerate() {
            let sl = unlabeled_loss_cpc(&mut tape, &batch, s, &tasks[i], model, &noise.context_eps[i])?;
            values.push(sl.nce_per_step.iter().sum::<f64>() / sl.nce_per_step.len() as f64);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Trains a small contrastive model per noise level and compares the
/// implied bound estimate against the closed-form mutual information.
pub fn bound_grid(seed: u64) -> Result<Vec<BoundPoint>> {
    let spec = SyntheticSpec {
        m_classes: 1,
        d_latent: 2,
        patch_dim: 4,
        seq_len: 3,
        noise_sigma: 1.0,
        sigma_grid: Some(BOUND_SIGMA_GRID.to_vec()),
    };
    let sampler = SyntheticSampler::new(spec, seed)?;
    let mut out = Vec::new();
    for (i, &sigma) in BOUND_SIGMA_GRID.iter().enumerate() {
        let mut data_rng = RngState::new(seed).derive("bounds.data").derive_u64(i as u64);
        let train = sampler.generate(1024, sigma, 0, &mut data_rng);
        let eval = sampler.generate(512, sigma, 10_000, &mut data_rng);
        let (mut ps, model) = nce_only_model(seed ^ 0x5eed, 4);
        let mut train_rng = RngState::new(seed).derive("bounds.train").derive_u64(i as u64);
        train_nce_only(&mut ps, &model, &train, 400, 16, 5e-3, &mut train_rng)?;
        let mut eval_rng = RngState::new(seed).derive("bounds.eval").derive_u64(i as u64);
        let (mean_loss, se) = eval_nce_loss(&ps, &model, &eval, &mut eval_rng)?;
        let estimate = (model.cfg.set_size as f64).ln() - mean_loss;
        let true_mi = sampler.mi_prefix_vs_next(model.cfg.context_len, sigma)?;
        out.push(BoundPoint {
            sigma,
            true_mi,
            estimate,
            se,
        });
    }
    Ok(out)
}

/// The bound suite: on every grid point the trained estimate stays below
/// the true mutual information plus three standard errors, and is strictly
/// positive wherever the truth exceeds 0.5 nats. A final check confirms the
/// single-draw estimator agrees with a 16-draw average in expectation.
pub fn verify_bounds() -> Vec<CheckResult> {
    let mut out = Vec::new();
    match bound_grid(4242) {
        Ok(points) => {
            for p in &points {
                let below = p.estimate <= p.true_mi + 3.0 * p.se;
                let positive_ok = p.true_mi <= 0.5 || p.estimate > 0.0;
                out.push(CheckResult::new(
                    &format!("bounds/sigma-{}", p.sigma),
                    below && positive_ok,
                    format!(
                        "estimate {:.4} (se {:.4}) vs true mi {:.4}",
                        p.estimate, p.se, p.true_mi
                    ),
                ));
            }
            let monotone = points.windows(2).all(|w| w[0].true_mi > w[1].true_mi);
            out.push(CheckResult::new(
                "bounds/true-mi-monotone-in-sigma",
                monotone,
                format!(
                    "grid {:?}",
                    points.iter().map(|p| p.true_mi).collect::<Vec<_>>()
                ),
            ));
        }
        Err(e) => out.push(CheckResult::new("bounds/grid", false, e.to_string())),
    }
    out.push(single_vs_averaged_estimator());
    out
}

/// The training estimator uses one reparameterized context draw; averaging
/// 16 draws per task must estimate the same expectation. Compares the two
/// estimators' means over a fixed random model within three combined
/// standard errors.
fn single_vs_averaged_estimator() -> CheckResult {
    let mut rng = RngState::new(77);
    let (ps, model) = nce_only_model(77, 4);
    let spec = SyntheticSpec {
        m_classes: 1,
        d_latent: 2,
        patch_dim: 4,
        seq_len: 3,
        noise_sigma: 0.5,
        sigma_grid: None,
    };
    let sampler = SyntheticSampler::new(spec, 78).unwrap();
    let data = sampler.generate(64, 0.5, 0, &mut rng.derive("data"));
    let refs: Vec<&SequenceSample> = data.iter().collect();
    let tasks = build_tasks(&refs, &model.cfg, &mut rng.derive("tasks")).unwrap();

    let draw_mean = |reps: usize, rng: &mut RngState| -> (f64, f64) {
        // Mean over sequences of the rep-averaged per-step loss.
        let mut per_estimate = Vec::new();
        for (i, s) in refs.iter().enumerate() {
            let mut acc = 0.0;
            let mut tape = Tape::new(&ps);
            let batch = EncodedBatch::encode(&mut tape, &refs, &model.encoder).unwrap();
            for _ in 0..reps {
                let noise = rng.normal_tensor(&[model.cfg.d_c]);
                let sl = unlabeled_loss_cpc(&mut tape, &batch, s, &tasks[i], &model, &noise).unwrap();
                acc += sl.nce_per_step.iter().sum::<f64>();
            }
            per_estimate.push(acc / reps as f64);
        }
        let n = per_estimate.len() as f64;
        let mean = per_estimate.iter().sum::<f64>() / n;
        let var = per_estimate
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (n - 1.0);
        (mean, (var / n).sqrt())
    };
    // Repeat the single-draw estimator several times so both sides carry
    // comparable Monte Carlo error.
    let (single, se_s) = draw_mean(8, &mut rng.derive("single"));
    let (averaged, se_a) = draw_mean(16, &mut rng.derive("avg"));
    let band = 3.0 * (se_s * se_s + se_a * se_a).sqrt();
    CheckResult::new(
        "bounds/single-vs-16-sample-estimator",
        (single - averaged).abs() <= band,
        format!("single {single:.4} vs averaged {averaged:.4} (band {band:.4})"),
    )
}

/// Supervised-only parity: the trainer in supervised mode must follow the
/// trajectory of a hand-rolled classifier loop exactly.
pub fn supervised_matches_plain_classifier(seed: u64) -> Result<CheckResult> {
    use crate::objectives::supervised_loss;
    let cfg = crate::train::TrainConfig {
        mode: Mode::SupervisedOnly,
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 3,
        alpha: Some(0.0),
        weight_decay: 1e-4,
        seed,
        cpc: tiny_cfg(),
        gumbel: Default::default(),
        eval_k: vec![1],
        record_wall_time: false,
        checkpoint_every: 0,
    };
    let mut rng = RngState::new(seed).derive("data");
    let all = tiny_samples(&mut rng, 12, 4, 5, 3);
    let split = split_labeled(all, 0.99, &mut RngState::new(seed).derive("split"));
    // With fraction ~1 every group keeps its label; fall back to manual.
    let labeled = match split {
        Ok(s) => s.labeled,
        Err(_) => tiny_samples(&mut rng, 12, 4, 5, 3),
    };
    let data = crate::train::TrainData {
        labeled: labeled.clone(),
        unlabeled: vec![],
        eval: vec![],
    };
    let mut trainer = Trainer::new(cfg.clone(), &flat_spec(5), 3, 0.0)?;
    let mut trainer_losses = Vec::new();
    for _ in 0..cfg.epochs {
        let m = trainer.run_epoch(&data, 1)?;
        trainer_losses.push(m.j_total);
    }

    // Plain classifier loop: same init stream, same shuffles, same update.
    let root = RngState::new(seed);
    let mut init_rng = root.derive("init");
    let mut ps = ParamSet::new();
    let model = CpcModel::init(tiny_cfg(), &flat_spec(5), 3, &mut ps, &mut init_rng)?;
    let mut adam = AdamState::new(&ps);
    let mut plain_losses = Vec::new();
    for epoch in 0..cfg.epochs as u64 {
        let mut shuffle_rng = root.derive("shuffle").derive_u64(epoch);
        let plans = plan_epoch(Mode::SupervisedOnly, labeled.len(), 0, cfg.batch_size, &mut shuffle_rng)?;
        let mut sum = 0.0;
        for plan in &plans {
            let refs: Vec<&SequenceSample> = plan.labeled.iter().map(|&i| &labeled[i]).collect();
            let grads = {
                let mut tape = Tape::new(&ps);
                let out = supervised_loss(&mut tape, &model, &refs)?;
                sum += out.breakdown.total;
                tape.backward(out.loss)?
            };
            adam.apply(&mut ps, &grads, cfg.learning_rate, cfg.weight_decay)?;
        }
        plain_losses.push(sum / plans.len() as f64);
    }
    let identical = trainer_losses
        .iter()
        .zip(&plain_losses)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(CheckResult::new(
        "supervised/plain-classifier-parity",
        identical,
        format!("trainer {trainer_losses:?} vs plain {plain_losses:?}"),
    ))
}

/// Unlabeled batch halves must leave the classifier untouched in the plain
/// objective (its loss has no classification term for unlabeled data).
pub fn unlabeled_classifier_gradient_is_zero(seed: u64) -> Result<CheckResult> {
    let mut rng = RngState::new(seed);
    let mut ps = ParamSet::new();
    let cfg = tiny_cfg();
    let model = CpcModel::init(cfg.clone(), &flat_spec(5), 3, &mut ps, &mut rng)?;
    let samples = tiny_samples(&mut rng, 4, 4, 5, 3);
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let tasks = build_tasks(&refs, &cfg, &mut rng.derive("tasks"))?;
    let noise = CpcBatchNoise::draw(4, cfg.d_c, &mut rng.derive("noise"));
    let mut tape = Tape::new(&ps);
    let pairs: Vec<_> = refs.iter().copied().zip(tasks.iter()).collect();
    // Unlabeled-only batch: alpha-weighted classification never appears.
    let out = total_objective_cpc(&mut tape, &model, &[], &pairs, 0.0, &noise)?;
    let grads = tape.backward(out.loss)?;
    let w_zero = grads.get(model.classifier.head.w).is_none();
    let b_zero = grads.get(model.classifier.head.b).is_none();
    Ok(CheckResult::new(
        "ssl/unlabeled-classifier-gradient-zero",
        w_zero && b_zero,
        format!("classifier weight grad absent: {w_zero}, bias grad absent: {b_zero}"),
    ))
}

/// Training loss at random initialization for labeled items:
/// `K ln N + ln M` within 10%, checked over 20 seeds.
pub fn init_loss_matches_symmetry(seeds: u64) -> Result<CheckResult> {
    let cfg = CpcConfig {
        context_len: 2,
        pred_steps: 2,
        set_size: 8,
        d_z: 16,
        d_c: 16,
    };
    let m_classes = 4;
    let expect = cfg.pred_steps as f64 * (cfg.set_size as f64).ln() + (m_classes as f64).ln();
    let mut ok = true;
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = RngState::new(9100 + seed);
        let mut ps = ParamSet::new();
        let model = CpcModel::init(cfg.clone(), &flat_spec(8), m_classes, &mut ps, &mut rng)?;
        let samples = tiny_samples(&mut rng, 8, 4, 8, m_classes);
        let refs: Vec<&SequenceSample> = samples.iter().collect();
        let tasks = build_tasks(&refs, &cfg, &mut rng.derive("tasks"))?;
        let noise = CpcBatchNoise::draw(8, cfg.d_c, &mut rng.derive("noise"));
        let mut tape = Tape::new(&ps);
        let batch = EncodedBatch::encode(&mut tape, &refs, &model.encoder)?;
        let mut sum = 0.0;
        for (i, s) in refs.iter().enumerate() {
            let sl = crate::objectives::labeled_loss_cpc(
                &mut tape,
                &batch,
                s,
                &tasks[i],
                &model,
                &noise.context_eps[i],
            )?;
            sum += tape.value(sl.loss).item();
        }
        let mean = sum / refs.len() as f64;
        let rel = (mean - expect).abs() / expect;
        worst = worst.max(rel);
        ok &= rel <= 0.10;
    }
    Ok(CheckResult::new(
        "ssl/init-loss-symmetry",
        ok,
        format!("worst relative deviation {worst:.4} from K ln N + ln M = {expect:.4}"),
    ))
}

pub fn breakdown_is_consistent(b: &LossBreakdown) -> bool {
    (b.total - b.parts_total()).abs() < 1e-10
}


/// Desk-scale semi-supervised experiment on synthetic 10-class sequences:
/// shared class+factor structure inside every patch, heavy per-patch noise.
/// One call trains one mode at one labeled fraction and returns final
/// top-1 accuracy on a held-out set.
#[derive(Clone, Debug)]
pub struct DeskExperiment {
    pub n_train: usize,
    pub n_eval: usize,
    pub patch_dim: usize,
    pub d_z: usize,
    pub sigma: f64,
    pub fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Classification weight; `None` falls back to the `8 * rho` default.
    pub alpha: Option<f64>,
}

impl Default for DeskExperiment {
    fn default() -> Self {
        Self {
            n_train: 1500,
            n_eval: 300,
            patch_dim: 32,
            d_z: 8,
            sigma: 2.0,
            fraction: 0.01,
            epochs: 4,
            learning_rate: 2e-3,
            batch_size: 16,
            alpha: None,
        }
    }
}

fn desk_spec(patch_dim: usize, sigma: f64) -> SyntheticSpec {
    SyntheticSpec {
        m_classes: 10,
        d_latent: 2,
        patch_dim,
        seq_len: 4,
        noise_sigma: sigma,
        sigma_grid: None,
    }
}

/// Runs one desk experiment; `seed` controls data, split and model init.
/// The supervised baseline shares the encoder, dimensions, optimizer and
/// batch size, trains with weight decay on the labeled set only, and gets a
/// step-matched epoch budget (its epochs are scaled so the total update
/// count matches the SSL run).
pub fn run_desk_experiment(mode: Mode, ex: &DeskExperiment, seed: u64) -> Result<f64> {
    let sampler = SyntheticSampler::new(desk_spec(ex.patch_dim, ex.sigma), 0xD35C_0000 ^ seed)?;
    let mut data_rng = RngState::new(seed).derive("desk.data");
    let train_all = sampler.generate(ex.n_train, ex.sigma, 0, &mut data_rng);
    let eval = sampler.generate(ex.n_eval, ex.sigma, 1_000_000, &mut data_rng);
    let split = split_labeled(train_all, ex.fraction, &mut RngState::new(seed).derive("desk.split"))?;
    let alpha = ex.alpha.unwrap_or_else(|| split.alpha_default());
    let (n_lab, n_unl) = (split.labeled.len(), split.unlabeled.len());

    let cpc = CpcConfig {
        context_len: 2,
        pred_steps: 2,
        set_size: 8,
        d_z: ex.d_z,
        d_c: 16,
    };
    let half = ex.batch_size / 2;
    let ssl_steps = ex.epochs * (n_unl / half).max(1);
    let epochs = match mode {
        Mode::SupervisedOnly => {
            let per_epoch = (n_lab / ex.batch_size).max(1);
            ssl_steps.div_ceil(per_epoch)
        }
        _ => ex.epochs,
    };
    let cfg = crate::train::TrainConfig {
        mode,
        learning_rate: ex.learning_rate,
        batch_size: ex.batch_size,
        epochs,
        alpha: None,
        weight_decay: if mode == Mode::SupervisedOnly { 1e-4 } else { 0.0 },
        seed,
        cpc,
        gumbel: Default::default(),
        eval_k: vec![1, 5],
        record_wall_time: false,
        checkpoint_every: 0,
    };
    let spec = flat_spec(ex.patch_dim);
    let mut trainer = Trainer::new(cfg, &spec, 10, alpha)?;
    let data = crate::train::TrainData {
        labeled: split.labeled,
        unlabeled: split.unlabeled,
        eval,
    };
    let metrics = trainer.run(&data, 1, |_, _| Ok(()))?;
    Ok(metrics.last().map_or(0.0, |m| m.top1))
}

/// Parameters of the raster experiment: oriented-bar images whose class is
/// the bar angle, with positional jitter, intensity jitter and pixel noise.
/// A linear readout of raw pixels does poorly under the jitter, which is
/// what leaves room for contrastively learned conv features.
#[derive(Clone, Debug)]
pub struct RasterSpec {
    pub image_size: usize,
    pub n_classes: usize,
    pub jitter: f64,
    pub noise: f64,
    pub bar_halflength: f64,
    pub bar_width: f64,
}

impl Default for RasterSpec {
    fn default() -> Self {
        Self {
            image_size: 28,
            n_classes: 10,
            jitter: 3.0,
            noise: 0.08,
            bar_halflength: 9.0,
            bar_width: 1.1,
        }
    }
}

/// Renders one image of the given class, quantized to u8 levels exactly as
/// the IDX format stores them.
pub fn raster_image(spec: &RasterSpec, class: usize, rng: &mut RngState) -> Tensor {
    let n = spec.image_size;
    let angle = std::f64::consts::PI * class as f64 / spec.n_classes as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    let cx = n as f64 / 2.0 + spec.jitter * (2.0 * rng.uniform() - 1.0);
    let cy = n as f64 / 2.0 + spec.jitter * (2.0 * rng.uniform() - 1.0);
    let intensity = 0.65 + 0.35 * rng.uniform();
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let px = x as f64 - cx;
            let py = y as f64 - cy;
            // Distance to the bar segment through (cx, cy) at `angle`.
            let along = (px * dx + py * dy).clamp(-spec.bar_halflength, spec.bar_halflength);
            let qx = px - along * dx;
            let qy = py - along * dy;
            let dist2 = qx * qx + qy * qy;
            let v = intensity * (-dist2 / (2.0 * spec.bar_width * spec.bar_width)).exp()
                + spec.noise * rng.normal();
            let q = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            data.push(q);
        }
    }
    Tensor::new(vec![1, n, n], data).expect("shape")
}

/// A labeled raster image set with balanced-on-average classes.
pub fn raster_images(
    spec: &RasterSpec,
    count: usize,
    rng: &mut RngState,
) -> (Vec<Tensor>, Vec<usize>) {
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.below(spec.n_classes as u64) as usize;
        images.push(raster_image(spec, class, rng));
        labels.push(class);
    }
    (images, labels)
}

/// Cuts raster images into column sequences over the given grid. Groups are
/// image indices offset by `group_base`, so train/eval sets stay disjoint.
pub fn raster_sequences(
    images: &[Tensor],
    labels: &[usize],
    grid: &crate::data::PatchGridSpec,
    group_base: u64,
) -> Result<Vec<SequenceSample>> {
    let side = grid.grid_side() as u64;
    let mut out = Vec::with_capacity(images.len() * side as usize);
    for (i, (img, &label)) in images.iter().zip(labels).enumerate() {
        let patches = crate::data::extract_patch_grid(img, grid)?;
        let group = group_base + i as u64;
        out.extend(crate::data::grid_to_sequences(
            &patches,
            Some(label),
            group * side,
            group,
        ));
    }
    Ok(out)
}

/// The raster counterpart of [`run_desk_experiment`]: 28x28 oriented-bar
/// images over a 3x3 patch grid with a small conv encoder.
#[derive(Clone, Debug)]
pub struct RasterExperiment {
    pub n_train: usize,
    pub n_eval: usize,
    pub fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: Option<f64>,
    pub spec: RasterSpec,
}

impl Default for RasterExperiment {
    fn default() -> Self {
        Self {
            n_train: 1500,
            n_eval: 250,
            fraction: 0.01,
            epochs: 4,
            learning_rate: 2e-3,
            batch_size: 16,
            alpha: None,
            spec: RasterSpec::default(),
        }
    }
}

pub fn desk_grid() -> crate::data::PatchGridSpec {
    crate::data::PatchGridSpec {
        image_size: 28,
        patch: 12,
        stride: 8,
    }
}

pub fn desk_conv_spec() -> EncoderSpec {
    EncoderSpec::Conv {
        input_shape: vec![1, 12, 12],
        layers: vec![(16, 5, 2)],
    }
}

/// Runs one raster experiment and returns final top-1 accuracy over eval
/// images (column sequences of an image vote as one group).
pub fn run_desk_raster_experiment(mode: Mode, ex: &RasterExperiment, seed: u64) -> Result<f64> {
    let grid = desk_grid();
    let mut data_rng = RngState::new(seed).derive("raster.data");
    let (train_imgs, train_labels) = raster_images(&ex.spec, ex.n_train, &mut data_rng);
    let (eval_imgs, eval_labels) = raster_images(&ex.spec, ex.n_eval, &mut data_rng);
    let train_all = raster_sequences(&train_imgs, &train_labels, &grid, 0)?;
    let eval = raster_sequences(&eval_imgs, &eval_labels, &grid, 1_000_000)?;
    let split = split_labeled(train_all, ex.fraction, &mut RngState::new(seed).derive("raster.split"))?;
    let alpha = ex.alpha.unwrap_or_else(|| split.alpha_default());
    let (n_lab, n_unl) = (split.labeled.len(), split.unlabeled.len());

    let cpc = CpcConfig {
        context_len: 2,
        pred_steps: 1,
        set_size: 8,
        d_z: 32,
        d_c: 16,
    };
    let half = ex.batch_size / 2;
    let ssl_steps = ex.epochs * (n_unl / half).max(1);
    let epochs = match mode {
        Mode::SupervisedOnly => {
            let per_epoch = (n_lab / ex.batch_size).max(1);
            ssl_steps.div_ceil(per_epoch)
        }
        _ => ex.epochs,
    };
    let cfg = crate::train::TrainConfig {
        mode,
        learning_rate: ex.learning_rate,
        batch_size: ex.batch_size,
        epochs,
        alpha: None,
        weight_decay: if mode == Mode::SupervisedOnly { 1e-4 } else { 0.0 },
        seed,
        cpc,
        gumbel: Default::default(),
        eval_k: vec![1, 5],
        record_wall_time: false,
        checkpoint_every: 0,
    };
    let mut trainer = Trainer::new(cfg, &desk_conv_spec(), ex.spec.n_classes, alpha)?;
    let data = crate::train::TrainData {
        labeled: split.labeled,
        unlabeled: split.unlabeled,
        eval: vec![],
    };
    trainer.run(&data, 1, |_, _| Ok(()))?;
    let acc = crate::train::evaluate_topk(trainer.model(), trainer.params(), &eval, &[1], 1)?;
    Ok(acc[0].1)
}
