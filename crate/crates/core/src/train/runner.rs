//! The training loop: deterministic batch planning, per-step noise derived
//! from (seed, step), Adam updates, per-epoch evaluation and metrics.

use std::time::Instant;

use crate::data::{build_tasks, ContrastiveTask, SequenceSample};
use crate::error::{Error, Result};
use crate::model::EncoderSpec;
use crate::objectives::{
    supervised_loss, total_objective_ccpc, total_objective_cpc, CcpcBatchNoise, CpcBatchNoise,
    LossBreakdown,
};
use crate::params::ParamSet;
use crate::rng::RngState;
use crate::tape::Tape;

use super::{
    evaluate_topk, mi_lower_bound, plan_epoch, AdamState, Checkpoint, EpochMetrics, Mode, Model,
    TrainConfig,
};

/// The three data pools of a run. `eval` is a held-out labeled set; it never
/// feeds gradients.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<SequenceSample>,
    pub unlabeled: Vec<SequenceSample>,
    pub eval: Vec<SequenceSample>,
}

/// Owns the model, parameters and optimizer state of one run.
///
/// All randomness flows from the root seed through labeled subsystem
/// streams (`init`, `shuffle`, `tasks`, `noise`), each further split by
/// epoch or step index. Resuming from a checkpoint therefore reproduces the
/// uninterrupted run exactly.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub alpha: f64,
    model: Model,
    params: ParamSet,
    adam: AdamState,
    root: RngState,
    epoch: u64,
    global_step: u64,
}

impl Trainer {
    pub fn new(
        cfg: TrainConfig,
        enc_spec: &EncoderSpec,
        m_classes: usize,
        alpha: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let root = RngState::new(cfg.seed);
        let mut init_rng = root.derive("init");
        let mut params = ParamSet::new();
        let model = Model::init(
            cfg.mode,
            cfg.cpc.clone(),
            enc_spec,
            m_classes,
            &mut params,
            &mut init_rng,
        )?;
        let adam = AdamState::new(&params);
        Ok(Self {
            cfg,
            alpha,
            model,
            params,
            adam,
            root,
            epoch: 0,
            global_step: 0,
        })
    }

    /// Rebuilds a trainer from a checkpoint. The configured mode must match;
    /// the checkpoint's seed wins so the random streams continue unchanged.
    pub fn resume(
        cfg: TrainConfig,
        enc_spec: &EncoderSpec,
        m_classes: usize,
        alpha: f64,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        if cfg.mode != ckpt.mode {
            return Err(Error::CheckpointIncompatible {
                detail: format!(
                    "checkpoint was written in mode {}, config says {}",
                    ckpt.mode.as_str(),
                    cfg.mode.as_str()
                ),
            });
        }
        let mut cfg = cfg;
        cfg.seed = ckpt.seed;
        let mut trainer = Self::new(cfg, enc_spec, m_classes, alpha)?;
        ckpt.restore(&mut trainer.params, &mut trainer.adam)?;
        trainer.epoch = ckpt.epoch;
        trainer.global_step = ckpt.global_step;
        Ok(trainer)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            self.cfg.mode,
            self.epoch,
            self.global_step,
            self.cfg.seed,
            &self.params,
            &self.adam,
        )
    }

    /// One forward/backward/update on explicit batch halves.
    pub fn train_step(
        &mut self,
        labeled: &[&SequenceSample],
        unlabeled: &[&SequenceSample],
    ) -> Result<LossBreakdown> {
        let mut task_rng = self.root.derive("tasks").derive_u64(self.global_step);
        let mut noise_rng = self.root.derive("noise").derive_u64(self.global_step);
        let (loss, breakdown, grads) = {
            let mut tape = Tape::new(&self.params);
            let out = match (&self.model, self.cfg.mode) {
                (Model::Cpc(model), Mode::Cpc) => {
                    let all: Vec<&SequenceSample> =
                        labeled.iter().chain(unlabeled.iter()).copied().collect();
                    let tasks = build_tasks(&all, &model.cfg, &mut task_rng)?;
                    let noise =
                        CpcBatchNoise::draw(all.len(), model.cfg.d_c, &mut noise_rng);
                    let lab: Vec<(&SequenceSample, &ContrastiveTask)> = labeled
                        .iter()
                        .copied()
                        .zip(tasks[..labeled.len()].iter())
                        .collect();
                    let unl: Vec<(&SequenceSample, &ContrastiveTask)> = unlabeled
                        .iter()
                        .copied()
                        .zip(tasks[labeled.len()..].iter())
                        .collect();
                    total_objective_cpc(&mut tape, model, &lab, &unl, self.alpha, &noise)?
                }
                (Model::Ccpc(model), Mode::Ccpc) => {
                    let all: Vec<&SequenceSample> =
                        labeled.iter().chain(unlabeled.iter()).copied().collect();
                    let tasks = build_tasks(&all, &model.cfg, &mut task_rng)?;
                    let noise = CcpcBatchNoise::draw(
                        labeled.len(),
                        unlabeled.len(),
                        model.cfg.d_c,
                        model.m_classes,
                        &mut noise_rng,
                    );
                    let lab: Vec<(&SequenceSample, &ContrastiveTask)> = labeled
                        .iter()
                        .copied()
                        .zip(tasks[..labeled.len()].iter())
                        .collect();
                    let unl: Vec<(&SequenceSample, &ContrastiveTask)> = unlabeled
                        .iter()
                        .copied()
                        .zip(tasks[labeled.len()..].iter())
                        .collect();
                    let tau = self.cfg.gumbel.tau_at(self.epoch);
                    total_objective_ccpc(&mut tape, model, &lab, &unl, self.alpha, tau, &noise)?
                }
                (Model::Cpc(model), Mode::SupervisedOnly) => {
                    supervised_loss(&mut tape, model, labeled)?
                }
                _ => {
                    return Err(Error::InvalidConfig {
                        what: "trainer",
                        detail: "model does not match the configured mode".into(),
                    })
                }
            };
            out.breakdown.check_finite()?;
            let grads = tape.backward(out.loss)?;
            (out.loss, out.breakdown, grads)
        };
        let _ = loss;
        self.adam.apply(
            &mut self.params,
            &grads,
            self.cfg.learning_rate,
            self.cfg.weight_decay,
        )?;
        self.global_step += 1;
        Ok(breakdown)
    }

    /// One pass over the data plus an evaluation sweep; returns the epoch's
    /// metrics and advances the epoch counter.
    pub fn run_epoch(&mut self, data: &TrainData, threads: usize) -> Result<EpochMetrics> {
        let started = Instant::now();
        let mut shuffle_rng = self.root.derive("shuffle").derive_u64(self.epoch);
        let plans = plan_epoch(
            self.cfg.mode,
            data.labeled.len(),
            data.unlabeled.len(),
            self.cfg.batch_size,
            &mut shuffle_rng,
        )?;
        let tau = self.cfg.gumbel.tau_at(self.epoch);
        let mut j_sum = 0.0;
        let mut cls_sum = 0.0;
        let mut nce_sum = 0.0;
        let mut nce_draws = 0usize;
        for plan in &plans {
            let labeled: Vec<&SequenceSample> =
                plan.labeled.iter().map(|&i| &data.labeled[i]).collect();
            let unlabeled: Vec<&SequenceSample> =
                plan.unlabeled.iter().map(|&i| &data.unlabeled[i]).collect();
            let breakdown = self.train_step(&labeled, &unlabeled)?;
            j_sum += breakdown.total;
            cls_sum += breakdown.cls_loss;
            nce_sum += breakdown.nce_per_step.iter().sum::<f64>();
            nce_draws +=
                (breakdown.n_labeled + breakdown.n_unlabeled) * breakdown.nce_per_step.len();
        }
        let n_batches = plans.len() as f64;
        let nce_mean = if nce_draws > 0 {
            nce_sum / nce_draws as f64
        } else {
            0.0
        };
        let (top1, topk) = if data.eval.is_empty() {
            (0.0, 0.0)
        } else {
            let acc = evaluate_topk(&self.model, &self.params, &data.eval, &self.cfg.eval_k, threads)?;
            (acc.first().map_or(0.0, |a| a.1), acc.last().map_or(0.0, |a| a.1))
        };
        let metrics = EpochMetrics {
            epoch: self.epoch,
            j_total: j_sum / n_batches,
            nce_mean,
            cls_loss: cls_sum / n_batches,
            mi_bound: if self.cfg.mode.is_ssl() {
                mi_lower_bound(nce_mean, self.cfg.cpc.set_size)
            } else {
                0.0
            },
            top1,
            topk,
            tau,
            wall_ms: if self.cfg.record_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            },
        };
        self.epoch += 1;
        Ok(metrics)
    }

    /// Runs epochs until `cfg.epochs`, reporting each epoch's metrics to the
    /// sink as it completes.
    pub fn run(
        &mut self,
        data: &TrainData,
        threads: usize,
        mut sink: impl FnMut(&EpochMetrics, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs as u64 {
            let m = self.run_epoch(data, threads)?;
            sink(&m, self)?;
            out.push(m);
        }
        Ok(out)
    }
}
