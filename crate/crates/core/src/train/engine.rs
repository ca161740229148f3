use std::collections::BTreeMap;
use std::io::Write;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Phase};
use super::optim::{adam_step, clip_global_norm, AdamConfig, OptimizerState, Schedule};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{layout, DecodeHooks, Dropout, Integration, ModelConfig, MultiViewInit, ParamGroup, Params, Seq2Seq, Strategy};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tasks::{batchify, generate, Batch, BatchOptions, Pair, TaskSpec};
use crate::tensor::Tensor;

/// Batches prepared ahead of the training step.
const PREFETCH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub max_tokens: Option<usize>,
    pub warmup: usize,
    /// Multiplier on the inverse-square-root schedule.
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    /// Hand a checkpoint to the sink every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainOptions {
            steps: 3000,
            batch_size: 32,
            max_tokens: None,
            warmup: 400,
            lr_scale: 1.0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            checkpoint_every: 0,
            seed: 1,
        }
    }
}

impl TrainOptions {
    fn optimizer<T: Scalar>(&self, d_model: usize) -> OptimizerState<T> {
        OptimizerState::new(
            AdamConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            Schedule {
                d_model,
                warmup: self.warmup,
                scale: self.lr_scale,
            },
        )
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::contract(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if !(self.lr_scale > 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::contract("lr_scale must be positive and clip_norm non-negative"));
        }
        Ok(())
    }
}

/// One row of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

/// Result of a training run. On divergence `checkpoint` is the last state
/// whose loss and gradients were finite.
#[derive(Debug, Clone)]
pub struct TrainRun<T: Scalar> {
    pub checkpoint: Checkpoint<T>,
    pub curve: Vec<LossPoint>,
    pub divergence: Option<Divergence>,
}

impl<T: Scalar> TrainRun<T> {
    /// The final checkpoint, or [`Error::Diverged`].
    pub fn into_checkpoint(self) -> Result<Checkpoint<T>> {
        match self.divergence {
            None => Ok(self.checkpoint),
            Some(d) => Err(Error::Diverged {
                step: d.step as usize,
                reason: d.reason,
            }),
        }
    }
}

/// Receives periodic checkpoints during training.
pub type CheckpointSink<'a, T> = dyn FnMut(&Checkpoint<T>) -> Result<()> + 'a;

fn check_task(config: &ModelConfig, task: &TaskSpec) -> Result<()> {
    task.validate()?;
    if task.vocab_size > config.src_vocab || task.vocab_size > config.tgt_vocab {
        return Err(Error::contract(format!(
            "task vocabulary {} exceeds model vocabularies {}/{}",
            task.vocab_size, config.src_vocab, config.tgt_vocab
        )));
    }
    if task.max_len + 1 > config.max_len {
        return Err(Error::contract(format!(
            "task sequences of {} tokens plus eos exceed max_len {}",
            task.max_len, config.max_len
        )));
    }
    Ok(())
}

/// Train the conventional model from a fresh initialization.
///
/// Any strategy set in `config` is replaced by the conventional one.
pub fn train_phase1<T: Scalar>(
    config: &ModelConfig,
    task: &TaskSpec,
    opts: &TrainOptions,
    sink: &mut CheckpointSink<'_, T>,
) -> Result<TrainRun<T>> {
    let config = config.clone().with_strategy(Strategy::Conventional, Integration::Direct);
    train_from_scratch(&config, task, opts, sink)
}

/// Train any configuration from a fresh initialization. A multi-view
/// strategy trained this way is the single-phase ablation baseline.
pub fn train_from_scratch<T: Scalar>(
    config: &ModelConfig,
    task: &TaskSpec,
    opts: &TrainOptions,
    sink: &mut CheckpointSink<'_, T>,
) -> Result<TrainRun<T>> {
    let config = config.clone().normalized();
    check_task(&config, task)?;
    opts.validate()?;
    let phase = if config.strategy == Strategy::Conventional {
        Phase::Phase1Conventional
    } else {
        Phase::MultiViewFromScratch
    };
    let model = Seq2Seq::init(config.clone(), opts.seed)?;
    let opt = opts.optimizer(config.d_model);
    let pairs = generate(task)?;
    run(model, opt, &pairs, opts, phase, 0, sink)
}

/// Build the phase-2 model: baseline tensors copied from `ckpt`, new
/// routing and integration parameters at their neutral values, and
/// optimizer moments carried over for baseline tensors only.
pub fn warm_start<T: Scalar>(
    ckpt: &Checkpoint<T>,
    target: &ModelConfig,
    opts: &TrainOptions,
) -> Result<(Seq2Seq<T>, OptimizerState<T>)> {
    if ckpt.phase != Phase::Phase1Conventional || ckpt.config.strategy != Strategy::Conventional {
        return Err(Error::contract("multi-view training must start from a phase-1 conventional checkpoint"));
    }
    if target.strategy == Strategy::Conventional {
        return Err(Error::contract("phase 2 needs a multi-view strategy, not `conventional`"));
    }
    if !ckpt.config.same_backbone(target) {
        return Err(Error::contract(
            "phase-2 config differs from the checkpoint in a field other than strategy/integration",
        ));
    }
    let target = target.clone().normalized();
    let specs = layout(&target, MultiViewInit::Zero);
    let fresh: Vec<_> = specs.iter().filter(|s| s.group != ParamGroup::Baseline).cloned().collect();
    let mut params = Params::initialize(&fresh, opts.seed);
    for spec in specs.iter().filter(|s| s.group == ParamGroup::Baseline) {
        params.insert(spec.name.clone(), ckpt.params.get(&spec.name)?.clone());
    }
    let model = Seq2Seq::new(target.clone(), params)?;
    let mut opt = opts.optimizer(target.d_model);
    if let Some(prev) = &ckpt.optimizer {
        opt.slots = prev.slots.clone();
    }
    Ok((model, opt))
}

/// Continued learning: warm-start the multi-view model `target` from a
/// phase-1 checkpoint and train it, with the schedule restarted.
pub fn continue_multiview<T: Scalar>(
    ckpt: &Checkpoint<T>,
    target: &ModelConfig,
    task: &TaskSpec,
    opts: &TrainOptions,
    sink: &mut CheckpointSink<'_, T>,
) -> Result<TrainRun<T>> {
    opts.validate()?;
    let (model, opt) = warm_start(ckpt, target, opts)?;
    check_task(model.config(), task)?;
    let pairs = generate(task)?;
    run(model, opt, &pairs, opts, Phase::Phase2MultiView, ckpt.total_steps(), sink)
}

/// Control run: keep training the conventional model under exactly the
/// treatment phase 2 gets (restarted schedule, carried moments).
pub fn continue_conventional<T: Scalar>(
    ckpt: &Checkpoint<T>,
    task: &TaskSpec,
    opts: &TrainOptions,
    sink: &mut CheckpointSink<'_, T>,
) -> Result<TrainRun<T>> {
    opts.validate()?;
    if ckpt.phase != Phase::Phase1Conventional || ckpt.config.strategy != Strategy::Conventional {
        return Err(Error::contract("the conventional control continues a phase-1 checkpoint"));
    }
    check_task(&ckpt.config, task)?;
    let model = Seq2Seq::new(ckpt.config.clone(), ckpt.params.clone())?;
    let mut opt = opts.optimizer(ckpt.config.d_model);
    if let Some(prev) = &ckpt.optimizer {
        opt.slots = prev.slots.clone();
    }
    let pairs = generate(task)?;
    run(model, opt, &pairs, opts, Phase::Phase1Conventional, ckpt.total_steps(), sink)
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed.wrapping_add(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn snapshot<T: Scalar>(
    model: &Seq2Seq<T>,
    opt: &OptimizerState<T>,
    phase: Phase,
    step: u64,
    prior_steps: u64,
    seed: u64,
) -> Checkpoint<T> {
    Checkpoint {
        config: model.config().clone(),
        params: model.params().clone(),
        optimizer: Some(opt.clone()),
        phase,
        step,
        prior_steps,
        seed,
    }
}

fn first_non_finite<T: Scalar>(grads: &BTreeMap<String, Tensor<T>>) -> Option<&str> {
    grads.iter().find(|(_, g)| !g.all_finite()).map(|(n, _)| n.as_str())
}

fn run<T: Scalar>(
    mut model: Seq2Seq<T>,
    mut opt: OptimizerState<T>,
    pairs: &[Pair],
    opts: &TrainOptions,
    phase: Phase,
    prior_steps: u64,
    sink: &mut CheckpointSink<'_, T>,
) -> Result<TrainRun<T>> {
    let steps = opts.steps;
    let template = BatchOptions {
        batch_size: opts.batch_size,
        max_tokens: opts.max_tokens,
        max_len: model.config().max_len,
        seed: epoch_seed(opts.seed, 0),
    };
    // surface data errors before spawning the producer
    if steps > 0 {
        batchify(pairs, &template)?;
    }

    let mut dropout_rng = rng::seeded(opts.seed, Stream::Dropout);
    let mut curve = Vec::with_capacity(steps);
    let mut divergence = None;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(PREFETCH);
        scope.spawn(move || {
            let mut sent = 0;
            let mut epoch = 0u64;
            while sent < steps {
                let o = BatchOptions {
                    seed: epoch_seed(opts.seed, epoch),
                    ..template.clone()
                };
                match batchify(pairs, &o) {
                    Ok(batches) => {
                        for b in batches.into_iter().take(steps - sent) {
                            if tx.send(Ok(b)).is_err() {
                                return;
                            }
                            sent += 1;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                }
                epoch += 1;
            }
        });

        for step in 1..=steps as u64 {
            let batch = rx
                .recv()
                .map_err(|_| Error::contract("batch producer stopped early"))??;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let fp = {
                let mut drop = Dropout::new(model.config().dropout, &mut dropout_rng);
                model.loss(&mut g, &bound, &batch, &mut drop, &DecodeHooks::default(), opts.label_smoothing)?
            };
            let loss = g.value(fp.loss).data()[0].to_f64_lossy();
            if !loss.is_finite() {
                divergence = Some(Divergence {
                    step,
                    reason: format!("loss is {loss}"),
                });
                return Ok(());
            }
            g.backward(fp.loss)?;
            let mut grads = bound.grads(&g);
            drop(g);
            if let Some(name) = first_non_finite(&grads) {
                divergence = Some(Divergence {
                    step,
                    reason: format!("non-finite gradient of `{name}`"),
                });
                return Ok(());
            }
            let grad_norm = clip_global_norm(&mut grads, opts.clip_norm);
            let lr = opt.next_lr();
            adam_step(model.params_mut(), &grads, &mut opt, lr)?;
            curve.push(LossPoint {
                step,
                loss,
                lr,
                grad_norm,
                tokens: batch.target_tokens(),
            });
            if opts.checkpoint_every > 0 && step % opts.checkpoint_every as u64 == 0 {
                sink(&snapshot(&model, &opt, phase, step, prior_steps, opts.seed))?;
            }
        }
        Ok(())
    })?;

    let done = curve.len() as u64;
    Ok(TrainRun {
        checkpoint: snapshot(&model, &opt, phase, done, prior_steps, opts.seed),
        curve,
        divergence,
    })
}

/// Loss curve as CSV with a header row.
pub fn write_loss_csv(curve: &[LossPoint], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,loss,lr,grad_norm,tokens")?;
    for p in curve {
        writeln!(out, "{},{:.9},{:.9e},{:.9},{}", p.step, p.loss, p.lr, p.grad_norm, p.tokens)?;
    }
    Ok(())
}
