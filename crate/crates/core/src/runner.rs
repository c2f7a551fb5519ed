//! Pretraining loops: single-objective runs from scratch, biphasic CLM→MLM
//! runs, and continued MLM pretraining from a finished checkpoint.
//!
//! Batch `s` of the data slice is consumed at global step `s`. MLM masks are
//! drawn from a seed derived from `(run seed, step, row)`, so a run resumed
//! from a checkpoint sees exactly the masks the uninterrupted run would have.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, PhaseRecord};
use crate::error::{Error, Result};
use crate::model::{init_params, AttentionMode, ModelConfig, ParamVars};
use crate::objectives::{pretrain_loss_on, LmBatch, MaskingConfig, Objective};
use crate::optim::{adamw_step, clip_global_norm, global_norm, AdamWConfig, AdamWState, WsdSchedule};
use crate::tape::Tape;

/// One entry of an objective plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub objective: Objective,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub plan: Vec<Phase>,
    pub schedule: WsdSchedule,
    pub masking: MaskingConfig,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// When false the run stops on the plateau: the decay window is dropped
    /// from the schedule, leaving a non-decayed checkpoint.
    #[serde(default = "yes")]
    pub decay_applied_at_end: bool,
    /// Zero the AdamW moments when the objective changes mid-run.
    #[serde(default)]
    pub reset_moments_at_switch: bool,
    /// Record real step durations in the trace instead of zeros. Off by
    /// default so traces are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_clip() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.plan.iter().map(|p| p.steps).sum()
    }

    /// Schedule actually followed by the run.
    pub fn effective_schedule(&self) -> WsdSchedule {
        if self.decay_applied_at_end {
            self.schedule
        } else {
            self.schedule.without_decay()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.masking.validate()?;
        if self.plan.is_empty() {
            return Err(Error::config("objective plan is empty"));
        }
        if self.total_steps() != self.schedule.total_steps {
            return Err(Error::config(format!(
                "plan covers {} steps but the schedule has {}",
                self.total_steps(),
                self.schedule.total_steps
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        Ok(())
    }

    /// Phase index and objective for a global step.
    pub fn phase_at(&self, step: u64) -> Option<(usize, Objective, u64)> {
        let mut start = 0;
        for (i, p) in self.plan.iter().enumerate() {
            if step < start + p.steps {
                return Some((i, p.objective, start));
            }
            start += p.steps;
        }
        None
    }
}

/// Plan for a biphasic run: CLM for `round(clm_fraction · total)` steps,
/// then MLM for the rest.
pub fn biphasic_plan(total: u64, clm_fraction: f64) -> Result<Vec<Phase>> {
    if !(0.0..=1.0).contains(&clm_fraction) {
        return Err(Error::config(format!("CLM fraction {clm_fraction} outside [0, 1]")));
    }
    let k = (clm_fraction * total as f64).round() as u64;
    Ok(vec![
        Phase { objective: Objective::Clm, steps: k },
        Phase { objective: Objective::Mlm, steps: total - k },
    ])
}

/// One row of the metrics trace.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub phase: usize,
    pub objective: Objective,
    pub mode: AttentionMode,
    pub lr: f64,
    pub loss: f64,
    pub masked_fraction: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub checkpoint: Checkpoint,
    pub trace: Vec<StepRecord>,
}

/// A fresh step-0 checkpoint for `cfg`.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint> {
    let params = init_params(&cfg.model, cfg.seed)?;
    let optimizer = AdamWState::new(cfg.adamw, &params);
    Ok(Checkpoint {
        model: cfg.model.clone(),
        params,
        optimizer,
        step: 0,
        schedule: cfg.effective_schedule(),
        history: Vec::new(),
        seed: cfg.seed,
    })
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Masking seed for one row of one step.
pub fn mask_seed(run_seed: u64, step: u64, row: usize) -> u64 {
    mix(mix(mix(run_seed) ^ step) ^ row as u64)
}

/// Runs `cfg` from `state` to the end of its plan.
///
/// `state` is either [`initial_checkpoint`] or a checkpoint emitted by an
/// earlier call with the same config. `on_checkpoint` receives a snapshot
/// every `checkpoint_every` steps (not at the final step, which is returned).
pub fn train_from(
    cfg: &TrainConfig,
    mut state: Checkpoint,
    data: &[LmBatch],
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if state.model != cfg.model {
        return Err(Error::config("checkpoint model config differs from the run config"));
    }
    if state.schedule != cfg.effective_schedule() {
        return Err(Error::config("checkpoint schedule differs from the run config"));
    }
    state.params.check_against(&cfg.model)?;
    let schedule = state.schedule;
    let total = schedule.total_steps;
    let mut trace = Vec::new();

    while state.step < total {
        let step = state.step;
        let started = Instant::now();
        let (phase, objective, phase_start) = cfg.phase_at(step).expect("step within plan");
        if step == phase_start {
            if !state.history.is_empty() {
                log::info!("step {step}: switching to {objective}");
                if cfg.reset_moments_at_switch && phase > 0 {
                    state.optimizer = AdamWState::new(state.optimizer.config, &state.params);
                }
            }
            state.history.push(PhaseRecord { objective, steps: 0 });
        }
        let batch = data.get(step as usize).ok_or(Error::DataExhausted(step))?;
        let batch = match objective {
            Objective::Clm => batch.clone(),
            Objective::Mlm => batch.clone().with_masking(&cfg.masking, |r| mask_seed(cfg.seed, step, r))?,
        };
        let lr = schedule.lr(step)?;

        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &state.params, true);
        let loss_var = pretrain_loss_on(&mut tape, &vars, &cfg.model, objective, &batch)?;
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        tape.backward(loss_var)?;
        let mut grads = vars.gradients(&tape);
        drop(tape);
        let grad_norm = global_norm(&grads);
        clip_global_norm(&mut grads, cfg.clip_norm)?;
        adamw_step(&mut state.params, &grads, &mut state.optimizer, lr)?;

        state.step += 1;
        state.history.last_mut().expect("phase pushed").steps += 1;
        let wall_ms = if cfg.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 };
        trace.push(StepRecord {
            step,
            phase,
            objective,
            mode: objective.attention_mode(),
            lr,
            loss,
            masked_fraction: batch.masked_fraction(),
            grad_norm,
            wall_ms,
        });
        log::debug!("step {step} {objective} lr {lr:e} loss {loss:.5}");
        if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) && state.step < total {
            on_checkpoint(&state)?;
        }
    }
    Ok(RunOutput { checkpoint: state, trace })
}

/// Pretraining from scratch under a single objective.
pub fn run_pfs(cfg: &TrainConfig, data: &[LmBatch]) -> Result<RunOutput> {
    if cfg.plan.len() != 1 {
        return Err(Error::config("run_pfs takes a single-phase plan"));
    }
    train_from(cfg, initial_checkpoint(cfg)?, data, &mut |_| Ok(()))
}

/// Checks a two-phase CLM→MLM plan. The switch must fall strictly before the
/// decay window unless one phase is empty.
pub fn validate_biphasic(cfg: &TrainConfig) -> Result<()> {
    match cfg.plan.as_slice() {
        [a, b] if a.objective == Objective::Clm && b.objective == Objective::Mlm => {
            let s = cfg.effective_schedule();
            if a.steps > 0 && b.steps > 0 && s.decay_steps > 0 && a.steps >= s.decay_start() {
                return Err(Error::config(format!(
                    "phase boundary at step {} is inside the decay window starting at {}",
                    a.steps,
                    s.decay_start()
                )));
            }
            Ok(())
        }
        _ => Err(Error::config("biphasic plan must be exactly (clm, k), (mlm, n - k)")),
    }
}

/// CLM then MLM under one continuous schedule. Parameters and optimizer
/// moments carry over at the switch unless `reset_moments_at_switch` is set.
pub fn run_biphasic(cfg: &TrainConfig, data: &[LmBatch]) -> Result<RunOutput> {
    validate_biphasic(cfg)?;
    train_from(cfg, initial_checkpoint(cfg)?, data, &mut |_| Ok(()))
}

/// Settings for continued pretraining. The schedule is derived from `steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CptConfig {
    pub steps: u64,
    pub peak_lr: f64,
    pub masking: MaskingConfig,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: u64,
    /// Accept a base checkpoint that has not finished its decay.
    #[serde(default)]
    pub force: bool,
    #[serde(default)]
    pub record_wall_time: bool,
}

impl CptConfig {
    /// Warmup over 10% of the run (rounded up), decay over 5% (rounded).
    pub fn schedule(&self) -> Result<WsdSchedule> {
        let warmup = self.steps.div_ceil(10);
        let decay = (self.steps as f64 * 0.05).round() as u64;
        WsdSchedule::new(self.peak_lr, warmup, self.steps, decay)
    }

    /// The equivalent single-phase MLM run over `base`'s model.
    pub fn train_config(&self, base: &Checkpoint) -> Result<TrainConfig> {
        Ok(TrainConfig {
            model: base.model.clone(),
            plan: vec![Phase { objective: Objective::Mlm, steps: self.steps }],
            schedule: self.schedule()?,
            masking: self.masking.clone(),
            adamw: self.adamw,
            clip_norm: self.clip_norm,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            decay_applied_at_end: true,
            reset_moments_at_switch: false,
            record_wall_time: self.record_wall_time,
        })
    }

    /// Step-0 state: base weights and history, fresh optimizer moments.
    pub fn initial_state(&self, base: &Checkpoint) -> Result<Checkpoint> {
        let train = self.train_config(base)?;
        Ok(Checkpoint {
            model: base.model.clone(),
            params: base.params.clone(),
            optimizer: AdamWState::new(self.adamw, &base.params),
            step: 0,
            schedule: train.effective_schedule(),
            history: base.history.clone(),
            seed: self.seed,
        })
    }
}

/// Checks that `base` may seed continued pretraining.
pub fn check_cpt_base(base: &Checkpoint, force: bool) -> Result<()> {
    base.validate()?;
    if !base.is_complete() {
        return Err(Error::config(format!(
            "base checkpoint stopped at step {} of {}",
            base.step, base.schedule.total_steps
        )));
    }
    if !base.is_decayed() && !force {
        return Err(Error::config(
            "base checkpoint has not gone through learning-rate decay; continue it with a biphasic run or pass force",
        ));
    }
    Ok(())
}

/// Continued MLM pretraining from a finished checkpoint. Zero steps return
/// the base unchanged.
pub fn run_cpt(base: &Checkpoint, cpt: &CptConfig, data: &[LmBatch]) -> Result<RunOutput> {
    check_cpt_base(base, cpt.force)?;
    if cpt.steps == 0 {
        return Ok(RunOutput { checkpoint: base.clone(), trace: Vec::new() });
    }
    let cfg = cpt.train_config(base)?;
    train_from(&cfg, cpt.initial_state(base)?, data, &mut |_| Ok(()))
}

pub const METRICS_HEADER: [&str; 7] = ["step", "phase", "objective", "lr", "loss", "masked_fraction", "wall_ms"];

/// Writes the trace as CSV. Reals use the shortest representation that
/// parses back to the same value.
pub fn write_metrics_csv(w: impl Write, trace: &[StepRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    out.write_record(METRICS_HEADER).map_err(io)?;
    for r in trace {
        out.write_record([
            r.step.to_string(),
            r.phase.to_string(),
            r.objective.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.masked_fraction.map(|f| f.to_string()).unwrap_or_default(),
            r.wall_ms.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_metrics_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    write_metrics_csv(std::fs::File::create(path)?, trace)
}
