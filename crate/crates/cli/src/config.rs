//! Experiment configuration files and named presets.
//!
//! A config is TOML with `[model]`, `[train]`, `[data]`, `[cpt]` and
//! `[finetune]` sections, all optional. A top-level `preset` fills in the
//! objective plan and masking ratio of a studied configuration; anything the
//! file sets explicitly wins. Expansion resolves every default so the
//! written `config.expanded.toml` reproduces the run on its own.

use std::path::Path;

use anyhow::{bail, Context, Result};
use bplm::data::{CorpusSpec, Generator, PackConfig, MASK_ID, PAD_ID, RESERVED};
use bplm::finetune::GridSearchSpec;
use bplm::objectives::{CorruptionSplit, STUDY_MASK_RATIOS};
use bplm::optim::AdamWConfig;
use bplm::runner::{biphasic_plan, CptConfig, Phase, TrainConfig};
use bplm::{MaskingConfig, ModelConfig, Objective, WsdSchedule};
use serde::{Deserialize, Serialize};

pub const PRESETS: [&str; 4] = ["pfs-clm", "pfs-mlm-40", "biphasic-25-75", "cpt-from-clm-12k"];

/// Config values as written; unset fields are filled during expansion.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub preset: Option<String>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: RawTrain,
    #[serde(default)]
    pub data: RawData,
    #[serde(default)]
    pub cpt: RawCpt,
    #[serde(default)]
    pub finetune: Option<GridSearchSpec>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrain {
    pub total_steps: Option<u64>,
    pub warmup_steps: Option<u64>,
    pub decay_steps: Option<u64>,
    pub peak_lr: Option<f64>,
    pub objective: Option<Objective>,
    /// Fraction of steps spent on CLM before switching to MLM.
    pub clm_fraction: Option<f64>,
    pub plan: Option<Vec<Phase>>,
    pub mask_ratio: Option<f64>,
    pub corruption: Option<CorruptionSplit>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub decay_applied_at_end: Option<bool>,
    pub reset_moments_at_switch: Option<bool>,
    pub adamw: Option<AdamWConfig>,
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawData {
    pub corpus: Option<CorpusSpec>,
    pub batch_rows: Option<usize>,
    pub min_len: Option<usize>,
    pub max_len: Option<usize>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCpt {
    pub steps: Option<u64>,
    pub peak_lr: Option<f64>,
    pub mask_ratio: Option<f64>,
}

/// Fully explicit experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub preset: Option<String>,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub cpt: CptConfig,
    pub finetune: GridSearchSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub corpus: CorpusSpec,
    pub pack: PackConfig,
}

struct PresetValues {
    objective: Option<Objective>,
    clm_fraction: Option<f64>,
    mask_ratio: Option<f64>,
    cpt_steps: Option<u64>,
}

fn preset_values(name: &str) -> Result<PresetValues> {
    let none = PresetValues { objective: None, clm_fraction: None, mask_ratio: None, cpt_steps: None };
    Ok(match name {
        "pfs-clm" => PresetValues { objective: Some(Objective::Clm), ..none },
        "pfs-mlm-40" => PresetValues { objective: Some(Objective::Mlm), mask_ratio: Some(0.4), ..none },
        "biphasic-25-75" => PresetValues { clm_fraction: Some(0.25), ..none },
        "cpt-from-clm-12k" => PresetValues { cpt_steps: Some(12_000), ..none },
        other => bail!("unknown preset '{other}'; known presets: {}", PRESETS.join(", ")),
    })
}

pub const DESK_TOTAL_STEPS: u64 = 200;
pub const DESK_PEAK_LR: f64 = 1e-3;
pub const DESK_BATCH_ROWS: usize = 8;
pub const DESK_MIN_LEN: usize = 8;
pub const DESK_MAX_LEN: usize = 128;

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Resolves the preset and every default. `seed` overrides `train.seed`.
    /// A generated default corpus is sized for the pretraining run, or for
    /// the continued-pretraining run when `for_cpt` is set.
    pub fn expand(&self, seed: Option<u64>, for_cpt: bool) -> Result<Experiment> {
        let preset = match &self.preset {
            Some(p) => preset_values(p)?,
            None => PresetValues { objective: None, clm_fraction: None, mask_ratio: None, cpt_steps: None },
        };
        let t = &self.train;
        let model = self.model.clone().unwrap_or_default();
        let total = t.total_steps.unwrap_or(DESK_TOTAL_STEPS);
        if total == 0 {
            bail!("train.total_steps must be positive");
        }
        let warmup = t.warmup_steps.unwrap_or(total.div_ceil(10));
        let decay = t.decay_steps.unwrap_or(((total as f64) * 0.05).round() as u64);
        let schedule = WsdSchedule::new(t.peak_lr.unwrap_or(DESK_PEAK_LR), warmup, total, decay)?;

        let plan = if let Some(plan) = &t.plan {
            plan.clone()
        } else if t.objective.is_some() && t.clm_fraction.is_some() {
            bail!("train.objective and train.clm_fraction are mutually exclusive");
        } else if let Some(frac) = t.clm_fraction.or(preset.clm_fraction.filter(|_| t.objective.is_none())) {
            biphasic_plan(total, frac)?
        } else {
            vec![Phase { objective: t.objective.or(preset.objective).unwrap_or(Objective::Clm), steps: total }]
        };
        let mask_ratio = t.mask_ratio.or(preset.mask_ratio).unwrap_or(0.4);
        let masking = MaskingConfig {
            ratio: mask_ratio,
            mask_token_id: MASK_ID,
            split: t.corruption.unwrap_or_default(),
            random_range: (RESERVED, model.vocab_size),
        };
        let seed = seed.or(t.seed).unwrap_or(0);
        let train = TrainConfig {
            model: model.clone(),
            plan,
            schedule,
            masking: masking.clone(),
            adamw: t.adamw.unwrap_or_default(),
            clip_norm: t.clip_norm.unwrap_or(1.0),
            seed,
            checkpoint_every: t.checkpoint_every.unwrap_or(0),
            decay_applied_at_end: t.decay_applied_at_end.unwrap_or(true),
            reset_moments_at_switch: t.reset_moments_at_switch.unwrap_or(false),
            record_wall_time: false,
        };
        train.validate()?;

        let cpt_steps = self.cpt.steps.or(preset.cpt_steps).unwrap_or(2000);
        let data_steps = if for_cpt { cpt_steps } else { total };
        let d = &self.data;
        let batch_rows = d.batch_rows.unwrap_or(DESK_BATCH_ROWS);
        let min_len = d.min_len.unwrap_or(DESK_MIN_LEN);
        let max_len = d.max_len.unwrap_or(DESK_MAX_LEN.min(model.max_seq_len));
        if max_len > model.max_seq_len {
            bail!("data.max_len {max_len} exceeds model.max_seq_len {}", model.max_seq_len);
        }
        let corpus = match &d.corpus {
            Some(c) => c.clone(),
            None => CorpusSpec {
                generator: Generator::MarkovK { order: 1, alphabet: 32, branching: None },
                transition_seed: seed,
                sample_seed: seed.wrapping_add(1),
                // Enough text for every step at the mean row length, with slack.
                target_tokens: (data_steps as usize * batch_rows * (min_len + max_len) / 2) * 5 / 4 + 4 * max_len,
                min_len,
                max_len: max_len * 4,
            },
        };
        let pack = PackConfig {
            batch_rows,
            min_len,
            max_len,
            pad_id: PAD_ID,
            seed: d.seed.unwrap_or(seed),
            epochs: d.epochs.unwrap_or(1),
        };

        let cpt = CptConfig {
            steps: cpt_steps,
            peak_lr: self.cpt.peak_lr.unwrap_or(schedule.peak_lr),
            masking: MaskingConfig { ratio: self.cpt.mask_ratio.unwrap_or(mask_ratio), ..masking },
            adamw: train.adamw,
            clip_norm: train.clip_norm,
            seed,
            checkpoint_every: train.checkpoint_every,
            force: false,
            record_wall_time: false,
        };
        Ok(Experiment {
            preset: self.preset.clone(),
            train,
            data: DataConfig { corpus, pack },
            cpt,
            finetune: self.finetune.clone().unwrap_or_default(),
        })
    }
}

/// Loads either a hand-written config or a previously written expanded one.
pub fn load_experiment(path: &Path, seed: Option<u64>, for_cpt: bool) -> Result<Experiment> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let expanded = value.get("train").and_then(|t| t.get("schedule")).is_some();
    if expanded {
        let mut exp = Experiment::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(seed) = seed {
            exp.train.seed = seed;
            exp.cpt.seed = seed;
        }
        Ok(exp)
    } else {
        RawConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?.expand(seed, for_cpt)
    }
}

impl Experiment {
    /// Rejects masking ratios outside the study set unless allowed.
    pub fn check_study_grid(&self, allow_nonstudy: bool, pretraining: bool, cpt: bool) -> Result<()> {
        let mut checked = Vec::new();
        if pretraining && self.train.plan.iter().any(|p| p.objective == Objective::Mlm && p.steps > 0) {
            checked.push(&self.train.masking);
        }
        if cpt {
            checked.push(&self.cpt.masking);
        }
        for m in checked {
            let r = m.ratio;
            if !m.is_study_ratio() {
                if !allow_nonstudy {
                    bail!(
                        "masking ratio {r} is outside the study set {STUDY_MASK_RATIOS:?}; pass --allow-nonstudy to run it anyway"
                    );
                }
                log::warn!("NON-STUDY masking ratio {r} (allowed by --allow-nonstudy)");
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn biphasic_preset_switches_at_a_quarter() {
        let raw = RawConfig::parse("preset = \"biphasic-25-75\"\n[train]\ntotal_steps = 12\nwarmup_steps = 1\ndecay_steps = 1\n").unwrap();
        let exp = raw.expand(None, false).unwrap();
        assert_eq!(
            exp.train.plan,
            vec![Phase { objective: Objective::Clm, steps: 3 }, Phase { objective: Objective::Mlm, steps: 9 }]
        );
    }

    #[test]
    fn presets_expand_and_round_trip() {
        for p in PRESETS {
            let raw = RawConfig::parse(&format!("preset = \"{p}\"\n")).unwrap();
            let exp = raw.expand(Some(7), false).unwrap();
            assert_eq!(exp.train.seed, 7);
            let back = Experiment::from_toml(&exp.to_toml().unwrap()).unwrap();
            assert_eq!(back, exp, "{p}");
        }
        assert_eq!(RawConfig::parse("preset = \"cpt-from-clm-12k\"").unwrap().expand(None, false).unwrap().cpt.steps, 12_000);
        assert!(RawConfig::parse("preset = \"nope\"").unwrap().expand(None, false).is_err());
    }

    #[test]
    fn explicit_values_beat_the_preset() {
        let raw = RawConfig::parse("preset = \"pfs-mlm-40\"\n[train]\nmask_ratio = 0.2\n").unwrap();
        let exp = raw.expand(None, false).unwrap();
        assert_eq!(exp.train.masking.ratio, 0.2);
        assert_eq!(exp.train.plan[0].objective, Objective::Mlm);
    }

    #[test]
    fn nonstudy_ratio_needs_the_flag() {
        let raw = RawConfig::parse("[train]\nobjective = \"mlm\"\nmask_ratio = 0.7\n").unwrap();
        let exp = raw.expand(None, false).unwrap();
        assert!(exp.check_study_grid(false, true, false).is_err());
        exp.check_study_grid(true, true, false).unwrap();
        let clm = RawConfig::parse("[train]\nmask_ratio = 0.7\n").unwrap().expand(None, false).unwrap();
        clm.check_study_grid(false, true, false).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RawConfig::parse("[train]\ntotal_step = 5\n").is_err());
    }
}
