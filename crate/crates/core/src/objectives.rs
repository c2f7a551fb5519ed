//! Causal and masked language-modelling objectives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_on, AttentionMode, ModelConfig, ParamVars, Parameters};
use crate::tape::{Tape, Var, IGNORE_INDEX};

/// Masking ratios covered by the pretraining study grid.
pub const STUDY_MASK_RATIOS: [f64; 4] = [0.20, 0.30, 0.40, 0.50];

const MAX_MASK_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "clm")]
    Clm,
    #[serde(rename = "mlm")]
    Mlm,
}

impl Objective {
    pub fn attention_mode(self) -> AttentionMode {
        match self {
            Objective::Clm => AttentionMode::Causal,
            Objective::Mlm => AttentionMode::Bidirectional,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Clm => "clm",
            Objective::Mlm => "mlm",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clm" => Ok(Objective::Clm),
            "mlm" => Ok(Objective::Mlm),
            other => Err(Error::invalid(format!("unknown objective '{other}'"))),
        }
    }
}

/// How selected positions are corrupted: fractions replaced by the mask
/// placeholder, by a random token, or left unchanged. Defaults to all
/// placeholder.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for CorruptionSplit {
    fn default() -> Self {
        CorruptionSplit { mask: 1.0, random: 0.0, keep: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub ratio: f64,
    pub mask_token_id: usize,
    #[serde(default)]
    pub split: CorruptionSplit,
    /// Token ids eligible as random replacements, `[lo, hi)`.
    #[serde(default)]
    pub random_range: (usize, usize),
}

impl MaskingConfig {
    pub fn new(ratio: f64, mask_token_id: usize) -> Self {
        MaskingConfig { ratio, mask_token_id, split: CorruptionSplit::default(), random_range: (0, 0) }
    }

    pub fn is_study_ratio(&self) -> bool {
        STUDY_MASK_RATIOS.iter().any(|r| (r - self.ratio).abs() < 1e-12)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("masking ratio {} outside (0, 1]", self.ratio)));
        }
        let s = self.split;
        if s.mask < 0.0 || s.random < 0.0 || s.keep < 0.0 || (s.mask + s.random + s.keep - 1.0).abs() > 1e-9 {
            return Err(Error::config("corruption split must be non-negative and sum to 1"));
        }
        if s.random > 0.0 && self.random_range.0 >= self.random_range.1 {
            return Err(Error::config("random replacement needs a non-empty token range"));
        }
        Ok(())
    }
}

/// The positions selected for reconstruction in one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingPlan {
    pub ratio: f64,
    pub mask_token_id: usize,
    pub masked_positions: Vec<usize>,
    pub original_targets: Vec<usize>,
    /// The input sequence after corruption.
    pub corrupted: Vec<usize>,
}

impl MaskingPlan {
    /// Per-position targets: the original token at masked positions,
    /// [`IGNORE_INDEX`] elsewhere.
    pub fn targets(&self, len: usize) -> Vec<usize> {
        let mut t = vec![IGNORE_INDEX; len];
        for (&p, &orig) in self.masked_positions.iter().zip(&self.original_targets) {
            t[p] = orig;
        }
        t
    }
}

/// Independently selects each non-pad position with probability `ratio`,
/// resampling if nothing is selected.
pub fn select_mask(tokens: &[usize], pad: &[bool], cfg: &MaskingConfig, seed: u64) -> Result<MaskingPlan> {
    cfg.validate()?;
    if pad.len() != tokens.len() {
        return Err(Error::shape("pad mask length differs from token length"));
    }
    if pad.iter().all(|&p| p) {
        return Err(Error::invalid("cannot mask a sequence with no real tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = Vec::new();
    for _ in 0..MAX_MASK_ATTEMPTS {
        selected = (0..tokens.len())
            .filter(|&i| !pad[i] && rng.gen::<f64>() < cfg.ratio)
            .collect();
        if !selected.is_empty() {
            break;
        }
    }
    if selected.is_empty() {
        return Err(Error::invalid(format!(
            "no position selected after {MAX_MASK_ATTEMPTS} attempts (ratio {})",
            cfg.ratio
        )));
    }
    let mut corrupted = tokens.to_vec();
    let split = cfg.split;
    for &p in &selected {
        let u: f64 = if split.mask >= 1.0 { 0.0 } else { rng.gen() };
        corrupted[p] = if u < split.mask {
            cfg.mask_token_id
        } else if u < split.mask + split.random {
            rng.gen_range(cfg.random_range.0..cfg.random_range.1)
        } else {
            tokens[p]
        };
    }
    Ok(MaskingPlan {
        ratio: cfg.ratio,
        mask_token_id: cfg.mask_token_id,
        original_targets: selected.iter().map(|&p| tokens[p]).collect(),
        masked_positions: selected,
        corrupted,
    })
}

/// Mean negative log-likelihood of the original tokens at masked positions.
pub fn mlm_loss(tape: &mut Tape, logits: Var, plan: &MaskingPlan) -> Result<Var> {
    if plan.masked_positions.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let t = tape.shape(logits)[0];
    if plan.masked_positions.iter().any(|&p| p >= t) {
        return Err(Error::shape("masked position beyond logits"));
    }
    tape.cross_entropy(logits, &plan.targets(t), IGNORE_INDEX)
}

/// Next-token targets: position `t` predicts token `t+1`; pads and the last
/// position are ignored.
pub fn shifted_targets(tokens: &[usize], pad: &[bool]) -> Vec<usize> {
    (0..tokens.len())
        .map(|t| match t + 1 < tokens.len() && !pad[t] && !pad[t + 1] {
            true => tokens[t + 1],
            false => IGNORE_INDEX,
        })
        .collect()
}

/// Mean next-token negative log-likelihood.
pub fn clm_loss(tape: &mut Tape, logits: Var, tokens: &[usize], pad: &[bool]) -> Result<Var> {
    if pad.len() != tokens.len() {
        return Err(Error::shape("pad mask length differs from token length"));
    }
    if pad.iter().filter(|&&p| !p).count() < 2 {
        return Err(Error::invalid("causal loss needs at least two real tokens"));
    }
    tape.cross_entropy(logits, &shifted_targets(tokens, pad), IGNORE_INDEX)
}

/// Padded token rows; `pad[r][t]` marks padding. MLM batches carry one
/// [`MaskingPlan`] per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LmBatch {
    pub tokens: Vec<Vec<usize>>,
    pub pad: Vec<Vec<bool>>,
    pub plans: Option<Vec<MaskingPlan>>,
}

impl LmBatch {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    /// Real (non-pad) length of each row.
    pub fn lengths(&self) -> Vec<usize> {
        self.pad.iter().map(|p| p.iter().filter(|&&x| !x).count()).collect()
    }

    /// Attaches masking plans; row `r` uses seed `seed_for_row(r)`.
    pub fn with_masking(mut self, cfg: &MaskingConfig, seed_for_row: impl Fn(usize) -> u64) -> Result<Self> {
        let plans = self
            .tokens
            .iter()
            .zip(&self.pad)
            .enumerate()
            .map(|(r, (t, p))| select_mask(t, p, cfg, seed_for_row(r)))
            .collect::<Result<Vec<_>>>()?;
        self.plans = Some(plans);
        Ok(self)
    }

    /// Masked positions over real positions, or `None` without plans.
    pub fn masked_fraction(&self) -> Option<f64> {
        let plans = self.plans.as_ref()?;
        let masked: usize = plans.iter().map(|p| p.masked_positions.len()).sum();
        let real: usize = self.lengths().iter().sum();
        Some(masked as f64 / real as f64)
    }
}

/// Batch loss: CLM runs causally on clean rows, MLM bidirectionally on
/// corrupted rows. Row losses are averaged.
pub fn pretrain_loss_on(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    objective: Objective,
    batch: &LmBatch,
) -> Result<Var> {
    if batch.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let plans = match objective {
        Objective::Mlm => Some(
            batch
                .plans
                .as_ref()
                .ok_or_else(|| Error::invalid("MLM batch carries no masking plans"))?,
        ),
        Objective::Clm => None,
    };
    let mode = objective.attention_mode();
    let mut row_losses = Vec::with_capacity(batch.rows());
    for r in 0..batch.rows() {
        let pad = &batch.pad[r];
        // Padding only ever trails, so trimming it leaves real positions unchanged.
        let len = pad.iter().position(|&p| p).unwrap_or(pad.len());
        let real_pad = &pad[..len];
        let loss = match plans {
            None => {
                let tokens = &batch.tokens[r][..len];
                let out = forward_on(tape, vars, cfg, tokens, mode, real_pad)?;
                clm_loss(tape, out.logits, tokens, real_pad)?
            }
            Some(plans) => {
                let plan = &plans[r];
                let out = forward_on(tape, vars, cfg, &plan.corrupted[..len], mode, real_pad)?;
                mlm_loss(tape, out.logits, plan)?
            }
        };
        row_losses.push(loss);
    }
    let stacked = tape.stack_rows(&row_losses)?;
    let total = tape.sum(stacked);
    tape.scale(total, 1.0 / batch.rows() as f64)
}

/// Value-only form of [`pretrain_loss_on`].
pub fn pretrain_loss(params: &Parameters, cfg: &ModelConfig, objective: Objective, batch: &LmBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let loss = pretrain_loss_on(&mut tape, &vars, cfg, objective, batch)?;
    tape.value(loss).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn uniform_logits(tape: &mut Tape, t: usize, v: usize) -> Var {
        tape.param(Tensor::zeros(&[t, v]))
    }

    #[test]
    fn full_ratio_masks_every_real_position() {
        let cfg = MaskingConfig::new(1.0, 1);
        let plan = select_mask(&[5, 6, 7, 0], &[false, false, false, true], &cfg, 9).unwrap();
        assert_eq!(plan.masked_positions, vec![0, 1, 2]);
        assert_eq!(plan.original_targets, vec![5, 6, 7]);
        assert_eq!(plan.corrupted, vec![1, 1, 1, 0]);
    }

    #[test]
    fn pads_never_masked_and_seed_is_reproducible() {
        let cfg = MaskingConfig::new(0.5, 1);
        let tokens: Vec<usize> = (0..40).map(|i| 3 + i % 7).collect();
        let pad: Vec<bool> = (0..40).map(|i| i >= 30).collect();
        for seed in 0..50 {
            let a = select_mask(&tokens, &pad, &cfg, seed).unwrap();
            assert!(a.masked_positions.iter().all(|&p| p < 30));
            assert_eq!(a, select_mask(&tokens, &pad, &cfg, seed).unwrap());
        }
    }

    #[test]
    fn tiny_ratio_resamples_until_something_is_masked() {
        let cfg = MaskingConfig::new(0.05, 1);
        let plan = select_mask(&[4, 5], &[false, false], &cfg, 0).unwrap();
        assert!(!plan.masked_positions.is_empty());
        // 0.999999^... effectively never selects in 100 attempts of one token.
        let cfg = MaskingConfig::new(1e-9, 1);
        assert!(select_mask(&[4], &[false], &cfg, 0).is_err());
    }

    #[test]
    fn invalid_ratios_rejected() {
        for r in [0.0, -0.1, 1.5] {
            assert!(select_mask(&[4, 5], &[false, false], &MaskingConfig::new(r, 1), 0).is_err());
        }
    }

    #[test]
    fn corruption_split_uses_random_and_kept_tokens() {
        let cfg = MaskingConfig {
            ratio: 1.0,
            mask_token_id: 1,
            split: CorruptionSplit { mask: 0.0, random: 0.0, keep: 1.0 },
            random_range: (0, 0),
        };
        let plan = select_mask(&[5, 6, 7], &[false; 3], &cfg, 0).unwrap();
        assert_eq!(plan.corrupted, vec![5, 6, 7]);
        let cfg = MaskingConfig {
            split: CorruptionSplit { mask: 0.0, random: 1.0, keep: 0.0 },
            random_range: (20, 30),
            ..cfg
        };
        let plan = select_mask(&[5; 50], &[false; 50], &cfg, 0).unwrap();
        assert!(plan.corrupted.iter().all(|t| (20..30).contains(t)));
    }

    #[test]
    fn mlm_loss_cases() {
        let mut tape = Tape::new();
        let logits = uniform_logits(&mut tape, 3, 4);
        let plan = MaskingPlan {
            ratio: 0.4,
            mask_token_id: 1,
            masked_positions: vec![1],
            original_targets: vec![2],
            corrupted: vec![0, 1, 0],
        };
        let loss = mlm_loss(&mut tape, logits, &plan).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        // Position 0: two-way uniform (ln 2); position 1: four-way uniform (ln 4).
        let mut tape = Tape::new();
        let big = -1e3;
        let logits = tape.param(Tensor::from_rows(&[vec![0.0, 0.0, big, big], vec![0.0; 4]]).unwrap());
        let plan = MaskingPlan {
            ratio: 1.0,
            mask_token_id: 1,
            masked_positions: vec![0, 1],
            original_targets: vec![0, 3],
            corrupted: vec![1, 1],
        };
        let loss = mlm_loss(&mut tape, logits, &plan).unwrap();
        let expected = (2f64.ln() + 4f64.ln()) / 2.0;
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-12);

        let empty = MaskingPlan { masked_positions: vec![], original_targets: vec![], ..plan };
        assert!(mlm_loss(&mut tape, logits, &empty).is_err());
    }

    #[test]
    fn mlm_loss_vanishes_for_confident_prediction() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::from_rows(&[vec![60.0, 0.0, 0.0]]).unwrap());
        let plan = MaskingPlan {
            ratio: 1.0,
            mask_token_id: 1,
            masked_positions: vec![0],
            original_targets: vec![0],
            corrupted: vec![1],
        };
        let loss = mlm_loss(&mut tape, logits, &plan).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-20);
    }

    #[test]
    fn clm_loss_cases() {
        let mut tape = Tape::new();
        let logits = uniform_logits(&mut tape, 3, 4);
        let loss = clm_loss(&mut tape, logits, &[0, 1, 2], &[false; 3]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        let one = uniform_logits(&mut tape, 1, 4);
        assert!(clm_loss(&mut tape, one, &[2], &[false]).is_err());
    }

    #[test]
    fn shifted_targets_ignore_pads() {
        let t = shifted_targets(&[4, 5, 6, 0], &[false, false, false, true]);
        assert_eq!(t, vec![5, 6, IGNORE_INDEX, IGNORE_INDEX]);
    }

    #[test]
    fn objective_parsing() {
        assert_eq!("CLM".parse::<Objective>().unwrap(), Objective::Clm);
        assert_eq!("mlm".parse::<Objective>().unwrap().attention_mode(), AttentionMode::Bidirectional);
        assert!("xlm".parse::<Objective>().is_err());
    }
}
