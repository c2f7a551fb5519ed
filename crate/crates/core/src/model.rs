//! Pre-norm decoder/encoder transformer with RMSNorm, SwiGLU feed-forward
//! blocks, rotary positions and grouped key/value heads.
//!
//! The same weights run in either [`AttentionMode::Causal`] or
//! [`AttentionMode::Bidirectional`]; the mode only changes the attention mask.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
    pub rmsnorm_eps: f64,
    pub init_std: f64,
    /// Reuse the token embedding as the output head.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            embed_dim: 64,
            ffn_dim: 128,
            heads: 4,
            kv_heads: 2,
            vocab_size: 256,
            max_seq_len: 128,
            rope_theta: 10_000.0,
            rmsnorm_eps: 1e-5,
            init_std: 0.2f64.sqrt(),
            tie_embeddings: false,
        }
    }

    fn full_scale(layers: usize, embed_dim: usize, ffn_dim: usize, heads: usize, kv_heads: usize) -> Self {
        ModelConfig {
            layers,
            embed_dim,
            ffn_dim,
            heads,
            kv_heads,
            vocab_size: 128_256,
            max_seq_len: 2048,
            ..Self::desk()
        }
    }

    pub fn full_210m() -> Self {
        Self::full_scale(12, 768, 3072, 12, 12)
    }

    pub fn full_610m() -> Self {
        Self::full_scale(26, 1152, 4096, 18, 6)
    }

    pub fn full_1b() -> Self {
        Self::full_scale(28, 1728, 5120, 18, 6)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::config("heads must be divisible by kv_heads"));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config("embed_dim must be divisible by heads"));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::config("head_dim must be even for rotary embeddings"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len must be at least 2"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if !(self.rope_theta > 0.0) || !(self.rmsnorm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::config("rope_theta and rmsnorm_eps must be positive, init_std non-negative"));
        }
        Ok(())
    }

    /// Canonical parameter names with their shapes, in initialisation order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let hd = self.head_dim();
        let mut out = vec![("tok_embeddings".to_string(), vec![self.vocab_size, d])];
        for l in 0..self.layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            out.push((p("attn_norm"), vec![d]));
            out.push((p("attn.wq"), vec![d, self.heads * hd]));
            out.push((p("attn.wk"), vec![d, self.kv_heads * hd]));
            out.push((p("attn.wv"), vec![d, self.kv_heads * hd]));
            out.push((p("attn.wo"), vec![self.heads * hd, d]));
            out.push((p("ffn_norm"), vec![d]));
            out.push((p("ffn.w_gate"), vec![d, self.ffn_dim]));
            out.push((p("ffn.w_up"), vec![d, self.ffn_dim]));
            out.push((p("ffn.w_down"), vec![self.ffn_dim, d]));
        }
        out.push(("final_norm".to_string(), vec![d]));
        if !self.tie_embeddings {
            out.push(("output".to_string(), vec![d, self.vocab_size]));
        }
        out
    }
}

/// RMSNorm gain vectors are named `*_norm`.
pub fn is_norm_gain(name: &str) -> bool {
    name.ends_with("_norm")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

/// Named model weights, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks that the name set and shapes match `cfg` exactly.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = cfg.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!("{name}: shape {:?}, expected {shape:?}", t.shape())))
                }
                None => return Err(Error::config(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

/// Draws every matrix from `N(0, init_std²)` and sets RMSNorm gains to one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<Parameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::config(e.to_string()))?;
    let mut params = Parameters::new();
    for (name, shape) in cfg.parameter_shapes() {
        let t = if is_norm_gain(&name) {
            Tensor::ones(&shape)
        } else {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(shape, data)?
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Parameters registered as leaves on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &Parameters, requires_grad: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        ParamVars { vars }
    }

    /// Wraps handles that are already on a tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects the gradient of every registered parameter after backward.
    /// Parameters that the loss did not touch get zeros.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec);
                (name.clone(), g)
            })
            .collect()
    }
}

/// `keep[i][j]`: may query `i` read key `j`.
fn attention_keep(mode: AttentionMode, pad: &[bool]) -> Vec<bool> {
    let t = pad.len();
    let mut keep = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            keep[i * t + j] = !pad[j] && (mode == AttentionMode::Bidirectional || j <= i);
        }
    }
    keep
}

fn check_inputs(cfg: &ModelConfig, t: usize, pad: &[bool]) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("empty sequence"));
    }
    if t > cfg.max_seq_len {
        return Err(Error::invalid(format!("sequence length {t} exceeds max_seq_len {}", cfg.max_seq_len)));
    }
    if pad.len() != t {
        return Err(Error::shape("pad mask length differs from sequence length"));
    }
    if pad.iter().all(|&p| p) {
        return Err(Error::invalid("every position is padding"));
    }
    Ok(())
}

/// Per-head attention outputs (`[T×head_dim]` each) for layer `layer`,
/// before the output projection.
pub fn attention_heads(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    layer: usize,
    hidden: Var,
    mode: AttentionMode,
    pad: &[bool],
) -> Result<Vec<Var>> {
    let t = tape.shape(hidden)[0];
    check_inputs(cfg, t, pad)?;
    let hd = cfg.head_dim();
    let w = |s: &str| vars.get(&format!("layer.{layer}.attn.{s}"));
    let positions: Vec<usize> = (0..t).collect();

    let q = tape.matmul(hidden, w("wq")?)?;
    let k = tape.matmul(hidden, w("wk")?)?;
    let v = tape.matmul(hidden, w("wv")?)?;
    let q = tape.reshape(q, &[t, cfg.heads, hd])?;
    let q = tape.rope(q, &positions, cfg.rope_theta)?;
    let q = tape.reshape(q, &[t, cfg.heads * hd])?;
    let k = tape.reshape(k, &[t, cfg.kv_heads, hd])?;
    let k = tape.rope(k, &positions, cfg.rope_theta)?;
    let k = tape.reshape(k, &[t, cfg.kv_heads * hd])?;

    let keep = attention_keep(mode, pad);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut kv_cache = Vec::with_capacity(cfg.kv_heads);
    for g in 0..cfg.kv_heads {
        let kg = tape.slice_cols(k, g * hd, hd)?;
        let kt = tape.transpose(kg)?;
        let vg = tape.slice_cols(v, g * hd, hd)?;
        kv_cache.push((kt, vg));
    }
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (kt, vg) = kv_cache[h / cfg.group_size()];
        let qh = tape.slice_cols(q, h * hd, hd)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let probs = tape.masked_softmax(scores, keep.clone())?;
        heads.push(tape.matmul(probs, vg)?);
    }
    Ok(heads)
}

/// Multi-head attention for one layer, `[T×d] -> [T×d]`.
pub fn attention(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    layer: usize,
    hidden: Var,
    mode: AttentionMode,
    pad: &[bool],
) -> Result<Var> {
    let heads = attention_heads(tape, vars, cfg, layer, hidden, mode, pad)?;
    let merged = tape.concat_cols(&heads)?;
    tape.matmul(merged, vars.get(&format!("layer.{layer}.attn.wo"))?)
}

fn feed_forward(tape: &mut Tape, vars: &ParamVars, layer: usize, x: Var) -> Result<Var> {
    let w = |s: &str| vars.get(&format!("layer.{layer}.ffn.{s}"));
    let gate = tape.matmul(x, w("w_gate")?)?;
    let up = tape.matmul(x, w("w_up")?)?;
    let act = tape.swiglu(gate, up)?;
    tape.matmul(act, w("w_down")?)
}

/// Output of [`forward_on`]: final normalised hidden states and vocabulary logits.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub hidden: Var,
    pub logits: Var,
}

/// Records the full forward pass on `tape`.
pub fn forward_on(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    tokens: &[usize],
    mode: AttentionMode,
    pad: &[bool],
) -> Result<ForwardVars> {
    check_inputs(cfg, tokens.len(), pad)?;
    let mut x = tape.embedding(vars.get("tok_embeddings")?, tokens)?;
    for l in 0..cfg.layers {
        let h = tape.rms_norm(x, vars.get(&format!("layer.{l}.attn_norm"))?, cfg.rmsnorm_eps)?;
        let a = attention(tape, vars, cfg, l, h, mode, pad)?;
        x = tape.add(x, a)?;
        let h = tape.rms_norm(x, vars.get(&format!("layer.{l}.ffn_norm"))?, cfg.rmsnorm_eps)?;
        let f = feed_forward(tape, vars, l, h)?;
        x = tape.add(x, f)?;
    }
    let hidden = tape.rms_norm(x, vars.get("final_norm")?, cfg.rmsnorm_eps)?;
    let head = if cfg.tie_embeddings {
        let emb = vars.get("tok_embeddings")?;
        tape.transpose(emb)?
    } else {
        vars.get("output")?
    };
    let logits = tape.matmul(hidden, head)?;
    Ok(ForwardVars { hidden, logits })
}

/// Pure forward pass: `(hidden [T×d], logits [T×V])`.
pub fn forward(
    params: &Parameters,
    cfg: &ModelConfig,
    tokens: &[usize],
    mode: AttentionMode,
    pad: &[bool],
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let out = forward_on(&mut tape, &vars, cfg, tokens, mode, pad)?;
    Ok((tape.value(out.hidden).clone(), tape.value(out.logits).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            embed_dim: 16,
            ffn_dim: 24,
            heads: 4,
            kv_heads: 2,
            vocab_size: 11,
            max_seq_len: 16,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn study_configs_validate() {
        for cfg in [ModelConfig::desk(), ModelConfig::full_210m(), ModelConfig::full_610m(), ModelConfig::full_1b()] {
            cfg.validate().unwrap();
        }
        assert_eq!(ModelConfig::full_610m().group_size(), 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ModelConfig { kv_heads: 3, ..small() },
            ModelConfig { embed_dim: 18, ..small() },
            ModelConfig { embed_dim: 12, ..small() }, // head_dim 3
            ModelConfig { max_seq_len: 1, ..small() },
            ModelConfig { vocab_size: 1, ..small() },
        ];
        for cfg in bad {
            assert!(init_params(&cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn init_is_deterministic_and_norms_are_ones() {
        let cfg = small();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&cfg, 4).unwrap());
        a.check_against(&cfg).unwrap();
        for (name, t) in a.iter().filter(|(n, _)| is_norm_gain(n)) {
            assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
        }
    }

    #[test]
    fn init_variance_matches_std() {
        let cfg = ModelConfig { vocab_size: 625, embed_dim: 16, ..small() };
        let p = init_params(&cfg, 0).unwrap();
        let w = p.get("tok_embeddings").unwrap().data();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var - 0.2).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn tied_head_has_no_output_matrix() {
        let cfg = ModelConfig { tie_embeddings: true, ..small() };
        let p = init_params(&cfg, 0).unwrap();
        assert!(p.get("output").is_none());
        let (_, logits) = forward(&p, &cfg, &[1, 2, 3], AttentionMode::Causal, &[false; 3]).unwrap();
        assert_eq!(logits.shape(), &[3, 11]);
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let cfg = small();
        let mut p = init_params(&cfg, 1).unwrap();
        p.get_mut("output").unwrap().data_mut().fill(0.0);
        let (_, logits) = forward(&p, &cfg, &[4, 5, 6, 7], AttentionMode::Bidirectional, &[false; 4]).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let cfg = small();
        let p = init_params(&cfg, 1).unwrap();
        assert!(forward(&p, &cfg, &[11], AttentionMode::Causal, &[false]).is_err());
        let long = vec![1; 17];
        assert!(forward(&p, &cfg, &long, AttentionMode::Causal, &[false; 17]).is_err());
        assert!(forward(&p, &cfg, &[1, 2], AttentionMode::Causal, &[true, true]).is_err());
    }

    #[test]
    fn causal_and_bidirectional_differ() {
        // One layer: the last position reads the same keys in both modes.
        let cfg = ModelConfig { layers: 1, ..small() };
        let p = init_params(&cfg, 2).unwrap();
        let toks = [1, 2, 3, 4];
        let (_, c) = forward(&p, &cfg, &toks, AttentionMode::Causal, &[false; 4]).unwrap();
        let (_, b) = forward(&p, &cfg, &toks, AttentionMode::Bidirectional, &[false; 4]).unwrap();
        assert!(c.row(3).iter().zip(b.row(3)).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(c.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn trailing_padding_does_not_change_real_positions() {
        let cfg = small();
        let p = init_params(&cfg, 5).unwrap();
        let (_, short) = forward(&p, &cfg, &[3, 1, 4], AttentionMode::Bidirectional, &[false; 3]).unwrap();
        let (_, padded) = forward(
            &p,
            &cfg,
            &[3, 1, 4, 0, 0],
            AttentionMode::Bidirectional,
            &[false, false, false, true, true],
        )
        .unwrap();
        for t in 0..3 {
            for (a, b) in short.row(t).iter().zip(padded.row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
