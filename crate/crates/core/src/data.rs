//! Vocabulary, synthetic corpora with a known entropy rate, and packing of
//! token sequences into variable-length batches.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LmBatch;

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const UNK_ID: usize = 2;
/// Number of reserved ids preceding ordinary symbols.
pub const RESERVED: usize = 3;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<mask>", "<unk>"];

/// Printable symbols used, in order, by synthetic vocabularies.
const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~ ";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
    longest: usize,
}

impl Vocab {
    /// Reserved ids followed by `symbols`, which must be distinct and non-empty.
    pub fn with_symbols<S: Into<String>>(symbols: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        all.extend(symbols.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (id, s) in all.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid("empty vocabulary symbol"));
            }
            if index.insert(s.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        let longest = all[RESERVED..].iter().map(String::len).max().unwrap_or(1);
        Ok(Vocab { symbols: all, index, longest })
    }

    /// Printable ASCII plus newline, one symbol per character.
    pub fn ascii() -> Self {
        let chars = (0x20u8..0x7f).chain(std::iter::once(b'\n')).map(|b| (b as char).to_string());
        Self::with_symbols(chars).expect("ascii symbols are distinct")
    }

    /// The first `n` printable symbols; symbol `i` has id `RESERVED + i`.
    pub fn synthetic(n: usize) -> Result<Self> {
        if n == 0 || n > SYMBOLS.len() {
            return Err(Error::invalid(format!("synthetic vocabularies hold 1..={} symbols", SYMBOLS.len())));
        }
        Self::with_symbols(SYMBOLS.chars().take(n).map(String::from))
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Greedy longest-match encoding; unmatched characters become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut rest = text;
        'outer: while !rest.is_empty() {
            let max = self.longest.min(rest.len());
            for len in (1..=max).rev() {
                if !rest.is_char_boundary(len) {
                    continue;
                }
                if let Some(&id) = self.index.get(&rest[..len]) {
                    if id >= RESERVED {
                        out.push(id);
                        rest = &rest[len..];
                        continue 'outer;
                    }
                }
            }
            out.push(UNK_ID);
            let skip = rest.chars().next().map_or(1, char::len_utf8);
            rest = &rest[skip..];
        }
        out
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbol(i).unwrap_or(RESERVED_NAMES[UNK_ID])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Order-`order` Markov chain over `alphabet` symbols. With
    /// `branching = Some(b)` every context has `b` equally likely successors;
    /// otherwise rows are drawn from a flat Dirichlet.
    MarkovK { order: usize, alphabet: usize, branching: Option<usize> },
    /// A fixed symbol cycle, e.g. `[0, 1]` for "abab…".
    RepeatedPattern { pattern: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub generator: Generator,
    pub transition_seed: u64,
    pub sample_seed: u64,
    pub target_tokens: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl CorpusSpec {
    fn validate(&self) -> Result<()> {
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::config(format!("invalid length bounds [{}, {}]", self.min_len, self.max_len)));
        }
        match &self.generator {
            Generator::MarkovK { order, alphabet, branching } => {
                if *order == 0 || *alphabet < 2 {
                    return Err(Error::config("markov corpus needs order >= 1 and alphabet >= 2"));
                }
                if alphabet.checked_pow(*order as u32).is_none_or(|n| n > 1 << 16) {
                    return Err(Error::config("markov context space too large"));
                }
                if let Some(b) = branching {
                    if *b == 0 || b > alphabet {
                        return Err(Error::config("branching must be in 1..=alphabet"));
                    }
                }
            }
            Generator::RepeatedPattern { pattern } => {
                if pattern.is_empty() {
                    return Err(Error::config("empty repeated pattern"));
                }
            }
        }
        Ok(())
    }

    /// Number of distinct symbols the corpus can emit.
    pub fn alphabet(&self) -> usize {
        match &self.generator {
            Generator::MarkovK { alphabet, .. } => *alphabet,
            Generator::RepeatedPattern { pattern } => pattern.iter().max().map_or(0, |m| m + 1),
        }
    }
}

/// Generated documents (as vocabulary ids) and the source's entropy rate in
/// nats per token.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<Vec<usize>>,
    pub entropy_rate: f64,
    /// Row-stochastic transition table indexed by context, for Markov sources.
    pub transitions: Option<Vec<Vec<f64>>>,
}

impl Corpus {
    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

fn markov_table(order: usize, alphabet: usize, branching: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let contexts = alphabet.pow(order as u32);
    (0..contexts)
        .map(|_| match branching {
            Some(b) => {
                let mut row = vec![0.0; alphabet];
                let ids: Vec<usize> = rand::seq::index::sample(rng, alphabet, b).into_vec();
                for i in ids {
                    row[i] = 1.0 / b as f64;
                }
                row
            }
            None => {
                let w: Vec<f64> = (0..alphabet).map(|_| Exp1.sample(rng)).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            }
        })
        .collect()
}

/// Stationary distribution of the context chain, by power iteration on the
/// lazy chain `(I + P) / 2` (same fixed point, always aperiodic).
pub fn stationary_contexts(table: &[Vec<f64>], alphabet: usize) -> Vec<f64> {
    let n = table.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next: Vec<f64> = pi.iter().map(|p| 0.5 * p).collect();
        for (c, row) in table.iter().enumerate() {
            let base = (c * alphabet) % n;
            for (y, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    next[base + y] += 0.5 * pi[c] * p;
                }
            }
        }
        let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if delta < 1e-15 {
            break;
        }
    }
    pi
}

fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates documents with lengths uniform in `[min_len, max_len]` until
/// `target_tokens` is reached. Symbol `i` is emitted as id `RESERVED + i`.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut table_rng = ChaCha8Rng::seed_from_u64(spec.transition_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed);
    let mut sequences = Vec::new();
    let mut produced = 0;
    match &spec.generator {
        Generator::RepeatedPattern { pattern } => {
            while produced < spec.target_tokens {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let phase = rng.gen_range(0..pattern.len());
                sequences.push((0..len).map(|i| RESERVED + pattern[(phase + i) % pattern.len()]).collect());
                produced += len;
            }
            Ok(Corpus { sequences, entropy_rate: 0.0, transitions: None })
        }
        &Generator::MarkovK { order, alphabet, branching } => {
            let table = markov_table(order, alphabet, branching, &mut table_rng);
            let pi = stationary_contexts(&table, alphabet);
            let entropy_rate = match branching {
                Some(b) => (b as f64).ln(),
                None => pi.iter().zip(&table).map(|(p, row)| p * row_entropy(row)).sum(),
            };
            let n = table.len();
            while produced < spec.target_tokens {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let mut ctx = sample_index(&pi, &mut rng);
                let mut seq = Vec::with_capacity(len);
                // Emit the starting context, then continue the chain.
                let mut digits = Vec::with_capacity(order);
                let mut c = ctx;
                for _ in 0..order {
                    digits.push(c % alphabet);
                    c /= alphabet;
                }
                seq.extend(digits.iter().rev().map(|d| RESERVED + d));
                while seq.len() < len {
                    let y = sample_index(&table[ctx], &mut rng);
                    seq.push(RESERVED + y);
                    ctx = (ctx * alphabet) % n + y;
                }
                seq.truncate(len);
                produced += seq.len();
                sequences.push(seq);
            }
            Ok(Corpus { sequences, entropy_rate, transitions: Some(table) })
        }
    }
}

/// Writes token ids as a little-endian `u64` count followed by `u32` ids per
/// sequence, each sequence prefixed by its `u32` length.
pub fn write_corpus_cache(path: &Path, sequences: &[Vec<usize>]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(sequences.len() as u64).to_le_bytes());
    for s in sequences {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        for &t in s {
            let id = u32::try_from(t).map_err(|_| Error::invalid("token id exceeds u32"))?;
            buf.extend_from_slice(&id.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_corpus_cache(path: &Path) -> Result<Vec<Vec<usize>>> {
    let bytes = fs::read(path)?;
    let truncated = || Error::invalid(format!("{}: truncated corpus cache", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(truncated)?;
        pos += n;
        Ok(s)
    };
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut s = Vec::with_capacity(len);
        for _ in 0..len {
            s.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        out.push(s);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackConfig {
    pub batch_rows: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub pad_id: usize,
    pub seed: u64,
    /// Passes over the sequences, reshuffled each pass.
    #[serde(default = "one")]
    pub epochs: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq)]
pub struct Packed {
    pub batches: Vec<LmBatch>,
    /// Sequences or trailing chunks dropped for being shorter than `min_len`.
    pub discarded: usize,
}

/// Cuts sequences into rows and groups them into batches.
///
/// A sequence no longer than `max_len` becomes one row. Longer sequences are
/// cut into chunks whose lengths are drawn uniformly from
/// `[min_len, max_len]`. Rows are padded with `pad_id` to the longest row of
/// their batch; an incomplete final batch is dropped.
pub fn pack_batches(sequences: &[Vec<usize>], cfg: &PackConfig) -> Result<Packed> {
    if cfg.batch_rows == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::config("pack_batches needs batch_rows > 0 and 0 < min_len <= max_len"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut discarded = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..sequences.len()).collect();
        order.shuffle(&mut rng);
        for i in order {
            let seq = &sequences[i];
            if seq.len() <= cfg.max_len {
                if seq.len() >= cfg.min_len {
                    rows.push(seq.clone());
                } else {
                    discarded += 1;
                }
                continue;
            }
            let mut start = 0;
            while start < seq.len() {
                let want = rng.gen_range(cfg.min_len..=cfg.max_len);
                let end = (start + want).min(seq.len());
                if end - start >= cfg.min_len {
                    rows.push(seq[start..end].to_vec());
                } else {
                    discarded += 1;
                }
                start = end;
            }
        }
    }
    let batches = rows
        .chunks_exact(cfg.batch_rows)
        .map(|chunk| {
            let width = chunk.iter().map(Vec::len).max().unwrap();
            let mut tokens = Vec::with_capacity(chunk.len());
            let mut pad = Vec::with_capacity(chunk.len());
            for row in chunk {
                let mut t = row.clone();
                t.resize(width, cfg.pad_id);
                tokens.push(t);
                pad.push((0..width).map(|i| i >= row.len()).collect());
            }
            LmBatch { tokens, pad, plans: None }
        })
        .collect();
    Ok(Packed { batches, discarded })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_round_trip_and_unknowns() {
        let v = Vocab::ascii();
        let text = "Hello, world!\n";
        assert_eq!(v.decode(&v.encode(text)), text);
        let ids = v.encode("a\u{e9}b");
        assert_eq!(ids[1], UNK_ID);
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn multi_char_symbols_match_longest() {
        let v = Vocab::with_symbols(["a", "ab", "b"]).unwrap();
        assert_eq!(v.encode("abab"), vec![v.id("ab").unwrap(); 2]);
        assert!(Vocab::with_symbols(["x", "x"]).is_err());
        assert!(Vocab::with_symbols(["<pad>"]).is_err());
    }

    #[test]
    fn repeated_pattern_has_zero_entropy() {
        let spec = CorpusSpec {
            generator: Generator::RepeatedPattern { pattern: vec![0, 1] },
            transition_seed: 0,
            sample_seed: 1,
            target_tokens: 200,
            min_len: 8,
            max_len: 16,
        };
        let c = gen_corpus(&spec).unwrap();
        assert_eq!(c.entropy_rate, 0.0);
        assert!(c.num_tokens() >= 200);
        for s in &c.sequences {
            assert!((8..=16).contains(&s.len()));
            assert!(s.windows(2).all(|w| w[0] != w[1]));
        }
        assert_eq!(c, gen_corpus(&spec).unwrap());
    }

    #[test]
    fn uniform_branching_chain_entropy() {
        let spec = CorpusSpec {
            generator: Generator::MarkovK { order: 1, alphabet: 4, branching: Some(4) },
            transition_seed: 3,
            sample_seed: 4,
            target_tokens: 100,
            min_len: 4,
            max_len: 4,
        };
        let c = gen_corpus(&spec).unwrap();
        assert!((c.entropy_rate - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn invalid_bounds_rejected() {
        let spec = CorpusSpec {
            generator: Generator::MarkovK { order: 1, alphabet: 4, branching: None },
            transition_seed: 0,
            sample_seed: 0,
            target_tokens: 10,
            min_len: 9,
            max_len: 8,
        };
        assert!(gen_corpus(&spec).is_err());
        assert!(gen_corpus(&CorpusSpec { min_len: 1, max_len: 8, ..spec.clone() }).is_err());
        let huge = Generator::MarkovK { order: 9, alphabet: 10, branching: None };
        assert!(gen_corpus(&CorpusSpec { generator: huge, min_len: 2, ..spec }).is_err());
    }

    #[test]
    fn corpus_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        let seqs = vec![vec![3, 4, 5], vec![], vec![70_000]];
        write_corpus_cache(&path, &seqs).unwrap();
        assert_eq!(read_corpus_cache(&path).unwrap(), seqs);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_corpus_cache(&path).is_err());
    }

    #[test]
    fn equal_length_inputs_pack_without_padding() {
        let seqs: Vec<Vec<usize>> = (0..12).map(|i| vec![3 + i % 5; 10]).collect();
        let cfg = PackConfig { batch_rows: 4, min_len: 8, max_len: 16, pad_id: 0, seed: 1, epochs: 1 };
        let p = pack_batches(&seqs, &cfg).unwrap();
        assert_eq!(p.batches.len(), 3);
        for b in &p.batches {
            assert!(b.pad.iter().flatten().all(|&x| !x));
            assert!(b.tokens.iter().all(|r| r.len() == 10));
        }
        assert_eq!(p, pack_batches(&seqs, &cfg).unwrap());
    }

    #[test]
    fn short_sequences_are_counted_as_discarded() {
        let seqs = vec![vec![3; 2], vec![3; 9], vec![3; 9]];
        let cfg = PackConfig { batch_rows: 1, min_len: 4, max_len: 16, pad_id: 0, seed: 0, epochs: 1 };
        let p = pack_batches(&seqs, &cfg).unwrap();
        assert_eq!(p.discarded, 1);
        assert_eq!(p.batches.len(), 2);
    }
}
