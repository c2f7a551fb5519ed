//! Fine-tuning examples for sequence classification (SC), token
//! classification (TC), extractive QA and retrieval (IR), plus synthetic
//! generators and the JSONL task format.
//!
//! JSONL schema, one object per line, discriminated by `"task"`:
//!
//! ```text
//! {"task":"sc","tokens":[5,9,4],"label":1}
//! {"task":"tc","tokens":[5,9,4],"tags":[0,1,2]}
//! {"task":"qa","tokens":[5,9,4,7],"answer":[2,3]}      // or "answer":null
//! {"task":"ir","query":[5,9],"positive":[9,4],"negatives":[[6,7],[8]]}
//! ```
//!
//! TC tags use BIO ids: `0` is O; entity type `e` has B = `1 + 2e` and
//! I = `2 + 2e`. QA spans are inclusive token indices.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RESERVED;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sc,
    Tc,
    Qa,
    Ir,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Sc, Task::Tc, Task::Qa, Task::Ir];

    /// Name of the headline metric for this task.
    pub fn metric_name(self) -> &'static str {
        match self {
            Task::Sc => "accuracy",
            Task::Tc => "entity_f1",
            Task::Qa => "f1",
            Task::Ir => "ndcg@10",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sc => "sc",
            Task::Tc => "tc",
            Task::Qa => "qa",
            Task::Ir => "ir",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sc" => Ok(Task::Sc),
            "tc" => Ok(Task::Tc),
            "qa" => Ok(Task::Qa),
            "ir" => Ok(Task::Ir),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskExample {
    Sc { tokens: Vec<usize>, label: usize },
    Tc { tokens: Vec<usize>, tags: Vec<usize> },
    Qa { tokens: Vec<usize>, answer: Option<(usize, usize)> },
    Ir { query: Vec<usize>, positive: Vec<usize>, negatives: Vec<Vec<usize>> },
}

impl TaskExample {
    pub fn task(&self) -> Task {
        match self {
            TaskExample::Sc { .. } => Task::Sc,
            TaskExample::Tc { .. } => Task::Tc,
            TaskExample::Qa { .. } => Task::Qa,
            TaskExample::Ir { .. } => Task::Ir,
        }
    }

    /// Checks structural invariants; the error names the offending field.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let nonempty = |name: &str, t: &[usize]| {
            if t.is_empty() {
                Err(format!("field `{name}` is empty"))
            } else {
                Ok(())
            }
        };
        match self {
            TaskExample::Sc { tokens, .. } => nonempty("tokens", tokens),
            TaskExample::Tc { tokens, tags } => {
                nonempty("tokens", tokens)?;
                if tags.len() != tokens.len() {
                    return Err(format!("field `tags` has {} entries for {} tokens", tags.len(), tokens.len()));
                }
                Ok(())
            }
            TaskExample::Qa { tokens, answer } => {
                nonempty("tokens", tokens)?;
                match *answer {
                    Some((s, e)) if s > e || e >= tokens.len() => {
                        Err(format!("field `answer` span ({s}, {e}) outside {} tokens", tokens.len()))
                    }
                    _ => Ok(()),
                }
            }
            TaskExample::Ir { query, positive, negatives } => {
                nonempty("query", query)?;
                nonempty("positive", positive)?;
                if negatives.iter().any(Vec::is_empty) {
                    return Err("field `negatives` holds an empty document".into());
                }
                Ok(())
            }
        }
    }

    /// Largest token id referenced by the example.
    pub fn max_token(&self) -> usize {
        let m = |t: &[usize]| t.iter().copied().max().unwrap_or(0);
        match self {
            TaskExample::Sc { tokens, .. } | TaskExample::Tc { tokens, .. } | TaskExample::Qa { tokens, .. } => {
                m(tokens)
            }
            TaskExample::Ir { query, positive, negatives } => {
                negatives.iter().map(|n| m(n)).fold(m(query).max(m(positive)), usize::max)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub task: Task,
    pub train: Vec<TaskExample>,
    pub validation: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

impl TaskSplits {
    /// Classes (SC) or tag ids (TC) seen across all splits.
    pub fn num_labels(&self) -> usize {
        self.all()
            .filter_map(|e| match e {
                TaskExample::Sc { label, .. } => Some(label + 1),
                TaskExample::Tc { tags, .. } => tags.iter().max().map(|m| m + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn all(&self) -> impl Iterator<Item = &TaskExample> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, split) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            if split.is_empty() {
                return Err(Error::invalid(format!("{name} split is empty")));
            }
            if let Some(e) = split.iter().find(|e| e.task() != self.task) {
                return Err(Error::invalid(format!("{name} split holds a {} example in a {} dataset", e.task(), self.task)));
            }
        }
        Ok(())
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("train.jsonl"), &self.train)?;
        write_jsonl(&dir.join("validation.jsonl"), &self.validation)?;
        write_jsonl(&dir.join("test.jsonl"), &self.test)
    }

    pub fn read_dir(dir: &Path, task: Task) -> Result<Self> {
        let splits = TaskSplits {
            task,
            train: load_jsonl(&dir.join("train.jsonl"), task)?,
            validation: load_jsonl(&dir.join("validation.jsonl"), task)?,
            test: load_jsonl(&dir.join("test.jsonl"), task)?,
        };
        Ok(splits)
    }
}

/// Layout of the synthetic task generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    /// Ordinary symbols available; ids are `RESERVED..RESERVED + alphabet`.
    pub alphabet: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub num_classes: usize,
    pub entity_types: usize,
    pub ir_negatives: usize,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        TaskGenConfig { alphabet: 40, min_len: 8, max_len: 24, num_classes: 3, entity_types: 2, ir_negatives: 3 }
    }
}

impl TaskGenConfig {
    /// Special symbols reserved by the generators ahead of filler symbols.
    fn specials(&self, task: Task) -> usize {
        match task {
            Task::Sc => self.num_classes,
            Task::Tc => 3 * self.entity_types,
            Task::Qa => 2 + 4,
            Task::Ir => 3 * (self.ir_negatives + 1) * 2,
        }
    }

    fn validate(&self, task: Task) -> Result<()> {
        if self.min_len < 4 || self.min_len > self.max_len {
            return Err(Error::config("task lengths must satisfy 4 <= min_len <= max_len"));
        }
        if self.num_classes < 2 || self.entity_types == 0 || self.ir_negatives == 0 {
            return Err(Error::config("need >= 2 classes, >= 1 entity type and >= 1 IR negative"));
        }
        if self.specials(task) + 4 > self.alphabet {
            return Err(Error::config(format!("alphabet {} too small for the {task} generator", self.alphabet)));
        }
        Ok(())
    }
}

fn filler(cfg: &TaskGenConfig, task: Task, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let lo = RESERVED + cfg.specials(task);
    (0..len).map(|_| rng.gen_range(lo..RESERVED + cfg.alphabet)).collect()
}

fn gen_example(task: Task, cfg: &TaskGenConfig, rng: &mut ChaCha8Rng, index: usize) -> TaskExample {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    match task {
        Task::Sc => {
            // Round-robin labels keep the classes balanced.
            let label = index % cfg.num_classes;
            let mut tokens = filler(cfg, task, rng, len);
            let at = rng.gen_range(0..len);
            tokens[at] = RESERVED + label;
            TaskExample::Sc { tokens, label }
        }
        Task::Tc => {
            let mut tokens = filler(cfg, task, rng, len);
            let mut tags = vec![0; len];
            let mut pos = rng.gen_range(0..3);
            while pos < len {
                let e = rng.gen_range(0..cfg.entity_types);
                let span = rng.gen_range(1..=3).min(len - pos);
                for k in 0..span {
                    tokens[pos + k] = RESERVED + 3 * e + rng.gen_range(0..3);
                    tags[pos + k] = if k == 0 { 1 + 2 * e } else { 2 + 2 * e };
                }
                pos += span + rng.gen_range(1..=5);
            }
            TaskExample::Tc { tokens, tags }
        }
        Task::Qa => {
            // [question, filler…, marker, answer…, filler…]; position 0 is the
            // no-answer sentinel and never part of a span.
            let (question, marker) = (RESERVED, RESERVED + 1);
            let mut tokens = filler(cfg, task, rng, len);
            tokens[0] = question;
            let answerable = rng.gen_bool(0.8);
            let answer = answerable.then(|| {
                let span = rng.gen_range(1..=3);
                let m = rng.gen_range(1..len - span);
                tokens[m] = marker;
                for k in 0..span {
                    tokens[m + 1 + k] = RESERVED + 2 + rng.gen_range(0..4);
                }
                (m + 1, m + span)
            });
            TaskExample::Qa { tokens, answer }
        }
        Task::Ir => {
            // Planted symbols come in disjoint groups of three; the query and
            // its positive share one group, each negative draws another.
            let groups = cfg.specials(task) / 3;
            let mut picks: Vec<usize> = (0..groups).collect();
            picks.shuffle(rng);
            let plant = |rng: &mut ChaCha8Rng, g: usize, len: usize| {
                let mut t = filler(cfg, task, rng, len);
                let at = rng.gen_range(0..len);
                t[at] = RESERVED + 3 * g + rng.gen_range(0..3);
                t
            };
            let qlen = rng.gen_range(cfg.min_len / 2..=cfg.min_len.max(4));
            let query = plant(rng, picks[0], qlen.max(2));
            let positive = plant(rng, picks[0], len);
            let negatives = (1..=cfg.ir_negatives)
                .map(|k| {
                    let l = rng.gen_range(cfg.min_len..=cfg.max_len);
                    plant(rng, picks[k], l)
                })
                .collect();
            TaskExample::Ir { query, positive, negatives }
        }
    }
}

/// The planted-symbol group an IR token belongs to, if any.
pub fn ir_planted_group(cfg: &TaskGenConfig, token: usize) -> Option<usize> {
    let s = token.checked_sub(RESERVED)?;
    (s < cfg.specials(Task::Ir)).then_some(s / 3)
}

/// Generates `size` distinct examples split 60/20/20 into train,
/// validation and test.
pub fn gen_task_data(task: Task, size: usize, seed: u64, cfg: &TaskGenConfig) -> Result<TaskSplits> {
    if size < 30 {
        return Err(Error::invalid(format!("task dataset size {size} too small to split (need >= 30)")));
    }
    cfg.validate(task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(size);
    let mut examples = Vec::with_capacity(size);
    let mut attempts = 0;
    while examples.len() < size {
        attempts += 1;
        if attempts > 100 * size {
            return Err(Error::invalid("could not generate enough distinct examples"));
        }
        let ex = gen_example(task, cfg, &mut rng, examples.len());
        if seen.insert(ex.clone()) {
            examples.push(ex);
        }
    }
    examples.shuffle(&mut rng);
    let n_train = size * 6 / 10;
    let n_val = size / 5;
    let test = examples.split_off(n_train + n_val);
    let validation = examples.split_off(n_train);
    Ok(TaskSplits { task, train: examples, validation, test })
}

pub fn write_jsonl(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut out = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut out, e).map_err(|err| Error::invalid(err.to_string()))?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Reads and validates a JSONL task file. Blank lines are skipped; every
/// error carries its 1-based line number.
pub fn load_jsonl(path: &Path, task: Task) -> Result<Vec<TaskExample>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::Data { path: path.to_path_buf(), line: line_no, message };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TaskExample = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
        if ex.task() != task {
            return Err(err(format!("field `task` is {}, expected {task}", ex.task())));
        }
        ex.validate().map_err(err)?;
        out.push(ex);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_disjoint_and_sized() {
        for task in Task::ALL {
            let s = gen_task_data(task, 100, 7, &TaskGenConfig::default()).unwrap();
            assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (60, 20, 20));
            s.validate().unwrap();
            let all: HashSet<_> = s.all().collect();
            assert_eq!(all.len(), 100, "{task}");
            assert!(s.all().all(|e| e.validate().is_ok()));
            assert_eq!(s, gen_task_data(task, 100, 7, &TaskGenConfig::default()).unwrap());
        }
    }

    #[test]
    fn too_small_rejected() {
        assert!(gen_task_data(Task::Sc, 29, 0, &TaskGenConfig::default()).is_err());
        let tiny = TaskGenConfig { alphabet: 8, ..TaskGenConfig::default() };
        assert!(gen_task_data(Task::Ir, 50, 0, &tiny).is_err());
    }

    #[test]
    fn qa_spans_in_bounds_and_skip_sentinel() {
        let s = gen_task_data(Task::Qa, 300, 2, &TaskGenConfig::default()).unwrap();
        let mut none = 0;
        for e in s.all() {
            let TaskExample::Qa { tokens, answer } = e else { unreachable!() };
            match answer {
                Some((a, b)) => assert!(0 < *a && a <= b && *b < tokens.len()),
                None => none += 1,
            }
        }
        assert!(none > 0 && none < 300);
    }

    #[test]
    fn tc_tags_are_bio_valid() {
        let s = gen_task_data(Task::Tc, 100, 3, &TaskGenConfig::default()).unwrap();
        for e in s.all() {
            let TaskExample::Tc { tags, .. } = e else { unreachable!() };
            for (i, &t) in tags.iter().enumerate() {
                if t != 0 && t % 2 == 0 {
                    assert!(i > 0 && (tags[i - 1] == t - 1 || tags[i - 1] == t));
                }
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for task in Task::ALL {
            let s = gen_task_data(task, 40, 1, &TaskGenConfig::default()).unwrap();
            let path = dir.path().join(format!("{task}.jsonl"));
            write_jsonl(&path, &s.train).unwrap();
            assert_eq!(load_jsonl(&path, task).unwrap(), s.train);
        }
    }

    #[test]
    fn jsonl_errors_cite_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(
            &path,
            "{\"task\":\"sc\",\"tokens\":[4],\"label\":0}\n{\"task\":\"sc\",\"tokens\":[5],\"label\":1}\n{\"task\":\"sc\",\"tokens\":[6]}\n",
        )
        .unwrap();
        let msg = load_jsonl(&path, Task::Sc).unwrap_err().to_string();
        assert!(msg.contains(":3:") && msg.contains("label"), "{msg}");

        fs::write(&path, "{\"task\":\"tc\",\"tokens\":[4,5],\"tags\":[0]}\n").unwrap();
        let msg = load_jsonl(&path, Task::Tc).unwrap_err().to_string();
        assert!(msg.contains(":1:") && msg.contains("tags"), "{msg}");

        fs::write(&path, "{\"task\":\"qa\",\"tokens\":[4,5],\"answer\":[1,2]}\n").unwrap();
        assert!(load_jsonl(&path, Task::Qa).is_err());
        assert!(load_jsonl(&path, Task::Sc).unwrap_err().to_string().contains("task"));

        fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path, Task::Ir).unwrap().is_empty());
    }
}
