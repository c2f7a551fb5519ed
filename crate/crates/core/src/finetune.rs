//! Fine-tuning and evaluation: task heads over the bidirectional encoder,
//! task losses, a learning-rate grid search over several seeds, and
//! zero-shot retrieval evaluation.
//!
//! Heads:
//! - SC: linear classifier on the mean-pooled hidden states.
//! - TC: per-token linear tagger.
//! - QA: per-token start and end scores; position 0 stands for "no answer".
//! - IR: no head; mean-pooled, L2-normalised embeddings scored by cosine
//!   similarity over a temperature, trained with InfoNCE against every
//!   document in the batch.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accuracy, entity_f1, mean_ci95, ndcg_at_10, qa_f1, summarize_ranking, token_tag_f1};
use crate::model::{forward_on, AttentionMode, ModelConfig, ParamVars, Parameters};
use crate::optim::{adamw_step, clip_global_norm, finetune_lr, AdamWConfig, AdamWState};
use crate::tape::{Tape, Var, IGNORE_INDEX};
use crate::tasks::{Task, TaskExample, TaskSplits};
use crate::tensor::Tensor;

pub const STUDY_LRS: [f64; 6] = [1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4];
pub const STUDY_SEEDS: usize = 5;
const HEAD: &str = "head.weight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchSpec {
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub max_steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub adamw: AdamWConfig,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// InfoNCE temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_clip() -> f64 {
    1.0
}

fn default_temperature() -> f64 {
    0.05
}

impl Default for GridSearchSpec {
    fn default() -> Self {
        GridSearchSpec {
            lrs: STUDY_LRS.to_vec(),
            seeds: (0..STUDY_SEEDS as u64).collect(),
            max_steps: 1000,
            batch_size: 32,
            adamw: AdamWConfig::default(),
            clip_norm: 1.0,
            temperature: 0.05,
        }
    }
}

impl GridSearchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lrs.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("grid search needs at least one lr and one seed"));
        }
        if self.lrs.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.max_steps == 0 || self.batch_size == 0 {
            return Err(Error::config("max_steps and batch_size must be positive"));
        }
        if !(self.temperature > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("temperature and clip_norm must be positive"));
        }
        Ok(())
    }

    /// True when the lr set and seed count are the study's.
    pub fn is_study_grid(&self) -> bool {
        self.lrs == STUDY_LRS && self.seeds.len() == STUDY_SEEDS
    }

    /// Steps for a training set: one epoch, capped at `max_steps`.
    pub fn steps_for(&self, train_len: usize) -> u64 {
        (train_len.div_ceil(self.batch_size) as u64).min(self.max_steps)
    }
}

/// Encoder weights plus an optional task head.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetunedModel {
    pub task: Task,
    pub model: ModelConfig,
    pub params: Parameters,
    pub temperature: f64,
}

fn head_width(task: Task, num_labels: usize) -> Option<usize> {
    match task {
        Task::Sc | Task::Tc => Some(num_labels),
        Task::Qa => Some(2),
        Task::Ir => None,
    }
}

impl FinetunedModel {
    /// Copies the encoder and draws a head from `N(0, 1/d)`.
    pub fn new(
        task: Task,
        model: &ModelConfig,
        encoder: &Parameters,
        num_labels: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<Self> {
        encoder.check_against(model)?;
        let mut params = encoder.clone();
        if let Some(width) = head_width(task, num_labels) {
            if width < 2 && task != Task::Qa {
                return Err(Error::invalid(format!("{task} head needs at least 2 labels, got {width}")));
            }
            let d = model.embed_dim;
            let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).map_err(|e| Error::config(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..d * width).map(|_| normal.sample(&mut rng)).collect();
            params.insert(HEAD, Tensor::new(vec![d, width], data)?);
        }
        Ok(FinetunedModel { task, model: model.clone(), params, temperature })
    }
}

/// Final hidden states `[T×d]` under bidirectional attention.
pub fn encode(params: &Parameters, cfg: &ModelConfig, tokens: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, params, false);
    let h = encode_on(&mut tape, &vars, cfg, tokens)?;
    Ok(tape.value(h).clone())
}

pub fn encode_on(tape: &mut Tape, vars: &ParamVars, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    let pad = vec![false; tokens.len()];
    Ok(forward_on(tape, vars, cfg, tokens, AttentionMode::Bidirectional, &pad)?.hidden)
}

/// Mean-pooled, unit-length sequence embedding `[1×d]`.
fn embed_on(tape: &mut Tape, vars: &ParamVars, cfg: &ModelConfig, tokens: &[usize]) -> Result<Var> {
    let h = encode_on(tape, vars, cfg, tokens)?;
    let pooled = tape.mean_pool(h, &vec![true; tokens.len()])?;
    let row = tape.reshape(pooled, &[1, cfg.embed_dim])?;
    tape.l2_normalize_rows(row)
}

/// Per-position `[start, end]` scores as two `[1×T]` rows.
fn qa_scores_on(tape: &mut Tape, vars: &ParamVars, cfg: &ModelConfig, tokens: &[usize]) -> Result<(Var, Var)> {
    let h = encode_on(tape, vars, cfg, tokens)?;
    let scores = tape.matmul(h, vars.get(HEAD)?)?;
    let start = tape.slice_cols(scores, 0, 1)?;
    let start = tape.transpose(start)?;
    let end = tape.slice_cols(scores, 1, 1)?;
    let end = tape.transpose(end)?;
    Ok((start, end))
}

fn mean_of(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let stacked = tape.stack_rows(losses)?;
    let total = tape.sum(stacked);
    tape.scale(total, 1.0 / losses.len() as f64)
}

/// Mean loss of a batch of examples for `task`.
pub fn task_loss_on(
    tape: &mut Tape,
    vars: &ParamVars,
    cfg: &ModelConfig,
    task: Task,
    temperature: f64,
    batch: &[TaskExample],
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty fine-tuning batch"));
    }
    if let Some(e) = batch.iter().find(|e| e.task() != task) {
        return Err(Error::invalid(format!("{} example in a {task} batch", e.task())));
    }
    if task == Task::Ir {
        return info_nce_on(tape, vars, cfg, temperature, batch);
    }
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let loss = match ex {
            TaskExample::Sc { tokens, label } => {
                let h = encode_on(tape, vars, cfg, tokens)?;
                let pooled = tape.mean_pool(h, &vec![true; tokens.len()])?;
                let row = tape.reshape(pooled, &[1, cfg.embed_dim])?;
                let logits = tape.matmul(row, vars.get(HEAD)?)?;
                tape.cross_entropy(logits, &[*label], IGNORE_INDEX)?
            }
            TaskExample::Tc { tokens, tags } => {
                let h = encode_on(tape, vars, cfg, tokens)?;
                let logits = tape.matmul(h, vars.get(HEAD)?)?;
                tape.cross_entropy(logits, tags, IGNORE_INDEX)?
            }
            TaskExample::Qa { tokens, answer } => {
                let (start, end) = qa_scores_on(tape, vars, cfg, tokens)?;
                let (s, e) = answer.unwrap_or((0, 0));
                let ls = tape.cross_entropy(start, &[s], IGNORE_INDEX)?;
                let le = tape.cross_entropy(end, &[e], IGNORE_INDEX)?;
                let both = tape.add(ls, le)?;
                tape.scale(both, 0.5)?
            }
            TaskExample::Ir { .. } => unreachable!("handled above"),
        };
        losses.push(loss);
    }
    mean_of(tape, &losses)
}

/// InfoNCE over the batch: query `i` must pick its own positive among all
/// positives and negatives of the batch.
fn info_nce_on(tape: &mut Tape, vars: &ParamVars, cfg: &ModelConfig, temperature: f64, batch: &[TaskExample]) -> Result<Var> {
    let mut queries = Vec::with_capacity(batch.len());
    let mut positives = Vec::with_capacity(batch.len());
    let mut negatives = Vec::new();
    for ex in batch {
        let TaskExample::Ir { query, positive, negatives: negs } = ex else { unreachable!() };
        queries.push(embed_on(tape, vars, cfg, query)?);
        positives.push(embed_on(tape, vars, cfg, positive)?);
        for n in negs {
            negatives.push(embed_on(tape, vars, cfg, n)?);
        }
    }
    let q = tape.stack_rows(&queries)?;
    let docs: Vec<Var> = positives.into_iter().chain(negatives).collect();
    let d = tape.stack_rows(&docs)?;
    let dt = tape.transpose(d)?;
    let sims = tape.matmul(q, dt)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..batch.len()).collect();
    tape.cross_entropy(logits, &targets, IGNORE_INDEX)
}

/// Value-only batch loss.
pub fn task_loss(model: &FinetunedModel, batch: &[TaskExample]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &model.params, false);
    let loss = task_loss_on(&mut tape, &vars, &model.model, model.task, model.temperature, batch)?;
    tape.value(loss).item()
}

fn check_examples(model: &ModelConfig, task: Task, examples: &[TaskExample], num_labels: usize) -> Result<()> {
    for (i, e) in examples.iter().enumerate() {
        if e.task() != task {
            return Err(Error::invalid(format!("example {i} is {}, expected {task}", e.task())));
        }
        e.validate().map_err(|m| Error::invalid(format!("example {i}: {m}")))?;
        if e.max_token() >= model.vocab_size {
            return Err(Error::invalid(format!(
                "example {i} uses token {} but the vocabulary has {} entries",
                e.max_token(),
                model.vocab_size
            )));
        }
        let label_ok = match e {
            TaskExample::Sc { label, .. } => *label < num_labels,
            TaskExample::Tc { tags, .. } => tags.iter().all(|&t| t < num_labels),
            _ => true,
        };
        if !label_ok {
            return Err(Error::invalid(format!("example {i} has a label outside 0..{num_labels}")));
        }
    }
    Ok(())
}

/// Fine-tunes a copy of `encoder` on `train` for `steps` steps with the
/// fine-tuning schedule peaking at `lr`. `seed` fixes the head init and the
/// example order.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    task: Task,
    model: &ModelConfig,
    encoder: &Parameters,
    train: &[TaskExample],
    num_labels: usize,
    lr: f64,
    seed: u64,
    steps: u64,
    spec: &GridSearchSpec,
) -> Result<FinetunedModel> {
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    check_examples(model, task, train, num_labels)?;
    let mut ft = FinetunedModel::new(task, model, encoder, num_labels, spec.temperature, seed)?;
    let mut state = AdamWState::new(spec.adamw, &ft.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    order.shuffle(&mut rng);
    // One shuffled pass per epoch; the last batch of an epoch may be short.
    let per_epoch = train.len().div_ceil(spec.batch_size) as u64;
    for step in 0..steps {
        let j = (step % per_epoch) as usize;
        if j == 0 && step > 0 {
            order.shuffle(&mut rng);
        }
        let batch: Vec<TaskExample> = order[j * spec.batch_size..((j + 1) * spec.batch_size).min(train.len())]
            .iter()
            .map(|&i| train[i].clone())
            .collect();
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &ft.params, true);
        let loss = task_loss_on(&mut tape, &vars, model, task, spec.temperature, &batch)?;
        if !tape.value(loss).item()?.is_finite() {
            return Err(Error::NonFinite("fine-tuning loss"));
        }
        tape.backward(loss)?;
        let mut grads = vars.gradients(&tape);
        drop(tape);
        clip_global_norm(&mut grads, spec.clip_norm)?;
        adamw_step(&mut ft.params, &grads, &mut state, finetune_lr(lr, steps, step)?)?;
    }
    Ok(ft)
}

/// Metric values for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Headline metric, named by [`Task::metric_name`].
    pub metric: f64,
    /// Secondary metrics, e.g. token-level F1 for tagging.
    pub extra: Vec<(String, f64)>,
    /// Retrieval queries without a relevant document.
    pub skipped: usize,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Decodes start/end scores: start at position 0 means no answer; an end
/// before the start is moved up to the start.
pub fn decode_span(start: &[f64], end: &[f64]) -> Option<(usize, usize)> {
    let s = argmax(start);
    if s == 0 {
        return None;
    }
    Some((s, argmax(end).max(s)))
}

/// Candidate order for one IR query: negatives first, then the positive,
/// sorted by descending cosine similarity. Exact ties keep this order, so a
/// positive that ties a negative ranks below it.
pub fn rank_candidates(model: &FinetunedModel, query: &[usize], positive: &[usize], negatives: &[Vec<usize>]) -> Result<Vec<usize>> {
    let embed = |tokens: &[usize]| -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &model.params, false);
        let v = embed_on(&mut tape, &vars, &model.model, tokens)?;
        Ok(tape.value(v).data().to_vec())
    };
    let q = embed(query)?;
    let mut scored = Vec::with_capacity(negatives.len() + 1);
    for (i, doc) in negatives.iter().map(Vec::as_slice).chain([positive]).enumerate() {
        let e = embed(doc)?;
        scored.push((i, q.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>()));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

pub fn evaluate(model: &FinetunedModel, examples: &[TaskExample]) -> Result<Evaluation> {
    if examples.is_empty() {
        return Err(Error::invalid("empty evaluation split"));
    }
    let task = model.task;
    let num_labels = model.params.get(HEAD).map_or(0, |h| h.shape()[1]);
    check_examples(&model.model, task, examples, if task == Task::Qa { usize::MAX } else { num_labels })?;
    let run = |tokens: &[usize]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &model.params, false);
        let out = match task {
            Task::Sc => {
                let h = encode_on(&mut tape, &vars, &model.model, tokens)?;
                let pooled = tape.mean_pool(h, &vec![true; tokens.len()])?;
                let row = tape.reshape(pooled, &[1, model.model.embed_dim])?;
                tape.matmul(row, vars.get(HEAD)?)?
            }
            _ => {
                let h = encode_on(&mut tape, &vars, &model.model, tokens)?;
                tape.matmul(h, vars.get(HEAD)?)?
            }
        };
        Ok(tape.value(out).clone())
    };

    match task {
        Task::Sc => {
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for ex in examples {
                let TaskExample::Sc { tokens, label } = ex else { unreachable!() };
                preds.push(argmax(run(tokens)?.data()));
                golds.push(*label);
            }
            Ok(Evaluation { metric: accuracy(&preds, &golds)?, extra: Vec::new(), skipped: 0 })
        }
        Task::Tc => {
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            for ex in examples {
                let TaskExample::Tc { tokens, tags } = ex else { unreachable!() };
                let logits = run(tokens)?;
                preds.push((0..tokens.len()).map(|t| argmax(logits.row(t))).collect::<Vec<_>>());
                golds.push(tags.clone());
            }
            let token_f1 = token_tag_f1(&preds, &golds)?;
            Ok(Evaluation {
                metric: entity_f1(&preds, &golds)?,
                extra: vec![("token_f1".into(), token_f1)],
                skipped: 0,
            })
        }
        Task::Qa => {
            let mut total = 0.0;
            for ex in examples {
                let TaskExample::Qa { tokens, answer } = ex else { unreachable!() };
                let scores = run(tokens)?;
                let start: Vec<f64> = (0..tokens.len()).map(|t| scores.row(t)[0]).collect();
                let end: Vec<f64> = (0..tokens.len()).map(|t| scores.row(t)[1]).collect();
                let span_tokens = |span: Option<(usize, usize)>| span.map_or(&[][..], |(s, e)| &tokens[s..=e]);
                total += qa_f1(span_tokens(decode_span(&start, &end)), span_tokens(*answer));
            }
            Ok(Evaluation { metric: total / examples.len() as f64, extra: Vec::new(), skipped: 0 })
        }
        Task::Ir => {
            let mut scores = Vec::with_capacity(examples.len());
            for ex in examples {
                let TaskExample::Ir { query, positive, negatives } = ex else { unreachable!() };
                let ranked = rank_candidates(model, query, positive, negatives)?;
                let relevance: HashMap<usize, f64> = [(negatives.len(), 1.0)].into();
                scores.push(ndcg_at_10(&ranked, &relevance));
            }
            let s = summarize_ranking(&scores);
            if s.evaluated == 0 {
                return Err(Error::invalid("no retrieval query has a relevant document"));
            }
            Ok(Evaluation { metric: s.mean, extra: Vec::new(), skipped: s.skipped })
        }
    }
}

/// Evaluates a fine-tuned retrieval model on another retrieval dataset
/// without further training.
pub fn zero_shot_eval(model: &FinetunedModel, examples: &[TaskExample]) -> Result<Evaluation> {
    if model.task != Task::Ir {
        return Err(Error::invalid(format!("zero-shot evaluation needs an ir model, got {}", model.task)));
    }
    if let Some(e) = examples.iter().find(|e| e.task() != Task::Ir) {
        return Err(Error::invalid(format!("zero-shot dataset holds a {} example", e.task())));
    }
    evaluate(model, examples)
}

/// One (lr, seed) cell of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub lr: f64,
    pub seed: u64,
    pub steps: u64,
    pub validation: Evaluation,
    pub test: Evaluation,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub task: Task,
    pub dataset: String,
    pub runs: Vec<RunResult>,
    pub selected_lr: f64,
    pub test_mean: f64,
    /// `None` with a single seed.
    pub test_ci95: Option<f64>,
    /// Models trained at the selected lr, in seed order.
    pub selected_models: Vec<(u64, FinetunedModel)>,
}

/// Picks the lr with the highest mean validation score; ties go to the
/// smaller lr.
pub fn select_lr(table: &[(f64, Vec<f64>)]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (lr, scores) in table {
        if scores.is_empty() {
            return Err(Error::invalid(format!("no validation scores for lr {lr}")));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        best = match best {
            Some((blr, bmean)) if bmean > mean || (bmean == mean && blr <= *lr) => Some((blr, bmean)),
            _ => Some((*lr, mean)),
        };
    }
    best.map(|(lr, _)| lr).ok_or_else(|| Error::invalid("empty lr table"))
}

/// Fine-tunes every (lr, seed) pair, selects the lr by mean validation
/// score and reports the test mean and 95% half-width across seeds at that
/// lr. Cells run on up to `jobs` threads; results do not depend on `jobs`.
pub fn run_grid_search(
    model: &ModelConfig,
    encoder: &Parameters,
    data: &TaskSplits,
    dataset: &str,
    spec: &GridSearchSpec,
    jobs: usize,
) -> Result<RunReport> {
    spec.validate()?;
    data.validate()?;
    if !spec.is_study_grid() {
        log::warn!("grid search deviates from the study grid (6 learning rates x 5 seeds)");
    }
    let num_labels = data.num_labels();
    check_examples(model, data.task, &data.train, num_labels.max(1))?;
    let steps = spec.steps_for(data.train.len());
    let cells: Vec<(f64, u64)> = spec.lrs.iter().flat_map(|&lr| spec.seeds.iter().map(move |&s| (lr, s))).collect();

    let next = AtomicUsize::new(0);
    type Slot = Option<Result<(RunResult, FinetunedModel)>>;
    let slots: Mutex<Vec<Slot>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(lr, seed)) = cells.get(i) else { break };
        let result = (|| {
            let ft = finetune(data.task, model, encoder, &data.train, num_labels, lr, seed, steps, spec)?;
            let validation = evaluate(&ft, &data.validation)?;
            let test = evaluate(&ft, &data.test)?;
            log::info!("{} lr {lr:e} seed {seed}: validation {:.4} test {:.4}", data.task, validation.metric, test.metric);
            Ok((RunResult { lr, seed, steps, validation, test }, ft))
        })();
        slots.lock().unwrap()[i] = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 1..jobs.max(1).min(cells.len()) {
            s.spawn(work);
        }
        work();
    });

    let mut runs = Vec::with_capacity(cells.len());
    let mut models = Vec::with_capacity(cells.len());
    for slot in slots.into_inner().unwrap() {
        let (run, ft) = slot.expect("every cell ran")?;
        runs.push(run);
        models.push(ft);
    }
    let table: Vec<(f64, Vec<f64>)> = spec
        .lrs
        .iter()
        .map(|&lr| (lr, runs.iter().filter(|r| r.lr == lr).map(|r| r.validation.metric).collect()))
        .collect();
    let selected_lr = select_lr(&table)?;
    let test: Vec<f64> = runs.iter().filter(|r| r.lr == selected_lr).map(|r| r.test.metric).collect();
    let (test_mean, test_ci95) = mean_ci95(&test);
    let selected_models = runs
        .iter()
        .zip(models)
        .filter(|(r, _)| r.lr == selected_lr)
        .map(|(r, m)| (r.seed, m))
        .collect();
    Ok(RunReport { task: data.task, dataset: dataset.to_string(), runs, selected_lr, test_mean, test_ci95, selected_models })
}

pub const RUNS_HEADER: [&str; 7] = ["task", "dataset", "lr", "seed", "split", "metric", "value"];
pub const AGGREGATE_HEADER: [&str; 9] =
    ["task", "dataset", "selected_lr", "seeds", "split", "metric", "mean", "ci95", "ci95_note"];

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// Per-run rows for one split: the headline metric plus any secondary ones.
pub fn write_runs_csv(w: impl Write, report: &RunReport, split: &str) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RUNS_HEADER).map_err(csv_err)?;
    for r in &report.runs {
        let eval = match split {
            "validation" => &r.validation,
            "test" => &r.test,
            other => return Err(Error::invalid(format!("unknown split '{other}'"))),
        };
        let metrics = std::iter::once((report.task.metric_name().to_string(), eval.metric)).chain(eval.extra.iter().cloned());
        for (name, value) in metrics {
            out.write_record([
                report.task.to_string(),
                report.dataset.clone(),
                r.lr.to_string(),
                r.seed.to_string(),
                split.to_string(),
                name,
                value.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Test mean and 95% half-width at the selected lr. A single seed leaves
/// the half-width empty and says so.
pub fn write_aggregate_csv(w: impl Write, report: &RunReport) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(AGGREGATE_HEADER).map_err(csv_err)?;
    let seeds = report.runs.iter().filter(|r| r.lr == report.selected_lr).count();
    let (ci, note) = match report.test_ci95 {
        Some(c) => (c.to_string(), String::new()),
        None => (String::new(), "single seed: no interval".to_string()),
    };
    out.write_record([
        report.task.to_string(),
        report.dataset.clone(),
        report.selected_lr.to_string(),
        seeds.to_string(),
        "test".to_string(),
        report.task.metric_name().to_string(),
        report.test_mean.to_string(),
        ci,
        note,
    ])
    .map_err(csv_err)?;
    out.flush()?;
    Ok(())
}

/// Writes `runs.csv` (test split), `validation.csv` and `aggregate.csv`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_runs_csv(std::fs::File::create(dir.join("runs.csv"))?, report, "test")?;
    write_runs_csv(std::fs::File::create(dir.join("validation.csv"))?, report, "validation")?;
    write_aggregate_csv(std::fs::File::create(dir.join("aggregate.csv"))?, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::tasks::{gen_task_data, TaskGenConfig};

    fn tiny() -> ModelConfig {
        ModelConfig { layers: 1, embed_dim: 8, ffn_dim: 12, heads: 2, kv_heads: 1, vocab_size: 64, max_seq_len: 32, ..ModelConfig::desk() }
    }

    #[test]
    fn lr_selection_prefers_best_mean_then_smaller_lr() {
        let table = vec![(1e-5, vec![0.5, 0.6]), (1e-4, vec![0.9, 0.8]), (5e-4, vec![0.85, 0.85])];
        assert_eq!(select_lr(&table).unwrap(), 1e-4);
        let tied = vec![(2e-4, vec![0.7]), (1e-5, vec![0.7]), (5e-5, vec![0.6])];
        assert_eq!(select_lr(&tied).unwrap(), 1e-5);
    }

    #[test]
    fn span_decoding() {
        assert_eq!(decode_span(&[5.0, 1.0, 0.0], &[0.0, 9.0, 0.0]), None);
        assert_eq!(decode_span(&[0.0, 1.0, 3.0], &[0.0, 9.0, 0.0]), Some((2, 2)));
        assert_eq!(decode_span(&[0.0, 3.0, 1.0], &[0.0, 0.0, 9.0]), Some((1, 2)));
    }

    #[test]
    fn every_task_trains_and_evaluates() {
        let cfg = tiny();
        let enc = init_params(&cfg, 1).unwrap();
        let spec = GridSearchSpec { lrs: vec![1e-3], seeds: vec![0], max_steps: 2, batch_size: 4, ..Default::default() };
        for task in Task::ALL {
            let data = gen_task_data(task, 40, 3, &TaskGenConfig::default()).unwrap();
            let report = run_grid_search(&cfg, &enc, &data, "synthetic", &spec, 1).unwrap();
            assert_eq!(report.runs.len(), 1);
            assert!((0.0..=1.0).contains(&report.test_mean), "{task}: {}", report.test_mean);
            assert_eq!(report.test_ci95, None);
        }
    }

    #[test]
    fn ir_loss_is_invariant_to_batch_order() {
        let cfg = tiny();
        let enc = init_params(&cfg, 2).unwrap();
        let model = FinetunedModel::new(Task::Ir, &cfg, &enc, 0, 0.05, 0).unwrap();
        let data = gen_task_data(Task::Ir, 40, 5, &TaskGenConfig::default()).unwrap();
        let batch: Vec<TaskExample> = data.train[..4].to_vec();
        let mut rev = batch.clone();
        rev.reverse();
        let a = task_loss(&model, &batch).unwrap();
        let b = task_loss(&model, &rev).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let cfg = tiny();
        let enc = init_params(&cfg, 2).unwrap();
        let sc = gen_task_data(Task::Sc, 40, 5, &TaskGenConfig::default()).unwrap();
        let model = FinetunedModel::new(Task::Sc, &cfg, &enc, 3, 0.05, 0).unwrap();
        assert!(zero_shot_eval(&model, &sc.test).is_err());
        let ir = FinetunedModel::new(Task::Ir, &cfg, &enc, 0, 0.05, 0).unwrap();
        assert!(zero_shot_eval(&ir, &sc.test).is_err());
    }

    #[test]
    fn csv_reports() {
        let report = RunReport {
            task: Task::Sc,
            dataset: "d".into(),
            runs: (0..5u64)
                .map(|s| RunResult {
                    lr: 1e-4,
                    seed: s,
                    steps: 1,
                    validation: Evaluation { metric: 0.5, extra: vec![], skipped: 0 },
                    test: Evaluation { metric: (s + 1) as f64, extra: vec![], skipped: 0 },
                })
                .collect(),
            selected_lr: 1e-4,
            test_mean: 3.0,
            test_ci95: Some(1.96 * 2.5f64.sqrt() / 5f64.sqrt()),
            selected_models: vec![],
        };
        let mut buf = Vec::new();
        write_runs_csv(&mut buf, &report, "test").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(text.lines().nth(1).unwrap(), "sc,d,0.0001,0,test,accuracy,1");
        let mut buf = Vec::new();
        write_aggregate_csv(&mut buf, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("sc,d,0.0001,5,test,accuracy,3,1.38"));
    }
}
