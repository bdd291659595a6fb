//! Fixed-budget language-model training and fitness evaluation.

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{self, CompileConfig, StackShape};
use crate::dna::Dna;
use crate::stack::{build_stack, Batch, DecoderStack};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corpus: {0}")]
    Corpus(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Byte-level corpus over the compact alphabet of bytes that occur in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub alphabet: Vec<u8>,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
}

pub const VALID_FRACTION: f64 = 0.1;

impl Corpus {
    /// Splits off the last tenth as validation.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut seen = [false; 256];
        for &b in bytes {
            seen[b as usize] = true;
        }
        let alphabet: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        let mut index = [0u32; 256];
        for (i, &b) in alphabet.iter().enumerate() {
            index[b as usize] = i as u32;
        }
        let tokens: Vec<u32> = bytes.iter().map(|&b| index[b as usize]).collect();
        let split = tokens.len() - (tokens.len() as f64 * VALID_FRACTION).round() as usize;
        let corpus = Corpus { alphabet, train: tokens[..split].to_vec(), valid: tokens[split..].to_vec() };
        if corpus.train.len() < 2 || corpus.valid.len() < 2 {
            return Err(TrainError::Corpus(format!("{} bytes is too small to split", bytes.len())));
        }
        Ok(corpus)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// A deterministic synthetic text corpus of about 200 KB.
    pub fn bundled() -> Self {
        Self::from_bytes(synthetic_text(200_000, 0).as_bytes()).expect("non-trivial text")
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    /// Loss recorded for degenerate runs.
    pub fn ceiling(&self) -> f64 {
        degeneracy_ceiling(self.vocab())
    }

    fn windows_needed(&self, seq: usize) -> Result<(), TrainError> {
        if self.train.len() <= seq || self.valid.len() <= seq {
            return Err(TrainError::Corpus(format!("splits shorter than seq {seq} + 1")));
        }
        Ok(())
    }

    fn window(tokens: &[u32], start: usize, seq: usize, batch: &mut Batch) {
        batch.inputs.extend_from_slice(&tokens[start..start + seq]);
        batch.targets.extend_from_slice(&tokens[start + 1..start + seq + 1]);
    }

    pub fn sample_train(&self, rows: usize, seq: usize, rng: &mut impl Rng) -> Batch {
        let mut b = Batch { batch: rows, inputs: Vec::new(), targets: Vec::new() };
        for _ in 0..rows {
            let start = rng.random_range(0..self.train.len() - seq);
            Self::window(&self.train, start, seq, &mut b);
        }
        b
    }

    /// Evenly spaced validation windows; identical on every call.
    pub fn valid_batches(&self, rows: usize, seq: usize, count: usize) -> Vec<Batch> {
        let span = self.valid.len() - seq;
        let total = rows * count;
        (0..count)
            .map(|c| {
                let mut b = Batch { batch: rows, inputs: Vec::new(), targets: Vec::new() };
                for r in 0..rows {
                    let start = (c * rows + r) * span / total.max(1);
                    Self::window(&self.valid, start, seq, &mut b);
                }
                b
            })
            .collect()
    }
}

pub fn degeneracy_ceiling(vocab: usize) -> f64 {
    2.0 * (vocab as f64).ln()
}

/// English-like text from a fixed word-level Markov chain.
pub fn synthetic_text(len: usize, seed: u64) -> String {
    const WORDS: [&str; 48] = [
        "the", "a", "small", "old", "red", "quiet", "river", "house", "cat", "dog", "bird", "tree", "road",
        "city", "light", "stone", "runs", "sees", "finds", "keeps", "holds", "makes", "takes", "near",
        "under", "over", "with", "from", "into", "and", "but", "then", "slowly", "often", "never", "still",
        "green", "cold", "bright", "long", "boat", "field", "wind", "rain", "sings", "waits", "falls", "grows",
    ];
    let mut structure = ChaCha8Rng::seed_from_u64(0x5EED);
    let next: Vec<Vec<usize>> = (0..WORDS.len())
        .map(|_| (0..4).map(|_| structure.random_range(0..WORDS.len())).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(len + 64);
    let mut sentences = 0;
    while out.len() < len {
        let words = rng.random_range(4..12);
        let mut w = rng.random_range(0..WORDS.len());
        for i in 0..words {
            let word = WORDS[w];
            if i == 0 {
                let mut cs = word.chars();
                let first = cs.next().expect("non-empty word").to_ascii_uppercase();
                out.push(first);
                out.push_str(cs.as_str());
            } else {
                out.push(' ');
                out.push_str(word);
            }
            w = next[w][rng.random_range(0..4)];
        }
        out.push('.');
        sentences += 1;
        out.push(if sentences % 5 == 0 { '\n' } else { ' ' });
    }
    out.truncate(len);
    out
}

/// Training length: a step count or wall-clock seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Budget {
    Steps(u64),
    Seconds(f64),
}

impl Budget {
    pub fn total(self) -> f64 {
        match self {
            Budget::Steps(n) => n as f64,
            Budget::Seconds(s) => s,
        }
    }

    pub fn scaled(self, factor: f64) -> Budget {
        match self {
            Budget::Steps(n) => Budget::Steps(((n as f64) * factor).round().max(1.0) as u64),
            Budget::Seconds(s) => Budget::Seconds(s * factor),
        }
    }
}

impl FromStr for Budget {
    type Err = String;

    /// `500` (steps), `500steps`, `90s`, `30m`, `7h`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let split = t.find(|c: char| !(c.is_ascii_digit() || c == '.')).unwrap_or(t.len());
        let (num, unit) = t.split_at(split);
        let value: f64 = num.parse().map_err(|_| format!("bad budget {s:?}"))?;
        if !(value.is_finite() && value > 0.0) {
            return Err(format!("budget must be positive: {s:?}"));
        }
        let secs = match unit {
            "" | "steps" | "step" => {
                if value.fract() != 0.0 {
                    return Err(format!("step budgets are whole numbers: {s:?}"));
                }
                return Ok(Budget::Steps(value as u64));
            }
            "s" | "sec" => value,
            "m" | "min" => value * 60.0,
            "h" => value * 3600.0,
            _ => return Err(format!("unknown budget unit in {s:?}")),
        };
        Ok(Budget::Seconds(secs))
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Steps(n) => write!(f, "{n}"),
            Budget::Seconds(s) => write!(f, "{s}s"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub seq: usize,
    pub budget: Budget,
    pub warmup: u64,
    pub peak_lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between curve samples; 0 samples only at hurdles and the end.
    pub eval_every: u64,
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_tokens: 4096,
            seq: 64,
            budget: Budget::Steps(1000),
            warmup: 100,
            peak_lr: 0.01,
            clip_norm: 10.0,
            seed: 0,
            eval_every: 100,
            eval_batches: 2,
        }
    }
}

impl TrainConfig {
    pub fn rows(&self) -> usize {
        (self.batch_tokens / self.seq).max(1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.seq == 0 || self.batch_tokens == 0 || self.eval_batches == 0 {
            return bad("seq, batch tokens and eval batches must be positive");
        }
        if self.warmup == 0 {
            return bad("warmup must be at least one step");
        }
        if let Budget::Steps(n) = self.budget {
            if self.warmup > n {
                return bad("warmup exceeds the step budget");
            }
        }
        if !(self.peak_lr > 0.0 && self.clip_norm > 0.0) {
            return bad("learning rate and clip norm must be positive");
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then reciprocal square-root decay.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
    peak * (s / w).min((w / s).sqrt())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(shapes: &[Vec<f64>]) -> Self {
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub id: u64,
    /// Hurdles passed.
    pub hurdle: usize,
    pub steps: u64,
    pub seconds: f64,
    /// Validation loss in nats per token.
    pub loss: f64,
    pub perplexity: f64,
    pub degenerate: bool,
    pub params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FitnessRecord {
    pub fn degenerate(id: u64, ceiling: f64, error: impl Into<String>) -> Self {
        Self {
            id,
            hurdle: 0,
            steps: 0,
            seconds: 0.0,
            loss: ceiling,
            perplexity: ceiling.exp(),
            degenerate: true,
            params: 0,
            error: Some(error.into()),
        }
    }

    /// Fitness used for comparisons: lower is better.
    pub fn fitness(&self) -> f64 {
        self.loss
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub wall_seconds: f64,
    pub train_loss: f64,
    pub valid_loss: f64,
}

pub const CURVE_HEADER: &str = "step,wall_seconds,train_loss,valid_loss";

/// CSV with [`CURVE_HEADER`]. Wall-clock times are written only when asked,
/// so step-budget runs produce identical files.
pub fn curve_csv(curve: &[CurvePoint], with_times: bool) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for p in curve {
        let t = if with_times { p.wall_seconds } else { 0.0 };
        out.push_str(&format!("{},{t},{},{}\n", p.step, p.train_loss, p.valid_loss));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: FitnessRecord,
    pub curve: Vec<CurvePoint>,
}

/// Decides at each hurdle whether training continues, given the hurdle index
/// and the validation loss there.
pub trait HurdleHook {
    fn thresholds(&self) -> &[f64];
    fn gate(&mut self, index: usize, fitness: f64) -> bool;
}

/// Trains to the end of the budget with no hurdles.
pub struct NoHurdles;

impl HurdleHook for NoHurdles {
    fn thresholds(&self) -> &[f64] {
        &[]
    }

    fn gate(&mut self, _: usize, _: f64) -> bool {
        true
    }
}

fn mean_loss(stack: &DecoderStack, batches: &[Batch]) -> Result<f64, TensorError> {
    let mut total = 0.0;
    for b in batches {
        total += stack.loss(b)?;
    }
    Ok(total / batches.len() as f64)
}

/// Teacher-forced next-token training with Adam, warmup/rsqrt schedule and
/// global-norm clipping. Numeric failures end the run as degenerate.
pub fn train(
    stack: &mut DecoderStack,
    corpus: &Corpus,
    cfg: &TrainConfig,
    hook: &mut dyn HurdleHook,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if cfg.seq != stack.seq() {
        return Err(TrainError::InvalidConfig(format!("seq {} for a stack of seq {}", cfg.seq, stack.seq())));
    }
    if corpus.vocab() > stack.vocab {
        return Err(TrainError::InvalidConfig("corpus alphabet exceeds stack vocab".into()));
    }
    corpus.windows_needed(cfg.seq)?;
    let ceiling = corpus.ceiling();
    let valid = corpus.valid_batches(cfg.rows(), cfg.seq, cfg.eval_batches);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&stack.params);
    let thresholds = hook.thresholds().to_vec();
    let start = Instant::now();

    let mut record = FitnessRecord {
        id: 0,
        hurdle: 0,
        steps: 0,
        seconds: 0.0,
        loss: ceiling,
        perplexity: ceiling.exp(),
        degenerate: false,
        params: stack.param_count(),
        error: None,
    };
    let mut curve = Vec::new();
    let (mut running, mut running_n) = (0.0, 0u32);
    let mut step = 0u64;
    let mut last_valid = None;

    let fail = |record: &mut FitnessRecord, err: String| {
        record.degenerate = true;
        record.loss = ceiling;
        record.error = Some(err);
    };

    loop {
        let elapsed = start.elapsed().as_secs_f64();
        let used = match cfg.budget {
            Budget::Steps(_) => step as f64,
            Budget::Seconds(_) => elapsed,
        };
        let done = used >= cfg.budget.total();
        let hurdle_due = thresholds.get(record.hurdle).is_some_and(|&t| used >= t);
        let sample_due = step == 0 || (cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every));

        if done || hurdle_due || sample_due {
            let vl = match mean_loss(stack, &valid) {
                Ok(v) if v.is_finite() => v,
                Ok(_) => {
                    fail(&mut record, "non-finite validation loss".into());
                    break;
                }
                Err(e) => {
                    fail(&mut record, e.to_string());
                    break;
                }
            };
            if last_valid.is_none_or(|(s, _)| s != step) {
                let train_loss = if running_n > 0 { running / f64::from(running_n) } else { vl };
                curve.push(CurvePoint { step, wall_seconds: elapsed, train_loss, valid_loss: vl });
                (running, running_n) = (0.0, 0);
            }
            last_valid = Some((step, vl));
            record.loss = vl;
            if vl > ceiling {
                fail(&mut record, format!("validation loss {vl} above ceiling {ceiling}"));
                break;
            }
            if done {
                break;
            }
            if hurdle_due {
                let i = record.hurdle;
                if !hook.gate(i, vl) {
                    break;
                }
                record.hurdle += 1;
                continue;
            }
        }

        let batch = corpus.sample_train(cfg.rows(), cfg.seq, &mut rng);
        let (loss, mut grads) = match stack.loss_and_grad(&batch) {
            Ok(x) => x,
            Err(e) => {
                fail(&mut record, e.to_string());
                break;
            }
        };
        clip_global_norm(&mut grads, cfg.clip_norm);
        step += 1;
        adam.step(&mut stack.params, &grads, lr_schedule(step, cfg.warmup, cfg.peak_lr));
        if stack.params.iter().flatten().any(|p| !p.is_finite()) {
            fail(&mut record, "non-finite parameters".into());
            break;
        }
        running += loss;
        running_n += 1;
    }
    record.steps = step;
    record.seconds = start.elapsed().as_secs_f64();
    record.perplexity = record.loss.exp();
    Ok(TrainOutcome { record, curve })
}

/// How the block is sized before training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Sizing {
    Unit(u64),
    Params { min: usize, max: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub sizing: Sizing,
    pub d_model_rel: u64,
    pub guards_on: bool,
    pub layers: usize,
    pub tied: bool,
    /// Stacks whose estimated per-token cost exceeds this are not trained.
    pub max_cost: Option<f64>,
    /// With a step budget, scales each run's steps by this cost over the
    /// stack's own, so every candidate gets about the same compute.
    pub reference_cost: Option<f64>,
    /// Most a cheap stack's step budget may grow under `reference_cost`.
    pub max_stretch: f64,
    pub train: TrainConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sizing: Sizing::Unit(4), d_model_rel: 8, guards_on: true, layers: 2, tied: true, max_cost: None, reference_cost: None, max_stretch: 1.0, train: TrainConfig::default() }
    }
}

impl EvalConfig {
    pub fn compile_config(&self) -> CompileConfig {
        CompileConfig {
            d_model_rel: self.d_model_rel,
            seq: self.train.seq,
            guards: if self.guards_on { crate::tensor::Guards::On } else { crate::tensor::Guards::Off },
            ..CompileConfig::default()
        }
    }
}

/// Estimated per-token cost of a whole stack: blocks plus embedding and
/// output projection.
pub fn stack_cost(block: &compiler::Graph, layers: usize, vocab: usize) -> f64 {
    layers as f64 * block.cost_per_token() + 2.0 * (vocab * block.d_model) as f64
}

struct ScaledHook<'a> {
    inner: &'a mut dyn HurdleHook,
    thresholds: Vec<f64>,
}

impl HurdleHook for ScaledHook<'_> {
    fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    fn gate(&mut self, index: usize, fitness: f64) -> bool {
        self.inner.gate(index, fitness)
    }
}

/// Error prefix for blocks rejected by [`EvalConfig::max_cost`].
pub const COST_CAP_ERROR: &str = "compute cap";

/// Resize, compile, stack and train one program. Every failure, including a
/// panic, becomes a degenerate record.
pub fn evaluate_fitness(
    dna: &Dna,
    cfg: &EvalConfig,
    corpus: &Corpus,
    hook: &mut dyn HurdleHook,
    id: u64,
) -> TrainOutcome {
    let ceiling = corpus.ceiling();
    let run = || -> Result<TrainOutcome, String> {
        let base = cfg.compile_config();
        let shape = StackShape { layers: cfg.layers, vocab: corpus.vocab(), tied: cfg.tied };
        let unit = match cfg.sizing {
            Sizing::Unit(u) => u,
            Sizing::Params { min, max } => {
                compiler::resize_to_budget(dna, min, max, &base, &shape).map_err(|e| e.to_string())?.scale_unit
            }
        };
        let block = compiler::compile(dna, &base.with_unit(unit), cfg.train.seed).map_err(|e| e.to_string())?;
        let cost = stack_cost(&block.graph, cfg.layers, corpus.vocab());
        if let Some(cap) = cfg.max_cost {
            if cost > cap {
                return Err(format!("{COST_CAP_ERROR}: {cost:.0} per token exceeds {cap:.0}"));
            }
        }
        let mut stack = build_stack(&block, cfg.layers, corpus.vocab(), cfg.tied, cfg.train.seed ^ 0xA5A5)
            .map_err(|e| e.to_string())?;
        if let (Some(reference), Budget::Steps(n)) = (cfg.reference_cost, cfg.train.budget) {
            let factor = (reference / cost).clamp(1.0 / n as f64, cfg.max_stretch.max(1.0 / n as f64));
            let mut train_cfg = cfg.train;
            train_cfg.budget = Budget::Steps(((n as f64 * factor).round() as u64).max(1));
            train_cfg.warmup = ((cfg.train.warmup as f64 * factor).round() as u64).clamp(1, train_cfg.budget.total() as u64);
            let mut scaled = ScaledHook { inner: hook, thresholds: Vec::new() };
            scaled.thresholds = scaled.inner.thresholds().iter().map(|t| (t * factor).round().max(1.0)).collect();
            return train(&mut stack, corpus, &train_cfg, &mut scaled).map_err(|e| e.to_string());
        }
        train(&mut stack, corpus, &cfg.train, hook).map_err(|e| e.to_string())
    };
    let mut out = match catch_unwind(AssertUnwindSafe(run)) {
        Ok(Ok(out)) => out,
        Ok(Err(e)) => TrainOutcome { record: FitnessRecord::degenerate(id, ceiling, e), curve: Vec::new() },
        Err(_) => TrainOutcome { record: FitnessRecord::degenerate(id, ceiling, "panic during evaluation"), curve: Vec::new() },
    };
    out.record.id = id;
    out
}

/// Median wall-clock seconds of `repeats` forward passes after one warm-up.
pub fn measure_inference(stack: &DecoderStack, batch: usize, repeats: usize) -> Result<f64, TrainError> {
    if repeats < 3 {
        return Err(TrainError::InvalidConfig("at least three repeats".into()));
    }
    let n = batch * stack.seq();
    let tokens: Vec<u32> = (0..n).map(|i| (i % stack.vocab) as u32).collect();
    let b = Batch { batch, inputs: tokens.clone(), targets: tokens };
    stack.logits(&b)?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        stack.logits(&b)?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[repeats / 2])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(10_000, 10_000, 0.01), 0.01);
        assert!((lr_schedule(40_000, 10_000, 0.01) - 0.005).abs() < 1e-15);
        assert!((lr_schedule(1, 10_000, 0.01) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn budgets_parse() {
        assert_eq!("500".parse::<Budget>(), Ok(Budget::Steps(500)));
        assert_eq!("90s".parse::<Budget>(), Ok(Budget::Seconds(90.0)));
        assert_eq!("30m".parse::<Budget>(), Ok(Budget::Seconds(1800.0)));
        assert_eq!("7h".parse::<Budget>(), Ok(Budget::Seconds(25200.0)));
        assert!("7x".parse::<Budget>().is_err());
        assert!("0".parse::<Budget>().is_err());
        assert!("1.5".parse::<Budget>().is_err());
    }

    #[test]
    fn corpus_split_is_disjoint_and_in_vocab() {
        let c = Corpus::from_bytes(b"abcabcabcabcabcabcabcabcabcabcxyz").unwrap();
        assert_eq!(c.alphabet, b"abcxyz");
        assert_eq!(c.train.len() + c.valid.len(), 33);
        assert!(c.train.iter().chain(&c.valid).all(|&t| (t as usize) < c.vocab()));
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn synthetic_text_is_deterministic() {
        assert_eq!(synthetic_text(500, 3), synthetic_text(500, 3));
        assert_ne!(synthetic_text(500, 3), synthetic_text(500, 4));
        assert_eq!(synthetic_text(500, 3).len(), 500);
    }
}
