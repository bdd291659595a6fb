//! Regularized evolution over programs with halving hurdles.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{self, CompileConfig};
use crate::dna::{Dna, Instruction, Op, Subprogram, BRANCHING_VALUES, CONSTANT_LIMIT, DIM_VOCAB, NUM_CONSTANTS, NUM_DIMS};
use crate::tensor::PrimitiveOp;
use crate::trainer::{evaluate_fitness, Budget, Corpus, EvalConfig, FitnessRecord, HurdleHook, Sizing};

/// Attempts before a mutation that keeps the graph unchanged gives up.
pub const MAX_MUTATION_ATTEMPTS: usize = 20;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid hurdle schedule: {0}")]
    InvalidSchedule(String),
    #[error("{attempts} consecutive mutations left the graph unchanged")]
    MutationStall { attempts: usize },
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Budget gates `t_i = (2^i - 1) / (2^(n+1) - 1) * T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurdleSchedule {
    pub total: f64,
    pub thresholds: Vec<f64>,
}

pub fn build_hurdles(n: usize, total: f64) -> Result<HurdleSchedule, EvolutionError> {
    if !(total.is_finite() && total > 0.0) {
        return Err(EvolutionError::InvalidSchedule(format!("budget {total} must be positive")));
    }
    if n >= 52 {
        return Err(EvolutionError::InvalidSchedule(format!("{n} hurdles exceed float resolution")));
    }
    let denom = (2f64).powi(n as i32 + 1) - 1.0;
    let thresholds = (1..=n).map(|i| ((2f64).powi(i as i32) - 1.0) / denom * total).collect();
    Ok(HurdleSchedule { total, thresholds })
}

impl HurdleSchedule {
    pub fn for_budget(n: usize, budget: Budget) -> Result<Self, EvolutionError> {
        let mut s = build_hurdles(n, budget.total())?;
        if let Budget::Steps(_) = budget {
            for t in &mut s.thresholds {
                *t = t.round();
            }
            let distinct = s.thresholds.windows(2).all(|w| w[0] < w[1]);
            if s.thresholds.first().is_some_and(|&t| t < 1.0) || !distinct || s.thresholds.last().is_some_and(|&t| t >= s.total) {
                return Err(EvolutionError::InvalidSchedule(format!("{n} hurdles do not fit in {budget} steps")));
            }
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    /// Mean budget per candidate when exactly half pass every gate.
    pub fn expected_budget(&self) -> f64 {
        let n = self.thresholds.len() as i32;
        f64::from(n + 1) * self.total / ((2f64).powi(n + 1) - 1.0)
    }
}

/// Fitness history at each hurdle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HurdleStats {
    pub history: Vec<Vec<f64>>,
    /// Median over only the most recent entries when set.
    pub window: Option<usize>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

impl HurdleStats {
    pub fn new(window: Option<usize>) -> Self {
        Self { history: Vec::new(), window }
    }

    fn recent(&self, i: usize) -> &[f64] {
        let h = self.history.get(i).map_or(&[][..], Vec::as_slice);
        match self.window {
            Some(w) if h.len() > w => &h[h.len() - w..],
            _ => h,
        }
    }

    /// Passes iff `fitness` is at or below the running median; an empty
    /// history passes.
    pub fn would_pass(&self, i: usize, fitness: f64) -> bool {
        median(self.recent(i)).is_none_or(|m| fitness <= m)
    }

    pub fn record(&mut self, i: usize, fitness: f64) {
        if self.history.len() <= i {
            self.history.resize(i + 1, Vec::new());
        }
        self.history[i].push(fitness);
    }

    /// Gate and record in one step.
    pub fn gate(&mut self, i: usize, fitness: f64) -> bool {
        let pass = self.would_pass(i, fitness);
        self.record(i, fitness);
        pass
    }
}

/// A gate that decides against a frozen snapshot and remembers what it saw,
/// so concurrent candidates gate identically regardless of timing.
pub struct SnapshotGate<'a> {
    pub thresholds: &'a [f64],
    pub stats: &'a HurdleStats,
    pub seen: Vec<(usize, f64)>,
}

impl HurdleHook for SnapshotGate<'_> {
    fn thresholds(&self) -> &[f64] {
        self.thresholds
    }

    fn gate(&mut self, index: usize, fitness: f64) -> bool {
        self.seen.push((index, fitness));
        self.stats.would_pass(index, fitness)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Op,
    In1,
    In2,
    Constant,
    Dim,
    Branching,
}

/// A fully specified edit, recorded in the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    Delete { sub: usize, pos: usize },
    Insert { sub: usize, pos: usize, instruction: InstructionText },
    DeleteInsert { delete: Box<Mutation>, insert: Box<Mutation> },
    MutateField { sub: usize, pos: usize, field: Field, instruction: InstructionText },
    Swap { sub: usize, a: usize, b: usize },
    MutateConstant { slot: usize, x: f64, y: f64 },
    MutateDim { slot: usize, value: u32 },
}

/// Serializable form of an [`Instruction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionText {
    pub op: String,
    pub in1: usize,
    pub in2: usize,
    pub constant: usize,
    pub dim: usize,
    pub branching: u32,
}

impl From<&Instruction> for InstructionText {
    fn from(i: &Instruction) -> Self {
        Self { op: i.op.name(), in1: i.in1, in2: i.in2, constant: i.const_idx, dim: i.dim_idx, branching: i.branching }
    }
}

impl InstructionText {
    pub fn to_instruction(&self) -> Option<Instruction> {
        Some(Instruction {
            op: Op::from_name(&self.op)?,
            in1: self.in1,
            in2: self.in2,
            const_idx: self.constant,
            dim_idx: self.dim,
            branching: self.branching,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutationClass {
    Delete,
    Insert,
    DeleteInsert,
    MutateField,
    Swap,
    MutateBank,
}

impl MutationClass {
    pub const ALL: [MutationClass; 6] = [
        MutationClass::Delete,
        MutationClass::Insert,
        MutationClass::DeleteInsert,
        MutationClass::MutateField,
        MutationClass::Swap,
        MutationClass::MutateBank,
    ];
}

impl Mutation {
    pub fn class(&self) -> MutationClass {
        match self {
            Mutation::Delete { .. } => MutationClass::Delete,
            Mutation::Insert { .. } => MutationClass::Insert,
            Mutation::DeleteInsert { .. } => MutationClass::DeleteInsert,
            Mutation::MutateField { .. } => MutationClass::MutateField,
            Mutation::Swap { .. } => MutationClass::Swap,
            Mutation::MutateConstant { .. } | Mutation::MutateDim { .. } => MutationClass::MutateBank,
        }
    }
}

fn random_op(sub: usize, subprograms: usize, rng: &mut impl Rng) -> Op {
    let callable = subprograms - sub - 1;
    let k = rng.random_range(0..PrimitiveOp::ALL.len() + callable);
    if k < PrimitiveOp::ALL.len() {
        Op::Prim(PrimitiveOp::ALL[k])
    } else {
        Op::Call(sub + 1 + (k - PrimitiveOp::ALL.len()))
    }
}

/// An instruction at position `pos` of subprogram `sub` with every field
/// drawn uniformly over its valid range.
pub fn random_instruction(sub: usize, pos: usize, subprograms: usize, rng: &mut impl Rng) -> Instruction {
    Instruction {
        op: random_op(sub, subprograms, rng),
        in1: rng.random_range(0..pos + 2),
        in2: rng.random_range(0..pos + 2),
        const_idx: rng.random_range(0..NUM_CONSTANTS),
        dim_idx: rng.random_range(0..NUM_DIMS),
        branching: *BRANCHING_VALUES.choose(rng).expect("non-empty"),
    }
}

/// A program with the given subprogram lengths and uniformly random fields.
pub fn random_dna(lengths: &[usize], rng: &mut impl Rng) -> Dna {
    let n = lengths.len();
    let subprograms = lengths
        .iter()
        .enumerate()
        .map(|(s, &len)| Subprogram::new((0..len.max(1)).map(|p| random_instruction(s, p, n, rng)).collect()))
        .collect();
    let constants = std::array::from_fn(|_| StandardNormal.sample(rng));
    let dims = std::array::from_fn(|_| *DIM_VOCAB.choose(rng).expect("non-empty"));
    Dna::new(subprograms, constants, dims).expect("random programs are valid")
}

fn pick_sub(dna: &Dna, rng: &mut impl Rng, min_len: usize) -> Option<usize> {
    let eligible: Vec<usize> = (0..dna.subprograms.len()).filter(|&s| dna.subprograms[s].len() >= min_len).collect();
    eligible.choose(rng).copied()
}

fn sample_delete(dna: &Dna, rng: &mut impl Rng) -> Mutation {
    let sub = rng.random_range(0..dna.subprograms.len());
    let pos = rng.random_range(0..dna.subprograms[sub].len());
    Mutation::Delete { sub, pos }
}

fn sample_insert(dna: &Dna, rng: &mut impl Rng) -> Mutation {
    let sub = rng.random_range(0..dna.subprograms.len());
    let pos = rng.random_range(0..=dna.subprograms[sub].len());
    let ins = random_instruction(sub, pos, dna.subprograms.len(), rng);
    Mutation::Insert { sub, pos, instruction: (&ins).into() }
}

/// Draws one mutation: class uniform, then every choice uniform.
pub fn sample_mutation(dna: &Dna, rng: &mut impl Rng) -> Mutation {
    let class = *MutationClass::ALL.choose(rng).expect("non-empty");
    match class {
        MutationClass::Delete => sample_delete(dna, rng),
        MutationClass::Insert => sample_insert(dna, rng),
        MutationClass::DeleteInsert => {
            let delete = sample_delete(dna, rng);
            let after = apply_mutation(dna, &delete);
            Mutation::DeleteInsert { delete: Box::new(delete), insert: Box::new(sample_insert(&after, rng)) }
        }
        MutationClass::MutateField => {
            let sub = rng.random_range(0..dna.subprograms.len());
            let pos = rng.random_range(0..dna.subprograms[sub].len());
            let field = *[Field::Op, Field::In1, Field::In2, Field::Constant, Field::Dim, Field::Branching]
                .choose(rng)
                .expect("non-empty");
            let mut ins = dna.subprograms[sub].instructions[pos];
            match field {
                Field::Op => ins.op = random_op(sub, dna.subprograms.len(), rng),
                Field::In1 => ins.in1 = rng.random_range(0..pos + 2),
                Field::In2 => ins.in2 = rng.random_range(0..pos + 2),
                Field::Constant => ins.const_idx = rng.random_range(0..NUM_CONSTANTS),
                Field::Dim => ins.dim_idx = rng.random_range(0..NUM_DIMS),
                Field::Branching => ins.branching = *BRANCHING_VALUES.choose(rng).expect("non-empty"),
            }
            Mutation::MutateField { sub, pos, field, instruction: (&ins).into() }
        }
        MutationClass::Swap => match pick_sub(dna, rng, 2) {
            Some(sub) => {
                let len = dna.subprograms[sub].len();
                let a = rng.random_range(0..len);
                let mut b = rng.random_range(0..len - 1);
                if b >= a {
                    b += 1;
                }
                Mutation::Swap { sub, a: a.min(b), b: a.max(b) }
            }
            None => sample_insert(dna, rng),
        },
        MutationClass::MutateBank => {
            if rng.random_bool(0.5) {
                Mutation::MutateConstant {
                    slot: rng.random_range(0..NUM_CONSTANTS),
                    x: StandardNormal.sample(rng),
                    y: StandardNormal.sample(rng),
                }
            } else {
                Mutation::MutateDim { slot: rng.random_range(0..NUM_DIMS), value: *DIM_VOCAB.choose(rng).expect("non-empty") }
            }
        }
    }
}

/// Applies a mutation. Out-of-range references created by the edit are
/// folded back into range, so the result is always a valid program.
pub fn apply_mutation(parent: &Dna, m: &Mutation) -> Dna {
    let mut d = parent.clone();
    match m {
        Mutation::Delete { sub, pos } => {
            let ins = &mut d.subprograms[*sub].instructions;
            if ins.len() == 1 {
                ins[0] = Instruction::new(Op::Identity, 0, 0);
            } else {
                let removed = ins.remove(*pos);
                let gone = pos + 2;
                for later in ins.iter_mut().skip(*pos) {
                    for r in [&mut later.in1, &mut later.in2] {
                        if *r == gone {
                            *r = removed.in1;
                        } else if *r > gone {
                            *r -= 1;
                        }
                    }
                }
            }
        }
        Mutation::Insert { sub, pos, instruction } => {
            let new = instruction.to_instruction().expect("recorded instruction names parse");
            let ins = &mut d.subprograms[*sub].instructions;
            let at = (*pos).min(ins.len());
            for later in ins.iter_mut().skip(at) {
                for r in [&mut later.in1, &mut later.in2] {
                    if *r >= at + 2 {
                        *r += 1;
                    }
                }
            }
            ins.insert(at, new);
        }
        Mutation::DeleteInsert { delete, insert } => {
            d = apply_mutation(&apply_mutation(&d, delete), insert);
        }
        Mutation::MutateField { sub, pos, instruction, .. } => {
            d.subprograms[*sub].instructions[*pos] = instruction.to_instruction().expect("recorded instruction names parse");
        }
        Mutation::Swap { sub, a, b } => {
            let ins = &mut d.subprograms[*sub].instructions;
            ins.swap(*a, *b);
            for p in [*a, *b] {
                let i = &mut ins[p];
                i.in1 %= p + 2;
                i.in2 %= p + 2;
            }
        }
        Mutation::MutateConstant { slot, x, y } => {
            let c = d.constants[*slot] * 10f64.powf(*x) + y;
            d.constants[*slot] = if c.is_finite() { c.clamp(-CONSTANT_LIMIT, CONSTANT_LIMIT) } else { d.constants[*slot] };
        }
        Mutation::MutateDim { slot, value } => d.dims[*slot] = *value,
    }
    d.validate().expect("mutations preserve validity");
    d
}

fn graph_hash(dna: &Dna, cfg: &CompileConfig) -> Option<u64> {
    compiler::canonical_hash(dna, cfg).ok()
}

/// True when `child` lowers to the same canonical graph as `parent`.
pub fn is_noop(parent: &Dna, child: &Dna, cfg: &CompileConfig) -> bool {
    if parent.subprograms == child.subprograms && parent.constants == child.constants && parent.dims == child.dims {
        return true;
    }
    match (graph_hash(parent, cfg), graph_hash(child, cfg)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// Mutates until the canonical graph changes, at most
/// [`MAX_MUTATION_ATTEMPTS`] times.
pub fn mutate(parent: &Dna, rng: &mut impl Rng, hash_cfg: &CompileConfig) -> Result<(Dna, Mutation), EvolutionError> {
    for _ in 0..MAX_MUTATION_ATTEMPTS {
        let m = sample_mutation(parent, rng);
        let child = apply_mutation(parent, &m);
        if !is_noop(parent, &child, hash_cfg) {
            return Ok((child, m));
        }
    }
    Err(EvolutionError::MutationStall { attempts: MAX_MUTATION_ATTEMPTS })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    pub id: u64,
    pub dna: String,
    pub record: FitnessRecord,
}

/// Aging population: insertion order kept, oldest evicted first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub capacity: usize,
    pub members: VecDeque<Member>,
}

impl Population {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, members: VecDeque::with_capacity(capacity) }
    }

    pub fn insert(&mut self, m: Member) {
        if self.members.len() == self.capacity {
            self.members.pop_front();
        }
        self.members.push_back(m);
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Best of `k` members drawn uniformly with replacement.
    pub fn tournament(&self, k: usize, rng: &mut impl Rng) -> &Member {
        (0..k.max(1))
            .map(|_| &self.members[rng.random_range(0..self.members.len())])
            .min_by(|a, b| a.record.fitness().total_cmp(&b.record.fitness()).then(a.id.cmp(&b.id)))
            .expect("non-empty population")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Copies of the seed program.
    Conceptual,
    /// Random programs with the seed's subprogram lengths.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub population: usize,
    pub tournament: usize,
    pub candidates: u64,
    pub hurdles: usize,
    /// Fraction of the evaluation budget used while searching.
    pub proxy_fraction: f64,
    pub median_window: Option<usize>,
    pub workers: usize,
    pub top_n: usize,
    pub seed: u64,
    pub init: InitMode,
    /// Caps candidate cost at this multiple of the seed's, unless the
    /// evaluation config already sets a cap.
    pub cost_cap: Option<f64>,
    /// Scale step budgets by the seed's cost over the candidate's, capped by
    /// the evaluation config's `max_stretch`. With the default stretch of 1
    /// this only shortens runs of programs costlier than the seed.
    pub equal_compute: bool,
    /// Train every candidate from the same seed, so fitness differences
    /// come from the program rather than data order or initialization.
    pub shared_train_seed: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population: 100,
            tournament: 10,
            candidates: 300,
            hurdles: 4,
            proxy_fraction: 7.0 / 24.0,
            median_window: None,
            workers: 1,
            top_n: 10,
            seed: 0,
            init: InitMode::Conceptual,
            cost_cap: Some(16.0),
            equal_compute: true,
            shared_train_seed: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: &str| Err(EvolutionError::InvalidConfig(m.into()));
        if self.population == 0 || self.tournament == 0 || self.workers == 0 {
            return bad("population, tournament and workers must be positive");
        }
        if self.tournament > self.population {
            return bad("tournament larger than population");
        }
        if !(self.proxy_fraction > 0.0 && self.proxy_fraction <= 1.0) {
            return bad("proxy fraction must be in (0, 1]");
        }
        Ok(())
    }
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub id: u64,
    pub parent: Option<u64>,
    pub mutation: Option<Mutation>,
    pub hurdle: usize,
    pub fitness: f64,
    pub degenerate: bool,
    pub steps: u64,
    pub params: usize,
    pub hash: Option<u64>,
    pub dna: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl LogEntry {
    /// The entry without wall-clock fields.
    pub fn trajectory(&self) -> LogEntry {
        LogEntry { started_unix: 0.0, finished_unix: 0.0, seconds: 0.0, ..self.clone() }
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Stable per-candidate seed.
pub fn derive_seed(master: u64, id: u64, salt: u64) -> u64 {
    let mut z = master ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub next_id: u64,
    pub log_len: usize,
    pub population: Population,
    pub stats: HurdleStats,
    pub config: SearchConfig,
}

/// Where the log and checkpoint live.
#[derive(Debug, Clone)]
pub struct SearchFiles {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

impl SearchFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self { log: dir.join("search_log.jsonl"), checkpoint: dir.join("checkpoint.json") }
    }
}

#[derive(Debug, Clone)]
pub struct SearchResult {
    pub log: Vec<LogEntry>,
    pub top: Vec<LogEntry>,
    pub population: Population,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvolutionError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, EvolutionError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Best `n` distinct graphs, non-degenerate first, then by fitness and id.
pub fn top_n(log: &[LogEntry], n: usize) -> Vec<LogEntry> {
    let mut sorted: Vec<&LogEntry> = log.iter().collect();
    sorted.sort_by(|a, b| {
        a.degenerate.cmp(&b.degenerate).then(a.fitness.total_cmp(&b.fitness)).then(a.id.cmp(&b.id))
    });
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for e in sorted {
        let key = e.hash.map_or_else(|| e.dna.clone(), |h| h.to_string());
        if seen.insert(key, ()).is_none() {
            out.push(e.clone());
            if out.len() == n {
                break;
            }
        }
    }
    out
}

/// Per-token stack cost of `dna` sized as `eval` would size it.
pub fn seed_cost(dna: &Dna, eval: &EvalConfig, vocab: usize) -> Result<f64, EvolutionError> {
    let base = eval.compile_config();
    let unit = match eval.sizing {
        Sizing::Unit(u) => u,
        Sizing::Params { min, max } => {
            let shape = compiler::StackShape { layers: eval.layers, vocab, tied: eval.tied };
            compiler::resize_to_budget(dna, min, max, &base, &shape)
                .map_err(|e| EvolutionError::InvalidConfig(format!("seed does not size: {e}")))?
                .scale_unit
        }
    };
    let g = compiler::lower(dna, &base.with_unit(unit))
        .map_err(|e| EvolutionError::InvalidConfig(format!("seed does not compile: {e}")))?;
    Ok(crate::trainer::stack_cost(&g, eval.layers, vocab))
}

struct Candidate {
    id: u64,
    parent: Option<u64>,
    mutation: Option<Mutation>,
    dna: Dna,
}

/// Regularized evolution. With `files`, every candidate is appended to the
/// log and the checkpoint is replaced after each batch; `resume` continues
/// from an existing checkpoint, possibly with a larger candidate count.
pub fn run_search(
    seed_dna: &Dna,
    cfg: &SearchConfig,
    eval: &EvalConfig,
    corpus: &Corpus,
    files: Option<&SearchFiles>,
    resume: bool,
) -> Result<SearchResult, EvolutionError> {
    cfg.validate()?;
    let mut eval = *eval;
    eval.train.budget = eval.train.budget.scaled(cfg.proxy_fraction);
    eval.train.warmup = match eval.train.budget {
        Budget::Steps(n) => eval.train.warmup.min(n),
        Budget::Seconds(_) => eval.train.warmup,
    };
    let schedule = HurdleSchedule::for_budget(cfg.hurdles, eval.train.budget)?;
    let reference = seed_cost(seed_dna, &eval, corpus.vocab())?;
    if let (None, Some(factor)) = (eval.max_cost, cfg.cost_cap) {
        eval.max_cost = Some(factor * reference);
    }
    if cfg.equal_compute && eval.reference_cost.is_none() {
        eval.reference_cost = Some(reference);
    }
    let hash_cfg = CompileConfig { seq: eval.train.seq, ..eval.compile_config().with_unit(1) };

    let mut population = Population::new(cfg.population);
    let mut stats = HurdleStats::new(cfg.median_window);
    let mut log: Vec<LogEntry> = Vec::new();
    let mut next_id = 0u64;

    if resume {
        let files = files.ok_or_else(|| EvolutionError::Checkpoint("resume needs a run directory".into()))?;
        let text = fs::read_to_string(&files.checkpoint)
            .map_err(|e| EvolutionError::Checkpoint(format!("{}: {e}", files.checkpoint.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        // Only the candidate count may change, which extends or shortens a run.
        if (SearchConfig { candidates: cfg.candidates, ..ck.config }) != *cfg {
            return Err(EvolutionError::Checkpoint("search config differs from the checkpoint".into()));
        }
        log = read_log(&files.log)?;
        log.truncate(ck.log_len);
        let mut body = String::new();
        for e in &log {
            body.push_str(&serde_json::to_string(e)?);
            body.push('\n');
        }
        write_atomic(&files.log, body.as_bytes())?;
        population = ck.population;
        stats = ck.stats;
        next_id = ck.next_id;
    } else if let Some(f) = files {
        File::create(&f.log)?;
    }
    let mut log_file = match files {
        Some(f) => Some(OpenOptions::new().append(true).open(&f.log)?),
        None => None,
    };

    let total = cfg.population as u64 + cfg.candidates;
    let lengths: Vec<usize> = seed_dna.subprograms.iter().map(Subprogram::len).collect();
    while next_id < total {
        let batch_end = (next_id + cfg.workers as u64).min(total);
        let mut batch = Vec::new();
        for id in next_id..batch_end {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, id, 1));
            let cand = if id < cfg.population as u64 {
                let dna = match cfg.init {
                    InitMode::Conceptual => seed_dna.clone(),
                    InitMode::Random => random_dna(&lengths, &mut rng),
                };
                Candidate { id, parent: None, mutation: None, dna }
            } else {
                let mut parent = population.tournament(cfg.tournament, &mut rng).clone();
                let mut outcome = None;
                for _ in 0..MAX_MUTATION_ATTEMPTS {
                    let pdna = Dna::parse(&parent.dna).map_err(|e| EvolutionError::Checkpoint(e.to_string()))?;
                    match mutate(&pdna, &mut rng, &hash_cfg) {
                        Ok(x) => {
                            outcome = Some(x);
                            break;
                        }
                        Err(EvolutionError::MutationStall { .. }) => {
                            parent = population.tournament(cfg.tournament, &mut rng).clone();
                        }
                        Err(e) => return Err(e),
                    }
                }
                match outcome {
                    Some((mut dna, m)) => {
                        dna.meta.parent = Some(parent.id);
                        Candidate { id, parent: Some(parent.id), mutation: Some(m), dna }
                    }
                    None => {
                        // Every parent stalled; fall back to a fresh random program.
                        Candidate { id, parent: None, mutation: None, dna: random_dna(&lengths, &mut rng) }
                    }
                }
            };
            batch.push(cand);
        }

        let results: Vec<(Candidate, FitnessRecord, Vec<(usize, f64)>, f64, f64)> = {
            let stats_ref = &stats;
            let thresholds = &schedule.thresholds;
            let eval_ref = &eval;
            let evaluate = move |mut c: Candidate| {
                c.dna.meta.id = c.id;
                c.dna.meta.birth = c.id;
                c.dna.meta.lineage_seed = match c.parent {
                    Some(_) => c.dna.meta.lineage_seed,
                    None => derive_seed(cfg.seed, c.id, 3),
                };
                let mut e = *eval_ref;
                e.train.seed = derive_seed(cfg.seed, if cfg.shared_train_seed { 0 } else { c.id }, 2);
                let mut gate = SnapshotGate { thresholds, stats: stats_ref, seen: Vec::new() };
                let started = now();
                let out = evaluate_fitness(&c.dna, &e, corpus, &mut gate, c.id);
                (c, out.record, gate.seen, started, now())
            };
            if cfg.workers == 1 {
                batch.into_iter().map(evaluate).collect()
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = batch.into_iter().map(|c| s.spawn(move || evaluate(c))).collect();
                    handles.into_iter().map(|h| h.join().expect("evaluation panics are caught")).collect()
                })
            }
        };

        for (c, record, seen, started, finished) in results {
            for (i, f) in seen {
                stats.record(i, f);
            }
            let dna_text = c.dna.serialize();
            let entry = LogEntry {
                id: c.id,
                parent: c.parent,
                mutation: c.mutation,
                hurdle: record.hurdle,
                fitness: record.fitness(),
                degenerate: record.degenerate,
                steps: record.steps,
                params: record.params,
                hash: graph_hash(&c.dna, &hash_cfg),
                dna: dna_text.clone(),
                started_unix: started,
                finished_unix: finished,
                seconds: record.seconds,
                error: record.error.clone(),
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            log.push(entry);
            population.insert(Member { id: c.id, dna: dna_text, record });
        }
        next_id = batch_end;
        if let Some(f) = files {
            if let Some(lf) = log_file.as_mut() {
                lf.flush()?;
            }
            let ck = Checkpoint { next_id, log_len: log.len(), population: population.clone(), stats: stats.clone(), config: *cfg };
            write_atomic(&f.checkpoint, serde_json::to_string(&ck)?.as_bytes())?;
        }
    }
    let top = top_n(&log, cfg.top_n);
    Ok(SearchResult { log, top, population })
}
