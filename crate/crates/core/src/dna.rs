//! Evolvable block programs.
//!
//! A [`Dna`] is an indexed list of subprograms sharing two value banks. Each
//! subprogram has two input slots (hidden states 0 and 1); instruction `k`
//! writes hidden state `k + 2` and the last instruction is the output.
//! Subprogram 0 is the entry point and may only call higher indices.
//!
//! Two text forms exist. The canonical `.dna` form keeps the subprogram
//! structure and bank indices and round-trips exactly. The flattened listing
//! resolves every call to primitives and prints resolved `Dim` and `C` values;
//! [`parse_listing`] rebuilds a program from it.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::PrimitiveOp;

pub const NUM_CONSTANTS: usize = 2;
pub const NUM_DIMS: usize = 6;
pub const DIM_VOCAB: [u32; 10] = [1, 2, 4, 8, 12, 16, 24, 32, 48, 64];
pub const BRANCHING_VALUES: [u32; 5] = [1, 2, 4, 8, 16];
/// Bank constants are kept inside this magnitude.
pub const CONSTANT_LIMIT: f64 = 1e30;

const FORMAT_HEADER: &str = "dna v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DnaError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid program: {0}")]
    Invalid(String),
}

fn parse_err(line: usize, message: impl Into<String>) -> DnaError {
    DnaError::Parse { line, message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Prim(PrimitiveOp),
    /// Inline call to the subprogram with this index.
    Call(usize),
    /// Pass-through of the first input. Only produced when deleting the last
    /// instruction of a subprogram.
    Identity,
}

impl Op {
    pub fn name(&self) -> String {
        match self {
            Op::Prim(p) => p.name().to_string(),
            Op::Call(s) => format!("CALL_S{s}"),
            Op::Identity => "IDENTITY".to_string(),
        }
    }

    pub fn from_name(s: &str) -> Option<Op> {
        if s == "IDENTITY" {
            return Some(Op::Identity);
        }
        if let Some(n) = s.strip_prefix("CALL_S") {
            return n.parse().ok().map(Op::Call);
        }
        PrimitiveOp::from_name(s).map(Op::Prim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub op: Op,
    pub in1: usize,
    pub in2: usize,
    pub const_idx: usize,
    pub dim_idx: usize,
    pub branching: u32,
}

impl Instruction {
    pub fn new(op: Op, in1: usize, in2: usize) -> Self {
        Self { op, in1, in2, const_idx: 0, dim_idx: 0, branching: 1 }
    }

    pub fn prim(op: PrimitiveOp, in1: usize, in2: usize) -> Self {
        Self::new(Op::Prim(op), in1, in2)
    }

    pub fn call(sub: usize, in1: usize, in2: usize) -> Self {
        Self::new(Op::Call(sub), in1, in2)
    }

    pub fn dim(mut self, idx: usize) -> Self {
        self.dim_idx = idx;
        self
    }

    pub fn constant(mut self, idx: usize) -> Self {
        self.const_idx = idx;
        self
    }

    pub fn branch(mut self, b: u32) -> Self {
        self.branching = b;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Subprogram {
    pub instructions: Vec<Instruction>,
}

impl Subprogram {
    pub fn new(instructions: Vec<Instruction>) -> Self {
        Self { instructions }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub id: u64,
    pub parent: Option<u64>,
    pub birth: u64,
    /// Keys deterministic compile-time choices; inherited by children.
    pub lineage_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dna {
    pub subprograms: Vec<Subprogram>,
    pub constants: [f64; NUM_CONSTANTS],
    pub dims: [u32; NUM_DIMS],
    pub meta: Metadata,
}

impl Dna {
    pub fn new(
        subprograms: Vec<Subprogram>,
        constants: [f64; NUM_CONSTANTS],
        dims: [u32; NUM_DIMS],
    ) -> Result<Self, DnaError> {
        let dna = Self { subprograms, constants, dims, meta: Metadata::default() };
        dna.validate()?;
        Ok(dna)
    }

    pub fn instruction_count(&self) -> usize {
        self.subprograms.iter().map(Subprogram::len).sum()
    }

    pub fn validate(&self) -> Result<(), DnaError> {
        let invalid = |m: String| Err(DnaError::Invalid(m));
        if self.subprograms.is_empty() {
            return invalid("no subprograms".into());
        }
        for (i, c) in self.constants.iter().enumerate() {
            if !c.is_finite() {
                return invalid(format!("constant {i} is not finite"));
            }
        }
        for (i, d) in self.dims.iter().enumerate() {
            if !DIM_VOCAB.contains(d) {
                return invalid(format!("dims[{i}] = {d} is outside the vocabulary"));
            }
        }
        for (s, sub) in self.subprograms.iter().enumerate() {
            if sub.is_empty() {
                return invalid(format!("subprogram {s} is empty"));
            }
            for (k, ins) in sub.instructions.iter().enumerate() {
                let at = format!("subprogram {s} instruction {k}");
                if ins.in1 >= k + 2 || ins.in2 >= k + 2 {
                    return invalid(format!("{at} reads a state that is not yet written"));
                }
                if ins.const_idx >= NUM_CONSTANTS || ins.dim_idx >= NUM_DIMS {
                    return invalid(format!("{at} has a bank index out of range"));
                }
                if !BRANCHING_VALUES.contains(&ins.branching) {
                    return invalid(format!("{at} has branching {}", ins.branching));
                }
                if let Op::Call(t) = ins.op {
                    if t <= s || t >= self.subprograms.len() {
                        return invalid(format!("{at} calls subprogram {t}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical text form.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let m = &self.meta;
        let parent = m.parent.map_or_else(|| "-".to_string(), |p| p.to_string());
        let _ = writeln!(out, "{FORMAT_HEADER}");
        let _ = writeln!(
            out,
            "meta: id={} parent={} birth={} lineage={}",
            m.id, parent, m.birth, m.lineage_seed
        );
        let _ = writeln!(out, "constants: {:?} {:?}", self.constants[0], self.constants[1]);
        let dims: Vec<String> = self.dims.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "dims: {}", dims.join(" "));
        for (s, sub) in self.subprograms.iter().enumerate() {
            let _ = writeln!(out, "subprogram {s}");
            let _ = writeln!(out, "{:<5}INPUT", "(0)");
            let _ = writeln!(out, "{:<5}INPUT", "(1)");
            for (k, ins) in sub.instructions.iter().enumerate() {
                let line = format!(
                    "{:<5}{:<23}In0: {:<5}In1: {:<5}Dim: {:<7}C: {:<5}Branch: {}",
                    format!("({})", k + 2),
                    ins.op.name(),
                    ins.in1,
                    ins.in2,
                    format!("d{}", ins.dim_idx),
                    format!("c{}", ins.const_idx),
                    ins.branching
                );
                let _ = writeln!(out, "{}", line.trim_end());
            }
        }
        out
    }

    /// Parses the canonical text form.
    pub fn parse(text: &str) -> Result<Self, DnaError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        let (n, header) = lines.next().ok_or_else(|| parse_err(1, "empty program"))?;
        if header.split_whitespace().collect::<Vec<_>>() != ["dna", "v1"] {
            return Err(parse_err(n, format!("expected `{FORMAT_HEADER}` header")));
        }

        let mut meta = Metadata::default();
        let mut constants: Option<[f64; NUM_CONSTANTS]> = None;
        let mut dims: Option<[u32; NUM_DIMS]> = None;
        let mut subprograms: Vec<Subprogram> = Vec::new();
        let mut seen_inputs = 0usize;

        for (n, line) in lines {
            let toks = tokenize(line);
            let head = toks[0].as_str();
            match head {
                "meta:" => meta = parse_meta(n, &toks[1..])?,
                "constants:" => {
                    if toks.len() != 1 + NUM_CONSTANTS {
                        return Err(parse_err(n, "expected exactly 2 constants"));
                    }
                    let mut c = [0.0; NUM_CONSTANTS];
                    for (slot, t) in c.iter_mut().zip(&toks[1..]) {
                        *slot = parse_num::<f64>(n, t)?;
                        if !slot.is_finite() {
                            return Err(parse_err(n, "constants must be finite"));
                        }
                    }
                    constants = Some(c);
                }
                "dims:" => {
                    if toks.len() != 1 + NUM_DIMS {
                        return Err(parse_err(n, "expected exactly 6 dims"));
                    }
                    let mut d = [0; NUM_DIMS];
                    for (slot, t) in d.iter_mut().zip(&toks[1..]) {
                        *slot = parse_num::<u32>(n, t)?;
                        if !DIM_VOCAB.contains(slot) {
                            return Err(parse_err(n, format!("dim {slot} is outside the vocabulary")));
                        }
                    }
                    dims = Some(d);
                }
                "subprogram" => {
                    let idx: usize = parse_num(n, toks.get(1).map_or("", String::as_str))?;
                    if idx != subprograms.len() {
                        return Err(parse_err(n, format!("expected subprogram {}", subprograms.len())));
                    }
                    if let Some(last) = subprograms.last() {
                        if last.is_empty() {
                            return Err(parse_err(n, "subprogram has no instructions"));
                        }
                    }
                    subprograms.push(Subprogram::default());
                    seen_inputs = 0;
                }
                _ if head.starts_with('(') => {
                    let sub = subprograms
                        .last_mut()
                        .ok_or_else(|| parse_err(n, "instruction outside a subprogram"))?;
                    let idx = parse_index(n, head)?;
                    if toks.get(1).map(String::as_str) == Some("INPUT") {
                        if idx != seen_inputs || idx > 1 || !sub.is_empty() {
                            return Err(parse_err(n, "misplaced INPUT line"));
                        }
                        seen_inputs += 1;
                        continue;
                    }
                    if seen_inputs != 2 {
                        return Err(parse_err(n, "subprogram must declare inputs (0) and (1)"));
                    }
                    if idx != sub.len() + 2 {
                        return Err(parse_err(n, format!("expected index ({})", sub.len() + 2)));
                    }
                    sub.instructions.push(parse_instruction(n, idx, &toks[1..])?);
                }
                _ => return Err(parse_err(n, format!("unexpected `{head}`"))),
            }
        }
        let last_line = text.lines().count().max(1);
        if subprograms.is_empty() {
            return Err(parse_err(last_line, "no subprograms"));
        }
        if subprograms.last().is_some_and(Subprogram::is_empty) {
            return Err(parse_err(last_line, "subprogram has no instructions"));
        }
        let constants = constants.ok_or_else(|| parse_err(last_line, "missing constants line"))?;
        let dims = dims.ok_or_else(|| parse_err(last_line, "missing dims line"))?;
        let dna = Dna { subprograms, constants, dims, meta };
        dna.validate().map_err(|e| parse_err(last_line, e.to_string()))?;
        Ok(dna)
    }
}

impl fmt::Display for Dna {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Splits on whitespace, detaching `key:` prefixes fused to their values.
fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for tok in line.split_whitespace() {
        match tok.find(':') {
            Some(pos) if pos + 1 < tok.len() && !tok.contains('=') => {
                out.push(tok[..=pos].to_string());
                out.push(tok[pos + 1..].to_string());
            }
            _ => out.push(tok.to_string()),
        }
    }
    out
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, DnaError> {
    s.parse().map_err(|_| parse_err(line, format!("invalid number `{s}`")))
}

fn parse_index(line: usize, tok: &str) -> Result<usize, DnaError> {
    let inner = tok
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| parse_err(line, format!("bad index `{tok}`")))?;
    parse_num(line, inner)
}

fn parse_meta(line: usize, toks: &[String]) -> Result<Metadata, DnaError> {
    let mut meta = Metadata::default();
    for t in toks {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("bad meta field `{t}`")))?;
        match k {
            "id" => meta.id = parse_num(line, v)?,
            "parent" => meta.parent = if v == "-" { None } else { Some(parse_num(line, v)?) },
            "birth" => meta.birth = parse_num(line, v)?,
            "lineage" => meta.lineage_seed = parse_num(line, v)?,
            _ => return Err(parse_err(line, format!("unknown meta field `{k}`"))),
        }
    }
    Ok(meta)
}

/// Reads `key: value` pairs after the opcode.
fn fields(line: usize, toks: &[String]) -> Result<HashMap<&str, &str>, DnaError> {
    if !toks.len().is_multiple_of(2) {
        return Err(parse_err(line, "fields must be `Key: value` pairs"));
    }
    let mut map = HashMap::new();
    for pair in toks.chunks_exact(2) {
        let key = pair[0]
            .strip_suffix(':')
            .ok_or_else(|| parse_err(line, format!("expected a field name, got `{}`", pair[0])))?;
        if map.insert(key, pair[1].as_str()).is_some() {
            return Err(parse_err(line, format!("duplicate field `{key}`")));
        }
    }
    Ok(map)
}

fn required<'a>(line: usize, map: &HashMap<&str, &'a str>, key: &str) -> Result<&'a str, DnaError> {
    map.get(key).copied().ok_or_else(|| parse_err(line, format!("missing field `{key}`")))
}

fn parse_instruction(line: usize, idx: usize, toks: &[String]) -> Result<Instruction, DnaError> {
    let name = toks.first().ok_or_else(|| parse_err(line, "missing opcode"))?;
    let op = Op::from_name(name).ok_or_else(|| parse_err(line, format!("unknown opcode `{name}`")))?;
    let f = fields(line, &toks[1..])?;
    let in1 = parse_num(line, required(line, &f, "In0")?)?;
    let in2 = parse_num(line, required(line, &f, "In1")?)?;
    let dim = required(line, &f, "Dim")?;
    let c = required(line, &f, "C")?;
    let dim_idx = parse_num(
        line,
        dim.strip_prefix('d').ok_or_else(|| parse_err(line, "Dim must be a bank index like d0"))?,
    )?;
    let const_idx = parse_num(
        line,
        c.strip_prefix('c').ok_or_else(|| parse_err(line, "C must be a bank index like c0"))?,
    )?;
    let branching = match f.get("Branch") {
        Some(b) => parse_num(line, b)?,
        None => 1,
    };
    if in1 >= idx || in2 >= idx {
        return Err(parse_err(line, "input refers to a later state"));
    }
    if f.len() > 5 || (f.len() == 5 && !f.contains_key("Branch")) {
        return Err(parse_err(line, "unknown field"));
    }
    Ok(Instruction { op, in1, in2, const_idx, dim_idx, branching })
}

/// One row of a flattened listing.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatLine {
    pub kind: FlatKind,
    pub in0: usize,
    pub in1: usize,
    pub dim: u64,
    pub constant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlatKind {
    Input,
    Prim(PrimitiveOp),
    /// `BRANCH_b_INPUT_1` (`second == false`) or `BRANCH_b_INPUT_2`.
    BranchInput { branching: u32, second: bool },
    BranchMerge,
}

impl FlatKind {
    pub fn name(&self) -> String {
        match self {
            FlatKind::Input => "INPUT".into(),
            FlatKind::Prim(p) => p.name().into(),
            FlatKind::BranchInput { branching, second } => {
                format!("BRANCH_{branching}_INPUT_{}", if *second { 2 } else { 1 })
            }
            FlatKind::BranchMerge => "BRANCH_MERGE".into(),
        }
    }

    fn from_name(s: &str) -> Option<FlatKind> {
        match s {
            "INPUT" => return Some(FlatKind::Input),
            "BRANCH_MERGE" => return Some(FlatKind::BranchMerge),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("BRANCH_") {
            let (b, which) = rest.split_once("_INPUT_")?;
            let branching = b.parse().ok()?;
            let second = match which {
                "1" => false,
                "2" => true,
                _ => return None,
            };
            return Some(FlatKind::BranchInput { branching, second });
        }
        PrimitiveOp::from_name(s).map(FlatKind::Prim)
    }
}

/// Renders a flattened listing in the fixed-width figure layout.
pub fn render_listing(lines: &[FlatLine]) -> String {
    let mut out = String::new();
    for (k, l) in lines.iter().enumerate() {
        let idx = format!("({k})");
        if l.kind == FlatKind::Input {
            let _ = writeln!(out, "{idx:<5}INPUT");
            continue;
        }
        let _ = writeln!(
            out,
            "{:<5}{:<23}In0: {:<5}In1: {:<5}Dim: {:<7}C: {:<5}",
            idx,
            l.kind.name(),
            l.in0,
            l.in1,
            l.dim,
            format!("{:.2}", l.constant)
        );
    }
    out
}

/// A program rebuilt from a flattened listing, with the scale unit that
/// reproduces its absolute dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedListing {
    pub dna: Dna,
    pub unit: u64,
}

#[derive(Debug, Clone)]
enum RawOp {
    Prim(PrimitiveOp),
    Region(usize),
}

#[derive(Debug, Clone)]
struct RawInstr {
    op: RawOp,
    in1: usize,
    in2: usize,
    dim: u64,
    constant: f64,
    branching: u32,
}

struct Frame {
    region: usize,
    local: HashMap<usize, usize>,
    last_line: Option<usize>,
    call: Option<RawInstr>,
}

/// Parses a flattened listing back into a program.
///
/// Every branch region becomes its own subprogram, numbered in order of
/// opening, except regions whose body is one primitive wired straight to the
/// two region inputs, which collapse into a branched primitive. Banks are
/// rebuilt by first appearance; the unit is the largest divisor of the
/// dimensions' gcd that maps every dimension into the vocabulary.
pub fn parse_listing(text: &str) -> Result<ParsedListing, DnaError> {
    let mut rows: Vec<(usize, FlatLine)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim();
        if !line.starts_with('(') {
            continue;
        }
        let toks = tokenize(line);
        let idx = parse_index(n, &toks[0])?;
        if idx != rows.len() {
            return Err(parse_err(n, format!("expected index ({})", rows.len())));
        }
        let name = toks.get(1).ok_or_else(|| parse_err(n, "missing opcode"))?;
        let kind =
            FlatKind::from_name(name).ok_or_else(|| parse_err(n, format!("unknown opcode `{name}`")))?;
        if (idx < 2) != (kind == FlatKind::Input) {
            return Err(parse_err(n, "lines (0) and (1) and only those must be INPUT"));
        }
        if kind == FlatKind::Input {
            rows.push((n, FlatLine { kind, in0: 0, in1: 0, dim: 0, constant: 0.0 }));
            continue;
        }
        let f = fields(n, &toks[2..])?;
        let in0: usize = parse_num(n, required(n, &f, "In0")?)?;
        let in1: usize = parse_num(n, required(n, &f, "In1")?)?;
        let dim: u64 = parse_num(n, required(n, &f, "Dim")?)?;
        let constant: f64 = parse_num(n, required(n, &f, "C")?)?;
        if in0 >= idx || in1 >= idx {
            return Err(parse_err(n, "input refers to a later line"));
        }
        if !constant.is_finite() {
            return Err(parse_err(n, "constant must be finite"));
        }
        rows.push((n, FlatLine { kind, in0, in1, dim, constant }));
    }
    if rows.len() < 3 {
        return Err(parse_err(text.lines().count().max(1), "listing has no instructions"));
    }

    // Region 0 is the main program.
    let mut regions: Vec<Vec<RawInstr>> = vec![Vec::new()];
    let mut stack: Vec<Frame> = vec![Frame {
        region: 0,
        local: HashMap::from([(0, 0), (1, 1)]),
        last_line: None,
        call: None,
    }];
    let mut bank_order: Vec<(usize, u64, f64)> = Vec::new();

    let mut i = 2;
    while i < rows.len() {
        let (n, ref l) = rows[i];
        let frame = stack.last_mut().expect("main frame");
        let resolve = |frame: &Frame, g: usize| {
            frame
                .local
                .get(&g)
                .copied()
                .ok_or_else(|| parse_err(n, format!("line ({g}) is not visible here")))
        };
        match l.kind {
            FlatKind::Input => unreachable!(),
            FlatKind::Prim(p) => {
                let ins = RawInstr {
                    op: RawOp::Prim(p),
                    in1: resolve(frame, l.in0)?,
                    in2: resolve(frame, l.in1)?,
                    dim: l.dim,
                    constant: l.constant,
                    branching: 1,
                };
                let body = &mut regions[frame.region];
                body.push(ins);
                frame.local.insert(i, body.len() + 1);
                frame.last_line = Some(i);
                bank_order.push((n, l.dim, l.constant));
            }
            FlatKind::BranchInput { branching, second: false } => {
                let next = rows.get(i + 1).map(|r| &r.1);
                let paired = matches!(next, Some(FlatLine {
                    kind: FlatKind::BranchInput { branching: b2, second: true }, in0, in1, ..
                }) if *b2 == branching && *in0 == l.in0 && *in1 == l.in1);
                if !paired {
                    return Err(parse_err(n, "branch input lines must come in matching pairs"));
                }
                if !BRANCHING_VALUES.contains(&branching) || branching == 1 {
                    return Err(parse_err(n, format!("invalid branching {branching}")));
                }
                let call = RawInstr {
                    op: RawOp::Region(regions.len()),
                    in1: resolve(frame, l.in0)?,
                    in2: resolve(frame, l.in1)?,
                    dim: l.dim,
                    constant: l.constant,
                    branching,
                };
                bank_order.push((n, l.dim, l.constant));
                regions.push(Vec::new());
                stack.push(Frame {
                    region: regions.len() - 1,
                    local: HashMap::from([(i, 0), (i + 1, 1)]),
                    last_line: None,
                    call: Some(call),
                });
                i += 2;
                continue;
            }
            FlatKind::BranchInput { second: true, .. } => {
                return Err(parse_err(n, "unpaired BRANCH_INPUT_2"));
            }
            FlatKind::BranchMerge => {
                if stack.len() == 1 {
                    return Err(parse_err(n, "BRANCH_MERGE outside a branch"));
                }
                let done = stack.pop().expect("region frame");
                let out = done.last_line.ok_or_else(|| parse_err(n, "empty branch region"))?;
                if l.in0 != out || l.in1 != out {
                    return Err(parse_err(n, "BRANCH_MERGE must read the region's last line"));
                }
                let parent = stack.last_mut().expect("parent frame");
                let body = &mut regions[parent.region];
                body.push(done.call.expect("region call"));
                parent.local.insert(i, body.len() + 1);
                parent.last_line = Some(i);
            }
        }
        i += 1;
    }
    if stack.len() != 1 {
        return Err(parse_err(rows.last().map_or(1, |r| r.0), "unterminated branch region"));
    }

    // Collapse single-primitive regions, then number the survivors.
    let collapsible: Vec<bool> = regions
        .iter()
        .enumerate()
        .map(|(r, body)| {
            r > 0
                && body.len() == 1
                && matches!(body[0].op, RawOp::Prim(_))
                && body[0].in1 == 0
                && body[0].in2 == 1
        })
        .collect();
    let mut number = vec![usize::MAX; regions.len()];
    let mut next = 0;
    for r in 0..regions.len() {
        if !collapsible[r] {
            number[r] = next;
            next += 1;
        }
    }

    let (constants, dims, unit) = rebuild_banks(&bank_order)?;
    let const_idx = |c: f64| constants.iter().position(|&v| v == c).expect("banked constant");
    let dim_idx = |d: u64| {
        let rel = (d / unit) as u32;
        dims.iter().position(|&v| v == rel).expect("banked dim")
    };

    let mut subprograms = vec![Subprogram::default(); next];
    for (r, body) in regions.iter().enumerate() {
        if collapsible[r] {
            continue;
        }
        let out = &mut subprograms[number[r]].instructions;
        for ins in body {
            let (op, dim, c) = match ins.op {
                RawOp::Prim(p) => (Op::Prim(p), ins.dim, ins.constant),
                RawOp::Region(t) if collapsible[t] => {
                    let inner = &regions[t][0];
                    let RawOp::Prim(p) = inner.op else { unreachable!() };
                    (Op::Prim(p), inner.dim, inner.constant)
                }
                RawOp::Region(t) => (Op::Call(number[t]), ins.dim, ins.constant),
            };
            out.push(Instruction {
                op,
                in1: ins.in1,
                in2: ins.in2,
                const_idx: const_idx(c),
                dim_idx: dim_idx(dim),
                branching: ins.branching,
            });
        }
    }
    let dna = Dna::new(subprograms, constants, dims)?;
    Ok(ParsedListing { dna, unit })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

type Banks = ([f64; NUM_CONSTANTS], [u32; NUM_DIMS], u64);

fn rebuild_banks(order: &[(usize, u64, f64)]) -> Result<Banks, DnaError> {
    let mut consts: Vec<f64> = Vec::new();
    for &(n, _, c) in order {
        if !consts.contains(&c) {
            if consts.len() == NUM_CONSTANTS {
                return Err(parse_err(n, "more than 2 distinct constants"));
            }
            consts.push(c);
        }
    }
    while consts.len() < NUM_CONSTANTS {
        consts.push(0.0);
    }

    let g = order.iter().fold(0, |g, &(_, d, _)| gcd(g, d));
    let line = order.first().map_or(1, |o| o.0);
    if g == 0 {
        return Err(parse_err(line, "all dimensions are zero"));
    }
    let unit = (1..=g)
        .rev()
        .filter(|u| g % u == 0)
        .find(|&u| order.iter().all(|&(_, d, _)| DIM_VOCAB.contains(&((d / u) as u32))))
        .ok_or_else(|| parse_err(line, "dimensions do not fit the relative vocabulary"))?;
    let mut dims: Vec<u32> = Vec::new();
    for &(n, d, _) in order {
        let rel = (d / unit) as u32;
        if !dims.contains(&rel) {
            if dims.len() == NUM_DIMS {
                return Err(parse_err(n, "more than 6 distinct dimensions"));
            }
            dims.push(rel);
        }
    }
    for v in DIM_VOCAB {
        if dims.len() == NUM_DIMS {
            break;
        }
        if !dims.contains(&v) {
            dims.push(v);
        }
    }
    let constants = [consts[0], consts[1]];
    let dims = [dims[0], dims[1], dims[2], dims[3], dims[4], dims[5]];
    Ok((constants, dims, unit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use PrimitiveOp::*;

    fn tiny() -> Dna {
        Dna::new(
            vec![
                Subprogram::new(vec![
                    Instruction::call(1, 0, 0).branch(2),
                    Instruction::prim(Add, 0, 2),
                ]),
                Subprogram::new(vec![Instruction::prim(Conv1x1, 0, 1).dim(1).constant(1)]),
            ],
            [0.5, -1.25],
            [8, 1, 2, 4, 12, 16],
        )
        .unwrap()
    }

    #[test]
    fn serialize_round_trip() {
        let mut dna = tiny();
        dna.meta = Metadata { id: 7, parent: Some(3), birth: 9, lineage_seed: 11 };
        let text = dna.serialize();
        assert_eq!(Dna::parse(&text).unwrap(), dna);
        assert_eq!(Dna::parse(&text).unwrap().serialize(), text);
    }

    #[test]
    fn parse_is_whitespace_tolerant() {
        let text = tiny().serialize();
        let squashed: String = text
            .lines()
            .map(|l| l.split_whitespace().collect::<Vec<_>>().join("  ") + "\n")
            .collect();
        assert_eq!(Dna::parse(&squashed).unwrap(), tiny());
        let fused = text.replace("In0: ", "In0:");
        assert_eq!(Dna::parse(&fused).unwrap(), tiny());
    }

    #[test]
    fn ignored_fields_are_preserved() {
        let mut a = tiny();
        let b = tiny();
        a.subprograms[0].instructions[1].const_idx = 1;
        assert_ne!(a.serialize(), b.serialize());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = tiny().serialize().replace("ADD", "FROB");
        match Dna::parse(&text) {
            Err(DnaError::Parse { line, message }) => {
                assert_eq!(line, 9);
                assert!(message.contains("FROB"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_subprogram_is_rejected() {
        let text = "dna v1\nconstants: 0.0 0.0\ndims: 1 2 4 8 12 16\nsubprogram 0\n(0) INPUT\n(1) INPUT\n";
        assert!(matches!(Dna::parse(text), Err(DnaError::Parse { .. })));
    }

    #[test]
    fn validation_rules() {
        let mut d = tiny();
        d.subprograms[1].instructions[0].op = Op::Call(0);
        assert!(d.validate().is_err());
        let mut d = tiny();
        d.subprograms[0].instructions[0].in1 = 2;
        assert!(d.validate().is_err());
        let mut d = tiny();
        d.dims[0] = 3;
        assert!(d.validate().is_err());
        let mut d = tiny();
        d.subprograms[0].instructions[0].branching = 3;
        assert!(d.validate().is_err());
    }

    #[test]
    fn listing_round_trip_through_regions() {
        let lines = vec![
            FlatLine { kind: FlatKind::Input, in0: 0, in1: 0, dim: 0, constant: 0.0 },
            FlatLine { kind: FlatKind::Input, in0: 0, in1: 0, dim: 0, constant: 0.0 },
            FlatLine {
                kind: FlatKind::BranchInput { branching: 2, second: false },
                in0: 0,
                in1: 1,
                dim: 16,
                constant: 0.5,
            },
            FlatLine {
                kind: FlatKind::BranchInput { branching: 2, second: true },
                in0: 0,
                in1: 1,
                dim: 16,
                constant: 0.5,
            },
            FlatLine { kind: FlatKind::Prim(Conv1x1), in0: 2, in1: 3, dim: 2, constant: 0.5 },
            FlatLine { kind: FlatKind::BranchMerge, in0: 4, in1: 4, dim: 4, constant: 0.5 },
            FlatLine { kind: FlatKind::Prim(Add), in0: 0, in1: 5, dim: 16, constant: -1.0 },
        ];
        let text = render_listing(&lines);
        let parsed = parse_listing(&text).unwrap();
        assert_eq!(parsed.unit, 2);
        assert_eq!(parsed.dna.subprograms.len(), 1);
        let main = &parsed.dna.subprograms[0].instructions;
        assert_eq!(main[0].op, Op::Prim(Conv1x1));
        assert_eq!(main[0].branching, 2);
        assert_eq!(parsed.dna.dims[main[0].dim_idx], 1);
        assert_eq!(parsed.dna.constants, [0.5, -1.0]);
        assert_eq!(main[1], Instruction::prim(Add, 0, 2).dim(main[1].dim_idx).constant(1));
    }

    #[test]
    fn listing_bank_overflow() {
        let mut text = String::from("(0)  INPUT\n(1)  INPUT\n");
        for (k, c) in [0.1, 0.2, 0.3].iter().enumerate() {
            text.push_str(&format!("({}) ADD In0: 0 In1: 1 Dim: 4 C: {c}\n", k + 2));
        }
        assert!(matches!(parse_listing(&text), Err(DnaError::Parse { line: 5, .. })));
        let mut text = String::from("(0)  INPUT\n(1)  INPUT\n");
        for (k, d) in [1, 2, 4, 8, 12, 16, 24].iter().enumerate() {
            text.push_str(&format!("({}) ADD In0: 0 In1: 1 Dim: {d} C: 0\n", k + 2));
        }
        assert!(matches!(parse_listing(&text), Err(DnaError::Parse { line: 9, .. })));
    }
}
