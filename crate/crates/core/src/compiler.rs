//! Lowering of programs into executable block graphs.
//!
//! [`lower`] inlines subprogram calls, expands branching, resolves relative
//! dimensions against a scale unit, inserts channel adapters where binary
//! operands disagree, drops everything outside the output cone and fixes a
//! canonical node order. The result is a parameter-free [`Graph`];
//! [`Graph::instantiate`] draws parameters for it.
//!
//! Canonical order is a post-order walk from the output visiting operands in
//! argument order. Node numbering, parameter numbering, initialisation order
//! and [`Graph::canonical_hash`] all derive from it, so reordering independent
//! instructions or adding dead ones changes none of them.

use std::collections::hash_map::DefaultHasher;
use std::fmt::{self, Write as _};
use std::hash::{Hash, Hasher};
use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dna::{Dna, DnaError, FlatKind, FlatLine, Instruction, Op};
use crate::tensor::{
    self, AttentionMap, ConvWeights, Guards, OpFamily, Padding, PrimitiveOp, Shape, Tensor,
    TensorError,
};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompileConfig {
    pub scale_unit: u64,
    /// Block width in units of `scale_unit`.
    pub d_model_rel: u64,
    pub seq: usize,
    pub max_width: usize,
    pub max_nodes: usize,
    pub padding: Padding,
    pub guards: Guards,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            scale_unit: 64,
            d_model_rel: 8,
            seq: 64,
            max_width: 8192,
            max_nodes: 20_000,
            padding: Padding::Causal,
            guards: Guards::On,
        }
    }
}

impl CompileConfig {
    pub fn d_model(&self) -> usize {
        (self.scale_unit * self.d_model_rel) as usize
    }

    pub fn with_unit(self, scale_unit: u64) -> Self {
        Self { scale_unit, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompileError {
    #[error("invalid program: {0}")]
    InvalidDna(#[from] DnaError),
    #[error("shape conflict at {site}: {detail}")]
    Shape { site: String, detail: String },
    #[error("channel width {width} at {site} exceeds the cap")]
    WidthCap { site: String, width: usize },
    #[error("graph exceeds {limit} nodes")]
    NodeCap { limit: usize },
    #[error("block maps width {input} to {output}; a stack needs equal widths")]
    NotChannelPreserving { input: usize, output: usize },
    #[error("scale unit must be positive")]
    ZeroUnit,
}

/// One frame of the call path that produced a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Site {
    pub sub: usize,
    pub instr: usize,
    pub copy: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Provenance(pub Vec<Site>);

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("block");
        }
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" > ")?;
            }
            write!(f, "S{}[{}]", s.sub, s.instr + 2)?;
            if s.copy > 0 {
                write!(f, "#{}", s.copy)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Lhs,
    Rhs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated at two standard deviations.
    TruncatedNormal { std: f64 },
    Ones,
    Zeros,
    /// Last tap one, others zero, plus small Gaussian noise.
    DepthwiseIdentity { width: usize, channels: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamSpec {
    pub len: usize,
    pub init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input,
    Unary { op: PrimitiveOp, constant: f64 },
    Binary(PrimitiveOp),
    Reduce(PrimitiveOp),
    Cumulative(PrimitiveOp),
    /// Causal `MAT_MUL` / `T_MAT_MUL`.
    MatMul(PrimitiveOp),
    Mask,
    Learned { op: PrimitiveOp, param: ParamId },
    Conv { op: PrimitiveOp, weight: ParamId, bias: ParamId },
    Depthwise { op: PrimitiveOp, kernel: ParamId },
    /// Truncate or cyclically tile channels to the node width.
    Adapt,
    Concat,
}

impl NodeKind {
    pub fn label(&self) -> String {
        match self {
            NodeKind::Input => "INPUT".into(),
            NodeKind::Unary { op, constant } if op.uses_constant() => format!("{op}({constant})"),
            NodeKind::Unary { op, .. }
            | NodeKind::Binary(op)
            | NodeKind::Reduce(op)
            | NodeKind::Cumulative(op)
            | NodeKind::MatMul(op)
            | NodeKind::Learned { op, .. }
            | NodeKind::Conv { op, .. }
            | NodeKind::Depthwise { op, .. } => op.name().into(),
            NodeKind::Mask => "EMBEDDING_MASK".into(),
            NodeKind::Adapt => "ADAPT".into(),
            NodeKind::Concat => "BRANCH_MERGE".into(),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match *self {
            NodeKind::Learned { param, .. } => vec![param],
            NodeKind::Conv { weight, bias, .. } => vec![weight, bias],
            NodeKind::Depthwise { kernel, .. } => vec![kernel],
            _ => Vec::new(),
        }
    }

    fn map_params(&mut self, f: impl Fn(ParamId) -> ParamId) {
        match self {
            NodeKind::Learned { param, .. } => *param = f(*param),
            NodeKind::Conv { weight, bias, .. } => {
                *weight = f(*weight);
                *bias = f(*bias);
            }
            NodeKind::Depthwise { kernel, .. } => *kernel = f(*kernel),
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
    pub width: usize,
    pub provenance: Provenance,
}

/// A lowered block: canonical node list plus parameter shapes.
#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub output: NodeId,
    pub params: Vec<ParamSpec>,
    pub d_model: usize,
    pub seq: usize,
    pub scale_unit: u64,
    pub padding: Padding,
    pub guards: Guards,
    hash: u64,
}

impl Graph {
    pub fn canonical_hash(&self) -> u64 {
        self.hash
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len).sum()
    }

    pub fn output_width(&self) -> usize {
        self.nodes[self.output].width
    }

    /// Rough multiply-adds per token of one forward pass.
    pub fn cost_per_token(&self) -> f64 {
        let elementwise: usize = self.nodes.iter().map(|n| n.width).sum();
        let mixing: usize = self.nodes.iter().filter(|n| matches!(n.kind, NodeKind::MatMul(_))).map(|n| n.width).sum();
        (elementwise + self.param_count() + mixing * self.seq) as f64
    }

    /// Draws parameters. Each tensor has its own stream keyed by the content
    /// of its node's ancestor cone, so two graphs that share a subgraph start
    /// with the same weights there.
    pub fn instantiate(self: &Arc<Self>, seed: u64) -> CompiledGraph {
        let params = self
            .param_keys()
            .into_iter()
            .zip(&self.params)
            .map(|(key, spec)| init_param(spec, &mut ChaCha8Rng::seed_from_u64(mix(seed, key))))
            .collect();
        CompiledGraph { graph: Arc::clone(self), params }
    }

    /// Stable per-parameter key: hash of the owning node's cone, how many
    /// earlier nodes share that cone (branch copies), and the slot.
    pub fn param_keys(&self) -> Vec<u64> {
        let mut cone = vec![[0u8; 32]; self.nodes.len()];
        let mut seen: std::collections::HashMap<[u8; 32], u64> = std::collections::HashMap::new();
        let mut keys = vec![0u64; self.params.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            let mut h = Sha256::new();
            h.update(n.kind.label().as_bytes());
            if let NodeKind::Unary { constant, .. } = n.kind {
                h.update(constant.to_bits().to_le_bytes());
            }
            h.update((n.width as u64).to_le_bytes());
            for &x in &n.inputs {
                h.update(cone[x]);
            }
            for p in n.kind.params() {
                h.update((self.params[p].len as u64).to_le_bytes());
            }
            cone[i] = h.finalize().into();
            let occurrence = seen.entry(cone[i]).or_insert(0);
            let base = u64::from_le_bytes(cone[i][..8].try_into().expect("8 bytes"));
            for (slot, p) in n.kind.params().into_iter().enumerate() {
                keys[p] = mix(mix(base, *occurrence), slot as u64);
            }
            *occurrence += 1;
        }
        keys
    }

    pub fn nodes_with_op(&self, op: PrimitiveOp) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| node_op(&n.kind) == Some(op))
            .map(|(i, _)| i)
            .collect()
    }

    /// One line per node: id, label, width, operands, provenance.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let ins: Vec<String> = n.inputs.iter().map(|x| format!("%{x}")).collect();
            let _ = writeln!(
                out,
                "%{i:<5} {:<24} w={:<6} ({}) @ {}",
                n.kind.label(),
                n.width,
                ins.join(", "),
                n.provenance
            );
        }
        let _ = writeln!(out, "output %{}", self.output);
        out
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph block {\n  rankdir=TB;\n");
        for (i, n) in self.nodes.iter().enumerate() {
            let _ = writeln!(out, "  n{i} [label=\"{}\\nw={}\"];", n.kind.label(), n.width);
            for &src in &n.inputs {
                let _ = writeln!(out, "  n{src} -> n{i};");
            }
        }
        out.push_str("}\n");
        out
    }
}

fn node_op(kind: &NodeKind) -> Option<PrimitiveOp> {
    match *kind {
        NodeKind::Unary { op, .. }
        | NodeKind::Binary(op)
        | NodeKind::Reduce(op)
        | NodeKind::Cumulative(op)
        | NodeKind::MatMul(op)
        | NodeKind::Learned { op, .. }
        | NodeKind::Conv { op, .. }
        | NodeKind::Depthwise { op, .. } => Some(op),
        NodeKind::Mask => Some(PrimitiveOp::Mask),
        _ => None,
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_param(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec.init {
        Init::TruncatedNormal { std } => (0..spec.len).map(|_| truncated_normal(rng, std)).collect(),
        Init::Ones => vec![1.0; spec.len],
        Init::Zeros => vec![0.0; spec.len],
        Init::DepthwiseIdentity { width, channels } => {
            let mut v = vec![0.0; spec.len];
            for (i, x) in v.iter_mut().enumerate() {
                let tap = i / channels;
                let noise: f64 = rng.sample(StandardNormal);
                *x = if tap == width - 1 { 1.0 } else { 0.0 } + 0.01 * noise;
            }
            v
        }
    }
}

/// A graph with parameter values.
#[derive(Debug, Clone)]
pub struct CompiledGraph {
    pub graph: Arc<Graph>,
    pub params: Vec<Vec<f64>>,
}

impl CompiledGraph {
    pub fn param_refs(&self) -> Vec<&[f64]> {
        self.params.iter().map(Vec::as_slice).collect()
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        let tape = execute(&self.graph, &self.param_refs(), input)?;
        Ok(tape.output(&self.graph).clone())
    }

    pub fn forward_tape(&self, input: &Tensor) -> Result<Tape, TensorError> {
        execute(&self.graph, &self.param_refs(), input)
    }
}

/// Activations of every node from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub values: Vec<Tensor>,
}

impl Tape {
    pub fn output<'a>(&'a self, graph: &Graph) -> &'a Tensor {
        &self.values[graph.output]
    }
}

/// Runs the graph, keeping every activation.
pub fn execute(graph: &Graph, params: &[&[f64]], input: &Tensor) -> Result<Tape, TensorError> {
    let s = input.shape();
    if s.channel != graph.nodes[0].width || s.seq != graph.seq {
        return Err(TensorError::ShapeMismatch {
            op: "block input",
            detail: format!("{s} for width {} and seq {}", graph.nodes[0].width, graph.seq),
        });
    }
    if params.len() != graph.params.len() {
        return Err(TensorError::ContractViolation(format!(
            "{} parameter tensors for {} specs",
            params.len(),
            graph.params.len()
        )));
    }
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let v = eval_node(graph, node, params, &values, input)?;
        values.push(v);
    }
    Ok(Tape { values })
}

fn eval_node(
    graph: &Graph,
    node: &Node,
    params: &[&[f64]],
    values: &[Tensor],
    input: &Tensor,
) -> Result<Tensor, TensorError> {
    let arg = |i: usize| &values[node.inputs[i]];
    match node.kind {
        NodeKind::Input => Ok(input.clone()),
        NodeKind::Unary { op, constant } => tensor::apply_unary(op, arg(0), constant, graph.guards),
        NodeKind::Binary(op) => tensor::apply_binary(op, arg(0), arg(1), graph.guards),
        NodeKind::Reduce(op) => tensor::apply_reduction(op, arg(0)),
        NodeKind::Cumulative(op) => tensor::apply_cumulative(op, arg(0)),
        NodeKind::MatMul(op) => tensor::matmul_pair_causal(op, arg(0), arg(1)),
        NodeKind::Mask => {
            let map = AttentionMap::try_from(arg(0).clone())?;
            Ok(tensor::apply_mask(&map).into_tensor())
        }
        NodeKind::Learned { op, param } => tensor::apply_learned(op, arg(0), params[param]),
        NodeKind::Conv { op, weight, bias } => tensor::conv_spatial(
            op,
            arg(0),
            node.width,
            ConvWeights::Full { weight: params[weight], bias: params[bias] },
            graph.padding,
        ),
        NodeKind::Depthwise { op, kernel } => tensor::conv_spatial(
            op,
            arg(0),
            node.width,
            ConvWeights::Depthwise { kernel: params[kernel] },
            graph.padding,
        ),
        NodeKind::Adapt => Ok(tensor::adapt_channels(arg(0), node.width)),
        NodeKind::Concat => {
            let parts: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
            tensor::concat_channels(&parts)
        }
    }
}

/// Deterministic choice of which operand adapts when channel widths differ.
pub fn pick_side(lineage_seed: u64, op: PrimitiveOp, lhs_content: u64, rhs_content: u64) -> Side {
    let mut h = DefaultHasher::new();
    (lineage_seed, op, lhs_content, rhs_content).hash(&mut h);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    if rng.random::<bool>() {
        Side::Lhs
    } else {
        Side::Rhs
    }
}

/// What to do with a pair of operand widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MismatchPlan {
    None,
    /// Adapt the given side to `width`.
    Adapt { side: Side, width: usize },
}

/// Plans the channel adapter for a binary site. `pick` is consulted only when
/// the widths differ.
pub fn resolve_mismatch(lhs: usize, rhs: usize, pick: Side) -> MismatchPlan {
    if lhs == rhs {
        return MismatchPlan::None;
    }
    match pick {
        Side::Lhs => MismatchPlan::Adapt { side: Side::Lhs, width: rhs },
        Side::Rhs => MismatchPlan::Adapt { side: Side::Rhs, width: lhs },
    }
}

/// Which instructions feed each subprogram's output, and which of its two
/// inputs it reads.
struct Liveness {
    live: Vec<Vec<bool>>,
}

fn liveness(dna: &Dna) -> Liveness {
    let n = dna.subprograms.len();
    let mut live = vec![Vec::new(); n];
    let mut reads = vec![(false, false); n];
    for s in (0..n).rev() {
        let ins = &dna.subprograms[s].instructions;
        let mut l = vec![false; ins.len()];
        let mut r = (false, false);
        *l.last_mut().expect("non-empty subprogram") = true;
        for k in (0..ins.len()).rev() {
            if !l[k] {
                continue;
            }
            let (u1, u2) = match ins[k].op {
                Op::Prim(p) => (true, p.uses_second_input()),
                Op::Call(t) => reads[t],
                Op::Identity => (true, false),
            };
            for (used, src) in [(u1, ins[k].in1), (u2, ins[k].in2)] {
                if !used {
                    continue;
                }
                match src {
                    0 => r.0 = true,
                    1 => r.1 = true,
                    _ => l[src - 2] = true,
                }
            }
        }
        live[s] = l;
        reads[s] = r;
    }
    Liveness { live }
}

#[derive(Debug, Clone)]
struct RawNode {
    kind: NodeKind,
    inputs: Vec<NodeId>,
    width: usize,
    provenance: Provenance,
    content: u64,
}

/// A lowered value, or the error that prevents it. Errors only abort
/// compilation if they reach the output.
type Val = Result<NodeId, Rc<CompileError>>;

struct Lowerer<'a> {
    dna: &'a Dna,
    cfg: CompileConfig,
    live: Liveness,
    lower_dead: bool,
    nodes: Vec<RawNode>,
    params: Vec<ParamSpec>,
    listing: Option<Vec<FlatLine>>,
    recording: bool,
    path: Vec<Site>,
}

impl<'a> Lowerer<'a> {
    fn new(dna: &'a Dna, cfg: CompileConfig, listing: bool) -> Self {
        let input = RawNode {
            kind: NodeKind::Input,
            inputs: Vec::new(),
            width: cfg.d_model(),
            provenance: Provenance::default(),
            content: 0x1d_70,
        };
        Self {
            dna,
            cfg,
            live: liveness(dna),
            lower_dead: listing,
            nodes: vec![input],
            params: Vec::new(),
            listing: listing.then(|| {
                vec![FlatLine { kind: FlatKind::Input, in0: 0, in1: 0, dim: 0, constant: 0.0 }; 2]
            }),
            recording: listing,
            path: Vec::new(),
        }
    }

    fn site(&self) -> String {
        Provenance(self.path.clone()).to_string()
    }

    fn soft(&self, e: CompileError) -> Val {
        Err(Rc::new(e))
    }

    fn shape_err(&self, detail: impl Into<String>) -> Val {
        self.soft(CompileError::Shape { site: self.site(), detail: detail.into() })
    }

    fn push(&mut self, kind: NodeKind, inputs: Vec<NodeId>, width: usize) -> Result<Val, CompileError> {
        if width > self.cfg.max_width {
            return Ok(self.soft(CompileError::WidthCap { site: self.site(), width }));
        }
        if self.nodes.len() >= self.cfg.max_nodes {
            return Err(CompileError::NodeCap { limit: self.cfg.max_nodes });
        }
        let mut h = DefaultHasher::new();
        content_key(&kind).hash(&mut h);
        width.hash(&mut h);
        for &i in &inputs {
            self.nodes[i].content.hash(&mut h);
        }
        let content = h.finish();
        self.nodes.push(RawNode {
            kind,
            inputs,
            width,
            provenance: Provenance(self.path.clone()),
            content,
        });
        Ok(Ok(self.nodes.len() - 1))
    }

    fn param(&mut self, len: usize, init: Init) -> ParamId {
        self.params.push(ParamSpec { len, init });
        self.params.len() - 1
    }

    fn record(&mut self, line: FlatLine) -> usize {
        match &mut self.listing {
            Some(l) if self.recording => {
                l.push(line);
                l.len() - 1
            }
            _ => 0,
        }
    }

    fn lower_sub(&mut self, s: usize, inputs: [Val; 2], lids: [usize; 2]) -> Result<(Val, usize), CompileError> {
        let sub = &self.dna.subprograms[s];
        let mut env: Vec<Val> = inputs.to_vec();
        let mut lid: Vec<usize> = lids.to_vec();
        for (k, ins) in sub.instructions.iter().enumerate() {
            if !self.lower_dead && !self.live.live[s][k] {
                env.push(self.soft(CompileError::Shape { site: String::new(), detail: "dead".into() }));
                lid.push(0);
                continue;
            }
            self.path.push(Site { sub: s, instr: k, copy: 0 });
            let (v, l) = self.lower_instruction(ins, &env, &lid)?;
            self.path.pop();
            env.push(v);
            lid.push(l);
        }
        Ok((env.pop().expect("non-empty"), lid.pop().expect("non-empty")))
    }

    fn lower_instruction(
        &mut self,
        ins: &Instruction,
        env: &[Val],
        lid: &[usize],
    ) -> Result<(Val, usize), CompileError> {
        let a = env[ins.in1].clone();
        let b = env[ins.in2].clone();
        let dim = u64::from(self.dna.dims[ins.dim_idx]) * self.cfg.scale_unit;
        let constant = self.dna.constants[ins.const_idx];
        let flat = |kind, in0, in1| FlatLine { kind, in0, in1, dim, constant };

        if ins.branching == 1 {
            return match ins.op {
                Op::Prim(p) => {
                    let l = self.record(flat(FlatKind::Prim(p), lid[ins.in1], lid[ins.in2]));
                    Ok((self.lower_prim(p, ins, a, b)?, l))
                }
                Op::Call(t) => self.lower_sub(t, [a, b], [lid[ins.in1], lid[ins.in2]]),
                Op::Identity => Ok((a, lid[ins.in1])),
            };
        }

        let bk = |second| FlatKind::BranchInput { branching: ins.branching, second };
        let l1 = self.record(flat(bk(false), lid[ins.in1], lid[ins.in2]));
        let l2 = self.record(flat(bk(true), lid[ins.in1], lid[ins.in2]));
        let outer = self.recording;
        let mut outs = Vec::with_capacity(ins.branching as usize);
        let mut out_line = 0;
        for copy in 0..ins.branching {
            self.recording = outer && copy == 0;
            self.path.last_mut().expect("site").copy = copy;
            let (v, l) = match ins.op {
                Op::Prim(p) => {
                    let l = self.record(flat(FlatKind::Prim(p), l1, l2));
                    (self.lower_prim(p, ins, a.clone(), b.clone())?, l)
                }
                Op::Call(t) => self.lower_sub(t, [a.clone(), b.clone()], [l1, l2])?,
                Op::Identity => (a.clone(), l1),
            };
            if copy == 0 {
                out_line = l;
            }
            outs.push(v);
        }
        self.recording = outer;
        self.path.last_mut().expect("site").copy = 0;
        let merged = match outs.into_iter().collect::<Result<Vec<NodeId>, _>>() {
            Ok(ids) => {
                let width = ids.iter().map(|&i| self.nodes[i].width).sum();
                self.push(NodeKind::Concat, ids, width)?
            }
            Err(e) => Err(e),
        };
        let merged_width = merged.as_ref().map_or(0, |&i| self.nodes[i].width as u64);
        let l = self.record(FlatLine { dim: merged_width, ..flat(FlatKind::BranchMerge, out_line, out_line) });
        Ok((merged, l))
    }

    fn adapt(&mut self, id: NodeId, width: usize) -> Result<Val, CompileError> {
        if self.nodes[id].width == width {
            return Ok(Ok(id));
        }
        self.push(NodeKind::Adapt, vec![id], width)
    }

    /// Brings two operands to a common width per [`resolve_mismatch`].
    fn unify(&mut self, op: PrimitiveOp, a: NodeId, b: NodeId) -> Result<Result<(NodeId, NodeId), Rc<CompileError>>, CompileError> {
        let (wa, wb) = (self.nodes[a].width, self.nodes[b].width);
        if wa == wb {
            return Ok(Ok((a, b)));
        }
        let pick = pick_side(self.dna.meta.lineage_seed, op, self.nodes[a].content, self.nodes[b].content);
        Ok(match resolve_mismatch(wa, wb, pick) {
            MismatchPlan::None => Ok((a, b)),
            MismatchPlan::Adapt { side: Side::Lhs, width } => self.adapt(a, width)?.map(|x| (x, b)),
            MismatchPlan::Adapt { side: Side::Rhs, width } => self.adapt(b, width)?.map(|y| (a, y)),
        })
    }

    fn lower_prim(&mut self, op: PrimitiveOp, ins: &Instruction, a: Val, b: Val) -> Result<Val, CompileError> {
        let a = match a {
            Ok(a) => a,
            Err(e) => return Ok(Err(e)),
        };
        let b = if op.uses_second_input() {
            match b {
                Ok(b) => b,
                Err(e) => return Ok(Err(e)),
            }
        } else {
            a
        };
        let wa = self.nodes[a].width;
        let seq = self.cfg.seq;
        let dim = self.dna.dims[ins.dim_idx] as usize * self.cfg.scale_unit as usize;
        match op.family() {
            OpFamily::Unary => {
                let constant = if op.uses_constant() { self.dna.constants[ins.const_idx] } else { 0.0 };
                self.push(NodeKind::Unary { op, constant }, vec![a], wa)
            }
            OpFamily::Binary => {
                let wb = self.nodes[b].width;
                let (a, b) = if wa == 1 || wb == 1 {
                    (a, b)
                } else {
                    match self.unify(op, a, b)? {
                        Ok(pair) => pair,
                        Err(e) => return Ok(Err(e)),
                    }
                };
                let width = self.nodes[a].width.max(self.nodes[b].width);
                self.push(NodeKind::Binary(op), vec![a, b], width)
            }
            OpFamily::Learned => {
                let init = if op == PrimitiveOp::Scale { Init::Ones } else { Init::Zeros };
                let param = self.param(wa, init);
                self.push(NodeKind::Learned { op, param }, vec![a], wa)
            }
            OpFamily::Mask => {
                if wa != seq {
                    return Ok(self.shape_err(format!("mask needs {seq} channels, got {wa}")));
                }
                self.push(NodeKind::Mask, vec![a], wa)
            }
            OpFamily::Cumulative => self.push(NodeKind::Cumulative(op), vec![a], wa),
            OpFamily::Reduction => self.push(NodeKind::Reduce(op), vec![a], 1),
            OpFamily::MatMul if op == PrimitiveOp::TMatMul => {
                let (x, y) = match self.unify(op, a, b)? {
                    Ok(pair) => pair,
                    Err(e) => return Ok(Err(e)),
                };
                self.push(NodeKind::MatMul(op), vec![x, y], seq)
            }
            OpFamily::MatMul => {
                if wa != seq {
                    return Ok(self.shape_err(format!("MAT_MUL weights have {wa} channels for {seq} positions")));
                }
                let wb = self.nodes[b].width;
                self.push(NodeKind::MatMul(op), vec![a, b], wb)
            }
            OpFamily::Conv => {
                let k = op.kernel_width().expect("conv width");
                if dim > self.cfg.max_width {
                    return Ok(self.soft(CompileError::WidthCap { site: self.site(), width: dim }));
                }
                let std = 1.0 / ((k * wa) as f64).sqrt();
                let weight = self.param(k * wa * dim, Init::TruncatedNormal { std });
                let bias = self.param(dim, Init::Zeros);
                self.push(NodeKind::Conv { op, weight, bias }, vec![a], dim)
            }
            OpFamily::DepthwiseConv => {
                let k = op.kernel_width().expect("conv width");
                let kernel = self.param(k * wa, Init::DepthwiseIdentity { width: k, channels: wa });
                self.push(NodeKind::Depthwise { op, kernel }, vec![a], wa)
            }
        }
    }
}

/// Parameter-free identity of a node kind, used for content hashing.
fn content_key(kind: &NodeKind) -> (String, u64) {
    let c = match kind {
        NodeKind::Unary { constant, .. } => constant.to_bits(),
        _ => 0,
    };
    (kind.label(), c)
}

/// Lowers a program into a canonical graph.
pub fn lower(dna: &Dna, cfg: &CompileConfig) -> Result<Graph, CompileError> {
    dna.validate()?;
    if cfg.scale_unit == 0 {
        return Err(CompileError::ZeroUnit);
    }
    let mut lw = Lowerer::new(dna, *cfg, false);
    let (out, _) = lw.lower_sub(0, [Ok(0), Ok(0)], [0, 0])?;
    let mut out = out.map_err(|e| (*e).clone())?;
    let d = cfg.d_model();
    if lw.nodes[out].width != d {
        out = lw.adapt(out, d)?.map_err(|e| (*e).clone())?;
    }
    Ok(canonicalize(lw.nodes, lw.params, out, cfg))
}

/// The flattened listing of a program: every instruction (live or not),
/// calls resolved, first branch copy only.
pub fn flatten(dna: &Dna, cfg: &CompileConfig) -> Result<Vec<FlatLine>, CompileError> {
    dna.validate()?;
    if cfg.scale_unit == 0 {
        return Err(CompileError::ZeroUnit);
    }
    let mut lw = Lowerer::new(dna, *cfg, true);
    let _ = lw.lower_sub(0, [Ok(0), Ok(0)], [0, 1])?;
    Ok(lw.listing.take().expect("listing mode"))
}

fn canonicalize(raw: Vec<RawNode>, raw_params: Vec<ParamSpec>, out: NodeId, cfg: &CompileConfig) -> Graph {
    // Iterative post-order from the output, operands in argument order.
    let mut order = Vec::new();
    let mut new_id = vec![usize::MAX; raw.len()];
    let mut stack = vec![(out, 0usize)];
    while let Some((n, next)) = stack.pop() {
        if new_id[n] != usize::MAX {
            continue;
        }
        if next < raw[n].inputs.len() {
            stack.push((n, next + 1));
            let child = raw[n].inputs[next];
            if new_id[child] == usize::MAX {
                stack.push((child, 0));
            }
        } else {
            new_id[n] = order.len();
            order.push(n);
        }
    }
    // Input comes first even when the output cone does not reach it.
    if new_id[0] == usize::MAX {
        for v in new_id.iter_mut().filter(|v| **v != usize::MAX) {
            *v += 1;
        }
        new_id[0] = 0;
        order.insert(0, 0);
    }

    let mut param_map = vec![usize::MAX; raw_params.len()];
    let mut params = Vec::new();
    let mut nodes = Vec::with_capacity(order.len());
    for &r in &order {
        let rn = &raw[r];
        let mut kind = rn.kind.clone();
        for p in kind.params() {
            if param_map[p] == usize::MAX {
                param_map[p] = params.len();
                params.push(raw_params[p]);
            }
        }
        kind.map_params(|p| param_map[p]);
        nodes.push(Node {
            kind,
            inputs: rn.inputs.iter().map(|&i| new_id[i]).collect(),
            width: rn.width,
            provenance: rn.provenance.clone(),
        });
    }
    let mut g = Graph {
        nodes,
        output: new_id[out],
        params,
        d_model: cfg.d_model(),
        seq: cfg.seq,
        scale_unit: cfg.scale_unit,
        padding: cfg.padding,
        guards: cfg.guards,
        hash: 0,
    };
    g.hash = structural_hash(&g);
    g
}

fn structural_hash(g: &Graph) -> u64 {
    let mut h = Sha256::new();
    let mut put = |x: u64| h.update(x.to_le_bytes());
    put(g.d_model as u64);
    put(g.seq as u64);
    put(matches!(g.padding, Padding::Centered) as u64);
    put(g.nodes.len() as u64);
    put(g.output as u64);
    let mut bytes = Vec::new();
    for n in &g.nodes {
        bytes.clear();
        bytes.extend_from_slice(n.kind.label().as_bytes());
        bytes.push(0);
        if let NodeKind::Unary { constant, .. } = n.kind {
            bytes.extend_from_slice(&constant.to_bits().to_le_bytes());
        }
        bytes.extend_from_slice(&(n.width as u64).to_le_bytes());
        bytes.extend_from_slice(&(n.inputs.len() as u64).to_le_bytes());
        for &i in &n.inputs {
            bytes.extend_from_slice(&(i as u64).to_le_bytes());
        }
        for p in n.kind.params() {
            let spec = g.params[p];
            bytes.extend_from_slice(&(spec.len as u64).to_le_bytes());
            let tag: u8 = match spec.init {
                Init::TruncatedNormal { .. } => 1,
                Init::Ones => 2,
                Init::Zeros => 3,
                Init::DepthwiseIdentity { .. } => 4,
            };
            bytes.push(tag);
        }
        h.update(&bytes);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Convenience: lower then instantiate.
pub fn compile(dna: &Dna, cfg: &CompileConfig, seed: u64) -> Result<CompiledGraph, CompileError> {
    Ok(Arc::new(lower(dna, cfg)?).instantiate(seed))
}

/// Digest of the dead-code-free lowered graph.
pub fn canonical_hash(dna: &Dna, cfg: &CompileConfig) -> Result<u64, CompileError> {
    Ok(lower(dna, cfg)?.canonical_hash())
}

/// The non-block parts of a decoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackShape {
    pub layers: usize,
    pub vocab: usize,
    pub tied: bool,
}

impl StackShape {
    /// Total parameters of a stack around blocks of `block_params` each.
    pub fn total_params(&self, block_params: usize, d_model: usize, seq: usize) -> usize {
        let untied = if self.tied { 0 } else { self.vocab * d_model };
        self.layers * block_params + self.vocab * d_model + seq * d_model + untied
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ResizeError {
    #[error("min_params must be below max_params")]
    InvalidBounds,
    #[error("no scale unit lands in range: closest counts {below:?} and {above:?}")]
    Infeasible { below: Option<(u64, usize)>, above: Option<(u64, usize)> },
    #[error(transparent)]
    Compile(#[from] CompileError),
}

pub const MAX_UNIT: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resized {
    pub scale_unit: u64,
    pub params: usize,
}

/// Smallest scale unit whose stack lands in `[min_params, max_params]`.
pub fn resize_to_budget(
    dna: &Dna,
    min_params: usize,
    max_params: usize,
    cfg: &CompileConfig,
    shape: &StackShape,
) -> Result<Resized, ResizeError> {
    if min_params >= max_params {
        return Err(ResizeError::InvalidBounds);
    }
    // `None` stands for a unit too large to lower.
    let count = |u: u64| -> Result<Option<usize>, CompileError> {
        let c = cfg.with_unit(u);
        match lower(dna, &c) {
            Ok(g) => Ok(Some(shape.total_params(g.param_count(), c.d_model(), c.seq))),
            Err(CompileError::WidthCap { .. }) | Err(CompileError::NodeCap { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let reaches = |v: Option<usize>| v.is_none_or(|n| n >= min_params);

    let mut lo = 0u64;
    let mut lo_count = None;
    let mut hi = 1u64;
    let mut hi_count = count(hi)?;
    while !reaches(hi_count) {
        lo = hi;
        lo_count = hi_count;
        if hi == MAX_UNIT {
            return Err(ResizeError::Infeasible { below: lo_count.map(|n| (lo, n)), above: None });
        }
        hi = (hi * 2).min(MAX_UNIT);
        hi_count = count(hi)?;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let c = count(mid)?;
        if reaches(c) {
            hi = mid;
            hi_count = c;
        } else {
            lo = mid;
            lo_count = c;
        }
    }
    match hi_count {
        Some(n) if n <= max_params => Ok(Resized { scale_unit: hi, params: n }),
        above => Err(ResizeError::Infeasible {
            below: lo_count.map(|n| (lo, n)),
            above: above.map(|n| (hi, n)),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub trial: usize,
    pub position: usize,
    /// Earliest node whose activations at positions `< position` moved.
    pub node: NodeId,
    pub provenance: String,
    /// Earliest output position that changed.
    pub leaked_to: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CausalityReport {
    pub trials: usize,
    /// Trials where a forward pass failed numerically.
    pub skipped: usize,
    pub violations: Vec<Violation>,
}

impl CausalityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn rows_equal_before(a: &Tensor, b: &Tensor, j: usize) -> Option<usize> {
    let s = a.shape();
    for t in 0..j {
        for bi in 0..s.batch {
            if a.row(bi, t).iter().zip(b.row(bi, t)).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Some(t);
            }
        }
    }
    None
}

/// Perturbation test: changing the input at position `j` must leave every
/// output row before `j` bit-identical.
pub fn verify_causality(graph: &CompiledGraph, trials: usize, seed: u64) -> CausalityReport {
    let g = &graph.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CausalityReport { trials, ..Default::default() };
    if g.seq < 2 {
        return report;
    }
    let shape = Shape::new(2, g.seq, g.nodes[0].width);
    for trial in 0..trials {
        let data: Vec<f64> = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
        let x = Tensor::new(shape, data).expect("valid shape");
        let j = rng.random_range(1..g.seq);
        let mut y = x.clone();
        let b = rng.random_range(0..shape.batch);
        for c in 0..shape.channel {
            let idx = y.index(b, j, c);
            y.data_mut()[idx] += 1.0 + rng.random::<f64>();
        }
        let (Ok(ta), Ok(tb)) = (graph.forward_tape(&x), graph.forward_tape(&y)) else {
            report.skipped += 1;
            continue;
        };
        let Some(leaked_to) = rows_equal_before(ta.output(g), tb.output(g), j) else {
            continue;
        };
        let node = (0..g.nodes.len())
            .find(|&n| rows_equal_before(&ta.values[n], &tb.values[n], j).is_some())
            .unwrap_or(g.output);
        report.violations.push(Violation {
            trial,
            position: j,
            node,
            provenance: format!("{} {}", g.nodes[node].kind.label(), g.nodes[node].provenance),
            leaked_to,
        });
    }
    report
}
