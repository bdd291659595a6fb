//! Seed programs and named architecture modifications.
//!
//! The Transformer seed is split into ten subprograms:
//!
//! | index | role                                  |
//! |-------|---------------------------------------|
//! | S0    | main: two residual branches           |
//! | S1    | self-attention (one head per branch)  |
//! | S2    | feed-forward                          |
//! | S3    | head projection                       |
//! | S4    | softmax                               |
//! | S5    | normalization (S6 then S7)            |
//! | S6    | z-score                               |
//! | S7    | scale and shift                       |
//! | S8    | residual add                          |
//! | S9    | activation                            |
//!
//! Every [`ModificationFlag`] rewrites one or more of these subprograms into a
//! fixed canonical form, which makes each flag idempotent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dna::{Dna, Instruction, Op, Subprogram, DIM_VOCAB};
use crate::tensor::{self, Guards, PrimitiveOp, Tensor, TensorError};

use PrimitiveOp::*;

/// Slope of the sigmoid approximation `x * sigmoid(1.702 x)` of GELU.
pub const GELU_SIGMOID_SLOPE: f64 = 1.702;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SeedError {
    #[error("{flag} does not apply: {reason}")]
    ModificationNotApplicable { flag: ModificationFlag, reason: String },
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn s(ins: Vec<Instruction>) -> Subprogram {
    Subprogram::new(ins)
}

fn p(op: PrimitiveOp, a: usize, b: usize) -> Instruction {
    Instruction::prim(op, a, b)
}

fn call(t: usize, a: usize, b: usize) -> Instruction {
    Instruction::call(t, a, b)
}

fn build(subs: Vec<Subprogram>, constants: [f64; 2], dims: [u32; 6]) -> Dna {
    Dna::new(subs, constants, dims).expect("seed programs are valid")
}

/// The vanilla pre-norm Transformer block with 8 heads, written for a scale
/// unit of 64 (`d_model` 512, `d_ff` 2048).
pub fn transformer() -> Dna {
    build(
        vec![
            s(vec![
                call(5, 0, 0),
                call(1, 2, 2).branch(8),
                p(Conv1x1, 3, 3).dim(2),
                call(8, 0, 4),
                call(5, 5, 5),
                call(2, 6, 6),
                call(8, 5, 7),
            ]),
            s(vec![
                call(3, 0, 0),
                call(3, 0, 0),
                p(ConstMul, 3, 3).constant(1),
                call(3, 0, 0),
                p(TMatMul, 4, 2),
                call(4, 6, 6),
                p(MatMul, 7, 5),
            ]),
            s(vec![
                p(Conv1x1, 0, 0).dim(3),
                p(Shift, 2, 2),
                call(9, 3, 3),
                p(Conv1x1, 4, 4).dim(2),
                p(Shift, 5, 5),
            ]),
            s(vec![p(Conv1x1, 0, 0).dim(1)]),
            s(vec![p(Exp, 0, 0), p(Mask, 2, 2), p(RedSum, 3, 3), p(Divide, 3, 4)]),
            s(vec![call(6, 0, 0), call(7, 2, 2)]),
            s(vec![
                p(RedMean, 0, 0),
                p(Difference, 0, 2),
                p(Multiply, 3, 3),
                p(RedMean, 4, 4),
                p(AbsRoot, 5, 5),
                p(Divide, 3, 6),
            ]),
            s(vec![p(Scale, 0, 0), p(Shift, 2, 2)]),
            s(vec![p(Add, 0, 1)]),
            s(vec![p(Max, 0, 0)]),
        ],
        [0.0, 0.125],
        [2, 1, 8, 32, 4, 16],
    )
}

/// The discovered program exactly as listed, extraneous operations included,
/// written for a scale unit of 48.
pub fn primer_verbatim() -> Dna {
    build(
        vec![
            s(vec![
                call(5, 0, 0),
                call(1, 2, 2).branch(8),
                p(Conv1x1, 3, 3).dim(1),
                call(8, 0, 4),
                call(2, 5, 5),
                call(5, 6, 6),
                call(8, 5, 7),
            ]),
            s(vec![
                p(Max, 0, 0).constant(1),
                call(3, 0, 0),
                p(Max, 1, 1).constant(1),
                call(3, 0, 0),
                p(Conv1x1, 5, 1).dim(2),
                p(Max, 0, 0).constant(1),
                call(3, 0, 0),
                p(TMatMul, 6, 5),
                call(4, 9, 5),
                p(MatMul, 10, 8),
            ]),
            s(vec![
                p(Conv1x1, 0, 1).dim(3).branch(2),
                p(Shift, 2, 2),
                call(9, 3, 3),
                p(Conv1x1, 4, 4).dim(1),
            ]),
            s(vec![
                p(Conv1x1, 0, 0).dim(2),
                p(DConv3x1, 2, 0).dim(1),
                p(ConstMul, 3, 3).dim(1),
            ]),
            s(vec![
                p(Exp, 0, 0),
                p(Mask, 2, 2),
                p(RedSum, 3, 3),
                p(Divide, 3, 4),
                p(Tanh, 5, 0).dim(1),
                p(Scale, 6, 1).dim(1),
            ]),
            s(vec![call(6, 0, 0), call(7, 2, 2)]),
            s(vec![
                p(RedMean, 0, 0),
                p(Difference, 0, 2),
                p(Multiply, 3, 0),
                p(RedMean, 4, 4),
                p(AbsRoot, 5, 5),
                p(Divide, 3, 6),
            ]),
            s(vec![p(Scale, 0, 0), p(Shift, 2, 2).dim(1).constant(1)]),
            s(vec![p(Add, 0, 1), p(Add, 2, 1)]),
            s(vec![p(Max, 0, 0).constant(1), p(Square, 2, 0)]),
        ],
        [-1.12, -0.57],
        [16, 8, 1, 48, 2, 4],
    )
}

/// Primer without its extraneous operations, the 12X projection or the
/// post-softmax gating.
pub fn primer() -> Dna {
    apply_all(&transformer(), ModificationFlag::PRIMER)
}

pub fn primer_ez() -> Dna {
    apply_all(&transformer(), ModificationFlag::PRIMER_EZ)
}

pub fn transformer_gelu() -> Dna {
    apply_all(&transformer(), &[ModificationFlag::Gelu])
}

pub fn transformer_pp() -> Dna {
    apply_all(&transformer(), &[ModificationFlag::SwigluPp])
}

/// The seed Transformer with `heads` heads of `8 / heads` units each.
pub fn transformer_with_heads(heads: u32) -> Result<Dna, SeedError> {
    if ![1, 2, 4, 8].contains(&heads) {
        return Err(SeedError::ContractViolation(format!("{heads} heads do not divide 8 units")));
    }
    let mut d = transformer();
    d.subprograms[0].instructions[1].branching = heads;
    let head_dim = d.subprograms[3].instructions[0].dim_idx;
    d.dims[head_dim] = 8 / heads;
    Ok(d)
}

fn apply_all(base: &Dna, flags: &[ModificationFlag]) -> Dna {
    flags.iter().fold(base.clone(), |d, &f| {
        apply_modification(&d, f).expect("library flags apply to the seed")
    })
}

pub const SEED_NAMES: [&str; 6] =
    ["transformer", "primer", "primer_verbatim", "primer_ez", "transformer_gelu", "transformer_pp"];

/// Looks up a library program by name.
pub fn seed(name: &str) -> Option<Dna> {
    Some(match name {
        "transformer" => transformer(),
        "primer" => primer(),
        "primer_verbatim" => primer_verbatim(),
        "primer_ez" => primer_ez(),
        "transformer_gelu" => transformer_gelu(),
        "transformer_pp" => transformer_pp(),
        _ => return None,
    })
}

/// Scale unit each library program is written for.
pub fn native_unit(name: &str) -> u64 {
    if name == "primer_verbatim" { 48 } else { 64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModificationFlag {
    SquaredRelu,
    Mdha,
    SharedQk,
    PrePostNorm,
    CustomNorm,
    #[serde(rename = "BOTTLENECK_12X")]
    Bottleneck12x,
    PostSoftmaxSpatialGating,
    Gelu,
    SwigluPp,
}

impl ModificationFlag {
    pub const ALL: [ModificationFlag; 9] = [
        ModificationFlag::SquaredRelu,
        ModificationFlag::Mdha,
        ModificationFlag::SharedQk,
        ModificationFlag::PrePostNorm,
        ModificationFlag::CustomNorm,
        ModificationFlag::Bottleneck12x,
        ModificationFlag::PostSoftmaxSpatialGating,
        ModificationFlag::Gelu,
        ModificationFlag::SwigluPp,
    ];

    pub const PRIMER: &'static [ModificationFlag] = &[
        ModificationFlag::SquaredRelu,
        ModificationFlag::Mdha,
        ModificationFlag::SharedQk,
        ModificationFlag::PrePostNorm,
        ModificationFlag::CustomNorm,
    ];

    pub const PRIMER_EZ: &'static [ModificationFlag] =
        &[ModificationFlag::Mdha, ModificationFlag::SquaredRelu];

    pub fn name(self) -> &'static str {
        match self {
            ModificationFlag::SquaredRelu => "SQUARED_RELU",
            ModificationFlag::Mdha => "MDHA",
            ModificationFlag::SharedQk => "SHARED_QK",
            ModificationFlag::PrePostNorm => "PRE_POST_NORM",
            ModificationFlag::CustomNorm => "CUSTOM_NORM",
            ModificationFlag::Bottleneck12x => "BOTTLENECK_12X",
            ModificationFlag::PostSoftmaxSpatialGating => "POST_SOFTMAX_SPATIAL_GATING",
            ModificationFlag::Gelu => "GELU",
            ModificationFlag::SwigluPp => "SWIGLU_PP",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let upper = name.to_ascii_uppercase().replace('-', "_");
        Self::ALL.into_iter().find(|f| f.name() == upper)
    }
}

impl std::fmt::Display for ModificationFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Facts about the target stack that decide whether a flag applies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ModContext {
    pub variable_seq_len: bool,
}

pub fn apply_modification(dna: &Dna, flag: ModificationFlag) -> Result<Dna, SeedError> {
    apply_modification_with(dna, flag, ModContext::default())
}

pub fn apply_modification_with(
    dna: &Dna,
    flag: ModificationFlag,
    ctx: ModContext,
) -> Result<Dna, SeedError> {
    let na = |reason: &str| SeedError::ModificationNotApplicable { flag, reason: reason.into() };
    if dna.subprograms.len() < 10 {
        return Err(na("program does not have the ten seed subprograms"));
    }
    let mut d = dna.clone();
    let op_at = |d: &Dna, sub: usize, k: usize| d.subprograms[sub].instructions.get(k).map(|i| i.op);
    match flag {
        ModificationFlag::SquaredRelu => {
            let zero = d.constants.iter().position(|&c| c == 0.0).ok_or_else(|| na("no 0.0 constant"))?;
            d.subprograms[9] = s(vec![p(Max, 0, 0).constant(zero), p(Square, 2, 0)]);
        }
        ModificationFlag::Mdha => {
            let Some(&Instruction { op: Op::Prim(Conv1x1), dim_idx, .. }) =
                d.subprograms[3].instructions.first()
            else {
                return Err(na("S3 is not a head projection"));
            };
            d.subprograms[3] = s(vec![p(Conv1x1, 0, 0).dim(dim_idx), p(DConv3x1, 2, 0).dim(dim_idx)]);
        }
        ModificationFlag::SharedQk => {
            let head_dim = match d.subprograms[3].instructions.first() {
                Some(&Instruction { op: Op::Prim(Conv1x1), dim_idx, .. }) => dim_idx,
                _ => return Err(na("S3 is not a head projection")),
            };
            let q_ok = matches!(op_at(&d, 1, 1), Some(Op::Call(3)) | Some(Op::Prim(Conv1x1)));
            if op_at(&d, 1, 0) != Some(Op::Call(3)) || !q_ok {
                return Err(na("S1 does not start with K and Q projections"));
            }
            d.subprograms[1].instructions[1] = p(Conv1x1, 2, 2).dim(head_dim);
        }
        ModificationFlag::PrePostNorm => {
            let main = &d.subprograms[0].instructions;
            let pre = main.len() == 7 && main[4].op == Op::Call(5) && main[5].op == Op::Call(2);
            let post = main.len() == 7 && main[4].op == Op::Call(2) && main[5].op == Op::Call(5);
            if !pre && !post {
                return Err(na("S0 is not the two-branch residual layout"));
            }
            d.subprograms[0].instructions[4] = call(2, 5, 5);
            d.subprograms[0].instructions[5] = call(5, 6, 6);
        }
        ModificationFlag::CustomNorm => {
            if op_at(&d, 6, 2) != Some(Op::Prim(Multiply)) {
                return Err(na("S6 is not a z-score"));
            }
            d.subprograms[6].instructions[2] = p(Multiply, 3, 0);
        }
        ModificationFlag::Bottleneck12x => {
            let ff = d.subprograms[2]
                .instructions
                .first_mut()
                .filter(|i| i.op == Op::Prim(Conv1x1))
                .ok_or_else(|| na("S2 does not start with an up-projection"))?;
            ff.branching = 2;
            let idx = ff.dim_idx;
            d.dims[idx] = 48;
            debug_assert!(DIM_VOCAB.contains(&48));
        }
        ModificationFlag::PostSoftmaxSpatialGating => {
            if ctx.variable_seq_len {
                return Err(na("gating needs a fixed sequence length"));
            }
            let sm = &mut d.subprograms[4].instructions;
            if sm.last().map(|i| i.op) != Some(Op::Prim(Scale)) || sm.len() < 5 {
                let last = sm.len() + 1;
                sm.push(p(Scale, last, last));
            }
        }
        ModificationFlag::Gelu => {
            let slot = d.subprograms[9].instructions[0].const_idx;
            let clash = d.subprograms.iter().enumerate().any(|(i, sp)| {
                i != 9
                    && sp.instructions.iter().any(|ins| {
                        matches!(ins.op, Op::Prim(op) if op.uses_constant()) && ins.const_idx == slot
                    })
            });
            if clash {
                return Err(na("the activation's constant slot is shared"));
            }
            d.constants[slot] = GELU_SIGMOID_SLOPE;
            d.subprograms[9] = s(vec![
                p(ConstMul, 0, 0).constant(slot),
                p(Sigmoid, 2, 2),
                p(Multiply, 0, 3),
            ]);
        }
        ModificationFlag::SwigluPp => {
            let (up, down) = match (op_at(&d, 2, 0), d.subprograms[2].instructions.last()) {
                (Some(Op::Prim(Conv1x1)), Some(_)) => {
                    let ins = &d.subprograms[2].instructions;
                    let down = ins
                        .iter()
                        .rev()
                        .find(|i| i.op == Op::Prim(Conv1x1))
                        .map_or(ins[0].dim_idx, |i| i.dim_idx);
                    (ins[0].dim_idx, down)
                }
                _ => return Err(na("S2 does not start with an up-projection")),
            };
            d.subprograms[2] = s(vec![
                p(Conv1x1, 0, 0).dim(up),
                p(Conv1x1, 0, 0).dim(up),
                call(9, 3, 3),
                p(Multiply, 2, 4),
                p(Conv1x1, 5, 5).dim(down),
            ]);
            d.subprograms[9] = s(vec![p(Sigmoid, 0, 0), p(Multiply, 0, 2)]);
            d.subprograms[6] = s(vec![
                p(Multiply, 0, 0),
                p(RedMean, 2, 2),
                p(AbsRoot, 3, 3),
                p(Divide, 0, 4),
            ]);
        }
    }
    d.validate().map_err(|e| SeedError::ContractViolation(e.to_string()))?;
    Ok(d)
}

/// `max(x, 0)^2`.
pub fn squared_relu(x: &Tensor) -> Tensor {
    x.map(|v| {
        let r = v.max(0.0);
        r * r
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActivationKind {
    Relu,
    SquaredRelu,
    GeluApprox,
    Swish,
    Reglu,
    Swiglu,
}

/// Gate weights for GLU variants, each `[in, out]` row-major, no bias.
#[derive(Debug, Clone, Copy)]
pub struct GluWeights<'a> {
    pub u: &'a [f64],
    pub v: &'a [f64],
    pub out: usize,
}

fn gelu_tanh(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

pub fn activation(kind: ActivationKind, x: &Tensor, glu: Option<GluWeights<'_>>) -> Result<Tensor, SeedError> {
    match kind {
        ActivationKind::Relu => Ok(tensor::apply_unary(Max, x, 0.0, Guards::On)?),
        ActivationKind::SquaredRelu => Ok(squared_relu(x)),
        ActivationKind::GeluApprox => Ok(x.map(gelu_tanh)),
        ActivationKind::Swish => Ok(x.map(|v| v * tensor::sigmoid(v))),
        ActivationKind::Reglu | ActivationKind::Swiglu => {
            let w = glu.ok_or_else(|| SeedError::ContractViolation(format!("{kind:?} needs gate weights")))?;
            let zeros = vec![0.0; w.out];
            let ux = tensor::dense(x, w.u, &zeros)?;
            let vx = tensor::dense(x, w.v, &zeros)?;
            let gate = if kind == ActivationKind::Reglu {
                vx.map(|v| v.max(0.0))
            } else {
                vx.map(|v| v * tensor::sigmoid(v))
            };
            Ok(tensor::apply_binary(Multiply, &ux, &gate, Guards::On)?)
        }
    }
}

fn norm_with(x: &Tensor, custom: bool) -> Tensor {
    let c = x.shape().channel;
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = if custom {
            row.iter().map(|v| v * (v - mu)).sum::<f64>() / c as f64
        } else {
            row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64
        };
        let den = var.abs().sqrt();
        for v in row.iter_mut() {
            *v = if den == 0.0 { 0.0 } else { (*v - mu) / den };
        }
    }
    out
}

/// Layer norm without gain or bias, with the same zero-denominator guard as
/// `DIVIDE`.
pub fn layer_norm(x: &Tensor) -> Tensor {
    norm_with(x, false)
}

/// Normalization whose variance term is `mean(x (x - mu))`.
pub fn custom_norm(x: &Tensor) -> Tensor {
    norm_with(x, true)
}

/// Dense head projection followed by a causal width-3 depthwise convolution.
pub fn mdha_projection(
    x: &Tensor,
    weight: &[f64],
    bias: &[f64],
    kernel: &[f64],
) -> Result<Tensor, SeedError> {
    let head = tensor::dense(x, weight, bias)?;
    Ok(tensor::conv_spatial(
        DConv3x1,
        &head,
        bias.len(),
        tensor::ConvWeights::Depthwise { kernel },
        tensor::Padding::Causal,
    )?)
}
