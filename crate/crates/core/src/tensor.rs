//! Dense rank-3 tensors and the forward kernels behind every primitive of the
//! instruction vocabulary.
//!
//! Every value flowing through a compiled block is a `[batch, seq, channel]`
//! array of `f64` in row-major order. Attention logits and weights use the same
//! storage with `channel == seq`; [`AttentionMap`] is the checked view of that
//! case.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp applied to `LOG` inputs (in magnitude) while guards are on.
pub const LOG_FLOOR: f64 = 1e-12;
/// Upper clamp applied to `EXP` inputs while guards are on.
pub const EXP_CEILING: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NumericOverflow { op: &'static str },
    #[error("invalid dimension {value} for {op}")]
    InvalidDimension { op: &'static str, value: usize },
    #[error("contract violation: {0}")]
    ContractViolation(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Whether the numeric guards on DIVIDE, RECIP, LOG and EXP are active.
///
/// With guards off the raw IEEE behaviour is kept, so divisions by zero and
/// overflowing exponentials surface as [`TensorError::NumericOverflow`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Guards {
    #[default]
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub seq: usize,
    pub channel: usize,
}

impl Shape {
    pub fn new(batch: usize, seq: usize, channel: usize) -> Self {
        Self { batch, seq, channel }
    }

    pub fn len(&self) -> usize {
        self.batch * self.seq * self.channel
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of `[seq, channel]` rows across the batch.
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn with_channel(self, channel: usize) -> Self {
        Self { channel, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.batch, self.seq, self.channel)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.batch == 0 || shape.seq == 0 || shape.channel == 0 {
            return Err(TensorError::ContractViolation(format!(
                "tensor axes must be positive, got {shape}"
            )));
        }
        if data.len() != shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("{} values for shape {shape}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    /// Single batch, single sequence position.
    pub fn from_channels(values: &[f64]) -> Self {
        Self::new(Shape::new(1, 1, values.len()), values.to_vec()).expect("non-empty channels")
    }

    /// Single batch, one channel per sequence position.
    pub fn from_sequence(values: &[f64]) -> Self {
        Self::new(Shape::new(1, values.len(), 1), values.to_vec()).expect("non-empty sequence")
    }

    /// Single batch from a `[seq][channel]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let seq = rows.len();
        let channel = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Shape::new(1, seq, channel), data).expect("rectangular rows")
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, b: usize, s: usize, c: usize) -> usize {
        (b * self.shape.seq + s) * self.shape.channel + c
    }

    pub fn get(&self, b: usize, s: usize, c: usize) -> f64 {
        self.data[self.index(b, s, c)]
    }

    pub fn row(&self, b: usize, s: usize) -> &[f64] {
        let start = self.index(b, s, 0);
        &self.data[start..start + self.shape.channel]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// A `[batch, seq, seq]` tensor: attention logits or weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

impl TryFrom<Tensor> for AttentionMap {
    type Error = TensorError;

    fn try_from(t: Tensor) -> Result<Self> {
        if t.shape.channel != t.shape.seq {
            return Err(TensorError::ShapeMismatch {
                op: "attention map",
                detail: format!("trailing axes of {} are not square", t.shape),
            });
        }
        Ok(Self(t))
    }
}

macro_rules! primitive_ops {
    ($( $variant:ident => $name:literal, $alias:literal; )*) => {
        /// The 39 primitive operations of the instruction vocabulary.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum PrimitiveOp { $($variant),* }

        impl PrimitiveOp {
            pub const ALL: [PrimitiveOp; 39] = [$(PrimitiveOp::$variant),*];

            /// Name used in program listings.
            pub fn name(self) -> &'static str {
                match self { $(PrimitiveOp::$variant => $name),* }
            }

            /// Short vocabulary-table name.
            pub fn short_name(self) -> &'static str {
                match self { $(PrimitiveOp::$variant => $alias),* }
            }

            /// Accepts either the listing name or the short name.
            pub fn from_name(s: &str) -> Option<Self> {
                #[allow(unreachable_patterns)]
                match s {
                    $($name | $alias => Some(PrimitiveOp::$variant),)*
                    _ => None,
                }
            }
        }
    };
}

primitive_ops! {
    Add => "ADD", "ADD";
    Difference => "DIFFERENCE", "DIFFERENCE";
    Divide => "DIVIDE", "DIVIDE";
    Multiply => "MULTIPLY", "MULTIPLY";
    AbsRoot => "ABS_SQUARE_ROOT", "ABS_ROOT";
    Square => "SQUARE", "SQUARE";
    Exp => "EXP", "EXP";
    Log => "LOG", "LOG";
    ConstMul => "CONSTANT_MUL", "C_MUL";
    Abs => "ABS", "ABS";
    Recip => "RECIPROCAL", "RECIP";
    Sign => "SIGN", "SIGN";
    Cos => "COS", "COS";
    Sin => "SIN", "SIN";
    Tanh => "TANH", "TANH";
    Max => "MAX", "MAX";
    Min => "MIN", "MIN";
    Scale => "SCALE", "SCALE";
    Shift => "SHIFT", "SHIFT";
    Sigmoid => "SIGMOID", "SIGMOID";
    Mask => "EMBEDDING_MASK", "MASK";
    CumProd => "CUMULATIVE_PROD", "CUM_PROD";
    CumSum => "CUMULATIVE_SUM", "CUM_SUM";
    RedMean => "REDUCE_MEAN", "RED_MEAN";
    RedSum => "REDUCE_SUM", "RED_SUM";
    RedMin => "REDUCE_MIN", "RED_MIN";
    RedMax => "REDUCE_MAX", "RED_MAX";
    RedProd => "REDUCE_PROD", "RED_PROD";
    MatMul => "MAT_MUL", "MAT_MUL";
    TMatMul => "TRANSPOSE_MAT_MUL", "T_MAT_MUL";
    Conv1x1 => "DENSE", "CONV_1X1";
    Conv3x1 => "CONV_3X1", "CONV_3X1";
    Conv7x1 => "CONV_7X1", "CONV_7X1";
    Conv15x1 => "CONV_15X1", "CONV_15X1";
    Conv31x1 => "CONV_31X1", "CONV_31X1";
    DConv3x1 => "DEPTHWISE_CONV_3X1", "DCONV_3X1";
    DConv7x1 => "DEPTHWISE_CONV_7X1", "DCONV_7X1";
    DConv15x1 => "DEPTHWISE_CONV_15X1", "DCONV_15X1";
    DConv31x1 => "DEPTHWISE_CONV_31X1", "DCONV_31X1";
}

/// Kernel family, which fixes the argument-usage signature of an op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpFamily {
    Binary,
    Unary,
    Learned,
    Mask,
    Cumulative,
    Reduction,
    MatMul,
    Conv,
    DepthwiseConv,
}

impl PrimitiveOp {
    pub fn family(self) -> OpFamily {
        use PrimitiveOp::*;
        match self {
            Add | Difference | Divide | Multiply => OpFamily::Binary,
            AbsRoot | Square | Exp | Log | ConstMul | Abs | Recip | Sign | Cos | Sin | Tanh
            | Max | Min | Sigmoid => OpFamily::Unary,
            Scale | Shift => OpFamily::Learned,
            Mask => OpFamily::Mask,
            CumProd | CumSum => OpFamily::Cumulative,
            RedMean | RedSum | RedMin | RedMax | RedProd => OpFamily::Reduction,
            MatMul | TMatMul => OpFamily::MatMul,
            Conv1x1 | Conv3x1 | Conv7x1 | Conv15x1 | Conv31x1 => OpFamily::Conv,
            DConv3x1 | DConv7x1 | DConv15x1 | DConv31x1 => OpFamily::DepthwiseConv,
        }
    }

    /// True when the op reads its second input argument.
    pub fn uses_second_input(self) -> bool {
        matches!(self.family(), OpFamily::Binary | OpFamily::MatMul)
    }

    /// True when the op reads the constant argument.
    pub fn uses_constant(self) -> bool {
        matches!(self, PrimitiveOp::ConstMul | PrimitiveOp::Max | PrimitiveOp::Min)
    }

    /// True when the op reads the dimension argument.
    pub fn uses_dim(self) -> bool {
        self.family() == OpFamily::Conv
    }

    /// Spatial kernel width for convolution ops.
    pub fn kernel_width(self) -> Option<usize> {
        use PrimitiveOp::*;
        match self {
            Conv1x1 => Some(1),
            Conv3x1 | DConv3x1 => Some(3),
            Conv7x1 | DConv7x1 => Some(7),
            Conv15x1 | DConv15x1 => Some(15),
            Conv31x1 | DConv31x1 => Some(31),
            _ => None,
        }
    }
}

impl fmt::Display for PrimitiveOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn finite_or(op: PrimitiveOp, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NumericOverflow { op: op.name() })
    }
}

fn wrong_family(op: PrimitiveOp, what: &str) -> TensorError {
    TensorError::ContractViolation(format!("{op} is not a {what} op"))
}

/// Scalar form of the unary kernels.
pub fn unary_scalar(op: PrimitiveOp, x: f64, constant: f64, guards: Guards) -> f64 {
    use PrimitiveOp::*;
    let on = guards == Guards::On;
    match op {
        AbsRoot => x.abs().sqrt(),
        Square => x * x,
        Exp => {
            if on {
                x.min(EXP_CEILING).exp()
            } else {
                x.exp()
            }
        }
        Log => {
            if on {
                x.abs().max(LOG_FLOOR).ln()
            } else {
                x.abs().ln()
            }
        }
        ConstMul => constant * x,
        Abs => x.abs(),
        Recip => {
            if on && x == 0.0 {
                0.0
            } else {
                1.0 / x
            }
        }
        Sign => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Cos => x.cos(),
        Sin => x.sin(),
        Tanh => x.tanh(),
        Max => x.max(constant),
        Min => x.min(constant),
        Sigmoid => sigmoid(x),
        _ => unreachable!("{op} is not unary"),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn apply_unary(op: PrimitiveOp, x: &Tensor, constant: f64, guards: Guards) -> Result<Tensor> {
    if op.family() != OpFamily::Unary {
        return Err(wrong_family(op, "unary"));
    }
    finite_or(op, x.map(|v| unary_scalar(op, v, constant, guards)))
}

pub fn binary_scalar(op: PrimitiveOp, x: f64, y: f64, guards: Guards) -> f64 {
    match op {
        PrimitiveOp::Add => x + y,
        PrimitiveOp::Difference => x - y,
        PrimitiveOp::Multiply => x * y,
        PrimitiveOp::Divide => {
            if guards == Guards::On && y == 0.0 {
                0.0
            } else {
                x / y
            }
        }
        _ => unreachable!("{op} is not binary"),
    }
}

/// Elementwise binary op. Either operand may have a single channel, in which
/// case it is broadcast across the other operand's channels.
pub fn apply_binary(op: PrimitiveOp, x: &Tensor, y: &Tensor, guards: Guards) -> Result<Tensor> {
    if op.family() != OpFamily::Binary {
        return Err(wrong_family(op, "binary"));
    }
    let (xs, ys) = (x.shape, y.shape);
    if xs.batch != ys.batch || xs.seq != ys.seq {
        return Err(TensorError::ShapeMismatch { op: op.name(), detail: format!("{xs} vs {ys}") });
    }
    let out_c = if xs.channel == ys.channel || ys.channel == 1 {
        xs.channel
    } else if xs.channel == 1 {
        ys.channel
    } else {
        return Err(TensorError::ShapeMismatch { op: op.name(), detail: format!("{xs} vs {ys}") });
    };
    let out_shape = xs.with_channel(out_c);
    let mut data = Vec::with_capacity(out_shape.len());
    for r in 0..xs.rows() {
        let xr = &x.data[r * xs.channel..(r + 1) * xs.channel];
        let yr = &y.data[r * ys.channel..(r + 1) * ys.channel];
        for c in 0..out_c {
            let a = if xs.channel == 1 { xr[0] } else { xr[c] };
            let b = if ys.channel == 1 { yr[0] } else { yr[c] };
            data.push(binary_scalar(op, a, b, guards));
        }
    }
    finite_or(op, Tensor { shape: out_shape, data })
}

/// Channel-axis reduction with keep-dims: output shape `[batch, seq, 1]`.
pub fn apply_reduction(op: PrimitiveOp, x: &Tensor) -> Result<Tensor> {
    if op.family() != OpFamily::Reduction {
        return Err(wrong_family(op, "reduction"));
    }
    let s = x.shape;
    let data = x
        .data
        .chunks_exact(s.channel)
        .map(|row| match op {
            PrimitiveOp::RedMean => row.iter().sum::<f64>() / s.channel as f64,
            PrimitiveOp::RedSum => row.iter().sum(),
            PrimitiveOp::RedMin => row.iter().copied().fold(f64::INFINITY, f64::min),
            PrimitiveOp::RedMax => row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            PrimitiveOp::RedProd => row.iter().product(),
            _ => unreachable!(),
        })
        .collect();
    finite_or(op, Tensor { shape: s.with_channel(1), data })
}

/// Inclusive scan along the sequence axis.
pub fn apply_cumulative(op: PrimitiveOp, x: &Tensor) -> Result<Tensor> {
    if op.family() != OpFamily::Cumulative {
        return Err(wrong_family(op, "cumulative"));
    }
    let s = x.shape;
    let mut out = x.clone();
    for b in 0..s.batch {
        for t in 1..s.seq {
            for c in 0..s.channel {
                let prev = out.data[out.index(b, t - 1, c)];
                let i = out.index(b, t, c);
                out.data[i] = match op {
                    PrimitiveOp::CumSum => prev + out.data[i],
                    _ => prev * out.data[i],
                };
            }
        }
    }
    finite_or(op, out)
}

/// Raw product `c += a * b` over row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_batch(op: PrimitiveOp, a: Shape, b: Shape) -> Result<()> {
    if a.batch != b.batch {
        return Err(TensorError::ShapeMismatch { op: op.name(), detail: format!("{a} vs {b}") });
    }
    Ok(())
}

/// Batched `MAT_MUL` / `T_MAT_MUL` as plain matrix products.
///
/// `MAT_MUL` treats `a` as `[batch, m, k]` and `b` as `[batch, k, n]`;
/// `T_MAT_MUL` contracts the channel axes of two `[batch, seq, c]` operands.
pub fn matmul_pair(op: PrimitiveOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_impl(op, a, b, false)
}

/// Causal form used by compiled graphs: `T_MAT_MUL` entries `(i, j)` with
/// `j > i` are zero, and `MAT_MUL` only sums over `j <= i`.
pub fn matmul_pair_causal(op: PrimitiveOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_impl(op, a, b, true)
}

fn matmul_impl(op: PrimitiveOp, a: &Tensor, b: &Tensor, causal: bool) -> Result<Tensor> {
    let (sa, sb) = (a.shape, b.shape);
    check_batch(op, sa, sb)?;
    match op {
        PrimitiveOp::TMatMul => {
            if sa.channel != sb.channel {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    detail: format!("inner dims {} vs {}", sa.channel, sb.channel),
                });
            }
            if causal && sa.seq != sb.seq {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    detail: "causal product needs equal sequence lengths".into(),
                });
            }
            let out_shape = Shape::new(sa.batch, sa.seq, sb.seq);
            let mut out = Tensor::zeros(out_shape);
            let c = sa.channel;
            for bi in 0..sa.batch {
                let ab = &a.data[bi * sa.seq * c..(bi + 1) * sa.seq * c];
                let bb = &b.data[bi * sb.seq * c..(bi + 1) * sb.seq * c];
                let ob = &mut out.data[bi * sa.seq * sb.seq..(bi + 1) * sa.seq * sb.seq];
                if causal {
                    for i in 0..sa.seq {
                        let ar = &ab[i * c..(i + 1) * c];
                        for j in 0..=i {
                            let br = &bb[j * c..(j + 1) * c];
                            ob[i * sb.seq + j] = dot(ar, br);
                        }
                    }
                } else {
                    gemm(sa.seq, c, sb.seq, ab, (c, 1), bb, (1, c), ob, false);
                }
            }
            finite_or(op, out)
        }
        PrimitiveOp::MatMul => {
            if sa.channel != sb.seq {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    detail: format!("inner dims {} vs {}", sa.channel, sb.seq),
                });
            }
            let (m, k, n) = (sa.seq, sa.channel, sb.channel);
            let out_shape = Shape::new(sa.batch, m, n);
            let mut out = Tensor::zeros(out_shape);
            for bi in 0..sa.batch {
                let ab = &a.data[bi * m * k..(bi + 1) * m * k];
                let bb = &b.data[bi * k * n..(bi + 1) * k * n];
                let ob = &mut out.data[bi * m * n..(bi + 1) * m * n];
                if causal {
                    for i in 0..m {
                        let orow = &mut ob[i * n..(i + 1) * n];
                        for j in 0..=i.min(k - 1) {
                            let w = ab[i * k + j];
                            let brow = &bb[j * n..(j + 1) * n];
                            for (o, &v) in orow.iter_mut().zip(brow) {
                                *o += w * v;
                            }
                        }
                    }
                } else {
                    gemm(m, k, n, ab, (k, 1), bb, (n, 1), ob, false);
                }
            }
            finite_or(op, out)
        }
        _ => Err(wrong_family(op, "matmul")),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// How a spatial convolution pads the sequence axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Padding {
    /// Left-pad by `width - 1`: position `i` sees only positions `<= i`.
    Causal,
    /// Symmetric padding. Leaks future positions; only used to build
    /// deliberately broken graphs.
    Centered,
}

impl Padding {
    /// Sequence offset of tap 0 relative to the output position.
    pub fn offset(self, width: usize) -> isize {
        match self {
            Padding::Causal => -(width as isize - 1),
            Padding::Centered => -((width as isize - 1) / 2),
        }
    }
}

/// Weights for a spatial convolution kernel.
#[derive(Debug, Clone, Copy)]
pub enum ConvWeights<'a> {
    /// Full convolution: `weight` is `[width, in, out]`, `bias` is `[out]`.
    Full { weight: &'a [f64], bias: &'a [f64] },
    /// Depthwise: `kernel` is `[width, channels]`, no bias.
    Depthwise { kernel: &'a [f64] },
}

/// `CONV_kX1` / `DCONV_kX1` forward pass.
pub fn conv_spatial(
    op: PrimitiveOp,
    x: &Tensor,
    out_channels: usize,
    weights: ConvWeights<'_>,
    padding: Padding,
) -> Result<Tensor> {
    let width = op.kernel_width().ok_or_else(|| wrong_family(op, "convolution"))?;
    if out_channels == 0 {
        return Err(TensorError::InvalidDimension { op: op.name(), value: out_channels });
    }
    let s = x.shape;
    let cin = s.channel;
    let off = padding.offset(width);
    match (op.family(), weights) {
        (OpFamily::Conv, ConvWeights::Full { weight, bias }) => {
            if weight.len() != width * cin * out_channels || bias.len() != out_channels {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    detail: format!("weights for {width}x{cin}x{out_channels}"),
                });
            }
            let out_shape = s.with_channel(out_channels);
            let mut out = Tensor::zeros(out_shape);
            for r in 0..s.rows() {
                out.data[r * out_channels..(r + 1) * out_channels].copy_from_slice(bias);
            }
            for b in 0..s.batch {
                for tap in 0..width {
                    let shift = off + tap as isize;
                    // Output rows t whose source row t + shift is in range.
                    let t_lo = (-shift).max(0) as usize;
                    let t_hi = (s.seq as isize - shift).min(s.seq as isize);
                    if t_hi <= t_lo as isize {
                        continue;
                    }
                    let rows = t_hi as usize - t_lo;
                    let src0 = (t_lo as isize + shift) as usize;
                    let xa = &x.data[(b * s.seq + src0) * cin..(b * s.seq + src0 + rows) * cin];
                    let w = &weight[tap * cin * out_channels..(tap + 1) * cin * out_channels];
                    let oa = &mut out.data
                        [(b * s.seq + t_lo) * out_channels..(b * s.seq + t_lo + rows) * out_channels];
                    gemm(rows, cin, out_channels, xa, (cin, 1), w, (out_channels, 1), oa, true);
                }
            }
            finite_or(op, out)
        }
        (OpFamily::DepthwiseConv, ConvWeights::Depthwise { kernel }) => {
            if out_channels != cin || kernel.len() != width * cin {
                return Err(TensorError::ShapeMismatch {
                    op: op.name(),
                    detail: format!("depthwise kernel for {width}x{cin}, out {out_channels}"),
                });
            }
            let mut out = Tensor::zeros(s);
            for b in 0..s.batch {
                for t in 0..s.seq {
                    let orow = out.index(b, t, 0);
                    for tap in 0..width {
                        let src = t as isize + off + tap as isize;
                        if src < 0 || src >= s.seq as isize {
                            continue;
                        }
                        let xrow = x.index(b, src as usize, 0);
                        let k = &kernel[tap * cin..(tap + 1) * cin];
                        for c in 0..cin {
                            out.data[orow + c] += k[c] * x.data[xrow + c];
                        }
                    }
                }
            }
            finite_or(op, out)
        }
        _ => Err(TensorError::ContractViolation(format!("weights do not match {op}"))),
    }
}

/// Dense channel projection `x W + bias` with `W` of shape `[in, out]`.
pub fn dense(x: &Tensor, weight: &[f64], bias: &[f64]) -> Result<Tensor> {
    let out = bias.len();
    conv_spatial(
        PrimitiveOp::Conv1x1,
        x,
        out,
        ConvWeights::Full { weight, bias },
        Padding::Causal,
    )
}

/// Lower-triangular keep on the trailing `[seq, seq]` axes (diagonal kept).
pub fn apply_mask(x: &AttentionMap) -> AttentionMap {
    let mut t = x.0.clone();
    mask_in_place(&mut t);
    AttentionMap(t)
}

/// Zeroes entries whose channel index exceeds their sequence index.
pub(crate) fn mask_in_place(t: &mut Tensor) {
    let s = t.shape;
    for b in 0..s.batch {
        for i in 0..s.seq {
            let start = t.index(b, i, 0);
            for v in &mut t.data[start + (i + 1).min(s.channel)..start + s.channel] {
                *v = 0.0;
            }
        }
    }
}

/// `SCALE` multiplies by a learned per-channel gain, `SHIFT` adds a learned
/// per-channel bias.
pub fn apply_learned(op: PrimitiveOp, x: &Tensor, params: &[f64]) -> Result<Tensor> {
    if op.family() != OpFamily::Learned {
        return Err(wrong_family(op, "learned"));
    }
    let c = x.shape.channel;
    if params.len() != c {
        return Err(TensorError::ShapeMismatch {
            op: op.name(),
            detail: format!("{} parameters for {c} channels", params.len()),
        });
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(c) {
        for (v, p) in row.iter_mut().zip(params) {
            if op == PrimitiveOp::Scale {
                *v *= p;
            } else {
                *v += p;
            }
        }
    }
    finite_or(op, out)
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::ContractViolation("concat of nothing".into()))?
        .shape;
    let mut total = 0;
    for p in parts {
        if p.shape.batch != first.batch || p.shape.seq != first.seq {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("{} vs {}", p.shape, first),
            });
        }
        total += p.shape.channel;
    }
    let out_shape = first.with_channel(total);
    let mut data = Vec::with_capacity(out_shape.len());
    for r in 0..first.rows() {
        for p in parts {
            let c = p.shape.channel;
            data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
        }
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Parameter-free channel adapter: truncates when too wide, tiles cyclically
/// when too narrow.
pub fn adapt_channels(x: &Tensor, width: usize) -> Tensor {
    let c = x.shape.channel;
    let out_shape = x.shape.with_channel(width);
    let mut data = Vec::with_capacity(out_shape.len());
    for row in x.data.chunks_exact(c) {
        data.extend((0..width).map(|j| row[j % c]));
    }
    Tensor { shape: out_shape, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ch(v: &[f64]) -> Tensor {
        Tensor::from_channels(v)
    }

    #[test]
    fn max_with_zero_constant_is_relu() {
        let out = apply_unary(PrimitiveOp::Max, &ch(&[-2.0, 0.0, 3.0]), 0.0, Guards::On).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn square_and_reciprocal_no_nan() {
        let sq = apply_unary(PrimitiveOp::Square, &ch(&[3.0, -2.0]), 0.0, Guards::On).unwrap();
        assert_eq!(sq.data(), &[9.0, 4.0]);
        let r = apply_unary(PrimitiveOp::Recip, &ch(&[0.0, 2.0]), 0.0, Guards::On).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5]);
    }

    #[test]
    fn guards_off_surface_overflow() {
        let r = apply_unary(PrimitiveOp::Recip, &ch(&[0.0]), 0.0, Guards::Off);
        assert_eq!(r, Err(TensorError::NumericOverflow { op: "RECIPROCAL" }));
        let e = apply_unary(PrimitiveOp::Exp, &ch(&[1000.0]), 0.0, Guards::On).unwrap();
        assert_eq!(e.data()[0], EXP_CEILING.exp());
        let l = apply_unary(PrimitiveOp::Log, &ch(&[0.0]), 0.0, Guards::On).unwrap();
        assert_eq!(l.data()[0], LOG_FLOOR.ln());
    }

    #[test]
    fn wrong_family_is_contract_violation() {
        let err = apply_unary(PrimitiveOp::Add, &ch(&[1.0]), 0.0, Guards::On).unwrap_err();
        assert!(matches!(err, TensorError::ContractViolation(_)));
    }

    #[test]
    fn binary_ops() {
        let add = apply_binary(PrimitiveOp::Add, &ch(&[1.0, 2.0]), &ch(&[3.0, 4.0]), Guards::On);
        assert_eq!(add.unwrap().data(), &[4.0, 6.0]);
        let div = apply_binary(PrimitiveOp::Divide, &ch(&[6.0, 0.0]), &ch(&[3.0, 0.0]), Guards::On);
        assert_eq!(div.unwrap().data(), &[2.0, 0.0]);
        let x = ch(&[1.5, -2.0, 7.0]);
        let ones = ch(&[1.0, 1.0, 1.0]);
        assert_eq!(apply_binary(PrimitiveOp::Multiply, &x, &ones, Guards::On).unwrap(), x);
    }

    #[test]
    fn divide_guard_matches_reciprocal_composition() {
        // x / y == x * reciprocal_no_nan(y) on every pair, including zeros.
        let xs = [6.0, 0.0, -3.0, 5.0, 0.0];
        let ys = [3.0, 0.0, 0.0, -0.5, 2.0];
        let div = apply_binary(PrimitiveOp::Divide, &ch(&xs), &ch(&ys), Guards::On).unwrap();
        let recip = apply_unary(PrimitiveOp::Recip, &ch(&ys), 0.0, Guards::On).unwrap();
        let composed = apply_binary(PrimitiveOp::Multiply, &ch(&xs), &recip, Guards::On).unwrap();
        assert_eq!(div, composed);
    }

    #[test]
    fn binary_broadcasts_single_channel() {
        let x = ch(&[2.0, 4.0, 6.0]);
        let mean = apply_reduction(PrimitiveOp::RedMean, &x).unwrap();
        let d = apply_binary(PrimitiveOp::Difference, &x, &mean, Guards::On).unwrap();
        assert_eq!(d.data(), &[-2.0, 0.0, 2.0]);
        let err = apply_binary(PrimitiveOp::Add, &x, &ch(&[1.0, 2.0]), Guards::On).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn reductions() {
        let r = |op, v: &[f64]| apply_reduction(op, &ch(v)).unwrap().data()[0];
        assert_eq!(r(PrimitiveOp::RedMean, &[2.0, 4.0, 6.0]), 4.0);
        assert_eq!(r(PrimitiveOp::RedSum, &[1.0; 4]), 4.0);
        assert_eq!(r(PrimitiveOp::RedProd, &[2.0, 3.0, 0.5]), 3.0);
        assert_eq!(r(PrimitiveOp::RedMin, &[2.0, -3.0, 0.5]), -3.0);
        assert_eq!(r(PrimitiveOp::RedMax, &[2.0, -3.0, 0.5]), 2.0);
        let kept = apply_reduction(PrimitiveOp::RedSum, &ch(&[1.0, 2.0])).unwrap();
        assert_eq!(kept.shape(), Shape::new(1, 1, 1));
    }

    #[test]
    fn cumulative_scans_follow_sequence() {
        let s = apply_cumulative(PrimitiveOp::CumSum, &Tensor::from_sequence(&[1.0, 2.0, 3.0]));
        assert_eq!(s.unwrap().data(), &[1.0, 3.0, 6.0]);
        let p = apply_cumulative(PrimitiveOp::CumProd, &Tensor::from_sequence(&[2.0, 2.0, 2.0]));
        assert_eq!(p.unwrap().data(), &[2.0, 4.0, 8.0]);
        let one = Tensor::from_sequence(&[5.0]);
        assert_eq!(apply_cumulative(PrimitiveOp::CumSum, &one).unwrap(), one);
    }

    #[test]
    fn matmul_examples() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let t = matmul_pair(PrimitiveOp::TMatMul, &eye, &eye).unwrap();
        assert_eq!(t, eye);
        let v = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        assert_eq!(matmul_pair(PrimitiveOp::MatMul, &eye, &v).unwrap(), v);
        let q = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let qk = matmul_pair(PrimitiveOp::TMatMul, &q, &eye).unwrap();
        assert_eq!(qk.data(), &[1.0, 2.0, 3.0, 4.0]);
        // The causal form drops the (0, 1) entry.
        let qk = matmul_pair_causal(PrimitiveOp::TMatMul, &q, &eye).unwrap();
        assert_eq!(qk.data(), &[1.0, 0.0, 3.0, 4.0]);
        let bad = matmul_pair(PrimitiveOp::MatMul, &v, &v).unwrap_err();
        assert!(matches!(bad, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn causal_matmul_ignores_future_rows() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        let v = Tensor::from_rows(&[vec![1.0], vec![f64::NAN]]);
        let out = matmul_pair_causal(PrimitiveOp::MatMul, &w, &v).unwrap_err();
        // Row 1 legitimately sees the NaN at position 1.
        assert!(matches!(out, TensorError::NumericOverflow { .. }));
        let v = Tensor::from_rows(&[vec![1.0], vec![10.0]]);
        let out = matmul_pair_causal(PrimitiveOp::MatMul, &w, &v).unwrap();
        assert_eq!(out.data(), &[1.0, 11.0]);
    }

    #[test]
    fn depthwise_identity_and_delay() {
        let x = Tensor::from_sequence(&[1.0, 2.0, 3.0]);
        let id = conv_spatial(
            PrimitiveOp::DConv3x1,
            &x,
            1,
            ConvWeights::Depthwise { kernel: &[0.0, 0.0, 1.0] },
            Padding::Causal,
        )
        .unwrap();
        assert_eq!(id, x);
        let delay = conv_spatial(
            PrimitiveOp::DConv3x1,
            &x,
            1,
            ConvWeights::Depthwise { kernel: &[1.0, 0.0, 0.0] },
            Padding::Causal,
        )
        .unwrap();
        assert_eq!(delay.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn dense_identity_and_invalid_width() {
        let x = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 4.0]]);
        let out = dense(&x, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out, x);
        let err = conv_spatial(
            PrimitiveOp::Conv3x1,
            &x,
            0,
            ConvWeights::Full { weight: &[], bias: &[] },
            Padding::Causal,
        )
        .unwrap_err();
        assert_eq!(err, TensorError::InvalidDimension { op: "CONV_3X1", value: 0 });
    }

    #[test]
    fn full_conv_matches_direct_sum() {
        // width 3, 1 -> 1 channel: y[t] = w0 x[t-2] + w1 x[t-1] + w2 x[t] + b
        let x = Tensor::from_sequence(&[1.0, 2.0, 3.0, 4.0]);
        let w = [0.5, -1.0, 2.0];
        let out = conv_spatial(
            PrimitiveOp::Conv3x1,
            &x,
            1,
            ConvWeights::Full { weight: &w, bias: &[0.25] },
            Padding::Causal,
        )
        .unwrap();
        let xs = [0.0, 0.0, 1.0, 2.0, 3.0, 4.0];
        let expect: Vec<f64> =
            (0..4).map(|t| w[0] * xs[t] + w[1] * xs[t + 1] + w[2] * xs[t + 2] + 0.25).collect();
        assert_eq!(out.data(), expect.as_slice());
    }

    #[test]
    fn mask_examples() {
        let ones = |n: usize| {
            AttentionMap::try_from(Tensor::full(Shape::new(1, n, n), 1.0)).unwrap()
        };
        assert_eq!(apply_mask(&ones(2)).tensor().data(), &[1.0, 0.0, 1.0, 1.0]);
        let m3 = apply_mask(&ones(3));
        assert_eq!(m3.tensor().data(), &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(apply_mask(&m3), m3);
        let rect = AttentionMap::try_from(Tensor::zeros(Shape::new(1, 2, 3)));
        assert!(matches!(rect, Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn learned_ops() {
        let x = ch(&[1.0, 1.0]);
        assert_eq!(apply_learned(PrimitiveOp::Scale, &x, &[1.0, 1.0]).unwrap(), x);
        assert_eq!(apply_learned(PrimitiveOp::Shift, &x, &[0.0, 0.0]).unwrap(), x);
        assert_eq!(apply_learned(PrimitiveOp::Scale, &x, &[2.0, 3.0]).unwrap().data(), &[2.0, 3.0]);
        let err = apply_learned(PrimitiveOp::Shift, &x, &[0.0]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn adapter_truncates_and_tiles() {
        let x = ch(&[1.0, 2.0, 3.0]);
        assert_eq!(adapt_channels(&x, 2).data(), &[1.0, 2.0]);
        assert_eq!(adapt_channels(&x, 7).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0]);
    }

    #[test]
    fn op_names_round_trip() {
        for op in PrimitiveOp::ALL {
            assert_eq!(PrimitiveOp::from_name(op.name()), Some(op));
            assert_eq!(PrimitiveOp::from_name(op.short_name()), Some(op));
        }
        assert_eq!(PrimitiveOp::from_name("ABS_ROOT"), Some(PrimitiveOp::AbsRoot));
        assert_eq!(PrimitiveOp::from_name("T_MAT_MUL"), Some(PrimitiveOp::TMatMul));
    }
}
