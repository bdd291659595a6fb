//! Reverse-mode differentiation over a compiled block graph.
//!
//! Derivatives follow the guarded forward kernels: wherever a guard replaced
//! the raw result by a constant (zero divisor, clamped `EXP`, floored `LOG`)
//! the local derivative is zero. Kinks take the one-sided value described on
//! each rule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::compiler::{execute, CompiledGraph, Graph, NodeKind, Tape};
use crate::tensor::{
    self, gemm, Guards, Padding, PrimitiveOp, Shape, Tensor, TensorError, EXP_CEILING,
    LOG_FLOOR,
};

/// Gradients of a scalar loss with respect to the block input and every
/// parameter tensor.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Tensor,
    pub params: Vec<Vec<f64>>,
}

/// Local derivative of a unary kernel at `x` given its output `y`.
pub fn unary_derivative(op: PrimitiveOp, x: f64, y: f64, constant: f64, guards: Guards) -> f64 {
    use PrimitiveOp::*;
    let on = guards == Guards::On;
    match op {
        AbsRoot => {
            if x == 0.0 {
                0.0
            } else {
                x.signum() / (2.0 * y)
            }
        }
        Square => 2.0 * x,
        Exp => {
            if on && x > EXP_CEILING {
                0.0
            } else {
                y
            }
        }
        Log => {
            if on && x.abs() < LOG_FLOOR {
                0.0
            } else {
                1.0 / x
            }
        }
        ConstMul => constant,
        Abs => {
            if x == 0.0 {
                0.0
            } else {
                x.signum()
            }
        }
        Recip => {
            if on && x == 0.0 {
                0.0
            } else {
                -y * y
            }
        }
        Sign => 0.0,
        Cos => -x.sin(),
        Sin => x.cos(),
        Tanh => 1.0 - y * y,
        Max => f64::from(u8::from(x > constant)),
        Min => f64::from(u8::from(x < constant)),
        Sigmoid => y * (1.0 - y),
        _ => unreachable!("{op} is not unary"),
    }
}

fn overflow(what: &'static str) -> TensorError {
    TensorError::NumericOverflow { op: what }
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

/// Gradient for an operand of a broadcasting binary op: sums over channels
/// when the operand had a single channel.
fn unbroadcast(g: Vec<f64>, out: Shape, width: usize) -> Tensor {
    if width == out.channel {
        return Tensor::new(out, g).expect("matching shape");
    }
    let data = g.chunks_exact(out.channel).map(|r| r.iter().sum()).collect();
    Tensor::new(out.with_channel(1), data).expect("positive dims")
}

/// Backpropagates `grad_out` through a forward tape.
pub fn backward(
    graph: &Graph,
    params: &[&[f64]],
    tape: &Tape,
    grad_out: &Tensor,
) -> Result<Gradients, TensorError> {
    let out_shape = tape.values[graph.output].shape();
    if grad_out.shape() != out_shape {
        return Err(TensorError::ShapeMismatch {
            op: "backward",
            detail: format!("gradient {} for output {out_shape}", grad_out.shape()),
        });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; graph.nodes.len()];
    let mut pgrads: Vec<Vec<f64>> = graph.params.iter().map(|p| vec![0.0; p.len]).collect();
    grads[graph.output] = Some(grad_out.clone());

    for id in (0..graph.nodes.len()).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &graph.nodes[id];
        if node.kind == NodeKind::Input {
            grads[id] = Some(g);
            continue;
        }
        let y = &tape.values[id];
        let x = |i: usize| &tape.values[node.inputs[i]];
        let s = y.shape();
        match node.kind {
            NodeKind::Input => unreachable!(),
            NodeKind::Unary { op, constant } => {
                let xs = x(0);
                let data = g
                    .data()
                    .iter()
                    .zip(xs.data())
                    .zip(y.data())
                    .map(|((&gv, &xv), &yv)| gv * unary_derivative(op, xv, yv, constant, graph.guards))
                    .collect();
                add_into(&mut grads[node.inputs[0]], Tensor::new(s, data)?);
            }
            NodeKind::Binary(op) => {
                let (a, b) = (x(0), x(1));
                let (ca, cb) = (a.shape().channel, b.shape().channel);
                let mut ga = Vec::with_capacity(s.len());
                let mut gb = Vec::with_capacity(s.len());
                for r in 0..s.rows() {
                    for c in 0..s.channel {
                        let av = a.data()[r * ca + if ca == 1 { 0 } else { c }];
                        let bv = b.data()[r * cb + if cb == 1 { 0 } else { c }];
                        let gv = g.data()[r * s.channel + c];
                        let (da, db) = match op {
                            PrimitiveOp::Add => (1.0, 1.0),
                            PrimitiveOp::Difference => (1.0, -1.0),
                            PrimitiveOp::Multiply => (bv, av),
                            PrimitiveOp::Divide => {
                                if graph.guards == Guards::On && bv == 0.0 {
                                    (0.0, 0.0)
                                } else {
                                    (1.0 / bv, -av / (bv * bv))
                                }
                            }
                            _ => unreachable!(),
                        };
                        ga.push(gv * da);
                        gb.push(gv * db);
                    }
                }
                add_into(&mut grads[node.inputs[0]], unbroadcast(ga, s, ca));
                add_into(&mut grads[node.inputs[1]], unbroadcast(gb, s, cb));
            }
            NodeKind::Reduce(op) => {
                let xs = x(0);
                let c = xs.shape().channel;
                let mut gx = vec![0.0; xs.shape().len()];
                for (r, row) in xs.data().chunks_exact(c).enumerate() {
                    let gv = g.data()[r];
                    let out = &mut gx[r * c..(r + 1) * c];
                    match op {
                        PrimitiveOp::RedMean => out.fill(gv / c as f64),
                        PrimitiveOp::RedSum => out.fill(gv),
                        PrimitiveOp::RedMin | PrimitiveOp::RedMax => {
                            let target = y.data()[r];
                            let k = row.iter().position(|&v| v == target).unwrap_or(0);
                            out[k] = gv;
                        }
                        PrimitiveOp::RedProd => {
                            let mut prefix = 1.0;
                            for (k, o) in out.iter_mut().enumerate() {
                                *o = prefix;
                                prefix *= row[k];
                            }
                            let mut suffix = 1.0;
                            for k in (0..c).rev() {
                                out[k] *= suffix * gv;
                                suffix *= row[k];
                            }
                        }
                        _ => unreachable!(),
                    }
                }
                add_into(&mut grads[node.inputs[0]], Tensor::new(xs.shape(), gx)?);
            }
            NodeKind::Cumulative(op) => {
                let xs = x(0);
                let mut gx = Tensor::zeros(s);
                for b in 0..s.batch {
                    for c in 0..s.channel {
                        let mut acc = 0.0;
                        for t in (0..s.seq).rev() {
                            let i = xs.index(b, t, c);
                            if op == PrimitiveOp::CumSum {
                                acc += g.data()[i];
                                gx.data_mut()[i] = acc;
                            } else {
                                // R_t = g_t + x_{t+1} R_{t+1}; grad_t = y_{t-1} R_t.
                                let next = if t + 1 < s.seq { xs.data()[xs.index(b, t + 1, c)] } else { 0.0 };
                                acc = g.data()[i] + next * acc;
                                let prefix = if t == 0 { 1.0 } else { y.data()[y.index(b, t - 1, c)] };
                                gx.data_mut()[i] = prefix * acc;
                            }
                        }
                    }
                }
                add_into(&mut grads[node.inputs[0]], gx);
            }
            NodeKind::MatMul(op) => {
                let (ga, gb) = matmul_backward(op, x(0), x(1), &g);
                add_into(&mut grads[node.inputs[0]], ga);
                add_into(&mut grads[node.inputs[1]], gb);
            }
            NodeKind::Mask => {
                let mut gm = g;
                tensor::mask_in_place(&mut gm);
                add_into(&mut grads[node.inputs[0]], gm);
            }
            NodeKind::Learned { op, param } => {
                let xs = x(0);
                let p = params[param];
                let c = s.channel;
                let gp = &mut pgrads[param];
                let mut gx = g.clone();
                for (r, grow) in g.data().chunks_exact(c).enumerate() {
                    for k in 0..c {
                        if op == PrimitiveOp::Scale {
                            gp[k] += grow[k] * xs.data()[r * c + k];
                            gx.data_mut()[r * c + k] = grow[k] * p[k];
                        } else {
                            gp[k] += grow[k];
                        }
                    }
                }
                add_into(&mut grads[node.inputs[0]], gx);
            }
            NodeKind::Conv { op, weight, bias } => {
                let xs = x(0);
                let (gw, gb) = two_mut(&mut pgrads, weight, bias);
                let gx = conv_backward(op, xs, params[weight], &g, gw, gb, graph.padding);
                add_into(&mut grads[node.inputs[0]], gx);
            }
            NodeKind::Depthwise { op, kernel } => {
                let xs = x(0);
                let gx = depthwise_backward(op, xs, params[kernel], &g, &mut pgrads[kernel], graph.padding);
                add_into(&mut grads[node.inputs[0]], gx);
            }
            NodeKind::Adapt => {
                let xs = x(0);
                let c = xs.shape().channel;
                let mut gx = Tensor::zeros(xs.shape());
                for (r, grow) in g.data().chunks_exact(s.channel).enumerate() {
                    for (j, &v) in grow.iter().enumerate() {
                        gx.data_mut()[r * c + j % c] += v;
                    }
                }
                add_into(&mut grads[node.inputs[0]], gx);
            }
            NodeKind::Concat => {
                let mut offset = 0;
                for &src in &node.inputs {
                    let c = tape.values[src].shape().channel;
                    let data = g
                        .data()
                        .chunks_exact(s.channel)
                        .flat_map(|row| row[offset..offset + c].iter().copied())
                        .collect();
                    add_into(&mut grads[src], Tensor::new(s.with_channel(c), data)?);
                    offset += c;
                }
            }
        }
    }
    let input = grads[0].take().unwrap_or_else(|| Tensor::zeros(tape.values[0].shape()));
    if !input.all_finite() || pgrads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(overflow("backward"));
    }
    Ok(Gradients { input, params: pgrads })
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

fn lower_triangle(t: &Tensor) -> Tensor {
    let mut m = t.clone();
    tensor::mask_in_place(&mut m);
    m
}

fn matmul_backward(op: PrimitiveOp, a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (sa, sb) = (a.shape(), b.shape());
    let mut ga = Tensor::zeros(sa);
    let mut gb = Tensor::zeros(sb);
    match op {
        PrimitiveOp::TMatMul => {
            // out[i, j] = a_i . b_j for j <= i.
            let gm = lower_triangle(g);
            let (s, c) = (sa.seq, sa.channel);
            for bi in 0..sa.batch {
                let gblk = &gm.data()[bi * s * s..(bi + 1) * s * s];
                let ab = &a.data()[bi * s * c..(bi + 1) * s * c];
                let bb = &b.data()[bi * s * c..(bi + 1) * s * c];
                gemm(s, s, c, gblk, (s, 1), bb, (c, 1), &mut ga.data_mut()[bi * s * c..(bi + 1) * s * c], false);
                gemm(s, s, c, gblk, (1, s), ab, (c, 1), &mut gb.data_mut()[bi * s * c..(bi + 1) * s * c], false);
            }
        }
        PrimitiveOp::MatMul => {
            // out[i] = sum_{j <= i} a[i, j] b_j.
            let (m, k, n) = (sa.seq, sa.channel, sb.channel);
            let am = lower_triangle(a);
            for bi in 0..sa.batch {
                let gblk = &g.data()[bi * m * n..(bi + 1) * m * n];
                let ab = &am.data()[bi * m * k..(bi + 1) * m * k];
                let bb = &b.data()[bi * k * n..(bi + 1) * k * n];
                gemm(m, n, k, gblk, (n, 1), bb, (1, n), &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k], false);
                gemm(k, m, n, ab, (1, k), gblk, (n, 1), &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n], false);
            }
            tensor::mask_in_place(&mut ga);
        }
        _ => unreachable!("{op} is not a matmul"),
    }
    (ga, gb)
}

fn conv_backward(
    op: PrimitiveOp,
    x: &Tensor,
    weight: &[f64],
    g: &Tensor,
    gw: &mut [f64],
    gbias: &mut [f64],
    padding: Padding,
) -> Tensor {
    let width = op.kernel_width().expect("convolution");
    let s = x.shape();
    let (cin, cout) = (s.channel, g.shape().channel);
    let off = padding.offset(width);
    let mut gx = Tensor::zeros(s);
    for row in g.data().chunks_exact(cout) {
        for (b, v) in gbias.iter_mut().zip(row) {
            *b += v;
        }
    }
    for b in 0..s.batch {
        for tap in 0..width {
            let shift = off + tap as isize;
            let t_lo = (-shift).max(0) as usize;
            let t_hi = (s.seq as isize - shift).min(s.seq as isize);
            if t_hi <= t_lo as isize {
                continue;
            }
            let rows = t_hi as usize - t_lo;
            let src0 = (t_lo as isize + shift) as usize;
            let xr = (b * s.seq + src0) * cin..(b * s.seq + src0 + rows) * cin;
            let gr = (b * s.seq + t_lo) * cout..(b * s.seq + t_lo + rows) * cout;
            let w = &weight[tap * cin * cout..(tap + 1) * cin * cout];
            let gwt = &mut gw[tap * cin * cout..(tap + 1) * cin * cout];
            gemm(cin, rows, cout, &x.data()[xr.clone()], (1, cin), &g.data()[gr.clone()], (cout, 1), gwt, true);
            gemm(rows, cout, cin, &g.data()[gr], (cout, 1), w, (1, cout), &mut gx.data_mut()[xr], true);
        }
    }
    gx
}

fn depthwise_backward(
    op: PrimitiveOp,
    x: &Tensor,
    kernel: &[f64],
    g: &Tensor,
    gk: &mut [f64],
    padding: Padding,
) -> Tensor {
    let width = op.kernel_width().expect("convolution");
    let s = x.shape();
    let c = s.channel;
    let off = padding.offset(width);
    let mut gx = Tensor::zeros(s);
    for b in 0..s.batch {
        for t in 0..s.seq {
            let grow = g.index(b, t, 0);
            for tap in 0..width {
                let src = t as isize + off + tap as isize;
                if src < 0 || src >= s.seq as isize {
                    continue;
                }
                let xrow = x.index(b, src as usize, 0);
                for k in 0..c {
                    let gv = g.data()[grow + k];
                    gk[tap * c + k] += gv * x.data()[xrow + k];
                    gx.data_mut()[xrow + k] += gv * kernel[tap * c + k];
                }
            }
        }
    }
    gx
}

/// Which side of every non-smooth point the forward pass landed on. Two
/// tapes with different signatures straddle a kink.
pub fn kink_signature(graph: &Graph, tape: &Tape) -> Vec<u32> {
    use PrimitiveOp::*;
    let on = graph.guards == Guards::On;
    let mut sig = Vec::new();
    for (id, node) in graph.nodes.iter().enumerate() {
        let x = |i: usize| &tape.values[node.inputs[i]];
        match node.kind {
            NodeKind::Unary { op, constant } => {
                let code = |v: f64| -> u32 {
                    match op {
                        Max | Min => u32::from(v > constant) + 2 * u32::from(v == constant),
                        Abs | Sign | AbsRoot | Recip | Log => {
                            u32::from(v > 0.0) + 2 * u32::from(v == 0.0) + 4 * u32::from(on && v.abs() < LOG_FLOOR)
                        }
                        _ => u32::from(on && v > EXP_CEILING),
                    }
                };
                if matches!(op, Max | Min | Abs | Sign | AbsRoot | Recip | Log | Exp) {
                    sig.extend(x(0).data().iter().map(|&v| code(v)));
                }
            }
            NodeKind::Binary(Divide) => {
                sig.extend(x(1).data().iter().map(|&v| u32::from(v == 0.0) + 2 * u32::from(v > 0.0)));
            }
            NodeKind::Reduce(RedMin | RedMax) => {
                let xs = x(0);
                let c = xs.shape().channel;
                for (r, row) in xs.data().chunks_exact(c).enumerate() {
                    let target = tape.values[id].data()[r];
                    let first = row.iter().position(|&v| v == target).unwrap_or(0);
                    let ties = row.iter().filter(|&&v| v == target).count();
                    sig.push(first as u32 * 2 + u32::from(ties > 1));
                }
            }
            _ => {}
        }
    }
    sig
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates sampled from the input and from each parameter tensor.
    pub samples: usize,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, samples: 12, floor: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates straddling a kink, or whose forward pass failed.
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Where the largest error was found: `None` for the input, else a
    /// parameter index, plus the flat coordinate.
    pub worst: Option<(Option<usize>, usize)>,
}

/// Compares analytic gradients with central differences of
/// `loss = sum(output * R)` for a fixed random `R`.
pub fn grad_check(
    cg: &CompiledGraph,
    input: &Tensor,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    let graph = &cg.graph;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tape = cg.forward_tape(input)?;
    let out_shape = tape.output(graph).shape();
    let r_data: Vec<f64> = (0..out_shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let r = Tensor::new(out_shape, r_data)?;
    let grads = backward(graph, &cg.param_refs(), &tape, &r)?;

    let mut params: Vec<Vec<f64>> = cg.params.clone();
    let mut x = input.clone();
    let mut report = GradCheckReport::default();

    let eval = |params: &[Vec<f64>], x: &Tensor| -> Option<(f64, Vec<u32>)> {
        let refs: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
        let t = execute(graph, &refs, x).ok()?;
        let loss = tensor::dot(t.output(graph).data(), r.data());
        Some((loss, kink_signature(graph, &t)))
    };

    let targets: Vec<Option<usize>> = std::iter::once(None).chain((0..params.len()).map(Some)).collect();
    for target in targets {
        let len = match target {
            None => x.shape().len(),
            Some(p) => params[p].len(),
        };
        let coords: Vec<usize> = if len <= cfg.samples {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, cfg.samples).into_vec()
        };
        for k in coords {
            let base = match target {
                None => x.data()[k],
                Some(p) => params[p][k],
            };
            let at = |v: f64, params: &mut Vec<Vec<f64>>, x: &mut Tensor| {
                match target {
                    None => x.data_mut()[k] = v,
                    Some(p) => params[p][k] = v,
                }
                eval(params, x)
            };
            let plus = at(base + cfg.eps, &mut params, &mut x);
            let minus = at(base - cfg.eps, &mut params, &mut x);
            at(base, &mut params, &mut x);
            let (Some((lp, sp)), Some((lm, sm))) = (plus, minus) else {
                report.skipped += 1;
                continue;
            };
            if sp != sm {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * cfg.eps);
            let analytic = match target {
                None => grads.input.data()[k],
                Some(p) => grads.params[p][k],
            };
            let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((target, k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guarded_points_have_zero_derivative() {
        use PrimitiveOp::*;
        assert_eq!(unary_derivative(Recip, 0.0, 0.0, 0.0, Guards::On), 0.0);
        assert_eq!(unary_derivative(Exp, 100.0, 80f64.exp(), 0.0, Guards::On), 0.0);
        assert_eq!(unary_derivative(AbsRoot, 0.0, 0.0, 0.0, Guards::On), 0.0);
        assert_eq!(unary_derivative(Log, 1e-13, LOG_FLOOR.ln(), 0.0, Guards::On), 0.0);
    }

    #[test]
    fn relu_derivative_is_one_sided() {
        assert_eq!(unary_derivative(PrimitiveOp::Max, 0.0, 0.0, 0.0, Guards::On), 0.0);
        assert_eq!(unary_derivative(PrimitiveOp::Max, 1e-9, 1e-9, 0.0, Guards::On), 1.0);
    }

    #[test]
    fn unbroadcast_sums_channels() {
        let t = unbroadcast(vec![1.0, 2.0, 3.0, 4.0], Shape::new(1, 2, 2), 1);
        assert_eq!(t.data(), &[3.0, 7.0]);
    }
}
