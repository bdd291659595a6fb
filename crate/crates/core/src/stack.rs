//! Decoder-only language model built from `L` independent copies of a block.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd;
use crate::compiler::{execute, CompileError, CompiledGraph, Graph, StackShape};
use crate::tensor::{gemm, Shape, Tensor, TensorError};

/// Standard deviation of embedding initialization.
pub const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub block: Arc<Graph>,
    pub layers: usize,
    pub vocab: usize,
    pub tied: bool,
    /// Embedding, positional table, optional untied output projection, then
    /// each layer's block parameters in graph order.
    pub params: Vec<Vec<f64>>,
}

const EMB: usize = 0;
const POS: usize = 1;

/// Wraps `L` copies of `block` between a token embedding and a vocabulary
/// projection. Layer 0 reuses the block's parameters; the others are drawn
/// from `seed`.
pub fn build_stack(
    block: &CompiledGraph,
    layers: usize,
    vocab: usize,
    tied: bool,
    seed: u64,
) -> Result<DecoderStack, CompileError> {
    let g = &block.graph;
    let (input, output) = (g.nodes[0].width, g.output_width());
    if input != g.d_model || output != g.d_model {
        return Err(CompileError::NotChannelPreserving { input, output });
    }
    if layers == 0 || vocab == 0 {
        return Err(CompileError::Shape { site: "stack".into(), detail: "layers and vocab must be positive".into() });
    }
    let d = g.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, EMBED_STD).expect("positive std");
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
    let mut params = vec![draw(vocab * d), draw(g.seq * d)];
    if !tied {
        params.push(draw(d * vocab));
    }
    params.extend(block.params.iter().cloned());
    for l in 1..layers {
        let copy = g.instantiate(seed.wrapping_add(l as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        params.extend(copy.params);
    }
    Ok(DecoderStack { block: Arc::clone(g), layers, vocab, tied, params })
}

/// Tokens for one batch: `batch` rows of `seq` inputs and their next-token
/// targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

impl DecoderStack {
    pub fn d_model(&self) -> usize {
        self.block.d_model
    }

    pub fn seq(&self) -> usize {
        self.block.seq
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn shape(&self) -> StackShape {
        StackShape { layers: self.layers, vocab: self.vocab, tied: self.tied }
    }

    fn layer_base(&self) -> usize {
        if self.tied { 2 } else { 3 }
    }

    fn layer_params(&self, l: usize) -> Vec<&[f64]> {
        let n = self.block.params.len();
        let base = self.layer_base() + l * n;
        self.params[base..base + n].iter().map(Vec::as_slice).collect()
    }

    fn check(&self, batch: &Batch) -> Result<(), TensorError> {
        let want = batch.batch * self.seq();
        if batch.batch == 0 || batch.inputs.len() != want || batch.targets.len() != want {
            return Err(TensorError::ShapeMismatch {
                op: "stack",
                detail: format!("{} inputs for batch {} at seq {}", batch.inputs.len(), batch.batch, self.seq()),
            });
        }
        if let Some(&t) = batch.inputs.iter().chain(&batch.targets).find(|&&t| t as usize >= self.vocab) {
            return Err(TensorError::ContractViolation(format!("token {t} outside vocab {}", self.vocab)));
        }
        Ok(())
    }

    fn embed(&self, batch: &Batch) -> Tensor {
        let (d, s) = (self.d_model(), self.seq());
        let mut data = Vec::with_capacity(batch.inputs.len() * d);
        for (i, &tok) in batch.inputs.iter().enumerate() {
            let e = &self.params[EMB][tok as usize * d..(tok as usize + 1) * d];
            let p = &self.params[POS][(i % s) * d..(i % s + 1) * d];
            data.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
        Tensor::new(Shape::new(batch.batch, s, d), data).expect("non-empty batch")
    }

    /// `h W` where `W` is `[d, V]`: the transposed embedding when tied.
    fn project(&self, h: &Tensor) -> Vec<f64> {
        let (d, v, rows) = (self.d_model(), self.vocab, h.shape().rows());
        let mut logits = vec![0.0; rows * v];
        let strides = if self.tied { (1, d) } else { (v, 1) };
        gemm(rows, d, v, h.data(), (d, 1), &self.params[self.out_index()], strides, &mut logits, false);
        logits
    }

    fn out_index(&self) -> usize {
        if self.tied { EMB } else { 2 }
    }

    /// Logits of shape `[batch, seq, vocab]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor, TensorError> {
        self.check(batch)?;
        let mut h = self.embed(batch);
        for l in 0..self.layers {
            let tape = execute(&self.block, &self.layer_params(l), &h)?;
            h = tape.values[self.block.output].clone();
        }
        let logits = self.project(&h);
        Tensor::new(h.shape().with_channel(self.vocab), logits)
    }

    /// Mean next-token cross-entropy in nats.
    pub fn loss(&self, batch: &Batch) -> Result<f64, TensorError> {
        let logits = self.logits(batch)?;
        let (loss, _) = cross_entropy(logits.data(), &batch.targets, self.vocab, false);
        finite(loss)
    }

    /// Loss and the gradient of every parameter tensor.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<Vec<f64>>), TensorError> {
        self.check(batch)?;
        let (d, v, s) = (self.d_model(), self.vocab, self.seq());
        let mut tapes = Vec::with_capacity(self.layers);
        let mut h = self.embed(batch);
        for l in 0..self.layers {
            let tape = execute(&self.block, &self.layer_params(l), &h)?;
            h = tape.values[self.block.output].clone();
            tapes.push(tape);
        }
        let rows = h.shape().rows();
        let logits = self.project(&h);
        let (loss, glogits) = cross_entropy(&logits, &batch.targets, v, true);
        let loss = finite(loss)?;

        let mut grads: Vec<Vec<f64>> = self.params.iter().map(|p| vec![0.0; p.len()]).collect();
        // Output projection: logits = h W.
        let out = self.out_index();
        if self.tied {
            // W = E^T, so dE = dlogits^T h, stored [V, d].
            gemm(v, rows, d, &glogits, (1, v), h.data(), (d, 1), &mut grads[EMB], true);
        } else {
            gemm(d, rows, v, h.data(), (1, d), &glogits, (v, 1), &mut grads[out], true);
        }
        let mut gh = vec![0.0; rows * d];
        let w_strides = if self.tied { (d, 1) } else { (1, v) };
        gemm(rows, v, d, &glogits, (v, 1), &self.params[out], w_strides, &mut gh, false);
        let mut g = Tensor::new(h.shape(), gh)?;

        let n = self.block.params.len();
        for l in (0..self.layers).rev() {
            let gr = autograd::backward(&self.block, &self.layer_params(l), &tapes[l], &g)?;
            let base = self.layer_base() + l * n;
            for (dst, src) in grads[base..base + n].iter_mut().zip(gr.params) {
                *dst = src;
            }
            g = gr.input;
        }
        for (i, (&tok, row)) in batch.inputs.iter().zip(g.data().chunks_exact(d)).enumerate() {
            let e = &mut grads[EMB][tok as usize * d..(tok as usize + 1) * d];
            for (a, b) in e.iter_mut().zip(row) {
                *a += b;
            }
            let p = &mut grads[POS][(i % s) * d..(i % s + 1) * d];
            for (a, b) in p.iter_mut().zip(row) {
                *a += b;
            }
        }
        Ok((loss, grads))
    }
}

fn finite(loss: f64) -> Result<f64, TensorError> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(TensorError::NumericOverflow { op: "cross_entropy" })
    }
}

/// Mean softmax cross-entropy over rows of `logits`, optionally with the
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &[f64], targets: &[u32], vocab: usize, with_grad: bool) -> (f64, Vec<f64>) {
    let n = targets.len();
    let mut grad = if with_grad { vec![0.0; logits.len()] } else { Vec::new() };
    let mut total = 0.0;
    for (r, (row, &t)) in logits.chunks_exact(vocab).zip(targets).enumerate() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[t as usize];
        if with_grad {
            let gr = &mut grad[r * vocab..(r + 1) * vocab];
            for (gv, x) in gr.iter_mut().zip(row) {
                *gv = (x - lse).exp() / n as f64;
            }
            gr[t as usize] -= 1.0 / n as f64;
        }
    }
    (total / n as f64, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let (loss, grad) = cross_entropy(&[0.0; 8], &[1, 3], 4, true);
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!((grad[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
    }
}
