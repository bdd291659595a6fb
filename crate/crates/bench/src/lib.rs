//! Deterministic inputs shared by the benchmarks.

use archsearch_core::compiler::{self, CompileConfig, CompiledGraph};
use archsearch_core::stack::{build_stack, Batch, DecoderStack};
use archsearch_core::{Dna, Shape, Tensor};

/// A tensor of smoothly varying values in [-1, 1].
pub fn ramp(shape: Shape) -> Tensor {
    let n = shape.len();
    Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 2003) as f64 / 1001.5 - 1.0).collect()).expect("sized to shape")
}

pub fn config(unit: u64, seq: usize) -> CompileConfig {
    CompileConfig { seq, ..CompileConfig::default().with_unit(unit) }
}

pub fn block(dna: &Dna, unit: u64, seq: usize) -> CompiledGraph {
    compiler::compile(dna, &config(unit, seq), 0).expect("benchmark programs compile")
}

/// A stack over `vocab` tokens and one batch of `rows` sequences for it.
pub fn stack_and_batch(dna: &Dna, unit: u64, seq: usize, layers: usize, vocab: usize, rows: usize) -> (DecoderStack, Batch) {
    let stack = build_stack(&block(dna, unit, seq), layers, vocab, true, 1).expect("channel-preserving block");
    let tokens: Vec<u32> = (0..rows * (seq + 1)).map(|i| ((i * 31) % vocab) as u32).collect();
    let mut inputs = Vec::with_capacity(rows * seq);
    let mut targets = Vec::with_capacity(rows * seq);
    for r in tokens.chunks(seq + 1) {
        inputs.extend_from_slice(&r[..seq]);
        targets.extend_from_slice(&r[1..]);
    }
    (stack, Batch { batch: rows, inputs, targets })
}
