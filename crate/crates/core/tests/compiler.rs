use std::sync::Arc;

use archsearch_core::compiler::{self, verify_causality, CompileConfig, NodeKind, ResizeError, StackShape};
use archsearch_core::evolution::{apply_mutation, random_dna, random_instruction, sample_mutation, Mutation};
use archsearch_core::seeds;
use archsearch_core::tensor::Padding;
use archsearch_core::{Dna, Instruction, Op, PrimitiveOp, Shape, Subprogram, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn small() -> CompileConfig {
    CompileConfig { seq: 8, ..CompileConfig::default().with_unit(1) }
}

fn input(cfg: &CompileConfig, seed: u64) -> Tensor {
    let shape = Shape::new(2, cfg.seq, cfg.d_model());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(shape, (0..shape.len()).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

fn one_sub(ins: Vec<Instruction>) -> Dna {
    Dna::new(vec![Subprogram::new(ins)], [0.5, 2.0], [1, 2, 4, 8, 12, 16]).unwrap()
}

/// Fuzzed programs: the seed after a few random mutations.
fn fuzz_program(seed: u64) -> Dna {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dna = seeds::transformer();
    for _ in 0..1 + seed % 4 {
        dna = apply_mutation(&dna, &sample_mutation(&dna, &mut rng));
    }
    dna
}

/// Reference inliner: copies every called subprogram into subprogram 0.
fn inline(dna: &Dna) -> Dna {
    fn emit(dna: &Dna, s: usize, inputs: [usize; 2], out: &mut Vec<Instruction>) -> usize {
        let mut env = inputs.to_vec();
        for ins in &dna.subprograms[s].instructions {
            let (a, b) = (env[ins.in1], env[ins.in2]);
            let at = match ins.op {
                Op::Call(t) => emit(dna, t, [a, b], out),
                _ => {
                    out.push(Instruction { in1: a, in2: b, ..*ins });
                    out.len() + 1
                }
            };
            env.push(at);
        }
        *env.last().expect("non-empty")
    }
    let mut out = Vec::new();
    let last = emit(dna, 0, [0, 1], &mut out);
    if last != out.len() + 1 {
        out.push(Instruction::new(Op::Identity, last, last));
    }
    let mut flat = Dna::new(vec![Subprogram::new(out)], dna.constants, dna.dims).unwrap();
    flat.meta = dna.meta;
    flat
}

#[test]
fn seed_and_primer_are_causal() {
    for (name, dna) in [("transformer", seeds::transformer()), ("primer", seeds::primer())] {
        let g = compiler::compile(&dna, &small(), 1).unwrap();
        let r = verify_causality(&g, 100, 2);
        assert!(r.passed(), "{name}: {:?}", r.violations.first());
        assert_eq!(r.skipped, 0);
    }
}

#[test]
fn fuzzed_programs_are_causal() {
    let mut checked = 0;
    for seed in 0.. {
        let Ok(g) = compiler::compile(&fuzz_program(seed), &small(), seed) else { continue };
        let r = verify_causality(&g, 100, seed);
        assert!(r.passed(), "program {seed}: {:?}", r.violations.first());
        checked += 1;
        if checked == 50 {
            break;
        }
    }
}

#[test]
fn centered_conv_is_caught() {
    let dna = one_sub(vec![Instruction::prim(PrimitiveOp::DConv3x1, 0, 0).dim(3)]);
    let cfg = CompileConfig { padding: Padding::Centered, ..small() };
    let r = verify_causality(&compiler::compile(&dna, &cfg, 0).unwrap(), 20, 0);
    assert!(!r.passed());
    for v in &r.violations {
        assert!(v.leaked_to + 2 >= v.position && v.leaked_to < v.position, "{v:?}");
        assert!(v.provenance.contains("DEPTHWISE_CONV_3X1"), "{}", v.provenance);
    }
}

#[test]
fn compilation_is_deterministic() {
    for dna in [seeds::transformer(), seeds::primer()] {
        let a = compiler::compile(&dna, &small(), 9).unwrap();
        let b = compiler::compile(&dna, &small(), 9).unwrap();
        assert_eq!(a.graph.nodes, b.graph.nodes);
        assert_eq!(a.params, b.params);
        assert_ne!(compiler::compile(&dna, &small(), 10).unwrap().params, a.params);
    }
}

#[test]
fn primer_heads_pass_through_depthwise_convs() {
    let g = compiler::lower(&seeds::primer(), &small()).unwrap();
    let convs = g.nodes_with_op(PrimitiveOp::DConv3x1);
    assert!(!convs.is_empty());
    for c in convs {
        let src = g.nodes[c].inputs[0];
        assert!(matches!(g.nodes[src].kind, NodeKind::Conv { op: PrimitiveOp::Conv1x1, .. }), "{}", g.dump());
    }
}

#[test]
fn branch_copies_concatenate_with_distinct_weights() {
    for b in [2u32, 4, 8] {
        let dna = one_sub(vec![Instruction::prim(PrimitiveOp::Conv1x1, 0, 0).dim(1).branch(b)]);
        let g = Arc::new(compiler::lower(&dna, &small()).unwrap());
        let merge = g.nodes.iter().find(|n| matches!(n.kind, NodeKind::Concat)).unwrap();
        assert_eq!(merge.width, b as usize * 2);
        let c = g.instantiate(0);
        let weights: Vec<&Vec<f64>> = c.params.iter().filter(|p| p.len() > 2).collect();
        assert_eq!(weights.len(), b as usize);
        assert!(weights.windows(2).all(|w| w[0] != w[1]));
    }
}

#[test]
fn shared_dims_move_together() {
    let dna = one_sub(vec![
        Instruction::prim(PrimitiveOp::Conv1x1, 0, 0).dim(2),
        Instruction::prim(PrimitiveOp::Conv1x1, 0, 0).dim(2),
        Instruction::prim(PrimitiveOp::Add, 2, 3),
    ]);
    let widths = |d: &Dna| -> Vec<usize> {
        let g = compiler::lower(d, &small()).unwrap();
        g.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Conv { .. })).map(|n| n.width).collect()
    };
    assert_eq!(widths(&dna), vec![4, 4]);
    let mut wider = dna.clone();
    wider.dims[2] = 16;
    assert_eq!(widths(&wider), vec![16, 16]);
}

#[test]
fn hash_ignores_instruction_order_of_independent_work() {
    let a = one_sub(vec![
        Instruction::prim(PrimitiveOp::Tanh, 0, 0),
        Instruction::prim(PrimitiveOp::Sin, 0, 0),
        Instruction::prim(PrimitiveOp::Add, 2, 3),
    ]);
    let b = one_sub(vec![
        Instruction::prim(PrimitiveOp::Sin, 0, 0),
        Instruction::prim(PrimitiveOp::Tanh, 0, 0),
        Instruction::prim(PrimitiveOp::Add, 3, 2),
    ]);
    assert_eq!(compiler::canonical_hash(&a, &small()).unwrap(), compiler::canonical_hash(&b, &small()).unwrap());
}

#[test]
fn hash_tracks_live_constants_only() {
    let live = one_sub(vec![Instruction::prim(PrimitiveOp::ConstMul, 0, 0).constant(1)]);
    let mut changed = live.clone();
    changed.constants[1] = 3.0;
    assert_ne!(compiler::canonical_hash(&live, &small()).unwrap(), compiler::canonical_hash(&changed, &small()).unwrap());
    let mut unused = live.clone();
    unused.constants[0] = -7.0;
    assert_eq!(compiler::canonical_hash(&live, &small()).unwrap(), compiler::canonical_hash(&unused, &small()).unwrap());
}

#[test]
fn dead_field_edit_keeps_the_hash() {
    let dna = one_sub(vec![
        Instruction::prim(PrimitiveOp::Sin, 0, 0),
        Instruction::prim(PrimitiveOp::Tanh, 0, 0),
    ]);
    let mut edited = dna.clone();
    edited.subprograms[0].instructions[0].op = Op::Prim(PrimitiveOp::Cos);
    edited.subprograms[0].instructions[0].branching = 4;
    assert_eq!(compiler::canonical_hash(&dna, &small()).unwrap(), compiler::canonical_hash(&edited, &small()).unwrap());
}

#[test]
fn seed_resizes_to_search_and_desk_budgets() {
    let cfg = CompileConfig::default();
    let shape = StackShape { layers: 6, vocab: 32_000, tied: true };
    let r = compiler::resize_to_budget(&seeds::transformer(), 32_000_000, 38_000_000, &cfg, &shape).unwrap();
    assert!((32_000_000..=38_000_000).contains(&r.params), "{r:?}");
    let desk = StackShape { layers: 2, vocab: 256, tied: true };
    let r = compiler::resize_to_budget(&seeds::transformer(), 500_000, 1_500_000, &cfg, &desk).unwrap();
    let g = compiler::lower(&seeds::transformer(), &cfg.with_unit(r.scale_unit)).unwrap();
    assert_eq!(r.params, desk.total_params(g.param_count(), g.d_model, cfg.seq));
    assert!(matches!(
        compiler::resize_to_budget(&seeds::transformer(), 10, 20, &cfg, &desk),
        Err(ResizeError::Infeasible { .. })
    ));
}

/// Branched calls have no single-subprogram equivalent, so they are
/// flattened to one copy before comparing.
fn unbranch_calls(dna: &mut Dna) {
    for sub in &mut dna.subprograms {
        for ins in &mut sub.instructions {
            if matches!(ins.op, Op::Call(_)) {
                ins.branching = 1;
            }
        }
    }
}

#[test]
fn inliner_matches_on_library_seeds() {
    for name in seeds::SEED_NAMES {
        let mut dna = seeds::seed(name).unwrap();
        unbranch_calls(&mut dna);
        let flat = inline(&dna);
        assert_eq!(flat.subprograms.len(), 1);
        let cfg = small();
        assert_eq!(
            compiler::canonical_hash(&dna, &cfg).unwrap(),
            compiler::canonical_hash(&flat, &cfg).unwrap(),
            "{name}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn dead_instructions_change_nothing(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dna = fuzz_program(seed);
        let cfg = small();
        let before = compiler::compile(&dna, &cfg, 5);
        prop_assume!(before.is_ok());
        let before = before.unwrap();
        // Inserting before the final instruction never creates a reader.
        let sub = (seed % dna.subprograms.len() as u64) as usize;
        let len = dna.subprograms[sub].len();
        let pos = (seed / 7 % len as u64) as usize;
        let ins = random_instruction(sub, pos, dna.subprograms.len(), &mut rng);
        let padded = apply_mutation(&dna, &Mutation::Insert { sub, pos, instruction: (&ins).into() });
        prop_assert_eq!(padded.instruction_count(), dna.instruction_count() + 1);
        let after = compiler::compile(&padded, &cfg, 5).unwrap();
        prop_assert_eq!(before.graph.canonical_hash(), after.graph.canonical_hash());
        let x = input(&cfg, seed);
        match (before.forward(&x), after.forward(&x)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(bits(&a), bits(&b)),
            (Err(_), Err(_)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn inlining_preserves_outputs(seed in any::<u64>(), subs in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lengths: Vec<usize> = (0..subs).map(|i| 2 + (seed as usize >> (4 * i)) % 5).collect();
        let mut dna = random_dna(&lengths, &mut rng);
        unbranch_calls(&mut dna);
        let cfg = small();
        let nested = compiler::compile(&dna, &cfg, 3);
        prop_assume!(nested.is_ok());
        let nested = nested.unwrap();
        let flat = compiler::compile(&inline(&dna), &cfg, 3).unwrap();
        let x = input(&cfg, seed);
        if let (Ok(a), Ok(b)) = (nested.forward(&x), flat.forward(&x)) {
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!(p == q || (p - q).abs() <= 1e-12 * p.abs().max(q.abs()), "{} vs {}", p, q);
            }
        }
    }
}
