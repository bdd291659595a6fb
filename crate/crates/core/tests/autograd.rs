use archsearch_core::autograd::{grad_check, GradCheckConfig};
use archsearch_core::compiler::{self, CompileConfig};
use archsearch_core::seeds::{self, SEED_NAMES};
use archsearch_core::{Dna, Instruction, PrimitiveOp, Shape, Subprogram, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

fn small() -> CompileConfig {
    CompileConfig { seq: 8, ..CompileConfig::default().with_unit(1) }
}

fn single_op(op: PrimitiveOp) -> Dna {
    let proj = |a| Instruction::prim(PrimitiveOp::Conv1x1, a, a);
    let sub = Subprogram::new(vec![proj(0), proj(0), Instruction::prim(op, 2, 3), proj(4)]);
    Dna::new(vec![sub], [0.3, -0.2], [8, 8, 8, 8, 8, 8]).unwrap()
}

fn check(dna: &Dna, cfg: &CompileConfig, tol: f64, label: &str) {
    let cg = compiler::compile(dna, cfg, 7).unwrap();
    let x = random_input(Shape::new(2, cfg.seq, cfg.d_model()), 3);
    let gc = GradCheckConfig { samples: 24, ..GradCheckConfig::default() };
    let report = grad_check(&cg, &x, gc).unwrap();
    assert!(report.checked > 0, "{label}: nothing checked");
    assert!(report.max_rel_error < tol, "{label}: {report:?}");
}

#[test]
fn every_primitive_matches_finite_differences() {
    for op in PrimitiveOp::ALL {
        check(&single_op(op), &small(), 1e-4, op.name());
    }
}

#[test]
fn every_primitive_matches_with_guards_off() {
    let cfg = CompileConfig { guards: archsearch_core::Guards::Off, ..small() };
    for op in PrimitiveOp::ALL {
        let dna = single_op(op);
        let cg = compiler::compile(&dna, &cfg, 7).unwrap();
        let x = random_input(Shape::new(1, cfg.seq, cfg.d_model()), 5);
        if cg.forward(&x).is_err() {
            continue;
        }
        let report = grad_check(&cg, &x, GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_error < 1e-4, "{}: {report:?}", op.name());
    }
}

#[test]
fn library_seeds_match_finite_differences() {
    let cfg = CompileConfig { seq: 8, ..CompileConfig::default().with_unit(2) };
    for name in SEED_NAMES {
        check(&seeds::seed(name).unwrap(), &cfg, 1e-4, name);
    }
}
