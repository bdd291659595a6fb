use archsearch_core::compiler::{self, CompileConfig};
use archsearch_core::dna::{parse_listing, render_listing, Metadata, DIM_VOCAB};
use archsearch_core::evolution::random_dna;
use archsearch_core::seeds;
use archsearch_core::{Dna, DnaError, Instruction, Op, PrimitiveOp, Subprogram};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lengths_for(seed: u64) -> Vec<usize> {
    (0..1 + seed % 4).map(|i| 1 + ((seed >> (8 * i)) % 12) as usize).collect()
}

#[test]
fn thousand_random_programs_round_trip() {
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dna = random_dna(&lengths_for(seed), &mut rng);
        dna.meta = Metadata { id: seed, parent: seed.checked_sub(1), birth: seed * 2, lineage_seed: !seed };
        let text = dna.serialize();
        let back = Dna::parse(&text).unwrap();
        assert_eq!(back, dna, "seed {seed}");
        assert_eq!(back.serialize(), text);
    }
}

#[test]
fn seeds_round_trip_and_validate() {
    for name in seeds::SEED_NAMES {
        let dna = seeds::seed(name).unwrap();
        dna.validate().unwrap();
        assert_eq!(Dna::parse(&dna.serialize()).unwrap(), dna, "{name}");
    }
}

#[test]
fn calls_must_point_to_higher_subprograms() {
    let sub = |op| Subprogram::new(vec![Instruction::new(op, 0, 1)]);
    let dims = [1, 2, 4, 8, 12, 16];
    assert!(Dna::new(vec![sub(Op::Call(1)), sub(Op::Prim(PrimitiveOp::Add))], [0.0; 2], dims).is_ok());
    for bad in [vec![sub(Op::Call(0))], vec![sub(Op::Call(1)), sub(Op::Call(0))], vec![sub(Op::Call(2))]] {
        assert!(matches!(Dna::new(bad, [0.0; 2], dims), Err(DnaError::Invalid(_))));
    }
}

#[test]
fn future_references_are_rejected_by_the_parser() {
    let text = seeds::transformer().serialize();
    let broken = text.replacen("(2)  CALL_S5                In0: 0", "(2)  CALL_S5                In0: 9", 1);
    assert_ne!(broken, text);
    assert!(Dna::parse(&broken).is_err());
}

#[test]
fn banks_are_fixed_size_and_in_vocabulary() {
    let text = seeds::transformer().serialize();
    let extra_dim = text.replacen("dims: ", "dims: 4 ", 1);
    assert!(Dna::parse(&extra_dim).is_err());
    let bad_dim = text.replacen("dims: 2", "dims: 3", 1);
    assert!(!DIM_VOCAB.contains(&3));
    assert!(Dna::parse(&bad_dim).is_err());
}

#[test]
fn unknown_opcode_names_its_line() {
    let text = seeds::transformer().serialize().replacen("DENSE", "DENSER", 1);
    let line = text.lines().position(|l| l.contains("DENSER")).unwrap() + 1;
    match Dna::parse(&text) {
        Err(DnaError::Parse { line: got, .. }) => assert_eq!(got, line),
        other => panic!("{other:?}"),
    }
}

#[test]
fn flattened_listing_round_trips() {
    let cfg = CompileConfig::default();
    for dna in [seeds::transformer(), seeds::primer()] {
        let listing = render_listing(&compiler::flatten(&dna, &cfg).unwrap());
        let parsed = parse_listing(&listing).unwrap();
        assert_eq!(render_listing(&compiler::flatten(&parsed.dna, &cfg).unwrap()), listing);
    }
}

proptest! {
    #[test]
    fn serialization_is_an_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dna = random_dna(&lengths_for(seed), &mut rng);
        let text = dna.serialize();
        prop_assert_eq!(Dna::parse(&text).unwrap(), dna.clone());
        prop_assert_eq!(text, dna.clone().serialize());
    }

    #[test]
    fn ignored_fields_survive(seed in any::<u64>(), c in 0usize..2, d in 0usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dna = random_dna(&[3], &mut rng);
        let mut other = dna.clone();
        let ins = &mut other.subprograms[0].instructions[0];
        ins.const_idx = c;
        ins.dim_idx = d;
        let back = Dna::parse(&other.serialize()).unwrap();
        prop_assert_eq!(back.subprograms[0].instructions[0].const_idx, c);
        prop_assert_eq!(back.subprograms[0].instructions[0].dim_idx, d);
        prop_assert_eq!(other == dna, other.serialize() == dna.serialize());
    }
}
