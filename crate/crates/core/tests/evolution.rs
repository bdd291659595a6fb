use archsearch_core::compiler::{self, CompileConfig};
use archsearch_core::evolution::*;
use archsearch_core::seeds;
use archsearch_core::trainer::{Budget, Corpus, EvalConfig, FitnessRecord, Sizing, TrainConfig};
use archsearch_core::{Dna, Instruction, Op, PrimitiveOp, Subprogram};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn hash_cfg() -> CompileConfig {
    CompileConfig { seq: 8, ..CompileConfig::default().with_unit(1) }
}

fn tiny_eval() -> EvalConfig {
    let train = TrainConfig {
        batch_tokens: 32,
        seq: 8,
        budget: Budget::Steps(16),
        warmup: 4,
        eval_every: 0,
        eval_batches: 1,
        ..TrainConfig::default()
    };
    EvalConfig { sizing: Sizing::Unit(1), layers: 1, train, ..EvalConfig::default() }
}

fn tiny_search(candidates: u64, seed: u64) -> SearchConfig {
    SearchConfig {
        population: 4,
        tournament: 2,
        candidates,
        hurdles: 1,
        proxy_fraction: 1.0,
        seed,
        top_n: 3,
        ..SearchConfig::default()
    }
}

fn trajectory(log: &[LogEntry]) -> Vec<LogEntry> {
    log.iter().map(LogEntry::trajectory).collect()
}

#[test]
fn paper_hurdle_schedule() {
    let s = build_hurdles(4, 25200.0).unwrap();
    for (got, want) in s.thresholds.iter().zip([812.9, 2438.7, 5690.3, 12193.5]) {
        assert!((got - want).abs() < 0.1, "{got} vs {want}");
    }
    assert!((s.expected_budget() - 4064.5).abs() < 0.5);
    assert!(build_hurdles(0, 100.0).unwrap().is_empty());
    assert!(build_hurdles(60, 100.0).is_err());
    assert!(build_hurdles(2, 0.0).is_err());
}

#[test]
fn hurdle_bands_hold_equal_compute() {
    for n in 1..8 {
        let s = build_hurdles(n, 1000.0).unwrap();
        let mut edges = vec![0.0];
        edges.extend(&s.thresholds);
        edges.push(s.total);
        let first = edges[1];
        for (i, w) in edges.windows(2).enumerate() {
            let band = (w[1] - w[0]) / 2f64.powi(i as i32);
            assert!((band - first).abs() < 1e-9 * s.total, "n={n} band {i}");
        }
    }
}

#[test]
fn halving_gates_converge_to_the_expected_budget() {
    let s = build_hurdles(4, 25200.0).unwrap();
    let mut stats = HurdleStats::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 4000;
    let mut used = 0.0;
    for _ in 0..n {
        let mut spent = s.total;
        for (i, &t) in s.thresholds.iter().enumerate() {
            if !stats.gate(i, rng.random::<f64>()) {
                spent = t;
                break;
            }
        }
        used += spent;
    }
    let mean = used / n as f64;
    assert!((mean / (5.0 * s.total / 31.0) - 1.0).abs() < 0.05, "{mean}");
}

#[test]
fn median_gate_examples() {
    let mut s = HurdleStats::default();
    assert!(s.gate(0, 100.0));
    let mut s = HurdleStats::default();
    for f in [3.0, 4.0, 5.0] {
        s.record(0, f);
    }
    assert!(!s.gate(0, 4.5));
    assert_eq!(s.history[0].len(), 4);
    let mut tie = HurdleStats::default();
    for f in [1.0, 2.0, 3.0] {
        tie.record(0, f);
    }
    assert!(tie.would_pass(0, 2.0));
}

#[test]
fn single_instruction_delete_leaves_a_pass_through() {
    let dna = Dna::new(vec![Subprogram::new(vec![Instruction::prim(PrimitiveOp::Tanh, 1, 0)])], [0.0; 2], [1, 2, 4, 8, 12, 16])
        .unwrap();
    let child = apply_mutation(&dna, &Mutation::Delete { sub: 0, pos: 0 });
    assert_eq!(child.subprograms[0].instructions, vec![Instruction::new(Op::Identity, 0, 0)]);
}

#[test]
fn bank_fixed_point_is_a_noop() {
    let seed = seeds::transformer();
    for slot in 0..2 {
        let child = apply_mutation(&seed, &Mutation::MutateConstant { slot, x: 0.0, y: 0.0 });
        assert_eq!(child.constants, seed.constants);
        assert!(is_noop(&seed, &child, &hash_cfg()));
    }
}

#[test]
fn swapping_dead_instructions_is_a_noop() {
    let dna = Dna::new(
        vec![Subprogram::new(vec![
            Instruction::prim(PrimitiveOp::Tanh, 1, 1),
            Instruction::prim(PrimitiveOp::Sin, 0, 0),
            Instruction::prim(PrimitiveOp::Cos, 0, 0),
        ])],
        [0.0; 2],
        [1, 2, 4, 8, 12, 16],
    )
    .unwrap();
    let child = apply_mutation(&dna, &Mutation::Swap { sub: 0, a: 0, b: 1 });
    assert_ne!(child.subprograms, dna.subprograms);
    assert!(is_noop(&dna, &child, &hash_cfg()));
}

#[test]
fn mutate_never_returns_a_noop() {
    let seed = seeds::transformer();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut classes = std::collections::HashSet::new();
    for _ in 0..300 {
        let (child, m) = mutate(&seed, &mut rng, &hash_cfg()).unwrap();
        assert!(!is_noop(&seed, &child, &hash_cfg()), "{m:?}");
        classes.insert(m.class());
    }
    assert_eq!(classes.len(), MutationClass::ALL.len());
}

#[test]
fn recorded_mutations_replay() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dna = seeds::primer();
    for _ in 0..200 {
        let m = sample_mutation(&dna, &mut rng);
        let text = serde_json::to_string(&m).unwrap();
        let back: Mutation = serde_json::from_str(&text).unwrap();
        let child = apply_mutation(&dna, &back);
        assert_eq!(child, apply_mutation(&dna, &m));
        dna = child;
    }
}

#[test]
fn random_programs_match_seed_lengths() {
    let seed = seeds::transformer();
    let lengths: Vec<usize> = seed.subprograms.iter().map(Subprogram::len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let d = random_dna(&lengths, &mut rng);
        assert_eq!(d.subprograms.iter().map(Subprogram::len).collect::<Vec<_>>(), lengths);
        assert_eq!(Dna::parse(&d.serialize()).unwrap().serialize(), d.serialize());
    }
}

#[test]
fn zero_candidates_logs_only_the_population() {
    let r = run_search(&seeds::transformer(), &tiny_search(0, 1), &tiny_eval(), &Corpus::bundled(), None, false).unwrap();
    assert_eq!(r.log.len(), 4);
    assert!(r.log.iter().all(|e| e.parent.is_none() && e.mutation.is_none()));
    assert_eq!(r.population.len(), 4);
}

#[test]
fn search_is_reproducible_from_its_seed() {
    let corpus = Corpus::bundled();
    let a = run_search(&seeds::transformer(), &tiny_search(6, 7), &tiny_eval(), &corpus, None, false).unwrap();
    let b = run_search(&seeds::transformer(), &tiny_search(6, 7), &tiny_eval(), &corpus, None, false).unwrap();
    assert_eq!(trajectory(&a.log), trajectory(&b.log));
    let ids: Vec<u64> = a.log.iter().map(|e| e.id).collect();
    assert_eq!(ids, (0..10).collect::<Vec<_>>());
    assert!(a.log[4..].iter().all(|e| e.parent.is_some() && e.mutation.is_some()));
    let c = run_search(&seeds::transformer(), &tiny_search(6, 8), &tiny_eval(), &corpus, None, false).unwrap();
    assert_ne!(trajectory(&a.log), trajectory(&c.log));
}

#[test]
fn parallel_workers_are_reproducible() {
    let corpus = Corpus::bundled();
    let cfg = SearchConfig { workers: 2, ..tiny_search(4, 2) };
    let a = run_search(&seeds::transformer(), &cfg, &tiny_eval(), &corpus, None, false).unwrap();
    let b = run_search(&seeds::transformer(), &cfg, &tiny_eval(), &corpus, None, false).unwrap();
    assert_eq!(trajectory(&a.log), trajectory(&b.log));
}

#[test]
fn log_on_disk_matches_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let files = SearchFiles::in_dir(dir.path());
    let r = run_search(&seeds::transformer(), &tiny_search(3, 4), &tiny_eval(), &Corpus::bundled(), Some(&files), false)
        .unwrap();
    assert_eq!(read_log(&files.log).unwrap(), r.log);
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(&files.checkpoint).unwrap()).unwrap();
    assert_eq!(ck.log_len, r.log.len());
    assert_eq!(ck.population, r.population);
}

#[test]
fn resume_continues_without_gaps() {
    let corpus = Corpus::bundled();
    let seed = seeds::transformer();
    let whole = run_search(&seed, &tiny_search(6, 9), &tiny_eval(), &corpus, None, false).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let files = SearchFiles::in_dir(dir.path());
    run_search(&seed, &tiny_search(3, 9), &tiny_eval(), &corpus, Some(&files), false).unwrap();
    // A line written after the last checkpoint is discarded on resume.
    let mut text = std::fs::read_to_string(&files.log).unwrap();
    let last = text.lines().last().unwrap().to_string();
    text.push_str(&last);
    text.push('\n');
    std::fs::write(&files.log, text).unwrap();

    let resumed = run_search(&seed, &tiny_search(6, 9), &tiny_eval(), &corpus, Some(&files), true).unwrap();
    assert_eq!(trajectory(&resumed.log), trajectory(&whole.log));
    assert_eq!(trajectory(&read_log(&files.log).unwrap()), trajectory(&whole.log));
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let files = SearchFiles::in_dir(dir.path());
    let corpus = Corpus::bundled();
    run_search(&seeds::transformer(), &tiny_search(0, 1), &tiny_eval(), &corpus, Some(&files), false).unwrap();
    let other = SearchConfig { tournament: 3, ..tiny_search(0, 1) };
    assert!(matches!(
        run_search(&seeds::transformer(), &other, &tiny_eval(), &corpus, Some(&files), true),
        Err(EvolutionError::Checkpoint(_))
    ));
    assert!(run_search(&seeds::transformer(), &tiny_search(0, 1), &tiny_eval(), &corpus, None, true).is_err());
}

#[test]
fn random_initialization_uses_random_programs() {
    let seed = seeds::transformer();
    let cfg = SearchConfig { init: InitMode::Random, ..tiny_search(0, 3) };
    let r = run_search(&seed, &cfg, &tiny_eval(), &Corpus::bundled(), None, false).unwrap();
    let seed_hash = compiler::canonical_hash(&seed, &hash_cfg()).ok();
    assert!(r.log.iter().all(|e| e.hash != seed_hash));
}

#[test]
fn invalid_configs_are_rejected() {
    let corpus = Corpus::bundled();
    for cfg in [
        SearchConfig { population: 0, ..tiny_search(1, 0) },
        SearchConfig { tournament: 5, ..tiny_search(1, 0) },
        SearchConfig { proxy_fraction: 0.0, ..tiny_search(1, 0) },
        SearchConfig { hurdles: 10, ..tiny_search(1, 0) },
    ] {
        assert!(run_search(&seeds::transformer(), &cfg, &tiny_eval(), &corpus, None, false).is_err(), "{cfg:?}");
    }
}

#[test]
fn top_n_prefers_trained_distinct_graphs() {
    let entry = |id: u64, fitness: f64, degenerate: bool, hash: u64| LogEntry {
        id,
        parent: None,
        mutation: None,
        hurdle: 0,
        fitness,
        degenerate,
        steps: 1,
        params: 1,
        hash: Some(hash),
        dna: String::new(),
        started_unix: 0.0,
        finished_unix: 0.0,
        seconds: 0.0,
        error: None,
    };
    let log = [entry(0, 3.0, false, 1), entry(1, 1.0, true, 2), entry(2, 2.0, false, 1), entry(3, 2.5, false, 3)];
    let ids: Vec<u64> = top_n(&log, 3).iter().map(|e| e.id).collect();
    assert_eq!(ids, vec![2, 3, 1]);
}

#[test]
fn large_tournaments_find_the_best() {
    let mut p = Population::new(5);
    for (i, f) in [3.0, 1.0, 4.0, 1.5, 9.0].into_iter().enumerate() {
        let mut r = FitnessRecord::degenerate(i as u64, f, "");
        r.loss = f;
        p.insert(Member { id: i as u64, dna: String::new(), record: r });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Missing member 1 in 200 draws has probability 0.8^200.
    assert_eq!(p.tournament(200, &mut rng).id, 1);
    let mut seen = [false; 5];
    for _ in 0..200 {
        seen[p.tournament(1, &mut rng).id as usize] = true;
    }
    assert!(seen.iter().all(|&s| s));
}

proptest! {
    #[test]
    fn population_keeps_the_most_recent(capacity in 1usize..20, inserted in 0u64..60) {
        let mut p = Population::new(capacity);
        for id in 0..inserted {
            p.insert(Member { id, dna: String::new(), record: FitnessRecord::degenerate(id, 1.0, "") });
            prop_assert!(p.len() <= capacity);
        }
        let ids: Vec<u64> = p.members.iter().map(|m| m.id).collect();
        let start = inserted.saturating_sub(capacity as u64);
        prop_assert_eq!(ids, (start..inserted).collect::<Vec<_>>());
    }

    #[test]
    fn mutation_chains_stay_valid(seed in any::<u64>(), steps in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dna = seeds::transformer();
        for _ in 0..steps {
            let m = sample_mutation(&dna, &mut rng);
            dna = apply_mutation(&dna, &m);
            let text = dna.serialize();
            let back = Dna::parse(&text).unwrap();
            prop_assert_eq!(back.serialize(), text);
            prop_assert!(dna.constants.iter().all(|c| c.abs() <= 1e30));
        }
    }

    #[test]
    fn schedules_are_strictly_increasing(n in 0usize..20, total in 1e-3f64..1e9) {
        let s = build_hurdles(n, total).unwrap();
        prop_assert_eq!(s.len(), n);
        prop_assert!(s.thresholds.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.thresholds.iter().all(|&t| t > 0.0 && t < total));
    }
}
