mod common;
#[path = "common/oracle.rs"]
mod oracle;

use std::fs;

use mvm::instrument::{analyze_loops, instrument_program, InstrumentError};
use mvm::isa::{decode_program, emit_assembly, encode_program, parse_assembly, verify, Instr, Rule};

#[test]
fn assembly_round_trips() {
    for name in common::all() {
        let p = common::original(&name);
        let again = parse_assembly(&emit_assembly(&p)).unwrap();
        assert_eq!(p, again, "{name}");
        let q = common::instrumented(&name);
        assert_eq!(q, parse_assembly(&emit_assembly(&q)).unwrap(), "{name} instrumented");
    }
}

#[test]
fn producer_consumer_has_the_expected_methods() {
    let p = common::original("prodcons");
    for m in ["main", "producer", "consumer"] {
        assert!(p.methods.contains_key(m), "missing {m}");
    }
}

#[test]
fn encoding_is_canonical() {
    for name in common::all() {
        for p in [common::original(&name), common::instrumented(&name)] {
            let bytes = encode_program(&p);
            let back = decode_program(&bytes).unwrap();
            assert_eq!(back, p, "{name}");
            assert_eq!(encode_program(&back), bytes, "{name}");
        }
    }
}

#[test]
fn positive_corpus_verifies_before_and_after_instrumentation() {
    for name in common::all() {
        let before = verify(&common::original(&name));
        assert!(before.is_ok(), "{name}: {before}");
        let after = verify(&common::instrumented(&name));
        assert!(after.is_ok(), "{name} instrumented: {after}");
    }
}

#[test]
fn negative_corpus_is_rejected_with_expected_rules() {
    let dir = common::corpus_dir().join("negative");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let src = fs::read_to_string(&path).unwrap();
        let expect = src
            .lines()
            .find_map(|l| l.strip_prefix("# expect: "))
            .unwrap_or_else(|| panic!("{path:?} lacks an expect line"))
            .trim();
        let p = parse_assembly(&src).unwrap_or_else(|d| panic!("{path:?}: {d:?}"));
        let rules: Vec<String> = verify(&p).rules().iter().map(Rule::to_string).collect();
        assert!(rules.iter().any(|r| r == expect), "{path:?}: wanted {expect}, got {rules:?}");
        assert!(instrument_program(&p).is_err());
        seen += 1;
    }
    assert!(seen >= 10);
}

#[test]
fn static_identity_matches_independent_recount() {
    for name in common::all() {
        let counts = oracle::count_methods(&common::source(&name));
        let (_, report) = instrument_program(&common::original(&name)).unwrap();
        assert_eq!(counts.len(), report.methods.len(), "{name}");
        for row in &report.methods {
            let c = &counts[&row.method];
            assert_eq!(c.instructions, row.count_before, "{name}.{}", row.method);
            assert_eq!((c.loops, c.invokes), (row.loops, row.invokes), "{name}.{}", row.method);
            assert_eq!(row.count_after - row.count_before, 4 + 2 * c.loops + c.invokes);
        }
    }
}

#[test]
fn matrix_multiply_counts() {
    let (_, report) = instrument_program(&common::original("matmul")).unwrap();
    let row = report.methods.iter().find(|r| r.method == "multiply").unwrap();
    assert_eq!((row.invokes, row.loops, row.delta), (1, 1, 7));
}

#[test]
fn counter_is_the_twelve_instruction_loop() {
    let p = common::original("counter");
    assert_eq!(p.methods["main"].code.len(), 12);
    let loops = analyze_loops(&p.methods["main"]).unwrap();
    assert_eq!(loops.back_edges.len(), 1);
    assert!(loops.loops[0].innermost);
}

#[test]
fn nested_loops_mark_only_the_inner_one() {
    let p = common::original("matmul");
    let loops = analyze_loops(&p.methods["gen"]).unwrap();
    assert_eq!(loops.back_edges.len(), 2);
    let inner: Vec<bool> = loops.loops.iter().map(|l| l.innermost).collect();
    assert_eq!(inner, [false, true]);
    let triple = analyze_loops(&p.methods["multiply"]).unwrap();
    assert_eq!(triple.back_edges.len(), 3);
    assert_eq!(triple.innermost_headers().len(), 1);
}

#[test]
fn straight_line_has_no_back_edges() {
    let p = common::original("hello");
    assert!(analyze_loops(&p.methods["main"]).unwrap().back_edges.is_empty());
}

#[test]
fn checkpoints_sit_only_at_entry_and_innermost_headers() {
    for name in common::all() {
        let p = common::original(&name);
        let q = common::instrumented(&name);
        for (mname, m) in &q.methods {
            let headers = analyze_loops(&p.methods[mname]).unwrap().innermost_headers().len();
            let at: Vec<usize> = m
                .code
                .iter()
                .enumerate()
                .filter(|(_, i)| **i == Instr::Checkpoint)
                .map(|(pc, _)| pc)
                .collect();
            assert_eq!(at[0], 2, "{name}.{mname}");
            assert_eq!(at.len(), 1 + headers, "{name}.{mname}");
        }
    }
}

#[test]
fn instrumenting_twice_fails() {
    let q = common::instrumented("counter");
    assert!(matches!(
        instrument_program(&q),
        Err(InstrumentError::AlreadyInstrumented(_))
    ));
}

#[test]
fn every_invoke_table_pc_has_an_empty_stack() {
    for name in common::all() {
        let q = common::instrumented(&name);
        let report = verify(&q);
        for (mname, m) in &q.methods {
            for pc in &m.invoke_table {
                assert_eq!(report.depth_at(mname, *pc), Some(0), "{name}.{mname}@{pc}");
            }
        }
    }
}
