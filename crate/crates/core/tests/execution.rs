mod common;
#[path = "common/oracle.rs"]
mod oracle;

use mvm::instrument::analyze_loops;
use mvm::isa::{verify, Instr, Value};
use mvm::overhead::measure;
use mvm::vm::{
    check_monitor_discipline, to_json_lines, EventKind, ParkState, RunEnd, StepOutcome,
    VmInstance,
};

const STEPS: u64 = 1_000_000;

fn finish(vm: &mut VmInstance) {
    assert_eq!(vm.run(STEPS).unwrap(), RunEnd::Done);
}

#[test]
fn instrumented_runs_match_uninstrumented_runs() {
    for name in common::all() {
        for q in [1, 4, 10] {
            let mut base = VmInstance::load_baseline(&common::original(&name)).unwrap().with_quantum(q);
            base.enable_branch_trace();
            finish(&mut base);
            let mut inst = VmInstance::load(&common::instrumented(&name)).unwrap().with_quantum(q);
            inst.enable_branch_trace();
            finish(&mut inst);
            assert_eq!(base.output(), inst.output(), "{name} q{q}");
            assert_eq!(base.heap_bytes(), inst.heap_bytes(), "{name} q{q}");
            assert_eq!(base.branch_trace(), inst.branch_trace(), "{name} q{q}");
        }
    }
}

/// Recounts the predicted delta from the baseline's per-pc profile and the text oracle,
/// without the library's stats counters.
#[test]
fn dynamic_identity_from_profile() {
    for name in common::all() {
        let p = common::original(&name);
        let mut base = VmInstance::load_baseline(&p).unwrap();
        base.enable_profile();
        finish(&mut base);
        let profile = base.profile().unwrap();
        let mut calls = 1;
        let mut invoke_class = 0;
        let mut headers = 0;
        let counts = oracle::count_methods(&common::source(&name));
        for (mname, m) in &p.methods {
            let prof = &profile[mname];
            for (pc, i) in m.code.iter().enumerate() {
                if matches!(i, Instr::Invoke { .. } | Instr::Spawn { .. }) {
                    calls += prof[pc];
                }
                if i.is_original_invoke_class() {
                    invoke_class += prof[pc];
                }
            }
            let inner = analyze_loops(m).unwrap().innermost_headers();
            assert_eq!(inner.len(), counts[mname].loops);
            headers += inner.iter().map(|h| prof[*h as usize]).sum::<u64>();
        }
        let original: u64 = profile.values().flatten().sum();

        let mut inst = VmInstance::load(&common::instrumented(&name)).unwrap();
        finish(&mut inst);
        let instrumented = inst.stats().instructions;
        assert_eq!(
            instrumented - original,
            4 * calls + invoke_class + 2 * headers,
            "{name}"
        );

        let m = measure(&p, 10).unwrap();
        assert!(m.identity_holds(), "{name}: {m:?}");
        assert_eq!((m.original, m.instrumented), (original, instrumented));
    }
}

#[test]
fn runs_are_deterministic() {
    for name in common::all() {
        let p = common::instrumented(&name);
        let runs: Vec<(String, Vec<Value>)> = (0..5)
            .map(|_| {
                let mut vm = VmInstance::load(&p).unwrap().with_quantum(7);
                finish(&mut vm);
                (to_json_lines(vm.events()), vm.output().to_vec())
            })
            .collect();
        assert!(runs.windows(2).all(|w| w[0] == w[1]), "{name}");
    }
}

#[test]
fn static_depths_match_runtime_depths() {
    for name in common::all() {
        for p in [common::original(&name), common::instrumented(&name)] {
            let mut vm = if p.is_instrumented() {
                VmInstance::load(&p).unwrap()
            } else {
                VmInstance::load_baseline(&p).unwrap()
            };
            vm.enable_depth_check(verify(&p));
            finish(&mut vm);
            assert_eq!(vm.depth_mismatches(), 0, "{name}");
        }
    }
}

#[test]
fn parks_happen_only_at_invoke_class_pcs() {
    for name in common::all() {
        let p = common::instrumented(&name);
        let mut vm = VmInstance::load(&p).unwrap().with_quantum(3);
        finish(&mut vm);
        for e in vm.events() {
            if let EventKind::Park { method, pc, .. } = &e.kind {
                assert!(p.methods[method].invoke_table.contains(pc), "{name} {method}@{pc}");
            }
        }
        check_monitor_discipline(vm.events()).unwrap();
        assert!(vm.monitors().values().all(|m| m.check().is_ok()));
    }
}

#[test]
fn suspension_drains_every_program() {
    for name in common::all() {
        let p = common::instrumented(&name);
        for warmup in [0, 5, 20] {
            let mut vm = VmInstance::load(&p).unwrap().with_quantum(4);
            for _ in 0..warmup {
                vm.step().unwrap();
            }
            if vm.threads().iter().all(|t| !t.park().is_live()) {
                continue;
            }
            vm.exec_suspend().unwrap();
            let mut steps = 0;
            while vm.step().unwrap() == StepOutcome::Progressed {
                steps += 1;
                assert!(steps < 1000, "{name}: suspension never settled");
            }
            let view = vm.inspect();
            for t in &view.threads {
                assert!(t.park != ParkState::Runnable);
                assert!(t.frames.iter().all(|f| f.stack_depth == 0), "{name}");
            }
        }
    }
}

#[test]
fn producer_consumer_matches_sequential_sum() {
    let expected: i64 = (1..=12).sum();
    for q in [1, 2, 3, 5, 10, 50] {
        let mut vm = VmInstance::load(&common::instrumented("prodcons")).unwrap().with_quantum(q);
        finish(&mut vm);
        let out = vm.output_lines();
        let items: Vec<String> = (1..=12).map(|i| i.to_string()).collect();
        assert_eq!(&out[..12], &items[..]);
        assert_eq!(out[12], expected.to_string());
        // each notify on a non-empty wait set moved at least one waiter, each waiter once
        for e in vm.events() {
            if let EventKind::Notify { moved, .. } = &e.kind {
                let mut sorted = moved.clone();
                sorted.dedup();
                assert_eq!(sorted.len(), moved.len());
            }
        }
    }
}

#[test]
fn spawned_workers_are_deterministic_per_quantum() {
    let p = common::instrumented("workers");
    for q in [1, 5, 10] {
        let first = {
            let mut vm = VmInstance::load(&p).unwrap().with_quantum(q);
            finish(&mut vm);
            vm.output_lines()
        };
        for _ in 0..4 {
            let mut vm = VmInstance::load(&p).unwrap().with_quantum(q);
            finish(&mut vm);
            assert_eq!(vm.output_lines(), first);
        }
        assert_eq!(first.len(), 12);
    }
}

#[test]
fn sleeper_takes_one_hundred_virtual_ms() {
    let mut vm = VmInstance::load(&common::instrumented("sleeper")).unwrap();
    finish(&mut vm);
    let parked = vm
        .events()
        .iter()
        .find(|e| matches!(&e.kind, EventKind::Park { tid: 1, state: ParkState::Sleeping { .. }, .. }))
        .unwrap()
        .clock;
    let woke = vm
        .events()
        .iter()
        .find(|e| matches!(&e.kind, EventKind::Unpark { tid: 1, .. }))
        .unwrap()
        .clock;
    assert_eq!(woke - parked, 100);
    assert_eq!(vm.output_lines(), ["woke", "ticks", "150"]);
}
