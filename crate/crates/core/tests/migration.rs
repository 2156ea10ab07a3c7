mod common;

use std::collections::BTreeSet;

use mvm::image::{capture, decode_image, encode_image, restore, ParkKind};
use mvm::isa::{ObjRef, Program};
use mvm::sweep::{migrate_at, oracle_run, sweep, sweep_sequential, MigrationCase};
use mvm::vm::{
    check_monitor_discipline, check_relaunch_order, Event, EventKind, ParkState, RunEnd,
    UnparkReason, VmInstance,
};

const QUANTUM: u32 = 10;

fn every_k(p: &Program, quantum: u32) -> Vec<MigrationCase> {
    let total = oracle_run(p, quantum).unwrap().checkpoints;
    let cases = sweep(p, quantum, 1..=total.min(200)).unwrap();
    assert_eq!(cases.len() as u64, total.min(200));
    cases
}

#[test]
fn every_checkpoint_reproduces_the_uninterrupted_run() {
    let names = common::migratable();
    for required in ["hello", "counter", "matmul", "recursion", "prodcons", "multimon"] {
        assert!(names.iter().any(|n| n == required), "{required} missing");
    }
    for name in &names {
        let p = common::instrumented(name);
        let oracle = oracle_run(&p, QUANTUM).unwrap();
        for c in every_k(&p, QUANTUM) {
            assert_eq!(c.output(), oracle.output, "{name} k = {}", c.k);
            assert_eq!(c.heap_bytes, oracle.heap_bytes, "{name} k = {}", c.k);
            assert!(c.fidelity_holds(), "{name} k = {}", c.k);
        }
    }
}

#[test]
fn recursion_is_captured_at_least_five_frames_deep() {
    let p = common::instrumented("recursion");
    let deepest = every_k(&p, QUANTUM)
        .iter()
        .flat_map(|c| c.image.threads.iter().map(|t| t.frames.len()))
        .max()
        .unwrap();
    assert!(deepest >= 5, "deepest capture had {deepest} frames");
}

#[test]
fn sequential_and_parallel_sweeps_agree() {
    let p = common::instrumented("prodcons");
    let a = sweep(&p, 3, 1..=40).unwrap();
    let b = sweep_sequential(&p, 3, 1..=40).unwrap();
    let bytes = |cs: &[MigrationCase]| cs.iter().map(|c| c.image_bytes.clone()).collect::<Vec<_>>();
    assert_eq!(bytes(&a), bytes(&b));
}

#[test]
fn monitors_survive_every_migration() {
    for name in ["prodcons", "multimon"] {
        let p = common::instrumented(name);
        let oracle = oracle_run(&p, QUANTUM).unwrap();
        for c in every_k(&p, QUANTUM) {
            assert_eq!(c.before.monitors, c.restored.monitors, "{name} k = {}", c.k);
            for m in &c.image.monitors {
                let live = &c.restored.monitors.iter().find(|v| v.obj == m.obj).unwrap();
                assert_eq!((live.owner, live.recursion), (m.owner, m.recursion));
            }
            let mut log = c.source_events.clone();
            log.extend(c.dest_events.iter().cloned());
            check_monitor_discipline(&log).unwrap_or_else(|e| panic!("{name} k = {}: {e}", c.k));
            assert_eq!(c.output().last(), oracle.output.last(), "{name} k = {}", c.k);
        }
    }
}

#[test]
fn prodcons_capture_with_consumer_holding_and_producer_waiting() {
    let p = common::instrumented("prodcons");
    let cases = every_k(&p, QUANTUM);
    let found = cases.iter().any(|c| {
        c.image
            .monitors
            .iter()
            .any(|m| m.owner == Some(2) && m.recursion == 1 && m.wait_order == [(1, 1)])
    });
    assert!(found, "no capture had the consumer owning the buffer with the producer waiting");
}

#[test]
fn every_park_kind_is_captured_somewhere() {
    let mut kinds = BTreeSet::new();
    for name in common::migratable() {
        let p = common::instrumented(&name);
        for c in every_k(&p, 3) {
            for t in &c.image.threads {
                kinds.insert(match t.park {
                    ParkKind::ExecBlocked => "exec",
                    ParkKind::MonitorEntry { reacquire: None, .. } => "entry",
                    ParkKind::MonitorEntry { reacquire: Some(_), .. } => "reacquire",
                    ParkKind::MonitorWait { .. } => "wait",
                    ParkKind::Sleeping { .. } => "sleep",
                });
            }
        }
    }
    for k in ["exec", "entry", "wait", "sleep"] {
        assert!(kinds.contains(k), "no capture parked as {k}: {kinds:?}");
    }
}

fn restore_kind(e: &Event) -> Option<(u32, &ParkState)> {
    match &e.kind {
        EventKind::RestoreThread { tid, state } => Some((*tid, state)),
        _ => None,
    }
}

#[test]
fn waiters_relaunch_first_then_blocked_threads() {
    let p = common::instrumented("prodcons");
    let mut with_waiter = 0;
    for quantum in [1, 3, QUANTUM] {
        for c in every_k(&p, quantum) {
            check_relaunch_order(&c.dest_events).unwrap_or_else(|e| panic!("k = {}: {e}", c.k));

            let pos = |pred: &dyn Fn(&EventKind) -> bool| -> Vec<usize> {
                (0..c.dest_events.len()).filter(|&i| pred(&c.dest_events[i].kind)).collect()
            };
            let wait_reparks = pos(&|k| {
                matches!(k, EventKind::RestoreRepark { state: ParkState::MonitorWait { .. }, .. })
            });
            let blocked = pos(&|k| {
                matches!(k, EventKind::RestoreThread { state: ParkState::ExecBlocked, .. })
            });
            let others = pos(&|k| {
                matches!(k, EventKind::RestoreThread { state, .. }
                    if !matches!(state, ParkState::ExecBlocked | ParkState::MonitorWait { .. }))
            });
            if let (Some(w), Some(b)) = (wait_reparks.last(), blocked.first()) {
                assert!(w < b, "k = {}", c.k);
            }
            if let (Some(b), Some(o)) = (blocked.first(), others.first()) {
                assert!(b < o, "k = {}", c.k);
            }
            if !wait_reparks.is_empty() {
                with_waiter += 1;
            }
            let restored: Vec<u32> = c.dest_events.iter().filter_map(restore_kind).map(|r| r.0).collect();
            assert_eq!(restored.len(), c.image.threads.len());
        }
    }
    assert!(with_waiter > 0, "no migration restored a waiting thread");
}

/// Virtual time between the sleeper parking and waking, across any number of hops.
fn slept(tid: u32, logs: &[&[Event]]) -> u64 {
    let parked = logs
        .iter()
        .flat_map(|l| l.iter())
        .find(|e| matches!(&e.kind, EventKind::Park { tid: t, state: ParkState::Sleeping { .. }, .. } if *t == tid))
        .expect("sleeper parked")
        .clock;
    let woke = logs
        .iter()
        .flat_map(|l| l.iter())
        .find(|e| matches!(&e.kind, EventKind::Unpark { tid: t, reason: UnparkReason::Woke } if *t == tid))
        .expect("sleeper woke")
        .clock;
    woke - parked
}

fn is_sleeping(c: &MigrationCase, tid: u32) -> bool {
    c.image
        .thread(tid)
        .is_some_and(|t| matches!(t.park, ParkKind::Sleeping { .. }))
}

#[test]
fn sleep_budget_is_kept_across_migration() {
    let p = common::instrumented("sleeper");
    let oracle = oracle_run(&p, QUANTUM).unwrap();
    assert_eq!(slept(1, &[&oracle.events]), 100);
    let mut during = 0;
    for c in every_k(&p, QUANTUM) {
        if is_sleeping(&c, 1) {
            during += 1;
        }
        assert_eq!(slept(1, &[&c.source_events, &c.dest_events]), 100, "k = {}", c.k);
    }
    assert!(during >= 50, "only {during} captures during the sleep");
}

fn hop(vm: &VmInstance, p: &Program) -> VmInstance {
    let bytes = encode_image(&capture(vm, "hop").unwrap());
    let mut next = restore(p, &decode_image(&bytes).unwrap()).unwrap().with_quantum(QUANTUM);
    next.exec_resume().unwrap();
    next
}

#[test]
fn sleep_budget_is_kept_across_two_hops() {
    let p = common::instrumented("sleeper");
    let oracle = oracle_run(&p, QUANTUM).unwrap();
    for (k1, k2) in [(5, 20), (10, 60), (30, 31), (3, 140)] {
        let mut a = VmInstance::load(&p).unwrap().with_quantum(QUANTUM);
        a.suspend_at_checkpoint(k1);
        assert_eq!(a.run(1_000_000).unwrap(), RunEnd::Parked);
        let mut b = hop(&a, &p);
        b.suspend_at_checkpoint(k2);
        assert_eq!(b.run(1_000_000).unwrap(), RunEnd::Parked);
        let mut c = hop(&b, &p);
        assert_eq!(c.run(1_000_000).unwrap(), RunEnd::Done);
        assert_eq!(slept(1, &[a.events(), b.events(), c.events()]), 100, "hops {k1}, {k2}");
        let out: Vec<_> = [a.output(), b.output(), c.output()].concat();
        assert_eq!(out, oracle.output);
    }
}

#[test]
fn images_reencode_identically_and_repeat_across_runs() {
    for name in common::migratable() {
        let p = common::instrumented(&name);
        let first = migrate_at(&p, QUANTUM, 7).unwrap();
        let Some(first) = first else { continue };
        let back = decode_image(&first.image_bytes).unwrap();
        assert_eq!(back, first.image);
        assert_eq!(encode_image(&back), first.image_bytes);
        for _ in 0..4 {
            let again = migrate_at(&p, QUANTUM, 7).unwrap().unwrap();
            assert_eq!(again.image_bytes, first.image_bytes, "{name}");
            assert_eq!(again.dest_events, first.dest_events, "{name}");
        }
    }
}

#[test]
fn restored_monitor_objects_are_heap_objects() {
    let p = common::instrumented("multimon");
    for c in every_k(&p, 2) {
        let ids: BTreeSet<ObjRef> = c.image.heap.iter().map(|o| o.id).collect();
        assert!(c.image.monitors.iter().all(|m| ids.contains(&m.obj)));
    }
}
