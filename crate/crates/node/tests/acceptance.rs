//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the summary lines are always printed.

#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Child, Command, ExitCode, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use mvm::image::{decode_image, encode_image};
use mvm::instrument::{analyze_loops, instrument_program, render_space_table};
use mvm::isa::{decode_program, encode_program, parse_assembly, verify, Instr, Program, Rule};
use mvm::overhead::measure;
use mvm::sweep::{migrate_at, oracle_run, sweep, MigrationCase};
use mvm::vm::{
    check_monitor_discipline, check_relaunch_order, to_json_lines, Event, EventKind, ParkState,
    RunEnd, UnparkReason, VmInstance,
};
use mvm_node::bench::render_time_table;
use mvm_node::{Client, ShellState};

const QUANTUM: u32 = 10;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

fn source(name: &str) -> String {
    fs::read_to_string(corpus_dir().join(format!("{name}.s"))).unwrap()
}

fn original(name: &str) -> Program {
    parse_assembly(&source(name)).unwrap()
}

fn instrumented(name: &str) -> Program {
    instrument_program(&original(name)).unwrap().0
}

fn programs() -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(corpus_dir())
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension()? == "s").then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    v.sort();
    v
}

fn migratable() -> Vec<String> {
    programs()
        .into_iter()
        .filter(|n| !source(n).starts_with("# interleaving-dependent"))
        .collect()
}

fn every_k(p: &Program, quantum: u32) -> Result<Vec<MigrationCase>, String> {
    let total = oracle_run(p, quantum).map_err(|e| e.to_string())?.checkpoints;
    sweep(p, quantum, 1..=total.min(200)).map_err(|e| e.to_string())
}

fn migrate_every_checkpoint() -> Outcome {
    let t = Instant::now();
    let names = migratable();
    for required in ["hello", "counter", "matmul", "recursion", "prodcons", "multimon"] {
        ensure!(names.iter().any(|n| n == required), "corpus lacks {required}");
    }
    let mut total = 0;
    let mut deepest = 0;
    for name in &names {
        let p = instrumented(name);
        let oracle = oracle_run(&p, QUANTUM).map_err(|e| e.to_string())?;
        let cases = every_k(&p, QUANTUM)?;
        ensure!(cases.len() as u64 == oracle.checkpoints.min(200), "{name}: missing cases");
        for c in &cases {
            ensure!(c.output() == oracle.output, "{name} k={}: output differs", c.k);
            ensure!(c.heap_bytes == oracle.heap_bytes, "{name} k={}: heap differs", c.k);
            ensure!(c.fidelity_holds(), "{name} k={}: restored state differs", c.k);
            deepest = deepest.max(c.image.threads.iter().map(|t| t.frames.len()).max().unwrap_or(0));
        }
        total += cases.len();
    }
    ensure!(deepest >= 5, "deepest captured stack had {deepest} frames");
    ensure!(t.elapsed() < Duration::from_secs(90), "took {:?}", t.elapsed());
    let secs = t.elapsed().as_secs_f64();
    Ok(format!(
        "{} programs, {total} migrations, deepest stack {deepest} frames, {secs:.1}s",
        names.len()
    ))
}

fn static_identity() -> Outcome {
    let mut methods = 0;
    let mut rows = Vec::new();
    for name in programs() {
        let counts = oracle::count_methods(&source(&name));
        let (inst, report) = instrument_program(&original(&name)).map_err(|e| e.to_string())?;
        for row in &report.methods {
            let c = &counts[&row.method];
            let after = inst.method(&row.method).unwrap().code.len();
            ensure!(c.instructions == row.count_before, "{name}.{}: size recount", row.method);
            ensure!(
                after == c.instructions + 4 + 2 * c.loops + c.invokes,
                "{name}.{}: {after} != {} + 4 + 2*{} + {}",
                row.method,
                c.instructions,
                c.loops,
                c.invokes
            );
            methods += 1;
        }
        rows.push((name, report.total.count_before as u64, report.total.count_after as u64));
    }
    let table = render_space_table(&rows);
    for (app, want) in [("Simple", ["52", "60", "15%"]), ("Complex", ["151", "171", "13%"])] {
        let line = table
            .lines()
            .find(|l| l.starts_with(app))
            .ok_or(format!("no {app} reference row"))?;
        ensure!(line.contains("(reference)"), "{app} row is not labelled as reference");
        let fields: Vec<&str> = line.split_whitespace().skip(2).collect();
        ensure!(fields == want, "{app} row reads {fields:?}");
    }
    Ok(format!("{methods} methods satisfy countAfter - countBefore = 4 + 2L + V"))
}

fn dynamic_identity() -> Outcome {
    let mut runs = 0;
    for name in programs() {
        let p = original(&name);
        let mut base = VmInstance::load_baseline(&p).unwrap();
        base.enable_profile();
        ensure!(base.run(10_000_000).unwrap() == RunEnd::Done, "{name}: baseline did not finish");
        let profile = base.profile().unwrap();
        let (mut calls, mut invoke_class, mut iterations) = (1, 0, 0);
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
            for h in analyze_loops(m).unwrap().innermost_headers() {
                iterations += prof[h as usize];
            }
        }
        let before: u64 = profile.values().flatten().sum();
        let mut inst = VmInstance::load(&instrumented(&name)).unwrap();
        inst.run(10_000_000).unwrap();
        let after = inst.stats().instructions;
        ensure!(
            after - before == 4 * calls + invoke_class + 2 * iterations,
            "{name}: {after} - {before} != 4*{calls} + {invoke_class} + 2*{iterations}"
        );
        let m = measure(&p, QUANTUM).map_err(|e| e.to_string())?;
        ensure!(m.identity_holds(), "{name}: {m:?}");
        runs += 1;
    }
    let table = render_time_table(&[]);
    for (app, want) in [("Simple", "31ms/9.45%"), ("Complex", "53ms/8.77%")] {
        let line = table.lines().find(|l| l.starts_with(app)).ok_or(format!("no {app} row"))?;
        ensure!(line.contains("(reference)") && line.ends_with(want), "{app} row reads {line:?}");
    }
    Ok(format!("{runs} runs satisfy the executed-instruction identity"))
}

fn lock_preservation() -> Outcome {
    let mut n = 0;
    for name in ["prodcons", "multimon"] {
        let p = instrumented(name);
        let oracle = oracle_run(&p, QUANTUM).map_err(|e| e.to_string())?;
        for c in every_k(&p, QUANTUM)? {
            ensure!(c.before.monitors == c.restored.monitors, "{name} k={}: monitors", c.k);
            for m in &c.image.monitors {
                let live = c.restored.monitors.iter().find(|v| v.obj == m.obj);
                ensure!(
                    live.is_some_and(|v| (v.owner, v.recursion) == (m.owner, m.recursion)),
                    "{name} k={}: monitor {} changed",
                    c.k,
                    m.obj
                );
            }
            let log: Vec<Event> = c.source_events.iter().chain(&c.dest_events).cloned().collect();
            check_monitor_discipline(&log).map_err(|e| format!("{name} k={}: {e}", c.k))?;
            ensure!(c.output().last() == oracle.output.last(), "{name} k={}: final value", c.k);
            n += 1;
        }
    }
    Ok(format!("{n} migrations keep owners, recursion and exclusion"))
}

fn relaunch_ordering() -> Outcome {
    let p = instrumented("prodcons");
    let mut n = 0;
    let mut with_waiter = 0;
    for quantum in [1, 3, QUANTUM] {
        for c in every_k(&p, quantum)? {
            check_relaunch_order(&c.dest_events).map_err(|e| format!("q{quantum} k={}: {e}", c.k))?;
            let at = |pred: &dyn Fn(&EventKind) -> bool| -> Vec<usize> {
                (0..c.dest_events.len()).filter(|&i| pred(&c.dest_events[i].kind)).collect()
            };
            let waits = at(&|k| {
                matches!(k, EventKind::RestoreRepark { state: ParkState::MonitorWait { .. }, .. })
            });
            let blocked = at(&|k| matches!(k, EventKind::RestoreThread { state: ParkState::ExecBlocked, .. }));
            let rest = at(&|k| {
                matches!(k, EventKind::RestoreThread { state, .. }
                    if !matches!(state, ParkState::ExecBlocked | ParkState::MonitorWait { .. }))
            });
            if let (Some(w), Some(b)) = (waits.last(), blocked.first()) {
                ensure!(w < b, "q{quantum} k={}: wait re-park after blocked restore", c.k);
            }
            if let (Some(b), Some(r)) = (blocked.first(), rest.first()) {
                ensure!(b < r, "q{quantum} k={}: blocked restore after others", c.k);
            }
            with_waiter += usize::from(!waits.is_empty());
            n += 1;
        }
    }
    ensure!(with_waiter > 0, "no migration had a waiting thread");
    Ok(format!("{n} restores ordered ({with_waiter} with waiters)"))
}

fn slept(tid: u32, logs: &[&[Event]]) -> Option<u64> {
    let all = || logs.iter().flat_map(|l| l.iter());
    let parked = all().find(|e| {
        matches!(&e.kind, EventKind::Park { tid: t, state: ParkState::Sleeping { .. }, .. } if *t == tid)
    })?;
    let woke = all().find(|e| {
        matches!(&e.kind, EventKind::Unpark { tid: t, reason: UnparkReason::Woke } if *t == tid)
    })?;
    Some(woke.clock - parked.clock)
}

fn sleep_budget() -> Outcome {
    let p = instrumented("sleeper");
    let oracle = oracle_run(&p, QUANTUM).map_err(|e| e.to_string())?;
    ensure!(slept(1, &[&oracle.events]) == Some(100), "uninterrupted sleep is not 100ms");
    let mut during = 0;
    for c in every_k(&p, QUANTUM)? {
        let sleeping = c
            .image
            .thread(1)
            .is_some_and(|t| matches!(t.park, mvm::image::ParkKind::Sleeping { .. }));
        let got = slept(1, &[&c.source_events, &c.dest_events]);
        ensure!(got == Some(100), "k={}: slept {got:?}", c.k);
        during += usize::from(sleeping);
    }
    ensure!(during > 0, "no migration happened during the sleep");
    Ok(format!("{during} migrations during the sleep, each 100 virtual ms total"))
}

#[derive(Clone, Debug)]
enum Damage {
    Truncate(usize),
    Flip(usize, u8),
}

fn codecs() -> Outcome {
    let mut programs_seen = Vec::new();
    let mut images = Vec::new();
    for name in programs() {
        for p in [original(&name), instrumented(&name)] {
            let bytes = encode_program(&p);
            let back = decode_program(&bytes).map_err(|e| format!("{name}: {e}"))?;
            ensure!(back == p, "{name}: program decode(encode) differs");
            ensure!(encode_program(&back) == bytes, "{name}: program re-encode differs");
            programs_seen.push(bytes);
        }
        for k in [1, 5, 12] {
            if let Some(c) = migrate_at(&instrumented(&name), QUANTUM, k).map_err(|e| e.to_string())? {
                let back = decode_image(&c.image_bytes).map_err(|e| format!("{name}: {e}"))?;
                ensure!(back == c.image, "{name} k={k}: image decode(encode) differs");
                ensure!(encode_image(&back) == c.image_bytes, "{name} k={k}: image re-encode differs");
                images.push(c.image_bytes);
            }
        }
    }

    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let damage = prop_oneof![
        any::<usize>().prop_map(Damage::Truncate),
        (any::<usize>(), 1u8..=255).prop_map(|(a, x)| Damage::Flip(a, x)),
    ];
    let blobs: Vec<(bool, Vec<u8>)> = programs_seen
        .iter()
        .map(|b| (false, b.clone()))
        .chain(images.iter().map(|b| (true, b.clone())))
        .collect();
    runner
        .run(&(any::<prop::sample::Index>(), damage), |(pick, d)| {
            let (is_image, blob) = &blobs[pick.index(blobs.len())];
            let mut b = blob.clone();
            match d {
                Damage::Truncate(n) => b.truncate(n % b.len()),
                Damage::Flip(at, x) => {
                    let i = at % b.len();
                    b[i] ^= x;
                }
            }
            let rejected = if *is_image {
                decode_image(&b).is_err()
            } else {
                decode_program(&b).is_err()
            };
            prop_assert!(rejected);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "{} programs and {} images round-trip; 1000 damaged inputs rejected",
        programs_seen.len(),
        images.len()
    ))
}

fn verifier_gate() -> Outcome {
    let dir = corpus_dir().join("negative");
    let mut rules = BTreeSet::new();
    let mut n = 0;
    for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let src = fs::read_to_string(&path).map_err(|e| e.to_string())?;
        let expect = src
            .lines()
            .find_map(|l| l.strip_prefix("# expect: "))
            .ok_or(format!("{path:?}: no expect line"))?
            .trim()
            .to_string();
        let p = parse_assembly(&src).map_err(|d| format!("{path:?}: {d:?}"))?;
        let got: Vec<String> = verify(&p).rules().iter().map(Rule::to_string).collect();
        ensure!(got.contains(&expect), "{path:?}: wanted {expect}, got {got:?}");
        ensure!(instrument_program(&p).is_err(), "{path:?}: instrumented anyway");
        rules.insert(expect);
        n += 1;
    }
    ensure!(n >= 10, "only {n} negative programs");
    let positive = programs();
    for name in &positive {
        ensure!(verify(&original(name)).is_ok(), "{name} rejected");
        ensure!(verify(&instrumented(name)).is_ok(), "{name} rejected after instrumentation");
    }
    Ok(format!(
        "{n} negative programs rejected ({} rules), {} positive accepted",
        rules.len(),
        positive.len()
    ))
}

struct NodeProc(Child, String);

impl Drop for NodeProc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_node(extra: &[&str]) -> Result<NodeProc, String> {
    let mut child = Command::new(env!("CARGO_BIN_EXE_mvm"))
        .args(["node", "--listen", "127.0.0.1:0"])
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .map_err(|e| e.to_string())?;
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or(format!("unexpected first line {line:?}"))?
        .to_string();
    Ok(NodeProc(child, addr))
}

fn mvm(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mvm")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

fn wait_done(addr: &str, entity: &str) -> Result<Vec<String>, String> {
    let mut c = Client::connect(addr).map_err(|e| e.to_string())?;
    let s = c
        .wait_for(entity, &[ShellState::Done, ShellState::Failed], Duration::from_secs(10))
        .map_err(|e| e.to_string())?;
    ensure!(s == ShellState::Done, "{entity} ended {s}");
    Ok(c.output(entity).map_err(|e| e.to_string())?.1)
}

fn lines(s: &str) -> Vec<String> {
    s.lines().map(String::from).collect()
}

fn two_nodes() -> Outcome {
    let counter = corpus_dir().join("counter.s");
    let counter = counter.to_str().unwrap();
    let mut oracle_vm = VmInstance::load(&instrumented("counter")).unwrap();
    oracle_vm.run(1_000_000).unwrap();
    let oracle = oracle_vm.output_lines();

    let src = spawn_node(&["--throttle-us", "1000"])?;
    let dst = spawn_node(&[])?;
    let t = Instant::now();
    let (code, _) = mvm(&["submit", counter, "--node", &src.1, "--entity", "e1", "--start"]);
    ensure!(code == 0, "submit exited {code}");
    thread::sleep(Duration::from_millis(30));
    let (code, _) = mvm(&["migrate", "--from", &src.1, "--entity", "e1", "--to", &dst.1]);
    ensure!(code == 0, "migrate exited {code}");
    let (_, before) = mvm(&["output", "--node", &src.1, "--entity", "e1"]);
    let st = Client::connect(&src.1).and_then(|mut c| c.status("e1")).map_err(|e| e.to_string())?;
    ensure!(st[0].state == ShellState::Done, "source kept a {} copy", st[0].state);
    let after = wait_done(&dst.1, "e1")?;
    let wall = t.elapsed();
    let before = lines(&before);
    ensure!(!before.is_empty() && !after.is_empty(), "migration was not mid-run");
    ensure!([before.clone(), after].concat() == oracle, "concatenated output differs");
    ensure!(wall < Duration::from_secs(2), "took {wall:?}");

    // unreachable destination
    let closed = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    mvm(&["submit", counter, "--node", &src.1, "--entity", "e2", "--start"]);
    thread::sleep(Duration::from_millis(20));
    let (code, _) = mvm(&["migrate", "--from", &src.1, "--entity", "e2", "--to", &closed]);
    ensure!(code == 1, "unreachable migrate exited {code}");
    ensure!(wait_done(&src.1, "e2")? == oracle, "e2 output differs after rollback");

    // tampered image
    let bad = spawn_node(&["--throttle-us", "1000", "--inject-fault", "corrupt-image"])?;
    mvm(&["submit", counter, "--node", &bad.1, "--entity", "e3", "--start"]);
    thread::sleep(Duration::from_millis(20));
    let (code, _) = mvm(&["migrate", "--from", &bad.1, "--entity", "e3", "--to", &dst.1]);
    ensure!(code == 1, "tampered migrate exited {code}");
    let known = Client::connect(&dst.1).and_then(|mut c| c.status("e3"));
    ensure!(known.is_err(), "destination registered a tampered entity");
    ensure!(wait_done(&bad.1, "e3")? == oracle, "e3 output differs after rollback");

    Ok(format!(
        "migrated after {} of {} lines in {:.0} ms; both failure injections rolled back",
        before.len(),
        oracle.len(),
        wall.as_secs_f64() * 1000.0
    ))
}

fn determinism() -> Outcome {
    let mut n = 0;
    for name in programs() {
        let p = instrumented(&name);
        let runs: Vec<(String, Vec<String>)> = (0..5)
            .map(|_| {
                let mut vm = VmInstance::load(&p).unwrap().with_quantum(QUANTUM);
                vm.run(10_000_000).unwrap();
                (to_json_lines(vm.events()), vm.output_lines())
            })
            .collect();
        ensure!(runs.windows(2).all(|w| w[0] == w[1]), "{name}: runs differ");
        let images: Vec<Option<Vec<u8>>> = (0..5)
            .map(|_| migrate_at(&p, QUANTUM, 7).unwrap().map(|c| c.image_bytes))
            .collect();
        ensure!(images.windows(2).all(|w| w[0] == w[1]), "{name}: images differ");
        n += 1;
    }
    Ok(format!("{n} programs x 5 runs: identical logs, outputs and images"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("migrate-at-every-checkpoint equivalence", migrate_every_checkpoint),
        ("static overhead identity", static_identity),
        ("dynamic overhead identity", dynamic_identity),
        ("lock preservation", lock_preservation),
        ("relaunch ordering", relaunch_ordering),
        ("sleep budget", sleep_budget),
        ("codec round-trips and fuzz", codecs),
        ("verifier gate", verifier_gate),
        ("two-node migration", two_nodes),
        ("determinism", determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
