//! Instrumentation overhead and migration cost over a directory of programs.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mvm::instrument::{instrument_program, overhead_pct, render_space_table};
use mvm::isa::{encode_program, parse_assembly, verify, Program};
use mvm::overhead::measure;
use mvm::sweep::{migrate_at, oracle_run, DEFAULT_STEP_LIMIT};
use mvm::vm::VmInstance;
use serde::Serialize;

use crate::client::Client;
use crate::server::{Node, NodeConfig};
use crate::wire::ControlOp;

/// Published execution-time rows: (app, normal ms, instrumented ms).
pub const REFERENCE_TIME_ROWS: [(&str, u64, u64); 2] = [("Simple", 328, 359), ("Complex", 604, 657)];

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub quantum: u32,
    pub wall_clock: bool,
    /// Migrate each program once between two in-process localhost nodes.
    pub migrate: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            quantum: 10,
            wall_clock: false,
            migrate: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BenchResult {
    pub program: String,
    pub static_before: u64,
    pub static_after: u64,
    pub static_overhead_pct: f64,
    pub static_identity_holds: bool,
    pub dynamic_original_instr: u64,
    pub dynamic_instrumented_instr: u64,
    pub dynamic_predicted_delta: u64,
    pub dynamic_overhead_pct: f64,
    pub dynamic_identity_holds: bool,
    pub wall_ms_original: Option<f64>,
    pub wall_ms_instrumented: Option<f64>,
    pub round_trip_ms: Option<f64>,
    pub image_bytes: Option<u64>,
    /// Captured twice at the same checkpoint, the images were byte-identical.
    pub image_stable: Option<bool>,
    pub failed: Option<String>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// `.s` files directly inside `dir`, sorted.
pub fn corpus_files(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "s"))
        .collect();
    files.sort();
    Ok(files)
}

struct Pair {
    source: String,
    dest: String,
}

fn start_pair() -> io::Result<Pair> {
    let cfg = |throttle| NodeConfig {
        listen: "127.0.0.1:0".into(),
        throttle,
        ..NodeConfig::default()
    };
    let bind = |c| Node::bind(c).map_err(|e| io::Error::other(e.to_string()));
    // The source is slowed down so the request lands while the program is still running.
    let source = bind(cfg(Duration::from_micros(100)))?.spawn()?;
    let dest = bind(cfg(Duration::ZERO))?.spawn()?;
    Ok(Pair {
        source: source.to_string(),
        dest: dest.to_string(),
    })
}

fn round_trip(pair: &Pair, name: &str, p: &Program) -> Option<f64> {
    let mut src = Client::connect(&pair.source).ok()?;
    let id = src.submit(&format!("bench-{name}"), encode_program(p)).ok()?;
    src.control(&id, ControlOp::Start).ok()?;
    let t = Instant::now();
    src.migrate(&id, &pair.dest).ok()?;
    Some(ms(t.elapsed()))
}

fn bench_one(name: &str, src: &str, opts: &BenchOptions, pair: Option<&Pair>) -> Result<BenchResult, String> {
    let original = parse_assembly(src).map_err(|d| {
        d.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
    })?;
    let report = verify(&original);
    if !report.is_ok() {
        return Err(report.to_string());
    }
    let (inst, rep) = instrument_program(&original).map_err(|e| e.to_string())?;
    let mut r = BenchResult {
        program: name.to_string(),
        static_before: rep.total.count_before as u64,
        static_after: rep.total.count_after as u64,
        static_overhead_pct: rep.total.overhead_pct,
        static_identity_holds: rep.methods.iter().all(|m| m.identity_holds()),
        ..BenchResult::default()
    };

    let d = measure(&original, opts.quantum).map_err(|e| e.to_string())?;
    r.dynamic_original_instr = d.original;
    r.dynamic_instrumented_instr = d.instrumented;
    r.dynamic_predicted_delta = d.predicted_delta();
    r.dynamic_overhead_pct = d.overhead_pct();
    r.dynamic_identity_holds = d.identity_holds();

    if opts.wall_clock {
        let time = |vm: Result<VmInstance, _>| -> Result<f64, String> {
            let mut vm = vm.map_err(|e: mvm::vm::LoadError| e.to_string())?.with_quantum(opts.quantum);
            let t = Instant::now();
            vm.run(DEFAULT_STEP_LIMIT).map_err(|e| e.to_string())?;
            Ok(ms(t.elapsed()))
        };
        r.wall_ms_original = Some(time(VmInstance::load_baseline(&original))?);
        r.wall_ms_instrumented = Some(time(VmInstance::load(&inst))?);
    }

    let checkpoints = oracle_run(&inst, opts.quantum).map_err(|e| e.to_string())?.checkpoints;
    let k = (checkpoints / 2).max(1);
    let a = migrate_at(&inst, opts.quantum, k).map_err(|e| e.to_string())?;
    let b = migrate_at(&inst, opts.quantum, k).map_err(|e| e.to_string())?;
    if let (Some(a), Some(b)) = (a, b) {
        r.image_bytes = Some(a.image_bytes.len() as u64);
        r.image_stable = Some(a.image_bytes == b.image_bytes);
    }

    if let Some(pair) = pair {
        r.round_trip_ms = round_trip(pair, name, &inst);
    }
    Ok(r)
}

/// Benchmarks every `.s` program directly inside `dir`. A program that fails to assemble,
/// verify or run gets a row with `failed` set; the rest still run.
pub fn run_suite(dir: &Path, opts: &BenchOptions) -> io::Result<Vec<BenchResult>> {
    let pair = if opts.migrate { Some(start_pair()?) } else { None };
    let mut out = Vec::new();
    for path in corpus_files(dir)? {
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let src = fs::read_to_string(&path)?;
        out.push(bench_one(&name, &src, opts, pair.as_ref()).unwrap_or_else(|e| BenchResult {
            program: name,
            failed: Some(e),
            ..BenchResult::default()
        }));
    }
    Ok(out)
}

fn delta_cell(before: f64, after: f64, unit: &str) -> String {
    format!("{}{unit}/{:.2}%", after - before, overhead_pct(before, after))
}

/// Execution-overhead table over executed instructions, followed by the published rows, labelled
/// as reference.
pub fn render_time_table(results: &[BenchResult]) -> String {
    let mut out = String::from("Execution overhead (executed instructions)\n");
    let _ = writeln!(
        out,
        "{:<24} {:>10} {:>13} {:>16}",
        "App", "Normal", "Instrumented", "Overhead"
    );
    for r in results.iter().filter(|r| r.failed.is_none()) {
        let (b, a) = (r.dynamic_original_instr as f64, r.dynamic_instrumented_instr as f64);
        let _ = writeln!(
            out,
            "{:<24} {:>10} {:>13} {:>16}",
            r.program,
            r.dynamic_original_instr,
            r.dynamic_instrumented_instr,
            delta_cell(b, a, "")
        );
    }
    for (app, before, after) in REFERENCE_TIME_ROWS {
        let _ = writeln!(
            out,
            "{:<24} {:>10} {:>13} {:>16}",
            format!("{app} (reference)"),
            format!("{before} ms"),
            format!("{after} ms"),
            delta_cell(before as f64, after as f64, "ms")
        );
    }
    out
}

pub fn render_report(results: &[BenchResult]) -> String {
    let ok: Vec<&BenchResult> = results.iter().filter(|r| r.failed.is_none()).collect();
    let space: Vec<(String, u64, u64)> = ok
        .iter()
        .map(|r| (r.program.clone(), r.static_before, r.static_after))
        .collect();
    let mut out = render_space_table(&space);
    out.push('\n');
    out += &render_time_table(results);

    if ok.iter().any(|r| r.wall_ms_original.is_some()) {
        out += "\nWall clock (not asserted)\n";
        let _ = writeln!(out, "{:<24} {:>10} {:>13} {:>10}", "App", "Normal", "Instrumented", "Overhead");
        for r in &ok {
            if let (Some(b), Some(a)) = (r.wall_ms_original, r.wall_ms_instrumented) {
                let _ = writeln!(
                    out,
                    "{:<24} {:>7.3} ms {:>10.3} ms {:>9.2}%",
                    r.program,
                    b,
                    a,
                    overhead_pct(b, a)
                );
            }
        }
    }

    out += "\nMigration\n";
    let _ = writeln!(out, "{:<24} {:>14} {:>12} {:>8}", "App", "Round trip", "Image", "Stable");
    let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    for r in &ok {
        let _ = writeln!(
            out,
            "{:<24} {:>14} {:>12} {:>8}",
            r.program,
            opt(r.round_trip_ms.map(|m| format!("{m:.2} ms"))),
            opt(r.image_bytes.map(|b| format!("{b} B"))),
            opt(r.image_stable.map(|s| if s { "yes" } else { "NO" }.to_string())),
        );
    }

    let failed: Vec<&BenchResult> = results.iter().filter(|r| r.failed.is_some()).collect();
    if !failed.is_empty() {
        out += "\nFailed\n";
        for r in failed {
            let _ = writeln!(out, "{:<24} FAILED: {}", r.program, r.failed.as_deref().unwrap_or(""));
        }
    }
    out
}
