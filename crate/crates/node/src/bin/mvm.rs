use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

/// `println!` that exits quietly when stdout is gone (for example `mvm run ... | head`).
macro_rules! out {
    ($($arg:tt)*) => {
        emit(format_args!($($arg)*))
    };
}

use mvm::image::{capture, decode_image, encode_image, restore};
use mvm::instrument::instrument_program;
use mvm::isa::{decode_program, emit_assembly, encode_program, parse_assembly, verify, Program};
use mvm::vm::{to_json_lines, RunEnd, VmInstance};
use mvm_node::bench::{render_report, run_suite, BenchOptions};
use mvm_node::{Client, ClientError, ControlOp, Fault, Node, NodeConfig, NodeError};

#[derive(Parser)]
#[command(name = "mvm", version, about = "Migratable mini VM: tools, node and client")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Op {
    Start,
    Stop,
    Suspend,
    Resume,
}

#[derive(Clone, Copy, ValueEnum)]
enum InjectFault {
    CorruptImage,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a program into its binary form.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Check a program (assembly or binary) against the verifier.
    Verify {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Insert checkpoints and dispatch tables.
    Instrument {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Write assembly instead of the binary form.
        #[arg(long)]
        text: bool,
        /// Print the per-method size report.
        #[arg(long)]
        report: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run a program to completion.
    Run {
        input: PathBuf,
        #[arg(long, default_value_t = 10)]
        quantum: u32,
        /// Instrument before running.
        #[arg(long)]
        instrumented: bool,
        /// Write the event log as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Run to the k-th checkpoint and write an execution image.
    Snapshot {
        input: PathBuf,
        #[arg(long)]
        at: u64,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value = "local")]
        entity: String,
        #[arg(long, default_value_t = 10)]
        quantum: u32,
        #[arg(long)]
        json: bool,
    },
    /// Restore an image and run it to completion.
    Restore {
        input: PathBuf,
        image: PathBuf,
        #[arg(long, default_value_t = 10)]
        quantum: u32,
        /// Print the restored state instead of resuming.
        #[arg(long)]
        inspect: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run a node.
    Node {
        #[arg(long, env = "MVM_LISTEN", default_value = "127.0.0.1:7100")]
        listen: String,
        #[arg(long, value_enum, default_value = "on")]
        auto_resume: OnOff,
        #[arg(long, default_value_t = 10)]
        quantum: u32,
        /// Pause after every executed instruction, in microseconds.
        #[arg(long, default_value_t = 0)]
        throttle_us: u64,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<InjectFault>,
    },
    /// Send a program to a node.
    Submit {
        input: PathBuf,
        #[arg(long)]
        node: String,
        #[arg(long, default_value = "")]
        entity: String,
        /// Start it right away.
        #[arg(long)]
        start: bool,
        #[arg(long)]
        json: bool,
    },
    /// Change an entity's lifecycle state.
    Control {
        #[arg(value_enum)]
        op: Op,
        #[arg(long)]
        node: String,
        #[arg(long)]
        entity: String,
        #[arg(long)]
        json: bool,
    },
    /// Move an entity from one node to another.
    Migrate {
        #[arg(long)]
        from: String,
        #[arg(long)]
        entity: String,
        #[arg(long)]
        to: String,
        #[arg(long)]
        json: bool,
    },
    /// Print an entity's output on one node.
    Output {
        #[arg(long)]
        node: String,
        #[arg(long)]
        entity: String,
        #[arg(long)]
        json: bool,
    },
    /// List entities on a node.
    Status {
        #[arg(long)]
        node: String,
        #[arg(long, default_value = "")]
        entity: String,
        #[arg(long)]
        json: bool,
    },
    /// Measure instrumentation overhead and migration cost.
    Bench {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        wall_clock: bool,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        quantum: u32,
        /// Skip the localhost migration.
        #[arg(long)]
        no_migrate: bool,
    },
}

#[derive(Debug, Error)]
enum CliError {
    /// Bad input or a refused operation: exit 1.
    #[error("{0}")]
    Domain(String),
    /// Usage, file or connection problems: exit 2.
    #[error("{0}")]
    Io(String),
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Remote { .. } | ClientError::Unexpected(_) => CliError::Domain(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

type Res = Result<(), CliError>;

fn domain(e: impl ToString) -> CliError {
    CliError::Domain(e.to_string())
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Res {
    fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Binary programs start with their magic; anything else is assembly.
fn load(path: &Path) -> Result<Program, CliError> {
    let bytes = read(path)?;
    if bytes.starts_with(b"MVMP") {
        return decode_program(&bytes).map_err(|e| domain(format!("{}: {e}", path.display())));
    }
    let src = String::from_utf8(bytes).map_err(|_| domain(format!("{}: not UTF-8", path.display())))?;
    parse_assembly(&src).map_err(|diags| {
        let lines: Vec<String> = diags.iter().map(|d| format!("{}:{d}", path.display())).collect();
        domain(lines.join("\n"))
    })
}

fn instrumented(p: Program) -> Result<Program, CliError> {
    if p.is_instrumented() {
        return Ok(p);
    }
    let report = verify(&p);
    if !report.is_ok() {
        return Err(domain(report));
    }
    instrument_program(&p).map(|(p, _)| p).map_err(domain)
}

fn print_json(v: &serde_json::Value) {
    out!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn finish(vm: &mut VmInstance) -> Res {
    match vm.run(mvm::sweep::DEFAULT_STEP_LIMIT).map_err(domain)? {
        RunEnd::Done => Ok(()),
        RunEnd::Parked => Err(domain("deadlock: every thread is parked")),
    }
}

fn cmd_verify(input: &Path, json: bool) -> Res {
    let p = load(input)?;
    let report = verify(&p);
    if json {
        print_json(&json!({ "ok": report.is_ok(), "report": report }));
    } else {
        out!("{report}");
    }
    if report.is_ok() {
        Ok(())
    } else {
        Err(CliError::Domain(format!("{} violation(s)", report.violations.len())))
    }
}

fn cmd_instrument(input: &Path, output: &Path, text: bool, show: bool, json: bool) -> Res {
    let p = load(input)?;
    let report = verify(&p);
    if !report.is_ok() {
        return Err(domain(report));
    }
    let (inst, rep) = instrument_program(&p).map_err(domain)?;
    if text {
        write(output, emit_assembly(&inst).as_bytes())?;
    } else {
        write(output, &encode_program(&inst))?;
    }
    if json {
        out!("{}", rep.to_json());
    } else if show {
        out!("{:<24} {:>7} {:>7} {:>4} {:>4} {:>6}", "method", "before", "after", "L", "V", "delta");
        for m in &rep.methods {
            out!(
                "{:<24} {:>7} {:>7} {:>4} {:>4} {:>6}",
                m.method, m.count_before, m.count_after, m.loops, m.invokes, m.delta
            );
        }
        out!(
            "{:<24} {:>7} {:>7} {:>16.2}%",
            "total", rep.total.count_before, rep.total.count_after, rep.total.overhead_pct
        );
    }
    Ok(())
}

fn cmd_run(input: &Path, quantum: u32, inst: bool, trace: Option<&Path>, json: bool) -> Res {
    let mut p = load(input)?;
    if inst {
        p = instrumented(p)?;
    }
    let vm = if p.is_instrumented() {
        VmInstance::load(&p)
    } else {
        VmInstance::load_baseline(&p)
    };
    let mut vm = vm.map_err(domain)?.with_quantum(quantum);
    let result = finish(&mut vm);
    if let Some(path) = trace {
        write(path, to_json_lines(vm.events()).as_bytes())?;
    }
    if json {
        print_json(&json!({
            "output": vm.output_lines(),
            "clock": vm.clock(),
            "stats": vm.stats(),
            "error": result.as_ref().err().map(ToString::to_string),
        }));
    } else {
        for l in vm.output_lines() {
            out!("{l}");
        }
    }
    result
}

fn cmd_snapshot(input: &Path, at: u64, output: &Path, entity: &str, quantum: u32, json: bool) -> Res {
    let p = instrumented(load(input)?)?;
    let mut vm = VmInstance::load(&p).map_err(domain)?.with_quantum(quantum);
    vm.suspend_at_checkpoint(at);
    if vm.run(mvm::sweep::DEFAULT_STEP_LIMIT).map_err(domain)? == RunEnd::Done {
        return Err(domain(format!(
            "program finished after {} checkpoints, before checkpoint {at}",
            vm.stats().checkpoints
        )));
    }
    let img = capture(&vm, entity).map_err(domain)?;
    let bytes = encode_image(&img);
    write(output, &bytes)?;
    if json {
        print_json(&json!({
            "output": vm.output_lines(),
            "imageBytes": bytes.len(),
            "threads": img.threads.len(),
            "clock": img.clock,
        }));
    } else {
        for l in vm.output_lines() {
            out!("{l}");
        }
    }
    Ok(())
}

fn cmd_restore(input: &Path, image: &Path, quantum: u32, inspect: bool, json: bool) -> Res {
    let p = instrumented(load(input)?)?;
    let img = decode_image(&read(image)?).map_err(domain)?;
    let mut vm = restore(&p, &img).map_err(domain)?.with_quantum(quantum);
    if inspect {
        print_json(&serde_json::to_value(vm.inspect()).expect("state serializes"));
        return Ok(());
    }
    vm.exec_resume().map_err(domain)?;
    let result = finish(&mut vm);
    if json {
        print_json(&json!({
            "output": vm.output_lines(),
            "clock": vm.clock(),
            "error": result.as_ref().err().map(ToString::to_string),
        }));
    } else {
        for l in vm.output_lines() {
            out!("{l}");
        }
    }
    result
}

fn cmd_node(config: NodeConfig) -> Res {
    let node = Node::bind(config).map_err(|e| CliError::Io(e.to_string()))?;
    let addr = node.local_addr().map_err(|e| CliError::Io(e.to_string()))?;
    out!("listening on {addr}");
    let _ = io::stdout().flush();
    node.serve().map_err(|e: NodeError| CliError::Io(e.to_string()))
}

fn dispatch(cmd: Cmd) -> Res {
    match cmd {
        Cmd::Asm { input, output } => write(&output, &encode_program(&load(&input)?)),
        Cmd::Verify { input, json } => cmd_verify(&input, json),
        Cmd::Instrument {
            input,
            output,
            text,
            report,
            json,
        } => cmd_instrument(&input, &output, text, report, json),
        Cmd::Run {
            input,
            quantum,
            instrumented,
            trace,
            json,
        } => cmd_run(&input, quantum, instrumented, trace.as_deref(), json),
        Cmd::Snapshot {
            input,
            at,
            output,
            entity,
            quantum,
            json,
        } => cmd_snapshot(&input, at, &output, &entity, quantum, json),
        Cmd::Restore {
            input,
            image,
            quantum,
            inspect,
            json,
        } => cmd_restore(&input, &image, quantum, inspect, json),
        Cmd::Node {
            listen,
            auto_resume,
            quantum,
            throttle_us,
            inject_fault,
        } => cmd_node(NodeConfig {
            listen,
            auto_resume: matches!(auto_resume, OnOff::On),
            quantum,
            throttle: Duration::from_micros(throttle_us),
            fault: inject_fault.map(|InjectFault::CorruptImage| Fault::CorruptImage),
            ..NodeConfig::default()
        }),
        Cmd::Submit {
            input,
            node,
            entity,
            start,
            json,
        } => {
            let p = instrumented(load(&input)?)?;
            let mut c = Client::connect(&node)?;
            let id = c.submit(&entity, encode_program(&p))?;
            let state = if start {
                Some(c.control(&id, ControlOp::Start)?)
            } else {
                None
            };
            if json {
                print_json(&json!({ "entity": id, "state": state }));
            } else {
                out!("{id}");
            }
            Ok(())
        }
        Cmd::Control {
            op,
            node,
            entity,
            json,
        } => {
            let op = match op {
                Op::Start => ControlOp::Start,
                Op::Stop => ControlOp::Stop,
                Op::Suspend => ControlOp::Suspend,
                Op::Resume => ControlOp::Resume,
            };
            let state = Client::connect(&node)?.control(&entity, op)?;
            if json {
                print_json(&json!({ "entity": entity, "state": state }));
            } else {
                out!("{entity} {state}");
            }
            Ok(())
        }
        Cmd::Migrate {
            from,
            entity,
            to,
            json,
        } => {
            let image_bytes = Client::connect(&from)?.migrate(&entity, &to)?;
            if json {
                print_json(&json!({ "entity": entity, "destination": to, "imageBytes": image_bytes }));
            } else {
                out!("{entity} moved to {to} ({image_bytes} byte image)");
            }
            Ok(())
        }
        Cmd::Output { node, entity, json } => {
            let (state, lines) = Client::connect(&node)?.output(&entity)?;
            if json {
                print_json(&json!({ "entity": entity, "state": state, "output": lines }));
            } else {
                for l in lines {
                    out!("{l}");
                }
            }
            Ok(())
        }
        Cmd::Status { node, entity, json } => {
            let entities = Client::connect(&node)?.status(&entity)?;
            if json {
                print_json(&json!({ "entities": entities }));
            } else {
                for e in entities {
                    out!(
                        "{:<16} {:<14} clock={} instructions={} lines={}",
                        e.entity, e.state, e.clock, e.instructions, e.output_lines
                    );
                }
            }
            Ok(())
        }
        Cmd::Bench {
            suite,
            wall_clock,
            json,
            quantum,
            no_migrate,
        } => {
            let opts = BenchOptions {
                quantum,
                wall_clock,
                migrate: !no_migrate,
            };
            let results = run_suite(&suite, &opts).map_err(|e| CliError::Io(format!("{}: {e}", suite.display())))?;
            out!("{}", render_report(&results).trim_end());
            if let Some(path) = json {
                let s = serde_json::to_string_pretty(&results).expect("results serialize");
                write(&path, s.as_bytes())?;
            }
            let broken = results
                .iter()
                .filter(|r| r.failed.is_some() || !r.static_identity_holds || !r.dynamic_identity_holds)
                .count();
            if broken > 0 {
                return Err(domain(format!("{broken} program(s) failed or broke an identity")));
            }
            Ok(())
        }
    }
}

fn emit(line: std::fmt::Arguments) {
    if let Err(e) = writeln!(io::stdout().lock(), "{line}") {
        if e.kind() == io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("mvm: stdout: {e}");
        std::process::exit(2);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mvm: {e}");
            match e {
                CliError::Domain(_) => ExitCode::from(1),
                CliError::Io(_) => ExitCode::from(2),
            }
        }
    }
}
