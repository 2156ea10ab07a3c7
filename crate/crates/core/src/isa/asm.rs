//! Text assembly: parser with label resolution and multi-error diagnostics, and the emitter
//! that renders a [`Program`] back to source.
//!
//! ```text
//! .class Node val next
//! .global total
//! .method main 0 2
//!     CONST 0
//!     STORE 0
//! loop:
//!     INVOKE work 0 -> 1
//!     JMP loop
//! .end
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

use super::instr::{Instr, Local, Pc};
use super::program::{MethodDef, Program, ProgramError};
use super::value::{ObjRef, Value};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum DiagCode {
    UnknownMnemonic,
    UndefinedLabel,
    DuplicateLabel,
    DuplicateMethod,
    DuplicateClass,
    DuplicateGlobal,
    ArityMismatch,
    BadOperand,
    BadString,
    UnknownDirective,
    OutsideMethod,
    UnterminatedMethod,
    NoEntryMethod,
    EntryHasParams,
    InvalidProgram,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub code: DiagCode,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {:?}: {}", self.line, self.column, self.code, self.message)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Word(String),
    Int(i64),
    Str(String),
    Arrow,
    Colon,
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    col: usize,
}

fn tokenize(line: &str, line_no: usize, diags: &mut Vec<Diagnostic>) -> Option<Vec<Token>> {
    let chars: Vec<char> = line.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c == '#' {
            break;
        } else if c == ':' {
            out.push(Token { tok: Tok::Colon, col });
            i += 1;
        } else if c == '-' && chars.get(i + 1) == Some(&'>') {
            out.push(Token { tok: Tok::Arrow, col });
            i += 2;
        } else if c == '"' {
            let mut s = String::new();
            i += 1;
            let mut closed = false;
            while i < chars.len() {
                match chars[i] {
                    '"' => {
                        closed = true;
                        i += 1;
                        break;
                    }
                    '\\' => {
                        let esc = chars.get(i + 1).copied();
                        let ch = match esc {
                            Some('n') => '\n',
                            Some('t') => '\t',
                            Some('r') => '\r',
                            Some('"') => '"',
                            Some('\\') => '\\',
                            _ => {
                                diags.push(Diagnostic {
                                    code: DiagCode::BadString,
                                    line: line_no,
                                    column: i + 1,
                                    message: "invalid escape sequence".into(),
                                });
                                return None;
                            }
                        };
                        s.push(ch);
                        i += 2;
                    }
                    ch => {
                        s.push(ch);
                        i += 1;
                    }
                }
            }
            if !closed {
                diags.push(Diagnostic {
                    code: DiagCode::BadString,
                    line: line_no,
                    column: col,
                    message: "unterminated string literal".into(),
                });
                return None;
            }
            out.push(Token { tok: Tok::Str(s), col });
        } else {
            let start = i;
            while i < chars.len()
                && !chars[i].is_whitespace()
                && chars[i] != ':'
                && chars[i] != '#'
                && chars[i] != '"'
                && !(chars[i] == '-' && chars.get(i + 1) == Some(&'>'))
            {
                i += 1;
            }
            if i == start {
                // Lone '-' not followed by '>' or digits.
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let tok = match word.parse::<i64>() {
                Ok(n) => Tok::Int(n),
                Err(_) => Tok::Word(word),
            };
            out.push(Token { tok, col });
        }
    }
    Some(out)
}

#[derive(Debug)]
enum Target {
    Label(String),
    Pc(Pc),
}

struct PendingMethod {
    name: String,
    param_count: u16,
    local_count: u16,
    instrumented: bool,
    line: usize,
    code: Vec<Instr>,
    labels: HashMap<String, Pc>,
    /// (pc, operand index within the instruction, target, line, column)
    fixups: Vec<(usize, usize, Target, usize, usize)>,
}

struct Parser {
    diags: Vec<Diagnostic>,
    line: usize,
}

impl Parser {
    fn err(&mut self, code: DiagCode, col: usize, message: impl Into<String>) {
        self.diags.push(Diagnostic {
            code,
            line: self.line,
            column: col,
            message: message.into(),
        });
    }

    fn local(&mut self, t: &Token) -> Option<Local> {
        match t.tok {
            Tok::Int(n) if (0..=u16::MAX as i64).contains(&n) => Some(n as Local),
            _ => {
                self.err(DiagCode::BadOperand, t.col, "expected a local slot index");
                None
            }
        }
    }

    fn ident(&mut self, t: &Token, what: &str) -> Option<String> {
        match &t.tok {
            Tok::Word(w) if is_ident(w) => Some(w.clone()),
            _ => {
                self.err(DiagCode::BadOperand, t.col, format!("expected {what} name"));
                None
            }
        }
    }

    fn target(&mut self, t: &Token) -> Option<Target> {
        match &t.tok {
            Tok::Word(w) if is_ident(w) => Some(Target::Label(w.clone())),
            Tok::Int(n) if (0..=u32::MAX as i64).contains(n) => Some(Target::Pc(*n as Pc)),
            _ => {
                self.err(DiagCode::BadOperand, t.col, "expected a label or pc");
                None
            }
        }
    }

    fn literal(&mut self, t: &Token) -> Option<Value> {
        match &t.tok {
            Tok::Int(n) => Some(Value::Int(*n)),
            Tok::Str(s) => Some(Value::Str(s.clone())),
            Tok::Word(w) if w == "true" => Some(Value::Bool(true)),
            Tok::Word(w) if w == "false" => Some(Value::Bool(false)),
            Tok::Word(w) if w == "null" => Some(Value::Null),
            Tok::Word(w) if w.starts_with('@') => match w[1..].parse::<u32>() {
                Ok(r) => Some(Value::Ref(ObjRef(r))),
                Err(_) => {
                    self.err(DiagCode::BadOperand, t.col, "invalid reference literal");
                    None
                }
            },
            _ => {
                self.err(DiagCode::BadOperand, t.col, "expected a literal value");
                None
            }
        }
    }

    fn arity(&mut self, mnemonic: &str, col: usize, ops: &[Token], n: usize) -> bool {
        if ops.len() != n {
            self.err(
                DiagCode::ArityMismatch,
                col,
                format!("{mnemonic} takes {n} operand(s), found {}", ops.len()),
            );
            false
        } else {
            true
        }
    }

    /// `<method> <arg>* [-> <local>]`
    fn call_operands(
        &mut self,
        mnemonic: &str,
        col: usize,
        ops: &[Token],
    ) -> Option<(String, Vec<Local>, Option<Local>)> {
        if ops.is_empty() {
            self.err(DiagCode::ArityMismatch, col, format!("{mnemonic} needs a method name"));
            return None;
        }
        let method = self.ident(&ops[0], "method")?;
        let rest = &ops[1..];
        let (args, ret) = match rest.iter().position(|t| t.tok == Tok::Arrow) {
            Some(p) => {
                if rest.len() != p + 2 {
                    self.err(
                        DiagCode::ArityMismatch,
                        rest[p].col,
                        "`->` must be followed by exactly one local",
                    );
                    return None;
                }
                (&rest[..p], Some(self.local(&rest[p + 1])?))
            }
            None => (rest, None),
        };
        let mut locals = Vec::with_capacity(args.len());
        for a in args {
            locals.push(self.local(a)?);
        }
        Some((method, locals, ret))
    }

    fn instruction(
        &mut self,
        toks: &[Token],
        method: &mut PendingMethod,
    ) -> Option<Instr> {
        let head = &toks[0];
        let Tok::Word(mn) = &head.tok else {
            self.err(DiagCode::UnknownMnemonic, head.col, "expected an instruction mnemonic");
            return None;
        };
        let mn = mn.to_ascii_uppercase();
        // `NEWOBJ C -> 0` and `NEWOBJ C 0` are the same; the arrow only marks the destination.
        let stripped: Vec<Token>;
        let ops = match toks[1..].len() {
            n if n >= 2
                && matches!(mn.as_str(), "NEWOBJ" | "GETFIELD" | "GETGLOBAL")
                && toks[n - 1].tok == Tok::Arrow =>
            {
                stripped = toks[1..n - 1].iter().chain(&toks[n..]).cloned().collect();
                &stripped[..]
            }
            _ => &toks[1..],
        };
        let col = head.col;
        let pc = method.code.len();
        macro_rules! one_local {
            ($ctor:path) => {{
                if !self.arity(&mn, col, ops, 1) {
                    return None;
                }
                $ctor(self.local(&ops[0])?)
            }};
        }
        macro_rules! nullary {
            ($v:expr) => {{
                if !self.arity(&mn, col, ops, 0) {
                    return None;
                }
                $v
            }};
        }
        let instr = match mn.as_str() {
            "CONST" => {
                if !self.arity(&mn, col, ops, 1) {
                    return None;
                }
                Instr::Const(self.literal(&ops[0])?)
            }
            "LOAD" => one_local!(Instr::Load),
            "STORE" => one_local!(Instr::Store),
            "ADD" => nullary!(Instr::Add),
            "SUB" => nullary!(Instr::Sub),
            "MUL" => nullary!(Instr::Mul),
            "DIV" => nullary!(Instr::Div),
            "MOD" => nullary!(Instr::Mod),
            "EQ" => nullary!(Instr::Eq),
            "LT" => nullary!(Instr::Lt),
            "LE" => nullary!(Instr::Le),
            "NOT" => nullary!(Instr::Not),
            "AND" => nullary!(Instr::And),
            "OR" => nullary!(Instr::Or),
            "JMP" | "JMPIF" => {
                if !self.arity(&mn, col, ops, 1) {
                    return None;
                }
                let t = self.target(&ops[0])?;
                method.fixups.push((pc, 0, t, self.line, ops[0].col));
                if mn == "JMP" {
                    Instr::Jmp(0)
                } else {
                    Instr::JmpIf(0)
                }
            }
            "INVOKE" => {
                let (method, args, ret) = self.call_operands(&mn, col, ops)?;
                Instr::Invoke { method, args, ret }
            }
            "SPAWN" => {
                let (method, args, dst) = self.call_operands(&mn, col, ops)?;
                Instr::Spawn { method, args, dst }
            }
            "RETURN" => match ops.len() {
                0 => Instr::Return(None),
                1 => Instr::Return(Some(self.local(&ops[0])?)),
                n => {
                    self.err(
                        DiagCode::ArityMismatch,
                        col,
                        format!("RETURN takes 0 or 1 operand, found {n}"),
                    );
                    return None;
                }
            },
            "NEWOBJ" => {
                if !self.arity(&mn, col, ops, 2) {
                    return None;
                }
                Instr::NewObj {
                    class: self.ident(&ops[0], "class")?,
                    dst: self.local(&ops[1])?,
                }
            }
            "GETFIELD" => {
                if !self.arity(&mn, col, ops, 3) {
                    return None;
                }
                Instr::GetField {
                    obj: self.local(&ops[0])?,
                    field: self.ident(&ops[1], "field")?,
                    dst: self.local(&ops[2])?,
                }
            }
            "PUTFIELD" => {
                if !self.arity(&mn, col, ops, 3) {
                    return None;
                }
                Instr::PutField {
                    obj: self.local(&ops[0])?,
                    field: self.ident(&ops[1], "field")?,
                    src: self.local(&ops[2])?,
                }
            }
            "GETGLOBAL" => {
                if !self.arity(&mn, col, ops, 2) {
                    return None;
                }
                Instr::GetGlobal {
                    name: self.ident(&ops[0], "global")?,
                    dst: self.local(&ops[1])?,
                }
            }
            "PUTGLOBAL" => {
                if !self.arity(&mn, col, ops, 2) {
                    return None;
                }
                Instr::PutGlobal {
                    name: self.ident(&ops[0], "global")?,
                    src: self.local(&ops[1])?,
                }
            }
            "MENTER" => one_local!(Instr::MEnter),
            "MEXIT" => one_local!(Instr::MExit),
            "MWAIT" => one_local!(Instr::MWait),
            "MNOTIFY" => one_local!(Instr::MNotify),
            "MNOTIFYALL" => one_local!(Instr::MNotifyAll),
            "SLEEP" => one_local!(Instr::Sleep),
            "PRINT" => one_local!(Instr::Print),
            "CHECKPOINT" => nullary!(Instr::Checkpoint),
            "APCINIT" => nullary!(Instr::ApcInit),
            "APCSET" => {
                if !self.arity(&mn, col, ops, 1) {
                    return None;
                }
                match ops[0].tok {
                    Tok::Int(k) if (0..=u32::MAX as i64).contains(&k) => Instr::ApcSet(k as u32),
                    _ => {
                        self.err(DiagCode::BadOperand, ops[0].col, "APCSET needs k >= 0");
                        return None;
                    }
                }
            }
            "DISPATCH" => {
                for (idx, op) in ops.iter().enumerate() {
                    let t = self.target(op)?;
                    method.fixups.push((pc, idx, t, self.line, op.col));
                }
                Instr::Dispatch(vec![0; ops.len()])
            }
            "MINVOKE_ENTER" => one_local!(Instr::MInvokeEnter),
            "MINVOKE_EXIT" => one_local!(Instr::MInvokeExit),
            "MINVOKE_WAIT" => one_local!(Instr::MInvokeWait),
            "MINVOKE_NOTIFY" => one_local!(Instr::MInvokeNotify),
            "MINVOKE_NOTIFYALL" => one_local!(Instr::MInvokeNotifyAll),
            _ => {
                self.err(
                    DiagCode::UnknownMnemonic,
                    col,
                    format!("unknown mnemonic `{}`", toks_word(head)),
                );
                return None;
            }
        };
        Some(instr)
    }

    fn finish_method(&mut self, mut m: PendingMethod) -> MethodDef {
        for (pc, idx, target, line, col) in std::mem::take(&mut m.fixups) {
            let resolved = match target {
                Target::Pc(p) => p,
                Target::Label(l) => match m.labels.get(&l) {
                    Some(p) => *p,
                    None => {
                        self.diags.push(Diagnostic {
                            code: DiagCode::UndefinedLabel,
                            line,
                            column: col,
                            message: format!("undefined label `{l}`"),
                        });
                        continue;
                    }
                },
            };
            if let Some(slot) = m.code[pc].branch_targets_mut().into_iter().nth(idx) {
                *slot = resolved;
            }
        }
        MethodDef::new(m.name, m.param_count, m.local_count, m.code, m.instrumented)
    }
}

fn toks_word(t: &Token) -> String {
    match &t.tok {
        Tok::Word(w) => w.clone(),
        Tok::Int(n) => n.to_string(),
        Tok::Str(s) => format!("{s:?}"),
        Tok::Arrow => "->".into(),
        Tok::Colon => ":".into(),
    }
}

fn is_ident(w: &str) -> bool {
    let mut chars = w.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

/// Parses assembly source. On failure every diagnostic found is returned, not only the first.
pub fn parse_assembly(src: &str) -> Result<Program, Vec<Diagnostic>> {
    let mut p = Parser {
        diags: Vec::new(),
        line: 0,
    };
    let mut classes: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut globals: Vec<String> = Vec::new();
    let mut methods: BTreeMap<String, MethodDef> = BTreeMap::new();
    let mut entry: Option<(String, usize)> = None;
    let mut current: Option<PendingMethod> = None;

    for (idx, raw) in src.lines().enumerate() {
        p.line = idx + 1;
        let Some(mut toks) = tokenize(raw, p.line, &mut p.diags) else {
            continue;
        };
        if toks.is_empty() {
            continue;
        }

        // Leading `label:`.
        if toks.len() >= 2 && toks[1].tok == Tok::Colon {
            let label_tok = toks[0].clone();
            toks.drain(..2);
            match (&label_tok.tok, current.as_mut()) {
                (Tok::Word(w), Some(m)) if is_ident(w) => {
                    let pc = m.code.len() as Pc;
                    if m.labels.insert(w.clone(), pc).is_some() {
                        p.err(
                            DiagCode::DuplicateLabel,
                            label_tok.col,
                            format!("label `{w}` defined twice"),
                        );
                    }
                }
                (Tok::Word(_), None) => {
                    p.err(DiagCode::OutsideMethod, label_tok.col, "label outside of a method");
                }
                _ => p.err(DiagCode::BadOperand, label_tok.col, "invalid label name"),
            }
            if toks.is_empty() {
                continue;
            }
        }

        let head = toks[0].clone();
        let word = match &head.tok {
            Tok::Word(w) => w.clone(),
            _ => {
                p.err(DiagCode::UnknownMnemonic, head.col, "expected a directive or mnemonic");
                continue;
            }
        };

        if let Some(directive) = word.strip_prefix('.') {
            let args = &toks[1..];
            match directive {
                "method" => {
                    if let Some(m) = current.take() {
                        p.err(
                            DiagCode::UnterminatedMethod,
                            head.col,
                            format!("method `{}` is missing `.end`", m.name),
                        );
                        let def = p.finish_method(m);
                        methods.entry(def.name.clone()).or_insert(def);
                    }
                    if !(3..=4).contains(&args.len()) {
                        p.err(
                            DiagCode::ArityMismatch,
                            head.col,
                            ".method takes <name> <paramCount> <localCount> [instrumented]",
                        );
                        continue;
                    }
                    let Some(name) = p.ident(&args[0], "method") else { continue };
                    let counts: Vec<Option<u16>> = args[1..3]
                        .iter()
                        .map(|t| match t.tok {
                            Tok::Int(n) if (0..=u16::MAX as i64).contains(&n) => Some(n as u16),
                            _ => None,
                        })
                        .collect();
                    let (Some(param_count), Some(local_count)) = (counts[0], counts[1]) else {
                        p.err(DiagCode::BadOperand, args[1].col, "counts must be integers 0..65535");
                        continue;
                    };
                    let instrumented = match args.get(3).map(|t| &t.tok) {
                        None => false,
                        Some(Tok::Word(w)) if w == "instrumented" => true,
                        Some(_) => {
                            p.err(DiagCode::BadOperand, args[3].col, "expected `instrumented`");
                            false
                        }
                    };
                    if methods.contains_key(&name) {
                        p.err(
                            DiagCode::DuplicateMethod,
                            args[0].col,
                            format!("method `{name}` defined twice"),
                        );
                    }
                    current = Some(PendingMethod {
                        name,
                        param_count,
                        local_count,
                        instrumented,
                        line: p.line,
                        code: Vec::new(),
                        labels: HashMap::new(),
                        fixups: Vec::new(),
                    });
                }
                "end" => match current.take() {
                    Some(m) => {
                        let def = p.finish_method(m);
                        methods.entry(def.name.clone()).or_insert(def);
                    }
                    None => p.err(DiagCode::OutsideMethod, head.col, "`.end` without `.method`"),
                },
                "class" => {
                    if args.is_empty() {
                        p.err(DiagCode::ArityMismatch, head.col, ".class needs a name");
                        continue;
                    }
                    let Some(name) = p.ident(&args[0], "class") else { continue };
                    let mut fields = Vec::new();
                    for t in &args[1..] {
                        if let Some(f) = p.ident(t, "field") {
                            if fields.contains(&f) {
                                p.err(DiagCode::BadOperand, t.col, format!("duplicate field `{f}`"));
                            } else {
                                fields.push(f);
                            }
                        }
                    }
                    if classes.insert(name.clone(), fields).is_some() {
                        p.err(
                            DiagCode::DuplicateClass,
                            args[0].col,
                            format!("class `{name}` defined twice"),
                        );
                    }
                }
                "global" => {
                    if args.is_empty() {
                        p.err(DiagCode::ArityMismatch, head.col, ".global needs at least one name");
                    }
                    for t in args {
                        if let Some(g) = p.ident(t, "global") {
                            if globals.contains(&g) {
                                p.err(
                                    DiagCode::DuplicateGlobal,
                                    t.col,
                                    format!("global `{g}` declared twice"),
                                );
                            } else {
                                globals.push(g);
                            }
                        }
                    }
                }
                "entry" => {
                    if !p.arity(".entry", head.col, args, 1) {
                        continue;
                    }
                    if let Some(name) = p.ident(&args[0], "method") {
                        entry = Some((name, p.line));
                    }
                }
                other => p.err(
                    DiagCode::UnknownDirective,
                    head.col,
                    format!("unknown directive `.{other}`"),
                ),
            }
            continue;
        }

        match current.as_mut() {
            Some(m) => {
                if let Some(i) = p.instruction(&toks, m) {
                    m.code.push(i);
                }
            }
            None => p.err(DiagCode::OutsideMethod, head.col, "instruction outside of a method"),
        }
    }

    if let Some(m) = current.take() {
        let line = m.line;
        p.diags.push(Diagnostic {
            code: DiagCode::UnterminatedMethod,
            line,
            column: 1,
            message: format!("method `{}` is missing `.end`", m.name),
        });
        let def = p.finish_method(m);
        methods.entry(def.name.clone()).or_insert(def);
    }

    let (entry, entry_line) = entry.unwrap_or_else(|| ("main".to_string(), 1));
    let program = Program::new(classes, globals, methods, entry);
    let mut diags = p.diags;
    let program = match program {
        Ok(prog) => Some(prog),
        Err(e) => {
            let code = match e {
                ProgramError::NoEntryMethod(_) => DiagCode::NoEntryMethod,
                ProgramError::EntryHasParams(_) => DiagCode::EntryHasParams,
                _ => DiagCode::InvalidProgram,
            };
            diags.push(Diagnostic {
                code,
                line: entry_line,
                column: 1,
                message: e.to_string(),
            });
            None
        }
    };
    if diags.is_empty() {
        Ok(program.expect("no diagnostics implies a program"))
    } else {
        diags.sort_by_key(|d| (d.line, d.column));
        Err(diags)
    }
}

/// Renders one instruction; `target` names branch targets.
pub fn render_instr(i: &Instr, target: &dyn Fn(Pc) -> String) -> String {
    use Instr::*;
    let mn = i.mnemonic();
    let call = |method: &str, args: &[Local], ret: &Option<Local>| {
        let mut s = format!("{mn} {method}");
        for a in args {
            s.push_str(&format!(" {a}"));
        }
        if let Some(r) = ret {
            s.push_str(&format!(" -> {r}"));
        }
        s
    };
    match i {
        Const(v) => format!("{mn} {}", v.to_literal()),
        Load(l) | Store(l) | MEnter(l) | MExit(l) | MWait(l) | MNotify(l) | MNotifyAll(l)
        | Sleep(l) | Print(l) | MInvokeEnter(l) | MInvokeExit(l) | MInvokeWait(l)
        | MInvokeNotify(l) | MInvokeNotifyAll(l) => format!("{mn} {l}"),
        Add | Sub | Mul | Div | Mod | Eq | Lt | Le | Not | And | Or | Checkpoint | ApcInit => {
            mn.to_string()
        }
        Jmp(t) | JmpIf(t) => format!("{mn} {}", target(*t)),
        Invoke { method, args, ret } => call(method, args, ret),
        Spawn { method, args, dst } => call(method, args, dst),
        Return(None) => mn.to_string(),
        Return(Some(l)) => format!("{mn} {l}"),
        NewObj { class, dst } => format!("{mn} {class} -> {dst}"),
        GetField { obj, field, dst } => format!("{mn} {obj} {field} -> {dst}"),
        PutField { obj, field, src } => format!("{mn} {obj} {field} {src}"),
        GetGlobal { name, dst } => format!("{mn} {name} -> {dst}"),
        PutGlobal { name, src } => format!("{mn} {name} {src}"),
        ApcSet(k) => format!("{mn} {k}"),
        Dispatch(table) => {
            let mut s = mn.to_string();
            for t in table {
                s.push(' ');
                s.push_str(&target(*t));
            }
            s
        }
    }
}

/// Renders a program as assembly that parses back to an identical [`Program`].
pub fn emit_assembly(p: &Program) -> String {
    let mut out = String::new();
    out.push_str(&format!(".entry {}\n", p.entry));
    for (name, fields) in &p.classes {
        out.push_str(&format!(".class {name}"));
        for f in fields {
            out.push(' ');
            out.push_str(f);
        }
        out.push('\n');
    }
    for g in &p.globals {
        out.push_str(&format!(".global {g}\n"));
    }
    for m in p.methods.values() {
        out.push('\n');
        out.push_str(&format!(".method {} {} {}", m.name, m.param_count, m.local_count));
        if m.instrumented {
            out.push_str(" instrumented");
        }
        out.push('\n');
        let len = m.code.len() as Pc;
        let mut targets: Vec<Pc> = m
            .code
            .iter()
            .flat_map(|i| i.branch_targets())
            .filter(|t| *t <= len)
            .collect();
        targets.sort_unstable();
        targets.dedup();
        let label = |pc: Pc| {
            if pc <= len {
                format!("L{pc}")
            } else {
                pc.to_string()
            }
        };
        for (pc, i) in m.code.iter().enumerate() {
            if targets.binary_search(&(pc as Pc)).is_ok() {
                out.push_str(&format!("L{pc}:\n"));
            }
            out.push_str("    ");
            out.push_str(&render_instr(i, &label));
            out.push('\n');
        }
        if targets.last() == Some(&len) {
            out.push_str(&format!("L{len}:\n"));
        }
        out.push_str(".end\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_unit() {
        let p = parse_assembly(".method main 0 2\n CONST 0\n STORE 0\n RETURN\n.end").unwrap();
        assert_eq!(p.methods.len(), 1);
        assert_eq!(p.methods["main"].code.len(), 3);
    }

    #[test]
    fn undefined_label_points_at_use() {
        let src = ".method main 0 1\n  JMP Lx\n  RETURN\n.end\n";
        let diags = parse_assembly(src).unwrap_err();
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].code, DiagCode::UndefinedLabel);
        assert_eq!((diags[0].line, diags[0].column), (2, 7));
    }

    #[test]
    fn reports_several_distinct_errors() {
        let src = "\
.method main 0 1
  FROB 1
  LOAD
  JMP nowhere
  RETURN
.end
.method main 0 1
  RETURN
.end
";
        let codes: Vec<DiagCode> = parse_assembly(src).unwrap_err().iter().map(|d| d.code).collect();
        assert!(codes.contains(&DiagCode::UnknownMnemonic));
        assert!(codes.contains(&DiagCode::ArityMismatch));
        assert!(codes.contains(&DiagCode::UndefinedLabel));
        assert!(codes.contains(&DiagCode::DuplicateMethod));
    }

    #[test]
    fn empty_source_has_no_entry() {
        let diags = parse_assembly("# nothing\n").unwrap_err();
        assert_eq!(diags[0].code, DiagCode::NoEntryMethod);
    }

    #[test]
    fn call_syntax_and_literals() {
        let src = r#"
.class Pt x y
.global g
.method main 0 4
  CONST "a \"q\"\n"
  STORE 0
  INVOKE f 0 1 -> 2
  SPAWN f 0 1
  NEWOBJ Pt 3
  RETURN
.end
.method f 2 3
  RETURN 1
.end
"#;
        let p = parse_assembly(src).unwrap();
        let main = &p.methods["main"];
        assert_eq!(main.code[0], Instr::Const(Value::Str("a \"q\"\n".into())));
        assert_eq!(
            main.code[2],
            Instr::Invoke {
                method: "f".into(),
                args: vec![0, 1],
                ret: Some(2)
            }
        );
        assert_eq!(
            main.code[3],
            Instr::Spawn {
                method: "f".into(),
                args: vec![0, 1],
                dst: None
            }
        );
        let again = parse_assembly(&emit_assembly(&p)).unwrap();
        assert_eq!(again, p);
    }

    #[test]
    fn labels_resolve_to_pcs() {
        let src = ".method main 0 1\nstart:\n  CONST true\n  JMPIF done\n  JMP start\ndone: RETURN\n.end\n";
        let p = parse_assembly(src).unwrap();
        let code = &p.methods["main"].code;
        assert_eq!(code[1], Instr::JmpIf(3));
        assert_eq!(code[2], Instr::Jmp(0));
    }
}
