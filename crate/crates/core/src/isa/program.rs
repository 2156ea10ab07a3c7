use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::codec;
use super::instr::{Instr, Local, Pc};

pub const FORMAT_VERSION: u16 = 1;

/// A method body plus the metadata the instrumenter and VM need.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodDef {
    pub name: String,
    pub param_count: u16,
    pub local_count: u16,
    pub code: Vec<Instr>,
    pub instrumented: bool,
    /// pcs of the invoke-class instructions in code order; empty unless instrumented.
    pub invoke_table: Vec<Pc>,
}

impl MethodDef {
    pub fn new(
        name: impl Into<String>,
        param_count: u16,
        local_count: u16,
        code: Vec<Instr>,
        instrumented: bool,
    ) -> Self {
        let mut m = MethodDef {
            name: name.into(),
            param_count,
            local_count,
            code,
            instrumented,
            invoke_table: Vec::new(),
        };
        m.invoke_table = m.compute_invoke_table();
        m
    }

    pub fn compute_invoke_table(&self) -> Vec<Pc> {
        if !self.instrumented {
            return Vec::new();
        }
        self.code
            .iter()
            .enumerate()
            .filter(|(_, i)| i.is_invoke_class())
            .map(|(pc, _)| pc as Pc)
            .collect()
    }

    /// The slot holding the artificial program counter. Only meaningful when instrumented.
    pub fn apc_slot(&self) -> Local {
        self.local_count.saturating_sub(1)
    }
}

/// A complete bytecode unit: classes, globals, methods and the entry point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub format_version: u16,
    pub classes: BTreeMap<String, Vec<String>>,
    pub globals: Vec<String>,
    pub methods: BTreeMap<String, MethodDef>,
    pub entry: String,
    pub content_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("entry method `{0}` is not defined")]
    NoEntryMethod(String),
    #[error("entry method `{0}` must take no parameters")]
    EntryHasParams(String),
    #[error("duplicate global `{0}`")]
    DuplicateGlobal(String),
    #[error("class `{class}` declares field `{field}` twice")]
    DuplicateField { class: String, field: String },
    #[error("method key `{key}` does not match method name `{name}`")]
    MethodNameMismatch { key: String, name: String },
}

impl Program {
    /// Builds a program and stamps its content hash. Fails if the structural invariants do not
    /// hold; bytecode-level checks are the verifier's job.
    pub fn new(
        classes: BTreeMap<String, Vec<String>>,
        globals: Vec<String>,
        methods: BTreeMap<String, MethodDef>,
        entry: impl Into<String>,
    ) -> Result<Self, ProgramError> {
        let mut p = Program {
            format_version: FORMAT_VERSION,
            classes,
            globals,
            methods,
            entry: entry.into(),
            content_hash: [0; 32],
        };
        p.check_structure()?;
        p.rehash();
        Ok(p)
    }

    pub fn check_structure(&self) -> Result<(), ProgramError> {
        let entry = self
            .methods
            .get(&self.entry)
            .ok_or_else(|| ProgramError::NoEntryMethod(self.entry.clone()))?;
        if entry.param_count != 0 {
            return Err(ProgramError::EntryHasParams(self.entry.clone()));
        }
        for (key, m) in &self.methods {
            if key != &m.name {
                return Err(ProgramError::MethodNameMismatch {
                    key: key.clone(),
                    name: m.name.clone(),
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for g in &self.globals {
            if !seen.insert(g) {
                return Err(ProgramError::DuplicateGlobal(g.clone()));
            }
        }
        for (class, fields) in &self.classes {
            let mut seen = std::collections::HashSet::new();
            for f in fields {
                if !seen.insert(f) {
                    return Err(ProgramError::DuplicateField {
                        class: class.clone(),
                        field: f.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Recomputes `content_hash` over the canonical encoding.
    pub fn rehash(&mut self) {
        self.content_hash = codec::hash_body(&codec::encode_body(self));
    }

    pub fn hash_is_valid(&self) -> bool {
        codec::hash_body(&codec::encode_body(self)) == self.content_hash
    }

    pub fn is_instrumented(&self) -> bool {
        !self.methods.is_empty() && self.methods.values().all(|m| m.instrumented)
    }

    pub fn method(&self, name: &str) -> Option<&MethodDef> {
        self.methods.get(name)
    }

    pub fn instruction_count(&self) -> usize {
        self.methods.values().map(|m| m.code.len()).sum()
    }

    pub fn field_index(&self, class: &str, field: &str) -> Option<usize> {
        self.classes.get(class)?.iter().position(|f| f == field)
    }

    pub fn hash_hex(&self) -> String {
        self.content_hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}
