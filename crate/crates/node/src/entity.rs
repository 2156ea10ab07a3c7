use std::fmt;

use mvm::isa::Program;
use mvm::vm::VmInstance;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum ShellState {
    Loaded = 1,
    Running = 2,
    Suspended = 3,
    MigratingOut = 4,
    Imported = 5,
    Done = 6,
    Failed = 7,
}

impl ShellState {
    pub fn from_u8(v: u8) -> Option<Self> {
        use ShellState::*;
        Some(match v {
            1 => Loaded,
            2 => Running,
            3 => Suspended,
            4 => MigratingOut,
            5 => Imported,
            6 => Done,
            7 => Failed,
            _ => return None,
        })
    }

    pub fn can_become(self, to: ShellState) -> bool {
        use ShellState::*;
        matches!(
            (self, to),
            (Loaded, Running)
                | (Running, Suspended)
                | (Suspended, Running)
                | (Suspended, MigratingOut)
                | (MigratingOut, Done)
                // a failed transfer hands the entity back
                | (MigratingOut, Running)
                | (MigratingOut, Suspended)
                | (Imported, Running)
                | (Running | Suspended, Done | Failed)
        )
    }

    /// The node still holds a VM that may run again.
    pub fn is_active(self) -> bool {
        !matches!(self, ShellState::Done | ShellState::Failed)
    }
}

impl fmt::Display for ShellState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ShellState::Loaded => "LOADED",
            ShellState::Running => "RUNNING",
            ShellState::Suspended => "SUSPENDED",
            ShellState::MigratingOut => "MIGRATING_OUT",
            ShellState::Imported => "IMPORTED",
            ShellState::Done => "DONE",
            ShellState::Failed => "FAILED",
        };
        f.pad(s)
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct IllegalTransition {
    pub from: ShellState,
    pub to: ShellState,
}

impl fmt::Display for IllegalTransition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cannot go from {} to {}", self.from, self.to)
    }
}

pub struct EntityRecord {
    pub id: String,
    state: ShellState,
    pub program: Program,
    /// Dropped once the entity leaves this node or stops.
    pub vm: Option<VmInstance>,
    /// Output, clock and instruction count of the VM this record no longer holds.
    retired_output: Vec<String>,
    retired_clock: u64,
    retired_instructions: u64,
    pub failure: Option<String>,
}

impl EntityRecord {
    pub fn new(id: String, program: Program, vm: VmInstance, state: ShellState) -> Self {
        EntityRecord {
            id,
            state,
            program,
            vm: Some(vm),
            retired_output: Vec::new(),
            retired_clock: 0,
            retired_instructions: 0,
            failure: None,
        }
    }

    pub fn state(&self) -> ShellState {
        self.state
    }

    pub fn transition(&mut self, to: ShellState) -> Result<(), IllegalTransition> {
        if !self.state.can_become(to) {
            return Err(IllegalTransition {
                from: self.state,
                to,
            });
        }
        self.state = to;
        if !to.is_active() {
            self.discard_vm();
        }
        Ok(())
    }

    pub fn discard_vm(&mut self) {
        if let Some(vm) = self.vm.take() {
            self.retired_output = vm.output_lines();
            self.retired_clock = vm.clock();
            self.retired_instructions = vm.stats().instructions;
        }
    }

    /// Virtual clock and executed instructions.
    pub fn progress(&self) -> (u64, u64) {
        match &self.vm {
            Some(vm) => (vm.clock(), vm.stats().instructions),
            None => (self.retired_clock, self.retired_instructions),
        }
    }

    pub fn output(&self) -> Vec<String> {
        match &self.vm {
            Some(vm) => vm.output_lines(),
            None => self.retired_output.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ShellState::*;

    const ALL: [ShellState; 7] = [Loaded, Running, Suspended, MigratingOut, Imported, Done, Failed];

    #[test]
    fn terminal_states_are_final() {
        for to in ALL {
            assert!(!Done.can_become(to));
            assert!(!Failed.can_become(to));
        }
    }

    #[test]
    fn imported_only_resumes() {
        let next: Vec<_> = ALL.into_iter().filter(|&s| Imported.can_become(s)).collect();
        assert_eq!(next, [Running]);
    }

    #[test]
    fn wire_values_round_trip() {
        for s in ALL {
            assert_eq!(ShellState::from_u8(s as u8), Some(s));
        }
        assert_eq!(ShellState::from_u8(0), None);
    }
}
