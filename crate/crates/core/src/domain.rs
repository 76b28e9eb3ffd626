//! Fixed name tables shared by the corpus, prompts and heads.

use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// Cell classes in label order.
pub const CLASS_NAMES: [&str; 4] = ["rbc", "wbc", "parasite", "sickle"];

/// Scene-level disease tags.
pub const DISEASES: [&str; 4] = ["normal", "malaria", "sickle-cell", "leukemia"];

/// Morphology flags in label order.
pub const MORPH_NAMES: [&str; 6] = [
    "dark_nucleus",
    "enlarged",
    "granular",
    "pale",
    "elongated",
    "vacuolated",
];

pub const RBC: usize = 0;
pub const WBC: usize = 1;
pub const PARASITE: usize = 2;
pub const SICKLE: usize = 3;

pub const FLAG_DARK_NUCLEUS: usize = 0;
pub const FLAG_ENLARGED: usize = 1;
pub const FLAG_GRANULAR: usize = 2;
pub const FLAG_PALE: usize = 3;
pub const FLAG_ELONGATED: usize = 4;
pub const FLAG_VACUOLATED: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Det,
    Seg,
    Cls,
    Vqa,
    Mlm,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Det, Task::Seg, Task::Cls, Task::Vqa, Task::Mlm];

    pub fn name(self) -> &'static str {
        match self {
            Task::Det => "det",
            Task::Seg => "seg",
            Task::Cls => "cls",
            Task::Vqa => "vqa",
            Task::Mlm => "mlm",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                ModelError::Usage(format!(
                    "unknown task {s:?}; expected one of det, seg, cls, vqa, mlm"
                ))
            })
    }

    /// Tasks whose images are single centred cells.
    pub fn single_cell(self) -> bool {
        matches!(self, Task::Cls | Task::Vqa | Task::Mlm)
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn disease_index(name: &str) -> Result<usize> {
    DISEASES
        .iter()
        .position(|&d| d == name)
        .ok_or_else(|| ModelError::Data(format!("unknown disease {name:?}")))
}

pub fn class_index(name: &str) -> Result<usize> {
    CLASS_NAMES
        .iter()
        .position(|&c| c == name)
        .ok_or_else(|| ModelError::Data(format!("unknown cell class {name:?}")))
}
