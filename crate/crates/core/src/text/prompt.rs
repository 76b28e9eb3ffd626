//! Task prompts and the text templates the synthetic corpus draws from.

use serde::{Deserialize, Serialize};

use crate::domain::{
    CLASS_NAMES, DISEASES, FLAG_DARK_NUCLEUS, FLAG_ELONGATED, FLAG_ENLARGED, FLAG_GRANULAR,
    FLAG_PALE, FLAG_VACUOLATED,
};
use crate::error::{ModelError, Result};

pub const DETECTION_PREFIX: &str = "This image is for the detection of ";
pub const DETECTION_SUFFIX: &str = " of cells.";
pub const VQA_PREFIX: &str = "Q:";
pub const MLM_PREFIX: &str = "mask:";

/// The prompt that selects a task. Detection and segmentation share one
/// rendered template.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskPrompt {
    Detection { disease: String },
    Segmentation { disease: String },
    Vqa { question: String },
    Mlm { masked: String },
    Classification,
}

impl TaskPrompt {
    pub fn render(&self) -> Option<String> {
        match self {
            TaskPrompt::Detection { disease } | TaskPrompt::Segmentation { disease } => {
                Some(format!("{DETECTION_PREFIX}{disease}{DETECTION_SUFFIX}"))
            }
            TaskPrompt::Vqa { question } => Some(question.clone()),
            TaskPrompt::Mlm { masked } => Some(masked.clone()),
            TaskPrompt::Classification => None,
        }
    }

    /// Route raw prompt text by its prefix. No text means classification;
    /// the detection template maps to [`TaskPrompt::Detection`].
    pub fn route(text: Option<&str>) -> Result<TaskPrompt> {
        let Some(text) = text.map(str::trim).filter(|t| !t.is_empty()) else {
            return Ok(TaskPrompt::Classification);
        };
        if let Some(rest) = text.strip_prefix(DETECTION_PREFIX) {
            if let Some(disease) = rest.strip_suffix(DETECTION_SUFFIX) {
                if DISEASES.contains(&disease) {
                    return Ok(TaskPrompt::Detection {
                        disease: disease.to_string(),
                    });
                }
            }
        }
        if text.starts_with(VQA_PREFIX) {
            return Ok(TaskPrompt::Vqa {
                question: text.to_string(),
            });
        }
        if text.starts_with(MLM_PREFIX) {
            return Ok(TaskPrompt::Mlm {
                masked: text.to_string(),
            });
        }
        Err(ModelError::Usage(format!(
            "cannot route prompt {text:?}; expected \"{DETECTION_PREFIX}<disease>{DETECTION_SUFFIX}\", \"{VQA_PREFIX} <question>\" or \"{MLM_PREFIX} <sentence>\""
        )))
    }
}

/// The VQA question set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Question {
    CellClass,
    NucleusShape,
    Flag(usize),
}

impl Question {
    pub const ALL: [Question; 8] = [
        Question::CellClass,
        Question::NucleusShape,
        Question::Flag(FLAG_DARK_NUCLEUS),
        Question::Flag(FLAG_ENLARGED),
        Question::Flag(FLAG_GRANULAR),
        Question::Flag(FLAG_PALE),
        Question::Flag(FLAG_ELONGATED),
        Question::Flag(FLAG_VACUOLATED),
    ];

    pub fn text(self) -> &'static str {
        match self {
            Question::CellClass => "Q: what is the cell class ?",
            Question::NucleusShape => "Q: what is the nucleus shape ?",
            Question::Flag(FLAG_DARK_NUCLEUS) => "Q: is the nucleus dark ?",
            Question::Flag(FLAG_ENLARGED) => "Q: is the cell enlarged ?",
            Question::Flag(FLAG_GRANULAR) => "Q: is the cytoplasm granular ?",
            Question::Flag(FLAG_PALE) => "Q: is the cell pale ?",
            Question::Flag(FLAG_ELONGATED) => "Q: is the cell elongated ?",
            Question::Flag(FLAG_VACUOLATED) => "Q: is the cytoplasm vacuolated ?",
            Question::Flag(_) => unreachable!("six morphology flags"),
        }
    }

    /// The answer for a cell of class `class` with morphology `flags`.
    pub fn answer(self, class: usize, flags: &[bool; 6]) -> String {
        match self {
            Question::CellClass => CLASS_NAMES[class].to_string(),
            Question::NucleusShape => shape_word(flags).to_string(),
            Question::Flag(i) => if flags[i] { "yes" } else { "no" }.to_string(),
        }
    }
}

fn nucleus_word(flags: &[bool; 6]) -> &'static str {
    if flags[FLAG_DARK_NUCLEUS] {
        "dark"
    } else {
        "light"
    }
}

fn cytoplasm_word(flags: &[bool; 6]) -> &'static str {
    if flags[FLAG_GRANULAR] {
        "granular"
    } else if flags[FLAG_VACUOLATED] {
        "vacuolated"
    } else {
        "clear"
    }
}

fn shape_word(flags: &[bool; 6]) -> &'static str {
    if flags[FLAG_ELONGATED] {
        "elongated"
    } else {
        "round"
    }
}

/// Masked-sentence prompt and its completion for one cell.
pub fn mlm_pair(class: usize, flags: &[bool; 6]) -> (String, String) {
    let name = CLASS_NAMES[class];
    let masked = format!(
        "{MLM_PREFIX} the {name} has a <mask> nucleus and <mask> cytoplasm and a <mask> shape."
    );
    let sentence = format!(
        "the {name} has a {} nucleus and {} cytoplasm and a {} shape.",
        nucleus_word(flags),
        cytoplasm_word(flags),
        shape_word(flags)
    );
    (masked, sentence)
}

/// Every text any template can render, used to build the vocabulary.
pub fn template_corpus() -> Vec<String> {
    let mut out = Vec::new();
    for d in DISEASES {
        out.push(format!("{DETECTION_PREFIX}{d}{DETECTION_SUFFIX}"));
    }
    for q in Question::ALL {
        out.push(q.text().to_string());
    }
    out.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
    out.extend(["yes", "no", "round", "elongated"].map(String::from));
    for class in 0..CLASS_NAMES.len() {
        for bits in 0u32..64 {
            let flags: [bool; 6] = std::array::from_fn(|i| bits >> i & 1 == 1);
            let (m, s) = mlm_pair(class, &flags);
            out.push(m);
            out.push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;

    #[test]
    fn detection_template_is_exact() {
        let p = TaskPrompt::Detection {
            disease: "malaria".into(),
        };
        assert_eq!(
            p.render().unwrap(),
            "This image is for the detection of malaria of cells."
        );
        assert_eq!(TaskPrompt::route(p.render().as_deref()).unwrap(), p);
    }

    #[test]
    fn routing_by_prefix() {
        assert_eq!(TaskPrompt::route(None).unwrap(), TaskPrompt::Classification);
        assert!(matches!(
            TaskPrompt::route(Some("Q: is the cell pale ?")),
            Ok(TaskPrompt::Vqa { .. })
        ));
        assert!(matches!(
            TaskPrompt::route(Some("mask: the rbc")),
            Ok(TaskPrompt::Mlm { .. })
        ));
        let err = TaskPrompt::route(Some("hello")).unwrap_err();
        assert!(matches!(err, ModelError::Usage(_)));
        assert!(err.to_string().contains("Q:") && err.to_string().contains("mask:"));
    }

    #[test]
    fn every_template_round_trips() {
        let v = Vocabulary::synthetic();
        for t in template_corpus() {
            assert_eq!(v.detokenize(&v.tokenize(&t).unwrap()).unwrap(), t);
        }
    }

    #[test]
    fn mlm_prompt_masks_three_words() {
        let flags = [true, false, true, false, false, false];
        let (m, s) = mlm_pair(1, &flags);
        assert!(m.starts_with("mask:"));
        assert_eq!(m.matches("<mask>").count(), 3);
        assert_eq!(
            s,
            "the wbc has a dark nucleus and granular cytoplasm and a round shape."
        );
    }
}
