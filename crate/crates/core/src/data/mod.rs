//! Synthetic corpus generation and the on-disk dataset format.

pub mod scene;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{disease_index, Task, CLASS_NAMES, DISEASES, MORPH_NAMES};
use crate::error::{ModelError, Result};
use crate::heads::BoxCxCyWh;
use crate::tensor::io::{load_tensor, save_tensor};
use crate::tensor::Tensor;
use crate::text::{mlm_pair, Question, TaskPrompt, Vocabulary};

pub use scene::{generate_scene, render, CanvasSizes, Cell, Rendered, Scene, Style};

pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed record in {file} at line {line}: {detail}")]
    Malformed {
        file: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("i/o error on {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

impl From<DataError> for ModelError {
    fn from(e: DataError) -> Self {
        ModelError::Data(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io {
                path: path.to_path_buf(),
                detail: e.to_string(),
            }
        }
    }
}

/// The prompt for `task` in a scene tagged `disease`. Question-answering and
/// masked-sentence prompts depend on the cell, so they are built from records.
pub fn make_prompt(task: Task, disease: &str) -> Result<TaskPrompt> {
    disease_index(disease)?;
    let disease = disease.to_string();
    Ok(match task {
        Task::Det => TaskPrompt::Detection { disease },
        Task::Seg => TaskPrompt::Segmentation { disease },
        Task::Cls => TaskPrompt::Classification,
        Task::Vqa => TaskPrompt::Vqa {
            question: Question::CellClass.text().to_string(),
        },
        Task::Mlm => TaskPrompt::Mlm {
            masked: mlm_pair(0, &[false; 6]).0,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    /// Classification cells rendered in the shifted colour regime.
    Shift,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Shift => "shift",
        }
    }
}

/// Ground truth; the variant always matches the record's task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Det {
        boxes: Vec<BoxCxCyWh>,
        classes: Vec<usize>,
        morph: Vec<[bool; 6]>,
    },
    Seg {
        height: usize,
        width: usize,
        /// Alternating run lengths over the row-major mask, background first.
        rle: Vec<usize>,
    },
    Cls {
        class: usize,
    },
    Vqa {
        answer: String,
    },
    Mlm {
        sentence: String,
    },
}

impl Target {
    pub fn task(&self) -> Task {
        match self {
            Target::Det { .. } => Task::Det,
            Target::Seg { .. } => Task::Seg,
            Target::Cls { .. } => Task::Cls,
            Target::Vqa { .. } => Task::Vqa,
            Target::Mlm { .. } => Task::Mlm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub task: Task,
    pub split: Split,
    /// Relative to the dataset root.
    pub image: String,
    pub disease: String,
    pub prompt: TaskPrompt,
    pub target: Target,
}

impl SampleRecord {
    /// Schema check beyond what serde enforces.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.target.task() != self.task {
            return Err(format!(
                "target kind {} does not match task {}",
                self.target.task(),
                self.task
            ));
        }
        let prompt_ok = matches!(
            (self.task, &self.prompt),
            (Task::Det, TaskPrompt::Detection { .. })
                | (Task::Seg, TaskPrompt::Segmentation { .. })
                | (Task::Cls, TaskPrompt::Classification)
                | (Task::Vqa, TaskPrompt::Vqa { .. })
                | (Task::Mlm, TaskPrompt::Mlm { .. })
        );
        if !prompt_ok {
            return Err(format!("prompt kind does not match task {}", self.task));
        }
        if !DISEASES.contains(&self.disease.as_str()) {
            return Err(format!("unknown disease {:?}", self.disease));
        }
        match &self.target {
            Target::Det {
                boxes,
                classes,
                morph,
            } => {
                if boxes.len() != classes.len() || boxes.len() != morph.len() {
                    return Err("boxes, classes and morph differ in length".into());
                }
                if classes.iter().any(|&c| c >= CLASS_NAMES.len()) {
                    return Err("class id out of range".into());
                }
            }
            Target::Seg { height, width, rle } => {
                if rle.iter().sum::<usize>() != height * width {
                    return Err("run lengths do not cover the mask".into());
                }
            }
            Target::Cls { class } if *class >= CLASS_NAMES.len() => {
                return Err("class id out of range".into())
            }
            _ => {}
        }
        Ok(())
    }

    pub fn prompt_text(&self) -> Option<String> {
        self.prompt.render()
    }
}

pub fn rle_encode(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut count = 0;
    for &m in mask {
        if m != current {
            runs.push(count);
            count = 0;
            current = m;
        }
        count += 1;
    }
    runs.push(count);
    runs
}

pub fn rle_decode(runs: &[usize]) -> Vec<bool> {
    let mut out = Vec::with_capacity(runs.iter().sum());
    for (i, &r) in runs.iter().enumerate() {
        out.extend(std::iter::repeat_n(i % 2 == 1, r));
    }
    out
}

/// Corpus size and geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    /// Shifted-style classification cells.
    pub shift_cls: usize,
    pub sizes: CanvasSizes,
    pub tasks: Vec<Task>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train_per_task: 256,
            eval_per_task: 64,
            shift_cls: 64,
            sizes: CanvasSizes::default(),
            tasks: Task::ALL.to_vec(),
        }
    }
}

/// Per-sample seed; a pure function of its coordinates in the corpus.
pub fn sample_seed(seed: u64, task: Task, split: Split, index: usize) -> u64 {
    let mut x = seed
        ^ (task as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (split as u64 + 1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (index as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A generated sample before it is written.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: SampleRecord,
    pub image: Tensor,
}

/// Build the record and image for one corpus slot.
pub fn synthesize(cfg: &SynthConfig, task: Task, split: Split, index: usize) -> Sample {
    let seed = sample_seed(cfg.seed, task, split, index);
    let style = if split == Split::Shift {
        Style::Shifted
    } else {
        Style::Standard
    };
    let scene = generate_scene(seed, task, cfg.sizes, style);
    let rendered = render(&scene);
    let id = format!("{}-{}-{index:05}", task.name(), split.name());
    let disease = scene.disease.clone();
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let (prompt, target) = match task {
        Task::Det => (
            TaskPrompt::Detection {
                disease: disease.clone(),
            },
            Target::Det {
                boxes: rendered.boxes.clone(),
                classes: scene.cells.iter().map(|c| c.class).collect(),
                morph: scene.cells.iter().map(|c| c.morph).collect(),
            },
        ),
        Task::Seg => (
            TaskPrompt::Segmentation {
                disease: disease.clone(),
            },
            Target::Seg {
                height: scene.canvas,
                width: scene.canvas,
                rle: rle_encode(&rendered.mask),
            },
        ),
        Task::Cls => (
            TaskPrompt::Classification,
            Target::Cls {
                class: scene.cells[0].class,
            },
        ),
        Task::Vqa => {
            let q = Question::ALL[pick.gen_range(0..Question::ALL.len())];
            let cell = &scene.cells[0];
            (
                TaskPrompt::Vqa {
                    question: q.text().to_string(),
                },
                Target::Vqa {
                    answer: q.answer(cell.class, &cell.morph),
                },
            )
        }
        Task::Mlm => {
            let cell = &scene.cells[0];
            let (masked, sentence) = mlm_pair(cell.class, &cell.morph);
            (TaskPrompt::Mlm { masked }, Target::Mlm { sentence })
        }
    };
    Sample {
        record: SampleRecord {
            image: format!("images/{id}.uhtn"),
            id,
            task,
            split,
            disease,
            prompt,
            target,
        },
        image: rendered.image,
    }
}

fn split_sizes(cfg: &SynthConfig, task: Task) -> Vec<(Split, usize)> {
    let mut v = vec![
        (Split::Train, cfg.train_per_task),
        (Split::Eval, cfg.eval_per_task),
    ];
    if task == Task::Cls && cfg.shift_cls > 0 {
        v.push((Split::Shift, cfg.shift_cls));
    }
    v
}

/// All samples of the corpus in manifest order.
pub fn synthesize_all(cfg: &SynthConfig) -> Vec<Sample> {
    let slots: Vec<(Task, Split, usize)> = cfg
        .tasks
        .iter()
        .flat_map(|&t| {
            split_sizes(cfg, t)
                .into_iter()
                .flat_map(move |(s, n)| (0..n).map(move |i| (t, s, i)))
        })
        .collect();
    slots
        .par_iter()
        .map(|&(t, s, i)| synthesize(cfg, t, s, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub annotations: String,
    /// Sample ids per split.
    pub splits: BTreeMap<Split, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub vocab: String,
    pub classes: Vec<String>,
    pub morph: Vec<String>,
    pub diseases: Vec<String>,
    pub canvas: CanvasSizes,
    pub tasks: BTreeMap<Task, TaskEntry>,
}

impl DatasetManifest {
    pub fn count(&self, task: Task, split: Split) -> usize {
        self.tasks
            .get(&task)
            .and_then(|e| e.splits.get(&split))
            .map_or(0, Vec::len)
    }
}

/// A dataset read back from disk; images load on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub records: BTreeMap<Task, Vec<SampleRecord>>,
}

impl Dataset {
    pub fn records(&self, task: Task, split: Split) -> Vec<&SampleRecord> {
        self.records
            .get(&task)
            .map(|v| v.iter().filter(|r| r.split == split).collect())
            .unwrap_or_default()
    }

    pub fn load_image(&self, record: &SampleRecord) -> std::result::Result<Tensor, DataError> {
        let path = self.root.join(&record.image);
        load_tensor(&path).map_err(|e| match e {
            crate::tensor::io::TensorIoError::Io(io) => io_err(&path)(io),
            other => DataError::Malformed {
                file: path.clone(),
                line: 0,
                detail: other.to_string(),
            },
        })
    }
}

/// Generate the corpus for `cfg` and write it under `dir`.
pub fn generate_dataset(
    cfg: &SynthConfig,
    dir: &Path,
) -> std::result::Result<DatasetManifest, DataError> {
    write_dataset(
        cfg.seed,
        cfg.sizes,
        &synthesize_all(cfg),
        &Vocabulary::synthetic(),
        dir,
    )
}

/// Write samples, annotations, vocabulary and manifest. Output bytes are a
/// pure function of the arguments.
pub fn write_dataset(
    seed: u64,
    canvas: CanvasSizes,
    samples: &[Sample],
    vocab: &Vocabulary,
    dir: &Path,
) -> std::result::Result<DatasetManifest, DataError> {
    let images = dir.join("images");
    let ann_dir = dir.join("annotations");
    for d in [dir, &images, &ann_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut tasks: BTreeMap<Task, TaskEntry> = BTreeMap::new();
    let mut lines: BTreeMap<Task, String> = BTreeMap::new();
    for s in samples {
        let r = &s.record;
        let path = dir.join(&r.image);
        save_tensor(&path, &s.image).map_err(io_err(&path))?;
        let entry = tasks.entry(r.task).or_insert_with(|| TaskEntry {
            annotations: format!("annotations/{}.jsonl", r.task.name()),
            splits: BTreeMap::new(),
        });
        entry.splits.entry(r.split).or_default().push(r.id.clone());
        let line = serde_json::to_string(r).expect("records serialise");
        let buf = lines.entry(r.task).or_default();
        buf.push_str(&line);
        buf.push('\n');
    }
    for (task, text) in &lines {
        let path = dir.join(&tasks[task].annotations);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    let vocab_path = dir.join(VOCAB_FILE);
    vocab.save(&vocab_path).map_err(io_err(&vocab_path))?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        seed,
        vocab: VOCAB_FILE.to_string(),
        classes: CLASS_NAMES.map(String::from).to_vec(),
        morph: MORPH_NAMES.map(String::from).to_vec(),
        diseases: DISEASES.map(String::from).to_vec(),
        canvas,
        tasks,
    };
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    f.write_all(text.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(io_err(&path))?;
    Ok(manifest)
}

/// Read and validate a dataset: version, every referenced file, every record.
pub fn read_dataset(dir: &Path) -> std::result::Result<Dataset, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::Malformed {
        file: path.clone(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    let found = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(DataError::Version {
            found,
            expected: DATASET_VERSION,
        });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(raw).map_err(|e| DataError::Malformed {
            file: path.clone(),
            line: 0,
            detail: e.to_string(),
        })?;
    let vocab_path = dir.join(&manifest.vocab);
    let vocab_text = fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?;
    let vocab = Vocabulary::from_file_contents(&vocab_text).map_err(|e| DataError::Malformed {
        file: vocab_path.clone(),
        line: 0,
        detail: e.to_string(),
    })?;
    let mut records = BTreeMap::new();
    for (&task, entry) in &manifest.tasks {
        let ann = dir.join(&entry.annotations);
        let text = fs::read_to_string(&ann).map_err(io_err(&ann))?;
        let mut recs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let malformed = |detail: String| DataError::Malformed {
                file: ann.clone(),
                line: i + 1,
                detail,
            };
            let rec: SampleRecord =
                serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            rec.validate().map_err(&malformed)?;
            if rec.task != task {
                return Err(malformed(format!(
                    "record task {} in {} annotations",
                    rec.task, task
                )));
            }
            let img = dir.join(&rec.image);
            if !img.is_file() {
                return Err(DataError::MissingFile(img));
            }
            recs.push(rec);
        }
        let mut listed: Vec<&String> = entry.splits.values().flatten().collect();
        let mut present: Vec<&String> = recs.iter().map(|r| &r.id).collect();
        listed.sort();
        present.sort();
        if listed != present {
            return Err(DataError::Malformed {
                file: ann.clone(),
                line: 0,
                detail: "records disagree with the manifest sample lists".into(),
            });
        }
        records.insert(task, recs);
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        vocab,
        records,
    })
}
