//! Six-stage training: per-stage freezing, batch composition, the optimizer
//! loop and checkpointing.

pub mod adam;
pub mod checkpoint;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use glob::Pattern;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{LossWeights, TrainConfig};
use crate::data::{Dataset, Split};
use crate::domain::Task;
use crate::error::{ModelError, Result};
use crate::model::{Example, UniHema};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Graph, Tensor};
use crate::text::Vocabulary;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError, ConfigDiff,
};

pub const NUM_STAGES: u8 = 6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage order violation: {0}")]
    Order(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Which parameters a stage updates and which tasks it draws.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub id: u8,
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
    pub tasks: Vec<Task>,
    pub epochs: usize,
    /// Exact step count, overriding `epochs`.
    pub steps: Option<usize>,
    pub per_task: usize,
}

const ALL_GROUPS: [&str; 14] = crate::model::MODULE_PREFIXES;

fn globs(groups: &[&str]) -> Vec<String> {
    groups.iter().map(|g| format!("{g}.*")).collect()
}

impl StageSpec {
    /// The standard schedule for stage `id` under `cfg`.
    pub fn standard(id: u8, cfg: &TrainConfig) -> Result<StageSpec> {
        let (groups, tasks): (&[&str], &[Task]) = match id {
            1 => (
                &[
                    "backbone",
                    "vision_embed",
                    "image_encoder",
                    "hema_former.scfe",
                    "heads.classify",
                ],
                &[Task::Cls],
            ),
            2 => (&["text_encoder", "text_decoder"], &[Task::Vqa, Task::Mlm]),
            3 => (
                &[
                    "backbone",
                    "vision_embed",
                    "image_encoder",
                    "hema_former.objectness",
                    "hema_former.tgvr",
                    "hema_former.scfe",
                    "hema_former.qgmf",
                    "image_decoder",
                    "heads.detect",
                    "heads.classify",
                    "heads.upsampler",
                ],
                &[Task::Det, Task::Seg, Task::Cls],
            ),
            4 => (&["image_decoder", "heads.detect"], &[Task::Det]),
            5 => (&["hema_former.qgmf", "heads.upsampler"], &[Task::Seg]),
            6 => (
                &["hema_former.cmf", "text_decoder"],
                &[Task::Vqa, Task::Mlm],
            ),
            _ => return Err(ModelError::Config(format!("stage must be 1–6, got {id}"))),
        };
        let frozen: Vec<&str> = ALL_GROUPS
            .iter()
            .copied()
            .filter(|g| !groups.contains(g))
            .collect();
        let i = usize::from(id - 1);
        Ok(StageSpec {
            id,
            trainable: globs(groups),
            frozen: globs(&frozen),
            tasks: tasks.to_vec(),
            epochs: cfg.epochs_per_stage[i],
            steps: cfg.steps_per_stage.map(|s| s[i]),
            per_task: cfg.batch_per_task,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.per_task * self.tasks.len()
    }

    /// Trainable flag per parameter. Every glob must match something, no
    /// parameter may be both trainable and frozen, and every parameter must be
    /// covered.
    pub fn resolve(&self, store: &ParamStore) -> Result<Vec<bool>> {
        let compile = |list: &[String]| -> Result<Vec<Pattern>> {
            list.iter()
                .map(|p| {
                    Pattern::new(p).map_err(|e| ModelError::Config(format!("bad glob {p:?}: {e}")))
                })
                .collect()
        };
        let trainable = compile(&self.trainable)?;
        let frozen = compile(&self.frozen)?;
        for (p, src) in trainable
            .iter()
            .zip(&self.trainable)
            .chain(frozen.iter().zip(&self.frozen))
        {
            if !store.names().any(|n| p.matches(n)) {
                return Err(ModelError::Config(format!(
                    "stage {} glob {src:?} matches no parameter",
                    self.id
                )));
            }
        }
        store
            .names()
            .map(|n| {
                let t = trainable.iter().any(|p| p.matches(n));
                let f = frozen.iter().any(|p| p.matches(n));
                match (t, f) {
                    (true, true) => Err(ModelError::Config(format!(
                        "{n} is both trainable and frozen in stage {}",
                        self.id
                    ))),
                    (false, false) => Err(ModelError::Config(format!(
                        "{n} is not covered by stage {}",
                        self.id
                    ))),
                    _ => Ok(t),
                }
            })
            .collect()
    }
}

/// Training examples grouped by task.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub pools: BTreeMap<Task, Vec<Example>>,
}

impl TrainData {
    pub fn from_examples(examples: impl IntoIterator<Item = Example>) -> Self {
        let mut pools: BTreeMap<Task, Vec<Example>> = BTreeMap::new();
        for ex in examples {
            pools.entry(ex.task()).or_default().push(ex);
        }
        TrainData { pools }
    }

    /// Load one split of `tasks` from a dataset, in manifest order.
    pub fn from_dataset(ds: &Dataset, split: Split, tasks: &[Task]) -> Result<Self> {
        let mut out = Vec::new();
        for &task in tasks {
            for r in ds.records(task, split) {
                out.push(Example::from_record(r, ds.load_image(r)?)?);
            }
        }
        Ok(Self::from_examples(out))
    }

    pub fn sizes(&self) -> BTreeMap<Task, usize> {
        self.pools.iter().map(|(&t, v)| (t, v.len())).collect()
    }
}

/// One batch as `(task, index into that task's pool)`.
pub type Batch = Vec<(Task, usize)>;

fn epoch_rng(seed: u64, stage: u8, epoch: usize, task: Task) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8] = stage;
    key[9..17].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[17] = task as u8;
    ChaCha8Rng::from_seed(key)
}

/// Batches of one epoch: each task's pool is shuffled from `(seed, stage,
/// epoch, task)` and dealt `per_task` at a time, tasks in the given order.
/// The epoch has `⌈max pool / per_task⌉` batches; smaller pools continue into
/// a further shuffle, so every sample appears at least once and exactly once
/// when pool sizes are equal multiples of `per_task`.
pub fn compose_epoch(
    sizes: &BTreeMap<Task, usize>,
    tasks: &[Task],
    per_task: usize,
    seed: u64,
    stage: u8,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if tasks.is_empty() || per_task == 0 {
        return Err(ModelError::Config(
            "a batch needs at least one task and one sample per task".into(),
        ));
    }
    let mut orders = Vec::with_capacity(tasks.len());
    let mut longest = 0;
    for &t in tasks {
        let n = sizes.get(&t).copied().unwrap_or(0);
        if n == 0 {
            return Err(ModelError::Data(format!(
                "no training samples for task {t}"
            )));
        }
        longest = longest.max(n);
        orders.push((t, n));
    }
    let batches = longest.div_ceil(per_task);
    let mut streams: Vec<Vec<usize>> = Vec::with_capacity(tasks.len());
    for &(t, n) in &orders {
        let mut rng = epoch_rng(seed, stage, epoch, t);
        let mut stream = Vec::with_capacity(batches * per_task);
        while stream.len() < batches * per_task {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            stream.extend(perm);
        }
        streams.push(stream);
    }
    Ok((0..batches)
        .map(|b| {
            orders
                .iter()
                .zip(&streams)
                .flat_map(|(&(t, _), s)| {
                    s[b * per_task..(b + 1) * per_task]
                        .iter()
                        .map(move |&i| (t, i))
                })
                .collect()
        })
        .collect())
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub stage: u8,
    pub task: Task,
    pub loss: f64,
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,stage,task,loss")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.step, r.stage, r.task, r.loss)?;
    }
    f.flush()
}

/// Model, parameters and optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: UniHema,
    pub store: ParamStore,
    pub adam: Adam,
    pub vocab: Vocabulary,
    pub weights: LossWeights,
    pub clip_norm: f64,
}

/// Gradient of one example's loss w.r.t. trainable parameters.
fn example_gradient(trainer: &Trainer, ex: &Example) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let mut g = Graph::new();
    let loss = trainer
        .model
        .loss(&mut g, &trainer.store, &trainer.vocab, ex, &trainer.weights)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    let mut grads: Vec<(ParamId, Tensor)> = g
        .bound_params()
        .into_iter()
        .filter(|&(id, _)| trainer.store.is_trainable(ParamId(id)))
        .filter_map(|(id, v)| g.grad(v).map(|t| (ParamId(id), t.clone())))
        .collect();
    grads.sort_by_key(|(id, _)| *id);
    Ok((value, grads))
}

impl Trainer {
    pub fn new(model: UniHema, store: ParamStore, weights: LossWeights, clip_norm: f64) -> Self {
        let n = store.len();
        Trainer {
            model,
            store,
            adam: Adam::new(n),
            vocab: Vocabulary::synthetic(),
            weights,
            clip_norm,
        }
    }

    /// One optimizer step on `batch`. The objective is the sum over tasks of
    /// each task's mean loss. Returns those per-task means.
    pub fn step(&mut self, batch: &[&Example], lr: f64) -> Result<Vec<(Task, f64)>> {
        let results: Vec<Result<(f64, Vec<(ParamId, Tensor)>)>> = batch
            .par_iter()
            .map(|ex| example_gradient(self, ex))
            .collect();
        let mut counts: BTreeMap<Task, usize> = BTreeMap::new();
        for ex in batch {
            *counts.entry(ex.task()).or_default() += 1;
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let mut sums: BTreeMap<Task, f64> = BTreeMap::new();
        for (ex, r) in batch.iter().zip(results) {
            let (loss, gs) = r?;
            let scale = 1.0 / counts[&ex.task()] as f64;
            *sums.entry(ex.task()).or_default() += loss * scale;
            for (id, t) in gs {
                let slot = grads[id.0].get_or_insert_with(|| Tensor::zeros(t.shape()));
                for (a, b) in slot.data_mut().iter_mut().zip(t.data()) {
                    *a += b * scale;
                }
            }
        }
        clip_global_norm(&mut grads, self.clip_norm);
        self.adam.step(&mut self.store, &grads, lr);
        Ok(sums.into_iter().collect())
    }

    /// Mean loss per task over `examples`, without updating anything.
    pub fn evaluate_loss(&self, examples: &[&Example]) -> Result<f64> {
        let losses: Vec<Result<f64>> = examples
            .par_iter()
            .map(|ex| {
                let mut g = Graph::new();
                let l = self
                    .model
                    .loss(&mut g, &self.store, &self.vocab, ex, &self.weights)?;
                Ok(g.value(l).item())
            })
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / examples.len().max(1) as f64)
    }
}

/// Learning rate at optimizer step `t` (1-based) with linear warm-up.
pub fn learning_rate(cfg: &TrainConfig, t: u64) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * (t as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

/// Options for one `run_stage` invocation.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Stop once the stage reaches this many steps, leaving it incomplete.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Check that `init` may start or resume stage `id`; returns whether it is a
/// mid-stage resume.
pub fn check_order(id: u8, init: Option<&Checkpoint>) -> std::result::Result<bool, TrainError> {
    match init {
        None if id == 1 => Ok(false),
        None => Err(TrainError::Order(format!(
            "stage {id} needs the completed stage {} checkpoint",
            id - 1
        ))),
        Some(ck) if ck.stage == id && !ck.complete => Ok(true),
        Some(ck) if ck.stage + 1 == id && (ck.complete || ck.stage == 0) => Ok(false),
        Some(ck) => Err(TrainError::Order(format!(
            "stage {id} cannot start from a{} stage {} checkpoint",
            if ck.complete {
                " completed"
            } else {
                "n incomplete"
            },
            ck.stage
        ))),
    }
}

/// Total steps of a stage over `data`.
pub fn stage_steps(spec: &StageSpec, data: &TrainData) -> Result<u64> {
    if let Some(s) = spec.steps {
        return Ok(s as u64);
    }
    let per_epoch = compose_epoch(&data.sizes(), &spec.tasks, spec.per_task, 0, spec.id, 0)?.len();
    Ok((spec.epochs * per_epoch) as u64)
}

/// Run (or resume) stage `spec.id`. Parameters outside the trainable globs
/// are never written.
pub fn run_stage(
    cfg: &TrainConfig,
    spec: &StageSpec,
    data: &TrainData,
    init: Option<Checkpoint>,
    opts: &RunOptions,
) -> std::result::Result<StageOutcome, TrainError> {
    cfg.validate()?;
    let resume = check_order(spec.id, init.as_ref())?;
    let (model, mut store) = UniHema::build(&cfg.model, cfg.seed)?;
    let mut adam = Adam::new(store.len());
    let mut start = 0;
    if let Some(ck) = &init {
        ck.check_config(&cfg.model)?;
        ck.restore_params(&mut store)?;
        if resume {
            adam = ck.restore_adam(&store)?;
            start = ck.step;
        }
    }
    let mask = spec.resolve(&store)?;
    for (id, &t) in store.ids().collect::<Vec<_>>().into_iter().zip(&mask) {
        store.set_trainable(id, t);
    }
    let total = stage_steps(spec, data)?;
    let end = opts.stop_after.map_or(total, |s| s.min(total)).max(start);
    let mut trainer = Trainer::new(model, store, cfg.loss_weights, cfg.clip_norm);
    trainer.adam = adam;
    let sizes = data.sizes();
    let mut log = Vec::new();
    let mut plan: Option<(usize, Vec<Batch>)> = None;
    for step in start..end {
        let per_epoch = match &plan {
            Some((_, b)) => b.len(),
            None => compose_epoch(&sizes, &spec.tasks, spec.per_task, cfg.seed, spec.id, 0)?.len(),
        };
        let epoch = (step as usize) / per_epoch;
        if plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
            plan = Some((
                epoch,
                compose_epoch(&sizes, &spec.tasks, spec.per_task, cfg.seed, spec.id, epoch)?,
            ));
        }
        let batch = &plan.as_ref().expect("plan set above").1[step as usize % per_epoch];
        let examples: Vec<&Example> = batch.iter().map(|&(t, i)| &data.pools[&t][i]).collect();
        let lr = learning_rate(cfg, trainer.adam.t + 1);
        for (task, loss) in trainer.step(&examples, lr)? {
            log.push(LogRow {
                step: step + 1,
                stage: spec.id,
                task,
                loss,
            });
        }
    }
    let complete = end == total;
    trainer.store.set_all_trainable(true);
    let checkpoint = Checkpoint::capture(
        &cfg.model,
        &trainer.store,
        &trainer.adam,
        spec.id,
        end,
        complete,
        cfg.seed,
    );
    Ok(StageOutcome { checkpoint, log })
}
