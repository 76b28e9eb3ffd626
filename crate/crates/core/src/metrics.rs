//! Evaluation metrics and model-level evaluation reports.
//!
//! Conventions: all-point interpolated AP; Dice of two empty masks is 1;
//! BLEU-4 replaces a zero clipped n-gram count `0/t` by `1/(t+1)`; exact
//! match compares whitespace-normalised strings case-sensitively.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{Task, CLASS_NAMES};
use crate::error::Result;
use crate::heads::{iou, BoxCxCyWh};
use crate::model::{Example, UniHema};
use crate::nn::ParamStore;
use crate::text::{TaskPrompt, Vocabulary};

pub const AP_IOU: f64 = 0.5;

/// A scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoxCxCyWh,
    pub class: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: BoxCxCyWh,
    pub class: usize,
}

/// mAP₅₀ with per-class AP; classes absent from every ground truth are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
}

/// All-point interpolated AP from a score-descending TP/FP sequence.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(hits.len());
    for (i, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        points.push((tp as f64 / num_gt as f64, tp as f64 / (i + 1) as f64));
    }
    // Precision envelope from the right.
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &points {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// Mean AP at IoU 0.5 over classes present in the ground truth. Per class,
/// predictions from all images are ranked by score (ties by image, then box
/// coordinates, so input order never matters) and each greedily claims the
/// unmatched same-image ground truth of highest IoU when that IoU ≥ 0.5.
/// With no ground truth of any class the value is 1 when there are also no
/// predictions and 0 otherwise.
pub fn map50(preds: &[Vec<ScoredBox>], gts: &[Vec<GtBox>], num_classes: usize) -> MapResult {
    let mut per_class = vec![None; num_classes];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let num_gt: usize = gts
            .iter()
            .map(|g| g.iter().filter(|b| b.class == c).count())
            .sum();
        if num_gt == 0 {
            continue;
        }
        let mut ranked: Vec<(usize, &ScoredBox)> = preds
            .iter()
            .enumerate()
            .flat_map(|(img, ps)| ps.iter().filter(|p| p.class == c).map(move |p| (img, p)))
            .collect();
        ranked.sort_by(|a, b| {
            b.1.score
                .total_cmp(&a.1.score)
                .then(a.0.cmp(&b.0))
                .then_with(|| {
                    a.1.bbox
                        .iter()
                        .zip(&b.1.bbox)
                        .map(|(x, y)| x.total_cmp(y))
                        .find(|o| o.is_ne())
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
        });
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|&(img, p)| {
                let best = gts.get(img).and_then(|g| {
                    g.iter()
                        .enumerate()
                        .filter(|(j, gb)| gb.class == c && !taken[img][*j])
                        .map(|(j, gb)| (j, iou(&p.bbox, &gb.bbox)))
                        .filter(|&(_, v)| v >= AP_IOU)
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                });
                match best {
                    Some((j, _)) => {
                        taken[img][j] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        *slot = Some(average_precision(&hits, num_gt));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let value = if present.is_empty() {
        if preds.iter().all(Vec::is_empty) {
            1.0
        } else {
            0.0
        }
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapResult { value, per_class }
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "dice needs equal-size masks");
    let a = pred.iter().filter(|&&x| x).count();
    let b = gt.iter().filter(|&&x| x).count();
    if a + b == 0 {
        return 1.0;
    }
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    2.0 * inter as f64 / (a + b) as f64
}

/// Macro F1 with per-class values; a class neither predicted nor present is
/// skipped (`None`).
pub fn f1_macro(pred: &[usize], gt: &[usize], classes: usize) -> (f64, Vec<Option<f64>>) {
    assert_eq!(pred.len(), gt.len(), "f1 needs aligned labels");
    let per: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let tp = pred
                .iter()
                .zip(gt)
                .filter(|(p, g)| **p == c && **g == c)
                .count();
            let fp = pred
                .iter()
                .zip(gt)
                .filter(|(p, g)| **p == c && **g != c)
                .count();
            let fn_ = pred
                .iter()
                .zip(gt)
                .filter(|(p, g)| **p != c && **g == c)
                .count();
            if tp + fp + fn_ == 0 {
                None
            } else {
                Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
            }
        })
        .collect();
    let scored: Vec<f64> = per.iter().flatten().copied().collect();
    let value = if scored.is_empty() {
        1.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    (value, per)
}

fn ngram_counts<T: Eq + std::hash::Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU-4 with uniform weights and brevity penalty.
pub fn bleu4<T: Eq + std::hash::Hash>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total = candidate.len().saturating_sub(n - 1);
        let matched: usize = cand
            .iter()
            .map(|(g, &k)| k.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            1.0 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// 1 when the whitespace-normalised strings are identical (case-sensitive).
pub fn exact_match(candidate: &str, reference: &str) -> u8 {
    u8::from(normalize_whitespace(candidate) == normalize_whitespace(reference))
}

/// Serialized evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub metric: String,
    pub value: f64,
    /// Further metrics of the same run, e.g. exact match next to BLEU-4.
    pub secondary: BTreeMap<String, f64>,
    pub per_class: BTreeMap<String, Option<f64>>,
    pub samples: usize,
    pub config_digest: String,
    pub conventions: Vec<String>,
}

fn conventions(task: Task) -> Vec<String> {
    match task {
        Task::Det => vec![
            "AP: all-point precision envelope, IoU >= 0.5".into(),
            "classes without ground truth are skipped".into(),
        ],
        Task::Seg => vec!["dice of two empty masks = 1".into()],
        Task::Cls => vec!["F1: class neither predicted nor present is skipped".into()],
        Task::Vqa | Task::Mlm => vec![
            "BLEU-4: sentence level, mean over samples; zero n-gram count 0/t replaced by 1/(t+1)"
                .into(),
            "exact match: case-sensitive after whitespace normalisation".into(),
        ],
    }
}

enum Outcome {
    Det(Vec<ScoredBox>, Vec<GtBox>),
    Seg(f64),
    Cls(usize, usize),
    Text(String, String),
}

fn run_one(
    model: &UniHema,
    store: &ParamStore,
    vocab: &Vocabulary,
    ex: &Example,
) -> Result<Outcome> {
    Ok(match ex {
        Example::Det {
            image,
            disease,
            target,
        } => {
            let dets = model.infer_detections(store, vocab, image, disease)?;
            Outcome::Det(
                dets.iter()
                    .map(|d| ScoredBox {
                        bbox: d.bbox,
                        class: d.class,
                        score: d.score,
                    })
                    .collect(),
                target
                    .boxes
                    .iter()
                    .zip(&target.classes)
                    .map(|(&bbox, &class)| GtBox { bbox, class })
                    .collect(),
            )
        }
        Example::Seg {
            image,
            disease,
            mask,
        } => Outcome::Seg(dice(&model.infer_mask(store, vocab, image, disease)?, mask)),
        Example::Cls { image, class } => Outcome::Cls(model.infer_class(store, image)?.0, *class),
        Example::Vqa {
            image,
            question,
            answer,
        } => {
            let prompt = TaskPrompt::Vqa {
                question: question.clone(),
            };
            Outcome::Text(
                model.infer_text(store, vocab, image, &prompt)?.0,
                answer.clone(),
            )
        }
        Example::Mlm {
            image,
            masked,
            sentence,
        } => {
            let prompt = TaskPrompt::Mlm {
                masked: masked.clone(),
            };
            Outcome::Text(
                model.infer_text(store, vocab, image, &prompt)?.0,
                sentence.clone(),
            )
        }
    })
}

/// Evaluate `model` on examples of one task.
pub fn evaluate(
    model: &UniHema,
    store: &ParamStore,
    vocab: &Vocabulary,
    task: Task,
    examples: &[&Example],
    config_digest: &str,
) -> Result<EvalReport> {
    let outcomes: Vec<Result<Outcome>> = examples
        .par_iter()
        .filter(|ex| ex.task() == task)
        .map(|ex| run_one(model, store, vocab, ex))
        .collect();
    let outcomes: Vec<Outcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let samples = outcomes.len();
    let mut secondary = BTreeMap::new();
    let mut per_class = BTreeMap::new();
    let class_map = |v: Vec<Option<f64>>| -> BTreeMap<String, Option<f64>> {
        v.into_iter()
            .enumerate()
            .map(|(i, x)| (CLASS_NAMES[i].to_string(), x))
            .collect()
    };
    let (metric, value) = match task {
        Task::Det => {
            let (p, g): (Vec<_>, Vec<_>) = outcomes
                .into_iter()
                .map(|o| match o {
                    Outcome::Det(p, g) => (p, g),
                    _ => unreachable!("filtered by task"),
                })
                .unzip();
            let r = map50(&p, &g, model.cfg.num_classes);
            per_class = class_map(r.per_class);
            ("mAP50", r.value)
        }
        Task::Seg => {
            let d: Vec<f64> = outcomes
                .into_iter()
                .map(|o| match o {
                    Outcome::Seg(d) => d,
                    _ => unreachable!("filtered by task"),
                })
                .collect();
            ("Dice", d.iter().sum::<f64>() / samples.max(1) as f64)
        }
        Task::Cls => {
            let (p, g): (Vec<usize>, Vec<usize>) = outcomes
                .into_iter()
                .map(|o| match o {
                    Outcome::Cls(p, g) => (p, g),
                    _ => unreachable!("filtered by task"),
                })
                .unzip();
            let (f1, per) = f1_macro(&p, &g, model.cfg.num_classes);
            per_class = class_map(per);
            let acc =
                p.iter().zip(&g).filter(|(a, b)| a == b).count() as f64 / samples.max(1) as f64;
            secondary.insert("accuracy".to_string(), acc);
            ("F1", f1)
        }
        Task::Vqa | Task::Mlm => {
            let mut bleu = 0.0;
            let mut em = 0.0;
            for o in outcomes {
                let Outcome::Text(c, r) = o else {
                    unreachable!("filtered by task")
                };
                let ct: Vec<&str> = c.split_whitespace().collect();
                let rt: Vec<&str> = r.split_whitespace().collect();
                bleu += bleu4(&ct, &rt);
                em += f64::from(exact_match(&c, &r));
            }
            let n = samples.max(1) as f64;
            secondary.insert("exact_match".to_string(), em / n);
            ("BLEU-4", bleu / n)
        }
    };
    Ok(EvalReport {
        task,
        metric: metric.to_string(),
        value,
        secondary,
        per_class,
        samples,
        config_digest: config_digest.to_string(),
        conventions: conventions(task),
    })
}
