//! Image decoder over disease-guided queries and the task heads: detection
//! with morphology, set matching and its loss, single-cell classification,
//! mask upsampling and the segmentation loss.

pub mod boxes;
pub mod hungarian;

use serde::{Deserialize, Serialize};

use crate::config::{LossWeights, ModelConfig, UpsampleMode};
use crate::error::{ModelError, Result};
use crate::nn::{
    join, transformer_stack, Init, Linear, MlpBlock, ParamId, ParamStore, TransformerLayer,
};
use crate::tensor::{sigmoid_scalar, Graph, Tensor, Var};

pub use boxes::{giou, iou, BoxCxCyWh};

/// Transformer decoder: self-attention over queries, cross-attention into the
/// encoder tokens, MLP; all pre-norm residual.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    pub layers: Vec<TransformerLayer>,
}

impl ImageDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(ImageDecoder {
            layers: transformer_stack(
                store,
                &join(name, "layers"),
                cfg.decoder_layers,
                cfg.model_dim,
                cfg.heads,
                cfg.mlp_ratio,
                true,
            )?,
        })
    }

    /// Decoded queries `[D_t×M]` from the text-guided queries and encoded visual tokens.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        memory: Var,
    ) -> Result<Var> {
        let mut x = queries;
        for layer in &self.layers {
            x = layer.forward(g, store, x, Some(memory), None)?;
        }
        Ok(x)
    }
}

/// Raw detection-head outputs for `D_t` queries.
#[derive(Clone, Copy, Debug)]
pub struct DetOutputs {
    /// `[D_t×(classes+1)]`, last column "no-object".
    pub logits: Var,
    /// `[D_t×4]` in `(cx, cy, w, h)`, inside the unit square.
    pub boxes: Var,
    /// `[D_t×morph]`.
    pub morph_logits: Var,
}

/// One decoded detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoxCxCyWh,
    pub class: usize,
    pub score: f64,
    pub class_probs: Vec<f64>,
    pub morph: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DetectHead {
    pub box_mlp: MlpBlock,
    pub cls: Linear,
    pub morph: Linear,
    pub num_classes: usize,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

impl DetectHead {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let m = cfg.model_dim;
        Ok(DetectHead {
            box_mlp: MlpBlock::new(store, &join(name, "box_mlp"), m, m, 4)?,
            cls: Linear::new(store, &join(name, "cls"), m, cfg.num_classes + 1)?,
            morph: Linear::new(store, &join(name, "morph"), m, cfg.num_morph)?,
            num_classes: cfg.num_classes,
        })
    }

    /// `box = sigmoid(MLP(row) + logit(anchor))`; without anchors the offset
    /// is zero.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        obj: Var,
        anchors: Option<&Tensor>,
    ) -> Result<DetOutputs> {
        let mut raw = self.box_mlp.forward(g, store, obj)?;
        if let Some(a) = anchors {
            if a.shape() != g.shape(raw) {
                return Err(ModelError::Wiring(format!(
                    "anchors {:?} for boxes {:?}",
                    a.shape(),
                    g.shape(raw)
                )));
            }
            let offset = g.constant(a.map(logit));
            raw = g.add(raw, offset)?;
        }
        Ok(DetOutputs {
            logits: self.cls.forward(g, store, obj)?,
            boxes: g.sigmoid(raw),
            morph_logits: self.morph.forward(g, store, obj)?,
        })
    }

    pub fn decode(&self, g: &Graph, out: &DetOutputs) -> Vec<Detection> {
        let logits = g.value(out.logits);
        let boxes = g.value(out.boxes);
        let morph = g.value(out.morph_logits);
        (0..logits.rows())
            .map(|r| {
                let probs = softmax_row(logits.row(r));
                let mut class = 0;
                for c in 1..self.num_classes {
                    if probs[c] > probs[class] {
                        class = c;
                    }
                }
                let b = boxes.row(r);
                Detection {
                    bbox: [b[0], b[1], b[2], b[3]],
                    class,
                    score: probs[class],
                    class_probs: probs,
                    morph: morph.row(r).iter().map(|&l| sigmoid_scalar(l)).collect(),
                }
            })
            .collect()
    }
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Ground truth for one detection image.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetTarget {
    pub boxes: Vec<BoxCxCyWh>,
    pub classes: Vec<usize>,
    pub morph: Vec<Vec<bool>>,
}

/// Injective query ↔ ground-truth pairing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// `(query, gt)`, sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Matching cost of query probabilities/box against one ground truth.
pub fn match_cost(
    probs: &[f64],
    bbox: &BoxCxCyWh,
    gt_box: &BoxCxCyWh,
    gt_class: usize,
    w: &LossWeights,
) -> f64 {
    let l1: f64 = bbox.iter().zip(gt_box).map(|(a, b)| (a - b).abs()).sum();
    w.class * (1.0 - probs[gt_class]) + w.l1 * l1 + w.giou * (1.0 - giou(bbox, gt_box))
}

/// Minimum-cost assignment of ground truths to predictions.
pub fn hungarian_match(
    probs: &[Vec<f64>],
    boxes: &[BoxCxCyWh],
    gt: &DetTarget,
    w: &LossWeights,
) -> Result<MatchResult> {
    let q = probs.len();
    if gt.boxes.len() > q {
        return Err(ModelError::Data(format!(
            "{} ground truths exceed {q} queries",
            gt.boxes.len()
        )));
    }
    let cost: Vec<Vec<f64>> = gt
        .boxes
        .iter()
        .zip(&gt.classes)
        .map(|(gb, &gc)| {
            (0..q)
                .map(|i| match_cost(&probs[i], &boxes[i], gb, gc, w))
                .collect()
        })
        .collect();
    let cols = hungarian::assign(&cost)?;
    let mut pairs: Vec<(usize, usize)> =
        cols.iter().enumerate().map(|(gi, &qi)| (qi, gi)).collect();
    pairs.sort_unstable();
    let unmatched = (0..q)
        .filter(|i| !pairs.iter().any(|p| p.0 == *i))
        .collect();
    Ok(MatchResult { pairs, unmatched })
}

/// Match the current outputs against `gt` (values only, no gradient).
pub fn match_outputs(
    g: &Graph,
    out: &DetOutputs,
    gt: &DetTarget,
    w: &LossWeights,
) -> Result<MatchResult> {
    let logits = g.value(out.logits);
    let probs: Vec<Vec<f64>> = (0..logits.rows())
        .map(|r| softmax_row(logits.row(r)))
        .collect();
    let bx = g.value(out.boxes);
    let boxes: Vec<BoxCxCyWh> = (0..bx.rows())
        .map(|r| [bx.row(r)[0], bx.row(r)[1], bx.row(r)[2], bx.row(r)[3]])
        .collect();
    hungarian_match(&probs, &boxes, gt, w)
}

/// Set-prediction loss: weighted class cross-entropy (unmatched queries
/// toward "no-object"), L1 and `1 − gIoU` on matched boxes, and morphology
/// BCE on matched pairs.
pub fn detection_loss(
    g: &mut Graph,
    out: &DetOutputs,
    gt: &DetTarget,
    m: &MatchResult,
    w: &LossWeights,
) -> Result<Var> {
    let q = g.shape(out.logits)[0];
    let no_object = g.shape(out.logits)[1] - 1;
    let mut targets = vec![Some(no_object); q];
    let mut weights = vec![w.no_object; q];
    for &(qi, gi) in &m.pairs {
        targets[qi] = Some(gt.classes[gi]);
        weights[qi] = 1.0;
    }
    let ce = g.cross_entropy(out.logits, &targets, Some(&weights))?;
    let mut loss = g.scale(ce, w.class);
    if m.pairs.is_empty() {
        return Ok(loss);
    }
    let n = m.pairs.len() as f64;
    let qidx: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
    let gt_boxes = Tensor::from_rows(
        &m.pairs
            .iter()
            .map(|p| gt.boxes[p.1].to_vec())
            .collect::<Vec<_>>(),
    )?;
    let pred = g.gather_rows(out.boxes, &qidx)?;
    let target = g.constant(gt_boxes.clone());
    let diff = g.sub(pred, target)?;
    let diff = g.abs(diff);
    let l1 = g.sum(diff);
    let l1 = g.scale(l1, w.l1 / n);
    loss = g.add(loss, l1)?;
    let gi = boxes::giou_graph(g, pred, &gt_boxes)?;
    let gsum = g.sum(gi);
    // w · mean(1 − gIoU)
    let gterm = g.scale(gsum, -w.giou / n);
    let gterm = g.add_scalar(gterm, w.giou);
    loss = g.add(loss, gterm)?;
    let morph = g.gather_rows(out.morph_logits, &qidx)?;
    let mt: Vec<f64> = m
        .pairs
        .iter()
        .flat_map(|p| gt.morph[p.1].iter().map(|&b| f64::from(u8::from(b))))
        .collect();
    let bce = g.bce_with_logits(morph, &mt)?;
    let bce = g.scale(bce, w.morph);
    Ok(g.add(loss, bce)?)
}

/// `softmax(Linear(z))` over the pooled cell vector, or over `[z ‖ pooled top backbone level]` when
/// integrating backbone features.
#[derive(Clone, Debug)]
pub struct ClassifyHead {
    pub linear: Linear,
    pub integrate: bool,
}

impl ClassifyHead {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let extra = if cfg.integrate_backbone {
            cfg.backbone_channels[2]
        } else {
            0
        };
        Ok(ClassifyHead {
            linear: Linear::new(
                store,
                &join(name, "linear"),
                cfg.model_dim + extra,
                cfg.num_classes,
            )?,
            integrate: cfg.integrate_backbone,
        })
    }

    /// Class logits `[1×classes]`.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        pooled: Option<Var>,
    ) -> Result<Var> {
        let x = match (self.integrate, pooled) {
            (true, Some(p)) => g.concat(&[z, p], 1)?,
            (true, None) => {
                return Err(ModelError::Wiring(
                    "integrating classifier needs pooled backbone features".into(),
                ))
            }
            (false, _) => z,
        };
        self.linear.forward(g, store, x)
    }

    pub fn probs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        pooled: Option<Var>,
    ) -> Result<Var> {
        let l = self.logits(g, store, z, pooled)?;
        Ok(g.softmax(l, 1)?)
    }
}

/// Bilinear or learnable resizing of mask logits. The learnable path adds two
/// stride-2 transposed convolutions (the second zero-initialised) to the
/// bilinear base, with a bilinear remainder to the exact target.
#[derive(Clone, Debug)]
pub struct Upsampler {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.upsampler_channels;
        Ok(Upsampler {
            w1: store.register(
                &join(name, "tconv1.weight"),
                &[1, h, 4, 4],
                Init::Normal(0.25),
            )?,
            b1: store.register(&join(name, "tconv1.bias"), &[h], Init::Zeros)?,
            w2: store.register(&join(name, "tconv2.weight"), &[h, 1, 4, 4], Init::Zeros)?,
            b2: store.register(&join(name, "tconv2.bias"), &[1], Init::Zeros)?,
        })
    }

    /// `y[1×m×n]` → `[1×H×W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        h: usize,
        w: usize,
        mode: UpsampleMode,
    ) -> Result<Var> {
        let s = g.shape(y).to_vec();
        if s.len() != 3 || s[0] != 1 {
            return Err(ModelError::Wiring(format!(
                "mask logits must be 1×m×n, got {s:?}"
            )));
        }
        if h < s[1] || w < s[2] {
            return Err(ModelError::Usage(format!(
                "cannot upsample {}×{} to smaller {h}×{w}",
                s[1], s[2]
            )));
        }
        let base = g.resize_bilinear(y, h, w)?;
        if mode == UpsampleMode::Bilinear {
            return Ok(base);
        }
        let (w1, b1, w2, b2) = (
            store.bind(g, self.w1),
            store.bind(g, self.b1),
            store.bind(g, self.w2),
            store.bind(g, self.b2),
        );
        let r = g.conv_transpose2d(y, w1, Some(b1), 2, 1)?;
        let r = g.gelu(r);
        let r = g.conv_transpose2d(r, w2, Some(b2), 2, 1)?;
        let r = g.resize_bilinear(r, h, w)?;
        Ok(g.add(base, r)?)
    }
}

/// Mean of pixel BCE and soft-Dice loss (smoothing 1) of `logits[1×H×W]`.
pub fn segmentation_loss(g: &mut Graph, logits: Var, mask: &[bool]) -> Result<Var> {
    let t: Vec<f64> = mask.iter().map(|&b| f64::from(u8::from(b))).collect();
    let bce = g.bce_with_logits(logits, &t)?;
    let p = g.sigmoid(logits);
    let tt = g.constant(Tensor::new(g.shape(logits).to_vec(), t.clone())?);
    let pt = g.mul(p, tt)?;
    let inter = g.sum(pt);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let ps = g.sum(p);
    let den = g.add_scalar(ps, t.iter().sum::<f64>() + 1.0);
    let ratio = g.div(num, den)?;
    let dice = g.scale(ratio, -1.0);
    let dice = g.add_scalar(dice, 1.0);
    let total = g.add(bce, dice)?;
    Ok(g.scale(total, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_residual_branches;
    use crate::testing::{check_gradients, check_param_gradients, project};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zeroed_decoder_is_identity() {
        let cfg = ModelConfig::small();
        let mut store = ParamStore::new(1);
        let dec = ImageDecoder::new(&mut store, "image_decoder", &cfg).unwrap();
        zero_residual_branches(&mut store, "image_decoder");
        let q = random(&[cfg.top_k, cfg.model_dim], 2);
        let mut g = Graph::new();
        let qv = g.constant(q.clone());
        let mem = g.constant(random(&[30, cfg.model_dim], 3));
        let out = dec.forward(&mut g, &store, qv, mem).unwrap();
        assert!(g.value(out).max_abs_diff(&q) <= 1e-12);
    }

    #[test]
    fn zero_detect_head() {
        let cfg = ModelConfig::small();
        let mut store = ParamStore::new(1);
        let head = DetectHead::new(&mut store, "det", &cfg).unwrap();
        store.zero_prefix("det");
        let mut g = Graph::new();
        let obj = g.constant(random(&[3, cfg.model_dim], 4));
        let out = head.forward(&mut g, &store, obj, None).unwrap();
        for d in head.decode(&g, &out) {
            assert_eq!(d.bbox, [0.5; 4]);
            for p in &d.class_probs {
                assert!((p - 0.2).abs() < 1e-15);
            }
            assert!((0.0..=1.0).contains(&d.score));
        }
        let anchors = Tensor::from_rows(&vec![vec![0.2, 0.3, 0.1, 0.1]; 3]).unwrap();
        let out = head.forward(&mut g, &store, obj, Some(&anchors)).unwrap();
        assert!(g.value(out.boxes).max_abs_diff(&anchors) < 1e-12);
    }

    fn target(boxes: &[BoxCxCyWh], classes: &[usize]) -> DetTarget {
        DetTarget {
            boxes: boxes.to_vec(),
            classes: classes.to_vec(),
            morph: boxes
                .iter()
                .enumerate()
                .map(|(i, _)| (0..6).map(|k| (i + k) % 2 == 0).collect())
                .collect(),
        }
    }

    #[test]
    fn matching_examples() {
        let w = LossWeights::default();
        let gt = target(&[[0.5, 0.5, 0.2, 0.2]], &[1]);
        let m = hungarian_match(&[vec![0.25; 4]], &[[0.4, 0.4, 0.1, 0.1]], &gt, &w).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);

        let gt = target(&[[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2]], &[0, 2]);
        let probs = vec![vec![0.0, 0.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0, 0.0, 0.0]];
        let boxes = [[0.7, 0.7, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]];
        let m = hungarian_match(&probs, &boxes, &gt, &w).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
        let total: f64 = m
            .pairs
            .iter()
            .map(|&(q, gi)| match_cost(&probs[q], &boxes[q], &gt.boxes[gi], gt.classes[gi], &w))
            .sum();
        assert!(total.abs() < 1e-12);

        let gt = target(&[[0.2, 0.2, 0.1, 0.1], [0.7, 0.7, 0.2, 0.2]], &[0, 2]);
        let err = hungarian_match(&[vec![0.2; 5]], &[[0.5; 4]], &gt, &w).unwrap_err();
        assert!(matches!(err, ModelError::Data(_)));
    }

    fn det_fixture(seed: u64) -> (Tensor, Tensor, Tensor, DetTarget) {
        let logits = random(&[5, 5], seed);
        let boxes = random(&[5, 4], seed + 1).map(|v| 0.3 + 0.2 * v.abs());
        let morph = random(&[5, 6], seed + 2);
        let gt = target(
            &[
                [0.3, 0.4, 0.2, 0.3],
                [0.6, 0.5, 0.25, 0.2],
                [0.5, 0.5, 0.4, 0.4],
            ],
            &[0, 3, 1],
        );
        (logits, boxes, morph, gt)
    }

    #[test]
    fn detection_loss_gradients() {
        let w = LossWeights::default();
        let (l, b, m, gt) = det_fixture(10);
        let matching = MatchResult {
            pairs: vec![(0, 2), (2, 0), (4, 1)],
            unmatched: vec![1, 3],
        };
        let r = check_gradients(
            &[l, b, m],
            &|g, v| {
                let out = DetOutputs {
                    logits: v[0],
                    boxes: v[1],
                    morph_logits: v[2],
                };
                detection_loss(g, &out, &gt, &matching, &w)
            },
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn detection_loss_perfect_prediction_vanishes() {
        let w = LossWeights::default();
        let gt = target(&[[0.3, 0.4, 0.2, 0.3]], &[2]);
        let mut g = Graph::new();
        let logits = g.constant(
            Tensor::from_rows(&[
                vec![0.0, 0.0, 60.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.0, 60.0],
            ])
            .unwrap(),
        );
        let boxes =
            g.constant(Tensor::from_rows(&[vec![0.3, 0.4, 0.2, 0.3], vec![0.5; 4]]).unwrap());
        let morph = g.constant(
            Tensor::from_rows(&[
                gt.morph[0]
                    .iter()
                    .map(|&b| if b { 60.0 } else { -60.0 })
                    .collect(),
                vec![0.0; 6],
            ])
            .unwrap(),
        );
        let out = DetOutputs {
            logits,
            boxes,
            morph_logits: morph,
        };
        let m = match_outputs(&g, &out, &gt, &w).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        let l = detection_loss(&mut g, &out, &gt, &m, &w).unwrap();
        assert!(g.value(l).item() < 1e-12, "{}", g.value(l).item());
    }

    #[test]
    fn classify_head_zero_and_simplex() {
        for integrate in [false, true] {
            let cfg = ModelConfig {
                integrate_backbone: integrate,
                ..ModelConfig::small()
            };
            let mut store = ParamStore::new(3);
            let head = ClassifyHead::new(&mut store, "cls", &cfg).unwrap();
            let mut g = Graph::new();
            let z = g.constant(random(&[1, cfg.model_dim], 5));
            let pool = g.constant(random(&[1, cfg.backbone_channels[2]], 6));
            let p = head.probs(&mut g, &store, z, Some(pool)).unwrap();
            assert!((g.value(p).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            store.zero_prefix("cls");
            // Parameters are bound once per graph, so use a fresh one.
            let mut g = Graph::new();
            let z = g.constant(random(&[1, cfg.model_dim], 5));
            let pool = g.constant(random(&[1, cfg.backbone_channels[2]], 6));
            let p = head.probs(&mut g, &store, z, Some(pool)).unwrap();
            assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn upsample_identity_constant_and_errors() {
        let cfg = ModelConfig::small();
        let mut store = ParamStore::new(3);
        let up = Upsampler::new(&mut store, "up", &cfg).unwrap();
        let mut g = Graph::new();
        let y = random(&[1, 4, 4], 7);
        let yv = g.constant(y.clone());
        let same = up
            .forward(&mut g, &store, yv, 4, 4, UpsampleMode::Bilinear)
            .unwrap();
        assert_eq!(g.value(same), &y);
        let c = g.constant(Tensor::full(&[1, 4, 4], -1.3));
        for mode in [UpsampleMode::Bilinear, UpsampleMode::Learnable] {
            let o = up.forward(&mut g, &store, c, 16, 16, mode).unwrap();
            assert_eq!(g.shape(o), &[1, 16, 16]);
            assert!(g.value(o).data().iter().all(|v| (v + 1.3).abs() < 1e-12));
        }
        assert!(matches!(
            up.forward(&mut g, &store, yv, 3, 8, UpsampleMode::Bilinear),
            Err(ModelError::Usage(_))
        ));
    }

    #[test]
    fn upsampler_gradients() {
        let cfg = ModelConfig::small();
        let mut store = ParamStore::new(3);
        let up = Upsampler::new(&mut store, "up", &cfg).unwrap();
        let w2 = random(&[cfg.upsampler_channels, 1, 4, 4], 8).map(|v| v * 0.3);
        store.set("up.tconv2.weight", w2).unwrap();
        let y = random(&[1, 3, 3], 9);
        let p = random(&[1, 12, 12], 10);
        let params: Vec<_> = store.ids().collect();
        let r = check_param_gradients(
            &store,
            &params,
            &|g, s| {
                let yv = g.constant(y.clone());
                let o = up.forward(g, s, yv, 12, 12, UpsampleMode::Learnable)?;
                project(g, o, &p)
            },
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn segmentation_loss_examples_and_gradients() {
        let mask: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
        let mut g = Graph::new();
        let big = g.constant(Tensor::from_fn(&[1, 4, 4], |i| {
            if mask[i] {
                50.0
            } else {
                -50.0
            }
        }));
        let l = segmentation_loss(&mut g, big, &mask).unwrap();
        assert!(g.value(l).item() < 1e-12);

        let logits = random(&[1, 4, 4], 11).map(|v| 3.0 * v);
        let r = check_gradients(
            &[logits],
            &|g, v| segmentation_loss(g, v[0], &mask),
            1e-6,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
