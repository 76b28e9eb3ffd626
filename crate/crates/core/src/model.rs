//! The unified model: one backbone and image encoder shared by every task, a
//! text encoder for prompts, the fusion module, the image decoder, the task
//! heads and the text decoder.

use crate::config::{LossWeights, ModelConfig};
use crate::data::{rle_decode, SampleRecord, Target};
use crate::domain::{disease_index, Task};
use crate::error::{ModelError, Result};
use crate::heads::{
    detection_loss, match_outputs, segmentation_loss, ClassifyHead, DetOutputs, DetTarget,
    DetectHead, Detection, ImageDecoder, Upsampler,
};
use crate::hema_former::{binarize, Cmf, Objectness, Qgmf, Scfe, SegmentationLogits, Tgvr, TopK};
use crate::nn::ParamStore;
use crate::tensor::{Graph, Tensor, Var};
use crate::text::{teacher_forcing, text_loss, TaskPrompt, TextDecoder, TextEncoder, Vocabulary};
use crate::vision::{
    global_pool, token_center, Backbone, ImageEncoder, SpatialTokens, VisionEmbed, IMAGE_ALIGN,
    LEVEL_STRIDES,
};

/// Top-level parameter-name prefixes, in registration order.
pub const MODULE_PREFIXES: [&str; 14] = [
    "backbone",
    "vision_embed",
    "image_encoder",
    "text_encoder",
    "text_decoder",
    "hema_former.cmf",
    "hema_former.objectness",
    "hema_former.tgvr",
    "hema_former.scfe",
    "hema_former.qgmf",
    "image_decoder",
    "heads.detect",
    "heads.classify",
    "heads.upsampler",
];

#[derive(Clone, Debug)]
pub struct UniHema {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub vision_embed: VisionEmbed,
    pub image_encoder: ImageEncoder,
    pub text_encoder: TextEncoder,
    pub text_decoder: TextDecoder,
    pub cmf: Cmf,
    pub objectness: Objectness,
    pub tgvr: Tgvr,
    pub scfe: Scfe,
    pub qgmf: Qgmf,
    pub image_decoder: ImageDecoder,
    pub detect: DetectHead,
    pub classify: ClassifyHead,
    pub upsampler: Upsampler,
}

/// Backbone levels, base visual tokens and encoded visual tokens.
#[derive(Clone, Debug)]
pub struct Visual {
    pub levels: Vec<Var>,
    pub base: SpatialTokens,
    pub encoded: SpatialTokens,
    pub height: usize,
    pub width: usize,
}

/// Intermediate values of the detection/segmentation path.
#[derive(Clone, Debug)]
pub struct QueryPath {
    pub visual: Visual,
    pub topk: TopK,
    pub objectness_logits: Var,
    /// Decoded object queries.
    pub objects: Var,
    pub anchors: Tensor,
}

/// One training example with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Det {
        image: Tensor,
        disease: String,
        target: DetTarget,
    },
    Seg {
        image: Tensor,
        disease: String,
        mask: Vec<bool>,
    },
    Cls {
        image: Tensor,
        class: usize,
    },
    Vqa {
        image: Tensor,
        question: String,
        answer: String,
    },
    Mlm {
        image: Tensor,
        masked: String,
        sentence: String,
    },
}

impl Example {
    pub fn from_record(record: &SampleRecord, image: Tensor) -> Result<Example> {
        let mismatch = || {
            ModelError::Data(format!(
                "record {} has inconsistent prompt and target",
                record.id
            ))
        };
        Ok(match (&record.target, &record.prompt) {
            (
                Target::Det {
                    boxes,
                    classes,
                    morph,
                },
                TaskPrompt::Detection { disease },
            ) => Example::Det {
                image,
                disease: disease.clone(),
                target: DetTarget {
                    boxes: boxes.clone(),
                    classes: classes.clone(),
                    morph: morph.iter().map(|m| m.to_vec()).collect(),
                },
            },
            (Target::Seg { height, width, rle }, TaskPrompt::Segmentation { disease }) => {
                let mask = rle_decode(rle);
                if mask.len() != height * width || image.shape()[1..] != [*height, *width] {
                    return Err(mismatch());
                }
                Example::Seg {
                    image,
                    disease: disease.clone(),
                    mask,
                }
            }
            (Target::Cls { class }, TaskPrompt::Classification) => Example::Cls {
                image,
                class: *class,
            },
            (Target::Vqa { answer }, TaskPrompt::Vqa { question }) => Example::Vqa {
                image,
                question: question.clone(),
                answer: answer.clone(),
            },
            (Target::Mlm { sentence }, TaskPrompt::Mlm { masked }) => Example::Mlm {
                image,
                masked: masked.clone(),
                sentence: sentence.clone(),
            },
            _ => return Err(mismatch()),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            Example::Det { .. } => Task::Det,
            Example::Seg { .. } => Task::Seg,
            Example::Cls { .. } => Task::Cls,
            Example::Vqa { .. } => Task::Vqa,
            Example::Mlm { .. } => Task::Mlm,
        }
    }

    pub fn image(&self) -> &Tensor {
        match self {
            Example::Det { image, .. }
            | Example::Seg { image, .. }
            | Example::Cls { image, .. }
            | Example::Vqa { image, .. }
            | Example::Mlm { image, .. } => image,
        }
    }
}

/// Answer-token ids of `text`, without BOS/EOS.
fn answer_ids(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>> {
    let ids = vocab.tokenize(text)?;
    Ok(ids[1..ids.len() - 1].to_vec())
}

/// Box prior per selected token: the token cell's centre, side `2·stride`.
pub fn anchors_for(vis: &SpatialTokens, indices: &[usize], height: usize, width: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = indices
        .iter()
        .map(|&i| {
            let o = vis.origin[i];
            let (cx, cy) = token_center(o, height, width);
            let s = LEVEL_STRIDES[o.level] as f64 * 2.0;
            vec![
                cx,
                cy,
                (s / width as f64).min(0.9),
                (s / height as f64).min(0.9),
            ]
        })
        .collect();
    Tensor::from_rows(&rows).expect("four columns per anchor")
}

/// Class targets for the objectness logits: the level-0 token whose cell holds
/// a ground-truth centre takes that class, every other token is no-object.
/// Centres sharing a cell resolve to the lowest class, independent of order.
pub fn objectness_targets(vis: &SpatialTokens, gt: &DetTarget, no_object: usize) -> Vec<usize> {
    let mut t = vec![no_object; vis.len()];
    let (gh, gw) = vis.grids[0];
    for (b, &c) in gt.boxes.iter().zip(&gt.classes) {
        let col = ((b[0] * gw as f64) as usize).min(gw - 1);
        let row = ((b[1] * gh as f64) as usize).min(gh - 1);
        let slot = &mut t[row * gw + col];
        *slot = (*slot).min(c);
    }
    t
}

impl UniHema {
    /// Register every parameter in a fixed order.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(UniHema {
            cfg: cfg.clone(),
            backbone: Backbone::new(store, "backbone", cfg)?,
            vision_embed: VisionEmbed::new(store, "vision_embed", cfg)?,
            image_encoder: ImageEncoder::new(store, "image_encoder", cfg)?,
            text_encoder: TextEncoder::new(store, "text_encoder", cfg)?,
            text_decoder: TextDecoder::new(store, "text_decoder", cfg)?,
            cmf: Cmf::new(store, "hema_former.cmf", cfg)?,
            objectness: Objectness::new(store, "hema_former.objectness", cfg)?,
            tgvr: Tgvr::new(store, "hema_former.tgvr", cfg)?,
            scfe: Scfe::new(store, "hema_former.scfe", cfg)?,
            qgmf: Qgmf::new(store, "hema_former.qgmf", cfg)?,
            image_decoder: ImageDecoder::new(store, "image_decoder", cfg)?,
            detect: DetectHead::new(store, "heads.detect", cfg)?,
            classify: ClassifyHead::new(store, "heads.classify", cfg)?,
            upsampler: Upsampler::new(store, "heads.upsampler", cfg)?,
        })
    }

    /// A fresh model and its parameters drawn from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(UniHema, ParamStore)> {
        let mut store = ParamStore::new(seed);
        let model = UniHema::new(&mut store, cfg)?;
        Ok((model, store))
    }

    pub fn visual(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<Visual> {
        let s = image.shape();
        if s.len() != 3
            || s[0] != 3
            || !s[1].is_multiple_of(IMAGE_ALIGN)
            || !s[2].is_multiple_of(IMAGE_ALIGN)
            || s[1] == 0
            || s[2] == 0
        {
            return Err(ModelError::Usage(format!(
                "image must be 3×H×W with H, W positive multiples of {IMAGE_ALIGN}, got {s:?}"
            )));
        }
        let (height, width) = (s[1], s[2]);
        let x = g.constant(image.clone());
        let levels = self.backbone.forward(g, store, x)?;
        let base = self.vision_embed.forward(g, store, &levels)?;
        let enc = self.image_encoder.forward(g, store, base.tokens)?;
        let encoded = base.with_tokens(enc);
        Ok(Visual {
            levels,
            base,
            encoded,
            height,
            width,
        })
    }

    fn prompt_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        prompt: &TaskPrompt,
    ) -> Result<Var> {
        self.text_encoder.encode(g, store, vocab, prompt)
    }

    /// Objectness Top-K, text-guided refinement and the image decoder.
    pub fn query_path(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        image: &Tensor,
        prompt: &TaskPrompt,
    ) -> Result<QueryPath> {
        disease_of(prompt)?;
        let visual = self.visual(g, store, image)?;
        let text = self.prompt_tokens(g, store, vocab, prompt)?;
        let (topk, objectness_logits) =
            self.objectness
                .select(g, store, visual.encoded.tokens, self.cfg.top_k)?;
        let queries = self.tgvr.forward(g, store, topk.queries, Some(text))?;
        let objects = self
            .image_decoder
            .forward(g, store, queries, visual.encoded.tokens)?;
        let anchors = anchors_for(&visual.encoded, &topk.indices, visual.height, visual.width);
        Ok(QueryPath {
            visual,
            topk,
            objectness_logits,
            objects,
            anchors,
        })
    }

    pub fn detect_outputs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        path: &QueryPath,
    ) -> Result<DetOutputs> {
        self.detect
            .forward(g, store, path.objects, Some(&path.anchors))
    }

    /// Mask logits at query resolution and upsampled to the image.
    pub fn segment(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        path: &QueryPath,
    ) -> Result<(SegmentationLogits, Var)> {
        let seg = self.qgmf.forward(
            g,
            store,
            path.visual.levels[0],
            &path.visual.encoded,
            path.objects,
        )?;
        let up = self.upsampler.forward(
            g,
            store,
            seg.binary,
            path.visual.height,
            path.visual.width,
            self.cfg.upsample,
        )?;
        Ok((seg, up))
    }

    /// Class logits `[1×classes]` from visual features alone.
    pub fn classify_logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<Var> {
        let visual = self.visual(g, store, image)?;
        let z = self.scfe.forward(g, store, visual.encoded.tokens)?;
        let pooled = if self.classify.integrate {
            Some(global_pool(g, visual.levels[2])?)
        } else {
            None
        };
        self.classify.logits(g, store, z, pooled)
    }

    /// Fused text tokens conditioning the text decoder.
    pub fn text_memory(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        image: &Tensor,
        prompt: &TaskPrompt,
    ) -> Result<Var> {
        if !matches!(prompt, TaskPrompt::Vqa { .. } | TaskPrompt::Mlm { .. }) {
            return Err(ModelError::Usage(
                "text generation needs a question or masked-sentence prompt".into(),
            ));
        }
        let visual = self.visual(g, store, image)?;
        let text = self.prompt_tokens(g, store, vocab, prompt)?;
        self.cmf.forward(g, store, Some(text), visual.base.tokens)
    }

    /// Scalar training loss of one example.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        ex: &Example,
        w: &LossWeights,
    ) -> Result<Var> {
        match ex {
            Example::Det {
                image,
                disease,
                target,
            } => {
                let prompt = TaskPrompt::Detection {
                    disease: disease.clone(),
                };
                let path = self.query_path(g, store, vocab, image, &prompt)?;
                let out = self.detect_outputs(g, store, &path)?;
                let m = match_outputs(g, &out, target, w)?;
                let det = detection_loss(g, &out, target, &m, w)?;
                let no_object = self.cfg.num_classes;
                let t = objectness_targets(&path.visual.encoded, target, no_object);
                let weights: Vec<f64> = t
                    .iter()
                    .map(|&c| if c == no_object { w.no_object } else { 1.0 })
                    .collect();
                let targets: Vec<Option<usize>> = t.into_iter().map(Some).collect();
                let aux = g.cross_entropy(path.objectness_logits, &targets, Some(&weights))?;
                let aux = g.scale(aux, w.objectness);
                Ok(g.add(det, aux)?)
            }
            Example::Seg {
                image,
                disease,
                mask,
            } => {
                let prompt = TaskPrompt::Segmentation {
                    disease: disease.clone(),
                };
                let path = self.query_path(g, store, vocab, image, &prompt)?;
                let (_, up) = self.segment(g, store, &path)?;
                segmentation_loss(g, up, mask)
            }
            Example::Cls { image, class } => {
                let logits = self.classify_logits(g, store, image)?;
                Ok(g.cross_entropy(logits, &[Some(*class)], None)?)
            }
            Example::Vqa {
                image,
                question,
                answer,
            } => {
                let prompt = TaskPrompt::Vqa {
                    question: question.clone(),
                };
                self.text_loss(g, store, vocab, image, &prompt, answer)
            }
            Example::Mlm {
                image,
                masked,
                sentence,
            } => {
                let prompt = TaskPrompt::Mlm {
                    masked: masked.clone(),
                };
                self.text_loss(g, store, vocab, image, &prompt, sentence)
            }
        }
    }

    fn text_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        image: &Tensor,
        prompt: &TaskPrompt,
        answer: &str,
    ) -> Result<Var> {
        let memory = self.text_memory(g, store, vocab, image, prompt)?;
        let prompt_ids = vocab.tokenize(&prompt.render().expect("text prompts render"))?;
        let (input, targets) = teacher_forcing(&prompt_ids, &answer_ids(vocab, answer)?);
        let logits = self.text_decoder.forward(g, store, &input, memory)?;
        text_loss(g, logits, &targets)
    }

    // ------------------------------------------------------------ inference

    /// Decoded detections, best objectness first.
    pub fn infer_detections(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        image: &Tensor,
        disease: &str,
    ) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let prompt = TaskPrompt::Detection {
            disease: disease.to_string(),
        };
        let path = self.query_path(&mut g, store, vocab, image, &prompt)?;
        let out = self.detect_outputs(&mut g, store, &path)?;
        Ok(self.detect.decode(&g, &out))
    }

    /// Row-major binary mask at image resolution.
    pub fn infer_mask(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        image: &Tensor,
        disease: &str,
    ) -> Result<Vec<bool>> {
        let mut g = Graph::new();
        let prompt = TaskPrompt::Segmentation {
            disease: disease.to_string(),
        };
        let path = self.query_path(&mut g, store, vocab, image, &prompt)?;
        let (_, up) = self.segment(&mut g, store, &path)?;
        Ok(binarize(g.value(up).data()))
    }

    /// Predicted class and class probabilities.
    pub fn infer_class(&self, store: &ParamStore, image: &Tensor) -> Result<(usize, Vec<f64>)> {
        let mut g = Graph::new();
        let logits = self.classify_logits(&mut g, store, image)?;
        let probs = crate::heads::softmax_row(g.value(logits).row(0));
        Ok((crate::text::argmax(&probs), probs))
    }

    /// Greedy answer to a question or masked-sentence prompt.
    pub fn infer_text(
        &self,
        store: &ParamStore,
        vocab: &Vocabulary,
        image: &Tensor,
        prompt: &TaskPrompt,
    ) -> Result<(String, bool)> {
        let mut g = Graph::new();
        let memory = self.text_memory(&mut g, store, vocab, image, prompt)?;
        let memory = g.value(memory).clone();
        let prompt_ids = vocab.tokenize(&prompt.render().expect("text prompts render"))?;
        let gen =
            self.text_decoder
                .generate(store, &memory, &prompt_ids, self.cfg.max_answer_len)?;
        Ok((vocab.detokenize(&gen.ids)?, gen.truncated))
    }
}

fn disease_of(prompt: &TaskPrompt) -> Result<&str> {
    match prompt {
        TaskPrompt::Detection { disease } | TaskPrompt::Segmentation { disease } => {
            disease_index(disease)?;
            Ok(disease)
        }
        _ => Err(ModelError::Usage(
            "detection and segmentation need the disease prompt".into(),
        )),
    }
}
