//! Fusion between the visual and textual token streams: cross-modal fusion
//! for text generation, objectness Top-K selection, text-guided query
//! refinement, the single-cell feature extractor and the query-guided mask
//! former.

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::nn::{join, Init, LayerNorm, Linear, MlpBlock, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::{Graph, Var};
use crate::vision::{Conv, SpatialTokens};

fn need_text(text: Option<Var>, module: &str) -> Result<Var> {
    text.ok_or_else(|| ModelError::Usage(format!("{module} requires text embeddings")))
}

/// Two residual cross-attention stages over learnable queries: first into the
/// projected text, then into the projected visual tokens, each followed by a
/// layer norm; a final projection maps the `L_f×M` result to `L_f×N`.
#[derive(Clone, Debug)]
pub struct Cmf {
    pub queries: ParamId,
    pub text_proj: Linear,
    pub text_attn: MultiHeadAttention,
    pub text_norm: LayerNorm,
    pub vis_proj: Linear,
    pub vis_attn: MultiHeadAttention,
    pub vis_norm: LayerNorm,
    pub out: Linear,
}

impl Cmf {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let m = cfg.model_dim;
        Ok(Cmf {
            queries: store.register(
                &join(name, "queries"),
                &[cfg.fusion_queries, m],
                Init::Normal(1.0),
            )?,
            text_proj: Linear::new(store, &join(name, "text_proj"), cfg.text_dim, m)?,
            text_attn: MultiHeadAttention::new(store, &join(name, "text_attn"), m, cfg.heads)?,
            text_norm: LayerNorm::new(store, &join(name, "text_norm"), m)?,
            vis_proj: Linear::new(store, &join(name, "vis_proj"), m, m)?,
            vis_attn: MultiHeadAttention::new(store, &join(name, "vis_attn"), m, cfg.heads)?,
            vis_norm: LayerNorm::new(store, &join(name, "vis_norm"), m)?,
            out: Linear::new(store, &join(name, "out"), m, cfg.text_dim)?,
        })
    }

    /// The `L_f×M` fused queries before the output projection.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: Option<Var>,
        vis: Var,
    ) -> Result<Var> {
        let text = need_text(text, "cross-modal fusion")?;
        let q = store.bind(g, self.queries);
        let t = self.text_proj.forward(g, store, text)?;
        let a = self.text_attn.forward(g, store, q, t, None)?;
        let j = g.add(q, a)?;
        let j = self.text_norm.forward(g, store, j)?;
        let v = self.vis_proj.forward(g, store, vis)?;
        let a = self.vis_attn.forward(g, store, j, v, None)?;
        let e = g.add(j, a)?;
        self.vis_norm.forward(g, store, e)
    }

    /// Fused text tokens `[L_f×N]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        text: Option<Var>,
        vis: Var,
    ) -> Result<Var> {
        let e = self.fuse(g, store, text, vis)?;
        self.out.forward(g, store, e)
    }
}

/// Per-token class logits whose maximum over real classes scores objectness;
/// the last column is "no-object".
#[derive(Clone, Debug)]
pub struct Objectness {
    pub head: Linear,
    pub num_classes: usize,
}

/// Selected tokens, best first.
#[derive(Clone, Debug)]
pub struct TopK {
    pub queries: Var,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Objectness {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(Objectness {
            head: Linear::new(
                store,
                &join(name, "head"),
                cfg.model_dim,
                cfg.num_classes + 1,
            )?,
            num_classes: cfg.num_classes,
        })
    }

    /// Logits `[V_t×(classes+1)]`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        self.head.forward(g, store, tokens)
    }

    /// Max real-class logit per row.
    pub fn scores(&self, g: &Graph, logits: Var) -> Vec<f64> {
        let t = g.value(logits);
        (0..t.rows())
            .map(|r| {
                t.row(r)[..self.num_classes]
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// Objectness-ranked Top-K rows of `tokens`.
    pub fn select(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: Var,
        k: usize,
    ) -> Result<(TopK, Var)> {
        let logits = self.logits(g, store, tokens)?;
        let scores = self.scores(g, logits);
        let indices = select_topk(&scores, k)?;
        let queries = g.gather_rows(tokens, &indices)?;
        let scores = indices.iter().map(|&i| scores[i]).collect();
        Ok((
            TopK {
                queries,
                indices,
                scores,
            },
            logits,
        ))
    }
}

/// Indices of the `k` largest scores, descending; ties go to the lower index.
pub fn select_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(ModelError::Config(format!(
            "top-k of {k} exceeds {} tokens",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Text-guided refinement: `P([k ‖ CrossAttn(k, P(text))])`.
#[derive(Clone, Debug)]
pub struct Tgvr {
    pub text_proj: Linear,
    pub attn: MultiHeadAttention,
    pub fuse: Linear,
}

impl Tgvr {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let m = cfg.model_dim;
        Ok(Tgvr {
            text_proj: Linear::new(store, &join(name, "text_proj"), cfg.text_dim, m)?,
            attn: MultiHeadAttention::new(store, &join(name, "attn"), m, cfg.heads)?,
            fuse: Linear::new(store, &join(name, "fuse"), 2 * m, m)?,
        })
    }

    /// Text-guided visual queries `[K×M]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        k: Var,
        text: Option<Var>,
    ) -> Result<Var> {
        let text = need_text(text, "text-guided refinement")?;
        let t = self.text_proj.forward(g, store, text)?;
        let a = self.attn.forward(g, store, k, t, None)?;
        let cat = g.concat(&[k, a], 1)?;
        self.fuse.forward(g, store, cat)
    }
}

/// Text-independent global feature: `P([mean(tokens) ‖ q])`.
#[derive(Clone, Debug)]
pub struct Scfe {
    pub query: ParamId,
    pub proj: Linear,
}

impl Scfe {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let m = cfg.model_dim;
        Ok(Scfe {
            query: store.register(&join(name, "query"), &[1, m], Init::Normal(0.5))?,
            proj: Linear::new(store, &join(name, "proj"), 2 * m, m)?,
        })
    }

    /// Pooled cell vector `[1×M]`; bitwise invariant to token order.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let mean = g.mean_rows(tokens)?;
        let q = store.bind(g, self.query);
        let cat = g.concat(&[mean, q], 1)?;
        self.proj.forward(g, store, cat)
    }
}

/// Per-query mask logits and the selected binary-mask logits.
#[derive(Clone, Copy, Debug)]
pub struct SegmentationLogits {
    /// `[D_t×m×n]`.
    pub y: Var,
    /// `[1×m×n]`, the first query's map.
    pub binary: Var,
}

/// Query-guided mask former: level-0 encoder tokens (reshaped to a map) plus a
/// 1×1 projection of `F_1`, projected to `G_proj`; mask embeddings
/// `P(MLP(queries))` contracted against it.
#[derive(Clone, Debug)]
pub struct Qgmf {
    pub feat_proj: Conv,
    pub fuse_proj: Conv,
    pub mlp: MlpBlock,
    pub mask_proj: Linear,
    pub dim: usize,
}

impl Qgmf {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let m = cfg.model_dim;
        Ok(Qgmf {
            feat_proj: Conv::new(
                store,
                &join(name, "feat_proj"),
                cfg.backbone_channels[0],
                m,
                1,
                1,
                0,
            )?,
            fuse_proj: Conv::new(store, &join(name, "fuse_proj"), m, m, 1, 1, 0)?,
            mlp: MlpBlock::new(store, &join(name, "mlp"), m, m * cfg.mlp_ratio, m)?,
            mask_proj: Linear::new(store, &join(name, "mask_proj"), m, m)?,
            dim: m,
        })
    }

    /// `G_proj [C×m×n]`.
    pub fn pixel_map(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f1: Var,
        vis: &SpatialTokens,
    ) -> Result<Var> {
        let (m, n) = vis.grids[0];
        let fs = g.shape(f1).to_vec();
        if fs.len() != 3 || fs[1] != m || fs[2] != n {
            return Err(ModelError::Wiring(format!(
                "level-0 features {fs:?} do not match the {m}×{n} token grid"
            )));
        }
        let range = vis.level_range(0);
        let lvl = g.slice(vis.tokens, 0, range.start, range.len())?;
        let map = g.transpose(lvl)?;
        let map = g.reshape(map, &[self.dim, m, n])?;
        let f = self.feat_proj.forward(g, store, f1)?;
        let fused = g.add(map, f)?;
        self.fuse_proj.forward(g, store, fused)
    }

    /// Mask embeddings `[D_t×C]`.
    pub fn mask_embeddings(&self, g: &mut Graph, store: &ParamStore, obj: Var) -> Result<Var> {
        let h = self.mlp.forward(g, store, obj)?;
        self.mask_proj.forward(g, store, h)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f1: Var,
        vis: &SpatialTokens,
        obj: Var,
    ) -> Result<SegmentationLogits> {
        let gp = self.pixel_map(g, store, f1, vis)?;
        let emb = self.mask_embeddings(g, store, obj)?;
        let y = g.contract(emb, gp)?;
        let binary = g.slice(y, 0, 0, 1)?;
        Ok(SegmentationLogits { y, binary })
    }
}

/// Strict threshold of sigmoid probabilities: `p > 0.5` is foreground, so a
/// zero logit is background.
pub fn binarize(logits: &[f64]) -> Vec<bool> {
    logits
        .iter()
        .map(|&l| crate::tensor::sigmoid_scalar(l) > 0.5)
        .collect()
}
