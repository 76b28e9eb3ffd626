//! Convolutional backbone, token projection and spatial image encoder.

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::nn::{
    join, sinusoidal_2d, transformer_stack, Init, Linear, ParamId, ParamStore, TransformerLayer,
};
use crate::tensor::{Graph, Tensor, Var};

/// Input extents must be multiples of this.
pub const IMAGE_ALIGN: usize = 16;

/// Feature-map strides of the three backbone levels.
pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];

/// A square convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let fan = c_in * kernel * kernel;
        let weight = store.register(
            &join(name, "weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Normal((2.0 / fan as f64).sqrt()),
        )?;
        let bias = store.register(&join(name, "bias"), &[c_out], Init::Zeros)?;
        Ok(Conv {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = store.bind(g, self.weight);
        let b = store.bind(g, self.bias);
        Ok(g.conv2d(x, w, Some(b), self.stride, self.pad)?)
    }
}

/// Stride-4 stem (kernel 8) followed by two stride-2 stages (kernel 4), each
/// with GELU. Every level keeps symmetric padding, so shifts of the input by
/// a multiple of the stride shift the features.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Conv>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = &cfg.backbone_channels;
        Ok(Backbone {
            stages: vec![
                Conv::new(store, &join(name, "stem"), 3, c[0], 8, 4, 2)?,
                Conv::new(store, &join(name, "stage2"), c[0], c[1], 4, 2, 1)?,
                Conv::new(store, &join(name, "stage3"), c[1], c[2], 4, 2, 1)?,
            ],
        })
    }

    /// Feature maps `{F_1, F_2, F_3}` of an image `[3×H×W]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<Vec<Var>> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(ModelError::Config(format!(
                "image must be 3×H×W, got {shape:?}"
            )));
        }
        if !shape[1].is_multiple_of(IMAGE_ALIGN) || !shape[2].is_multiple_of(IMAGE_ALIGN) {
            return Err(ModelError::Config(format!(
                "image extents {}×{} must be multiples of {IMAGE_ALIGN}",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let y = conv.forward(g, store, x)?;
            x = g.gelu(y);
            levels.push(x);
        }
        Ok(levels)
    }
}

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenOrigin {
    pub level: usize,
    pub row: usize,
    pub col: usize,
}

/// Token matrix `[V_t×M]` with per-token origin.
#[derive(Clone, Debug)]
pub struct SpatialTokens {
    pub tokens: Var,
    pub origin: Vec<TokenOrigin>,
    /// `(rows, cols)` of each level, in token order.
    pub grids: Vec<(usize, usize)>,
}

impl SpatialTokens {
    /// Token range of `level`.
    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let start: usize = self.grids[..level].iter().map(|(h, w)| h * w).sum();
        let (h, w) = self.grids[level];
        start..start + h * w
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    /// Same bookkeeping over a different token matrix.
    pub fn with_tokens(&self, tokens: Var) -> SpatialTokens {
        SpatialTokens {
            tokens,
            origin: self.origin.clone(),
            grids: self.grids.clone(),
        }
    }
}

/// Per-level 1×1 projection to `M`, flatten, concatenate, and add 2-d
/// positions plus a learnable per-level embedding.
#[derive(Clone, Debug)]
pub struct VisionEmbed {
    pub proj: Vec<Linear>,
    pub level_embed: ParamId,
    pub dim: usize,
}

impl VisionEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let proj = cfg
            .backbone_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(store, &join(name, &format!("proj{i}")), c, cfg.model_dim))
            .collect::<Result<Vec<_>>>()?;
        let level_embed = store.register(
            &join(name, "level_embed"),
            &[cfg.backbone_channels.len(), cfg.model_dim],
            Init::Zeros,
        )?;
        Ok(VisionEmbed {
            proj,
            level_embed,
            dim: cfg.model_dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        levels: &[Var],
    ) -> Result<SpatialTokens> {
        if levels.len() != self.proj.len() {
            return Err(ModelError::Wiring(format!(
                "{} feature levels for {} projections",
                levels.len(),
                self.proj.len()
            )));
        }
        let table = store.bind(g, self.level_embed);
        let mut parts = Vec::with_capacity(levels.len());
        let mut origin = Vec::new();
        let mut grids = Vec::with_capacity(levels.len());
        for (level, (&f, proj)) in levels.iter().zip(&self.proj).enumerate() {
            let s = g.shape(f).to_vec();
            let (c, h, w) = (s[0], s[1], s[2]);
            let flat = g.reshape(f, &[c, h * w])?;
            let rows = g.transpose(flat)?;
            let t = proj.forward(g, store, rows)?;
            let pos = g.constant(sinusoidal_2d(h, w, self.dim)?);
            let t = g.add(t, pos)?;
            let lvl = g.slice(table, 0, level, 1)?;
            let lvl = g.reshape(lvl, &[self.dim])?;
            parts.push(g.add_row(t, lvl)?);
            for row in 0..h {
                for col in 0..w {
                    origin.push(TokenOrigin { level, row, col });
                }
            }
            grids.push((h, w));
        }
        Ok(SpatialTokens {
            tokens: g.concat(&parts, 0)?,
            origin,
            grids,
        })
    }
}

/// Self-attention encoder refining base visual tokens.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub layers: Vec<TransformerLayer>,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(ImageEncoder {
            layers: transformer_stack(
                store,
                &join(name, "layers"),
                cfg.encoder_layers,
                cfg.model_dim,
                cfg.heads,
                cfg.mlp_ratio,
                false,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for layer in &self.layers {
            x = layer.forward(g, store, x, None, None)?;
        }
        Ok(x)
    }
}

/// Global average pool of a `[c×h×w]` map to a `1×c` row.
pub fn global_pool(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let flat = g.reshape(f, &[s[0], s[1] * s[2]])?;
    let t = g.transpose(flat)?;
    Ok(g.mean_rows(t)?)
}

/// Normalised `(cx, cy)` of a token's cell on a `canvas`-pixel image.
pub fn token_center(origin: TokenOrigin, canvas_h: usize, canvas_w: usize) -> (f64, f64) {
    let s = LEVEL_STRIDES[origin.level] as f64;
    (
        (origin.col as f64 + 0.5) * s / canvas_w as f64,
        (origin.row as f64 + 0.5) * s / canvas_h as f64,
    )
}

/// Image tensor `[3×h×w]` from a closure over `(channel, row, col)`.
pub fn image_from_fn(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| f(i / (h * w), i / w % h, i % w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_residual_branches;
    use crate::testing::{check_param_gradients, project};

    fn setup() -> (ModelConfig, ParamStore, Backbone, VisionEmbed, ImageEncoder) {
        let cfg = ModelConfig::small();
        let mut store = ParamStore::new(5);
        let b = Backbone::new(&mut store, "backbone", &cfg).unwrap();
        let e = VisionEmbed::new(&mut store, "vision_embed", &cfg).unwrap();
        let enc = ImageEncoder::new(&mut store, "image_encoder", &cfg).unwrap();
        (cfg, store, b, e, enc)
    }

    fn image(h: usize, w: usize) -> Tensor {
        image_from_fn(h, w, |c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f64 / 10.0)
    }

    #[test]
    fn level_shapes_for_64() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new(0);
        let b = Backbone::new(&mut store, "backbone", &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(image(64, 64));
        let levels = b.forward(&mut g, &store, x).unwrap();
        let shapes: Vec<_> = levels.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(
            shapes,
            vec![vec![32, 16, 16], vec![64, 8, 8], vec![128, 4, 4]]
        );
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let (_, store, b, _, _) = setup();
        let mut g = Graph::new();
        let x = g.constant(image(40, 32));
        assert!(matches!(
            b.forward(&mut g, &store, x),
            Err(ModelError::Config(_))
        ));
    }

    #[test]
    fn zero_image_and_biases_give_zero_features() {
        let (_, store, b, _, _) = setup();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 32, 32]));
        for f in b.forward(&mut g, &store, x).unwrap() {
            assert!(g.value(f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn token_count_and_origin_bijection() {
        let cfg = ModelConfig::default();
        let mut store = ParamStore::new(0);
        let b = Backbone::new(&mut store, "backbone", &cfg).unwrap();
        let e = VisionEmbed::new(&mut store, "vision_embed", &cfg).unwrap();
        let mut g = Graph::new();
        let x = g.constant(image(64, 64));
        let levels = b.forward(&mut g, &store, x).unwrap();
        let t = e.forward(&mut g, &store, &levels).unwrap();
        assert_eq!(g.shape(t.tokens), &[336, cfg.model_dim]);
        let set: std::collections::HashSet<_> = t.origin.iter().collect();
        assert_eq!(set.len(), 336);
        assert_eq!(t.level_range(2), 320..336);
    }

    #[test]
    fn zero_features_give_positional_tokens() {
        let (cfg, mut store, _, e, _) = setup();
        store.zero_prefix("vision_embed");
        let mut g = Graph::new();
        let levels: Vec<Var> = [(16, 8, 8), (32, 4, 4), (64, 2, 2)]
            .iter()
            .map(|&(c, h, w)| g.constant(Tensor::zeros(&[c, h, w])))
            .collect();
        let t = e.forward(&mut g, &store, &levels).unwrap();
        let mut expected = Vec::new();
        for (h, w) in [(8, 8), (4, 4), (2, 2)] {
            expected.extend_from_slice(sinusoidal_2d(h, w, cfg.model_dim).unwrap().data());
        }
        assert_eq!(g.value(t.tokens).data(), expected.as_slice());
    }

    #[test]
    fn zeroed_encoder_is_identity() {
        let (cfg, mut store, _, _, enc) = setup();
        zero_residual_branches(&mut store, "image_encoder");
        let x = Tensor::from_fn(&[20, cfg.model_dim], |i| (i as f64 * 0.731).sin());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = enc.forward(&mut g, &store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn stem_shift_translates_level_zero() {
        let (_, store, b, _, _) = setup();
        let base = image_from_fn(32, 32, |c, y, x| {
            (((c + 1) * (y * 31 + x * 17)) % 23) as f64 / 22.0
        });
        let shifted = image_from_fn(
            32,
            32,
            |c, y, x| if x >= 4 { base.at(&[c, y, x - 4]) } else { 0.0 },
        );
        let run = |img: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(img.clone());
            let f = b.forward(&mut g, &store, x).unwrap();
            g.value(f[0]).clone()
        };
        let (a, s) = (run(&base), run(&shifted));
        let [c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
        // Interior: receptive fields away from both borders.
        for ch in 0..c {
            for y in 1..h - 1 {
                for x in 2..w - 1 {
                    assert!((s.at(&[ch, y, x]) - a.at(&[ch, y, x - 1])).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn backbone_gradients_through_all_levels() {
        let (cfg, store, b, _, _) = setup();
        let img = image(16, 16);
        let params: Vec<_> = store
            .ids()
            .filter(|&id| store.name(id).starts_with("backbone"))
            .collect();
        let w: Vec<Tensor> = [(16, 4, 4), (32, 2, 2), (64, 1, 1)]
            .iter()
            .enumerate()
            .map(|(k, &(c, h, w))| Tensor::from_fn(&[c, h, w], |i| ((i * 7 + k) % 5) as f64 - 2.0))
            .collect();
        let _ = cfg;
        let r = check_param_gradients(
            &store,
            &params,
            &|g, s| {
                let x = g.constant(img.clone());
                let levels = b.forward(g, s, x)?;
                let mut total = None;
                for (f, w) in levels.iter().zip(&w) {
                    let p = project(g, *f, w)?;
                    total = Some(match total {
                        None => p,
                        Some(t) => g.add(t, p)?,
                    });
                }
                Ok(total.unwrap())
            },
            1e-6,
            Some(12),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn encoder_gradients_two_layers() {
        let mut cfg = ModelConfig::small();
        cfg.encoder_layers = 2;
        let mut store = ParamStore::new(9);
        let enc = ImageEncoder::new(&mut store, "image_encoder", &cfg).unwrap();
        let x = Tensor::from_fn(&[6, cfg.model_dim], |i| (i as f64 * 0.37).cos());
        let w = Tensor::from_fn(&[6, cfg.model_dim], |i| ((i * 5) % 9) as f64 - 4.0);
        let params: Vec<_> = store.ids().collect();
        let r = check_param_gradients(
            &store,
            &params,
            &|g, s| {
                let xv = g.constant(x.clone());
                let y = enc.forward(g, s, xv)?;
                project(g, y, &w)
            },
            1e-6,
            Some(6),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
