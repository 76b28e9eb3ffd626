//! Tokenizer, text encoder and autoregressive text decoder.

mod prompt;
mod vocab;

pub use prompt::{
    mlm_pair, template_corpus, Question, TaskPrompt, DETECTION_PREFIX, MLM_PREFIX, VQA_PREFIX,
};
pub use vocab::{Vocabulary, BOS, EOS, MASK, PAD, RESERVED};

use crate::config::ModelConfig;
use crate::error::{ModelError, Result};
use crate::nn::{
    causal_mask, join, sinusoidal_1d, transformer_stack, Embedding, LayerNorm, Linear, ParamStore,
    TransformerLayer,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Token embedding, 1-d sinusoidal positions and self-attention layers.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embed: Embedding,
    pub layers: Vec<TransformerLayer>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(TextEncoder {
            embed: Embedding::new(store, &join(name, "embed"), cfg.vocab_size, cfg.text_dim)?,
            layers: transformer_stack(
                store,
                &join(name, "layers"),
                cfg.text_encoder_layers,
                cfg.text_dim,
                cfg.heads,
                cfg.mlp_ratio,
                false,
            )?,
        })
    }

    /// Encoded text tokens `[L_t×N]` for a token id sequence.
    pub fn encode_ids(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let e = self.embed.forward(g, store, ids)?;
        let pos = g.constant(sinusoidal_1d(ids.len(), self.embed.dim)?);
        let mut x = g.add(e, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, None, None)?;
        }
        Ok(x)
    }

    /// Encode a rendered prompt; classification prompts carry no text.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        prompt: &TaskPrompt,
    ) -> Result<Var> {
        let text = prompt.render().ok_or_else(|| {
            ModelError::Usage("classification prompts bypass the text encoder".into())
        })?;
        self.encode_ids(g, store, &vocab.tokenize(&text)?)
    }
}

/// Causal decoder over `[prompt ids ‖ answer ids]` that cross-attends fused
/// text tokens and projects to the vocabulary.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub embed: Embedding,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
    pub out: Linear,
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    /// Emitted ids, without the terminating EOS.
    pub ids: Vec<usize>,
    /// True when `max_len` was reached before EOS.
    pub truncated: bool,
}

/// Decoder input and aligned targets for teacher forcing. Targets inside the
/// prompt are PAD; the last prompt position predicts the first answer token.
pub fn teacher_forcing(prompt_ids: &[usize], answer_ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = prompt_ids.to_vec();
    input.extend_from_slice(answer_ids);
    let mut targets = vec![PAD; prompt_ids.len() - 1];
    targets.extend_from_slice(answer_ids);
    targets.push(EOS);
    (input, targets)
}

impl TextDecoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig) -> Result<Self> {
        Ok(TextDecoder {
            embed: Embedding::new(store, &join(name, "embed"), cfg.vocab_size, cfg.text_dim)?,
            layers: transformer_stack(
                store,
                &join(name, "layers"),
                cfg.text_decoder_layers,
                cfg.text_dim,
                cfg.heads,
                cfg.mlp_ratio,
                true,
            )?,
            norm: LayerNorm::new(store, &join(name, "norm"), cfg.text_dim)?,
            out: Linear::new(store, &join(name, "out"), cfg.text_dim, cfg.vocab_size)?,
        })
    }

    /// Logits `[T×vocab]`; row `t` depends only on `ids[..=t]` and `memory`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        memory: Var,
    ) -> Result<Var> {
        if ids.is_empty() {
            return Err(ModelError::Usage(
                "decoder needs at least one input token".into(),
            ));
        }
        let e = self.embed.forward(g, store, ids)?;
        let pos = g.constant(sinusoidal_1d(ids.len(), self.embed.dim)?);
        let mut x = g.add(e, pos)?;
        let mask = causal_mask(ids.len());
        for layer in &self.layers {
            x = layer.forward(g, store, x, Some(memory), Some(&mask))?;
        }
        let x = self.norm.forward(g, store, x)?;
        self.out.forward(g, store, x)
    }

    /// Greedy decoding after `prompt_ids`, stopping at EOS or `max_len` tokens.
    pub fn generate(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        prompt_ids: &[usize],
        max_len: usize,
    ) -> Result<Generation> {
        if max_len == 0 {
            return Err(ModelError::Usage("max_len must be at least 1".into()));
        }
        let mut seq = prompt_ids.to_vec();
        let mut ids = Vec::new();
        for _ in 0..max_len {
            let mut g = Graph::new();
            let mem = g.constant(memory.clone());
            let logits = self.forward(&mut g, store, &seq, mem)?;
            let next = argmax(g.value(logits).row(seq.len() - 1));
            if next == EOS {
                return Ok(Generation {
                    ids,
                    truncated: false,
                });
            }
            ids.push(next);
            seq.push(next);
        }
        Ok(Generation {
            ids,
            truncated: true,
        })
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean token cross-entropy over non-PAD targets.
pub fn text_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = g.shape(logits)[0];
    if targets.len() != rows {
        return Err(TensorError::dim("text_loss", g.shape(logits), &[targets.len()]).into());
    }
    let t: Vec<Option<usize>> = targets
        .iter()
        .map(|&id| (id != PAD).then_some(id))
        .collect();
    Ok(g.cross_entropy(logits, &t, None)?)
}
