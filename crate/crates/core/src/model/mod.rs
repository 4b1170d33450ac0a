//! Pre-norm transformer language model and encoder-decoder translation
//! model.
//!
//! Token embeddings `e = E[x]` get a fixed sinusoidal position term added;
//! the sum is the perturbation site for adversarial examples. `H` is the
//! output of the final layer norm, right before the output head.

mod params;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use params::{decode_tensors, encode_tensors, ModelParameters, CHECKPOINT_MAGIC};

use crate::autodiff::{AttentionSpec, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::text::{Batch, Targets, TokenMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Architecture {
    /// Decoder-only model with causal self-attention.
    Lm { layers: usize },
    Seq2Seq { encoder_layers: usize, decoder_layers: usize },
}

/// Which representation the contrastive term compares for translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSide {
    /// Final encoder states at the perturbed source position.
    #[default]
    Encoder,
    /// Final decoder states at the same index, clamped to the target length.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub architecture: Architecture,
    #[serde(default)]
    pub anchor_side: AnchorSide,
}

impl ModelConfig {
    pub fn lm(vocab_size: usize, d_model: usize, n_heads: usize, layers: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            ff_dim: 4 * d_model,
            architecture: Architecture::Lm { layers },
            anchor_side: AnchorSide::Encoder,
        }
    }

    pub fn seq2seq(vocab_size: usize, d_model: usize, n_heads: usize, encoder_layers: usize, decoder_layers: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            ff_dim: 4 * d_model,
            architecture: Architecture::Seq2Seq { encoder_layers, decoder_layers },
            anchor_side: AnchorSide::Encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.d_model == 0 || self.ff_dim == 0 || self.n_heads == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn is_lm(&self) -> bool {
        matches!(self.architecture, Architecture::Lm { .. })
    }
}

/// Sinusoidal position encodings for positions `0..len`, `[len, d]`.
pub fn positional_table(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            out[pos * d + i] = angle.sin();
            if i + 1 < d {
                out[pos * d + i + 1] = angle.cos();
            }
        }
    }
    out
}

/// Parameter handles inside one graph, in canonical order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// Graph handles produced by a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Source-side embedded rows `[B*N, d]`.
    pub embedded: Var,
    /// Final pre-head representations of the predicting stream.
    pub hidden: Var,
    /// Rows the contrastive term compares (see [`AnchorSide`]).
    pub anchors: Var,
    pub logits: Var,
    /// Mean token negative log-likelihood.
    pub loss: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParameters::init(&config, seed)?;
        Ok(Model { config, params })
    }

    /// Wraps existing tensors after checking they match the configuration.
    pub fn from_parameters(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        config.validate()?;
        let expected = params::layout(&config);
        if expected.len() != params.len() {
            return Err(Error::format(
                "checkpoint",
                format!("expected {} parameters, found {}", expected.len(), params.len()),
            ));
        }
        for ((name, shape, _), (found, t)) in expected.iter().zip(params.entries()) {
            if name != found || shape.as_slice() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("expected {name} {shape:?}, found {found} {:?}", t.shape()),
                ));
            }
        }
        Ok(Model { config, params })
    }

    /// Adds every parameter to `g`, as a gradient-tracked leaf when
    /// `trainable`, otherwise as a constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .entries()
            .iter()
            .map(|(_, t)| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    fn p(&self, b: &Bound, name: &str) -> Var {
        b.vars[self.params.index_of(name).unwrap_or_else(|| panic!("parameter {name} missing from layout"))]
    }

    fn linear(&self, g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.p(b, &format!("{prefix}.weight")))?;
        g.add_bias(y, self.p(b, &format!("{prefix}.bias")))
    }

    fn norm(&self, g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
        g.layer_norm(x, self.p(b, &format!("{prefix}.gamma")), self.p(b, &format!("{prefix}.beta")))
    }

    fn attention(&self, g: &mut Graph, b: &Bound, prefix: &str, x: Var, kv: Var, spec: AttentionSpec) -> Result<Var> {
        let q = self.linear(g, b, &format!("{prefix}.q"), x)?;
        let k = self.linear(g, b, &format!("{prefix}.k"), kv)?;
        let v = self.linear(g, b, &format!("{prefix}.v"), kv)?;
        let a = g.attention(q, k, v, spec)?;
        self.linear(g, b, &format!("{prefix}.o"), a)
    }

    fn block(
        &self,
        g: &mut Graph,
        b: &Bound,
        prefix: &str,
        x: Var,
        self_spec: &AttentionSpec,
        cross: Option<(Var, &AttentionSpec)>,
    ) -> Result<Var> {
        let h = self.norm(g, b, &format!("{prefix}.ln1"), x)?;
        let a = self.attention(g, b, &format!("{prefix}.attn"), h, h, self_spec.clone())?;
        let mut x = g.add(x, a)?;
        if let Some((memory, spec)) = cross {
            let h = self.norm(g, b, &format!("{prefix}.ln_cross"), x)?;
            let a = self.attention(g, b, &format!("{prefix}.cross"), h, memory, spec.clone())?;
            x = g.add(x, a)?;
        }
        let h = self.norm(g, b, &format!("{prefix}.ln2"), x)?;
        let f = self.linear(g, b, &format!("{prefix}.ff1"), h)?;
        let f = g.gelu(f);
        let f = self.linear(g, b, &format!("{prefix}.ff2"), f)?;
        g.add(x, f)
    }

    fn embed_with(&self, g: &mut Graph, b: &Bound, table: &str, tokens: &TokenMatrix) -> Result<Var> {
        let e = g.embedding(self.p(b, table), &tokens.ids)?;
        let d = self.config.d_model;
        let row = positional_table(tokens.cols, d);
        let mut pos = Vec::with_capacity(tokens.rows * tokens.cols * d);
        for _ in 0..tokens.rows {
            pos.extend_from_slice(&row);
        }
        let pos = g.constant(Tensor::matrix(tokens.rows * tokens.cols, d, pos)?);
        g.add(e, pos)
    }

    /// Source-side embedded rows `E[x] + P`, `[B*N, d]`.
    pub fn embed(&self, g: &mut Graph, b: &Bound, tokens: &TokenMatrix) -> Result<Var> {
        self.embed_with(g, b, "embed.source", tokens)
    }

    fn self_spec(&self, tokens: &TokenMatrix, causal: bool) -> AttentionSpec {
        AttentionSpec {
            batch: tokens.rows,
            query_len: tokens.cols,
            key_len: tokens.cols,
            heads: self.config.n_heads,
            causal,
            key_padding: tokens.pad.clone(),
        }
    }

    /// Causal stack over already-embedded rows; returns `(H, logits)`.
    pub fn lm_from_embedded(&self, g: &mut Graph, b: &Bound, tokens: &TokenMatrix, embedded: Var) -> Result<(Var, Var)> {
        let Architecture::Lm { layers } = self.config.architecture else {
            return Err(Error::invalid("language-model forward on a translation model"));
        };
        let spec = self.self_spec(tokens, true);
        let mut x = embedded;
        for l in 0..layers {
            x = self.block(g, b, &format!("block.{l}"), x, &spec, None)?;
        }
        let h = self.norm(g, b, "final_norm", x)?;
        let logits = self.linear(g, b, "head", h)?;
        Ok((h, logits))
    }

    /// Encoder stack over embedded source rows; returns the memory `[B*N, d]`.
    pub fn encode_from_embedded(&self, g: &mut Graph, b: &Bound, source: &TokenMatrix, embedded: Var) -> Result<Var> {
        let Architecture::Seq2Seq { encoder_layers, .. } = self.config.architecture else {
            return Err(Error::invalid("encoder forward on a language model"));
        };
        let spec = self.self_spec(source, false);
        let mut x = embedded;
        for l in 0..encoder_layers {
            x = self.block(g, b, &format!("enc.{l}"), x, &spec, None)?;
        }
        self.norm(g, b, "enc_norm", x)
    }

    /// Teacher-forced decoder over `decoder_input`; returns `(H, logits)`.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &Bound,
        source: &TokenMatrix,
        memory: Var,
        decoder_input: &TokenMatrix,
    ) -> Result<(Var, Var)> {
        let Architecture::Seq2Seq { decoder_layers, .. } = self.config.architecture else {
            return Err(Error::invalid("decoder forward on a language model"));
        };
        if decoder_input.rows != source.rows {
            return Err(Error::invalid(format!(
                "{} source rows but {} target rows",
                source.rows, decoder_input.rows
            )));
        }
        let self_spec = self.self_spec(decoder_input, true);
        let cross = AttentionSpec {
            batch: source.rows,
            query_len: decoder_input.cols,
            key_len: source.cols,
            heads: self.config.n_heads,
            causal: false,
            key_padding: source.pad.clone(),
        };
        let mut y = self.embed_with(g, b, "embed.target", decoder_input)?;
        for l in 0..decoder_layers {
            y = self.block(g, b, &format!("dec.{l}"), y, &self_spec, Some((memory, &cross)))?;
        }
        let h = self.norm(g, b, "dec_norm", y)?;
        let logits = self.linear(g, b, "head", h)?;
        Ok((h, logits))
    }

    /// Full forward and task loss from given source-side embedded rows.
    pub fn forward_embedded(&self, g: &mut Graph, b: &Bound, batch: &Batch, embedded: Var) -> Result<Forward> {
        match (&batch.targets, self.config.architecture) {
            (Targets::NextToken(t), Architecture::Lm { .. }) => {
                let (hidden, logits) = self.lm_from_embedded(g, b, &batch.source, embedded)?;
                let loss = g.cross_entropy(logits, &t.targets())?;
                Ok(Forward { embedded, hidden, anchors: hidden, logits, loss })
            }
            (Targets::Translation { decoder_input, decoder_output }, Architecture::Seq2Seq { .. }) => {
                let memory = self.encode_from_embedded(g, b, &batch.source, embedded)?;
                let (hidden, logits) = self.decode(g, b, &batch.source, memory, decoder_input)?;
                let loss = g.cross_entropy(logits, &decoder_output.targets())?;
                let anchors = match self.config.anchor_side {
                    AnchorSide::Encoder => memory,
                    AnchorSide::Decoder => hidden,
                };
                Ok(Forward { embedded, hidden, anchors, logits, loss })
            }
            _ => Err(Error::invalid("batch kind does not match the model architecture")),
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &Bound, batch: &Batch) -> Result<Forward> {
        let embedded = self.embed(g, b, &batch.source)?;
        self.forward_embedded(g, b, batch, embedded)
    }

    /// Token grid whose rows the contrastive anchors index.
    pub fn anchor_grid<'a>(&self, batch: &'a Batch) -> &'a TokenMatrix {
        match (&batch.targets, self.config.anchor_side) {
            (Targets::Translation { decoder_input, .. }, AnchorSide::Decoder) => decoder_input,
            _ => &batch.source,
        }
    }

    /// Anchor row for a candidate at source position `(sentence, col)`.
    pub fn anchor_row(&self, batch: &Batch, sentence: usize, col: usize) -> usize {
        let grid = self.anchor_grid(batch);
        if std::ptr::eq(grid, &batch.source) {
            sentence * grid.cols + col
        } else {
            sentence * grid.cols + col.min(grid.row_len(sentence).saturating_sub(1))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        params::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&params::read_file(path)?).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.config).expect("config serializes");
        encode_tensors(&meta, self.params.entries())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, entries) = decode_tensors(bytes)?;
        let config: ModelConfig =
            serde_json::from_str(&meta).map_err(|e| Error::format("checkpoint", format!("bad model config: {e}")))?;
        Self::from_parameters(config, ModelParameters::from_entries(entries)?)
    }
}
