use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Architecture, ModelConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"ATCL1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Uniform,
    Zeros,
    Ones,
}

/// Named tensors in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParameters {
    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate parameter {name}")));
            }
        }
        Ok(ModelParameters { entries, index })
    }

    /// Uniform weights in `±1/sqrt(d_model)`, zero biases and shifts, unit
    /// scales, drawn in canonical order from one seeded stream.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bound = 1.0 / (config.d_model as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Uniform => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                };
                Ok((name, Tensor::new(shape, data)?))
            })
            .collect::<Result<_>>()?;
        Self::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].1)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

struct Layout {
    d: usize,
    ff: usize,
    out: Vec<(String, Vec<usize>, Init)>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.out.push((name, shape, init));
    }

    fn norm(&mut self, p: &str) {
        self.push(format!("{p}.gamma"), vec![self.d], Init::Ones);
        self.push(format!("{p}.beta"), vec![self.d], Init::Zeros);
    }

    fn linear(&mut self, p: &str, i: usize, o: usize) {
        self.push(format!("{p}.weight"), vec![i, o], Init::Uniform);
        self.push(format!("{p}.bias"), vec![o], Init::Zeros);
    }

    fn attention(&mut self, p: &str) {
        for w in ["q", "k", "v", "o"] {
            self.linear(&format!("{p}.{w}"), self.d, self.d);
        }
    }

    fn block(&mut self, p: &str, cross: bool) {
        self.norm(&format!("{p}.ln1"));
        self.attention(&format!("{p}.attn"));
        if cross {
            self.norm(&format!("{p}.ln_cross"));
            self.attention(&format!("{p}.cross"));
        }
        self.norm(&format!("{p}.ln2"));
        self.linear(&format!("{p}.ff1"), self.d, self.ff);
        self.linear(&format!("{p}.ff2"), self.ff, self.d);
    }
}

/// Canonical parameter list for a configuration.
pub(crate) fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, d) = (config.vocab_size, config.d_model);
    let mut l = Layout { d, ff: config.ff_dim, out: Vec::new() };
    l.push("embed.source".into(), vec![v, d], Init::Uniform);
    match config.architecture {
        Architecture::Lm { layers } => {
            for i in 0..layers {
                l.block(&format!("block.{i}"), false);
            }
            l.norm("final_norm");
        }
        Architecture::Seq2Seq { encoder_layers, decoder_layers } => {
            l.push("embed.target".into(), vec![v, d], Init::Uniform);
            for i in 0..encoder_layers {
                l.block(&format!("enc.{i}"), false);
            }
            l.norm("enc_norm");
            for i in 0..decoder_layers {
                l.block(&format!("dec.{i}"), true);
            }
            l.norm("dec_norm");
        }
    }
    l.linear("head", d, v);
    l.out
}

/// Serializes named tensors: the magic line, a `meta` line, the parameter
/// count, one `name dims` line per tensor, `end`, then little-endian f64s.
pub fn encode_tensors(meta: &str, entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut header = String::from_utf8(CHECKPOINT_MAGIC.to_vec()).expect("ascii magic");
    header.push_str(&format!("meta {meta}\nparams {}\n", entries.len()));
    for (name, t) in entries {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name} {}\n", dims.join(" ")));
    }
    header.push_str("end\n");
    let mut bytes = header.into_bytes();
    for (_, t) in entries {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

/// Inverse of [`encode_tensors`].
pub fn decode_tensors(bytes: &[u8]) -> Result<(String, Vec<(String, Tensor)>)> {
    let bad = |detail: String| Error::format("checkpoint", detail);
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| bad("missing ATCL1 magic".into()))?;
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let end = rest[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let line = std::str::from_utf8(&rest[pos..pos + end]).map_err(|_| bad("header is not UTF-8".into()))?;
        pos += end + 1;
        Ok(line)
    };
    let meta = next_line()?
        .strip_prefix("meta ")
        .ok_or_else(|| bad("expected meta line".into()))?
        .to_string();
    let count: usize = next_line()?
        .strip_prefix("params ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("expected params line".into()))?;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let mut parts = line.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| bad("empty parameter name".into()))?;
        let dims = parts
            .map(|p| p.parse::<usize>().map_err(|_| bad(format!("bad dimension in {line:?}"))))
            .collect::<Result<Vec<_>>>()?;
        shapes.push((name.to_string(), dims));
    }
    if next_line()? != "end" {
        return Err(bad("expected end of header".into()));
    }
    let mut data = &rest[pos..];
    let mut entries = Vec::with_capacity(count);
    for (name, shape) in shapes {
        let n: usize = shape.iter().product();
        if data.len() < n * 8 {
            return Err(bad(format!("truncated data for {name}")));
        }
        let values = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[n * 8..];
        entries.push((name, Tensor::new(shape, values).map_err(|e| bad(e.to_string()))?));
    }
    if !data.is_empty() {
        return Err(bad(format!("{} trailing bytes", data.len())));
    }
    Ok((meta, entries))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
