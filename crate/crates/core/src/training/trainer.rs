use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::config::{Task, TrainConfig};
use super::optim::Adam;
use super::step::{compute_step, Objective, StepRecord};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::{bleu_lines, stream_perplexity, translate_greedy};
use crate::model::{decode_tensors, encode_tensors, Model};
use crate::text::{
    bpe_train, lm_stream, make_lm_batches, make_nmt_batches, read_corpus, read_parallel, word_counts, Batch,
    MergeTable, ParallelText, SentencePair, Vocabulary,
};

pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "state.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MERGES_FILE: &str = "merges.txt";

const STREAM_INIT: u64 = 0;
const STREAM_BATCHING: u64 = 1;
const STREAM_ADVERSARIAL: u64 = 2;

/// Encoded training and validation data with its vocabulary.
#[derive(Clone, Debug)]
pub enum TrainData {
    Lm {
        vocab: Vocabulary,
        merges: Option<MergeTable>,
        train: Vec<usize>,
        valid: Vec<usize>,
    },
    Nmt {
        text: ParallelText,
        train: Vec<SentencePair>,
        valid: Vec<SentencePair>,
        /// Raw target lines of `valid`, the BLEU references.
        valid_references: Vec<String>,
    },
}

impl TrainData {
    /// Word-level vocabulary, or subwords when `bpe_merges > 0`.
    pub fn lm_from_lines<S: AsRef<str>>(train: &[S], valid: &[S], bpe_merges: usize, min_frequency: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }
        let merges = (bpe_merges > 0).then(|| bpe_train(&word_counts(train), bpe_merges));
        let segment = |lines: &[S]| -> Vec<String> {
            lines
                .iter()
                .map(|l| match &merges {
                    Some(m) => m.encode_line(l.as_ref()).join(" "),
                    None => l.as_ref().to_string(),
                })
                .collect()
        };
        let (train, valid) = (segment(train), segment(valid));
        let vocab = Vocabulary::build(&train, min_frequency)?;
        let train_stream = lm_stream(&train, &vocab);
        let valid_stream = if valid.is_empty() { train_stream.clone() } else { lm_stream(&valid, &vocab) };
        Ok(TrainData::Lm { vocab, merges, train: train_stream, valid: valid_stream })
    }

    pub fn nmt_from_pairs(
        train: &[(String, String)],
        valid: &[(String, String)],
        bpe_merges: usize,
        min_frequency: u64,
    ) -> Result<Self> {
        let text = ParallelText::build(train, bpe_merges, min_frequency)?;
        let valid = if valid.is_empty() { train } else { valid };
        Ok(TrainData::Nmt {
            train: text.encode_pairs(train),
            valid: text.encode_pairs(valid),
            valid_references: valid.iter().map(|(_, t)| t.clone()).collect(),
            text,
        })
    }

    /// Reads the corpora named in `config`.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone().ok_or_else(|| Error::config(format!("{key} is required for task {:?}", config.task)))
        };
        match config.task {
            Task::Lm => {
                let train = read_corpus(&need(&config.train_corpus, "train_corpus")?)?;
                let valid = match &config.valid_corpus {
                    Some(p) => read_corpus(p)?,
                    None => Vec::new(),
                };
                Self::lm_from_lines(&train, &valid, config.bpe_merges, config.min_frequency)
            }
            Task::Nmt => {
                let train = read_parallel(
                    &need(&config.train_source, "train_source")?,
                    &need(&config.train_target, "train_target")?,
                )?;
                let valid = match (&config.valid_source, &config.valid_target) {
                    (Some(s), Some(t)) => read_parallel(s, t)?,
                    (None, None) => Vec::new(),
                    _ => return Err(Error::config("valid_source and valid_target go together")),
                };
                Self::nmt_from_pairs(&train, &valid, config.bpe_merges, config.min_frequency)
            }
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            TrainData::Lm { vocab, .. } => vocab,
            TrainData::Nmt { text, .. } => &text.vocab,
        }
    }

    pub fn merges(&self) -> Option<&MergeTable> {
        match self {
            TrainData::Lm { merges, .. } => merges.as_ref(),
            TrainData::Nmt { text, .. } => Some(&text.merges),
        }
    }

    fn task(&self) -> Task {
        match self {
            TrainData::Lm { .. } => Task::Lm,
            TrainData::Nmt { .. } => Task::Nmt,
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn shuffle_seed(seed: u64, epoch: u64) -> u64 {
    let mut rng = stream_rng(seed, STREAM_BATCHING);
    rng.set_word_pos(2 * epoch as u128);
    rng.next_u64()
}

/// A training run: model, optimizer, data order and the metrics log.
pub struct Trainer {
    pub config: TrainConfig,
    pub overrides: Vec<String>,
    pub data: TrainData,
    pub model: Model,
    pub optimizer: Adam,
    pub step: u64,
    objective: Objective,
    epoch: u64,
    cursor: usize,
    batches: Vec<Batch>,
    adv_rng: ChaCha8Rng,
    metrics: Option<File>,
}

impl Trainer {
    /// Fresh run. When `output_dir` is set, truncates its metrics log and
    /// writes the header line `{config, overrides}`.
    pub fn new(config: TrainConfig, overrides: Vec<String>, data: TrainData) -> Result<Self> {
        config.validate()?;
        if data.task() != config.task {
            return Err(Error::config("data does not match the configured task"));
        }
        let model_config = config.model_config(data.vocab().len());
        model_config.validate()?;
        let model = Model::init(model_config, stream_rng(config.seed, STREAM_INIT).next_u64())?;
        let optimizer = Adam::new(&model.params, config.adam_beta1, config.adam_beta2, config.adam_eps);
        let mut trainer = Trainer {
            objective: Objective::from_config(&config),
            adv_rng: stream_rng(config.seed, STREAM_ADVERSARIAL),
            overrides,
            data,
            model,
            optimizer,
            step: 0,
            epoch: 0,
            cursor: 0,
            batches: Vec::new(),
            metrics: None,
            config,
        };
        trainer.batches = trainer.epoch_batches(0)?;
        if let Some(dir) = trainer.config.output_dir.clone() {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            trainer.data.vocab().save(&dir.join(VOCAB_FILE))?;
            if let Some(m) = trainer.data.merges() {
                m.save(&dir.join(MERGES_FILE))?;
            }
            let path = dir.join(METRICS_FILE);
            let mut file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let header = json!({ "config": trainer.config, "overrides": trainer.overrides });
            writeln!(file, "{header}").map_err(|e| Error::io(&path, e))?;
            trainer.metrics = Some(file);
        }
        Ok(trainer)
    }

    /// Continues the run saved in `dir`, reading its corpora from the
    /// recorded configuration.
    pub fn resume(dir: &Path) -> Result<Self> {
        let (config, _) = read_header(dir)?;
        let data = TrainData::load(&config)?;
        Self::resume_with_data(dir, data)
    }

    /// Continues the run saved in `dir` from its last checkpoint. Metrics
    /// records past that checkpoint are dropped so the log matches an
    /// uninterrupted run.
    pub fn resume_with_data(dir: &Path, data: TrainData) -> Result<Self> {
        let (mut config, overrides) = read_header(dir)?;
        config.output_dir = Some(dir.to_path_buf());
        let model = Model::load(&dir.join(MODEL_FILE))?;
        let state_path = dir.join(STATE_FILE);
        let bytes = fs::read(&state_path).map_err(|e| Error::io(&state_path, e))?;
        let (meta, entries) = decode_tensors(&bytes)?;
        let meta: Value = serde_json::from_str(&meta).map_err(|e| Error::format("training state", e.to_string()))?;
        let field = |k: &str| -> Result<u64> {
            meta[k].as_u64().ok_or_else(|| Error::format("training state", format!("missing {k}")))
        };
        let (step, epoch, cursor) = (field("step")?, field("epoch")?, field("cursor")? as usize);
        let word_pos: u128 = meta["adversarial_word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("training state", "missing adversarial_word_pos"))?;

        let mut optimizer = Adam::new(&model.params, config.adam_beta1, config.adam_beta2, config.adam_eps);
        optimizer.step = field("optimizer_step")?;
        let n = model.params.len();
        if entries.len() != 2 * n {
            return Err(Error::format("training state", "moment count does not match the model"));
        }
        for (i, (_, t)) in entries.into_iter().enumerate() {
            let target = if i < n { &mut optimizer.m[i] } else { &mut optimizer.v[i - n] };
            if target.len() != t.numel() {
                return Err(Error::format("training state", "moment shape does not match the model"));
            }
            *target = t.into_data();
        }
        let mut adv_rng = stream_rng(config.seed, STREAM_ADVERSARIAL);
        adv_rng.set_word_pos(word_pos);

        let path = dir.join(METRICS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut kept = String::new();
        for (i, line) in text.lines().enumerate() {
            let keep = i == 0
                || serde_json::from_str::<Value>(line)
                    .ok()
                    .and_then(|v| v["step"].as_u64())
                    .is_some_and(|s| s <= step);
            if keep {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
        let metrics = OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))?;

        let mut trainer = Trainer {
            objective: Objective::from_config(&config),
            config,
            overrides,
            data,
            model,
            optimizer,
            step,
            epoch,
            cursor,
            batches: Vec::new(),
            adv_rng,
            metrics: Some(metrics),
        };
        trainer.batches = trainer.epoch_batches(epoch)?;
        Ok(trainer)
    }

    fn epoch_batches(&self, epoch: u64) -> Result<Vec<Batch>> {
        let seed = shuffle_seed(self.config.seed, epoch);
        match &self.data {
            TrainData::Lm { train, .. } => make_lm_batches(train, self.config.batch_size, self.config.seq_len, seed),
            TrainData::Nmt { train, .. } => make_nmt_batches(train, self.config.batch_size, seed),
        }
    }

    fn learning_rate(&self) -> f64 {
        let lr = self.config.learning_rate;
        match self.config.warmup_steps {
            0 => lr,
            w => lr * ((self.optimizer.step + 1) as f64 / w as f64).min(1.0),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.max_steps
    }

    /// One optimization step; evaluates and checkpoints when due.
    pub fn step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        if self.cursor >= self.batches.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.batches = self.epoch_batches(self.epoch)?;
        }
        let batch = &self.batches[self.cursor];
        let mask = self.data.vocab().restricted_mask();
        let out = compute_step(&self.model, batch, mask, &self.objective, &mut self.adv_rng, self.step + 1)?;
        let lr = self.learning_rate();
        self.optimizer.update(&mut self.model.params, &out.grads, lr)?;
        self.cursor += 1;
        self.step += 1;
        let mut record = out.record;
        let interval = self.config.eval_interval;
        if (interval > 0 && self.step.is_multiple_of(interval)) || self.step == self.config.max_steps {
            match self.config.task {
                Task::Lm => record.ppl = Some(self.evaluate()?),
                Task::Nmt => record.bleu = Some(self.evaluate()?),
            }
            self.checkpoint()?;
        }
        if self.config.log_wall_time {
            record.wall_ms = Some(started.elapsed().as_secs_f64() * 1e3);
        }
        self.log(&record)?;
        Ok(record)
    }

    /// Steps until `max_steps`.
    pub fn run(&mut self) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while !self.is_finished() {
            records.push(self.step()?);
        }
        Ok(records)
    }

    /// Validation perplexity (LM) or corpus BLEU (translation).
    pub fn evaluate(&self) -> Result<f64> {
        match &self.data {
            TrainData::Lm { valid, .. } => {
                stream_perplexity(&self.model, valid, self.config.seq_len, self.config.batch_size)
            }
            TrainData::Nmt { text, valid, valid_references, .. } => {
                let hyps = translate_pairs(&self.model, text, valid, self.config.batch_size)?;
                Ok(bleu_lines(&hyps, valid_references)?.bleu)
            }
        }
    }

    fn log(&mut self, record: &StepRecord) -> Result<()> {
        if let (Some(file), Some(dir)) = (&mut self.metrics, &self.config.output_dir) {
            let line = serde_json::to_string(record).expect("records serialize");
            writeln!(file, "{line}").map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
        }
        Ok(())
    }

    /// Writes the model and the optimizer/data-order state to the output
    /// directory, if one is configured.
    pub fn checkpoint(&self) -> Result<()> {
        let Some(dir) = &self.config.output_dir else {
            return Ok(());
        };
        self.model.save(&dir.join(MODEL_FILE))?;
        let meta = json!({
            "step": self.step,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "optimizer_step": self.optimizer.step,
            "adversarial_word_pos": self.adv_rng.get_word_pos().to_string(),
        });
        let mut entries = Vec::with_capacity(2 * self.optimizer.m.len());
        for (prefix, moments) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            for ((name, t), data) in self.model.params.entries().iter().zip(moments) {
                entries.push((format!("{prefix}.{name}"), Tensor::new(t.shape().to_vec(), data.clone())?));
            }
        }
        let path = dir.join(STATE_FILE);
        fs::write(&path, encode_tensors(&meta.to_string(), &entries)).map_err(|e| Error::io(&path, e))
    }
}

/// Greedy translations of encoded pairs' sources, decoded to words.
pub fn translate_pairs(model: &Model, text: &ParallelText, pairs: &[SentencePair], batch_size: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let sources: Vec<Vec<usize>> = chunk.iter().map(|(s, _)| s.clone()).collect();
        let longest = sources.iter().map(Vec::len).max().unwrap_or(0);
        for ids in translate_greedy(model, &sources, 2 * longest + 10)? {
            out.push(text.decode(&ids));
        }
    }
    Ok(out)
}

/// Configuration and overrides recorded in a run's metrics-log header.
pub fn read_header(dir: &Path) -> Result<(TrainConfig, Vec<String>)> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let first = text.lines().next().unwrap_or("");
    let v: Value = serde_json::from_str(first).map_err(|e| Error::format("metrics log", e.to_string()))?;
    let config = serde_json::from_value(v["config"].clone()).map_err(|e| Error::format("metrics log", e.to_string()))?;
    let overrides = serde_json::from_value(v["overrides"].clone()).unwrap_or_default();
    Ok((config, overrides))
}
