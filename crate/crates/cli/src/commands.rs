use std::path::{Path, PathBuf};

use atcl::adversarial::FgmSign;
use atcl::eval::{self, ProbeReport};
use atcl::model::Model;
use atcl::text::{self, lm_stream, MergeTable, ParallelText, Vocabulary};
use atcl::training::{TrainConfig, TrainData, Trainer, MERGES_FILE, VOCAB_FILE};
use atcl::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    AttackArgs, BpeTrainArgs, EvalBleuArgs, EvalPplArgs, Format, ModelArgs, NeighborsArgs, RobustnessArgs, TrainArgs,
    TranslateArgs, VocabBuildArgs,
};

struct Loaded {
    model: Model,
    vocab: Vocabulary,
    merges: Option<MergeTable>,
}

impl Loaded {
    fn open(args: &ModelArgs) -> Result<Self> {
        let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
        let model = Model::load(&args.checkpoint)?;
        let vocab = Vocabulary::load(&args.vocab.clone().unwrap_or_else(|| dir.join(VOCAB_FILE)))?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::InvalidInput(format!(
                "vocabulary has {} entries but the checkpoint expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        let merges = match &args.merges {
            Some(p) => Some(MergeTable::load(p)?),
            None if dir.join(MERGES_FILE).exists() => Some(MergeTable::load(&dir.join(MERGES_FILE))?),
            None => None,
        };
        Ok(Loaded { model, vocab, merges })
    }

    fn segment(&self, line: &str) -> String {
        match &self.merges {
            Some(m) => m.encode_line(line).join(" "),
            None => line.to_string(),
        }
    }

    fn encode(&self, line: &str) -> Vec<usize> {
        self.vocab.encode_line(&self.segment(line))
    }
}

fn emit(report: &ProbeReport, format: Format) {
    match format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => println!("{}", report.to_json_line()),
    }
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(dir) => Trainer::resume(dir)?,
        None => {
            let mut config = match &args.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            let mut overrides = args.overrides.clone();
            if let Some(seed) = args.seed {
                overrides.push(format!("seed={seed}"));
            }
            if let Some(out) = &args.out {
                overrides.push(format!("output_dir={}", out.display()));
            }
            config.apply_overrides(&overrides)?;
            if config.output_dir.is_none() {
                return Err(Error::Config("output_dir is required (use --out DIR)".into()));
            }
            let data = TrainData::load(&config)?;
            Trainer::new(config, overrides, data)?
        }
    };
    let records = trainer.run()?;
    if let Some(last) = records.last() {
        let metric = match (last.ppl, last.bleu) {
            (Some(p), _) => format!(" ppl={p:.4}"),
            (_, Some(b)) => format!(" bleu={b:.4}"),
            _ => String::new(),
        };
        println!("step={} L={:.6} J={:.6}{metric}", last.step, last.loss, last.total);
    }
    Ok(())
}

pub fn eval_ppl(args: EvalPplArgs) -> Result<()> {
    let m = Loaded::open(&args.model)?;
    if !m.model.config.is_lm() {
        return Err(Error::InvalidInput("eval-ppl needs a language-model checkpoint".into()));
    }
    let lines: Vec<String> = text::read_corpus(&args.corpus)?.iter().map(|l| m.segment(l)).collect();
    let stream = lm_stream(&lines, &m.vocab);
    println!("{}", eval::stream_perplexity(&m.model, &stream, args.seq_len, args.batch_size)?);
    Ok(())
}

fn read_lines_keep_empty(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

pub fn eval_bleu(args: EvalBleuArgs) -> Result<()> {
    let hyps = read_lines_keep_empty(&args.hypotheses)?;
    let refs = read_lines_keep_empty(&args.references)?;
    let s = eval::bleu_lines(&hyps, &refs)?;
    println!("{} unsmoothed={} bp={}", s.bleu, s.unsmoothed, s.brevity_penalty);
    Ok(())
}

pub fn translate(args: TranslateArgs) -> Result<()> {
    let m = Loaded::open(&args.model)?;
    if m.model.config.is_lm() {
        return Err(Error::InvalidInput("translate needs a translation checkpoint".into()));
    }
    let merges = m.merges.clone().unwrap_or_else(|| MergeTable::from_pairs(Vec::new()).expect("empty table"));
    let text = ParallelText { merges, vocab: m.vocab.clone() };
    let lines = read_lines_keep_empty(&args.input)?;
    let pairs: Vec<_> = lines.iter().map(|l| (text.encode(l), Vec::new())).collect();
    for line in atcl::training::translate_pairs(&m.model, &text, &pairs, args.batch_size)? {
        println!("{line}");
    }
    Ok(())
}

pub fn probe_neighbors(args: NeighborsArgs) -> Result<()> {
    let m = Loaded::open(&args.model)?;
    let neighbors = eval::nearest_neighbors(&m.model, &m.vocab, &args.word, args.k)?;
    emit(&ProbeReport::Neighbors { word: args.word, neighbors }, args.format);
    Ok(())
}

pub fn attack(args: AttackArgs) -> Result<()> {
    let m = Loaded::open(&args.model)?;
    let sign: FgmSign = args.sign.parse()?;
    let sentence = m.encode(&args.sentence);
    let position = match args.position {
        Some(p) => p,
        None => sentence
            .iter()
            .rposition(|&t| m.vocab.is_restricted(t))
            .ok_or_else(|| Error::InvalidInput("sentence has no perturbable word".into()))?,
    };
    let report =
        eval::targeted_attack_completion(&m.model, &m.vocab, &sentence, position, args.epsilon, sign, args.max_len)?;
    emit(&ProbeReport::attack(&report, &m.vocab), args.format);
    Ok(())
}

pub fn robustness(args: RobustnessArgs) -> Result<()> {
    let m = Loaded::open(&args.model)?;
    let sign: FgmSign = args.sign.parse()?;
    let sentences: Vec<Vec<usize>> = text::read_corpus(&args.corpus)?.iter().map(|l| m.encode(l)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mean_kl = eval::robustness_divergence(
        &m.model,
        m.vocab.restricted_mask(),
        &sentences,
        args.epsilon,
        sign,
        args.samples,
        &mut rng,
    )?;
    emit(&ProbeReport::Robustness { epsilon: args.epsilon, samples: args.samples, mean_kl }, args.format);
    Ok(())
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    for p in paths {
        lines.extend(text::read_corpus(p)?);
    }
    Ok(lines)
}

pub fn bpe_train(args: BpeTrainArgs) -> Result<()> {
    let lines = read_all(&args.corpus)?;
    let table = text::bpe_train(&text::word_counts(&lines), args.merges);
    table.save(&args.output)?;
    println!("{} merges written to {}", table.len(), args.output.display());
    Ok(())
}

pub fn vocab_build(args: VocabBuildArgs) -> Result<()> {
    let mut lines = read_all(&args.corpus)?;
    if let Some(p) = &args.merges {
        let table = MergeTable::load(p)?;
        lines = lines.iter().map(|l| table.encode_line(l).join(" ")).collect();
    }
    let vocab = Vocabulary::build(&lines, args.min_frequency)?;
    vocab.save(&args.output)?;
    println!("{} tokens written to {}", vocab.len(), args.output.display());
    Ok(())
}
