use serde::Serialize;

use super::{AttackReport, Neighbor};
use crate::text::{join_subwords, Vocabulary};

/// Output of one probe, rendered as an aligned text table or one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "probe", rename_all = "kebab-case")]
pub enum ProbeReport {
    Neighbors {
        word: String,
        neighbors: Vec<Neighbor>,
    },
    Attack {
        prefix: String,
        target: String,
        epsilon: f64,
        clean: String,
        perturbed: String,
        clean_perplexity: f64,
        perturbed_perplexity: f64,
        degenerate: bool,
    },
    Robustness {
        epsilon: f64,
        samples: usize,
        mean_kl: f64,
    },
}

fn words(vocab: &Vocabulary, ids: &[usize]) -> String {
    join_subwords(&vocab.decode(ids)).join(" ")
}

impl ProbeReport {
    pub fn attack(report: &AttackReport, vocab: &Vocabulary) -> Self {
        ProbeReport::Attack {
            prefix: words(vocab, &report.prefix),
            target: vocab.token(report.prefix[report.position]).to_string(),
            epsilon: report.epsilon,
            clean: words(vocab, &report.clean.tokens),
            perturbed: words(vocab, &report.perturbed.tokens),
            clean_perplexity: report.clean.perplexity(),
            perturbed_perplexity: report.perturbed.perplexity(),
            degenerate: report.degenerate,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("probe reports serialize")
    }

    pub fn to_table(&self) -> String {
        match self {
            ProbeReport::Neighbors { word, neighbors } => {
                let width = neighbors.iter().map(|n| n.token.len()).max().unwrap_or(0).max(5);
                let mut out = format!("neighbors of '{word}'\n{:>4}  {:<width$}  {:>10}\n", "rank", "token", "distance");
                for (i, n) in neighbors.iter().enumerate() {
                    out += &format!("{:>4}  {:<width$}  {:>10.6}\n", i + 1, n.token, n.distance);
                }
                out
            }
            ProbeReport::Attack {
                prefix,
                target,
                epsilon,
                clean,
                perturbed,
                clean_perplexity,
                perturbed_perplexity,
                degenerate,
            } => {
                let mut out = format!("prefix     {prefix}\ntarget     {target} (epsilon {epsilon})\n");
                out += &format!("clean      {clean}  [ppl {clean_perplexity:.4}]\n");
                out += &format!("perturbed  {perturbed}  [ppl {perturbed_perplexity:.4}]\n");
                if *degenerate {
                    out += "note       zero gradient at the target, embedding left unchanged\n";
                }
                out
            }
            ProbeReport::Robustness { epsilon, samples, mean_kl } => {
                format!("epsilon  samples  mean_kl\n{epsilon:<7}  {samples:<7}  {mean_kl:.6e}\n")
            }
        }
    }
}
