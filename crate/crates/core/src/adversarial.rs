//! Candidate selection under the perturbation mask, and the fast gradient
//! method on embedded rows.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::text::TokenMatrix;

/// Gradient norms below this leave the embedding untouched.
pub const DEGENERATE_GRAD_NORM: f64 = 1e-12;

/// Direction of the perturbation relative to the loss gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FgmSign {
    /// `e' = e - eps * g / |g|`, as printed.
    #[default]
    PaperMinus,
    /// `e' = e + eps * g / |g|`, the loss-increasing variant.
    ClassicPlus,
}

impl FgmSign {
    pub fn factor(self) -> f64 {
        match self {
            FgmSign::PaperMinus => -1.0,
            FgmSign::ClassicPlus => 1.0,
        }
    }
}

impl fmt::Display for FgmSign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FgmSign::PaperMinus => "paper-minus",
            FgmSign::ClassicPlus => "classic-plus",
        })
    }
}

impl FromStr for FgmSign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-minus" => Ok(FgmSign::PaperMinus),
            "classic-plus" => Ok(FgmSign::ClassicPlus),
            _ => Err(Error::config(format!("unknown fgm sign {s:?} (paper-minus|classic-plus)"))),
        }
    }
}

/// One candidate column (or none) per sentence, with the perturbation size.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialPlan {
    pub candidates: Vec<Option<usize>>,
    pub epsilon: f64,
    pub sign: FgmSign,
}

impl AdversarialPlan {
    pub fn new(candidates: Vec<Option<usize>>, epsilon: f64, sign: FgmSign) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be finite and nonnegative, got {epsilon}")));
        }
        Ok(AdversarialPlan { candidates, epsilon, sign })
    }

    pub fn count(&self) -> usize {
        self.candidates.iter().flatten().count()
    }
}

/// Picks one unpadded position per sentence whose token passes `mask`,
/// uniformly, consuming `rng` in sentence order. Sentences without any
/// qualifying position get `None` and consume nothing.
pub fn select_candidates<R: Rng>(tokens: &TokenMatrix, mask: &[bool], rng: &mut R) -> Vec<Option<usize>> {
    (0..tokens.rows)
        .map(|r| {
            let eligible: Vec<usize> = (0..tokens.cols)
                .filter(|&c| !tokens.is_pad(r, c) && mask.get(tokens.ids[r * tokens.cols + c]).copied().unwrap_or(false))
                .collect();
            (!eligible.is_empty()).then(|| eligible[rng.gen_range(0..eligible.len())])
        })
        .collect()
}

/// The shift `sign * eps * g / |g|`, or `None` when `|g|` is degenerate.
pub fn fgm_delta(g: &[f64], epsilon: f64, sign: FgmSign) -> Option<Vec<f64>> {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm.is_nan() || norm < DEGENERATE_GRAD_NORM {
        return None;
    }
    let k = sign.factor() * epsilon / norm;
    Some(g.iter().map(|x| k * x).collect())
}

/// Result of perturbing one embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub values: Vec<f64>,
    /// `true` when the gradient was too small and `values == e`.
    pub degenerate: bool,
}

pub fn fgm_perturb(e: &[f64], g: &[f64], epsilon: f64, sign: FgmSign) -> Result<Perturbed> {
    if e.len() != g.len() {
        return Err(Error::invalid(format!("fgm: embedding has {} entries, gradient {}", e.len(), g.len())));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("fgm: epsilon must be finite and nonnegative, got {epsilon}")));
    }
    Ok(match fgm_delta(g, epsilon, sign) {
        Some(d) => Perturbed {
            values: e.iter().zip(&d).map(|(a, b)| a + b).collect(),
            degenerate: false,
        },
        None => Perturbed {
            values: e.to_vec(),
            degenerate: true,
        },
    })
}

/// Perturbed embedded rows and the constant shift that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub perturbed: Tensor,
    /// Zero except at perturbed rows; added to the clean rows as a constant.
    pub delta: Tensor,
    /// Candidates that were actually perturbed.
    pub active: Vec<Option<usize>>,
    pub degenerate: usize,
}

/// Applies the plan to `[B*N, d]` embedded rows given their loss gradient of
/// the same shape.
pub fn build_adversarial_batch(embedded: &Tensor, plan: &AdversarialPlan, grads: &Tensor) -> Result<AdversarialBatch> {
    if embedded.shape() != grads.shape() || embedded.shape().len() != 2 {
        return Err(Error::Internal(format!(
            "adversarial batch: embedded {:?} and gradient {:?} disagree",
            embedded.shape(),
            grads.shape()
        )));
    }
    let (rows, d) = (embedded.rows(), embedded.cols());
    let sentences = plan.candidates.len();
    if sentences == 0 || rows % sentences != 0 {
        return Err(Error::Internal(format!("adversarial batch: {rows} rows for {sentences} sentences")));
    }
    let cols = rows / sentences;
    let mut delta = vec![0.0; rows * d];
    let mut active = Vec::with_capacity(sentences);
    let mut degenerate = 0;
    for (s, cand) in plan.candidates.iter().enumerate() {
        let Some(c) = *cand else {
            active.push(None);
            continue;
        };
        if c >= cols {
            return Err(Error::Internal(format!("candidate column {c} outside {cols}")));
        }
        let row = s * cols + c;
        match fgm_delta(grads.row(row), plan.epsilon, plan.sign) {
            Some(shift) => {
                delta[row * d..(row + 1) * d].copy_from_slice(&shift);
                active.push(Some(c));
            }
            None => {
                degenerate += 1;
                active.push(None);
            }
        }
    }
    let perturbed = embedded.data().iter().zip(&delta).map(|(a, b)| a + b).collect();
    Ok(AdversarialBatch {
        perturbed: Tensor::matrix(rows, d, perturbed)?,
        delta: Tensor::matrix(rows, d, delta)?,
        active,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_examples() {
        let p = fgm_perturb(&[3.0, 4.0], &[0.0, 2.0], 0.03, FgmSign::PaperMinus).unwrap();
        assert_eq!(p.values, vec![3.0, 3.97]);
        let p = fgm_perturb(&[1.0, 0.0], &[3.0, 4.0], 0.5, FgmSign::PaperMinus).unwrap();
        assert!((p.values[0] - 0.7).abs() < 1e-15 && (p.values[1] + 0.4).abs() < 1e-15);
        let p = fgm_perturb(&[1.0, 0.0], &[3.0, 4.0], 0.5, FgmSign::ClassicPlus).unwrap();
        assert!((p.values[0] - 1.3).abs() < 1e-15 && (p.values[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_degenerate() {
        let p = fgm_perturb(&[1.0, 2.0], &[0.0, 0.0], 0.1, FgmSign::PaperMinus).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.values, vec![1.0, 2.0]);
        assert!(fgm_perturb(&[1.0], &[1.0], -0.1, FgmSign::PaperMinus).is_err());
    }

    #[test]
    fn symbol_only_sentence_has_no_candidate() {
        // ids: 4 "!", 5 "42", 6 "a", 7 "friend"
        let mask = [false, false, false, false, false, false, false, true];
        let tokens = TokenMatrix::from_rows(&[vec![4, 5, 6], vec![7, 4]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_candidates(&tokens, &mask, &mut rng), vec![None, Some(0)]);
    }

    #[test]
    fn all_none_plan_is_identity() {
        let e = Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let g = Tensor::matrix(4, 2, vec![1.0; 8]).unwrap();
        let plan = AdversarialPlan::new(vec![None, None], 0.5, FgmSign::PaperMinus).unwrap();
        let adv = build_adversarial_batch(&e, &plan, &g).unwrap();
        assert_eq!(adv.perturbed, e);
        assert!(adv.delta.data().iter().all(|&x| x == 0.0));
    }
}
