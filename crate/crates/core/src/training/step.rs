use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{build_adversarial_batch, select_candidates, AdversarialPlan, FgmSign};
use crate::autodiff::{Graph, Tensor, Var};
use crate::contrastive::{contrastive_loss, sample_negatives, NegativeSet};
use crate::error::{Error, Result};
use crate::model::{Bound, Forward, Model};
use crate::text::{Batch, Targets};

use super::config::TrainConfig;

/// Weights and settings of the total objective `J = L + alpha L_adv + beta L_cont`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub n_negatives: usize,
    pub include_positive: bool,
    pub sign: FgmSign,
}

impl Objective {
    pub fn from_config(config: &TrainConfig) -> Self {
        Objective {
            alpha: config.effective_alpha(),
            beta: config.effective_beta(),
            epsilon: config.epsilon,
            tau: config.tau,
            n_negatives: config.n_negatives,
            include_positive: config.include_positive,
            sign: config.fgm_sign,
        }
    }

    /// With both weights at zero the objective is the clean loss and the
    /// adversarial pass is skipped entirely.
    pub fn is_adversarial(&self) -> bool {
        self.alpha != 0.0 || self.beta != 0.0
    }
}

/// Everything the adversarial terms need, fixed before the final backward:
/// the FGM shift (a constant), the perturbed sentences and the negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSetup {
    pub delta: Tensor,
    pub active: Vec<Option<usize>>,
    pub negatives: Vec<NegativeSet>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    #[serde(rename = "L")]
    pub loss: f64,
    #[serde(rename = "L_adv")]
    pub loss_adv: f64,
    #[serde(rename = "L_cont")]
    pub loss_cont: f64,
    #[serde(rename = "J")]
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ppl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
    pub wall_ms: Option<f64>,
    pub grad_norm: f64,
    pub candidates: Vec<Option<usize>>,
    pub degenerate: usize,
}

/// Graph handles of the objective's terms.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub clean: Var,
    pub adversarial: Option<Var>,
    pub contrastive: Option<Var>,
    pub total: Var,
}

fn active_targets(batch: &Batch, active: &[Option<usize>]) -> Batch {
    let mut out = batch.clone();
    let grid = match &mut out.targets {
        Targets::NextToken(t) => t,
        Targets::Translation { decoder_output, .. } => decoder_output,
    };
    for (s, a) in active.iter().enumerate() {
        if a.is_none() {
            grid.pad[s * grid.cols..(s + 1) * grid.cols].iter_mut().for_each(|p| *p = true);
        }
    }
    out
}

/// Adds the adversarial terms to a graph holding the clean forward pass.
/// The shift enters as a constant, so no gradient flows through its
/// construction.
pub fn build_objective(
    g: &mut Graph,
    b: &Bound,
    model: &Model,
    batch: &Batch,
    clean: &Forward,
    setup: Option<&AdversarialSetup>,
    objective: &Objective,
) -> Result<Losses> {
    let Some(setup) = setup.filter(|s| s.active.iter().any(Option::is_some)) else {
        return Ok(Losses { clean: clean.loss, adversarial: None, contrastive: None, total: clean.loss });
    };
    let delta = g.constant(setup.delta.clone());
    let shifted = g.add(clean.embedded, delta)?;
    let adv_batch = active_targets(batch, &setup.active);
    let perturbed = model.forward_embedded(g, b, &adv_batch, shifted)?;
    let mut total = clean.loss;
    let weighted = g.scale(perturbed.loss, objective.alpha);
    total = g.add(total, weighted)?;
    let mut contrastive = None;
    if objective.beta != 0.0 && !setup.negatives.is_empty() {
        let sum = contrastive_loss(
            g,
            clean.anchors,
            perturbed.anchors,
            &setup.negatives,
            objective.tau,
            objective.include_positive,
        )?;
        let mean = g.scale(sum, 1.0 / setup.negatives.len() as f64);
        let weighted = g.scale(mean, objective.beta);
        total = g.add(total, weighted)?;
        contrastive = Some(mean);
    }
    Ok(Losses { clean: clean.loss, adversarial: Some(perturbed.loss), contrastive, total })
}

/// Picks candidates, computes their FGM shifts from `embedding_grad` and
/// samples negatives. Consumes `rng` in that order.
pub fn prepare_adversarial(
    model: &Model,
    batch: &Batch,
    embedded: &Tensor,
    embedding_grad: &Tensor,
    mask: &[bool],
    objective: &Objective,
    rng: &mut ChaCha8Rng,
) -> Result<(AdversarialSetup, Vec<Option<usize>>, usize)> {
    let candidates = select_candidates(&batch.source, mask, rng);
    let plan = AdversarialPlan::new(candidates.clone(), objective.epsilon, objective.sign)?;
    let adv = build_adversarial_batch(embedded, &plan, embedding_grad)?;
    let mut negatives = Vec::new();
    if objective.beta != 0.0 {
        let anchors: Vec<usize> = adv
            .active
            .iter()
            .enumerate()
            .filter_map(|(s, c)| c.map(|c| model.anchor_row(batch, s, c)))
            .collect();
        if !anchors.is_empty() {
            negatives = sample_negatives(&model.anchor_grid(batch).pad, &anchors, objective.n_negatives, rng)?;
        }
    }
    let setup = AdversarialSetup { delta: adv.delta, active: adv.active, negatives };
    Ok((setup, candidates, adv.degenerate))
}

/// Objective value and parameter gradients for a fixed adversarial setup.
pub fn objective_with_setup(
    model: &Model,
    batch: &Batch,
    setup: Option<&AdversarialSetup>,
    objective: &Objective,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let clean = model.forward(&mut g, &b, batch)?;
    let losses = build_objective(&mut g, &b, model, batch, &clean, setup, objective)?;
    let grads = g.backward(losses.total)?;
    Ok((g.value(losses.total).item(), b.vars.iter().map(|&v| grads.tensor(v)).collect()))
}

/// Result of one objective evaluation inside a training step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub record: StepRecord,
    pub grads: Vec<Tensor>,
    pub setup: Option<AdversarialSetup>,
}

/// Clean forward, FGM on the clean embedding gradient, perturbed forward,
/// contrastive term and the gradient of `J`. Parameter gradients of the
/// clean backward are discarded; `L` is differentiated once, inside `J`.
pub fn compute_step(
    model: &Model,
    batch: &Batch,
    mask: &[bool],
    objective: &Objective,
    rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let clean = model.forward(&mut g, &b, batch)?;
    let mut candidates = vec![None; batch.size()];
    let mut degenerate = 0;
    let mut setup = None;
    if objective.is_adversarial() {
        let embedding_grad = g.backward(clean.loss)?.tensor(clean.embedded);
        let embedded = g.value(clean.embedded).clone();
        let (s, c, d) = prepare_adversarial(model, batch, &embedded, &embedding_grad, mask, objective, rng)?;
        setup = Some(s);
        candidates = c;
        degenerate = d;
    }
    let losses = build_objective(&mut g, &b, model, batch, &clean, setup.as_ref(), objective)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let record = StepRecord {
        step,
        loss: g.value(losses.clean).item(),
        loss_adv: value(losses.adversarial),
        loss_cont: value(losses.contrastive),
        total: g.value(losses.total).item(),
        ppl: None,
        bleu: None,
        wall_ms: None,
        grad_norm: 0.0,
        candidates,
        degenerate,
    };
    if !record.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "step {step}: J={} L={} L_adv={} L_cont={}",
            record.total, record.loss, record.loss_adv, record.loss_cont
        )));
    }
    let grads_table = g.backward(losses.total)?;
    let grads: Vec<Tensor> = b.vars.iter().map(|&v| grads_table.tensor(v)).collect();
    let norm = grads.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("step {step}: gradient norm {norm}")));
    }
    Ok(StepOutput { record: StepRecord { grad_norm: norm, ..record }, grads, setup })
}
