use rayon::prelude::*;

use super::{Demo, FeatureEntry, TrainerError};
use crate::encoder::encode_var;
use crate::env::NavAction;
use crate::policy::decode_sequence_var;
use crate::tensor::{softmax, DenseArray, Gradients, ParamStore, Tape, TensorError, Var};

/// `w_1 = 1`, then `1 + gamma` wherever the action differs from its predecessor.
pub fn inflection_weights(actions: &[NavAction], gamma: f64) -> Vec<f64> {
    actions
        .iter()
        .enumerate()
        .map(|(t, a)| if t > 0 && actions[t - 1] != *a { 1.0 + gamma } else { 1.0 })
        .collect()
}

/// `(1/L) sum_t w_t * -log softmax(logits_t)[a_t]`.
fn weighted_nll(tape: &mut Tape<'_>, logits: &[Var], actions: &[NavAction], weights: &[f64]) -> Result<Var, TensorError> {
    let mut terms = Vec::with_capacity(logits.len());
    for ((&l, a), &w) in logits.iter().zip(actions).zip(weights) {
        let ce = tape.softmax_cross_entropy(l, a.code() as usize)?;
        terms.push(tape.scale(ce, w)?);
    }
    let total = tape.sum(&terms)?;
    tape.scale(total, 1.0 / logits.len() as f64)
}

struct Forward {
    features: Vec<Var>,
    logits: Vec<Var>,
}

fn forward_demo<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, demo: &'a Demo) -> Result<Forward, TensorError> {
    let features = demo
        .embeddings
        .iter()
        .map(|e| encode_var(tape, store, e))
        .collect::<Result<Vec<_>, _>>()?;
    let logits = decode_sequence_var(tape, store, &features)?;
    Ok(Forward { features, logits })
}

/// `sum_t |old_t - new_t|^e`.
fn kd_var<'a>(tape: &mut Tape<'a>, features: &[Var], old: &'a [DenseArray], exponent: u32) -> Result<Var, TensorError> {
    let mut terms = Vec::with_capacity(features.len());
    for (&f, o) in features.iter().zip(old) {
        let o = tape.constant(o);
        let sq = tape.squared_diff_sum(o, f)?;
        terms.push(if exponent == 1 { tape.pow(sq, 0.5)? } else { sq });
    }
    tape.sum(&terms)
}

/// Mean over steps of KL(old || new).
fn lwf_var(tape: &mut Tape<'_>, logits: &[Var], old_probs: &[Vec<f64>]) -> Result<Var, TensorError> {
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, p) in logits.iter().zip(old_probs) {
        terms.push(tape.kl_divergence(p, l)?);
    }
    let total = tape.sum(&terms)?;
    tape.scale(total, 1.0 / logits.len() as f64)
}

fn fr_var<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, entry: &'a FeatureEntry) -> Result<Var, TensorError> {
    let feats: Vec<Var> = entry.features.iter().map(|f| tape.constant(f)).collect();
    let logits = decode_sequence_var(tape, store, &feats)?;
    weighted_nll(tape, &logits, &entry.actions, &entry.weights)
}

fn non_empty(demo: &Demo) -> Result<(), TrainerError> {
    if demo.is_empty() {
        return Err(TrainerError::Config(format!("trajectory {} is empty", demo.id())));
    }
    Ok(())
}

/// Inflection-weighted behaviour-cloning loss of one demonstration.
pub fn loss_current(store: &ParamStore, demo: &Demo, gamma: f64) -> Result<f64, TrainerError> {
    non_empty(demo)?;
    let mut tape = Tape::new();
    let fwd = forward_demo(&mut tape, store, demo)?;
    let w = inflection_weights(&demo.actions, gamma);
    let l = weighted_nll(&mut tape, &fwd.logits, &demo.actions, &w)?;
    Ok(tape.value(l).item())
}

/// Feature distillation distance between two parameter sets on `demo`.
pub fn loss_kd(old: &ParamStore, new: &ParamStore, demo: &Demo, exponent: u32) -> Result<f64, TrainerError> {
    non_empty(demo)?;
    let old_feats = old_features(old, demo)?;
    let mut tape = Tape::new();
    let feats = demo
        .embeddings
        .iter()
        .map(|e| encode_var(&mut tape, new, e))
        .collect::<Result<Vec<_>, _>>()?;
    let l = kd_var(&mut tape, &feats, &old_feats, exponent)?;
    Ok(tape.value(l).item())
}

/// Replay loss of a stored feature sequence; no re-encoding happens.
pub fn loss_fr(store: &ParamStore, entry: &FeatureEntry) -> Result<f64, TrainerError> {
    let mut tape = Tape::new();
    let l = fr_var(&mut tape, store, entry)?;
    Ok(tape.value(l).item())
}

pub(super) fn old_features(old: &ParamStore, demo: &Demo) -> Result<Vec<DenseArray>, TrainerError> {
    demo.embeddings
        .iter()
        .map(|e| {
            let mut tape = Tape::new();
            let f = encode_var(&mut tape, old, e)?;
            Ok(tape.value(f).clone())
        })
        .collect()
}

pub(super) fn old_action_probs(old: &ParamStore, demo: &Demo) -> Result<Vec<Vec<f64>>, TrainerError> {
    let mut tape = Tape::new();
    let fwd = forward_demo(&mut tape, old, demo)?;
    Ok(fwd.logits.iter().map(|&l| softmax(tape.value(l).data())).collect())
}

/// A current-task demonstration with the frozen previous model's outputs
/// attached when a regulariser needs them.
#[derive(Debug, Clone)]
pub struct CurrentItem {
    pub demo: Demo,
    pub old_features: Option<Vec<DenseArray>>,
    pub old_probs: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy)]
pub enum BatchItem<'d> {
    Current(&'d CurrentItem),
    /// Stored raw trajectory, re-encoded with the current encoder.
    Raw(&'d Demo),
    Replay(&'d FeatureEntry),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSetup {
    pub gamma: f64,
    pub lambda_kd: f64,
    pub lambda_fr: f64,
    pub kd_exponent: u32,
    pub lwf_coefficient: f64,
}

/// Batch means of each loss term and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub curr: f64,
    pub kd: f64,
    pub lwf: f64,
    pub fr: f64,
    pub total: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 5] = ["curr", "kd", "lwf", "fr", "total"];

    pub fn values(&self) -> [f64; 5] {
        [self.curr, self.kd, self.lwf, self.fr, self.total]
    }
}

#[derive(Default, Clone, Copy)]
struct ItemTerms {
    curr: f64,
    kd: f64,
    lwf: f64,
    fr: f64,
}

/// Loss and gradient of one batch:
/// `mean(L_curr) + lambda_kd * mean(L_KD) + c * mean(KL) + lambda_fr * mean(L_FR)`,
/// where `L_curr` averages over current and raw-replay items, the distillation
/// and KL terms over current items that carry previous-model outputs, and
/// `L_FR` over feature-replay items. Items are differentiated on separate
/// tapes in parallel; gradients are summed in item order.
pub fn batch_loss_and_grad(
    store: &ParamStore,
    items: &[BatchItem<'_>],
    setup: &LossSetup,
) -> Result<(LossComponents, Gradients), TrainerError> {
    let n_dense = items.iter().filter(|i| !matches!(i, BatchItem::Replay(_))).count();
    let n_kd = items
        .iter()
        .filter(|i| matches!(i, BatchItem::Current(c) if c.old_features.is_some()))
        .count();
    let n_lwf = items
        .iter()
        .filter(|i| matches!(i, BatchItem::Current(c) if c.old_probs.is_some()))
        .count();
    let n_fr = items.len() - n_dense;
    if items.is_empty() {
        return Err(TrainerError::Config("empty batch".into()));
    }
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };

    let results: Vec<Result<(ItemTerms, Gradients), TrainerError>> = items
        .par_iter()
        .map(|item| {
            let mut tape = Tape::new();
            let mut terms = ItemTerms::default();
            let mut parts = Vec::new();
            match *item {
                BatchItem::Current(c) => {
                    non_empty(&c.demo)?;
                    let fwd = forward_demo(&mut tape, store, &c.demo)?;
                    let w = inflection_weights(&c.demo.actions, setup.gamma);
                    let lc = weighted_nll(&mut tape, &fwd.logits, &c.demo.actions, &w)?;
                    terms.curr = tape.value(lc).item();
                    parts.push(tape.scale(lc, inv(n_dense))?);
                    if let Some(old) = &c.old_features {
                        let kd = kd_var(&mut tape, &fwd.features, old, setup.kd_exponent)?;
                        terms.kd = tape.value(kd).item();
                        parts.push(tape.scale(kd, setup.lambda_kd * inv(n_kd))?);
                    }
                    if let Some(probs) = &c.old_probs {
                        let kl = lwf_var(&mut tape, &fwd.logits, probs)?;
                        terms.lwf = tape.value(kl).item();
                        parts.push(tape.scale(kl, setup.lwf_coefficient * inv(n_lwf))?);
                    }
                }
                BatchItem::Raw(d) => {
                    non_empty(d)?;
                    let fwd = forward_demo(&mut tape, store, d)?;
                    let w = inflection_weights(&d.actions, setup.gamma);
                    let lc = weighted_nll(&mut tape, &fwd.logits, &d.actions, &w)?;
                    terms.curr = tape.value(lc).item();
                    parts.push(tape.scale(lc, inv(n_dense))?);
                }
                BatchItem::Replay(e) => {
                    let fr = fr_var(&mut tape, store, e)?;
                    terms.fr = tape.value(fr).item();
                    parts.push(tape.scale(fr, setup.lambda_fr * inv(n_fr))?);
                }
            }
            let out = tape.sum(&parts)?;
            let grads = tape.backward(out, 1.0, store)?;
            Ok((terms, grads))
        })
        .collect();

    let mut sums = ItemTerms::default();
    let mut total_grad: Option<Gradients> = None;
    for r in results {
        let (t, g) = r?;
        sums.curr += t.curr;
        sums.kd += t.kd;
        sums.lwf += t.lwf;
        sums.fr += t.fr;
        match &mut total_grad {
            None => total_grad = Some(g),
            Some(acc) => acc.accumulate(&g)?,
        }
    }
    let mut c = LossComponents {
        curr: sums.curr * inv(n_dense),
        kd: sums.kd * inv(n_kd),
        lwf: sums.lwf * inv(n_lwf),
        fr: sums.fr * inv(n_fr),
        total: 0.0,
    };
    c.total = c.curr + setup.lambda_kd * c.kd + setup.lwf_coefficient * c.lwf + setup.lambda_fr * c.fr;
    Ok((c, total_grad.expect("non-empty batch")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use NavAction::*;

    #[test]
    fn weights_mark_action_changes() {
        let w = inflection_weights(&[MoveForward, MoveForward, TurnLeft, TurnLeft, Stop], 3.48);
        assert_eq!(w, vec![1.0, 1.0, 4.48, 1.0, 4.48]);
        assert_eq!(inflection_weights(&[Stop], 3.48), vec![1.0]);
    }
}
