//! Recurrent action decoder: one gated recurrent cell and a linear head.

use rand::Rng;

use crate::encoder::{encode_var, BackboneSet};
use crate::env::{Episode, NavAction, Observation, Policy};
use crate::rng::substream;
use crate::tensor::{softmax, DenseArray, ParamStore, Tape, TensorError, Var};

pub const W_IH: &str = "policy.gru.w_ih";
pub const W_HH: &str = "policy.gru.w_hh";
pub const B_IH: &str = "policy.gru.b_ih";
pub const B_HH: &str = "policy.gru.b_hh";
pub const HEAD_W: &str = "policy.head.weight";
pub const HEAD_B: &str = "policy.head.bias";

/// Adds decoder parameters for `feature_dim` inputs and `hidden` units.
/// Recurrent weights are uniform in `±1/sqrt(hidden)`, the head bias is zero.
pub fn init_policy(store: &mut ParamStore, feature_dim: usize, hidden: usize, master_seed: u64) -> Result<(), TensorError> {
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut rng = substream(master_seed, "init", 50);
    let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
    let w_ih = uniform(3 * hidden * feature_dim);
    let w_hh = uniform(3 * hidden * hidden);
    let b_ih = uniform(3 * hidden);
    let b_hh = uniform(3 * hidden);
    let head = uniform(NavAction::COUNT * hidden);
    store.insert(W_IH, DenseArray::matrix(3 * hidden, feature_dim, w_ih)?)?;
    store.insert(W_HH, DenseArray::matrix(3 * hidden, hidden, w_hh)?)?;
    store.insert(B_IH, DenseArray::vector(b_ih))?;
    store.insert(B_HH, DenseArray::vector(b_hh))?;
    store.insert(HEAD_W, DenseArray::matrix(NavAction::COUNT, hidden, head)?)?;
    store.insert(HEAD_B, DenseArray::zeros(&[NavAction::COUNT]))?;
    Ok(())
}

pub fn hidden_dim(store: &ParamStore) -> Result<usize, TensorError> {
    let w = store.get(W_HH).ok_or_else(|| TensorError::UnknownParam(W_HH.into()))?;
    Ok(w.shape()[1])
}

/// One recurrent update on the tape; returns `(h_next, logits)`.
///
/// r = σ(W_ir x + b_ir + W_hr h + b_hr), z likewise,
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn)), h' = n + z ⊙ (h − n).
pub fn decode_step_var<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    h: Var,
    x: Var,
) -> Result<(Var, Var), TensorError> {
    let hidden = tape.value(h).len();
    let w_ih = tape.param(store, W_IH)?;
    let w_hh = tape.param(store, W_HH)?;
    let b_ih = tape.param(store, B_IH)?;
    let b_hh = tape.param(store, B_HH)?;
    let gi = tape.matmul(w_ih, x)?;
    let gi = tape.add(gi, b_ih)?;
    let gh = tape.matmul(w_hh, h)?;
    let gh = tape.add(gh, b_hh)?;
    let gate = |tape: &mut Tape<'a>, k: usize| -> Result<(Var, Var), TensorError> {
        Ok((tape.slice(gi, k * hidden, hidden)?, tape.slice(gh, k * hidden, hidden)?))
    };
    let (ir, hr) = gate(tape, 0)?;
    let (iz, hz) = gate(tape, 1)?;
    let (in_, hn) = gate(tape, 2)?;
    let r = tape.add(ir, hr)?;
    let r = tape.sigmoid(r)?;
    let z = tape.add(iz, hz)?;
    let z = tape.sigmoid(z)?;
    let rh = tape.mul(r, hn)?;
    let n = tape.add(in_, rh)?;
    let n = tape.tanh(n)?;
    let diff = tape.sub(h, n)?;
    let zd = tape.mul(z, diff)?;
    let h_next = tape.add(n, zd)?;
    let hw = tape.param(store, HEAD_W)?;
    let hb = tape.param(store, HEAD_B)?;
    let logits = tape.matmul(hw, h_next)?;
    let logits = tape.add(logits, hb)?;
    Ok((h_next, logits))
}

/// Logits of every step of a feature sequence, folding from a zero state.
pub fn decode_sequence_var<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    features: &[Var],
) -> Result<Vec<Var>, TensorError> {
    if features.is_empty() {
        return Err(TensorError::Domain {
            op: "decode_sequence",
            detail: "empty feature sequence".into(),
        });
    }
    let mut h = tape.input(DenseArray::zeros(&[hidden_dim(store)?]));
    let mut out = Vec::with_capacity(features.len());
    for &x in features {
        let (next, logits) = decode_step_var(tape, store, h, x)?;
        h = next;
        out.push(logits);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ActionDistribution {
    fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        Self { logits, probs }
    }

    /// Most likely action; ties go to the lowest action code.
    pub fn argmax(&self) -> NavAction {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        NavAction::ALL[best]
    }
}

pub fn decode_step(store: &ParamStore, state: &[f64], feature: &[f64]) -> Result<(ActionDistribution, Vec<f64>), TensorError> {
    check_dims(store, state.len(), feature.len())?;
    let mut tape = Tape::new();
    let h = tape.input(DenseArray::vector(state.to_vec()));
    let x = tape.input(DenseArray::vector(feature.to_vec()));
    let (h_next, logits) = decode_step_var(&mut tape, store, h, x)?;
    Ok((
        ActionDistribution::from_logits(tape.value(logits).data().to_vec()),
        tape.value(h_next).data().to_vec(),
    ))
}

pub fn decode_sequence(store: &ParamStore, features: &[Vec<f64>]) -> Result<Vec<ActionDistribution>, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = features
        .iter()
        .map(|f| tape.input(DenseArray::vector(f.clone())))
        .collect();
    if let Some(f) = features.first() {
        check_dims(store, hidden_dim(store)?, f.len())?;
    }
    let logits = decode_sequence_var(&mut tape, store, &vars)?;
    Ok(logits
        .into_iter()
        .map(|l| ActionDistribution::from_logits(tape.value(l).data().to_vec()))
        .collect())
}

fn check_dims(store: &ParamStore, hidden: usize, feature: usize) -> Result<(), TensorError> {
    let w_ih = store.get(W_IH).ok_or_else(|| TensorError::UnknownParam(W_IH.into()))?;
    let expected = [w_ih.shape()[1], hidden_dim(store)?];
    if [feature, hidden] != expected {
        return Err(TensorError::ShapeMismatch {
            op: "decode_step",
            lhs: vec![feature, hidden],
            rhs: expected.to_vec(),
        });
    }
    Ok(())
}

/// Encodes each observation, advances the recurrent state, and acts greedily.
/// The state is cleared on every `reset`.
pub struct GreedyPolicy<'m> {
    backbones: &'m BackboneSet,
    store: &'m ParamStore,
    hidden: Vec<f64>,
}

impl<'m> GreedyPolicy<'m> {
    pub fn new(backbones: &'m BackboneSet, store: &'m ParamStore) -> Result<Self, TensorError> {
        let hidden = vec![0.0; hidden_dim(store)?];
        check_dims(store, hidden.len(), backbones.config().feature_dim())?;
        Ok(Self {
            backbones,
            store,
            hidden,
        })
    }

    /// Distribution for `obs` given the current state, advancing the state.
    pub fn step(&mut self, obs: &Observation) -> Result<ActionDistribution, crate::encoder::EncoderError> {
        let emb = self.backbones.embed(obs)?;
        let mut tape = Tape::new();
        let x = encode_var(&mut tape, self.store, &emb)?;
        let h = tape.input(DenseArray::vector(std::mem::take(&mut self.hidden)));
        let (h_next, logits) = decode_step_var(&mut tape, self.store, h, x)?;
        self.hidden = tape.value(h_next).data().to_vec();
        Ok(ActionDistribution::from_logits(tape.value(logits).data().to_vec()))
    }
}

impl Policy for GreedyPolicy<'_> {
    fn reset(&mut self, _episode: &Episode) {
        self.hidden.iter_mut().for_each(|h| *h = 0.0);
    }

    fn act(&mut self, obs: &Observation) -> NavAction {
        // Observations come from the environment the backbones were built for;
        // a mismatch is a programming error.
        self.step(obs).expect("observation matches the encoder").argmax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(feature: usize, hidden: usize) -> ParamStore {
        let mut s = ParamStore::new();
        init_policy(&mut s, feature, hidden, 1).unwrap();
        s
    }

    fn zeroed(feature: usize, hidden: usize) -> ParamStore {
        let mut s = store(feature, hidden);
        let names: Vec<String> = s.names().map(String::from).collect();
        for n in names {
            s.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        s
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let s = zeroed(4, 3);
        let (d, _) = decode_step(&s, &[0.0; 3], &[0.0; 4]).unwrap();
        assert!(d.logits.iter().all(|&l| l == 0.0));
        assert!(d.probs.iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-15));
        assert_eq!(d.argmax(), NavAction::MoveForward);
    }

    #[test]
    fn sequence_matches_folded_steps_and_is_causal() {
        let s = store(5, 4);
        let mut rng = substream(2, "t", 0);
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let full = decode_sequence(&s, &feats).unwrap();
        let mut h = vec![0.0; 4];
        for (t, f) in feats.iter().enumerate() {
            let (d, next) = decode_step(&s, &h, f).unwrap();
            assert_eq!(d, full[t]);
            h = next;
            let sum: f64 = d.probs.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12 && d.probs.iter().all(|&p| p > 0.0));
        }
        let prefix = decode_sequence(&s, &feats[..3]).unwrap();
        assert_eq!(prefix[..], full[..3]);

        let mut permuted = feats.clone();
        permuted.swap(0, 1);
        assert_ne!(decode_sequence(&s, &permuted).unwrap(), full);
    }

    #[test]
    fn dimension_errors() {
        let s = store(5, 4);
        assert!(decode_step(&s, &[0.0; 4], &[0.0; 3]).is_err());
        assert!(decode_step(&s, &[0.0; 2], &[0.0; 5]).is_err());
        assert!(decode_sequence(&s, &[]).is_err());
    }

    #[test]
    fn argmax_ties_take_lowest_code() {
        let d = ActionDistribution::from_logits(vec![0.0, 2.0, 1.0, 2.0, 0.0, 2.0]);
        assert_eq!(d.argmax(), NavAction::TurnLeft);
    }
}
