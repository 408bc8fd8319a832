//! Multimodal observation encoder: frozen random backbones per modality
//! followed by trainable projectors whose outputs are concatenated.

use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::env::{NavAction, ObsConfig, Observation, Trajectory};
use crate::rng::substream;
use crate::tensor::{DenseArray, ParamStore, Tape, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("observation does not match the encoder: {0}")]
    DimMismatch(String),
    #[error("cannot encode an empty trajectory")]
    EmptyTrajectory,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Depth,
    Pose,
    PrevAction,
    Goal,
}

impl Modality {
    /// Concatenation order of the feature vector.
    pub const ALL: [Modality; 5] = [
        Modality::Visual,
        Modality::Depth,
        Modality::Pose,
        Modality::PrevAction,
        Modality::Goal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Depth => "depth",
            Modality::Pose => "pose",
            Modality::PrevAction => "prev_action",
            Modality::Goal => "goal",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn squashed(self) -> bool {
        matches!(self, Modality::Visual | Modality::Depth)
    }

    pub fn weight_name(self) -> String {
        format!("encoder.proj_{}.weight", self.name())
    }

    pub fn bias_name(self) -> String {
        format!("encoder.proj_{}.bias", self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub visual: usize,
    pub depth: usize,
    pub pose: usize,
    pub prev_action: usize,
    pub goal: usize,
}

impl ModalityDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Visual => self.visual,
            Modality::Depth => self.depth,
            Modality::Pose => self.pose,
            Modality::PrevAction => self.prev_action,
            Modality::Goal => self.goal,
        }
    }

    pub fn total(&self) -> usize {
        Modality::ALL.iter().map(|&m| self.get(m)).sum()
    }

    /// Start offset of `m` inside the concatenation.
    pub fn offset(&self, m: Modality) -> usize {
        Modality::ALL[..m.index()].iter().map(|&p| self.get(p)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub backbone: ModalityDims,
    pub projector: ModalityDims,
    /// Multiplier applied to the row/column displacement before the pose backbone.
    pub pose_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: ModalityDims {
                visual: 81,
                depth: 16,
                pose: 16,
                prev_action: 8,
                goal: 8,
            },
            projector: ModalityDims {
                visual: 64,
                depth: 32,
                pose: 16,
                prev_action: 8,
                goal: 8,
            },
            pose_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.projector.total()
    }
}

/// Side of the square blocks the semantic patch is pooled over.
pub const POOL_BLOCK: usize = 3;

fn pooled_side(obs: &ObsConfig) -> usize {
    obs.patch_size.div_ceil(POOL_BLOCK)
}

/// Raw input width of each modality for a given observation layout.
fn input_dim(obs: &ObsConfig, m: Modality) -> usize {
    match m {
        Modality::Visual => pooled_side(obs).pow(2) * obs.num_codes(),
        Modality::Depth => obs.depth_rays,
        Modality::Pose => 7,
        Modality::PrevAction => NavAction::COUNT,
        Modality::Goal => obs.num_categories,
    }
}

/// Frozen backbone outputs for one observation, one array per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneEmbedding {
    pub parts: [DenseArray; 5],
}

impl BackboneEmbedding {
    pub fn visual(&self) -> &[f64] {
        self.parts[0].data()
    }
}

/// Seeded orthogonal projections, one per modality. Stored input-major
/// (`[in][out]`) so one-hot inputs select contiguous rows.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSet {
    obs: ObsConfig,
    cfg: EncoderConfig,
    weights: [Vec<f64>; 5],
}

/// `rows x cols` matrix with orthonormal rows (rows <= cols) or orthonormal
/// columns (rows > cols), returned row-major.
fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let (count, len) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes of modified Gram-Schmidt keep the basis orthogonal to
        // rounding precision.
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols { basis[r][c] } else { basis[c][r] };
        }
    }
    out
}

impl BackboneSet {
    pub fn new(master_seed: u64, obs: &ObsConfig, cfg: &EncoderConfig) -> Self {
        let weights = Modality::ALL.map(|m| {
            let mut rng = substream(master_seed, "init", 100 + m.index() as u64);
            let (out, inp) = (cfg.backbone.get(m), input_dim(obs, m));
            let w = orthogonal(out, inp, &mut rng);
            // Transpose to input-major.
            let mut t = vec![0.0; out * inp];
            for o in 0..out {
                for i in 0..inp {
                    t[i * out + o] = w[o * inp + i];
                }
            }
            t
        });
        Self {
            obs: obs.clone(),
            cfg: cfg.clone(),
            weights,
        }
    }

    pub fn obs_config(&self) -> &ObsConfig {
        &self.obs
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn check(&self, obs: &Observation) -> Result<(), EncoderError> {
        let o = &self.obs;
        let cells = o.patch_size * o.patch_size;
        if obs.semantic_patch.len() != cells {
            return Err(EncoderError::DimMismatch(format!(
                "patch has {} cells, expected {cells}",
                obs.semantic_patch.len()
            )));
        }
        if let Some(&code) = obs.semantic_patch.iter().find(|&&c| c as usize >= o.num_codes()) {
            return Err(EncoderError::DimMismatch(format!("patch code {code} out of range")));
        }
        if obs.depth_rays.len() != o.depth_rays {
            return Err(EncoderError::DimMismatch(format!(
                "{} depth rays, expected {}",
                obs.depth_rays.len(),
                o.depth_rays
            )));
        }
        if obs.goal as usize >= o.num_categories {
            return Err(EncoderError::DimMismatch(format!(
                "goal {} outside a vocabulary of {}",
                obs.goal, o.num_categories
            )));
        }
        Ok(())
    }

    fn dense(&self, m: Modality, input: &[f64]) -> DenseArray {
        let out = self.cfg.backbone.get(m);
        let w = &self.weights[m.index()];
        let mut y = vec![0.0; out];
        for (i, &x) in input.iter().enumerate() {
            if x != 0.0 {
                let row = &w[i * out..(i + 1) * out];
                y.iter_mut().zip(row).for_each(|(acc, wi)| *acc += x * wi);
            }
        }
        DenseArray::vector(y)
    }

    /// Max-pools code presence over `POOL_BLOCK`-sized blocks of the patch,
    /// then projects. With the default 9x9 patch the centre block is exactly
    /// the agent's Chebyshev-1 neighbourhood.
    fn visual_array(&self, obs: &Observation) -> DenseArray {
        let codes = self.obs.num_codes();
        let (v, side) = (self.obs.patch_size, pooled_side(&self.obs));
        let mut present = vec![0.0; side * side * codes];
        for (cell, &code) in obs.semantic_patch.iter().enumerate() {
            let block = (cell / v / POOL_BLOCK) * side + cell % v / POOL_BLOCK;
            present[block * codes + code as usize] = 1.0;
        }
        self.dense(Modality::Visual, &present)
    }

    /// All frozen backbone outputs for `obs`.
    pub fn embed(&self, obs: &Observation) -> Result<BackboneEmbedding, EncoderError> {
        self.check(obs)?;
        let pd = &obs.pose_delta;
        let mut pose = vec![0.0; 7];
        pose[0] = pd.d_row as f64 * self.cfg.pose_scale;
        pose[1] = pd.d_col as f64 * self.cfg.pose_scale;
        pose[2 + pd.heading.index()] = 1.0;
        pose[6] = pd.pitch as f64;
        // Unit-variance entries, as in an embedding table; a unit-norm goal
        // vector is too weak to gate the recurrent cell.
        let goal_scale = (self.cfg.backbone.goal as f64).sqrt();
        let goal: Vec<f64> = obs.goal_one_hot(self.obs.num_categories).iter().map(|x| x * goal_scale).collect();
        Ok(BackboneEmbedding {
            parts: [
                self.visual_array(obs),
                self.dense(Modality::Depth, &obs.depth_rays),
                self.dense(Modality::Pose, &pose),
                self.dense(Modality::PrevAction, &obs.prev_action_one_hot()),
                self.dense(Modality::Goal, &goal),
            ],
        })
    }

    /// Frozen visual backbone output; never depends on trainable parameters.
    pub fn visual_embedding(&self, obs: &Observation) -> Result<Vec<f64>, EncoderError> {
        self.check(obs)?;
        Ok(self.visual_array(obs).into_data())
    }

    pub fn embed_trajectory(&self, traj: &Trajectory) -> Result<Vec<BackboneEmbedding>, EncoderError> {
        if traj.observations.is_empty() {
            return Err(EncoderError::EmptyTrajectory);
        }
        traj.observations.iter().map(|o| self.embed(o)).collect()
    }
}

/// Adds freshly initialised projector parameters to `store`: weights drawn
/// from N(0, 1/fan_in), zero biases.
pub fn init_projectors(store: &mut ParamStore, cfg: &EncoderConfig, master_seed: u64) -> Result<(), TensorError> {
    for m in Modality::ALL {
        let (out, inp) = (cfg.projector.get(m), cfg.backbone.get(m));
        let mut rng = substream(master_seed, "init", m.index() as u64);
        let normal = Normal::new(0.0, 1.0 / (inp as f64).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..out * inp).map(|_| rng.sample(normal)).collect();
        store.insert(m.weight_name(), DenseArray::matrix(out, inp, w)?)?;
        store.insert(m.bias_name(), DenseArray::zeros(&[out]))?;
    }
    Ok(())
}

/// Records the projectors and concatenation for one embedded observation.
pub fn encode_var<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    emb: &'a BackboneEmbedding,
) -> Result<Var, TensorError> {
    let mut parts = Vec::with_capacity(5);
    for m in Modality::ALL {
        let x = tape.constant(&emb.parts[m.index()]);
        let w = tape.param(store, &m.weight_name())?;
        let b = tape.param(store, &m.bias_name())?;
        let wx = tape.matmul(w, x)?;
        let y = tape.add(wx, b)?;
        parts.push(if m.squashed() { tape.tanh(y)? } else { y });
    }
    tape.concat(&parts)
}

/// Feature vector of one observation under the projectors in `store`.
pub fn encode(backbones: &BackboneSet, store: &ParamStore, obs: &Observation) -> Result<Vec<f64>, EncoderError> {
    let emb = backbones.embed(obs)?;
    encode_embedded(store, &emb)
}

pub fn encode_embedded(store: &ParamStore, emb: &BackboneEmbedding) -> Result<Vec<f64>, EncoderError> {
    let mut tape = Tape::new();
    let f = encode_var(&mut tape, store, emb)?;
    Ok(tape.value(f).data().to_vec())
}

/// Features of every step of `traj`, in temporal order.
pub fn encode_trajectory(
    backbones: &BackboneSet,
    store: &ParamStore,
    traj: &Trajectory,
) -> Result<Vec<Vec<f64>>, EncoderError> {
    backbones
        .embed_trajectory(traj)?
        .iter()
        .map(|e| encode_embedded(store, e))
        .collect()
}
