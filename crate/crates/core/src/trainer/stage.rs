use rand::seq::SliceRandom;

use super::loss::{old_action_probs, old_features};
use super::{
    batch_loss_and_grad, inflection_weights, BatchItem, BatchScheduler, CurrentItem, Demo, FeatureEntry,
    LossComponents, LossSetup, ReplayBuffer, StrategyId, TrainConfig, TrainerError,
};
use crate::encoder::encode_embedded;
use crate::env::CategoryId;
use crate::rng::substream;
use crate::selection::{cluster_sample, select_keyframes, uniform_sample, SelectionMethod, SelectionReport};
use crate::tensor::{adamw_step, interpolate_params, DenseArray, ParamStore};

/// One training stage: its index (0-based), its categories, and its data.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stage: usize,
    pub categories: Vec<CategoryId>,
    pub demos: Vec<Demo>,
}

/// Everything carried from one stage to the next.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    /// End-of-stage parameters of the previous stage.
    pub prev_params: Option<ParamStore>,
    pub buffer: ReplayBuffer,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            prev_params: None,
            buffer: ReplayBuffer::default(),
        }
    }
}

/// Per-epoch mean of one loss component.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptRow {
    pub stage: usize,
    pub epoch: usize,
    pub component: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub transcript: Vec<TranscriptRow>,
    pub selections: Vec<SelectionReport>,
    pub optimizer_steps: u64,
}

// Sub-stream indices under "batching"; three per stage.
fn batching_index(stage: usize, slot: u64) -> u64 {
    stage as u64 * 3 + slot
}

/// Trains one stage with `strategy`, then updates the replay memory and the
/// previous-parameter snapshot.
pub fn run_stage(
    plan: &StagePlan,
    state: &mut TrainState,
    strategy: StrategyId,
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<StageOutcome, TrainerError> {
    let (transcript, optimizer_steps) = train_stage(plan, state, strategy, cfg, master_seed)?;
    let selections = finish_stage(plan, state, strategy, cfg, master_seed)?;
    Ok(StageOutcome {
        transcript,
        selections,
        optimizer_steps,
    })
}

/// Optimisation part of a stage, including the merge step. Leaves the replay
/// memory and the previous-parameter snapshot untouched.
pub fn train_stage(
    plan: &StagePlan,
    state: &mut TrainState,
    strategy: StrategyId,
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<(Vec<TranscriptRow>, u64), TrainerError> {
    cfg.validate()?;
    if plan.demos.is_empty() {
        return Err(TrainerError::EmptyStage(plan.stage));
    }
    if plan.stage > 0 && state.prev_params.is_none() {
        return Err(TrainerError::Config(format!(
            "stage {} needs the previous stage's parameters",
            plan.stage
        )));
    }
    let prev = if plan.stage > 0 { state.prev_params.clone() } else { None };
    state.params.reset_moments();

    let distill = strategy.distills_features() && cfg.weights.lambda_kd > 0.0;
    let current: Vec<CurrentItem> = plan
        .demos
        .iter()
        .map(|d| {
            let (old_features, old_probs) = match &prev {
                Some(p) => (
                    if distill { Some(old_features(p, d)?) } else { None },
                    if strategy == StrategyId::Lwf { Some(old_action_probs(p, d)?) } else { None },
                ),
                None => (None, None),
            };
            Ok(CurrentItem {
                demo: d.clone(),
                old_features,
                old_probs,
            })
        })
        .collect::<Result<_, TrainerError>>()?;

    let n_replay = if strategy.replays_features() {
        state.buffer.features.len()
    } else if strategy.replays_raw() {
        state.buffer.raw.len()
    } else {
        0
    };
    let mut scheduler = BatchScheduler::new(
        current.len(),
        n_replay,
        cfg.batch_size,
        cfg.mix_ratio,
        substream(master_seed, "batching", batching_index(plan.stage, 0)),
        substream(master_seed, "batching", batching_index(plan.stage, 1)),
    );
    let total_steps = (cfg.epochs * scheduler.batches_per_epoch()) as u64;
    let mut optim = cfg.optim.clone();
    optim.total_steps = total_steps;
    optim.warmup_steps = optim.warmup_steps.min(total_steps / 2);
    let setup = LossSetup {
        gamma: cfg.weights.gamma,
        lambda_kd: cfg.weights.lambda_kd,
        lambda_fr: cfg.weights.lambda_fr,
        kd_exponent: cfg.weights.kd_exponent,
        lwf_coefficient: cfg.lwf_coefficient,
    };

    let mut transcript = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = scheduler.next_epoch();
        let mut sums = [0.0; 5];
        for batch in &batches {
            let mut items: Vec<BatchItem<'_>> = batch.current.iter().map(|&i| BatchItem::Current(&current[i])).collect();
            for &r in &batch.replay {
                items.push(if strategy.replays_features() {
                    BatchItem::Replay(&state.buffer.features[r])
                } else {
                    BatchItem::Raw(&state.buffer.raw[r])
                });
            }
            let (c, grads) = batch_loss_and_grad(&state.params, &items, &setup)?;
            step += 1;
            adamw_step(&mut state.params, &grads, &optim, step)?;
            sums.iter_mut().zip(c.values()).for_each(|(s, v)| *s += v);
        }
        for (name, s) in LossComponents::NAMES.iter().zip(sums) {
            transcript.push(TranscriptRow {
                stage: plan.stage,
                epoch,
                component: name,
                value: s / batches.len() as f64,
            });
        }
    }

    if strategy == StrategyId::Merge {
        if let Some(p) = &prev {
            state.params = interpolate_params(&state.params, p, cfg.merge_alpha)?;
        }
    }

    Ok((transcript, step))
}

/// End-of-stage bookkeeping: stores replay entries for the stage's
/// categories and snapshots the parameters for the next stage.
pub fn finish_stage(
    plan: &StagePlan,
    state: &mut TrainState,
    strategy: StrategyId,
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<Vec<SelectionReport>, TrainerError> {
    let selections = fill_buffer(plan, state, strategy, cfg, master_seed)?;
    state.prev_params = Some(state.params.clone());
    Ok(selections)
}

/// Keeps `replay_per_category` trajectories of each new category: raw for
/// data replay, as selected feature frames for the feature-replay family.
fn fill_buffer(
    plan: &StagePlan,
    state: &mut TrainState,
    strategy: StrategyId,
    cfg: &TrainConfig,
    master_seed: u64,
) -> Result<Vec<SelectionReport>, TrainerError> {
    if !strategy.replays_features() && !strategy.replays_raw() {
        return Ok(vec![]);
    }
    let mut rng = substream(master_seed, "batching", batching_index(plan.stage, 2));
    let mut categories = plan.categories.clone();
    categories.sort_unstable();
    let mut reports = Vec::new();
    for cat in categories {
        let mut members: Vec<&Demo> = plan.demos.iter().filter(|d| d.category() == cat).collect();
        members.shuffle(&mut rng);
        members.truncate(cfg.replay_per_category);
        members.sort_by_key(|d| d.id());
        for demo in members {
            if strategy.replays_raw() {
                state.buffer.raw.push(demo.clone());
                continue;
            }
            let method = cfg.selection_for(strategy).expect("feature replay has a selection method");
            let len = demo.len();
            let (indices, scores) = match method {
                SelectionMethod::Lof => {
                    let visual: Vec<Vec<f64>> = demo.embeddings.iter().map(|e| e.visual().to_vec()).collect();
                    let ks = select_keyframes(&visual, &cfg.lof);
                    (ks.indices, ks.scores)
                }
                SelectionMethod::Uniform => (uniform_sample(len, cfg.sample_ratio), vec![]),
                SelectionMethod::Cluster => {
                    let visual: Vec<Vec<f64>> = demo.embeddings.iter().map(|e| e.visual().to_vec()).collect();
                    (
                        cluster_sample(&visual, cfg.sample_ratio, master_seed, demo.id(), cfg.lof.epsilon_norm),
                        vec![],
                    )
                }
                SelectionMethod::Full => ((0..len).collect(), vec![]),
            };
            let features = indices
                .iter()
                .map(|&i| Ok(DenseArray::vector(encode_embedded(&state.params, &demo.embeddings[i])?)))
                .collect::<Result<Vec<_>, TrainerError>>()?;
            let actions: Vec<_> = indices.iter().map(|&i| demo.actions[i]).collect();
            reports.push(SelectionReport {
                task: plan.stage,
                trajectory_id: demo.id(),
                method,
                length: len,
                indices: indices.clone(),
                scores,
                retention: indices.len() as f64 / len as f64,
            });
            state.buffer.features.push(FeatureEntry {
                task: plan.stage,
                trajectory_id: demo.id(),
                category: cat,
                weights: inflection_weights(&actions, cfg.weights.gamma),
                frame_indices: indices,
                features,
                actions,
                source_len: len,
            });
        }
    }
    Ok(reports)
}
