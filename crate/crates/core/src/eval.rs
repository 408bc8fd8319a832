//! Continual evaluation: SR and SPL over the cumulative category set of
//! each stage, old/new decomposition, and run-level aggregation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{rollout, CategoryId, Episode, ExpertPolicy, ObsConfig, Policy, Scene};
use crate::model::Model;
use crate::tensor::ParamStore;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("evaluation suite: {0}")]
    Suite(String),
    #[error("stage {stage} is outside the {stages}-stage plan")]
    Stage { stage: usize, stages: usize },
}

/// Success weighted by path length. A success from inside the success
/// region (`shortest == 0`) scores 1.
pub fn spl(success: bool, shortest: f64, taken: f64) -> f64 {
    if !success {
        return 0.0;
    }
    if shortest <= 0.0 {
        return 1.0;
    }
    shortest / shortest.max(taken)
}

/// Held-out scenes and per-category evaluation episodes. Stage `k` uses the
/// episodes of every category introduced up to and including `k`.
#[derive(Debug, Clone)]
pub struct EvalSuite {
    pub scenes: BTreeMap<u64, Scene>,
    pub episodes: BTreeMap<CategoryId, Vec<Episode>>,
    pub stages: Vec<Vec<CategoryId>>,
    pub obs: ObsConfig,
}

impl EvalSuite {
    pub fn validate(&self, min_per_category: usize) -> Result<(), EvalError> {
        for cats in &self.stages {
            for c in cats {
                let eps = self.episodes.get(c).map_or(0, |e| e.len());
                if eps < min_per_category.max(1) {
                    return Err(EvalError::Suite(format!(
                        "category {c} has {eps} episodes, needs {min_per_category}"
                    )));
                }
                for e in &self.episodes[c] {
                    if !self.scenes.contains_key(&e.scene_id) {
                        return Err(EvalError::Suite(format!("episode {} refers to unknown scene {}", e.id, e.scene_id)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn cumulative(&self, stage: usize) -> Vec<CategoryId> {
        self.stages[..=stage].iter().flatten().copied().collect()
    }
}

/// Builds a fresh policy for a scene; one call per episode.
pub trait PolicyFactory: Sync {
    fn make<'s>(&'s self, scene: &'s Scene) -> Box<dyn Policy + 's>;
}

pub struct ModelPolicy<'m> {
    pub model: &'m Model,
    pub params: &'m ParamStore,
}

impl PolicyFactory for ModelPolicy<'_> {
    fn make<'s>(&'s self, _scene: &'s Scene) -> Box<dyn Policy + 's> {
        Box::new(self.model.greedy(self.params).expect("parameters match the model"))
    }
}

pub struct ExpertFactory(pub ObsConfig);

impl PolicyFactory for ExpertFactory {
    fn make<'s>(&'s self, scene: &'s Scene) -> Box<dyn Policy + 's> {
        Box::new(ExpertPolicy::new(scene, self.0.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: u64,
    pub scene_id: u64,
    pub category: CategoryId,
    pub success: bool,
    pub shortest: f64,
    pub taken: f64,
    pub spl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub category: CategoryId,
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub categories: Vec<CategoryResult>,
    pub mean_sr: f64,
    pub mean_spl: f64,
    pub old_categories: Vec<CategoryId>,
    pub new_categories: Vec<CategoryId>,
    /// `None` at the first stage.
    pub old_sr: Option<f64>,
    pub old_spl: Option<f64>,
    pub new_sr: f64,
    pub new_spl: f64,
    pub episodes: Vec<EpisodeResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl StageReport {
    /// Aggregates episode results; per-category means are averaged with
    /// equal weight per category.
    pub fn from_episodes(stage: usize, stages: &[Vec<CategoryId>], episodes: Vec<EpisodeResult>) -> Self {
        let new_categories = stages[stage].clone();
        let old_categories: Vec<CategoryId> = stages[..stage].iter().flatten().copied().collect();
        let mut categories = Vec::new();
        for &c in old_categories.iter().chain(&new_categories) {
            let mine: Vec<&EpisodeResult> = episodes.iter().filter(|e| e.category == c).collect();
            let n = mine.len();
            categories.push(CategoryResult {
                category: c,
                episodes: n,
                sr: mean(mine.iter().map(|e| if e.success { 1.0 } else { 0.0 })).unwrap_or(0.0),
                spl: mean(mine.iter().map(|e| e.spl)).unwrap_or(0.0),
            });
        }
        let pick = |set: &[CategoryId], f: fn(&CategoryResult) -> f64| {
            mean(categories.iter().filter(|r| set.contains(&r.category)).map(f))
        };
        let all: Vec<CategoryId> = categories.iter().map(|r| r.category).collect();
        Self {
            stage,
            mean_sr: pick(&all, |r| r.sr).unwrap_or(0.0),
            mean_spl: pick(&all, |r| r.spl).unwrap_or(0.0),
            old_sr: pick(&old_categories, |r| r.sr),
            old_spl: pick(&old_categories, |r| r.spl),
            new_sr: pick(&new_categories, |r| r.sr).unwrap_or(0.0),
            new_spl: pick(&new_categories, |r| r.spl).unwrap_or(0.0),
            categories,
            old_categories,
            new_categories,
            episodes,
        }
    }

    /// Mean SR over the given categories, if any were evaluated.
    pub fn sr_over(&self, cats: &[CategoryId]) -> Option<f64> {
        mean(self.categories.iter().filter(|r| cats.contains(&r.category)).map(|r| r.sr))
    }
}

/// Rolls out every episode of the stage's cumulative category set.
pub fn evaluate_stage(factory: &dyn PolicyFactory, suite: &EvalSuite, stage: usize) -> Result<StageReport, EvalError> {
    if stage >= suite.stages.len() {
        return Err(EvalError::Stage {
            stage,
            stages: suite.stages.len(),
        });
    }
    let jobs: Vec<&Episode> = suite
        .cumulative(stage)
        .iter()
        .flat_map(|c| suite.episodes.get(c).map(|v| v.iter()).into_iter().flatten())
        .collect();
    let results: Vec<EpisodeResult> = jobs
        .par_iter()
        .map(|ep| {
            let scene = &suite.scenes[&ep.scene_id];
            let mut policy = factory.make(scene);
            let r = rollout(scene, ep, policy.as_mut(), &suite.obs);
            let shortest = ep.p_star as f64;
            EpisodeResult {
                episode_id: ep.id,
                scene_id: ep.scene_id,
                category: ep.goal,
                success: r.success,
                shortest,
                taken: r.path_len,
                spl: spl(r.success, shortest, r.path_len),
            }
        })
        .collect();
    Ok(StageReport::from_episodes(stage, &suite.stages, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub avg_sr: f64,
    pub avg_spl: f64,
    pub last_sr: f64,
    pub last_spl: f64,
    /// Old-task SR per stage; `None` at the first stage.
    pub forgetting_curve: Vec<Option<f64>>,
    pub stage_mean_sr: Vec<f64>,
    pub stage_mean_spl: Vec<f64>,
}

/// Avg is the unweighted mean of the stage means; Last is the final stage's mean.
pub fn summarize(reports: &[StageReport]) -> Option<StrategySummary> {
    let last = reports.last()?;
    Some(StrategySummary {
        avg_sr: mean(reports.iter().map(|r| r.mean_sr))?,
        avg_spl: mean(reports.iter().map(|r| r.mean_spl))?,
        last_sr: last.mean_sr,
        last_spl: last.mean_spl,
        forgetting_curve: reports.iter().map(|r| r.old_sr).collect(),
        stage_mean_sr: reports.iter().map(|r| r.mean_sr).collect(),
        stage_mean_spl: reports.iter().map(|r| r.mean_spl).collect(),
    })
}

pub const REPORT_COLUMNS: [&str; 6] = ["strategy", "stage", "category", "episodes", "sr", "spl"];

/// One CSV row per category per stage.
pub fn write_report_csv<W: std::io::Write>(
    out: W,
    rows: &[(String, &StageReport)],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for (strategy, report) in rows {
        for c in &report.categories {
            w.write_record([
                strategy.clone(),
                (report.stage + 1).to_string(),
                c.category.to_string(),
                c.episodes.to_string(),
                format!("{:.6}", c.sr),
                format!("{:.6}", c.spl),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(cat: CategoryId, success: bool, spl_value: f64) -> EpisodeResult {
        EpisodeResult {
            episode_id: 0,
            scene_id: 0,
            category: cat,
            success,
            shortest: 4.0,
            taken: 4.0,
            spl: spl_value,
        }
    }

    #[test]
    fn spl_reference_cases() {
        assert_eq!(spl(false, 4.0, 4.0), 0.0);
        assert_eq!(spl(true, 4.0, 4.0), 1.0);
        assert_eq!(spl(true, 4.0, 8.0), 0.5);
        assert_eq!(spl(true, 0.0, 3.0), 1.0);
    }

    #[test]
    fn avg_and_last() {
        let stages = vec![vec![0], vec![1]];
        let r1 = StageReport::from_episodes(0, &stages, vec![ep(0, true, 1.0), ep(0, true, 0.5), ep(0, true, 1.0), ep(0, false, 0.0), ep(0, false, 0.0)]);
        let r2 = StageReport::from_episodes(1, &stages, vec![ep(0, false, 0.0), ep(1, true, 0.8), ep(0, true, 1.0), ep(1, false, 0.0), ep(1, false, 0.0)]);
        assert!((r1.mean_sr - 0.6).abs() < 1e-15);
        assert_eq!(r1.old_sr, None);
        let s = summarize(&[r1.clone(), r2.clone()]).unwrap();
        assert_eq!(s.last_sr, r2.mean_sr);
        assert!((s.avg_sr - (r1.mean_sr + r2.mean_sr) / 2.0).abs() < 1e-15);
        assert_eq!(s.forgetting_curve, vec![None, Some(0.5)]);
        let one = summarize(&[r1]).unwrap();
        assert_eq!(one.avg_sr, one.last_sr);
    }

    #[test]
    fn csv_has_documented_header() {
        let stages = vec![vec![2]];
        let r = StageReport::from_episodes(0, &stages, vec![ep(2, true, 1.0)]);
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &[("cnav".into(), &r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "strategy,stage,category,episodes,sr,spl\ncnav,1,2,1,1.000000,1.000000\n");
    }
}
