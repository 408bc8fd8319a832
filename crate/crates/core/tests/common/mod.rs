#![allow(dead_code)]

use cnav_core::bench::{generate_dataset, BenchmarkConfig, Dataset};
use cnav_core::encoder::{encode_embedded, ModalityDims};
use cnav_core::model::{Model, ModelConfig};
use cnav_core::selection::{lof_scores, LofConfig};
use cnav_core::tensor::{DenseArray, Gradients, ParamStore};
use cnav_core::trainer::{
    batch_loss_and_grad, inflection_weights, loss_current, loss_fr, loss_kd, BatchItem, CurrentItem, Demo,
    FeatureEntry, LossSetup,
};
use cnav_oracles::{fd_gradient, gradient_rel_err, lof_bruteforce};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-6;

/// Random frame sequences, mixing tied lattice values, duplicates and
/// continuous draws.
pub fn random_lof_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, usize) {
    let len = rng.random_range(2..=60);
    let dim = rng.random_range(1..=16);
    let seq: Vec<Vec<f64>> = match rng.random_range(0..4) {
        0 => (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-1..=1) as f64).collect())
            .collect(),
        1 => vec![(0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(); len],
        _ => (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect(),
    };
    let k = rng.random_range(1..=10).min(len - 1);
    (seq, k)
}

/// Largest absolute LOF deviation from the brute-force oracle.
pub fn lof_oracle_deviation(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (seq, k) = random_lof_case(&mut rng);
        let cfg = LofConfig {
            k_neighbors: k,
            ..LofConfig::default()
        };
        let ours = lof_scores(&seq, &cfg);
        let oracle = lof_bruteforce(&seq, k, cfg.epsilon_norm);
        assert_eq!(ours.len(), oracle.len());
        for (a, b) in ours.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// A handful of scenes and demonstrations.
pub fn tiny_benchmark() -> BenchmarkConfig {
    BenchmarkConfig {
        train_scenes: 6,
        eval_scenes: 3,
        train_per_category: 3,
        eval_per_category: 4,
        ..BenchmarkConfig::default()
    }
}

/// Narrow projectors and recurrent state so every parameter can be
/// finite-differenced.
pub fn small_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.encoder.projector = ModalityDims {
        visual: 5,
        depth: 3,
        pose: 2,
        prev_action: 2,
        goal: 2,
    };
    cfg.hidden = 5;
    cfg
}

pub struct GradientFixture {
    pub model: Model,
    pub params: ParamStore,
    pub old: ParamStore,
    pub demos: Vec<Demo>,
    pub entry: FeatureEntry,
}

pub fn gradient_fixture() -> GradientFixture {
    let mcfg = small_model_config();
    let ds: Dataset = generate_dataset(&tiny_benchmark(), &mcfg.obs, 3).unwrap();
    let model = Model::new(mcfg, 3);
    let params = model.init_params(3).unwrap();
    let old = model.init_params(4).unwrap();
    let mut trajs: Vec<_> = ds.stage_trajectories.iter().flatten().filter(|t| t.len() >= 4).collect();
    trajs.truncate(2);
    let demos: Vec<Demo> = trajs.iter().map(|t| Demo::new(&model.backbones, t, 0).unwrap()).collect();
    let src = &demos[1];
    let indices: Vec<usize> = (0..src.len()).filter(|i| i % 2 == 1 || *i + 1 == src.len()).collect();
    let actions: Vec<_> = indices.iter().map(|&i| src.actions[i]).collect();
    let entry = FeatureEntry {
        task: 0,
        trajectory_id: src.id(),
        category: src.category(),
        features: indices
            .iter()
            .map(|&i| DenseArray::vector(encode_embedded(&old, &src.embeddings[i]).unwrap()))
            .collect(),
        weights: inflection_weights(&actions, 3.48),
        frame_indices: indices,
        actions,
        source_len: src.len(),
    };
    GradientFixture {
        model,
        params,
        old,
        demos,
        entry,
    }
}

pub fn flatten(store: &ParamStore) -> Vec<f64> {
    store.iter().flat_map(|(_, v)| v.data().to_vec()).collect()
}

pub fn flatten_grads(store: &ParamStore, g: &Gradients) -> Vec<f64> {
    store
        .iter()
        .flat_map(|(name, v)| g.get(name).map_or(vec![0.0; v.len()], |a| a.data().to_vec()))
        .collect()
}

pub fn unflatten(store: &ParamStore, flat: &[f64]) -> ParamStore {
    let mut out = store.clone();
    let mut offset = 0;
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let dst = out.get_mut(&name).unwrap();
        let n = dst.len();
        dst.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    out
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| gradient_rel_err(a, n, FD_FLOOR))
        .fold(0.0, f64::max)
}

fn setup(lambda_kd: f64, lambda_fr: f64, kd_exponent: u32) -> LossSetup {
    LossSetup {
        gamma: 3.48,
        lambda_kd,
        lambda_fr,
        kd_exponent,
        lwf_coefficient: 0.2,
    }
}

fn grad(store: &ParamStore, items: &[BatchItem<'_>], s: &LossSetup) -> Vec<f64> {
    let (_, g) = batch_loss_and_grad(store, items, s).unwrap();
    flatten_grads(store, &g)
}

fn current(f: &GradientFixture, demo: usize, kd: bool, lwf: bool) -> CurrentItem {
    let d = &f.demos[demo];
    let old_features = kd.then(|| {
        d.embeddings
            .iter()
            .map(|e| DenseArray::vector(encode_embedded(&f.old, e).unwrap()))
            .collect()
    });
    let old_probs = lwf.then(|| {
        cnav_core::policy::decode_sequence(
            &f.old,
            &d.embeddings.iter().map(|e| encode_embedded(&f.old, e).unwrap()).collect::<Vec<_>>(),
        )
        .unwrap()
        .into_iter()
        .map(|p| p.probs)
        .collect()
    });
    CurrentItem {
        demo: d.clone(),
        old_features,
        old_probs,
    }
}

/// Worst relative error between tape gradients and central differences for
/// each loss term and for the composite objective.
pub fn loss_gradient_errors() -> Vec<(String, f64)> {
    let f = gradient_fixture();
    let x0 = flatten(&f.params);
    let p = |x: &[f64]| unflatten(&f.params, x);
    let mut out = Vec::new();

    let plain = current(&f, 0, false, false);
    let analytic = grad(&f.params, &[BatchItem::Current(&plain)], &setup(0.0, 0.0, 2));
    let numeric = fd_gradient(|x| loss_current(&p(x), &f.demos[0], 3.48).unwrap(), &x0, FD_STEP);
    out.push(("L_curr".to_string(), worst(&analytic, &numeric)));

    for e in [1u32, 2] {
        let item = current(&f, 0, true, false);
        let with = grad(&f.params, &[BatchItem::Current(&item)], &setup(1.0, 0.0, e));
        let without = grad(&f.params, &[BatchItem::Current(&item)], &setup(0.0, 0.0, e));
        let analytic: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a - b).collect();
        let numeric = fd_gradient(|x| loss_kd(&f.old, &p(x), &f.demos[0], e).unwrap(), &x0, FD_STEP);
        out.push((format!("L_KD (e = {e})"), worst(&analytic, &numeric)));
    }

    let analytic = grad(&f.params, &[BatchItem::Replay(&f.entry)], &setup(0.0, 1.0, 2));
    let numeric = fd_gradient(|x| loss_fr(&p(x), &f.entry).unwrap(), &x0, FD_STEP);
    out.push(("L_FR".to_string(), worst(&analytic, &numeric)));

    let full = current(&f, 0, true, true);
    let items = [BatchItem::Current(&full), BatchItem::Raw(&f.demos[1]), BatchItem::Replay(&f.entry)];
    let s = setup(5.0, 5.0, 2);
    let analytic = grad(&f.params, &items, &s);
    let numeric = fd_gradient(
        |x| batch_loss_and_grad(&p(x), &items, &s).unwrap().0.total,
        &x0,
        FD_STEP,
    );
    out.push(("composite".to_string(), worst(&analytic, &numeric)));
    out
}

/// Synthetic stage report over a random plan with random episode outcomes.
pub fn random_stage_report(rng: &mut ChaCha8Rng) -> cnav_core::eval::StageReport {
    use cnav_core::eval::{spl, EpisodeResult, StageReport};
    let k = rng.random_range(1..=4);
    let mut next = 0u32;
    let stages: Vec<Vec<u32>> = (0..k)
        .map(|_| {
            let n = rng.random_range(1..=3);
            let cats = (next..next + n).collect();
            next += n;
            cats
        })
        .collect();
    let stage = rng.random_range(0..k);
    let mut episodes = Vec::new();
    for &c in stages[..=stage].iter().flatten() {
        for i in 0..rng.random_range(1..=12) {
            let success = rng.random_bool(0.6);
            let shortest = rng.random_range(0..=20) as f64;
            let taken = shortest + rng.random_range(0..=30) as f64;
            episodes.push(EpisodeResult {
                episode_id: i,
                scene_id: 0,
                category: c,
                success,
                shortest,
                taken,
                spl: spl(success, shortest, taken),
            });
        }
    }
    StageReport::from_episodes(stage, &stages, episodes)
}

/// Largest old/new recombination error and the number of SPL > SR
/// violations (episode or aggregate level) over `n` random reports.
pub fn metric_identity_check(n: usize, seed: u64) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut violations = 0;
    for _ in 0..n {
        let r = random_stage_report(&mut rng);
        let n_old = r.old_categories.len() as f64;
        let n_new = r.new_categories.len() as f64;
        for (mean, old, new) in [(r.mean_sr, r.old_sr, r.new_sr), (r.mean_spl, r.old_spl, r.new_spl)] {
            let recombined = (n_old * old.unwrap_or(0.0) + n_new * new) / (n_old + n_new);
            worst = worst.max((recombined - mean).abs());
        }
        let sr = |s: bool| if s { 1.0 } else { 0.0 };
        violations += r.episodes.iter().filter(|e| e.spl > sr(e.success) || e.spl < 0.0).count();
        violations += r.categories.iter().filter(|c| c.spl > c.sr).count();
        if r.mean_spl > r.mean_sr || r.new_spl > r.new_sr || r.old_spl > r.old_sr {
            violations += 1;
        }
    }
    (worst, violations)
}

/// Evaluates the shortest-path planner on the full default suite of each
/// seed; returns the lowest SR and SPL seen on any category.
pub fn expert_floor(seeds: &[u64]) -> (f64, f64) {
    use cnav_core::eval::{evaluate_stage, ExpertFactory};
    let obs = ModelConfig::default().obs;
    let bench = BenchmarkConfig::default();
    let (mut sr, mut spl): (f64, f64) = (1.0, 1.0);
    for &seed in seeds {
        let ds = generate_dataset(&bench, &obs, seed).unwrap();
        let suite = ds.eval_suite(&obs);
        let factory = ExpertFactory(obs.clone());
        for k in 0..bench.stages.len() {
            let r = evaluate_stage(&factory, &suite, k).unwrap();
            for c in &r.categories {
                sr = sr.min(c.sr);
                spl = spl.min(c.spl);
            }
        }
    }
    (sr, spl)
}

/// Small but complete run configuration writing to `out`.
pub fn tiny_run_config(out: &std::path::Path, seed: u64) -> cnav_core::pipeline::RunConfig {
    let mut cfg = cnav_core::pipeline::RunConfig {
        seed,
        benchmark: tiny_benchmark(),
        output_dir: out.to_path_buf(),
        ..Default::default()
    };
    cfg.train.epochs = 2;
    cfg.train.replay_per_category = 2;
    cfg
}

/// SHA-256 of every file under `root` except the manifest, keyed by
/// relative path.
pub fn tree_digest(root: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    use sha2::{Digest, Sha256};
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut std::collections::BTreeMap<String, String>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, root, out);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let digest = Sha256::digest(std::fs::read(&p).unwrap());
                out.insert(rel, digest.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Runs gen, train, eval and report for every configured run.
pub fn full_pipeline(cfg: &cnav_core::pipeline::RunConfig) {
    use cnav_core::pipeline::*;
    let layout = RunLayout::new(&cfg.output_dir);
    let _lock = RunLock::acquire(&cfg.output_dir).unwrap();
    write_manifest(&layout, cfg).unwrap();
    cmd_gen(&layout, cfg).unwrap();
    let k = cfg.stage_count();
    for run in &cfg.runs {
        cmd_train(&layout, cfg, run, k, None, |_, _| {}).unwrap();
        cmd_eval(&layout, cfg, &run.name, k).unwrap();
    }
    cmd_eval(&layout, cfg, EXPERT_RUN, k).unwrap();
    cmd_report(&layout, cfg, None).unwrap();
}

pub struct DeterminismOutcome {
    pub files: usize,
    /// Paths whose bytes differ between two identical runs.
    pub differing: Vec<String>,
    /// Paths whose bytes differ after training stopped at stage 2 and resumed.
    pub resume_differing: Vec<String>,
}

/// Two identical pipelines, plus a third whose runs stop after stage 2 and
/// resume from the saved checkpoint and buffer.
pub fn determinism_check(tmp: &std::path::Path, seed: u64) -> DeterminismOutcome {
    use cnav_core::pipeline::*;
    let a = tiny_run_config(&tmp.join("a"), seed);
    let b = tiny_run_config(&tmp.join("b"), seed);
    full_pipeline(&a);
    full_pipeline(&b);
    let (da, db) = (tree_digest(&a.output_dir), tree_digest(&b.output_dir));
    let differing: Vec<String> = da
        .keys()
        .chain(db.keys())
        .filter(|k| da.get(*k) != db.get(*k))
        .cloned()
        .collect();

    let c = tiny_run_config(&tmp.join("c"), seed);
    let layout = RunLayout::new(&c.output_dir);
    write_manifest(&layout, &c).unwrap();
    cmd_gen(&layout, &c).unwrap();
    let k = c.stage_count();
    for run in &c.runs {
        cmd_train(&layout, &c, run, 2, None, |_, _| {}).unwrap();
        cmd_train(&layout, &c, run, k, Some(1), |_, _| {}).unwrap();
    }
    let dc = tree_digest(&c.output_dir);
    let resume_differing = dc
        .iter()
        .filter(|(k, v)| da.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    DeterminismOutcome {
        files: da.len(),
        differing,
        resume_differing,
    }
}
