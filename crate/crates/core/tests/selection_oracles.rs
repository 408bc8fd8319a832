use cnav_core::selection::{
    budget, cluster_sample, cosine_distance, k_distance_neighborhood, lof_scores, select_keyframes, uniform_sample,
    LofConfig,
};
use cnav_oracles::{exact_two_means, lof_bruteforce};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-12;

fn cfg(k: usize) -> LofConfig {
    LofConfig {
        k_neighbors: k,
        ..LofConfig::default()
    }
}

fn random_sequence(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let len = rng.random_range(2..=60);
    let dim = rng.random_range(1..=16);
    match rng.random_range(0..4) {
        // Coarse lattice values produce many tied distances.
        0 => (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-1..=1) as f64).collect())
            .collect(),
        1 => vec![(0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(); len],
        _ => (0..len)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect(),
    }
}

#[test]
fn lof_matches_bruteforce_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..300 {
        let seq = random_sequence(&mut rng);
        let k = rng.random_range(1..=10).min(seq.len() - 1);
        let ours = lof_scores(&seq, &cfg(k));
        let oracle = lof_bruteforce(&seq, k, EPS);
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-9, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn neighbourhood_matches_sorted_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let seq: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let i = rng.random_range(0..20);
        let k = rng.random_range(1..20);
        let mut row: Vec<(f64, usize)> = (0..20)
            .filter(|&j| j != i)
            .map(|j| (cosine_distance(&seq[i], &seq[j], EPS), j))
            .collect();
        row.sort_by(|a, b| a.0.total_cmp(&b.0));
        let d_k = row[k - 1].0;
        let mut expected: Vec<usize> = row.iter().filter(|(d, _)| *d <= d_k).map(|&(_, j)| j).collect();
        expected.sort_unstable();
        let (got_d, got) = k_distance_neighborhood(&seq, i, k, EPS);
        assert_eq!(got_d, d_k);
        assert_eq!(got, expected);
    }
}

#[test]
fn grid_interior_points_are_inliers() {
    // Torus embedding: cosine distance depends only on the angle differences,
    // so a grid in angle space is uniformly spaced.
    let n = 7;
    let seq: Vec<Vec<f64>> = (0..n)
        .flat_map(|a| {
            (0..n).map(move |b| {
                let (x, y) = (0.1 * a as f64, 0.1 * b as f64);
                vec![x.cos(), x.sin(), y.cos(), y.sin()]
            })
        })
        .collect();
    let scores = lof_scores(&seq, &cfg(4));
    let oracle = lof_bruteforce(&seq, 4, EPS);
    for a in 2..n - 2 {
        for b in 2..n - 2 {
            let i = a * n + b;
            assert!((0.9..=1.1).contains(&scores[i]), "interior {i}: {}", scores[i]);
            assert!((scores[i] - oracle[i]).abs() < 1e-9);
        }
    }
}

#[test]
fn doorway_transition_is_selected() {
    // Frames 0..6 in the first room, frame 6 in the doorway, 7..12 beyond it.
    let mut seq: Vec<Vec<f64>> = Vec::new();
    for i in 0..6 {
        seq.push(vec![1.0, 0.02 * i as f64, 0.0, 0.1]);
    }
    seq.push(vec![0.6, 0.1, 0.6, 0.8]);
    for i in 0..5 {
        seq.push(vec![0.0, 0.02 * i as f64, 1.0, 0.1]);
    }
    assert_eq!(seq.len(), 12);
    let c = cfg(3);
    let oracle = lof_bruteforce(&seq, 3, EPS);
    assert!(oracle[6] > 1.0);
    let ks = select_keyframes(&seq, &c);
    assert!(ks.indices.contains(&6), "{:?}", ks.indices);
    for (&i, &s) in ks.indices.iter().zip(&ks.scores) {
        assert!((s - oracle[i]).abs() < 1e-9);
    }
}

#[test]
fn uniform_spacing_is_even_for_all_lengths() {
    let ratios = [0.05, 0.1, 0.25, 0.3, 1.0 / 3.0, 0.5, 0.7, 0.9, 1.0];
    for len in 1..=200usize {
        for &r in &ratios {
            let picks = uniform_sample(len, r);
            assert_eq!(picks.len(), budget(r, len), "L={len} r={r}");
            assert_eq!(*picks.last().unwrap(), len - 1);
            if picks.len() >= 2 {
                assert_eq!(picks[0], 0);
                let gaps: Vec<usize> = picks.windows(2).map(|w| w[1] - w[0]).collect();
                let (lo, hi) = (gaps.iter().min().unwrap(), gaps.iter().max().unwrap());
                assert!(*lo >= 1 && hi - lo <= 1, "L={len} r={r} gaps {gaps:?}");
            }
        }
    }
}

#[test]
fn cluster_picks_one_frame_per_blob() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let mut seq = Vec::new();
        for i in 0..12 {
            let centre = if i % 3 == 0 { [5.0, 0.0, 1.0] } else { [0.0, 5.0, 1.0] };
            seq.push(centre.iter().map(|c| c + rng.random_range(-0.3..0.3)).collect::<Vec<f64>>());
        }
        let labels = exact_two_means(&seq);
        let picks = cluster_sample(&seq, 2.0 / 12.0, 9, trial, EPS);
        assert_eq!(picks.len(), 2);
        assert_ne!(labels[picks[0]], labels[picks[1]], "trial {trial}: {picks:?}");
    }
}

fn sequence_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..25, 1usize..6).prop_flat_map(|(len, dim)| {
        prop::collection::vec(prop::collection::vec(-4.0f64..4.0, dim), len)
    })
}

proptest! {
    #[test]
    fn power_of_two_scaling_changes_nothing(seq in sequence_strategy(), exp in -6i32..6, k in 1usize..8) {
        let s = 2f64.powi(exp);
        let scaled: Vec<Vec<f64>> = seq.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
        let c = cfg(k);
        prop_assert_eq!(lof_scores(&seq, &c), lof_scores(&scaled, &c));
        prop_assert_eq!(select_keyframes(&seq, &c), select_keyframes(&scaled, &c));
    }

    #[test]
    fn arbitrary_scaling_preserves_scores(seq in sequence_strategy(), s in 0.01f64..100.0) {
        let scaled: Vec<Vec<f64>> = seq.iter().map(|v| v.iter().map(|x| x * s).collect()).collect();
        for i in 0..seq.len() {
            for j in 0..seq.len() {
                let a = cosine_distance(&seq[i], &seq[j], EPS);
                let b = cosine_distance(&scaled[i], &scaled[j], EPS);
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_permutes_scores(seq in sequence_strategy(), seed in 0u64..1000, k in 1usize..8) {
        let mut perm: Vec<usize> = (0..seq.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&p| seq[p].clone()).collect();
        let c = cfg(k);
        let base = lof_scores(&seq, &c);
        let moved = lof_scores(&permuted, &c);
        for (i, &p) in perm.iter().enumerate() {
            let tol = 1e-9 * base[p].abs().max(1.0);
            prop_assert!((moved[i] - base[p]).abs() <= tol);
        }
    }

    #[test]
    fn larger_budgets_keep_earlier_selections(
        seq in sequence_strategy(),
        keep in 1usize..5,
        extra in 1usize..5,
        ratio in 0.05f64..1.0,
        bump in 0.0f64..0.5,
    ) {
        let small = LofConfig { min_keep: keep, max_keep_ratio: ratio, ..cfg(4) };
        let more_keep = LofConfig { min_keep: keep + extra, ..small.clone() };
        let more_ratio = LofConfig { max_keep_ratio: (ratio + bump).min(1.0), ..small.clone() };
        let base = select_keyframes(&seq, &small).indices;
        for wider in [more_keep, more_ratio] {
            let got = select_keyframes(&seq, &wider).indices;
            prop_assert!(base.iter().all(|i| got.contains(i)), "{:?} not within {:?}", base, got);
        }
    }
}
