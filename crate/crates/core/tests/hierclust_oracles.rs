mod support;

use h3m::hierclust::most_likely_centers;
use h3m::{
    build_hierarchy, clustering_expected_ll, hmm_pair_estep, rand_index, synth_generate, vhem_reduce, H3m, Hmm,
    Scenario, SynthSpec, VhemConfig,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use support::*;

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Rand index from the contingency table instead of pair enumeration.
fn rand_from_table(a: &[usize], b: &[usize]) -> f64 {
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let cells: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(a.len());
    (total + 2.0 * cells - rows - cols) / total
}

proptest! {
    #[test]
    fn rand_index_matches_contingency_formula(
        pair in (2usize..30).prop_flat_map(|n| (prop::collection::vec(0usize..5, n), prop::collection::vec(0usize..5, n)))
    ) {
        let (a, b) = pair;
        let got = rand_index(&a, &b).unwrap();
        prop_assert!((got - rand_from_table(&a, &b)).abs() < 1e-12);
        prop_assert_eq!(got, rand_index(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn rand_index_ignores_label_names(
        a in prop::collection::vec(0usize..4, 2..25),
        seed in any::<u64>(),
    ) {
        let mut names: Vec<usize> = (0..4).map(|x| x * 7 + 3).collect();
        names.shuffle(&mut rng(seed));
        let renamed: Vec<usize> = a.iter().map(|&x| names[x]).collect();
        prop_assert_eq!(rand_index(&a, &renamed).unwrap(), 1.0);
        let b: Vec<usize> = a.iter().rev().copied().collect();
        let rb: Vec<usize> = b.iter().map(|&x| names[x]).collect();
        prop_assert_eq!(rand_index(&a, &b).unwrap(), rand_index(&renamed, &rb).unwrap());
    }
}

#[test]
fn rand_index_documented_values() {
    assert!((rand_index(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(rand_index(&[0, 1, 2], &[5, 5, 5]).unwrap(), 0.0);
}

fn planted_pairs() -> Vec<Hmm> {
    vec![
        scalar_hmm(&[0.0, 1.0], 0.2, 0.9),
        scalar_hmm(&[10.0, 11.0], 0.2, 0.9),
        scalar_hmm(&[0.3, 1.2], 0.25, 0.85),
        scalar_hmm(&[10.2, 11.3], 0.25, 0.85),
    ]
}

#[test]
fn single_level_is_identity() {
    let h = build_hierarchy(&planted_pairs(), &[4], &VhemConfig::new(4)).unwrap();
    assert_eq!(h.levels.len(), 1);
    assert_eq!(h.input_assignments(0), vec![0, 1, 2, 3]);
}

#[test]
fn two_levels_merge_planted_pairs() {
    let h = build_hierarchy(&planted_pairs(), &[4, 2], &VhemConfig::new(2)).unwrap();
    assert_eq!(h.sizes(), vec![4, 2]);
    assert_eq!(rand_index(&h.input_assignments(1), &[0, 1, 0, 1]).unwrap(), 1.0);
}

#[test]
fn hierarchy_is_nested_and_surjective() {
    let mut r = rng(12);
    let inputs: Vec<Hmm> = (0..12)
        .map(|i| {
            let c = (i % 3) as f64 * 6.0;
            scalar_hmm(&[c + 0.3 * normal(&mut r), c + 1.0 + 0.3 * normal(&mut r)], 0.3, 0.8)
        })
        .collect();
    let h = build_hierarchy(&inputs, &[6, 3, 2], &VhemConfig::new(2)).unwrap();
    assert_eq!(h.sizes(), vec![12, 6, 3, 2]);
    for l in 1..h.levels.len() {
        let mut used = h.levels[l].assignments.clone();
        used.sort();
        used.dedup();
        assert_eq!(used.len(), h.sizes()[l]);
        let (lo, hi) = (h.input_assignments(l - 1), h.input_assignments(l));
        for i in 0..inputs.len() {
            for j in 0..inputs.len() {
                if lo[i] == lo[j] {
                    assert_eq!(hi[i], hi[j]);
                }
            }
        }
    }
}

#[test]
fn level_sizes_are_validated() {
    let inputs = planted_pairs();
    assert!(build_hierarchy(&inputs, &[5, 2], &VhemConfig::new(2)).is_err());
    assert!(build_hierarchy(&inputs, &[4, 4], &VhemConfig::new(2)).is_err());
    assert!(build_hierarchy(&inputs, &[], &VhemConfig::new(2)).is_err());
}

#[test]
fn self_pair_score() {
    let h = scalar_hmm(&[0.0, 2.0], 0.5, 0.7);
    let centers = H3m::uniform(vec![h.clone()]).unwrap();
    let v = clustering_expected_ll(std::slice::from_ref(&h), &centers, &[0], 10).unwrap();
    assert_eq!(v, hmm_pair_estep(&h, &h, 10).unwrap().l_hmm);
}

#[test]
fn farther_center_scores_lower() {
    let centers: Vec<Hmm> = [0.0, 5.0, 10.0].iter().map(|&c| scalar_hmm(&[c, c + 1.0], 0.3, 0.8)).collect();
    let inputs: Vec<Hmm> = [0.1, 5.1, 9.9].iter().map(|&c| scalar_hmm(&[c, c + 1.0], 0.3, 0.8)).collect();
    let h3m = H3m::uniform(centers).unwrap();
    let base = clustering_expected_ll(&inputs, &h3m, &[0, 1, 2], 10).unwrap();
    assert_eq!(most_likely_centers(&inputs, &h3m, 10).unwrap(), vec![0, 1, 2]);
    for (i, far) in [(0, 1), (0, 2), (1, 2), (2, 0)] {
        let mut a = vec![0, 1, 2];
        a[i] = far;
        assert!(clustering_expected_ll(&inputs, &h3m, &a, 10).unwrap() < base);
    }
}

#[test]
fn score_stays_below_monte_carlo() {
    let mut r = rng(13);
    let inputs: Vec<Hmm> = (0..3).map(|_| random_hmm(&mut r, 2, 1, 1, 1.0)).collect();
    let centers = H3m::uniform((0..2).map(|_| random_hmm(&mut r, 2, 1, 1, 1.0)).collect()).unwrap();
    let assign = [0, 1, 1];
    let bound = clustering_expected_ll(&inputs, &centers, &assign, 5).unwrap();
    let (mut mc, mut var) = (0.0, 0.0);
    for (h, &j) in inputs.iter().zip(&assign) {
        let (m, se) = mc_expected_ll(&mut r, h, &centers.components()[j], 5, 10_000);
        mc += m;
        var += se * se;
    }
    assert!(bound <= mc + 3.0 * var.sqrt(), "{bound} vs {mc}");
}

#[test]
fn reduction_assignments_beat_permuted_ones() {
    let mut r = rng(14);
    let inputs: Vec<Hmm> = (0..9)
        .map(|i| {
            let c = (i % 3) as f64 * 8.0;
            scalar_hmm(&[c + 0.2 * normal(&mut r), c + 1.5 + 0.2 * normal(&mut r)], 0.3, 0.8)
        })
        .collect();
    let base = H3m::uniform(inputs.clone()).unwrap();
    let out = vhem_reduce(&base, &VhemConfig::new(3)).unwrap();
    let assign = out.result.assignments.clone();
    let score = clustering_expected_ll(&inputs, &out.result.centers, &assign, 10).unwrap();
    for _ in 0..20 {
        let mut p = assign.clone();
        p.shuffle(&mut r);
        assert!(clustering_expected_ll(&inputs, &out.result.centers, &p, 10).unwrap() <= score);
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SynthSpec::new(Scenario::VariancesDiffer, 2, 0.5);
    let a = synth_generate(&spec, 21).unwrap();
    let b = synth_generate(&spec, 21).unwrap();
    assert_eq!(a.hmms, b.hmms);
    assert_eq!(a.labels, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    assert_eq!(a.labels, b.labels);
    let c = synth_generate(&spec, 22).unwrap();
    assert_ne!(a.hmms, c.hmms);
}

// Fails on most seeds: each copy is fitted to a single length-100 sequence and the four
// sources overlap heavily, so even classifying copies by their true source's likelihood
// does not reach a perfect Rand index. Run with --ignored.
#[test]
#[ignore = "finite-sample fits make exact recovery unattainable; see README"]
fn near_noiseless_copies_are_recovered() {
    let spec = SynthSpec::new(Scenario::MeansDiffer, 2, 1e-6);
    let data = synth_generate(&spec, 3).unwrap();
    let base = H3m::uniform(data.hmms.clone()).unwrap();
    let out = vhem_reduce(&base, &VhemConfig::new(4)).unwrap();
    assert_eq!(rand_index(&out.result.assignments, &data.labels).unwrap(), 1.0);
}
