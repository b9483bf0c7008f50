use std::collections::HashSet;

use convleak::template::{
    average_baseline, generate_candidates, reconstruct, selection_objective, CandidateIndex,
    CandidateSet, GroupingConfig, PowerTemplate, ReconstructConfig,
};
use proptest::prelude::*;

/// Template with 1x2 patches over a small alphabet, so distinct entries
/// often share a patch.
fn template() -> impl Strategy<Value = PowerTemplate<f64>> {
    prop::collection::vec(
        (
            prop::collection::vec(0u8..4, 2),
            prop::collection::vec(0.0f64..20.0, 4),
        ),
        1..120,
    )
    .prop_map(|entries| {
        let mut t = PowerTemplate::new(1, 4);
        for (p, f) in entries {
            t.push(&p, &f).unwrap();
        }
        t.finalize();
        t
    })
}

fn grouping() -> impl Strategy<Value = GroupingConfig> {
    (
        prop_oneof![
            Just(vec![vec![0, 1], vec![2, 3]]),
            Just(vec![vec![0], vec![1], vec![2], vec![3]]),
            Just(vec![vec![3, 1, 0]]),
        ],
        0.05f64..3.0,
        any::<bool>(),
    )
        .prop_map(|(groups, delta, normalize)| GroupingConfig {
            groups,
            delta,
            normalize,
        })
}

/// Candidate sets over a `w x h` image; each set covers a random region.
fn sets(w: usize, h: usize) -> impl Strategy<Value = Vec<CandidateSet>> {
    prop::collection::vec(
        (
            prop::collection::vec(prop::option::weighted(0.9, 0..(w * h) as u32), 4),
            prop::collection::vec(prop::collection::vec(any::<u8>(), 4), 0..6),
        ),
        1..25,
    )
    .prop_map(|raw| {
        raw.into_iter()
            .enumerate()
            .map(|(i, (region, candidates))| CandidateSet {
                cycle: i,
                region,
                group_sizes: vec![candidates.len()],
                candidates,
            })
            .collect()
    })
    .prop_filter("at least one candidate", |s: &Vec<CandidateSet>| {
        s.iter().any(|c| !c.candidates.is_empty())
    })
}

/// Plain floating-point population variance, summed over pixels.
fn sigma_oracle(sets: &[CandidateSet], choices: &[Option<usize>], npix: usize) -> f64 {
    let mut vals: Vec<Vec<f64>> = vec![Vec::new(); npix];
    for (s, c) in sets.iter().zip(choices) {
        if let Some(c) = c {
            for (r, &v) in s.region.iter().zip(&s.candidates[*c]) {
                if let Some(p) = r {
                    vals[*p as usize].push(v as f64);
                }
            }
        }
    }
    vals.iter()
        .filter(|v| !v.is_empty())
        .map(|v| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        })
        .sum()
}

fn rounded_mean(v: &[u64]) -> u8 {
    let (s, n) = (v.iter().sum::<u64>(), v.len() as u64);
    // round half up
    ((2 * s + n) / (2 * n)) as u8
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn indexed_search_equals_brute_force(
        t in template(),
        g in grouping(),
        rho in prop::collection::vec(0.0f64..20.0, 4),
    ) {
        let index = CandidateIndex::new(&t, &g).unwrap();
        let (fast, sizes) = index.query(&rho).unwrap();
        let slow = generate_candidates(&rho, &t, &g).unwrap();
        prop_assert_eq!(&fast, &slow);
        prop_assert_eq!(sizes.len(), g.groups.len());
        prop_assert!(fast.len() <= *sizes.iter().min().unwrap());
        let distinct: HashSet<&[u8]> = fast.iter().map(|p| p.as_slice()).collect();
        prop_assert_eq!(distinct.len(), fast.len());
    }

    #[test]
    fn candidate_sets_grow_with_delta(
        t in template(),
        g in grouping(),
        rho in prop::collection::vec(0.0f64..20.0, 4),
        extra in 0.0f64..2.0,
    ) {
        let small = generate_candidates(&rho, &t, &g).unwrap();
        let wider = GroupingConfig { delta: g.delta + extra, ..g.clone() };
        let large: HashSet<Vec<u8>> = generate_candidates(&rho, &t, &wider).unwrap().into_iter().collect();
        prop_assert!(small.iter().all(|p| large.contains(p)));
    }

    #[test]
    fn stored_entries_find_themselves(t in template(), g in grouping()) {
        let index = CandidateIndex::new(&t, &g).unwrap();
        for i in 0..t.len() {
            let (c, _) = index.query(t.features(i)).unwrap();
            prop_assert!(c.iter().any(|p| p.as_slice() == t.patch(i)));
        }
    }

    #[test]
    fn reported_sigma_is_the_objective(s in sets(5, 4), seed in any::<u64>(), passes in 0usize..4) {
        let cfg = ReconstructConfig { max_restarts: 8, refine_passes: passes, seed };
        let r = reconstruct(&s, (5, 4), &cfg).unwrap();
        prop_assert_eq!(r.selector.sigma, selection_objective(&s, &r.selector.choices, 5, 4));
        let oracle = sigma_oracle(&s, &r.selector.choices, 20);
        prop_assert!((r.selector.sigma - oracle).abs() <= 1e-9 * (1.0 + oracle));
        for (set, c) in s.iter().zip(&r.selector.choices) {
            prop_assert_eq!(c.is_some(), !set.candidates.is_empty());
            if let Some(c) = c {
                prop_assert!(*c < set.candidates.len());
            }
        }
        prop_assert_eq!(r.empty_sets, s.iter().filter(|c| c.candidates.is_empty()).count());
    }

    #[test]
    fn refinement_never_increases_sigma(s in sets(5, 4), seed in any::<u64>()) {
        let greedy = reconstruct(&s, (5, 4), &ReconstructConfig { max_restarts: 8, refine_passes: 0, seed }).unwrap();
        let refined = reconstruct(&s, (5, 4), &ReconstructConfig { max_restarts: 8, refine_passes: 8, seed }).unwrap();
        prop_assert!(refined.selector.sigma <= greedy.selector.sigma);
    }

    #[test]
    fn pixels_are_rounded_means_of_chosen_values(s in sets(5, 4), seed in any::<u64>()) {
        let r = reconstruct(&s, (5, 4), &ReconstructConfig { max_restarts: 4, refine_passes: 2, seed }).unwrap();
        let mut vals: Vec<Vec<u64>> = vec![Vec::new(); 20];
        for (set, c) in s.iter().zip(&r.selector.choices) {
            if let Some(c) = c {
                for (reg, &v) in set.region.iter().zip(&set.candidates[*c]) {
                    if let Some(p) = reg {
                        vals[*p as usize].push(v as u64);
                    }
                }
            }
        }
        for (p, v) in vals.iter().enumerate() {
            if !v.is_empty() {
                prop_assert_eq!(r.image.pixels[p], rounded_mean(v));
            }
        }
        prop_assert_eq!(r.interpolated <= vals.iter().filter(|v| v.is_empty()).count(), true);
    }

    #[test]
    fn baseline_averages_every_candidate(s in sets(5, 4)) {
        let img = average_baseline(&s, (5, 4)).unwrap();
        let mut vals: Vec<Vec<u64>> = vec![Vec::new(); 20];
        for set in &s {
            for cand in &set.candidates {
                for (reg, &v) in set.region.iter().zip(cand) {
                    if let Some(p) = reg {
                        vals[*p as usize].push(v as u64);
                    }
                }
            }
        }
        for (p, v) in vals.iter().enumerate() {
            if !v.is_empty() {
                prop_assert_eq!(img.pixels[p], rounded_mean(v));
            }
        }
    }

    #[test]
    fn reconstruction_is_deterministic(s in sets(4, 4), seed in any::<u64>()) {
        let cfg = ReconstructConfig { max_restarts: 6, refine_passes: 3, seed };
        prop_assert_eq!(reconstruct(&s, (4, 4), &cfg).unwrap(), reconstruct(&s, (4, 4), &cfg).unwrap());
    }
}
