use convleak::accel::{run_all_kernels, CyclePowers};
use convleak::attack_bg::{
    build_histogram, detect_background, recover_silhouette, select_threshold, threshold_sweep,
    BorderPolicy, Histogram, Threshold,
};
use convleak::metrics::{
    balanced_marker_accuracy, classification_map, l1_distance, pixel_marker_accuracy,
    pixel_value_distance, recognition_accuracy, KnnReference,
};
use convleak::{AccelConfig, CycleSchedule, Error, Image, Kernel, Marker, ScheduledCycle, SilhouetteImage};
use proptest::prelude::*;

/// Powers on a half-unit grid, as the Hamming-distance model produces them.
fn half_units(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..400).prop_map(|v| v as f64 * 0.5), n)
}

fn line_schedule(n: usize) -> CycleSchedule {
    CycleSchedule {
        width: n,
        height: 1,
        kernel_size: 1,
        total_cycles: n,
        cycles: (0..n)
            .map(|i| ScheduledCycle {
                cycle: i,
                x: i,
                y: 0,
                related: vec![Some(i as u32)],
            })
            .collect(),
    }
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(prop_oneof![Just(0u8), any::<u8>()], w * h)
        .prop_map(move |px| Image::new(w, h, px).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn histogram_matches_direct_count(
        v in half_units(1..300),
        b in prop_oneof![Just(0.25), Just(0.5), Just(1.0), Just(2.0), Just(3.0)],
    ) {
        let p = CyclePowers { values: v.clone(), kernel: 0 };
        let h = build_histogram(&p, &line_schedule(v.len()), b).unwrap();
        let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(h.total(), v.len());
        prop_assert!(h.edge(h.counts.len() - 1) <= max && max < h.edge(h.counts.len()));
        for (i, &c) in h.counts.iter().enumerate() {
            let lo = min + i as f64 * b;
            let hi = min + (i + 1) as f64 * b;
            prop_assert_eq!(c, v.iter().filter(|&&x| lo <= x && x < hi).count());
        }
    }

    #[test]
    fn threshold_is_largest_drop(counts in prop::collection::vec(0usize..50, 1..40)) {
        let h = Histogram { bin_size: 1.0, counts: counts.clone(), min: 0.0, max: counts.len() as f64 };
        let mut best: Option<(usize, usize)> = None;
        for i in 1..counts.len() {
            let d = counts[i - 1].saturating_sub(counts[i]);
            if d > 0 && best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        match (select_threshold(&h), best) {
            (Ok(t), Some((i, _))) => prop_assert_eq!(t.power, i as f64),
            (Err(Error::NoDrop), None) => {}
            (got, want) => prop_assert!(false, "{got:?} vs {want:?}"),
        }
    }

    #[test]
    fn silhouette_matches_pixelwise_rule(
        img in image(9, 8),
        t in 8.0f64..60.0,
        seed in any::<u64>(),
        fg_border in any::<bool>(),
    ) {
        let k = Kernel::random_set(3, 1, seed).unwrap().remove(0);
        let run = run_all_kernels::<f64>(&img, &[k], &AccelConfig::default().with_line_size(9))
            .unwrap()
            .remove(0);
        let border = if fg_border { BorderPolicy::Foreground } else { BorderPolicy::Background };
        let sil = recover_silhouette(&run.powers, &run.schedule, Threshold { power: t }, border).unwrap();
        for p in 0..img.len() as u32 {
            let covering: Vec<f64> = run
                .schedule
                .cycles
                .iter()
                .filter(|c| c.related.contains(&Some(p)))
                .map(|c| run.powers.values[c.cycle])
                .collect();
            let bg = if covering.is_empty() {
                !fg_border
            } else {
                covering.iter().any(|&v| v <= t)
            };
            prop_assert_eq!(sil.markers[p as usize] == Marker::Background, bg, "pixel {}", p);
        }
        // a higher threshold never turns background back into foreground
        let higher = recover_silhouette(&run.powers, &run.schedule, Threshold { power: t + 5.0 }, border).unwrap();
        for (a, b) in sil.markers.iter().zip(&higher.markers) {
            prop_assert!(!(*a == Marker::Background && *b == Marker::Foreground));
        }
    }

    #[test]
    fn marker_accuracy_matches_direct_count(img in image(6, 5), flips in prop::collection::vec(any::<bool>(), 30)) {
        let mut sil = SilhouetteImage::from_golden(&img);
        prop_assert_eq!(pixel_marker_accuracy(&sil, &img).unwrap(), 1.0);
        for (m, f) in sil.markers.iter_mut().zip(&flips) {
            if *f {
                *m = if *m == Marker::Background { Marker::Foreground } else { Marker::Background };
            }
        }
        let wrong = flips.iter().filter(|&&f| f).count();
        prop_assert_eq!(pixel_marker_accuracy(&sil, &img).unwrap(), (30 - wrong) as f64 / 30.0);
        let b = balanced_marker_accuracy(&sil, &img).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn distance_axioms(a in image(5, 5), b in image(5, 5), c in image(5, 5)) {
        let d = |x: &Image, y: &Image| pixel_value_distance(x, y).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
        let direct: u64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (*x as i64 - *y as i64).unsigned_abs()).sum();
        prop_assert_eq!(l1_distance(&a.pixels, &b.pixels), direct);
        prop_assert_eq!(d(&a, &b), direct as f64 / 25.0);
    }

    #[test]
    fn knn_matches_sorting_oracle(
        refs in prop::collection::vec(image(3, 3), 3..25),
        labels_seed in prop::collection::vec(0u8..10, 25),
        q in image(3, 3),
        k in prop_oneof![Just(1usize), Just(3), Just(5)],
    ) {
        prop_assume!(refs.len() >= k);
        let labels = &labels_seed[..refs.len()];
        let knn = KnnReference::new(&refs, labels).unwrap();
        let mut order: Vec<(u64, usize)> = refs
            .iter()
            .enumerate()
            .map(|(i, r)| (l1_distance(&q.pixels, &r.pixels), i))
            .collect();
        order.sort();
        let mut votes = [0usize; 10];
        for &(_, i) in &order[..k] {
            votes[labels[i] as usize] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let want = votes.iter().position(|&v| v == top).unwrap() as u8;
        prop_assert_eq!(knn.classify(&q, k).unwrap(), want);
    }

    #[test]
    fn map_columns_are_distributions(pairs in prop::collection::vec((0u8..10, 0u8..10), 1..200)) {
        let (p, g): (Vec<u8>, Vec<u8>) = pairs.iter().cloned().unzip();
        let m = classification_map(&p, &g).unwrap();
        for j in 0..10 {
            let col: f64 = (0..10).map(|i| m.cells[i][j]).sum();
            if g.contains(&(j as u8)) {
                prop_assert!((col - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(m.missing_classes().contains(&(j as u8)));
            }
            for i in 0..10 {
                prop_assert!((0.0..=1.0).contains(&m.cells[i][j]));
            }
        }
        let hits = p.iter().zip(&g).filter(|(a, b)| a == b).count();
        prop_assert_eq!(recognition_accuracy(&p, &g), hits as f64 / p.len() as f64);
    }
}

#[test]
fn sweep_peaks_near_detected_threshold() {
    let mut golden = Image::filled(28, 28, 0);
    for y in 8..20 {
        for x in 10..16 {
            golden.set(x, y, 180 + (x + y) as u8);
        }
    }
    let k = Kernel::random_set(3, 1, 3).unwrap().remove(0);
    let run = run_all_kernels::<f64>(&golden, &[k], &AccelConfig::default()).unwrap().remove(0);
    let r = detect_background(&run.powers, &run.schedule, None, BorderPolicy::Background).unwrap();
    let acc = pixel_marker_accuracy(&r.silhouette, &golden).unwrap();
    let sweep = threshold_sweep(&run.powers, &run.schedule, &golden, (0.0, 80.0), 1.0).unwrap();
    let best = sweep.iter().map(|s| s.pixel_accuracy).fold(0.0, f64::max);
    assert!(acc > 0.85, "{acc}");
    assert!(best >= acc);
    // the dilation ring is the only error: true foreground is always kept
    for (m, &v) in r.silhouette.markers.iter().zip(&golden.pixels) {
        if v > 0 {
            assert_eq!(*m, Marker::Foreground);
        }
    }
}
