use approx::assert_relative_eq;
use convleak::accel::{run_all_kernels, CyclePowers};
use convleak::chain::{add_noise, apply_highpass, render_pdn, sigma_for_snr, ChainConfig, RawTrace};
use convleak::extract::{align, extract_cycle_power, lowpass, restore_dc, AlignConfig, ExtractConfig};
use convleak::pipeline::{correlation, measure_trace, recover, Setup};
use convleak::{seed, AccelConfig, Image, Kernel};
use proptest::prelude::*;
use rand::Rng;

fn trace(samples: Vec<f64>) -> RawTrace<f64> {
    RawTrace {
        cycles: samples.len() / 64,
        samples,
        sample_interval: 0.4e-9,
        samples_per_cycle: 64,
    }
}

fn random_image(rng: &mut impl Rng) -> Image {
    Image::new(28, 28, (0..784).map(|_| rng.random()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn highpass_and_restore_are_inverse(
        x in prop::collection::vec(-100.0f64..100.0, 1..2000),
        tau_cycles in 1.0f64..500.0,
    ) {
        let t = trace(x.clone());
        let tau = tau_cycles * 64.0 * t.sample_interval;
        let back = restore_dc(&apply_highpass(&t, tau), tau);
        let fwd = apply_highpass(&restore_dc(&t, tau), tau);
        for ((a, b), c) in back.samples.iter().zip(&x).zip(&fwd.samples) {
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            prop_assert!((c - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn rendering_conserves_energy(p in prop::collection::vec(0.0f64..200.0, 1..80)) {
        let cfg = ChainConfig::default();
        let t = render_pdn(&CyclePowers { values: p.clone(), kernel: 0 }, &cfg).unwrap();
        prop_assert_eq!(t.len(), t.cycles * t.samples_per_cycle);
        prop_assert_eq!(t.cycles, p.len() + cfg.trailing_cycles);
        let total: f64 = p.iter().sum();
        let rendered: f64 = t.samples.iter().sum();
        prop_assert!((rendered - total).abs() <= 1e-9 * (1.0 + total));
    }

    #[test]
    fn lowpass_passes_constants(level in -50.0f64..50.0, n in 400usize..1200) {
        let t = trace(vec![level; n]);
        let y = lowpass(&t, 0.3).unwrap();
        prop_assert_eq!(y.len(), n);
        for v in &y.samples[130..n - 130] {
            prop_assert!((v - level).abs() < 1e-6 * (1.0 + level.abs()));
        }
    }

    #[test]
    fn noise_level_matches_requested_snr(db in 0.0f64..40.0, s in any::<u64>()) {
        let mut rng = seed::rng(s);
        let clean = trace((0..64 * 50).map(|_| rng.random_range(0.0..10.0)).collect());
        let sigma = sigma_for_snr(&clean, db);
        let achieved = 20.0 * (clean.rms() / sigma).log10();
        prop_assert!((achieved - db).abs() < 1e-9);
        let noisy = add_noise(&clean, sigma, s).unwrap();
        let resid: Vec<f64> = noisy.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect();
        let rms = (resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64).sqrt();
        prop_assert!((rms / sigma - 1.0).abs() < 0.1);
    }
}

#[test]
fn noiseless_extraction_conserves_power() {
    let mut setup = Setup::noiseless();
    setup.extract.highpass_tau = None;
    let kernels = Kernel::random_set(3, 1, 2).unwrap();
    let mut rng = seed::rng(11);
    for i in 0..8 {
        let img = random_image(&mut rng);
        let run = run_all_kernels::<f64>(&img, &kernels, &setup.accel).unwrap().remove(0);
        let t = render_pdn(&run.powers, &setup.chain).unwrap();
        let (got, _) = recover(&t, &setup, run.powers.len()).unwrap();
        let (a, b): (f64, f64) = (got.iter().sum(), run.powers.total());
        assert!(((a - b) / b).abs() < 0.005, "image {i}: {a} vs {b}");
        assert!(correlation(&got, &run.powers.values) > 0.999);
    }
}

#[test]
fn alignment_gaps_stay_near_nominal() {
    let setup = Setup::default();
    let kernels = Kernel::random_set(3, 1, 8).unwrap();
    let img = random_image(&mut seed::rng(3));
    let run = run_all_kernels::<f64>(&img, &kernels, &setup.accel).unwrap().remove(0);
    let (t, _) = measure_trace(&run.powers, &Setup { snr_db: Some(25.0), ..setup.clone() }, 1).unwrap();
    let x = restore_dc(&lowpass(&t, 0.3).unwrap(), setup.chain.highpass_tau);
    let pts = align(&x, None, 64, &AlignConfig::default()).unwrap();
    let within = pts
        .indices
        .windows(2)
        .filter(|w| {
            let g = (w[1] - w[0]) as f64;
            (51.2..=76.8).contains(&g)
        })
        .count();
    // random pixels leave no idle cycles, so essentially every pulse is found
    assert!(within as f64 >= 0.95 * (pts.indices.len() - 1) as f64);
    let e = extract_cycle_power(&x, &pts).unwrap();
    for f in e.fits.iter().flatten() {
        assert!(f.v_peak >= 0.0);
        assert!((0.05 * 64.0..=5.0 * 64.0).contains(&f.tau));
    }
}

#[test]
fn extraction_degrades_gracefully_with_noise() {
    let setup = Setup::default();
    let kernels = Kernel::random_set(3, 1, 5).unwrap();
    let img = random_image(&mut seed::rng(8));
    let run = run_all_kernels::<f64>(&img, &kernels, &AccelConfig::default()).unwrap().remove(0);
    let mut last = f64::INFINITY;
    for db in [40.0, 30.0, 20.0, 10.0] {
        let s = Setup { snr_db: Some(db), ..setup.clone() };
        let (t, _) = measure_trace(&run.powers, &s, 17).unwrap();
        let (got, _) = recover(&t, &s, run.powers.len()).unwrap();
        let c = correlation(&got, &run.powers.values);
        assert!(c <= last + 1e-3, "{db} dB: {c} after {last}");
        last = c;
    }
    assert!(last > 0.5);
}

#[test]
fn f32_and_f64_paths_agree() {
    let kernels = Kernel::random_set(3, 1, 4).unwrap();
    let img = random_image(&mut seed::rng(2));
    let cfg = AccelConfig::default();
    let p64 = run_all_kernels::<f64>(&img, &kernels, &cfg).unwrap().remove(0).powers;
    let p32 = run_all_kernels::<f32>(&img, &kernels, &cfg).unwrap().remove(0).powers;
    let setup = Setup::noiseless();
    let t64 = render_pdn(&p64, &setup.chain).unwrap();
    let t32 = render_pdn(&p32, &setup.chain).unwrap();
    let cfg = ExtractConfig {
        lowpass_cutoff: None,
        highpass_tau: None,
        ..setup.extract.clone()
    };
    let e64 = convleak::extract::recover_powers(&t64, &cfg).unwrap();
    let e32 = convleak::extract::recover_powers(&t32, &cfg).unwrap();
    let v32: Vec<f64> = e32.powers.values.iter().map(|&v| v as f64).collect();
    assert!(correlation(&e64.powers.values, &v32) > 0.9999);
    let (a, b): (f64, f64) = (e64.powers.values.iter().sum(), v32.iter().sum());
    assert_relative_eq!(a, b, max_relative = 5e-3);
}
