//! End-to-end observation of one image: simulate every kernel, push each
//! power vector through the measurement chain and recover per-cycle power
//! the way an attacker would.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accel::{
    run_all_kernels, shared_schedule, AccelConfig, CycleSchedule, CyclePowers, Kernel, Masking,
    Scheduling, SimulatedRun,
};
use crate::chain::{add_noise, apply_highpass, render_pdn, sigma_for_snr, ChainConfig, RawTrace};
use crate::extract::{recover_powers, ExtractConfig};
use crate::imgio::Image;
use crate::{seed, Error, Result, Scalar};

/// Where the attacker's per-cycle powers come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PowerSource {
    /// Measured trace, then extraction.
    #[default]
    Measured,
    /// Simulator ground truth, bypassing chain and extraction.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setup {
    pub accel: AccelConfig,
    pub chain: ChainConfig,
    pub extract: ExtractConfig,
    /// Noise level relative to each clean trace; overrides
    /// `chain.noise_sigma` when set.
    pub snr_db: Option<f64>,
    pub source: PowerSource,
}

impl Default for Setup {
    fn default() -> Self {
        let chain = ChainConfig::default();
        let extract = ExtractConfig {
            highpass_tau: Some(chain.highpass_tau),
            ..ExtractConfig::default()
        };
        Self {
            accel: AccelConfig::default(),
            chain,
            extract,
            snr_db: None,
            source: PowerSource::Measured,
        }
    }
}

impl Setup {
    /// Noiseless chain; extraction skips the low-pass since there is no
    /// noise to remove.
    pub fn noiseless() -> Self {
        let mut s = Self::default();
        s.extract.lowpass_cutoff = None;
        s
    }

    pub fn with_kernel_size(mut self, k: usize) -> Self {
        self.accel = self.accel.with_kernel_size(k);
        self
    }
}

/// Measured trace of one kernel, plus the noise level applied.
pub fn measure_trace<F: Scalar>(
    p: &CyclePowers<F>,
    setup: &Setup,
    noise_seed: u64,
) -> Result<(RawTrace<F>, f64)> {
    let pdn = render_pdn(p, &setup.chain)?;
    let hp = apply_highpass(&pdn, setup.chain.highpass_tau);
    let sigma = match setup.snr_db {
        Some(db) => sigma_for_snr(&hp, db),
        None => setup.chain.noise_sigma,
    };
    Ok((add_noise(&hp, sigma, noise_seed)?, sigma))
}

#[derive(Debug, Clone)]
pub struct Observation<F> {
    pub schedule: CycleSchedule,
    /// Simulator powers, one vector per kernel.
    pub truth: Vec<CyclePowers<F>>,
    /// Attacker-side powers, one vector per kernel, indexed like `truth`.
    pub observed: Vec<CyclePowers<F>>,
    /// Cycles whose decay fit failed, summed over kernels.
    pub low_confidence: usize,
}

impl<F: Scalar> Observation<F> {
    /// Feature vector of every valid cycle: its observed power under each
    /// kernel.
    pub fn features(&self) -> Vec<Vec<F>> {
        self.schedule
            .cycles
            .iter()
            .map(|c| {
                self.observed
                    .iter()
                    .map(|p| p.values.get(c.cycle).copied().unwrap_or_else(F::zero))
                    .collect()
            })
            .collect()
    }
}

/// Accelerator configuration for one image: random masks and schedules get
/// seeds derived from `image_seed`.
pub fn seeded_accel(accel: &AccelConfig, image_seed: u64) -> AccelConfig {
    let mut accel = accel.clone();
    if let Masking::On { .. } = accel.masking {
        accel.masking = Masking::On {
            seed: seed::derive(image_seed, &[seed::stage::MASK]),
        };
    }
    if let Scheduling::Random { .. } = accel.scheduling {
        accel.scheduling = Scheduling::Random {
            seed: seed::derive(image_seed, &[seed::stage::SCHEDULE]),
        };
    }
    accel
}

/// Seed of the measurement noise on kernel `k`'s trace.
pub fn noise_seed(image_seed: u64, k: usize) -> u64 {
    seed::derive(image_seed, &[seed::stage::NOISE, k as u64])
}

/// Simulates every kernel on one image.
pub fn simulate_image<F: Scalar>(
    img: &Image,
    kernels: &[Kernel],
    setup: &Setup,
    image_seed: u64,
) -> Result<Vec<SimulatedRun<F>>> {
    run_all_kernels::<F>(img, kernels, &seeded_accel(&setup.accel, image_seed))
}

/// Attacker-side recovery of one kernel's powers from its measured trace,
/// resized to `cycles` entries. Returns the powers and the number of
/// low-confidence cycles.
pub fn recover<F: Scalar>(
    trace: &RawTrace<F>,
    setup: &Setup,
    cycles: usize,
) -> Result<(Vec<F>, usize)> {
    let e = recover_powers(trace, &setup.extract)?;
    let low = e.low_confidence();
    let mut values = e.powers.values;
    values.resize(cycles, F::zero());
    Ok((values, low))
}

/// Simulates and observes one image under every kernel. Random masks and
/// schedules and measurement noise derive their seeds from `image_seed`.
pub fn observe<F: Scalar>(
    img: &Image,
    kernels: &[Kernel],
    setup: &Setup,
    image_seed: u64,
) -> Result<Observation<F>> {
    let runs = simulate_image::<F>(img, kernels, setup, image_seed)?;
    let schedule = match shared_schedule(&runs) {
        Some(s) => s.clone(),
        None => runs[0].schedule.clone(),
    };
    let truth: Vec<CyclePowers<F>> = runs.into_iter().map(|r| r.powers).collect();
    let (observed, low_confidence) = match setup.source {
        PowerSource::Direct => (truth.clone(), 0),
        PowerSource::Measured => {
            let out: Vec<(CyclePowers<F>, usize)> = truth
                .par_iter()
                .enumerate()
                .map(|(k, p)| {
                    let (trace, _) = measure_trace(p, setup, noise_seed(image_seed, k))?;
                    let (values, low) = recover(&trace, setup, p.len())?;
                    Ok((CyclePowers { values, kernel: k }, low))
                })
                .collect::<Result<_>>()?;
            let low = out.iter().map(|o| o.1).sum();
            (out.into_iter().map(|o| o.0).collect(), low)
        }
    };
    if observed.iter().any(|p| p.len() != schedule.total_cycles) {
        return Err(Error::Length("observed power vector length mismatch".into()));
    }
    Ok(Observation {
        schedule,
        truth,
        observed,
        low_confidence,
    })
}

/// Pearson correlation of two equally long series; 0 when either is flat.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
