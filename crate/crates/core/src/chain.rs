//! Measurement chain: per-cycle power to a sampled voltage-like trace.
//!
//! Three distortions are applied in order: the power-distribution network
//! smears each cycle's energy into a rise-then-decay pulse that bleeds into
//! later cycles ([`render_pdn`]), the AC-coupled amplifier removes the DC
//! component ([`apply_highpass`]), and the oscilloscope adds white noise
//! ([`add_noise`]).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::accel::CyclePowers;
use crate::{seed, Error, Result, Scalar};

/// Oscilloscope sampling interval of the reference setup (2.5 GS/s).
pub const REFERENCE_SAMPLE_INTERVAL: f64 = 0.4e-9;
/// High-pass time constant of the reference amplifier, `1 / (2π · 250 Hz)`.
pub const REFERENCE_HIGHPASS_TAU: f64 = 640e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub samples_per_cycle: usize,
    /// Seconds between samples.
    pub sample_interval: f64,
    /// Charging time constant, as a fraction of a cycle.
    pub rise: f64,
    /// Discharge time constant, as a fraction of a cycle.
    pub decay: f64,
    /// Where the pulse switches from charging to discharging, as a fraction
    /// of a cycle.
    pub peak: f64,
    /// Amplifier high-pass time constant in seconds.
    pub highpass_tau: f64,
    /// Standard deviation of the additive measurement noise.
    pub noise_sigma: f64,
    /// Idle cycles appended after the last active cycle so the final pulses
    /// can decay inside the trace.
    pub trailing_cycles: usize,
    pub seed: u64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self::desk_scale(64)
    }
}

impl ChainConfig {
    /// Desk-scale defaults for a given cycle length: the high-pass time
    /// constant is 200 cycle periods so its droop is visible within one
    /// feature map.
    pub fn desk_scale(samples_per_cycle: usize) -> Self {
        Self {
            samples_per_cycle,
            sample_interval: REFERENCE_SAMPLE_INTERVAL,
            rise: 0.08,
            decay: 0.40,
            peak: 0.25,
            highpass_tau: 200.0 * samples_per_cycle as f64 * REFERENCE_SAMPLE_INTERVAL,
            noise_sigma: 0.0,
            trailing_cycles: 12,
            seed: 0,
        }
    }

    /// The reference oscilloscope/amplifier time constants.
    pub fn reference(samples_per_cycle: usize) -> Self {
        Self {
            highpass_tau: REFERENCE_HIGHPASS_TAU,
            ..Self::desk_scale(samples_per_cycle)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_cycle < 8 {
            return Err(Error::Config(format!(
                "samples_per_cycle {} < 8",
                self.samples_per_cycle
            )));
        }
        if !(self.rise > 0.0 && self.rise < self.decay) {
            return Err(Error::Config("need 0 < rise < decay".into()));
        }
        if !(self.peak > 0.0 && self.peak < 1.0) {
            return Err(Error::Config("peak must lie inside the cycle".into()));
        }
        if self.sample_interval <= 0.0 {
            return Err(Error::Config("sample_interval must be positive".into()));
        }
        if self.highpass_tau < 10.0 * self.samples_per_cycle as f64 * self.sample_interval {
            return Err(Error::Config(
                "highpass_tau must be much longer than a cycle".into(),
            ));
        }
        if self.noise_sigma < 0.0 || !self.noise_sigma.is_finite() {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    fn peak_sample(&self) -> usize {
        ((self.peak * self.samples_per_cycle as f64).round() as usize).max(1)
    }

    /// Unit-sum pulse shape of one cycle, long enough for the tail to fall
    /// below 1e-13 of the peak.
    pub fn pulse_shape(&self) -> Vec<f64> {
        let ns = self.samples_per_cycle as f64;
        let tau_r = self.rise * ns;
        let tau_d = self.decay * ns;
        let t_peak = self.peak_sample();
        let len = t_peak + (30.0 * tau_d).ceil() as usize;
        let mut shape: Vec<f64> = (0..len)
            .map(|n| {
                if n < t_peak {
                    1.0 - (-(n as f64) / tau_r).exp()
                } else {
                    (-((n - t_peak) as f64) / tau_d).exp()
                }
            })
            .collect();
        let sum: f64 = shape.iter().sum();
        shape.iter_mut().for_each(|v| *v /= sum);
        shape
    }
}

/// Sampled trace. `cycles · samples_per_cycle == samples.len()` for traces
/// produced by [`render_pdn`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrace<F> {
    pub samples: Vec<F>,
    /// Seconds between samples.
    pub sample_interval: f64,
    pub cycles: usize,
    pub samples_per_cycle: usize,
}

impl<F: Scalar> RawTrace<F> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_samples(&self, samples: Vec<F>) -> Self {
        Self {
            samples,
            sample_interval: self.sample_interval,
            cycles: self.cycles,
            samples_per_cycle: self.samples_per_cycle,
        }
    }

    /// Root mean square of the samples.
    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.samples.iter().map(|v| v.as_f64().powi(2)).sum();
        (ss / self.samples.len() as f64).sqrt()
    }
}

/// Superposes one integral-normalized pulse per cycle.
pub fn render_pdn<F: Scalar>(p: &CyclePowers<F>, cfg: &ChainConfig) -> Result<RawTrace<F>> {
    cfg.validate()?;
    let ns = cfg.samples_per_cycle;
    let cycles = p.len() + cfg.trailing_cycles;
    let n = cycles * ns;
    let shape = cfg.pulse_shape();
    let mut acc = vec![0.0f64; n];
    for (j, power) in p.values.iter().enumerate() {
        let power = power.as_f64();
        if power == 0.0 {
            continue;
        }
        let start = j * ns;
        for (dst, s) in acc[start..].iter_mut().zip(&shape) {
            *dst += power * s;
        }
    }
    Ok(RawTrace {
        samples: acc.into_iter().map(F::of).collect(),
        sample_interval: cfg.sample_interval,
        cycles,
        samples_per_cycle: ns,
    })
}

/// Amplifier impulse response tap `h(n)` for `n >= 0`.
pub fn highpass_tap(n: usize, sample_interval: f64, tau: f64) -> f64 {
    if n == 0 {
        1.0
    } else {
        let r = sample_interval / tau;
        -r * (-(n as f64) * r).exp()
    }
}

/// Convolves the trace with the amplifier response
/// `h(0) = 1, h(n) = -(T/τ)·exp(-nT/τ)`. The exponential tail makes the
/// convolution a first-order recursion, so this runs in linear time.
pub fn apply_highpass<F: Scalar>(t: &RawTrace<F>, tau: f64) -> RawTrace<F> {
    let r = t.sample_interval / tau;
    let a = F::of((-r).exp());
    let c = F::of(r);
    let mut state = F::zero(); // Σ_{i<n} x(i)·a^(n-i)
    let mut prev = F::zero();
    let mut out = Vec::with_capacity(t.len());
    for &x in &t.samples {
        state = a * (state + prev);
        out.push(x - c * state);
        prev = x;
    }
    t.with_samples(out)
}

/// Adds i.i.d. zero-mean Gaussian noise with standard deviation `sigma`.
pub fn add_noise<F: Scalar>(t: &RawTrace<F>, sigma: f64, seed: u64) -> Result<RawTrace<F>> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config("noise sigma must be >= 0".into()));
    }
    if sigma == 0.0 {
        return Ok(t.clone());
    }
    let mut rng = seed::rng(seed);
    let samples = t
        .samples
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut rng);
            x + F::of(sigma * z)
        })
        .collect();
    Ok(t.with_samples(samples))
}

/// Noise standard deviation that puts `snr_db` between the mean signal power
/// of `clean` and the noise.
pub fn sigma_for_snr<F: Scalar>(clean: &RawTrace<F>, snr_db: f64) -> f64 {
    clean.rms() / 10f64.powf(snr_db / 20.0)
}

/// Full chain: PDN rendering, high-pass, then noise (if `noise_sigma > 0`).
pub fn measure<F: Scalar>(p: &CyclePowers<F>, cfg: &ChainConfig) -> Result<RawTrace<F>> {
    let pdn = render_pdn(p, cfg)?;
    let hp = apply_highpass(&pdn, cfg.highpass_tau);
    add_noise(&hp, cfg.noise_sigma, cfg.seed)
}
