//! Per-cycle power recovery from a measured trace.
//!
//! The attacker-side pipeline is: zero-phase low-pass to suppress
//! measurement noise, recursive DC restoration that undoes the amplifier
//! high-pass, Pearson-correlation alignment against a one-cycle template,
//! and a cycle-by-cycle exponential fit that re-attributes each pulse's
//! trailing energy to the cycle that produced it.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::accel::CyclePowers;
use crate::chain::RawTrace;
use crate::{seed, Error, Result, Scalar};

/// Taps of the windowed-sinc low-pass filter.
pub const LOWPASS_TAPS: usize = 127;
/// Default low-pass cutoff as a fraction of Nyquist.
pub const DEFAULT_LOWPASS_CUTOFF: f64 = 0.3;

fn lowpass_taps(cutoff_norm: f64) -> Vec<f64> {
    let m = (LOWPASS_TAPS - 1) as f64 / 2.0;
    // cutoff in cycles/sample; Nyquist is 0.5
    let fc = cutoff_norm * 0.5;
    let mut h: Vec<f64> = (0..LOWPASS_TAPS)
        .map(|n| {
            let d = n as f64 - m;
            let sinc = if d == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * d).sin() / (PI * d)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / (LOWPASS_TAPS - 1) as f64).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= sum);
    h
}

/// One centered pass of a symmetric FIR with edge-value extension.
fn fir_centered(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    let m = (h.len() / 2) as isize;
    let at = |i: isize| x[i.clamp(0, n - 1) as usize];
    (0..n)
        .map(|i| {
            let mut acc = h[m as usize] * x[i as usize];
            for d in 1..=m {
                acc += h[(m - d) as usize] * (at(i - d) + at(i + d));
            }
            acc
        })
        .collect()
}

/// Zero-phase low-pass: a Hamming-windowed sinc applied forward and
/// backward. `cutoff_norm` is a fraction of Nyquist.
pub fn lowpass<F: Scalar>(t: &RawTrace<F>, cutoff_norm: f64) -> Result<RawTrace<F>> {
    if !(cutoff_norm > 0.0 && cutoff_norm < 1.0) {
        return Err(Error::Config(format!(
            "low-pass cutoff {cutoff_norm} not in (0, 1)"
        )));
    }
    if t.len() < LOWPASS_TAPS {
        return Err(Error::Length(format!(
            "trace of {} samples is shorter than the {LOWPASS_TAPS}-tap filter",
            t.len()
        )));
    }
    let h = lowpass_taps(cutoff_norm);
    let x: Vec<f64> = t.samples.iter().map(|v| v.as_f64()).collect();
    let fwd = fir_centered(&x, &h);
    // the taps are symmetric, so the backward pass is the same centered pass
    let mut both = fir_centered(&fwd, &h);
    both.reverse();
    both.reverse();
    Ok(t.with_samples(both.into_iter().map(F::of).collect()))
}

/// Recursive inverse of [`crate::chain::apply_highpass`]:
/// `r(n) = x(n) - Σ_{i<n} r(i)·h(n-i)`.
pub fn restore_dc<F: Scalar>(t: &RawTrace<F>, tau: f64) -> RawTrace<F> {
    let ratio = t.sample_interval / tau;
    let a = F::of((-ratio).exp());
    let c = F::of(ratio);
    let mut state = F::zero(); // Σ_{i<n} r(i)·a^(n-i)
    let mut prev = F::zero();
    let mut out = Vec::with_capacity(t.len());
    for &x in &t.samples {
        state = a * (state + prev);
        let r = x + c * state;
        out.push(r);
        prev = r;
    }
    t.with_samples(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    /// Minimum Pearson correlation for an alignment point.
    pub min_correlation: f64,
    /// Minimum distance between points, as a fraction of a cycle.
    pub min_separation: f64,
    /// Random windows scored when the template is picked automatically.
    pub template_windows: usize,
    /// Start sample of an explicit template window; overrides auto-selection.
    pub template_index: Option<usize>,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            min_correlation: 0.5,
            min_separation: 0.8,
            template_windows: 32,
            template_index: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPoints {
    /// Ascending start sample of each detected cycle.
    pub indices: Vec<usize>,
    /// One-cycle snippet the trace was matched against.
    pub template: Vec<f64>,
}

impl AlignmentPoints {
    /// Evenly spaced points, for traces whose cycle boundaries are known.
    pub fn nominal(start: usize, cycles: usize, samples_per_cycle: usize) -> Self {
        Self {
            indices: (0..cycles).map(|j| start + j * samples_per_cycle).collect(),
            template: Vec::new(),
        }
    }

    /// Truncates to `cycles` points, or extends at nominal spacing while the
    /// next cycle still fits in a trace of `len` samples.
    pub fn fit_to(&mut self, cycles: usize, samples_per_cycle: usize, len: usize) {
        self.indices.truncate(cycles);
        while self.indices.len() < cycles {
            let next = self.indices.last().map_or(0, |&l| l + samples_per_cycle);
            if next + samples_per_cycle > len {
                break;
            }
            self.indices.push(next);
        }
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    let den = (va * vb).sqrt();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Pearson correlation of `template` with the trace at every offset
/// `0..=len-template.len()`. Offsets where the trace window is flat get 0.
pub fn sliding_pearson(x: &[f64], template: &[f64]) -> Vec<f64> {
    let m = template.len();
    if m == 0 || x.len() < m {
        return Vec::new();
    }
    let mt = template.iter().sum::<f64>() / m as f64;
    let tc: Vec<f64> = template.iter().map(|v| v - mt).collect();
    let tnorm = tc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tnorm == 0.0 {
        return vec![0.0; x.len() - m + 1];
    }
    let mut s1 = vec![0.0; x.len() + 1];
    let mut s2 = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    (0..=x.len() - m)
        .map(|o| {
            let sum = s1[o + m] - s1[o];
            let var = (s2[o + m] - s2[o]) - sum * sum / m as f64;
            // relative floor against cancellation in the prefix sums
            let scale = (s2[o + m] - s2[o]).max(f64::MIN_POSITIVE);
            if var <= 1e-12 * scale {
                return 0.0;
            }
            let num: f64 = tc.iter().zip(&x[o..o + m]).map(|(t, v)| t * v).sum();
            (num / (tnorm * var.sqrt())).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Steepest rise within `[o, o+ns)` and its slope.
fn onset(x: &[f64], o: usize, ns: usize) -> (usize, f64) {
    (0..ns)
        .filter(|k| o + k + 1 < x.len())
        .map(|k| (o + k, x[o + k + 1] - x[o + k]))
        .fold((o, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
}

/// Samples random windows, moves each to start at its steepest rise so all
/// candidates share the phase of a cycle start, drops windows without a
/// clear rise and keeps the one that correlates best on average with the
/// others.
fn auto_template(x: &[f64], ns: usize, cfg: &AlignConfig) -> Result<Vec<f64>> {
    let n = x.len();
    let mut rng = seed::rng(cfg.seed);
    let count = cfg.template_windows.max(2);
    let snapped: Vec<(usize, f64)> = (0..count)
        .map(|_| {
            let (s, rise) = onset(x, rng.random_range(0..=n - ns), ns);
            (s.min(n - ns), rise)
        })
        .collect();
    let mut rises: Vec<f64> = snapped.iter().map(|c| c.1).filter(|&r| r > 0.0).collect();
    rises.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let floor = rises.get(rises.len() / 2).map_or(f64::INFINITY, |m| 0.5 * m);
    let starts: Vec<usize> = snapped
        .iter()
        .filter(|c| c.1 > 0.0 && c.1 >= floor)
        .map(|c| c.0)
        .collect();
    if starts.is_empty() {
        return Err(Error::Alignment("no rising edge found for a template".into()));
    }
    let windows: Vec<&[f64]> = starts.iter().map(|&o| &x[o..o + ns]).collect();
    let mut best = (f64::NEG_INFINITY, starts[0]);
    for (i, w) in windows.iter().enumerate() {
        let score = windows
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, v)| pearson(w, v))
            .sum::<f64>();
        if score > best.0 {
            best = (score, starts[i]);
        }
    }
    Ok(x[best.1..best.1 + ns].to_vec())
}

/// Finds cycle starts as local correlation maxima above the threshold,
/// at least `min_separation·ns` apart. Gaps spanning several cycles are
/// filled at even spacing.
pub fn align<F: Scalar>(
    t: &RawTrace<F>,
    template: Option<&[F]>,
    ns: usize,
    cfg: &AlignConfig,
) -> Result<AlignmentPoints> {
    let n = t.len();
    if ns == 0 || n < 3 * ns {
        return Err(Error::Length(format!(
            "alignment needs at least 3 cycles of {ns} samples, trace has {n}"
        )));
    }
    let x: Vec<f64> = t.samples.iter().map(|v| v.as_f64()).collect();
    let template: Vec<f64> = match (template, cfg.template_index) {
        (Some(tpl), _) => tpl.iter().map(|v| v.as_f64()).collect(),
        (None, Some(i)) if i + ns <= n => x[i..i + ns].to_vec(),
        (None, Some(i)) => {
            return Err(Error::Config(format!(
                "template index {i} leaves less than one cycle"
            )))
        }
        (None, None) => auto_template(&x, ns, cfg)?,
    };
    let corr = sliding_pearson(&x, &template);

    let mut peaks: Vec<usize> = (0..corr.len())
        .filter(|&o| {
            corr[o] >= cfg.min_correlation
                && (o == 0 || corr[o] >= corr[o - 1])
                && (o + 1 == corr.len() || corr[o] > corr[o + 1])
        })
        .collect();
    peaks.sort_by(|&a, &b| corr[b].partial_cmp(&corr[a]).unwrap().then(a.cmp(&b)));
    let sep = (cfg.min_separation * ns as f64).ceil() as usize;
    let mut kept: Vec<usize> = Vec::new();
    for p in peaks {
        if kept.iter().all(|&k| k.abs_diff(p) >= sep) {
            kept.push(p);
        }
    }
    kept.sort_unstable();
    if kept.len() < 2 {
        return Err(Error::Alignment(format!(
            "found {} alignment point(s), need at least 2",
            kept.len()
        )));
    }

    let mut indices = Vec::with_capacity(kept.len());
    for pair in kept.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        indices.push(a);
        let steps = ((b - a) as f64 / ns as f64).round() as usize;
        for s in 1..steps {
            indices.push(a + (b - a) * s / steps);
        }
    }
    indices.push(*kept.last().unwrap());
    Ok(AlignmentPoints { indices, template })
}

/// Result of fitting `V_p · exp(-t/τ)` to the discharge of one cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    /// Amplitude at the pulse peak.
    pub v_peak: f64,
    /// Decay constant in samples.
    pub tau: f64,
    /// RMS residual over the fitted samples.
    pub residual: f64,
    pub iterations: usize,
}

const FIT_MAX_ITER: usize = 50;
const FIT_TOL: f64 = 1e-8;

/// Gauss-Newton fit of `y_k ≈ A·exp(-t_k/τ)`. Returns `None` when the fit
/// leaves `τ ∈ [0.05, 5]·ns`, produces a negative amplitude or non-finite
/// values.
pub fn fit_decay(t: &[f64], y: &[f64], ns: usize) -> Option<FitParams> {
    if t.len() != y.len() || t.len() < 3 {
        return None;
    }
    let (tau_lo, tau_hi) = (0.05 * ns as f64, 5.0 * ns as f64);
    let sse = |a: f64, tau: f64| -> f64 {
        t.iter()
            .zip(y)
            .map(|(tk, yk)| (yk - a * (-tk / tau).exp()).powi(2))
            .sum()
    };
    let mut a = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut tau = 0.4 * ns as f64;
    let mut cur = sse(a, tau);
    let mut iterations = 0;
    for it in 1..=FIT_MAX_ITER {
        iterations = it;
        let (mut g11, mut g12, mut g22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (tk, yk) in t.iter().zip(y) {
            let e = (-tk / tau).exp();
            let d1 = e;
            let d2 = a * tk * e / (tau * tau);
            let r = yk - a * e;
            g11 += d1 * d1;
            g12 += d1 * d2;
            g22 += d2 * d2;
            b1 += d1 * r;
            b2 += d2 * r;
        }
        let det = g11 * g22 - g12 * g12;
        if !det.is_finite() || det.abs() <= f64::EPSILON * g11 * g22 {
            break;
        }
        let da = (g22 * b1 - g12 * b2) / det;
        let dt = (g11 * b2 - g12 * b1) / det;
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let (na, nt) = (a + step * da, tau + step * dt);
            if nt > 0.0 {
                let s = sse(na, nt);
                if s <= cur {
                    a = na;
                    tau = nt;
                    cur = s;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        let rel = (step * da / a.abs().max(f64::MIN_POSITIVE))
            .abs()
            .max((step * dt / tau).abs());
        if !accepted || rel < FIT_TOL {
            break;
        }
    }
    let ok = a.is_finite() && tau.is_finite() && a >= 0.0 && (tau_lo..=tau_hi).contains(&tau);
    ok.then(|| FitParams {
        v_peak: a,
        tau,
        residual: (cur / t.len() as f64).sqrt(),
        iterations,
    })
}

/// Trailing-trace cap: stop below this fraction of the fitted peak...
pub const TRAIL_FLOOR: f64 = 0.01;
/// ...or after this many cycles.
pub const TRAIL_MAX_CYCLES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction<F> {
    pub powers: CyclePowers<F>,
    pub fits: Vec<Option<FitParams>>,
}

impl<F> Extraction<F> {
    /// Cycles whose fit failed and whose power is the plain in-cycle sum.
    pub fn low_confidence(&self) -> usize {
        self.fits.iter().filter(|f| f.is_none()).count()
    }
}

/// Cycle-by-cycle power extraction with trailing-energy re-attribution.
///
/// For each aligned cycle the discharge after the in-cycle peak is fitted
/// with an exponential, its continuation past the cycle end is generated,
/// added to the cycle's sum and subtracted from the following samples.
pub fn extract_cycle_power<F: Scalar>(
    t: &RawTrace<F>,
    points: &AlignmentPoints,
) -> Result<Extraction<F>> {
    if points.indices.is_empty() {
        return Err(Error::EmptyInput("no aligned cycles".into()));
    }
    let ns = t.samples_per_cycle;
    let mut p: Vec<f64> = t.samples.iter().map(|v| v.as_f64()).collect();
    let n = p.len();
    let guard = (ns / 32).max(1);
    let mut powers = Vec::with_capacity(points.indices.len());
    let mut fits = Vec::with_capacity(points.indices.len());

    for (j, &st) in points.indices.iter().enumerate() {
        let ed = points
            .indices
            .get(j + 1)
            .copied()
            .unwrap_or(st + ns)
            .min(n);
        if st >= ed {
            powers.push(F::zero());
            fits.push(None);
            continue;
        }
        let seg = &p[st..ed];
        let in_cycle: f64 = seg.iter().sum();
        let peak = seg
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
        let lo = peak + guard;
        let hi = seg.len().saturating_sub(guard);
        let fit = if hi > lo + 3 {
            let ts: Vec<f64> = (lo..hi).map(|i| (i - peak) as f64).collect();
            fit_decay(&ts, &seg[lo..hi], ns)
        } else {
            None
        };
        let mut total = in_cycle;
        if let Some(f) = fit {
            let floor = TRAIL_FLOOR * f.v_peak;
            let from = (ed - st - peak) as f64;
            for m in 0..TRAIL_MAX_CYCLES * ns {
                let v = f.v_peak * (-(from + m as f64) / f.tau).exp();
                if v < floor {
                    break;
                }
                total += v;
                if let Some(s) = p.get_mut(ed + m) {
                    *s -= v;
                }
            }
        }
        powers.push(F::of(total));
        fits.push(fit);
    }
    Ok(Extraction {
        powers: CyclePowers {
            values: powers,
            kernel: 0,
        },
        fits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Low-pass cutoff as a fraction of Nyquist; `None` skips the filter.
    pub lowpass_cutoff: Option<f64>,
    /// High-pass time constant to undo; `None` skips DC restoration.
    pub highpass_tau: Option<f64>,
    pub align: AlignConfig,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            lowpass_cutoff: Some(DEFAULT_LOWPASS_CUTOFF),
            highpass_tau: Some(crate::chain::ChainConfig::default().highpass_tau),
            align: AlignConfig::default(),
        }
    }
}

/// Full attacker pipeline: low-pass, DC restoration, alignment and
/// extraction. The result has one entry per trace cycle; cycles past the
/// last alignment point are extrapolated at nominal spacing.
pub fn recover_powers<F: Scalar>(t: &RawTrace<F>, cfg: &ExtractConfig) -> Result<Extraction<F>> {
    let mut x = t.clone();
    if let Some(c) = cfg.lowpass_cutoff {
        x = lowpass(&x, c)?;
    }
    if let Some(tau) = cfg.highpass_tau {
        x = restore_dc(&x, tau);
    }
    let ns = t.samples_per_cycle;
    let mut pts = align(&x, None, ns, &cfg.align)?;
    pts.fit_to(t.cycles, ns, x.len());
    extract_cycle_power(&x, &pts)
}
