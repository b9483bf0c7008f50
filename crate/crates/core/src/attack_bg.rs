//! Passive background detection: cycles whose window holds a uniform region
//! draw only static power, so thresholding the per-cycle power histogram at
//! its sharpest count drop separates background windows from the rest.

use serde::{Deserialize, Serialize};

use crate::accel::{CycleSchedule, CyclePowers};
use crate::imgio::{Image, Marker, SilhouetteImage};
use crate::{metrics, Error, Result, Scalar};

/// Number of bins used when no bin size is given.
pub const DEFAULT_BINS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_size: f64,
    pub counts: Vec<usize>,
    pub min: f64,
    pub max: f64,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Lower edge of bin `i`.
    pub fn edge(&self, i: usize) -> f64 {
        self.min + i as f64 * self.bin_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub power: f64,
}

fn valid_powers<F: Scalar>(p: &CyclePowers<F>, schedule: &CycleSchedule) -> Result<Vec<f64>> {
    schedule
        .cycles
        .iter()
        .map(|c| {
            p.values.get(c.cycle).map(|v| v.as_f64()).ok_or_else(|| {
                Error::Length(format!(
                    "power vector has {} cycles, schedule needs cycle {}",
                    p.len(),
                    c.cycle
                ))
            })
        })
        .collect()
}

/// `(max - min) / DEFAULT_BINS`, or 1 when all valid cycles draw the same power.
pub fn default_bin_size<F: Scalar>(p: &CyclePowers<F>, schedule: &CycleSchedule) -> Result<f64> {
    let v = valid_powers(p, schedule)?;
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    Ok(if span > 0.0 { span / DEFAULT_BINS as f64 } else { 1.0 })
}

/// Bins the powers of valid cycles; bin `i` covers
/// `[min + i·B, min + (i+1)·B)`.
pub fn build_histogram<F: Scalar>(
    p: &CyclePowers<F>,
    schedule: &CycleSchedule,
    bin_size: f64,
) -> Result<Histogram> {
    if !(bin_size > 0.0) || !bin_size.is_finite() {
        return Err(Error::Config(format!("bin size {bin_size} must be positive")));
    }
    let v = valid_powers(p, schedule)?;
    if v.is_empty() {
        return Err(Error::EmptyInput("no valid cycles to histogram".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format("non-finite cycle power".into()));
    }
    let min = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bin = |x: f64| ((x - min) / bin_size).floor() as usize;
    let mut counts = vec![0; bin(max) + 1];
    for x in v {
        counts[bin(x)] += 1;
    }
    Ok(Histogram {
        bin_size,
        counts,
        min,
        max,
    })
}

/// Places the threshold at the bin edge where the count falls the most,
/// i.e. at `min + i·B` for the `i` maximizing `C[i-1] - C[i]`. Ties go to
/// the lower edge.
pub fn select_threshold(h: &Histogram) -> Result<Threshold> {
    let mut best: Option<(usize, usize)> = None;
    for i in 1..h.counts.len() {
        if h.counts[i] < h.counts[i - 1] {
            let drop = h.counts[i - 1] - h.counts[i];
            if best.is_none_or(|(_, d)| drop > d) {
                best = Some((i, drop));
            }
        }
    }
    best.map(|(i, _)| Threshold { power: h.edge(i) })
        .ok_or(Error::NoDrop)
}

/// What to do with pixels that no valid window covers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum BorderPolicy {
    #[default]
    Background,
    Foreground,
}

/// Paints every pixel of a cycle at or below the threshold as background.
pub fn recover_silhouette<F: Scalar>(
    p: &CyclePowers<F>,
    schedule: &CycleSchedule,
    thr: Threshold,
    border: BorderPolicy,
) -> Result<SilhouetteImage> {
    let powers = valid_powers(p, schedule)?;
    let (w, h) = (schedule.width, schedule.height);
    let mut markers = vec![Marker::Foreground; w * h];
    let mut covered = vec![false; w * h];
    for (c, &pw) in schedule.cycles.iter().zip(&powers) {
        let background = pw <= thr.power;
        for &px in c.related.iter().flatten() {
            covered[px as usize] = true;
            if background {
                markers[px as usize] = Marker::Background;
            }
        }
    }
    if border == BorderPolicy::Background {
        for (m, cov) in markers.iter_mut().zip(&covered) {
            if !cov {
                *m = Marker::Background;
            }
        }
    }
    Ok(SilhouetteImage {
        width: w,
        height: h,
        markers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundResult {
    pub histogram: Histogram,
    pub threshold: Threshold,
    pub silhouette: SilhouetteImage,
}

/// Histogram, threshold selection and painting in one call. `bin_size`
/// defaults to [`default_bin_size`].
pub fn detect_background<F: Scalar>(
    p: &CyclePowers<F>,
    schedule: &CycleSchedule,
    bin_size: Option<f64>,
    border: BorderPolicy,
) -> Result<BackgroundResult> {
    let b = match bin_size {
        Some(b) => b,
        None => default_bin_size(p, schedule)?,
    };
    let histogram = build_histogram(p, schedule, b)?;
    let threshold = select_threshold(&histogram)?;
    let silhouette = recover_silhouette(p, schedule, threshold, border)?;
    Ok(BackgroundResult {
        histogram,
        threshold,
        silhouette,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub pixel_accuracy: f64,
}

/// Pixel accuracy against the golden image for each threshold in
/// `start, start+step, ...` up to and including `end`.
pub fn threshold_sweep<F: Scalar>(
    p: &CyclePowers<F>,
    schedule: &CycleSchedule,
    golden: &Image,
    (start, end): (f64, f64),
    step: f64,
) -> Result<Vec<SweepPoint>> {
    if !(step > 0.0) || end < start {
        return Err(Error::Config(format!(
            "sweep [{start}, {end}] with step {step} is empty"
        )));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize + 1;
    (0..n)
        .map(|i| {
            let t = start + i as f64 * step;
            let sil = recover_silhouette(p, schedule, Threshold { power: t }, BorderPolicy::Background)?;
            Ok(SweepPoint {
                threshold: t,
                pixel_accuracy: metrics::pixel_marker_accuracy(&sil, golden)?,
            })
        })
        .collect()
}
