//! Functional and power simulation of a line-buffer convolution unit.
//!
//! The line buffer is modelled as one long shift register of
//! `(K-1)·line_size + K` pixels whose last taps form the K×K window. One
//! pixel enters per cycle in row-major order, so a window that has just
//! slid one column shares K·(K-1) pixels with its predecessor. A cycle's
//! dynamic power depends on the K×(K+1) block formed by the outgoing column
//! and the current window (the related pixels), and on nothing else.
//!
//! Cycle power follows a Hamming-distance model over three register banks:
//! the K×K window registers, the K×K partial-product registers and the
//! accumulator, each weighted by its own coefficient, plus a constant
//! static term.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imgio::Image;
use crate::{seed, Error, Result, Scalar};

/// Default static power per cycle. Random 28×28 images under random ±1 3×3
/// kernels average about 90 units of dynamic power per cycle, so this keeps
/// the convolution datapath above 80% of the total.
pub const DEFAULT_STATIC_POWER: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Kernel {
    pub size: usize,
    /// Row-major: `weights[b * size + a]` multiplies the pixel at column
    /// offset `a`, row offset `b`.
    pub weights: Vec<i32>,
    pub bias: i32,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<i32>, bias: i32) -> Result<Self> {
        if !matches!(size, 3 | 5) {
            return Err(Error::Config(format!("kernel size {size} not in {{3, 5}}")));
        }
        if weights.len() != size * size {
            return Err(Error::Config(format!(
                "kernel of size {size} needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        Ok(Self {
            size,
            weights,
            bias,
        })
    }

    /// Binarized kernel with weights drawn uniformly from {-1, +1}.
    pub fn random_binary(size: usize, rng: &mut impl Rng) -> Result<Self> {
        let weights = (0..size * size)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        Self::new(size, weights, 0)
    }

    /// `count` binarized kernels derived from `base_seed`.
    pub fn random_set(size: usize, count: usize, base_seed: u64) -> Result<Vec<Self>> {
        (0..count)
            .map(|i| {
                let mut rng = seed::rng(seed::derive(base_seed, &[seed::stage::KERNELS, i as u64]));
                Self::random_binary(size, &mut rng)
            })
            .collect()
    }

    #[inline]
    pub fn weight(&self, a: usize, b: usize) -> i32 {
        self.weights[b * self.size + a]
    }
}

/// Parses the text kernel format: blocks of `K=<n>`, n rows of n integers,
/// then `bias=<int>`. Blank lines and `#` comments are ignored.
pub fn parse_kernels(text: &str) -> Result<Vec<Kernel>> {
    let mut lines = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .enumerate()
        .filter(|(_, l)| !l.is_empty());
    let mut kernels = Vec::new();
    while let Some((ln, line)) = lines.next() {
        let size: usize = line
            .strip_prefix("K=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("line {}: expected K=<size>", ln + 1)))?;
        let mut weights = Vec::with_capacity(size * size);
        for _ in 0..size {
            let (ln, row) = lines
                .next()
                .ok_or_else(|| Error::Format("kernel block truncated".into()))?;
            let vals: Vec<i32> = row
                .split_whitespace()
                .map(|t| t.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("line {}: bad weight row", ln + 1)))?;
            if vals.len() != size {
                return Err(Error::Format(format!(
                    "line {}: expected {size} weights, got {}",
                    ln + 1,
                    vals.len()
                )));
            }
            weights.extend(vals);
        }
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::Format("kernel block missing bias line".into()))?;
        let bias = line
            .strip_prefix("bias=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Format(format!("line {}: expected bias=<int>", ln + 1)))?;
        kernels.push(Kernel::new(size, weights, bias).map_err(|e| match e {
            Error::Config(m) => Error::Format(format!("line {}: {m}", ln + 1)),
            other => other,
        })?);
    }
    Ok(kernels)
}

pub fn format_kernels(kernels: &[Kernel]) -> String {
    let mut out = String::new();
    for k in kernels {
        out.push_str(&format!("K={}\n", k.size));
        for row in k.weights.chunks(k.size) {
            let row: Vec<String> = row.iter().map(|w| w.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out.push_str(&format!("bias={}\n", k.bias));
    }
    out
}

pub fn load_kernels(path: impl AsRef<Path>) -> Result<Vec<Kernel>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kernels(&text).map_err(|e| e.in_file(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheduling {
    Sequential,
    /// Output rows are processed in a seeded random order, independently per
    /// kernel.
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Masking {
    Off,
    /// Every pixel gets a uniform 16-bit mask added when it enters the line
    /// buffer; the kernel-weighted mask sum is removed after accumulation.
    On { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    /// Binarized activation; `sign(0) = +1`.
    Sign,
}

impl Activation {
    #[inline]
    fn apply(self, v: i32) -> i32 {
        match self {
            Activation::Identity => v,
            Activation::Sign => {
                if v >= 0 {
                    1
                } else {
                    -1
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelConfig {
    /// Pixels per line-buffer row; must equal the image width.
    pub line_size: usize,
    pub kernel_size: usize,
    pub input_channels: usize,
    pub stride_x: usize,
    pub stride_y: usize,
    pub coef_window: f64,
    pub coef_product: f64,
    pub coef_accumulator: f64,
    pub static_power: f64,
    pub scheduling: Scheduling,
    pub masking: Masking,
    pub activation: Activation,
}

impl Default for AccelConfig {
    fn default() -> Self {
        Self {
            line_size: 28,
            kernel_size: 3,
            input_channels: 1,
            stride_x: 1,
            stride_y: 1,
            coef_window: 1.0,
            coef_product: 1.0,
            coef_accumulator: 0.5,
            static_power: DEFAULT_STATIC_POWER,
            scheduling: Scheduling::Sequential,
            masking: Masking::Off,
            activation: Activation::Sign,
        }
    }
}

impl AccelConfig {
    pub fn with_line_size(mut self, line_size: usize) -> Self {
        self.line_size = line_size;
        self
    }

    pub fn with_kernel_size(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    fn check(&self, img: &Image, kernel: &Kernel) -> Result<()> {
        if self.stride_x == 0 || self.stride_y == 0 {
            return Err(Error::Config("strides must be >= 1".into()));
        }
        if kernel.size != self.kernel_size {
            return Err(Error::Config(format!(
                "kernel size {} does not match configured {}",
                kernel.size, self.kernel_size
            )));
        }
        if img.channels != 1 || self.input_channels != 1 {
            return Err(Error::Unsupported("only single-channel inputs".into()));
        }
        if img.width < kernel.size || img.height < kernel.size {
            return Err(Error::Dimension(format!(
                "{}x{} image is smaller than a {}x{} kernel",
                img.width, img.height, kernel.size, kernel.size
            )));
        }
        if self.line_size != img.width {
            return Err(Error::Dimension(format!(
                "line size {} does not match image width {}",
                self.line_size, img.width
            )));
        }
        Ok(())
    }
}

/// Output feature map of one kernel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<i32>,
}

impl FeatureMap {
    pub fn get(&self, x: usize, y: usize) -> i32 {
        self.values[y * self.width + x]
    }
}

fn output_dims(img: &Image, k: usize, cfg: &AccelConfig) -> (usize, usize) {
    (
        (img.width - k) / cfg.stride_x + 1,
        (img.height - k) / cfg.stride_y + 1,
    )
}

/// Valid (unpadded) convolution of one channel with one kernel.
pub fn convolve_layer(img: &Image, kernel: &Kernel, cfg: &AccelConfig) -> Result<FeatureMap> {
    cfg.check(img, kernel)?;
    let k = kernel.size;
    let (ow, oh) = output_dims(img, k, cfg);
    let mut values = Vec::with_capacity(ow * oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let (x0, y0) = (ox * cfg.stride_x, oy * cfg.stride_y);
            let mut acc = kernel.bias;
            for b in 0..k {
                for a in 0..k {
                    acc += kernel.weight(a, b) * img.get(x0 + a, y0 + b) as i32;
                }
            }
            values.push(cfg.activation.apply(acc));
        }
    }
    Ok(FeatureMap {
        width: ow,
        height: oh,
        values,
    })
}

/// One cycle whose window lies fully inside the image and contributes an
/// output pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledCycle {
    /// Position in the power vector.
    pub cycle: usize,
    /// Window origin (column, row).
    pub x: usize,
    pub y: usize,
    /// Related pixels: K rows × (K+1) columns, row-major. Column 0 is the
    /// column that left the window this cycle, columns 1..=K are the current
    /// window. Entries are row-major pixel indices; `None` marks a register
    /// still holding its reset value.
    pub related: Vec<Option<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleSchedule {
    pub width: usize,
    pub height: usize,
    pub kernel_size: usize,
    pub total_cycles: usize,
    pub cycles: Vec<ScheduledCycle>,
}

impl CycleSchedule {
    pub fn related_len(&self) -> usize {
        self.kernel_size * (self.kernel_size + 1)
    }

    pub fn valid_count(&self) -> usize {
        self.cycles.len()
    }

    /// Pixel values of a cycle's related pixels; reset registers read 0.
    pub fn patch(&self, cycle: &ScheduledCycle, img: &Image) -> Vec<u8> {
        cycle
            .related
            .iter()
            .map(|r| r.map_or(0, |i| img.pixels[i as usize]))
            .collect()
    }

    /// For every pixel, the indices (into `cycles`) of valid cycles whose
    /// related region contains it.
    pub fn pixel_coverage(&self) -> Vec<Vec<usize>> {
        let mut cov = vec![Vec::new(); self.width * self.height];
        for (ci, c) in self.cycles.iter().enumerate() {
            for p in c.related.iter().flatten() {
                let list = &mut cov[*p as usize];
                if list.last() != Some(&ci) {
                    list.push(ci);
                }
            }
        }
        cov
    }
}

/// True when a related-pixel patch causes no register transitions: every
/// row holds one value across all K+1 columns.
pub fn is_static_patch(patch: &[u8], kernel_size: usize) -> bool {
    patch
        .chunks(kernel_size + 1)
        .all(|row| row.iter().all(|&v| v == row[0]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePowers<F> {
    pub values: Vec<F>,
    pub kernel: usize,
}

impl<F: Scalar> CyclePowers<F> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total(&self) -> F {
        self.values.iter().copied().sum()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedRun<F> {
    pub schedule: CycleSchedule,
    pub powers: CyclePowers<F>,
    /// Feature map produced by the simulated datapath (after unmasking).
    pub feature_map: FeatureMap,
}

/// Where each window tap reads from at a given cycle.
enum Stream {
    /// Row-major pixel stream through one long shift register.
    RowMajor,
    /// Output rows processed band by band in the given order; each cycle
    /// shifts in one K-pixel column of the current band.
    Bands(Vec<usize>),
}

impl Stream {
    fn total_cycles(&self, w: usize, h: usize) -> usize {
        match self {
            Stream::RowMajor => w * h,
            Stream::Bands(order) => order.len() * w,
        }
    }

    /// Source pixel of window tap (row `i`, column `k`) at cycle `j`.
    #[inline]
    fn tap(&self, j: usize, i: usize, k: usize, kk: usize, w: usize) -> Option<u32> {
        match self {
            Stream::RowMajor => {
                let s = j as isize - ((kk - 1 - i) * w + (kk - 1 - k)) as isize;
                (s >= 0).then_some(s as u32)
            }
            Stream::Bands(order) => {
                let band = j / w;
                let col = (j % w) as isize - (kk - 1 - k) as isize;
                if col >= 0 {
                    Some(((order[band] + i) * w + col as usize) as u32)
                } else if band > 0 {
                    Some(((order[band - 1] + i) * w + (w as isize + col) as usize) as u32)
                } else {
                    None
                }
            }
        }
    }

    /// Window origin at cycle `j` if it is a valid output position.
    fn origin(&self, j: usize, kk: usize, w: usize, cfg: &AccelConfig) -> Option<(usize, usize)> {
        let (c, r) = match self {
            Stream::RowMajor => (j % w, j / w),
            Stream::Bands(order) => (j % w, order[j / w] + kk - 1),
        };
        if c + 1 < kk || r + 1 < kk {
            return None;
        }
        let (x, y) = (c + 1 - kk, r + 1 - kk);
        (x % cfg.stride_x == 0 && y % cfg.stride_y == 0).then_some((x, y))
    }
}

#[inline]
fn hd16(a: u16, b: u16) -> u32 {
    (a ^ b).count_ones()
}

fn simulate_with(
    img: &Image,
    kernel: &Kernel,
    cfg: &AccelConfig,
    schedule_seed: Option<u64>,
    mask_seed: Option<u64>,
) -> Result<(CycleSchedule, Vec<f64>, FeatureMap)> {
    cfg.check(img, kernel)?;
    let (w, h) = img.dims();
    let kk = kernel.size;
    let (ow, oh) = output_dims(img, kk, cfg);

    let stream = match schedule_seed {
        None => Stream::RowMajor,
        Some(s) => {
            let mut order: Vec<usize> = (0..oh).map(|r| r * cfg.stride_y).collect();
            order.shuffle(&mut seed::rng(s));
            Stream::Bands(order)
        }
    };
    let masks: Option<Vec<u16>> = mask_seed.map(|s| {
        let mut rng = seed::rng(s);
        (0..w * h).map(|_| rng.random::<u16>()).collect()
    });
    let value = |src: Option<u32>| -> u16 {
        match (src, &masks) {
            (None, _) => 0,
            (Some(i), None) => img.pixels[i as usize] as u16,
            (Some(i), Some(m)) => (img.pixels[i as usize] as u16).wrapping_add(m[i as usize]),
        }
    };

    let taps = kk * kk;
    let total = stream.total_cycles(w, h);
    let mut prev_win = vec![0u16; taps];
    let mut prev_prod = vec![0u16; taps];
    let mut prev_acc = 0u16;
    let mut win = vec![0u16; taps];
    let mut src = vec![None; taps];
    let mut prod = vec![0u16; taps];
    let mut powers = Vec::with_capacity(total);
    let mut cycles = Vec::with_capacity(ow * oh);
    let mut fmap = vec![0i32; ow * oh];

    for j in 0..total {
        for i in 0..kk {
            for k in 0..kk {
                let s = stream.tap(j, i, k, kk, w);
                src[i * kk + k] = s;
                win[i * kk + k] = value(s);
            }
        }
        let mut acc = kernel.bias as i64;
        for t in 0..taps {
            let p = kernel.weights[t] as i64 * win[t] as i64;
            prod[t] = p as u16;
            acc += p;
        }
        let acc = acc as u16;

        let hd_w: u32 = (0..taps).map(|t| hd16(prev_win[t], win[t])).sum();
        let hd_p: u32 = (0..taps).map(|t| hd16(prev_prod[t], prod[t])).sum();
        let hd_a = hd16(prev_acc, acc);
        powers.push(
            cfg.coef_window * hd_w as f64
                + cfg.coef_product * hd_p as f64
                + cfg.coef_accumulator * hd_a as f64
                + cfg.static_power,
        );

        if let Some((x, y)) = stream.origin(j, kk, w, cfg) {
            let mut related = Vec::with_capacity(kk * (kk + 1));
            for i in 0..kk {
                related.push(if j == 0 {
                    None
                } else {
                    stream.tap(j - 1, i, 0, kk, w)
                });
                related.extend_from_slice(&src[i * kk..(i + 1) * kk]);
            }
            cycles.push(ScheduledCycle {
                cycle: j,
                x,
                y,
                related,
            });
            let unmask: i64 = match &masks {
                None => 0,
                Some(m) => (0..taps)
                    .map(|t| kernel.weights[t] as i64 * src[t].map_or(0, |i| m[i as usize] as i64))
                    .sum(),
            };
            let out = (acc as i64 - unmask) as u16 as i16 as i32;
            fmap[(y / cfg.stride_y) * ow + x / cfg.stride_x] = cfg.activation.apply(out);
        }

        std::mem::swap(&mut prev_win, &mut win);
        std::mem::swap(&mut prev_prod, &mut prod);
        prev_acc = acc;
    }

    // Sort valid cycles by position so schedule order matches power order.
    cycles.sort_by_key(|c| c.cycle);
    Ok((
        CycleSchedule {
            width: w,
            height: h,
            kernel_size: kk,
            total_cycles: total,
            cycles,
        },
        powers,
        FeatureMap {
            width: ow,
            height: oh,
            values: fmap,
        },
    ))
}

/// Simulates one kernel over one image. Random scheduling and masking use
/// the seeds carried by the configuration as-is.
pub fn simulate_cycles<F: Scalar>(
    img: &Image,
    kernel: &Kernel,
    cfg: &AccelConfig,
) -> Result<SimulatedRun<F>> {
    simulate_kernel(img, kernel, 0, cfg)
}

fn simulate_kernel<F: Scalar>(
    img: &Image,
    kernel: &Kernel,
    index: usize,
    cfg: &AccelConfig,
) -> Result<SimulatedRun<F>> {
    let sched = match cfg.scheduling {
        Scheduling::Sequential => None,
        Scheduling::Random { seed: s } => Some(if index == 0 {
            s
        } else {
            seed::derive(s, &[seed::stage::SCHEDULE, index as u64])
        }),
    };
    let mask = match cfg.masking {
        Masking::Off => None,
        Masking::On { seed: s } => Some(if index == 0 {
            s
        } else {
            seed::derive(s, &[seed::stage::MASK, index as u64])
        }),
    };
    let (schedule, powers, feature_map) = simulate_with(img, kernel, cfg, sched, mask)?;
    Ok(SimulatedRun {
        schedule,
        powers: CyclePowers {
            values: powers.into_iter().map(F::of).collect(),
            kernel: index,
        },
        feature_map,
    })
}

/// Simulates every kernel over the same image. Kernel `i` gets its own
/// derived seeds for random scheduling and masking; kernel 0 uses the
/// configured seeds directly, so a single-kernel run equals
/// [`simulate_cycles`].
pub fn run_all_kernels<F: Scalar>(
    img: &Image,
    kernels: &[Kernel],
    cfg: &AccelConfig,
) -> Result<Vec<SimulatedRun<F>>> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::Config("no kernels given".into()))?;
    if kernels.iter().any(|k| k.size != first.size) {
        return Err(Error::Config("kernels have mixed sizes".into()));
    }
    use rayon::prelude::*;
    kernels
        .par_iter()
        .enumerate()
        .map(|(i, k)| simulate_kernel(img, k, i, cfg))
        .collect()
}

/// The schedule shared by all runs, or `None` when kernels were scheduled
/// differently.
pub fn shared_schedule<F>(runs: &[SimulatedRun<F>]) -> Option<&CycleSchedule> {
    let first = &runs.first()?.schedule;
    runs.iter()
        .all(|r| r.schedule == *first)
        .then_some(first)
}
