//! Active-adversary template attack.
//!
//! Profiling stores, for every valid cycle of every profiling image, the
//! related-pixel patch together with the cycle's power under each kernel.
//! At attack time each cycle's power feature vector is split into kernel
//! groups; every group yields the patches whose stored features lie within
//! `δ` (L1 over the group's kernels), and the cycle's candidates are the
//! patches found by all groups. The image is then assembled by a greedy
//! selector that keeps overlapping cycles consistent and retains the
//! assembly with the smallest summed per-pixel variance.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accel::{CycleSchedule, Kernel, Scheduling};
use crate::imgio::Image;
use crate::pipeline::{observe, Setup};
use crate::{seed, Error, Result, Scalar};

/// Profiling database of `(patch, power feature vector)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTemplate<F> {
    pub kernel_size: usize,
    pub kernel_count: usize,
    patches: Vec<u8>,
    features: Vec<F>,
    /// Per-kernel mean of the stored powers.
    pub mean: Vec<f64>,
    /// Per-kernel standard deviation of the stored powers.
    pub std: Vec<f64>,
}

impl<F: Scalar> PowerTemplate<F> {
    pub fn new(kernel_size: usize, kernel_count: usize) -> Self {
        Self {
            kernel_size,
            kernel_count,
            patches: Vec::new(),
            features: Vec::new(),
            mean: vec![0.0; kernel_count],
            std: vec![1.0; kernel_count],
        }
    }

    pub(crate) fn from_parts(
        kernel_size: usize,
        kernel_count: usize,
        patches: Vec<u8>,
        features: Vec<F>,
        mean: Vec<f64>,
        std: Vec<f64>,
    ) -> Result<Self> {
        let plen = kernel_size * (kernel_size + 1);
        if patches.len() % plen != 0
            || features.len() != patches.len() / plen * kernel_count
            || mean.len() != kernel_count
            || std.len() != kernel_count
        {
            return Err(Error::Format("inconsistent template sections".into()));
        }
        Ok(Self {
            kernel_size,
            kernel_count,
            patches,
            features,
            mean,
            std,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel_size * (self.kernel_size + 1)
    }

    pub fn len(&self) -> usize {
        self.patches.len() / self.patch_len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[u8] {
        let l = self.patch_len();
        &self.patches[i * l..(i + 1) * l]
    }

    pub fn features(&self, i: usize) -> &[F] {
        let k = self.kernel_count;
        &self.features[i * k..(i + 1) * k]
    }

    pub fn push(&mut self, patch: &[u8], features: &[F]) -> Result<()> {
        if patch.len() != self.patch_len() || features.len() != self.kernel_count {
            return Err(Error::Length(format!(
                "entry has {} pixels / {} features, template expects {} / {}",
                patch.len(),
                features.len(),
                self.patch_len(),
                self.kernel_count
            )));
        }
        self.patches.extend_from_slice(patch);
        self.features.extend_from_slice(features);
        Ok(())
    }

    /// Recomputes the per-kernel normalization statistics. A kernel whose
    /// powers never vary gets a standard deviation of 1.
    pub fn finalize(&mut self) {
        let n = self.len();
        for k in 0..self.kernel_count {
            let vals = (0..n).map(|i| self.features[i * self.kernel_count + k].as_f64());
            let mean = if n == 0 { 0.0 } else { vals.clone().sum::<f64>() / n as f64 };
            let var = if n == 0 {
                0.0
            } else {
                vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
            };
            self.mean[k] = mean;
            self.std[k] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
    }
}

/// Kernel-index partition and search radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub groups: Vec<Vec<usize>>,
    /// Search radius; in standard-deviation units when `normalize` is set.
    pub delta: f64,
    /// Z-normalize powers per kernel before measuring distances.
    pub normalize: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self::contiguous(9, 3, 1.0)
    }
}

impl GroupingConfig {
    /// Consecutive blocks of `group_size` kernels; a short final block is
    /// dropped.
    pub fn contiguous(kernel_count: usize, group_size: usize, delta: f64) -> Self {
        let groups = (0..kernel_count / group_size.max(1))
            .map(|g| (g * group_size..(g + 1) * group_size).collect())
            .collect();
        Self {
            groups,
            delta,
            normalize: true,
        }
    }

    pub fn validate(&self, kernel_count: usize) -> Result<()> {
        if self.groups.is_empty() || self.groups.iter().any(|g| g.is_empty()) {
            return Err(Error::Config("empty kernel group".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("delta {} must be positive", self.delta)));
        }
        let mut seen = vec![false; kernel_count];
        for &k in self.groups.iter().flatten() {
            if k >= kernel_count {
                return Err(Error::Config(format!(
                    "kernel index {k} outside 0..{kernel_count}"
                )));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::Config(format!("kernel {k} appears in two groups")));
            }
        }
        Ok(())
    }
}

fn normalized<F: Scalar>(t: &PowerTemplate<F>, v: &[F], normalize: bool) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(k, x)| {
            if normalize {
                (x.as_f64() - t.mean[k]) / t.std[k]
            } else {
                x.as_f64()
            }
        })
        .collect()
}

fn group_distance(a: &[f64], b: &[f64], group: &[usize]) -> f64 {
    group.iter().map(|&k| (a[k] - b[k]).abs()).sum()
}

/// Distinct patches of a template, numbered in order of first appearance.
#[derive(Debug, Clone, Default)]
pub struct PatchBook {
    patch_len: usize,
    patches: Vec<u8>,
    ids: HashMap<Vec<u8>, u32>,
}

impl PatchBook {
    pub fn new(patch_len: usize) -> Self {
        Self {
            patch_len,
            ..Self::default()
        }
    }

    pub fn insert(&mut self, patch: &[u8]) -> u32 {
        if let Some(&id) = self.ids.get(patch) {
            return id;
        }
        let id = self.len() as u32;
        self.patches.extend_from_slice(patch);
        self.ids.insert(patch.to_vec(), id);
        id
    }

    pub fn id(&self, patch: &[u8]) -> Option<u32> {
        self.ids.get(patch).copied()
    }

    pub fn get(&self, id: u32) -> &[u8] {
        let i = id as usize * self.patch_len;
        &self.patches[i..i + self.patch_len]
    }

    pub fn len(&self) -> usize {
        if self.patch_len == 0 {
            0
        } else {
            self.patches.len() / self.patch_len
        }
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Candidate patches for one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Index into the schedule's valid cycles.
    pub cycle: usize,
    /// Pixel indices of the related region, aligned with patch positions.
    pub region: Vec<Option<u32>>,
    pub candidates: Vec<Vec<u8>>,
    /// Distinct patches found by each group before intersecting.
    pub group_sizes: Vec<usize>,
}

struct PatchBox {
    patch: u32,
    lo: Vec<f64>,
    hi: Vec<f64>,
    entries: Vec<u32>,
}

struct Cell {
    lo: Vec<f64>,
    hi: Vec<f64>,
    boxes: Vec<PatchBox>,
}

struct GroupGrid {
    dims: Vec<usize>,
    cells: Vec<Cell>,
    keys: HashMap<Vec<i64>, usize>,
}

fn box_min_dist(q: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    q.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&x, (&l, &h))| (l - x).max(x - h).max(0.0))
        .sum()
}

fn box_max_dist(q: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    q.iter()
        .zip(lo.iter().zip(hi))
        .map(|(&x, (&l, &h))| (x - l).abs().max((h - x).abs()))
        .sum()
}

impl GroupGrid {
    fn build(dims: &[usize], z: &[f64], kc: usize, entry_patch: &[u32], cell: f64) -> Self {
        let n = entry_patch.len();
        let mut keys: HashMap<Vec<i64>, usize> = HashMap::new();
        let mut members: Vec<Vec<u32>> = Vec::new();
        for e in 0..n {
            let key: Vec<i64> = dims
                .iter()
                .map(|&k| (z[e * kc + k] / cell).floor() as i64)
                .collect();
            let idx = *keys.entry(key).or_insert_with(|| {
                members.push(Vec::new());
                members.len() - 1
            });
            members[idx].push(e as u32);
        }
        let m = dims.len();
        let cells = members
            .into_iter()
            .map(|list| {
                let mut by_patch: HashMap<u32, usize> = HashMap::new();
                let mut boxes: Vec<PatchBox> = Vec::new();
                for e in list {
                    let p = entry_patch[e as usize];
                    let bi = *by_patch.entry(p).or_insert_with(|| {
                        boxes.push(PatchBox {
                            patch: p,
                            lo: vec![f64::INFINITY; m],
                            hi: vec![f64::NEG_INFINITY; m],
                            entries: Vec::new(),
                        });
                        boxes.len() - 1
                    });
                    let b = &mut boxes[bi];
                    for (d, &k) in dims.iter().enumerate() {
                        let v = z[e as usize * kc + k];
                        b.lo[d] = b.lo[d].min(v);
                        b.hi[d] = b.hi[d].max(v);
                    }
                    b.entries.push(e);
                }
                let mut lo = vec![f64::INFINITY; m];
                let mut hi = vec![f64::NEG_INFINITY; m];
                for b in &boxes {
                    for d in 0..m {
                        lo[d] = lo[d].min(b.lo[d]);
                        hi[d] = hi[d].max(b.hi[d]);
                    }
                }
                Cell { lo, hi, boxes }
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            cells,
            keys,
        }
    }

    /// Cells that may intersect the ball, either by enumerating neighbouring
    /// keys or, when that would cost more, by listing every cell.
    fn nearby_cells(&self, q: &[f64], delta: f64, cell: f64) -> Vec<usize> {
        if delta.is_finite() && cell.is_finite() {
            let ranges: Vec<(i64, i64)> = q
                .iter()
                .map(|&x| (((x - delta) / cell).floor() as i64, ((x + delta) / cell).floor() as i64))
                .collect();
            let combos = ranges
                .iter()
                .try_fold(1usize, |acc, (a, b)| acc.checked_mul((b - a + 1) as usize));
            if let Some(c) = combos.filter(|&c| c <= self.cells.len()) {
                let mut out = Vec::new();
                let mut key: Vec<i64> = ranges.iter().map(|r| r.0).collect();
                for _ in 0..c {
                    if let Some(&i) = self.keys.get(&key) {
                        out.push(i);
                    }
                    for d in 0..key.len() {
                        if key[d] < ranges[d].1 {
                            key[d] += 1;
                            break;
                        }
                        key[d] = ranges[d].0;
                    }
                }
                return out;
            }
        }
        (0..self.cells.len()).collect()
    }
}

/// Reusable per-thread marking buffers.
#[derive(Clone)]
struct Scratch {
    mark: Vec<u32>,
    stamp: u32,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Self {
            mark: vec![0; n],
            stamp: 0,
        }
    }

    fn next(&mut self) -> u32 {
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.mark.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
        self.stamp
    }
}

/// Spatial index over a template for one grouping and radius.
pub struct CandidateIndex<'a, F> {
    template: &'a PowerTemplate<F>,
    book: PatchBook,
    z: Vec<f64>,
    grouping: GroupingConfig,
    grids: Vec<GroupGrid>,
    cell: f64,
}

impl<'a, F: Scalar> CandidateIndex<'a, F> {
    pub fn new(template: &'a PowerTemplate<F>, grouping: &GroupingConfig) -> Result<Self> {
        grouping.validate(template.kernel_count)?;
        if template.is_empty() {
            return Err(Error::EmptyInput("empty power template".into()));
        }
        let kc = template.kernel_count;
        let n = template.len();
        let mut book = PatchBook::new(template.patch_len());
        let entry_patch: Vec<u32> = (0..n).map(|i| book.insert(template.patch(i))).collect();
        let mut z = Vec::with_capacity(n * kc);
        for i in 0..n {
            z.extend(normalized(template, template.features(i), grouping.normalize));
        }
        let cell = grouping.delta;
        let grid_cell = if cell.is_finite() { cell } else { f64::MAX };
        let grids = grouping
            .groups
            .iter()
            .map(|g| GroupGrid::build(g, &z, kc, &entry_patch, grid_cell))
            .collect();
        Ok(Self {
            template,
            book,
            z,
            grouping: grouping.clone(),
            grids,
            cell,
        })
    }

    pub fn book(&self) -> &PatchBook {
        &self.book
    }

    fn group_hits(&self, g: usize, q: &[f64], scratch: &mut Scratch, out: &mut Vec<u32>) {
        let grid = &self.grids[g];
        let kc = self.template.kernel_count;
        let delta = self.grouping.delta;
        let qg: Vec<f64> = grid.dims.iter().map(|&k| q[k]).collect();
        let stamp = scratch.next();
        for ci in grid.nearby_cells(&qg, delta, self.cell) {
            let cell = &grid.cells[ci];
            if box_min_dist(&qg, &cell.lo, &cell.hi) >= delta {
                continue;
            }
            for b in &cell.boxes {
                if scratch.mark[b.patch as usize] == stamp
                    || box_min_dist(&qg, &b.lo, &b.hi) >= delta
                {
                    continue;
                }
                let hit = box_max_dist(&qg, &b.lo, &b.hi) < delta
                    || b.entries.iter().any(|&e| {
                        let row = &self.z[e as usize * kc..(e as usize + 1) * kc];
                        group_distance(row, q, &grid.dims) < delta
                    });
                if hit {
                    scratch.mark[b.patch as usize] = stamp;
                    out.push(b.patch);
                }
            }
        }
    }

    fn query_ids(&self, rho: &[F], scratch: &mut Scratch) -> Result<(Vec<u32>, Vec<usize>)> {
        if rho.len() != self.template.kernel_count {
            return Err(Error::Length(format!(
                "feature vector of length {}, template has {} kernels",
                rho.len(),
                self.template.kernel_count
            )));
        }
        let q = normalized(self.template, rho, self.grouping.normalize);
        let mut sizes = Vec::with_capacity(self.grids.len());
        let mut current: Vec<u32> = Vec::new();
        let mut hits = Vec::new();
        for g in 0..self.grids.len() {
            hits.clear();
            self.group_hits(g, &q, scratch, &mut hits);
            sizes.push(hits.len());
            if g == 0 {
                current = hits.clone();
            } else {
                // marks of this group's hits are still current
                let stamp = scratch.stamp;
                current.retain(|&p| scratch.mark[p as usize] == stamp);
            }
        }
        current.sort_unstable();
        Ok((current, sizes))
    }

    /// Patches whose stored features are within `δ` of `rho` in every group.
    pub fn query(&self, rho: &[F]) -> Result<(Vec<Vec<u8>>, Vec<usize>)> {
        let mut scratch = Scratch::new(self.book.len());
        let (ids, sizes) = self.query_ids(rho, &mut scratch)?;
        Ok((ids.iter().map(|&i| self.book.get(i).to_vec()).collect(), sizes))
    }

    /// Candidate sets for every valid cycle of a schedule, given each
    /// cycle's feature vector (same order as `schedule.cycles`).
    pub fn candidates_for(
        &self,
        schedule: &CycleSchedule,
        features: &[Vec<F>],
    ) -> Result<Vec<CandidateSet>> {
        if features.len() != schedule.cycles.len() {
            return Err(Error::Length(format!(
                "{} feature vectors for {} valid cycles",
                features.len(),
                schedule.cycles.len()
            )));
        }
        let n = self.book.len();
        schedule
            .cycles
            .par_iter()
            .zip(features.par_iter())
            .enumerate()
            .map_init(
                || Scratch::new(n),
                |scratch, (i, (c, rho))| {
                    let (ids, group_sizes) = self.query_ids(rho, scratch)?;
                    Ok(CandidateSet {
                        cycle: i,
                        region: c.related.clone(),
                        candidates: ids.iter().map(|&p| self.book.get(p).to_vec()).collect(),
                        group_sizes,
                    })
                },
            )
            .collect()
    }
}

/// Exhaustive version of [`CandidateIndex::query`]: scans every entry for
/// every group. Result is sorted by first appearance in the template.
pub fn generate_candidates<F: Scalar>(
    rho: &[F],
    template: &PowerTemplate<F>,
    grouping: &GroupingConfig,
) -> Result<Vec<Vec<u8>>> {
    grouping.validate(template.kernel_count)?;
    if rho.len() != template.kernel_count {
        return Err(Error::Length("feature vector length mismatch".into()));
    }
    let q = normalized(template, rho, grouping.normalize);
    let mut book = PatchBook::new(template.patch_len());
    let mut found: Vec<Vec<bool>> = vec![Vec::new(); grouping.groups.len()];
    for i in 0..template.len() {
        let id = book.insert(template.patch(i)) as usize;
        let z = normalized(template, template.features(i), grouping.normalize);
        for (g, group) in grouping.groups.iter().enumerate() {
            if found[g].len() <= id {
                found[g].resize(id + 1, false);
            }
            if group_distance(&z, &q, group) < grouping.delta {
                found[g][id] = true;
            }
        }
    }
    Ok((0..book.len())
        .filter(|&id| found.iter().all(|f| f.get(id).copied().unwrap_or(false)))
        .map(|id| book.get(id as u32).to_vec())
        .collect())
}

/// Builds a template by running the attacker's measurement pipeline on
/// profiling images. Image `i` is observed with seed
/// `derive(base_seed, [IMAGES, i])`.
pub fn build_template<F: Scalar>(
    images: &[Image],
    kernels: &[Kernel],
    setup: &Setup,
    base_seed: u64,
) -> Result<PowerTemplate<F>> {
    if images.is_empty() {
        return Err(Error::EmptyInput("no profiling images".into()));
    }
    if let Scheduling::Random { .. } = setup.accel.scheduling {
        return Err(Error::TemplateBuild(
            "random scheduling is enabled; per-kernel powers of a cycle do not belong to the \
             same pixels, so no coherent feature vectors exist"
                .into(),
        ));
    }
    let k = kernels
        .first()
        .ok_or_else(|| Error::Config("no kernels given".into()))?
        .size;
    let observed: Vec<(Vec<Vec<u8>>, Vec<Vec<F>>)> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let obs = observe::<F>(
                img,
                kernels,
                setup,
                seed::derive(base_seed, &[seed::stage::IMAGES, i as u64]),
            )?;
            let patches = obs
                .schedule
                .cycles
                .iter()
                .map(|c| obs.schedule.patch(c, img))
                .collect();
            Ok((patches, obs.features()))
        })
        .collect::<Result<_>>()?;
    let mut t = PowerTemplate::new(k, kernels.len());
    for (patches, feats) in observed {
        for (p, f) in patches.iter().zip(&feats) {
            t.push(p, f)?;
        }
    }
    t.finalize();
    Ok(t)
}

/// Per-cycle candidate choice of a reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    /// For each candidate set, the chosen candidate; `None` for empty sets.
    pub choices: Vec<Option<usize>>,
    /// Summed per-pixel population variance of the chosen candidates.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructConfig {
    pub max_restarts: usize,
    /// Re-selection sweeps applied to the winning assembly; 0 keeps the
    /// greedy result as is.
    pub refine_passes: usize,
    pub seed: u64,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            max_restarts: 64,
            refine_passes: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub image: Image,
    pub selector: Selector,
    pub restarts: usize,
    pub empty_sets: usize,
    /// Pixels no selected candidate covered, filled from neighbours.
    pub interpolated: usize,
}

fn check_sets(sets: &[CandidateSet], w: usize, h: usize) -> Result<()> {
    if sets.iter().all(|s| s.candidates.is_empty()) {
        return Err(Error::Reconstruction("every candidate set is empty".into()));
    }
    for s in sets {
        if s.region.iter().flatten().any(|&p| p as usize >= w * h) {
            return Err(Error::Dimension(format!(
                "cycle {} region exceeds a {w}x{h} image",
                s.cycle
            )));
        }
        if s.candidates.iter().any(|c| c.len() != s.region.len()) {
            return Err(Error::Length(format!(
                "cycle {} candidate length differs from its region",
                s.cycle
            )));
        }
    }
    Ok(())
}

/// Population variance from integer moments.
fn variance_term(n: u64, s1: u64, s2: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    (n * s2 - s1 * s1) as f64 / (n * n) as f64
}

/// Rounded means where `n > 0`; holes filled by repeatedly averaging known
/// 8-neighbours. Returns the image and the number of filled pixels.
fn finish_image(w: usize, h: usize, n: &[u64], s1: &[u64]) -> (Image, usize) {
    let mut val: Vec<Option<u8>> = n
        .iter()
        .zip(s1)
        .map(|(&n, &s)| (n > 0).then(|| ((2 * s + n) / (2 * n)) as u8))
        .collect();
    let mut filled = 0;
    loop {
        let snapshot = val.clone();
        let mut progress = false;
        for y in 0..h {
            for x in 0..w {
                if snapshot[y * w + x].is_some() {
                    continue;
                }
                let (mut sum, mut cnt) = (0u64, 0u64);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        if let Some(v) = snapshot[ny as usize * w + nx as usize] {
                            sum += v as u64;
                            cnt += 1;
                        }
                    }
                }
                if cnt > 0 {
                    val[y * w + x] = Some(((2 * sum + cnt) / (2 * cnt)) as u8);
                    filled += 1;
                    progress = true;
                }
            }
        }
        if !progress {
            break;
        }
    }
    let pixels = val.into_iter().map(|v| v.unwrap_or(0)).collect();
    (Image::new(w, h, pixels).expect("dimensions checked"), filled)
}

/// Summed per-pixel population variance of the values the selected
/// candidates assign to each pixel.
pub fn selection_objective(sets: &[CandidateSet], choices: &[Option<usize>], w: usize, h: usize) -> f64 {
    let mut n = vec![0u64; w * h];
    let mut s1 = vec![0u64; w * h];
    let mut s2 = vec![0u64; w * h];
    for (s, c) in sets.iter().zip(choices) {
        if let Some(c) = c {
            for (r, &v) in s.region.iter().zip(&s.candidates[*c]) {
                if let Some(p) = r {
                    let p = *p as usize;
                    n[p] += 1;
                    s1[p] += v as u64;
                    s2[p] += (v as u64) * (v as u64);
                }
            }
        }
    }
    (0..w * h).map(|p| variance_term(n[p], s1[p], s2[p])).sum()
}

struct Greedy<'s> {
    sets: &'s [CandidateSet],
    cover: Vec<Vec<u32>>,
    w: usize,
    h: usize,
}

struct GreedyRun {
    choices: Vec<Option<usize>>,
    n: Vec<u64>,
    s1: Vec<u64>,
    s2: Vec<u64>,
}

impl<'s> Greedy<'s> {
    fn new(sets: &'s [CandidateSet], w: usize, h: usize) -> Self {
        let mut cover = vec![Vec::new(); w * h];
        for (t, s) in sets.iter().enumerate() {
            if !s.candidates.is_empty() {
                for &p in s.region.iter().flatten() {
                    cover[p as usize].push(t as u32);
                }
            }
        }
        Self { sets, cover, w, h }
    }

    fn run(&self, start: usize, first: usize) -> GreedyRun {
        let np = self.w * self.h;
        let t_count = self.sets.len();
        let mut run = GreedyRun {
            choices: vec![None; t_count],
            n: vec![0; np],
            s1: vec![0; np],
            s2: vec![0; np],
        };
        let mut overlap = vec![0usize; t_count];
        let mut done: Vec<bool> = self.sets.iter().map(|s| s.candidates.is_empty()).collect();
        let mut remaining = done.iter().filter(|d| !**d).count();
        let mut current = Some((start, first));
        while let Some((t, c)) = current {
            done[t] = true;
            remaining -= 1;
            run.choices[t] = Some(c);
            let s = &self.sets[t];
            for (r, &v) in s.region.iter().zip(&s.candidates[c]) {
                let Some(p) = r else { continue };
                let p = *p as usize;
                if run.n[p] == 0 {
                    for &o in &self.cover[p] {
                        overlap[o as usize] += 1;
                    }
                }
                run.n[p] += 1;
                run.s1[p] += v as u64;
                run.s2[p] += (v as u64) * (v as u64);
            }
            if remaining == 0 {
                break;
            }
            // largest overlap, then lowest index
            let mut next = None;
            let mut best = 0usize;
            for (o, (&ov, &d)) in overlap.iter().zip(&done).enumerate() {
                if !d && (next.is_none() || ov > best) {
                    next = Some(o);
                    best = ov;
                }
            }
            current = next.map(|t| (t, self.min_discrepancy(t, &run)));
        }
        run
    }

    /// Lets every cycle switch to the candidate that lowers the variance
    /// sum the most given all other choices; repeats until nothing changes
    /// or `passes` sweeps are done.
    fn refine(&self, run: &mut GreedyRun, passes: usize) {
        for _ in 0..passes {
            let mut changed = false;
            for (t, s) in self.sets.iter().enumerate() {
                let Some(cur) = run.choices[t] else { continue };
                let pix: Vec<(usize, usize)> = s
                    .region
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| r.map(|p| (i, p as usize)))
                    .collect();
                for &(i, p) in &pix {
                    let v = s.candidates[cur][i] as u64;
                    run.n[p] -= 1;
                    run.s1[p] -= v;
                    run.s2[p] -= v * v;
                }
                // exact objective over the distinct pixels this cycle touches
                let mut uniq: Vec<usize> = pix.iter().map(|&(_, p)| p).collect();
                uniq.sort_unstable();
                uniq.dedup();
                let slot: Vec<usize> = pix
                    .iter()
                    .map(|&(_, p)| uniq.binary_search(&p).expect("pixel listed"))
                    .collect();
                let mut add = vec![(0u64, 0u64, 0u64); uniq.len()];
                let mut cost = |c: &[u8]| -> f64 {
                    add.iter_mut().for_each(|a| *a = (0, 0, 0));
                    for (&(i, _), &u) in pix.iter().zip(&slot) {
                        let v = c[i] as u64;
                        add[u].0 += 1;
                        add[u].1 += v;
                        add[u].2 += v * v;
                    }
                    uniq.iter()
                        .zip(&add)
                        .map(|(&p, a)| variance_term(run.n[p] + a.0, run.s1[p] + a.1, run.s2[p] + a.2))
                        .sum()
                };
                let mut best = (cost(&s.candidates[cur]), cur);
                for (ci, c) in s.candidates.iter().enumerate() {
                    let d = cost(c);
                    if d < best.0 {
                        best = (d, ci);
                    }
                }
                if best.1 != cur {
                    run.choices[t] = Some(best.1);
                    changed = true;
                }
                for &(i, p) in &pix {
                    let v = s.candidates[best.1][i] as u64;
                    run.n[p] += 1;
                    run.s1[p] += v;
                    run.s2[p] += v * v;
                }
            }
            if !changed {
                break;
            }
        }
    }

    fn min_discrepancy(&self, t: usize, run: &GreedyRun) -> usize {
        let s = &self.sets[t];
        let known: Vec<(usize, f64)> = s
            .region
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let p = (*r)? as usize;
                (run.n[p] > 0).then(|| (i, run.s1[p] as f64 / run.n[p] as f64))
            })
            .collect();
        let mut best = (f64::INFINITY, 0);
        for (ci, cand) in s.candidates.iter().enumerate() {
            let mut d = 0.0;
            for &(i, m) in &known {
                d += (cand[i] as f64 - m).powi(2);
                if d >= best.0 {
                    break;
                }
            }
            if d < best.0 {
                best = (d, ci);
            }
        }
        best.1
    }
}

/// Greedy variance-minimizing reconstruction.
///
/// A random non-empty set seeds up to `max_restarts` assemblies, one per
/// sampled candidate. Each assembly repeatedly takes the unprocessed cycle
/// overlapping the most decided pixels and the candidate closest to the
/// current pixel means there. The assembly with the smallest summed
/// variance wins and is then polished by re-selection sweeps that only
/// accept strict decreases of that sum. Pixels take the rounded mean of
/// the chosen candidates.
pub fn reconstruct(
    sets: &[CandidateSet],
    (w, h): (usize, usize),
    cfg: &ReconstructConfig,
) -> Result<Reconstruction> {
    check_sets(sets, w, h)?;
    if cfg.max_restarts == 0 {
        return Err(Error::Config("max_restarts must be at least 1".into()));
    }
    let mut rng = seed::rng(cfg.seed);
    let nonempty: Vec<usize> = (0..sets.len())
        .filter(|&t| !sets[t].candidates.is_empty())
        .collect();
    let start = nonempty[rng.random_range(0..nonempty.len())];
    let count = sets[start].candidates.len();
    let firsts: Vec<usize> = if count <= cfg.max_restarts {
        (0..count).collect()
    } else {
        let mut v = sample(&mut rng, count, cfg.max_restarts).into_vec();
        v.sort_unstable();
        v
    };
    let greedy = Greedy::new(sets, w, h);
    let best = firsts
        .par_iter()
        .enumerate()
        .map(|(order, &c)| {
            let run = greedy.run(start, c);
            let sigma: f64 = (0..w * h)
                .map(|p| variance_term(run.n[p], run.s1[p], run.s2[p]))
                .sum();
            (sigma, order, run)
        })
        .reduce_with(|a, b| if (b.0, b.1) < (a.0, a.1) { b } else { a })
        .expect("at least one restart");
    let (_, _, mut run) = best;
    greedy.refine(&mut run, cfg.refine_passes);
    let sigma: f64 = (0..w * h)
        .map(|p| variance_term(run.n[p], run.s1[p], run.s2[p]))
        .sum();
    let (image, interpolated) = finish_image(w, h, &run.n, &run.s1);
    Ok(Reconstruction {
        image,
        selector: Selector {
            choices: run.choices,
            sigma,
        },
        restarts: firsts.len(),
        empty_sets: sets.len() - nonempty.len(),
        interpolated,
    })
}

/// Each pixel is the rounded mean of every candidate value proposed for it
/// by any covering cycle.
pub fn average_baseline(sets: &[CandidateSet], (w, h): (usize, usize)) -> Result<Image> {
    check_sets(sets, w, h)?;
    let mut n = vec![0u64; w * h];
    let mut s1 = vec![0u64; w * h];
    for s in sets {
        for cand in &s.candidates {
            for (r, &v) in s.region.iter().zip(cand) {
                if let Some(p) = r {
                    n[*p as usize] += 1;
                    s1[*p as usize] += v as u64;
                }
            }
        }
    }
    Ok(finish_image(w, h, &n, &s1).0)
}

/// Candidate statistics of one radius over a set of attacked cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateStats {
    pub delta: f64,
    /// Mean distinct patches per group.
    pub mean_group_size: f64,
    /// Mean size of the intersected set.
    pub mean_intersection: f64,
    /// Fraction of cycles whose intersected set is empty.
    pub empty_fraction: f64,
    /// Mean, over cycles whose sets are non-empty at every radius of the
    /// sweep, of the smallest mean absolute pixel difference between a
    /// candidate and the true patch.
    pub mean_min_distance: f64,
}

fn patch_distance(a: &[u8], b: &[u8]) -> f64 {
    crate::metrics::l1_distance(a, b) as f64 / a.len() as f64
}

/// Table of candidate statistics for several radii. `truth[i]` is the
/// true patch of `queries[i]`.
pub fn candidate_statistics<F: Scalar>(
    template: &PowerTemplate<F>,
    groups: &[Vec<usize>],
    normalize: bool,
    deltas: &[f64],
    queries: &[Vec<F>],
    truth: &[Vec<u8>],
) -> Result<Vec<CandidateStats>> {
    if queries.len() != truth.len() || queries.is_empty() {
        return Err(Error::Length("queries and true patches must pair up".into()));
    }
    struct Row {
        group: f64,
        inter: Vec<usize>,
        dmin: Vec<Option<f64>>,
    }
    let rows: Vec<Row> = deltas
        .iter()
        .map(|&delta| {
            let g = GroupingConfig {
                groups: groups.to_vec(),
                delta,
                normalize,
            };
            let index = CandidateIndex::new(template, &g)?;
            let per: Vec<(f64, usize, Option<f64>)> = queries
                .par_iter()
                .zip(truth.par_iter())
                .map(|(q, t)| {
                    let (cands, sizes) = index.query(q)?;
                    let dmin = cands
                        .iter()
                        .map(|c| patch_distance(c, t))
                        .min_by(|a, b| a.partial_cmp(b).unwrap());
                    let gmean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
                    Ok((gmean, cands.len(), dmin))
                })
                .collect::<Result<_>>()?;
            Ok(Row {
                group: per.iter().map(|r| r.0).sum::<f64>() / per.len() as f64,
                inter: per.iter().map(|r| r.1).collect(),
                dmin: per.iter().map(|r| r.2).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let support: Vec<usize> = (0..queries.len())
        .filter(|&i| rows.iter().all(|r| r.dmin[i].is_some()))
        .collect();
    Ok(deltas
        .iter()
        .zip(&rows)
        .map(|(&delta, r)| {
            let n = r.inter.len() as f64;
            CandidateStats {
                delta,
                mean_group_size: r.group,
                mean_intersection: r.inter.iter().sum::<usize>() as f64 / n,
                empty_fraction: r.inter.iter().filter(|&&c| c == 0).count() as f64 / n,
                mean_min_distance: if support.is_empty() {
                    f64::NAN
                } else {
                    support.iter().map(|&i| r.dmin[i].unwrap()).sum::<f64>()
                        / support.len() as f64
                },
            }
        })
        .collect())
}
