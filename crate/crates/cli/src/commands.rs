use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use convleak::accel::{format_kernels, shared_schedule, CyclePowers};
use convleak::attack_bg::detect_background;
use convleak::formats::{read_powers, read_template, read_trace, write_powers, write_template, write_trace};
use convleak::imgio::{binarize_markers, load_idx, load_idx_labels, load_pgm, tile, write_pgm};
use convleak::metrics::{
    pixel_marker_accuracy, pixel_value_distance, EvalReport, ImageScore, KnnReference,
};
use convleak::pipeline::{correlation, measure_trace, noise_seed, recover, simulate_image, PowerSource};
use convleak::template::{average_baseline, build_template, reconstruct, CandidateIndex};
use convleak::{seed, CycleSchedule, Error, Image, Marker, Powers, ScheduledCycle, SilhouetteImage};

use crate::config::RunConfig;

pub type Outcome<T = ()> = anyhow::Result<T>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub kernel_count: usize,
    pub total_valid_cycles: usize,
    pub kernels: String,
    pub config: BTreeMap<String, String>,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    /// Position in the dataset.
    pub index: usize,
    pub label: Option<u8>,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub valid_cycles: usize,
    pub total_cycles: usize,
    pub runs: Vec<RunEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub kernel: usize,
    pub stem: String,
    pub schedule: String,
    pub trace: String,
    pub truth: String,
    pub noise_seed: u64,
    pub noise_sigma: f64,
}

#[derive(Serialize, Deserialize)]
struct ScheduleHeader {
    width: usize,
    height: usize,
    kernel_size: usize,
    total_cycles: usize,
}

fn stem(index: usize, k: usize) -> String {
    format!("img{index:05}_k{k}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_schedule(s: &CycleSchedule, path: &Path) -> Outcome {
    let mut out = Vec::new();
    let header = ScheduleHeader {
        width: s.width,
        height: s.height,
        kernel_size: s.kernel_size,
        total_cycles: s.total_cycles,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for c in &s.cycles {
        serde_json::to_writer(&mut out, c)?;
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn read_schedule(path: &Path) -> Outcome<CycleSchedule> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(f).lines();
    let bad = |n: usize, e: &dyn std::fmt::Display| {
        Error::Format(format!("{} line {n}: {e}", path.display()))
    };
    let first = lines
        .next()
        .ok_or_else(|| bad(1, &"empty schedule"))?
        .with_context(|| format!("reading {}", path.display()))?;
    let h: ScheduleHeader = serde_json::from_str(&first).map_err(|e| bad(1, &e))?;
    let mut cycles = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: ScheduledCycle = serde_json::from_str(&line).map_err(|e| bad(n + 2, &e))?;
        cycles.push(c);
    }
    Ok(CycleSchedule {
        width: h.width,
        height: h.height,
        kernel_size: h.kernel_size,
        total_cycles: h.total_cycles,
        cycles,
    })
}

pub fn read_manifest(cfg: &RunConfig) -> Outcome<Manifest> {
    let path = cfg.out_dir.join("manifest.json");
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run `simulate` first)", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}

fn dataset_range(cfg: &RunConfig, offset: usize, count: usize) -> Outcome<Vec<Image>> {
    let all = load_idx(&cfg.images)?;
    if offset + count > all.len() {
        return Err(Error::Config(format!(
            "images {offset}..{} requested but {} holds {}",
            offset + count,
            cfg.images.display(),
            all.len()
        ))
        .into());
    }
    Ok(all[offset..offset + count].to_vec())
}

fn labels(cfg: &RunConfig) -> Option<Vec<u8>> {
    let path = cfg.labels.as_ref()?;
    match load_idx_labels(path) {
        Ok(l) => Some(l),
        Err(e) => {
            warn!("golden labels unavailable ({e}); label-based metrics are skipped");
            None
        }
    }
}

fn golden(cfg: &RunConfig, m: &Manifest) -> Outcome<Vec<Image>> {
    let all = load_idx(&cfg.images)?;
    m.images
        .iter()
        .map(|e| {
            all.get(e.index).cloned().ok_or_else(|| {
                Error::Length(format!("dataset has no image {}", e.index)).into()
            })
        })
        .collect()
}

pub fn simulate(cfg: &RunConfig) -> Outcome {
    let setup = cfg.setup()?;
    let kernels = cfg.load_kernels()?;
    let images = dataset_range(cfg, cfg.image_offset, cfg.image_count)?;
    let labels = labels(cfg);
    let out = &cfg.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("kernels.txt"), format_kernels(&kernels).as_bytes())?;
    write_file(&out.join("config.txt"), cfg.to_text().as_bytes())?;

    let entries: Vec<ImageEntry> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| -> Outcome<ImageEntry> {
            let index = cfg.image_offset + i;
            let image_seed = seed::derive(cfg.seed, &[seed::stage::IMAGES, index as u64]);
            let runs = simulate_image::<f64>(img, &kernels, &setup, image_seed)?;
            let shared = shared_schedule(&runs).is_some();
            let mut entries = Vec::new();
            for (k, run) in runs.iter().enumerate() {
                let stem = stem(index, k);
                let schedule = if shared {
                    format!("schedules/img{index:05}.jsonl")
                } else {
                    format!("schedules/{stem}.jsonl")
                };
                if !shared || k == 0 {
                    write_schedule(&run.schedule, &out.join(&schedule))?;
                }
                let ns = noise_seed(image_seed, k);
                let (trace, sigma) = measure_trace(&run.powers, &setup, ns)?;
                let trace_rel = format!("traces/{stem}.ptrc");
                let truth_rel = format!("truth/{stem}.pcyc");
                fs::create_dir_all(out.join("traces"))?;
                fs::create_dir_all(out.join("truth"))?;
                write_trace(&trace, out.join(&trace_rel))?;
                write_powers(&run.powers, out.join(&truth_rel))?;
                entries.push(RunEntry {
                    kernel: k,
                    stem,
                    schedule,
                    trace: trace_rel,
                    truth: truth_rel,
                    noise_seed: ns,
                    noise_sigma: sigma,
                });
            }
            Ok(ImageEntry {
                index,
                label: labels.as_ref().and_then(|l| l.get(index).copied()),
                seed: image_seed,
                width: img.width,
                height: img.height,
                valid_cycles: runs[0].schedule.valid_count(),
                total_cycles: runs[0].schedule.total_cycles,
                runs: entries,
            })
        })
        .collect::<Outcome<_>>()?;

    let manifest = Manifest {
        seed: cfg.seed,
        kernel_count: kernels.len(),
        total_valid_cycles: entries.iter().map(|e| e.valid_cycles).sum(),
        kernels: "kernels.txt".into(),
        config: cfg
            .pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        images: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_file(&out.join("manifest.json"), text.as_bytes())?;
    info!(
        "simulated {} images x {} kernels, {} valid cycles",
        manifest.images.len(),
        manifest.kernel_count,
        manifest.total_valid_cycles
    );
    Ok(())
}

fn kernel_of(stem: &str) -> usize {
    stem.rsplit_once("_k")
        .and_then(|(_, k)| k.parse().ok())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractRow {
    pub trace: String,
    pub cycles: usize,
    pub low_confidence: usize,
    pub truth_correlation: Option<f64>,
}

/// Extracts every given trace, or every trace in the manifest when `traces`
/// is empty. Results go to `<out_dir>/extracted/<stem>.pcyc`.
pub fn extract(cfg: &RunConfig, traces: &[PathBuf]) -> Outcome<Vec<ExtractRow>> {
    let setup = cfg.setup()?;
    let traces: Vec<PathBuf> = if traces.is_empty() {
        read_manifest(cfg)?
            .images
            .iter()
            .flat_map(|e| e.runs.iter().map(|r| cfg.out_dir.join(&r.trace)))
            .collect()
    } else {
        traces.to_vec()
    };
    let dir = cfg.out_dir.join("extracted");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows: Vec<ExtractRow> = traces
        .par_iter()
        .map(|path| -> Outcome<ExtractRow> {
            let trace = read_trace::<f64>(path)?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| anyhow!("bad trace file name {}", path.display()))?
                .to_string();
            let cycles = trace.cycles.saturating_sub(cfg.trailing_cycles);
            let (values, low) = recover(&trace, &setup, cycles)
                .map_err(|e| anyhow::Error::from(e).context(format!("extracting {}", path.display())))?;
            let powers = CyclePowers {
                values,
                kernel: kernel_of(&stem),
            };
            write_powers(&powers, dir.join(format!("{stem}.pcyc")))?;
            let truth_path = cfg.out_dir.join("truth").join(format!("{stem}.pcyc"));
            let truth_correlation = if truth_path.exists() {
                let t = read_powers::<f64>(&truth_path)?;
                Some(correlation(&powers.values, &t.values))
            } else {
                None
            };
            Ok(ExtractRow {
                trace: path.display().to_string(),
                cycles,
                low_confidence: low,
                truth_correlation,
            })
        })
        .collect::<Outcome<_>>()?;
    let mut csv = String::from("trace,cycles,low_confidence,truth_correlation\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.trace,
            r.cycles,
            r.low_confidence,
            r.truth_correlation.map_or(String::new(), |c| format!("{c:.6}"))
        ));
    }
    write_file(&cfg.out_dir.join("extract_report.csv"), csv.as_bytes())?;
    info!("extracted {} traces", rows.len());
    Ok(rows)
}

fn attack_powers(cfg: &RunConfig, run: &RunEntry) -> Outcome<Powers> {
    let path = match cfg.setup()?.source {
        PowerSource::Direct => cfg.out_dir.join(&run.truth),
        PowerSource::Measured => cfg.out_dir.join("extracted").join(format!("{}.pcyc", run.stem)),
    };
    if !path.exists() {
        return Err(anyhow!(
            "{} is missing (run `extract` first or set power_source = direct)",
            path.display()
        ));
    }
    Ok(read_powers(&path)?)
}

fn silhouette_from(img: &Image) -> SilhouetteImage {
    SilhouetteImage {
        width: img.width,
        height: img.height,
        markers: img
            .pixels
            .iter()
            .map(|&v| if v > 0 { Marker::Foreground } else { Marker::Background })
            .collect(),
    }
}

pub fn attack_bg(cfg: &RunConfig) -> Outcome {
    let m = read_manifest(cfg)?;
    let golden = golden(cfg, &m).ok();
    let dir = cfg.out_dir.join("bg");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let rows: Vec<String> = m
        .images
        .par_iter()
        .enumerate()
        .map(|(i, e)| -> Outcome<String> {
            let run = e.runs.get(cfg.bg_kernel).ok_or_else(|| {
                Error::Config(format!("bg_kernel {} outside 0..{}", cfg.bg_kernel, e.runs.len()))
            })?;
            let schedule = read_schedule(&cfg.out_dir.join(&run.schedule))?;
            let p = attack_powers(cfg, run)?;
            let r = detect_background(&p, &schedule, cfg.bin_size, cfg.border())
                .map_err(|err| anyhow::Error::from(err).context(format!("image {}", e.index)))?;
            write_pgm(&binarize_markers(&r.silhouette), dir.join(format!("img{:05}.pgm", e.index)))?;
            let mut hist = String::from("lower_edge,count\n");
            for (b, c) in r.histogram.counts.iter().enumerate() {
                hist.push_str(&format!("{:.6},{c}\n", r.histogram.edge(b)));
            }
            write_file(&dir.join(format!("img{:05}_hist.csv", e.index)), hist.as_bytes())?;
            let acc = match &golden {
                Some(g) => format!("{:.6}", pixel_marker_accuracy(&r.silhouette, &g[i])?),
                None => String::new(),
            };
            Ok(format!(
                "{},{},{:.6},{},{}\n",
                e.index,
                cfg.bg_kernel,
                r.threshold.power,
                r.silhouette.foreground_count(),
                acc
            ))
        })
        .collect::<Outcome<_>>()?;
    let mut csv = String::from("image,kernel,threshold,foreground_pixels,pixel_accuracy\n");
    csv.extend(rows);
    write_file(&cfg.out_dir.join("bg_report.csv"), csv.as_bytes())?;
    info!("background detection done for {} images", m.images.len());
    Ok(())
}

pub fn build_template_cmd(cfg: &RunConfig) -> Outcome {
    let setup = cfg.setup()?;
    let kernels = cfg.load_kernels()?;
    let images = dataset_range(cfg, cfg.profile_offset, cfg.profile_count)?;
    let base = seed::derive(cfg.seed, &[seed::stage::PROFILE]);
    let t = build_template::<f64>(&images, &kernels, &setup, base)?;
    let path = cfg.template_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_template(&t, &path)?;
    info!("template with {} entries written to {}", t.len(), path.display());
    Ok(())
}

pub fn attack_template(cfg: &RunConfig) -> Outcome {
    let m = read_manifest(cfg)?;
    let t = read_template::<f64>(cfg.template_path())?;
    if t.kernel_count != m.kernel_count {
        return Err(Error::Config(format!(
            "template profiles {} kernels, traces cover {}",
            t.kernel_count, m.kernel_count
        ))
        .into());
    }
    let index = CandidateIndex::new(&t, &cfg.grouping())?;
    let golden = golden(cfg, &m).ok();
    let dir = cfg.out_dir.join("tpl");
    fs::create_dir_all(dir.join("candidates"))
        .with_context(|| format!("creating {}", dir.display()))?;
    let mut rows = Vec::new();
    for (i, e) in m.images.iter().enumerate() {
        let schedules: Vec<&String> = e.runs.iter().map(|r| &r.schedule).collect();
        if schedules.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::TemplateBuild(format!(
                "image {} was scheduled differently per kernel; cycles cannot be matched across kernels",
                e.index
            ))
            .into());
        }
        let schedule = read_schedule(&cfg.out_dir.join(schedules[0]))?;
        let powers: Vec<Powers> = e
            .runs
            .iter()
            .map(|r| attack_powers(cfg, r))
            .collect::<Outcome<_>>()?;
        let features: Vec<Vec<f64>> = schedule
            .cycles
            .iter()
            .map(|c| {
                powers
                    .iter()
                    .map(|p| p.values.get(c.cycle).copied().unwrap_or(0.0))
                    .collect()
            })
            .collect();
        let sets = index.candidates_for(&schedule, &features)?;
        let dims = (schedule.width, schedule.height);
        let mut rcfg = cfg.reconstruct();
        rcfg.seed = seed::derive(rcfg.seed, &[e.index as u64]);
        let rec = reconstruct(&sets, dims, &rcfg)?;
        let avg = average_baseline(&sets, dims)?;
        write_pgm(&rec.image, dir.join(format!("img{:05}_greedy.pgm", e.index)))?;
        write_pgm(&avg, dir.join(format!("img{:05}_avg.pgm", e.index)))?;
        let mut cand = String::from("cycle,x,y,group_sizes,candidates\n");
        for (s, c) in sets.iter().zip(&schedule.cycles) {
            let g: Vec<String> = s.group_sizes.iter().map(|v| v.to_string()).collect();
            cand.push_str(&format!(
                "{},{},{},{},{}\n",
                c.cycle,
                c.x,
                c.y,
                g.join(";"),
                s.candidates.len()
            ));
        }
        write_file(
            &dir.join("candidates").join(format!("img{:05}.csv", e.index)),
            cand.as_bytes(),
        )?;
        let mean_cand =
            sets.iter().map(|s| s.candidates.len()).sum::<usize>() as f64 / sets.len().max(1) as f64;
        let (d_greedy, d_avg) = match &golden {
            Some(g) => (
                format!("{:.6}", pixel_value_distance(&rec.image, &g[i])?),
                format!("{:.6}", pixel_value_distance(&avg, &g[i])?),
            ),
            None => (String::new(), String::new()),
        };
        rows.push(format!(
            "{},{},{:.3},{:.3},{},{},{},{}\n",
            e.index,
            rec.empty_sets,
            mean_cand,
            rec.selector.sigma,
            rec.restarts,
            rec.interpolated,
            d_greedy,
            d_avg
        ));
        info!("image {} reconstructed", e.index);
    }
    let mut csv = String::from(
        "image,empty_sets,mean_candidates,sigma,restarts,interpolated,distance_greedy,distance_avg\n",
    );
    csv.extend(rows);
    write_file(&cfg.out_dir.join("tpl_report.csv"), csv.as_bytes())?;
    Ok(())
}

fn write_report(out: &Path, family: &str, r: &EvalReport, extra: &[(&str, f64)]) -> Outcome {
    write_file(&out.join(format!("eval_{family}_rows.csv")), r.rows_csv().as_bytes())?;
    let mut summary = r.summary_csv();
    for (k, v) in extra {
        summary.push_str(&format!("{k},{v:.6}\n"));
    }
    write_file(&out.join(format!("eval_{family}_summary.csv")), summary.as_bytes())?;
    if let Some(map) = &r.map {
        write_file(&out.join(format!("eval_{family}_map.csv")), map.to_csv().as_bytes())?;
    }
    Ok(())
}

fn binarized(img: &Image) -> Image {
    Image {
        pixels: img.pixels.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect(),
        ..img.clone()
    }
}

/// Joins recovered images with golden images and labels and writes metric
/// CSVs plus a side-by-side panel.
pub fn eval(cfg: &RunConfig) -> Outcome {
    let m = read_manifest(cfg)?;
    let golden = golden(cfg, &m)?;
    let labels = labels(cfg);
    let golden_labels: Vec<Option<u8>> = m
        .images
        .iter()
        .map(|e| labels.as_ref().and_then(|l| l.get(e.index).copied()))
        .collect();
    let refs = match &labels {
        Some(l) => {
            let all = load_idx(&cfg.images)?;
            let end = (cfg.ref_offset + cfg.ref_count).min(all.len()).min(l.len());
            if cfg.ref_offset >= end {
                warn!("no reference images in range; recognition metrics are skipped");
                None
            } else {
                Some((all[cfg.ref_offset..end].to_vec(), l[cfg.ref_offset..end].to_vec()))
            }
        }
        None => None,
    };
    let gray_knn = refs
        .as_ref()
        .map(|(imgs, l)| KnnReference::new(imgs, l))
        .transpose()?;
    let out = &cfg.out_dir;
    let mut panel_rows: Vec<Vec<Image>> = vec![golden.clone()];

    if let Some(knn) = &gray_knn {
        let pred = knn.classify_all(&golden, cfg.knn_k)?;
        let rows = score_rows(&m, &golden_labels, Some(pred), vec![0.0; golden.len()]);
        write_report(out, "clean", &EvalReport::new("pixel_distance", rows)?, &[])?;
    }

    let bg_paths: Vec<PathBuf> = m
        .images
        .iter()
        .map(|e| out.join("bg").join(format!("img{:05}.pgm", e.index)))
        .collect();
    if bg_paths.iter().all(|p| p.exists()) {
        let imgs: Vec<Image> = bg_paths.iter().map(load_pgm).collect::<Result<_, _>>()?;
        let metric = imgs
            .iter()
            .zip(&golden)
            .map(|(s, g)| pixel_marker_accuracy(&silhouette_from(s), g))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = match &refs {
            Some((ri, rl)) => {
                let bin: Vec<Image> = ri.iter().map(binarized).collect();
                Some(KnnReference::new(&bin, rl)?.classify_all(&imgs, cfg.knn_k)?)
            }
            None => None,
        };
        let rows = score_rows(&m, &golden_labels, pred, metric);
        write_report(out, "bg", &EvalReport::new("pixel_accuracy", rows)?, &[])?;
        panel_rows.push(imgs);
    } else {
        warn!("background-detection outputs missing; skipping their evaluation");
    }

    for family in ["greedy", "avg"] {
        let paths: Vec<PathBuf> = m
            .images
            .iter()
            .map(|e| out.join("tpl").join(format!("img{:05}_{family}.pgm", e.index)))
            .collect();
        if !paths.iter().all(|p| p.exists()) {
            warn!("template-attack {family} outputs missing; skipping their evaluation");
            continue;
        }
        let imgs: Vec<Image> = paths.iter().map(load_pgm).collect::<Result<_, _>>()?;
        let metric = imgs
            .iter()
            .zip(&golden)
            .map(|(r, g)| pixel_value_distance(r, g))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = gray_knn
            .as_ref()
            .map(|k| k.classify_all(&imgs, cfg.knn_k))
            .transpose()?;
        let rows = score_rows(&m, &golden_labels, pred, metric);
        write_report(out, family, &EvalReport::new("pixel_distance", rows)?, &[])?;
        if family == "greedy" {
            panel_rows.push(imgs);
        }
    }
    if labels.is_none() {
        warn!("golden labels missing; only label-free metrics were written");
    }
    let cols = golden.len();
    let flat: Vec<Image> = panel_rows.into_iter().flatten().collect();
    write_pgm(&tile(&flat, cols)?, out.join("panel.pgm"))?;
    Ok(())
}

fn score_rows(
    m: &Manifest,
    golden_labels: &[Option<u8>],
    pred: Option<Vec<u8>>,
    metric: Vec<f64>,
) -> Vec<ImageScore> {
    m.images
        .iter()
        .enumerate()
        .map(|(i, e)| ImageScore {
            id: e.index,
            golden_label: golden_labels[i],
            predicted: pred.as_ref().map(|p| p[i]),
            metric: metric[i],
        })
        .collect()
}

/// Writes the effective configuration to stdout.
pub fn show_config(cfg: &RunConfig) -> Outcome {
    std::io::stdout().write_all(cfg.to_text().as_bytes())?;
    Ok(())
}
