//! `key = value` run configuration. Every key has a default, unknown keys
//! are rejected, and later sources override earlier ones: file, then the
//! `CONVLEAK_SEED` environment variable, then `--set` flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use convleak::accel::Activation;
use convleak::attack_bg::BorderPolicy;
use convleak::chain::ChainConfig;
use convleak::extract::{AlignConfig, ExtractConfig};
use convleak::pipeline::{PowerSource, Setup};
use convleak::template::{GroupingConfig, ReconstructConfig};
use convleak::{seed, AccelConfig, Error, Kernel, Masking, Result, Scheduling};

pub const SEED_ENV: &str = "CONVLEAK_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub images: PathBuf,
    pub labels: Option<PathBuf>,
    /// Kernel file; `None` draws random binarized kernels from the seed.
    pub kernels: Option<PathBuf>,
    pub kernel_count: usize,
    pub out_dir: PathBuf,
    pub image_offset: usize,
    pub image_count: usize,
    pub profile_offset: usize,
    pub profile_count: usize,
    pub ref_offset: usize,
    pub ref_count: usize,
    pub knn_k: usize,

    pub line_size: usize,
    pub kernel_size: usize,
    pub stride_x: usize,
    pub stride_y: usize,
    pub coef_window: f64,
    pub coef_product: f64,
    pub coef_accumulator: f64,
    pub static_power: f64,
    pub scheduling: String,
    pub masking: bool,
    pub activation: String,

    pub samples_per_cycle: usize,
    pub sample_interval: f64,
    pub rise: f64,
    pub decay: f64,
    pub peak: f64,
    /// `None` uses the desk-scale default of 200 cycle periods.
    pub highpass_tau: Option<f64>,
    pub noise_sigma: f64,
    pub snr_db: Option<f64>,
    pub trailing_cycles: usize,

    pub lowpass_cutoff: Option<f64>,
    pub restore_dc: bool,
    pub min_correlation: f64,
    pub min_separation: f64,
    pub template_windows: usize,
    pub template_index: Option<usize>,
    pub power_source: String,

    pub bg_kernel: usize,
    pub bin_size: Option<f64>,
    pub border: String,

    pub template: Option<PathBuf>,
    pub groups: Option<Vec<Vec<usize>>>,
    pub group_size: usize,
    pub delta: f64,
    pub normalize: bool,
    pub max_restarts: usize,
    pub refine_passes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let accel = AccelConfig::default();
        let chain = ChainConfig::default();
        let align = AlignConfig::default();
        Self {
            seed: 1,
            images: PathBuf::from("data/mnist/digits-images-idx3-ubyte"),
            labels: Some(PathBuf::from("data/mnist/digits-labels-idx1-ubyte")),
            kernels: None,
            kernel_count: 9,
            out_dir: PathBuf::from("out"),
            image_offset: 0,
            image_count: 10,
            profile_offset: 1000,
            profile_count: 300,
            ref_offset: 1000,
            ref_count: 9000,
            knn_k: 3,
            line_size: accel.line_size,
            kernel_size: accel.kernel_size,
            stride_x: accel.stride_x,
            stride_y: accel.stride_y,
            coef_window: accel.coef_window,
            coef_product: accel.coef_product,
            coef_accumulator: accel.coef_accumulator,
            static_power: accel.static_power,
            scheduling: "sequential".into(),
            masking: false,
            activation: "sign".into(),
            samples_per_cycle: chain.samples_per_cycle,
            sample_interval: chain.sample_interval,
            rise: chain.rise,
            decay: chain.decay,
            peak: chain.peak,
            highpass_tau: None,
            noise_sigma: chain.noise_sigma,
            snr_db: None,
            trailing_cycles: chain.trailing_cycles,
            lowpass_cutoff: ExtractConfig::default().lowpass_cutoff,
            restore_dc: true,
            min_correlation: align.min_correlation,
            min_separation: align.min_separation,
            template_windows: align.template_windows,
            template_index: None,
            power_source: "measured".into(),
            bg_kernel: 0,
            bin_size: None,
            border: "background".into(),
            template: None,
            groups: None,
            group_size: 3,
            delta: 1.0,
            normalize: true,
            max_restarts: ReconstructConfig::default().max_restarts,
            refine_passes: ReconstructConfig::default().refine_passes,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: Display,
{
    match v {
        "none" | "auto" => Ok(None),
        _ => num(key, v).map(Some),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    match v {
        "none" | "random" | "" => None,
        _ => Some(PathBuf::from(v)),
    }
}

fn choice(key: &str, v: &str, allowed: &[&str]) -> Result<String> {
    if allowed.contains(&v) {
        Ok(v.to_string())
    } else {
        Err(Error::Config(format!(
            "{key}: {v:?} is not one of {}",
            allowed.join(", ")
        )))
    }
}

fn show<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), |x| x.to_string())
}

fn show_path(v: &Option<PathBuf>, none: &str) -> String {
    v.as_ref().map_or(none.to_string(), |x| x.display().to_string())
}

/// Parses `0,1,2;3,4,5`.
fn parse_groups(v: &str) -> Result<Vec<Vec<usize>>> {
    v.split(';')
        .map(|g| {
            g.split(',')
                .map(|k| num::<usize>("groups", k.trim()))
                .collect()
        })
        .collect()
}

fn format_groups(g: &[Vec<usize>]) -> String {
    g.iter()
        .map(|g| g.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "images" => self.images = PathBuf::from(v),
            "labels" => self.labels = opt_path(v),
            "kernels" => self.kernels = opt_path(v),
            "kernel_count" => self.kernel_count = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "image_offset" => self.image_offset = num(key, v)?,
            "image_count" => self.image_count = num(key, v)?,
            "profile_offset" => self.profile_offset = num(key, v)?,
            "profile_count" => self.profile_count = num(key, v)?,
            "ref_offset" => self.ref_offset = num(key, v)?,
            "ref_count" => self.ref_count = num(key, v)?,
            "knn_k" => self.knn_k = num(key, v)?,
            "line_size" => self.line_size = num(key, v)?,
            "kernel_size" => self.kernel_size = num(key, v)?,
            "stride_x" => self.stride_x = num(key, v)?,
            "stride_y" => self.stride_y = num(key, v)?,
            "coef_window" => self.coef_window = num(key, v)?,
            "coef_product" => self.coef_product = num(key, v)?,
            "coef_accumulator" => self.coef_accumulator = num(key, v)?,
            "static_power" => self.static_power = num(key, v)?,
            "scheduling" => self.scheduling = choice(key, v, &["sequential", "random"])?,
            "masking" => self.masking = num(key, v)?,
            "activation" => self.activation = choice(key, v, &["sign", "identity"])?,
            "samples_per_cycle" => self.samples_per_cycle = num(key, v)?,
            "sample_interval" => self.sample_interval = num(key, v)?,
            "rise" => self.rise = num(key, v)?,
            "decay" => self.decay = num(key, v)?,
            "peak" => self.peak = num(key, v)?,
            "highpass_tau" => self.highpass_tau = opt(key, v)?,
            "noise_sigma" => self.noise_sigma = num(key, v)?,
            "snr_db" => self.snr_db = opt(key, v)?,
            "trailing_cycles" => self.trailing_cycles = num(key, v)?,
            "lowpass_cutoff" => self.lowpass_cutoff = opt(key, v)?,
            "restore_dc" => self.restore_dc = num(key, v)?,
            "min_correlation" => self.min_correlation = num(key, v)?,
            "min_separation" => self.min_separation = num(key, v)?,
            "template_windows" => self.template_windows = num(key, v)?,
            "template_index" => self.template_index = opt(key, v)?,
            "power_source" => self.power_source = choice(key, v, &["measured", "direct"])?,
            "bg_kernel" => self.bg_kernel = num(key, v)?,
            "bin_size" => self.bin_size = opt(key, v)?,
            "border" => self.border = choice(key, v, &["background", "foreground"])?,
            "template" => self.template = opt_path(v),
            "groups" => {
                self.groups = match v {
                    "auto" => None,
                    _ => Some(parse_groups(v)?),
                }
            }
            "group_size" => self.group_size = num(key, v)?,
            "delta" => self.delta = num(key, v)?,
            "normalize" => self.normalize = num(key, v)?,
            "max_restarts" => self.max_restarts = num(key, v)?,
            "refine_passes" => self.refine_passes = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("images", self.images.display().to_string()),
            ("labels", show_path(&self.labels, "none")),
            ("kernels", show_path(&self.kernels, "random")),
            ("kernel_count", self.kernel_count.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("image_offset", self.image_offset.to_string()),
            ("image_count", self.image_count.to_string()),
            ("profile_offset", self.profile_offset.to_string()),
            ("profile_count", self.profile_count.to_string()),
            ("ref_offset", self.ref_offset.to_string()),
            ("ref_count", self.ref_count.to_string()),
            ("knn_k", self.knn_k.to_string()),
            ("line_size", self.line_size.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("stride_x", self.stride_x.to_string()),
            ("stride_y", self.stride_y.to_string()),
            ("coef_window", self.coef_window.to_string()),
            ("coef_product", self.coef_product.to_string()),
            ("coef_accumulator", self.coef_accumulator.to_string()),
            ("static_power", self.static_power.to_string()),
            ("scheduling", self.scheduling.clone()),
            ("masking", self.masking.to_string()),
            ("activation", self.activation.clone()),
            ("samples_per_cycle", self.samples_per_cycle.to_string()),
            ("sample_interval", self.sample_interval.to_string()),
            ("rise", self.rise.to_string()),
            ("decay", self.decay.to_string()),
            ("peak", self.peak.to_string()),
            ("highpass_tau", show(&self.highpass_tau, "auto")),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("snr_db", show(&self.snr_db, "none")),
            ("trailing_cycles", self.trailing_cycles.to_string()),
            ("lowpass_cutoff", show(&self.lowpass_cutoff, "none")),
            ("restore_dc", self.restore_dc.to_string()),
            ("min_correlation", self.min_correlation.to_string()),
            ("min_separation", self.min_separation.to_string()),
            ("template_windows", self.template_windows.to_string()),
            ("template_index", show(&self.template_index, "auto")),
            ("power_source", self.power_source.clone()),
            ("bg_kernel", self.bg_kernel.to_string()),
            ("bin_size", show(&self.bin_size, "auto")),
            ("border", self.border.clone()),
            ("template", show_path(&self.template, "none")),
            (
                "groups",
                self.groups.as_deref().map_or("auto".into(), format_groups),
            ),
            ("group_size", self.group_size.to_string()),
            ("delta", self.delta.to_string()),
            ("normalize", self.normalize.to_string()),
            ("max_restarts", self.max_restarts.to_string()),
            ("refine_passes", self.refine_passes.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(
        file: Option<&Path>,
        env_seed: Option<&str>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        if let Some(s) = env_seed {
            cfg.set("seed", s)
                .map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn accel(&self) -> AccelConfig {
        AccelConfig {
            line_size: self.line_size,
            kernel_size: self.kernel_size,
            input_channels: 1,
            stride_x: self.stride_x,
            stride_y: self.stride_y,
            coef_window: self.coef_window,
            coef_product: self.coef_product,
            coef_accumulator: self.coef_accumulator,
            static_power: self.static_power,
            scheduling: if self.scheduling == "random" {
                Scheduling::Random { seed: 0 }
            } else {
                Scheduling::Sequential
            },
            masking: if self.masking {
                Masking::On { seed: 0 }
            } else {
                Masking::Off
            },
            activation: if self.activation == "identity" {
                Activation::Identity
            } else {
                Activation::Sign
            },
        }
    }

    pub fn setup(&self) -> Result<Setup> {
        let mut chain = ChainConfig::desk_scale(self.samples_per_cycle);
        chain.sample_interval = self.sample_interval;
        if let Some(tau) = self.highpass_tau {
            chain.highpass_tau = tau;
        } else {
            chain.highpass_tau = 200.0 * self.samples_per_cycle as f64 * self.sample_interval;
        }
        chain.rise = self.rise;
        chain.decay = self.decay;
        chain.peak = self.peak;
        chain.noise_sigma = self.noise_sigma;
        chain.trailing_cycles = self.trailing_cycles;
        chain.validate()?;
        let extract = ExtractConfig {
            lowpass_cutoff: self.lowpass_cutoff,
            highpass_tau: self.restore_dc.then_some(chain.highpass_tau),
            align: AlignConfig {
                min_correlation: self.min_correlation,
                min_separation: self.min_separation,
                template_windows: self.template_windows,
                template_index: self.template_index,
                seed: seed::derive(self.seed, &[seed::stage::ALIGN]),
            },
        };
        Ok(Setup {
            accel: self.accel(),
            chain,
            extract,
            snr_db: self.snr_db,
            source: if self.power_source == "direct" {
                PowerSource::Direct
            } else {
                PowerSource::Measured
            },
        })
    }

    pub fn border(&self) -> BorderPolicy {
        if self.border == "foreground" {
            BorderPolicy::Foreground
        } else {
            BorderPolicy::Background
        }
    }

    pub fn grouping(&self) -> GroupingConfig {
        let mut g = GroupingConfig::contiguous(self.kernel_count, self.group_size, self.delta);
        if let Some(groups) = &self.groups {
            g.groups = groups.clone();
        }
        g.normalize = self.normalize;
        g
    }

    pub fn reconstruct(&self) -> ReconstructConfig {
        ReconstructConfig {
            max_restarts: self.max_restarts,
            refine_passes: self.refine_passes,
            seed: seed::derive(self.seed, &[seed::stage::RECONSTRUCT]),
        }
    }

    pub fn load_kernels(&self) -> Result<Vec<Kernel>> {
        let kernels = match &self.kernels {
            Some(path) => convleak::accel::load_kernels(path)?,
            None => Kernel::random_set(self.kernel_size, self.kernel_count, self.seed)?,
        };
        if kernels.is_empty() {
            return Err(Error::Config("no kernels".into()));
        }
        if let Some(k) = kernels.iter().find(|k| k.size != self.kernel_size) {
            return Err(Error::Config(format!(
                "kernel file holds a {0}x{0} kernel but kernel_size is {1}",
                k.size, self.kernel_size
            )));
        }
        Ok(kernels)
    }

    pub fn template_path(&self) -> PathBuf {
        self.template
            .clone()
            .unwrap_or_else(|| self.out_dir.join("template.ptpl"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut a = RunConfig::default();
        a.set("groups", "0,1;2,3").unwrap();
        a.set("snr_db", "20").unwrap();
        a.set("kernels", "k.txt").unwrap();
        let mut b = RunConfig::default();
        b.apply_text(&a.to_text()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_and_malformed_keys() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("colour = red").is_err());
        assert!(c.apply_text("delta 0.5").is_err());
        assert!(c.apply_text("delta = x").is_err());
        assert!(c.apply_text("scheduling = shuffled").is_err());
        c.apply_text("# comment\n\ndelta = 0.5 # trailing\n").unwrap();
        assert_eq!(c.delta, 0.5);
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "seed = 5\ndelta = 0.2\n").unwrap();
        let c = RunConfig::load(Some(&f), None, &[]).unwrap();
        assert_eq!((c.seed, c.delta), (5, 0.2));
        let c = RunConfig::load(Some(&f), Some("9"), &[]).unwrap();
        assert_eq!(c.seed, 9);
        let c = RunConfig::load(Some(&f), Some("9"), &["seed=11".into()]).unwrap();
        assert_eq!(c.seed, 11);
    }
}
