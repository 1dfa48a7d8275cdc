//! Flags and the TOML override layer. A config file uses the long flag names
//! as keys (`n-points = 256`) plus optional `[model]`, `[datagen]` and
//! `[detect]` tables; flags given on the command line win.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::path::{Path, PathBuf};

use flexlog::datagen::DatagenConfig;
use flexlog::model::ModelConfig;
use flexlog::pipeline::DetectConfig;

#[derive(Debug, Parser)]
#[command(name = "flexlog", version, about = "Flexible-guidance 6-DoF grasp detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic scenes with analytic grasp labels.
    Synth(Opts),
    /// Build the regional dataset from scenes.
    Datagen(Opts),
    /// Train the local grasp model.
    Train(Opts),
    /// Detect grasps in one scene.
    Detect(Opts),
    /// Score detections against scene objects.
    Eval(Opts),
    /// Write spliced heatmaps for a sweep of region counts.
    Heatmap(Opts),
    /// Serve scenes and click-to-grasp over HTTP.
    Serve(Opts),
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct Opts {
    /// TOML file with defaults for any flag.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Scene directory, or a directory of scene directories.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// grid, heatmap, graspness, bbox, mask or click.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub grid: Option<u32>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long = "n-points")]
    pub n_points: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Listen address for `serve`.
    #[arg(long)]
    pub serve: Option<String>,
    /// Heatmap PNG, graspness JSON or target file, depending on the mode.
    #[arg(long)]
    pub guidance: Option<PathBuf>,
    /// Click pixel as `u,v`.
    #[arg(long)]
    pub click: Option<String>,
    /// Box as `u0,v0,u1,v1` (half-open).
    #[arg(long)]
    pub bbox: Option<String>,
    /// FLXG dataset for `train`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of synthetic scenes.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Model preset: `default` or `small`.
    #[arg(long)]
    pub model: Option<String>,
    /// Region counts for `heatmap`, comma separated.
    #[arg(long)]
    pub ks: Option<String>,
    /// Also write the spliced region heatmap to this PNG (`detect`).
    #[arg(long = "heatmap-out")]
    pub heatmap_out: Option<PathBuf>,
    /// Evaluate the scene labels themselves instead of model output.
    #[arg(long)]
    pub oracle: bool,
    /// Also report target-oriented AP, one mask target per object.
    #[arg(long)]
    pub toap: bool,
}

/// Optional tables of a config file.
#[derive(Debug, Default)]
struct Sections {
    model: Option<ModelConfig>,
    datagen: Option<DatagenConfig>,
    detect: Option<DetectConfig>,
}

/// Flags merged over the config file, plus the module settings it carries.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub opts: Opts,
    pub model: Option<ModelConfig>,
    pub datagen: DatagenConfig,
    pub detect: DetectConfig,
}

fn merge(flags: Opts, file: Opts) -> Opts {
    Opts {
        config: flags.config,
        scene: flags.scene.or(file.scene),
        checkpoint: flags.checkpoint.or(file.checkpoint),
        mode: flags.mode.or(file.mode),
        k: flags.k.or(file.k),
        grid: flags.grid.or(file.grid),
        radius: flags.radius.or(file.radius),
        n_points: flags.n_points.or(file.n_points),
        seed: flags.seed.or(file.seed),
        out: flags.out.or(file.out),
        serve: flags.serve.or(file.serve),
        guidance: flags.guidance.or(file.guidance),
        click: flags.click.or(file.click),
        bbox: flags.bbox.or(file.bbox),
        data: flags.data.or(file.data),
        count: flags.count.or(file.count),
        epochs: flags.epochs.or(file.epochs),
        model: flags.model.or(file.model),
        ks: flags.ks.or(file.ks),
        heatmap_out: flags.heatmap_out.or(file.heatmap_out),
        oracle: flags.oracle || file.oracle,
        toap: flags.toap || file.toap,
    }
}

fn section<T: serde::de::DeserializeOwned>(table: &mut toml::Table, key: &str, path: &Path) -> anyhow::Result<Option<T>> {
    table
        .remove(key)
        .map(|v| v.try_into().with_context(|| format!("parsing [{key}] in {}", path.display())))
        .transpose()
}

fn read_file(path: &Path) -> anyhow::Result<(Opts, Sections)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let sections = Sections {
        model: section(&mut table, "model", path)?,
        datagen: section(&mut table, "datagen", path)?,
        detect: section(&mut table, "detect", path)?,
    };
    let opts: Opts = toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok((opts, sections))
}

pub fn resolve(flags: Opts) -> anyhow::Result<Resolved> {
    let (file, sections) = match &flags.config {
        Some(p) => read_file(p)?,
        None => (Opts::default(), Sections::default()),
    };
    let opts = merge(flags, file);
    let mut detect = sections.detect.unwrap_or_default();
    if let Some(k) = opts.k {
        detect.k = k;
    }
    if let Some(g) = opts.grid {
        detect.grid_px = g;
    }
    if let Some(r) = opts.radius {
        detect.radius = r;
    }
    if detect.k == 0 || detect.grid_px == 0 || !(detect.radius > 0.0) {
        bail!("k and grid must be positive and radius > 0");
    }
    let mut datagen = sections.datagen.unwrap_or_default();
    if let Some(n) = opts.n_points {
        datagen.n_points = n;
    }
    if let Some(r) = opts.radius {
        datagen.radius_range = (r, r);
    }
    Ok(Resolved {
        opts,
        model: sections.model,
        datagen,
        detect,
    })
}

pub fn parse_list<const N: usize>(s: &str, what: &str) -> anyhow::Result<[u32; N]> {
    let parts: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse::<u32>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("{what} must be {N} comma-separated integers"))?;
    parts
        .try_into()
        .map_err(|_| anyhow::anyhow!("{what} must be {N} comma-separated integers"))
}
