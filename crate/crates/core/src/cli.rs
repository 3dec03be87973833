//! Command-line front end. Every subcommand writes schema-versioned CSV
//! (first line `# forestsr <kind> v1`) and a `.manifest` file with all
//! resolved parameters next to its main output.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::baseline::midpoint_interpolate;
use crate::error::{Error, Result};
use crate::inventory::{
    allometric_dbh, crown_diameters, detect_stems_circle_hn, detect_stems_density_hn, ground_model,
    height_normalize, reconstruct_stems, stem_volume, tree_height, AllometryConfig, CircleDetectConfig,
    DensityDetectConfig, RansacConfig, SmpConfig, StemDetection,
};
use crate::metrics::{chamfer_hausdorff, error_stats, match_detections, regression_scores};
use crate::model::{super_resolve_report, ModelConfig};
use crate::pcio::{random_downsample, read_points, write_points, Format, PointCloud};
use crate::synthgen::{degrade, generate, write_forest, ForestSpec};
use crate::trainer::{load_trainer, make_dataset, save_checkpoint, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "forestsr", version, about = "Forest point-cloud super-resolution and inventory tools")]
pub struct Cli {
    /// key=value file supplying defaults for flags not given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic plot: hr.xyz, lr.xyz and truth.csv.
    Synth(SynthArgs),
    /// Train a super-resolution model on a paired LR/HR plot.
    Train(TrainArgs),
    /// Super-resolve a cloud with a trained model.
    Infer(InferArgs),
    /// Chamfer and Hausdorff distance between two clouds.
    EvalSr(EvalArgs),
    /// Midpoint-interpolation upsampling.
    Baseline(BaselineArgs),
    /// Stem detection.
    Detect(DetectArgs),
    /// Per-stem DBH by circle fit or allometry.
    Dbh(DbhArgs),
    /// Sector-median stem reconstruction and volumes.
    Reconstruct(ReconstructArgs),
    /// Detection and regression scores against a reference table.
    Score(ScoreArgs),
    /// Super-resolution quality across input densities.
    DensitySweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40.0)]
    pub extent_x: f64,
    #[arg(long, default_value_t = 40.0)]
    pub extent_y: f64,
    #[arg(long, default_value_t = 16)]
    pub trees: usize,
    #[arg(long, default_value_t = 25.0)]
    pub dbh_min: f64,
    #[arg(long, default_value_t = 60.0)]
    pub dbh_max: f64,
    #[arg(long, default_value_t = 14.0)]
    pub height_min: f64,
    #[arg(long, default_value_t = 24.0)]
    pub height_max: f64,
    #[arg(long, default_value_t = 3.0)]
    pub crown_min: f64,
    #[arg(long, default_value_t = 7.0)]
    pub crown_max: f64,
    #[arg(long, default_value_t = 0.5)]
    pub taper: f64,
    #[arg(long, default_value_t = 0.4)]
    pub crown_ratio: f64,
    #[arg(long, default_value_t = 0.08)]
    pub scatter: f64,
    #[arg(long, default_value_t = 0.0)]
    pub max_lean: f64,
    #[arg(long, default_value_t = 5.0)]
    pub slope: f64,
    #[arg(long, default_value_t = 2000.0)]
    pub hr_density: f64,
    #[arg(long, default_value_t = 100.0)]
    pub lr_density: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr_noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Octree depth per block.
    #[arg(long, default_value_t = 8)]
    pub depth: u8,
    /// Coarsest level, decoded as a full grid.
    #[arg(long, default_value_t = 2)]
    pub full_depth: u8,
    #[arg(long, default_value_t = 32)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 256)]
    pub max_channels: usize,
    #[arg(long, default_value_t = 2)]
    pub res_blocks: usize,
    /// Occupancy probability threshold used at inference.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Keep predicted points within this many finest voxels of an input point (0 keeps all).
    #[arg(long, default_value_t = 5.0)]
    pub support_voxels: f64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let mut m = ModelConfig::with_widths(self.depth, self.full_depth, self.base_channels, self.max_channels);
        m.res_blocks = self.res_blocks;
        m.tau = self.tau;
        m.support_voxels = self.support_voxels;
        m
    }
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    /// Block edge length (m) for tiling.
    #[arg(long, default_value_t = 10.0)]
    pub edge: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub wd: f64,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub patience: usize,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            initial_lr: self.lr,
            weight_decay: self.wd,
            batch_size: self.batch_size,
            patience: self.patience,
            val_fraction: self.val_fraction,
            seed,
            block_edge: self.edge,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub lr_cloud: PathBuf,
    #[arg(long)]
    pub hr_cloud: PathBuf,
    /// Checkpoint path; history and timing CSVs are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Continue from the checkpoint at --out when it exists.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Randomly subsample the output to `ratio` times the input size.
    #[arg(long)]
    pub match_count: bool,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    /// Override the occupancy threshold stored in the model.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Override the support radius (finest voxels) stored in the model.
    #[arg(long)]
    pub support_voxels: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub ratio: usize,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectMethod {
    Circle,
    Density,
}

#[derive(Debug, Clone, Args)]
pub struct DetectFlags {
    #[arg(long, value_enum, default_value_t = DetectMethod::Circle)]
    pub method: DetectMethod,
    #[arg(long, default_value_t = 1.0)]
    pub ground_cell: f64,
    #[arg(long, default_value_t = 1.3)]
    pub breast_height: f64,
    #[arg(long, default_value_t = 0.2)]
    pub thickness: f64,
    #[arg(long, default_value_t = 0.2)]
    pub eps: f64,
    #[arg(long, default_value_t = 5)]
    pub min_pts: usize,
    #[arg(long, default_value_t = 200)]
    pub ransac_iters: usize,
    #[arg(long, default_value_t = 0.02)]
    pub inlier_tol: f64,
    #[arg(long, default_value_t = 12)]
    pub min_inliers: usize,
    #[arg(long, default_value_t = 0.05)]
    pub r_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub r_max: f64,
    /// Occupied 45° sectors (of 8) a circle's inliers must span.
    #[arg(long, default_value_t = 5)]
    pub min_sectors: usize,
    #[arg(long, default_value_t = 0.03)]
    pub max_residual: f64,
    #[arg(long, default_value_t = 0.5)]
    pub nms_radius: f64,
    /// Density method: grid cell (m).
    #[arg(long, default_value_t = 0.5)]
    pub cell: f64,
    #[arg(long, default_value_t = 0.5)]
    pub z_min: f64,
    #[arg(long, default_value_t = 4.0)]
    pub z_max: f64,
    /// Density method: peak-to-median ratio.
    #[arg(long, default_value_t = 3.0)]
    pub peak_ratio: f64,
    #[arg(long, default_value_t = 10)]
    pub min_count: usize,
    #[arg(long, default_value_t = 7.0)]
    pub significance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl DetectFlags {
    fn circle(&self) -> CircleDetectConfig {
        CircleDetectConfig {
            breast_height: self.breast_height,
            thickness: self.thickness,
            ground_cell: self.ground_cell,
            eps: self.eps,
            min_pts: self.min_pts,
            ransac: RansacConfig {
                iterations: self.ransac_iters,
                inlier_tol: self.inlier_tol,
                min_inliers: self.min_inliers,
                r_min: self.r_min,
                r_max: self.r_max,
                min_sectors: self.min_sectors,
                seed: self.seed,
            },
            max_residual: self.max_residual,
            nms_radius: self.nms_radius,
        }
    }

    fn density(&self) -> DensityDetectConfig {
        DensityDetectConfig {
            z_min: self.z_min,
            z_max: self.z_max,
            cell: self.cell,
            k: self.peak_ratio,
            min_count: self.min_count,
            significance: self.significance,
            ground_cell: self.ground_cell,
        }
    }
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: DetectFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DbhMethod {
    Circle,
    Allometry,
}

#[derive(Debug, Args)]
pub struct DbhArgs {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Detections CSV; stems are detected from --in when absent.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "dbh-method", value_enum, default_value_t = DbhMethod::Circle)]
    pub dbh_method: DbhMethod,
    #[arg(long)]
    pub allom_a: Option<f64>,
    #[arg(long)]
    pub allom_b: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub allom_correction: f64,
    /// Search radius (m) around a stem for its tree height.
    #[arg(long, default_value_t = 3.0)]
    pub height_radius: f64,
    #[command(flatten)]
    pub detect: DetectFlags,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// Directory receiving stem_<id>.csv ring tables and volumes.csv.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    pub bin: f64,
    #[arg(long, default_value_t = 36)]
    pub sectors: usize,
    #[arg(long, default_value_t = 1.3)]
    pub breast_height: f64,
    #[arg(long, default_value_t = 0.3)]
    pub start_height: f64,
    #[arg(long)]
    pub max_height: Option<f64>,
    /// Missing height bins the upward/downward walk may bridge.
    #[arg(long, default_value_t = 2)]
    pub max_gap: usize,
    #[arg(long, default_value_t = 1.0)]
    pub ground_cell: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub radius: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub hr: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,25,50,75,100,250,500,1000,1500,1700")]
    pub densities: Vec<f64>,
    /// Gaussian jitter (m) added to each degraded cloud.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Truth table enabling detection F1 and DBH RMSE columns.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Train a fresh model per density instead of using --model.
    #[arg(long)]
    pub train_each: bool,
    /// Dense cloud the per-density models are trained on; defaults to --hr.
    #[arg(long)]
    pub train_hr: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model_args: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// configuration file handling

fn flag_value(args: &[OsString], name: &str) -> Option<OsString> {
    let long = format!("--{name}");
    let eq = format!("--{name}=");
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == long {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix(&eq) {
            return Some(v.into());
        }
    }
    None
}

fn parse_kv_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: "expected key=value".into(),
        })?;
        out.push((k.trim().replace('_', "-"), v.trim().to_string()));
    }
    Ok(out)
}

/// Appends `--key value` for every config-file entry whose flag is not on
/// the command line, so flags win over the file and the file over defaults.
pub fn apply_config_file(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = flag_value(&args, "config") else {
        return Ok(args);
    };
    let entries = parse_kv_file(Path::new(&path))?;
    let root = Cli::command();
    let sub_name = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .find(|a| root.find_subcommand(a).is_some())
        .ok_or_else(|| Error::InvalidArgument("no subcommand given".into()))?;
    let sub = root.find_subcommand(&sub_name).expect("subcommand exists");
    let given: Vec<String> = args
        .iter()
        .filter_map(|a| a.to_str())
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut out = args.clone();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown key '{key}' for {sub_name}")))?;
        if given.contains(&key) || key == "config" {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => {
                if value.parse::<bool>().map_err(|_| Error::InvalidArgument(format!("{key}={value} is not a boolean")))? {
                    out.push(format!("--{key}").into());
                }
            }
            _ => {
                out.push(format!("--{key}").into());
                out.push(value.into());
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// small I/O helpers

fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn sibling(output: &Path, suffix: &str) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_manifest(path: &Path, command: &str, m: &ArgMatches) -> Result<()> {
    let mut s = String::from("# forestsr manifest v1\n");
    let _ = writeln!(s, "tool=forestsr {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "command={command}");
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for id in m.ids() {
        let vals: Vec<String> = m
            .get_raw(id.as_str())
            .map(|v| v.map(|x| x.to_string_lossy().into_owned()).collect())
            .unwrap_or_default();
        kv.insert(id.as_str().to_string(), vals.join(","));
    }
    for (k, v) in kv {
        let _ = writeln!(s, "{k}={v}");
    }
    write_text(path, &s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_cloud(path: &Path) -> Result<PointCloud> {
    read_points(path, Format::from_path(path))
}

fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_points(cloud, path, Format::from_path(path))
}

/// A CSV table keyed by header name; `#` lines are skipped.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "missing header".into(),
            })?
            .split(',')
            .map(|c| c.trim().to_string())
            .collect();
        let rows = lines.map(|l| l.split(',').map(|c| c.trim().to_string()).collect()).collect();
        Ok(Table { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Parsed numeric column; blank or unparsable cells become NaN.
    pub fn numbers(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.column(name)?;
        Some(
            self.rows
                .iter()
                .map(|r| r.get(c).and_then(|v| v.parse().ok()).unwrap_or(f64::NAN))
                .collect(),
        )
    }

    fn locations(&self, path: &Path) -> Result<Vec<[f64; 2]>> {
        let (Some(x), Some(y)) = (self.numbers("x"), self.numbers("y")) else {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "table needs x and y columns".into(),
            });
        };
        Ok(x.into_iter().zip(y).map(|(x, y)| [x, y]).collect())
    }
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub const DETECTIONS_HEADER: &str = "# forestsr detections v1\nid,x,y,radius_m,dbh_cm,inliers,rms_m\n";

pub fn detections_csv(circles: &[StemDetection]) -> String {
    let mut s = String::from(DETECTIONS_HEADER);
    for (i, d) in circles.iter().enumerate() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{},{}",
            d.location[0],
            d.location[1],
            d.radius,
            d.dbh_cm(),
            d.inlier_count,
            d.rms_residual
        );
    }
    s
}

fn peaks_csv(peaks: &[[f64; 2]]) -> String {
    let mut s = String::from(DETECTIONS_HEADER);
    for (i, p) in peaks.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},,,,", p[0], p[1]);
    }
    s
}

fn read_detections(path: &Path) -> Result<Vec<StemDetection>> {
    let t = Table::read(path)?;
    let locs = t.locations(path)?;
    let n = locs.len();
    let radius = t.numbers("radius_m").unwrap_or_else(|| vec![f64::NAN; n]);
    let inl = t.numbers("inliers").unwrap_or_else(|| vec![f64::NAN; n]);
    let rms = t.numbers("rms_m").unwrap_or_else(|| vec![f64::NAN; n]);
    Ok((0..n)
        .map(|i| StemDetection {
            location: locs[i],
            radius: radius[i],
            inlier_count: if inl[i].is_finite() { inl[i] as usize } else { 0 },
            rms_residual: rms[i],
        })
        .collect())
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_synth(a: &SynthArgs, m: &ArgMatches) -> Result<()> {
    let spec = ForestSpec {
        extent: [a.extent_x, a.extent_y],
        trees: a.trees,
        dbh_cm: (a.dbh_min, a.dbh_max),
        height_m: (a.height_min, a.height_max),
        taper: a.taper,
        crown_m: (a.crown_min, a.crown_max),
        crown_ratio: a.crown_ratio,
        allometric_scatter: a.scatter,
        max_lean_deg: a.max_lean,
        slope_deg: a.slope,
        hr_density: a.hr_density,
        lr_density: a.lr_density,
        lr_noise: a.lr_noise,
        seed: a.seed,
    };
    let forest = generate(&spec)?;
    write_forest(&forest, &a.out)?;
    write_manifest(&a.out.join("synth.manifest"), "synth", m)
}

fn cmd_train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let lr = load_cloud(&a.lr_cloud)?;
    let hr = load_cloud(&a.hr_cloud)?;
    let mut trainer = if a.resume && a.out.exists() {
        load_trainer(&a.out)?
    } else {
        Trainer::new(a.model.config(), a.optim.config(a.seed))?
    };
    let data = make_dataset(
        &lr,
        &hr,
        trainer.config.block_edge,
        trainer.current.config.depth,
        trainer.config.val_fraction,
        trainer.config.seed,
    )?;
    write_manifest(&manifest_path(&a.out), "train", m)?;
    while !trainer.finished {
        trainer.run(&data, Some(1), |r| {
            if !a.quiet {
                eprintln!(
                    "epoch {:>4}  train {:.5}  val {:.5}  lr {:.3e}  {:.1}s",
                    r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
                );
            }
        })?;
        save_checkpoint(&trainer, &a.out)?;
    }
    write_text(&sibling(&a.out, ".history.csv"), &trainer.history.to_csv())?;
    write_text(&sibling(&a.out, ".timing.csv"), &trainer.history.timing_csv())
}

fn cmd_infer(a: &InferArgs, m: &ArgMatches) -> Result<()> {
    let t = load_trainer(&a.model)?;
    let mut state = t.best_model();
    if let Some(tau) = a.tau {
        state.config.tau = tau;
    }
    if let Some(v) = a.support_voxels {
        state.config.support_voxels = v;
    }
    state.config.validate()?;
    let input = load_cloud(&a.input)?;
    let report = super_resolve_report(&input, &state, t.config.block_edge)?;
    for f in &report.failed {
        eprintln!("warning: block {f}");
    }
    let mut out = report.cloud;
    if a.match_count {
        let target = a.ratio * input.len();
        if out.len() > target {
            out = random_downsample(&out, target, a.seed)?;
        }
    }
    save_cloud(&out, &a.out)?;
    write_manifest(&manifest_path(&a.out), "infer", m)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_eval(a: &EvalArgs, m: &ArgMatches) -> Result<()> {
    let p = load_cloud(&a.pred)?;
    let q = load_cloud(&a.reference)?;
    let (cd, hd) = chamfer_hausdorff(&p, &q)?;
    let text = format!(
        "# forestsr eval v1\npred,ref,pred_points,ref_points,chamfer_m,hausdorff_m\n{},{},{},{},{cd},{hd}\n",
        a.pred.display(),
        a.reference.display(),
        p.len(),
        q.len()
    );
    emit(a.out.as_deref(), &text)?;
    match &a.out {
        Some(o) => write_manifest(&manifest_path(o), "eval-sr", m),
        None => Ok(()),
    }
}

fn cmd_baseline(a: &BaselineArgs, m: &ArgMatches) -> Result<()> {
    let c = load_cloud(&a.input)?;
    let up = midpoint_interpolate(&c, a.ratio, a.k, a.seed)?;
    save_cloud(&up, &a.out)?;
    write_manifest(&manifest_path(&a.out), "baseline", m)
}

fn normalized(cloud: &PointCloud, ground_cell: f64) -> Result<PointCloud> {
    let g = ground_model(cloud, ground_cell)?;
    Ok(height_normalize(cloud, &g))
}

fn cmd_detect(a: &DetectArgs, m: &ArgMatches) -> Result<()> {
    let c = load_cloud(&a.input)?;
    let hn = normalized(&c, a.flags.ground_cell)?;
    let text = match a.flags.method {
        DetectMethod::Circle => detections_csv(&detect_stems_circle_hn(&hn, &a.flags.circle())),
        DetectMethod::Density => peaks_csv(&detect_stems_density_hn(&hn, &a.flags.density())),
    };
    write_text(&a.out, &text)?;
    write_manifest(&manifest_path(&a.out), "detect", m)
}

fn cmd_dbh(a: &DbhArgs, m: &ArgMatches) -> Result<()> {
    let cloud = a.input.as_deref().map(load_cloud).transpose()?;
    let hn = cloud.as_ref().map(|c| normalized(c, a.detect.ground_cell)).transpose()?;
    let dets = match (&a.detections, &hn) {
        (Some(p), _) => read_detections(p)?,
        (None, Some(hn)) => match a.detect.method {
            DetectMethod::Circle => detect_stems_circle_hn(hn, &a.detect.circle()),
            DetectMethod::Density => detect_stems_density_hn(hn, &a.detect.density())
                .into_iter()
                .map(|p| StemDetection {
                    location: p,
                    radius: f64::NAN,
                    inlier_count: 0,
                    rms_residual: f64::NAN,
                })
                .collect(),
        },
        (None, None) => return Err(Error::InvalidArgument("dbh needs --in or --detections".into())),
    };
    let locs: Vec<[f64; 2]> = dets.iter().map(|d| d.location).collect();
    let (heights, crowns): (Vec<f64>, Vec<f64>) = match &hn {
        Some(hn) => (
            locs.iter()
                .map(|l| tree_height(hn, *l, a.height_radius).unwrap_or(f64::NAN))
                .collect(),
            crown_diameters(hn, &locs, a.height_radius)
                .into_iter()
                .map(|r| r.unwrap_or(f64::NAN))
                .collect(),
        ),
        None => (vec![f64::NAN; locs.len()], vec![f64::NAN; locs.len()]),
    };
    let dbh: Vec<f64> = match a.dbh_method {
        DbhMethod::Circle => dets.iter().map(|d| d.dbh_cm()).collect(),
        DbhMethod::Allometry => {
            let (Some(a_), Some(b_)) = (a.allom_a, a.allom_b) else {
                return Err(Error::InvalidArgument("allometry needs --allom-a and --allom-b".into()));
            };
            if hn.is_none() {
                return Err(Error::InvalidArgument("allometry needs --in for height and crown".into()));
            }
            let cfg = AllometryConfig { a: a_, b: b_, correction: a.allom_correction };
            heights
                .iter()
                .zip(&crowns)
                .map(|(h, c)| allometric_dbh(*h, *c, &cfg).unwrap_or(f64::NAN))
                .collect()
        }
    };
    let mut s = String::from("# forestsr dbh v1\nid,x,y,dbh_cm,height_m,crown_m\n");
    for i in 0..dets.len() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{}",
            locs[i][0],
            locs[i][1],
            fmt_opt(dbh[i]),
            fmt_opt(heights[i]),
            fmt_opt(crowns[i])
        );
    }
    write_text(&a.out, &s)?;
    write_manifest(&manifest_path(&a.out), "dbh", m)
}

fn cmd_reconstruct(a: &ReconstructArgs, m: &ArgMatches) -> Result<()> {
    let c = load_cloud(&a.input)?;
    let hn = normalized(&c, a.ground_cell)?;
    let dets = read_detections(&a.detections)?;
    let cfg = SmpConfig {
        bin: a.bin,
        sectors: a.sectors,
        breast_height: a.breast_height,
        start_height: a.start_height,
        max_height: a.max_height,
        max_gap: a.max_gap,
        ..SmpConfig::default()
    };
    let usable: Vec<StemDetection> = dets
        .iter()
        .map(|d| StemDetection {
            // peaks without a fitted radius start from a nominal 20 cm stem
            radius: if d.radius.is_finite() && d.radius > 0.0 { d.radius } else { 0.2 },
            ..*d
        })
        .collect();
    let models = reconstruct_stems(&hn, &usable, &cfg);
    let mut s = String::from("# forestsr volumes v1\nid,x,y,rings,volume_m3,status\n");
    for (i, (d, r)) in usable.iter().zip(&models).enumerate() {
        match r.as_ref().map_err(|e| e.to_string()).and_then(|sm| {
            let v = stem_volume(sm).map_err(|e| e.to_string())?;
            Ok((sm, v))
        }) {
            Ok((sm, v)) => {
                write_text(&a.out_dir.join(format!("stem_{i}.csv")), &sm.to_csv())?;
                let _ = writeln!(s, "{i},{},{},{},{v},ok", d.location[0], d.location[1], sm.rings.len());
            }
            Err(e) => {
                let _ = writeln!(s, "{i},{},{},0,,{}", d.location[0], d.location[1], e.replace(',', ";"));
            }
        }
    }
    let out = a.out_dir.join("volumes.csv");
    write_text(&out, &s)?;
    write_manifest(&manifest_path(&out), "reconstruct", m)
}

/// Detection scores plus regression scores for every shared numeric
/// attribute column among matched pairs.
pub fn score_tables(pred: &Table, truth: &Table, pred_path: &Path, truth_path: &Path, radius: f64) -> Result<String> {
    let pl = pred.locations(pred_path)?;
    let tl = truth.locations(truth_path)?;
    let (pairs, d) = match_detections(&pl, &tl, radius)?;
    let mut s = String::from("# forestsr scores v1\nmetric,value\n");
    for (k, v) in [
        ("tp", d.tp as f64),
        ("fp", d.fp as f64),
        ("fn", d.false_negatives as f64),
        ("completeness", d.completeness),
        ("omission", d.omission),
        ("commission", d.commission),
        ("f1", d.f1),
    ] {
        let _ = writeln!(s, "{k},{v}");
    }
    for col in ["dbh_cm", "height_m", "crown_m", "volume_m3"] {
        let (Some(p), Some(t)) = (pred.numbers(col), truth.numbers(col)) else { continue };
        let (pv, tv): (Vec<f64>, Vec<f64>) = pairs
            .iter()
            .map(|&(i, j)| (p[i], t[j]))
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .unzip();
        if pv.is_empty() {
            continue;
        }
        // a constant reference (e.g. a single matched tree) leaves R² undefined
        let (bias, mae, rmse) = error_stats(&pv, &tv)?;
        let r2 = regression_scores(&pv, &tv).map_or(f64::NAN, |r| r.r2);
        let _ = writeln!(s, "{col}_n,{}", pv.len());
        for (k, v) in [("bias", bias), ("mae", mae), ("rmse", rmse), ("r2", r2)] {
            let _ = writeln!(s, "{col}_{k},{v}");
        }
    }
    Ok(s)
}

fn cmd_score(a: &ScoreArgs, m: &ArgMatches) -> Result<()> {
    let pred = Table::read(&a.pred)?;
    let truth = Table::read(&a.truth)?;
    let s = score_tables(&pred, &truth, &a.pred, &a.truth, a.radius)?;
    emit(a.out.as_deref(), &s)?;
    match &a.out {
        Some(o) => write_manifest(&manifest_path(o), "score", m),
        None => Ok(()),
    }
}

fn cmd_sweep(a: &SweepArgs, m: &ArgMatches) -> Result<()> {
    let hr = load_cloud(&a.hr)?;
    let train_hr = match &a.train_hr {
        Some(p) => load_cloud(p)?,
        None => hr.clone(),
    };
    let fixed = match (&a.model, a.train_each) {
        (_, true) => None,
        (Some(p), false) => Some(load_trainer(p)?),
        (None, false) => return Err(Error::InvalidArgument("density-sweep needs --model or --train-each".into())),
    };
    let truth = a.truth.as_deref().map(|p| Table::read(p).map(|t| (p, t))).transpose()?;
    let mut s = String::from("# forestsr sweep v1\ndensity,lr_points,sr_points,cd_lr,hd_lr,cd_sr,hd_sr,f1_sr,dbh_rmse_sr\n");
    for (k, &density) in a.densities.iter().enumerate() {
        let seed = a.seed.wrapping_add(k as u64);
        let lr = degrade(&hr, density, a.noise, seed)?;
        let trainer = match &fixed {
            Some(t) => t.clone(),
            None => {
                let tlr = degrade(&train_hr, density, a.noise, seed ^ 0x7472)?;
                let mut t = Trainer::new(a.model_args.config(), a.optim.config(a.seed))?;
                let data = make_dataset(&tlr, &train_hr, a.optim.edge, t.current.config.depth, a.optim.val_fraction, a.seed)?;
                t.run(&data, None, |_| {})?;
                t
            }
        };
        let sr = super_resolve_report(&lr, &trainer.best_model(), trainer.config.block_edge)?.cloud;
        let (cd_lr, hd_lr) = chamfer_hausdorff(&lr, &hr)?;
        let (cd_sr, hd_sr) = chamfer_hausdorff(&sr, &hr)?;
        let (mut f1, mut rmse) = (f64::NAN, f64::NAN);
        if let Some((tp, t)) = &truth {
            let hn = normalized(&sr, 1.0)?;
            let dets = detect_stems_circle_hn(&hn, &CircleDetectConfig::default());
            let pred = Table::read_str(&detections_csv(&dets));
            let scores = score_tables(&pred, t, Path::new("<sweep>"), tp, 2.0)?;
            let map: HashMap<&str, f64> = scores
                .lines()
                .skip(2)
                .filter_map(|l| l.split_once(','))
                .filter_map(|(k, v)| Some((k, v.parse().ok()?)))
                .collect();
            f1 = map.get("f1").copied().unwrap_or(f64::NAN);
            rmse = map.get("dbh_cm_rmse").copied().unwrap_or(f64::NAN);
        }
        let _ = writeln!(
            s,
            "{density},{},{},{cd_lr},{hd_lr},{cd_sr},{hd_sr},{},{}",
            lr.len(),
            sr.len(),
            fmt_opt(f1),
            fmt_opt(rmse)
        );
    }
    write_text(&a.out, &s)?;
    write_manifest(&manifest_path(&a.out), "density-sweep", m)
}

impl Table {
    fn read_str(text: &str) -> Table {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let columns = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
        let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        Table { columns, rows }
    }
}

/// Runs one invocation and returns the process exit code: 0 on success,
/// 2 for file-system errors, 1 for any other failure.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let args: Vec<OsString> = args.into_iter().collect();
    let args = match apply_config_file(args) {
        Ok(a) => a,
        Err(e) => return report(e),
    };
    let matches = match Cli::command().try_get_matches_from(&args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let r = match &cli.command {
        Command::Synth(a) => cmd_synth(a, sub),
        Command::Train(a) => cmd_train(a, sub),
        Command::Infer(a) => cmd_infer(a, sub),
        Command::EvalSr(a) => cmd_eval(a, sub),
        Command::Baseline(a) => cmd_baseline(a, sub),
        Command::Detect(a) => cmd_detect(a, sub),
        Command::Dbh(a) => cmd_dbh(a, sub),
        Command::Reconstruct(a) => cmd_reconstruct(a, sub),
        Command::Score(a) => cmd_score(a, sub),
        Command::DensitySweep(a) => cmd_sweep(a, sub),
    };
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("forestsr {name}: failed");
            report(e)
        }
    }
}

fn report(e: Error) -> i32 {
    eprintln!("error: {e}");
    match e {
        Error::Io { .. } => 2,
        _ => 1,
    }
}
