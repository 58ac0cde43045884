//! Command-line entry point: run configuration and one thin function per subcommand.
//!
//! Output locations, relative to the output directory:
//!
//! | command          | writes                                                  |
//! |------------------|---------------------------------------------------------|
//! | `simulate`       | `data/` dataset directory                               |
//! | `train`          | `model-<kind>.json`, plus `train_log.csv` for the CNN   |
//! | `infer`          | `trajectories/<drive>.csv`                              |
//! | `evaluate`       | `metrics.json`                                          |
//! | `sweep`          | `sweep.csv`                                             |
//! | `baseline-dr`    | `baseline/<drive>.csv`, `baseline_metrics.json`         |
//! | `export-features`| `features/layout.csv`, `features/<split>.csv`           |

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::cnn::{self, CnnArch, CnnModel, LabeledWindows, TrainConfig};
use crate::deadreck::{self, NavState};
use crate::drive::{Dataset, Drive, Split};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsAccumulator, MetricsFile, PreparedDrive, SweepTrainer};
use crate::features::{self, extract};
use crate::forest::{fit_forest, ForestConfig, ForestModel};
use crate::io::{self, DatasetIndex};
use crate::par::{derive_seed, Parallelism};
use crate::positioning::{self, CnnSegmentor, ForestSegmentor, Segmentor};
use crate::route::RouteModel;
use crate::sim::{self, SimConfig};
use crate::types::{Position, ProcessedWindow, SegmentId};

pub const OUT_ENV: &str = "ROADSIG_OUT";
pub const BASELINE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SegmentorKind {
    #[default]
    Forest,
    Cnn,
}

impl SegmentorKind {
    fn name(self) -> &'static str {
        match self {
            SegmentorKind::Forest => "forest",
            SegmentorKind::Cnn => "cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Car,
    Separable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub preset: Preset,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fields merged over the preset.
    pub config: toml::Table,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self { preset: Preset::Car, n_train: 29, n_val: 10, n_test: 10, config: toml::Table::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSection {
    pub arch: CnnArch,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub candidates: Vec<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { candidates: eval::car_candidates() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeadReckSection {
    /// Leading stationary span used to level the initial attitude, s.
    pub level_seconds: f64,
}

impl Default for DeadReckSection {
    fn default() -> Self {
        Self { level_seconds: 1.0 }
    }
}

/// Contents of the `--config` TOML file. Every component seed is derived from `seed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub segmentor: SegmentorKind,
    pub out: Option<PathBuf>,
    /// Dataset directory; defaults to `<out>/data`.
    pub data: Option<PathBuf>,
    /// Route polyline CSV replacing the dataset's `route.csv`.
    pub route: Option<PathBuf>,
    /// Segment count; defaults to the dataset's.
    pub n_segments: Option<usize>,
    /// Model file; defaults to `<out>/model-<segmentor>.json`.
    pub model: Option<PathBuf>,
    /// Split used by `infer`, `evaluate` and `baseline-dr`.
    pub split: Option<Split>,
    pub parallelism: Parallelism,
    pub simulation: SimulationSection,
    pub forest: ForestConfig,
    pub cnn: CnnSection,
    pub sweep: SweepSection,
    pub deadreck: DeadReckSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e))
    }

    pub fn with_overrides(mut self, flags: &Flags) -> Self {
        if let Some(seed) = flags.seed {
            self.seed = seed;
        }
        if let Some(kind) = flags.segmentor {
            self.segmentor = kind;
        }
        if let Some(out) = &flags.out {
            self.out = Some(out.clone());
        }
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out_dir().join("data"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out_dir().join(format!("model-{}.json", self.segmentor.name())))
    }

    pub fn eval_split(&self) -> Split {
        self.split.unwrap_or(Split::Test)
    }

    /// Preset with the `[simulation.config]` table merged over it.
    pub fn sim_config(&self) -> Result<SimConfig> {
        let base = match self.simulation.preset {
            Preset::Car => SimConfig::car(),
            Preset::Separable => SimConfig::separable(),
        };
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut value, toml::Value::Table(self.simulation.config.clone()));
        let mut cfg: SimConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(format!("simulation.config: {e}")))?;
        cfg.seed = derive_seed(self.seed, "sim");
        Ok(cfg)
    }

    pub fn forest_config(&self) -> ForestConfig {
        ForestConfig { seed: derive_seed(self.seed, "forest"), ..self.forest.clone() }
    }

    pub fn cnn_train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, "cnn"), ..self.cnn.train.clone() }
    }

    pub fn dataset(&self) -> Result<(Dataset, DatasetIndex)> {
        let (mut ds, index) = io::load_dataset(&self.data_dir(), self.n_segments)?;
        if let Some(p) = &self.route {
            ds.route = io::load_route(p, ds.route.num_segments())?;
        }
        Ok((ds, index))
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Flags {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub segmentor: Option<SegmentorKind>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "roadsig", version, about = "Position a vehicle along a known route from IMU road signatures")]
pub struct Cli {
    #[command(flatten)]
    pub flags: Flags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate,
    /// Train the selected segmentor on the training split.
    Train,
    /// Write positioned trajectories for every drive of the evaluation split.
    Infer,
    /// Score the trained segmentor with the positioning metrics.
    Evaluate,
    /// Retrain for each candidate segment count and score on validation.
    Sweep,
    /// Dead-reckon every drive of the evaluation split.
    BaselineDr,
    /// Write the feature layout and per-window feature vectors.
    ExportFeatures,
}

pub fn resolve(flags: &Flags) -> Result<RunConfig> {
    let base = match &flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(flags))
}

pub fn run(cfg: &RunConfig, command: Command) -> Result<String> {
    match command {
        Command::Simulate => {
            let idx = cmd_simulate(cfg)?;
            Ok(format!(
                "wrote {} drives to {}",
                idx.train.len() + idx.val.len() + idx.test.len(),
                cfg.data_dir().display()
            ))
        }
        Command::Train => cmd_train(cfg).map(|p| format!("wrote {}", p.display())),
        Command::Infer => cmd_infer(cfg).map(|ps| format!("wrote {} trajectories", ps.len())),
        Command::Evaluate => {
            let m = cmd_evaluate(cfg)?;
            Ok(serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?)
        }
        Command::Sweep => cmd_sweep(cfg).map(|r| format!("chosen N = {}", r.chosen)),
        Command::BaselineDr => cmd_baseline_dr(cfg).map(|b| format!("mean error {:.3} m", b.mean_error)),
        Command::ExportFeatures => cmd_export_features(cfg).map(|n| format!("wrote {n} feature rows")),
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match resolve(&cli.flags).and_then(|cfg| run(&cfg, cli.command)) {
        Ok(msg) => {
            println!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<DatasetIndex> {
    let sim_cfg = cfg.sim_config()?;
    let s = &cfg.simulation;
    let out = sim::synth_dataset(&sim_cfg, s.n_train, s.n_val, s.n_test, cfg.parallelism)?;
    io::save_dataset(&cfg.data_dir(), &out.dataset, Some(out.manifest))
}

fn prepare(drives: &[Drive], par: Parallelism) -> Result<Vec<PreparedDrive>> {
    drives.iter().map(|d| PreparedDrive::new(d, par)).collect()
}

fn labeled(drives: &[PreparedDrive], route: &RouteModel) -> Result<(Vec<ProcessedWindow>, Vec<SegmentId>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for d in drives {
        for (w, s) in d.labeled(route)? {
            xs.push(w);
            ys.push(s);
        }
    }
    Ok((xs, ys))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let par = cfg.parallelism;
    let (ds, _) = cfg.dataset()?;
    let n = ds.route.num_segments();
    let (x, y) = labeled(&prepare(&ds.train, par)?, &ds.route)?;
    if x.is_empty() {
        return Err(Error::InvalidInput("training split has no usable windows".into()));
    }
    let path = cfg.model_path();
    let json = match cfg.segmentor {
        SegmentorKind::Forest => {
            let feats = features::extract_batch(&x, par);
            fit_forest(&feats, &y, n, &cfg.forest_config(), par)?.to_json()?
        }
        SegmentorKind::Cnn => {
            let (vx, vy) = labeled(&prepare(&ds.val, par)?, &ds.route)?;
            let val = LabeledWindows { windows: &vx, labels: &vy };
            let outcome = cnn::train(
                &LabeledWindows { windows: &x, labels: &y },
                (!vx.is_empty()).then_some(&val),
                n,
                &cfg.cnn.arch,
                &cfg.cnn_train_config(),
                par,
            )?;
            cnn::write_log_csv(&outcome.log, io::create(&cfg.out_dir().join("train_log.csv"))?)?;
            outcome.best.unwrap_or(outcome.model).to_json()?
        }
    };
    io::write_string(&path, &json)?;
    Ok(path)
}

/// A loaded model of either kind.
pub enum Model {
    Forest(ForestModel),
    Cnn(CnnModel),
}

impl Model {
    pub fn load(path: &Path, kind: SegmentorKind) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let m = match kind {
            SegmentorKind::Forest => {
                let m = ForestModel::from_json(&text).map_err(|e| io::at_path(e, path))?;
                if m.layout_hash.as_ref().is_some_and(|h| *h != features::layout_hash()) {
                    return Err(Error::Config(format!("{}: feature layout differs from this build", path.display())));
                }
                Model::Forest(m)
            }
            SegmentorKind::Cnn => Model::Cnn(CnnModel::from_json(&text).map_err(|e| io::at_path(e, path))?),
        };
        Ok(m)
    }

    pub fn n_segments(&self) -> usize {
        match self {
            Model::Forest(m) => m.n_classes,
            Model::Cnn(m) => m.n_classes,
        }
    }

    pub fn segmentor(&self) -> Box<dyn Segmentor + '_> {
        match self {
            Model::Forest(model) => Box::new(ForestSegmentor { model }),
            Model::Cnn(model) => Box::new(CnnSegmentor { model }),
        }
    }
}

fn model_for(cfg: &RunConfig, route: &RouteModel) -> Result<Model> {
    let path = cfg.model_path();
    let model = Model::load(&path, cfg.segmentor)?;
    if model.n_segments() != route.num_segments() {
        return Err(Error::Config(format!(
            "{} was trained for {} segments but the route has {}",
            path.display(),
            model.n_segments(),
            route.num_segments()
        )));
    }
    Ok(model)
}

/// A drive's name and its positioned trajectory.
pub type NamedTrajectory = (String, Vec<positioning::TrajectoryPoint>);

/// Trajectories of every drive in the evaluation split, paired with their names.
pub fn infer_split(cfg: &RunConfig) -> Result<(Dataset, Vec<NamedTrajectory>)> {
    let (ds, index) = cfg.dataset()?;
    let model = model_for(cfg, &ds.route)?;
    let seg = model.segmentor();
    let split = cfg.eval_split();
    let out = ds
        .split(split)
        .iter()
        .zip(index.names(split))
        .map(|(d, name)| Ok((name.clone(), positioning::run_drive(d, seg.as_ref(), &ds.route, cfg.parallelism)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((ds, out))
}

pub fn cmd_infer(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let (_, runs) = infer_split(cfg)?;
    let dir = cfg.out_dir().join("trajectories");
    runs.iter()
        .map(|(name, pts)| {
            let p = dir.join(format!("{name}.csv"));
            positioning::write_trajectory_csv(pts, io::create(&p)?).map_err(|e| io::at_path(e, &p))?;
            Ok(p)
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<MetricsFile> {
    let (ds, runs) = infer_split(cfg)?;
    let mut acc = MetricsAccumulator::new();
    for ((_, pts), drive) in runs.iter().zip(ds.split(cfg.eval_split())) {
        acc.add_trajectory(pts, drive, &ds.route)?;
    }
    let file = acc.to_file()?;
    io::write_json(&cfg.out_dir().join("metrics.json"), &file)?;
    Ok(file)
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<eval::SweepResult> {
    let (ds, _) = cfg.dataset()?;
    let trainer = match cfg.segmentor {
        SegmentorKind::Forest => SweepTrainer::Forest(cfg.forest_config()),
        SegmentorKind::Cnn => SweepTrainer::Cnn { arch: cfg.cnn.arch.clone(), train: cfg.cnn_train_config() },
    };
    let r = eval::sweep(&ds, &cfg.sweep.candidates, &trainer, cfg.parallelism)?;
    r.write_csv(io::create(&cfg.out_dir().join("sweep.csv"))?)?;
    Ok(r)
}

/// Summary of dead-reckoning error against ground truth at the 1 Hz output times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub version: u32,
    pub points: usize,
    pub mean_error: f64,
    pub max_error: f64,
}

/// Timestamped dead-reckoned positions of one drive.
pub type Track = Vec<(f64, Position)>;

/// Dead-reckon each drive and pool the planar error over all output points.
pub fn baseline(drives: &[Drive], route: &RouteModel, level_seconds: f64) -> Result<(Vec<Track>, BaselineReport)> {
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut count = 0usize;
    let mut trajs = Vec::with_capacity(drives.len());
    for d in drives {
        let traj = deadreck::dead_reckon(d, NavState::aligned(d, route, level_seconds))?;
        for (t, p) in &traj {
            let gt = d.position_at(*t).ok_or_else(|| Error::InvalidInput("drive has no ground truth".into()))?;
            let e = p.distance(&gt);
            sum += e;
            max = max.max(e);
            count += 1;
        }
        trajs.push(traj);
    }
    if count == 0 {
        return Err(Error::InvalidInput("no dead-reckoning output to score".into()));
    }
    Ok((trajs, BaselineReport { version: BASELINE_VERSION, points: count, mean_error: sum / count as f64, max_error: max }))
}

pub fn cmd_baseline_dr(cfg: &RunConfig) -> Result<BaselineReport> {
    let (ds, index) = cfg.dataset()?;
    let split = cfg.eval_split();
    let (trajs, report) = baseline(ds.split(split), &ds.route, cfg.deadreck.level_seconds)?;
    let dir = cfg.out_dir().join("baseline");
    for (traj, name) in trajs.iter().zip(index.names(split)) {
        let p = dir.join(format!("{name}.csv"));
        deadreck::write_trajectory_csv(traj, io::create(&p)?).map_err(|e| io::at_path(e, &p))?;
    }
    io::write_json(&cfg.out_dir().join("baseline_metrics.json"), &report)?;
    Ok(report)
}

/// Writes `features/layout.csv` and one CSV per split with columns `drive,t,label,<layout names>`.
pub fn cmd_export_features(cfg: &RunConfig) -> Result<usize> {
    let par = cfg.parallelism;
    let (ds, index) = cfg.dataset()?;
    let dir = cfg.out_dir().join("features");
    let lp = dir.join("layout.csv");
    features::write_layout_csv(io::create(&lp)?).map_err(|e| io::at_path(e, &lp))?;
    let mut rows = 0;
    for split in Split::ALL {
        let p = dir.join(format!("{}.csv", split.name()));
        let mut w = csv::Writer::from_writer(io::create(&p)?);
        let wrap = |e: csv::Error| Error::parse(&p, e);
        let header = ["drive", "t", "label"].into_iter().map(String::from).chain(features::layout().iter().cloned());
        w.write_record(header).map_err(wrap)?;
        for (drive, name) in ds.split(split).iter().zip(index.names(split)) {
            let prep = PreparedDrive::new(drive, par)?;
            let feats = par.map(&prep.windows, |w| w.as_ref().map(extract));
            for ((t, truth), f) in prep.times.iter().zip(&prep.truth).zip(&feats) {
                let Some(f) = f else { continue };
                let label = ds.route.label(truth).map(|s| s.to_string()).unwrap_or_default();
                let rec = [name.clone(), t.to_string(), label].into_iter().chain(f.values().iter().map(f64::to_string));
                w.write_record(rec).map_err(wrap)?;
                rows += 1;
            }
        }
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let cfg: RunConfig = toml::from_str("seed = 3\nsegmentor = \"cnn\"\nout = \"a\"\n").unwrap();
        let flags = Flags { seed: Some(9), out: Some("b".into()), ..Flags::default() };
        let r = cfg.with_overrides(&flags);
        assert_eq!((r.seed, r.segmentor, r.out_dir()), (9, SegmentorKind::Cnn, PathBuf::from("b")));
        assert_eq!(r.model_path(), PathBuf::from("b/model-cnn.json"));
    }

    #[test]
    fn simulation_overrides_merge_over_preset() {
        let cfg: RunConfig = toml::from_str(
            "[simulation]\npreset = \"separable\"\n[simulation.config]\nrate_hz = 50.0\n[simulation.config.speed]\nmean_mps = 8.0\n",
        )
        .unwrap();
        let sim = cfg.sim_config().unwrap();
        let base = SimConfig::separable();
        assert_eq!(sim.rate_hz, 50.0);
        assert_eq!(sim.speed.mean_mps, 8.0);
        assert_eq!(sim.speed.std_mps, base.speed.std_mps);
        assert_eq!(sim.n_segments, base.n_segments);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("segmentor = \"svm\"\n").is_err());
    }

    #[test]
    fn readme_example_config_parses() {
        let readme = include_str!("../../../README.md");
        let block = readme.split("```toml\n").nth(1).and_then(|b| b.split("```").next()).unwrap();
        let cfg: RunConfig = toml::from_str(block).unwrap();
        assert_eq!((cfg.seed, cfg.eval_split()), (7, Split::Test));
        assert_eq!(cfg.sweep.candidates, eval::car_candidates());
        assert_eq!(cfg.sim_config().unwrap().speed.mean_mps, 12.0);
    }

    #[test]
    fn component_seeds_follow_root() {
        let a = RunConfig { seed: 1, ..RunConfig::default() };
        let b = RunConfig { seed: 2, ..RunConfig::default() };
        assert_ne!(a.forest_config().seed, b.forest_config().seed);
        assert_ne!(a.forest_config().seed, a.cnn_train_config().seed);
        assert_eq!(a.forest_config(), RunConfig { seed: 1, ..RunConfig::default() }.forest_config());
    }
}
