//! Config-driven experiment commands.
//!
//! Every command reads one JSON [`ExperimentConfig`] and writes its outputs
//! into a fresh subdirectory of the output directory, built in a temporary
//! sibling and renamed into place only once complete. Relative paths in the
//! config resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::dataset::ScenarioSpec;
use crate::error::{bail_config, Error, Result};
use crate::evaluation::{
    run_ablation, run_variant, score, write_results, MetricReport, RevIn, RunLabel, RunOutput,
    Variant,
};
use crate::fsutil::{write_dir_atomically, write_file_atomically};
use crate::ingestion::{
    aggregate_trips, filter_regions, generate_synthetic, read_trip_csv, DropTally, GridSpec,
    HourWindow, RegionMapper, SyntheticConfig, TrafficCube, ZoneMap,
};
use crate::models::{Forecaster, ModelKind};
use crate::training::{
    config_hash, recency_stage, Checkpoint, PreparedScenario, TrainConfig, HYPER_GRID,
};
use crate::with_predictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ingest,
    Synth,
    Train,
    Evaluate,
    Ablate,
    Sweep,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripSource {
    pub path: PathBuf,
    /// Grid partition for lat/lon records.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Zone table for zone-id records.
    #[serde(default)]
    pub zones: Option<ZoneMap>,
    /// Drop regions averaging fewer events per hour than this.
    #[serde(default)]
    pub min_avg: f64,
    /// Hour-aligned `[start, end)`; defaults to the span of the records.
    #[serde(default)]
    pub start: Option<NaiveDateTime>,
    #[serde(default)]
    pub end: Option<NaiveDateTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Trips(TripSource),
    /// A cube directory written by `ingest` or `synth`.
    Cube {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "grid")]
    pub alphas: Vec<f64>,
    #[serde(default = "grid")]
    pub betas: Vec<f64>,
}

fn grid() -> Vec<f64> {
    HYPER_GRID.to_vec()
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: grid(),
            betas: grid(),
        }
    }
}

fn d_name() -> String {
    "experiment".into()
}
fn d_model() -> ModelKind {
    ModelKind::GruGraph
}
fn d_variant() -> Variant {
    Variant::Full
}
fn d_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}
fn d_output() -> PathBuf {
    PathBuf::from("out")
}
fn d_seeds() -> Vec<u64> {
    vec![0]
}
fn d_geo() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario label used in results tables.
    #[serde(default = "d_name")]
    pub name: String,
    pub data: DataSource,
    #[serde(default)]
    pub scenario: Option<ScenarioSpec>,
    #[serde(default = "d_model")]
    pub model: ModelKind,
    /// Variant used by `train`, `evaluate` and `sweep`.
    #[serde(default = "d_variant")]
    pub variant: Variant,
    /// Variants compared by `ablate`.
    #[serde(default = "d_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    /// Centroid distance for static adjacency edges (zone datasets).
    #[serde(default = "d_geo")]
    pub geo_threshold_km: f64,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// Parse a config; syntax and type errors carry line and column.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Trips(t) => fix(&mut t.path),
            DataSource::Cube { path } => fix(path),
            DataSource::Synthetic(_) => {}
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail_config!("seeds must not be empty");
        }
        self.train.validate()?;
        if let Some(s) = &self.scenario {
            s.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let DataSource::Trips(t) = &self.data {
            if t.grid.is_some() == t.zones.is_some() {
                bail_config!("trips source needs exactly one of grid or zones");
            }
            if t.start.is_some() != t.end.is_some() {
                bail_config!("give both start and end, or neither");
            }
        }
        if self.sweep.alphas.is_empty() || self.sweep.betas.is_empty() {
            bail_config!("sweep grid must not be empty");
        }
        if self.variants.is_empty() {
            bail_config!("variants must not be empty");
        }
        Ok(())
    }

    /// Apply command-line overrides: `seed` replaces the first seed.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seeds[0] = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        self
    }

    fn scenario(&self) -> Result<&ScenarioSpec> {
        self.scenario
            .as_ref()
            .ok_or_else(|| Error::Config("this command needs a scenario".into()))
    }

    fn train_for(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// What a trip ingestion produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub skipped_rows: usize,
    pub dropped: DropTally,
    pub regions_before_filter: usize,
    pub kept_regions: Vec<usize>,
    pub n_hours: usize,
}

pub fn ingest_trips(src: &TripSource) -> Result<(TrafficCube, IngestReport)> {
    if !src.path.exists() {
        bail_config!("trip file {} does not exist", src.path.display());
    }
    let (records, skipped) = read_trip_csv(&src.path)?;
    let mapper = match (&src.grid, &src.zones) {
        (Some(g), None) => RegionMapper::Grid(*g),
        (None, Some(z)) => RegionMapper::Zones(z.clone()),
        _ => bail_config!("trips source needs exactly one of grid or zones"),
    };
    let window = match (src.start, src.end) {
        (Some(s), Some(e)) => HourWindow::new(s, e)?,
        _ => HourWindow::covering(&records)?,
    };
    let (cube, dropped) = aggregate_trips(&records, &mapper, window)?;
    let before = cube.n_regions();
    let (cube, kept) = filter_regions(&cube, src.min_avg)?;
    let report = IngestReport {
        records: records.len(),
        skipped_rows: skipped,
        dropped,
        regions_before_filter: before,
        kept_regions: kept,
        n_hours: cube.n_hours(),
    };
    Ok((cube, report))
}

pub fn load_cube(src: &DataSource) -> Result<TrafficCube> {
    match src {
        DataSource::Synthetic(s) => generate_synthetic(s),
        DataSource::Trips(t) => Ok(ingest_trips(t)?.0),
        DataSource::Cube { path } => TrafficCube::load(path),
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    config_hash: &'a str,
    seeds: &'a [u64],
    config: &'a ExperimentConfig,
}

fn write_run_info(dir: &Path, command: Command, cfg: &ExperimentConfig, hash: &str) -> Result<()> {
    let info = RunInfo {
        command: command.name(),
        config_hash: hash,
        seeds: &cfg.seeds,
        config: cfg,
    };
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_vec_pretty(&info)?).map_err(|e| Error::io(&path, e))
}

/// Output directory of `command`.
pub fn command_dir(cfg: &ExperimentConfig, command: Command) -> PathBuf {
    match command {
        Command::Ingest | Command::Synth => cfg.output_dir.join("cube"),
        other => cfg.output_dir.join(other.name()),
    }
}

fn label(cfg: &ExperimentConfig, seed: u64) -> RunLabel {
    RunLabel {
        scenario: cfg.name.clone(),
        seed,
    }
}

/// Run `command`; returns the directory its outputs were written to.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let hash = cfg.hash()?;
    let dest = command_dir(cfg, command);
    match command {
        Command::Ingest => {
            let DataSource::Trips(src) = &cfg.data else {
                bail_config!("ingest needs a trips data source");
            };
            let (cube, report) = ingest_trips(src)?;
            write_dir_atomically(&dest, |dir| {
                cube.save(dir)?;
                let path = dir.join("ingest_report.json");
                fs::write(&path, serde_json::to_vec_pretty(&report)?)
                    .map_err(|e| Error::io(&path, e))?;
                write_run_info(dir, command, cfg, &hash)
            })?;
        }
        Command::Synth => {
            let DataSource::Synthetic(s) = &cfg.data else {
                bail_config!("synth needs a synthetic data source");
            };
            let cube = generate_synthetic(s)?;
            write_dir_atomically(&dest, |dir| {
                cube.save(dir)?;
                write_run_info(dir, command, cfg, &hash)
            })?;
        }
        Command::Train => {
            let data = prepare(cfg)?;
            let seed = cfg.seeds[0];
            let value = serde_json::to_value(cfg)?;
            write_dir_atomically(&dest, |dir| {
                let out = run_variant(
                    cfg.model,
                    cfg.variant,
                    &data,
                    &cfg.train_for(seed),
                    None,
                    &label(cfg, seed),
                    Some(RunOutput {
                        dir,
                        config: &value,
                    }),
                )?;
                let path = dir.join("fit.json");
                fs::write(&path, serde_json::to_vec_pretty(&out.fit)?)
                    .map_err(|e| Error::io(&path, e))?;
                write_run_info(dir, command, cfg, &hash)
            })?;
        }
        Command::Evaluate => {
            let data = prepare(cfg)?;
            let ck_dir = command_dir(cfg, Command::Train).join("checkpoint");
            if !ck_dir.exists() {
                bail_config!("no checkpoint at {}; run train first", ck_dir.display());
            }
            let ck = Checkpoint::load(&ck_dir)?;
            let report = evaluate_checkpoint(cfg, &ck, &data)?;
            write_dir_atomically(&dest, |dir| {
                write_results(dir, &[report], &hash)?;
                write_run_info(dir, command, cfg, &hash)
            })?;
        }
        Command::Ablate => {
            let data = prepare(cfg)?;
            let value = serde_json::to_value(cfg)?;
            write_dir_atomically(&dest, |dir| {
                let mut rows = Vec::new();
                for &seed in &cfg.seeds {
                    let cell = dir.join(format!("seed_{seed}"));
                    rows.extend(run_ablation(
                        cfg.model,
                        &cfg.variants,
                        &data,
                        &cfg.train_for(seed),
                        &label(cfg, seed),
                        Some(RunOutput {
                            dir: &cell,
                            config: &value,
                        }),
                    )?);
                }
                write_results(dir, &rows, &hash)?;
                write_run_info(dir, command, cfg, &hash)
            })?;
        }
        Command::Sweep => {
            let data = prepare(cfg)?;
            write_dir_atomically(&dest, |dir| sweep(cfg, &data, dir, &hash))?;
        }
    }
    Ok(dest)
}

fn prepare(cfg: &ExperimentConfig) -> Result<PreparedScenario> {
    let cube = load_cube(&cfg.data)?;
    PreparedScenario::build(&cube, cfg.scenario()?, cfg.geo_threshold_km)
}

/// Test metrics of a stored checkpoint, using the configured model and
/// variant. `runtime_s` is the inference time.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
    data: &PreparedScenario,
) -> Result<MetricReport> {
    let seed = cfg.seeds[0];
    let hidden = cfg.train.hidden;
    let actual: Vec<_> = data.test.iter().map(|s| s.y_raw.clone()).collect();
    let started = std::time::Instant::now();
    let preds = with_predictor!(cfg.model, hidden, seed, |p| {
        if cfg.variant.spec().revin {
            let t = ck.restore(RevIn::new(p), data.geo.clone())?;
            t.deploy_predict(&data.test, &ck.manifest.normalizer)?
        } else {
            let t = ck.restore(p, data.geo.clone())?;
            debug_assert_eq!(t.model.kind(), cfg.model);
            t.deploy_predict(&data.test, &ck.manifest.normalizer)?
        }
    });
    let (mae, rmse, per_region) = score(&preds, &actual)?;
    Ok(MetricReport {
        scenario: cfg.name.clone(),
        train_months: data.spec.train_months,
        model: cfg.model.name().to_string(),
        variant: cfg.variant.name().to_string(),
        seed,
        mae,
        rmse,
        runtime_s: started.elapsed().as_secs_f64(),
        per_region,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub val_mae: f64,
    pub test_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_hash: String,
    pub seed: u64,
    pub best_alpha: f64,
    pub best_beta: f64,
    pub best_val_mae: f64,
    pub cells: Vec<SweepCell>,
}

fn sweep(cfg: &ExperimentConfig, data: &PreparedScenario, dir: &Path, hash: &str) -> Result<()> {
    let seed = cfg.seeds[0];
    let base = cfg.train_for(seed);
    let stage = if cfg.variant.spec().covariate {
        let mut ccfg = base.classifier.clone();
        ccfg.seed = seed;
        Some(recency_stage(data, &ccfg)?)
    } else {
        None
    };
    let value = serde_json::to_value(cfg)?;
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    let (points, best) =
        crate::training::grid_search(&cfg.sweep.alphas, &cfg.sweep.betas, |alpha, beta| {
            let tc = TrainConfig {
                alpha,
                beta,
                ..base.clone()
            };
            let cell_dir = dir.join("cells").join(format!("alpha_{alpha}_beta_{beta}"));
            let out = run_variant(
                cfg.model,
                cfg.variant,
                data,
                &tc,
                stage.as_ref(),
                &label(cfg, seed),
                Some(RunOutput {
                    dir: &cell_dir,
                    config: &value,
                }),
            )?;
            cells.push(SweepCell {
                alpha,
                beta,
                val_mae: out.fit.best_val_mae,
                test_mae: out.report.mae,
            });
            rows.push(out.report);
            Ok(out.fit.best_val_mae)
        })?;
    debug_assert_eq!(points.len(), cells.len());
    write_results(dir, &rows, hash)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &cells {
        w.serialize(c)?;
    }
    write_file_atomically(
        &dir.join("grid.csv"),
        &w.into_inner().map_err(|e| Error::Data(e.to_string()))?,
    )?;
    let summary = SweepSummary {
        config_hash: hash.to_string(),
        seed,
        best_alpha: best.alpha,
        best_beta: best.beta,
        best_val_mae: best.val_mae,
        cells,
    };
    write_file_atomically(
        &dir.join("best.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    write_run_info(dir, Command::Sweep, cfg, hash)
}
