//! Command-line front end. Each subcommand runs one stage and persists its
//! artifacts under a run directory:
//!
//! ```text
//! config.json                     effective configuration
//! train.log                       JSON lines, one per logged step
//! checkpoints/{baseline,sgan,seg}.{bin,json}
//! seeds/{initial,final}/NNNNN.pgm
//! viz/*.pgm
//! metrics.json
//! ```

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sgan_core::attention::SaliencyMask;
use sgan_core::metrics::SeedQuality;
use sgan_core::model::Variant;
use sgan_core::nn::CamSource;

use crate::checkpoint;
use crate::config::PipelineConfig;
use crate::dataset_io::{load_dataset, read_seed_masks, write_dataset, write_seed_masks};
use crate::error::{PipelineError, Result};
use crate::pipeline::{self, Dataset, LogSink};
use crate::viz;

/// Environment variable holding the log filter, e.g. `debug`.
pub const LOG_ENV: &str = "SGAN_LOG";

#[derive(Debug, Parser)]
#[command(name = "sgan", version, about = "Saliency-guided attention for weakly supervised segmentation")]
pub struct Cli {
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set sgan.lambda=0.3`.
    /// The value is parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Shorthand for `--set variant=NAME`.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SeedStage {
    Initial,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Cls,
    Seg,
    Ensemble,
}

impl From<SourceArg> for CamSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Cls => CamSource::Cls,
            SourceArg::Seg => CamSource::Seg,
            SourceArg::Ensemble => CamSource::Ensemble,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VizKind {
    Cam,
    Attention,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attention-free classifier.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Mine seeds from a trained classifier.
    MakeSeeds {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum)]
        stage: SeedStage,
        /// Activation source for final seeds; defaults to the variant's.
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
    },
    /// Train the attention variant from the baseline and initial seeds.
    TrainSgan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Train the segmentation network on the final seeds.
    TrainSeg {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate the segmentation network and the seeds; writes metrics.json.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Write CAM or attention-column heatmaps for one sample.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// Sample index as listed in the manifest.
        #[arg(long)]
        index: usize,
        #[arg(long, value_enum)]
        what: VizKind,
        /// Feature-grid position `ROW,COL` for attention columns.
        #[arg(long, value_parser = parse_pixel)]
        pixel: Option<(usize, usize)>,
        #[arg(long, value_enum)]
        source: Option<SourceArg>,
    },
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or("expected ROW,COL")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((parse(r)?, parse(c)?))
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub semi_fraction: f64,
    /// Pooled over weakly annotated training images.
    pub initial_seeds: Option<SeedQuality>,
    pub final_seeds: Option<SeedQuality>,
    pub segmentation: sgan_core::metrics::MetricsReport,
}

/// Appends JSON lines to `train.log`, remembering the first write error.
pub struct JsonLinesLog {
    path: PathBuf,
    out: BufWriter<File>,
    error: Option<io::Error>,
}

impl JsonLinesLog {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(PipelineError::io(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            error: None,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(PipelineError::Io { path: self.path, source: e });
        }
        self.out.flush().map_err(PipelineError::io(&self.path))
    }
}

impl LogSink for JsonLinesLog {
    fn record(&mut self, entry: Value) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.out, "{entry}") {
                self.error = Some(e);
            }
        }
    }
}

/// Applies one `path=value` override to a configuration.
pub fn apply_override(cfg: &PipelineConfig, assignment: &str) -> Result<PipelineConfig> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| PipelineError::Config(format!("override `{assignment}` is not PATH=VALUE")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut tree = serde_json::to_value(cfg).expect("config serializes");
    let mut slot = &mut tree;
    for key in path.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| PipelineError::Config(format!("unknown configuration field `{path}`")))?;
    }
    *slot = value;
    serde_json::from_value(tree).map_err(|e| PipelineError::Config(format!("override `{assignment}`: {e}")))
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    for o in &cli.overrides {
        cfg = apply_override(&cfg, o)?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(v) = cli.variant {
        cfg.variant = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct RunDir(PathBuf);

impl RunDir {
    fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(PipelineError::io(path))?;
        Ok(Self(path.to_path_buf()))
    }

    fn checkpoint(&self, name: &str) -> PathBuf {
        self.0.join("checkpoints").join(name)
    }

    fn seeds(&self, stage: SeedStage) -> PathBuf {
        self.0.join("seeds").join(match stage {
            SeedStage::Initial => "initial",
            SeedStage::Final => "final",
        })
    }

    fn log(&self) -> Result<JsonLinesLog> {
        JsonLinesLog::append(&self.0.join("train.log"))
    }

    fn save_config(&self, cfg: &PipelineConfig) -> Result<()> {
        cfg.save(&self.0.join("config.json"))
    }

    /// The classifier that final seeds and visualisations come from.
    fn classifier(&self, cfg: &PipelineConfig) -> Result<sgan_core::model::ClassifierModel<f32>> {
        let name = if cfg.variant == Variant::Baseline { "baseline" } else { "sgan" };
        checkpoint::load_classifier(&self.checkpoint(name))
    }
}

fn load_data(path: &Path, cfg: &PipelineConfig) -> Result<Dataset> {
    let data = load_dataset(path)?;
    if data.num_classes != cfg.dataset.num_classes {
        return Err(PipelineError::Config(format!(
            "dataset has {} classes, configuration expects {}",
            data.num_classes, cfg.dataset.num_classes
        )));
    }
    Ok(data)
}

fn strong_images(cfg: &PipelineConfig, data: &Dataset) -> Vec<bool> {
    pipeline::semi_indices(data.train.len(), cfg.semi_fraction, cfg.seed)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(PipelineError::io(path))
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(PipelineError::Config(e.to_string())),
    };
    let cfg = resolve_config(&cli)?;
    execute(&cli.command, &cfg)
}

pub fn execute(command: &Command, cfg: &PipelineConfig) -> Result<()> {
    match command {
        Command::GenData { out } => {
            let samples = sgan_core::synth::generate_dataset(&cfg.dataset)?;
            write_dataset(out, &samples, cfg.dataset.num_classes, Some(&cfg.dataset))?;
            log::info!("wrote {} samples to {}", samples.len(), out.display());
        }
        Command::TrainBaseline { data, run } => {
            let data = load_data(data, cfg)?;
            let dir = RunDir::create(run)?;
            dir.save_config(cfg)?;
            let mut log = dir.log()?;
            let model = pipeline::train_baseline(cfg, &data, &mut log)?;
            log.finish()?;
            checkpoint::save_classifier(&dir.checkpoint("baseline"), &model)?;
            log::info!(
                "baseline label accuracy {:.4}",
                pipeline::label_accuracy(cfg, &model, &data.train)?
            );
        }
        Command::MakeSeeds { data, run, stage, source } => {
            let data = load_data(data, cfg)?;
            let dir = RunDir::create(run)?;
            let strong = strong_images(cfg, &data);
            let seeds = match stage {
                SeedStage::Initial => {
                    let baseline = checkpoint::load_classifier(&dir.checkpoint("baseline"))?;
                    pipeline::initial_seed_masks(cfg, &baseline, &data, &strong)?
                }
                SeedStage::Final => {
                    let model = dir.classifier(cfg)?;
                    let source = source.map_or(cfg.variant.cam_source(), CamSource::from);
                    pipeline::final_seed_masks(cfg, &model, &data, &strong, source)?
                }
            };
            write_seed_masks(&dir.seeds(*stage), &data, &seeds)?;
        }
        Command::TrainSgan { data, run } => {
            if cfg.variant == Variant::Baseline {
                return Err(PipelineError::Config("train-sgan needs a non-baseline variant".into()));
            }
            let data = load_data(data, cfg)?;
            let dir = RunDir::create(run)?;
            dir.save_config(cfg)?;
            let baseline = checkpoint::load_classifier(&dir.checkpoint("baseline"))?;
            let seeds = read_seed_masks(&dir.seeds(SeedStage::Initial), &data)?;
            let strong = strong_images(cfg, &data);
            let mut log = dir.log()?;
            let model = pipeline::train_sgan(cfg, &baseline, cfg.variant, &data, &seeds, &strong, &mut log)?;
            log.finish()?;
            checkpoint::save_classifier(&dir.checkpoint("sgan"), &model)?;
            log::info!("gamma after training {:?}", model.gamma());
        }
        Command::TrainSeg { data, run } => {
            let data = load_data(data, cfg)?;
            let dir = RunDir::create(run)?;
            dir.save_config(cfg)?;
            let baseline = checkpoint::load_classifier(&dir.checkpoint("baseline"))?;
            let seeds = read_seed_masks(&dir.seeds(SeedStage::Final), &data)?;
            let mut log = dir.log()?;
            let seg = pipeline::train_seg(cfg, &baseline, &data, &seeds, &mut log)?;
            log.finish()?;
            checkpoint::save_seg(&dir.checkpoint("seg"), &seg)?;
        }
        Command::Eval { data, run } => {
            let data = load_data(data, cfg)?;
            let dir = RunDir::create(run)?;
            let seg = checkpoint::load_seg(&dir.checkpoint("seg"))?;
            let weak: Vec<bool> = strong_images(cfg, &data).iter().map(|s| !s).collect();
            let quality = |stage| -> Result<Option<SeedQuality>> {
                let path = dir.seeds(stage);
                if !path.exists() {
                    return Ok(None);
                }
                let seeds = read_seed_masks(&path, &data)?;
                Ok(Some(pipeline::seed_quality(&seeds, &data, &weak)?))
            };
            let report = EvalReport {
                variant: cfg.variant,
                seed: cfg.seed,
                semi_fraction: cfg.semi_fraction,
                initial_seeds: quality(SeedStage::Initial)?,
                final_seeds: quality(SeedStage::Final)?,
                segmentation: pipeline::evaluate_val(&seg, &data)?,
            };
            write_json(&dir.0.join("metrics.json"), &report)?;
            log::info!("val mIoU {:.4}", report.segmentation.miou);
        }
        Command::Viz {
            data,
            run,
            index,
            what,
            pixel,
            source,
        } => {
            let data = load_data(data, cfg)?;
            let dir = RunDir::create(run)?;
            let sample = data
                .train
                .iter()
                .chain(&data.val)
                .find(|s| s.index == *index)
                .ok_or_else(|| PipelineError::Config(format!("no sample with index {index}")))?;
            let model = dir.classifier(cfg)?;
            let mask = SaliencyMask::from_saliency(
                &sample.saliency,
                sample.height,
                sample.width,
                cfg.backbone.stride(),
                cfg.sgan.saliency_threshold,
            )?;
            let out = dir.0.join("viz");
            fs::create_dir_all(&out).map_err(PipelineError::io(&out))?;
            match what {
                VizKind::Cam => {
                    let source = source.map_or(model.variant.cam_source(), CamSource::from);
                    for (z, img) in viz::cam_heatmaps(&model, sample.network_input(), &sample.labels, Some(&mask), source)? {
                        img.write(&out.join(format!("cam_{index:05}_class{}.pgm", z + 1)))?;
                    }
                }
                VizKind::Attention => {
                    let (r, c) = pixel.ok_or_else(|| PipelineError::Config("--pixel ROW,COL is required for attention".into()))?;
                    let img = viz::attention_column(&model, sample.network_input(), Some(&mask), r, c)?;
                    img.write(&out.join(format!("attention_{index:05}_{r}_{c}.pgm")))?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_patch_nested_fields() {
        let cfg = PipelineConfig::default();
        let cfg = apply_override(&cfg, "sgan.lambda=0.4").unwrap();
        assert_eq!(cfg.sgan.lambda, 0.4);
        let cfg = apply_override(&cfg, "variant=sgan-seed").unwrap();
        assert_eq!(cfg.variant, Variant::Seed);
        let cfg = apply_override(&cfg, "backbone.block_channels=[4,8]").unwrap();
        assert_eq!(cfg.backbone.block_channels, vec![4, 8]);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        let cfg = PipelineConfig::default();
        for bad in ["sgan.nope=1", "sgan.lambda", "training.batch_size=\"x\""] {
            assert_eq!(apply_override(&cfg, bad).unwrap_err().exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn usage_errors_map_to_exit_code_two() {
        assert_eq!(run(["sgan", "frobnicate"]).unwrap_err().exit_code(), 2);
        assert_eq!(run(["sgan", "--set", "sgan.lambda=-1", "gen-data", "--out", "x"]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_checkpoint_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let runp = dir.path().join("run");
        let d = data.to_str().unwrap();
        let r = runp.to_str().unwrap();
        let small = ["--set", "dataset.train=2", "--set", "dataset.val=1"];
        let mut args = vec!["sgan"];
        args.extend(small);
        args.extend(["gen-data", "--out", d]);
        run(args).unwrap();
        let mut args = vec!["sgan"];
        args.extend(small);
        args.extend(["make-seeds", "--data", d, "--run", r, "--stage", "initial"]);
        let err = run(args).unwrap_err();
        assert!(matches!(err, PipelineError::Missing(_)));
        assert_eq!(err.exit_code(), 3);
    }
}
