//! End-to-end experiment: data → variants → four trained models →
//! visualizations → comparison grids, all under one output directory.
//!
//! Layout under the output root:
//!
//! ```text
//! config.json              resolved experiment config
//! status.json              per-stage pending/ok/failed
//! data/                    source dataset (images/, masks/, labels.csv, classes.json)
//! variants/<kind>/         variant training set plus variant.json
//! models/<kind>.fvlb       checkpoints
//! metrics.csv, history.json
//! viz/<row>/<class>/       image.ppm, trace.csv, result.json
//! figure4_analog.{ppm,json}, figure2_analog.{ppm,json}, report.csv
//! ```
//!
//! Every stochastic step draws its seed from `derive_seed(master_seed,
//! stage, index)`, so seeds inside the nested configs are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::NormConfig;
use crate::dataset::{
    generate_synthetic, load_dataset, load_voc_style, save_dataset, split, ClassTable, Dataset, SplitFractions, Splits,
    SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::featviz::{class_footprint, foreground_energy, visualize, AppliedShift, VizConfig};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ResNetLite};
use crate::pnm::{decode_ppm, dequantize, encode_ppm, quantize};
use crate::report::{render_grid, report_csv, GridCell, GridReport, SEPARATOR};
use crate::seed::{derive_seed, fnv1a64};
use crate::tensor::Tensor;
use crate::training::{train_variant, write_metrics, HistoryEntry, Metrics, SuiteSeeds, TrainConfig};
use crate::transforms::{build_variant, rebuild_variant, NoiseParams, VariantKind, VariantRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// A directory with `images/` and `masks/` in the VOC convention.
    VocStyle {
        path: PathBuf,
        classes: Vec<String>,
        resolution: usize,
    },
}

/// Architecture knobs; resolution and class count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub norm: NormConfig,
}

impl Default for Architecture {
    fn default() -> Self {
        let cfg = ModelConfig::new(64, 2);
        Architecture {
            widths: cfg.widths,
            blocks_per_stage: cfg.blocks_per_stage,
            norm: cfg.norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassChoice {
    /// The first `n` classes of the class table.
    Count(usize),
    Names(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DataSource,
    pub split: SplitFractions,
    pub model: Architecture,
    pub train: TrainConfig,
    pub noise: NoiseParams,
    /// Template for the regularized visualizations; target class and seed
    /// are filled in per cell.
    pub viz: VizConfig,
    pub visualize_classes: ClassChoice,
    pub output_dir: Option<PathBuf>,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DataSource::Synthetic(SyntheticConfig::default()),
            split: SplitFractions::default(),
            model: Architecture::default(),
            train: TrainConfig::default(),
            noise: NoiseParams::default(),
            viz: VizConfig::default(),
            visualize_classes: ClassChoice::Count(4),
            output_dir: None,
            master_seed: 0,
        }
    }
}

/// Seeds for every stage, derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub noise: u64,
    pub variant: u64,
    pub init: u64,
    pub train: u64,
    pub visualize: u64,
}

impl StageSeeds {
    pub fn derive(master: u64) -> Self {
        StageSeeds {
            data: derive_seed(master, "generate-data", 0),
            split: derive_seed(master, "split", 0),
            noise: derive_seed(master, "noise", 0),
            variant: derive_seed(master, "build-variants", 0),
            init: derive_seed(master, "init", 0),
            train: derive_seed(master, "train", 0),
            visualize: derive_seed(master, "visualize", 0),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::derive(self.master_seed)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DataSource::Synthetic(cfg) => cfg.validate()?,
            DataSource::VocStyle { classes, resolution, .. } => {
                ClassTable::new(classes.clone()).map_err(|e| Error::Config(e.to_string()))?;
                if *resolution == 0 {
                    return Err(Error::Config("resolution must be positive".into()));
                }
            }
        }
        let SplitFractions { train, val, test } = self.split;
        if [train, val, test].iter().any(|f| !(*f > 0.0)) || ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be positive and sum to 1: {:?}", self.split)));
        }
        self.model_config()?.validate()?;
        self.train.validate()?;
        self.viz.validate()?;
        self.noise.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.chosen_classes(&self.class_table()?)?;
        Ok(())
    }

    pub fn class_table(&self) -> Result<ClassTable> {
        match &self.dataset {
            DataSource::Synthetic(cfg) => Ok(cfg.class_table()),
            DataSource::VocStyle { classes, .. } => ClassTable::new(classes.clone()).map_err(|e| Error::Config(e.to_string())),
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let (resolution, classes) = match &self.dataset {
            DataSource::Synthetic(cfg) => (cfg.resolution, cfg.classes),
            DataSource::VocStyle { classes, resolution, .. } => (*resolution, classes.len()),
        };
        Ok(ModelConfig {
            resolution,
            classes,
            widths: self.model.widths.clone(),
            blocks_per_stage: self.model.blocks_per_stage,
            norm: self.model.norm,
        })
    }

    pub fn chosen_classes(&self, table: &ClassTable) -> Result<Vec<usize>> {
        let chosen: Vec<usize> = match &self.visualize_classes {
            ClassChoice::Count(n) if *n == 0 || *n > table.len() => {
                return Err(Error::Config(format!("cannot visualize {n} of {} classes", table.len())))
            }
            ClassChoice::Count(n) => (0..*n).collect(),
            ClassChoice::Names(names) => names
                .iter()
                .map(|n| table.index_of(n).ok_or_else(|| Error::Config(format!("unknown class {n:?}"))))
                .collect::<Result<_>>()?,
        };
        if chosen.is_empty() {
            return Err(Error::Config("no classes chosen for visualization".into()));
        }
        Ok(chosen)
    }

    /// Training settings with the derived seed applied.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seeds().train,
            ..self.train.clone()
        }
    }

    pub fn resolved_noise(&self) -> NoiseParams {
        NoiseParams {
            seed: self.seeds().noise,
            ..self.noise
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageState {
    Pending,
    Ok,
    Failed,
}

pub const STAGES: [&str; 5] = ["generate-data", "build-variants", "train", "visualize", "report"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub name: String,
    pub state: StageState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub stages: Vec<StageStatus>,
}

impl Default for Status {
    fn default() -> Self {
        Status {
            stages: STAGES
                .iter()
                .map(|s| StageStatus {
                    name: s.to_string(),
                    state: StageState::Pending,
                    error: None,
                })
                .collect(),
        }
    }
}

impl Status {
    pub fn state(&self, stage: &str) -> Option<StageState> {
        self.stages.iter().find(|s| s.name == stage).map(|s| s.state)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSummary {
    pub images: usize,
    pub resolution: usize,
    pub class_counts: Vec<(String, usize)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CellResult {
    checkpoint_id: String,
    variant: VariantKind,
    class: String,
    config: VizConfig,
    shifts: Vec<AppliedShift>,
    final_raw_logit: Option<f32>,
}

/// Row label of the unregularized visualizations.
const UNREGULARIZED_ROW: &str = "unregularized";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn remove_dir(path: &Path) -> Result<()> {
    match fs::remove_dir_all(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn is_nonempty_dir(path: &Path) -> bool {
    fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn checkpoint_id(kind: VariantKind, bytes: &[u8]) -> String {
    format!("{kind}@{:016x}", fnv1a64(bytes))
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
}

impl Experiment {
    pub fn new(config: ExperimentConfig, out: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        Ok(Experiment { config, out: out.into() })
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    pub fn read_status(&self) -> Status {
        read(&self.path("status.json"))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    fn write_status(&self, status: &Status) -> Result<()> {
        write(&self.path("status.json"), serde_json::to_string_pretty(status)? + "\n")
    }

    /// Runs one stage, recording the outcome. Starting a stage resets it and
    /// everything downstream to pending.
    fn stage<T>(&self, name: &str, body: impl FnOnce() -> Result<T>) -> Result<T> {
        let index = STAGES.iter().position(|s| *s == name).expect("known stage");
        let mut status = self.read_status();
        for s in &mut status.stages[index..] {
            s.state = StageState::Pending;
            s.error = None;
        }
        self.write_status(&status)?;
        let outcome = body();
        let entry = &mut status.stages[index];
        match &outcome {
            Ok(_) => entry.state = StageState::Ok,
            Err(e) => {
                entry.state = StageState::Failed;
                entry.error = Some(e.to_string());
            }
        }
        self.write_status(&status)?;
        outcome
    }

    fn write_config(&self) -> Result<()> {
        write(&self.path("config.json"), self.config.to_json()?)
    }

    fn source(&self) -> Result<Dataset> {
        load_dataset(&self.path("data"))
    }

    fn splits(&self, data: &Dataset) -> Result<Splits> {
        split(data, self.config.split, self.config.seeds().split)
    }

    /// Writes the source dataset to `data/`. An existing non-empty `data/`
    /// is an error unless `force` is set, in which case it is replaced.
    pub fn generate_data(&self, force: bool) -> Result<DataSummary> {
        let data_dir = self.path("data");
        if is_nonempty_dir(&data_dir) && !force {
            return Err(Error::Config(format!(
                "{} already exists and is not empty (use --force to overwrite)",
                data_dir.display()
            )));
        }
        self.write_config()?;
        self.stage("generate-data", || {
            let data = match &self.config.dataset {
                DataSource::Synthetic(cfg) => {
                    let cfg = SyntheticConfig {
                        seed: self.config.seeds().data,
                        ..cfg.clone()
                    };
                    let data = generate_synthetic(&cfg)?;
                    remove_dir(&data_dir)?;
                    write(&data_dir.join("synthetic.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
                    data
                }
                DataSource::VocStyle { path, resolution, .. } => {
                    let data = load_voc_style(path, &self.config.class_table()?, *resolution)?;
                    if data.is_empty() {
                        return Err(Error::Dataset(format!("{} holds no images", path.display())));
                    }
                    remove_dir(&data_dir)?;
                    data
                }
            };
            save_dataset(&data, &data_dir)?;
            Ok(DataSummary {
                images: data.len(),
                resolution: data.resolution().unwrap_or(0),
                class_counts: data.classes.names().iter().cloned().zip(data.class_counts()).collect(),
            })
        })
    }

    /// Splits the source data and writes the four variants of the training
    /// split to `variants/<kind>/`.
    pub fn build_variants(&self) -> Result<()> {
        self.write_config()?;
        self.stage("build-variants", || {
            let data = self.source()?;
            let splits = self.splits(&data)?;
            remove_dir(&self.path("variants"))?;
            let noise = self.config.resolved_noise();
            let seed = self.config.seeds().variant;
            VariantKind::ALL.par_iter().try_for_each(|&kind| {
                let variant = build_variant(&splits.train, kind, &noise, seed)?;
                let dir = self.path("variants").join(kind.as_str());
                save_dataset(&variant.data, &dir)?;
                write(&dir.join("variant.json"), serde_json::to_string_pretty(&variant.record)? + "\n")
            })
        })
    }

    /// Trains one model per variant from a shared initialization and writes
    /// checkpoints, `metrics.csv` and `history.json`.
    pub fn train(&self) -> Result<Vec<(VariantKind, Metrics)>> {
        self.write_config()?;
        self.stage("train", || {
            let data = self.source()?;
            let splits = self.splits(&data)?;
            let seeds = self.config.seeds();
            let train_cfg = self.config.resolved_train();
            let initial = ResNetLite::init(self.config.model_config()?, seeds.init)?;
            let suite = SuiteSeeds {
                init: seeds.init,
                variant: seeds.variant,
            };
            let runs = VariantKind::ALL
                .par_iter()
                .map(|&kind| {
                    let path = self.path("variants").join(kind.as_str()).join("variant.json");
                    let record: VariantRecord = serde_json::from_slice(&read(&path)?)?;
                    if record.kind != kind {
                        return Err(Error::Dataset(format!("{} describes a {} variant", path.display(), record.kind)));
                    }
                    let variant = rebuild_variant(&splits.train, &record)?;
                    train_variant(initial.clone(), &variant.data, &splits.val, &train_cfg, record, suite)
                })
                .collect::<Result<Vec<_>>>()?;
            remove_dir(&self.path("models"))?;
            let mut entries = Vec::new();
            for run in &runs {
                let kind = run.record.kind;
                let path = self.path("models").join(format!("{kind}.fvlb"));
                write(&path, run.checkpoint.to_bytes()?)?;
                entries.push(HistoryEntry {
                    variant: kind,
                    train_config: train_cfg.clone(),
                    metrics: run.metrics.clone(),
                });
            }
            write_metrics(&self.out, &entries)?;
            Ok(runs.into_iter().map(|r| (r.record.kind, r.metrics)).collect())
        })
    }

    fn load_models(&self) -> Result<Vec<(VariantKind, Checkpoint, String)>> {
        VariantKind::ALL
            .iter()
            .map(|&kind| {
                let path = self.path("models").join(format!("{kind}.fvlb"));
                let bytes = read(&path)?;
                let ck = Checkpoint::from_bytes(&bytes)?;
                Ok((kind, ck, checkpoint_id(kind, &bytes)))
            })
            .collect()
    }

    fn cell_dir(&self, row: &str, class: &str) -> PathBuf {
        self.path("viz").join(row).join(class)
    }

    /// Regularized visualizations for every (variant, chosen class) and
    /// unregularized ones from the standard model.
    pub fn visualize(&self) -> Result<()> {
        self.write_config()?;
        self.stage("visualize", || {
            let models = self.load_models()?;
            let table = &models[0].1.meta.classes;
            let chosen = self.config.chosen_classes(table)?;
            let master = self.config.seeds().visualize;
            let mut jobs = Vec::new();
            for (m, (kind, _, _)) in models.iter().enumerate() {
                for &class in &chosen {
                    let cfg = VizConfig {
                        target_class: class,
                        seed: derive_seed(master, kind.as_str(), class as u64),
                        ..self.config.viz.clone()
                    };
                    jobs.push((m, kind.as_str(), class, cfg));
                }
            }
            for &class in &chosen {
                let cfg = VizConfig {
                    target_class: class,
                    iterations: self.config.viz.iterations,
                    step: self.config.viz.step,
                    init: self.config.viz.init,
                    seed: derive_seed(master, UNREGULARIZED_ROW, class as u64),
                    ..VizConfig::unregularized()
                };
                jobs.push((0, UNREGULARIZED_ROW, class, cfg));
            }
            remove_dir(&self.path("viz"))?;
            jobs.par_iter().try_for_each(|(m, row, class, cfg)| {
                let (kind, ck, id) = &models[*m];
                let mut result = visualize(&ck.model, cfg)?;
                result.checkpoint_id = Some(id.clone());
                let name = table.name(*class).expect("chosen class exists");
                let dir = self.cell_dir(row, name);
                write(&dir.join("image.ppm"), result.to_ppm()?)?;
                write(&dir.join("trace.csv"), result.trace_csv())?;
                let meta = CellResult {
                    checkpoint_id: id.clone(),
                    variant: *kind,
                    class: name.to_string(),
                    config: result.config.clone(),
                    shifts: result.shifts.clone(),
                    final_raw_logit: result.trace.last().map(|r| r.raw_logit),
                };
                write(&dir.join("result.json"), serde_json::to_string_pretty(&meta)? + "\n")
            })
        })
    }

    fn load_cell(&self, row: &str, class: &str) -> Result<(Tensor, CellResult, String)> {
        let dir = self.cell_dir(row, class);
        let (w, h, rgb) = decode_ppm(&read(&dir.join("image.ppm"))?)?;
        let mut chw = vec![0.0f32; 3 * w * h];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * w * h + p] = dequantize(px[c]);
            }
        }
        let meta: CellResult = serde_json::from_slice(&read(&dir.join("result.json"))?)?;
        let rel = format!("viz/{row}/{class}/image.ppm");
        Ok((Tensor::new([3, h, w], chw)?, meta, rel))
    }

    fn grid(&self, caption: &str, rows: &[&str], classes: &[String], footprints: &[Vec<bool>]) -> Result<(Tensor, GridReport)> {
        let mut images = Vec::new();
        let mut cells = Vec::new();
        for row in rows {
            let mut row_images = Vec::new();
            let mut row_cells = Vec::new();
            for (class, footprint) in classes.iter().zip(footprints) {
                let (image, meta, source) = self.load_cell(row, class)?;
                row_cells.push(GridCell {
                    source,
                    checkpoint_id: meta.checkpoint_id,
                    foreground_energy: foreground_energy(&image, footprint)?,
                });
                row_images.push(image);
            }
            images.push(row_images);
            cells.push(row_cells);
        }
        let grid = render_grid(&images)?;
        let report = GridReport {
            caption: caption.to_string(),
            rows: rows.iter().map(|r| r.to_string()).collect(),
            columns: classes.to_vec(),
            cell_width: images[0][0].shape()[2],
            cell_height: images[0][0].shape()[1],
            separator: SEPARATOR,
            cells,
        };
        Ok((grid, report))
    }

    /// Assembles both figure grids and `report.csv` from the visualizations.
    pub fn report(&self) -> Result<()> {
        self.write_config()?;
        self.stage("report", || {
            let data = self.source()?;
            let chosen = self.config.chosen_classes(&data.classes)?;
            let names: Vec<String> = chosen.iter().map(|&c| data.classes.name(c).expect("valid").to_string()).collect();
            let footprints = chosen
                .iter()
                .map(|&c| {
                    let masks: Vec<&[u8]> = data.images.iter().filter(|im| im.label == c).map(|im| im.mask.as_slice()).collect();
                    class_footprint(&masks, c)
                })
                .collect::<Result<Vec<_>>>()?;
            let variant_rows: Vec<&str> = VariantKind::ALL.iter().map(|k| k.as_str()).collect();
            let (fig4, rep4) = self.grid(
                "regularized class visualizations; rows are training variants",
                &variant_rows,
                &names,
                &footprints,
            )?;
            let (fig2, rep2) = self.grid(
                "unregularized class visualizations of the standard model",
                &[UNREGULARIZED_ROW],
                &names,
                &footprints,
            )?;
            for (name, image, rep) in [("figure4_analog", &fig4, &rep4), ("figure2_analog", &fig2, &rep2)] {
                write(&self.path(format!("{name}.ppm")), tensor_ppm(image))?;
                write(&self.path(format!("{name}.json")), serde_json::to_string_pretty(rep)? + "\n")?;
            }
            write(&self.path("report.csv"), report_csv(&[("figure4_analog", &rep4), ("figure2_analog", &rep2)]))
        })
    }

    /// All stages in order; stops at the first failure.
    pub fn run(&self, force: bool) -> Result<()> {
        self.generate_data(force)?;
        self.build_variants()?;
        self.train()?;
        self.visualize()?;
        self.report()
    }
}

fn tensor_ppm(x: &Tensor) -> Vec<u8> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let d = x.data();
    let rgb: Vec<u8> = (0..h * w).flat_map(|p| (0..3).map(move |c| quantize(d[c * h * w + p]))).collect();
    encode_ppm(w, h, &rgb)
}

/// Saves a checkpoint where the experiment layout expects it.
pub fn checkpoint_path(out: &Path, kind: VariantKind) -> PathBuf {
    out.join("models").join(format!("{kind}.fvlb"))
}

pub fn load_variant_checkpoint(out: &Path, kind: VariantKind) -> Result<Checkpoint> {
    load_checkpoint(&checkpoint_path(out, kind))
}

pub fn store_variant_checkpoint(out: &Path, kind: VariantKind, checkpoint: &Checkpoint) -> Result<()> {
    let path = checkpoint_path(out, kind);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    save_checkpoint(checkpoint, &path)
}
