//! Training runs and the ablation matrix, with reproducibility manifests.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::ArchConfig;
use crate::detect::DetectionRecord;
use crate::error::{Result, TdmError};
use crate::metrics::MetricReport;
use crate::model::{Detector, Variant};
use crate::synthdata::{read_dataset, write_json_lines, Dataset, ANNOTATIONS_FILE};
use crate::train::{
    advance, evaluate_detector, pretrain_classifier, samples, train_stage, Classifier, GrowOptions, LossRow,
    PretrainConfig, StageSchedule, DEFAULT_MOMENTUM,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// Random bottom-up weights.
    Scratch,
    /// Bottom-up weights from the shape-classification pretrain.
    #[default]
    ClassificationCheckpoint,
    /// A trained detector; stages continue from its stage.
    DetectionCheckpoint,
}

impl InitKind {
    pub fn parse(s: &str) -> Result<InitKind> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| TdmError::Invalid(format!("unknown init {}", s)))
    }
}

fn d_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn d_size_scale() -> f64 {
    0.375
}

/// One training run: a variant trained through a contiguous list of stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub arch: PathBuf,
    pub variant: Variant,
    pub stages: Vec<StageSchedule>,
    pub seed: u64,
    pub train_data: PathBuf,
    #[serde(default)]
    pub val_data: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub init: InitKind,
    /// Classification or detection checkpoint; a classification init
    /// without one runs the pretrain.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub grow: GrowOptions,
    /// Size-bucket multiplier used in evaluation.
    #[serde(default = "d_size_scale")]
    pub size_scale: f64,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parse a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| TdmError::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| TdmError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.arch);
        resolve(base, &mut cfg.train_data);
        resolve(base, &mut cfg.output_dir);
        if let Some(v) = &mut cfg.val_data {
            resolve(base, v);
        }
        if let Some(c) = &mut cfg.init_checkpoint {
            resolve(base, c);
        }
        Ok(cfg)
    }

    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        let bad = |m: String| Err(TdmError::Config(m));
        if self.stages.is_empty() {
            return bad("stage list is empty".into());
        }
        for s in &self.stages {
            s.validate()?;
        }
        for w in self.stages.windows(2) {
            if w[1].pair_index != w[0].pair_index + 1 {
                return bad(format!(
                    "stages must be contiguous: {} follows {}",
                    w[1].pair_index, w[0].pair_index
                ));
            }
        }
        let last = self.stages.last().expect("non-empty").pair_index;
        let max = match self.variant {
            Variant::Baseline => 0,
            Variant::SkipPool => 1,
            Variant::Tdm | Variant::NoLateral => arch.tdm.pairs.len(),
        };
        if last > max {
            return bad(format!("{} has no stage {} (max {})", self.variant, last, max));
        }
        if self.init == InitKind::DetectionCheckpoint && self.init_checkpoint.is_none() {
            return bad("detection-checkpoint init needs init_checkpoint".into());
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return bad("momentum must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Hash of everything that determines the run's numbers (the output
    /// directory is excluded).
    pub fn identity_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex(&Sha256::digest(serde_json::to_vec(&c)?)))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| TdmError::io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Hash of the annotation file and every image, in record order.
pub fn dataset_hash(dir: &Path, ds: &Dataset) -> Result<String> {
    let mut h = Sha256::new();
    let ann = dir.join(ANNOTATIONS_FILE);
    if ann.exists() {
        h.update(fs::read(&ann).map_err(|e| TdmError::io(&ann, e))?);
    }
    for img in &ds.images {
        h.update(&img.data);
    }
    Ok(hex(&h.finalize()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub code_version: String,
    pub real_type: String,
    pub seed: u64,
    pub variant: Variant,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub arch_sha256: String,
    pub train_data_sha256: String,
    pub val_data_sha256: Option<String>,
    pub init_checkpoint_sha256: Option<String>,
}

pub fn real_type() -> &'static str {
    if std::mem::size_of::<crate::tensor::Real>() == 8 {
        "f64"
    } else {
        "f32"
    }
}

pub fn checkpoint_name(variant: Variant, stage: usize) -> String {
    format!("{}_stage{}.ckpt", variant, stage)
}

#[derive(Clone, Debug)]
pub struct StageResult {
    pub stage: usize,
    pub checkpoint: PathBuf,
    pub report: Option<MetricReport>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub manifest: Manifest,
    pub stages: Vec<StageResult>,
    pub detector: Detector,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| TdmError::io(path, e))
}

/// Keep the header and rows of stages `<= stage` from an existing trace.
fn truncate_trace(path: &Path, stage: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(vec![LossRow::CSV_HEADER.to_string()]);
    }
    let text = fs::read_to_string(path).map_err(|e| TdmError::io(path, e))?;
    let mut keep = vec![LossRow::CSV_HEADER.to_string()];
    for line in text.lines().skip(1) {
        let s: usize = line
            .split(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| TdmError::Parse {
                path: path.display().to_string(),
                line: keep.len() + 1,
                column: 0,
                message: "loss row without a stage column".into(),
            })?;
        if s <= stage {
            keep.push(line.to_string());
        }
    }
    Ok(keep)
}

/// Starting detector from the configured init.
fn initial_detector(cfg: &ExperimentConfig, arch: &ArchConfig, out: &Path) -> Result<Detector> {
    match cfg.init {
        InitKind::Scratch => Detector::baseline(arch, cfg.seed),
        InitKind::DetectionCheckpoint => {
            let path = cfg.init_checkpoint.as_ref().expect("validated");
            Checkpoint::load(path)?.into_detector()
        }
        InitKind::ClassificationCheckpoint => {
            let classifier = match &cfg.init_checkpoint {
                Some(path) => match Checkpoint::load(path)? {
                    Checkpoint {
                        meta: CheckpointMeta::Classifier { arch: a, num_classes },
                        params,
                    } => Classifier {
                        arch: a,
                        num_classes,
                        params,
                    },
                    _ => {
                        return Err(TdmError::Invalid(format!(
                            "{} is not a classification checkpoint",
                            path.display()
                        )))
                    }
                },
                None => {
                    let (c, _) = pretrain_classifier(arch, &cfg.pretrain, cfg.seed)?;
                    save_classifier(&c, &out.join("pretrain.ckpt"))?;
                    c
                }
            };
            if classifier.arch.backbone != arch.backbone {
                return Err(TdmError::Invalid("classification checkpoint has a different backbone".into()));
            }
            classifier.to_baseline(cfg.seed)
        }
    }
}

pub fn save_classifier(c: &Classifier, path: &Path) -> Result<()> {
    Checkpoint {
        meta: CheckpointMeta::Classifier {
            arch: c.arch.clone(),
            num_classes: c.num_classes,
        },
        params: c.params.clone(),
    }
    .save(path)
}

/// Train `cfg.variant` through its stages. With `resume`, start from a
/// stage checkpoint of this run and skip the stages it already covers;
/// the loss trace keeps the earlier rows, so it matches an uninterrupted run.
pub fn run_experiment(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunSummary> {
    let arch = ArchConfig::load(&cfg.arch)?;
    cfg.validate(&arch)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| TdmError::io(out, e))?;
    let train_ds = read_dataset(&cfg.train_data)?;
    let val_ds = match &cfg.val_data {
        Some(p) => Some((read_dataset(p)?, p)),
        None => None,
    };
    let manifest = Manifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        real_type: real_type().to_string(),
        seed: cfg.seed,
        variant: cfg.variant,
        config: cfg.clone(),
        config_sha256: cfg.identity_hash()?,
        arch_sha256: sha256_file(&cfg.arch)?,
        train_data_sha256: dataset_hash(&cfg.train_data, &train_ds)?,
        val_data_sha256: match &val_ds {
            Some((d, p)) => Some(dataset_hash(p, d)?),
            None => None,
        },
        init_checkpoint_sha256: match &cfg.init_checkpoint {
            Some(p) => Some(sha256_file(p)?),
            None => None,
        },
    };
    write_json(&out.join("manifest.json"), &manifest)?;

    // `done`: the starting detector is already trained through this stage.
    let (mut det, done) = match resume {
        Some(path) => {
            let d = Checkpoint::load(path)?.into_detector()?;
            let s = d.stage();
            (d, Some(s))
        }
        None => {
            let d = initial_detector(cfg, &arch, out)?;
            let s = d.stage();
            (d, (cfg.init == InitKind::DetectionCheckpoint).then_some(s))
        }
    };
    let loss_path = out.join("loss.csv");
    let prior = match done {
        Some(s) => truncate_trace(&loss_path, s)?,
        None => vec![LossRow::CSV_HEADER.to_string()],
    };
    let mut loss_file = fs::File::create(&loss_path).map_err(|e| TdmError::io(&loss_path, e))?;
    for line in &prior {
        writeln!(loss_file, "{}", line).map_err(|e| TdmError::io(&loss_path, e))?;
    }

    let data = samples(&train_ds);
    let mut results = Vec::new();
    for sched in &cfg.stages {
        if done.is_some_and(|s| sched.pair_index <= s) {
            continue;
        }
        det = advance(&det, cfg.variant, sched.pair_index, &cfg.grow, &data, cfg.seed)?;
        let mut sink = |row: &LossRow| -> Result<()> {
            writeln!(loss_file, "{}", row.csv_line()).map_err(|e| TdmError::io(&loss_path, e))
        };
        train_stage(&mut det, &data, sched, cfg.seed, cfg.momentum, &mut sink)?;
        loss_file.flush().map_err(|e| TdmError::io(&loss_path, e))?;
        let ckpt = out.join(checkpoint_name(cfg.variant, sched.pair_index));
        Checkpoint::from_detector(&det).save(&ckpt)?;
        let report = match &val_ds {
            Some((ds, _)) => {
                let (dets, report) = evaluate_detector(&det, ds, cfg.size_scale)?;
                write_json_lines(&out.join(format!("dets_stage{}.json", sched.pair_index)), &dets)?;
                write_json(&out.join(format!("report_stage{}.json", sched.pair_index)), &report)?;
                Some(report)
            }
            None => None,
        };
        results.push(StageResult {
            stage: sched.pair_index,
            checkpoint: ckpt,
            report,
        });
    }
    Ok(RunSummary {
        manifest,
        stages: results,
        detector: det,
    })
}

/// The comparison matrix: baseline, TDM stages, skip-pool and no-lateral
/// stages, per seed, all on one dataset pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub arch: PathBuf,
    pub seeds: Vec<u64>,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub output_dir: PathBuf,
    /// Baseline backbone init: `scratch` or `classification-checkpoint`
    /// (the bundled pretrain, run per seed).
    #[serde(default)]
    pub baseline_init: InitKind,
    /// Where the other variants start: `detection-checkpoint` (the trained
    /// baseline) or `classification-checkpoint` (the untrained baseline).
    #[serde(default = "d_variant_init")]
    pub variant_init: InitKind,
    pub baseline: StageSchedule,
    pub tdm: Vec<StageSchedule>,
    pub skip_pool: StageSchedule,
    pub no_lateral: Vec<StageSchedule>,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub grow: GrowOptions,
    #[serde(default = "d_size_scale")]
    pub size_scale: f64,
}

fn d_variant_init() -> InitKind {
    InitKind::DetectionCheckpoint
}

impl AblationConfig {
    pub fn load(path: &Path) -> Result<AblationConfig> {
        let text = fs::read_to_string(path).map_err(|e| TdmError::io(path, e))?;
        let mut cfg: AblationConfig = serde_json::from_str(&text).map_err(|e| TdmError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.arch, &mut cfg.train_data, &mut cfg.val_data, &mut cfg.output_dir] {
            resolve(base, p);
        }
        Ok(cfg)
    }

    pub fn validate(&self, arch: &ArchConfig) -> Result<()> {
        let bad = |m: &str| Err(TdmError::Config(format!("ablation: {}", m)));
        if self.seeds.is_empty() {
            return bad("no seeds");
        }
        if self.baseline.pair_index != 0 || self.skip_pool.pair_index != 1 {
            return bad("baseline is stage 0 and skip-pool stage 1");
        }
        for list in [&self.tdm, &self.no_lateral] {
            if list.iter().enumerate().any(|(i, s)| s.pair_index != i + 1) || list.len() > arch.tdm.pairs.len() {
                return bad("tdm and no-lateral stages must run 1, 2, ... up to the number of pairs");
            }
        }
        if self.baseline_init == InitKind::DetectionCheckpoint {
            return bad("baseline_init is scratch or classification-checkpoint");
        }
        if self.variant_init == InitKind::Scratch {
            return bad("variant_init is detection-checkpoint or classification-checkpoint");
        }
        for s in std::iter::once(&self.baseline).chain(&self.tdm).chain([&self.skip_pool]).chain(&self.no_lateral) {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub stage: usize,
    pub seed: u64,
    /// All detector parameters, heads included.
    pub params: usize,
    /// Feature-network parameters (heads excluded).
    pub feature_params: usize,
    pub report: MetricReport,
}

impl AblationRow {
    pub fn csv_header() -> String {
        format!("variant,stage,seed,params,feature_params,{}", MetricReport::csv_header())
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.variant,
            self.stage,
            self.seed,
            self.params,
            self.feature_params,
            self.report.csv_row()
        )
    }
}

/// Run every (variant, stage, seed) cell; rows stream to `on_row` and to
/// `ablation.csv` as they finish.
pub fn run_ablation(
    cfg: &AblationConfig,
    on_row: &mut dyn FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let arch = ArchConfig::load(&cfg.arch)?;
    cfg.validate(&arch)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| TdmError::io(out, e))?;
    write_json(&out.join("ablation_config.json"), cfg)?;
    let train_ds = read_dataset(&cfg.train_data)?;
    let val_ds = read_dataset(&cfg.val_data)?;
    let data = samples(&train_ds);
    let csv_path = out.join("ablation.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| TdmError::io(&csv_path, e))?;
    writeln!(csv, "{}", AblationRow::csv_header()).map_err(|e| TdmError::io(&csv_path, e))?;

    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = out.join(format!("seed{}", seed));
        fs::create_dir_all(&seed_dir).map_err(|e| TdmError::io(&seed_dir, e))?;
        let mut record = |det: &Detector, dets: Vec<DetectionRecord>, report: MetricReport| -> Result<()> {
            let tag = format!("{}_stage{}", det.variant(), det.stage());
            write_json_lines(&seed_dir.join(format!("dets_{}.json", tag)), &dets)?;
            write_json(&seed_dir.join(format!("report_{}.json", tag)), &report)?;
            let row = AblationRow {
                variant: det.variant(),
                stage: det.stage(),
                seed,
                params: det.params.num_values(),
                feature_params: det.feature_param_count(),
                report,
            };
            writeln!(csv, "{}", row.csv_line()).map_err(|e| TdmError::io(&csv_path, e))?;
            csv.flush().map_err(|e| TdmError::io(&csv_path, e))?;
            on_row(&row);
            rows.push(row);
            Ok(())
        };
        let mut train_and_record = |det: &mut Detector, sched: &StageSchedule| -> Result<()> {
            train_stage(det, &data, sched, seed, cfg.momentum, &mut |_| Ok(()))?;
            let (dets, report) = evaluate_detector(det, &val_ds, cfg.size_scale)?;
            record(det, dets, report)
        };

        let init = match cfg.baseline_init {
            InitKind::Scratch => Detector::baseline(&arch, seed)?,
            _ => {
                let (c, _) = pretrain_classifier(&arch, &cfg.pretrain, seed)?;
                save_classifier(&c, &seed_dir.join("pretrain.ckpt"))?;
                c.to_baseline(seed)?
            }
        };
        let mut baseline = init.clone();
        train_and_record(&mut baseline, &cfg.baseline)?;
        Checkpoint::from_detector(&baseline).save(&seed_dir.join(checkpoint_name(Variant::Baseline, 0)))?;
        let start = match cfg.variant_init {
            InitKind::DetectionCheckpoint => &baseline,
            _ => &init,
        };

        let mut det = start.clone();
        for sched in &cfg.tdm {
            det = advance(&det, Variant::Tdm, sched.pair_index, &cfg.grow, &data, seed)?;
            train_and_record(&mut det, sched)?;
        }
        let mut det = advance(start, Variant::SkipPool, 1, &cfg.grow, &data, seed)?;
        train_and_record(&mut det, &cfg.skip_pool)?;
        let mut det = start.clone();
        for sched in &cfg.no_lateral {
            det = advance(&det, Variant::NoLateral, sched.pair_index, &cfg.grow, &data, seed)?;
            train_and_record(&mut det, sched)?;
        }
    }
    Ok(rows)
}

/// Mean over seeds of one (variant, stage) cell; NaN entries are skipped.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub stage: usize,
    pub seeds: usize,
    pub params: usize,
    pub feature_params: usize,
    pub mean: Vec<f64>,
}

impl AblationSummary {
    pub fn csv_header() -> String {
        format!("variant,stage,seeds,params,feature_params,{}", MetricReport::csv_header())
    }

    pub fn csv_line(&self) -> String {
        let vals: Vec<String> = self
            .mean
            .iter()
            .map(|v| if v.is_nan() { "nan".to_string() } else { v.to_string() })
            .collect();
        format!(
            "{},{},{},{},{},{}",
            self.variant,
            self.stage,
            self.seeds,
            self.params,
            self.feature_params,
            vals.join(",")
        )
    }

    /// Mean of the named metric column (see `metrics::CSV_COLUMNS`).
    pub fn get(&self, column: &str) -> Option<f64> {
        crate::metrics::CSV_COLUMNS.iter().position(|c| *c == column).map(|i| self.mean[i])
    }
}

/// Group rows by (variant, stage) in first-seen order.
pub fn summarize_ablation(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut keys: Vec<(Variant, usize)> = vec![];
    for r in rows {
        if !keys.contains(&(r.variant, r.stage)) {
            keys.push((r.variant, r.stage));
        }
    }
    keys.into_iter()
        .map(|(variant, stage)| {
            let cell: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == variant && r.stage == stage).collect();
            let width = crate::metrics::CSV_COLUMNS.len();
            let mean = (0..width)
                .map(|i| {
                    let v: Vec<f64> = cell.iter().map(|r| r.report.values()[i]).filter(|v| !v.is_nan()).collect();
                    if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 }
                })
                .collect();
            AblationSummary {
                variant,
                stage,
                seeds: cell.len(),
                params: cell[0].params,
                feature_params: cell[0].feature_params,
                mean,
            }
        })
        .collect()
}
