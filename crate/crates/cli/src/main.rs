use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use tdm_core::checkpoint::Checkpoint;
use tdm_core::detect::DetectionRecord;
use tdm_core::experiment::{
    run_ablation, run_experiment, summarize_ablation, AblationConfig, AblationRow, ExperimentConfig, InitKind,
};
use tdm_core::gradcheck::suite;
use tdm_core::inspect::{feature_mosaic, inspect};
use tdm_core::metrics::{evaluate, EvalSpec, MetricReport};
use tdm_core::model::{Detector, Variant};
use tdm_core::synthdata::{
    gen_dataset, gen_scene, read_annotations, read_json_lines, write_dataset, write_json_lines, Image, SceneSpec,
};
use tdm_core::train::detect_dataset;
use tdm_core::{ArchConfig, Graph, TdmError};

#[derive(Parser)]
#[command(name = "tdm", version, about = "Top-down modulation detector toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape-detection dataset.
    Synth {
        /// Scene spec JSON; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print block shapes, pair channels and parameter counts.
    Inspect {
        arch: PathBuf,
        /// Emit JSON instead of the text table.
        #[arg(long)]
        json: bool,
        /// Fail unless the text table equals this file.
        #[arg(long)]
        golden: Option<PathBuf>,
        /// Write PPM mosaics of every tapped feature and the head feature.
        #[arg(long)]
        dump_features: Option<PathBuf>,
        /// Detector checkpoint for the dump; a fresh detector otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input image (PPM) for the dump; a synthetic scene otherwise.
        #[arg(long)]
        image: Option<PathBuf>,
        /// TDM stage of the fresh detector.
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a variant through its stages.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// tdm, baseline, skip-pool or no-lateral.
        #[arg(long)]
        variant: Option<String>,
        /// scratch, classification-checkpoint or detection-checkpoint.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Continue from a stage checkpoint of the same run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score detections against ground truth.
    Eval {
        /// Detections, one JSON record per line. Written first when
        /// `--checkpoint` and `--data` are given.
        #[arg(long)]
        dets: PathBuf,
        /// Ground-truth annotations; defaults to the dataset's.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Append a CSV row (header when the file is new).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long, default_value_t = 0.375)]
        size_scale: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the variant x stage x seed comparison.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Where variants start: detection-checkpoint or classification-checkpoint.
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every differentiable op.
    GradCheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl From<TdmError> for CliError {
    fn from(e: TdmError) -> Self {
        CliError {
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        TdmError::from(e).into()
    }
}

fn fail(kind: &'static str, message: impl Into<String>) -> CliError {
    CliError {
        kind,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io<T>(r: std::io::Result<T>, path: &Path) -> CliResult<T> {
    r.map_err(|e| TdmError::io(path, e).into())
}

fn configure_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("TDM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| fail("config", format!("TDM_THREADS must be a positive integer, got {:?}", v)))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fail("config", e.to_string()))?;
    }
    Ok(())
}

fn cmd_synth(spec: Option<PathBuf>, n: usize, seed: u64, out: PathBuf) -> CliResult<()> {
    let spec: SceneSpec = match spec {
        Some(p) => {
            let text = io(fs::read_to_string(&p), &p)?;
            serde_json::from_str(&text).map_err(|e| {
                CliError::from(TdmError::Parse {
                    path: p.display().to_string(),
                    line: e.line(),
                    column: e.column(),
                    message: e.to_string(),
                })
            })?
        }
        None => SceneSpec::default(),
    };
    let ds = gen_dataset(&spec, n, seed)?;
    write_dataset(&out, &ds)?;
    let objects: usize = ds.annotations.iter().map(|r| r.boxes.len()).sum();
    println!("{}", json!({ "images": ds.len(), "objects": objects, "out": out }));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_inspect(
    arch_path: PathBuf,
    as_json: bool,
    golden: Option<PathBuf>,
    dump: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    image: Option<PathBuf>,
    stage: usize,
    seed: u64,
) -> CliResult<()> {
    let arch = ArchConfig::load(&arch_path)?;
    let report = inspect(&arch)?;
    let table = report.to_table();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", table);
    }
    if let Some(g) = golden {
        let want = io(fs::read_to_string(&g), &g)?;
        if want != table {
            let diff: Vec<String> = want
                .lines()
                .zip(table.lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("golden {:?} got {:?}", a, b))
                .collect();
            return Err(fail(
                "golden_mismatch",
                format!("table differs from {}: {}", g.display(), diff.join("; ")),
            ));
        }
    }
    if let Some(dir) = dump {
        io(fs::create_dir_all(&dir), &dir)?;
        let det = match checkpoint {
            Some(p) => Checkpoint::load(&p)?.into_detector()?,
            None => {
                let mut d = Detector::baseline(&arch, seed)?;
                for _ in 0..stage {
                    d = d.grow_tdm(seed)?;
                }
                d
            }
        };
        let img = match image {
            Some(p) => Image::decode_ppm(&io(fs::read(&p), &p)?, &p.display().to_string())?,
            None => {
                let spec = SceneSpec {
                    height: arch.input.height,
                    width: arch.input.width,
                    ..SceneSpec::default()
                };
                gen_scene(&spec, 0, seed).0
            }
        };
        let input_path = dir.join("input.ppm");
        io(fs::write(&input_path, img.encode_ppm()), &input_path)?;
        let mut g = Graph::new();
        let x = g.input(img.to_tensor());
        let fwd = det.forward(&mut g, x)?;
        let mut written = vec![];
        for f in fwd.taps.iter() {
            let p = dir.join(format!("feature_{}.ppm", f.source));
            io(fs::write(&p, feature_mosaic(g.value(f.var), 16)?.encode_ppm()), &p)?;
            written.push(p);
        }
        let p = dir.join(format!("feature_head_{}_stage{}.ppm", det.variant(), det.stage()));
        io(fs::write(&p, feature_mosaic(g.value(fwd.feature.var), 16)?.encode_ppm()), &p)?;
        written.push(p);
        eprintln!("{}", json!({ "dumped": written }));
    }
    Ok(())
}

fn cmd_train(
    config: PathBuf,
    variant: Option<String>,
    init: Option<String>,
    init_checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(v) = variant {
        cfg.variant = Variant::parse(&v)?;
    }
    if let Some(i) = init {
        cfg.init = InitKind::parse(&i)?;
    }
    if init_checkpoint.is_some() {
        cfg.init_checkpoint = init_checkpoint;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let summary = run_experiment(&cfg, resume.as_deref())?;
    let stages: Vec<_> = summary
        .stages
        .iter()
        .map(|s| json!({ "stage": s.stage, "checkpoint": s.checkpoint, "report": s.report }))
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "variant": cfg.variant,
            "output_dir": cfg.output_dir,
            "config_sha256": summary.manifest.config_sha256,
            "stages": stages,
        }))?
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    dets_path: PathBuf,
    gt: Option<PathBuf>,
    report_path: PathBuf,
    csv: Option<PathBuf>,
    num_classes: Option<usize>,
    size_scale: f64,
    checkpoint: Option<PathBuf>,
    data: Option<PathBuf>,
) -> CliResult<()> {
    let mut det_classes = None;
    if let Some(ck) = &checkpoint {
        let data = data
            .as_ref()
            .ok_or_else(|| fail("invalid", "--checkpoint needs --data to run detection"))?;
        let det = Checkpoint::load(ck)?.into_detector()?;
        det_classes = Some(det.det_config()?.num_classes);
        let ds = tdm_core::synthdata::read_dataset(data)?;
        let dets = detect_dataset(&det, &ds)?;
        write_json_lines(&dets_path, &dets)?;
    }
    let gt_path = match (gt, &data) {
        (Some(g), _) => g,
        (None, Some(d)) => d.join(tdm_core::synthdata::ANNOTATIONS_FILE),
        (None, None) => return Err(fail("invalid", "--gt or --data is required")),
    };
    let gts = read_annotations(&gt_path)?;
    let dets: Vec<DetectionRecord> = read_json_lines(&dets_path)?;
    let k = num_classes.or(det_classes).unwrap_or_else(|| {
        let g = gts.iter().flat_map(|r| r.boxes.iter().map(|b| b.class_id));
        let d = dets.iter().flat_map(|r| r.boxes.iter().map(|b| b.class_id));
        g.chain(d).max().map_or(1, |m| m + 1)
    });
    let report = evaluate(&dets, &gts, &EvalSpec::new(k, size_scale))?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    io(fs::write(&report_path, text), &report_path)?;
    if let Some(c) = csv {
        let mut out = String::new();
        if !c.exists() {
            out.push_str(&MetricReport::csv_header());
            out.push('\n');
        }
        out.push_str(&report.csv_row());
        out.push('\n');
        use std::io::Write as _;
        let mut f = io(fs::OpenOptions::new().create(true).append(true).open(&c), &c)?;
        io(f.write_all(out.as_bytes()), &c)?;
    }
    println!("{}", MetricReport::csv_header());
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_ablate(config: PathBuf, seeds: Option<Vec<u64>>, init: Option<String>, out: Option<PathBuf>) -> CliResult<()> {
    let mut cfg = AblationConfig::load(&config)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(i) = init {
        cfg.variant_init = InitKind::parse(&i)?;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    eprintln!("{}", AblationRow::csv_header());
    let rows = run_ablation(&cfg, &mut |r| eprintln!("{}", r.csv_line()))?;
    let summary = summarize_ablation(&rows);
    let path = cfg.output_dir.join("ablation_summary.csv");
    let mut text = String::new();
    text.push_str(&tdm_core::experiment::AblationSummary::csv_header());
    text.push('\n');
    for s in &summary {
        text.push_str(&s.csv_line());
        text.push('\n');
    }
    io(fs::write(&path, &text), &path)?;
    print!("{}", text);
    Ok(())
}

fn cmd_grad_check(seeds: u64, as_json: bool) -> CliResult<()> {
    let seeds: Vec<u64> = (0..seeds).collect();
    let cases = suite(&seeds)?;
    let failed = cases.iter().filter(|c| !c.report.passed).count();
    if as_json {
        println!("{}", serde_json::to_string_pretty(&cases)?);
    } else {
        println!("{:<28} {:>5} {:>12} {:>8} {:>6}  status", "op", "seed", "max_rel_err", "checked", "kinks");
        for c in &cases {
            println!(
                "{:<28} {:>5} {:>12.3e} {:>8} {:>6}  {}",
                c.op,
                c.seed,
                c.report.max_rel_err,
                c.report.checked,
                c.report.skipped_kinks,
                if c.report.passed { "ok" } else { "FAIL" }
            );
        }
    }
    if failed > 0 {
        return Err(fail("grad_check", format!("{} of {} checks failed", failed, cases.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.cmd {
        Cmd::Synth { spec, n, seed, out } => cmd_synth(spec, n, seed, out),
        Cmd::Inspect {
            arch,
            json,
            golden,
            dump_features,
            checkpoint,
            image,
            stage,
            seed,
        } => cmd_inspect(arch, json, golden, dump_features, checkpoint, image, stage, seed),
        Cmd::Train {
            config,
            variant,
            init,
            init_checkpoint,
            resume,
            seed,
            out,
        } => cmd_train(config, variant, init, init_checkpoint, resume, seed, out),
        Cmd::Eval {
            dets,
            gt,
            report,
            csv,
            num_classes,
            size_scale,
            checkpoint,
            data,
        } => cmd_eval(dets, gt, report, csv, num_classes, size_scale, checkpoint, data),
        Cmd::Ablate {
            config,
            seeds,
            init,
            out,
        } => cmd_ablate(config, seeds, init, out),
        Cmd::GradCheck { seeds, json } => cmd_grad_check(seeds, json),
    }
}

fn error_record(kind: &str, message: &str) -> String {
    json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_record("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(e.kind, &e.message));
            ExitCode::FAILURE
        }
    }
}
