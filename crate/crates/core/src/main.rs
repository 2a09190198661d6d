use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sdsrcnn::config::RunConfig;
use sdsrcnn::dataio::{read_detections, write_detections, DetectionRecord, Manifest};
use sdsrcnn::evaluation::{
    ap_samples, average_precision, lamr_samples, log_average_miss_rate, mr_fppi_curve, precision_recall_curve,
    write_curve_csv, ImageEval,
};
use sdsrcnn::experiment::{ablation_csv, ablation_table, run_ablation, synth_dataset};
use sdsrcnn::gradsuite::{run_suite, TOLERANCE};
use sdsrcnn::image::GrayImage;
use sdsrcnn::pipeline::{detect_all, train_bcn_observed, train_rpn_observed, write_loss_csv, Dataset};
use sdsrcnn::synthdata::generate_dataset;
use sdsrcnn::tinynet::arch::FEATURE_LAYER;
use sdsrcnn::tinynet::{checkpoint, dump_feature_map};
use sdsrcnn::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "sdsrcnn", version, about = "Two-stage pedestrian detector with segmentation infusion")]
struct Cli {
    /// Run configuration (flat TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Rpn,
    Bcn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Mr,
    Ap,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and test splits into OUT/train and OUT/test.
    Synth,
    /// Train one stage; writes OUT/<stage>.ckpt and OUT/<stage>_loss.csv.
    Train {
        #[arg(value_enum)]
        stage: Stage,
        /// Training manifest [default: OUT/train/manifest.jsonl]
        manifest: Option<PathBuf>,
        /// Proposal checkpoint used to train the classifier [default: OUT/rpn.ckpt]
        #[arg(long)]
        rpn: Option<PathBuf>,
    },
    /// Run the detector over a manifest; writes OUT/detections.jsonl.
    Detect {
        manifest: PathBuf,
        #[arg(long)]
        rpn: PathBuf,
        /// Without a classifier checkpoint detections carry proposal scores only.
        #[arg(long)]
        bcn: Option<PathBuf>,
    },
    /// Score detections; prints the summary, writes OUT/curve_<protocol>.csv.
    Eval {
        detections: PathBuf,
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "mr")]
        protocol: Protocol,
    },
    /// Finite-difference check of every loss and layer.
    Gradcheck,
    /// Full configuration plus each mechanism disabled in turn; writes OUT/ablation.csv.
    Ablate,
    /// Dump a layer's channel-max feature map as a graymap.
    Dumpfeat {
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(long, default_value = FEATURE_LAYER)]
        layer: String,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            other => Failure::Data(other),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Data(e),
            other => Failure::Usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(Error::Io { path: dir.into(), source: e }))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(Error::Io { path: path.into(), source: e }))
}

fn run(cli: Cli) -> CmdResult {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth => synth(&cfg, out),
        Command::Train { stage, manifest, rpn } => train(&cfg, out, *stage, manifest.as_deref(), rpn.as_deref()),
        Command::Detect { manifest, rpn, bcn } => detect(&cfg, out, manifest, rpn, bcn.as_deref()),
        Command::Eval { detections, manifest, protocol } => eval(&cfg, out, detections, manifest, *protocol),
        Command::Gradcheck => gradcheck(&cfg),
        Command::Ablate => ablate(&cfg, out),
        Command::Dumpfeat { checkpoint, image, layer } => dumpfeat(out, checkpoint, image, layer),
    }
}

fn synth(cfg: &RunConfig, out: &Path) -> CmdResult {
    let scene = cfg.scene_config();
    for (split, n) in [("train", cfg.train_images), ("test", cfg.test_images)] {
        let path = generate_dataset(&scene, n, split, out)?;
        println!("{split}: {n} images -> {}", path.display());
    }
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, stage: Stage, manifest: Option<&Path>, rpn: Option<&Path>) -> CmdResult {
    let default_manifest = out.join("train").join("manifest.jsonl");
    let data = Manifest::load(manifest.unwrap_or(&default_manifest))?;
    let pipeline = cfg.pipeline_config();
    let report_every = (data.len() / 10).max(1);
    let mut log = |i: usize, b: &sdsrcnn::losses::LossBreakdown| {
        if i % report_every == 0 {
            eprintln!(
                "iter {i}: total {:.5} cls {:.5} reg {:.5} seg {:.5}",
                b.total, b.classification, b.regression, b.segmentation
            );
        }
    };
    let (name, outcome) = match stage {
        Stage::Rpn => ("rpn", train_rpn_observed(&data, &pipeline, &mut log)?),
        Stage::Bcn => {
            let default_rpn = out.join("rpn.ckpt");
            let rpn_net = checkpoint::load(rpn.unwrap_or(&default_rpn))?;
            ("bcn", train_bcn_observed(&data, &rpn_net, &pipeline, &mut log)?)
        }
    };
    create_out(out)?;
    let ckpt = out.join(format!("{name}.ckpt"));
    checkpoint::save(&outcome.net, &ckpt)?;
    write_loss_csv(&outcome.history, &out.join(format!("{name}_loss.csv")))?;
    println!("{name}: {} updates -> {}", outcome.history.len(), ckpt.display());
    Ok(())
}

fn detect(cfg: &RunConfig, out: &Path, manifest: &Path, rpn: &Path, bcn: Option<&Path>) -> CmdResult {
    let data = Manifest::load(manifest)?;
    let rpn = checkpoint::load(rpn)?;
    let bcn = bcn.map(checkpoint::load).transpose()?;
    let dets = detect_all(&data, &rpn, bcn.as_ref(), &cfg.pipeline_config())?;
    let records: Vec<DetectionRecord> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| {
            let id = data.image_id(i).to_string();
            ds.iter().map(move |d| DetectionRecord {
                image_id: id.clone(),
                x: d.bbox.x,
                y: d.bbox.y,
                w: d.bbox.w,
                h: d.bbox.h,
                fused_score: d.fused_score,
                rpn_score: d.rpn_score,
                bcn_score: d.bcn_score,
            })
        })
        .collect();
    create_out(out)?;
    let path = out.join("detections.jsonl");
    write_detections(&records, &path)?;
    println!("{} detections over {} images -> {}", records.len(), data.len(), path.display());
    Ok(())
}

fn eval(cfg: &RunConfig, out: &Path, detections: &Path, manifest: &Path, protocol: Protocol) -> CmdResult {
    let data = Manifest::load(manifest)?;
    let records = read_detections(detections)?;
    let filter = cfg.eval_filter();
    let mut images: Vec<ImageEval> = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        images.push((Vec::new(), filter.apply(&Dataset::annotations(&data, i)?)));
    }
    let index: HashMap<&str, usize> = (0..data.len()).map(|i| (data.image_id(i), i)).collect();
    for r in &records {
        let i = *index
            .get(r.image_id.as_str())
            .ok_or_else(|| Failure::Data(Error::InvalidArgument(format!("detection for unknown image `{}`", r.image_id))))?;
        images[i].0.push(sdsrcnn::geometry::ScoredBox::new(r.bbox()?, r.fused_score));
    }
    create_out(out)?;
    match protocol {
        Protocol::Mr => {
            let curve = mr_fppi_curve(&images, cfg.match_iou)?;
            let lamr = log_average_miss_rate(&curve);
            write_curve_csv(&curve, &lamr_samples(&curve), &out.join("curve_mr.csv"))?;
            println!("log-average miss rate: {lamr}");
        }
        Protocol::Ap => {
            let curve = precision_recall_curve(&images, cfg.match_iou)?;
            let ap = average_precision(&images, cfg.match_iou)?;
            write_curve_csv(&curve, &ap_samples(&curve), &out.join("curve_ap.csv"))?;
            println!("average precision: {ap}");
        }
    }
    Ok(())
}

fn gradcheck(cfg: &RunConfig) -> CmdResult {
    let entries = run_suite(&cfg.pipeline_config(), cfg.seed)?;
    let mut failed = Vec::new();
    for e in &entries {
        let verdict = if e.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>5} checked  max rel err {:.3e}  {verdict}", e.name, e.checked, e.max_rel_error);
        if !e.passed() {
            failed.push(e.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all gradients within {TOLERANCE:e}");
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn ablate(cfg: &RunConfig, out: &Path) -> CmdResult {
    let scene = cfg.scene_config();
    let train = synth_dataset(&scene, cfg.train_images, "train")?;
    let test = synth_dataset(&scene, cfg.test_images, "test")?;
    let rows = run_ablation(cfg, &train, &test, &mut |name| eprintln!("running {name}"))?;
    print!("{}", ablation_table(&rows));
    create_out(out)?;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))
}

fn dumpfeat(out: &Path, ckpt: &Path, image: &Path, layer: &str) -> CmdResult {
    let net = checkpoint::load(ckpt)?;
    let img = GrayImage::read_pgm(image)?;
    let record = net.forward(&img.to_tensor())?;
    create_out(out)?;
    let path = out.join(format!("{layer}.pgm"));
    let dumped = dump_feature_map(&record, layer, &path)?;
    println!("{layer}: {}x{} -> {}", dumped.width, dumped.height, path.display());
    Ok(())
}
