use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use satcount::annotate::{read_boxes_jsonl, InstanceMask};
use satcount::config::PipelineConfig;
use satcount::counting::{
    aggregate_votes, calibrate, connected_components, count_blobs, threshold_votes, CountReport, TtaTransform,
};
use satcount::detect::{
    compute_anchors, decode_grid, nms, read_detections_jsonl, write_detections_jsonl, Detection, DetectionGrid,
};
use satcount::eval::{blobs_to_detections, evaluate_run, format_table, GroundTruth};
use satcount::fusion::fuse;
use satcount::tiling::{crop_by_grid, plan_tiles, stitch, TileGrid};
use satcount::{BinaryMask, RasterImage};

#[derive(Parser)]
#[command(name = "satcount", version, about = "Vehicle counting toolkit for satellite imagery")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut an image into overlapping tiles, or stitch tiles back together.
    Tile(TileArgs),
    /// Count vehicles in a binary mask or in voted predictions.
    Count(CountArgs),
    /// Decode raw detection grids into boxes.
    Decode(DecodeArgs),
    /// Non-maximum suppression over detections.
    Nms(NmsArgs),
    /// Keep detections confirmed by the segmentation mask.
    Fuse(FuseArgs),
    /// Match predictions against ground truth and report recall and precision.
    Eval(EvalArgs),
    /// Cluster annotated box sizes into anchors.
    Anchors(AnchorsArgs),
    /// Derive per-vehicle footprints from annotated instance masks.
    Calibrate(CalibrateArgs),
    /// Serve the annotation API.
    AnnotateServe(ServeArgs),
}

#[derive(Args)]
struct TileArgs {
    /// Image to cut.
    #[arg(long, required_unless_present = "stitch", conflicts_with = "stitch")]
    input: Option<PathBuf>,
    /// Directory for tiles and grid.json.
    #[arg(long, required_unless_present = "stitch")]
    out_dir: Option<PathBuf>,
    /// Tile directory to reassemble.
    #[arg(long, requires = "output")]
    stitch: Option<PathBuf>,
    /// Stitched image.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    tile_size: Option<u32>,
    #[arg(long)]
    overlap: Option<u32>,
}

#[derive(Args)]
struct CountArgs {
    /// Binary mask PNG (nonzero is vehicle).
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    mask: Option<PathBuf>,
    /// JSON manifest of transformed predictions to vote over.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Write the vote counts as a 16-bit gray+alpha PNG.
    #[arg(long, requires = "predictions")]
    votes_out: Option<PathBuf>,
    /// Write the voted binary mask.
    #[arg(long, requires = "predictions")]
    mask_out: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Binary grid file; repeat for several levels.
    #[arg(long = "grid", required = true)]
    grids: Vec<PathBuf>,
    /// Offset of the grid input within the mosaic, as `x,y`.
    #[arg(long, value_parser = parse_offset, default_value = "0,0")]
    offset: (f64, f64),
    #[arg(long)]
    min_score: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct NmsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    iou: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    /// Detector output (JSON lines).
    #[arg(long)]
    detections: PathBuf,
    /// Count report whose blobs carry pixel runs.
    #[arg(long, required_unless_present = "mask", conflicts_with = "mask")]
    blobs: Option<PathBuf>,
    /// Binary segmentation mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    t_high: Option<f64>,
    #[arg(long)]
    t_low: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted detections (JSON lines).
    #[arg(long, required_unless_present = "pred_blobs", conflicts_with = "pred_blobs")]
    pred: Option<PathBuf>,
    /// Count report; its blobs become score-1 detections and its total the estimated count.
    #[arg(long)]
    pred_blobs: Option<PathBuf>,
    /// Ground-truth boxes (JSON lines).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    iou_min: Option<f64>,
    #[arg(long)]
    estimated_count: Option<u64>,
    /// Column title in the table.
    #[arg(long, default_value = "model")]
    name: String,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnchorsArgs {
    /// Annotated boxes (JSON lines).
    #[arg(long)]
    boxes: PathBuf,
    /// Number of anchors; defaults to strides x anchors_per_level.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Instance id PNGs (16-bit).
    #[arg(long, required = true, num_args = 1..)]
    masks: Vec<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn parse_offset(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or("expected x,y")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((p(x)?, p(y)?))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut w = output(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_detections(path: Option<&Path>, dets: &[Detection]) -> Result<()> {
    let mut w = output(path)?;
    write_detections_jsonl(&mut w, dets)?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    read_detections_jsonl(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn read_report(path: &Path) -> Result<CountReport> {
    serde_json::from_reader(open(path)?).with_context(|| format!("reading {}", path.display()))
}

fn tile_name(x: u32, y: u32) -> String {
    format!("tile_{x:05}_{y:05}.png")
}

fn run_tile(cfg: &PipelineConfig, a: TileArgs) -> Result<()> {
    if let Some(dir) = a.stitch {
        let grid = TileGrid::from_json(&std::fs::read_to_string(dir.join("grid.json"))?)?;
        let tiles = grid
            .origins
            .iter()
            .map(|&(x, y)| Ok(((x, y), RasterImage::load_png(dir.join(tile_name(x, y)))?)))
            .collect::<Result<Vec<_>>>()?;
        let img = stitch(&tiles, &grid, grid.width, grid.height)?;
        img.save_png(a.output.expect("clap requires --output"))?;
        return Ok(());
    }
    let (input, dir) = (a.input.expect("clap requires --input"), a.out_dir.expect("clap requires --out-dir"));
    let img = RasterImage::load_png(&input)?;
    let grid = plan_tiles(
        img.width(),
        img.height(),
        a.tile_size.unwrap_or(cfg.tiling.tile_size),
        a.overlap.unwrap_or(cfg.tiling.overlap),
    )?;
    std::fs::create_dir_all(&dir)?;
    for ((x, y), tile) in crop_by_grid(&img, &grid) {
        tile.save_png(dir.join(tile_name(x, y)))?;
    }
    std::fs::write(dir.join("grid.json"), grid.to_json())?;
    eprintln!("{} tiles, pad {}x{}", grid.len(), grid.pad_x(), grid.pad_y());
    Ok(())
}

/// Votes manifest. Mask paths are relative to the manifest.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionManifest {
    width: u32,
    height: u32,
    predictions: Vec<PredictionEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionEntry {
    mask: PathBuf,
    #[serde(default)]
    transform: TtaTransform,
}

fn run_count(cfg: &PipelineConfig, a: CountArgs) -> Result<()> {
    let mask = match (&a.mask, &a.predictions) {
        (Some(m), _) => BinaryMask::load_png(m)?,
        (None, Some(manifest_path)) => {
            let manifest: PredictionManifest = serde_json::from_reader(open(manifest_path)?)
                .with_context(|| format!("reading {}", manifest_path.display()))?;
            let base = manifest_path.parent().unwrap_or(Path::new("."));
            let preds = manifest
                .predictions
                .iter()
                .map(|p| Ok((BinaryMask::load_png(base.join(&p.mask))?, p.transform)))
                .collect::<Result<Vec<_>>>()?;
            let votes = aggregate_votes(manifest.width, manifest.height, &preds)?;
            if let Some(path) = &a.votes_out {
                votes.save_png(path)?;
            }
            let mask = threshold_votes(&votes);
            if let Some(path) = &a.mask_out {
                mask.save_png(path)?;
            }
            mask
        }
        (None, None) => unreachable!("clap requires --mask or --predictions"),
    };
    let report = count_blobs(&connected_components(&mask), &cfg.counting);
    eprintln!("total {}", report.total);
    write_json(a.out.as_deref(), &report)
}

fn run_decode(cfg: &PipelineConfig, a: DecodeArgs) -> Result<()> {
    let min_score = a.min_score.unwrap_or(cfg.detect.min_score);
    let mut dets = Vec::new();
    for path in &a.grids {
        let grid = DetectionGrid::read_from(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        dets.extend(
            decode_grid(&grid)
                .into_iter()
                .filter(|d| d.score >= min_score)
                .map(|d| Detection {
                    bbox: d.bbox.translate(a.offset.0, a.offset.1),
                    ..d
                }),
        );
    }
    write_detections(a.out.as_deref(), &dets)
}

fn run_nms(cfg: &PipelineConfig, a: NmsArgs) -> Result<()> {
    let iou = a.iou.unwrap_or(cfg.detect.nms_iou);
    if !(0.0..=1.0).contains(&iou) {
        bail!("--iou must lie in [0, 1]");
    }
    write_detections(a.out.as_deref(), &nms(&read_detections(&a.input)?, iou))
}

fn run_fuse(cfg: &PipelineConfig, a: FuseArgs) -> Result<()> {
    let dets = read_detections(&a.detections)?;
    let blobs = match (&a.blobs, &a.mask) {
        (Some(p), _) => read_report(p)?.to_blobs(),
        (None, Some(m)) => connected_components(&BinaryMask::load_png(m)?),
        (None, None) => unreachable!("clap requires --blobs or --mask"),
    };
    let mut fc = cfg.fusion;
    fc.t_high = a.t_high.unwrap_or(fc.t_high);
    fc.t_low = a.t_low.unwrap_or(fc.t_low);
    let fused = fuse(&dets, &blobs, &fc)?;
    eprintln!("kept {} of {}", fused.len(), dets.len());
    write_detections(a.out.as_deref(), &fused)
}

fn run_eval(cfg: &PipelineConfig, a: EvalArgs) -> Result<()> {
    let gt = GroundTruth::new(read_boxes_jsonl(open(&a.gt)?).with_context(|| format!("reading {}", a.gt.display()))?)?;
    let iou_min = a.iou_min.unwrap_or(cfg.eval.iou_min);
    if !(0.0..=1.0).contains(&iou_min) {
        bail!("--iou-min must lie in [0, 1]");
    }
    let (preds, mut estimated) = match (&a.pred, &a.pred_blobs) {
        (Some(p), _) => (read_detections(p)?, None),
        (None, Some(p)) => {
            let report = read_report(p)?;
            (blobs_to_detections(&report.to_blobs()), Some(report.total))
        }
        (None, None) => unreachable!("clap requires --pred or --pred-blobs"),
    };
    if a.estimated_count.is_some() {
        estimated = a.estimated_count;
    }
    let mut report = evaluate_run(&preds, &gt, iou_min);
    report.estimated_count = estimated;
    if a.json {
        write_json(None, &report)
    } else {
        print!("{}", format_table(&[(a.name.as_str(), &report)]));
        Ok(())
    }
}

#[derive(Serialize)]
struct AnchorsOutput {
    anchors: Vec<[f64; 2]>,
    cost: f64,
    /// Present when the anchors fill every configured stride.
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<Level>>,
}

#[derive(Serialize)]
struct Level {
    stride: u32,
    anchors: Vec<[f64; 2]>,
}

fn run_anchors(cfg: &PipelineConfig, a: AnchorsArgs) -> Result<()> {
    let boxes: Vec<(f64, f64)> = read_boxes_jsonl(open(&a.boxes)?)
        .with_context(|| format!("reading {}", a.boxes.display()))?
        .into_iter()
        .map(|(_, b)| (b.width() as f64, b.height() as f64))
        .collect();
    let d = &cfg.detect;
    let k = a.k.unwrap_or(d.strides.len() * d.anchors_per_level);
    let mut km = d.kmeans();
    if let Some(seed) = a.seed {
        km.seed = seed;
    }
    let fit = compute_anchors(&boxes, k, &km)?;
    let levels = satcount::detect::assign_anchors_to_levels(&fit.anchors, &d.strides, d.anchors_per_level)
        .ok()
        .map(|lv| {
            lv.into_iter()
                .map(|(stride, an)| Level {
                    stride,
                    anchors: an.iter().map(|a| [a.w, a.h]).collect(),
                })
                .collect()
        });
    write_json(
        None,
        &AnchorsOutput {
            anchors: fit.anchors.iter().map(|a| [a.w, a.h]).collect(),
            cost: fit.cost,
            levels,
        },
    )
}

fn run_calibrate(cfg: &PipelineConfig, a: CalibrateArgs) -> Result<()> {
    let masks = a
        .masks
        .iter()
        .map(|p| InstanceMask::load_ids_png(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    write_json(None, &calibrate(&masks, &cfg.counting))
}

fn run_serve(mut cfg: PipelineConfig, a: ServeArgs) -> Result<()> {
    if let Some(root) = a.image_root {
        cfg.service.image_root = root;
    }
    if a.ui_dir.is_some() {
        cfg.service.ui_dir = a.ui_dir;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        eprintln!("listening on http://{}", a.bind);
        satcount::service::serve(&cfg, a.bind, shutdown).await
    })?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Tile(a) => run_tile(&cfg, a),
        Command::Count(a) => run_count(&cfg, a),
        Command::Decode(a) => run_decode(&cfg, a),
        Command::Nms(a) => run_nms(&cfg, a),
        Command::Fuse(a) => run_fuse(&cfg, a),
        Command::Eval(a) => run_eval(&cfg, a),
        Command::Anchors(a) => run_anchors(&cfg, a),
        Command::Calibrate(a) => run_calibrate(&cfg, a),
        Command::AnnotateServe(a) => run_serve(cfg, a),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
