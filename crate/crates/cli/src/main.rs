use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lighthead::config::DetectorConfig;
use lighthead::cost::{compare_designs, HeadDesign, HeadVariant};
use lighthead::detector::{traced_violations, Detector};
use lighthead::roi_warp::{psroi_pool, psroi_pool_aligned, roi_align, roi_pool, RoI};
use lighthead::rpn::{nms, BBox};
use lighthead::scene::SyntheticScene;
use lighthead::train::{evaluate, held_out_scenes, seed_from_env, stream, train_toy};
use lighthead::verify::claims::{backbone_check, cost_checks, light_head_check, structural_checks};
use lighthead::verify::{all_passed, gradient_suites, oracle_suites, suite_summary, Check};
use lighthead::Tensor;

/// Light-head detector verification and desk-scale demo.
#[derive(Debug, Parser)]
#[command(name = "lhrcnn", version)]
struct Cli {
    /// Detector configuration file (`key = value` lines); defaults to the toy preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Pooling, NMS and label-assignment oracle comparisons.
    Oracle {
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Cost-model reports: backbone, head designs, detector itemisation.
    Flops {
        #[arg(long, value_enum, default_value_t = BackboneArg::Xception)]
        backbone: BackboneArg,
        /// Square input side for the backbone report.
        #[arg(long, default_value_t = 224)]
        input: usize,
        /// RoI counts for the head cost table.
        #[arg(long, value_delimiter = ',', default_values_t = [100u64, 300, 1000, 2000])]
        rois: Vec<u64>,
    },
    /// Trains the toy detector on synthetic scenes.
    DemoTrain {
        #[arg(long)]
        iters: Option<usize>,
        /// Defaults to the configured training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Weights directory to write.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Held-out scenes to evaluate after training.
        #[arg(long, default_value_t = 50)]
        eval: usize,
        #[arg(long, default_value_t = 50)]
        log_every: usize,
        /// Enforce loss reduction ≥ 0.6, recall ≥ 0.9 and ≤ 1 false positive per image.
        #[arg(long)]
        check: bool,
    },
    /// Runs a trained detector on one LHT1 image.
    DemoInfer {
        #[arg(long, value_name = "FILE")]
        image: PathBuf,
        #[arg(long, value_name = "DIR")]
        weights: PathBuf,
        #[arg(long)]
        score_thresh: Option<f32>,
    },
    /// Greedy NMS over `score x1 y1 x2 y2` lines; prints kept indices.
    Nms {
        #[arg(long, default_value_t = 0.5)]
        iou_thresh: f32,
        /// Defaults to standard input.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// RoI warping of an LHT1 feature map by `batch x1 y1 x2 y2` lines.
    Warp {
        #[arg(long, value_name = "FILE")]
        features: PathBuf,
        #[arg(long, value_name = "FILE")]
        rois: PathBuf,
        #[arg(long, value_enum, default_value_t = WarpMode::PsroiAligned)]
        mode: WarpMode,
        /// Defaults to the configured warp stride.
        #[arg(long)]
        scale: Option<f32>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Writes a synthetic scene as an LHT1 image and prints its boxes.
    Scene {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Noise only.
        #[arg(long)]
        blank: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackboneArg {
    Xception,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WarpMode {
    RoiPool,
    Psroi,
    RoiAlign,
    PsroiAligned,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<DetectorConfig> {
    let mut cfg = match path {
        Some(p) => DetectorConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => DetectorConfig::toy(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Gradcheck { seed } => verify("gradcheck", || gradient_suites(seed_from_env(seed)?)),
        Command::Oracle { seed } => verify("oracle", || oracle_suites(seed_from_env(seed)?)),
        Command::Flops { backbone: BackboneArg::Xception, input, rois } => flops(&cfg, input, &rois),
        Command::DemoTrain { iters, seed, out, eval, log_every, check } => {
            demo_train(&cfg, iters, seed, out.as_deref(), eval, log_every, check)
        }
        Command::DemoInfer { image, weights, score_thresh } => demo_infer(cli.config.is_some().then_some(cfg), &image, &weights, score_thresh),
        Command::Nms { iou_thresh, input } => nms_cmd(iou_thresh, input.as_deref()),
        Command::Warp { features, rois, mode, scale, out } => warp(&cfg, &features, &rois, mode, scale, &out),
        Command::Scene { out, seed, blank } => scene(&cfg, &out, seed_from_env(seed)?, blank),
    }
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{}", c.render());
    }
    let ok = all_passed(checks);
    for (suite, passed, n) in suite_summary(checks) {
        println!("#= {suite}.cases={n}");
        println!("#= {suite}.passed={passed}");
    }
    ok
}

fn verify(name: &str, suites: impl FnOnce() -> lighthead::Result<Vec<Check>>) -> Result<bool> {
    let start = Instant::now();
    let checks = suites()?;
    let seconds = start.elapsed().as_secs_f64();
    let ok = report(&checks);
    println!("#= {name}.passed={ok}");
    println!("#= {name}.seconds={seconds:.3}");
    Ok(ok)
}

fn flops(cfg: &DetectorConfig, input: usize, rois: &[u64]) -> Result<bool> {
    let (backbone, band) = backbone_check(input);
    print!("{}", backbone.render(&format!("backbone xception {input}x{input}")));
    println!("# convention: 1 MAC = 1 FLOP; bias, batch-norm and activations free; reference 145M accepted within ±10%");
    let mut checks: Vec<Check> = band.into_iter().collect();
    let designs: Vec<HeadDesign> =
        [HeadVariant::FasterRcnn2fc, HeadVariant::RfcnScoremap, HeadVariant::LightHead].into_iter().map(HeadDesign::coco).collect();
    println!("== head designs (80 classes, p=7, 25x38 map)");
    print!("{}", compare_designs(&designs, rois).render());
    let det = Detector::new(cfg.clone(), 0)?;
    let side = cfg.scene.image_size;
    let rois_test = cfg.proposals.post_nms_test;
    print!("{}", det.inference_cost(side, side, rois_test).render(&format!("detector {side}x{side} R={rois_test}")));
    checks.extend(structural_checks()?);
    checks.extend(cost_checks());
    checks.push(light_head_check(&det, side, side, rois_test));
    let ok = report(&checks);
    println!("#= flops.passed={ok}");
    Ok(ok)
}

/// FNV-1a over the bit patterns, for comparing loss traces across runs.
fn digest(values: &[f32]) -> u64 {
    values.iter().flat_map(|v| v.to_bits().to_le_bytes()).fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

fn demo_train(cfg: &DetectorConfig, iters: Option<usize>, seed: Option<u64>, out: Option<&Path>, eval: usize, log_every: usize, check: bool) -> Result<bool> {
    let seed = seed_from_env(seed.unwrap_or(cfg.train.seed))?;
    let iters = iters.unwrap_or(cfg.train.iters);
    let start = Instant::now();
    let (det, trace) = train_toy(cfg, seed, iters, |it, s| {
        if log_every > 0 && (it % log_every == 0 || it + 1 == iters) {
            println!(
                "iter {it:>5} total {:.4} rpn_cls {:.4} rpn_reg {:.4} rcnn_cls {:.4} rcnn_reg {:.4}",
                s.total, s.rpn_cls, s.rpn_reg, s.rcnn_cls, s.rcnn_reg
            );
        }
    })?;
    let train_s = start.elapsed().as_secs_f64();
    let window = 50.min(iters.div_ceil(2));
    let reduction = trace.reduction(window);
    println!("#= train.seed={seed}");
    println!("#= train.iters={iters}");
    println!("#= train.first_window={:.6}", trace.first_window(window));
    println!("#= train.last_window={:.6}", trace.last_window(window));
    println!("#= train.reduction={reduction:.4}");
    println!("#= train.loss_digest={:016x}", digest(&trace.losses()));
    println!("#= train.seconds={train_s:.2}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        det.save(dir).with_context(|| format!("saving weights to {}", dir.display()))?;
        let losses: String = trace.losses().iter().map(|l| format!("{l:e}\n")).collect();
        std::fs::write(dir.join("losses.txt"), losses)?;
        println!("#= train.weights={}", dir.display());
    }
    let mut checks = Vec::new();
    if check {
        checks.push(Check {
            suite: "demo_train",
            case: format!("loss reduction over {window}-iteration windows"),
            passed: reduction >= 0.6,
            metric: reduction,
            detail: format!("{reduction:.4} ≥ 0.6"),
        });
    }
    if eval > 0 {
        let scenes = held_out_scenes(&det.cfg, seed, eval);
        let r = evaluate(&det, &scenes, 0.5)?;
        println!("#= eval.images={}", r.images);
        println!("#= eval.recall={:.4}", r.recall());
        println!("#= eval.fp_per_image={:.4}", r.fp_per_image());
        if check {
            checks.push(Check {
                suite: "demo_infer",
                case: "recall at IoU 0.5".into(),
                passed: r.recall() >= 0.9,
                metric: r.recall(),
                detail: format!("{}/{} ≥ 0.9", r.recalled, r.gts),
            });
            checks.push(Check {
                suite: "demo_infer",
                case: "false positives per image".into(),
                passed: r.fp_per_image() <= 1.0,
                metric: r.fp_per_image(),
                detail: format!("{} over {} images ≤ 1", r.false_positives, r.images),
            });
        }
    }
    if check && eval == 0 {
        bail!("--check needs --eval > 0");
    }
    Ok(checks.is_empty() || report(&checks))
}

fn read_image(path: &Path) -> Result<Tensor> {
    let t = Tensor::load(path).with_context(|| format!("reading {}", path.display()))?;
    match t.dims() {
        [3, h, w] => Ok(Tensor::new(&[1, 3, *h, *w], t.data().to_vec())?),
        [1, 3, _, _] => Ok(t),
        d => bail!("image {} has dims {d:?}, expected [3,H,W] or [1,3,H,W]", path.display()),
    }
}

fn demo_infer(cfg: Option<DetectorConfig>, image: &Path, weights: &Path, score_thresh: Option<f32>) -> Result<bool> {
    let mut det = Detector::load(weights, cfg).with_context(|| format!("loading weights from {}", weights.display()))?;
    if let Some(t) = score_thresh {
        det.cfg.score_thresh = t;
    }
    let img = read_image(image)?;
    let (mut dets, trace) = det.detect_traced(&img)?;
    let dets = dets.pop().unwrap_or_default();
    println!("class score x1 y1 x2 y2");
    for d in &dets {
        println!("{} {:.4} {:.2} {:.2} {:.2} {:.2}", d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2);
    }
    println!("#= detections={}", dets.len());
    let limit = det.cfg.warp.alpha * det.cfg.warp.p * det.cfg.warp.p;
    let widest = trace.iter().filter(|(_, d)| d.len() == 4).map(|(_, d)| d[1]).max().unwrap_or(0);
    let bad = traced_violations(&trace, limit);
    let check = Check {
        suite: "structure",
        case: "post-thin-map tensors".into(),
        passed: bad.is_empty(),
        metric: widest as f64,
        detail: format!("widest {widest} ≤ {limit} over {} tensors; violations {bad:?}", trace.len()),
    };
    let ok = report(&[check]);
    Ok(ok)
}

fn open_input(path: Option<&Path>) -> Result<Box<dyn Read>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::open(p).with_context(|| format!("opening {}", p.display()))?),
        None => Box::new(std::io::stdin()),
    })
}

/// Numeric fields of every non-blank, non-`#` line.
fn read_rows<const N: usize>(input: Box<dyn Read>, what: &str) -> Result<Vec<[f32; N]>> {
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f32> = line
            .split_whitespace()
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| anyhow!("line {}: expected `{what}`, got {line:?}", n + 1))?;
        let row: [f32; N] = vals.try_into().map_err(|_| anyhow!("line {}: expected {N} fields `{what}`, got {line:?}", n + 1))?;
        if row.iter().any(|v| !v.is_finite()) {
            bail!("line {}: non-finite value in {line:?}", n + 1);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn nms_cmd(thresh: f32, input: Option<&Path>) -> Result<bool> {
    if !(0.0..=1.0).contains(&thresh) {
        bail!("--iou-thresh must lie in [0, 1], got {thresh}");
    }
    let rows = read_rows::<5>(open_input(input)?, "score x1 y1 x2 y2")?;
    let scores: Vec<f32> = rows.iter().map(|r| r[0]).collect();
    let boxes: Vec<BBox> = rows.iter().map(|r| BBox::new(r[1], r[2], r[3], r[4])).collect();
    for i in nms(&boxes, &scores, thresh) {
        println!("{i}");
    }
    Ok(true)
}

fn warp(cfg: &DetectorConfig, features: &Path, rois: &Path, mode: WarpMode, scale: Option<f32>, out: &Path) -> Result<bool> {
    let f = Tensor::load(features).with_context(|| format!("reading {}", features.display()))?;
    let rows = read_rows::<5>(open_input(Some(rois))?, "batch x1 y1 x2 y2")?;
    let rois: Vec<RoI> = rows
        .iter()
        .map(|r| {
            if r[0] < 0.0 || r[0].fract() != 0.0 {
                bail!("batch index {} is not a non-negative integer", r[0]);
            }
            Ok(RoI::new(r[0] as usize, r[1], r[2], r[3], r[4]))
        })
        .collect::<Result<_>>()?;
    let mut spec = cfg.warp;
    if let Some(s) = scale {
        spec.spatial_scale = s;
    }
    let pooled = match mode {
        WarpMode::RoiPool => roi_pool(&f, &rois, &spec.quantized())?,
        WarpMode::Psroi => psroi_pool(&f, &rois, &spec.quantized())?,
        WarpMode::RoiAlign => roi_align(&f, &rois, &spec)?,
        WarpMode::PsroiAligned => psroi_pool_aligned(&f, &rois, &spec)?,
    };
    pooled.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("#= warp.rois={}", rois.len());
    println!("#= warp.dims={:?}", pooled.dims());
    Ok(true)
}

fn scene(cfg: &DetectorConfig, out: &Path, seed: u64, blank: bool) -> Result<bool> {
    let mut rng = stream(seed, 4);
    let s = if blank { SyntheticScene::blank(&cfg.scene, &mut rng) } else { SyntheticScene::generate(&cfg.scene, cfg.head.num_classes, &mut rng) };
    s.image.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("class x1 y1 x2 y2");
    for (b, c) in &s.gts {
        println!("{c} {} {} {} {}", b.x1, b.y1, b.x2, b.y2);
    }
    println!("#= scene.objects={}", s.gts.len());
    Ok(true)
}
