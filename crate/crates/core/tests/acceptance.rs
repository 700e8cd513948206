//! End-to-end acceptance: one PASS/FAIL line per criterion on standard output.

use std::io::Write;
use std::time::{Duration, Instant};

use lighthead::backbone::{backbone_flops, BackboneSpec};
use lighthead::config::DetectorConfig;
use lighthead::cost::{compare_designs, CostItem, CostReport, HeadDesign, HeadVariant};
use lighthead::detector::{post_thin_map_violations, traced_violations, Detector};
use lighthead::rpn::{gen_anchors, iou, BBox};
use lighthead::scene::{stack_images, SyntheticScene};
use lighthead::train::{evaluate, held_out_scenes, seed_from_env, stream, train_toy};
use lighthead::verify::claims::backbone_check;
use lighthead::verify::{gradient_suites, oracle_suites, suite_summary, Check};

/// Collects failed conditions for one criterion and prints its verdict.
struct Criterion {
    id: u32,
    title: &'static str,
    start: Instant,
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Criterion {
    fn new(id: u32, title: &'static str) -> Self {
        Self { id, title, start: Instant::now(), notes: Vec::new(), failures: Vec::new() }
    }

    fn require(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    /// Prints the verdict past the test harness capture, then asserts it.
    fn finish(mut self, budget: Duration) {
        let took = self.start.elapsed();
        self.require(took < budget, format!("{:.2}s < {}s", took.as_secs_f64(), budget.as_secs()));
        let verdict = if self.failures.is_empty() { "PASS" } else { "FAIL" };
        let mut line = format!("criterion {} {verdict}: {} [{}]", self.id, self.title, self.notes.join("; "));
        if !self.failures.is_empty() {
            line.push_str(&format!(" failed: [{}]", self.failures.join("; ")));
        }
        let _ = writeln!(std::io::stdout(), "{line}");
        assert!(self.failures.is_empty(), "{line}");
    }
}

fn failed(checks: &[Check]) -> Vec<String> {
    checks.iter().filter(|c| !c.passed).map(Check::render).collect()
}

#[test]
fn criterion_1_gradient_integrity() {
    let mut c = Criterion::new(1, "finite-difference gradient checks");
    let checks = gradient_suites(seed_from_env(7).unwrap()).unwrap();
    let summary = suite_summary(&checks);
    for suite in
        ["conv2d", "conv2d_depthwise", "conv2d_dilated", "fully_connected", "large_sep_conv", "psroi_pool_aligned", "roi_align", "head", "full_loss"]
    {
        match summary.iter().find(|(s, _, _)| *s == suite) {
            Some(&(_, passed, n)) => c.require(passed && n >= 3, format!("{suite} {n} shapes")),
            None => c.require(false, format!("{suite} missing")),
        }
    }
    let worst = checks.iter().map(|k| k.metric).fold(0.0, f64::max);
    c.require(worst <= 1e-2, format!("worst relative error {worst:.2e} ≤ 1e-2"));
    for f in failed(&checks) {
        c.require(false, f);
    }
    c.finish(Duration::from_secs(120));
}

#[test]
fn criterion_2_oracle_equivalence() {
    let mut c = Criterion::new(2, "brute-force oracle equivalence");
    let checks = oracle_suites(seed_from_env(11).unwrap()).unwrap();
    let find = |suite: &str, case: &str| checks.iter().find(|k| k.suite == suite && k.case == case);
    for (suite, case) in [
        ("roi_pool", "100 fixtures"),
        ("psroi_pool", "100 fixtures"),
        ("nms", "1000 boxes, threshold 0.3"),
        ("nms", "1000 boxes, threshold 0.5"),
        ("nms", "1000 boxes, threshold 0.7"),
        ("assign_labels", "50 configurations"),
    ] {
        match find(suite, case) {
            Some(k) => c.require(k.passed && k.metric == 0.0, format!("{suite} {case}: {} mismatches", k.metric)),
            None => c.require(false, format!("{suite} {case} missing")),
        }
    }
    for f in failed(&checks) {
        c.require(false, f);
    }
    c.finish(Duration::from_secs(60));
}

#[test]
fn criterion_3_structural_numbers() {
    let mut c = Criterion::new(3, "structural numbers");
    let cfg = DetectorConfig::setting_s();
    let rfcn = HeadDesign::coco(HeadVariant::RfcnScoremap).warp_channels();
    let light = HeadDesign::coco(HeadVariant::LightHead).warp_channels();
    let thin = cfg.thin.c_out as u64;
    c.require(rfcn == 3969, format!("R-FCN score map {rfcn} channels"));
    c.require(light == 490 && thin == 490 && cfg.head.in_features() == 490, format!("thin map {thin} channels"));
    c.require(rfcn * 10 == light * 81, format!("ratio {rfcn}/{light} = 8.1 exactly"));
    let anchors = gen_anchors(&cfg.anchors, 1, 1).len();
    c.require(anchors == 15 && cfg.anchors.per_cell() == 15, format!("{anchors} anchors per location"));
    let det = Detector::new(cfg, 0).unwrap();
    let fc = det.params.get(det.params.find("head.fc.weight").unwrap()).dims().to_vec();
    c.require(fc == [490, 2048] && fc.iter().product::<usize>() == 490 * 2048, format!("first fc {fc:?}"));
    let macs = backbone_flops(&BackboneSpec::xception(), 224, 224).macs as f64;
    let dev = macs / 145e6 - 1.0;
    c.require(dev.abs() <= 0.10, format!("backbone {macs} MACs at 224, {:+.2}% from 145M", dev * 100.0));
    let (_, band) = backbone_check(224);
    let band = band.unwrap();
    c.require(
        band.passed && band.detail.contains("±10%") && band.detail.contains("1 MAC = 1 FLOP"),
        "report states the ±10% tolerance and the MAC convention",
    );
    c.finish(Duration::from_secs(10));
}

#[test]
fn criterion_4_cost_model() {
    let mut c = Criterion::new(4, "head cost model");
    let rois = [1u64, 10, 100, 300, 1000, 2000];
    let designs: Vec<HeadDesign> =
        [HeadVariant::FasterRcnn2fc, HeadVariant::RfcnScoremap, HeadVariant::LightHead].into_iter().map(HeadDesign::coco).collect();
    let d = &designs[2];
    c.require(d.num_classes == 80 && d.p == 7 && d.alpha == 10, "80 classes, p=7, α=10");
    let table = compare_designs(&designs, &rois);
    let (light, rfcn) = (table.total("light_head", 1000).unwrap(), table.total("rfcn_scoremap", 1000).unwrap());
    c.require(light < rfcn, format!("light_head {light} < rfcn_scoremap {rfcn} MACs at R=1000"));
    let two_fc = table.series("faster_rcnn_2fc");
    let slope = two_fc[0].per_roi_macs;
    let linear = two_fc.iter().all(|r| r.per_roi_macs == slope * r.rois && r.total_macs == r.map_macs + r.per_roi_macs);
    c.require(linear, format!("faster_rcnn_2fc per-RoI cost = {slope}·R"));
    for name in ["faster_rcnn_2fc", "rfcn_scoremap", "light_head"] {
        let s = table.series(name);
        c.require(s.windows(2).all(|w| w[0].map_macs == w[1].map_macs), format!("{name} map cost {} for every R", s[0].map_macs));
    }
    c.finish(Duration::from_secs(1));
}

#[test]
fn criterion_5_desk_scale_training() {
    let mut c = Criterion::new(5, "desk-scale train and infer");
    let cfg = DetectorConfig::toy();
    c.require(cfg.scene.image_size == 64, "64×64 scenes");
    let seed = seed_from_env(cfg.train.seed).unwrap();
    let ((det, report), (twin, twin_report)) = std::thread::scope(|s| {
        let a = s.spawn(|| train_toy(&cfg, seed, 500, |_, _| {}).unwrap());
        let b = s.spawn(|| train_toy(&cfg, seed, 500, |_, _| {}).unwrap());
        (a.join().unwrap(), b.join().unwrap())
    });
    let losses = report.losses();
    c.require(losses.len() == 500, format!("{} iterations", losses.len()));
    let reduction = report.reduction(50);
    c.require(
        reduction >= 0.6,
        format!("loss {:.4} → {:.4}, reduction {reduction:.3} ≥ 0.6", report.first_window(50), report.last_window(50)),
    );
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_params = det.params.iter().zip(twin.params.iter()).all(|((_, _, a), (_, _, b))| bits(a.data()) == bits(b.data()));
    c.require(bits(&losses) == bits(&twin_report.losses()) && same_params, "bit-identical rerun");

    let scenes = held_out_scenes(&det.cfg, seed, 50);
    let eval = evaluate(&det, &scenes, 0.5).unwrap();
    c.require(eval.images == 50 && det.cfg.score_thresh == 0.5, "50 held-out scenes at score 0.5");
    c.require(eval.recall() >= 0.9, format!("recall {:.3} ≥ 0.9 at IoU 0.5", eval.recall()));
    c.require(eval.fp_per_image() <= 1.0, format!("{:.3} false positives per image ≤ 1", eval.fp_per_image()));
    c.require(evaluate(&twin, &scenes, 0.5).unwrap() == eval, "rerun scores identically");

    let mut rng = stream(seed, 4);
    let blanks: Vec<SyntheticScene> = (0..10).map(|_| SyntheticScene::blank(&det.cfg.scene, &mut rng)).collect();
    let on_blank: usize = blanks.iter().map(|s| det.detect(&s.image).unwrap().len()).sum();
    c.require(on_blank == 0, format!("{on_blank} detections on 10 blank images"));
    let gt = BBox::new(20.0, 12.0, 44.0, 40.0);
    let single = SyntheticScene::single(64, gt, 1, det.cfg.head.num_classes);
    let top = det.detect(&single.image).unwrap().first().map(|d| iou(&d.bbox, &gt)).unwrap_or(0.0);
    c.require(top >= 0.5, format!("single rectangle top IoU {top:.3} ≥ 0.5"));
    c.finish(Duration::from_secs(600));
}

#[test]
fn criterion_6_light_head_structure() {
    let mut c = Criterion::new(6, "no wide map after the thin map");
    for (name, cfg, side) in [("toy", DetectorConfig::toy(), 64usize), ("setting_s", DetectorConfig::setting_s(), 800)] {
        let limit = cfg.warp.alpha * cfg.warp.p * cfg.warp.p;
        c.require(limit == 490, format!("{name} limit α·p·p = {limit}"));
        let det = Detector::new(cfg, 3).unwrap();
        let cost = det.inference_cost(side, side, det.cfg.proposals.post_nms_test);
        c.require(cost.items.iter().any(|i| i.name.starts_with("thin_map.")), format!("{name} itemises the thin map"));
        let bad = post_thin_map_violations(&cost, limit as u64);
        c.require(bad.is_empty(), format!("{name} itemisation: {} violations", bad.len()));
    }
    let det = Detector::new(DetectorConfig::toy(), 3).unwrap();
    let scenes = held_out_scenes(&det.cfg, 3, 2);
    let (_, trace) = det.detect_traced(&stack_images(&scenes.iter().collect::<Vec<_>>())).unwrap();
    c.require(!trace.is_empty() && traced_violations(&trace, 490).is_empty(), format!("{} traced tensors within 490 channels", trace.len()));
    let planted = CostReport::from_items(vec![
        CostItem::map("thin_map.branch_a.1xk", 1, 1, 490, 4, 4),
        CostItem::map("score_map", 1, 1, 3969, 4, 4),
    ]);
    c.require(post_thin_map_violations(&planted, 490).len() == 1, "a planted 3969-channel map is flagged");
    c.finish(Duration::from_secs(30));
}
