//! Structural and cost-model claims checked against closed-form numbers.

use crate::backbone::{backbone_flops, BackboneSpec};
use crate::config::DetectorConfig;
use crate::cost::{compare_designs, head_cost, CostReport, HeadDesign, HeadVariant};
use crate::detector::{post_thin_map_violations, Detector};
use crate::error::Result;

use super::Check;

/// Reference backbone cost at 224×224 and the accepted relative band.
pub const BACKBONE_REFERENCE_MACS: f64 = 145e6;
pub const BACKBONE_TOLERANCE: f64 = 0.10;

fn check(suite: &'static str, case: impl Into<String>, passed: bool, metric: f64, detail: String) -> Check {
    Check { suite, case: case.into(), passed, metric, detail }
}

/// Backbone cost at `input`×`input`, with the band check only at 224.
pub fn backbone_check(input: usize) -> (CostReport, Option<Check>) {
    let report = backbone_flops(&BackboneSpec::xception(), input, input);
    let check = (input == 224).then(|| {
        let dev = report.macs as f64 / BACKBONE_REFERENCE_MACS - 1.0;
        check(
            "backbone",
            "macs at 224",
            dev.abs() <= BACKBONE_TOLERANCE,
            dev,
            format!(
                "{} MACs vs 145M reference, deviation {:+.2}% within ±{:.0}% (1 MAC = 1 FLOP; bias, BN, activations free)",
                report.macs,
                dev * 100.0,
                BACKBONE_TOLERANCE * 100.0
            ),
        )
    });
    (report, check)
}

/// Channel counts, anchors and first-FC size produced by the fast-detector configuration.
pub fn structural_checks() -> Result<Vec<Check>> {
    let cfg = DetectorConfig::setting_s();
    let rfcn = HeadDesign::coco(HeadVariant::RfcnScoremap).warp_channels();
    let light = cfg.thin.c_out as u64;
    let mut out = vec![
        check("structure", "rfcn score map channels", rfcn == 81 * 7 * 7, rfcn as f64, format!("{rfcn} = 81·7·7")),
        check("structure", "thin map channels", light == 10 * 7 * 7, light as f64, format!("{light} = 10·7·7")),
        check("structure", "channel ratio", rfcn * 10 == light * 81, rfcn as f64 / light as f64, format!("{rfcn}/{light} = {:.4}", rfcn as f64 / light as f64)),
    ];
    let a = cfg.anchors.per_cell();
    out.push(check("structure", "anchors per location", a == 15, a as f64, format!("{a} = 3 ratios × 5 areas")));
    let det = Detector::new(cfg, 0)?;
    let fc = det.params.find("head.fc.weight").map(|id| det.params.get(id).dims().to_vec()).unwrap_or_default();
    let count: usize = fc.iter().product();
    out.push(check("structure", "first fc weights", fc == [490, 2048], count as f64, format!("{fc:?}, {count} = 490×2048")));
    Ok(out)
}

/// Head cost ordering and R-dependence on the COCO designs.
pub fn cost_checks() -> Vec<Check> {
    let rois = [100u64, 300, 1000, 2000];
    let designs: Vec<HeadDesign> =
        [HeadVariant::FasterRcnn2fc, HeadVariant::RfcnScoremap, HeadVariant::LightHead].into_iter().map(HeadDesign::coco).collect();
    let table = compare_designs(&designs, &rois);
    let light = table.total("light_head", 1000).unwrap_or(u64::MAX);
    let rfcn = table.total("rfcn_scoremap", 1000).unwrap_or(0);
    let mut out = vec![check(
        "cost",
        "light_head < rfcn_scoremap at R=1000",
        light < rfcn,
        light as f64 / rfcn as f64,
        format!("{light} vs {rfcn} MACs"),
    )];
    let series = table.series("faster_rcnn_2fc");
    let unit = head_cost(&HeadDesign::coco(HeadVariant::FasterRcnn2fc).with_rois(1)).per_roi_macs();
    let linear = series.iter().all(|r| r.per_roi_macs == unit * r.rois);
    out.push(check("cost", "faster_rcnn_2fc per-RoI cost linear in R", linear, unit as f64, format!("{unit} MACs per RoI over R={rois:?}")));
    let flat = ["faster_rcnn_2fc", "rfcn_scoremap", "light_head"]
        .iter()
        .all(|d| table.series(d).windows(2).all(|w| w[0].map_macs == w[1].map_macs));
    out.push(check("cost", "map cost independent of R", flat, 0.0, "map_macs constant along every series".into()));
    out
}

/// No spatial tensor after the thin map wider than `α·p·p` channels.
pub fn light_head_check(det: &Detector, h: usize, w: usize, rois: usize) -> Check {
    let limit = (det.cfg.warp.alpha * det.cfg.warp.p * det.cfg.warp.p) as u64;
    let report = det.inference_cost(h, w, rois);
    let bad = post_thin_map_violations(&report, limit);
    let widest = report
        .items
        .iter()
        .skip_while(|i| !i.name.starts_with("thin_map."))
        .filter(|i| i.spatial)
        .map(|i| i.channels)
        .max()
        .unwrap_or(0);
    let names: Vec<&str> = bad.iter().map(|i| i.name.as_str()).collect();
    check(
        "structure",
        format!("post-thin-map channels at {h}x{w}"),
        bad.is_empty(),
        widest as f64,
        format!("widest {widest} ≤ {limit}; violations {names:?}"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::all_passed;

    #[test]
    fn claims_hold() {
        assert!(backbone_check(224).1.unwrap().passed);
        assert!(backbone_check(320).1.is_none());
        assert!(all_passed(&structural_checks().unwrap()));
        assert!(all_passed(&cost_checks()));
        let det = Detector::new(DetectorConfig::toy(), 0).unwrap();
        assert!(light_head_check(&det, 64, 64, 16).passed);
    }
}
