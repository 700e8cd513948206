//! Analytic cost accounting.
//!
//! Convention: one multiply-accumulate is one FLOP; bias, batch-norm and
//! activations are free; pooling costs one MAC-equivalent per contributing
//! sample. Activation values are counted, not bytes, and all itemised
//! activations are treated as simultaneously live.

use std::fmt::Write as _;

use crate::thinmap::{sep_conv_flops, LargeSepConvSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostItem {
    pub name: String,
    pub macs: u64,
    pub params: u64,
    pub activations: u64,
    /// Channel count of the produced tensor.
    pub channels: u64,
    /// True when the produced tensor is a spatial map (as opposed to a per-RoI vector).
    pub spatial: bool,
    /// True when the cost scales with the number of RoIs.
    pub per_roi: bool,
}

impl CostItem {
    pub fn map(name: impl Into<String>, macs: u64, params: u64, channels: u64, h: u64, w: u64) -> Self {
        Self {
            name: name.into(),
            macs,
            params,
            activations: channels * h * w,
            channels,
            spatial: true,
            per_roi: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub macs: u64,
    pub params: u64,
    pub peak_activation_values: u64,
    pub items: Vec<CostItem>,
}

impl CostReport {
    pub fn from_items(items: Vec<CostItem>) -> Self {
        Self {
            macs: items.iter().map(|i| i.macs).sum(),
            params: items.iter().map(|i| i.params).sum(),
            peak_activation_values: items.iter().map(|i| i.activations).sum(),
            items,
        }
    }

    pub fn item(&self, name: &str) -> Option<&CostItem> {
        self.items.iter().find(|i| i.name == name)
    }

    pub fn per_roi_macs(&self) -> u64 {
        self.items.iter().filter(|i| i.per_roi).map(|i| i.macs).sum()
    }

    pub fn map_macs(&self) -> u64 {
        self.items.iter().filter(|i| !i.per_roi).map(|i| i.macs).sum()
    }

    /// Appends another report's items under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &CostReport) {
        let mut items = std::mem::take(&mut self.items);
        items.extend(other.items.iter().cloned().map(|mut i| {
            i.name = format!("{prefix}{}", i.name);
            i
        }));
        *self = Self::from_items(items);
    }

    /// One line per item followed by `#=` key=value totals.
    pub fn render(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "== {title}");
        let _ = writeln!(s, "{:<34} {:>16} {:>12} {:>14}", "layer", "macs", "params", "activations");
        for i in &self.items {
            let _ = writeln!(s, "{:<34} {:>16} {:>12} {:>14}", i.name, i.macs, i.params, i.activations);
        }
        let _ = writeln!(s, "{:<34} {:>16} {:>12} {:>14}", "total", self.macs, self.params, self.peak_activation_values);
        let key = title.replace(' ', "_");
        let _ = writeln!(s, "#= {key}.macs={}", self.macs);
        let _ = writeln!(s, "#= {key}.params={}", self.params);
        let _ = writeln!(s, "#= {key}.activations={}", self.peak_activation_values);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadVariant {
    /// Pooled backbone features followed by two wide FC layers and class-specific regression.
    FasterRcnn2fc,
    /// 1x1 reduce, `(classes+1)·p·p` score map, PSRoI pooling and voting.
    RfcnScoremap,
    /// Large separable conv to `α·p·p` channels, PSRoI pooling, one FC.
    LightHead,
}

impl HeadVariant {
    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::FasterRcnn2fc => "faster_rcnn_2fc",
            HeadVariant::RfcnScoremap => "rfcn_scoremap",
            HeadVariant::LightHead => "light_head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadDesign {
    pub variant: HeadVariant,
    /// Foreground classes; classifiers emit one more logit for background.
    pub num_classes: u64,
    pub p: u64,
    pub alpha: u64,
    pub k: u64,
    pub c_mid: u64,
    pub c_in: u64,
    pub h: u64,
    pub w: u64,
    pub rois: u64,
    /// Hidden width of the per-RoI FC layers (2048 light head, 1024 for the 2fc baseline).
    pub fc_width: u64,
    /// Width of the R-FCN dimension-reducing 1x1 conv.
    pub rfcn_reduce: u64,
    pub samples_per_bin: u64,
}

impl HeadDesign {
    /// Fast-detector setting on an 800x1200 COCO image: 576-channel stride-32 map (25x38),
    /// 80 classes, p = 7, 1000 RoIs.
    pub fn coco(variant: HeadVariant) -> Self {
        Self {
            variant,
            num_classes: 80,
            p: 7,
            alpha: 10,
            k: 15,
            c_mid: 64,
            c_in: 576,
            h: 25,
            w: 38,
            rois: 1000,
            fc_width: if variant == HeadVariant::FasterRcnn2fc { 1024 } else { 2048 },
            rfcn_reduce: 1024,
            samples_per_bin: 4,
        }
    }

    pub fn with_rois(mut self, rois: u64) -> Self {
        self.rois = rois;
        self
    }

    /// Channels of the map that RoI warping reads.
    pub fn warp_channels(&self) -> u64 {
        match self.variant {
            HeadVariant::FasterRcnn2fc => self.c_in,
            HeadVariant::RfcnScoremap => (self.num_classes + 1) * self.p * self.p,
            HeadVariant::LightHead => self.alpha * self.p * self.p,
        }
    }

    /// Values held by the map that RoI warping reads.
    pub fn warp_map_values(&self) -> u64 {
        self.warp_channels() * self.h * self.w
    }

    pub fn sep_conv_spec(&self) -> LargeSepConvSpec {
        LargeSepConvSpec {
            k: self.k as usize,
            c_in: self.c_in as usize,
            c_mid: self.c_mid as usize,
            c_out: (self.alpha * self.p * self.p) as usize,
            single_branch: false,
            bias: true,
        }
    }
}

fn per_roi(name: &str, rois: u64, macs_each: u64, params: u64, out_each: u64, spatial: bool, channels: u64) -> CostItem {
    CostItem {
        name: name.into(),
        macs: rois * macs_each,
        params,
        activations: rois * out_each,
        channels,
        spatial,
        per_roi: true,
    }
}

/// Itemised head cost: map generation before warping, per-RoI work after it,
/// and the activation memory of the warped maps.
pub fn head_cost(d: &HeadDesign) -> CostReport {
    let pp = d.p * d.p;
    let r = d.rois;
    let classes = d.num_classes + 1;
    let mut items = Vec::new();
    match d.variant {
        HeadVariant::FasterRcnn2fc => {
            let pooled = d.c_in * pp;
            items.push(per_roi("roi_pool", r, pooled * d.samples_per_bin, 0, pooled, true, d.c_in));
            items.push(per_roi("fc1", r, pooled * d.fc_width, pooled * d.fc_width + d.fc_width, d.fc_width, false, d.fc_width));
            items.push(per_roi("fc2", r, d.fc_width * d.fc_width, d.fc_width * d.fc_width + d.fc_width, d.fc_width, false, d.fc_width));
            items.push(per_roi("cls", r, d.fc_width * classes, d.fc_width * classes + classes, classes, false, classes));
            let reg = 4 * classes;
            items.push(per_roi("reg", r, d.fc_width * reg, d.fc_width * reg + reg, reg, false, reg));
        }
        HeadVariant::RfcnScoremap => {
            let hw = d.h * d.w;
            let ch = d.warp_channels();
            items.push(CostItem::map("reduce_1x1", hw * d.c_in * d.rfcn_reduce, d.c_in * d.rfcn_reduce + d.rfcn_reduce, d.rfcn_reduce, d.h, d.w));
            items.push(CostItem::map("score_map", hw * d.rfcn_reduce * ch, d.rfcn_reduce * ch + ch, ch, d.h, d.w));
            items.push(per_roi("psroi_pool", r, ch * d.samples_per_bin, 0, ch, true, classes));
        }
        HeadVariant::LightHead => {
            let sep = sep_conv_flops(&d.sep_conv_spec(), d.h as usize, d.w as usize);
            items.extend(sep.report.items.iter().cloned().map(|mut i| {
                i.name = format!("thin_map.{}", i.name);
                i
            }));
            let ch = d.warp_channels();
            items.push(per_roi("psroi_pool_aligned", r, ch * d.samples_per_bin, 0, ch, true, d.alpha));
            items.push(per_roi("fc", r, ch * d.fc_width, ch * d.fc_width + d.fc_width, d.fc_width, false, d.fc_width));
            items.push(per_roi("cls", r, d.fc_width * classes, d.fc_width * classes + classes, classes, false, classes));
            items.push(per_roi("reg", r, d.fc_width * 4, d.fc_width * 4 + 4, 4, false, 4));
        }
    }
    CostReport::from_items(items)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub design: String,
    pub rois: u64,
    pub map_macs: u64,
    pub per_roi_macs: u64,
    pub total_macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Crossover {
    pub a: String,
    pub b: String,
    /// Smallest real RoI count at which `a` costs more than `b`, when the lines cross.
    pub rois: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub rows: Vec<CostRow>,
    pub crossovers: Vec<Crossover>,
}

impl CostTable {
    pub fn total(&self, design: &str, rois: u64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.design == design && r.rois == rois)
            .map(|r| r.total_macs)
    }

    pub fn series(&self, design: &str) -> Vec<&CostRow> {
        self.rows.iter().filter(|r| r.design == design).collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>8} {:>16} {:>16} {:>16}", "design", "rois", "map_macs", "per_roi_macs", "total_macs");
        for r in &self.rows {
            let _ = writeln!(s, "{:<18} {:>8} {:>16} {:>16} {:>16}", r.design, r.rois, r.map_macs, r.per_roi_macs, r.total_macs);
        }
        for c in &self.crossovers {
            match c.rois {
                Some(x) => {
                    let _ = writeln!(s, "#= crossover.{}.{}={x:.1}", c.a, c.b);
                }
                None => {
                    let _ = writeln!(s, "#= crossover.{}.{}=none", c.a, c.b);
                }
            }
        }
        s
    }
}

/// Cost curves against RoI count and pairwise crossover points.
/// Designs are labelled by variant name; duplicate variants get a `#n` suffix.
pub fn compare_designs(designs: &[HeadDesign], roi_values: &[u64]) -> CostTable {
    let mut labels: Vec<String> = Vec::new();
    for d in designs {
        let base = d.variant.name().to_string();
        let n = labels.iter().filter(|l| l.split('#').next() == Some(base.as_str())).count();
        labels.push(if n == 0 { base } else { format!("{base}#{n}") });
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (d, label) in designs.iter().zip(&labels) {
        let unit = head_cost(&d.clone().with_rois(1));
        let base = head_cost(&d.clone().with_rois(0));
        lines.push((base.map_macs(), unit.per_roi_macs()));
        for &r in roi_values {
            let rep = head_cost(&d.clone().with_rois(r));
            rows.push(CostRow {
                design: label.clone(),
                rois: r,
                map_macs: rep.map_macs(),
                per_roi_macs: rep.per_roi_macs(),
                total_macs: rep.macs,
            });
        }
    }
    let mut crossovers = Vec::new();
    for i in 0..designs.len() {
        for j in 0..designs.len() {
            if i == j {
                continue;
            }
            let (ma, sa) = lines[i];
            let (mb, sb) = lines[j];
            // a(R) = ma + sa R exceeds b(R) = mb + sb R once R > (mb - ma) / (sa - sb)
            let rois = (sa > sb).then(|| ((mb as f64 - ma as f64) / (sa - sb) as f64).max(0.0));
            crossovers.push(Crossover {
                a: labels[i].clone(),
                b: labels[j].clone(),
                rois,
            });
        }
    }
    CostTable { rows, crossovers }
}
