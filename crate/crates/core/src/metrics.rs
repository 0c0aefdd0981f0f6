//! Class-agnostic detection metrics: greedy IoU matching, precision and
//! recall, 11-point AP, average F-score over a threshold grid, and
//! class-aware recognition AP.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, GroundTruth};
use crate::error::{invalid, Result};
use crate::semantics::PrototypeTable;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Number of thresholds in the `0, 0.01, …, 1` grid.
pub const THRESHOLDS: usize = 101;

pub fn threshold(j: usize) -> f64 {
    j as f64 / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub confidence: f64,
    pub semantic: Vec<f64>,
    pub predicted_class: Option<u32>,
}

impl Detection {
    pub fn new(bbox: BBox, confidence: f64) -> Self {
        Self {
            bbox,
            confidence,
            semantic: Vec::new(),
            predicted_class: None,
        }
    }
}

/// Indices of `confidences` from highest to lowest; equal values keep
/// their input order.
fn by_confidence(confidences: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    order
}

/// TP flags for each detection, in input order. Detections are visited by
/// descending confidence; each takes its best-IoU unmatched ground truth
/// and is a TP when that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_thresh: f64) -> Vec<bool> {
    let conf: Vec<f64> = dets.iter().map(|d| d.confidence).collect();
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; dets.len()];
    for i in by_confidence(&conf) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[*g])
            .map(|(g, b)| (g, iou(&dets[i].bbox, b)))
            .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, v)) = best {
            if v >= iou_thresh {
                taken[g] = true;
                flags[i] = true;
            }
        }
    }
    flags
}

/// Confidence-scored match outcomes pooled over a set of images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Matched {
    pub confidences: Vec<f64>,
    pub tp: Vec<bool>,
    pub n_gt: usize,
}

impl Matched {
    pub fn new(confidences: Vec<f64>, tp: Vec<bool>, n_gt: usize) -> Self {
        Self { confidences, tp, n_gt }
    }

    /// Matches one image's detections and appends them.
    pub fn add_image(&mut self, dets: &[Detection], gts: &[BBox], iou_thresh: f64) {
        let flags = match_detections(dets, gts, iou_thresh);
        self.confidences.extend(dets.iter().map(|d| d.confidence));
        self.tp.extend(flags);
        self.n_gt += gts.len();
    }

    /// Concatenates in order.
    pub fn merge(parts: impl IntoIterator<Item = Matched>) -> Self {
        parts.into_iter().fold(Self::default(), |mut acc, m| {
            acc.confidences.extend(m.confidences);
            acc.tp.extend(m.tp);
            acc.n_gt += m.n_gt;
            acc
        })
    }

    pub fn counts(&self, conf_thresh: f64) -> Counts {
        let mut c = Counts {
            tp: 0,
            pred: 0,
            gt: self.n_gt,
        };
        for (&conf, &tp) in self.confidences.iter().zip(&self.tp) {
            if conf >= conf_thresh {
                c.pred += 1;
                c.tp += usize::from(tp);
            }
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub pred: usize,
    pub gt: usize,
}

impl Counts {
    /// `TP/Pred`, taken as 1 with no predictions.
    pub fn precision(&self) -> f64 {
        if self.pred == 0 {
            1.0
        } else {
            self.tp as f64 / self.pred as f64
        }
    }

    /// `TP/GT`, taken as 0 with no ground truth.
    pub fn recall(&self) -> f64 {
        if self.gt == 0 {
            0.0
        } else {
            self.tp as f64 / self.gt as f64
        }
    }

    pub fn fscore(&self, form: FScoreForm) -> f64 {
        fscore(self.precision(), self.recall(), form)
    }
}

/// `P·R/(P+R)`, doubled for the conventional form; 0 when `P+R = 0`.
pub fn fscore(p: f64, r: f64, form: FScoreForm) -> f64 {
    if p + r == 0.0 {
        return 0.0;
    }
    let f = p * r / (p + r);
    match form {
        FScoreForm::Half => f,
        FScoreForm::Conventional => 2.0 * f,
    }
}

/// `Half` is `P·R/(P+R)`; `Conventional` is the usual F1, twice as large.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FScoreForm {
    #[default]
    Half,
    Conventional,
}

pub fn precision_recall(m: &Matched, conf_thresh: f64) -> (f64, f64) {
    let c = m.counts(conf_thresh);
    (c.precision(), c.recall())
}

/// Precision/recall after each group of equal confidences, highest first.
fn operating_points(m: &Matched) -> Vec<(f64, f64)> {
    let order = by_confidence(&m.confidences);
    let mut points = Vec::new();
    let (mut tp, mut pred) = (0usize, 0usize);
    for (pos, &i) in order.iter().enumerate() {
        pred += 1;
        tp += usize::from(m.tp[i]);
        let group_ends = order
            .get(pos + 1)
            .map_or(true, |&j| m.confidences[j] != m.confidences[i]);
        if group_ends {
            let c = Counts { tp, pred, gt: m.n_gt };
            points.push((c.recall(), c.precision()));
        }
    }
    points
}

/// Mean over recall levels `0, 0.1, …, 1` of the best precision reached at
/// that recall or above; unreachable levels count as 0.
pub fn average_precision_11pt(m: &Matched) -> f64 {
    let points = operating_points(m);
    (0..=10)
        .map(|i| {
            let r = i as f64 / 10.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r)
                .map(|&(_, p)| p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Mean F-score over the 101-threshold grid.
pub fn average_fscore(m: &Matched, form: FScoreForm) -> f64 {
    (0..THRESHOLDS).map(|j| m.counts(threshold(j)).fscore(form)).sum::<f64>() / THRESHOLDS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub avg_fscore: f64,
    /// `(recall, precision)` at each grid threshold.
    pub pr_points: Vec<(f64, f64)>,
    /// `(threshold, recall)` at each grid threshold.
    pub recall_curve: Vec<(f64, f64)>,
    pub counts: Vec<Counts>,
    pub fscore_form: FScoreForm,
}

impl EvalReport {
    pub fn recall_at(&self, conf_thresh: f64) -> f64 {
        let j = ((conf_thresh * 100.0).round() as usize).min(THRESHOLDS - 1);
        self.recall_curve[j].1
    }

    /// Per-threshold counts followed by an `ap,avg_fscore` summary.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,tp,pred,gt,precision,recall,fscore\n");
        for (j, c) in self.counts.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                threshold(j),
                c.tp,
                c.pred,
                c.gt,
                c.precision(),
                c.recall(),
                c.fscore(self.fscore_form)
            );
        }
        let _ = writeln!(s, "ap,avg_fscore\n{},{}", self.ap, self.avg_fscore);
        s
    }

    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.pr_points {
            let _ = writeln!(s, "{r},{p}");
        }
        s
    }

    pub fn recall_csv(&self) -> String {
        let mut s = String::from("threshold,recall\n");
        for (t, r) in &self.recall_curve {
            let _ = writeln!(s, "{t},{r}");
        }
        s
    }
}

pub fn curves(m: &Matched, form: FScoreForm) -> EvalReport {
    let counts: Vec<Counts> = (0..THRESHOLDS).map(|j| m.counts(threshold(j))).collect();
    EvalReport {
        ap: average_precision_11pt(m),
        avg_fscore: average_fscore(m, form),
        pr_points: counts.iter().map(|c| (c.recall(), c.precision())).collect(),
        recall_curve: counts.iter().enumerate().map(|(j, c)| (threshold(j), c.recall())).collect(),
        counts,
        fscore_form: form,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub name: String,
    pub seen: bool,
    pub ap: f64,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecognitionReport {
    /// Classes with at least one ground-truth object, by id.
    pub per_class: Vec<ClassAp>,
    pub seen_mean: Option<f64>,
    pub unseen_mean: Option<f64>,
}

impl RecognitionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class_id,name,seen,gt,ap\n");
        for c in &self.per_class {
            let _ = writeln!(s, "{},{},{},{},{}", c.class_id, c.name, c.seen, c.n_gt, c.ap);
        }
        let fmt = |v: Option<f64>| v.map_or(String::from("nan"), |v| v.to_string());
        let _ = writeln!(s, "seen_mean,unseen_mean\n{},{}", fmt(self.seen_mean), fmt(self.unseen_mean));
        s
    }
}

/// Per-class AP where a detection only matches ground truth of the class it
/// was labelled with.
pub fn recognition_report(
    images: &[(Vec<Detection>, Vec<GroundTruth>)],
    classes: &PrototypeTable,
    iou_thresh: f64,
) -> Result<RecognitionReport> {
    let mut per: BTreeMap<u32, Matched> = classes.classes.iter().map(|c| (c.id, Matched::default())).collect();
    for (i, (dets, gts)) in images.iter().enumerate() {
        for d in dets {
            let c = d
                .predicted_class
                .ok_or_else(|| invalid!("image {i} has a detection without a predicted class"))?;
            if !per.contains_key(&c) {
                return Err(invalid!("image {i}: detection labelled with unknown class {c}"));
            }
        }
        if let Some(g) = gts.iter().find(|g| !per.contains_key(&g.class_id)) {
            return Err(invalid!("image {i}: ground truth of unknown class {}", g.class_id));
        }
        for (&c, m) in per.iter_mut() {
            let d: Vec<Detection> = dets.iter().filter(|d| d.predicted_class == Some(c)).cloned().collect();
            let g: Vec<BBox> = gts.iter().filter(|g| g.class_id == c).map(|g| g.bbox).collect();
            m.add_image(&d, &g, iou_thresh);
        }
    }
    let per_class: Vec<ClassAp> = classes
        .classes
        .iter()
        .filter_map(|c| {
            let m = &per[&c.id];
            (m.n_gt > 0).then(|| ClassAp {
                class_id: c.id,
                name: c.name.clone(),
                seen: c.seen,
                ap: average_precision_11pt(m),
                n_gt: m.n_gt,
            })
        })
        .collect();
    let mean = |seen: bool| {
        let v: Vec<f64> = per_class.iter().filter(|c| c.seen == seen).map(|c| c.ap).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(RecognitionReport {
        seen_mean: mean(true),
        unseen_mean: mean(false),
        per_class,
    })
}
