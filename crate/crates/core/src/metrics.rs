//! Point-level evaluation: accuracy, frequency-weighted IoU, per-class
//! accuracy and instance AP at 50% overlap.

use std::collections::BTreeMap;
use std::path::Path;

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::labels::Label;

fn check_pair(pred: &[Label], gt: &[Label]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "evaluation pair",
            format!("{} predictions for {} ground-truth points", pred.len(), gt.len()),
        ));
    }
    if gt.is_empty() {
        return Err(Error::invalid("evaluation pair", "no points"));
    }
    Ok(())
}

/// Fraction of points whose prediction equals the ground truth.
pub fn accuracy(pred: &[Label], gt: &[Label]) -> Result<f64> {
    check_pair(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Sum over ground-truth classes of class frequency times class IoU.
pub fn weighted_iou(pred: &[Label], gt: &[Label]) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut inter: BTreeMap<Label, usize> = BTreeMap::new();
    let mut gt_count: BTreeMap<Label, usize> = BTreeMap::new();
    let mut pred_count: FxHashMap<Label, usize> = FxHashMap::default();
    for (&p, &g) in pred.iter().zip(gt) {
        *gt_count.entry(g).or_default() += 1;
        *pred_count.entry(p).or_default() += 1;
        if p == g {
            *inter.entry(g).or_default() += 1;
        }
    }
    let n = gt.len() as f64;
    let mut total = 0.0;
    for (&c, &g) in &gt_count {
        let i = inter.get(&c).copied().unwrap_or(0);
        let union = g + pred_count.get(&c).copied().unwrap_or(0) - i;
        total += (g as f64 / n) * (i as f64 / union as f64);
    }
    Ok(total)
}

/// Accuracy within each ground-truth class; classes without points are
/// absent.
pub fn per_class_accuracy(pred: &[Label], gt: &[Label]) -> Result<BTreeMap<Label, f64>> {
    check_pair(pred, gt)?;
    let mut counts: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        let e = counts.entry(g).or_default();
        e.1 += 1;
        if p == g {
            e.0 += 1;
        }
    }
    Ok(counts.into_iter().map(|(c, (h, n))| (c, h as f64 / n as f64)).collect())
}

/// Mean of the per-class values.
pub fn macro_average(per_class: &BTreeMap<Label, f64>) -> Option<f64> {
    (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64)
}

/// A predicted instance: category, score and member point indices (sorted).
#[derive(Debug, Clone, PartialEq)]
pub struct PredInstance {
    pub category: Label,
    pub confidence: f64,
    pub points: Vec<usize>,
}

/// A ground-truth instance with sorted member point indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtInstance {
    pub category: Label,
    pub points: Vec<usize>,
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// IoU of two sorted point-index sets.
pub fn point_iou(a: &[usize], b: &[usize]) -> f64 {
    let i = sorted_intersection(a, b);
    let u = a.len() + b.len() - i;
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ApReport {
    /// AP per class with at least one ground-truth instance.
    pub per_class: BTreeMap<Label, f64>,
    pub mean: Option<f64>,
}

/// Area under the precision-recall curve with all-point interpolation.
/// `hits` are true-positive flags in ranked order.
pub fn all_point_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    for (k, &h) in hits.iter().enumerate() {
        tp += usize::from(h);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.into_iter().zip(precision) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    ap
}

/// Per-class AP at IoU 0.5. Predictions are ranked by confidence (ties by
/// input order); each takes the unmatched same-class ground-truth instance
/// with the highest IoU and counts as a hit iff that IoU is at least 0.5.
pub fn average_precision_50(pred: &[PredInstance], gt: &[GtInstance]) -> ApReport {
    let mut classes: Vec<Label> = gt.iter().map(|g| g.category).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut report = ApReport::default();
    for &c in &classes {
        let gts: Vec<&GtInstance> = gt.iter().filter(|g| g.category == c).collect();
        let mut preds: Vec<&PredInstance> = pred.iter().filter(|p| p.category == c).collect();
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut matched = vec![false; gts.len()];
        let hits: Vec<bool> = preds
            .iter()
            .map(|p| {
                let mut best: Option<(usize, f64)> = None;
                for (k, g) in gts.iter().enumerate() {
                    if matched[k] {
                        continue;
                    }
                    let iou = point_iou(&p.points, &g.points);
                    if best.is_none_or(|b| iou > b.1) {
                        best = Some((k, iou));
                    }
                }
                match best {
                    Some((k, iou)) if iou >= 0.5 => {
                        matched[k] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        report.per_class.insert(c, all_point_ap(&hits, gts.len()));
    }
    report.mean = macro_average(&report.per_class);
    report
}

/// Groups points by instance id into ground-truth instances; id 0 is
/// unlabeled and skipped. The category is the majority label of the points.
pub fn gt_instances(instance: &[u16], label: &[Label]) -> Vec<GtInstance> {
    group_points(instance, label)
        .into_iter()
        .map(|(category, points)| GtInstance { category, points })
        .collect()
}

/// Groups points by predicted instance id (0 skipped). The category is the
/// majority label; the confidence the mean of `confidence` over members.
pub fn pred_instances(instance: &[u16], label: &[Label], confidence: &[f32]) -> Vec<PredInstance> {
    group_points(instance, label)
        .into_iter()
        .map(|(category, points)| {
            let c = points.iter().map(|&i| f64::from(confidence[i])).sum::<f64>() / points.len() as f64;
            PredInstance {
                category,
                confidence: c,
                points,
            }
        })
        .collect()
}

fn group_points(instance: &[u16], label: &[Label]) -> Vec<(Label, Vec<usize>)> {
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &id) in instance.iter().enumerate() {
        if id != 0 {
            groups.entry(id).or_default().push(i);
        }
    }
    groups
        .into_values()
        .map(|points| {
            let mut votes: BTreeMap<Label, usize> = BTreeMap::new();
            for &i in &points {
                *votes.entry(label[i]).or_default() += 1;
            }
            let category = votes
                .iter()
                .fold((0, 0), |best, (&l, &n)| if n > best.1 { (l, n) } else { best })
                .0;
            (category, points)
        })
        .collect()
}

/// For each ground-truth instance, the share of its points carried by the
/// most frequent predicted id among them (unknown id 0 included).
pub fn dominant_coverage(gt: &[GtInstance], pred_instance: &[u16]) -> Vec<(u16, f64)> {
    gt.iter()
        .map(|g| {
            let mut votes: BTreeMap<u16, usize> = BTreeMap::new();
            for &i in &g.points {
                *votes.entry(pred_instance[i]).or_default() += 1;
            }
            let (id, n) = votes
                .iter()
                .fold((0, 0), |best, (&id, &n)| if n > best.1 { (id, n) } else { best });
            (id, n as f64 / g.points.len().max(1) as f64)
        })
        .collect()
}

/// Index of the nearest `reference` point within `max_dist` of each query
/// point, through a uniform hash grid.
pub fn nearest_within(query: &[[f32; 3]], reference: &[[f32; 3]], max_dist: f64) -> Vec<Option<usize>> {
    let cell = |p: &[f32; 3]| p.map(|x| (f64::from(x) / max_dist).floor() as i64);
    let mut grid: FxHashMap<[i64; 3], Vec<usize>> = FxHashMap::default();
    for (i, p) in reference.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let d2 = |a: &[f32; 3], b: &[f32; 3]| {
        (0..3)
            .map(|k| {
                let d = f64::from(a[k]) - f64::from(b[k]);
                d * d
            })
            .sum::<f64>()
    };
    query
        .iter()
        .map(|q| {
            let c = cell(q);
            let mut best: Option<(usize, f64)> = None;
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &i in list {
                            let d = d2(q, &reference[i]);
                            if d <= max_dist * max_dist && best.is_none_or(|b| d < b.1) {
                                best = Some((i, d));
                            }
                        }
                    }
                }
            }
            best.map(|b| b.0)
        })
        .collect()
}

/// One report line.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scene: String,
    pub method: String,
    pub metric: String,
    /// Class name, or `all` for scene-level values.
    pub class: String,
    pub value: f64,
}

impl ReportRow {
    pub fn new(scene: &str, method: &str, metric: &str, class: &str, value: f64) -> Self {
        ReportRow {
            scene: scene.into(),
            method: method.into(),
            metric: metric.into(),
            class: class.into(),
            value,
        }
    }
}

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::format("csv report", e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["scene", "method", "metric", "class", "value"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([&r.scene, &r.method, &r.metric, &r.class, &format!("{:.6}", r.value)])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let csv_err = |e: csv::Error| Error::format("csv report", e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 5 {
            return Err(Error::format("csv report", "expected 5 columns"));
        }
        let value = rec[4]
            .parse()
            .map_err(|e| Error::format("csv report", format!("bad value: {e}")))?;
        rows.push(ReportRow::new(&rec[0], &rec[1], &rec[2], &rec[3], value));
    }
    Ok(rows)
}
