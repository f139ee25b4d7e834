//! Top-N filtering, per-class NMS, and recall / average-precision evaluation.

use std::cmp::Ordering;

use serde::Serialize;

use crate::convdet::{iou, BBox, Prediction};
use crate::error::{Error, Result};
use crate::loss::GroundTruth;

/// Anything that can be ranked and suppressed.
pub trait Scored {
    fn score(&self) -> f64;
    fn class(&self) -> usize;
    fn bbox(&self) -> &BBox;
}

impl Scored for Prediction {
    fn score(&self) -> f64 {
        self.score
    }

    fn class(&self) -> usize {
        self.class
    }

    fn bbox(&self) -> &BBox {
        &self.box_
    }
}

/// A final detection on image `image`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

impl Scored for Detection {
    fn score(&self) -> f64 {
        self.score
    }

    fn class(&self) -> usize {
        self.class
    }

    fn bbox(&self) -> &BBox {
        &self.bbox
    }
}

impl Detection {
    pub fn from_prediction(image: usize, p: &Prediction) -> Self {
        Self {
            image,
            class: p.class,
            score: p.score,
            bbox: p.box_,
        }
    }
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// The `n` highest-scoring predictions, descending; ties go to the lower
/// flat anchor index.
pub fn top_n(preds: &[Prediction], n: usize) -> Vec<Prediction> {
    let mut order: Vec<&Prediction> = preds.iter().collect();
    order.sort_by(|a, b| by_score_desc(a.score, b.score).then(a.anchor.cmp(&b.anchor)));
    order.into_iter().take(n).cloned().collect()
}

/// Greedy per-class suppression. Output is in descending score order; equal
/// scores keep their input order.
pub fn nms<T: Scored + Clone>(dets: &[T], iou_threshold: f64) -> Vec<T> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_score_desc(dets[a].score(), dets[b].score()));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        let suppressed = kept
            .iter()
            .any(|&k| dets[k].class() == d.class() && iou(dets[k].bbox(), d.bbox()) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Detection pipeline for one image: top-N, then NMS.
pub fn filter_predictions(preds: &[Prediction], n: usize, iou_threshold: f64) -> Vec<Prediction> {
    nms(&top_n(preds, n), iou_threshold)
}

/// Greedy one-to-one matching of score-ranked items against same-class
/// ground truth. Each item takes the unmatched box of highest IOU, provided
/// it reaches `iou_threshold`. Returns per-item hit flags in ranked order.
fn match_ranked<T: Scored>(ranked: &[&T], gts: &GroundTruth, iou_threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (g, obj) in gts.objects.iter().enumerate() {
                if taken[g] || obj.class != d.class() {
                    continue;
                }
                let overlap = iou(d.bbox(), &obj.bbox);
                if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((g, overlap));
                }
            }
            match best {
                Some((g, _)) => {
                    taken[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallPoint {
    pub n: usize,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RecallCurve {
    pub points: Vec<RecallPoint>,
}

impl RecallCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,recall\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.n, p.recall));
        }
        out
    }

    pub fn is_monotone(&self) -> bool {
        self.points.windows(2).all(|w| w[0].recall <= w[1].recall)
    }
}

/// Fraction of ground-truth boxes matched by the top-`n` predictions of each
/// image, for every `n` in `n_values`.
pub fn recall_sweep(
    preds: &[Vec<Prediction>],
    gts: &[GroundTruth],
    n_values: &[usize],
    iou_threshold: f64,
) -> Result<RecallCurve> {
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prediction sets for {} images",
            preds.len(),
            gts.len()
        )));
    }
    if n_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("n values must be ascending".into()));
    }
    let total: usize = gts.iter().map(GroundTruth::len).sum();
    if total == 0 {
        return Err(Error::NoGroundTruth);
    }
    let max_n = n_values.last().copied().unwrap_or(0);
    let ranked: Vec<Vec<Prediction>> = preds.iter().map(|p| top_n(p, max_n)).collect();
    let mut points = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut hits = 0;
        for (r, g) in ranked.iter().zip(gts) {
            let items: Vec<&Prediction> = r.iter().take(n).collect();
            hits += match_ranked(&items, g, iou_threshold).into_iter().filter(|&h| h).count();
        }
        points.push(RecallPoint {
            n,
            recall: hits as f64 / total as f64,
        });
    }
    Ok(RecallCurve { points })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ApReport {
    /// `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes that have ground truth.
    pub map: f64,
}

/// Average precision of one class: area under the exact precision-recall
/// step curve.
pub fn class_average_precision(dets: &[Detection], gts: &[GroundTruth], class: usize, iou_threshold: f64) -> Option<f64> {
    let positives: usize = gts
        .iter()
        .map(|g| g.objects.iter().filter(|o| o.class == class).count())
        .sum();
    if positives == 0 {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    ranked.sort_by(|a, b| by_score_desc(a.score, b.score));

    // Matching is per image but must follow the global rank order.
    let mut hit = vec![false; ranked.len()];
    for (image, g) in gts.iter().enumerate() {
        let slots: Vec<usize> = (0..ranked.len()).filter(|&r| ranked[r].image == image).collect();
        let items: Vec<&Detection> = slots.iter().map(|&r| ranked[r]).collect();
        for (slot, h) in slots.into_iter().zip(match_ranked(&items, g, iou_threshold)) {
            hit[slot] = h;
        }
    }
    let mut tp = 0usize;
    let mut area = 0.0;
    for (rank, &h) in hit.iter().enumerate() {
        if h {
            tp += 1;
            area += (tp as f64 / (rank + 1) as f64) / positives as f64;
        }
    }
    Some(area)
}

pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_threshold: f64) -> Result<ApReport> {
    if dets.iter().any(|d| d.image >= gts.len()) {
        return Err(Error::InvalidArgument("detection refers to an unknown image".into()));
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| class_average_precision(dets, gts, c, iou_threshold))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(ApReport {
        map: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}
