use std::fmt::Write as _;

use super::data::Sample;
use super::train::anchor_grid_for;
use crate::convdet::{decode, BBox, Prediction};
use crate::error::{Error, Result};
use crate::loss::GroundTruth;
use crate::network::{forward, ModelSpec, WeightStore};
use crate::postprocess::{filter_predictions, recall_sweep, RecallCurve};
use crate::tensor::Tensor;

pub const DEFAULT_TOP_N: usize = 64;
pub const DEFAULT_NMS_IOU: f64 = 0.4;

/// Every anchor's prediction for one `[1, c, h, w]` image.
pub fn predict(model: &ModelSpec, weights: &WeightStore, image: &Tensor) -> Result<Vec<Prediction>> {
    let [n, _, h, w] = image.dims4()?;
    if n != 1 {
        return Err(Error::shape("predict", format!("expected one image, got batch {n}")));
    }
    let grid = anchor_grid_for(model, h, w)?;
    let out = forward(model, weights, image)?;
    decode(&out.head, &grid, &model.detector)
}

/// decode → top-N → NMS, highest score first.
pub fn detect(
    model: &ModelSpec,
    weights: &WeightStore,
    image: &Tensor,
    top_n: usize,
    nms_iou: f64,
) -> Result<Vec<Prediction>> {
    if !(nms_iou > 0.0 && nms_iou <= 1.0) {
        return Err(Error::InvalidArgument(format!("nms threshold must be in (0, 1], got {nms_iou}")));
    }
    Ok(filter_predictions(&predict(model, weights, image)?, top_n, nms_iou))
}

/// `image_id class_name score left top right bottom` per line.
pub fn format_detections(image_id: &str, dets: &[Prediction], class_names: &[String]) -> String {
    let mut out = String::new();
    for d in dets {
        let [l, t, r, b] = d.box_.ltrb();
        let _ = writeln!(
            out,
            "{image_id} {} {:.9} {l:.4} {t:.4} {r:.4} {b:.4}",
            class_names[d.class], d.score
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionLine {
    pub image_id: String,
    pub class_name: String,
    pub score: f64,
    pub bbox: BBox,
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionLine>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Dataset(format!("detection line {}: malformed", n + 1));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(DetectionLine {
                image_id: f[0].to_string(),
                class_name: f[1].to_string(),
                score: num(2)?,
                bbox: BBox::from_ltrb(num(3)?, num(4)?, num(5)?, num(6)?),
            })
        })
        .collect()
}

/// Recall of the top-n raw predictions over a dataset.
pub fn dataset_recall(
    model: &ModelSpec,
    weights: &WeightStore,
    data: &[Sample],
    n_values: &[usize],
    iou_threshold: f64,
) -> Result<RecallCurve> {
    if data.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let preds = data
        .iter()
        .map(|s| predict(model, weights, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<GroundTruth> = data.iter().map(|s| s.gts.clone()).collect();
    recall_sweep(&preds, &gts, n_values, iou_threshold)
}
