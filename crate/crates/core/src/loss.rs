//! Anchor assignment and the multi-task detection loss.
//!
//! The loss of one image is
//!
//! ```text
//! λ_bbox/N_obj · Σ I·‖δ − δᴳ‖²
//!   + λ⁺/N_obj · Σ I·(γ − γᴳ)²  +  λ⁻/(WHK − N_obj) · Σ (1−I)·γ²
//!   − 1/N_obj · Σ I · Σ_c lᴳ_c · log p_c
//! ```
//!
//! with `γ = sigmoid(conf logit)`, `p = softmax(class logits)` and `γᴳ` the
//! IOU of the currently predicted box with its assigned ground truth, held
//! constant during differentiation. A batch loss is the mean over images.

use serde::{Deserialize, Serialize};

use crate::convdet::{
    anchor_values, check_head, inverse_transform, iou, transform, AnchorGrid, BBox, DetectorConfig,
    RelativeCoords,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Lower bound applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn clamp_probs(p: f64) -> f64 {
    p.max(PROB_FLOOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_bbox: f64,
    pub lambda_conf_pos: f64,
    pub lambda_conf_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bbox: 5.0,
            lambda_conf_pos: 75.0,
            lambda_conf_neg: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_bbox, self.lambda_conf_pos, self.lambda_conf_neg];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Spec(format!("loss weights must be finite and ≥ 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Object {
    pub bbox: BBox,
    /// 0-based class index.
    pub class: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub objects: Vec<Object>,
}

impl GroundTruth {
    pub fn new(objects: Vec<Object>) -> Self {
        Self { objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// A ground-truth box bound to its responsible anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assigned {
    pub anchor: usize,
    pub gt: usize,
    pub gt_box: BBox,
    pub class: usize,
    pub target: RelativeCoords,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    pub total_anchors: usize,
    pub assigned: Vec<Assigned>,
}

impl AnchorAssignment {
    pub fn n_obj(&self) -> usize {
        self.assigned.len()
    }

    /// `I_ijk` over flat anchor indices.
    pub fn indicator(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total_anchors];
        for a in &self.assigned {
            mask[a.anchor] = true;
        }
        mask
    }
}

/// Each ground truth, in index order, claims its highest-IOU anchor among
/// those not yet claimed. IOU ties go to the smallest flat anchor index.
pub fn assign_anchors(gts: &GroundTruth, grid: &AnchorGrid) -> Result<AnchorAssignment> {
    let total = grid.len();
    let mut claimed = vec![false; total];
    let mut assigned = Vec::with_capacity(gts.len());
    for (gi, obj) in gts.objects.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (flat, anchor) in grid.iter() {
            if claimed[flat] {
                continue;
            }
            let overlap = iou(&anchor, &obj.bbox);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((flat, overlap));
            }
        }
        let Some((flat, _)) = best else { break };
        claimed[flat] = true;
        assigned.push(Assigned {
            anchor: flat,
            gt: gi,
            gt_box: obj.bbox,
            class: obj.class,
            target: inverse_transform(&obj.bbox, &grid.anchor_flat(flat))?,
        });
    }
    Ok(AnchorAssignment {
        total_anchors: total,
        assigned,
    })
}

/// `γᴳ` for every assigned anchor of every image: IOU between the box the
/// head currently predicts and the assigned ground truth.
pub fn iou_targets(
    raw: &Tensor,
    assignments: &[AnchorAssignment],
    grid: &AnchorGrid,
    config: &DetectorConfig,
) -> Result<Vec<Vec<f64>>> {
    let [batch, ..] = check_head(raw, grid, config)?;
    if batch != assignments.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{batch} images but {} assignments", assignments.len()),
        ));
    }
    let vpa = config.values_per_anchor();
    Ok(assignments
        .iter()
        .enumerate()
        .map(|(n, a)| {
            a.assigned
                .iter()
                .map(|s| {
                    let idx = grid.unflat(s.anchor);
                    let v = anchor_values(raw, n, idx, vpa);
                    let d = RelativeCoords {
                        dx: v[0],
                        dy: v[1],
                        dw: v[2],
                        dh: v[3],
                    };
                    iou(&transform(&grid.anchor(idx), &d), &s.gt_box)
                })
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub bbox: f64,
    pub conf_pos: f64,
    pub conf_neg: f64,
    pub class: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    /// Differentiable scalar root.
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Multi-task loss over a batch of head outputs, `γᴳ` taken from the
/// current predictions.
pub fn total_loss(
    tape: &mut Tape,
    raw: Var,
    assignments: &[AnchorAssignment],
    grid: &AnchorGrid,
    config: &DetectorConfig,
    weights: &LossWeights,
) -> Result<LossOutput> {
    let targets = iou_targets(tape.value(raw), assignments, grid, config)?;
    total_loss_with_iou_targets(tape, raw, assignments, &targets, grid, config, weights)
}

/// Same loss with caller-supplied `γᴳ` (one vector per image, parallel to
/// `assignments[n].assigned`).
pub fn total_loss_with_iou_targets(
    tape: &mut Tape,
    raw: Var,
    assignments: &[AnchorAssignment],
    iou_targets: &[Vec<f64>],
    grid: &AnchorGrid,
    config: &DetectorConfig,
    weights: &LossWeights,
) -> Result<LossOutput> {
    weights.validate()?;
    let [batch, _, gh, gw] = check_head(tape.value(raw), grid, config)?;
    if batch != assignments.len() || batch != iou_targets.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{batch} images, {} assignments, {} target sets", assignments.len(), iou_targets.len()),
        ));
    }
    let (k, c, vpa) = (config.k(), config.c(), config.values_per_anchor());
    let plane = gh * gw;
    let total_anchors = grid.len();
    let per_image = 1.0 / batch as f64;

    let coord_channels: Vec<usize> = (0..k).flat_map(|a| (0..4).map(move |f| a * vpa + f)).collect();
    let conf_channels: Vec<usize> = (0..k).map(|a| a * vpa + 4).collect();
    let class_channels: Vec<usize> = (0..k).flat_map(|a| (0..c).map(move |f| a * vpa + 5 + f)).collect();

    let mut coord_target = vec![0.0; batch * 4 * k * plane];
    let mut coord_weight = vec![0.0; coord_target.len()];
    let mut conf_target = vec![0.0; batch * k * plane];
    let mut pos_weight = vec![0.0; conf_target.len()];
    let mut neg_weight = vec![0.0; conf_target.len()];
    let mut class_weight = vec![0.0; batch * k * c * plane];

    for (n, (assign, gammas)) in assignments.iter().zip(iou_targets).enumerate() {
        if assign.total_anchors != total_anchors || gammas.len() != assign.n_obj() {
            return Err(Error::shape("total_loss", "assignment does not match the anchor grid"));
        }
        let n_obj = assign.n_obj();
        let positive = assign.indicator();
        let neg_scale = if total_anchors > n_obj {
            weights.lambda_conf_neg / (total_anchors - n_obj) as f64 * per_image
        } else {
            0.0
        };
        for (flat, &is_pos) in positive.iter().enumerate() {
            if !is_pos {
                let idx = grid.unflat(flat);
                neg_weight[(n * k + idx.k) * plane + idx.j * gw + idx.i] = neg_scale;
            }
        }
        if n_obj == 0 {
            continue;
        }
        let inv_obj = per_image / n_obj as f64;
        for (s, &gamma) in assign.assigned.iter().zip(gammas) {
            let idx = grid.unflat(s.anchor);
            let cell = idx.j * gw + idx.i;
            for (f, t) in s.target.to_array().into_iter().enumerate() {
                let at = (n * 4 * k + idx.k * 4 + f) * plane + cell;
                coord_target[at] = t;
                coord_weight[at] = weights.lambda_bbox * inv_obj;
            }
            let at = (n * k + idx.k) * plane + cell;
            conf_target[at] = gamma;
            pos_weight[at] = weights.lambda_conf_pos * inv_obj;
            class_weight[((n * k + idx.k) * c + s.class) * plane + cell] = -inv_obj;
        }
    }

    let deltas = tape.gather_channels(raw, &coord_channels)?;
    let delta_shape = tape.shape(deltas).to_vec();
    let targets = tape.constant(Tensor::new(delta_shape, coord_target)?);
    let diff = tape.sub(deltas, targets)?;
    let sq = tape.square(diff)?;
    let bbox = tape.weighted_sum(sq, coord_weight)?;

    let conf_logits = tape.gather_channels(raw, &conf_channels)?;
    let gamma = tape.sigmoid(conf_logits)?;
    let gamma_shape = tape.shape(gamma).to_vec();
    let gamma_target = tape.constant(Tensor::new(gamma_shape, conf_target)?);
    let gdiff = tape.sub(gamma, gamma_target)?;
    let gsq = tape.square(gdiff)?;
    let conf_pos = tape.weighted_sum(gsq, pos_weight)?;
    let gamma_sq = tape.square(gamma)?;
    let conf_neg = tape.weighted_sum(gamma_sq, neg_weight)?;

    let class_logits = tape.gather_channels(raw, &class_channels)?;
    let per_anchor = tape.reshape(class_logits, &[batch * k, c, gh, gw])?;
    let probs = tape.softmax(per_anchor, 1)?;
    let clamped = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(clamped)?;
    let class = tape.weighted_sum(logp, class_weight)?;

    let a = tape.add(bbox, conf_pos)?;
    let b = tape.add(conf_neg, class)?;
    let total = tape.add(a, b)?;

    let breakdown = LossBreakdown {
        bbox: tape.scalar(bbox),
        conf_pos: tape.scalar(conf_pos),
        conf_neg: tape.scalar(conf_neg),
        class: tape.scalar(class),
        total: tape.scalar(total),
    };
    Ok(LossOutput { total, breakdown })
}
