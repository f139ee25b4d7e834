//! Anchor grids, the anchor-relative box transform and its inverse, IOU,
//! and decoding of the raw detection-head output.
//!
//! Head channel layout: for anchor `k` the block starting at channel
//! `k·(5+C)` holds `[δx, δy, δw, δh, confidence logit, C class logits]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Axis-aligned box in pixels, stored by center and extent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_ltrb(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            cx: 0.5 * (left + right),
            cy: 0.5 * (top + bottom),
            w: right - left,
            h: bottom - top,
        }
    }

    pub fn left(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn right(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn top(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn bottom(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn ltrb(&self) -> [f64; 4] {
        [self.left(), self.top(), self.right(), self.bottom()]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }
}

/// Anchor-relative regression offsets `(δx, δy, δw, δh)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeCoords {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl RelativeCoords {
    pub const ZERO: Self = Self {
        dx: 0.0,
        dy: 0.0,
        dw: 0.0,
        dh: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }
}

/// Deform an anchor by predicted offsets.
pub fn transform(anchor: &BBox, d: &RelativeCoords) -> BBox {
    BBox {
        cx: anchor.cx + anchor.w * d.dx,
        cy: anchor.cy + anchor.h * d.dy,
        w: anchor.w * d.dw.exp(),
        h: anchor.h * d.dh.exp(),
    }
}

/// Regression targets that deform `anchor` into `gt`.
pub fn inverse_transform(gt: &BBox, anchor: &BBox) -> Result<RelativeCoords> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::InvalidBox(format!(
            "ground truth extent {}x{} is not positive",
            gt.w, gt.h
        )));
    }
    if !anchor.is_valid() {
        return Err(Error::InvalidBox(format!(
            "anchor extent {}x{} is not positive",
            anchor.w, anchor.h
        )));
    }
    Ok(RelativeCoords {
        dx: (gt.cx - anchor.cx) / anchor.w,
        dy: (gt.cy - anchor.cy) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dh: (gt.h / anchor.h).ln(),
    })
}

/// Intersection over union; 0 for disjoint or degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.right().min(b.right()) - a.left().max(b.left());
    let ih = a.bottom().min(b.bottom()) - a.top().max(b.top());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Anchors per cell, classes and anchor shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DetectorFile", into = "DetectorFile")]
pub struct DetectorConfig {
    pub class_names: Vec<String>,
    /// `(width, height)` in pixels, one per anchor.
    pub anchor_shapes: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectorFile {
    k: usize,
    classes: Vec<String>,
    anchors: Vec<[f64; 2]>,
}

impl TryFrom<DetectorFile> for DetectorConfig {
    type Error = Error;

    fn try_from(f: DetectorFile) -> Result<Self> {
        if f.k != f.anchors.len() {
            return Err(Error::Spec(format!(
                "detector declares k = {} but lists {} anchors",
                f.k,
                f.anchors.len()
            )));
        }
        DetectorConfig::new(f.classes, f.anchors.into_iter().map(|[w, h]| (w, h)).collect())
    }
}

impl From<DetectorConfig> for DetectorFile {
    fn from(c: DetectorConfig) -> Self {
        DetectorFile {
            k: c.k(),
            classes: c.class_names,
            anchors: c.anchor_shapes.into_iter().map(|(w, h)| [w, h]).collect(),
        }
    }
}

impl DetectorConfig {
    pub fn new(class_names: Vec<String>, anchor_shapes: Vec<(f64, f64)>) -> Result<Self> {
        if anchor_shapes.is_empty() {
            return Err(Error::Spec("detector needs at least one anchor".into()));
        }
        if class_names.is_empty() {
            return Err(Error::Spec("detector needs at least one class".into()));
        }
        if let Some(&(w, h)) = anchor_shapes.iter().find(|(w, h)| !(*w > 0.0 && *h > 0.0)) {
            return Err(Error::Spec(format!("anchor shape {w}x{h} is not positive")));
        }
        Ok(Self {
            class_names,
            anchor_shapes,
        })
    }

    pub fn k(&self) -> usize {
        self.anchor_shapes.len()
    }

    pub fn c(&self) -> usize {
        self.class_names.len()
    }

    /// Values emitted per anchor: 4 offsets, 1 confidence, C class logits.
    pub fn values_per_anchor(&self) -> usize {
        5 + self.c()
    }

    pub fn head_channels(&self) -> usize {
        self.k() * self.values_per_anchor()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }
}

/// Position of an anchor: column `i`, row `j`, shape `k` (all 0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnchorIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// The `W×H×K` reference boxes over an image. Flat anchor indices run
/// row-major over `(j, i, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub grid_w: usize,
    pub grid_h: usize,
    pub image_w: f64,
    pub image_h: f64,
    pub centers_x: Vec<f64>,
    pub centers_y: Vec<f64>,
    pub shapes: Vec<(f64, f64)>,
}

/// Anchor centers sit at cell midpoints, `(i − 0.5)·(image_w / W)` for `i = 1..=W`.
pub fn make_anchor_grid(
    config: &DetectorConfig,
    grid_w: usize,
    grid_h: usize,
    image_w: f64,
    image_h: f64,
) -> Result<AnchorGrid> {
    if grid_w == 0 || grid_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid extents must be positive, got {grid_w}x{grid_h}"
        )));
    }
    let centers = |n: usize, extent: f64| {
        let step = extent / n as f64;
        (1..=n).map(|i| (i as f64 - 0.5) * step).collect::<Vec<_>>()
    };
    Ok(AnchorGrid {
        grid_w,
        grid_h,
        image_w,
        image_h,
        centers_x: centers(grid_w, image_w),
        centers_y: centers(grid_h, image_h),
        shapes: config.anchor_shapes.clone(),
    })
}

impl AnchorGrid {
    pub fn k(&self) -> usize {
        self.shapes.len()
    }

    pub fn len(&self) -> usize {
        self.grid_w * self.grid_h * self.k()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self, idx: AnchorIndex) -> usize {
        (idx.j * self.grid_w + idx.i) * self.k() + idx.k
    }

    pub fn unflat(&self, flat: usize) -> AnchorIndex {
        let k = flat % self.k();
        let cell = flat / self.k();
        AnchorIndex {
            i: cell % self.grid_w,
            j: cell / self.grid_w,
            k,
        }
    }

    pub fn anchor(&self, idx: AnchorIndex) -> BBox {
        let (w, h) = self.shapes[idx.k];
        BBox::new(self.centers_x[idx.i], self.centers_y[idx.j], w, h)
    }

    pub fn anchor_flat(&self, flat: usize) -> BBox {
        self.anchor(self.unflat(flat))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, BBox)> + '_ {
        (0..self.len()).map(move |f| (f, self.anchor_flat(f)))
    }
}

/// One decoded anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub box_: BBox,
    pub confidence: f64,
    pub class_probs: Vec<f64>,
    pub class: usize,
    pub score: f64,
    pub anchor: usize,
}

pub(crate) fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Channel-extent check shared by the decoder and the loss.
pub(crate) fn check_head(raw: &Tensor, grid: &AnchorGrid, config: &DetectorConfig) -> Result<[usize; 4]> {
    let dims = raw.dims4()?;
    let [_, ch, h, w] = dims;
    if ch != config.head_channels() {
        return Err(Error::shape(
            "decode",
            format!(
                "head has {ch} channels, expected K·(5+C) = {}",
                config.head_channels()
            ),
        ));
    }
    if (h, w) != (grid.grid_h, grid.grid_w) || grid.k() != config.k() {
        return Err(Error::shape(
            "decode",
            format!(
                "head grid {w}x{h} does not match anchor grid {}x{}",
                grid.grid_w, grid.grid_h
            ),
        ));
    }
    Ok(dims)
}

/// Raw values of one anchor: offsets, confidence logit, class logits.
pub(crate) fn anchor_values(raw: &Tensor, n: usize, idx: AnchorIndex, vpa: usize) -> Vec<f64> {
    (0..vpa)
        .map(|f| raw.at4(n, idx.k * vpa + f, idx.j, idx.i))
        .collect()
}

/// Decode image `n` of a head-output batch into one prediction per anchor.
pub fn decode_item(raw: &Tensor, n: usize, grid: &AnchorGrid, config: &DetectorConfig) -> Result<Vec<Prediction>> {
    let [batch, ..] = check_head(raw, grid, config)?;
    if n >= batch {
        return Err(Error::shape("decode", format!("image {n} out of batch {batch}")));
    }
    let vpa = config.values_per_anchor();
    let preds = (0..grid.len())
        .map(|flat| {
            let idx = grid.unflat(flat);
            let v = anchor_values(raw, n, idx, vpa);
            let d = RelativeCoords {
                dx: v[0],
                dy: v[1],
                dw: v[2],
                dh: v[3],
            };
            let confidence = sigmoid_scalar(v[4]);
            let class_probs = softmax_vec(&v[5..]);
            let (class, &p_max) = class_probs
                .iter()
                .enumerate()
                .fold((0, &class_probs[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            Prediction {
                box_: transform(&grid.anchor(idx), &d),
                confidence,
                score: p_max * confidence,
                class,
                class_probs,
                anchor: flat,
            }
        })
        .collect();
    Ok(preds)
}

/// Decode a single-image head output (`[1, K·(5+C), H, W]`).
pub fn decode(raw: &Tensor, grid: &AnchorGrid, config: &DetectorConfig) -> Result<Vec<Prediction>> {
    decode_item(raw, 0, grid, config)
}
