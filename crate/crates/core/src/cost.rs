//! Static cost model: parameter counts, FLOPs, activation memory, conv-pool
//! fusion and SRAM schedulability. MB means 2²⁰ bytes throughout.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{Activation, LayerKind, ModelSpec};

pub const BYTES_PER_VALUE: u64 = 4;
pub const MIB: f64 = 1_048_576.0;

pub fn mb(bytes: u64) -> f64 {
    bytes as f64 / MIB
}

/// Geometry of a detection head, for the closed-form parameter counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct HeadSpec {
    pub f_w: u64,
    pub f_h: u64,
    pub ch_f: u64,
    pub w_f: u64,
    pub h_f: u64,
    pub w_o: u64,
    pub h_o: u64,
    pub f_fc1: u64,
    pub k: u64,
    pub c: u64,
}

/// `F_w·F_h·Ch_f·K·(5+C)`, biases excluded.
pub fn params_convdet(h: &HeadSpec) -> u64 {
    h.f_w * h.f_h * h.ch_f * h.k * (5 + h.c)
}

/// `F_fc1·(W_f·H_f·Ch_f + W_o·H_o·(5K+C))`.
pub fn params_fcdet(h: &HeadSpec) -> u64 {
    h.f_fc1 * (h.w_f * h.h_f * h.ch_f + h.w_o * h.h_o * (5 * h.k + h.c))
}

/// `Ch_f·K·5`: region proposals carry no class scores.
pub fn params_rpn(h: &HeadSpec) -> u64 {
    h.ch_f * h.k * 5
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct HeadRow {
    pub head: &'static str,
    pub proposes_regions: bool,
    pub classifies: bool,
    pub params: u64,
}

pub fn compare_heads(h: &HeadSpec) -> Vec<HeadRow> {
    vec![
        HeadRow {
            head: "RPN",
            proposes_regions: true,
            classifies: false,
            params: params_rpn(h),
        },
        HeadRow {
            head: "ConvDet",
            proposes_regions: true,
            classifies: true,
            params: params_convdet(h),
        },
        HeadRow {
            head: "FcDet",
            proposes_regions: true,
            classifies: true,
            params: params_fcdet(h),
        },
    ]
}

pub fn head_table(rows: &[HeadRow]) -> String {
    let mut out = format!("{:<8} {:>16} {:>10} {:>14}\n", "head", "region proposal", "classify", "params");
    for r in rows {
        let yn = |b: bool| if b { "yes" } else { "no" };
        let _ = writeln!(out, "{:<8} {:>16} {:>10} {:>14}", r.head, yn(r.proposes_regions), yn(r.classifies), r.params);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnalyzeOptions {
    pub batch: u64,
    pub fuse_conv_pool: bool,
    pub flops_per_mac: u64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        Self {
            batch: 1,
            fuse_conv_pool: false,
            flops_per_mac: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    /// Row name; fire modules split into `<name>/squeeze` and `<name>/expand`.
    pub name: String,
    /// Spec layer this row belongs to.
    pub layer: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
    /// (batch, channels, height, width).
    pub output_shape: [u64; 4],
    pub output_bytes: u64,
    /// Bytes kept in memory; differs from `output_bytes` under fusion.
    pub stored_bytes: u64,
    /// A pool merged into its producing conv.
    pub fused: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PeakPair {
    pub first: String,
    pub second: String,
    pub bytes: u64,
    pub mb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostTotals {
    pub params: u64,
    pub model_mb: f64,
    pub flops: u64,
    pub footprint_bytes: u64,
    pub footprint_mb: f64,
    pub peak_pair: Option<PeakPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input: [u64; 3],
    pub options: AnalyzeOptions,
    pub layers: Vec<LayerCost>,
    pub totals: CostTotals,
    /// Totals recomputed with conv-pool fusion enabled.
    pub fused: CostTotals,
}

fn conv_cost(
    fpm: u64,
    batch: u64,
    kh: usize,
    kw: usize,
    c_in: usize,
    out: [usize; 3],
    relu: bool,
) -> (u64, u64) {
    let [c_out, h, w] = out.map(|v| v as u64);
    let (kh, kw, c_in) = (kh as u64, kw as u64, c_in as u64);
    let params = kh * kw * c_in * c_out + c_out;
    let elems = c_out * h * w;
    let flops = batch * (fpm * kh * kw * c_in * elems + elems + if relu { elems } else { 0 });
    (params, flops)
}

fn row(name: String, layer: &str, kind: &'static str, params: u64, flops: u64, batch: u64, out: [usize; 3]) -> LayerCost {
    let shape = [batch, out[0] as u64, out[1] as u64, out[2] as u64];
    let bytes = shape.iter().product::<u64>() * BYTES_PER_VALUE;
    LayerCost {
        name,
        layer: layer.to_string(),
        kind,
        params,
        flops,
        output_shape: shape,
        output_bytes: bytes,
        stored_bytes: bytes,
        fused: false,
    }
}

fn cost_rows(model: &ModelSpec, h: usize, w: usize, opts: &AnalyzeOptions) -> Result<Vec<LayerCost>> {
    let plan = model.plan(h, w)?;
    let (b, fpm) = (opts.batch, opts.flops_per_mac);
    let mut rows = Vec::with_capacity(plan.len() + 8);
    for (layer, shape) in model.layers.iter().zip(&plan) {
        let c_in = shape.input[0];
        let n = &layer.name;
        match &layer.kind {
            LayerKind::Conv { geom, activation, .. } => {
                let relu = *activation == Activation::Relu;
                let (p, f) = conv_cost(fpm, b, geom.kernel.h, geom.kernel.w, c_in, shape.output, relu);
                rows.push(row(n.clone(), n, "conv", p, f, b, shape.output));
            }
            LayerKind::ConvDet { geom } => {
                let (p, f) = conv_cost(fpm, b, geom.kernel.h, geom.kernel.w, c_in, shape.output, false);
                rows.push(row(n.clone(), n, "convdet", p, f, b, shape.output));
            }
            LayerKind::MaxPool { .. } => {
                let elems = shape.output.iter().product::<usize>() as u64;
                rows.push(row(n.clone(), n, "maxpool", 0, b * elems, b, shape.output));
            }
            LayerKind::Fire(fire) => {
                let [_, fh, fw] = shape.output;
                let sq = [fire.s_1x1, fh, fw];
                let (p, f) = conv_cost(fpm, b, 1, 1, c_in, sq, true);
                rows.push(row(format!("{n}/squeeze"), n, "squeeze", p, f, b, sq));
                let (p1, f1) = conv_cost(fpm, b, 1, 1, fire.s_1x1, [fire.e_1x1, fh, fw], true);
                let (p3, f3) = conv_cost(fpm, b, 3, 3, fire.s_1x1, [fire.e_3x3, fh, fw], true);
                rows.push(row(format!("{n}/expand"), n, "expand", p1 + p3, f1 + f3, b, shape.output));
            }
        }
    }
    Ok(rows)
}

fn apply_fusion(rows: &mut [LayerCost]) {
    for i in 1..rows.len() {
        if rows[i].kind == "maxpool" && rows[i - 1].kind == "conv" {
            rows[i - 1].stored_bytes = rows[i].output_bytes;
            rows[i].stored_bytes = 0;
            rows[i].fused = true;
        }
    }
}

fn totals(rows: &[LayerCost]) -> CostTotals {
    let params: u64 = rows.iter().map(|r| r.params).sum();
    let footprint: u64 = rows.iter().map(|r| r.stored_bytes).sum();
    let live: Vec<&LayerCost> = rows.iter().filter(|r| !r.fused).collect();
    let peak_pair = live
        .windows(2)
        .map(|p| (p[0], p[1], p[0].stored_bytes + p[1].stored_bytes))
        .fold(None::<(&LayerCost, &LayerCost, u64)>, |best, cur| match best {
            Some(b) if b.2 >= cur.2 => Some(b),
            _ => Some(cur),
        })
        .map(|(a, b, bytes)| PeakPair {
            first: a.name.clone(),
            second: b.name.clone(),
            bytes,
            mb: mb(bytes),
        });
    CostTotals {
        params,
        model_mb: mb(params * BYTES_PER_VALUE),
        flops: rows.iter().map(|r| r.flops).sum(),
        footprint_bytes: footprint,
        footprint_mb: mb(footprint),
        peak_pair,
    }
}

/// Per-layer and total costs of `model` at input `h`×`w`.
pub fn analyze(model: &ModelSpec, h: usize, w: usize, opts: &AnalyzeOptions) -> Result<CostReport> {
    if opts.batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    let mut rows = cost_rows(model, h, w, opts)?;
    let mut fused_rows = rows.clone();
    apply_fusion(&mut fused_rows);
    if opts.fuse_conv_pool {
        rows = fused_rows.clone();
    }
    Ok(CostReport {
        input: [model.input.c as u64, h as u64, w as u64],
        options: *opts,
        totals: totals(&rows),
        fused: totals(&fused_rows),
        layers: rows,
    })
}

impl CostReport {
    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column table: per-layer rows, then model size, FLOPs and
    /// activation footprint totals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<18} {:<8} {:>20} {:>12} {:>16} {:>12}",
            "layer", "kind", "output (NxCxHxW)", "params", "FLOPs", "act MB"
        );
        for l in &self.layers {
            let [n, c, h, w] = l.output_shape;
            let act = if l.fused {
                "fused".to_string()
            } else {
                format!("{:.3}", mb(l.stored_bytes))
            };
            let _ = writeln!(
                out,
                "{:<18} {:<8} {:>20} {:>12} {:>16} {:>12}",
                l.name,
                l.kind,
                format!("{n}x{c}x{h}x{w}"),
                l.params,
                l.flops,
                act
            );
        }
        let t = &self.totals;
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:>14} {:>10} {:>22}",
            "model size MB", "GFLOPs", "activation footprint MB"
        );
        let _ = writeln!(out, "{:>14.2} {:>10.2} {:>22.1}", t.model_mb, t.flops as f64 / 1e9, t.footprint_mb);
        if let Some(p) = &t.peak_pair {
            let _ = writeln!(out, "peak consecutive pair: {} + {} = {:.2} MB", p.first, p.second, p.mb);
        }
        let _ = writeln!(out, "with conv-pool fusion: footprint {:.1} MB", self.fused.footprint_mb);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SramVerdict {
    pub fits: bool,
    pub budget_mb: f64,
    pub model_mb: f64,
    pub peak_pair_mb: f64,
    pub required_mb: f64,
    pub limiting_pair: Option<(String, String)>,
}

/// Fits iff model MB plus the largest consecutive activation pair fit the budget.
pub fn sram_check_values(model_mb: f64, peak_pair_mb: f64, pair: Option<(String, String)>, budget_mb: f64) -> SramVerdict {
    let required = model_mb + peak_pair_mb;
    SramVerdict {
        fits: required <= budget_mb,
        budget_mb,
        model_mb,
        peak_pair_mb,
        required_mb: required,
        limiting_pair: pair,
    }
}

pub fn sram_check(report: &CostReport, budget_mb: f64) -> SramVerdict {
    let t = &report.totals;
    let (pair_mb, pair) = match &t.peak_pair {
        Some(p) => (p.mb, Some((p.first.clone(), p.second.clone()))),
        None => (report.layers.first().map_or(0.0, |l| mb(l.stored_bytes)), None),
    };
    sram_check_values(t.model_mb, pair_mb, pair, budget_mb)
}

impl SramVerdict {
    pub fn to_text(&self) -> String {
        let pair = self
            .limiting_pair
            .as_ref()
            .map_or("-".to_string(), |(a, b)| format!("{a} + {b}"));
        format!(
            "sram {:.1} MB: {} (model {:.2} MB + peak pair {:.2} MB = {:.2} MB; limiting pair {pair})\n",
            self.budget_mb,
            if self.fits { "fits" } else { "does not fit" },
            self.model_mb,
            self.peak_pair_mb,
            self.required_mb
        )
    }
}
