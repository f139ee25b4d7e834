use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::convdet::DetectorConfig;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::tensor::out_extent;

/// A (height, width) pair. In spec files a bare integer means both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims2 {
    pub h: usize,
    pub w: usize,
}

impl Dims2 {
    pub const fn square(n: usize) -> Self {
        Self { h: n, w: n }
    }
}

impl Serialize for Dims2 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.h == self.w {
            s.serialize_u64(self.h as u64)
        } else {
            [self.h, self.w].serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for Dims2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(usize),
            Two([usize; 2]),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::One(n) => Dims2::square(n),
            Raw::Two([h, w]) => Dims2 { h, w },
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FireSpec {
    pub s_1x1: usize,
    pub e_1x1: usize,
    pub e_3x3: usize,
}

impl FireSpec {
    pub fn out_channels(&self) -> usize {
        self.e_1x1 + self.e_3x3
    }

    pub fn param_count(&self, in_channels: usize) -> usize {
        in_channels * self.s_1x1
            + self.s_1x1
            + self.s_1x1 * self.e_1x1
            + self.e_1x1
            + 9 * self.s_1x1 * self.e_3x3
            + self.e_3x3
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: Dims2,
    pub stride: Dims2,
    pub padding: Dims2,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        filters: usize,
        geom: ConvGeometry,
        activation: Activation,
    },
    MaxPool {
        geom: ConvGeometry,
    },
    Fire(FireSpec),
    /// Output channels are `K·(5+C)` from the detector config.
    ConvDet {
        geom: ConvGeometry,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Fire(_) => "fire",
            LayerKind::ConvDet { .. } => "convdet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Optional declared input channel count, checked against the chain.
    pub in_channels: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Whether height and width may differ from `h`, `w` at run time.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub flexible: bool,
}

/// Input and output extents of one layer, as (channels, height, width).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kind: &'static str,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// A named parameter tensor shape, in weight-file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
    /// Receptive elements per output unit; zero for biases.
    pub fan_in: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
    pub detector: DetectorConfig,
    pub loss: LossWeights,
    /// Resolved (in, out) channels per layer.
    channels: Vec<(usize, usize)>,
}

impl ModelSpec {
    pub fn new(
        input: InputSpec,
        layers: Vec<LayerSpec>,
        detector: DetectorConfig,
        loss: LossWeights,
    ) -> Result<Self> {
        let channels = validate(&input, &layers, &detector, &loss)?;
        Ok(Self {
            input,
            layers,
            detector,
            loss,
            channels,
        })
    }

    pub fn layer_channels(&self, index: usize) -> (usize, usize) {
        self.channels[index]
    }

    pub fn has_head(&self) -> bool {
        matches!(self.layers.last().map(|l| &l.kind), Some(LayerKind::ConvDet { .. }))
    }

    /// Channels of the map fed to the head (or of the final layer if no head).
    pub fn feature_channels(&self) -> usize {
        match self.channels.len() {
            0 => self.input.c,
            n if self.has_head() => self.channels[n - 1].0,
            n => self.channels[n - 1].1,
        }
    }

    /// Static shape propagation at an input resolution.
    pub fn plan(&self, h: usize, w: usize) -> Result<Vec<LayerShape>> {
        let mut cur = [self.input.c, h, w];
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, &(_, c_out)) in self.layers.iter().zip(&self.channels) {
            let next = match &layer.kind {
                LayerKind::Conv { geom, .. } | LayerKind::MaxPool { geom } | LayerKind::ConvDet { geom } => {
                    let eh = out_extent(cur[1], geom.kernel.h, geom.stride.h, geom.padding.h);
                    let ew = out_extent(cur[2], geom.kernel.w, geom.stride.w, geom.padding.w);
                    match (eh, ew) {
                        (Some(eh), Some(ew)) => [c_out, eh, ew],
                        _ => {
                            return Err(Error::Extent {
                                op: "plan",
                                detail: format!("layer {} on {}x{}", layer.name, cur[1], cur[2]),
                            })
                        }
                    }
                }
                LayerKind::Fire(_) => [c_out, cur[1], cur[2]],
            };
            out.push(LayerShape {
                name: layer.name.clone(),
                kind: layer.kind.name(),
                input: cur,
                output: next,
            });
            cur = next;
        }
        Ok(out)
    }

    /// Head grid extents (W, H) at an input resolution.
    pub fn grid_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let plan = self.plan(h, w)?;
        let last = plan.last().ok_or_else(|| Error::Spec("empty model".into()))?;
        Ok((last.output[2], last.output[1]))
    }

    pub fn param_shapes(&self) -> Vec<ParamShape> {
        let mut out = Vec::new();
        let mut push = |name: String, f: usize, c: usize, k: Dims2| {
            let fan_in = c * k.h * k.w;
            out.push(ParamShape {
                name: format!("{name}/weight"),
                shape: vec![f, c, k.h, k.w],
                fan_in,
            });
            out.push(ParamShape {
                name: format!("{name}/bias"),
                shape: vec![f],
                fan_in: 0,
            });
        };
        for (layer, &(c_in, c_out)) in self.layers.iter().zip(&self.channels) {
            match &layer.kind {
                LayerKind::Conv { filters, geom, .. } => push(layer.name.clone(), *filters, c_in, geom.kernel),
                LayerKind::ConvDet { geom } => push(layer.name.clone(), c_out, c_in, geom.kernel),
                LayerKind::MaxPool { .. } => {}
                LayerKind::Fire(f) => {
                    push(format!("{}/squeeze", layer.name), f.s_1x1, c_in, Dims2::square(1));
                    push(format!("{}/expand1x1", layer.name), f.e_1x1, f.s_1x1, Dims2::square(1));
                    push(format!("{}/expand3x3", layer.name), f.e_3x3, f.s_1x1, Dims2::square(3));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawModel = serde_json::from_str(text)?;
        raw.try_into()
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form: two-space indented JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let raw = RawModel::from(self);
        let mut text = serde_json::to_string_pretty(&raw).expect("spec serializes");
        text.push('\n');
        text
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_json())
    }
}

pub fn parse_spec(text: &str) -> Result<ModelSpec> {
    ModelSpec::parse(text)
}

pub fn serialize_spec(spec: &ModelSpec) -> String {
    spec.to_json()
}

fn validate(
    input: &InputSpec,
    layers: &[LayerSpec],
    detector: &DetectorConfig,
    loss: &LossWeights,
) -> Result<Vec<(usize, usize)>> {
    if layers.is_empty() {
        return Err(Error::Spec("empty model".into()));
    }
    if input.c == 0 || input.h == 0 || input.w == 0 {
        return Err(Error::Spec("input extents must be positive".into()));
    }
    loss.validate()?;
    let mut names = HashSet::new();
    let mut channels = Vec::with_capacity(layers.len());
    let mut c = input.c;
    for (i, layer) in layers.iter().enumerate() {
        if layer.name.is_empty() {
            return Err(Error::Spec(format!("layer {i} has an empty name")));
        }
        if !names.insert(layer.name.as_str()) {
            return Err(Error::Spec(format!("duplicate layer name {:?}", layer.name)));
        }
        if let Some(declared) = layer.in_channels {
            if declared != c {
                return Err(Error::Spec(format!(
                    "channel-chain mismatch at {}: declares {declared} input channels, predecessor produces {c}",
                    layer.name
                )));
            }
        }
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Spec(format!("{}: {what} must be positive", layer.name)))
            } else {
                Ok(())
            }
        };
        let check_geom = |g: &ConvGeometry| -> Result<()> {
            positive("kernel", g.kernel.h.min(g.kernel.w))?;
            positive("stride", g.stride.h.min(g.stride.w))
        };
        let out = match &layer.kind {
            LayerKind::Conv { filters, geom, .. } => {
                positive("filters", *filters)?;
                check_geom(geom)?;
                *filters
            }
            LayerKind::MaxPool { geom } => {
                check_geom(geom)?;
                if geom.padding.h >= geom.kernel.h || geom.padding.w >= geom.kernel.w {
                    return Err(Error::Spec(format!("{}: pool padding must be smaller than the window", layer.name)));
                }
                c
            }
            LayerKind::Fire(f) => {
                positive("s1x1", f.s_1x1)?;
                positive("e1x1", f.e_1x1)?;
                positive("e3x3", f.e_3x3)?;
                f.out_channels()
            }
            LayerKind::ConvDet { geom } => {
                check_geom(geom)?;
                if i + 1 != layers.len() {
                    return Err(Error::Spec(format!("convdet layer {} is not last", layer.name)));
                }
                detector.head_channels()
            }
        };
        channels.push((c, out));
        c = out;
    }
    Ok(channels)
}

// File representation. Every layer kind shares one flat record so unknown
// fields are rejected and errors name the offending layer.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    input: InputSpec,
    layers: Vec<RawLayer>,
    detector: DetectorConfig,
    #[serde(default)]
    loss: LossWeights,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    filters: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<Dims2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<Dims2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<Dims2>,
    #[serde(skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    s1x1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    e1x1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    e3x3: Option<usize>,
}

impl RawLayer {
    fn require<T>(&self, field: &str, v: Option<T>) -> Result<T> {
        v.ok_or_else(|| Error::Spec(format!("{} layer {:?} is missing {field:?}", self.kind, self.name)))
    }

    fn reject(&self, fields: &[(&str, bool)]) -> Result<()> {
        match fields.iter().find(|(_, present)| *present) {
            Some((f, _)) => Err(Error::Spec(format!(
                "{} layer {:?} does not take {f:?}",
                self.kind, self.name
            ))),
            None => Ok(()),
        }
    }

    fn geometry(&self) -> Result<ConvGeometry> {
        Ok(ConvGeometry {
            kernel: self.require("kernel", self.kernel)?,
            stride: self.stride.unwrap_or(Dims2::square(1)),
            padding: self.padding.unwrap_or(Dims2::square(0)),
        })
    }

    fn into_layer(self) -> Result<LayerSpec> {
        let fire_fields = [
            ("s1x1", self.s1x1.is_some()),
            ("e1x1", self.e1x1.is_some()),
            ("e3x3", self.e3x3.is_some()),
        ];
        let kind = match self.kind.as_str() {
            "conv" => {
                self.reject(&fire_fields)?;
                LayerKind::Conv {
                    filters: self.require("filters", self.filters)?,
                    geom: self.geometry()?,
                    activation: self.activation.unwrap_or_default(),
                }
            }
            "maxpool" => {
                self.reject(&fire_fields)?;
                self.reject(&[
                    ("filters", self.filters.is_some()),
                    ("activation", self.activation.is_some()),
                    ("in_channels", self.in_channels.is_some()),
                ])?;
                LayerKind::MaxPool {
                    geom: ConvGeometry {
                        stride: self.stride.or(self.kernel).unwrap_or(Dims2::square(1)),
                        ..self.geometry()?
                    },
                }
            }
            "fire" => {
                self.reject(&[
                    ("filters", self.filters.is_some()),
                    ("kernel", self.kernel.is_some()),
                    ("stride", self.stride.is_some()),
                    ("padding", self.padding.is_some()),
                    ("activation", self.activation.is_some()),
                ])?;
                LayerKind::Fire(FireSpec {
                    s_1x1: self.require("s1x1", self.s1x1)?,
                    e_1x1: self.require("e1x1", self.e1x1)?,
                    e_3x3: self.require("e3x3", self.e3x3)?,
                })
            }
            "convdet" => {
                self.reject(&fire_fields)?;
                self.reject(&[
                    ("filters", self.filters.is_some()),
                    ("activation", self.activation.is_some()),
                ])?;
                LayerKind::ConvDet {
                    geom: self.geometry()?,
                }
            }
            other => return Err(Error::Spec(format!("unknown layer kind {other:?} for layer {:?}", self.name))),
        };
        Ok(LayerSpec {
            name: self.name,
            kind,
            in_channels: self.in_channels,
        })
    }

    fn from_layer(layer: &LayerSpec) -> Self {
        let mut raw = RawLayer {
            name: layer.name.clone(),
            kind: layer.kind.name().to_string(),
            in_channels: layer.in_channels,
            ..Default::default()
        };
        let mut geometry = |g: &ConvGeometry| {
            raw.kernel = Some(g.kernel);
            raw.stride = Some(g.stride);
            raw.padding = Some(g.padding);
        };
        match &layer.kind {
            LayerKind::Conv {
                filters,
                geom,
                activation,
            } => {
                geometry(geom);
                raw.filters = Some(*filters);
                raw.activation = Some(*activation);
            }
            LayerKind::MaxPool { geom } | LayerKind::ConvDet { geom } => geometry(geom),
            LayerKind::Fire(f) => {
                raw.s1x1 = Some(f.s_1x1);
                raw.e1x1 = Some(f.e_1x1);
                raw.e3x3 = Some(f.e_3x3);
            }
        }
        raw
    }
}

impl TryFrom<RawModel> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        let layers = raw
            .layers
            .into_iter()
            .map(RawLayer::into_layer)
            .collect::<Result<Vec<_>>>()?;
        ModelSpec::new(raw.input, layers, raw.detector, raw.loss)
    }
}

impl From<&ModelSpec> for RawModel {
    fn from(spec: &ModelSpec) -> Self {
        RawModel {
            input: spec.input,
            layers: spec.layers.iter().map(RawLayer::from_layer).collect(),
            detector: spec.detector.clone(),
            loss: spec.loss,
        }
    }
}
