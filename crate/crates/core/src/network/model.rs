use indexmap::IndexMap;

use super::spec::{Activation, Dims2, FireSpec, LayerKind, ModelSpec};
use super::weights::WeightStore;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Tape handles for the six tensors of a fire module.
#[derive(Clone, Copy, Debug)]
pub struct FireParams {
    pub squeeze_w: Var,
    pub squeeze_b: Var,
    pub expand1x1_w: Var,
    pub expand1x1_b: Var,
    pub expand3x3_w: Var,
    pub expand3x3_b: Var,
}

/// Squeeze 1×1 → relu, then parallel 1×1 and 3×3 (pad 1) expands → relu,
/// concatenated on channels.
pub fn build_fire(tape: &mut Tape, input: Var, spec: &FireSpec, p: &FireParams) -> Result<Var> {
    let expect = |tape: &Tape, v: Var, shape: [usize; 4], what: &str| -> Result<()> {
        let (c_out, c_in) = (shape[0], shape[1]);
        if tape.shape(v) != shape {
            return Err(Error::shape(
                "fire",
                format!("{what} weight {:?}, expected {c_out}x{c_in}x{}x{}", tape.shape(v), shape[2], shape[3]),
            ));
        }
        Ok(())
    };
    let c_in = tape.shape(input).get(1).copied().unwrap_or(0);
    expect(tape, p.squeeze_w, [spec.s_1x1, c_in, 1, 1], "squeeze")?;
    expect(tape, p.expand1x1_w, [spec.e_1x1, spec.s_1x1, 1, 1], "expand1x1")?;
    expect(tape, p.expand3x3_w, [spec.e_3x3, spec.s_1x1, 3, 3], "expand3x3")?;

    let s = tape.conv2d(input, p.squeeze_w, p.squeeze_b, (1, 1), (0, 0))?;
    let s = tape.relu(s)?;
    let a = tape.conv2d(s, p.expand1x1_w, p.expand1x1_b, (1, 1), (0, 0))?;
    let a = tape.relu(a)?;
    let b = tape.conv2d(s, p.expand3x3_w, p.expand3x3_b, (1, 1), (1, 1))?;
    let b = tape.relu(b)?;
    tape.concat_channels(a, b)
}

/// Places every stored tensor on the tape, as trainable leaves or constants.
pub fn bind_params(tape: &mut Tape, store: &WeightStore, trainable: bool) -> IndexMap<String, Var> {
    store
        .iter()
        .map(|(name, t)| {
            let v = if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            (name.to_string(), v)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TapeForward {
    pub feature: Var,
    pub head: Option<Var>,
    /// Output shape of every layer, in order.
    pub activations: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub feature: Tensor,
    pub head: Tensor,
    pub activations: Vec<(String, Vec<usize>)>,
}

fn pair(d: Dims2) -> (usize, usize) {
    (d.h, d.w)
}

fn check_image(model: &ModelSpec, shape: &[usize]) -> Result<()> {
    let &[_, c, h, w] = shape else {
        return Err(Error::shape("forward", format!("image must be rank 4, got {shape:?}")));
    };
    if c != model.input.c {
        return Err(Error::shape(
            "forward",
            format!("image has {c} channels, model expects {}", model.input.c),
        ));
    }
    if !model.input.flexible && (h, w) != (model.input.h, model.input.w) {
        return Err(Error::shape(
            "forward",
            format!("image is {w}x{h}, model expects {}x{}", model.input.w, model.input.h),
        ));
    }
    Ok(())
}

pub fn forward_tape(
    tape: &mut Tape,
    model: &ModelSpec,
    params: &IndexMap<String, Var>,
    image: Var,
) -> Result<TapeForward> {
    check_image(model, tape.shape(image))?;
    let get = |name: String| {
        params
            .get(&name)
            .copied()
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    };
    let mut x = image;
    let mut feature = image;
    let mut head = None;
    let mut activations = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let n = &layer.name;
        x = match &layer.kind {
            LayerKind::Conv { geom, activation, .. } => {
                let y = tape.conv2d(
                    x,
                    get(format!("{n}/weight"))?,
                    get(format!("{n}/bias"))?,
                    pair(geom.stride),
                    pair(geom.padding),
                )?;
                match activation {
                    Activation::Relu => tape.relu(y)?,
                    Activation::None => y,
                }
            }
            LayerKind::MaxPool { geom } => {
                tape.maxpool2d(x, pair(geom.kernel), pair(geom.stride), pair(geom.padding))?
            }
            LayerKind::Fire(f) => {
                let p = FireParams {
                    squeeze_w: get(format!("{n}/squeeze/weight"))?,
                    squeeze_b: get(format!("{n}/squeeze/bias"))?,
                    expand1x1_w: get(format!("{n}/expand1x1/weight"))?,
                    expand1x1_b: get(format!("{n}/expand1x1/bias"))?,
                    expand3x3_w: get(format!("{n}/expand3x3/weight"))?,
                    expand3x3_b: get(format!("{n}/expand3x3/bias"))?,
                };
                build_fire(tape, x, f, &p)?
            }
            LayerKind::ConvDet { geom } => {
                feature = x;
                let y = tape.conv2d(
                    x,
                    get(format!("{n}/weight"))?,
                    get(format!("{n}/bias"))?,
                    pair(geom.stride),
                    pair(geom.padding),
                )?;
                head = Some(y);
                y
            }
        };
        activations.push((n.clone(), tape.shape(x).to_vec()));
    }
    if head.is_none() {
        feature = x;
    }
    Ok(TapeForward {
        feature,
        head,
        activations,
    })
}

/// Inference pass; errors if the model has no convdet layer.
pub fn forward(model: &ModelSpec, store: &WeightStore, image: &Tensor) -> Result<ForwardOutput> {
    if !model.has_head() {
        return Err(Error::Spec("missing head: model has no convdet layer".into()));
    }
    store.check_against(model)?;
    let mut tape = Tape::new();
    let params = bind_params(&mut tape, store, false);
    let img = tape.constant(image.clone());
    let out = forward_tape(&mut tape, model, &params, img)?;
    let head = out.head.expect("model has a head");
    Ok(ForwardOutput {
        feature: tape.value(out.feature).clone(),
        head: tape.value(head).clone(),
        activations: out.activations,
    })
}
