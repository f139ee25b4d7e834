//! Declarative model specs, fire-module backbones, weight storage and the
//! forward pass feeding the ConvDet head.

mod model;
mod spec;
mod weights;

pub use model::{bind_params, build_fire, forward, forward_tape, FireParams, ForwardOutput, TapeForward};
pub use spec::{
    parse_spec, serialize_spec, Activation, ConvGeometry, Dims2, FireSpec, InputSpec, LayerKind, LayerShape,
    LayerSpec, ModelSpec, ParamShape,
};
pub use weights::{init_weights, load_weights, save_weights, ManifestEntry, WeightStore, WEIGHTS_MAGIC};

/// Specs shipped with the crate.
pub mod bundled {
    use super::ModelSpec;

    pub const SQUEEZEDET: &str = include_str!("../../models/squeezedet.json");
    pub const SQUEEZEDET_PLUS: &str = include_str!("../../models/squeezedet_plus.json");
    pub const TOY: &str = include_str!("../../models/toy.json");

    pub fn squeezedet() -> ModelSpec {
        ModelSpec::parse(SQUEEZEDET).expect("bundled spec is valid")
    }

    pub fn squeezedet_plus() -> ModelSpec {
        ModelSpec::parse(SQUEEZEDET_PLUS).expect("bundled spec is valid")
    }

    pub fn toy() -> ModelSpec {
        ModelSpec::parse(TOY).expect("bundled spec is valid")
    }

    /// Looks a bundled spec up by file stem.
    pub fn by_name(name: &str) -> Option<&'static str> {
        match name {
            "squeezedet" => Some(SQUEEZEDET),
            "squeezedet_plus" => Some(SQUEEZEDET_PLUS),
            "toy" => Some(TOY),
            _ => None,
        }
    }
}
