//! Learned projection from raw rendered patches to model features.

use crate::error::{Error, Result};
use crate::nn::{bind_linear, init_linear, linear, Binder, LinearVars, ParamSet};
use crate::tape::{Elem, Tape, Var};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which image of a pair a feature grid came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageTag {
    Bef,
    Aft,
}

/// Per-patch embeddings for one image plus its grid layout.
#[derive(Debug, Clone)]
pub struct PatchFeatures<F: Elem> {
    pub features: Array2<F>,
    pub grid_shape: (usize, usize),
    pub image_tag: ImageTag,
}

impl<F: Elem> PatchFeatures<F> {
    pub fn new(features: Array2<F>, grid_shape: (usize, usize), image_tag: ImageTag) -> Result<Self> {
        if features.nrows() != grid_shape.0 * grid_shape.1 {
            return Err(Error::Dimension(format!(
                "{} feature rows but grid is {}x{}",
                features.nrows(),
                grid_shape.0,
                grid_shape.1
            )));
        }
        if features.iter().any(|x| !x.as_f64().is_finite()) {
            return Err(Error::Numeric("patch features contain non-finite values".into()));
        }
        Ok(PatchFeatures {
            features,
            grid_shape,
            image_tag,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.features.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Linear,
    Relu,
    Tanh,
}

pub const PARAM_PREFIX: &str = "patchenc";

/// Insert encoder parameters (one affine layer) into a parameter set.
pub fn init_params<F: Elem, R: Rng>(params: &mut ParamSet<F>, d_in: usize, d: usize, rng: &mut R) {
    init_linear(params, PARAM_PREFIX, d_in, d, rng);
}

#[derive(Clone, Copy)]
pub struct EncoderVars {
    pub proj: LinearVars,
    pub activation: Nonlinearity,
}

pub fn bind<F: Elem>(binder: &mut Binder<F>, activation: Nonlinearity) -> EncoderVars {
    EncoderVars {
        proj: bind_linear(binder, PARAM_PREFIX),
        activation,
    }
}

/// Project raw patches through the affine layer and nonlinearity.
pub fn embed<F: Elem>(tape: &mut Tape<F>, raw: Var, enc: &EncoderVars) -> Var {
    let h = linear(tape, raw, &enc.proj);
    match enc.activation {
        Nonlinearity::Linear => h,
        Nonlinearity::Relu => tape.relu(h),
        Nonlinearity::Tanh => {
            // tanh(x) = 2 sigmoid(2x) - 1 composed from exp primitives:
            // tanh(x) = (e^{2x} - 1) / (e^{2x} + 1)
            let two = F::from_f64(2.0);
            let x2 = tape.scale(h, two);
            let e = tape.exp(x2);
            let num = tape.add_scalar(e, -F::one());
            let den = tape.add_scalar(e, F::one());
            tape.div(num, den)
        }
    }
}

/// Convenience wrapper checking shapes and returning a plain array.
pub fn embed_array<F: Elem>(
    raw: &Array2<F>,
    params: &ParamSet<F>,
    activation: Nonlinearity,
    grid_shape: (usize, usize),
    image_tag: ImageTag,
) -> Result<PatchFeatures<F>> {
    let w_shape = params.get(&format!("{PARAM_PREFIX}.w")).dim();
    if raw.ncols() != w_shape.0 {
        return Err(Error::Dimension(format!(
            "raw patches are {:?} but projection expects input width {}",
            raw.dim(),
            w_shape.0
        )));
    }
    if raw.iter().any(|x| !x.as_f64().is_finite()) {
        return Err(Error::Numeric("raw patches contain non-finite values".into()));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape, params, false);
    let enc = bind(&mut binder, activation);
    drop(binder);
    let raw_var = tape.constant(raw.clone());
    let out = embed(&mut tape, raw_var, &enc);
    PatchFeatures::new(tape.value(out).clone(), grid_shape, image_tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_projection_with_linear_activation_is_identity() {
        let mut params: ParamSet<f64> = ParamSet::new();
        params.insert(format!("{PARAM_PREFIX}.w"), Array2::eye(5));
        params.insert(format!("{PARAM_PREFIX}.b"), Array2::zeros((1, 5)));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw = Array2::from_shape_fn((6, 5), |_| f64::std_normal(&mut rng));
        let out = embed_array(&raw, &params, Nonlinearity::Linear, (2, 3), ImageTag::Bef).unwrap();
        assert_eq!(out.features, raw);
    }

    #[test]
    fn full_scale_width_is_supported() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params: ParamSet<f32> = ParamSet::new();
        init_params(&mut params, 64, 512, &mut rng);
        let raw = Array2::from_shape_fn((4, 64), |_| f32::std_normal(&mut rng));
        let out = embed_array(&raw, &params, Nonlinearity::Relu, (2, 2), ImageTag::Aft).unwrap();
        assert_eq!(out.features.dim(), (4, 512));
    }

    #[test]
    fn embedding_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params: ParamSet<f64> = ParamSet::new();
        init_params(&mut params, 8, 6, &mut rng);
        let raw = Array2::from_shape_fn((4, 8), |_| f64::std_normal(&mut rng));
        let a = embed_array(&raw, &params, Nonlinearity::Tanh, (2, 2), ImageTag::Bef).unwrap();
        let b = embed_array(&raw, &params, Nonlinearity::Tanh, (2, 2), ImageTag::Bef).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params: ParamSet<f64> = ParamSet::new();
        init_params(&mut params, 8, 6, &mut rng);
        let raw = Array2::zeros((4, 7));
        match embed_array(&raw, &params, Nonlinearity::Linear, (2, 2), ImageTag::Bef) {
            Err(Error::Dimension(msg)) => {
                assert!(msg.contains("(4, 7)") && msg.contains('8'), "{msg}");
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_flow_through_the_encoder() {
        // FD check of a downstream scalar with respect to the projection.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params: ParamSet<f64> = ParamSet::new();
        init_params(&mut params, 5, 4, &mut rng);
        let raw = Array2::from_shape_fn((3, 5), |_| f64::std_normal(&mut rng));
        let probe = Array2::from_shape_fn((3, 4), |_| f64::std_normal(&mut rng));

        let loss_of = |params: &ParamSet<f64>| -> f64 {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape, params, true);
            let enc = bind(&mut binder, Nonlinearity::Tanh);
            drop(binder);
            let raw_var = tape.constant(raw.clone());
            let out = embed(&mut tape, raw_var, &enc);
            let weighted = tape.mul_const(out, &probe);
            let loss = tape.sum_all(weighted);
            tape.scalar(loss)
        };

        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape, &params, true);
        let enc = bind(&mut binder, Nonlinearity::Tanh);
        let bound = binder.finish();
        let raw_var = tape.constant(raw.clone());
        let out = embed(&mut tape, raw_var, &enc);
        let weighted = tape.mul_const(out, &probe);
        let loss = tape.sum_all(weighted);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        for (name, var) in bound {
            let shape = params.get(&name).dim();
            let analytic = grads.wrt(var, shape);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let mut plus = params.clone();
                    plus.get_mut(&name)[[r, c]] += eps;
                    let mut minus = params.clone();
                    minus.get_mut(&name)[[r, c]] -= eps;
                    let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                    let a = analytic[[r, c]];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{name}[{r},{c}]: {a} vs {numeric}");
                }
            }
        }
    }
}
