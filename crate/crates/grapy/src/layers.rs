//! Small building blocks shared by the backbone and the prediction heads.

use rand::Rng;

use crate::error::Result;
use crate::params::{he_uniform_init, uniform_init, Binder, ParamError, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Registers `{prefix}.kernel` (`k×k×cin×cout`) and a zero `{prefix}.bias`.
pub(crate) fn init_conv(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> Result<(), ParamError> {
    store.insert(
        format!("{prefix}.kernel"),
        uniform_init(rng, &[k, k, cin, cout], k * k * cin),
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, 1, cout]))
}

/// `init_conv` with He-uniform kernels.
pub(crate) fn init_conv_he(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
) -> Result<(), ParamError> {
    store.insert(
        format!("{prefix}.kernel"),
        he_uniform_init(rng, &[k, k, cin, cout], k * k * cin),
    )?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[1, 1, cout]))
}

/// Same-size convolution plus bias.
pub(crate) fn conv(tape: &mut Tape, binder: &mut Binder, prefix: &str, input: Var) -> Result<Var> {
    let kernel = binder.param(tape, &format!("{prefix}.kernel"))?;
    let bias = binder.param(tape, &format!("{prefix}.bias"))?;
    let pad = tape.shape(kernel)[0] / 2;
    let out = tape.conv2d(input, kernel, 1, pad)?;
    Ok(tape.add(out, bias)?)
}

/// 1×1 convolution to class scores followed by a per-pixel softmax.
/// Returns `(logits, probabilities)`.
pub(crate) fn prediction_head(
    tape: &mut Tape,
    binder: &mut Binder,
    prefix: &str,
    features: Var,
) -> Result<(Var, Var)> {
    let logits = conv(tape, binder, prefix, features)?;
    Ok((logits, tape.softmax_last(logits)?))
}
