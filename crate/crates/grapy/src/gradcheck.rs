//! Finite-difference checks of every differentiable operation.
//!
//! Each suite builds a scalar from named inputs held in a [`ParamStore`],
//! differentiates it on the tape, and compares against central differences
//! with step [`STEP`]. The error of one entry is
//! `|analytic - numeric| / max(|analytic|, |numeric|, FLOOR)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gpm::{aggregate, distribute, masks_from_prediction, pyramid_forward, reason, GpmConfig, MaskSource, Pooling};
use crate::labels::LabelMap;
use crate::model::{forward, loss, ModelConfig};
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::taxonomy::{Level, Taxonomy};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares tape gradients of `f` with respect to every entry of `store`
/// against central differences.
pub fn check<F>(name: &str, store: &ParamStore, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &mut Binder) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(s).with_trainable(|_| false);
        let out = f(&mut tape, &mut binder)?;
        Ok(tape.value(out).item())
    };
    let mut tape = Tape::new();
    let mut binder = Binder::new(store);
    let out = f(&mut tape, &mut binder)?;
    tape.backward(out)?;
    let grads = binder.grads(&tape);

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = store.clone();
    for (pname, value) in store.iter() {
        let zero = Tensor::zeros(value.shape());
        let analytic = grads.get(pname).unwrap_or(&zero);
        for i in 0..value.len() {
            let x = value.data()[i];
            probe.get_mut(pname)?.data_mut()[i] = x + STEP;
            let plus = eval(&probe)?;
            probe.get_mut(pname)?.data_mut()[i] = x - STEP;
            let minus = eval(&probe)?;
            probe.get_mut(pname)?.data_mut()[i] = x;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
            checked += 1;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_rel_error: worst,
        checked,
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, t) in entries {
        s.insert(name, t).expect("unique names");
    }
    s
}

/// `sum(out * w)` for a fixed pseudo-random `w`, so every output entry
/// carries a distinct weight.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&mut rng, &tape.shape(out).to_vec(), -1.0, 1.0));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum_all(prod)?)
}

fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMap {
    // every class gets at least one pixel
    let mut values: Vec<usize> = (0..h * w).map(|_| rng.gen_range(0..k)).collect();
    for (c, v) in values.iter_mut().take(k).enumerate() {
        *v = c;
    }
    LabelMap::new(h, w, k, values).expect("labels in range")
}

type Suite = (&'static str, fn(u64) -> Result<GradReport>);

/// Every suite, in report order.
pub fn suites() -> Vec<Suite> {
    vec![
        ("add", |s| binary("add", s, false, |t, a, b| t.add(a, b))),
        ("add (broadcast)", |s| binary("add (broadcast)", s, true, |t, a, b| t.add(a, b))),
        ("sub", |s| binary("sub", s, false, |t, a, b| t.sub(a, b))),
        ("mul", |s| binary("mul", s, false, |t, a, b| t.mul(a, b))),
        ("mul (broadcast)", |s| binary("mul (broadcast)", s, true, |t, a, b| t.mul(a, b))),
        ("div", |s| binary("div", s, false, |t, a, b| t.div(a, b))),
        ("scale", |s| unary("scale", s, (-1.0, 1.0), |t, a| t.scale(a, -2.5))),
        ("log", |s| unary("log", s, (0.5, 2.0), |t, a| t.log(a))),
        ("relu", |s| unary("relu", s, (-1.0, 1.0), |t, a| t.relu(a))),
        ("transpose", |s| unary("transpose", s, (-1.0, 1.0), |t, a| t.transpose(a))),
        ("reshape", |s| unary("reshape", s, (-1.0, 1.0), |t, a| t.reshape(a, &[2, 6]))),
        ("softmax_rows", |s| unary("softmax_rows", s, (-2.0, 2.0), |t, a| t.softmax_rows(a))),
        ("matmul", matmul_suite),
        ("softmax_last", |s| last_axis_suite("softmax_last", s, false)),
        ("log_softmax_last", |s| last_axis_suite("log_softmax_last", s, true)),
        ("conv2d", |s| conv_suite("conv2d", s, 1, 1)),
        ("conv2d (stride 2)", |s| conv_suite("conv2d (stride 2)", s, 2, 0)),
        ("concat", concat_suite),
        ("sum/mean", reduce_suite),
        ("masked_mean", |s| mask_suite("masked_mean", s, false)),
        ("masked_max", |s| mask_suite("masked_max", s, true)),
        ("gather_rows", gather_suite),
        ("pick", pick_suite),
        ("aggregate", aggregate_suite),
        ("reason", reason_suite),
        ("distribute", distribute_suite),
        ("pyramid_forward", pyramid_suite),
        ("end-to-end loss", end_to_end_suite),
    ]
}

pub fn run_all(seed: u64) -> Result<Vec<GradReport>> {
    suites().into_iter().map(|(_, f)| f(seed)).collect()
}

fn unary(
    name: &str,
    seed: u64,
    range: (f64, f64),
    op: impl Fn(&mut Tape, Var) -> std::result::Result<Var, crate::tensor::TensorError>,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![("a", random(&mut rng, &[3, 4], range.0, range.1))]);
    check(name, &s, |t, b| {
        let a = b.param(t, "a")?;
        let out = op(t, a)?;
        contract(t, out, seed + 1)
    })
}

fn binary(
    name: &str,
    seed: u64,
    broadcast: bool,
    op: impl Fn(&mut Tape, Var, Var) -> std::result::Result<Var, crate::tensor::TensorError>,
) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b_shape: &[usize] = if broadcast { &[1, 4] } else { &[3, 4] };
    // positive right operand keeps division well conditioned
    let s = store(vec![
        ("a", random(&mut rng, &[3, 4], -1.0, 1.0)),
        ("b", random(&mut rng, b_shape, 0.5, 1.5)),
    ]);
    check(name, &s, |t, bd| {
        let a = bd.param(t, "a")?;
        let b = bd.param(t, "b")?;
        let out = op(t, a, b)?;
        contract(t, out, seed + 1)
    })
}

fn matmul_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![
        ("a", random(&mut rng, &[4, 5], -1.0, 1.0)),
        ("b", random(&mut rng, &[5, 3], -1.0, 1.0)),
    ]);
    check("matmul", &s, |t, bd| {
        let a = bd.param(t, "a")?;
        let b = bd.param(t, "b")?;
        let out = t.matmul(a, b)?;
        contract(t, out, seed + 1)
    })
}

fn last_axis_suite(name: &str, seed: u64, log: bool) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![("a", random(&mut rng, &[2, 3, 4], -2.0, 2.0))]);
    check(name, &s, |t, bd| {
        let a = bd.param(t, "a")?;
        let out = if log { t.log_softmax_last(a)? } else { t.softmax_last(a)? };
        contract(t, out, seed + 1)
    })
}

fn conv_suite(name: &str, seed: u64, stride: usize, pad: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![
        ("x", random(&mut rng, &[5, 6, 2], -1.0, 1.0)),
        ("k", random(&mut rng, &[3, 3, 2, 3], -1.0, 1.0)),
    ]);
    check(name, &s, |t, bd| {
        let x = bd.param(t, "x")?;
        let k = bd.param(t, "k")?;
        let out = t.conv2d(x, k, stride, pad)?;
        contract(t, out, seed + 1)
    })
}

fn concat_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![
        ("a", random(&mut rng, &[2, 3, 2], -1.0, 1.0)),
        ("b", random(&mut rng, &[2, 3, 3], -1.0, 1.0)),
    ]);
    check("concat", &s, |t, bd| {
        let a = bd.param(t, "a")?;
        let b = bd.param(t, "b")?;
        let out = t.concat(&[a, b, a], 2)?;
        contract(t, out, seed + 1)
    })
}

fn reduce_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![("a", random(&mut rng, &[3, 4, 2], -1.0, 1.0))]);
    check("sum/mean", &s, |t, bd| {
        let a = bd.param(t, "a")?;
        let s1 = t.sum(a, &[0, 2])?;
        let m1 = t.mean(a, &[1])?;
        let c1 = contract(t, s1, seed + 1)?;
        let c2 = contract(t, m1, seed + 2)?;
        Ok(t.add(c1, c2)?)
    })
}

fn mask_suite(name: &str, seed: u64, max: bool) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = random_labels(&mut rng, 4, 5, 3);
    let empty_class = LabelMap::new(4, 5, 4, labels.values().to_vec())?;
    let s = store(vec![("x", random(&mut rng, &[4, 5, 3], -1.0, 1.0))]);
    check(name, &s, |t, bd| {
        let x = bd.param(t, "x")?;
        let out = if max {
            t.masked_max(x, &empty_class)?
        } else {
            t.masked_mean(x, &empty_class)?
        };
        contract(t, out, seed + 1)
    })
}

fn gather_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = random_labels(&mut rng, 4, 5, 3);
    let s = store(vec![("table", random(&mut rng, &[3, 2], -1.0, 1.0))]);
    check("gather_rows", &s, |t, bd| {
        let table = bd.param(t, "table")?;
        let out = t.gather_rows(table, &labels)?;
        contract(t, out, seed + 1)
    })
}

fn pick_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = random_labels(&mut rng, 3, 4, 5);
    let s = store(vec![("x", random(&mut rng, &[3, 4, 5], -1.0, 1.0))]);
    check("pick", &s, |t, bd| {
        let x = bd.param(t, "x")?;
        let out = t.pick(x, &labels)?;
        contract(t, out, seed + 1)
    })
}

fn aggregate_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = random_labels(&mut rng, 4, 4, 5);
    let s = store(vec![("f", random(&mut rng, &[4, 4, 3], -1.0, 1.0))]);
    check("aggregate", &s, |t, bd| {
        let f = bd.param(t, "f")?;
        let nodes = aggregate(t, f, &masks, Level::Two, Pooling::Both)?;
        contract(t, nodes.features, seed + 1)
    })
}

fn reason_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = store(vec![
        ("v", random(&mut rng, &[5, 6], -1.0, 1.0)),
        ("q1", random(&mut rng, &[6, 2], -1.0, 1.0)),
        ("q2", random(&mut rng, &[6, 2], -1.0, 1.0)),
    ]);
    check("reason", &s, |t, bd| {
        let v = bd.param(t, "v")?;
        let q1 = bd.param(t, "q1")?;
        let q2 = bd.param(t, "q2")?;
        let r = reason(t, v, &[(q1, q2)], 3)?;
        contract(t, r.refined, seed + 1)
    })
}

fn distribute_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = random_labels(&mut rng, 4, 4, 3);
    let s = store(vec![
        ("f", random(&mut rng, &[4, 4, 2], -1.0, 1.0)),
        ("v", random(&mut rng, &[3, 4], -1.0, 1.0)),
        ("proj", random(&mut rng, &[4, 2], -1.0, 1.0)),
    ]);
    check("distribute", &s, |t, bd| {
        let f = bd.param(t, "f")?;
        let v = bd.param(t, "v")?;
        let proj = bd.param(t, "proj")?;
        let out = distribute(t, f, v, proj, &masks)?;
        contract(t, out, seed + 1)
    })
}

/// Level masks for an `h×w` instance: random fine labels coarsened upwards.
fn pyramid_masks(rng: &mut ChaCha8Rng, taxonomy: &Taxonomy, h: usize, w: usize) -> Result<[LabelMap; 3]> {
    let fine = random_labels(rng, h, w, taxonomy.num_classes(Level::Three));
    Ok([
        taxonomy.coarsen(&fine, Level::One)?,
        taxonomy.coarsen(&fine, Level::Two)?,
        fine,
    ])
}

fn pyramid_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tax = Taxonomy::builtin("A")?;
    let config = GpmConfig {
        channels: 2,
        ..GpmConfig::default()
    };
    let masks = pyramid_masks(&mut rng, &tax, 4, 4)?;
    let mut s = ParamStore::new();
    config.init_params(&mut s, &mut rng, tax.num_classes(Level::Three))?;
    s.insert("f", random(&mut rng, &[4, 4, 2], -1.0, 1.0))?;
    let y = masks[2].one_hot();
    check("pyramid_forward", &s, |t, bd| {
        let f = bd.param(t, "f")?;
        let out = pyramid_forward(t, bd, f, &y, &tax, &config, MaskSource::Fixed(&masks))?;
        contract(t, out.prediction, seed + 1)
    })
}

/// Full two-branch loss on an 8×8×4 image with respect to every model
/// parameter. Masks come from the initial main prediction and are then
/// frozen, as argmax is piecewise constant.
fn end_to_end_suite(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tax = Taxonomy::builtin("A")?;
    let config = ModelConfig {
        in_channels: 4,
        hidden: vec![6],
        gpm: GpmConfig {
            channels: 4,
            ..GpmConfig::default()
        },
        ..ModelConfig::default()
    };
    let k = tax.num_classes(Level::Three);
    let params = config.init_params(k, seed)?;
    let image = random(&mut rng, &[8, 8, 4], 0.0, 1.0);
    let labels = random_labels(&mut rng, 8, 8, k);

    let y0 = {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params);
        let out = forward(&mut tape, &mut binder, &config, &tax, &image, false, MaskSource::Predicted)?;
        tape.value(out.main).clone()
    };
    let masks = [
        masks_from_prediction(&y0, &tax, Level::One)?,
        masks_from_prediction(&y0, &tax, Level::Two)?,
        masks_from_prediction(&y0, &tax, Level::Three)?,
    ];
    check("end-to-end loss", &params, |t, bd| {
        let out = forward(t, bd, &config, &tax, &image, true, MaskSource::Fixed(&masks))?;
        let terms = loss(t, out.main_logits, out.gpm_logits(), &labels, config.lambda)?;
        Ok(terms.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-7) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu's derivative is a step; a probe straddling the kink disagrees
        let s = store(vec![("a", Tensor::new(vec![1], vec![STEP / 2.0]).unwrap())]);
        let r = check("kink", &s, |t, bd| {
            let a = bd.param(t, "a")?;
            let out = t.relu(a)?;
            Ok(t.sum_all(out)?)
        })
        .unwrap();
        assert!(!r.passed());
    }
}
