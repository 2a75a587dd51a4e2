//! Helpers shared by the integration tests: random instances and plain-loop
//! reference implementations of the pyramid that never touch the tape.
#![allow(dead_code)]

use grapy::gpm::GpmConfig;
use grapy::labels::LabelMap;
use grapy::params::ParamStore;
use grapy::taxonomy::{Level, Taxonomy};
use grapy::Tensor;
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn random_labels(rng: &mut impl Rng, h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::new(h, w, k, (0..h * w).map(|_| rng.gen_range(0..k)).collect()).unwrap()
}

/// Row-major `rows × cols` matrix view of a rank-2 tensor.
pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor {
    let (r, c) = (m.len(), m[0].len());
    Tensor::new(vec![r, c], m.concat()).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean-then-max pooled node features, `K × 2C`; empty categories give zeros.
pub fn pool(features: &Tensor, labels: &LabelMap) -> Mat {
    let c = features.shape()[2];
    let k = labels.classes();
    let mut out = vec![vec![0.0; 2 * c]; k];
    for (cls, row) in out.iter_mut().enumerate() {
        let pixels: Vec<usize> = (0..labels.pixels()).filter(|&p| labels.values()[p] == cls).collect();
        if pixels.is_empty() {
            continue;
        }
        for ch in 0..c {
            let vals: Vec<f64> = pixels.iter().map(|&p| features.data()[p * c + ch]).collect();
            row[ch] = vals.iter().sum::<f64>() / vals.len() as f64;
            row[c + ch] = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

/// Residual attention rounds. Returns the refined nodes and each round's
/// attention matrix.
pub fn reason(nodes: &Mat, pairs: &[(Mat, Mat)], rounds: usize) -> (Mat, Vec<Mat>) {
    let mut v = nodes.clone();
    let mut attention = Vec::new();
    for r in 0..rounds {
        let (q1, q2) = &pairs[r.min(pairs.len() - 1)];
        let scores = matmul(&matmul(&v, q1), &transpose(&matmul(&v, q2)));
        let a: Mat = scores.iter().map(|row| softmax(row)).collect();
        let av = matmul(&a, &v);
        for (row, add) in v.iter_mut().zip(&av) {
            for (x, y) in row.iter_mut().zip(add) {
                *x += y;
            }
        }
        attention.push(a);
    }
    (v, attention)
}

/// `f + Σ_k [pixel ∈ k] (refined · out_proj)_k`, pixel by pixel.
pub fn distribute(features: &Tensor, refined: &Mat, out_proj: &Mat, labels: &LabelMap) -> Tensor {
    let c = features.shape()[2];
    let projected = matmul(refined, out_proj);
    let mut out = features.data().to_vec();
    for p in 0..labels.pixels() {
        for (k, row) in projected.iter().enumerate() {
            let indicator = if labels.values()[p] == k { 1.0 } else { 0.0 };
            for ch in 0..c {
                out[p * c + ch] += indicator * row[ch];
            }
        }
    }
    Tensor::new(features.shape().to_vec(), out).unwrap()
}

/// Argmax of `prediction` at each pixel (first maximum wins), mapped to `level`.
pub fn masks(prediction: &Tensor, taxonomy: &Taxonomy, level: Level) -> LabelMap {
    let (h, w, k) = (prediction.shape()[0], prediction.shape()[1], prediction.shape()[2]);
    let values = (0..h * w)
        .map(|p| {
            let row = &prediction.data()[p * k..(p + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            taxonomy.ancestor(best, level).unwrap()
        })
        .collect();
    LabelMap::new(h, w, taxonomy.num_classes(level), values).unwrap()
}

pub struct PyramidOracle {
    pub outputs: Vec<Tensor>,
    pub nodes: Vec<Mat>,
    pub attention: Vec<Vec<Mat>>,
    pub fused: Tensor,
    pub prediction: Tensor,
}

/// The whole pyramid plus head, for mean+max pooling.
pub fn pyramid(
    features: &Tensor,
    prediction: &Tensor,
    taxonomy: &Taxonomy,
    config: &GpmConfig,
    params: &ParamStore,
) -> PyramidOracle {
    let (h, w, c) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let mut current = features.clone();
    let mut outputs = vec![features.clone()];
    let mut all_nodes = Vec::new();
    let mut all_attention = Vec::new();
    for &level in &config.levels {
        let m = masks(prediction, taxonomy, level);
        let nodes = pool(&current, &m);
        let rounds = if config.fresh_weights { config.iterations } else { 1 };
        let pairs: Vec<(Mat, Mat)> = (0..rounds)
            .map(|r| {
                let (a, b) = config.projection_names(level, r);
                (to_mat(params.get(&a).unwrap()), to_mat(params.get(&b).unwrap()))
            })
            .collect();
        let (refined, attention) = reason(&nodes, &pairs, config.iterations);
        let out_proj = to_mat(params.get(&GpmConfig::out_proj_name(level)).unwrap());
        current = distribute(&current, &refined, &out_proj, &m);
        outputs.push(current.clone());
        all_nodes.push(nodes);
        all_attention.push(attention);
    }
    let width = c * outputs.len();
    let mut fused = Vec::with_capacity(h * w * width);
    for p in 0..h * w {
        for o in &outputs {
            fused.extend_from_slice(&o.data()[p * c..(p + 1) * c]);
        }
    }
    let kernel = params.get("gpm.head.kernel").unwrap();
    let bias = params.get("gpm.head.bias").unwrap();
    let k = bias.len();
    let mut probs = Vec::with_capacity(h * w * k);
    for p in 0..h * w {
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                bias.data()[j]
                    + (0..width)
                        .map(|i| fused[p * width + i] * kernel.data()[i * k + j])
                        .sum::<f64>()
            })
            .collect();
        probs.extend(softmax(&logits));
    }
    PyramidOracle {
        outputs,
        nodes: all_nodes,
        attention: all_attention,
        fused: Tensor::new(vec![h, w, width], fused).unwrap(),
        prediction: Tensor::new(vec![h, w, k], probs).unwrap(),
    }
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn random_prediction(rng: &mut impl Rng, h: usize, w: usize, k: usize) -> Tensor {
    let mut data = Vec::with_capacity(h * w * k);
    for _ in 0..h * w {
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        data.extend(softmax(&logits));
    }
    Tensor::new(vec![h, w, k], data).unwrap()
}
