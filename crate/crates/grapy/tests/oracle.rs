//! The tape-based pyramid against plain-loop reference implementations.

mod common;

use common::Mat;
use grapy::gpm::{self, GpmConfig, MaskSource, Pooling};
use grapy::params::{Binder, ParamStore};
use grapy::taxonomy::{Level, Taxonomy};
use grapy::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-6;

fn mat_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn aggregate_matches_reference() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c, k) = (rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(1..5), rng.gen_range(1..6));
        let f = common::random_tensor(&mut rng, &[h, w, c], -1.0, 1.0);
        let labels = common::random_labels(&mut rng, h, w, k);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let nodes = gpm::aggregate(&mut tape, fv, &labels, Level::Three, Pooling::Both).unwrap();
        let expected = common::pool(&f, &labels);
        let got = common::to_mat(tape.value(nodes.features));
        assert!(mat_diff(&got, &expected) < TOL, "seed {seed}");
        let occupied: Vec<bool> = labels.histogram().iter().map(|&n| n > 0).collect();
        assert_eq!(nodes.occupancy, occupied);
    }
}

#[test]
fn single_pooling_modes_select_their_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let f = common::random_tensor(&mut rng, &[4, 5, 3], -1.0, 1.0);
    let labels = common::random_labels(&mut rng, 4, 5, 3);
    let both = common::pool(&f, &labels);
    for (pooling, range) in [(Pooling::Average, 0..3), (Pooling::Max, 3..6)] {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let nodes = gpm::aggregate(&mut tape, fv, &labels, Level::Two, pooling).unwrap();
        let got = common::to_mat(tape.value(nodes.features));
        let expected: Mat = both.iter().map(|r| r[range.clone()].to_vec()).collect();
        assert!(mat_diff(&got, &expected) < TOL);
    }
}

#[test]
fn reason_matches_reference() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (k, cl) = (rng.gen_range(1..6), rng.gen_range(2..9));
        let b = (cl / 8).max(1);
        let fresh = seed % 2 == 1;
        let v = common::random_tensor(&mut rng, &[k, cl], -1.0, 1.0);
        let pairs: Vec<_> = (0..if fresh { 3 } else { 1 })
            .map(|_| {
                (
                    common::random_tensor(&mut rng, &[cl, b], -0.5, 0.5),
                    common::random_tensor(&mut rng, &[cl, b], -0.5, 0.5),
                )
            })
            .collect();
        let mut tape = Tape::new();
        let vv = tape.constant(v.clone());
        let bound: Vec<_> = pairs
            .iter()
            .map(|(a, b)| (tape.constant(a.clone()), tape.constant(b.clone())))
            .collect();
        let r = gpm::reason(&mut tape, vv, &bound, 3).unwrap();
        let mats: Vec<(Mat, Mat)> = pairs.iter().map(|(a, b)| (common::to_mat(a), common::to_mat(b))).collect();
        let (refined, attention) = common::reason(&common::to_mat(&v), &mats, 3);
        assert!(mat_diff(&common::to_mat(tape.value(r.refined)), &refined) < TOL, "seed {seed}");
        assert_eq!(r.attention.len(), 3);
        for (a, e) in r.attention.iter().zip(&attention) {
            assert!(mat_diff(&common::to_mat(tape.value(*a)), e) < TOL);
        }
    }
}

#[test]
fn distribute_matches_reference() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (h, w, c, k) = (rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(1..5), rng.gen_range(1..6));
        let f = common::random_tensor(&mut rng, &[h, w, c], -1.0, 1.0);
        let refined = common::random_tensor(&mut rng, &[k, 2 * c], -2.0, 2.0);
        let proj = common::random_tensor(&mut rng, &[2 * c, c], -0.5, 0.5);
        let labels = common::random_labels(&mut rng, h, w, k);
        let mut tape = Tape::new();
        let (fv, rv, pv) = (
            tape.constant(f.clone()),
            tape.constant(refined.clone()),
            tape.constant(proj.clone()),
        );
        let out = gpm::distribute(&mut tape, fv, rv, pv, &labels).unwrap();
        let expected = common::distribute(&f, &common::to_mat(&refined), &common::to_mat(&proj), &labels);
        assert!(common::max_abs_diff(tape.value(out), &expected) < TOL, "seed {seed}");
    }
}

fn check_pyramid(seed: u64, taxonomy: &Taxonomy, config: &GpmConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(4..8), rng.gen_range(4..8));
    let k = taxonomy.num_classes(Level::Three);
    let f = common::random_tensor(&mut rng, &[h, w, config.channels], -1.0, 1.0);
    let y = common::random_prediction(&mut rng, h, w, k);
    let mut store = ParamStore::new();
    config.init_params(&mut store, &mut rng, k).unwrap();
    // out_proj starts at zero, which would make distribution trivial
    for &level in &config.levels {
        let t = common::random_tensor(&mut rng, &[config.node_channels(), config.channels], -0.5, 0.5);
        store.set(&GpmConfig::out_proj_name(level), t).unwrap();
    }

    let mut tape = Tape::new();
    let mut binder = Binder::new(&store);
    let fv = tape.constant(f.clone());
    let out = gpm::pyramid_forward(&mut tape, &mut binder, fv, &y, taxonomy, config, MaskSource::Predicted).unwrap();
    let oracle = common::pyramid(&f, &y, taxonomy, config, &store);

    for (i, trace) in out.levels.iter().enumerate() {
        assert!(mat_diff(&common::to_mat(tape.value(trace.nodes.features)), &oracle.nodes[i]) < TOL);
        assert!(common::max_abs_diff(tape.value(trace.output), &oracle.outputs[i + 1]) < TOL);
        for (a, e) in trace.reasoning.attention.iter().zip(&oracle.attention[i]) {
            assert!(mat_diff(&common::to_mat(tape.value(*a)), e) < TOL);
        }
    }
    assert!(common::max_abs_diff(tape.value(out.fused), &oracle.fused) < TOL, "seed {seed}");
    assert!(common::max_abs_diff(tape.value(out.prediction), &oracle.prediction) < TOL, "seed {seed}");
}

#[test]
fn pyramid_matches_composed_reference() {
    let taxonomies = grapy::taxonomy::builtin_taxonomies();
    for seed in 0..INSTANCES {
        let tax = &taxonomies[seed as usize % 3];
        let config = GpmConfig {
            channels: 4,
            ..GpmConfig::default()
        };
        check_pyramid(300 + seed, tax, &config);
    }
}

#[test]
fn pyramid_variants_match_reference() {
    let tax = Taxonomy::builtin("B").unwrap();
    let variants = [
        GpmConfig {
            channels: 3,
            fresh_weights: true,
            ..GpmConfig::default()
        },
        GpmConfig {
            channels: 4,
            levels: vec![Level::Three],
            ..GpmConfig::default()
        },
        GpmConfig {
            channels: 16,
            levels: vec![Level::One, Level::Two],
            iterations: 2,
            ..GpmConfig::default()
        },
    ];
    for (i, config) in variants.iter().enumerate() {
        for seed in 0..5 {
            check_pyramid(400 + 10 * i as u64 + seed, &tax, config);
        }
    }
}
