//! Finite-difference verification of every loss gradient, plus the
//! stop-gradient contract on the pseudo-label branch.

mod common;

use std::rc::Rc;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcps_core::losses;
use rcps_core::sampling::{bidirectional_contrastive_loss, ContrastiveConfig, PseudoLabelGrid};
use rcps_core::tensor::gradcheck::max_rel_grad_err;
use rcps_core::tensor::Tape;

const TOL: f64 = 1e-3;
const H: f64 = 1e-5;
const SHAPE: [usize; 5] = [1, 3, 2, 2, 2];

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(shape.to_vec(), |_| rng.random_range(-1.5..1.5))
}

fn rand_probs_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    let mut a = ArrayD::from_shape_fn(shape.to_vec(), |_| rng.random_range(0.1..1.0f64));
    let (c, sp) = (shape[1], shape[2..].iter().product::<usize>());
    let s = a.as_slice_mut().unwrap();
    for v in 0..sp {
        let z: f64 = (0..c).map(|ci| s[ci * sp + v]).sum();
        for ci in 0..c {
            s[ci * sp + v] /= z;
        }
    }
    a
}

#[test]
fn seg_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    for trial in 0..4 {
        let z = rand_arr(&mut rng, &SHAPE);
        let labels = Rc::new(ArrayD::from_shape_fn(vec![1, 2, 2, 2], |_| {
            rng.random_range(0..3u8)
        }));
        let err = max_rel_grad_err(
            move |tape, ts| {
                let probs = tape.softmax_channels(ts[0]);
                losses::seg_loss(tape, probs, Rc::clone(&labels), trial % 2 == 0).unwrap()
            },
            &[z],
            H,
        );
        assert!(err <= TOL, "seg trial {trial}: rel err {err}");
    }
}

#[test]
fn pseudo_sup_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for trial in 0..4 {
        let zv = rand_arr(&mut rng, &SHAPE);
        let z_fixed = rand_arr(&mut rng, &SHAPE);
        let err = max_rel_grad_err(
            move |tape, ts| {
                let view = tape.softmax_channels(ts[0]);
                let z = tape.leaf(z_fixed.clone(), false);
                tape.mean_all(losses::pseudo_sup_loss(tape, view, z, 0.5).unwrap())
            },
            &[zv],
            H,
        );
        assert!(err <= TOL, "pseudo trial {trial}: rel err {err}");
    }
}

#[test]
fn kl_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(203);
    for trial in 0..4 {
        let zv = rand_arr(&mut rng, &SHAPE);
        let reference = rand_probs_arr(&mut rng, &SHAPE);
        let err = max_rel_grad_err(
            move |tape, ts| {
                let view = tape.softmax_channels(ts[0]);
                let r = tape.leaf(reference.clone(), false);
                tape.mean_all(losses::kl_map(tape, view, r).unwrap())
            },
            &[zv],
            H,
        );
        assert!(err <= TOL, "kl trial {trial}: rel err {err}");
    }
}

#[test]
fn uncertainty_rectified_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(204);
    for trial in 0..4 {
        let zv = rand_arr(&mut rng, &SHAPE);
        let z_fixed = rand_arr(&mut rng, &SHAPE);
        let err = max_rel_grad_err(
            move |tape, ts| {
                let view = tape.softmax_channels(ts[0]);
                let z = tape.leaf(z_fixed.clone(), false);
                let reference = tape.softmax_channels(z);
                losses::uncertainty_rectified_loss(tape, view, z, reference, 0.5).unwrap()
            },
            &[zv],
            H,
        );
        assert!(err <= TOL, "urp trial {trial}: rel err {err}");
    }
}

#[test]
fn consistency_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(205);
    for trial in 0..4 {
        let za = rand_arr(&mut rng, &SHAPE);
        let zb = rand_arr(&mut rng, &SHAPE);
        let err = max_rel_grad_err(
            |tape, ts| {
                let a = tape.softmax_channels(ts[0]);
                let b = tape.softmax_channels(ts[1]);
                losses::consistency_loss(tape, a, b).unwrap()
            },
            &[za, zb],
            H,
        );
        assert!(err <= TOL, "consistency trial {trial}: rel err {err}");
    }
}

#[test]
fn rectified_pseudo_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(206);
    for trial in 0..4 {
        let z1 = rand_arr(&mut rng, &SHAPE);
        let z2 = rand_arr(&mut rng, &SHAPE);
        let z_fixed = rand_arr(&mut rng, &SHAPE);
        let err = max_rel_grad_err(
            move |tape, ts| {
                let v1 = tape.softmax_channels(ts[0]);
                let v2 = tape.softmax_channels(ts[1]);
                let z = tape.leaf(z_fixed.clone(), false);
                losses::rectified_pseudo_loss(tape, v1, v2, z, 0.5).unwrap()
            },
            &[z1, z2],
            H,
        );
        assert!(err <= TOL, "rp trial {trial}: rel err {err}");
    }
}

fn grids(rng: &mut ChaCha8Rng) -> (PseudoLabelGrid<f64>, PseudoLabelGrid<f64>) {
    let mk = |rng: &mut ChaCha8Rng| PseudoLabelGrid {
        classes: ndarray::Array3::from_shape_fn((2, 2, 2), |_| rng.random_range(0..3u8)),
        confidence: ndarray::Array3::from_shape_fn((2, 2, 2), |_| rng.random_range(0.3..1.0)),
    };
    (mk(rng), mk(rng))
}

#[test]
fn contrastive_gradient_through_views() {
    let mut rng = ChaCha8Rng::seed_from_u64(207);
    for trial in 0..3 {
        let raw1 = rand_arr(&mut rng, &SHAPE);
        let raw2 = rand_arr(&mut rng, &SHAPE);
        let raw_neg = rand_arr(&mut rng, &SHAPE);
        let (pl, pl_neg) = grids(&mut rng);
        let cfg = ContrastiveConfig { negatives: 4, ..Default::default() };
        let err = max_rel_grad_err(
            move |tape, ts| {
                let v1 = tape.l2_normalize_channels(ts[0], 1e-12);
                let v2 = tape.l2_normalize_channels(ts[1], 1e-12);
                let neg =
                    tape.l2_normalize_channels(tape.leaf(raw_neg.clone(), false), 1e-12);
                bidirectional_contrastive_loss::<f64, ChaCha8Rng>(
                    tape, v1, v2, 0, neg, 0, &pl, &pl_neg, &cfg, None,
                )
                .unwrap()
            },
            &[raw1, raw2],
            H,
        );
        assert!(err <= TOL, "contrastive trial {trial}: rel err {err}");
    }
}

#[test]
fn contrastive_gradient_through_negatives_when_attached() {
    let mut rng = ChaCha8Rng::seed_from_u64(208);
    let raw1 = rand_arr(&mut rng, &SHAPE);
    let raw2 = rand_arr(&mut rng, &SHAPE);
    let raw_neg = rand_arr(&mut rng, &SHAPE);
    let (pl, pl_neg) = grids(&mut rng);
    let cfg =
        ContrastiveConfig { negatives: 4, detach_negatives: false, ..Default::default() };
    let err = max_rel_grad_err(
        move |tape, ts| {
            let v1 = tape.l2_normalize_channels(ts[0], 1e-12);
            let v2 = tape.l2_normalize_channels(ts[1], 1e-12);
            let neg = tape.l2_normalize_channels(ts[2], 1e-12);
            bidirectional_contrastive_loss::<f64, ChaCha8Rng>(
                tape, v1, v2, 0, neg, 0, &pl, &pl_neg, &cfg, None,
            )
            .unwrap()
        },
        &[raw1, raw2, raw_neg],
        H,
    );
    assert!(err <= TOL, "rel err {err}");
}

/// The pseudo-label branch of the rectified loss must receive exactly zero
/// gradient; the two view branches must receive some.
#[test]
fn stop_gradient_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(209);
    let tape = Tape::<f64>::new();
    let z1 = tape.leaf(rand_arr(&mut rng, &SHAPE), true);
    let z2 = tape.leaf(rand_arr(&mut rng, &SHAPE), true);
    let z0 = tape.leaf(rand_arr(&mut rng, &SHAPE), true);
    let v1 = tape.softmax_channels(z1);
    let v2 = tape.softmax_channels(z2);
    let loss = losses::rectified_pseudo_loss(&tape, v1, v2, z0, 0.5).unwrap();
    let grads = tape.backward(loss);
    let norm = |t| {
        grads
            .get(t)
            .map_or(0.0, |g: &ArrayD<f64>| g.iter().map(|v| v * v).sum::<f64>().sqrt())
    };
    assert_eq!(norm(z0), 0.0, "pseudo-label branch received gradient");
    assert!(norm(z1) > 0.0, "view 1 received no gradient");
    assert!(norm(z2) > 0.0, "view 2 received no gradient");

    // Same contract for detached negatives in the contrastive term.
    let tape = Tape::<f64>::new();
    let a = tape.l2_normalize_channels(tape.leaf(rand_arr(&mut rng, &SHAPE), true), 1e-12);
    let b = tape.l2_normalize_channels(tape.leaf(rand_arr(&mut rng, &SHAPE), true), 1e-12);
    let neg = tape.leaf(rand_arr(&mut rng, &SHAPE), true);
    let nrm = tape.l2_normalize_channels(neg, 1e-12);
    let (pl, pl_neg) = grids(&mut rng);
    let cfg = ContrastiveConfig { negatives: 4, ..Default::default() };
    let loss = bidirectional_contrastive_loss::<f64, ChaCha8Rng>(
        &tape, a, b, 0, nrm, 0, &pl, &pl_neg, &cfg, None,
    )
    .unwrap();
    let grads = tape.backward(loss);
    let gn = grads.get(neg);
    assert!(
        gn.map_or(true, |g| g.iter().all(|&v| v == 0.0)),
        "detached negatives received gradient"
    );
}
