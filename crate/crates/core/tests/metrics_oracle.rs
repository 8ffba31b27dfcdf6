//! Distance and overlap metrics against all-pairs brute force, plus the
//! fixed hand values.

mod common;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcps_core::metrics::{dsc, surface_distances};
use rcps_core::volume::LabelMap;

fn label_map(mask: &[bool], dims: [usize; 3]) -> LabelMap {
    LabelMap {
        data: Array3::from_shape_vec(
            (dims[0], dims[1], dims[2]),
            mask.iter().map(|&b| b as u8).collect(),
        )
        .unwrap(),
        num_classes: 2,
    }
}

#[test]
fn random_masks_match_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(401);
    let mut compared = 0;
    for trial in 0..120 {
        let dims = [
            rng.random_range(3..=12),
            rng.random_range(3..=12),
            rng.random_range(3..=12),
        ];
        let n = dims[0] * dims[1] * dims[2];
        let density = rng.random_range(0.05..0.5);
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let gt: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
        let spacing = if trial % 3 == 0 {
            [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]
        } else {
            [1.0, 1.0, 1.0]
        };

        let pm = label_map(&pred, dims);
        let gm = label_map(&gt, dims);

        let got_dsc = dsc(&pm, &gm, 1).unwrap();
        let want_dsc = common::dsc(&pred, &gt);
        assert!((got_dsc - want_dsc).abs() <= 1e-6, "trial {trial}: dsc {got_dsc} vs {want_dsc}");

        let got = surface_distances(&pm, &gm, 1, spacing).unwrap();
        let want = common::surface_distances(&pred, &gt, dims, spacing);
        match (got, want) {
            (None, None) => {}
            (Some((gh, ga)), Some((wh, wa))) => {
                assert!((gh - wh).abs() <= 1e-6, "trial {trial}: hd95 {gh} vs {wh}");
                assert!((ga - wa).abs() <= 1e-6, "trial {trial}: asd {ga} vs {wa}");
                compared += 1;
            }
            other => panic!("trial {trial}: definedness mismatch: {other:?}"),
        }
    }
    assert!(compared >= 100, "only {compared} non-empty comparisons");
}

#[test]
fn shifted_cube_dsc_is_exactly_half() {
    // A 2x2x2 cube and its copy shifted by one voxel along z overlap in
    // exactly half their volume: DSC = 2*4 / (8 + 8) = 0.5.
    let dims = [5, 4, 4];
    let mut pred = vec![false; 80];
    let mut gt = vec![false; 80];
    for z in 0..2 {
        for y in 1..3 {
            for x in 1..3 {
                gt[(z * 4 + y) * 4 + x] = true;
                pred[((z + 1) * 4 + y) * 4 + x] = true;
            }
        }
    }
    let d = dsc(&label_map(&pred, dims), &label_map(&gt, dims), 1).unwrap();
    assert_eq!(d, 0.5);
}

#[test]
fn identical_masks_score_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(402);
    for _ in 0..20 {
        let dims = [
            rng.random_range(3..=8),
            rng.random_range(3..=8),
            rng.random_range(3..=8),
        ];
        let n = dims[0] * dims[1] * dims[2];
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        mask[0] = true;
        let m = label_map(&mask, dims);
        assert_eq!(dsc(&m, &m, 1).unwrap(), 1.0);
        let (hd95, asd) = surface_distances(&m, &m, 1, [1.0; 3]).unwrap().unwrap();
        assert_eq!(hd95, 0.0);
        assert_eq!(asd, 0.0);
    }
}
