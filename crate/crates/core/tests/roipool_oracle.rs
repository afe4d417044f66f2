mod common;

use frcnn::roipool::{
    map_image_roi_to_feature, roi_pool_backward, roi_pool_forward, FeatureMap, FeatureShape,
    RoiRect,
};
use frcnn::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn int_grads<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-8i32..=8) as f64).collect()
}

#[test]
fn forward_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..500 {
        let fm = common::random_map(&mut rng, 12);
        let roi = common::random_roi(&mut rng, fm.shape());
        let (ph, pw) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let got = roi_pool_forward(&fm, &roi, ph, pw).unwrap();
        let (out, arg) = common::brute_pool(&fm, &roi, ph, pw);
        assert_eq!(got.output, out, "{roi:?} {ph}x{pw}");
        assert_eq!(got.argmax, arg, "{roi:?} {ph}x{pw}");
    }
}

#[test]
fn backward_matches_switch_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..200 {
        let fm = common::random_map(&mut rng, 10);
        let (ph, pw) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let rois: Vec<RoiRect> = (0..rng.random_range(1..5))
            .map(|_| common::random_roi(&mut rng, fm.shape()))
            .collect();
        let pools: Vec<_> = rois
            .iter()
            .map(|r| roi_pool_forward(&fm, r, ph, pw).unwrap())
            .collect();
        let grads: Vec<Vec<f64>> = pools
            .iter()
            .map(|p| int_grads(&mut rng, p.output.len()))
            .collect();
        let got = roi_pool_backward(&grads, &pools, fm.shape()).unwrap();
        let want = common::brute_pool_backward(&fm, &rois, ph, pw, &grads);
        assert_eq!(got.data(), &want[..]);
    }
}

#[test]
fn joint_backward_is_sum_of_single_roi_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..100 {
        let fm = common::random_map(&mut rng, 9);
        let rois: Vec<RoiRect> = (0..4)
            .map(|_| common::random_roi(&mut rng, fm.shape()))
            .collect();
        let pools: Vec<_> = rois
            .iter()
            .map(|r| roi_pool_forward(&fm, r, 3, 3).unwrap())
            .collect();
        let grads: Vec<Vec<f64>> = pools
            .iter()
            .map(|p| int_grads(&mut rng, p.output.len()))
            .collect();
        let joint = roi_pool_backward(&grads, &pools, fm.shape()).unwrap();
        let mut summed = vec![0.0; fm.data().len()];
        for (g, p) in grads.iter().zip(&pools) {
            let single =
                roi_pool_backward(std::slice::from_ref(g), std::slice::from_ref(p), fm.shape())
                    .unwrap();
            for (s, v) in summed.iter_mut().zip(single.data()) {
                *s += v;
            }
        }
        assert_eq!(joint.data(), &summed[..]);
    }
}

#[test]
fn full_map_roi_equals_single_level_spp() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    for _ in 0..200 {
        let fm = common::random_map(&mut rng, 14);
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let full = RoiRect::full(fm.shape());
        assert_eq!(
            roi_pool_forward(&fm, &full, n, m).unwrap().output,
            common::spp_single_level(&fm, n, m)
        );
        let roi = common::random_roi(&mut rng, fm.shape());
        assert_eq!(
            roi_pool_forward(&fm, &roi, n, m).unwrap().output,
            common::spp_single_level(&common::crop(&fm, &roi), n, m)
        );
    }
}

#[test]
fn outputs_dominate_their_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for _ in 0..100 {
        let fm = common::random_map(&mut rng, 10);
        let roi = common::random_roi(&mut rng, fm.shape());
        let p = roi_pool_forward(&fm, &roi, 2, 3).unwrap();
        for (k, (&v, &a)) in p.output.iter().zip(&p.argmax).enumerate() {
            assert_eq!(fm.data()[a], v);
            let c = k / 6;
            let (i, j) = ((k % 6) / 3, k % 3);
            let (y0, y1) = frcnn::roipool::bin_range(i, roi.h, 2);
            let (x0, x1) = frcnn::roipool::bin_range(j, roi.w, 3);
            for y in y0..y1 {
                for x in x0..x1 {
                    assert!(v >= fm.get(c, roi.r + y, roi.c + x));
                }
            }
        }
    }
}

#[test]
fn unselected_cells_get_zero_gradient() {
    let fm = FeatureMap::new(1, 3, 3, (0..9).map(f64::from).collect()).unwrap();
    let roi = RoiRect::new(0, 0, 3, 3);
    let p = roi_pool_forward(&fm, &roi, 1, 1).unwrap();
    assert_eq!(p.argmax, vec![8]);
    let g = roi_pool_backward(&[vec![2.5]], &[p], fm.shape()).unwrap();
    let mut want = [0.0; 9];
    want[8] = 2.5;
    assert_eq!(g.data(), &want[..]);
}

#[test]
fn image_box_mapping_examples() {
    let shape = FeatureShape {
        channels: 1,
        height: 20,
        width: 30,
    };
    let map = |x1, y1, x2, y2, stride| {
        map_image_roi_to_feature(&BBox::new(x1, y1, x2, y2).unwrap(), stride, shape).unwrap()
    };
    assert_eq!(map(3.0, 4.0, 9.0, 10.0, 1.0).rect, RoiRect::new(4, 3, 6, 6));
    assert_eq!(
        map(0.0, 0.0, 16.0, 16.0, 16.0).rect,
        RoiRect::new(0, 0, 1, 1)
    );
    assert_eq!(
        map(5.0, 5.0, 27.0, 27.0, 16.0).rect,
        RoiRect::new(0, 0, 2, 2)
    );
    let far = map(1000.0, 1000.0, 1100.0, 1100.0, 16.0);
    assert!(far.outside);
    assert_eq!((far.rect.h, far.rect.w), (1, 1));
    assert!(far.rect.check_bounds(shape).is_ok());
    assert!(!map(0.0, 0.0, 40.0, 40.0, 16.0).outside);
}
