mod common;

use frcnn::detect::{
    assign_roi_scale, assign_roi_scale_to, detect_image, evaluate_ap, nms_per_class,
    pyramid_factors, score_proposals, select_scale, DetectConfig, Detection, PyramidLevel,
    ScaleConfig, ScoringConfig, PYRAMID_TARGET_AREA,
};
use frcnn::net::{DetectionNet, FcLayer, NetConfig, SgdConfig};
use frcnn::sampler::GroundTruth;
use frcnn::{BBox, FeatureMap, TargetNormalizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn nms_matches_quadratic_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..100 {
        let n = rng.random_range(0..=500);
        let dets = common::random_detections(&mut rng, n, 3);
        let thr = rng.random_range(0.1..0.9);
        let got = common::canonical(nms_per_class(&dets, thr));
        assert_eq!(got, common::canonical(common::reference_nms(&dets, thr)));
    }
}

#[test]
fn nms_is_idempotent_and_keeps_class_maxima() {
    let mut rng = ChaCha8Rng::seed_from_u64(201);
    for _ in 0..50 {
        let dets = common::random_detections(&mut rng, 200, 4);
        let once = nms_per_class(&dets, 0.3);
        assert_eq!(nms_per_class(&once, 0.3), once);
        for class in 1..=4 {
            let best = dets
                .iter()
                .filter(|d| d.class == class)
                .map(|d| d.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best.is_finite() {
                assert!(once.iter().any(|d| d.class == class && d.score == best));
            }
        }
    }
}

#[test]
fn nms_simple_cases() {
    let b = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
    let d = |score| Detection {
        bbox: b,
        class: 1,
        score,
    };
    assert_eq!(nms_per_class(&[d(0.5)], 0.3), vec![d(0.5)]);
    assert_eq!(nms_per_class(&[d(0.8), d(0.9)], 0.3), vec![d(0.9)]);
    let other = Detection { class: 2, ..d(0.8) };
    assert_eq!(nms_per_class(&[d(0.9), other], 0.3).len(), 2);
}

fn gt(x: f64, class: usize) -> GroundTruth {
    GroundTruth {
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(),
        class,
    }
}

#[test]
fn ap_extremes_and_hand_computed_case() {
    let gts = vec![vec![gt(0.0, 1), gt(20.0, 1)]];
    let perfect: Vec<Vec<Detection>> = vec![gts[0]
        .iter()
        .map(|g| Detection {
            bbox: g.bbox,
            class: 1,
            score: 0.9,
        })
        .collect()];
    assert_eq!(evaluate_ap(&perfect, &gts, 1, 0.5).unwrap().map, 1.0);
    assert_eq!(evaluate_ap(&[vec![]], &gts, 1, 0.5).unwrap().map, 0.0);

    // ranks: TP, FP, TP -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
    let miss = BBox::new(50.0, 50.0, 60.0, 60.0).unwrap();
    let dets = vec![vec![
        Detection {
            bbox: gts[0][0].bbox,
            class: 1,
            score: 0.9,
        },
        Detection {
            bbox: miss,
            class: 1,
            score: 0.8,
        },
        Detection {
            bbox: gts[0][1].bbox,
            class: 1,
            score: 0.7,
        },
    ]];
    let ap = evaluate_ap(&dets, &gts, 1, 0.5).unwrap().map;
    assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn classes_without_ground_truth_are_undefined() {
    let gts = vec![vec![gt(0.0, 1)]];
    let report = evaluate_ap(&[vec![]], &gts, 2, 0.5).unwrap();
    assert_eq!(report.per_class[1], None);
    assert_eq!(report.map, 0.0);
}

#[test]
fn adding_a_top_ranked_true_positive_never_lowers_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for _ in 0..200 {
        let n_gt = rng.random_range(1..6);
        let gts: Vec<GroundTruth> = (0..n_gt).map(|i| gt(30.0 * i as f64, 1)).collect();
        let mut dets: Vec<Detection> = (0..rng.random_range(0..8))
            .map(|_| {
                let g = &gts[rng.random_range(0..n_gt)];
                let shift = rng.random_range(0.0..8.0);
                Detection {
                    bbox: BBox::new(g.bbox.x1 + shift, 0.0, g.bbox.x2 + shift, 10.0).unwrap(),
                    class: 1,
                    score: rng.random_range(0.0..0.9),
                }
            })
            .collect();
        let before = evaluate_ap(&[dets.clone()], std::slice::from_ref(&gts), 1, 0.5)
            .unwrap()
            .map;
        let matched: Vec<bool> = gts
            .iter()
            .map(|g| {
                dets.iter()
                    .any(|d| frcnn::geometry::iou(&d.bbox, &g.bbox) >= 0.5)
            })
            .collect();
        if let Some(free) = matched.iter().position(|m| !m) {
            dets.push(Detection {
                bbox: gts[free].bbox,
                class: 1,
                score: 0.95,
            });
            let after = evaluate_ap(&[dets], &[gts], 1, 0.5).unwrap().map;
            assert!(after >= before - 1e-12, "{before} -> {after}");
        }
    }
}

#[test]
fn single_scale_rule() {
    let cfg = ScaleConfig::default();
    assert_eq!(select_scale(473.0, 384.0, &cfg).unwrap(), 1.5625);
    assert_eq!(select_scale(2000.0, 600.0, &cfg).unwrap(), 0.5);
    assert!(select_scale(0.0, 10.0, &cfg).is_err());
}

#[test]
fn pyramid_assignment_matches_enumeration() {
    let cfg = ScaleConfig::default();
    let factors = pyramid_factors(473.0, 384.0, &cfg).unwrap();
    for (f, s) in factors.iter().zip(&cfg.pyramid_scales) {
        assert_eq!(*f, (s / 384.0f64).min(2000.0 / 473.0));
    }
    let roi = BBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
    assert_eq!(
        assign_roi_scale(&roi, &factors),
        common::nearest_level(1e4, &factors, PYRAMID_TARGET_AREA)
    );
    let mut rng = ChaCha8Rng::seed_from_u64(203);
    for _ in 0..1000 {
        let b = common::random_box(&mut rng, 400.0);
        let want = common::nearest_level(b.area(), &factors, PYRAMID_TARGET_AREA);
        assert_eq!(assign_roi_scale(&b, &factors), want);
        let c: f64 = rng.random_range(0.5..3.0);
        let scaled: Vec<f64> = factors.iter().map(|f| f * c).collect();
        assert_eq!(
            assign_roi_scale_to(&b, &scaled, PYRAMID_TARGET_AREA * c * c),
            want
        );
    }
}

fn small_net(seed: u64) -> DetectionNet {
    let cfg = NetConfig {
        channels: 3,
        pooled_h: 2,
        pooled_w: 2,
        trunk_widths: vec![16],
        num_classes: 3,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DetectionNet::init(&cfg, &SgdConfig::default(), &mut rng).unwrap()
}

fn scene(seed: u64) -> (FeatureMap, Vec<BBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * 20 * 25)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let fm = FeatureMap::new(3, 20, 25, data).unwrap();
    let proposals = (0..30)
        .map(|_| common::random_box(&mut rng, 380.0))
        .collect();
    (fm, proposals)
}

#[test]
fn scoring_contracts() {
    let mut net = small_net(1);
    let (fm, proposals) = scene(2);
    let levels = vec![PyramidLevel {
        features: fm,
        factor: 1.0,
    }];
    let cfg = ScoringConfig {
        stride: 16.0,
        use_bbox: true,
    };
    let norm = TargetNormalizer {
        mean: [0.01, -0.02, 0.03, 0.0],
        stddev: [0.1, 0.1, 0.2, 0.2],
    };
    let size = (400.0, 320.0);
    let joint = score_proposals(&net, &levels, &proposals, &norm, size, &cfg).unwrap();
    assert_eq!(joint.len(), proposals.len());
    for (i, s) in joint.iter().enumerate() {
        assert!((s.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let single = score_proposals(&net, &levels, &proposals[i..=i], &norm, size, &cfg).unwrap();
        assert_eq!(single[0].probs.len(), s.probs.len());
        for (a, b) in single[0].probs.iter().zip(&s.probs) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in single[0].boxes.iter().zip(&s.boxes) {
            assert!((a.x1 - b.x1).abs() < 1e-9 && (a.y2 - b.y2).abs() < 1e-9);
        }
    }
    assert!(score_proposals(&net, &levels, &[], &norm, size, &cfg)
        .unwrap()
        .is_empty());

    net.bbox = FcLayer::zeros(net.bbox.out_dim(), net.bbox.in_dim());
    let plain = score_proposals(
        &net,
        &levels,
        &proposals,
        &TargetNormalizer::identity(),
        size,
        &cfg,
    )
    .unwrap();
    for (s, p) in plain.iter().zip(&proposals) {
        for b in &s.boxes {
            let clipped = p.clamp_to(size.0, size.1);
            for (x, y) in [
                (b.x1, clipped.x1),
                (b.y1, clipped.y1),
                (b.x2, clipped.x2),
                (b.y2, clipped.y2),
            ] {
                assert!((x - y).abs() < 1e-9, "{b:?} vs {p:?}");
            }
        }
    }
}

#[test]
fn detection_is_deterministic() {
    let net = small_net(4);
    let (fm, proposals) = scene(5);
    let levels = vec![PyramidLevel {
        features: fm,
        factor: 1.0,
    }];
    let cfg = DetectConfig::default();
    let norm = TargetNormalizer::identity();
    let a = detect_image(&net, &levels, &proposals, &norm, (400.0, 320.0), &cfg).unwrap();
    let b = detect_image(&net, &levels, &proposals, &norm, (400.0, 320.0), &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|d| (1..=3).contains(&d.class)));
}
