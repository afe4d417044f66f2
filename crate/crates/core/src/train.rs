//! Training and evaluation drivers over a [`Dataset`].

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{Dataset, Scene};
use crate::detect::{
    detect_image, evaluate_ap, pyramid_factors, ApReport, DetectConfig, Detection, PyramidLevel,
    ScaleConfig, ScaleMode, ScoringConfig,
};
use crate::geometry::TargetNormalizer;
use crate::losses::{LossReport, RoiLabel};
use crate::net::{init_heads, sgd_step, DetectionNet, NetConfig, SgdConfig, SgdState, Trainable};
use crate::roipool::{map_image_roi_to_feature, roi_pool_forward, FeatureMap};
use crate::sampler::{fit_dataset_normalizer, MiniBatch, Sampler, SamplerConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Classification and box regression trained jointly.
    Multitask,
    /// Classification loss only (`lambda = 0`).
    ClsOnly,
    /// Classification first, then the box head alone on frozen features.
    StageWise,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multitask" => Ok(TrainMode::Multitask),
            "cls-only" => Ok(TrainMode::ClsOnly),
            "stage-wise" => Ok(TrainMode::StageWise),
            other => Err(Error::Config(format!(
                "training mode must be multitask, cls-only or stage-wise, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Multitask => "multitask",
            TrainMode::ClsOnly => "cls-only",
            TrainMode::StageWise => "stage-wise",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub lambda: f64,
    pub mode: TrainMode,
    /// Iterations per training phase.
    pub iterations: usize,
    pub sampler: SamplerConfig,
    pub sgd: SgdConfig,
    pub net: NetConfig,
    pub scale: ScaleConfig,
    pub nms_threshold: f64,
    pub score_floor: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            lambda: 1.0,
            mode: TrainMode::Multitask,
            iterations: 4000,
            sampler: SamplerConfig::default(),
            sgd: SgdConfig::default(),
            net: NetConfig::default(),
            scale: ScaleConfig::default(),
            nms_threshold: 0.3,
            score_floor: 0.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(Error::Config("NMS threshold must lie in (0, 1)".into()));
        }
        self.sampler.validate()?;
        self.sgd.validate()
    }

    pub fn detect_config(&self, stride: f64, use_bbox: bool) -> DetectConfig {
        DetectConfig {
            scoring: ScoringConfig { stride, use_bbox },
            nms_threshold: self.nms_threshold,
            score_floor: self.score_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub cls: f64,
    pub loc: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DetectionNet,
    pub normalizer: TargetNormalizer,
    pub state: SgdState,
    pub log: Vec<LossRecord>,
}

/// Tab-separated `iter cls loc total lr`, one line per iteration.
pub fn format_loss_log(log: &[LossRecord]) -> String {
    let mut s = String::new();
    for r in log {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", r.iter, r.cls, r.loc, r.total, r.lr);
    }
    s
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    std::fs::write(path, format_loss_log(log)).map_err(|e| Error::io(path, e))
}

/// Offset (image pixels) aligning a mirrored image with its mirrored feature map,
/// whose right edge lies at `width_cells * cell` rather than at the image width.
fn flip_offset(scene: &Scene, stride: f64) -> f64 {
    scene.features.width() as f64 * stride / scene.factor - scene.image.width
}

/// Pools every RoI of a minibatch into one row of the returned matrix.
pub fn pool_minibatch(
    dataset: &Dataset,
    flipped: &[FeatureMap],
    batch: &MiniBatch,
    pooled_h: usize,
    pooled_w: usize,
) -> Result<Array2<f64>> {
    let channels = dataset.channels();
    let mut x = Array2::zeros((batch.len(), channels * pooled_h * pooled_w));
    for (row, e) in batch.entries.iter().enumerate() {
        let scene = &dataset.scenes[e.image];
        let (fm, proposal) = if e.flipped {
            let dx = flip_offset(scene, dataset.stride);
            let mut p = e.proposal;
            p.x1 += dx;
            p.x2 += dx;
            (&flipped[e.image], p)
        } else {
            (&scene.features, e.proposal)
        };
        let mapped =
            map_image_roi_to_feature(&proposal.scale(scene.factor), dataset.stride, fm.shape())?;
        let res = roi_pool_forward(fm, &mapped.rect, pooled_h, pooled_w)?;
        x.row_mut(row)
            .assign(&ndarray::ArrayView1::from(&res.output));
    }
    Ok(x)
}

struct Phase {
    lambda: f64,
    trainable: Trainable,
    sampler_seed: u64,
    iter_offset: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    net: &mut DetectionNet,
    state: &mut SgdState,
    dataset: &Dataset,
    flipped: &[FeatureMap],
    images: &[crate::sampler::AnnotatedImage],
    normalizer: &TargetNormalizer,
    run: &RunConfig,
    phase: Phase,
    log: &mut Vec<LossRecord>,
) -> Result<()> {
    let cfg = SamplerConfig {
        seed: phase.sampler_seed,
        ..run.sampler.clone()
    };
    let mut sampler = Sampler::new(images, cfg, *normalizer)?;
    for it in 0..run.iterations {
        let batch = sampler.sample()?;
        let x = pool_minibatch(dataset, flipped, &batch, net.pooled_h, net.pooled_w)?;
        let labels: Vec<RoiLabel> = batch.entries.iter().map(|e| e.label).collect();
        let global = phase.iter_offset + it;
        let (report, grads, _) = net
            .loss_and_grads(x.view(), &labels, phase.lambda)
            .map_err(|e| Error::Diverged {
                iter: global,
                message: e.to_string(),
            })?;
        check_finite(&report, global)?;
        sgd_step(net, &grads, state, &run.sgd, it, phase.trainable).map_err(|e| match e {
            Error::NonFinite(m) => Error::Diverged {
                iter: global,
                message: m,
            },
            other => other,
        })?;
        log.push(LossRecord {
            iter: global,
            cls: report.cls,
            loc: report.loc,
            total: report.total,
            lr: run.sgd.lr_at(it),
        });
    }
    Ok(())
}

fn check_finite(report: &LossReport, iter: usize) -> Result<()> {
    if !report.total.is_finite() {
        return Err(Error::Diverged {
            iter,
            message: format!("non-finite loss (cls {}, loc {})", report.cls, report.loc),
        });
    }
    Ok(())
}

fn net_config_for(run: &RunConfig, dataset: &Dataset) -> NetConfig {
    NetConfig {
        channels: dataset.channels(),
        num_classes: dataset.num_classes,
        ..run.net.clone()
    }
}

fn flipped_maps(dataset: &Dataset) -> Vec<FeatureMap> {
    dataset
        .scenes
        .par_iter()
        .map(|s| s.features.flip_horizontal())
        .collect()
}

/// Trains a fresh network according to `run.mode`.
pub fn train(run: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    run.validate()?;
    match run.mode {
        TrainMode::Multitask | TrainMode::ClsOnly => train_single_phase(run, dataset),
        TrainMode::StageWise => {
            let phase1 = train_single_phase(
                &RunConfig {
                    mode: TrainMode::ClsOnly,
                    ..run.clone()
                },
                dataset,
            )?;
            train_box_head(run, dataset, phase1)
        }
    }
}

fn train_single_phase(run: &RunConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut net = DetectionNet::init(&net_config_for(run, dataset), &run.sgd, &mut rng)?;
    let mut state = SgdState::new(&net)?;
    let images = dataset.images();
    let (normalizer, _) = fit_dataset_normalizer(&images, &run.sampler)?;
    let flipped = flipped_maps(dataset);
    let lambda = match run.mode {
        TrainMode::ClsOnly => 0.0,
        _ => run.lambda,
    };
    let mut log = Vec::with_capacity(run.iterations);
    run_phase(
        &mut net,
        &mut state,
        dataset,
        &flipped,
        &images,
        &normalizer,
        run,
        Phase {
            lambda,
            trainable: Trainable::ALL,
            sampler_seed: run.seed,
            iter_offset: 0,
        },
        &mut log,
    )?;
    Ok(TrainOutcome {
        net,
        normalizer,
        state,
        log,
    })
}

/// Second stage of stage-wise training: a freshly initialized box head is
/// fitted with every other parameter frozen.
pub fn train_box_head(
    run: &RunConfig,
    dataset: &Dataset,
    phase1: TrainOutcome,
) -> Result<TrainOutcome> {
    let TrainOutcome {
        mut net,
        normalizer,
        mut log,
        ..
    } = phase1;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5157_a6e5);
    let (_, bbox) = init_heads(&mut rng, &run.sgd, net.feature_dim(), net.num_classes);
    net.bbox = bbox;
    let mut state = SgdState::new(&net)?;
    let images = dataset.images();
    let flipped = flipped_maps(dataset);
    let offset = log.len();
    run_phase(
        &mut net,
        &mut state,
        dataset,
        &flipped,
        &images,
        &normalizer,
        run,
        Phase {
            lambda: run.lambda,
            trainable: Trainable::BBOX_ONLY,
            sampler_seed: run.seed.wrapping_add(1),
            iter_offset: offset,
        },
        &mut log,
    )?;
    Ok(TrainOutcome {
        net,
        normalizer,
        state,
        log,
    })
}

/// Feature levels for one scene under the given scale mode.
pub fn scene_levels(scene: &Scene, scale: &ScaleConfig) -> Result<Vec<PyramidLevel>> {
    match scale.mode {
        ScaleMode::Single => Ok(vec![PyramidLevel {
            features: scene.features.clone(),
            factor: scene.factor,
        }]),
        ScaleMode::Pyramid => pyramid_factors(scene.image.width, scene.image.height, scale)?
            .into_iter()
            .map(|f| {
                Ok(PyramidLevel {
                    features: scene.features.resample(f / scene.factor)?,
                    factor: f,
                })
            })
            .collect(),
    }
}

/// Detections for every scene, in dataset order.
pub fn detect_dataset(
    net: &DetectionNet,
    normalizer: &TargetNormalizer,
    dataset: &Dataset,
    scale: &ScaleConfig,
    cfg: &DetectConfig,
) -> Result<Vec<Vec<Detection>>> {
    dataset
        .scenes
        .par_iter()
        .map(|scene| {
            let levels = scene_levels(scene, scale)?;
            detect_image(
                net,
                &levels,
                &scene.image.proposals,
                normalizer,
                (scene.image.width, scene.image.height),
                cfg,
            )
        })
        .collect()
}

pub fn evaluate(
    net: &DetectionNet,
    normalizer: &TargetNormalizer,
    dataset: &Dataset,
    scale: &ScaleConfig,
    cfg: &DetectConfig,
) -> Result<ApReport> {
    let dets = detect_dataset(net, normalizer, dataset, scale, cfg)?;
    evaluate_ap(&dets, &dataset.ground_truth(), dataset.num_classes, 0.5)
}

/// Means of consecutive non-overlapping windows of the total loss.
pub fn window_means(log: &[LossRecord], window: usize) -> Vec<f64> {
    log.chunks_exact(window.max(1))
        .map(|w| w.iter().map(|r| r.total).sum::<f64>() / w.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, SynthConfig};

    fn tiny_run(mode: TrainMode) -> RunConfig {
        RunConfig {
            mode,
            iterations: 20,
            net: NetConfig {
                trunk_widths: vec![32],
                ..NetConfig::default()
            },
            sampler: SamplerConfig {
                rois_per_batch: 32,
                ..SamplerConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn tiny_data() -> Dataset {
        generate_dataset(6, &SynthConfig::default(), 3, 0).unwrap()
    }

    #[test]
    fn mode_parsing() {
        for m in [
            TrainMode::Multitask,
            TrainMode::ClsOnly,
            TrainMode::StageWise,
        ] {
            assert_eq!(m.to_string().parse::<TrainMode>().unwrap(), m);
        }
        assert!("joint".parse::<TrainMode>().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let a = train(&tiny_run(TrainMode::Multitask), &data).unwrap();
        let b = train(&tiny_run(TrainMode::Multitask), &data).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.net, b.net);
        assert_eq!(a.log.len(), 20);
    }

    #[test]
    fn cls_only_bbox_head_only_decays() {
        let data = tiny_data();
        let run = tiny_run(TrainMode::ClsOnly);
        let out = train(&run, &data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        let init = DetectionNet::init(&net_config_for(&run, &data), &run.sgd, &mut rng).unwrap();
        // pure decay with momentum: p_t = c_t p_0 for one scalar c_t per tensor
        let ratio = out.net.bbox.weights[[0, 0]] / init.bbox.weights[[0, 0]];
        assert!(ratio < 1.0 && ratio > 0.99);
        for (a, b) in out.net.bbox.weights.iter().zip(init.bbox.weights.iter()) {
            assert!((a - ratio * b).abs() <= 1e-12 * b.abs().max(1e-3));
        }
        assert!(out.net.bbox.bias.iter().all(|&b| b == 0.0));
        assert!(out.log.iter().all(|r| r.total == r.cls));
    }

    #[test]
    fn stage_wise_freezes_everything_but_the_box_head() {
        let data = tiny_data();
        let run = tiny_run(TrainMode::StageWise);
        let phase1 = train(
            &RunConfig {
                mode: TrainMode::ClsOnly,
                ..run.clone()
            },
            &data,
        )
        .unwrap();
        let before = phase1.net.clone();
        let out = train_box_head(&run, &data, phase1).unwrap();
        assert_eq!(out.net.trunk, before.trunk);
        assert_eq!(out.net.cls, before.cls);
        assert_ne!(out.net.bbox, before.bbox);
        assert_eq!(out.log.len(), 40);
        let full = train(&run, &data).unwrap();
        assert_eq!(full.net, out.net);
    }

    #[test]
    fn evaluation_runs_in_both_scale_modes() {
        let data = tiny_data();
        let out = train(&tiny_run(TrainMode::Multitask), &data).unwrap();
        let run = tiny_run(TrainMode::Multitask);
        for mode in [ScaleMode::Single, ScaleMode::Pyramid] {
            let scale = ScaleConfig {
                mode,
                ..ScaleConfig::default()
            };
            let r = evaluate(
                &out.net,
                &out.normalizer,
                &data,
                &scale,
                &run.detect_config(16.0, true),
            )
            .unwrap();
            assert!((0.0..=1.0).contains(&r.map));
        }
    }

    #[test]
    fn loss_log_format() {
        let log = [LossRecord {
            iter: 3,
            cls: 0.5,
            loc: 0.25,
            total: 0.75,
            lr: 0.001,
        }];
        assert_eq!(format_loss_log(&log), "3\t0.5\t0.25\t0.75\t0.001\n");
        assert_eq!(window_means(&log, 1), vec![0.75]);
    }
}
