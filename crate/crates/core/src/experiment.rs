//! End-to-end runs: synthesize a split, fit anchors, train, evaluate.

use serde::{Deserialize, Serialize};

use crate::anchors::fit_anchor_priors;
use crate::detect::{extract_detections, DEFAULT_NMS_IOU};
use crate::error::{invalid, Result};
use crate::head::{AblationMode, Model, ModelConfig};
use crate::metrics::{curves, recognition_report, Detection, EvalReport, FScoreForm, Matched, RecognitionReport, DEFAULT_MATCH_IOU};
use crate::par::Exec;
use crate::prototypes::{build_prototypes, synthetic_embeddings, PrototypeMode, PrototypeOptions};
use crate::scene::{
    build_splits, class_table, default_library, ClassDef, generate_scenes, ClassSplit, Partition, Scene, SceneConfig,
    SplitFractions, SplitSet,
};
use crate::semantics::{nn_classify, PrototypeTable, Restrict};
use crate::train::{train, LrPhase, Sample, TrainConfig, TrainOutcome};

/// Scene ids of the three generation pools start at these offsets.
const UNSEEN_POOL_OFFSET: u64 = 1 << 32;
const MIX_POOL_OFFSET: u64 = 2 << 32;

/// Scene counts drawn from the seen-only, unseen-only and full class pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSizes {
    pub seen: usize,
    pub unseen: usize,
    pub mix: usize,
}

/// Generates scenes from each pool of `library` and routes them into
/// partitions. With the default 0.7 train fraction, `seen` scenes yield
/// about `0.7·seen` training images.
pub fn synthesize_split(
    seed: u64,
    library: &[ClassDef],
    split: &ClassSplit,
    sizes: PoolSizes,
    scene: &SceneConfig,
    exec: Exec,
) -> Result<SplitSet> {
    let table = class_table(library)?;
    let pool = |ids: &std::collections::BTreeSet<u32>| -> Vec<_> {
        library.iter().filter(|c| ids.contains(&c.class_id)).cloned().collect()
    };
    let mut scenes = generate_scenes(seed, 0, sizes.seen, &pool(&split.seen), scene, exec)?;
    if sizes.unseen > 0 {
        scenes.extend(generate_scenes(seed, UNSEEN_POOL_OFFSET, sizes.unseen, &pool(&split.unseen), scene, exec)?);
    }
    if sizes.mix > 0 {
        scenes.extend(generate_scenes(seed, MIX_POOL_OFFSET, sizes.mix, library, scene, exec)?);
    }
    build_splits(scenes, &table, &split.seen, &split.unseen, SplitFractions { train: 0.7, seed })
}

pub fn samples_from(scenes: &[Scene], s: usize) -> Vec<Sample> {
    scenes
        .iter()
        .map(|sc| Sample {
            image: sc.image.to_tensor(),
            objects: sc.grid_objects(s),
        })
        .collect()
}

/// Anchor priors in grid units fitted to the boxes of `scenes`.
pub fn fit_priors(scenes: &[Scene], s: usize, count: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let extents: Vec<(f64, f64)> = scenes
        .iter()
        .flat_map(|sc| sc.grid_objects(s))
        .map(|o| (o.bbox.w, o.bbox.h))
        .collect();
    fit_anchor_priors(&extents, count, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub conf_floor: f64,
    /// IoU above which lower-scored boxes are suppressed; `None` disables
    /// suppression.
    pub nms_iou: Option<f64>,
    pub match_iou: f64,
    pub fscore_form: FScoreForm,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            conf_floor: 0.0,
            nms_iou: Some(DEFAULT_NMS_IOU),
            match_iou: DEFAULT_MATCH_IOU,
            fscore_form: FScoreForm::Half,
        }
    }
}

pub fn detect_scene(model: &Model, scene: &Scene, opts: &EvalOptions) -> Result<Vec<Detection>> {
    let out = model.forward(&scene.image.to_tensor())?;
    extract_detections(&out, &model.config.grid, opts.conf_floor, opts.nms_iou)
}

/// Detections for every scene, in scene order.
pub fn detect_all(model: &Model, scenes: &[Scene], opts: &EvalOptions, exec: Exec) -> Result<Vec<Vec<Detection>>> {
    exec.map(scenes, |sc| detect_scene(model, sc, opts)).into_iter().collect()
}

/// Class-agnostic report for detections against the scenes' boxes.
pub fn score_detections(detections: &[Vec<Detection>], scenes: &[Scene], s: usize, opts: &EvalOptions) -> EvalReport {
    let parts = detections.iter().zip(scenes).map(|(dets, sc)| {
        let gts: Vec<_> = sc.grid_objects(s).into_iter().map(|o| o.bbox).collect();
        let mut m = Matched::default();
        m.add_image(dets, &gts, opts.match_iou);
        m
    });
    curves(&Matched::merge(parts), opts.fscore_form)
}

pub fn evaluate(model: &Model, scenes: &[Scene], opts: &EvalOptions, exec: Exec) -> Result<EvalReport> {
    let dets = detect_all(model, scenes, opts, exec)?;
    Ok(score_detections(&dets, scenes, model.config.grid.s, opts))
}

/// Labels each detection with its nearest prototype and reports per-class AP.
pub fn recognize(
    detections: &[Vec<Detection>],
    scenes: &[Scene],
    s: usize,
    table: &PrototypeTable,
    restrict: Restrict,
    opts: &EvalOptions,
) -> Result<RecognitionReport> {
    let mut images = Vec::with_capacity(scenes.len());
    for (dets, sc) in detections.iter().zip(scenes) {
        let labelled = dets
            .iter()
            .map(|d| {
                let c = nn_classify(&d.semantic, table, restrict)?;
                Ok(Detection {
                    predicted_class: Some(c.class_id),
                    ..d.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        images.push((labelled, sc.grid_objects(s)));
    }
    recognition_report(&images, table, opts.match_iou)
}

/// Everything that defines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub seed: u64,
    pub split: ClassSplit,
    pub sizes: PoolSizes,
    pub scene: SceneConfig,
    pub ablation: AblationMode,
    pub prototypes: PrototypeOptions,
    pub anchors: usize,
    pub batch_size: usize,
    pub schedule: Vec<LrPhase>,
    pub clip_norm: Option<f64>,
}

impl RunSpec {
    pub fn new(seed: u64, split: ClassSplit, sizes: PoolSizes) -> Self {
        Self {
            seed,
            split,
            sizes,
            scene: SceneConfig::default(),
            ablation: AblationMode::Full,
            prototypes: PrototypeOptions::default(),
            anchors: 3,
            batch_size: 16,
            schedule: crate::train::desk_schedule(),
            clip_norm: Some(crate::train::DEFAULT_CLIP_NORM),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub data: SplitSet,
    pub prototypes: PrototypeTable,
    pub outcome: TrainOutcome,
    /// Reports of the best model on test_seen, test_unseen and test_mix.
    pub reports: Vec<(Partition, EvalReport)>,
}

impl RunResult {
    pub fn report(&self, p: Partition) -> Option<&EvalReport> {
        self.reports.iter().find(|(q, _)| *q == p).map(|(_, r)| r)
    }
}

/// Prototype table for `split` under `opts`, using synthetic embeddings for
/// `w2vR`.
pub fn prototypes_for(classes: &PrototypeTable, opts: &PrototypeOptions) -> Result<PrototypeTable> {
    let emb = match opts.mode {
        PrototypeMode::W2vR => Some(synthetic_embeddings(classes, 32, 0.1, opts.seed)?),
        _ => None,
    };
    Ok(build_prototypes(classes, opts, emb.as_ref())?.0)
}

pub fn run(spec: &RunSpec, exec: Exec) -> Result<RunResult> {
    let data = synthesize_split(spec.seed, &default_library(), &spec.split, spec.sizes, &spec.scene, exec)?;
    if data.train.is_empty() {
        return Err(invalid!("the split produced no training scenes"));
    }
    let prototypes = prototypes_for(&data.classes, &spec.prototypes)?;
    let probe = ModelConfig::desk(vec![(1.0, 1.0)], spec.seed)?;
    let s = probe.grid.s;
    let priors = fit_priors(&data.train, s, spec.anchors, spec.seed)?;
    let mut model = ModelConfig::desk(priors, spec.seed)?.with_ablation(spec.ablation);
    model.h = prototypes.h;
    let mut config = TrainConfig::new(model).with_schedule(spec.schedule.clone());
    config.batch_size = spec.batch_size;
    config.prototype_mode = spec.prototypes.mode;
    config.clip_norm = spec.clip_norm;
    let samples = samples_from(&data.train, s);
    let outcome = train(&config, &samples, &prototypes, exec)?;
    let opts = EvalOptions::default();
    let mut reports = Vec::new();
    for p in [Partition::TestSeen, Partition::TestUnseen, Partition::TestMix] {
        reports.push((p, evaluate(&outcome.best, data.partition(p), &opts, exec)?));
    }
    Ok(RunResult {
        data,
        prototypes,
        outcome,
        reports,
    })
}
