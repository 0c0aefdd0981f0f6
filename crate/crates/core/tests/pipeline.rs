use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zsdet::assign::{assign_indicators, NoobjRule};
use zsdet::boxes::{BBox, GroundTruth};
use zsdet::checkpoint::{decode_checkpoint, encode_checkpoint, CheckpointHeader};
use zsdet::experiment::{evaluate, fit_priors, samples_from, synthesize_split, EvalOptions, PoolSizes};
use zsdet::head::{build_model, decode_all, AblationMode, ModelConfig};
use zsdet::loss::{confidence_loss, loc_loss, semantic_loss, total_loss, LossWeights};
use zsdet::par::Exec;
use zsdet::scene::{default_library, load_manifest, save_manifest, ClassSplit, Partition, SceneConfig, SplitSet};
use zsdet::tensor::Tensor;
use zsdet::train::{train, LrPhase, TrainConfig};

fn small_split() -> SplitSet {
    let unseen: BTreeSet<u32> = [3, 9, 12].into_iter().collect();
    let split = ClassSplit {
        seen: (0..16).filter(|c| !unseen.contains(c)).collect(),
        unseen,
    };
    let sizes = PoolSizes {
        seen: 40,
        unseen: 10,
        mix: 6,
    };
    synthesize_split(4, &default_library(), &split, sizes, &SceneConfig::default(), Exec::default()).unwrap()
}

fn briefly_trained(data: &SplitSet) -> zsdet::head::Model {
    let s = 7;
    let priors = fit_priors(&data.train, s, 3, 1).unwrap();
    let config = TrainConfig::new(ModelConfig::desk(priors, 1).unwrap()).with_schedule(vec![
        LrPhase {
            epochs: 1,
            learning_rate: 1e-4,
        },
        LrPhase {
            epochs: 2,
            learning_rate: 1e-3,
        },
    ]);
    train(&config, &samples_from(&data.train, s), &data.classes, Exec::default())
        .unwrap()
        .best
}

#[test]
fn checkpoint_round_trip_keeps_metrics() {
    let data = small_split();
    let mut model = briefly_trained(&data);
    model.round_to_f32();
    let back = decode_checkpoint(&encode_checkpoint(&model, &CheckpointHeader::for_model(&model)).unwrap())
        .unwrap()
        .model;
    let opts = EvalOptions::default();
    for p in [Partition::TestSeen, Partition::TestUnseen, Partition::TestMix] {
        let scenes = data.partition(p);
        let a = evaluate(&model, scenes, &opts, Exec::default()).unwrap();
        let b = evaluate(&back, scenes, &opts, Exec::default()).unwrap();
        assert_eq!(a.to_csv(), b.to_csv(), "{}", p.name());
    }
}

#[test]
fn manifest_round_trip_keeps_metrics() {
    let data = small_split();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    save_manifest(&data, &path).unwrap();
    let loaded = load_manifest(&path).unwrap();
    assert_eq!(loaded.classes, data.classes);
    for p in [Partition::Train, Partition::TestSeen, Partition::TestUnseen, Partition::TestMix] {
        let (a, b) = (data.partition(p), loaded.partition(p));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((x.id, &x.image, &x.objects), (y.id, &y.image, &y.objects));
        }
    }

    let model = build_model(ModelConfig::desk(vec![(1.0, 1.0), (2.0, 2.0), (3.0, 1.5)], 2).unwrap()).unwrap();
    let opts = EvalOptions::default();
    let a = evaluate(&model, &data.test_mix, &opts, Exec::default()).unwrap();
    let b = evaluate(&model, &loaded.test_mix, &opts, Exec::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn parallel_and_sequential_evaluation_agree() {
    let data = small_split();
    let model = build_model(ModelConfig::desk(vec![(1.0, 1.0), (2.0, 2.0), (3.0, 1.5)], 5).unwrap()).unwrap();
    let opts = EvalOptions {
        nms_iou: None,
        ..EvalOptions::default()
    };
    let seq = evaluate(&model, &data.test_seen, &opts, Exec::Sequential).unwrap();
    let par = evaluate(&model, &data.test_seen, &opts, Exec::Parallel).unwrap();
    assert_eq!(seq.to_csv(), par.to_csv());
}

#[test]
fn total_loss_is_the_weighted_sum_of_its_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = small_split();
    for ablation in [AblationMode::Full, AblationMode::Semantic, AblationMode::Visual] {
        let model = build_model(
            ModelConfig::desk(vec![(1.0, 1.0), (2.0, 2.0), (3.0, 1.5)], rng.gen()).unwrap().with_ablation(ablation),
        )
        .unwrap();
        let image = Tensor::new(&[3, 112, 112], (0..3 * 112 * 112).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let gts: Vec<GroundTruth> = (0..2)
            .map(|i| {
                let bbox = BBox::new(rng.gen_range(0.5..6.5), rng.gen_range(0.5..6.5), 1.5, 2.0);
                GroundTruth::new(bbox, i, data.classes.vector(i).unwrap().to_vec())
            })
            .collect();
        let weights = LossWeights {
            lambda_loc: 0.7,
            lambda_attr: 1.3,
            lambda_conf: 2.0,
            ..LossWeights::default()
        };
        let got = total_loss(&image, &gts, &model, &data.classes, &weights, NoobjRule::CellRegion).unwrap();

        let out = model.forward(&image).unwrap();
        let grid = &model.config.grid;
        let mask = assign_indicators(&gts, &decode_all(out.t_l.data(), grid), grid, NoobjRule::CellRegion).unwrap();
        let loc = loc_loss(out.t_l.data(), grid, &gts, &mask).unwrap().value;
        let attr = semantic_loss(out.t_s.data(), model.config.h, &gts, &data.classes, &mask, &weights)
            .unwrap()
            .value;
        let conf = confidence_loss(out.t_c.data(), &mask, &weights).unwrap().value;
        let attr_weight = if ablation == AblationMode::Visual { 0.0 } else { 1.3 };
        let want = 0.7 * loc + attr_weight * attr + 2.0 * conf;
        assert!((got.total - want).abs() < 1e-12, "{ablation:?}: {} vs {want}", got.total);
    }
}
