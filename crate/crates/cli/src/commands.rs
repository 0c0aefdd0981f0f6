use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use zsdet::checkpoint::{check_grid, load_checkpoint, save_checkpoint, CheckpointHeader};
use zsdet::experiment::{
    detect_all, fit_priors, recognize, samples_from, score_detections, synthesize_split, EvalOptions, PoolSizes,
};
use zsdet::head::{AblationMode, ModelConfig};
use zsdet::metrics::{Detection, FScoreForm};
use zsdet::par::Exec;
use zsdet::prototypes::{build_prototypes, synthetic_embeddings, Embeddings, PrototypeMode, PrototypeOptions};
use zsdet::scene::{
    build_splits, class_table, generate_scenes, library, load_manifest, rank_splits_by_energy, read_ppm,
    save_manifest, split_near_energy, write_ppm, ClassSplit, Partition, RgbImage, Scene, SceneConfig, SplitFractions,
    SplitSet, ATTRIBUTE_NAMES,
};
use zsdet::semantics::{energy_score, nn_classify, PrototypeTable, Restrict};
use zsdet::train::{full_schedule, train_with, LrPhase, TrainConfig};
use zsdet::assign::NoobjRule;

use crate::overlay::outline_boxes;
use crate::{
    Ablation, EvalArgs, FScore, GenDataArgs, Noobj, PredictArgs, PrototypesArgs, ProtoMode, SplitArgs, SplitName,
    TrainArgs,
};

const DEFAULT_IMAGE: f64 = 112.0;
const CANDIDATE_SPLITS: usize = 10_000;

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn partition(name: SplitName) -> Partition {
    match name {
        SplitName::Seen => Partition::TestSeen,
        SplitName::Unseen => Partition::TestUnseen,
        SplitName::Mix => Partition::TestMix,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn load(path: &Path) -> Result<SplitSet> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn print_classes(table: &PrototypeTable) {
    println!("id  name                seen  {}", ATTRIBUTE_NAMES.join(" "));
    for c in &table.classes {
        let bits: Vec<String> = c.vector.iter().map(|v| format!("{v}")).collect();
        println!("{:<3} {:<19} {:<5} {}", c.id, c.name, c.seen, bits.join(" "));
    }
}

fn print_counts(set: &SplitSet) {
    println!(
        "train {}  test_seen {}  test_unseen {}  test_mix {}  unassigned {}",
        set.train.len(),
        set.test_seen.len(),
        set.test_unseen.len(),
        set.test_mix.len(),
        set.unassigned.len()
    );
}

fn complement(table: &PrototypeTable, unseen: &[u32]) -> Result<ClassSplit> {
    let ids: BTreeSet<u32> = table.classes.iter().map(|c| c.id).collect();
    let unseen: BTreeSet<u32> = unseen.iter().copied().collect();
    if let Some(c) = unseen.iter().find(|c| !ids.contains(c)) {
        bail!("unseen class {c} is not one of the {} classes", ids.len());
    }
    Ok(ClassSplit {
        seen: ids.difference(&unseen).copied().collect(),
        unseen,
    })
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    if a.scenes == 0 {
        bail!("--scenes must be at least 1");
    }
    let classes = library(a.classes)?;
    let scale = a.image_size as f64 / DEFAULT_IMAGE;
    let defaults = SceneConfig::default();
    let config = SceneConfig {
        image_size: a.image_size,
        max_objects: a.max_objects,
        min_box: defaults.min_box * scale,
        max_box: defaults.max_box * scale,
        ..defaults
    };
    config.validate()?;
    let table = class_table(&classes)?;
    let set = if a.unseen.is_empty() {
        let scenes = generate_scenes(a.seed, 0, a.scenes, &classes, &config, Exec::Parallel)?;
        SplitSet::unsplit(table, scenes)
    } else {
        let split = complement(&table, &a.unseen)?;
        let unseen = a.scenes * 15 / 100;
        let mix = a.scenes * 5 / 100;
        let sizes = PoolSizes {
            seen: a.scenes - unseen - mix,
            unseen,
            mix,
        };
        synthesize_split(a.seed, &classes, &split, sizes, &config, Exec::Parallel)?
    };
    let path = a.out.join("manifest.json");
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    save_manifest(&set, &path).with_context(|| format!("writing {}", path.display()))?;
    print_classes(&set.classes);
    print_counts(&set);
    println!("wrote {}", path.display());
    Ok(())
}

pub fn split(a: &SplitArgs) -> Result<()> {
    let set = load(&a.data)?;
    let table = set.classes.clone();
    let chosen = match a.energy {
        Some(target) => {
            let ranked = rank_splits_by_energy(&table, a.n_unseen, CANDIDATE_SPLITS, a.seed)?;
            split_near_energy(&ranked, target)
                .map(|(s, _)| s.clone())
                .context("no candidate split")?
        }
        None if a.unseen.is_empty() => bail!("give either --unseen or --energy"),
        None => complement(&table, &a.unseen)?,
    };
    let energy = energy_score(&table.with_seen(&chosen.seen)?)?;
    let fractions = SplitFractions {
        train: a.train_fraction,
        seed: a.seed,
    };
    let routed = build_splits(set.into_scenes(), &table, &chosen.seen, &chosen.unseen, fractions)?;
    save_manifest(&routed, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let unseen: Vec<String> = chosen.unseen.iter().map(u32::to_string).collect();
    println!("unseen classes {}  energy {energy:.4}", unseen.join(","));
    print_counts(&routed);
    Ok(())
}

fn prototype_mode(m: ProtoMode) -> PrototypeMode {
    match m {
        ProtoMode::Attributes => PrototypeMode::Attributes,
        ProtoMode::Onehot => PrototypeMode::Onehot,
        ProtoMode::Random => PrototypeMode::Random,
        ProtoMode::W2vR => PrototypeMode::W2vR,
    }
}

pub fn prototypes(a: &PrototypesArgs) -> Result<()> {
    let set = load(&a.data)?;
    let mode = prototype_mode(a.mode);
    let embeddings = match (&a.embeddings, a.synthetic_embeddings) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let e: Embeddings =
                serde_json::from_str(&text).with_context(|| format!("parsing embeddings {}", path.display()))?;
            Some(e)
        }
        (None, Some(dim)) => Some(synthetic_embeddings(&set.classes, dim, 0.1, a.seed)?),
        (None, None) => None,
    };
    if mode == PrototypeMode::W2vR && embeddings.is_none() {
        bail!("--mode w2vR needs --embeddings FILE or --synthetic-embeddings DIM");
    }
    let opts = PrototypeOptions {
        mode,
        random_dim: a.random_dim,
        seed: a.seed,
        target_dim: a.target_dim,
        ridge: a.ridge,
        normalize_embeddings: a.normalize_embeddings,
    };
    let (table, projection) = build_prototypes(&set.classes, &opts, embeddings.as_ref())?;
    let mut text = serde_json::to_string_pretty(&table)?;
    text.push('\n');
    write(&a.out, text)?;
    println!("{mode} prototypes: {} classes, dimension {}", table.classes.len(), table.h);
    if let Some(p) = projection {
        println!("fit_error {:.6e}", p.fit_error);
    }
    Ok(())
}

fn parse_schedule(items: &[String]) -> Result<Vec<LrPhase>> {
    items
        .iter()
        .map(|item| {
            let (epochs, rate) = item
                .split_once(':')
                .with_context(|| format!("schedule phase {item:?} is not of the form epochs:rate"))?;
            Ok(LrPhase {
                epochs: epochs.trim().parse().with_context(|| format!("bad epoch count in {item:?}"))?,
                learning_rate: rate.trim().parse().with_context(|| format!("bad learning rate in {item:?}"))?,
            })
        })
        .collect()
}

fn ablation(a: Ablation) -> AblationMode {
    match a {
        Ablation::Full => AblationMode::Full,
        Ablation::Visual => AblationMode::Visual,
        Ablation::Semantic => AblationMode::Semantic,
    }
}

fn read_table(path: &Path) -> Result<PrototypeTable> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let table: PrototypeTable =
        serde_json::from_str(&text).with_context(|| format!("parsing prototype table {}", path.display()))?;
    table.validate()?;
    Ok(table)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let data = load(&a.data)?;
    if data.train.is_empty() {
        bail!("{} has no training scenes; run `zsdet split` first", a.data.display());
    }
    let table = match &a.prototypes {
        Some(p) => read_table(p)?,
        None => data.classes.clone(),
    };
    let schedule = if a.long_schedule {
        full_schedule()
    } else if a.lr_schedule.is_empty() {
        zsdet::train::desk_schedule()
    } else {
        parse_schedule(&a.lr_schedule)?
    };
    let probe = ModelConfig::desk(vec![(1.0, 1.0)], a.seed)?;
    let (s, size) = (probe.grid.s, probe.grid.image_size);
    let got = data.train[0].image.size;
    if got != size {
        bail!("the desk model takes {size}×{size} images but the data has {got}×{got}");
    }
    let priors = fit_priors(&data.train, s, a.anchors, a.seed)?;
    let mut model = ModelConfig::desk(priors, a.seed)?.with_ablation(ablation(a.ablation));
    model.h = table.h;
    let mut config = TrainConfig::new(model).with_schedule(schedule);
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    config.batch_size = a.batch_size;
    config.seed = a.seed;
    config.clip_norm = (!a.no_clip).then_some(a.clip_norm);
    config.noobj_rule = match a.noobj {
        Noobj::CellRegion => NoobjRule::CellRegion,
        Noobj::PredictedBox => NoobjRule::PredictedBox,
    };
    config.validate()?;

    let samples = samples_from(&data.train, s);
    eprintln!("training on {} images for {} epochs", samples.len(), config.epochs);
    let outcome = train_with(&config, &samples, &table, exec(a.sequential), |log| {
        eprintln!(
            "epoch {:>3}  lr {:.0e}  loc {:.4}  attr {:.4}  conf {:.4}  total {:.4}",
            log.epoch, log.learning_rate, log.loss.loc, log.loss.attr, log.loss.conf, log.loss.total
        );
    })?;

    let mut header = CheckpointHeader::for_model(&outcome.best);
    header.train = Some(config);
    header.epoch = outcome.best_epoch;
    header.loss_history = outcome.history.clone();
    header.prototypes = Some(table);
    save_checkpoint(&a.out, &outcome.best, &header).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(path) = &a.log {
        let mut csv = String::from("epoch,learning_rate,loc,attr,conf,total\n");
        for l in &outcome.history {
            let b = &l.loss;
            writeln!(csv, "{},{},{},{},{},{}", l.epoch, l.learning_rate, b.loc, b.attr, b.conf, b.total)?;
        }
        write(path, csv)?;
    }
    println!(
        "best epoch {} (total loss {:.4}); wrote {}",
        outcome.best_epoch,
        outcome.history[outcome.best_epoch - 1].loss.total,
        a.out.display()
    );
    Ok(())
}

fn oracle_detections(scene: &Scene, s: usize) -> Vec<Detection> {
    scene
        .grid_objects(s)
        .into_iter()
        .map(|gt| Detection {
            semantic: gt.attributes,
            ..Detection::new(gt.bbox, 1.0)
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let data = load(&a.data)?;
    let opts = EvalOptions {
        conf_floor: a.conf_floor,
        nms_iou: (!a.no_nms).then_some(a.nms_iou),
        match_iou: a.match_iou,
        fscore_form: match a.fscore {
            FScore::Half => FScoreForm::Half,
            FScore::Conventional => FScoreForm::Conventional,
        },
    };
    let checkpoint = match (&a.checkpoint, a.oracle_gt) {
        (_, true) => None,
        (Some(path), false) => {
            let c = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            let size = data
                .train
                .iter()
                .chain(&data.test_seen)
                .chain(&data.test_unseen)
                .chain(&data.test_mix)
                .next()
                .map_or(c.header.model.grid.image_size, |sc| sc.image.size);
            check_grid(&c.header, a.grid, size)?;
            Some(c)
        }
        (None, false) => bail!("--checkpoint is required unless --oracle-gt is set"),
    };
    let table = checkpoint
        .as_ref()
        .and_then(|c| c.header.prototypes.clone())
        .unwrap_or_else(|| data.classes.clone());

    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for &name in &a.split {
        let p = partition(name);
        let scenes = data.partition(p);
        let dets = match &checkpoint {
            Some(c) => detect_all(&c.model, scenes, &opts, exec(a.sequential))?,
            None => scenes.iter().map(|sc| oracle_detections(sc, a.grid)).collect(),
        };
        let report = score_detections(&dets, scenes, a.grid, &opts);
        let stem = p.name();
        write(&a.out.join(format!("{stem}_metrics.csv")), report.to_csv())?;
        write(&a.out.join(format!("{stem}_pr.csv")), report.pr_csv())?;
        write(&a.out.join(format!("{stem}_recall.csv")), report.recall_csv())?;
        println!(
            "{stem:<12} scenes {:>5}  AP {:.4}  avg F {:.4}  recall@0.8 {:.4}",
            scenes.len(),
            report.ap,
            report.avg_fscore,
            report.recall_at(0.8)
        );
        if a.recognize {
            let rec = recognize(&dets, scenes, a.grid, &table, Restrict::All, &opts)?;
            write(&a.out.join(format!("{stem}_recognition.csv")), rec.to_csv())?;
            println!(
                "{stem:<12} recognition mean AP seen {:.4} unseen {:.4}",
                rec.seen_mean.unwrap_or(f64::NAN),
                rec.unseen_mean.unwrap_or(f64::NAN)
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct PredictedObject {
    #[serde(skip_serializing_if = "Option::is_none")]
    class_id: Option<u32>,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    confidence: f64,
    semantic: Vec<f64>,
}

#[derive(Serialize)]
struct PredictedScene {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    file: String,
    objects: Vec<PredictedObject>,
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let c = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let grid = &c.model.config.grid;
    let opts = EvalOptions {
        conf_floor: a.conf_floor,
        nms_iou: (!a.no_nms).then_some(a.nms_iou),
        ..EvalOptions::default()
    };
    let inputs: Vec<(Option<u64>, String, RgbImage)> = match (&a.image, &a.data) {
        (Some(path), _) => {
            let img = read_ppm(path).with_context(|| format!("reading {}", path.display()))?;
            vec![(None, path.display().to_string(), img)]
        }
        (None, Some(data)) => load(data)?
            .partition(partition(a.split))
            .iter()
            .map(|sc| (Some(sc.id), format!("images/{:06}.ppm", sc.id), sc.image.clone()))
            .collect(),
        (None, None) => bail!("give --data or --image"),
    };
    if let Some((_, _, img)) = inputs.first() {
        check_grid(&c.header, grid.s, img.size)?;
    }
    let scale = grid.cell_pixels();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, (id, file, img)) in inputs.iter().enumerate() {
        let outputs = c.model.forward(&img.to_tensor())?;
        let dets = zsdet::detect::extract_detections(&outputs, grid, opts.conf_floor, opts.nms_iou)?;
        if i == 0 {
            if let Some(path) = &a.overlay {
                let boxes: Vec<_> = dets.iter().map(|d| d.bbox.scaled(scale)).collect();
                write_ppm(path, &outline_boxes(img, &boxes))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        let objects = dets
            .into_iter()
            .map(|d| {
                let class_id = match &c.header.prototypes {
                    Some(t) if !d.semantic.is_empty() => Some(nn_classify(&d.semantic, t, Restrict::All)?.class_id),
                    _ => None,
                };
                let b = d.bbox.scaled(scale);
                Ok(PredictedObject {
                    class_id,
                    x: b.x,
                    y: b.y,
                    w: b.w,
                    h: b.h,
                    confidence: d.confidence,
                    semantic: d.semantic,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(PredictedScene {
            id: *id,
            file: file.clone(),
            objects,
        });
    }
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    write(&a.out, text)?;
    let total: usize = out.iter().map(|s| s.objects.len()).sum();
    println!("{total} detections in {} images; wrote {}", out.len(), a.out.display());
    Ok(())
}
