//! Synthetic attributed-shape scenes and seen/unseen splits.

mod classes;
mod manifest;
mod render;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use classes::{class_table, default_library, library, validate_classes, ClassDef, Hue, ShapeKind, ATTRIBUTE_NAMES};
pub use manifest::{load_manifest, read_ppm, save_manifest, write_ppm};
pub use render::{Placement, Stencil, SUPERSAMPLE};

use crate::boxes::{iou, BBox, GroundTruth};
use crate::error::{invalid, Result};
use crate::par::Exec;
use crate::semantics::{energy_score, PrototypeTable};
use crate::tensor::Tensor;
use render::Canvas;

/// Interleaved 8-bit RGB image, square.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub size: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// `3 × N × N` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.size * self.size;
        let mut out = vec![0.0; 3 * n];
        for p in 0..n {
            for ch in 0..3 {
                out[ch * n + p] = f64::from(self.data[3 * p + ch]) / 255.0;
            }
        }
        Tensor::new(&[3, self.size, self.size], out).expect("consistent image shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    TestSeen,
    TestUnseen,
    TestMix,
}

impl Partition {
    pub const ALL: [Partition; 4] = [
        Partition::Train,
        Partition::TestSeen,
        Partition::TestUnseen,
        Partition::TestMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::TestSeen => "test_seen",
            Partition::TestUnseen => "test_unseen",
            Partition::TestMix => "test_mix",
        }
    }
}

/// An image with its annotations. Boxes are in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub image: RgbImage,
    pub objects: Vec<GroundTruth>,
}

impl Scene {
    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.objects.iter().map(|o| o.class_id).collect()
    }

    /// Annotations in grid units for an `s × s` grid.
    pub fn grid_objects(&self, s: usize) -> Vec<GroundTruth> {
        to_grid(&self.objects, self.image.size, s)
    }
}

/// Converts pixel boxes to grid units. Centers that land exactly on a cell
/// boundary move up by 1e-6 so they sit strictly inside a cell.
pub fn to_grid(objects: &[GroundTruth], image_size: usize, s: usize) -> Vec<GroundTruth> {
    let k = s as f64 / image_size as f64;
    let nudge = |v: f64| if v.fract() == 0.0 { v + 1e-6 } else { v };
    objects
        .iter()
        .map(|o| {
            let b = o.bbox.scaled(k);
            GroundTruth {
                bbox: BBox::new(nudge(b.x), nudge(b.y), b.w, b.h),
                ..o.clone()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub max_objects: usize,
    /// Smallest square-root box area, pixels.
    pub min_box: f64,
    pub max_box: f64,
    pub overlap_cap: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 112,
            max_objects: 3,
            min_box: 16.0,
            max_box: 44.0,
            overlap_cap: 0.4,
            noise: 0.03,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.max_objects == 0 {
            return Err(invalid!("scene config needs image_size ≥ 8 and max_objects ≥ 1"));
        }
        if !(self.min_box > 0.0 && self.min_box <= self.max_box) {
            return Err(invalid!(
                "box size range [{}, {}] is empty",
                self.min_box,
                self.max_box
            ));
        }
        let longest = self.max_box * 2.4f64.sqrt();
        if longest > self.image_size as f64 {
            return Err(invalid!(
                "max_box {} does not fit a {}-pixel image",
                self.max_box,
                self.image_size
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) || !(0.0..0.5).contains(&self.noise) {
            return Err(invalid!("overlap_cap must be in [0,1] and noise in [0,0.5)"));
        }
        Ok(())
    }
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Renders one scene with 1 to `max_objects` shapes drawn from `pool`.
///
/// An object that cannot be placed within the overlap cap after 100
/// attempts is dropped; the first object always fits.
pub fn generate_scene(seed: u64, id: u64, pool: &[ClassDef], config: &SceneConfig) -> Result<Scene> {
    if pool.is_empty() {
        return Err(invalid!("class pool is empty"));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    let n = config.image_size as f64;
    let mut canvas = Canvas::textured(config.image_size, &mut rng);
    let count = rng.gen_range(1..=config.max_objects);
    let mut objects: Vec<GroundTruth> = Vec::new();
    for _ in 0..count {
        let class = &pool[rng.gen_range(0..pool.len())];
        let aspect = class.shape.aspect();
        for _ in 0..PLACEMENT_ATTEMPTS {
            let size = rng.gen_range(config.min_box..=config.max_box);
            let vertical = aspect > 1.0 && rng.gen_bool(0.5);
            let (long, short) = (size * aspect.sqrt(), size / aspect.sqrt());
            let (w, h) = if vertical { (short, long) } else { (long, short) };
            let x = rng.gen_range(w / 2.0..=n - w / 2.0);
            let y = rng.gen_range(h / 2.0..=n - h / 2.0);
            let bbox = BBox::new(x, y, w, h);
            let fits = objects.iter().all(|o| {
                let v = iou(&o.bbox, &bbox);
                v <= config.overlap_cap && (config.overlap_cap > 0.0 || o.bbox.intersection(&bbox) == 0.0)
            });
            if !fits {
                continue;
            }
            let stencil = Stencil::new(Placement {
                shape: class.shape,
                bbox,
                vertical,
            });
            let shade = rng.gen_range(0.85..1.1);
            let rgb = class.hue.rgb().map(|c| (c * shade).clamp(0.0, 1.0));
            canvas.paint(&stencil, rgb);
            objects.push(GroundTruth::new(bbox, class.class_id, class.attributes.clone()));
            break;
        }
    }
    let data = canvas.quantize(config.noise, &mut rng);
    Ok(Scene {
        id,
        image: RgbImage {
            size: config.image_size,
            data,
        },
        objects,
    })
}

/// Scenes `first_id..first_id + count`, each from its own random stream.
pub fn generate_scenes(
    seed: u64,
    first_id: u64,
    count: usize,
    pool: &[ClassDef],
    config: &SceneConfig,
    exec: Exec,
) -> Result<Vec<Scene>> {
    exec.map_range(count, |i| generate_scene(seed, first_id + i as u64, pool, config))
        .into_iter()
        .collect()
}

/// Train and test partitions of a scene collection.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    /// Class attribute table; `seen` marks the training classes.
    pub classes: PrototypeTable,
    pub train: Vec<Scene>,
    pub test_seen: Vec<Scene>,
    pub test_unseen: Vec<Scene>,
    pub test_mix: Vec<Scene>,
    /// Scenes not yet routed to a partition.
    pub unassigned: Vec<Scene>,
}

impl SplitSet {
    /// A collection whose scenes all await routing.
    pub fn unsplit(classes: PrototypeTable, scenes: Vec<Scene>) -> Self {
        Self {
            classes,
            train: Vec::new(),
            test_seen: Vec::new(),
            test_unseen: Vec::new(),
            test_mix: Vec::new(),
            unassigned: scenes,
        }
    }

    /// Every scene, partitions first and unassigned last.
    pub fn into_scenes(self) -> Vec<Scene> {
        let mut all = self.train;
        all.extend(self.test_seen);
        all.extend(self.test_unseen);
        all.extend(self.test_mix);
        all.extend(self.unassigned);
        all
    }

    pub fn partition(&self, p: Partition) -> &[Scene] {
        match p {
            Partition::Train => &self.train,
            Partition::TestSeen => &self.test_seen,
            Partition::TestUnseen => &self.test_unseen,
            Partition::TestMix => &self.test_mix,
        }
    }

    pub fn seen_ids(&self) -> BTreeSet<u32> {
        self.classes.seen().map(|c| c.id).collect()
    }

    pub fn unseen_ids(&self) -> BTreeSet<u32> {
        self.classes.unseen().map(|c| c.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    /// Share of seen-only scenes used for training.
    pub train: f64,
    pub seed: u64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, seed: 0 }
    }
}

/// Routes scenes by the classes they contain: seen-only scenes are shuffled
/// and divided between train and test-seen, unseen-only scenes go to
/// test-unseen, and the rest to test-mix. Scenes without objects are dropped.
pub fn build_splits(
    scenes: Vec<Scene>,
    classes: &PrototypeTable,
    seen: &BTreeSet<u32>,
    unseen: &BTreeSet<u32>,
    fractions: SplitFractions,
) -> Result<SplitSet> {
    if let Some(c) = seen.intersection(unseen).next() {
        return Err(invalid!("class {c} is both seen and unseen"));
    }
    if !(0.0..=1.0).contains(&fractions.train) {
        return Err(invalid!("train fraction must be in [0,1], got {}", fractions.train));
    }
    let known: BTreeSet<u32> = classes.classes.iter().map(|c| c.id).collect();
    if let Some(c) = seen.union(unseen).find(|c| !known.contains(c)) {
        return Err(invalid!("class {c} is not in the class table"));
    }
    let mut seen_only = Vec::new();
    let mut test_unseen = Vec::new();
    let mut test_mix = Vec::new();
    for scene in scenes {
        let ids = scene.class_ids();
        if ids.is_empty() {
            continue;
        }
        if let Some(c) = ids.iter().find(|c| !seen.contains(c) && !unseen.contains(c)) {
            return Err(invalid!("scene {} contains class {c}, which is neither seen nor unseen", scene.id));
        }
        let has_seen = ids.iter().any(|c| seen.contains(c));
        let has_unseen = ids.iter().any(|c| unseen.contains(c));
        match (has_seen, has_unseen) {
            (true, false) => seen_only.push(scene),
            (false, true) => test_unseen.push(scene),
            _ => test_mix.push(scene),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fractions.seed);
    seen_only.shuffle(&mut rng);
    let n_train = (fractions.train * seen_only.len() as f64).round() as usize;
    let test_seen = seen_only.split_off(n_train);
    Ok(SplitSet {
        classes: classes.with_seen(seen)?,
        train: seen_only,
        test_seen,
        test_unseen,
        test_mix,
        unassigned: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub seen: BTreeSet<u32>,
    pub unseen: BTreeSet<u32>,
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Candidate seen/unseen partitions with their energy score, highest first.
///
/// All partitions are scored when there are at most `candidates` of them;
/// otherwise `candidates` distinct partitions are sampled.
pub fn rank_splits_by_energy(
    table: &PrototypeTable,
    n_unseen: usize,
    candidates: usize,
    seed: u64,
) -> Result<Vec<(ClassSplit, f64)>> {
    let ids: Vec<u32> = table.classes.iter().map(|c| c.id).collect();
    let n = ids.len();
    if n_unseen == 0 || n_unseen >= n {
        return Err(invalid!("need 1 ≤ n_unseen < {n} classes, got {n_unseen}"));
    }
    let total = binomial(n, n_unseen);
    let subsets: Vec<Vec<usize>> = if total <= candidates as u128 {
        let mut all = Vec::new();
        let mut idx: Vec<usize> = (0..n_unseen).collect();
        loop {
            all.push(idx.clone());
            let Some(i) = (0..n_unseen).rev().find(|&i| idx[i] != i + n - n_unseen) else {
                break;
            };
            idx[i] += 1;
            for j in i + 1..n_unseen {
                idx[j] = idx[j - 1] + 1;
            }
        }
        all
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = BTreeSet::new();
        let mut order = Vec::new();
        let positions: Vec<usize> = (0..n).collect();
        while order.len() < candidates {
            let mut s: Vec<usize> = positions.choose_multiple(&mut rng, n_unseen).copied().collect();
            s.sort_unstable();
            if picked.insert(s.clone()) {
                order.push(s);
            }
        }
        order
    };
    let mut ranked = subsets
        .into_iter()
        .map(|s| {
            let unseen: BTreeSet<u32> = s.iter().map(|&i| ids[i]).collect();
            let seen: BTreeSet<u32> = ids.iter().copied().filter(|c| !unseen.contains(c)).collect();
            let e = energy_score(&table.with_seen(&seen)?)?;
            Ok((ClassSplit { seen, unseen }, e))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

/// The ranked split whose energy is closest to `target`; earlier entries
/// win ties.
pub fn split_near_energy(ranked: &[(ClassSplit, f64)], target: f64) -> Option<&(ClassSplit, f64)> {
    ranked
        .iter()
        .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
}
