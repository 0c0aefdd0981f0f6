//! JSON manifests and PPM images.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Partition, RgbImage, Scene, SplitSet};
use crate::boxes::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::semantics::{ClassPrototype, PrototypeTable};

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    h: usize,
    classes: Vec<ManifestClass>,
    scenes: Vec<ManifestScene>,
}

#[derive(Serialize, Deserialize)]
struct ManifestClass {
    id: u32,
    name: String,
    #[serde(default)]
    attributes: Option<Vec<f64>>,
    seen: bool,
}

#[derive(Serialize, Deserialize)]
struct ManifestScene {
    id: u64,
    file: String,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Partition>,
    objects: Vec<ManifestObject>,
}

#[derive(Serialize, Deserialize)]
struct ManifestObject {
    class_id: u32,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

fn bad(msg: String) -> Error {
    Error::Manifest(msg)
}

/// Writes `path` and one PPM per scene under `images/` beside it.
pub fn save_manifest(set: &SplitSet, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    fs::create_dir_all(dir.join("images"))?;
    let groups: [(Option<Partition>, &[Scene]); 5] = [
        (Some(Partition::Train), &set.train),
        (Some(Partition::TestSeen), &set.test_seen),
        (Some(Partition::TestUnseen), &set.test_unseen),
        (Some(Partition::TestMix), &set.test_mix),
        (None, &set.unassigned),
    ];
    let mut scenes = Vec::new();
    for (split, group) in groups {
        for scene in group {
            let file = format!("images/{:06}.ppm", scene.id);
            write_ppm(&dir.join(&file), &scene.image)?;
            scenes.push(ManifestScene {
                id: scene.id,
                file,
                width: scene.image.size,
                height: scene.image.size,
                split,
                objects: scene
                    .objects
                    .iter()
                    .map(|o| ManifestObject {
                        class_id: o.class_id,
                        x: o.bbox.x,
                        y: o.bbox.y,
                        w: o.bbox.w,
                        h: o.bbox.h,
                    })
                    .collect(),
            });
        }
    }
    let file = ManifestFile {
        h: set.classes.h,
        classes: set
            .classes
            .classes
            .iter()
            .map(|c| ManifestClass {
                id: c.id,
                name: c.name.clone(),
                attributes: Some(c.vector.clone()),
                seen: c.seen,
            })
            .collect(),
        scenes,
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Reads and validates a manifest and every image it references.
pub fn load_manifest(path: &Path) -> Result<SplitSet> {
    let text = fs::read_to_string(path)
        .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    let file: ManifestFile =
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or(Path::new("."));

    let mut classes = Vec::with_capacity(file.classes.len());
    for c in file.classes {
        let vector = c
            .attributes
            .ok_or_else(|| bad(format!("class {} ({}) has no attribute vector", c.id, c.name)))?;
        if vector.len() != file.h {
            return Err(bad(format!(
                "class {} ({}) has {} attributes, manifest declares h={}",
                c.id,
                c.name,
                vector.len(),
                file.h
            )));
        }
        classes.push(ClassPrototype {
            id: c.id,
            name: c.name,
            vector,
            seen: c.seen,
        });
    }
    let table = PrototypeTable::new(file.h, classes).map_err(|e| bad(format!("class table: {e}")))?;

    let mut set = SplitSet::unsplit(table, Vec::new());
    let mut ids = BTreeSet::new();
    for (i, s) in file.scenes.into_iter().enumerate() {
        let at = format!("scene {} (entry {i})", s.id);
        if !ids.insert(s.id) {
            return Err(bad(format!("{at}: duplicate scene id")));
        }
        if s.width != s.height || s.width == 0 {
            return Err(bad(format!("{at}: images must be square, got {}×{}", s.width, s.height)));
        }
        let image = read_ppm(&dir.join(&s.file)).map_err(|e| bad(format!("{at}: {e}")))?;
        if image.size != s.width {
            return Err(bad(format!(
                "{at}: image {} is {} pixels, manifest says {}",
                s.file, image.size, s.width
            )));
        }
        let n = s.width as f64;
        let mut objects = Vec::with_capacity(s.objects.len());
        for (j, o) in s.objects.into_iter().enumerate() {
            let class = set
                .classes
                .get(o.class_id)
                .ok_or_else(|| bad(format!("{at}, object {j}: unknown class id {}", o.class_id)))?;
            let b = BBox::new(o.x, o.y, o.w, o.h);
            let (x0, y0, x1, y1) = b.corners();
            let tol = 1e-9;
            if !(b.w > 0.0 && b.h > 0.0 && x0 >= -tol && y0 >= -tol && x1 <= n + tol && y1 <= n + tol) {
                return Err(bad(format!("{at}, object {j}: box {b:?} leaves the {n}-pixel image")));
            }
            objects.push(GroundTruth::new(b, o.class_id, class.vector.clone()));
        }
        let scene = Scene {
            id: s.id,
            image,
            objects,
        };
        match s.split {
            Some(Partition::Train) => set.train.push(scene),
            Some(Partition::TestSeen) => set.test_seen.push(scene),
            Some(Partition::TestUnseen) => set.test_unseen.push(scene),
            Some(Partition::TestMix) => set.test_mix.push(scene),
            None => set.unassigned.push(scene),
        }
    }
    Ok(set)
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P6\n{} {}\n255\n", image.size, image.size)?;
    f.write_all(&image.data)?;
    Ok(())
}

/// Reads a square binary PPM with maxval 255.
pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad(format!("{}: truncated PPM header", path.display())));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad(format!("{}: not a binary PPM (magic {:?})", path.display(), fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| bad(format!("{}: bad PPM header field {s:?}", path.display())))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w != h || maxval != 255 {
        return Err(bad(format!(
            "{}: need a square 8-bit PPM, got {w}×{h} maxval {maxval}",
            path.display()
        )));
    }
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != 3 * w * h {
        return Err(bad(format!(
            "{}: expected {} pixel bytes, found {}",
            path.display(),
            3 * w * h,
            data.len()
        )));
    }
    Ok(RgbImage {
        size: w,
        data: data.to_vec(),
    })
}
