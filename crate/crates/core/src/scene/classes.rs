//! The attributed shape classes.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::semantics::{ClassPrototype, PrototypeTable};

pub const ATTRIBUTE_NAMES: [&str; 8] = [
    "angular", "curved", "hollow", "elongated", "pointed", "red", "green", "blue",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Ring,
    Ellipse,
    OvalRing,
    Sun,
    Crescent,
    Square,
    Frame,
    Bar,
    Triangle,
    Star,
    Cross,
    Diamond,
    HollowTriangle,
    Pentagon,
    HollowBar,
}

impl ShapeKind {
    /// Long side over short side of the bounding box.
    pub fn aspect(self) -> f64 {
        match self {
            ShapeKind::Ellipse | ShapeKind::OvalRing | ShapeKind::Bar | ShapeKind::HollowBar => 2.4,
            ShapeKind::Cross | ShapeKind::Diamond => 1.7,
            _ => 1.0,
        }
    }

    fn shape_bits(self) -> &'static [usize] {
        use ShapeKind::*;
        match self {
            Circle => &[1],
            Ring => &[1, 2],
            Ellipse => &[1, 3],
            OvalRing => &[1, 2, 3],
            Sun | Crescent => &[1, 4],
            Square | Pentagon => &[0],
            Frame => &[0, 2],
            Bar | Cross => &[0, 3],
            Triangle | Star => &[0, 4],
            Diamond => &[0, 3, 4],
            HollowTriangle => &[0, 2, 4],
            HollowBar => &[0, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Hue {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Hue {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Hue::Red => [0.88, 0.16, 0.12],
            Hue::Green => [0.14, 0.78, 0.22],
            Hue::Blue => [0.16, 0.26, 0.90],
            Hue::Yellow => [0.92, 0.84, 0.14],
            Hue::Magenta => [0.84, 0.18, 0.80],
            Hue::Cyan => [0.14, 0.82, 0.86],
        }
    }

    fn color_bits(self) -> &'static [usize] {
        match self {
            Hue::Red => &[5],
            Hue::Green => &[6],
            Hue::Blue => &[7],
            Hue::Yellow => &[5, 6],
            Hue::Magenta => &[5, 7],
            Hue::Cyan => &[6, 7],
        }
    }
}

impl fmt::Display for Hue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializable");
        f.write_str(s.as_str().expect("string variant"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub class_id: u32,
    pub name: String,
    pub shape: ShapeKind,
    pub hue: Hue,
    /// Binary attribute vector over [`ATTRIBUTE_NAMES`].
    pub attributes: Vec<f64>,
}

impl ClassDef {
    pub fn new(class_id: u32, shape: ShapeKind, hue: Hue) -> Self {
        let mut attributes = vec![0.0; ATTRIBUTE_NAMES.len()];
        for &b in shape.shape_bits().iter().chain(hue.color_bits()) {
            attributes[b] = 1.0;
        }
        let shape_name = serde_json::to_value(shape).expect("serializable");
        let name = format!("{hue}_{}", shape_name.as_str().expect("string variant"));
        Self {
            class_id,
            name,
            shape,
            hue,
            attributes,
        }
    }
}

/// The sixteen built-in classes. Curved shapes come in green, cyan and blue
/// while most angular shapes are red, yellow or magenta, so seen/unseen
/// partitions range from strongly to weakly related.
pub fn default_library() -> Vec<ClassDef> {
    use Hue::*;
    use ShapeKind::*;
    [
        (Circle, Cyan),
        (Ring, Green),
        (Ellipse, Green),
        (OvalRing, Green),
        (Sun, Cyan),
        (Crescent, Blue),
        (Square, Yellow),
        (Frame, Blue),
        (Bar, Red),
        (Triangle, Magenta),
        (Star, Yellow),
        (Cross, Magenta),
        (Diamond, Red),
        (HollowTriangle, Yellow),
        (Pentagon, Red),
        (HollowBar, Magenta),
    ]
    .into_iter()
    .enumerate()
    .map(|(i, (s, h))| ClassDef::new(i as u32, s, h))
    .collect()
}

/// The first `n` library classes.
pub fn library(n: usize) -> Result<Vec<ClassDef>> {
    let all = default_library();
    if n == 0 || n > all.len() {
        return Err(invalid!("class count must be in 1..={}, got {n}", all.len()));
    }
    Ok(all.into_iter().take(n).collect())
}

pub fn validate_classes(classes: &[ClassDef]) -> Result<()> {
    let mut ids = BTreeSet::new();
    let mut vectors = BTreeSet::new();
    for c in classes {
        if !ids.insert(c.class_id) {
            return Err(invalid!("duplicate class id {}", c.class_id));
        }
        let key: Vec<u64> = c.attributes.iter().map(|v| v.to_bits()).collect();
        if !vectors.insert(key) {
            return Err(invalid!("class {} repeats another class's attributes", c.name));
        }
    }
    Ok(())
}

/// Attribute prototypes for `classes`, all flagged seen.
pub fn class_table(classes: &[ClassDef]) -> Result<PrototypeTable> {
    PrototypeTable::new(
        ATTRIBUTE_NAMES.len(),
        classes
            .iter()
            .map(|c| ClassPrototype {
                id: c.class_id,
                name: c.name.clone(),
                vector: c.attributes.clone(),
                seen: true,
            })
            .collect(),
    )
}
