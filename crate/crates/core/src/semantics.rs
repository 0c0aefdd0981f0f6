//! Semantic prototypes: construction, split energy, and nearest-neighbour
//! recognition by cosine similarity.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `a·b / (‖a‖‖b‖)`, defined as 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (dot, na, nb) = a
        .iter()
        .zip(b)
        .fold((0.0, 0.0, 0.0), |(d, x, y), (p, q)| (d + p * q, x + p * p, y + q * q));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Cosine similarity and its gradient with respect to `a`.
pub fn cosine_with_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, vec![0.0; a.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let s = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi / (na * nb) - s * ai / (na * na))
        .collect();
    (s, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub id: u32,
    pub name: String,
    #[serde(rename = "attributes")]
    pub vector: Vec<f64>,
    pub seen: bool,
}

/// Per-class semantic vectors with seen/unseen flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub h: usize,
    pub classes: Vec<ClassPrototype>,
}

impl PrototypeTable {
    pub fn new(h: usize, classes: Vec<ClassPrototype>) -> Result<Self> {
        let t = Self { h, classes };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for c in &self.classes {
            if c.vector.len() != self.h {
                return Err(invalid!(
                    "class {} ({}) has a {}-dim vector, table dimension is {}",
                    c.id,
                    c.name,
                    c.vector.len(),
                    self.h
                ));
            }
            if c.vector.iter().any(|v| !v.is_finite()) {
                return Err(invalid!("class {} ({}) has a non-finite entry", c.id, c.name));
            }
            if !ids.insert(c.id) {
                return Err(invalid!("duplicate class id {}", c.id));
            }
        }
        if !self.classes.iter().any(|c| c.seen) {
            return Err(invalid!("prototype table needs at least one seen class"));
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Option<&ClassPrototype> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn vector(&self, id: u32) -> Result<&[f64]> {
        self.get(id)
            .map(|c| c.vector.as_slice())
            .ok_or_else(|| invalid!("class id {id} is not in the prototype table"))
    }

    pub fn seen(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.classes.iter().filter(|c| c.seen)
    }

    pub fn unseen(&self) -> impl Iterator<Item = &ClassPrototype> {
        self.classes.iter().filter(|c| !c.seen)
    }

    /// Same vectors with the seen flag recomputed from `seen_ids`.
    pub fn with_seen(&self, seen_ids: &BTreeSet<u32>) -> Result<Self> {
        let mut t = self.clone();
        for c in &mut t.classes {
            c.seen = seen_ids.contains(&c.id);
        }
        t.validate()?;
        Ok(t)
    }

    /// Replaces the vectors while keeping ids, names and flags.
    pub fn with_vectors(&self, h: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.len() != self.classes.len() {
            return Err(invalid!(
                "{} vectors for {} classes",
                vectors.len(),
                self.classes.len()
            ));
        }
        let classes = self
            .classes
            .iter()
            .zip(vectors)
            .map(|(c, v)| ClassPrototype {
                vector: v,
                ..c.clone()
            })
            .collect();
        Self::new(h, classes)
    }
}

/// Instance-level attribute vectors for one class.
#[derive(Debug, Clone)]
pub struct ClassInstances {
    pub id: u32,
    pub name: String,
    pub seen: bool,
    pub instances: Vec<Vec<f64>>,
}

/// Class prototypes as the componentwise mean of instance attributes.
pub fn average_class_attributes(classes: &[ClassInstances]) -> Result<PrototypeTable> {
    let h = classes
        .iter()
        .find_map(|c| c.instances.first().map(Vec::len))
        .ok_or_else(|| invalid!("no attribute instances given"))?;
    let mut out = Vec::with_capacity(classes.len());
    for c in classes {
        if c.instances.is_empty() {
            return Err(invalid!("class {} ({}) has no instances", c.id, c.name));
        }
        let mut mean = vec![0.0; h];
        for inst in &c.instances {
            if inst.len() != h {
                return Err(invalid!(
                    "class {} has a {}-dim instance, expected {h}",
                    c.id,
                    inst.len()
                ));
            }
            mean.iter_mut().zip(inst).for_each(|(m, v)| *m += v);
        }
        let n = c.instances.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        out.push(ClassPrototype {
            id: c.id,
            name: c.name.clone(),
            vector: mean,
            seen: c.seen,
        });
    }
    PrototypeTable::new(h, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticMode {
    Onehot,
    Random,
}

/// One-hot or uniform-random prototypes over the classes of `base`.
pub fn synthetic_prototypes(
    mode: SyntheticMode,
    base: &PrototypeTable,
    h: usize,
    seed: u64,
) -> Result<PrototypeTable> {
    let n = base.classes.len();
    let vectors = match mode {
        SyntheticMode::Onehot => {
            if h != n {
                return Err(invalid!("one-hot prototypes need h == {n} classes, got h={h}"));
            }
            (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect()
        }
        SyntheticMode::Random => {
            if h == 0 {
                return Err(invalid!("prototype dimension must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n)
                .map(|_| (0..h).map(|_| rng.gen::<f64>()).collect())
                .collect()
        }
    };
    base.with_vectors(h, vectors)
}

/// Mean over unseen classes of the best cosine similarity to a seen class.
pub fn energy_score(table: &PrototypeTable) -> Result<f64> {
    let seen: Vec<_> = table.seen().collect();
    let unseen: Vec<_> = table.unseen().collect();
    if seen.is_empty() || unseen.is_empty() {
        return Err(invalid!(
            "energy score needs seen and unseen classes ({} seen, {} unseen)",
            seen.len(),
            unseen.len()
        ));
    }
    let total: f64 = unseen
        .iter()
        .map(|u| {
            seen.iter()
                .map(|s| cosine_similarity(&u.vector, &s.vector))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / unseen.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Restrict {
    #[default]
    All,
    Seen,
    Unseen,
}

impl FromStr for Restrict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Restrict::All),
            "seen" => Ok(Restrict::Seen),
            "unseen" => Ok(Restrict::Unseen),
            other => Err(invalid!("unknown class restriction {other:?}")),
        }
    }
}

impl fmt::Display for Restrict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Restrict::All => "all",
            Restrict::Seen => "seen",
            Restrict::Unseen => "unseen",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub class_id: u32,
    pub similarity: f64,
    /// The prediction had zero norm, so every class scored 0.
    pub degenerate: bool,
}

/// Nearest prototype by cosine similarity; ties go to the lowest class id.
pub fn nn_classify(prediction: &[f64], table: &PrototypeTable, restrict: Restrict) -> Result<Classification> {
    if prediction.len() != table.h {
        return Err(invalid!(
            "prediction has dimension {}, table has {}",
            prediction.len(),
            table.h
        ));
    }
    let mut eligible: Vec<_> = table
        .classes
        .iter()
        .filter(|c| match restrict {
            Restrict::All => true,
            Restrict::Seen => c.seen,
            Restrict::Unseen => !c.seen,
        })
        .collect();
    eligible.sort_by_key(|c| c.id);
    let first = eligible
        .first()
        .ok_or_else(|| invalid!("no {restrict} classes to classify against"))?;
    let degenerate = prediction.iter().all(|&v| v == 0.0);
    if degenerate {
        return Ok(Classification {
            class_id: first.id,
            similarity: 0.0,
            degenerate,
        });
    }
    let mut best = (first.id, f64::NEG_INFINITY);
    for c in eligible {
        let s = cosine_similarity(prediction, &c.vector);
        if s > best.1 {
            best = (c.id, s);
        }
    }
    Ok(Classification {
        class_id: best.0,
        similarity: best.1,
        degenerate,
    })
}
