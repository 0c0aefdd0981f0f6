//! Building the semantic target table in one of four flavours.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::projection::{learn_projection, Projection, DEFAULT_RIDGE};
use crate::semantics::{synthetic_prototypes, PrototypeTable, SyntheticMode};

/// Seed for random prototypes when none is given, so that tables built by
/// different runs agree.
pub const DEFAULT_RANDOM_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PrototypeMode {
    #[default]
    #[serde(rename = "attributes")]
    Attributes,
    #[serde(rename = "onehot")]
    Onehot,
    #[serde(rename = "random")]
    Random,
    /// Word embeddings mapped into a reduced space whose inner products
    /// imitate those of the attribute vectors.
    #[serde(rename = "w2vR")]
    W2vR,
}

impl fmt::Display for PrototypeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrototypeMode::Attributes => "attributes",
            PrototypeMode::Onehot => "onehot",
            PrototypeMode::Random => "random",
            PrototypeMode::W2vR => "w2vR",
        })
    }
}

impl FromStr for PrototypeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attributes" => Ok(PrototypeMode::Attributes),
            "onehot" => Ok(PrototypeMode::Onehot),
            "random" => Ok(PrototypeMode::Random),
            "w2vR" | "w2vr" => Ok(PrototypeMode::W2vR),
            other => Err(invalid!(
                "unknown prototype mode {other:?} (expected attributes, onehot, random or w2vR)"
            )),
        }
    }
}

/// One embedding vector per class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    pub dim: usize,
    pub classes: Vec<ClassEmbedding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEmbedding {
    pub id: u32,
    pub vector: Vec<f64>,
}

impl Embeddings {
    pub fn validate(&self) -> Result<()> {
        for c in &self.classes {
            if c.vector.len() != self.dim {
                return Err(invalid!(
                    "embedding for class {} has dimension {}, expected {}",
                    c.id,
                    c.vector.len(),
                    self.dim
                ));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: u32) -> Result<&[f64]> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.vector.as_slice())
            .ok_or_else(|| invalid!("no embedding for class {id}"))
    }
}

/// Stand-in word vectors: a fixed random linear lift of the attribute
/// vectors plus Gaussian noise.
pub fn synthetic_embeddings(attributes: &PrototypeTable, dim: usize, noise: f64, seed: u64) -> Result<Embeddings> {
    if dim == 0 {
        return Err(invalid!("embedding dimension must be positive"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(invalid!("noise must be a finite nonnegative number, got {noise}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let lift: Vec<f64> = (0..attributes.h * dim).map(|_| unit.sample(&mut rng)).collect();
    let classes = attributes
        .classes
        .iter()
        .map(|c| {
            let vector = (0..dim)
                .map(|j| {
                    let clean: f64 = c.vector.iter().enumerate().map(|(i, a)| a * lift[i * dim + j]).sum();
                    clean + noise * unit.sample(&mut rng)
                })
                .collect();
            ClassEmbedding { id: c.id, vector }
        })
        .collect();
    Ok(Embeddings { dim, classes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeOptions {
    pub mode: PrototypeMode,
    /// Dimension of random prototypes; the attribute dimension when unset.
    pub random_dim: Option<usize>,
    pub seed: u64,
    /// Reduced dimension for `w2vR`.
    pub target_dim: usize,
    pub ridge: f64,
    pub normalize_embeddings: bool,
}

impl Default for PrototypeOptions {
    fn default() -> Self {
        Self {
            mode: PrototypeMode::Attributes,
            random_dim: None,
            seed: DEFAULT_RANDOM_SEED,
            target_dim: 8,
            ridge: DEFAULT_RIDGE,
            normalize_embeddings: false,
        }
    }
}

/// Builds the prototype table for `opts.mode` from the attribute table.
///
/// For `w2vR` the projection is fitted on the seen classes only and then
/// applied to every class; it is returned alongside the table.
pub fn build_prototypes(
    attributes: &PrototypeTable,
    opts: &PrototypeOptions,
    embeddings: Option<&Embeddings>,
) -> Result<(PrototypeTable, Option<Projection>)> {
    match opts.mode {
        PrototypeMode::Attributes => Ok((attributes.clone(), None)),
        PrototypeMode::Onehot => {
            let n = attributes.classes.len();
            Ok((synthetic_prototypes(SyntheticMode::Onehot, attributes, n, opts.seed)?, None))
        }
        PrototypeMode::Random => {
            let h = opts.random_dim.unwrap_or(attributes.h);
            Ok((synthetic_prototypes(SyntheticMode::Random, attributes, h, opts.seed)?, None))
        }
        PrototypeMode::W2vR => {
            let emb = embeddings.ok_or_else(|| invalid!("w2vR prototypes need source word embeddings"))?;
            emb.validate()?;
            let (mut y, mut w) = (Vec::new(), Vec::new());
            for c in attributes.seen() {
                y.push(c.vector.clone());
                w.push(emb.get(c.id)?.to_vec());
            }
            let p = learn_projection(&y, &w, opts.target_dim, opts.ridge, opts.normalize_embeddings)?;
            let vectors = attributes
                .classes
                .iter()
                .map(|c| p.project(emb.get(c.id)?))
                .collect::<Result<Vec<_>>>()?;
            Ok((attributes.with_vectors(opts.target_dim, vectors)?, Some(p)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{class_table, default_library};
    use std::collections::BTreeSet;

    fn attrs() -> PrototypeTable {
        let seen: BTreeSet<u32> = (0..10).collect();
        class_table(&default_library()).unwrap().with_seen(&seen).unwrap()
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [PrototypeMode::Attributes, PrototypeMode::Onehot, PrototypeMode::Random, PrototypeMode::W2vR] {
            assert_eq!(m.to_string().parse::<PrototypeMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{m}\""));
        }
        assert!("glove".parse::<PrototypeMode>().is_err());
    }

    #[test]
    fn onehot_is_identity() {
        let opts = PrototypeOptions {
            mode: PrototypeMode::Onehot,
            ..Default::default()
        };
        let (t, _) = build_prototypes(&attrs(), &opts, None).unwrap();
        assert_eq!(t.h, 16);
        for (i, c) in t.classes.iter().enumerate() {
            for (j, v) in c.vector.iter().enumerate() {
                assert_eq!(*v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn random_is_seeded() {
        let opts = PrototypeOptions {
            mode: PrototypeMode::Random,
            seed: 3,
            ..Default::default()
        };
        let a = build_prototypes(&attrs(), &opts, None).unwrap().0;
        let b = build_prototypes(&attrs(), &opts, None).unwrap().0;
        assert_eq!(a, b);
        assert_eq!(a.h, 8);
        assert_ne!(a, attrs());
    }

    #[test]
    fn w2vr_requires_embeddings() {
        let opts = PrototypeOptions {
            mode: PrototypeMode::W2vR,
            ..Default::default()
        };
        assert!(build_prototypes(&attrs(), &opts, None).is_err());
    }

    #[test]
    fn w2vr_fit_error_shrinks_with_dimension() {
        let a = attrs();
        let emb = synthetic_embeddings(&a, 32, 0.1, 1).unwrap();
        let fit = |d| {
            let opts = PrototypeOptions {
                mode: PrototypeMode::W2vR,
                target_dim: d,
                ..Default::default()
            };
            let (t, p) = build_prototypes(&a, &opts, Some(&emb)).unwrap();
            assert_eq!(t.h, d);
            p.unwrap().fit_error
        };
        assert!(fit(6) <= fit(4));
    }

    #[test]
    fn noiseless_embeddings_recover_attribute_geometry() {
        let a = attrs();
        let emb = synthetic_embeddings(&a, 32, 0.0, 2).unwrap();
        let opts = PrototypeOptions {
            mode: PrototypeMode::W2vR,
            target_dim: 8,
            ..Default::default()
        };
        let (t, _) = build_prototypes(&a, &opts, Some(&emb)).unwrap();
        // The lift is injective, so inner products carry over to unseen
        // classes as well.
        for ci in &t.classes {
            for cj in &t.classes {
                let got: f64 = ci.vector.iter().zip(&cj.vector).map(|(x, y)| x * y).sum();
                let want: f64 = a.vector(ci.id).unwrap().iter().zip(a.vector(cj.id).unwrap()).map(|(x, y)| x * y).sum();
                assert!((got - want).abs() < 1e-5, "{} {}: {got} vs {want}", ci.id, cj.id);
            }
        }
    }
}
