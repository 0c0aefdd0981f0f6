//! Anchor priors by k-means over box extents with a `1 − IoU` distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

const MAX_ITERATIONS: usize = 100;

/// IoU of two boxes sharing a center.
pub fn centered_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    inter / (a.0 * a.1 + b.0 * b.1 - inter)
}

fn nearest(extent: (f64, f64), priors: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (i, &p) in priors.iter().enumerate() {
        let v = centered_iou(extent, p);
        if v > best_iou {
            best_iou = v;
            best = i;
        }
    }
    best
}

/// Fits `count` priors to the `(w, h)` extents of training boxes.
///
/// Seeding is k-means++ under the IoU distance, so duplicate extents are
/// never picked twice while distinct ones remain. Output is sorted by area.
pub fn fit_anchor_priors(extents: &[(f64, f64)], count: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if count == 0 {
        return Err(invalid!("need at least one anchor"));
    }
    if extents.len() < count {
        return Err(invalid!(
            "{} boxes cannot seed {} anchor clusters",
            extents.len(),
            count
        ));
    }
    if extents.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
        return Err(invalid!("box extents must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut priors = vec![extents[rng.gen_range(0..extents.len())]];
    while priors.len() < count {
        let d2: Vec<f64> = extents
            .iter()
            .map(|&e| {
                let d = 1.0 - centered_iou(e, priors[nearest(e, &priors)]);
                d * d
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.gen_range(0..extents.len())
        };
        priors.push(extents[pick]);
    }

    let mut assignment = vec![usize::MAX; extents.len()];
    for _ in 0..MAX_ITERATIONS {
        let next: Vec<usize> = extents.iter().map(|&e| nearest(e, &priors)).collect();
        if next == assignment {
            break;
        }
        assignment = next;
        for (c, prior) in priors.iter_mut().enumerate() {
            let (mut sw, mut sh, mut n) = (0.0, 0.0, 0usize);
            for (e, &a) in extents.iter().zip(&assignment) {
                if a == c {
                    sw += e.0;
                    sh += e.1;
                    n += 1;
                }
            }
            if n > 0 {
                *prior = (sw / n as f64, sh / n as f64);
            }
        }
    }
    priors.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(priors)
}

/// Mean over boxes of the best IoU against any prior.
pub fn mean_best_iou(extents: &[(f64, f64)], priors: &[(f64, f64)]) -> f64 {
    let total: f64 = extents
        .iter()
        .map(|&e| {
            priors
                .iter()
                .map(|&p| centered_iou(e, p))
                .fold(0.0, f64::max)
        })
        .sum();
    total / extents.len() as f64
}
