//! Mini-batch SGD over a fixed sample set with a piecewise-constant
//! learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assign::NoobjRule;
use crate::boxes::GroundTruth;
use crate::error::{invalid, Error, Result};
use crate::head::{build_model, Model, ModelConfig};
use crate::loss::{loss_and_gradients, LossBreakdown, LossWeights};
use crate::optim::{sgd_step, OptimizerState};
use crate::par::Exec;
use crate::prototypes::PrototypeMode;
use crate::semantics::PrototypeTable;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl LrPhase {
    pub fn new(epochs: usize, learning_rate: f64) -> Self {
        Self { epochs, learning_rate }
    }
}

/// Warm up low, run high, then decay twice: 1 + 20 + 11 + 10 epochs.
pub fn desk_schedule() -> Vec<LrPhase> {
    vec![
        LrPhase::new(1, 1e-4),
        LrPhase::new(20, 1e-3),
        LrPhase::new(11, 1e-4),
        LrPhase::new(10, 1e-5),
    ]
}

/// The same shape at full length: 5 + 195 + 110 + 110 epochs.
pub fn full_schedule() -> Vec<LrPhase> {
    vec![
        LrPhase::new(5, 1e-4),
        LrPhase::new(195, 1e-3),
        LrPhase::new(110, 1e-4),
        LrPhase::new(110, 1e-5),
    ]
}

/// Without normalization layers the detector does not survive the high
/// learning-rate phase unclipped. Typical batch gradients have norm 5 to 20,
/// so this only catches spikes.
pub const DEFAULT_CLIP_NORM: f64 = 50.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_schedule: Vec<LrPhase>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub prototype_mode: PrototypeMode,
    pub noobj_rule: NoobjRule,
    /// Batch gradients whose global L2 norm exceeds this are rescaled to it.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        let lr_schedule = desk_schedule();
        Self {
            seed: model.seed,
            model,
            weights: LossWeights::default(),
            batch_size: 16,
            epochs: lr_schedule.iter().map(|p| p.epochs).sum(),
            lr_schedule,
            momentum: 0.9,
            weight_decay: 0.0005,
            prototype_mode: PrototypeMode::Attributes,
            noobj_rule: NoobjRule::default(),
            clip_norm: Some(DEFAULT_CLIP_NORM),
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<LrPhase>) -> Self {
        self.epochs = schedule.iter().map(|p| p.epochs).sum();
        self.lr_schedule = schedule;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(format!(
                "batch size and epochs must be positive, got {} and {}",
                self.batch_size, self.epochs
            )));
        }
        let spans: usize = self.lr_schedule.iter().map(|p| p.epochs).sum();
        if spans != self.epochs {
            return Err(Error::Config(format!(
                "learning-rate schedule covers {spans} epochs but {} were requested",
                self.epochs
            )));
        }
        if let Some(p) = self.lr_schedule.iter().find(|p| !(p.learning_rate > 0.0 && p.learning_rate.is_finite())) {
            return Err(Error::Config(format!("learning rates must be positive, got {}", p.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("gradient clip norm must be positive, got {c}")));
            }
        }
        OptimizerState::new(1.0, self.momentum, self.weight_decay).map(|_| ())
    }

    /// Learning rate for 1-based `epoch`; rates change only between epochs.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for p in &self.lr_schedule {
            end += p.epochs;
            if epoch <= end {
                return p.learning_rate;
            }
        }
        self.lr_schedule.last().map_or(0.0, |p| p.learning_rate)
    }
}

/// One training image with boxes in grid units.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub objects: Vec<GroundTruth>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean per-image loss over the epoch's batches.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the end of the epoch with the lowest mean loss.
    pub best: Model,
    pub best_epoch: usize,
    pub last: Model,
    pub history: Vec<EpochLog>,
}

/// Mean loss and mean per-parameter gradient over `batch`. Per-image work
/// runs under `exec`; the sums are taken in batch order.
pub fn batch_gradient(
    model: &Model,
    batch: &[&Sample],
    prototypes: &PrototypeTable,
    weights: &LossWeights,
    rule: NoobjRule,
    exec: Exec,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let per_image = exec.map(batch, |s| loss_and_gradients(&s.image, &s.objects, model, prototypes, weights, rule));
    let mut losses = Vec::with_capacity(batch.len());
    let mut sum: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
    for r in per_image {
        let (loss, grads) = r?;
        losses.push(loss);
        for (acc, g) in sum.iter_mut().zip(grads) {
            acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
        }
    }
    let n = batch.len().max(1) as f64;
    sum.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v /= n));
    Ok((LossBreakdown::mean(&losses), sum))
}

/// Scales all gradients by a common factor so their joint L2 norm is at
/// most `max_norm`.
pub fn clip_global_norm(mut grads: Vec<Vec<f64>>, max_norm: f64) -> Vec<Vec<f64>> {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    grads
}

pub fn train(config: &TrainConfig, samples: &[Sample], prototypes: &PrototypeTable, exec: Exec) -> Result<TrainOutcome> {
    train_with(config, samples, prototypes, exec, |_| {})
}

/// Trains a freshly initialized model, calling `on_epoch` after each epoch.
pub fn train_with(
    config: &TrainConfig,
    samples: &[Sample],
    prototypes: &PrototypeTable,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(invalid!("no training samples"));
    }
    if prototypes.h != config.model.h {
        return Err(Error::Config(format!(
            "prototype dimension {} does not match the model's semantic dimension {}",
            prototypes.h, config.model.h
        )));
    }
    let mut model = build_model(config.model.clone())?;
    model.params.iter_mut().for_each(|p| p.zero_grad());
    let mut opt = OptimizerState::new(config.learning_rate(1), config.momentum, config.weight_decay)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = (model.clone(), 0usize, f64::INFINITY);

    for epoch in 1..=config.epochs {
        opt.learning_rate = config.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::with_capacity(samples.len());
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (loss, grads) =
                match batch_gradient(&model, &batch, prototypes, &config.weights, config.noobj_rule, exec) {
                    Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch }),
                    r => r?,
                };
            if !loss.total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            let grads = match config.clip_norm {
                Some(c) => clip_global_norm(grads, c),
                None => grads,
            };
            for (p, g) in model.params.iter_mut().zip(grads) {
                p.set_grad(g)?;
            }
            sgd_step(&mut model.params, &mut opt)?;
            if model.params.iter().any(|p| !p.all_finite()) {
                return Err(Error::Diverged { epoch });
            }
            // Each image of the batch counts once in the epoch mean.
            epoch_losses.extend(std::iter::repeat(loss).take(batch.len()));
        }
        let log = EpochLog {
            epoch,
            learning_rate: opt.learning_rate,
            loss: LossBreakdown::mean(&epoch_losses),
        };
        on_epoch(&log);
        if log.loss.total < best.2 {
            best = (model.clone(), epoch, log.loss.total);
        }
        history.push(log);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        last: model,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::head::{GridSpec, LayerSpec};
    use crate::semantics::ClassPrototype;
    use rand::Rng;

    pub(crate) fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            grid: GridSpec::new(4, vec![(1.0, 1.0), (2.0, 1.5)], 16).unwrap(),
            h: 4,
            c_f: 6,
            backbone: vec![LayerSpec::new(4, 3, 2), LayerSpec::new(6, 3, 2)],
            ablation: Default::default(),
            seed,
        }
    }

    fn table() -> PrototypeTable {
        PrototypeTable::new(
            4,
            (0..3)
                .map(|i| ClassPrototype {
                    id: i,
                    name: format!("c{i}"),
                    vector: (0..4).map(|j| if j == i as usize { 1.0 } else { 0.2 }).collect(),
                    seen: true,
                })
                .collect(),
        )
        .unwrap()
    }

    fn samples(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let class = rng.gen_range(0..3u32);
                let b = BBox::new(rng.gen_range(0.8..3.2), rng.gen_range(0.8..3.2), 1.2, 1.2);
                let mut img = vec![0.2; 3 * 16 * 16];
                let (x0, y0, x1, y1) = b.scaled(4.0).corners();
                for r in 0..16 {
                    for c in 0..16 {
                        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
                        if x >= x0 && x < x1 && y >= y0 && y < y1 {
                            img[class as usize * 256 + r * 16 + c] = 0.9;
                        }
                    }
                }
                Sample {
                    image: Tensor::new(&[3, 16, 16], img).unwrap(),
                    objects: vec![GroundTruth::new(b, class, vec![])],
                }
            })
            .collect()
    }

    fn config(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            ..TrainConfig::new(tiny_config(seed))
        }
        .with_schedule(vec![LrPhase::new(1, 1e-3), LrPhase::new(7, 1e-2)])
    }

    #[test]
    fn default_schedule_shape() {
        let c = TrainConfig::new(tiny_config(0));
        assert_eq!(c.epochs, 42);
        assert_eq!(c.learning_rate(1), 1e-4);
        assert_eq!(c.learning_rate(2), 1e-3);
        assert_eq!(c.learning_rate(21), 1e-3);
        assert_eq!(c.learning_rate(22), 1e-4);
        assert_eq!(c.learning_rate(33), 1e-5);
        assert_eq!(full_schedule().iter().map(|p| p.epochs).sum::<usize>(), 420);
    }

    #[test]
    fn clipping_rescales_only_large_gradients() {
        let g = clip_global_norm(vec![vec![3.0], vec![4.0]], 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        assert_eq!(clip_global_norm(vec![vec![0.3, 0.4]], 1.0), vec![vec![0.3, 0.4]]);
    }

    #[test]
    fn inconsistent_epochs_rejected() {
        let mut c = TrainConfig::new(tiny_config(0));
        c.epochs = 10;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = TrainConfig::new(tiny_config(0));
        c.lr_schedule[1].learning_rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_goes_down() {
        let out = train(&config(1), &samples(24, 1), &table(), Exec::Sequential).unwrap();
        let first = out.history[0].loss.total;
        let last = out.history.last().unwrap().loss.total;
        assert!(last < first, "{first} -> {last}");
        assert_eq!(out.history.len(), 8);
        assert!(out.history[out.best_epoch - 1].loss.total <= last);
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        let data = samples(12, 2);
        let a = train(&config(2), &data, &table(), Exec::Sequential).unwrap();
        let b = train(&config(2), &data, &table(), Exec::Parallel).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.last.params, b.last.params);
    }

    #[test]
    fn batch_gradient_is_mean_of_images() {
        let data = samples(3, 3);
        let model = build_model(tiny_config(3)).unwrap();
        let w = LossWeights::default();
        let refs: Vec<&Sample> = data.iter().collect();
        let (loss, g) = batch_gradient(&model, &refs, &table(), &w, NoobjRule::CellRegion, Exec::Sequential).unwrap();
        let singles: Vec<_> = data
            .iter()
            .map(|s| loss_and_gradients(&s.image, &s.objects, &model, &table(), &w, NoobjRule::CellRegion).unwrap())
            .collect();
        let mean_total = singles.iter().map(|s| s.0.total).sum::<f64>() / 3.0;
        assert!((loss.total - mean_total).abs() < 1e-12);
        for (pi, gp) in g.iter().enumerate() {
            for (k, v) in gp.iter().enumerate() {
                let want = singles.iter().map(|s| s.1[pi][k]).sum::<f64>() / 3.0;
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let mut c = config(4).with_schedule(vec![LrPhase::new(6, 1e6)]);
        c.clip_norm = None;
        match train(&c, &samples(8, 4), &table(), Exec::Sequential) {
            Err(Error::Diverged { epoch }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
        }
    }

    #[test]
    fn prototype_dimension_checked() {
        let mut c = config(5);
        c.model.h = 4;
        let bad = PrototypeTable::new(
            2,
            vec![ClassPrototype {
                id: 0,
                name: "a".into(),
                vector: vec![1.0, 0.0],
                seen: true,
            }],
        )
        .unwrap();
        assert!(train(&c, &samples(2, 5), &bad, Exec::Sequential).is_err());
    }
}
