//! The detector network: a strided convolutional feature extractor followed
//! by 1×1 localization, semantic and fused-confidence branches.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::boxes::{decode_box, BBox, Offsets};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Output grid geometry: `s × s` cells with `anchors` priors each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub s: usize,
    pub anchors: usize,
    /// Prior extents `(p_w, p_h)` in grid units, one per anchor.
    pub priors: Vec<(f64, f64)>,
    pub image_size: usize,
}

impl GridSpec {
    pub fn new(s: usize, priors: Vec<(f64, f64)>, image_size: usize) -> Result<Self> {
        let g = Self {
            s,
            anchors: priors.len(),
            priors,
            image_size,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.s == 0 || self.anchors == 0 {
            return Err(Error::Config(format!(
                "grid needs S ≥ 1 and A ≥ 1, got S={} A={}",
                self.s, self.anchors
            )));
        }
        if self.priors.len() != self.anchors {
            return Err(Error::Config(format!(
                "{} anchor priors given for A={}",
                self.priors.len(),
                self.anchors
            )));
        }
        if self.priors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
            return Err(Error::Config("anchor priors must be strictly positive".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn num_predictions(&self) -> usize {
        self.s * self.s * self.anchors
    }

    /// Pixels per grid unit.
    pub fn cell_pixels(&self) -> f64 {
        self.image_size as f64 / self.s as f64
    }

    pub fn index(&self, cx: usize, cy: usize, a: usize) -> usize {
        (cy * self.s + cx) * self.anchors + a
    }

    /// `(cx, cy, a)` of a flat prediction index.
    pub fn locate(&self, k: usize) -> (usize, usize, usize) {
        let a = k % self.anchors;
        let cell = k / self.anchors;
        (cell % self.s, cell / self.s, a)
    }

    /// The cell whose half-open square contains `(x, y)`; a coordinate on a
    /// boundary goes to the lower-index cell.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let pick = |v: f64| -> usize {
            let f = v.floor();
            let c = if v == f && v > 0.0 { f - 1.0 } else { f };
            (c.max(0.0) as usize).min(self.s - 1)
        };
        (pick(x), pick(y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// Confidence from features, offsets and semantic predictions.
    #[default]
    Full,
    /// Confidence from features and offsets; the semantic task is not trained.
    Visual,
    /// Confidence from offsets and semantic predictions only.
    Semantic,
}

impl AblationMode {
    pub fn uses_features(self) -> bool {
        !matches!(self, AblationMode::Semantic)
    }

    pub fn uses_semantics(self) -> bool {
        !matches!(self, AblationMode::Visual)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationMode::Full => "full",
            AblationMode::Visual => "visual",
            AblationMode::Semantic => "semantic",
        })
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AblationMode::Full),
            "visual" => Ok(AblationMode::Visual),
            "semantic" => Ok(AblationMode::Semantic),
            other => Err(Error::Config(format!(
                "unknown ablation mode {other:?} (expected full, visual or semantic)"
            ))),
        }
    }
}

/// One feature-extractor convolution (square kernel, "same"-style padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_channels,
            kernel,
            stride,
        }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    fn output_extent(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad();
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: GridSpec,
    /// Semantic dimension.
    pub h: usize,
    /// Feature channels of `T_F`.
    pub c_f: usize,
    pub backbone: Vec<LayerSpec>,
    pub ablation: AblationMode,
    pub seed: u64,
}

impl ModelConfig {
    /// 112×112 input, 7×7×3 grid, 8-dim semantics, 64 feature channels.
    pub fn desk(priors: Vec<(f64, f64)>, seed: u64) -> Result<Self> {
        let cfg = Self {
            grid: GridSpec::new(7, priors, 112)?,
            h: 8,
            c_f: 64,
            backbone: vec![
                LayerSpec::new(8, 3, 2),
                LayerSpec::new(16, 3, 2),
                LayerSpec::new(32, 3, 2),
                LayerSpec::new(64, 3, 2),
                LayerSpec::new(64, 3, 1),
            ],
            ablation: AblationMode::Full,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Head shapes of the full-size detector (13×13 grid, 5 anchors, 64-dim
    /// semantics) on a light 416×416 extractor.
    pub fn full_shape(seed: u64) -> Result<Self> {
        let priors = vec![(1.0, 1.0), (2.0, 3.0), (3.0, 2.0), (4.0, 4.0), (6.0, 6.0)];
        let cfg = Self {
            grid: GridSpec::new(13, priors, 416)?,
            h: 64,
            c_f: 16,
            backbone: vec![
                LayerSpec::new(4, 3, 2),
                LayerSpec::new(8, 3, 2),
                LayerSpec::new(8, 3, 2),
                LayerSpec::new(16, 3, 2),
                LayerSpec::new(16, 3, 2),
            ],
            ablation: AblationMode::Full,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_ablation(mut self, ablation: AblationMode) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.h == 0 || self.c_f == 0 {
            return Err(Error::Config("semantic dimension and C_F must be positive".into()));
        }
        let last = self
            .backbone
            .last()
            .ok_or_else(|| Error::Config("feature extractor needs at least one layer".into()))?;
        if last.out_channels != self.c_f {
            return Err(Error::Config(format!(
                "last feature layer emits {} channels but C_F={}",
                last.out_channels, self.c_f
            )));
        }
        let mut n = self.grid.image_size;
        for (i, l) in self.backbone.iter().enumerate() {
            if l.out_channels == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::Config(format!("layer {i} has a zero extent")));
            }
            n = l.output_extent(n).ok_or_else(|| {
                Error::Config(format!("layer {i} kernel exceeds its {n}×{n} input"))
            })?;
        }
        if n != self.grid.s {
            return Err(Error::Config(format!(
                "feature extractor maps {}×{} images to {n}×{n}, but the grid has S={}",
                self.grid.image_size, self.grid.image_size, self.grid.s
            )));
        }
        Ok(())
    }

    pub fn loc_channels(&self) -> usize {
        4 * self.grid.anchors
    }

    pub fn sem_channels(&self) -> usize {
        self.grid.anchors * self.h
    }

    pub fn conf_channels(&self) -> usize {
        self.grid.anchors
    }

    /// Channel count of the concatenated confidence-branch input.
    pub fn conf_input_channels(&self) -> usize {
        let mut c = self.loc_channels();
        if self.ablation.uses_features() {
            c += self.c_f;
        }
        if self.ablation.uses_semantics() {
            c += self.sem_channels();
        }
        c
    }
}

/// The four per-image head tensors, each laid out `S × S × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub t_f: Tensor,
    pub t_l: Tensor,
    pub t_s: Tensor,
    pub t_c: Tensor,
}

impl HeadOutputs {
    /// Offsets of flat prediction `k`.
    pub fn offsets(&self, k: usize) -> Offsets {
        Offsets::from_slice(&self.t_l.data()[4 * k..4 * k + 4])
    }

    pub fn semantic(&self, k: usize, h: usize) -> &[f64] {
        &self.t_s.data()[k * h..(k + 1) * h]
    }

    pub fn confidence_raw(&self, k: usize) -> f64 {
        self.t_c.data()[k]
    }
}

/// Decodes all `S·S·A` offsets of an `S × S × 4A` tensor into boxes.
pub fn decode_all(t_l: &[f64], grid: &GridSpec) -> Vec<BBox> {
    (0..grid.num_predictions())
        .map(|k| {
            let (cx, cy, a) = grid.locate(k);
            decode_box(Offsets::from_slice(&t_l[4 * k..4 * k + 4]), (cx, cy), grid.priors[a])
        })
        .collect()
}

/// Head tensors as tape variables, plus the parameter leaves.
#[derive(Debug, Clone)]
pub struct TapedHeads {
    pub params: Vec<Var>,
    pub t_f: Var,
    pub t_l: Var,
    pub t_s: Var,
    pub t_c: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
}

/// Deterministically initializes every parameter from `config.seed`.
pub fn build_model(config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = Vec::new();
    let mut conv = |rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, gain: f64| {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
        let w = (0..c_out * c_in * k * k).map(|_| normal.sample(rng)).collect();
        params.push(Tensor::new(&[c_out, c_in, k, k], w).unwrap().with_grad());
        params.push(Tensor::zeros(&[c_out]).with_grad());
    };
    let mut c_in = 3;
    for l in &config.backbone {
        conv(&mut rng, l.out_channels, c_in, l.kernel, 2.0);
        c_in = l.out_channels;
    }
    conv(&mut rng, config.loc_channels(), config.c_f, 1, 1.0);
    conv(&mut rng, config.sem_channels(), config.c_f, 1, 1.0);
    conv(&mut rng, config.conf_channels(), config.conf_input_channels(), 1, 1.0);
    Ok(Model { config, params })
}

impl Model {
    fn head_param(&self, branch: usize) -> usize {
        2 * (self.config.backbone.len() + branch)
    }

    /// Indices of the (kernel, bias) pair of the semantic branch.
    pub fn semantic_params(&self) -> [usize; 2] {
        let i = self.head_param(1);
        [i, i + 1]
    }

    pub fn localization_params(&self) -> [usize; 2] {
        let i = self.head_param(0);
        [i, i + 1]
    }

    pub fn confidence_params(&self) -> [usize; 2] {
        let i = self.head_param(2);
        [i, i + 1]
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.config.backbone.len() {
            names.push(format!("features.{i}.kernel"));
            names.push(format!("features.{i}.bias"));
        }
        for b in ["localization", "semantic", "confidence"] {
            names.push(format!("{b}.kernel"));
            names.push(format!("{b}.bias"));
        }
        names
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let n = self.config.grid.image_size;
        if image.shape() != [3, n, n] {
            return Err(shape_err!(
                "model expects a 3×{n}×{n} image, got {:?}",
                image.shape()
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`.
    pub fn forward_taped(&self, tape: &mut Tape, image: &Tensor) -> Result<TapedHeads> {
        self.check_image(image)?;
        let params = self
            .params
            .iter()
            .map(|p| tape.leaf(p))
            .collect::<Result<Vec<_>>>()?;
        let mut x = tape.constant(image)?;
        for (i, l) in self.config.backbone.iter().enumerate() {
            let y = tape.conv2d(x, params[2 * i], Some(params[2 * i + 1]), l.stride, l.pad())?;
            x = tape.leaky_relu(y)?;
        }
        let feat = x;
        let [lk, lb] = self.localization_params();
        let loc = tape.conv2d(feat, params[lk], Some(params[lb]), 1, 0)?;
        let [sk, sb] = self.semantic_params();
        let sem = tape.conv2d(feat, params[sk], Some(params[sb]), 1, 0)?;

        let mode = self.config.ablation;
        let mut parts = Vec::with_capacity(3);
        if mode.uses_features() {
            parts.push(feat);
        }
        parts.push(loc);
        if mode.uses_semantics() {
            parts.push(sem);
        }
        let fused = tape.concat(&parts)?;
        let [ck, cb] = self.confidence_params();
        let conf = tape.conv2d(fused, params[ck], Some(params[cb]), 1, 0)?;

        Ok(TapedHeads {
            params,
            t_f: tape.chw_to_hwc(feat)?,
            t_l: tape.chw_to_hwc(loc)?,
            t_s: tape.chw_to_hwc(sem)?,
            t_c: tape.chw_to_hwc(conf)?,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<HeadOutputs> {
        let mut tape = Tape::new();
        let heads = self.forward_taped(&mut tape, image)?;
        Ok(HeadOutputs {
            t_f: tape.tensor(heads.t_f),
            t_l: tape.tensor(heads.t_l),
            t_s: tape.tensor(heads.t_s),
            t_c: tape.tensor(heads.t_c),
        })
    }

    /// Rounds every parameter through `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[3, n, n], (0..3 * n * n).map(|_| rng.gen()).collect()).unwrap()
    }

    fn desk_priors() -> Vec<(f64, f64)> {
        vec![(0.8, 0.8), (1.5, 1.5), (2.5, 1.5)]
    }

    #[test]
    fn desk_shapes() {
        let m = build_model(ModelConfig::desk(desk_priors(), 1).unwrap()).unwrap();
        let out = m.forward(&random_image(112, 0)).unwrap();
        assert_eq!(out.t_f.shape(), &[7, 7, 64]);
        assert_eq!(out.t_l.shape(), &[7, 7, 12]);
        assert_eq!(out.t_s.shape(), &[7, 7, 24]);
        assert_eq!(out.t_c.shape(), &[7, 7, 3]);
    }

    #[test]
    fn full_head_channels() {
        let cfg = ModelConfig::full_shape(0).unwrap();
        assert_eq!(cfg.sem_channels(), 320);
        assert_eq!(cfg.loc_channels(), 20);
        assert_eq!(cfg.grid.num_predictions(), 845);
        let m = build_model(cfg).unwrap();
        let out = m.forward(&random_image(416, 1)).unwrap();
        assert_eq!(out.t_s.shape(), &[13, 13, 320]);
        assert_eq!(out.t_l.shape(), &[13, 13, 20]);
        assert_eq!(out.t_c.shape(), &[13, 13, 5]);
    }

    #[test]
    fn confidence_input_channels_follow_ablation() {
        let cfg = ModelConfig::desk(desk_priors(), 1).unwrap();
        assert_eq!(cfg.conf_input_channels(), 64 + 12 + 24);
        let v = cfg.clone().with_ablation(AblationMode::Visual);
        assert_eq!(v.conf_input_channels(), 64 + 12);
        let s = cfg.with_ablation(AblationMode::Semantic);
        assert_eq!(s.conf_input_channels(), 12 + 24);
        let m = build_model(s).unwrap();
        assert_eq!(m.params[m.confidence_params()[0]].shape(), &[3, 36, 1, 1]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(ModelConfig::desk(desk_priors(), 9).unwrap()).unwrap();
        let b = build_model(ModelConfig::desk(desk_priors(), 9).unwrap()).unwrap();
        let c = build_model(ModelConfig::desk(desk_priors(), 10).unwrap()).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let mut cfg = ModelConfig::desk(desk_priors(), 1).unwrap();
        cfg.c_f = 32;
        assert!(build_model(cfg).is_err());
        let mut cfg = ModelConfig::desk(desk_priors(), 1).unwrap();
        cfg.grid.s = 8;
        assert!(build_model(cfg).is_err());
        assert!(GridSpec::new(7, vec![(1.0, 0.0)], 112).is_err());
        assert!(GridSpec::new(0, vec![(1.0, 1.0)], 112).is_err());
    }

    #[test]
    fn wrong_image_shape_rejected() {
        let m = build_model(ModelConfig::desk(desk_priors(), 1).unwrap()).unwrap();
        assert!(matches!(m.forward(&random_image(64, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn cell_lookup_tie_goes_low() {
        let g = GridSpec::new(7, vec![(1.0, 1.0)], 112).unwrap();
        assert_eq!(g.cell_of(3.0, 2.5), (2, 2));
        assert_eq!(g.cell_of(0.0, 7.0), (0, 6));
        assert_eq!(g.cell_of(3.2, 6.99), (3, 6));
        for k in 0..g.num_predictions() {
            let (cx, cy, a) = g.locate(k);
            assert_eq!(g.index(cx, cy, a), k);
        }
    }

    fn semantic_grad_norm(mode: AblationMode) -> f64 {
        let cfg = ModelConfig::desk(desk_priors(), 2).unwrap().with_ablation(mode);
        let m = build_model(cfg).unwrap();
        let mut tape = Tape::new();
        let heads = m.forward_taped(&mut tape, &random_image(112, 3)).unwrap();
        let loss = tape.sum(heads.t_c).unwrap();
        let g = tape.backward(loss).unwrap();
        m.semantic_params()
            .iter()
            .map(|&i| g.get(heads.params[i]).map_or(0.0, |v| v.iter().map(|x| x * x).sum()))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn confidence_gradient_reaches_semantic_branch_only_when_fused() {
        assert!(semantic_grad_norm(AblationMode::Full) > 0.0);
        assert!(semantic_grad_norm(AblationMode::Semantic) > 0.0);
        assert_eq!(semantic_grad_norm(AblationMode::Visual), 0.0);
    }

    #[test]
    fn randomized_config_sweep_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let layers = rng.gen_range(1..4);
            let a = rng.gen_range(1..4);
            let h = rng.gen_range(1..6);
            let c_f = rng.gen_range(1..6);
            let mut backbone: Vec<_> = (0..layers)
                .map(|_| LayerSpec::new(rng.gen_range(1..5), 3, 2))
                .collect();
            backbone.last_mut().unwrap().out_channels = c_f;
            let n = 8 * rng.gen_range(1..4);
            let s = (0..layers).fold(n, |n, _| (n + 2 - 3) / 2 + 1);
            let priors = (0..a).map(|i| (1.0 + i as f64, 1.0)).collect();
            let cfg = ModelConfig {
                grid: GridSpec::new(s, priors, n).unwrap(),
                h,
                c_f,
                backbone,
                ablation: AblationMode::Full,
                seed: 0,
            };
            let m = build_model(cfg).unwrap();
            let out = m.forward(&random_image(n, 1)).unwrap();
            assert_eq!(out.t_f.shape(), &[s, s, c_f]);
            assert_eq!(out.t_l.shape(), &[s, s, 4 * a]);
            assert_eq!(out.t_s.shape(), &[s, s, a * h]);
            assert_eq!(out.t_c.shape(), &[s, s, a]);
        }
    }
}
