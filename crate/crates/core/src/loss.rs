//! Localization, semantic and confidence losses and their combination.
//!
//! Each loss is evaluated analytically on the head tensors and returns its
//! gradient with respect to the tensor it reads, so the total can be spliced
//! into a tape as a single scalar node.

use serde::{Deserialize, Serialize};

use crate::assign::{assign_indicators, AssignmentMask, NoobjRule};
use crate::autograd::{sigmoid, Tape};
use crate::boxes::{decode_box, GroundTruth, Offsets};
use crate::error::{invalid, shape_err, Result};
use crate::head::{decode_all, AblationMode, GridSpec, Model};
use crate::semantics::{cosine_with_grad, PrototypeTable};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_obj: f64,
    pub lambda_noobj: f64,
    pub lambda_loc: f64,
    pub lambda_attr: f64,
    pub lambda_conf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_obj: 5.0,
            lambda_noobj: 1.0,
            lambda_loc: 1.0,
            lambda_attr: 1.0,
            lambda_conf: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_obj", self.lambda_obj),
            ("lambda_noobj", self.lambda_noobj),
            ("lambda_loc", self.lambda_loc),
            ("lambda_attr", self.lambda_attr),
            ("lambda_conf", self.lambda_conf),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        Ok(())
    }

    /// Weights actually applied when training a model in `mode`. Without the
    /// semantic branch there is nothing for the attribute loss to train.
    pub fn for_ablation(self, mode: AblationMode) -> Self {
        match mode {
            AblationMode::Visual => Self {
                lambda_attr: 0.0,
                ..self
            },
            _ => self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loc: f64,
    pub attr: f64,
    pub conf: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(loc: f64, attr: f64, conf: f64, w: &LossWeights) -> Self {
        Self {
            loc,
            attr,
            conf,
            total: w.lambda_loc * loc + w.lambda_attr * attr + w.lambda_conf * conf,
        }
    }

    /// Componentwise mean, in order.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = items.iter().fold(Self::default(), |acc, b| Self {
            loc: acc.loc + b.loc,
            attr: acc.attr + b.attr,
            conf: acc.conf + b.conf,
            total: acc.total + b.total,
        });
        m.loc /= n;
        m.attr /= n;
        m.conf /= n;
        m.total /= n;
        m
    }
}

/// A loss value and its gradient with respect to the tensor it reads.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(name: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(shape_err!("{name} has {got} values, expected {want}"));
    }
    Ok(())
}

/// Sum-squared error on centers and square-rooted extents over object
/// predictions, differentiated through the box decoding.
pub fn loc_loss(t_l: &[f64], grid: &GridSpec, gts: &[GroundTruth], mask: &AssignmentMask) -> Result<LossTerm> {
    let n = grid.num_predictions();
    check_len("localization tensor", t_l.len(), 4 * n)?;
    check_len("assignment mask", mask.len(), n)?;
    let mut value = 0.0;
    let mut grad = vec![0.0; 4 * n];
    for k in (0..n).filter(|&k| mask.obj[k]) {
        let gi = mask.matched_gt[k].ok_or_else(|| invalid!("object prediction {k} has no match"))?;
        let gt = &gts.get(gi).ok_or_else(|| invalid!("mask refers to missing ground truth {gi}"))?.bbox;
        let (cx, cy, a) = grid.locate(k);
        let o = Offsets::from_slice(&t_l[4 * k..4 * k + 4]);
        let b = decode_box(o, (cx, cy), grid.priors[a]);
        let (sx, sy) = (sigmoid(o.ox), sigmoid(o.oy));
        let (dx, dy) = (b.x - gt.x, b.y - gt.y);
        let (rw, rh) = (b.w.sqrt(), b.h.sqrt());
        let (dw, dh) = (rw - gt.w.sqrt(), rh - gt.h.sqrt());
        value += dx * dx + dy * dy + dw * dw + dh * dh;
        let g = &mut grad[4 * k..4 * k + 4];
        g[0] = 2.0 * dx * sx * (1.0 - sx);
        g[1] = 2.0 * dy * sy * (1.0 - sy);
        // d√w/d(ow) = √w / 2
        g[2] = dw * rw;
        g[3] = dh * rh;
    }
    Ok(LossTerm { value, grad })
}

/// Cosine regression of object predictions onto the prototype of their
/// ground-truth class, plus a penalty on the best seen-class similarity of
/// background predictions.
pub fn semantic_loss(
    t_s: &[f64],
    h: usize,
    gts: &[GroundTruth],
    prototypes: &PrototypeTable,
    mask: &AssignmentMask,
    weights: &LossWeights,
) -> Result<LossTerm> {
    if prototypes.h != h {
        return Err(shape_err!(
            "prototypes have dimension {}, semantic head predicts {h}",
            prototypes.h
        ));
    }
    let n = mask.len();
    check_len("semantic tensor", t_s.len(), n * h)?;
    let mut seen: Vec<_> = prototypes.seen().collect();
    seen.sort_by_key(|c| c.id);

    let mut value = 0.0;
    let mut grad = vec![0.0; n * h];
    for k in 0..n {
        let pred = &t_s[k * h..(k + 1) * h];
        if mask.obj[k] {
            let gi = mask.matched_gt[k].ok_or_else(|| invalid!("object prediction {k} has no match"))?;
            let gt = gts.get(gi).ok_or_else(|| invalid!("mask refers to missing ground truth {gi}"))?;
            let target = prototypes.vector(gt.class_id)?;
            let (s, ds) = cosine_with_grad(pred, target);
            value += weights.lambda_obj * (s - 1.0).powi(2);
            let c = 2.0 * weights.lambda_obj * (s - 1.0);
            grad[k * h..(k + 1) * h].iter_mut().zip(ds).for_each(|(g, d)| *g += c * d);
        } else if mask.noobj[k] {
            let mut best: Option<(f64, Vec<f64>)> = None;
            for class in &seen {
                let (s, ds) = cosine_with_grad(pred, &class.vector);
                if best.as_ref().map_or(true, |(bs, _)| s > *bs) {
                    best = Some((s, ds));
                }
            }
            let (s, ds) = best.expect("tables have a seen class");
            value += weights.lambda_noobj * s * s;
            let c = 2.0 * weights.lambda_noobj * s;
            grad[k * h..(k + 1) * h].iter_mut().zip(ds).for_each(|(g, d)| *g += c * d);
        }
    }
    Ok(LossTerm { value, grad })
}

/// Squared error of the squashed confidence against 1 for objects and 0 for
/// background.
pub fn confidence_loss(t_c: &[f64], mask: &AssignmentMask, weights: &LossWeights) -> Result<LossTerm> {
    check_len("confidence tensor", t_c.len(), mask.len())?;
    let mut value = 0.0;
    let mut grad = vec![0.0; t_c.len()];
    for (k, &raw) in t_c.iter().enumerate() {
        let (target, lambda) = if mask.obj[k] {
            (1.0, weights.lambda_obj)
        } else if mask.noobj[k] {
            (0.0, weights.lambda_noobj)
        } else {
            continue;
        };
        let p = sigmoid(raw);
        value += lambda * (p - target).powi(2);
        grad[k] = 2.0 * lambda * (p - target) * p * (1.0 - p);
    }
    Ok(LossTerm { value, grad })
}

/// Per-image loss with gradients on the three head tensors it reads.
#[derive(Debug, Clone)]
pub struct ImageLoss {
    pub breakdown: LossBreakdown,
    pub mask: AssignmentMask,
    pub grad_t_l: Vec<f64>,
    pub grad_t_s: Vec<f64>,
    pub grad_t_c: Vec<f64>,
}

/// Everything the losses need besides the head tensors.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub grid: &'a GridSpec,
    pub h: usize,
    pub prototypes: &'a PrototypeTable,
    pub weights: &'a LossWeights,
    pub rule: NoobjRule,
}

/// Assigns indicators on the decoded boxes and evaluates all three losses.
pub fn image_loss(t_l: &[f64], t_s: &[f64], t_c: &[f64], gts: &[GroundTruth], ctx: LossContext<'_>) -> Result<ImageLoss> {
    ctx.weights.validate()?;
    let decoded = decode_all(t_l, ctx.grid);
    let mask = assign_indicators(gts, &decoded, ctx.grid, ctx.rule)?;
    let loc = loc_loss(t_l, ctx.grid, gts, &mask)?;
    let attr = semantic_loss(t_s, ctx.h, gts, ctx.prototypes, &mask, ctx.weights)?;
    let conf = confidence_loss(t_c, &mask, ctx.weights)?;
    let w = ctx.weights;
    let scale = |v: Vec<f64>, s: f64| v.into_iter().map(|g| g * s).collect::<Vec<_>>();
    Ok(ImageLoss {
        breakdown: LossBreakdown::compose(loc.value, attr.value, conf.value, w),
        mask,
        grad_t_l: scale(loc.grad, w.lambda_loc),
        grad_t_s: scale(attr.grad, w.lambda_attr),
        grad_t_c: scale(conf.grad, w.lambda_conf),
    })
}

/// Loss of `model` on one image. Visual-only models ignore the attribute
/// term in the total.
pub fn total_loss(
    image: &Tensor,
    gts: &[GroundTruth],
    model: &Model,
    prototypes: &PrototypeTable,
    weights: &LossWeights,
    rule: NoobjRule,
) -> Result<LossBreakdown> {
    let out = model.forward(image)?;
    let w = weights.for_ablation(model.config.ablation);
    let ctx = LossContext {
        grid: &model.config.grid,
        h: model.config.h,
        prototypes,
        weights: &w,
        rule,
    };
    Ok(image_loss(out.t_l.data(), out.t_s.data(), out.t_c.data(), gts, ctx)?.breakdown)
}

/// Loss of `model` on one image together with the gradient for every
/// parameter tensor, in `model.params` order.
pub fn loss_and_gradients(
    image: &Tensor,
    gts: &[GroundTruth],
    model: &Model,
    prototypes: &PrototypeTable,
    weights: &LossWeights,
    rule: NoobjRule,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let heads = model.forward_taped(&mut tape, image)?;
    let w = weights.for_ablation(model.config.ablation);
    let ctx = LossContext {
        grid: &model.config.grid,
        h: model.config.h,
        prototypes,
        weights: &w,
        rule,
    };
    let il = image_loss(
        tape.value(heads.t_l),
        tape.value(heads.t_s),
        tape.value(heads.t_c),
        gts,
        ctx,
    )?;
    let loss = tape.custom_scalar(
        &[heads.t_l, heads.t_s, heads.t_c],
        il.breakdown.total,
        vec![il.grad_t_l, il.grad_t_s, il.grad_t_c],
    )?;
    let mut grads = tape.backward(loss)?;
    let param_grads = heads
        .params
        .iter()
        .zip(&model.params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    Ok((il.breakdown, param_grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::semantics::ClassPrototype;
    use proptest::prelude::*;

    fn grid() -> GridSpec {
        GridSpec::new(7, vec![(1.0, 1.0), (2.0, 2.0), (3.0, 1.5)], 112).unwrap()
    }

    fn protos() -> PrototypeTable {
        PrototypeTable::new(
            2,
            vec![
                ClassPrototype {
                    id: 0,
                    name: "a".into(),
                    vector: vec![1.0, 0.0],
                    seen: true,
                },
                ClassPrototype {
                    id: 1,
                    name: "b".into(),
                    vector: vec![0.0, 1.0],
                    seen: false,
                },
            ],
        )
        .unwrap()
    }

    fn mask_with(n: usize, obj: &[usize], noobj: &[usize]) -> AssignmentMask {
        let mut m = AssignmentMask {
            obj: vec![false; n],
            noobj: vec![false; n],
            matched_gt: vec![None; n],
        };
        for &k in obj {
            m.obj[k] = true;
            m.matched_gt[k] = Some(0);
        }
        for &k in noobj {
            m.noobj[k] = true;
        }
        m
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn confidence_examples() {
        let w = LossWeights::default();
        let m = mask_with(1, &[0], &[]);
        // Saturated raw scores give p within 1e-300 of the target.
        assert_eq!(confidence_loss(&[800.0], &m, &w).unwrap().value, 0.0);
        assert_eq!(confidence_loss(&[-800.0], &m, &w).unwrap().value, 5.0);
        let bg = mask_with(1, &[], &[0]);
        assert_eq!(confidence_loss(&[0.0], &bg, &w).unwrap().value, 0.25);
    }

    #[test]
    fn semantic_examples() {
        let w = LossWeights::default();
        let gts = [GroundTruth::new(BBox::new(0.5, 0.5, 1.0, 1.0), 1, vec![0.0, 1.0])];
        let obj = mask_with(1, &[0], &[]);
        assert_eq!(semantic_loss(&[0.0, 3.0], 2, &gts, &protos(), &obj, &w).unwrap().value, 0.0);
        let bg = mask_with(1, &[], &[0]);
        assert_eq!(semantic_loss(&[0.0, 2.0], 2, &[], &protos(), &bg, &w).unwrap().value, 0.0);
        assert_eq!(semantic_loss(&[1.0, 0.0], 2, &[], &protos(), &bg, &w).unwrap().value, 1.0);
    }

    #[test]
    fn zero_norm_prediction() {
        let w = LossWeights::default();
        let gts = [GroundTruth::new(BBox::new(0.5, 0.5, 1.0, 1.0), 0, vec![1.0, 0.0])];
        let obj = mask_with(1, &[0], &[]);
        let t = semantic_loss(&[0.0, 0.0], 2, &gts, &protos(), &obj, &w).unwrap();
        assert_eq!(t.value, 5.0);
        assert_eq!(t.grad, vec![0.0, 0.0]);
        let bg = mask_with(1, &[], &[0]);
        assert_eq!(semantic_loss(&[0.0, 0.0], 2, &[], &protos(), &bg, &w).unwrap().value, 0.0);
    }

    #[test]
    fn loc_examples() {
        let g = grid();
        let k = g.index(3, 3, 0);
        let mut t_l = vec![0.0; 4 * g.num_predictions()];
        let m = mask_with(g.num_predictions(), &[k], &[]);
        let gt = |x, w| [GroundTruth::new(BBox::new(x, 3.5, w, 1.0), 0, vec![])];
        assert_eq!(loc_loss(&t_l, &g, &gt(3.5, 1.0), &m).unwrap().value, 0.0);
        assert!((loc_loss(&t_l, &g, &gt(3.0 + 1e-12, 1.0), &m).unwrap().value - 0.25).abs() < 1e-11);
        assert_eq!(loc_loss(&t_l, &g, &gt(3.5, 4.0), &m).unwrap().value, 1.0);
        t_l[4 * k] = logit(0.25);
        assert!((loc_loss(&t_l, &g, &gt(3.75, 1.0), &m).unwrap().value - 0.25).abs() < 1e-12);
    }

    #[test]
    fn term_gradients_match_differences() {
        let g = grid();
        let n = g.num_predictions();
        let w = LossWeights::default();
        let gts = [
            GroundTruth::new(BBox::new(3.3, 2.6, 1.7, 2.2), 0, vec![1.0, 0.0]),
            GroundTruth::new(BBox::new(5.4, 5.2, 0.8, 0.6), 1, vec![0.0, 1.0]),
        ];
        let t_l: Vec<f64> = (0..4 * n).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect();
        let t_s: Vec<f64> = (0..2 * n).map(|i| ((i * 53 % 97) as f64 / 40.0) - 1.1).collect();
        let t_c: Vec<f64> = (0..n).map(|i| ((i * 29 % 89) as f64 / 30.0) - 1.5).collect();
        let mask = assign_indicators(&gts, &decode_all(&t_l, &g), &g, NoobjRule::CellRegion).unwrap();
        let fd = |f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize| {
            let (mut p, mut m) = (x.to_vec(), x.to_vec());
            p[i] += 1e-6;
            m[i] -= 1e-6;
            (f(&p) - f(&m)) / 2e-6
        };
        let loc = |x: &[f64]| loc_loss(x, &g, &gts, &mask).unwrap().value;
        let lg = loc_loss(&t_l, &g, &gts, &mask).unwrap().grad;
        for i in 0..t_l.len() {
            assert!((fd(&loc, &t_l, i) - lg[i]).abs() < 1e-7, "loc {i}");
        }
        let sem = |x: &[f64]| semantic_loss(x, 2, &gts, &protos(), &mask, &w).unwrap().value;
        let sg = semantic_loss(&t_s, 2, &gts, &protos(), &mask, &w).unwrap().grad;
        for i in 0..t_s.len() {
            assert!((fd(&sem, &t_s, i) - sg[i]).abs() < 1e-6, "sem {i}");
        }
        let conf = |x: &[f64]| confidence_loss(x, &mask, &w).unwrap().value;
        let cg = confidence_loss(&t_c, &mask, &w).unwrap().grad;
        for i in 0..t_c.len() {
            assert!((fd(&conf, &t_c, i) - cg[i]).abs() < 1e-7, "conf {i}");
        }
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let w = LossWeights {
            lambda_loc: 0.0,
            lambda_attr: 0.0,
            lambda_conf: 0.0,
            ..LossWeights::default()
        };
        let b = LossBreakdown::compose(3.0, 2.0, 1.0, &w);
        assert_eq!(b.total, 0.0);
        assert!(LossWeights {
            lambda_obj: -1.0,
            ..LossWeights::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn visual_ablation_drops_attribute_weight() {
        let w = LossWeights::default().for_ablation(AblationMode::Visual);
        assert_eq!(w.lambda_attr, 0.0);
        assert_eq!(LossWeights::default().for_ablation(AblationMode::Semantic), LossWeights::default());
    }

    proptest! {
        #[test]
        fn losses_nonnegative(
            t_c in proptest::collection::vec(-10.0f64..10.0, 6),
            t_s in proptest::collection::vec(-3.0f64..3.0, 12),
            flags in proptest::collection::vec(0u8..3, 6),
        ) {
            let obj: Vec<usize> = (0..6).filter(|&k| flags[k] == 1).collect();
            let noobj: Vec<usize> = (0..6).filter(|&k| flags[k] == 2).collect();
            let m = mask_with(6, &obj, &noobj);
            let gts = [GroundTruth::new(BBox::new(0.5, 0.5, 1.0, 1.0), 1, vec![0.0, 1.0])];
            let w = LossWeights::default();
            prop_assert!(confidence_loss(&t_c, &m, &w).unwrap().value >= 0.0);
            prop_assert!(semantic_loss(&t_s, 2, &gts, &protos(), &m, &w).unwrap().value >= 0.0);
        }

        #[test]
        fn semantic_scale_invariance_without_background(
            t_s in proptest::collection::vec(-3.0f64..3.0, 12),
            which in 0usize..6, scale in 0.01f64..100.0,
        ) {
            let m = mask_with(6, &[0, 3], &[1, 2, 4, 5]);
            let gts = [GroundTruth::new(BBox::new(0.5, 0.5, 1.0, 1.0), 1, vec![0.0, 1.0])];
            let w = LossWeights { lambda_noobj: 0.0, ..LossWeights::default() };
            let mut scaled = t_s.clone();
            scaled[2 * which] *= scale;
            scaled[2 * which + 1] *= scale;
            let a = semantic_loss(&t_s, 2, &gts, &protos(), &m, &w).unwrap().value;
            let b = semantic_loss(&scaled, 2, &gts, &protos(), &m, &w).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn removing_an_object_never_raises_loc(
            t_l in proptest::collection::vec(-2.0f64..2.0, 4 * 147),
            boxes in proptest::collection::vec((0.2f64..6.8, 0.2f64..6.8, 0.3f64..3.0, 0.3f64..3.0), 1..5),
        ) {
            let g = grid();
            let gts: Vec<GroundTruth> = boxes.iter().map(|&(x, y, w, h)| GroundTruth::new(BBox::new(x, y, w, h), 0, vec![])).collect();
            let decoded = decode_all(&t_l, &g);
            let full = assign_indicators(&gts, &decoded, &g, NoobjRule::CellRegion).unwrap();
            let fewer = &gts[..gts.len() - 1];
            let part = assign_indicators(fewer, &decoded, &g, NoobjRule::CellRegion).unwrap();
            let a = loc_loss(&t_l, &g, &gts, &full).unwrap().value;
            let b = loc_loss(&t_l, &g, fewer, &part).unwrap().value;
            prop_assert!(b <= a + 1e-12);
        }
    }
}
