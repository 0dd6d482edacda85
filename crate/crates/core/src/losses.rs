//! Training objectives, built as differentiable graph nodes.
//!
//! Every per-iteration term is weighted by `gamma^(N - i)` for iteration
//! `i = 1..N`, so later refinements count more. Flow predictions are
//! `1 x 2 x H x W` nodes, occlusion predictions `1 x 1 x H x W` nodes of
//! visibility probabilities.

use crate::error::{invalid, Error, Result};
use crate::flow::{FlowField, GeoTransform, IdentifierMask, OcclusionMask};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Refinement iterations `N`; predictions lists must have this length.
    pub iterations: usize,
    pub gamma: f64,
    /// Weight of the mask-match loss.
    pub lambda1: f64,
    /// Weight of the transformation-consistency loss.
    pub lambda2: f64,
    /// Identifier-mask threshold on the squared per-pixel error.
    pub epsilon: f64,
    /// Also apply zero forcing to the identical pair `(I_t, I_t)`.
    pub zero_star: bool,
    /// Use two-term binary cross-entropy for mask matching instead of the
    /// visible-pixel-only form.
    pub mask_bce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            iterations: 4,
            gamma: 0.8,
            lambda1: 0.1,
            lambda2: 0.01,
            epsilon: 25.0,
            zero_star: false,
            mask_bce: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("loss iterations must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(invalid("loss weights must be non-negative"));
        }
        Ok(())
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if n == 0 {
            return Err(invalid(format!("{what}: empty prediction list")));
        }
        if n != self.iterations {
            return Err(invalid(format!(
                "{what}: {n} predictions for {} iterations",
                self.iterations
            )));
        }
        Ok(())
    }
}

/// `gamma^(N - i)` for `i = 1..=N`.
pub fn iteration_weights(n: usize, gamma: f64) -> Vec<f64> {
    (1..=n).map(|i| gamma.powi((n - i) as i32)).collect()
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = g.scale(v, w);
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.scalar_constant(T::zero())))
}

fn flow_extent<T: Scalar>(g: &Graph<T>, v: Var, what: &str) -> Result<(usize, usize)> {
    match g.shape(v) {
        [1, 2, h, w] => Ok((*w, *h)),
        s => Err(Error::Shape {
            op: "flow prediction",
            lhs: s.to_vec(),
            rhs: vec![1, 2, 0, 0],
        })
        .map_err(|e| invalid(format!("{what}: {e}"))),
    }
}

/// Mean L1 distance of each prediction to `gt` over valid pixels (channel
/// sum per pixel), combined with the iteration weights.
pub fn sequence_loss<T: Scalar>(
    g: &mut Graph<T>,
    preds: &[Var],
    gt: &FlowField,
    valid: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.check_len(preds.len(), "sequence_loss")?;
    let (w, h) = gt.extent();
    let n = w * h;
    let mask: Vec<T> = match valid {
        Some(m) if m.len() != n => {
            return Err(invalid(format!("valid mask has {} entries, need {n}", m.len())))
        }
        Some(m) => m.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        None => vec![T::one(); n],
    };
    let count = mask.iter().filter(|&&m| m > T::zero()).count();
    if count == 0 {
        return Err(invalid("sequence_loss: no valid pixels"));
    }
    let target = g.input(&gt.to_tensor());
    let mask = g.constant(vec![1, 1, h, w], mask)?;
    let weights = iteration_weights(preds.len(), cfg.gamma);
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, &wt) in preds.iter().zip(&weights) {
        if flow_extent(g, p, "sequence_loss")? != (w, h) {
            return Err(invalid(format!(
                "sequence_loss: prediction {:?} vs ground truth {w}x{h}",
                g.shape(p)
            )));
        }
        let d = g.sub(p, target)?;
        let a = g.abs(d);
        let m = g.mul(a, mask)?;
        let s = g.sum(m);
        terms.push((s, wt / count as f64));
    }
    weighted_sum(g, &terms)
}

/// Sequence loss against the all-zero field. Use it on predictions for
/// `(I_t, I_t,occ)`, and for `(I_t, I_t)` when `zero_star` is enabled.
pub fn zero_forcing_loss<T: Scalar>(g: &mut Graph<T>, preds: &[Var], cfg: &LossConfig) -> Result<Var> {
    cfg.check_len(preds.len(), "zero_forcing_loss")?;
    let (w, h) = flow_extent(g, preds[0], "zero_forcing_loss")?;
    sequence_loss(g, preds, &FlowField::zeros(w, h), None, cfg)
}

/// Cross-entropy between predicted visibility `pred_masks` and the
/// generated mask, per iteration, weighted by `gamma`.
///
/// By default only visible pixels contribute (`-O log Õ`); with
/// `mask_bce` the occluded term `-(1 - O) log(1 - Õ)` is added.
pub fn mask_match_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_masks: &[Var],
    gt: &OcclusionMask,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.check_len(pred_masks.len(), "mask_match_loss")?;
    let (w, h) = (gt.width(), gt.height());
    let n = (w * h) as f64;
    let o: Vec<T> = gt.values().iter().map(|&v| T::of_f64(v as f64)).collect();
    let target = g.constant(vec![1, 1, h, w], o.clone())?;
    let inv_target = g.constant(
        vec![1, 1, h, w],
        o.iter().map(|&v| T::one() - v).collect(),
    )?;
    let weights = iteration_weights(pred_masks.len(), cfg.gamma);
    let mut terms = Vec::with_capacity(pred_masks.len());
    for (i, (&p, &wt)) in pred_masks.iter().zip(&weights).enumerate() {
        if g.shape(p) != [1, 1, h, w] {
            return Err(Error::Shape {
                op: "mask_match_loss",
                lhs: g.shape(p).to_vec(),
                rhs: vec![1, 1, h, w],
            });
        }
        if let Some(j) = g.value(p).iter().position(|&v| !(v > T::zero() && v < T::one())) {
            return Err(Error::Domain {
                op: "mask_match_loss",
                detail: format!(
                    "iteration {} pixel {j} has visibility {} outside (0, 1)",
                    i + 1,
                    g.value(p)[j]
                ),
            });
        }
        let lp = g.log(p);
        let mut t = g.mul(target, lp)?;
        if cfg.mask_bce {
            let q = g.neg(p);
            let q = g.offset(q, 1.0);
            let lq = g.log(q);
            let t2 = g.mul(inv_target, lq)?;
            t = g.add(t, t2)?;
        }
        let s = g.sum(t);
        terms.push((s, -wt / n));
    }
    weighted_sum(g, &terms)
}

/// Output of [`transformation_consistency_loss`].
pub struct ConsistencyLoss {
    pub loss: Var,
    /// One gate per iteration.
    pub masks: Vec<IdentifierMask>,
}

/// Gated equivariance loss between predictions on the original pair and
/// restored predictions on the pair transformed by `t`.
///
/// Per iteration the squared per-pixel error is averaged over pixels whose
/// error is below `epsilon`; the gate itself is not differentiated. An
/// iteration whose gate is empty contributes nothing.
pub fn transformation_consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred_orig: &[Var],
    pred_trans: &[Var],
    t: &GeoTransform,
    cfg: &LossConfig,
) -> Result<ConsistencyLoss> {
    cfg.check_len(pred_orig.len(), "transformation_consistency_loss")?;
    cfg.check_len(pred_trans.len(), "transformation_consistency_loss")?;
    let restore = t.inverse();
    let (rw, rh) = restore.output_extent();
    let (index, sign) = restore.flow_gather_plan();
    let sign: Vec<T> = sign.into_iter().map(|s| T::of_f64(s as f64)).collect();
    let weights = iteration_weights(pred_orig.len(), cfg.gamma);
    let mut terms = Vec::new();
    let mut masks = Vec::with_capacity(pred_orig.len());
    for ((&po, &pt), &wt) in pred_orig.iter().zip(pred_trans).zip(&weights) {
        let orig_extent = flow_extent(g, po, "transformation_consistency_loss")?;
        let trans_extent = flow_extent(g, pt, "transformation_consistency_loss")?;
        if trans_extent != restore.source_extent() || orig_extent != (rw, rh) {
            return Err(invalid(format!(
                "transformation_consistency_loss: original {orig_extent:?} and transformed \
                 {trans_extent:?} predictions do not match a {} transform of the original",
                t.kind()
            )));
        }
        let r = g.gather(pt, index.clone(), sign.clone(), vec![1, 2, rh, rw])?;
        let d = g.sub(po, r)?;
        let sq = g.square(d);
        let e = g.sum_axis(sq, 1)?;
        let alpha: Vec<bool> = g
            .value(e)
            .iter()
            .map(|&v| v.into_f64() < cfg.epsilon)
            .collect();
        let count = alpha.iter().filter(|&&a| a).count();
        if count > 0 {
            let gate = g.constant(
                vec![1, 1, rh, rw],
                alpha.iter().map(|&a| if a { T::one() } else { T::zero() }).collect(),
            )?;
            let m = g.mul(e, gate)?;
            let s = g.sum(m);
            terms.push((s, wt / count as f64));
        }
        masks.push(IdentifierMask::new(rw, rh, alpha)?);
    }
    let loss = weighted_sum(g, &terms)?;
    Ok(ConsistencyLoss { loss, masks })
}

/// Components of the aggregate objective; absent ones count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossComponents {
    pub base: Option<Var>,
    pub zero_forcing: Option<Var>,
    pub mask_match: Option<Var>,
    pub consistency: Option<Var>,
}

/// `L_base + L_ZF + lambda1 L_MM + lambda2 L_TR`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, c: &LossComponents, cfg: &LossConfig) -> Result<Var> {
    let terms: Vec<(Var, f64)> = [
        (c.base, 1.0),
        (c.zero_forcing, 1.0),
        (c.mask_match, cfg.lambda1),
        (c.consistency, cfg.lambda2),
    ]
    .into_iter()
    .filter_map(|(v, w)| v.map(|v| (v, w)))
    .collect();
    weighted_sum(g, &terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{transform_flow, TransformKind};
    use crate::tensor::Tensor;

    fn flow_var(g: &mut Graph<f64>, f: &FlowField) -> Var {
        g.variable(&f.to_tensor())
    }

    fn cfg(n: usize) -> LossConfig {
        LossConfig {
            iterations: n,
            ..LossConfig::default()
        }
    }

    #[test]
    fn sequence_loss_zero_for_exact_predictions() {
        let gt = FlowField::from_fn(4, 3, |x, y| (x as f32, y as f32));
        let mut g = Graph::<f64>::new();
        let p: Vec<Var> = (0..4).map(|_| flow_var(&mut g, &gt)).collect();
        let l = sequence_loss(&mut g, &p, &gt, None, &cfg(4)).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn sequence_loss_two_iterations_uniform_error() {
        let gt = FlowField::zeros(5, 5);
        let off = FlowField::constant(5, 5, 1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let p = vec![flow_var(&mut g, &off), flow_var(&mut g, &off)];
        let c = LossConfig {
            gamma: 0.8,
            ..cfg(2)
        };
        let l = sequence_loss(&mut g, &p, &gt, None, &c).unwrap();
        assert!((g.scalar(l).unwrap() - 3.6).abs() < 1e-12);
    }

    #[test]
    fn sequence_loss_requires_predictions() {
        let mut g = Graph::<f64>::new();
        let gt = FlowField::zeros(2, 2);
        assert!(sequence_loss(&mut g, &[], &gt, None, &cfg(0)).is_err());
    }

    #[test]
    fn sequence_loss_respects_valid_mask() {
        let gt = FlowField::zeros(2, 1);
        let pred = FlowField::new(2, 1, vec![1.0, 10.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::<f64>::new();
        let p = vec![flow_var(&mut g, &pred)];
        let l = sequence_loss(&mut g, &p, &gt, Some(&[true, false]), &cfg(1)).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 1.0);
        assert!(sequence_loss(&mut g, &p, &gt, Some(&[false, false]), &cfg(1)).is_err());
    }

    #[test]
    fn zero_forcing_values() {
        let mut g = Graph::<f64>::new();
        let z = flow_var(&mut g, &FlowField::zeros(3, 3));
        let l = zero_forcing_loss(&mut g, &[z], &cfg(1)).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
        let c = flow_var(&mut g, &FlowField::constant(3, 3, 2.0, 0.0));
        let l = zero_forcing_loss(&mut g, &[c], &cfg(1)).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 2.0);
    }

    fn mask_var(g: &mut Graph<f64>, w: usize, h: usize, v: f64) -> Var {
        g.variable(&Tensor::full(vec![1, 1, h, w], v).unwrap())
    }

    #[test]
    fn mask_match_values() {
        let ones = OcclusionMask::ones(4, 4);
        let mut g = Graph::<f64>::new();
        let p = mask_var(&mut g, 4, 4, 1.0 - 1e-7);
        let l = mask_match_loss(&mut g, &[p], &ones, &cfg(1)).unwrap();
        assert!(g.scalar(l).unwrap().abs() < 1e-6);

        let p = mask_var(&mut g, 4, 4, 0.5);
        let l = mask_match_loss(&mut g, &[p], &ones, &cfg(1)).unwrap();
        assert!((g.scalar(l).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let zeros = OcclusionMask::binary(4, 4, vec![0.0; 16]).unwrap();
        let p = mask_var(&mut g, 4, 4, 0.3);
        let l = mask_match_loss(&mut g, &[p], &zeros, &cfg(1)).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 0.0);
    }

    #[test]
    fn mask_match_bce_penalises_occluded_pixels() {
        let zeros = OcclusionMask::binary(2, 2, vec![0.0; 4]).unwrap();
        let mut g = Graph::<f64>::new();
        let p = mask_var(&mut g, 2, 2, 0.75);
        let c = LossConfig {
            mask_bce: true,
            ..cfg(1)
        };
        let l = mask_match_loss(&mut g, &[p], &zeros, &c).unwrap();
        assert!((g.scalar(l).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_match_rejects_values_outside_open_interval() {
        let ones = OcclusionMask::ones(2, 2);
        let mut g = Graph::<f64>::new();
        let p = mask_var(&mut g, 2, 2, 1.0);
        assert!(matches!(
            mask_match_loss(&mut g, &[p], &ones, &cfg(1)),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn consistency_zero_under_exact_equivariance() {
        let f = FlowField::from_fn(5, 4, |x, y| (x as f32 * 0.7 - 1.0, y as f32 * -0.3));
        for kind in TransformKind::ALL {
            let t = GeoTransform::new(kind, 5, 4);
            let ft = transform_flow(&f, &t).unwrap();
            let mut g = Graph::<f64>::new();
            let po = vec![flow_var(&mut g, &f)];
            let pt = vec![flow_var(&mut g, &ft)];
            let out = transformation_consistency_loss(&mut g, &po, &pt, &t, &cfg(1)).unwrap();
            assert_eq!(g.scalar(out.loss).unwrap(), 0.0, "{kind}");
            assert!(out.masks[0].all());
        }
    }

    #[test]
    fn consistency_gate_is_strict_at_epsilon() {
        // pixel 0 error^2 = 24 (kept), pixel 1 error^2 = 26 (dropped)
        let orig = FlowField::new(2, 1, vec![24f32.sqrt(), 26f32.sqrt(), 0.0, 0.0]).unwrap();
        let trans = FlowField::zeros(2, 1);
        let t = GeoTransform::new(TransformKind::Identity, 2, 1);
        let mut g = Graph::<f64>::new();
        let po = vec![flow_var(&mut g, &orig)];
        let pt = vec![flow_var(&mut g, &trans)];
        let out = transformation_consistency_loss(&mut g, &po, &pt, &t, &cfg(1)).unwrap();
        assert_eq!(out.masks[0].alpha(), &[true, false]);
        assert!((g.scalar(out.loss).unwrap() - 24.0).abs() < 1e-5);
    }

    #[test]
    fn total_loss_weights_components() {
        let mut g = Graph::<f64>::new();
        let one = || Tensor::scalar(1.0);
        let (a, b, c, d) = (
            g.variable(&one()),
            g.variable(&one()),
            g.variable(&one()),
            g.variable(&one()),
        );
        let all = LossComponents {
            base: Some(a),
            zero_forcing: Some(b),
            mask_match: Some(c),
            consistency: Some(d),
        };
        let l = total_loss(&mut g, &all, &LossConfig::default()).unwrap();
        assert!((g.scalar(l).unwrap() - 2.11).abs() < 1e-12);

        let only = LossComponents {
            base: Some(a),
            ..Default::default()
        };
        let l = total_loss(&mut g, &only, &LossConfig::default()).unwrap();
        assert_eq!(g.scalar(l).unwrap(), 1.0);

        let none = total_loss(&mut g, &LossComponents::default(), &LossConfig::default()).unwrap();
        assert_eq!(g.scalar(none).unwrap(), 0.0);
    }

    #[test]
    fn weights_sum_to_geometric_series() {
        for n in 1..8 {
            let s: f64 = iteration_weights(n, 0.8).iter().sum();
            assert!((s - (1.0 - 0.8f64.powi(n as i32)) / 0.2).abs() < 1e-12);
        }
    }
}
