//! Focal classification losses and the L1 + GIoU box loss, each with an
//! analytic gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

/// Loss and matching-cost weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            l1: 5.0,
            giou: 2.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cls", self.cls),
            ("l1", self.l1),
            ("giou", self.giou),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight `{name}` must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

const P_MIN: f64 = 1e-7;

/// Focal binary cross-entropy of one logit and its derivative.
pub fn focal_sigmoid_term<T: Scalar>(logit: T, positive: bool, alpha: T, gamma: T) -> (T, T) {
    let raw = sigmoid(logit);
    let lo = T::c(P_MIN);
    let hi = T::one() - lo;
    let clamped = raw < lo || raw > hi;
    let p = raw.max(lo).min(hi);
    let one = T::one();
    if positive {
        let loss = -alpha * (one - p).powf(gamma) * p.ln();
        let grad = if clamped {
            T::zero()
        } else {
            alpha * (one - p).powf(gamma) * (gamma * p * p.ln() - (one - p))
        };
        (loss, grad)
    } else {
        let beta = one - alpha;
        let loss = -beta * p.powf(gamma) * (one - p).ln();
        let grad = if clamped {
            T::zero()
        } else {
            beta * p.powf(gamma) * (p - gamma * (one - p) * (one - p).ln())
        };
        (loss, grad)
    }
}

/// Mean over classes of the focal sigmoid cross-entropy.
pub fn focal_sigmoid_ce<T: Scalar>(logits: &[T], targets: &[bool], alpha: T, gamma: T) -> T {
    assert_eq!(logits.len(), targets.len(), "logit/target length mismatch");
    if logits.is_empty() {
        return T::zero();
    }
    let s: T = logits
        .iter()
        .zip(targets)
        .map(|(&l, &t)| focal_sigmoid_term(l, t, alpha, gamma).0)
        .sum();
    s / T::from_usize(logits.len()).expect("len")
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

/// Focal softmax cross-entropy `-α(1-p_t)^γ log p_t` and its gradient.
pub fn focal_softmax_with_grad<T: Scalar>(logits: &[T], target: usize, alpha: T, gamma: T) -> (T, Vec<T>) {
    let logp = log_softmax(logits);
    let p: Vec<T> = logp.iter().map(|l| l.exp()).collect();
    let pt = p[target];
    let one = T::one();
    let q = (one - pt).max(T::zero());
    let loss = -alpha * q.powf(gamma) * logp[target];
    // dL/dp_t · p_t, then chain through softmax: d p_t/dx_k = p_t(δ_tk − p_k).
    let focal_part = if gamma == T::zero() {
        T::zero()
    } else {
        gamma * q.powf(gamma - one) * pt * logp[target]
    };
    let coef = alpha * (focal_part - q.powf(gamma));
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| {
            let delta = if k == target { one } else { T::zero() };
            coef * (delta - pk)
        })
        .collect();
    (loss, grad)
}

pub fn focal_softmax_ce<T: Scalar>(logits: &[T], target: usize, alpha: T, gamma: T) -> T {
    focal_softmax_with_grad(logits, target, alpha, gamma).0
}

/// `1 − GIoU` with its gradient with respect to the predicted `(cx, cy, w, h)`.
fn giou_loss_with_grad<T: Scalar>(pred: [T; 4], gt: &BBox) -> (T, [T; 4]) {
    let half = T::c(0.5);
    let zero = T::zero();
    let one = T::one();
    let [cx, cy, w, h] = pred;
    let (px0, px1, py0, py1) = (cx - half * w, cx + half * w, cy - half * h, cy + half * h);
    let gc = gt.corners();
    let (gx0, gx1, gy0, gy1) = (T::c(gc.x0), T::c(gc.x1), T::c(gc.y0), T::c(gc.y1));

    let iw_raw = px1.min(gx1) - px0.max(gx0);
    let ih_raw = py1.min(gy1) - py0.max(gy0);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;
    let area_p = w * h;
    let area_g = T::c(gt.w * gt.h);
    let union = area_p + area_g - inter;
    let ew = px1.max(gx1) - px0.min(gx0);
    let eh = py1.max(gy1) - py0.min(gy0);
    let enclose = ew * eh;
    let giou = inter / union - (enclose - union) / enclose;
    let loss = one - giou;

    // d iw / d(px0, px1), d ew / d(px0, px1); analogous in y.
    let (diw_x0, diw_x1) = if iw_raw > zero {
        (if px0 > gx0 { -one } else { zero }, if px1 < gx1 { one } else { zero })
    } else {
        (zero, zero)
    };
    let (dih_y0, dih_y1) = if ih_raw > zero {
        (if py0 > gy0 { -one } else { zero }, if py1 < gy1 { one } else { zero })
    } else {
        (zero, zero)
    };
    let dew_x0 = if px0 < gx0 { -one } else { zero };
    let dew_x1 = if px1 > gx1 { one } else { zero };
    let deh_y0 = if py0 < gy0 { -one } else { zero };
    let deh_y1 = if py1 > gy1 { one } else { zero };

    // dG = dI·(1/U + I/U² − 1/E) + dA·(1/E − I/U²) − dE·U/E²
    let ci = one / union + inter / (union * union) - one / enclose;
    let ca = one / enclose - inter / (union * union);
    let ce = -union / (enclose * enclose);

    let dg_x0 = ci * ih * diw_x0 + ce * eh * dew_x0;
    let dg_x1 = ci * ih * diw_x1 + ce * eh * dew_x1;
    let dg_y0 = ci * iw * dih_y0 + ce * ew * deh_y0;
    let dg_y1 = ci * iw * dih_y1 + ce * ew * deh_y1;
    let dg_w_area = ca * h;
    let dg_h_area = ca * w;

    let dcx = dg_x0 + dg_x1;
    let dcy = dg_y0 + dg_y1;
    let dw = half * (dg_x1 - dg_x0) + dg_w_area;
    let dh = half * (dg_y1 - dg_y0) + dg_h_area;
    (loss, [-dcx, -dcy, -dw, -dh])
}

/// `λ_l1·‖pred − gt‖₁ + λ_giou·(1 − GIoU)` and its gradient.
pub fn box_loss_with_grad<T: Scalar>(pred: [T; 4], gt: &BBox, weights: &LossWeights) -> Result<(T, [T; 4])> {
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::DegenerateBox { w: gt.w, h: gt.h });
    }
    let l1w = T::c(weights.l1);
    let gw = T::c(weights.giou);
    let g = gt.as_array();
    let mut l1 = T::zero();
    let mut grad = [T::zero(); 4];
    for k in 0..4 {
        let d = pred[k] - T::c(g[k]);
        l1 += d.abs();
        grad[k] = l1w * d.signum() * if d == T::zero() { T::zero() } else { T::one() };
    }
    let (gl, gg) = giou_loss_with_grad(pred, gt);
    for k in 0..4 {
        grad[k] += gw * gg[k];
    }
    Ok((l1w * l1 + gw * gl, grad))
}

pub fn box_loss(pred: &BBox, gt: &BBox, weights: &LossWeights) -> Result<f64> {
    Ok(box_loss_with_grad(pred.as_array(), gt, weights)?.0)
}

/// L1 and GIoU components of the box loss, unweighted.
pub fn box_loss_parts(pred: &BBox, gt: &BBox) -> (f64, f64) {
    let l1 = pred
        .as_array()
        .iter()
        .zip(gt.as_array())
        .map(|(a, b)| (a - b).abs())
        .sum();
    (l1, 1.0 - crate::geometry::giou(pred, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bce(logit: f64, positive: bool) -> f64 {
        let p = sigmoid(logit);
        if positive {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn focal_sigmoid_reduces_to_half_bce() {
        let logits = [0.3, -1.2, 2.0, 0.0];
        let targets = [true, false, false, true];
        let got = focal_sigmoid_ce(&logits, &targets, 0.5, 0.0);
        let want = 0.5 * logits.iter().zip(&targets).map(|(&l, &t)| bce(l, t)).sum::<f64>() / 4.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn focal_sigmoid_hand_value() {
        // terms: 0.25·0.5²·ln2 and 0.75·0.5²·ln2, mean over 2 classes
        let got = focal_sigmoid_ce(&[0.0, 0.0], &[true, false], 0.25, 2.0);
        let want = 0.25 * std::f64::consts::LN_2 * 0.5;
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.0866).abs() < 1e-4);
    }

    #[test]
    fn focal_sigmoid_saturates() {
        assert!(focal_sigmoid_ce(&[20.0], &[true], 0.25, 2.0) < 1e-12);
    }

    #[test]
    fn focal_softmax_uniform_closed_form() {
        let got = focal_softmax_ce(&[0.0; 4], 2, 0.25, 2.0);
        let want = -0.25 * 0.75f64.powi(2) * 0.25f64.ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn focal_softmax_limits() {
        assert!(focal_softmax_ce(&[50.0, 0.0, 0.0], 0, 0.25, 2.0) < 1e-12);
        let logits = [0.5f64, -0.2, 1.3];
        let ce = -log_softmax(&logits)[1];
        assert!((focal_softmax_ce(&logits, 1, 1.0, 0.0) - ce).abs() < 1e-12);
    }

    #[test]
    fn focal_gradients_match_finite_differences() {
        let eps = 1e-6;
        for &(l, t) in &[(0.3f64, true), (-1.7, false), (2.2, false), (-0.4, true)] {
            let (_, g) = focal_sigmoid_term(l, t, 0.25, 2.0);
            let num = (focal_sigmoid_term(l + eps, t, 0.25, 2.0).0 - focal_sigmoid_term(l - eps, t, 0.25, 2.0).0)
                / (2.0 * eps);
            assert!((g - num).abs() < 1e-8, "{l} {t}: {g} vs {num}");
        }
        let logits = [0.2f64, -0.5, 1.1, 0.0];
        let (_, g) = focal_softmax_with_grad(&logits, 2, 0.25, 2.0);
        for k in 0..4 {
            let mut lp = logits;
            lp[k] += eps;
            let mut lm = logits;
            lm[k] -= eps;
            let num = (focal_softmax_ce(&lp, 2, 0.25, 2.0) - focal_softmax_ce(&lm, 2, 0.25, 2.0)) / (2.0 * eps);
            assert!((g[k] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn box_loss_cases() {
        let w = LossWeights::default();
        let b = BBox::new(0.4, 0.5, 0.2, 0.3);
        assert!(box_loss(&b, &b, &w).unwrap().abs() < 1e-12);
        let a = BBox::new(0.1, 0.1, 0.1, 0.1);
        let c = BBox::new(0.9, 0.9, 0.1, 0.1);
        let (_, giou_term) = box_loss_parts(&a, &c);
        assert!(giou_term > 1.0);
        assert!(box_loss(&a, &BBox::new(0.5, 0.5, 0.0, 0.1), &w).is_err());
    }

    #[test]
    fn box_gradient_matches_finite_differences() {
        let w = LossWeights::default();
        let gt = BBox::new(0.45, 0.52, 0.32, 0.2);
        for pred in [[0.5f64, 0.5, 0.2, 0.25], [0.2, 0.7, 0.1, 0.1], [0.46, 0.5, 0.5, 0.4]] {
            let (_, g) = box_loss_with_grad(pred, &gt, &w).unwrap();
            for k in 0..4 {
                let eps = 1e-6;
                let mut p = pred;
                p[k] += eps;
                let mut m = pred;
                m[k] -= eps;
                let num = (box_loss_with_grad(p, &gt, &w).unwrap().0 - box_loss_with_grad(m, &gt, &w).unwrap().0)
                    / (2.0 * eps);
                assert!((g[k] - num).abs() < 1e-6, "{pred:?}[{k}]: {} vs {num}", g[k]);
            }
        }
    }
}
