//! Detection and orientation losses with exact gradients.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the prediction. The arccos-based terms clamp their argument
//! to `[-1 + 1e-9, 1 − 1e-9]`, which keeps gradients finite when a
//! prediction is perfectly aligned with its target.

use std::f64::consts::PI;

use crate::error::{QuanError, Result};
use crate::quaternion::Quaternion;

pub const ACOS_CLAMP: f64 = 1e-9;
const CIOU_EPS: f64 = 1e-9;

/// An axis-aligned box `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxXywh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxXywh {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BoxXywh { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxXywh::new(a[0], a[1], a[2], a[3])
    }
}

/// Ground truth for one oriented object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedTarget {
    pub center: (f64, f64),
    pub size: (f64, f64),
    pub orientation: Quaternion,
    pub class_id: usize,
}

impl OrientedTarget {
    pub fn new(center: (f64, f64), size: (f64, f64), orientation: Quaternion, class_id: usize) -> Result<Self> {
        if !(size.0 > 0.0 && size.1 > 0.0) {
            return Err(QuanError::Domain(format!("box size must be positive, got {size:?}")));
        }
        if !orientation.is_unit() {
            return Err(QuanError::Domain("orientation must be a unit quaternion".into()));
        }
        Ok(OrientedTarget {
            center,
            size,
            orientation,
            class_id,
        })
    }

    pub fn bbox(&self) -> BoxXywh {
        BoxXywh::new(self.center.0, self.center.1, self.size.0, self.size.1)
    }
}

/// Weights of the angular, regularization and smoothness terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(QuanError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// `∂L_total/∂term` for `[cls, ciou, angular, reg, smooth]`.
    pub fn coefficients(&self) -> [f64; 5] {
        [1.0, 1.0, self.lambda1, self.lambda2, self.lambda3]
    }
}

/// Values of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub cls: f64,
    pub ciou: f64,
    pub angular: f64,
    pub reg: f64,
    pub smooth: f64,
}

impl LossTerms {
    pub fn to_array(self) -> [f64; 5] {
        [self.cls, self.ciou, self.angular, self.reg, self.smooth]
    }
}

/// `L_cls + L_CIoU + λ1·L_angular + λ2·L_reg + λ3·L_smooth`.
///
/// Term gradients scale by [`LossWeights::coefficients`].
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let t = terms.to_array();
    if let Some(bad) = t.iter().find(|v| !v.is_finite()) {
        return Err(QuanError::Numeric(format!("non-finite loss term {bad}")));
    }
    Ok(t.iter().zip(w.coefficients()).map(|(a, b)| a * b).sum())
}

/// Which classification loss applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClsMode {
    /// Softmax cross-entropy, for single-label classification.
    #[default]
    Softmax,
    /// Per-class binary cross-entropy on logits, summed over classes.
    Binary,
}

/// Classification loss averaged over the batch; `logits` is `B × classes`.
pub fn cls_loss(logits: &[f64], labels: &[usize], classes: usize, mode: ClsMode) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(QuanError::Shape(format!(
            "{} logits for {} labels over {classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(QuanError::Index { index: bad, limit: classes });
    }
    match mode {
        ClsMode::Softmax => softmax_cross_entropy(logits, labels, classes),
        ClsMode::Binary => {
            let mut targets = vec![0.0; logits.len()];
            for (b, &l) in labels.iter().enumerate() {
                targets[b * classes + l] = 1.0;
            }
            bce_with_logits(logits, &targets, classes)
        }
    }
}

pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let batch = labels.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for ((row, g), &label) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        for (gi, z) in g.iter_mut().zip(row) {
            *gi = (z - log_z).exp() / batch;
        }
        g[label] -= 1.0 / batch;
    }
    Ok((loss / batch, grad))
}

/// Binary cross-entropy with logits; `targets` in `[0, 1]`, same layout as `logits`.
pub fn bce_with_logits(logits: &[f64], targets: &[f64], classes: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() || classes == 0 || logits.len() % classes != 0 {
        return Err(QuanError::Shape("logit and target layouts differ".into()));
    }
    let batch = (logits.len() / classes) as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(targets) {
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let s = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
        grad.push((s - y) / batch);
    }
    Ok((loss / batch, grad))
}

/// Complete-IoU loss `1 − IoU + ρ²/c² + α·v` and its gradient with respect to
/// `pred = (cx, cy, w, h)`. `α` is differentiated as well.
pub fn ciou_loss(pred: BoxXywh, target: BoxXywh) -> Result<(f64, [f64; 4])> {
    for b in [pred, target] {
        if !(b.w > 0.0 && b.h > 0.0) {
            return Err(QuanError::Domain(format!("box sizes must be positive, got {b:?}")));
        }
    }
    let (px1, px2) = (pred.cx - 0.5 * pred.w, pred.cx + 0.5 * pred.w);
    let (py1, py2) = (pred.cy - 0.5 * pred.h, pred.cy + 0.5 * pred.h);
    let (tx1, tx2) = (target.cx - 0.5 * target.w, target.cx + 0.5 * target.w);
    let (ty1, ty2) = (target.cy - 0.5 * target.h, target.cy + 0.5 * target.h);

    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = pred.w * pred.h + target.w * target.h - inter;
    let iou = inter / union;

    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let c2 = cw * cw + ch * ch;
    let (dx, dy) = (pred.cx - target.cx, pred.cy - target.cy);
    let rho2 = dx * dx + dy * dy;

    let k = 4.0 / (PI * PI);
    let da = target.w.atan2(target.h) - pred.w.atan2(pred.h);
    let v = k * da * da;
    let denom = 1.0 - iou + v + CIOU_EPS;
    let alpha = v / denom;
    let loss = 1.0 - iou + rho2 / c2 + alpha * v;

    // Reverse pass. Coordinates are accumulated as (x1, x2, y1, y2) then folded
    // into (cx, cy, w, h).
    let g_iou = -1.0 + v * v / (denom * denom);
    let g_v = alpha + v / denom - v * v / (denom * denom);

    let g_inter = g_iou * (union + inter) / (union * union);
    let g_area = -g_iou * inter / (union * union);
    let mut g = [0.0f64; 4]; // cx, cy, w, h
    g[2] += g_area * pred.h;
    g[3] += g_area * pred.w;

    let mut gx = [0.0f64; 2]; // x1, x2
    let mut gy = [0.0f64; 2]; // y1, y2
    if iw_raw > 0.0 && ih_raw > 0.0 {
        let g_iw = g_inter * ih;
        let g_ih = g_inter * iw;
        if px2 < tx2 {
            gx[1] += g_iw;
        }
        if px1 > tx1 {
            gx[0] -= g_iw;
        }
        if py2 < ty2 {
            gy[1] += g_ih;
        }
        if py1 > ty1 {
            gy[0] -= g_ih;
        }
    }

    let g_c2 = -rho2 / (c2 * c2);
    let (g_cw, g_ch) = (g_c2 * 2.0 * cw, g_c2 * 2.0 * ch);
    if px2 > tx2 {
        gx[1] += g_cw;
    }
    if px1 < tx1 {
        gx[0] -= g_cw;
    }
    if py2 > ty2 {
        gy[1] += g_ch;
    }
    if py1 < ty1 {
        gy[0] -= g_ch;
    }

    g[0] += 2.0 * dx / c2 + gx[0] + gx[1];
    g[1] += 2.0 * dy / c2 + gy[0] + gy[1];
    g[2] += 0.5 * (gx[1] - gx[0]);
    g[3] += 0.5 * (gy[1] - gy[0]);

    let r2 = pred.w * pred.w + pred.h * pred.h;
    g[2] += g_v * -2.0 * k * da * pred.h / r2;
    g[3] += g_v * 2.0 * k * da * pred.w / r2;

    Ok((loss, g))
}

/// `acos(|⟨a, b⟩|)` for unit `a, b`, with the gradient with respect to `a`.
fn half_angle(a: Quaternion, b: Quaternion) -> (f64, Quaternion) {
    let d = a.dot(b);
    let c = d.clamp(-1.0 + ACOS_CLAMP, 1.0 - ACOS_CLAMP);
    let value = c.abs().acos();
    let slope = if d.abs() > 1.0 - ACOS_CLAMP {
        0.0
    } else {
        -d.signum() / (1.0 - c * c).sqrt()
    };
    (value, b.scale(slope))
}

/// Pulls a gradient with respect to `p / ‖p‖` back to `p`.
fn through_normalization(p: Quaternion, u: Quaternion, g: Quaternion) -> Quaternion {
    (g - u.scale(u.dot(g))).scale(1.0 / p.norm())
}

/// Geodesic angle between the normalized prediction and a unit target.
pub fn angular_loss(pred: Quaternion, target: Quaternion) -> Result<(f64, Quaternion)> {
    if !target.is_unit() {
        return Err(QuanError::Domain(format!(
            "angular target must be a unit quaternion, norm {}",
            target.norm()
        )));
    }
    let u = pred.normalized()?;
    let (h, g) = half_angle(u, target);
    Ok((2.0 * h, through_normalization(pred, u, g.scale(2.0))))
}

/// `(‖q‖ − 1)²`. The gradient at `q = 0` is taken as zero.
pub fn reg_loss(q: Quaternion) -> (f64, Quaternion) {
    let n = q.norm();
    let value = (n - 1.0) * (n - 1.0);
    if n == 0.0 {
        return (value, Quaternion::default());
    }
    (value, q.scale(2.0 * (n - 1.0) / n))
}

/// Mean over consecutive pairs of `acos(|⟨q_t, q_{t+1}⟩|)`, each quaternion
/// normalized first.
pub fn smooth_loss(seq: &[Quaternion]) -> Result<(f64, Vec<Quaternion>)> {
    if seq.len() < 2 {
        return Err(QuanError::Range(format!(
            "smoothness needs at least two orientations, got {}",
            seq.len()
        )));
    }
    let units = seq.iter().map(|q| q.normalized()).collect::<Result<Vec<_>>>()?;
    let pairs = (seq.len() - 1) as f64;
    let mut loss = 0.0;
    let mut gu = vec![Quaternion::default(); seq.len()];
    for t in 0..seq.len() - 1 {
        let (v, ga) = half_angle(units[t], units[t + 1]);
        let (_, gb) = half_angle(units[t + 1], units[t]);
        loss += v;
        gu[t] = gu[t] + ga.scale(1.0 / pairs);
        gu[t + 1] = gu[t + 1] + gb.scale(1.0 / pairs);
    }
    let grads = seq
        .iter()
        .zip(&units)
        .zip(&gu)
        .map(|((&p, &u), &g)| through_normalization(p, u, g))
        .collect();
    Ok((loss / pairs, grads))
}
