//! Loss terms and their gradients with respect to head outputs.

use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::{FsdError, Result};
use crate::geometry::CODE_LEN;
use crate::tensor::FeatureArray;

/// Confidence target from the IoU between a proposal and its ground truth.
#[inline]
pub fn soft_label(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(0.0, 1.0)
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Softmax focal loss summed over rows, with its gradient.
///
/// The last column is background. Per row with target `t`:
/// `−α_t (1 − p_t)^γ ln p_t`, where `α_t = α` for foreground targets and
/// `1 − α` for background.
pub fn focal_loss_sum(logits: &FeatureArray, targets: &[usize], gamma: f64, alpha: f64) -> Result<(f64, FeatureArray)> {
    if logits.n() != targets.len() {
        return Err(FsdError::contract(format!(
            "focal loss: {} logit rows but {} targets",
            logits.n(),
            targets.len()
        )));
    }
    let k = logits.c();
    let bg = k.saturating_sub(1);
    let mut grad = FeatureArray::zeros(logits.n(), k);
    let mut logp = vec![0.0; k];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(FsdError::contract(format!(
                "target class {t} out of range for {k} logits"
            )));
        }
        log_softmax_row(logits.row(i), &mut logp);
        let lpt = logp[t];
        let pt = lpt.exp();
        let a = if t == bg { 1.0 - alpha } else { alpha };
        let one_m = (1.0 - pt).max(0.0);
        total += -a * one_m.powf(gamma) * lpt;
        // dL/dz_j = a [γ (1−p_t)^(γ−1) p_t ln p_t − (1−p_t)^γ] (δ_tj − p_j)
        let lead = if gamma == 0.0 {
            0.0
        } else {
            gamma * one_m.powf(gamma - 1.0) * pt * lpt
        };
        let coef = a * (lead - one_m.powf(gamma));
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            *g = coef * (delta - logp[j].exp());
        }
    }
    Ok((total, grad))
}

/// Mean focal loss over rows.
pub fn focal_loss(logits: &FeatureArray, targets: &[usize], gamma: f64, alpha: f64) -> Result<f64> {
    let (s, _) = focal_loss_sum(logits, targets, gamma, alpha)?;
    Ok(if targets.is_empty() {
        0.0
    } else {
        s / targets.len() as f64
    })
}

fn check_masked(pred: &FeatureArray, target: &FeatureArray, mask: &[bool]) -> Result<()> {
    if pred.shape() != target.shape() || mask.len() != pred.n() {
        return Err(FsdError::contract(format!(
            "L1 loss shapes differ: pred {:?}, target {:?}, mask {}",
            pred.shape(),
            target.shape(),
            mask.len()
        )));
    }
    Ok(())
}

/// Sum over masked rows of `Σ|pred − target|`, divided by the masked row
/// count. An empty mask gives zero.
pub fn l1_loss(pred: &FeatureArray, target: &FeatureArray, mask: &[bool]) -> Result<f64> {
    Ok(l1_loss_grad(pred, target, mask)?.0)
}

pub fn l1_loss_grad(pred: &FeatureArray, target: &FeatureArray, mask: &[bool]) -> Result<(f64, FeatureArray)> {
    check_masked(pred, target, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = FeatureArray::zeros(pred.n(), pred.c());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let s = 1.0 / count as f64;
    let mut total = 0.0;
    for i in (0..pred.n()).filter(|&i| mask[i]) {
        for ((g, p), t) in grad.row_mut(i).iter_mut().zip(pred.row(i)).zip(target.row(i)) {
            let d = p - t;
            total += d.abs();
            *g = d.signum() * s;
        }
    }
    Ok((total * s, grad))
}

/// L1 on box codes where a box and its half-turn are the same box: per row,
/// the smaller of the losses against `(…, sin, cos)` and `(…, −sin, −cos)`.
pub fn box_l1_loss_grad(pred: &FeatureArray, target: &FeatureArray, mask: &[bool]) -> Result<(f64, FeatureArray)> {
    check_masked(pred, target, mask)?;
    if pred.c() != CODE_LEN {
        return Err(FsdError::contract(format!(
            "box codes have {CODE_LEN} channels, got {}",
            pred.c()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = FeatureArray::zeros(pred.n(), pred.c());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let s = 1.0 / count as f64;
    let mut total = 0.0;
    for i in (0..pred.n()).filter(|&i| mask[i]) {
        let p = pred.row(i);
        let t = target.row(i);
        let mut flipped = [0.0; CODE_LEN];
        flipped.copy_from_slice(t);
        flipped[6] = -t[6];
        flipped[7] = -t[7];
        let cost = |tt: &[f64]| p.iter().zip(tt).map(|(a, b)| (a - b).abs()).sum::<f64>();
        let (best, c) = if cost(&flipped) < cost(t) {
            (&flipped[..], cost(&flipped))
        } else {
            (t, cost(t))
        };
        total += c;
        for ((g, a), b) in grad.row_mut(i).iter_mut().zip(p).zip(best) {
            *g = (a - b).signum() * s;
        }
    }
    Ok((total * s, grad))
}

/// Binary cross entropy of a logit against a soft label, summed, with gradient.
pub fn bce_logits_sum(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &q) in logits.iter().zip(labels) {
        // softplus(z) − q z, stable for large |z|
        let sp = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        total += sp - q * z;
        grad.push(sigmoid(z) - q);
    }
    (total, grad)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The six training terms, each already normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sem: f64,
    pub l_vote: f64,
    pub l_reg: f64,
    pub l_cls: f64,
    pub l_res: f64,
    pub l_iou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 6] {
        [self.l_sem, self.l_vote, self.l_reg, self.l_cls, self.l_res, self.l_iou]
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Head outputs and targets for one scene.
pub struct LossInputs<'a> {
    /// Per point, `num_classes + 1` logits (background last).
    pub sem_logits: &'a FeatureArray,
    pub sem_targets: &'a [usize],
    pub vote_offsets: &'a FeatureArray,
    pub vote_targets: &'a FeatureArray,
    pub vote_mask: &'a [bool],
    /// Per first-stage group.
    pub cls_logits: &'a FeatureArray,
    pub cls_targets: &'a [usize],
    pub reg_pred: &'a FeatureArray,
    pub reg_targets: &'a FeatureArray,
    pub reg_mask: &'a [bool],
    /// Per refined group.
    pub res_pred: &'a FeatureArray,
    pub res_targets: &'a FeatureArray,
    pub res_mask: &'a [bool],
    pub iou_logits: &'a [f64],
    pub iou_labels: &'a [f64],
}

/// Gradients of the weighted total with respect to each head output.
pub struct LossGrads {
    pub sem_logits: FeatureArray,
    pub vote_offsets: FeatureArray,
    pub cls_logits: FeatureArray,
    pub reg_pred: FeatureArray,
    pub res_pred: FeatureArray,
    pub iou_logits: Vec<f64>,
}

/// Assembles the six terms.
///
/// Normalization: the two focal terms divide by their positive counts
/// (foreground points, positive groups); the L1 terms divide by the number
/// of supervised rows; the confidence term averages over refined groups.
pub fn total_loss(inp: &LossInputs<'_>, cfg: &LossConfig) -> Result<(LossBreakdown, LossGrads)> {
    let bg_sem = inp.sem_logits.c().saturating_sub(1);
    let bg_cls = inp.cls_logits.c().saturating_sub(1);
    let n_fg = inp.sem_targets.iter().filter(|&&t| t != bg_sem).count().max(1) as f64;
    let n_pos = inp.cls_targets.iter().filter(|&&t| t != bg_cls).count().max(1) as f64;

    let (sem, mut d_sem) = focal_loss_sum(inp.sem_logits, inp.sem_targets, cfg.focal_gamma, cfg.focal_alpha)?;
    let l_sem = sem / n_fg;
    d_sem.scale(cfg.w_sem / n_fg);

    let (l_vote, mut d_vote) = l1_loss_grad(inp.vote_offsets, inp.vote_targets, inp.vote_mask)?;
    d_vote.scale(cfg.w_vote);

    let (cls, mut d_cls) = focal_loss_sum(inp.cls_logits, inp.cls_targets, cfg.focal_gamma, cfg.focal_alpha)?;
    let l_cls = cls / n_pos;
    d_cls.scale(cfg.w_cls / n_pos);

    let (l_reg, mut d_reg) = box_l1_loss_grad(inp.reg_pred, inp.reg_targets, inp.reg_mask)?;
    d_reg.scale(cfg.w_reg);

    let (l_res, mut d_res) = box_l1_loss_grad(inp.res_pred, inp.res_targets, inp.res_mask)?;
    d_res.scale(cfg.w_res);

    if inp.iou_logits.len() != inp.iou_labels.len() {
        return Err(FsdError::contract("confidence logits and labels differ in length"));
    }
    let (iou_sum, mut d_iou) = bce_logits_sum(inp.iou_logits, inp.iou_labels);
    let m2 = inp.iou_logits.len().max(1) as f64;
    let l_iou = iou_sum / m2;
    d_iou.iter_mut().for_each(|g| *g *= cfg.w_iou / m2);

    let total = cfg.w_sem * l_sem
        + cfg.w_vote * l_vote
        + cfg.w_reg * l_reg
        + cfg.w_cls * l_cls
        + cfg.w_res * l_res
        + cfg.w_iou * l_iou;
    Ok((
        LossBreakdown {
            l_sem,
            l_vote,
            l_reg,
            l_cls,
            l_res,
            l_iou,
            total,
        },
        LossGrads {
            sem_logits: d_sem,
            vote_offsets: d_vote,
            cls_logits: d_cls,
            reg_pred: d_reg,
            res_pred: d_res,
            iou_logits: d_iou,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input;
    use crate::testutil::random_array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn soft_label_clamps() {
        assert_eq!(soft_label(0.75), 1.0);
        assert_eq!(soft_label(0.5), 0.5);
        assert_eq!(soft_label(0.25), 0.0);
        assert_eq!(soft_label(0.0), 0.0);
        assert_eq!(soft_label(1.0), 1.0);
    }

    #[test]
    fn confident_correct_focal_vanishes() {
        let logits = FeatureArray::from_rows(&[[40.0, 0.0, 0.0]]).unwrap();
        let l = focal_loss(&logits, &[0], 2.0, 0.25).unwrap();
        assert!(l < 1e-15);
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_array(&mut rng, 12, 4);
        // foreground targets only, so α_t = α = 1
        let targets: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let focal = focal_loss(&logits, &targets, 0.0, 1.0).unwrap();
        let mut ce = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let z = logits.row(i);
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            ce += lse - z[t];
        }
        ce /= 12.0;
        assert!((focal - ce).abs() < 1e-12);
        // with mixed targets, α = ½ halves cross entropy
        let mixed: Vec<usize> = (0..12).map(|i| i % 4).collect();
        let half = focal_loss(&logits, &mixed, 0.0, 0.5).unwrap();
        let full: f64 = mixed
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let z = logits.row(i);
                z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[t]
            })
            .sum::<f64>()
            / 12.0;
        assert!((half - 0.5 * full).abs() < 1e-12);
    }

    #[test]
    fn focal_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = random_array(&mut rng, 40, 5);
        let targets: Vec<usize> = (0..40).map(|_| rng.random_range(0..5)).collect();
        let got = focal_loss(&logits, &targets, 2.0, 0.25).unwrap();
        let mut want = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let z = logits.row(i);
            let p = z[t].exp() / z.iter().map(|v| v.exp()).sum::<f64>();
            let a = if t == 4 { 0.75 } else { 0.25 };
            want += -a * (1.0 - p).powi(2) * p.ln();
        }
        want /= 40.0;
        assert!((got - want).abs() < 1e-10);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = random_array(&mut rng, 10, 4);
        let targets: Vec<usize> = (0..10).map(|_| rng.random_range(0..4)).collect();
        let (_, g) = focal_loss_sum(&logits, &targets, 2.0, 0.25).unwrap();
        let r = check_input(
            "focal",
            &logits,
            &g,
            |z| focal_loss_sum(z, &targets, 2.0, 0.25).unwrap().0,
            1e-6,
        );
        assert!(r.passes(1e-6), "{}", r.rel_err);
    }

    #[test]
    fn l1_cases() {
        let p = FeatureArray::from_rows(&[[2.0]]).unwrap();
        let t = FeatureArray::from_rows(&[[5.0]]).unwrap();
        assert_eq!(l1_loss(&p, &t, &[true]).unwrap(), 3.0);
        assert_eq!(l1_loss(&p, &p, &[true]).unwrap(), 0.0);
        assert_eq!(l1_loss(&p, &t, &[false]).unwrap(), 0.0);
        assert!(l1_loss(&p, &t, &[]).is_err());
    }

    #[test]
    fn l1_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_array(&mut rng, 30, 3);
        let t = random_array(&mut rng, 30, 3);
        let mask: Vec<bool> = (0..30).map(|_| rng.random_bool(0.5)).collect();
        let mut s = 0.0;
        let mut k = 0;
        for i in 0..30 {
            if mask[i] {
                k += 1;
                for j in 0..3 {
                    s += (p.get(i, j) - t.get(i, j)).abs();
                }
            }
        }
        assert!((l1_loss(&p, &t, &mask).unwrap() - s / k as f64).abs() < 1e-12);
    }

    #[test]
    fn box_l1_accepts_half_turn() {
        let t = FeatureArray::from_rows(&[[0.0, 0.0, 0.0, 1.0, 0.5, 0.2, 0.6, 0.8]]).unwrap();
        let flipped = FeatureArray::from_rows(&[[0.0, 0.0, 0.0, 1.0, 0.5, 0.2, -0.6, -0.8]]).unwrap();
        let (l, _) = box_l1_loss_grad(&flipped, &t, &[true]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn bce_floor_and_gradient() {
        let (l, g) = bce_logits_sum(&[60.0, -60.0], &[1.0, 0.0]);
        assert!(l < 1e-20);
        assert!(g.iter().all(|v| v.abs() < 1e-20));
        let (l, g) = bce_logits_sum(&[0.0], &[0.5]);
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert_eq!(g, vec![0.0]);
    }
}
