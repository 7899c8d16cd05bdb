//! Supervised pose losses: Huber on the rotation geodesic angle, plus
//! absolute, normalized, and angular translation terms.
//!
//! Every term exists in a plain (value) form for logging and a tape form for
//! training; both run through the same kernels, so they agree to the last
//! bit. Angles are in radians here (the Huber quadratic zone is meaningful
//! at radian scale); degrees appear only in reports.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{gram_schmidt_6d, GeometryError, Pose};
use crate::tensor::{self as k, GradientTape, Tensor, Var};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_tn: f64,
    pub lambda_ta: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_t: 1.0,
            lambda_tn: 1.0,
            lambda_ta: 1.0,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.lambda_t >= 0.0
            && self.lambda_tn >= 0.0
            && self.lambda_ta >= 0.0
            && self.huber_delta > 0.0
            && [self.lambda_t, self.lambda_tn, self.lambda_ta, self.huber_delta]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(
                "loss weights must be finite and nonnegative with huber_delta > 0".into(),
            ))
        }
    }
}

/// Huber of the geodesic rotation angle (radians).
pub fn loss_rotation(r: &Matrix3<f64>, rgt: &Matrix3<f64>, w: &LossWeights) -> f64 {
    let c = ((r.transpose() * rgt).trace() - 1.0) / 2.0;
    k::huber_of_arccos(&Tensor::scalar(c), w.huber_delta).item()
}

/// The three translation terms of the loss. `degenerate` marks a pair where
/// either translation norm fell below 1e-12, zeroing the direction terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TranslationLoss {
    pub l_t: f64,
    pub l_tn: f64,
    pub l_ta: f64,
    pub degenerate: bool,
}

/// Componentwise-Huber absolute error, unit-vector difference, and angular
/// error of the translation.
pub fn loss_translation(
    t: &Vector3<f64>,
    tgt: &Vector3<f64>,
    w: &LossWeights,
) -> TranslationLoss {
    let delta = w.huber_delta;
    let diff = Tensor::row_vector(&[t.x - tgt.x, t.y - tgt.y, t.z - tgt.z]);
    let l_t = k::sum_all(&k::huber(&diff, delta)).item();

    let (nt, ng) = (t.norm(), tgt.norm());
    if nt < 1e-12 || ng < 1e-12 {
        return TranslationLoss {
            l_t,
            l_tn: 0.0,
            l_ta: 0.0,
            degenerate: true,
        };
    }
    let ut = t / nt;
    let ug = tgt / ng;
    let udiff = Tensor::row_vector(&[ut.x - ug.x, ut.y - ug.y, ut.z - ug.z]);
    let l_tn = k::sum_all(&k::huber(&udiff, delta)).item();
    let cos = t.dot(tgt) / (nt * ng);
    let l_ta = k::huber_of_arccos(&Tensor::scalar(cos), delta).item();
    TranslationLoss {
        l_t,
        l_tn,
        l_ta,
        degenerate: false,
    }
}

/// Weighted total loss on plain values: rotation term through the 6d
/// orthonormalization plus the three translation terms.
pub fn loss_total(
    r6: &[f64; 6],
    t: &[f64; 3],
    gt: &Pose,
    w: &LossWeights,
) -> Result<f64, GeometryError> {
    let r = gram_schmidt_6d(r6)?;
    let tv = Vector3::new(t[0], t[1], t[2]);
    let lr = loss_rotation(&r, &gt.r, w);
    let lt = loss_translation(&tv, &gt.t, w);
    Ok(lr + w.lambda_t * lt.l_t + w.lambda_tn * lt.l_tn + w.lambda_ta * lt.l_ta)
}

/// Differentiable 6d -> SO(3) orthonormalization on the tape; returns the
/// three rotation columns as 1x3 row vectors.
pub fn gram_schmidt_on_tape<'t>(
    r6: Var<'t>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>), TrainError> {
    let a = r6.slice_cols(0, 3)?;
    let b = r6.slice_cols(3, 3)?;
    let na = a.l2_norm()?;
    if na.item() < 1e-12 {
        return Err(GeometryError::DegenerateSixD("first 3-vector near zero").into());
    }
    let b1 = a.div_by_scalar(na)?;
    let proj = b1.dot(b)?;
    let resid = b.sub(b1.mul_by_scalar(proj)?)?;
    let nr = resid.l2_norm()?;
    if nr.item() < 1e-12 {
        return Err(GeometryError::DegenerateSixD("second 3-vector parallel to first").into());
    }
    let b2 = resid.div_by_scalar(nr)?;
    let b3 = b1.cross3(b2)?;
    Ok((b1, b2, b3))
}

/// Tape version of [`loss_total`], differentiable end-to-end through the
/// Gram-Schmidt orthonormalization. Degenerate translations zero the
/// direction terms exactly as the plain version does.
pub fn loss_total_on_tape<'t>(
    tape: &'t GradientTape,
    r6: Var<'t>,
    t: Var<'t>,
    gt: &Pose,
    w: &LossWeights,
) -> Result<Var<'t>, TrainError> {
    let delta = w.huber_delta;
    let (b1, b2, b3) = gram_schmidt_on_tape(r6)?;

    // trace(R^T Rgt) = sum_k col_k(R) . col_k(Rgt).
    let gt_col = |c: usize| {
        tape.leaf(Tensor::row_vector(&[
            gt.r[(0, c)],
            gt.r[(1, c)],
            gt.r[(2, c)],
        ]))
    };
    let tr = b1
        .dot(gt_col(0))?
        .add(b2.dot(gt_col(1))?)?
        .add(b3.dot(gt_col(2))?)?;
    let cos_r = tr.sub(tape.leaf(Tensor::scalar(1.0)))?.scale(0.5);
    let l_rot = cos_r.huber_of_arccos(delta);

    let tgt_leaf = tape.leaf(Tensor::row_vector(&[gt.t.x, gt.t.y, gt.t.z]));
    let l_t = t.sub(tgt_leaf)?.huber(delta).sum_all();

    let ng = gt.t.norm();
    let nt_val = {
        let tv = t.value();
        (tv.get(0, 0).powi(2) + tv.get(0, 1).powi(2) + tv.get(0, 2).powi(2)).sqrt()
    };
    let zero = || tape.leaf(Tensor::scalar(0.0));
    let (l_tn, l_ta) = if nt_val < 1e-12 || ng < 1e-12 {
        (zero(), zero())
    } else {
        let nt = t.l2_norm()?;
        let ut = t.div_by_scalar(nt)?;
        let ug = tape.leaf(Tensor::row_vector(&[
            gt.t.x / ng,
            gt.t.y / ng,
            gt.t.z / ng,
        ]));
        let l_tn = ut.sub(ug)?.huber(delta).sum_all();
        let cos_t = t.dot(tgt_leaf)?.div_by_scalar(nt)?.scale(1.0 / ng);
        let l_ta = cos_t.huber_of_arccos(delta);
        (l_tn, l_ta)
    };

    Ok(l_rot
        .add(l_t.scale(w.lambda_t))?
        .add(l_tn.scale(w.lambda_tn))?
        .add(l_ta.scale(w.lambda_ta))?)
}
