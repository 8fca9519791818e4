//! Overlap scores and parameter recovery error.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::staple::RaterParams;
use crate::volume::{VolumeGrid, VolumeKind};

pub const DICE_EPS: f64 = 1e-7;

const LABELS: [VolumeKind; 3] = [
    VolumeKind::BinaryLabel,
    VolumeKind::SoftLabel,
    VolumeKind::Posterior,
];

/// Smoothed soft Dice, `(sum T*P + eps) / (0.5 sum P + 0.5 sum T + eps)`.
/// Two empty grids score 1.
pub fn soft_dice(truth: &VolumeGrid, pred: &VolumeGrid) -> Result<f64> {
    truth.ensure_kind(&LABELS, "label or posterior")?;
    pred.ensure_kind(&LABELS, "label or posterior")?;
    truth.ensure_same_dims(pred)?;
    let (mut tp, mut st, mut sp) = (0.0, 0.0, 0.0);
    for (&t, &p) in truth.data().iter().zip(pred.data()) {
        tp += t * p;
        st += t;
        sp += p;
    }
    Ok((tp + DICE_EPS) / (0.5 * sp + 0.5 * st + DICE_EPS))
}

pub fn dice_loss(truth: &VolumeGrid, pred: &VolumeGrid) -> Result<f64> {
    Ok(-soft_dice(truth, pred)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dice: f64,
    /// `None` (JSON null) when nothing was predicted.
    pub precision: Option<f64>,
    /// `None` (JSON null) when the truth is empty.
    pub recall: Option<f64>,
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

/// Dice on the raw prediction plus precision and recall of the prediction
/// binarized at `threshold` (values equal to it map to 0). A soft truth is
/// rejected unless `binarize_truth` is set, in which case the same rule is
/// applied to it.
pub fn precision_recall(
    truth: &VolumeGrid,
    pred: &VolumeGrid,
    threshold: f64,
    binarize_truth: bool,
) -> Result<EvalReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    pred.ensure_kind(&LABELS, "label or posterior")?;
    truth.ensure_same_dims(pred)?;
    let truth_hard = if truth.kind() == VolumeKind::BinaryLabel {
        truth.clone()
    } else if binarize_truth {
        truth.ensure_kind(&LABELS, "label or posterior")?;
        crate::staple::binarize_at(truth, threshold)?
    } else {
        return Err(Error::WrongKind {
            expected: "binary truth",
            actual: truth.kind(),
        });
    };

    let dice = soft_dice(&truth_hard, pred)?;
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    let (mut htp, mut hfp, mut hfn) = (0u64, 0u64, 0u64);
    for (&t, &p) in truth_hard.data().iter().zip(pred.data()) {
        tp += t * p;
        fp += (1.0 - t) * p;
        fn_ += t * (1.0 - p);
        let hard = p > threshold;
        match (t == 1.0, hard) {
            (true, true) => htp += 1,
            (false, true) => hfp += 1,
            (true, false) => hfn += 1,
            (false, false) => {}
        }
    }
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    Ok(EvalReport {
        dice,
        precision: ratio(htp, htp + hfp),
        recall: ratio(htp, htp + hfn),
        tp,
        fp,
        fn_,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryError {
    pub error: f64,
    /// The estimate matched better after exchanging the labels.
    pub swapped: bool,
}

/// Max absolute error over all sensitivities and specificities. Because the
/// model is symmetric under exchanging lesion and background, the estimate is
/// also compared with its label-swapped reading, where expert `i` has
/// sensitivity `1 - spec_i` and specificity `1 - sens_i`; the smaller error wins.
pub fn param_recovery_error(estimated: &RaterParams, truth: &RaterParams) -> Result<RecoveryError> {
    estimated.validate()?;
    truth.validate()?;
    if estimated.len() != truth.len() {
        return Err(Error::ExpertCountMismatch {
            expected: truth.len(),
            actual: estimated.len(),
        });
    }
    let max_err = |sens: &dyn Fn(usize) -> f64, spec: &dyn Fn(usize) -> f64| {
        (0..truth.len())
            .map(|i| {
                let a = (sens(i) - truth.sensitivity[i]).abs();
                let b = (spec(i) - truth.specificity[i]).abs();
                a.max(b)
            })
            .fold(0.0, f64::max)
    };
    let direct = max_err(&|i| estimated.sensitivity[i], &|i| estimated.specificity[i]);
    let swapped = max_err(&|i| 1.0 - estimated.specificity[i], &|i| {
        1.0 - estimated.sensitivity[i]
    });
    Ok(if swapped < direct {
        RecoveryError {
            error: swapped,
            swapped: true,
        }
    } else {
        RecoveryError {
            error: direct,
            swapped: false,
        }
    })
}
