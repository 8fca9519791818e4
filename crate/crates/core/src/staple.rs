//! Binary STAPLE: joint EM estimate of rater sensitivity/specificity and the
//! per-voxel lesion posterior from hard 0/1 annotations.
//!
//! Rater `i` has sensitivity `p(y=1 | x=1)` and specificity `p(y=0 | x=0)`.
//! Products over raters are accumulated as sums of logs in expert-id order.

use serde::{Deserialize, Serialize};

use crate::em::{self, posterior_from_logs, IterationView, Sweep, PARAM_FLOOR};
use crate::error::{Error, Result};
use crate::volume::{ExpertStack, VolumeGrid, VolumeKind};

/// Per-expert (sensitivity, specificity), in stack order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaterParams {
    pub sensitivity: Vec<f64>,
    pub specificity: Vec<f64>,
}

impl RaterParams {
    pub fn new(sensitivity: Vec<f64>, specificity: Vec<f64>) -> Result<Self> {
        let p = RaterParams {
            sensitivity,
            specificity,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform(m: usize, sensitivity: f64, specificity: f64) -> Result<Self> {
        RaterParams::new(vec![sensitivity; m], vec![specificity; m])
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensitivity.len() != self.specificity.len() {
            return Err(Error::ExpertCountMismatch {
                expected: self.sensitivity.len(),
                actual: self.specificity.len(),
            });
        }
        let bad = self
            .sensitivity
            .iter()
            .chain(&self.specificity)
            .find(|v| !(0.0..=1.0).contains(*v));
        if let Some(v) = bad {
            return Err(Error::InvalidConfig(format!(
                "rater parameter {v} is not a probability"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sensitivity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensitivity.is_empty()
    }

    pub(crate) fn ensure_len(&self, m: usize) -> Result<()> {
        if self.len() != m || self.specificity.len() != m {
            return Err(Error::ExpertCountMismatch {
                expected: self.len(),
                actual: m,
            });
        }
        Ok(())
    }

    /// Values reordered so that position `j` holds expert `order[j]`.
    pub(crate) fn to_canonical(&self, order: &[usize]) -> (Vec<f64>, Vec<f64>) {
        (
            order.iter().map(|&i| self.sensitivity[i]).collect(),
            order.iter().map(|&i| self.specificity[i]).collect(),
        )
    }

    pub(crate) fn from_canonical(order: &[usize], sens: &[f64], spec: &[f64]) -> Self {
        let mut sensitivity = vec![0.0; order.len()];
        let mut specificity = vec![0.0; order.len()];
        for (j, &i) in order.iter().enumerate() {
            sensitivity[i] = sens[j];
            specificity[i] = spec[j];
        }
        RaterParams {
            sensitivity,
            specificity,
        }
    }
}

/// Prior probability that a voxel is lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prior {
    Fixed(f64),
    Auto(AutoPrior),
}

/// Marker serialized as the string `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoPrior {
    #[serde(rename = "auto")]
    Auto,
}

impl Prior {
    pub const AUTO: Prior = Prior::Auto(AutoPrior::Auto);
}

impl Default for Prior {
    fn default() -> Self {
        Prior::AUTO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Variant {
    Binary,
    SoftExact,
    #[serde(rename = "soft-mc")]
    SoftExactMc {
        samples: usize,
        seed: u64,
    },
    Simplified,
}

/// How the soft variants turn posteriors into new rater parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MStepMode {
    /// Expected complete-data counts; the exact M-step of each soft objective.
    #[default]
    ExpectedCount,
    /// Hard-vote update with `y_it` replaced by `q_it(1)`.
    PluginMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub prior: Prior,
    pub init_sensitivity: f64,
    pub init_specificity: f64,
    pub max_iters: usize,
    /// Stop once the largest absolute parameter change is below this.
    pub tol: f64,
    pub variant: Variant,
    pub mstep_mode: MStepMode,
    /// Largest expert count for exact 2^m enumeration.
    pub enumeration_guard: usize,
}

pub const DEFAULT_ENUMERATION_GUARD: usize = 20;

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            prior: Prior::AUTO,
            init_sensitivity: 0.9,
            init_specificity: 0.9,
            max_iters: 100,
            tol: 1e-6,
            variant: Variant::Binary,
            mstep_mode: MStepMode::ExpectedCount,
            enumeration_guard: DEFAULT_ENUMERATION_GUARD,
        }
    }
}

impl FusionConfig {
    pub fn with_variant(variant: Variant) -> Self {
        FusionConfig {
            variant,
            ..FusionConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if let Prior::Fixed(p) = self.prior {
            check_prior(p)?;
        }
        for (name, v) in [
            ("init_sensitivity", self.init_sensitivity),
            ("init_specificity", self.init_specificity),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if let Variant::SoftExactMc { samples, .. } = self.variant {
            if samples == 0 {
                return bad("Monte Carlo sample count must be at least 1".into());
            }
        }
        if self.enumeration_guard == 0 || self.enumeration_guard > 30 {
            return bad(format!(
                "enumeration_guard must be in 1..=30, got {}",
                self.enumeration_guard
            ));
        }
        Ok(())
    }
}

pub(crate) fn check_prior(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "prior must lie in (0, 1), got {p}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    /// `w_t(1)` from the last E-step.
    pub posterior: VolumeGrid,
    pub params: RaterParams,
    /// Objective at the parameters used by each E-step.
    pub ll_trace: Vec<f64>,
    pub iters_run: usize,
    pub converged: bool,
    /// Prior actually used (AUTO resolved).
    pub prior: f64,
    /// True when the objective is a Monte Carlo estimate.
    pub objective_approximate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Background,
    Lesion,
}

/// Log-probabilities of each vote under each class for one expert, with the
/// parameters kept inside `[1e-7, 1 - 1e-7]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogRates {
    pub ln_sens: f64,
    pub ln_miss: f64,
    pub ln_spec: f64,
    pub ln_false_alarm: f64,
}

impl LogRates {
    pub fn new(sens: f64, spec: f64) -> Self {
        let sens = sens.clamp(PARAM_FLOOR, 1.0 - PARAM_FLOOR);
        let spec = spec.clamp(PARAM_FLOOR, 1.0 - PARAM_FLOOR);
        LogRates {
            ln_sens: sens.ln(),
            ln_miss: (1.0 - sens).ln(),
            ln_spec: spec.ln(),
            ln_false_alarm: (1.0 - spec).ln(),
        }
    }

    pub fn table(sens: &[f64], spec: &[f64]) -> Vec<LogRates> {
        sens.iter()
            .zip(spec)
            .map(|(&s, &p)| LogRates::new(s, p))
            .collect()
    }

    /// `(ln p(vote | x=0), ln p(vote | x=1))`.
    #[inline(always)]
    pub fn for_vote(&self, vote: bool) -> (f64, f64) {
        if vote {
            (self.ln_false_alarm, self.ln_sens)
        } else {
            (self.ln_spec, self.ln_miss)
        }
    }
}

/// `(ln(1 - p), ln p)`.
#[inline]
pub(crate) fn log_prior(prior: f64) -> (f64, f64) {
    ((1.0 - prior).ln(), prior.ln())
}

#[inline(always)]
pub(crate) fn is_vote(v: f64) -> bool {
    v > 0.5
}

/// `prod_i p(y_i | x = a)` for one voxel, accumulated in log space.
pub fn annotation_log_likelihood(votes: &[f64], a: Label, params: &RaterParams) -> Result<f64> {
    params.ensure_len(votes.len())?;
    let mut acc = 0.0;
    for (i, &v) in votes.iter().enumerate() {
        let (sens, spec) = (params.sensitivity[i], params.specificity[i]);
        let p = match (a, is_vote(v)) {
            (Label::Lesion, true) => sens,
            (Label::Lesion, false) => 1.0 - sens,
            (Label::Background, true) => 1.0 - spec,
            (Label::Background, false) => spec,
        };
        acc += p.ln();
    }
    Ok(acc)
}

pub fn annotation_likelihood(votes: &[f64], a: Label, params: &RaterParams) -> Result<f64> {
    Ok(annotation_log_likelihood(votes, a, params)?.exp())
}

/// Log-likelihood of the hard votes under each class, experts in slice order.
#[inline]
pub(crate) fn hard_logs(votes: impl Iterator<Item = bool>, rates: &[LogRates]) -> (f64, f64) {
    let mut l0 = 0.0;
    let mut l1 = 0.0;
    for (vote, r) in votes.zip(rates) {
        let (a0, a1) = r.for_vote(vote);
        l0 += a0;
        l1 += a1;
    }
    (l0, l1)
}

/// Posterior `p(x=1 | votes)` for one voxel.
pub fn posterior_voxel(votes: &[f64], params: &RaterParams, prior: f64) -> Result<f64> {
    params.ensure_len(votes.len())?;
    check_prior(prior)?;
    let rates = LogRates::table(&params.sensitivity, &params.specificity);
    let (lp0, lp1) = log_prior(prior);
    let (l0, l1) = hard_logs(votes.iter().map(|&v| is_vote(v)), &rates);
    Ok(posterior_from_logs(lp0 + l0, lp1 + l1).0)
}

fn canonical_columns<'a>(stack: &'a ExpertStack, order: &[usize]) -> Vec<&'a [f64]> {
    order.iter().map(|&i| stack.expert(i).data()).collect()
}

/// One pass of the binary model at the given canonical-order parameters.
pub(crate) fn binary_sweep(columns: &[&[f64]], sens: &[f64], spec: &[f64], prior: f64) -> Sweep {
    let n = columns[0].len();
    let m = columns.len();
    let rates = LogRates::table(sens, spec);
    let (lp0, lp1) = log_prior(prior);
    em::sweep(
        n,
        m,
        || (),
        |t, _, part| {
            let (l0, l1) = hard_logs(columns.iter().map(|c| is_vote(c[t])), &rates);
            let (w1, lse) = posterior_from_logs(lp0 + l0, lp1 + l1);
            let w0 = 1.0 - w1;
            for (j, c) in columns.iter().enumerate() {
                let y = c[t];
                part.pos[j] += y * w1;
                part.neg[j] += (1.0 - y) * w0;
            }
            (w1, lse)
        },
    )
}

fn check_binary(stack: &ExpertStack, params: &RaterParams) -> Result<()> {
    stack.ensure_kind(VolumeKind::BinaryLabel)?;
    params.ensure_len(stack.len())
}

pub fn e_step(stack: &ExpertStack, params: &RaterParams, prior: f64) -> Result<VolumeGrid> {
    check_binary(stack, params)?;
    check_prior(prior)?;
    let order = stack.canonical_order();
    let (sens, spec) = params.to_canonical(&order);
    let sweep = binary_sweep(&canonical_columns(stack, &order), &sens, &spec, prior);
    VolumeGrid::new(stack.dims(), VolumeKind::Posterior, sweep.posterior)
}

/// Sensitivity/specificity from hard votes and a posterior, without clamping.
pub fn m_step(stack: &ExpertStack, posterior: &VolumeGrid) -> Result<RaterParams> {
    stack.ensure_kind(VolumeKind::BinaryLabel)?;
    posterior.ensure_kind(&[VolumeKind::Posterior, VolumeKind::SoftLabel], "posterior")?;
    stack.expert(0).ensure_same_dims(posterior)?;
    let order = stack.canonical_order();
    let columns = canonical_columns(stack, &order);
    let w = posterior.data();
    let sweep = em::sweep(
        stack.voxel_count(),
        stack.len(),
        || (),
        |t, _, part| {
            let w1 = w[t];
            let w0 = 1.0 - w1;
            for (j, c) in columns.iter().enumerate() {
                part.pos[j] += c[t] * w1;
                part.neg[j] += (1.0 - c[t]) * w0;
            }
            (w1, 0.0)
        },
    );
    let (sens, spec) = sweep.rates()?;
    Ok(RaterParams::from_canonical(&order, &sens, &spec))
}

/// `sum_t ln( (1-p) L0(t) + p L1(t) )`.
pub fn log_likelihood(stack: &ExpertStack, params: &RaterParams, prior: f64) -> Result<f64> {
    check_binary(stack, params)?;
    check_prior(prior)?;
    let order = stack.canonical_order();
    let (sens, spec) = params.to_canonical(&order);
    Ok(
        binary_sweep(&canonical_columns(stack, &order), &sens, &spec, prior)
            .totals
            .objective,
    )
}

/// Resolves AUTO to the grand mean vote, kept inside `[1e-7, 1 - 1e-7]`.
pub fn resolve_prior(stack: &ExpertStack, prior: Prior) -> Result<f64> {
    match prior {
        Prior::Fixed(p) => {
            check_prior(p)?;
            Ok(p)
        }
        Prior::Auto(_) => {
            let n = stack.voxel_count();
            let total: f64 = stack
                .canonical_order()
                .into_iter()
                .map(|i| {
                    let data = stack.expert(i).data();
                    em::chunked_sum(n, |t| data[t])
                })
                .sum();
            let mean = total / (n as f64 * stack.len() as f64);
            Ok(mean.clamp(PARAM_FLOOR, 1.0 - PARAM_FLOOR))
        }
    }
}

pub fn run_em(stack: &ExpertStack, config: &FusionConfig) -> Result<FusionResult> {
    run_em_observed(stack, config, |_| {})
}

/// [`run_em`] calling `observer` after every E-step.
pub fn run_em_observed<O>(
    stack: &ExpertStack,
    config: &FusionConfig,
    observer: O,
) -> Result<FusionResult>
where
    O: FnMut(IterationView<'_>),
{
    config.validate()?;
    if config.variant != Variant::Binary {
        return Err(Error::InvalidConfig(format!(
            "binary EM cannot run variant {:?}",
            config.variant
        )));
    }
    stack.ensure_kind(VolumeKind::BinaryLabel)?;
    let prior = resolve_prior(stack, config.prior)?;
    let order = stack.canonical_order();
    let columns = canonical_columns(stack, &order);
    let outcome = em::run_loop(
        config,
        &order,
        |sens, spec| Ok(binary_sweep(&columns, sens, spec, prior)),
        observer,
    )?;
    Ok(FusionResult {
        posterior: VolumeGrid::new(stack.dims(), VolumeKind::Posterior, outcome.posterior)?,
        params: outcome.params,
        ll_trace: outcome.trace,
        iters_run: outcome.iters_run,
        converged: outcome.converged,
        prior,
        objective_approximate: false,
    })
}

/// Hard labeling: 1 where `w_t(1) > 0.5`, ties go to 0.
pub fn binarize(posterior: &VolumeGrid) -> Result<VolumeGrid> {
    binarize_at(posterior, 0.5)
}

/// 1 where the value is strictly above `threshold`.
pub fn binarize_at(grid: &VolumeGrid, threshold: f64) -> Result<VolumeGrid> {
    grid.ensure_kind(
        &[
            VolumeKind::Posterior,
            VolumeKind::SoftLabel,
            VolumeKind::BinaryLabel,
        ],
        "posterior or label",
    )?;
    let data = grid
        .data()
        .iter()
        .map(|&w| if w > threshold { 1.0 } else { 0.0 })
        .collect();
    VolumeGrid::new(grid.dims(), VolumeKind::BinaryLabel, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dim3;

    fn params(sens: &[f64], spec: &[f64]) -> RaterParams {
        RaterParams::new(sens.to_vec(), spec.to_vec()).unwrap()
    }

    fn binary_stack(columns: &[&[f64]]) -> ExpertStack {
        let dims = Dim3::new(columns[0].len(), 1, 1).unwrap();
        ExpertStack::with_default_ids(
            columns
                .iter()
                .map(|c| VolumeGrid::new(dims, VolumeKind::BinaryLabel, c.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn posterior(w: &[f64]) -> VolumeGrid {
        VolumeGrid::new(
            Dim3::new(w.len(), 1, 1).unwrap(),
            VolumeKind::Posterior,
            w.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn annotation_likelihood_examples() {
        let p = params(&[0.9], &[0.5]);
        let l = annotation_likelihood(&[1.0], Label::Lesion, &p).unwrap();
        assert!((l - 0.9).abs() < 1e-15);

        let p = params(&[0.5, 0.5], &[0.8, 0.7]);
        let l = annotation_likelihood(&[1.0, 0.0], Label::Background, &p).unwrap();
        assert!((l - 0.14).abs() < 1e-15);

        let p = RaterParams::uniform(4, 0.5, 0.5).unwrap();
        for votes in [[0.0, 1.0, 1.0, 0.0], [1.0; 4]] {
            for a in [Label::Background, Label::Lesion] {
                let l = annotation_likelihood(&votes, a, &p).unwrap();
                assert!((l - 0.5f64.powi(4)).abs() < 1e-15);
            }
        }
        assert!(matches!(
            annotation_likelihood(&[1.0, 0.0], Label::Lesion, &params(&[0.9], &[0.9])),
            Err(Error::ExpertCountMismatch { .. })
        ));
    }

    #[test]
    fn posterior_voxel_examples() {
        let p = params(&[0.5], &[0.5]);
        for v in [0.0, 1.0] {
            assert!((posterior_voxel(&[v], &p, 0.3).unwrap() - 0.3).abs() < 1e-15);
        }
        let p = params(&[0.9], &[0.9]);
        let w = posterior_voxel(&[1.0], &p, 0.01).unwrap();
        assert!((w - 0.009 / (0.009 + 0.099)).abs() < 1e-12);
        assert!((w - 0.083_333_333_333_333_3).abs() < 1e-12);

        let p = RaterParams::uniform(3, 0.9, 0.9).unwrap();
        let w = posterior_voxel(&[1.0; 3], &p, 0.5).unwrap();
        assert!((w - 0.729 / 0.730).abs() < 1e-12);

        assert!(posterior_voxel(&[1.0], &params(&[0.9], &[0.9]), 0.0).is_err());
        assert!(posterior_voxel(&[1.0], &params(&[0.9], &[0.9]), 1.0).is_err());
    }

    #[test]
    fn posterior_voxel_survives_extreme_params() {
        let p = params(&[1.0], &[1.0]);
        let w = posterior_voxel(&[1.0], &p, 0.5).unwrap();
        assert!(w.is_finite() && w > 0.999_999);
        let many = RaterParams::uniform(200, 0.99, 0.99).unwrap();
        let w = posterior_voxel(&vec![1.0; 200], &many, 0.01).unwrap();
        assert_eq!(w, 1.0);
    }

    #[test]
    fn e_step_uninformative_raters_return_prior() {
        let stack = binary_stack(&[&[1.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 1.0, 1.0]]);
        let w = e_step(&stack, &RaterParams::uniform(2, 0.5, 0.5).unwrap(), 0.27).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.27).abs() < 1e-15));
    }

    #[test]
    fn e_step_matches_posterior_voxel_and_raises_unanimous_voxels() {
        let stack = binary_stack(&[&[1.0, 0.0, 1.0], &[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]]);
        let p = params(&[0.9, 0.8, 0.85], &[0.95, 0.9, 0.9]);
        let w = e_step(&stack, &p, 0.2).unwrap();
        for t in 0..3 {
            let direct = posterior_voxel(&stack.votes_at(t), &p, 0.2).unwrap();
            assert!((w.data()[t] - direct).abs() < 1e-15);
        }
        assert!(w.data()[0] > 0.2);
    }

    #[test]
    fn e_step_reliable_single_expert_reproduces_mask() {
        let mask = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let stack = binary_stack(&[&mask]);
        let s = 1.0 - 1e-7;
        let w = e_step(&stack, &params(&[s], &[s]), 0.5).unwrap();
        let dev = w
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev < 1e-6, "{dev}");
    }

    #[test]
    fn m_step_examples() {
        let stack = binary_stack(&[&[1.0, 1.0, 1.0]]);
        let err = m_step(&stack, &posterior(&[1.0, 1.0, 1.0])).unwrap_err();
        assert!(matches!(
            err,
            Error::DegeneratePosterior {
                side: crate::error::PosteriorSide::Background
            }
        ));

        let stack = binary_stack(&[&[1.0, 1.0, 0.0, 0.0]]);
        let p = m_step(&stack, &posterior(&[1.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!((p.sensitivity[0], p.specificity[0]), (1.0, 1.0));

        let stack = binary_stack(&[&[1.0, 0.0, 1.0, 0.0]]);
        let p = m_step(&stack, &posterior(&[0.5; 4])).unwrap();
        assert!((p.sensitivity[0] - 0.5).abs() < 1e-15);
        assert!((p.specificity[0] - 0.5).abs() < 1e-15);

        let stack = binary_stack(&[&[0.0, 0.0]]);
        assert!(matches!(
            m_step(&stack, &posterior(&[0.0, 0.0])),
            Err(Error::DegeneratePosterior {
                side: crate::error::PosteriorSide::Lesion
            })
        ));
    }

    #[test]
    fn log_likelihood_examples() {
        let stack = binary_stack(&[&[1.0]]);
        let ll = log_likelihood(&stack, &params(&[0.5], &[0.5]), 0.5).unwrap();
        assert!((ll - 0.5f64.ln()).abs() < 1e-15);

        let a = [1.0, 0.0, 1.0, 1.0, 0.0];
        let b = [0.0, 0.0, 1.0, 1.0, 1.0];
        let p = params(&[0.8, 0.7], &[0.9, 0.95]);
        let single = log_likelihood(&binary_stack(&[&a, &b]), &p, 0.3).unwrap();
        let a2: Vec<f64> = a.iter().chain(&a).copied().collect();
        let b2: Vec<f64> = b.iter().chain(&b).copied().collect();
        let double = log_likelihood(&binary_stack(&[&a2, &b2]), &p, 0.3).unwrap();
        assert!((double - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn run_em_unanimous_experts_converge_to_common_mask() {
        let mask: Vec<f64> = (0..200)
            .map(|t| if t % 7 < 2 { 1.0 } else { 0.0 })
            .collect();
        let stack = binary_stack(&[&mask, &mask, &mask]);
        let r = run_em(&stack, &FusionConfig::default()).unwrap();
        assert_eq!(binarize(&r.posterior).unwrap().data(), &mask[..]);
        for i in 0..3 {
            assert!(r.params.sensitivity[i] >= 1.0 - 1e-6);
            assert!(r.params.specificity[i] >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn run_em_single_iteration_contract() {
        let a = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let b = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let stack = binary_stack(&[&a, &b, &a]);
        let cfg = FusionConfig {
            max_iters: 1,
            ..FusionConfig::default()
        };
        let r = run_em(&stack, &cfg).unwrap();
        assert_eq!(r.iters_run, 1);
        assert_eq!(r.ll_trace.len(), 1);
        assert!(!r.converged);
    }

    #[test]
    fn run_em_rejects_soft_variant_and_bad_config() {
        let stack = binary_stack(&[&[1.0, 0.0]]);
        assert!(run_em(&stack, &FusionConfig::with_variant(Variant::Simplified)).is_err());
        let cfg = FusionConfig {
            tol: 0.0,
            ..FusionConfig::default()
        };
        assert!(matches!(run_em(&stack, &cfg), Err(Error::InvalidConfig(_))));
        let cfg = FusionConfig {
            prior: Prior::Fixed(1.0),
            ..FusionConfig::default()
        };
        assert!(matches!(run_em(&stack, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn auto_prior_is_grand_mean() {
        let stack = binary_stack(&[&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]]);
        assert!((resolve_prior(&stack, Prior::AUTO).unwrap() - 3.0 / 8.0).abs() < 1e-15);
        let empty = binary_stack(&[&[0.0, 0.0]]);
        assert_eq!(resolve_prior(&empty, Prior::AUTO).unwrap(), 1e-7);
    }

    #[test]
    fn binarize_examples() {
        let b = binarize(&posterior(&[0.2, 0.8, 0.5])).unwrap();
        assert_eq!(b.data(), &[0.0, 1.0, 0.0]);
        assert_eq!(b.kind(), VolumeKind::BinaryLabel);
    }

    #[test]
    fn prior_serde() {
        assert_eq!(serde_json::to_string(&Prior::AUTO).unwrap(), "\"auto\"");
        assert_eq!(
            serde_json::from_str::<Prior>("0.25").unwrap(),
            Prior::Fixed(0.25)
        );
        assert_eq!(
            serde_json::from_str::<Prior>("\"auto\"").unwrap(),
            Prior::AUTO
        );
        let v: Variant =
            serde_json::from_str(r#"{"name":"soft-mc","samples":10,"seed":3}"#).unwrap();
        assert_eq!(
            v,
            Variant::SoftExactMc {
                samples: 10,
                seed: 3
            }
        );
    }
}
