//! Fusion of soft (probabilistic) expert opinions.
//!
//! Expert `i` gives `q_it(1)`, the probability that its hard vote at voxel `t`
//! is 1. Two models are offered:
//!
//! * **exact soft STAPLE** treats the opinions as independent distributions
//!   over hard votes and averages the binary posterior over every vote
//!   combination `B in {0,1}^m` (2^m terms per voxel, or a seeded Monte Carlo
//!   estimate of the same average);
//! * **simplified soft STAPLE** treats each opinion as a noisy observation of
//!   the vote, `p(z | x=a) = sum_b q(b) p(y=b | x=a)`, which factorizes over
//!   experts and costs O(m) per voxel.
//!
//! Vote combinations are encoded as integers with expert 0 in the least
//! significant bit and enumerated in ascending order.

use crate::em::{self, posterior_from_logs, IterationView, Partial, Sweep, PARAM_FLOOR};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::staple::{
    check_prior, hard_logs, log_prior, resolve_prior, FusionConfig, FusionResult, Label, LogRates,
    MStepMode, RaterParams, Variant, DEFAULT_ENUMERATION_GUARD,
};
use crate::volume::{ExpertStack, VolumeGrid, VolumeKind};

/// Largest expert count a Monte Carlo vote code can hold.
pub const MAX_SAMPLED_EXPERTS: usize = 64;

const MC_STREAM: u64 = 0x4D43;

/// One joint assignment of hard votes to `m` experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VoteCombination {
    bits: u64,
    experts: usize,
}

impl VoteCombination {
    pub fn new(bits: u64, experts: usize) -> Result<Self> {
        if experts == 0 || experts > MAX_SAMPLED_EXPERTS {
            return Err(Error::Capacity {
                experts,
                guard: MAX_SAMPLED_EXPERTS,
            });
        }
        if experts < 64 && bits >> experts != 0 {
            return Err(Error::InvalidConfig(format!(
                "vote code {bits} has bits beyond {experts} experts"
            )));
        }
        Ok(VoteCombination { bits, experts })
    }

    pub fn from_votes(votes: &[bool]) -> Result<Self> {
        let bits = votes
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i));
        VoteCombination::new(bits, votes.len())
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.experts
    }

    pub fn is_empty(&self) -> bool {
        self.experts == 0
    }

    /// Vote of expert `i`.
    pub fn vote(&self, i: usize) -> bool {
        (self.bits >> i) & 1 == 1
    }

    /// All `2^m` combinations in ascending code order.
    pub fn all(experts: usize) -> Result<impl Iterator<Item = VoteCombination>> {
        if experts == 0 || experts > DEFAULT_ENUMERATION_GUARD {
            return Err(Error::Capacity {
                experts,
                guard: DEFAULT_ENUMERATION_GUARD,
            });
        }
        Ok((0..1u64 << experts).map(move |bits| VoteCombination { bits, experts }))
    }
}

/// `q_t(B) = prod_i q_it(b_i)`.
pub fn joint_soft_prob(soft_votes: &[f64], combo: VoteCombination) -> Result<f64> {
    if soft_votes.len() != combo.len() {
        return Err(Error::ExpertCountMismatch {
            expected: combo.len(),
            actual: soft_votes.len(),
        });
    }
    Ok(soft_votes
        .iter()
        .enumerate()
        .map(|(i, &q)| if combo.vote(i) { q } else { 1.0 - q })
        .product())
}

/// Posterior and log-evidence of every hard vote combination for fixed
/// parameters. Shared by all voxels of a sweep.
pub(crate) struct ComboTable {
    post1: Vec<f64>,
    lse: Vec<f64>,
}

impl ComboTable {
    pub fn new(rates: &[LogRates], prior: f64) -> Self {
        let size = 1usize << rates.len();
        let mut l0 = vec![0.0; size];
        let mut l1 = vec![0.0; size];
        // entry B receives expert 0's factor first, then expert 1's, ...
        for (j, r) in rates.iter().enumerate() {
            let bit = 1usize << j;
            let (no0, no1) = r.for_vote(false);
            let (yes0, yes1) = r.for_vote(true);
            for b in 0..bit {
                l0[b | bit] = l0[b] + yes0;
                l1[b | bit] = l1[b] + yes1;
                l0[b] += no0;
                l1[b] += no1;
            }
        }
        let (lp0, lp1) = log_prior(prior);
        let (post1, lse) = l0
            .iter()
            .zip(&l1)
            .map(|(&a, &b)| posterior_from_logs(lp0 + a, lp1 + b))
            .unzip();
        ComboTable { post1, lse }
    }
}

/// Fills `out` with `q_t(B)` for every combination, by doubling.
fn joint_table(q: impl Iterator<Item = f64>, out: &mut [f64]) {
    out[0] = 1.0;
    let mut filled = 1usize;
    for q1 in q {
        for b in 0..filled {
            let base = out[b];
            out[b | filled] = base * q1;
            out[b] = base * (1.0 - q1);
        }
        filled <<= 1;
    }
}

fn check_guard(m: usize, guard: usize) -> Result<()> {
    if m > guard {
        Err(Error::Capacity { experts: m, guard })
    } else {
        Ok(())
    }
}

fn check_soft_votes(q: &[f64], params: &RaterParams) -> Result<()> {
    params.ensure_len(q.len())?;
    if let Some(v) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidConfig(format!(
            "soft vote {v} is not a probability"
        )));
    }
    Ok(())
}

/// Exact soft E-step for one voxel: `sum_B q_t(B) p(x=1 | B)`.
pub fn soft_e_step_voxel(soft_votes: &[f64], params: &RaterParams, prior: f64) -> Result<f64> {
    check_soft_votes(soft_votes, params)?;
    check_prior(prior)?;
    check_guard(soft_votes.len(), DEFAULT_ENUMERATION_GUARD)?;
    let table = ComboTable::new(
        &LogRates::table(&params.sensitivity, &params.specificity),
        prior,
    );
    let mut qt = vec![0.0; table.post1.len()];
    joint_table(soft_votes.iter().copied(), &mut qt);
    let w1: f64 = qt.iter().zip(&table.post1).map(|(q, p)| q * p).sum();
    Ok(w1.clamp(0.0, 1.0))
}

/// Monte Carlo estimate of [`soft_e_step_voxel`] from `samples` seeded draws.
pub fn mc_soft_e_step_voxel(
    soft_votes: &[f64],
    params: &RaterParams,
    prior: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    check_soft_votes(soft_votes, params)?;
    check_prior(prior)?;
    if samples == 0 {
        return Err(Error::InvalidConfig(
            "Monte Carlo sample count must be at least 1".into(),
        ));
    }
    let m = soft_votes.len();
    let rates = LogRates::table(&params.sensitivity, &params.specificity);
    let sampler = McSampler::new(&rates, prior, samples, seed, DEFAULT_ENUMERATION_GUARD)?;
    let mut scratch = sampler.scratch(m);
    let mut part = Partial::new(m);
    let (w1, _) = sampler.voxel(
        0,
        soft_votes,
        &mut scratch,
        &mut part,
        MStepMode::PluginMean,
    );
    Ok(w1)
}

/// `p(z | x=a)` for one expert under the noisy-channel reading of a soft vote.
pub fn noisy_channel_likelihood(q1: f64, a: Label, sens: f64, spec: f64) -> f64 {
    match a {
        Label::Lesion => q1 * sens + (1.0 - q1) * (1.0 - sens),
        Label::Background => q1 * (1.0 - spec) + (1.0 - q1) * spec,
    }
}

/// Simplified-model log-likelihoods `(ln p(z|x=0), ln p(z|x=1))`, experts in
/// slice order, parameters clamped as everywhere else.
#[inline]
fn channel_logs(q: impl Iterator<Item = f64>, sens: &[f64], spec: &[f64]) -> (f64, f64) {
    let mut l0 = 0.0;
    let mut l1 = 0.0;
    for ((q1, &s), &p) in q.zip(sens).zip(spec) {
        l1 += noisy_channel_likelihood(q1, Label::Lesion, s, p).ln();
        l0 += noisy_channel_likelihood(q1, Label::Background, s, p).ln();
    }
    (l0, l1)
}

fn clamped(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| x.clamp(PARAM_FLOOR, 1.0 - PARAM_FLOOR))
        .collect()
}

/// Simplified soft E-step for one voxel.
pub fn simple_e_step_voxel(soft_votes: &[f64], params: &RaterParams, prior: f64) -> Result<f64> {
    check_soft_votes(soft_votes, params)?;
    check_prior(prior)?;
    let (sens, spec) = (clamped(&params.sensitivity), clamped(&params.specificity));
    let (lp0, lp1) = log_prior(prior);
    let (l0, l1) = channel_logs(soft_votes.iter().copied(), &sens, &spec);
    Ok(posterior_from_logs(lp0 + l0, lp1 + l1).0)
}

/// Which soft model a sweep evaluates.
#[derive(Debug, Clone, Copy)]
enum SoftModel {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
    Simplified,
}

impl SoftModel {
    fn from_variant(v: Variant) -> Result<Self> {
        match v {
            Variant::SoftExact => Ok(SoftModel::Exact),
            Variant::SoftExactMc { samples, seed } => Ok(SoftModel::MonteCarlo { samples, seed }),
            Variant::Simplified => Ok(SoftModel::Simplified),
            Variant::Binary => Err(Error::InvalidConfig(
                "soft EM needs a soft variant, got binary".into(),
            )),
        }
    }
}

struct ExactScratch {
    q: Vec<f64>,
    qt: Vec<f64>,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

/// Adds the expected counts of one weighted vote combination.
#[inline(always)]
fn add_combo_counts(code: u64, v1: f64, v0: f64, pos: &mut [f64], neg: &mut [f64]) {
    for j in 0..pos.len() {
        if (code >> j) & 1 == 1 {
            pos[j] += v1;
        } else {
            neg[j] += v0;
        }
    }
}

#[inline(always)]
fn plugin_counts(q: &[f64], w1: f64, part: &mut Partial) {
    let w0 = 1.0 - w1;
    for (j, &q1) in q.iter().enumerate() {
        part.pos[j] += q1 * w1;
        part.neg[j] += (1.0 - q1) * w0;
    }
}

fn exact_sweep(columns: &[&[f64]], rates: &[LogRates], prior: f64, mode: MStepMode) -> Sweep {
    let n = columns[0].len();
    let m = columns.len();
    let table = ComboTable::new(rates, prior);
    let size = table.post1.len();
    em::sweep(
        n,
        m,
        || ExactScratch {
            q: vec![0.0; m],
            qt: vec![0.0; size],
            pos: vec![0.0; m],
            neg: vec![0.0; m],
        },
        |t, s, part| {
            joint_table(columns.iter().map(|c| c[t]), &mut s.qt);
            s.pos.fill(0.0);
            s.neg.fill(0.0);
            let mut w1 = 0.0;
            let mut obj = 0.0;
            for (code, &qb) in s.qt.iter().enumerate() {
                if qb == 0.0 {
                    continue;
                }
                let p1 = table.post1[code];
                let v1 = qb * p1;
                w1 += v1;
                obj += qb * table.lse[code];
                if mode == MStepMode::ExpectedCount {
                    add_combo_counts(code as u64, v1, qb * (1.0 - p1), &mut s.pos, &mut s.neg);
                }
            }
            let w1 = w1.clamp(0.0, 1.0);
            match mode {
                MStepMode::ExpectedCount => {
                    for j in 0..m {
                        part.pos[j] += s.pos[j];
                        part.neg[j] += s.neg[j];
                    }
                }
                MStepMode::PluginMean => {
                    for (slot, c) in s.q.iter_mut().zip(columns) {
                        *slot = c[t];
                    }
                    plugin_counts(&s.q, w1, part);
                }
            }
            (w1, obj)
        },
    )
}

/// Monte Carlo soft E-step. When `m` is within the enumeration guard the
/// objective is the exact soft log-likelihood, otherwise it is estimated
/// from the same samples.
struct McSampler {
    rates: Vec<LogRates>,
    table: Option<ComboTable>,
    lp: (f64, f64),
    samples: usize,
    seed: u64,
}

struct McScratch {
    q: Vec<f64>,
    counts: Vec<u32>,
    touched: Vec<u64>,
    codes: Vec<u64>,
    qt: Vec<f64>,
    pos: Vec<f64>,
    neg: Vec<f64>,
}

impl McSampler {
    fn new(
        rates: &[LogRates],
        prior: f64,
        samples: usize,
        seed: u64,
        guard: usize,
    ) -> Result<Self> {
        let m = rates.len();
        if m > MAX_SAMPLED_EXPERTS {
            return Err(Error::Capacity {
                experts: m,
                guard: MAX_SAMPLED_EXPERTS,
            });
        }
        let table = (m <= guard).then(|| ComboTable::new(rates, prior));
        Ok(McSampler {
            rates: rates.to_vec(),
            table,
            lp: log_prior(prior),
            samples,
            seed,
        })
    }

    fn scratch(&self, m: usize) -> McScratch {
        let size = self.table.as_ref().map_or(0, |t| t.post1.len());
        McScratch {
            q: vec![0.0; m],
            counts: vec![0; size],
            touched: Vec::new(),
            codes: Vec::new(),
            qt: vec![0.0; size],
            pos: vec![0.0; m],
            neg: vec![0.0; m],
        }
    }

    /// `(p(x=1 | B), ln p(B))` of a vote code.
    fn combo(&self, code: u64) -> (f64, f64) {
        match &self.table {
            Some(t) => (t.post1[code as usize], t.lse[code as usize]),
            None => {
                let votes = (0..self.rates.len()).map(|j| (code >> j) & 1 == 1);
                let (l0, l1) = hard_logs(votes, &self.rates);
                posterior_from_logs(self.lp.0 + l0, self.lp.1 + l1)
            }
        }
    }

    fn voxel(
        &self,
        t: usize,
        q: &[f64],
        s: &mut McScratch,
        part: &mut Partial,
        mode: MStepMode,
    ) -> (f64, f64) {
        let m = q.len();
        let mut rng = CounterRng::for_voxel(self.seed, MC_STREAM, t as u64);
        // (code, count) pairs in ascending code order
        let mut runs: Vec<(u64, u32)> = Vec::new();
        if self.table.is_some() {
            s.touched.clear();
            for _ in 0..self.samples {
                let code = draw(&mut rng, q);
                let c = &mut s.counts[code as usize];
                if *c == 0 {
                    s.touched.push(code);
                }
                *c += 1;
            }
            s.touched.sort_unstable();
            for &code in &s.touched {
                runs.push((code, std::mem::take(&mut s.counts[code as usize])));
            }
        } else {
            s.codes.clear();
            s.codes.extend((0..self.samples).map(|_| draw(&mut rng, q)));
            s.codes.sort_unstable();
            for &code in &s.codes {
                match runs.last_mut() {
                    Some((c, k)) if *c == code => *k += 1,
                    _ => runs.push((code, 1)),
                }
            }
        }

        s.pos[..m].fill(0.0);
        s.neg[..m].fill(0.0);
        let total = self.samples as f64;
        let mut w1 = 0.0;
        let mut mc_obj = 0.0;
        for &(code, count) in &runs {
            let freq = count as f64 / total;
            let (p1, lse) = self.combo(code);
            let v1 = freq * p1;
            w1 += v1;
            mc_obj += freq * lse;
            if mode == MStepMode::ExpectedCount {
                add_combo_counts(
                    code,
                    v1,
                    freq * (1.0 - p1),
                    &mut s.pos[..m],
                    &mut s.neg[..m],
                );
            }
        }
        let w1 = w1.clamp(0.0, 1.0);
        match mode {
            MStepMode::ExpectedCount => {
                for j in 0..m {
                    part.pos[j] += s.pos[j];
                    part.neg[j] += s.neg[j];
                }
            }
            MStepMode::PluginMean => plugin_counts(q, w1, part),
        }

        let obj = match &self.table {
            Some(table) => {
                joint_table(q.iter().copied(), &mut s.qt);
                s.qt.iter()
                    .zip(&table.lse)
                    .filter(|(qb, _)| **qb != 0.0)
                    .map(|(qb, l)| qb * l)
                    .fold(0.0, |acc, x| acc + x)
            }
            None => mc_obj,
        };
        (w1, obj)
    }
}

#[inline(always)]
fn draw(rng: &mut CounterRng, q: &[f64]) -> u64 {
    let mut code = 0u64;
    for (j, &q1) in q.iter().enumerate() {
        if rng.bernoulli32(q1) {
            code |= 1 << j;
        }
    }
    code
}

fn mc_sweep(columns: &[&[f64]], sampler: &McSampler, mode: MStepMode) -> Sweep {
    let n = columns[0].len();
    let m = columns.len();
    em::sweep(
        n,
        m,
        || sampler.scratch(m),
        |t, s, part| {
            let mut q = std::mem::take(&mut s.q);
            for (slot, c) in q.iter_mut().zip(columns) {
                *slot = c[t];
            }
            let out = sampler.voxel(t, &q, s, part, mode);
            s.q = q;
            out
        },
    )
}

fn simplified_sweep(
    columns: &[&[f64]],
    sens: &[f64],
    spec: &[f64],
    prior: f64,
    mode: MStepMode,
) -> Sweep {
    let n = columns[0].len();
    let m = columns.len();
    let sens = clamped(sens);
    let spec = clamped(spec);
    let (lp0, lp1) = log_prior(prior);
    em::sweep(
        n,
        m,
        || (),
        |t, _, part| {
            let (l0, l1) = channel_logs(columns.iter().map(|c| c[t]), &sens, &spec);
            let (w1, lse) = posterior_from_logs(lp0 + l0, lp1 + l1);
            let w0 = 1.0 - w1;
            for (j, c) in columns.iter().enumerate() {
                let q1 = c[t];
                match mode {
                    MStepMode::ExpectedCount => {
                        // posterior of the hidden hard vote given the class
                        let hit = q1 * sens[j]
                            / noisy_channel_likelihood(q1, Label::Lesion, sens[j], spec[j]);
                        let reject = (1.0 - q1) * spec[j]
                            / noisy_channel_likelihood(q1, Label::Background, sens[j], spec[j]);
                        part.pos[j] += w1 * hit;
                        part.neg[j] += w0 * reject;
                    }
                    MStepMode::PluginMean => {
                        part.pos[j] += q1 * w1;
                        part.neg[j] += (1.0 - q1) * w0;
                    }
                }
            }
            (w1, lse)
        },
    )
}

/// A soft stack viewed in canonical expert order.
struct SoftProblem<'a> {
    order: Vec<usize>,
    columns: Vec<&'a [f64]>,
}

impl<'a> SoftProblem<'a> {
    fn new(stack: &'a ExpertStack, params: Option<&RaterParams>) -> Result<Self> {
        stack.ensure_kind(VolumeKind::SoftLabel)?;
        if let Some(p) = params {
            p.ensure_len(stack.len())?;
        }
        let order = stack.canonical_order();
        let columns = order.iter().map(|&i| stack.expert(i).data()).collect();
        Ok(SoftProblem { order, columns })
    }

    fn sweep(
        &self,
        model: SoftModel,
        sens: &[f64],
        spec: &[f64],
        prior: f64,
        mode: MStepMode,
        guard: usize,
    ) -> Result<Sweep> {
        let m = self.columns.len();
        match model {
            SoftModel::Exact => {
                check_guard(m, guard)?;
                Ok(exact_sweep(
                    &self.columns,
                    &LogRates::table(sens, spec),
                    prior,
                    mode,
                ))
            }
            SoftModel::MonteCarlo { samples, seed } => {
                let sampler =
                    McSampler::new(&LogRates::table(sens, spec), prior, samples, seed, guard)?;
                Ok(mc_sweep(&self.columns, &sampler, mode))
            }
            SoftModel::Simplified => Ok(simplified_sweep(&self.columns, sens, spec, prior, mode)),
        }
    }

    fn sweep_params(
        &self,
        model: SoftModel,
        params: &RaterParams,
        prior: f64,
        mode: MStepMode,
    ) -> Result<Sweep> {
        check_prior(prior)?;
        let (sens, spec) = params.to_canonical(&self.order);
        self.sweep(model, &sens, &spec, prior, mode, DEFAULT_ENUMERATION_GUARD)
    }
}

/// Exact soft E-step over a whole stack.
pub fn soft_e_step(stack: &ExpertStack, params: &RaterParams, prior: f64) -> Result<VolumeGrid> {
    let problem = SoftProblem::new(stack, Some(params))?;
    let sweep = problem.sweep_params(SoftModel::Exact, params, prior, MStepMode::ExpectedCount)?;
    VolumeGrid::new(stack.dims(), VolumeKind::Posterior, sweep.posterior)
}

/// Simplified E-step over a whole stack.
pub fn simple_e_step(stack: &ExpertStack, params: &RaterParams, prior: f64) -> Result<VolumeGrid> {
    let problem = SoftProblem::new(stack, Some(params))?;
    let sweep = problem.sweep_params(
        SoftModel::Simplified,
        params,
        prior,
        MStepMode::ExpectedCount,
    )?;
    VolumeGrid::new(stack.dims(), VolumeKind::Posterior, sweep.posterior)
}

/// `sum_t sum_B q_t(B) ln sum_a p(B, x=a)`.
pub fn soft_log_likelihood(stack: &ExpertStack, params: &RaterParams, prior: f64) -> Result<f64> {
    let problem = SoftProblem::new(stack, Some(params))?;
    Ok(problem
        .sweep_params(SoftModel::Exact, params, prior, MStepMode::PluginMean)?
        .totals
        .objective)
}

/// `sum_t ln sum_a p(x=a) prod_i p(z_it | x=a)`.
pub fn simple_log_likelihood(stack: &ExpertStack, params: &RaterParams, prior: f64) -> Result<f64> {
    let problem = SoftProblem::new(stack, Some(params))?;
    Ok(problem
        .sweep_params(SoftModel::Simplified, params, prior, MStepMode::PluginMean)?
        .totals
        .objective)
}

/// One exact-model M-step from `params`, unclamped.
pub fn soft_m_step(
    stack: &ExpertStack,
    params: &RaterParams,
    prior: f64,
    mode: MStepMode,
) -> Result<RaterParams> {
    let problem = SoftProblem::new(stack, Some(params))?;
    let sweep = problem.sweep_params(SoftModel::Exact, params, prior, mode)?;
    let (sens, spec) = sweep.rates()?;
    Ok(RaterParams::from_canonical(&problem.order, &sens, &spec))
}

/// One simplified-model M-step from `params`, unclamped.
pub fn simple_m_step(
    stack: &ExpertStack,
    params: &RaterParams,
    prior: f64,
    mode: MStepMode,
) -> Result<RaterParams> {
    let problem = SoftProblem::new(stack, Some(params))?;
    let sweep = problem.sweep_params(SoftModel::Simplified, params, prior, mode)?;
    let (sens, spec) = sweep.rates()?;
    Ok(RaterParams::from_canonical(&problem.order, &sens, &spec))
}

pub fn run_soft_em(stack: &ExpertStack, config: &FusionConfig) -> Result<FusionResult> {
    run_soft_em_observed(stack, config, |_| {})
}

/// [`run_soft_em`] calling `observer` after every E-step.
pub fn run_soft_em_observed<O>(
    stack: &ExpertStack,
    config: &FusionConfig,
    observer: O,
) -> Result<FusionResult>
where
    O: FnMut(IterationView<'_>),
{
    config.validate()?;
    let model = SoftModel::from_variant(config.variant)?;
    let problem = SoftProblem::new(stack, None)?;
    if let SoftModel::Exact = model {
        check_guard(stack.len(), config.enumeration_guard)?;
    }
    let prior = resolve_prior(stack, config.prior)?;
    let objective_approximate = match model {
        SoftModel::MonteCarlo { .. } => stack.len() > config.enumeration_guard,
        _ => false,
    };
    let outcome = em::run_loop(
        config,
        &problem.order,
        |sens, spec| {
            problem.sweep(
                model,
                sens,
                spec,
                prior,
                config.mstep_mode,
                config.enumeration_guard,
            )
        },
        observer,
    )?;
    Ok(FusionResult {
        posterior: VolumeGrid::new(stack.dims(), VolumeKind::Posterior, outcome.posterior)?,
        params: outcome.params,
        ll_trace: outcome.trace,
        iters_run: outcome.iters_run,
        converged: outcome.converged,
        prior,
        objective_approximate,
    })
}

/// Runs the EM variant selected in `config`, binary or soft.
pub fn fuse(stack: &ExpertStack, config: &FusionConfig) -> Result<FusionResult> {
    match config.variant {
        Variant::Binary => crate::staple::run_em(stack, config),
        _ => run_soft_em(stack, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staple::{posterior_voxel, run_em_observed};
    use crate::volume::Dim3;

    fn params(sens: &[f64], spec: &[f64]) -> RaterParams {
        RaterParams::new(sens.to_vec(), spec.to_vec()).unwrap()
    }

    fn soft_stack(columns: &[Vec<f64>]) -> ExpertStack {
        let dims = Dim3::new(columns[0].len(), 1, 1).unwrap();
        ExpertStack::with_default_ids(
            columns
                .iter()
                .map(|c| VolumeGrid::new(dims, VolumeKind::SoftLabel, c.clone()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn rand_vec(rng: &mut CounterRng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..len).map(|_| lo + (hi - lo) * rng.uniform()).collect()
    }

    #[test]
    fn joint_soft_prob_examples() {
        let c = |bits, m| VoteCombination::new(bits, m).unwrap();
        assert_eq!(joint_soft_prob(&[1.0, 0.0], c(0b01, 2)).unwrap(), 1.0);
        for bits in [0b00, 0b10, 0b11] {
            assert_eq!(joint_soft_prob(&[1.0, 0.0], c(bits, 2)).unwrap(), 0.0);
        }
        for bits in 0..4 {
            assert_eq!(joint_soft_prob(&[0.5, 0.5], c(bits, 2)).unwrap(), 0.25);
        }
        let b = VoteCombination::from_votes(&[true, false, true]).unwrap();
        assert_eq!(b.bits(), 0b101);
        let p = joint_soft_prob(&[0.3, 0.9, 0.5], b).unwrap();
        assert!((p - 0.015).abs() < 1e-15);
        assert!(joint_soft_prob(&[0.3], b).is_err());
        assert!(VoteCombination::new(0b100, 2).is_err());
    }

    #[test]
    fn joint_probabilities_sum_to_one() {
        let mut rng = CounterRng::new(5, 0);
        for m in 1..=10 {
            let q = rand_vec(&mut rng, m, 0.0, 1.0);
            let total: f64 = VoteCombination::all(m)
                .unwrap()
                .map(|b| joint_soft_prob(&q, b).unwrap())
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_e_step_degenerate_equals_binary() {
        let p = params(&[0.8, 0.7, 0.95], &[0.9, 0.6, 0.75]);
        for code in 0..8u64 {
            let q: Vec<f64> = (0..3).map(|j| ((code >> j) & 1) as f64).collect();
            let hard = posterior_voxel(&q, &p, 0.2).unwrap();
            assert_eq!(soft_e_step_voxel(&q, &p, 0.2).unwrap(), hard);
            assert_eq!(simple_e_step_voxel(&q, &p, 0.2).unwrap(), hard);
            for samples in [1, 7, 100] {
                assert_eq!(mc_soft_e_step_voxel(&q, &p, 0.2, samples, 9).unwrap(), hard);
            }
        }
    }

    #[test]
    fn soft_e_step_single_half_vote() {
        for s in [0.6, 0.9, 0.99] {
            let w = soft_e_step_voxel(&[0.5], &params(&[s], &[s]), 0.5).unwrap();
            assert!((w - (0.5 * s + 0.5 * (1.0 - s))).abs() < 1e-15);
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_e_step_is_affine_in_each_vote() {
        let mut rng = CounterRng::new(77, 1);
        for _ in 0..20 {
            let q = rand_vec(&mut rng, 5, 0.0, 1.0);
            let p = params(
                &rand_vec(&mut rng, 5, 0.55, 0.99),
                &rand_vec(&mut rng, 5, 0.55, 0.99),
            );
            for i in 0..5 {
                let at = |x: f64| {
                    let mut v = q.clone();
                    v[i] = x;
                    soft_e_step_voxel(&v, &p, 0.3).unwrap()
                };
                let (a, b, c) = (at(0.0), at(0.4), at(1.0));
                assert!((b - (0.6 * a + 0.4 * c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn guard_rejects_large_exact_enumeration() {
        let q = vec![0.5; 21];
        let p = RaterParams::uniform(21, 0.9, 0.9).unwrap();
        assert!(matches!(
            soft_e_step_voxel(&q, &p, 0.5),
            Err(Error::Capacity { .. })
        ));
        assert!(mc_soft_e_step_voxel(&q, &p, 0.5, 50, 1).is_ok());
    }

    #[test]
    fn mc_is_deterministic_and_close() {
        let mut rng = CounterRng::new(3, 3);
        let q = rand_vec(&mut rng, 7, 0.0, 1.0);
        let p = params(
            &rand_vec(&mut rng, 7, 0.6, 0.95),
            &rand_vec(&mut rng, 7, 0.6, 0.95),
        );
        let a = mc_soft_e_step_voxel(&q, &p, 0.3, 200_000, 17).unwrap();
        let b = mc_soft_e_step_voxel(&q, &p, 0.3, 200_000, 17).unwrap();
        assert_eq!(a, b);
        let exact = soft_e_step_voxel(&q, &p, 0.3).unwrap();
        assert!((a - exact).abs() < 0.005, "{a} vs {exact}");
    }

    #[test]
    fn mc_beyond_guard_uses_sparse_counts() {
        let m = 24;
        let q: Vec<f64> = (0..m).map(|j| if j % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let p = RaterParams::uniform(m, 0.85, 0.9).unwrap();
        let hard = posterior_voxel(&q, &p, 0.1).unwrap();
        assert_eq!(mc_soft_e_step_voxel(&q, &p, 0.1, 33, 2).unwrap(), hard);
    }

    #[test]
    fn noisy_channel_examples() {
        assert_eq!(noisy_channel_likelihood(1.0, Label::Lesion, 0.8, 0.3), 0.8);
        let v = noisy_channel_likelihood(0.3, Label::Lesion, 0.8, 0.3);
        assert!((v - 0.38).abs() < 1e-15);
        for s in [0.2, 0.7, 0.95] {
            assert!((noisy_channel_likelihood(0.5, Label::Lesion, s, s) - 0.5).abs() < 1e-15);
            assert!((noisy_channel_likelihood(0.5, Label::Background, s, s) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn simple_e_step_uninformative_votes_return_prior() {
        let p = params(&[0.8, 0.7, 0.9], &[0.8, 0.7, 0.9]);
        let w = simple_e_step_voxel(&[0.5, 0.5, 0.5], &p, 0.13).unwrap();
        assert!((w - 0.13).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_single_voxel() {
        let stack = soft_stack(&[vec![0.5]]);
        let p = params(&[0.5], &[0.5]);
        assert!((soft_log_likelihood(&stack, &p, 0.5).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!((simple_log_likelihood(&stack, &p, 0.5).unwrap() - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn simple_log_likelihood_is_additive() {
        let a = vec![0.2, 0.9, 0.4];
        let b = vec![0.7, 0.1, 1.0];
        let p = params(&[0.8, 0.7], &[0.9, 0.95]);
        let single = simple_log_likelihood(&soft_stack(&[a.clone(), b.clone()]), &p, 0.3).unwrap();
        let a2 = [a.clone(), a].concat();
        let b2 = [b.clone(), b].concat();
        let double = simple_log_likelihood(&soft_stack(&[a2, b2]), &p, 0.3).unwrap();
        assert!((double - 2.0 * single).abs() < 1e-12);
    }

    #[test]
    fn m_step_perfect_agreement() {
        let stack = soft_stack(&[vec![1.0, 0.0]]);
        // near-certain rater so the E-step gives w = (1, 0) up to clamping
        let p = params(&[1.0], &[1.0]);
        for mode in [MStepMode::ExpectedCount, MStepMode::PluginMean] {
            let r = soft_m_step(&stack, &p, 0.5, mode).unwrap();
            assert!((r.sensitivity[0] - 1.0).abs() < 1e-6);
            assert!((r.specificity[0] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn m_step_expected_counts_match_brute_force() {
        let mut rng = CounterRng::new(21, 4);
        let n = 9;
        let cols = vec![
            rand_vec(&mut rng, n, 0.0, 1.0),
            rand_vec(&mut rng, n, 0.0, 1.0),
        ];
        let stack = soft_stack(&cols);
        let p = params(&[0.8, 0.65], &[0.9, 0.7]);
        let prior = 0.35;
        let got = soft_m_step(&stack, &p, prior, MStepMode::ExpectedCount).unwrap();

        // literal expected complete-data counts over the four combinations
        let (mut pos, mut neg, mut m1, mut m0) = ([0.0f64; 2], [0.0f64; 2], 0.0, 0.0);
        for t in 0..n {
            for b0 in [0.0, 1.0] {
                for b1 in [0.0, 1.0] {
                    let qb = (if b0 == 1.0 {
                        cols[0][t]
                    } else {
                        1.0 - cols[0][t]
                    }) * (if b1 == 1.0 {
                        cols[1][t]
                    } else {
                        1.0 - cols[1][t]
                    });
                    let lik = |a: bool| {
                        let f = |b: f64, s: f64, sp: f64| {
                            if a {
                                if b == 1.0 {
                                    s
                                } else {
                                    1.0 - s
                                }
                            } else if b == 1.0 {
                                1.0 - sp
                            } else {
                                sp
                            }
                        };
                        f(b0, 0.8, 0.9) * f(b1, 0.65, 0.7)
                    };
                    let j1 = prior * lik(true);
                    let j0 = (1.0 - prior) * lik(false);
                    let post = j1 / (j0 + j1);
                    m1 += qb * post;
                    m0 += qb * (1.0 - post);
                    pos[0] += qb * post * b0;
                    pos[1] += qb * post * b1;
                    neg[0] += qb * (1.0 - post) * (1.0 - b0);
                    neg[1] += qb * (1.0 - post) * (1.0 - b1);
                }
            }
        }
        for i in 0..2 {
            assert!((got.sensitivity[i] - pos[i] / m1).abs() < 1e-12);
            assert!((got.specificity[i] - neg[i] / m0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_soft_runs_track_binary_run() {
        let mut rng = CounterRng::new(8, 8);
        let n = 500;
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                (0..n)
                    .map(|_| if rng.uniform() < 0.3 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect();
        let dims = Dim3::new(n, 1, 1).unwrap();
        let binary = ExpertStack::with_default_ids(
            cols.iter()
                .map(|c| VolumeGrid::new(dims, VolumeKind::BinaryLabel, c.clone()).unwrap())
                .collect(),
        )
        .unwrap();
        let soft = binary.clone().into_soft().unwrap();
        let cfg = FusionConfig {
            max_iters: 15,
            ..FusionConfig::default()
        };
        let mut reference = Vec::new();
        let base = run_em_observed(&binary, &cfg, |v| {
            reference.push((v.posterior.to_vec(), v.params.clone()))
        })
        .unwrap();
        for variant in [
            Variant::SoftExact,
            Variant::SoftExactMc {
                samples: 3,
                seed: 1,
            },
            Variant::Simplified,
        ] {
            let cfg = FusionConfig {
                variant,
                ..cfg.clone()
            };
            let mut k = 0;
            let r = run_soft_em_observed(&soft, &cfg, |v| {
                assert_eq!(v.posterior, &reference[k].0[..]);
                assert_eq!(v.params, &reference[k].1);
                k += 1;
            })
            .unwrap();
            assert_eq!(k, reference.len());
            assert_eq!(r.params, base.params);
            assert_eq!(r.ll_trace, base.ll_trace);
        }
    }
}
