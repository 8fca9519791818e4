//! Voxel sweeps and the EM loop shared by every fusion variant.
//!
//! One sweep evaluates, for a fixed parameter set, the posterior of every
//! voxel, the variant's objective, and the expected counts needed by the
//! M-step. Voxels are processed in fixed chunks of [`CHUNK`] and the chunk
//! partials are folded in chunk order, so sums do not depend on the number
//! of worker threads.

use rayon::prelude::*;

use crate::error::{Error, PosteriorSide, Result};
use crate::staple::{FusionConfig, RaterParams};

pub(crate) const CHUNK: usize = 4096;

/// Per-chunk accumulator handed to voxel kernels.
#[derive(Debug, Clone)]
pub(crate) struct Partial {
    /// Expected count of (vote = 1, truth = 1) per expert, canonical order.
    pub pos: Vec<f64>,
    /// Expected count of (vote = 0, truth = 0) per expert, canonical order.
    pub neg: Vec<f64>,
    pub mass1: f64,
    pub mass0: f64,
    pub objective: f64,
}

impl Partial {
    pub(crate) fn new(m: usize) -> Self {
        Partial {
            pos: vec![0.0; m],
            neg: vec![0.0; m],
            mass1: 0.0,
            mass0: 0.0,
            objective: 0.0,
        }
    }

    fn absorb(&mut self, other: &Partial) {
        for (a, b) in self.pos.iter_mut().zip(&other.pos) {
            *a += b;
        }
        for (a, b) in self.neg.iter_mut().zip(&other.neg) {
            *a += b;
        }
        self.mass1 += other.mass1;
        self.mass0 += other.mass0;
        self.objective += other.objective;
    }
}

/// Result of one pass over all voxels.
#[derive(Debug, Clone)]
pub(crate) struct Sweep {
    pub posterior: Vec<f64>,
    pub totals: Partial,
}

impl Sweep {
    /// M-step from the accumulated expected counts; canonical order.
    pub fn rates(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = &self.totals;
        if t.mass1 <= 0.0 {
            return Err(Error::DegeneratePosterior {
                side: PosteriorSide::Lesion,
            });
        }
        if t.mass0 <= 0.0 {
            return Err(Error::DegeneratePosterior {
                side: PosteriorSide::Background,
            });
        }
        let sens = t
            .pos
            .iter()
            .map(|p| (p / t.mass1).clamp(0.0, 1.0))
            .collect();
        let spec = t
            .neg
            .iter()
            .map(|q| (q / t.mass0).clamp(0.0, 1.0))
            .collect();
        Ok((sens, spec))
    }
}

/// Runs `kernel` over every voxel. The kernel returns `(w_t(1), objective_t)`
/// and adds its expected counts to the partial; posterior mass is tallied here.
pub(crate) fn sweep<S, I, K>(n: usize, m: usize, init: I, kernel: K) -> Sweep
where
    I: Fn() -> S + Sync,
    K: Fn(usize, &mut S, &mut Partial) -> (f64, f64) + Sync,
{
    let mut posterior = vec![0.0; n];
    let partials: Vec<Partial> = posterior
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(c, out)| {
            let mut scratch = init();
            let mut part = Partial::new(m);
            let base = c * CHUNK;
            for (k, slot) in out.iter_mut().enumerate() {
                let (w1, obj) = kernel(base + k, &mut scratch, &mut part);
                *slot = w1;
                part.mass1 += w1;
                part.mass0 += 1.0 - w1;
                part.objective += obj;
            }
            part
        })
        .collect();
    let mut totals = Partial::new(m);
    for p in &partials {
        totals.absorb(p);
    }
    Sweep { posterior, totals }
}

/// Chunked, order-fixed sum of `f(t)` over `0..n`.
pub(crate) fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
    let parts: Vec<f64> = starts
        .par_iter()
        .map(|&s| (s..(s + CHUNK).min(n)).map(&f).sum::<f64>())
        .collect();
    parts.iter().sum()
}

/// `(w_t(1), log p(votes))` from the two class log-joints `ln p(x=0) + ln L0`
/// and `ln p(x=1) + ln L1`.
#[inline(always)]
pub(crate) fn posterior_from_logs(log_joint0: f64, log_joint1: f64) -> (f64, f64) {
    let mx = log_joint0.max(log_joint1);
    let lse = mx + ((log_joint0 - mx).exp() + (log_joint1 - mx).exp()).ln();
    ((log_joint1 - lse).exp().min(1.0), lse)
}

/// What an EM iteration exposes to observers.
pub struct IterationView<'a> {
    pub iteration: usize,
    /// `w_t(1)` computed from `params`.
    pub posterior: &'a [f64],
    /// Parameters the E-step used, in stack order.
    pub params: &'a RaterParams,
    pub objective: f64,
}

pub(crate) struct EmOutcome {
    pub posterior: Vec<f64>,
    pub params: RaterParams,
    pub trace: Vec<f64>,
    pub iters_run: usize,
    pub converged: bool,
}

/// The EM loop. `step` sweeps the voxels for the given parameters, which are
/// in canonical expert order.
pub(crate) fn run_loop<F, O>(
    config: &FusionConfig,
    order: &[usize],
    mut step: F,
    mut observer: O,
) -> Result<EmOutcome>
where
    F: FnMut(&[f64], &[f64]) -> Result<Sweep>,
    O: FnMut(IterationView<'_>),
{
    let m = order.len();
    let mut sens = vec![config.init_sensitivity; m];
    let mut spec = vec![config.init_specificity; m];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iters_run = 0;
    let mut last_posterior = Vec::new();

    for iteration in 0..config.max_iters {
        let sweep = step(&sens, &spec)?;
        trace.push(sweep.totals.objective);
        let current = RaterParams::from_canonical(order, &sens, &spec);
        observer(IterationView {
            iteration,
            posterior: &sweep.posterior,
            params: &current,
            objective: sweep.totals.objective,
        });
        let (mut new_sens, mut new_spec) = sweep.rates().map_err(|e| match e {
            Error::DegeneratePosterior { side } => Error::EmAborted {
                side,
                iteration,
                trace: trace.clone(),
            },
            other => other,
        })?;
        clamp_rates(&mut new_sens);
        clamp_rates(&mut new_spec);
        let delta = sens
            .iter()
            .zip(&new_sens)
            .chain(spec.iter().zip(&new_spec))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        sens = new_sens;
        spec = new_spec;
        last_posterior = sweep.posterior;
        iters_run = iteration + 1;
        if delta < config.tol {
            converged = true;
            break;
        }
    }

    Ok(EmOutcome {
        posterior: last_posterior,
        params: RaterParams::from_canonical(order, &sens, &spec),
        trace,
        iters_run,
        converged,
    })
}

pub(crate) const PARAM_FLOOR: f64 = 1e-7;

pub(crate) fn clamp_rates(v: &mut [f64]) {
    for x in v {
        *x = x.clamp(PARAM_FLOOR, 1.0 - PARAM_FLOOR);
    }
}
