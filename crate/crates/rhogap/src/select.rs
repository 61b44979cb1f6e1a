//! Active-subset selection: greedy ρ-gap optimization per time interval, an
//! exhaustive min-max oracle for small instances, and a mutual-information
//! baseline (variance reduction at reference points).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gp::{zero_prior, Dataset, MultiOutputGp};
use crate::kernel::{CoregKernel, SeKernelParams};
use crate::measure::{fill_distance, PointRequirements, RhoGapContext};

/// Squared fill distance charged while a subset is still smaller than M (in
/// particular empty): a large finite stand-in for "no coverage at all", so
/// the first greedy pick maximizes the data-free requirement gap instead of
/// drowning every candidate in the same infinity.
pub const EMPTY_FILL_SQ: f64 = 1e6;

/// Half-open time interval [start, end).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeInterval {
    pub start: f64,
    pub end: f64,
}

impl TimeInterval {
    /// `points` evaluation times covering [start, end), aligned to the start.
    pub fn grid(&self, points: usize) -> Vec<f64> {
        let len = self.end - self.start;
        (0..points)
            .map(|k| self.start + len * k as f64 / points as f64)
            .collect()
    }

    /// Splits [t0, t_end) into `count` equal intervals.
    pub fn uniform_partition(t0: f64, t_end: f64, count: usize) -> Vec<TimeInterval> {
        let len = (t_end - t0) / count as f64;
        (0..count)
            .map(|s| TimeInterval {
                start: t0 + s as f64 * len,
                end: t0 + (s + 1) as f64 * len,
            })
            .collect()
    }
}

/// A subset-selection instance: the candidate pool, the per-interval budget,
/// the task partition, and the scoring context.
pub struct SelectionProblem {
    pub full_data: Dataset,
    pub budget: usize,
    pub intervals: Vec<TimeInterval>,
    /// Evaluation times per interval.
    pub t_grid: usize,
    pub context: RhoGapContext,
}

impl SelectionProblem {
    pub fn new(
        full_data: Dataset,
        budget: usize,
        intervals: Vec<TimeInterval>,
        t_grid: usize,
        context: RhoGapContext,
    ) -> Result<Self> {
        if budget == 0 {
            return Err(Error::invalid("selection budget must be at least 1"));
        }
        if budget > full_data.len() {
            return Err(Error::invalid(format!(
                "budget {budget} exceeds the {} available samples",
                full_data.len()
            )));
        }
        if t_grid == 0 {
            return Err(Error::invalid("time grid needs at least one point"));
        }
        if intervals.is_empty() {
            return Err(Error::invalid("at least one time interval is required"));
        }
        for w in intervals.windows(2) {
            if (w[0].end - w[1].start).abs() > 1e-12 * (1.0 + w[0].end.abs()) {
                return Err(Error::invalid("intervals must be contiguous and ordered"));
            }
        }
        if intervals.iter().any(|iv| !(iv.start < iv.end)) {
            return Err(Error::invalid("intervals must have positive length"));
        }
        if full_data.x_dim() != context.model().data().x_dim()
            || full_data.u_dim() != context.model().data().u_dim()
        {
            return Err(Error::invalid(
                "candidate pool dimensions do not match the context model",
            ));
        }
        Ok(SelectionProblem {
            full_data,
            budget,
            intervals,
            t_grid,
            context,
        })
    }

    fn states(&self) -> Vec<Vec<f64>> {
        let dx = self.full_data.x_dim();
        self.full_data
            .samples()
            .iter()
            .map(|s| s.z.as_slice()[..dx].to_vec())
            .collect()
    }

    /// Per-candidate, per-time requirement tables for one interval. These are
    /// subset-independent, so the greedy loop computes them once.
    fn requirement_table(&self, interval: usize) -> Result<Vec<Vec<PointRequirements>>> {
        let times = self.intervals[interval].grid(self.t_grid);
        let states = self.states();
        states
            .par_iter()
            .map(|x| {
                times
                    .iter()
                    .map(|&t| self.context.output_requirements(x, t))
                    .collect()
            })
            .collect()
    }
}

/// ρ(x, t, subset) evaluated from a precomputed requirement row; charges the
/// [`EMPTY_FILL_SQ`] sentinel while the subset has fewer than M samples.
fn rho_against(
    req: &PointRequirements,
    x: &[f64],
    subset: &Dataset,
    kernels: &[SeKernelParams],
    m_fill: usize,
) -> Result<f64> {
    if subset.len() < m_fill {
        return Ok(req
            .outputs
            .iter()
            .map(|o| (EMPTY_FILL_SQ - o.requirement()).max(0.0))
            .sum());
    }
    let mut rho = 0.0;
    for (i, out) in req.outputs.iter().enumerate() {
        let phi = fill_distance(subset, x, req.u.as_slice(), &kernels[i], m_fill)?;
        rho += (phi * phi - out.requirement()).max(0.0);
    }
    Ok(rho)
}

fn max_rho_over_grid(
    reqs: &[Vec<PointRequirements>],
    states: &[Vec<f64>],
    subset: &Dataset,
    kernels: &[SeKernelParams],
    m_fill: usize,
) -> Result<f64> {
    let mut best = f64::NEG_INFINITY;
    for (i, row) in reqs.iter().enumerate() {
        for req in row {
            best = best.max(rho_against(req, &states[i], subset, kernels, m_fill)?);
        }
    }
    Ok(best)
}

/// Greedy selection outcome for one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSelection {
    pub indices: Vec<usize>,
    /// Value of the maximized ρ at each iteration (non-increasing).
    pub objective_trace: Vec<f64>,
    /// max ρ over all candidate states and grid times against the final
    /// subset — the quantity the exhaustive oracle minimizes.
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub intervals: Vec<IntervalSelection>,
    pub wall_clock_s: f64,
}

/// For each interval, repeatedly adds the sample whose state maximizes
/// ρ(x⁽ⁱ⁾, t, current subset) over remaining indices and the time grid.
/// Ties break to the smallest index, then the smallest time.
pub fn greedy_select(problem: &SelectionProblem) -> Result<SelectionResult> {
    let start = Instant::now();
    let states = problem.states();
    let kernels = problem.context.model().kernel().kernels();
    let m_fill = problem.context.m_fill();
    let mut intervals = Vec::with_capacity(problem.intervals.len());

    for s in 0..problem.intervals.len() {
        let reqs = problem.requirement_table(s)?;
        let mut chosen: Vec<usize> = Vec::with_capacity(problem.budget);
        let mut remaining: Vec<usize> = (0..problem.full_data.len()).collect();
        let mut trace = Vec::with_capacity(problem.budget);

        for _ in 0..problem.budget {
            let subset = problem.full_data.subset(&chosen)?;
            // Candidate scores; `remaining` is ascending, so a strict-">"
            // scan gives the smallest-index tie-break. Within a candidate,
            // strict ">" over the time loop keeps the smallest time.
            let scored: Vec<(usize, f64)> = remaining
                .par_iter()
                .map(|&i| {
                    let mut best = f64::NEG_INFINITY;
                    for req in &reqs[i] {
                        let rho = rho_against(req, &states[i], &subset, kernels, m_fill)?;
                        if rho > best {
                            best = rho;
                        }
                    }
                    Ok((i, best))
                })
                .collect::<Result<_>>()?;
            let mut best = scored[0];
            for s in &scored[1..] {
                if s.1 > best.1 {
                    best = *s;
                }
            }
            chosen.push(best.0);
            remaining.retain(|&i| i != best.0);
            trace.push(best.1);
        }

        let final_subset = problem.full_data.subset(&chosen)?;
        let final_objective =
            max_rho_over_grid(&reqs, &states, &final_subset, kernels, m_fill)?;
        intervals.push(IntervalSelection {
            indices: chosen,
            objective_trace: trace,
            final_objective,
        });
    }

    Ok(SelectionResult {
        intervals,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// max ρ over all candidate states and interval grid times for an explicit
/// subset — the objective shared by the greedy result and the oracle.
pub fn subset_objective(
    problem: &SelectionProblem,
    interval: usize,
    indices: &[usize],
) -> Result<f64> {
    if interval >= problem.intervals.len() {
        return Err(Error::invalid(format!("interval {interval} out of range")));
    }
    let reqs = problem.requirement_table(interval)?;
    let states = problem.states();
    let subset = problem.full_data.subset(indices)?;
    max_rho_over_grid(
        &reqs,
        &states,
        &subset,
        problem.context.model().kernel().kernels(),
        problem.context.m_fill(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    pub indices: Vec<usize>,
    pub objective: f64,
}

fn binomial_capped(n: usize, k: usize, cap: f64) -> f64 {
    let k = k.min(n - k);
    let mut v = 1.0f64;
    for i in 0..k {
        v = v * (n - i) as f64 / (i + 1) as f64;
        if v > cap {
            return f64::INFINITY;
        }
    }
    v
}

/// Minimizes the subset objective over every size-budget subset, per
/// interval. Guarded to C(N, N̄) ≤ 10⁵ candidate subsets.
pub fn exhaustive_select(problem: &SelectionProblem) -> Result<Vec<ExhaustiveResult>> {
    let n = problem.full_data.len();
    let k = problem.budget;
    let count = binomial_capped(n, k, 1e5);
    if count > 1e5 {
        return Err(Error::invalid(format!(
            "exhaustive search over C({n}, {k}) subsets exceeds the 1e5 guard"
        )));
    }
    let states = problem.states();
    let kernels = problem.context.model().kernel().kernels();
    let m_fill = problem.context.m_fill();

    let mut results = Vec::with_capacity(problem.intervals.len());
    for s in 0..problem.intervals.len() {
        let reqs = problem.requirement_table(s)?;
        let mut best: Option<ExhaustiveResult> = None;
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let subset = problem.full_data.subset(&idx)?;
            let obj = max_rho_over_grid(&reqs, &states, &subset, kernels, m_fill)?;
            // Strict "<" keeps the lexicographically first optimum.
            if best.as_ref().map_or(true, |b| obj < b.objective) {
                best = Some(ExhaustiveResult {
                    indices: idx.clone(),
                    objective: obj,
                });
            }
            // Next combination in lexicographic order.
            let mut advanced = false;
            let mut j = k;
            while j > 0 {
                j -= 1;
                if idx[j] < n - k + j {
                    idx[j] += 1;
                    for l in j + 1..k {
                        idx[l] = idx[l - 1] + 1;
                    }
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                break;
            }
        }
        results.push(best.expect("at least one subset is always scored"));
    }
    Ok(results)
}

/// Greedy mutual-information baseline: repeatedly adds the sample that most
/// reduces the total posterior variance of g (trace of the joint covariance)
/// summed over the reference points. Ties break to the smallest index.
pub fn mi_greedy_select(
    data: &Dataset,
    reference: &[DVector<f64>],
    budget: usize,
    kernel: &CoregKernel,
    noise: &DMatrix<f64>,
) -> Result<Vec<usize>> {
    if reference.is_empty() {
        return Err(Error::invalid("reference set must be nonempty"));
    }
    if budget > data.len() {
        return Err(Error::invalid(format!(
            "budget {budget} exceeds the {} available samples",
            data.len()
        )));
    }
    let df = kernel.component_dim();
    let mut chosen: Vec<usize> = Vec::with_capacity(budget);
    let mut remaining: Vec<usize> = (0..data.len()).collect();
    for _ in 0..budget {
        let scored: Vec<(usize, f64)> = remaining
            .par_iter()
            .map(|&i| {
                let mut ids = chosen.clone();
                ids.push(i);
                let gp = MultiOutputGp::fit(
                    data.subset(&ids)?,
                    kernel.clone(),
                    noise.clone(),
                    zero_prior(df),
                )?;
                let mut total = 0.0;
                for z in reference {
                    total += gp.posterior_g(z.as_slice())?.1.trace();
                }
                Ok((i, total))
            })
            .collect::<Result<_>>()?;
        let mut best = scored[0];
        for s in &scored[1..] {
            if s.1 < best.1 {
                best = *s;
            }
        }
        chosen.push(best.0);
        remaining.retain(|&i| i != best.0);
    }
    Ok(chosen)
}
