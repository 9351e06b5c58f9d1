//! Aalen-Johansen estimation of transition probabilities out of state 1,
//! risk grouping by predicted probability, grouped mean/moderate calibration
//! contrasts, and the leave-one-out engine behind pseudo-values.
//!
//! The estimator is the product integral over observed event times,
//! `P(0,t) = prod_{s <= t} (Id + dA(s))` with `dA_{jk}(s) = d_{jk}(s) / Y_j(s)`.
//! Since every subject starts in state 1 only the first row is tracked. Tied
//! transitions share the risk sets from just before the tie, and censorings
//! leave the risk sets after the events at the same time.

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{Cohort, PredictionMatrix};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("no subjects at risk in state 1 at time zero")]
    NoRiskSet,
    #[error("leave-one-out requires at least two subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("number of groups must lie in 1..=n, got {groups} for n = {n}")]
    InvalidGroups { groups: usize, n: usize },
    #[error("group {group} for state {state} has {size} subjects, need at least {min}")]
    GroupTooSmall {
        state: usize,
        group: usize,
        size: usize,
        min: usize,
    },
}

/// Estimated occupation probabilities `P(X(t) = k | X(0) = 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationEstimate {
    pub horizon: f64,
    pub probs: Vec<f64>,
    /// Number of distinct transition times entering the product.
    pub n_events: usize,
    /// Event times skipped because no subject was at risk in the source state.
    pub zero_risk_skips: usize,
}

#[derive(Debug, Clone, Copy)]
enum EventKind {
    Transition { from: usize, to: usize },
    Censor { state: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    subject: usize,
    kind: EventKind,
}

/// Chronologically sorted transition and censoring events for a set of
/// subjects, reusable across leave-one-out sweeps.
struct Timeline {
    n_states: usize,
    n_subjects: usize,
    events: Vec<Event>,
}

impl Timeline {
    fn build(cohort: &Cohort, subjects: &[usize]) -> Self {
        let mut events = Vec::new();
        for (local, &idx) in subjects.iter().enumerate() {
            let s = &cohort.subjects()[idx];
            for pair in s.path.windows(2) {
                events.push(Event {
                    time: pair[1].1,
                    subject: local,
                    kind: EventKind::Transition {
                        from: pair[0].0,
                        to: pair[1].0,
                    },
                });
            }
            if let Some(c) = s.censor_time {
                events.push(Event {
                    time: c,
                    subject: local,
                    kind: EventKind::Censor {
                        state: s.last_state(),
                    },
                });
            }
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        Timeline {
            n_states: cohort.structure().n_states(),
            n_subjects: subjects.len(),
            events,
        }
    }

    /// One pass of the product integral up to `t`, optionally skipping a
    /// subject (by local index) for leave-one-out estimates.
    fn sweep(&self, t: f64, skip: Option<usize>) -> OccupationEstimate {
        let k = self.n_states;
        let active = self.n_subjects - usize::from(skip.is_some());
        let mut counts = vec![0usize; k];
        counts[0] = active;
        let mut probs = vec![0.0; k];
        probs[0] = 1.0;
        let mut n_events = 0;
        let mut zero_risk_skips = 0;
        let mut deltas = vec![0.0; k];
        // d_{jk} accumulator for one tied time, keyed linearly (few entries).
        let mut tied: Vec<(usize, usize, usize)> = Vec::new();

        let mut i = 0;
        while i < self.events.len() {
            let time = self.events[i].time;
            if time > t {
                break;
            }
            let mut j = i;
            tied.clear();
            while j < self.events.len() && self.events[j].time == time {
                let ev = self.events[j];
                if Some(ev.subject) != skip {
                    if let EventKind::Transition { from, to } = ev.kind {
                        match tied.iter_mut().find(|(f, t2, _)| *f == from && *t2 == to) {
                            Some(entry) => entry.2 += 1,
                            None => tied.push((from, to, 1)),
                        }
                    }
                }
                j += 1;
            }
            if !tied.is_empty() {
                deltas.iter_mut().for_each(|d| *d = 0.0);
                let mut applied = false;
                for &(from, to, d) in &tied {
                    let at_risk = counts[from - 1];
                    if at_risk == 0 {
                        zero_risk_skips += 1;
                        continue;
                    }
                    let transfer = probs[from - 1] * d as f64 / at_risk as f64;
                    deltas[from - 1] -= transfer;
                    deltas[to - 1] += transfer;
                    applied = true;
                }
                if applied {
                    for (p, d) in probs.iter_mut().zip(&deltas) {
                        *p += d;
                    }
                    n_events += 1;
                }
            }
            // Risk-set updates take effect after the factor at this time.
            for ev in &self.events[i..j] {
                if Some(ev.subject) == skip {
                    continue;
                }
                match ev.kind {
                    EventKind::Transition { from, to } => {
                        counts[from - 1] -= 1;
                        counts[to - 1] += 1;
                    }
                    EventKind::Censor { state } => {
                        counts[state - 1] -= 1;
                    }
                }
            }
            i = j;
        }
        OccupationEstimate {
            horizon: t,
            probs,
            n_events,
            zero_risk_skips,
        }
    }
}

/// Aalen-Johansen estimate of the occupation probabilities at time `t`.
pub fn aalen_johansen(cohort: &Cohort, t: f64) -> Result<OccupationEstimate, EstimatorError> {
    let all: Vec<usize> = (0..cohort.n()).collect();
    aj_on_subset(cohort, &all, t)
}

/// Aalen-Johansen restricted to the given subject indices.
pub fn aj_on_subset(
    cohort: &Cohort,
    subjects: &[usize],
    t: f64,
) -> Result<OccupationEstimate, EstimatorError> {
    if subjects.is_empty() {
        return Err(EstimatorError::EmptyCohort);
    }
    Ok(Timeline::build(cohort, subjects).sweep(t, None))
}

/// Row i holds the Aalen-Johansen probabilities computed with subject i
/// removed. Matches naive recomputation exactly: the same event sweep runs
/// with the subject's events and risk contributions masked out.
pub fn aj_leave_one_out(cohort: &Cohort, t: f64) -> Result<Array2<f64>, EstimatorError> {
    let all: Vec<usize> = (0..cohort.n()).collect();
    aj_loo_on_subset(cohort, &all, t)
}

/// Leave-one-out over a subset; row r corresponds to removing `subjects[r]`.
pub fn aj_loo_on_subset(
    cohort: &Cohort,
    subjects: &[usize],
    t: f64,
) -> Result<Array2<f64>, EstimatorError> {
    let m = subjects.len();
    if m < 2 {
        return Err(EstimatorError::TooFewSubjects(m));
    }
    let timeline = Timeline::build(cohort, subjects);
    let k = cohort.structure().n_states();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|local| timeline.sweep(t, Some(local)).probs)
        .collect();
    let mut out = Array2::zeros((m, k));
    for (r, row) in rows.into_iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            out[[r, c]] = v;
        }
    }
    Ok(out)
}

/// Assignment of subjects to near-equal risk groups for one state.
#[derive(Debug, Clone)]
pub struct RiskGrouping {
    pub state: usize,
    pub n_groups: usize,
    /// Group index per subject, in cohort order.
    pub assignment: Vec<usize>,
    /// Subject indices in ascending (predicted probability, id) order.
    order: Vec<usize>,
}

impl RiskGrouping {
    /// Subject indices per group, ordered by ascending predicted probability
    /// with ties broken by id.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_groups];
        for &i in &self.order {
            groups[self.assignment[i]].push(i);
        }
        groups
    }
}

/// Sort subjects by predicted probability of `state` (ties broken by id) and
/// split into `n_groups` blocks whose sizes differ by at most one.
pub fn make_risk_groups(
    preds: &PredictionMatrix,
    ids: &[u64],
    state: usize,
    n_groups: usize,
) -> Result<RiskGrouping, EstimatorError> {
    let n = preds.n();
    if n_groups == 0 || n_groups > n {
        return Err(EstimatorError::InvalidGroups {
            groups: n_groups,
            n,
        });
    }
    let col = preds.state_column(state);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(ids[a].cmp(&ids[b])));
    let base = n / n_groups;
    let remainder = n % n_groups;
    let mut assignment = vec![0usize; n];
    let mut rank = 0;
    for g in 0..n_groups {
        let size = base + usize::from(g < remainder);
        for _ in 0..size {
            assignment[order[rank]] = g;
            rank += 1;
        }
    }
    Ok(RiskGrouping {
        state,
        n_groups,
        assignment,
        order,
    })
}

/// Grouped mean calibration: the size-weighted average of within-group
/// Aalen-Johansen estimates for `state` minus the cohort mean prediction.
/// With one group this is the plain estimator contrast.
pub fn aj_mean_calibration(
    cohort: &Cohort,
    preds: &PredictionMatrix,
    state: usize,
    n_groups: usize,
) -> Result<f64, EstimatorError> {
    let points = aj_moderate_points(cohort, preds, state, n_groups)?;
    let grouping = make_risk_groups(preds, &cohort.ids(), state, n_groups)?;
    let groups = grouping.groups();
    let n = cohort.n() as f64;
    let observed: f64 = points
        .iter()
        .zip(&groups)
        .map(|(&(_, obs), g)| obs * g.len() as f64 / n)
        .sum();
    let mean_pred = preds.state_column(state).mean().unwrap_or(0.0);
    Ok(observed - mean_pred)
}

/// Per-group (mean predicted, Aalen-Johansen estimate) pairs for `state`,
/// ordered by ascending predicted probability.
pub fn aj_moderate_points(
    cohort: &Cohort,
    preds: &PredictionMatrix,
    state: usize,
    n_groups: usize,
) -> Result<Vec<(f64, f64)>, EstimatorError> {
    if cohort.n() == 0 {
        return Err(EstimatorError::EmptyCohort);
    }
    let grouping = make_risk_groups(preds, &cohort.ids(), state, n_groups)?;
    let col = preds.state_column(state);
    let t = preds.horizon;
    let groups = grouping.groups();
    let results: Vec<Result<(f64, f64), EstimatorError>> = groups
        .par_iter()
        .map(|members| {
            let est = aj_on_subset(cohort, members, t)?;
            let mean_pred = members.iter().map(|&i| col[i]).sum::<f64>() / members.len() as f64;
            Ok((mean_pred, est.probs[state - 1]))
        })
        .collect();
    results.into_iter().collect()
}
