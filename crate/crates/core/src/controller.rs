//! Backstepping transformation to the decoupled target system and the
//! ramp-metering feedback law.

use thiserror::Error;

use crate::kernels::KernelTable;
use crate::linearize::{boundary_rows, FieldState, LinearizeError, Representation};
use crate::model::{NetworkParams, SegmentId};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error(transparent)]
    State(#[from] LinearizeError),
    #[error("{segment} state has {state} intervals but its kernel table has {table}")]
    GridMismatch {
        segment: SegmentId,
        state: usize,
        table: usize,
    },
    #[error("expected a {expected} state, got {found}")]
    WrongSegment { expected: SegmentId, found: SegmentId },
    #[error("control gain is singular")]
    SingularGain,
    #[error("target residual needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("recorded target states have inconsistent grids or times")]
    RecordMismatch,
}

pub type Result<T> = std::result::Result<T, ControlError>;

/// Kernel tables for both segments, on the simulation grids.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernels {
    pub seg1: KernelTable,
    pub seg2: KernelTable,
}

impl Kernels {
    fn table(&self, id: SegmentId) -> &KernelTable {
        match id {
            SegmentId::Outgoing => &self.seg1,
            SegmentId::Incoming => &self.seg2,
        }
    }
}

/// `(alpha_i, beta_i)` on the segment grids.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetState {
    pub length: f64,
    pub intervals: usize,
    pub alpha1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub beta2: Vec<f64>,
}

fn check(state: &FieldState, id: SegmentId, kernels: &Kernels) -> Result<()> {
    state.expect(Representation::Scaled)?;
    if state.segment() != id {
        return Err(ControlError::WrongSegment {
            expected: id,
            found: state.segment(),
        });
    }
    let table = kernels.table(id);
    if table.m != state.grid.intervals {
        return Err(ControlError::GridMismatch {
            segment: id,
            state: state.grid.intervals,
            table: table.m,
        });
    }
    Ok(())
}

/// Trapezoidal `int K^{vw}(x_i, xi) w(xi) + K^{vv}(x_i, xi) v(xi) dxi` over
/// the triangle row of node `i`.
pub fn row_integral(table: &KernelTable, i: usize, w: &[f64], v: &[f64]) -> f64 {
    let range = table.xi_range(i);
    let (first, last) = (*range.start(), *range.end());
    if first == last {
        return 0.0;
    }
    let mut sum = 0.0;
    for j in range {
        let weight = if j == first || j == last { 0.5 } else { 1.0 };
        sum += weight * (table.kvw(i, j) * w[j] + table.kvv(i, j) * v[j]);
    }
    sum * table.grid().spacing()
}

/// `alpha = w-bar`, `beta = v~ - int (K^{vw} w-bar + K^{vv} v~)`.
pub fn backstepping_transform(
    s1: &FieldState,
    s2: &FieldState,
    kernels: &Kernels,
) -> Result<TargetState> {
    check(s1, SegmentId::Outgoing, kernels)?;
    check(s2, SegmentId::Incoming, kernels)?;
    let beta = |s: &FieldState, table: &KernelTable| -> Vec<f64> {
        (0..s.b.len())
            .map(|i| s.b[i] - row_integral(table, i, &s.a, &s.b))
            .collect()
    };
    Ok(TargetState {
        length: s1.grid.length,
        intervals: s1.grid.intervals,
        alpha1: s1.a.clone(),
        beta1: beta(s1, &kernels.seg1),
        alpha2: s2.a.clone(),
        beta2: beta(s2, &kernels.seg2),
    })
}

/// Recovers `v~` on both segments from a target state by substitution along
/// the grid, starting where the kernel row is a single node.
pub fn inverse_transform(target: &TargetState, kernels: &Kernels) -> (Vec<f64>, Vec<f64>) {
    let solve = |table: &KernelTable, alpha: &[f64], beta: &[f64]| -> Vec<f64> {
        let m = table.m;
        let h = table.grid().spacing();
        let mut v = vec![0.0; m + 1];
        let order: Vec<usize> = match table.segment {
            SegmentId::Outgoing => (0..=m).rev().collect(),
            SegmentId::Incoming => (0..=m).collect(),
        };
        for i in order {
            // Every term except the diagonal one uses already known values.
            v[i] = 0.0;
            let known = row_integral(table, i, alpha, &v);
            let range = table.xi_range(i);
            let diag_weight = if range.start() == range.end() { 0.0 } else { 0.5 * h };
            v[i] = (beta[i] + known) / (1.0 - diag_weight * table.kvv(i, i));
        }
        v
    };
    (
        solve(&kernels.seg1, &target.alpha1, &target.beta1),
        solve(&kernels.seg2, &target.alpha2, &target.beta2),
    )
}

/// On-ramp flux deviation `U` that makes the junction row of the plant
/// reproduce the target junction relation `beta2(0) = A beta1(0) + B alpha2(0)`.
pub fn control_input(
    s1: &FieldState,
    s2: &FieldState,
    kernels: &Kernels,
    net: &NetworkParams,
) -> Result<f64> {
    check(s1, SegmentId::Outgoing, kernels)?;
    check(s2, SegmentId::Incoming, kernels)?;
    let rows = boundary_rows(net);
    if !(rows.control_gain.abs() > 0.0 && rows.control_gain.is_finite()) {
        return Err(ControlError::SingularGain);
    }
    let i1 = row_integral(&kernels.seg1, 0, &s1.a, &s1.b);
    let i2 = row_integral(&kernels.seg2, kernels.seg2.m, &s2.a, &s2.b);
    Ok((i2 - rows.junction_vv * i1) / rows.control_gain)
}

/// Sup-norm residual of the target system on a recorded trajectory.
///
/// Transport equations are differenced the way the simulator steps them:
/// forward in time and upwind in space, at interior nodes. Boundary
/// relations are checked at every sample.
pub fn target_residual(states: &[TargetState], times: &[f64], net: &NetworkParams) -> Result<f64> {
    if states.len() < 3 {
        return Err(ControlError::TooFewSamples(states.len()));
    }
    let n = states[0].intervals;
    if times.len() != states.len()
        || states.iter().any(|s| s.intervals != n)
        || times.windows(2).any(|t| t[1] <= t[0])
    {
        return Err(ControlError::RecordMismatch);
    }
    let h = states[0].length / n as f64;
    let (v1, l1) = (net.ss1.lambda_w, net.ss1.lambda_v);
    let (v2, l2) = (net.ss2.lambda_w, net.ss2.lambda_v);
    let mut res = 0.0f64;
    for k in 0..states.len() - 1 {
        let dt = times[k + 1] - times[k];
        let (cur, next) = (&states[k], &states[k + 1]);
        for i in 1..n {
            let r = [
                (next.alpha1[i] - cur.alpha1[i]) / dt + v1 * (cur.alpha1[i] - cur.alpha1[i - 1]) / h,
                (next.beta1[i] - cur.beta1[i]) / dt - l1 * (cur.beta1[i + 1] - cur.beta1[i]) / h,
                (next.alpha2[i] - cur.alpha2[i]) / dt + v2 * (cur.alpha2[i] - cur.alpha2[i - 1]) / h,
                (next.beta2[i] - cur.beta2[i]) / dt - l2 * (cur.beta2[i + 1] - cur.beta2[i]) / h,
            ];
            res = r.iter().fold(res, |m, x| m.max(x.abs()));
        }
    }
    Ok(res.max(boundary_residual(states, net)))
}

/// Largest violation of the target boundary relations over the record.
pub fn boundary_residual(states: &[TargetState], net: &NetworkParams) -> f64 {
    let rows = boundary_rows(net);
    let mut res = 0.0f64;
    for s in states {
        let n = s.intervals;
        let r = [
            s.beta1[n] - rows.outlet * s.alpha1[n],
            s.alpha1[0] - rows.junction_w * s.alpha2[n],
            s.alpha2[0] - rows.inlet * s.beta2[0],
            s.beta2[n] - rows.junction_vv * s.beta1[0] - rows.junction_vw * s.alpha2[n],
        ];
        res = r.iter().fold(res, |m, x| m.max(x.abs()));
    }
    res
}
