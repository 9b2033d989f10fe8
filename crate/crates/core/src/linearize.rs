//! Maps between physical variables `(rho, v)`, Riemann variables
//! `(w~, v~)` and the exponentially rescaled variables `(w-bar, v~)`, plus the
//! boundary rows of the linearized network.
//!
//! The first Riemann variable is the perturbation of the drivers' property,
//! `w~ = (gamma p*/q*)(rho v - q*) - (v - v*)/r = v~ + p'(rho*) rho~`. It is
//! transported at `v*` and relaxes at rate `1/tau`; `v~` travels upstream at
//! `gamma p* - v*`. Rescaling by `exp(x/(tau v*))` removes the relaxation
//! term from the `w` equation and moves it into `c(x) w-bar` in the `v`
//! equation.

use thiserror::Error;

use crate::model::{NetworkParams, SegmentId, SegmentParams, SteadyState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearizeError {
    #[error("expected {expected:?} representation, got {found:?}")]
    Representation {
        expected: Representation,
        found: Representation,
    },
    #[error("state leaves the linearization range at node {index}: rho = {rho}, v = {v}")]
    OutOfRange { index: usize, rho: f64, v: f64 },
    #[error("position {x} outside the {segment} interval")]
    OutsideInterval { x: f64, segment: SegmentId },
    #[error("field arrays have lengths {a} and {b}, grid has {nodes} nodes")]
    Length { a: usize, b: usize, nodes: usize },
    #[error("a grid needs at least one interval")]
    EmptyGrid,
}

pub type Result<T> = std::result::Result<T, LinearizeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    /// `(rho, v)`.
    Physical,
    /// `(w~, v~)`.
    Riemann,
    /// `(w-bar, v~)`.
    Scaled,
}

/// Uniform grid of `intervals + 1` nodes covering a segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub segment: SegmentId,
    pub length: f64,
    pub intervals: usize,
}

impl Grid {
    pub fn new(segment: SegmentId, length: f64, intervals: usize) -> Result<Self> {
        if intervals == 0 {
            return Err(LinearizeError::EmptyGrid);
        }
        Ok(Grid {
            segment,
            length,
            intervals,
        })
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.intervals as f64
    }

    pub fn nodes(&self) -> usize {
        self.intervals + 1
    }

    pub fn left(&self) -> f64 {
        self.segment.interval(self.length).0
    }

    pub fn position(&self, i: usize) -> f64 {
        // Anchor the far end exactly so that x = 0 and x = +-L are exact.
        let (left, right) = self.segment.interval(self.length);
        if i == self.intervals {
            right
        } else {
            left + i as f64 * self.spacing()
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nodes()).map(|i| self.position(i))
    }

    /// Index of the junction node `x = 0`.
    pub fn junction_index(&self) -> usize {
        match self.segment {
            SegmentId::Outgoing => 0,
            SegmentId::Incoming => self.intervals,
        }
    }
}

/// Two profiles on a segment grid at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub grid: Grid,
    /// `rho`, `w~` or `w-bar` depending on the representation.
    pub a: Vec<f64>,
    /// `v` or `v~`.
    pub b: Vec<f64>,
    pub repr: Representation,
}

impl FieldState {
    pub fn new(grid: Grid, a: Vec<f64>, b: Vec<f64>, repr: Representation) -> Result<Self> {
        if a.len() != grid.nodes() || b.len() != grid.nodes() {
            return Err(LinearizeError::Length {
                a: a.len(),
                b: b.len(),
                nodes: grid.nodes(),
            });
        }
        Ok(FieldState { grid, a, b, repr })
    }

    /// Identically zero deviation in the given (non-physical) representation.
    pub fn zeros(grid: Grid, repr: Representation) -> Self {
        FieldState {
            grid,
            a: vec![0.0; grid.nodes()],
            b: vec![0.0; grid.nodes()],
            repr,
        }
    }

    pub fn segment(&self) -> SegmentId {
        self.grid.segment
    }

    pub fn expect(&self, expected: Representation) -> Result<()> {
        if self.repr == expected {
            Ok(())
        } else {
            Err(LinearizeError::Representation {
                expected,
                found: self.repr,
            })
        }
    }

    /// Trapezoidal `sqrt(int a^2 + b^2 dx)`.
    pub fn l2_norm(&self) -> f64 {
        let h = self.grid.spacing();
        let n = self.a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let weight = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
            sum += weight * (self.a[i] * self.a[i] + self.b[i] * self.b[i]);
        }
        (sum * h).sqrt()
    }
}

/// Physical state to Riemann variables about `ss`.
pub fn to_riemann(phys: &FieldState, ss: &SteadyState) -> Result<FieldState> {
    phys.expect(Representation::Physical)?;
    let k = ss.gamma_p() / ss.q_star;
    let (a, b) = phys
        .a
        .iter()
        .zip(&phys.b)
        .map(|(&rho, &v)| {
            let dv = v - ss.v_star;
            // rho v - rho* v*, written so the steady state maps to exactly zero.
            let dq = (rho - ss.rho_star) * v + ss.rho_star * dv;
            (k * dq - dv / ss.r, dv)
        })
        .unzip();
    Ok(FieldState {
        grid: phys.grid,
        a,
        b,
        repr: Representation::Riemann,
    })
}

/// Exact inverse of [`to_riemann`].
pub fn from_riemann(
    riem: &FieldState,
    ss: &SteadyState,
    params: &SegmentParams,
) -> Result<FieldState> {
    riem.expect(Representation::Riemann)?;
    let k = ss.q_star / ss.gamma_p();
    let mut rho = Vec::with_capacity(riem.a.len());
    let mut vel = Vec::with_capacity(riem.a.len());
    for (index, (&w, &dv)) in riem.a.iter().zip(&riem.b).enumerate() {
        let v = ss.v_star + dv;
        let dq = k * (w + dv / ss.r);
        let r = ss.rho_star + (dq - ss.rho_star * dv) / v;
        if !(v > 0.0 && r > 0.0 && r < params.rho_max) || !r.is_finite() {
            return Err(LinearizeError::OutOfRange { index, rho: r, v });
        }
        rho.push(r);
        vel.push(v);
    }
    Ok(FieldState {
        grid: riem.grid,
        a: rho,
        b: vel,
        repr: Representation::Physical,
    })
}

/// `exp(x / (tau v*))`.
pub fn scale_factor(x: f64, ss: &SteadyState, params: &SegmentParams) -> f64 {
    (x / (params.tau * ss.v_star)).exp()
}

fn rescale(
    state: &FieldState,
    from: Representation,
    to: Representation,
    sign: f64,
    ss: &SteadyState,
    params: &SegmentParams,
) -> Result<FieldState> {
    state.expect(from)?;
    let a = state
        .grid
        .positions()
        .zip(&state.a)
        .map(|(x, &w)| scale_factor(sign * x, ss, params) * w)
        .collect();
    Ok(FieldState {
        grid: state.grid,
        a,
        b: state.b.clone(),
        repr: to,
    })
}

/// `w-bar(x) = exp(x/(tau v*)) w~(x)`; `v~` unchanged.
pub fn scale_w(riem: &FieldState, ss: &SteadyState, params: &SegmentParams) -> Result<FieldState> {
    rescale(riem, Representation::Riemann, Representation::Scaled, 1.0, ss, params)
}

pub fn unscale_w(scaled: &FieldState, ss: &SteadyState, params: &SegmentParams) -> Result<FieldState> {
    rescale(scaled, Representation::Scaled, Representation::Riemann, -1.0, ss, params)
}

/// In-domain coupling `c(x) = -(1/tau) exp(-x/(tau v*))` of the rescaled system.
pub fn coupling_coefficient(x: f64, ss: &SteadyState, params: &SegmentParams) -> Result<f64> {
    let (left, right) = params.id.interval(params.length);
    if !(left..=right).contains(&x) {
        return Err(LinearizeError::OutsideInterval {
            x,
            segment: params.id,
        });
    }
    Ok(-scale_factor(-x, ss, params) / params.tau)
}

/// Boundary gains of the rescaled linear network:
///
/// ```text
/// v~1(L)  = outlet * w-bar1(L)
/// w-bar1(0) = junction_w * w-bar2(0)
/// w-bar2(-L) = inlet * v~2(-L)
/// v~2(0)  = junction_vv * v~1(0) + junction_vw * w-bar2(0) + control_gain * U0
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryRows {
    pub outlet: f64,
    pub junction_w: f64,
    pub inlet: f64,
    pub junction_vv: f64,
    pub junction_vw: f64,
    pub control_gain: f64,
}

/// Linearizes the outlet/inlet constant-flux conditions and the junction
/// (flux balance with on-ramp inflow, continuity of `w`).
pub fn boundary_rows(net: &NetworkParams) -> BoundaryRows {
    let (s1, s2) = (&net.ss1, &net.ss2);
    let l = net.length();
    // q~ = (q*/(gamma p*)) (w~ + v~/r), so q~ = 0 gives v~ = -r w~.
    let outlet = -s1.r * scale_factor(-l, s1, &net.seg1);
    let inlet = -scale_factor(-l, s2, &net.seg2) / s2.r;
    // r gamma p* = v* (1 + r)
    let junction_vv = s2.v_star * (1.0 + s2.r) / (s1.v_star * (1.0 + s1.r));
    let junction_vw = junction_vv * s1.r - s2.r;
    let control_gain = -s2.v_star * (1.0 + s2.r) / net.q_star();
    BoundaryRows {
        outlet,
        junction_w: 1.0,
        inlet,
        junction_vv,
        junction_vw,
        control_gain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::solve_steady_states;

    pub(crate) fn default_net() -> NetworkParams {
        let s1 = SegmentParams::new(SegmentId::Outgoing, 45.0, 0.6667, 1.0, 120.0, 2000.0).unwrap();
        let s2 = SegmentParams::new(SegmentId::Incoming, 45.0, 0.8, 1.0, 90.0, 2000.0).unwrap();
        solve_steady_states(6.0, s1, s2).unwrap()
    }

    fn physical(grid: Grid, rho: f64, v: f64) -> FieldState {
        FieldState::new(grid, vec![rho; grid.nodes()], vec![v; grid.nodes()], Representation::Physical).unwrap()
    }

    #[test]
    fn steady_state_maps_to_origin() {
        let net = default_net();
        let grid = Grid::new(SegmentId::Incoming, 2000.0, 8).unwrap();
        let r = to_riemann(&physical(grid, net.ss2.rho_star, net.ss2.v_star), &net.ss2).unwrap();
        assert!(r.a.iter().chain(&r.b).all(|x| x.abs() < 1e-13));
        let back = from_riemann(&FieldState::zeros(grid, Representation::Riemann), &net.ss2, &net.seg2).unwrap();
        assert!(back.a.iter().all(|&x| (x - net.ss2.rho_star).abs() < 1e-15));
        assert!(back.b.iter().all(|&x| x == net.ss2.v_star));
    }

    #[test]
    fn riemann_variable_is_drivers_property_perturbation() {
        // rho = rho*, v = v* + 1: w = v + p(rho) rises by exactly 1.
        let net = default_net();
        let grid = Grid::new(SegmentId::Incoming, 2000.0, 2).unwrap();
        let r = to_riemann(&physical(grid, net.ss2.rho_star, net.ss2.v_star + 1.0), &net.ss2).unwrap();
        assert!((r.b[0] - 1.0).abs() < 1e-12);
        assert!((r.a[0] - 1.0).abs() < 1e-12);
        // general perturbation: w~ = v~ + p'(rho*) rho~
        let (drho, dv) = (0.013, -0.4);
        let r = to_riemann(&physical(grid, net.ss2.rho_star + drho, net.ss2.v_star + dv), &net.ss2).unwrap();
        let expected = dv + net.ss2.gamma_p() / net.ss2.rho_star * drho
            + net.ss2.gamma_p() / net.q_star() * drho * dv;
        assert!((r.a[1] - expected).abs() < 1e-12);
    }

    #[test]
    fn from_riemann_rejects_stopped_traffic() {
        let net = default_net();
        let grid = Grid::new(SegmentId::Incoming, 2000.0, 2).unwrap();
        let mut riem = FieldState::zeros(grid, Representation::Riemann);
        riem.b[1] = -net.ss2.v_star;
        assert!(matches!(
            from_riemann(&riem, &net.ss2, &net.seg2),
            Err(LinearizeError::OutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn representation_is_checked() {
        let net = default_net();
        let grid = Grid::new(SegmentId::Outgoing, 2000.0, 2).unwrap();
        let z = FieldState::zeros(grid, Representation::Scaled);
        assert!(to_riemann(&z, &net.ss1).is_err());
        assert!(scale_w(&z, &net.ss1, &net.seg1).is_err());
        assert!(FieldState::new(grid, vec![0.0; 2], vec![0.0; 3], Representation::Riemann).is_err());
    }

    #[test]
    fn scaling_factor_values() {
        let net = default_net();
        assert_eq!(scale_factor(0.0, &net.ss1, &net.seg1), 1.0);
        let f = scale_factor(2000.0, &net.ss1, &net.seg1);
        assert!((f - 3.818).abs() < 2e-3, "{f}");
        let grid = Grid::new(SegmentId::Outgoing, 2000.0, 4).unwrap();
        let s = scale_w(&FieldState::zeros(grid, Representation::Riemann), &net.ss1, &net.seg1).unwrap();
        assert!(s.a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn coupling_values() {
        let net = default_net();
        assert_eq!(coupling_coefficient(0.0, &net.ss1, &net.seg1).unwrap(), -1.0 / 120.0);
        let c = coupling_coefficient(-2000.0, &net.ss2, &net.seg2).unwrap();
        assert!((c + 0.1147).abs() < 5e-4, "{c}");
        assert!(coupling_coefficient(10.0, &net.ss2, &net.seg2).is_err());
        for k in 0..=20 {
            let x = 100.0 * k as f64;
            assert!(coupling_coefficient(x, &net.ss1, &net.seg1).unwrap() < 0.0);
        }
    }

    #[test]
    fn boundary_rows_default() {
        let net = default_net();
        let rows = boundary_rows(&net);
        let e2 = (-2000.0 / (90.0 * net.ss2.v_star)).exp();
        assert!((rows.inlet + e2 / net.ss2.r).abs() < 1e-14);
        assert!((rows.inlet + 0.2638).abs() < 1e-3, "{}", rows.inlet);
        assert!((rows.control_gain + 2.165).abs() < 1e-3, "{}", rows.control_gain);
        assert!((rows.junction_vv - 0.6456).abs() < 1e-3);
        assert!((rows.junction_vw - 0.0329).abs() < 1e-3);
        assert_eq!(rows.junction_w, 1.0);
    }

    #[test]
    fn identical_segments_have_no_junction_mixing() {
        let s1 = SegmentParams::new(SegmentId::Outgoing, 45.0, 0.8, 1.0, 100.0, 2000.0).unwrap();
        let s2 = SegmentParams { id: SegmentId::Incoming, ..s1 };
        let net = solve_steady_states(6.0, s1, s2).unwrap();
        let rows = boundary_rows(&net);
        assert!(rows.junction_vw.abs() < 1e-15);
        assert!((rows.junction_vv - 1.0).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn riemann_round_trip(drho in prop::collection::vec(-0.05f64..0.05, 5),
                                  dv in prop::collection::vec(-2.0f64..2.0, 5)) {
                let net = default_net();
                let grid = Grid::new(SegmentId::Outgoing, 2000.0, 4).unwrap();
                let rho: Vec<f64> = drho.iter().map(|d| net.ss1.rho_star + d).collect();
                let v: Vec<f64> = dv.iter().map(|d| net.ss1.v_star + d).collect();
                let phys = FieldState::new(grid, rho.clone(), v.clone(), Representation::Physical).unwrap();
                let riem = to_riemann(&phys, &net.ss1).unwrap();
                let scaled = scale_w(&riem, &net.ss1, &net.seg1).unwrap();
                let riem2 = unscale_w(&scaled, &net.ss1, &net.seg1).unwrap();
                let back = from_riemann(&riem2, &net.ss1, &net.seg1).unwrap();
                for i in 0..5 {
                    prop_assert!((back.a[i] - rho[i]).abs() < 1e-12);
                    prop_assert!((back.b[i] - v[i]).abs() < 1e-12);
                }
            }

            #[test]
            fn riemann_map_is_affine(eps in 0.01f64..1.0, w in -1.0f64..1.0, dv in -1.0f64..1.0) {
                // Riemann deviation scales linearly in (rho v, v) deviations.
                let net = default_net();
                let grid = Grid::new(SegmentId::Incoming, 2000.0, 1).unwrap();
                let mut riem = FieldState::zeros(grid, Representation::Riemann);
                riem.a = vec![w, w];
                riem.b = vec![dv, dv];
                let phys = from_riemann(&riem, &net.ss2, &net.seg2).unwrap();
                let q: Vec<f64> = phys.a.iter().zip(&phys.b).map(|(r, v)| r * v).collect();
                let mut small = riem.clone();
                small.a.iter_mut().chain(small.b.iter_mut()).for_each(|x| *x *= eps);
                let phys_s = from_riemann(&small, &net.ss2, &net.seg2).unwrap();
                let q_s: Vec<f64> = phys_s.a.iter().zip(&phys_s.b).map(|(r, v)| r * v).collect();
                prop_assert!(((q_s[0] - net.q_star()) - eps * (q[0] - net.q_star())).abs() < 1e-12);
                prop_assert!(((phys_s.b[0] - net.ss2.v_star) - eps * (phys.b[0] - net.ss2.v_star)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rescaled_transport_matches_decaying_transport() {
        // w~_t + v w~_x = -w~/tau integrated directly versus w-bar transported
        // without source and unscaled afterwards.
        let net = default_net();
        let (ss, seg) = (&net.ss1, &net.seg1);
        let run = |n: usize| {
            let grid = Grid::new(SegmentId::Outgoing, 2000.0, n).unwrap();
            let h = grid.spacing();
            let dt = 0.5 * h / ss.v_star;
            let profile = |x: f64| (std::f64::consts::PI * x / 2000.0).sin().powi(2);
            let mut direct: Vec<f64> = grid.positions().map(profile).collect();
            let mut riem = FieldState::zeros(grid, Representation::Riemann);
            riem.a = direct.clone();
            let mut bar = scale_w(&riem, ss, seg).unwrap().a;
            let steps = (100.0 / dt).round() as usize;
            let c = ss.v_star * dt / h;
            for _ in 0..steps {
                for i in (1..=n).rev() {
                    direct[i] += -c * (direct[i] - direct[i - 1]) - dt / seg.tau * direct[i];
                    bar[i] -= c * (bar[i] - bar[i - 1]);
                }
                direct[0] = 0.0;
                bar[0] = 0.0;
            }
            let mut sc = FieldState::zeros(grid, Representation::Scaled);
            sc.a = bar;
            let back = unscale_w(&sc, ss, seg).unwrap().a;
            direct.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (run(100), run(200));
        assert!(fine < 0.6 * coarse, "{coarse} {fine}");
    }
}
