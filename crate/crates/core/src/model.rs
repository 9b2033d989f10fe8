//! Fundamental-diagram algebra and congested steady states for the
//! two-segment network.
//!
//! Segment 1 is the outgoing (downstream) road on `[0, L]`, segment 2 the
//! incoming (upstream) road on `[-L, 0]`. Both share the maximum speed.
//! All quantities are SI: veh/m, m/s, s, m.

use std::fmt;

use thiserror::Error;

/// Relative tolerance of the congested-branch root finder.
pub const ROOT_TOL: f64 = 1e-12;
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("density {rho} veh/m outside [0, {rho_max}]")]
    Domain { rho: f64, rho_max: f64 },
    #[error("segments must share the maximum speed ({v1} vs {v2} m/s)")]
    MaxSpeedMismatch { v1: f64, v2: f64 },
    #[error("flux {q_star} veh/s infeasible on {segment}: capacity is {capacity} veh/s")]
    Infeasible {
        segment: SegmentId,
        q_star: f64,
        capacity: f64,
    },
    #[error("steady state on {segment} is not congested (gamma*p - v = {lambda_v} m/s)")]
    NotCongested { segment: SegmentId, lambda_v: f64 },
    #[error(
        "assumption-violating steady state on {segment}: r = {r} >= 1; \
         admissible flux interval is (0, {q_max}) veh/s"
    )]
    AssumptionViolated {
        segment: SegmentId,
        r: f64,
        q_max: f64,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentId {
    /// Downstream road on `[0, L]`.
    Outgoing,
    /// Upstream road on `[-L, 0]`.
    Incoming,
}

impl SegmentId {
    pub fn number(self) -> u8 {
        match self {
            SegmentId::Outgoing => 1,
            SegmentId::Incoming => 2,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(SegmentId::Outgoing),
            2 => Some(SegmentId::Incoming),
            _ => None,
        }
    }

    /// Spatial interval `(left, right)` of a segment of the given length.
    pub fn interval(self, length: f64) -> (f64, f64) {
        match self {
            SegmentId::Outgoing => (0.0, length),
            SegmentId::Incoming => (-length, 0.0),
        }
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "segment {}", self.number())
    }
}

/// Physical description of one road segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentParams {
    pub v_max: f64,
    pub rho_max: f64,
    /// Drivers' aggressiveness exponent.
    pub gamma: f64,
    /// Relaxation time.
    pub tau: f64,
    pub length: f64,
    pub id: SegmentId,
}

fn positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(ModelError::InvalidParam {
            name,
            value,
            reason: "must be finite and positive",
        })
    }
}

impl SegmentParams {
    pub fn new(
        id: SegmentId,
        v_max: f64,
        rho_max: f64,
        gamma: f64,
        tau: f64,
        length: f64,
    ) -> Result<Self> {
        let params = SegmentParams {
            v_max,
            rho_max,
            gamma,
            tau,
            length,
            id,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        positive("v_max", self.v_max)?;
        positive("rho_max", self.rho_max)?;
        positive("gamma", self.gamma)?;
        positive("tau", self.tau)?;
        positive("length", self.length)
    }

    /// `c = v_max / rho_max^gamma`.
    pub fn pressure_coeff(&self) -> f64 {
        self.v_max / self.rho_max.powf(self.gamma)
    }

    fn check_density(&self, rho: f64) -> Result<()> {
        if rho.is_finite() && (0.0..=self.rho_max).contains(&rho) {
            Ok(())
        } else {
            Err(ModelError::Domain {
                rho,
                rho_max: self.rho_max,
            })
        }
    }

    /// Traffic pressure `p(rho) = c rho^gamma`.
    pub fn pressure(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.pressure_unchecked(rho))
    }

    pub(crate) fn pressure_unchecked(&self, rho: f64) -> f64 {
        self.v_max * (rho / self.rho_max).powf(self.gamma)
    }

    /// Density at which the pressure equals `p`, i.e. the inverse of
    /// [`SegmentParams::pressure`]. No range check.
    pub(crate) fn density_for_pressure(&self, p: f64) -> f64 {
        self.rho_max * (p / self.v_max).powf(1.0 / self.gamma)
    }

    /// Greenshield equilibrium speed `V(rho) = v_max (1 - (rho/rho_max)^gamma)`.
    pub fn equilibrium_velocity(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.v_max - self.pressure_unchecked(rho))
    }

    /// Fundamental diagram `Q(rho) = rho V(rho)`.
    pub fn equilibrium_flow(&self, rho: f64) -> Result<f64> {
        Ok(rho * self.equilibrium_velocity(rho)?)
    }

    /// Density separating the free and congested regimes.
    pub fn critical_density(&self) -> f64 {
        self.rho_max / (1.0 + self.gamma).powf(1.0 / self.gamma)
    }

    /// Road capacity `Q(rho_c)`.
    pub fn capacity(&self) -> f64 {
        let rho_c = self.critical_density();
        rho_c * (self.v_max - self.pressure_unchecked(rho_c))
    }

    /// Drivers' property `w = v + p(rho)`.
    pub fn driver_property(&self, rho: f64, v: f64) -> Result<f64> {
        Ok(v + self.pressure(rho)?)
    }

    /// Density above which the characteristic-speed ratio drops below one.
    ///
    /// `r < 1` iff `2 v < gamma p`, i.e. `(rho/rho_max)^gamma > 2/(2+gamma)`.
    pub fn unit_ratio_density(&self) -> f64 {
        self.rho_max * (2.0 / (2.0 + self.gamma)).powf(1.0 / self.gamma)
    }

    /// Largest flux whose congested steady state has `r < 1`.
    pub fn max_admissible_flux(&self) -> f64 {
        let rho = self.unit_ratio_density();
        rho * (self.v_max - self.pressure_unchecked(rho))
    }

    /// Congested-branch root of `Q(rho) = q` (the root above `rho_c`).
    pub fn congested_density(&self, q: f64) -> Result<f64> {
        let capacity = self.capacity();
        if !(q.is_finite() && q > 0.0 && q < capacity) {
            return Err(ModelError::Infeasible {
                segment: self.id,
                q_star: q,
                capacity,
            });
        }
        if self.gamma == 1.0 {
            // v_max (rho - rho^2/rho_max) = q
            let disc = 1.0 - 4.0 * q / (self.v_max * self.rho_max);
            return Ok(0.5 * self.rho_max * (1.0 + disc.sqrt()));
        }
        // Q is strictly decreasing on [rho_c, rho_max].
        let flow = |rho: f64| rho * (self.v_max - self.pressure_unchecked(rho));
        let (mut lo, mut hi) = (self.critical_density(), self.rho_max);
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..MAX_BISECTIONS {
            let residual = flow(mid) - q;
            if residual.abs() <= ROOT_TOL * q || hi - lo <= f64::EPSILON * hi {
                break;
            }
            if residual > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            mid = 0.5 * (lo + hi);
        }
        Ok(mid)
    }
}

/// Equilibrium of one segment together with its linearization constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyState {
    pub rho_star: f64,
    pub v_star: f64,
    pub p_star: f64,
    pub q_star: f64,
    /// Characteristic-speed ratio `v* / (gamma p* - v*)`, in `(0, 1)`.
    pub r: f64,
    /// Speed of the `w` characteristic (`= v*`).
    pub lambda_w: f64,
    /// Upstream speed of the `v` characteristic (`= gamma p* - v*`).
    pub lambda_v: f64,
    /// Round-trip transport time `L/lambda_w + L/lambda_v`.
    pub kappa: f64,
}

impl SteadyState {
    /// Steady state at density `rho_star` with linearization constants filled in.
    pub fn at_density(rho_star: f64, params: &SegmentParams) -> Result<Self> {
        let v_star = params.equilibrium_velocity(rho_star)?;
        let p_star = params.pressure_unchecked(rho_star);
        let partial = SteadyState {
            rho_star,
            v_star,
            p_star,
            q_star: rho_star * v_star,
            r: f64::NAN,
            lambda_w: f64::NAN,
            lambda_v: f64::NAN,
            kappa: f64::NAN,
        };
        riemann_coefficients(partial, params)
    }

    /// `gamma p*`, the sum of the two characteristic speeds.
    pub fn gamma_p(&self) -> f64 {
        self.lambda_w + self.lambda_v
    }
}

/// Completes a steady state with `r`, the characteristic speeds and `kappa`.
pub fn riemann_coefficients(ss: SteadyState, params: &SegmentParams) -> Result<SteadyState> {
    let lambda_v = params.gamma * ss.p_star - ss.v_star;
    if !(lambda_v > 0.0) || !(ss.v_star > 0.0) {
        return Err(ModelError::NotCongested {
            segment: params.id,
            lambda_v,
        });
    }
    let r = ss.v_star / lambda_v;
    if r >= 1.0 {
        return Err(ModelError::AssumptionViolated {
            segment: params.id,
            r,
            q_max: params.max_admissible_flux(),
        });
    }
    let l = params.length;
    Ok(SteadyState {
        r,
        lambda_w: ss.v_star,
        lambda_v,
        kappa: l / ss.v_star + l / lambda_v,
        ..ss
    })
}

/// Both segments with their consistent steady states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkParams {
    pub seg1: SegmentParams,
    pub seg2: SegmentParams,
    pub ss1: SteadyState,
    pub ss2: SteadyState,
}

impl NetworkParams {
    pub fn q_star(&self) -> f64 {
        self.ss1.q_star
    }

    pub fn length(&self) -> f64 {
        self.seg1.length
    }

    pub fn segment(&self, id: SegmentId) -> (&SegmentParams, &SteadyState) {
        match id {
            SegmentId::Outgoing => (&self.seg1, &self.ss1),
            SegmentId::Incoming => (&self.seg2, &self.ss2),
        }
    }

    /// Sum of both round-trip transport times.
    pub fn round_trip(&self) -> f64 {
        self.ss1.kappa + self.ss2.kappa
    }
}

/// Congested steady states of both segments carrying the common flux `q_star`.
pub fn solve_steady_states(
    q_star: f64,
    seg1: SegmentParams,
    seg2: SegmentParams,
) -> Result<NetworkParams> {
    seg1.validate()?;
    seg2.validate()?;
    if seg1.v_max != seg2.v_max {
        return Err(ModelError::MaxSpeedMismatch {
            v1: seg1.v_max,
            v2: seg2.v_max,
        });
    }
    if seg1.length != seg2.length {
        return Err(ModelError::InvalidParam {
            name: "length",
            value: seg2.length,
            reason: "both segments must have the same length",
        });
    }
    let q_max = seg1.max_admissible_flux().min(seg2.max_admissible_flux());
    let solve = |seg: &SegmentParams| -> Result<SteadyState> {
        let rho = seg.congested_density(q_star)?;
        let mut ss = SteadyState::at_density(rho, seg).map_err(|e| match e {
            ModelError::AssumptionViolated { segment, r, .. } => {
                ModelError::AssumptionViolated { segment, r, q_max }
            }
            other => other,
        })?;
        // Report the requested flux; the root reproduces it to ROOT_TOL.
        ss.q_star = q_star;
        Ok(ss)
    };
    Ok(NetworkParams {
        ss1: solve(&seg1)?,
        ss2: solve(&seg2)?,
        seg1,
        seg2,
    })
}
