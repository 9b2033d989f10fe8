//! Run configuration: a TOML file whose physical quantities carry explicit
//! units. Everything is converted to SI (m, s, veh) at parse time.

use std::fmt;
use std::path::PathBuf;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::model::{solve_steady_states, ModelError, NetworkParams, SegmentId, SegmentParams};
use crate::simulate::{InitialCondition, LoopMode, ModelKind, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("`{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Physical dimensions understood by the parser, with their accepted units
/// and factors to SI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Speed,
    Density,
    Length,
    Time,
    Flow,
}

impl Dimension {
    /// `(unit, decimal exponent, multiplier, divisor)`: the SI value is
    /// `x * 10^exponent * multiplier / divisor`. The power of ten is applied
    /// to the decimal text, so `666.7 veh/km` becomes exactly `0.6667`.
    fn units(self) -> &'static [(&'static str, i32, f64, f64)] {
        match self {
            Dimension::Speed => &[("m/s", 0, 1.0, 1.0), ("km/h", 0, 1000.0, 3600.0)],
            Dimension::Density => &[("veh/m", 0, 1.0, 1.0), ("veh/km", -3, 1.0, 1.0)],
            Dimension::Length => &[("m", 0, 1.0, 1.0), ("km", 3, 1.0, 1.0)],
            Dimension::Time => &[("s", 0, 1.0, 1.0), ("min", 0, 60.0, 1.0), ("h", 0, 3600.0, 1.0)],
            Dimension::Flow => &[
                ("veh/s", 0, 1.0, 1.0),
                ("veh/min", 0, 1.0, 60.0),
                ("veh/h", 0, 1.0, 3600.0),
            ],
        }
    }

    fn si_unit(self) -> &'static str {
        self.units()[0].0
    }

    fn name(self) -> &'static str {
        match self {
            Dimension::Speed => "speed",
            Dimension::Density => "density",
            Dimension::Length => "length",
            Dimension::Time => "time",
            Dimension::Flow => "flow",
        }
    }

    /// Parses `"<number> <unit>"` into SI.
    pub fn parse(self, text: &str) -> std::result::Result<f64, String> {
        let text = text.trim();
        let split = text
            .find(|c: char| c.is_whitespace() || c.is_ascii_alphabetic() && c != 'e' && c != 'E')
            .unwrap_or(text.len());
        let (number, unit) = text.split_at(split);
        let number = number.trim();
        let not_a_number = || format!("`{text}` does not start with a number");
        number.parse::<f64>().map_err(|_| not_a_number())?;
        let unit = unit.trim();
        let accepted: Vec<&str> = self.units().iter().map(|u| u.0).collect();
        let &(_, exp10, mul, div) = self.units().iter().find(|u| u.0 == unit).ok_or_else(|| {
            format!(
                "`{text}` needs a {} unit, one of {}",
                self.name(),
                accepted.join(", ")
            )
        })?;
        let (mantissa, exponent) = match number.find(['e', 'E']) {
            Some(k) => (&number[..k], number[k + 1..].parse::<i32>().map_err(|_| not_a_number())?),
            None => (number, 0),
        };
        let value: f64 = format!("{mantissa}e{}", exponent + exp10)
            .parse()
            .map_err(|_| not_a_number())?;
        Ok(value * mul / div)
    }
}

macro_rules! quantity {
    ($name:ident, $dim:expr) => {
        /// SI value of a unit-tagged quantity.
        #[derive(Debug, Clone, Copy, PartialEq)]
        pub struct $name(pub f64);

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                d.deserialize_str(QuantityVisitor($dim)).map($name)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(&format!("{} {}", self.0, $dim.si_unit()))
            }
        }
    };
}

quantity!(Speed, Dimension::Speed);
quantity!(Density, Dimension::Density);
quantity!(Length, Dimension::Length);
quantity!(Time, Dimension::Time);
quantity!(Flow, Dimension::Flow);

struct QuantityVisitor(Dimension);

impl<'de> Visitor<'de> for QuantityVisitor {
    type Value = f64;

    fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
        write!(f, "a {} such as \"{}\"", self.0.name(), example(self.0))
    }

    fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
        self.0.parse(v).map_err(E::custom)
    }
}

fn example(dim: Dimension) -> &'static str {
    match dim {
        Dimension::Speed => "45 m/s",
        Dimension::Density => "666.7 veh/km",
        Dimension::Length => "2 km",
        Dimension::Time => "120 s",
        Dimension::Flow => "6 veh/s",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub v_max: Speed,
    pub length: Length,
    pub q_star: Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    pub rho_max: Density,
    pub tau: Time,
    #[serde(default = "one")]
    pub gamma: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopSetting {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSetting {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub cells: usize,
    pub cfl: f64,
    /// Defaults to ten round-trip times.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_final: Option<Time>,
    #[serde(rename = "loop")]
    pub loop_mode: LoopSetting,
    pub model: ModelSetting,
    pub record_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialSection {
    pub epsilon: f64,
    pub wavenumber: [f64; 2],
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub resolution: usize,
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
}

/// Complete configuration file. Every section is optional and falls back to
/// the default freeway. Within a section, missing keys take their default,
/// except `rho_max` and `tau` of a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkSection,
    pub segment1: SegmentSection,
    pub segment2: SegmentSection,
    pub simulation: SimulationSection,
    pub initial: InitialSection,
    pub kernels: KernelSection,
    pub run: RunSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkSection {
                v_max: Speed(45.0),
                length: Length(2000.0),
                q_star: Flow(6.0),
            },
            segment1: SegmentSection {
                rho_max: Density(0.6667),
                tau: Time(120.0),
                gamma: 1.0,
            },
            segment2: SegmentSection {
                rho_max: Density(0.8),
                tau: Time(90.0),
                gamma: 1.0,
            },
            simulation: SimulationSection {
                cells: 256,
                cfl: 0.9,
                t_final: None,
                loop_mode: LoopSetting::Closed,
                model: ModelSetting::Nonlinear,
                record_every: 20,
            },
            initial: {
                let ic = InitialCondition::default();
                InitialSection {
                    epsilon: ic.epsilon,
                    wavenumber: ic.wavenumber,
                    phase: ic.phase,
                }
            },
            kernels: KernelSection {
                resolution: crate::kernels::DEFAULT_RESOLUTION,
                tol: crate::kernels::DEFAULT_TOL,
            },
            run: RunSection {
                seed: 0,
                out: PathBuf::from("out"),
            },
        }
    }
}

macro_rules! section_default {
    ($($ty:ident => $field:ident),*) => {$(
        impl Default for $ty {
            fn default() -> Self {
                RunConfig::default().$field
            }
        }
    )*};
}

section_default!(
    NetworkSection => network,
    SimulationSection => simulation,
    InitialSection => initial,
    KernelSection => kernels,
    RunSection => run
);

/// Parsed and checked configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub net: NetworkParams,
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// TOML with every quantity in SI units; re-parses to the same values.
    pub fn to_resolved_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    pub fn network(&self) -> Result<NetworkParams> {
        let segment = |id: SegmentId, s: &SegmentSection| {
            SegmentParams::new(
                id,
                self.network.v_max.0,
                s.rho_max.0,
                s.gamma,
                s.tau.0,
                self.network.length.0,
            )
        };
        let seg1 = segment(SegmentId::Outgoing, &self.segment1).map_err(|e| field_error("segment1", e))?;
        let seg2 = segment(SegmentId::Incoming, &self.segment2).map_err(|e| field_error("segment2", e))?;
        Ok(solve_steady_states(self.network.q_star.0, seg1, seg2)?)
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let net = self.network()?;
        let s = &self.simulation;
        let sim = SimConfig {
            cells: s.cells,
            cfl: s.cfl,
            t_final: s.t_final.map(|t| t.0).unwrap_or(10.0 * net.round_trip()),
            loop_mode: match s.loop_mode {
                LoopSetting::Open => LoopMode::Open,
                LoopSetting::Closed => LoopMode::Closed,
            },
            model: match s.model {
                ModelSetting::Linear => ModelKind::Linear,
                ModelSetting::Nonlinear => ModelKind::Nonlinear,
            },
            ic: InitialCondition {
                epsilon: self.initial.epsilon,
                wavenumber: self.initial.wavenumber,
                phase: self.initial.phase,
            },
            record_every: s.record_every,
        };
        sim.validate().map_err(|e| match e {
            crate::simulate::SimError::Config { field, reason } => ConfigError::Invalid {
                field: match field {
                    "epsilon" => "initial.epsilon".into(),
                    other => format!("simulation.{other}"),
                },
                reason,
            },
            other => ConfigError::Invalid {
                field: "simulation".into(),
                reason: other.to_string(),
            },
        })?;
        if self.kernels.resolution < crate::kernels::MIN_RESOLUTION {
            return Err(ConfigError::Invalid {
                field: "kernels.resolution".into(),
                reason: format!("must be at least {}", crate::kernels::MIN_RESOLUTION),
            });
        }
        if !(self.kernels.tol > 0.0) {
            return Err(ConfigError::Invalid {
                field: "kernels.tol".into(),
                reason: "must be positive".into(),
            });
        }
        Ok(Resolved {
            config: self.clone(),
            net,
            sim,
        })
    }
}

fn field_error(section: &str, e: ModelError) -> ConfigError {
    match e {
        ModelError::InvalidParam { name, value, reason } => ConfigError::Invalid {
            field: match name {
                "v_max" | "length" => format!("network.{name}"),
                _ => format!("{section}.{name}"),
            },
            reason: format!("{value} is invalid: {reason}"),
        },
        other => ConfigError::Model(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn units_convert_to_si() {
        assert_eq!(Dimension::Density.parse("666.7 veh/km").unwrap(), 0.6667);
        assert_eq!(Dimension::Length.parse("2 km").unwrap(), 2000.0);
        assert_eq!(Dimension::Speed.parse("45 m/s").unwrap(), 45.0);
        assert!((Dimension::Speed.parse("162 km/h").unwrap() - 45.0).abs() < 1e-12);
        assert_eq!(Dimension::Time.parse("2 min").unwrap(), 120.0);
        assert_eq!(Dimension::Flow.parse("6 veh/s").unwrap(), 6.0);
        assert_eq!(Dimension::Flow.parse("21600 veh/h").unwrap(), 6.0);
        assert_eq!(Dimension::Length.parse("1.5e3 m").unwrap(), 1500.0);
        assert!(Dimension::Speed.parse("45").unwrap_err().contains("m/s"));
        assert!(Dimension::Speed.parse("45 veh/s").is_err());
        assert!(Dimension::Speed.parse("fast m/s").is_err());
    }

    #[test]
    fn full_file_parses() {
        let text = r#"
            [network]
            v_max = "45 m/s"
            length = "2 km"
            q_star = "6 veh/s"

            [segment1]
            rho_max = "666.7 veh/km"
            tau = "120 s"

            [segment2]
            rho_max = "800 veh/km"
            tau = "1.5 min"

            [simulation]
            cells = 128
            cfl = 0.8
            t_final = "1 h"
            loop = "open"
            model = "linear"
            record_every = 5
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.segment2.tau.0, 90.0);
        let r = cfg.resolve().unwrap();
        assert_eq!(r.sim.t_final, 3600.0);
        assert_eq!(r.sim.loop_mode, LoopMode::Open);
        assert_eq!(r.sim.model, ModelKind::Linear);
        assert!((r.net.ss2.rho_star - 0.63094).abs() < 1e-5);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::from_toml("[network]\nv_max = \"45 km\"\nlength = \"2 km\"\nq_star = \"6 veh/s\"\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("v_max") && err.contains("line 2"), "{err}");
        let err = RunConfig::from_toml("[segment1]\ntau = \"2 min\"\n").unwrap_err().to_string();
        assert!(err.contains("missing field `rho_max`"), "{err}");
        let partial = RunConfig::from_toml("[network]\nq_star = \"5 veh/s\"\n[simulation]\ncells = 64\n").unwrap();
        assert_eq!(partial.network.q_star.0, 5.0);
        assert_eq!(partial.network.v_max, RunConfig::default().network.v_max);
        assert_eq!(partial.simulation.cfl, 0.9);
        let err = RunConfig::from_toml("[network]\nspeed = 3\n").unwrap_err().to_string();
        assert!(err.contains("speed"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.simulation.cfl = 1.5;
        match cfg.resolve() {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "simulation.cfl"),
            other => panic!("{other:?}"),
        }
        let mut cfg = RunConfig::default();
        cfg.segment1.tau = Time(-1.0);
        match cfg.resolve() {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "segment1.tau"),
            other => panic!("{other:?}"),
        }
        let mut cfg = RunConfig::default();
        cfg.network.q_star = Flow(7.6);
        assert!(matches!(
            cfg.resolve(),
            Err(ConfigError::Model(ModelError::Infeasible { segment: SegmentId::Outgoing, .. }))
        ));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.network.length = Length(Dimension::Length.parse("2.3 km").unwrap());
        cfg.segment1.rho_max = Density(Dimension::Density.parse("650.1 veh/km").unwrap());
        cfg.simulation.t_final = Some(Time(1234.5));
        let text = cfg.to_resolved_toml();
        assert!(text.contains("\"2300 m\""), "{text}");
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.resolve().unwrap(), cfg.resolve().unwrap());
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }
}
