//! Subcommand bodies shared by the binary and the acceptance tests.
//!
//! Each command takes a resolved configuration and an output directory,
//! writes its artifacts there and returns a printable report.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::config::{ConfigError, LoopSetting, ModelSetting, Resolved, RunConfig};
use crate::controller::Kernels;
use crate::kernels::{kernel_residual, solve_kernels, KernelError, KernelProblem, KernelResidual, KernelTable};
use crate::model::{ModelError, NetworkParams, SegmentId};
use crate::simulate::{norms_and_rate, run, LoopMode, SimError, SimRecord};
use crate::stability::{closed_form_condition, sp1, ClosedForm, DecayFit, StabilityError};

#[derive(Debug, Error)]
pub enum CommandError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

pub type Result<T> = std::result::Result<T, CommandError>;

impl CommandError {
    /// 1 for bad input, 2 for numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CommandError::Config(_) | CommandError::Model(_) | CommandError::Io { .. } => 1,
            CommandError::Kernel(e) => match e {
                KernelError::NoConvergence { .. } => 2,
                _ => 1,
            },
            CommandError::Sim(e) => match e {
                SimError::Config { .. } | SimError::InitialState { .. } | SimError::Io(_) => 1,
                SimError::Model(ModelError::InvalidParam { .. }) => 1,
                _ => 2,
            },
            CommandError::Stability(_) | CommandError::Failed(_) => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io {
        path: path.to_owned(),
        source,
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).map_err(io_err(&path))?))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(&path))
}

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    /// Kernel resolution and simulation cell count.
    pub resolution: Option<usize>,
    pub seed: Option<u64>,
    pub loop_mode: Option<LoopSetting>,
    pub model: Option<ModelSetting>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(out) = &self.out {
            config.run.out = out.clone();
        }
        if let Some(n) = self.resolution {
            config.kernels.resolution = n;
            config.simulation.cells = n;
        }
        if let Some(seed) = self.seed {
            config.run.seed = seed;
        }
        if let Some(l) = self.loop_mode {
            config.simulation.loop_mode = l;
        }
        if let Some(m) = self.model {
            config.simulation.model = m;
        }
    }
}

// ---------------------------------------------------------------- steady

#[derive(Debug, Clone)]
pub struct SteadyReport {
    pub net: NetworkParams,
    pub sp1: f64,
    pub closed_form: ClosedForm,
}

impl SteadyReport {
    pub fn passes(&self) -> bool {
        self.sp1 < 1.0 && self.closed_form.holds()
    }
}

impl fmt::Display for SteadyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "q* = {:.6} veh/s", self.net.q_star())?;
        for id in [SegmentId::Outgoing, SegmentId::Incoming] {
            let (seg, ss) = self.net.segment(id);
            writeln!(f, "{id}:")?;
            writeln!(f, "  rho* = {:.6} veh/m (capacity {:.4} veh/s)", ss.rho_star, seg.capacity())?;
            writeln!(f, "  v*   = {:.6} m/s", ss.v_star)?;
            writeln!(f, "  p*   = {:.6} m/s", ss.p_star)?;
            writeln!(f, "  r    = {:.6}", ss.r)?;
            writeln!(f, "  kappa = {:.3} s", ss.kappa)?;
        }
        writeln!(f, "round trip = {:.3} s", self.net.round_trip())?;
        writeln!(f, "sp1(H) = {:.9}", self.sp1)?;
        writeln!(f, "closed form = {:.9}", self.closed_form.value)?;
        let verdict = if self.passes() { "PASS" } else { "FAIL" };
        write!(f, "boundary dissipativity: {verdict}")
    }
}

/// Steady states, Riemann coefficients, delays and the dissipativity check.
/// Writes `steady.txt`.
pub fn cmd_steady(resolved: &Resolved, out: &Path) -> Result<SteadyReport> {
    let net = resolved.net;
    let h = crate::stability::CouplingMatrix::from_network(&net);
    let report = SteadyReport {
        net,
        sp1: sp1(&h, resolved.config.run.seed)?,
        closed_form: closed_form_condition(&net),
    };
    write_text(out, "steady.txt", &format!("{report}\n"))?;
    Ok(report)
}

// ---------------------------------------------------------------- kernels

#[derive(Debug, Clone)]
pub struct SegmentKernelReport {
    pub segment: SegmentId,
    pub iterations: usize,
    pub bound: f64,
    pub residual: KernelResidual,
    /// Residual of the same solve at half resolution.
    pub coarse_residual: Option<KernelResidual>,
}

#[derive(Debug, Clone)]
pub struct KernelReport {
    pub resolution: usize,
    pub segments: Vec<SegmentKernelReport>,
    pub files: Vec<PathBuf>,
}

impl fmt::Display for KernelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "kernel resolution M = {}", self.resolution)?;
        for s in &self.segments {
            writeln!(f, "segment {}:", s.segment.number())?;
            writeln!(f, "  iterations = {}, max |K| = {:.6e}", s.iterations, s.bound)?;
            writeln!(
                f,
                "  residual at M:   pde {:.3e}, bc {:.3e}",
                s.residual.pde, s.residual.bc
            )?;
            if let Some(c) = &s.coarse_residual {
                writeln!(f, "  residual at M/2: pde {:.3e}, bc {:.3e}", c.pde, c.bc)?;
                writeln!(f, "  pde reduction = {:.3}", c.pde / s.residual.pde)?;
            }
        }
        for p in &self.files {
            writeln!(f, "wrote {}", p.display())?;
        }
        Ok(())
    }
}

pub fn kernel_file(segment: SegmentId) -> String {
    format!("kernels_seg{}.csv", segment.number())
}

/// Solves both kernel tables at `resolution`.
pub fn solve_both(net: &NetworkParams, resolution: usize, tol: f64) -> Result<Kernels> {
    let (seg1, seg2) = rayon::join(
        || solve_kernels(SegmentId::Outgoing, net, resolution, tol),
        || solve_kernels(SegmentId::Incoming, net, resolution, tol),
    );
    Ok(Kernels {
        seg1: seg1?,
        seg2: seg2?,
    })
}

/// Reads a kernel table previously written by [`cmd_kernels`].
pub fn read_kernel_file(path: &Path) -> Result<KernelTable> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(KernelTable::read_csv(std::io::BufReader::new(file))?)
}

/// Solves the kernels at the configured resolution, writes
/// `kernels_seg{1,2}.csv` and reports residuals at M and M/2.
pub fn cmd_kernels(resolved: &Resolved, out: &Path) -> Result<KernelReport> {
    let net = &resolved.net;
    let k = &resolved.config.kernels;
    let kernels = solve_both(net, k.resolution, k.tol)?;
    let mut segments = Vec::new();
    let mut files = Vec::new();
    for table in [&kernels.seg1, &kernels.seg2] {
        let problem = KernelProblem::from_network(table.segment, net);
        let coarse_m = k.resolution / 2;
        let coarse_residual = if coarse_m >= crate::kernels::MIN_RESOLUTION {
            let coarse = solve_kernels(table.segment, net, coarse_m, k.tol)?;
            Some(kernel_residual(&coarse, &problem)?)
        } else {
            None
        };
        segments.push(SegmentKernelReport {
            segment: table.segment,
            iterations: table.iterations(),
            bound: table.bound(),
            residual: kernel_residual(table, &problem)?,
            coarse_residual,
        });
        let name = kernel_file(table.segment);
        table.write_csv(create(out, &name)?)?;
        files.push(out.join(name));
    }
    let report = KernelReport {
        resolution: k.resolution,
        segments,
        files,
    };
    write_text(out, "kernels_report.txt", &report.to_string())?;
    Ok(report)
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone)]
pub struct SimulateReport {
    pub record_len: usize,
    pub loop_mode: LoopMode,
    pub cells: usize,
    pub t_final: f64,
    pub steps: usize,
    pub initial_norm: f64,
    pub final_norm: f64,
    pub rate: DecayFit,
    pub final_deviation: [f64; 2],
    pub max_mass_error: f64,
    pub max_courant: f64,
    pub converged: bool,
    pub wall: Duration,
}

/// Final norm at most this fraction of the initial norm counts as converged.
pub const CONVERGED_RATIO: f64 = 1e-3;
/// Norms below this are round-off of an unperturbed steady state.
pub const NORM_NOISE: f64 = 1e-9;

impl SimulateReport {
    /// Deterministic part of the report, written to `summary.txt`.
    pub fn summary(&self) -> String {
        let rate = match self.rate {
            DecayFit::Rate(r) => format!("{r:.6e} 1/s"),
            DecayFit::Converged => "converged below fit floor".into(),
        };
        format!(
            "loop = {:?}\ncells = {}\nt_final = {:.3} s\nsteps = {}\n\
             initial norm = {:.6e}\nfinal norm = {:.6e}\nfitted decay rate = {rate}\n\
             final deviation seg1 = {:.4}%\nfinal deviation seg2 = {:.4}%\n\
             max courant = {:.4}\nmax mass error = {:.3e}\nconverged = {}\n",
            self.loop_mode,
            self.cells,
            self.t_final,
            self.steps,
            self.initial_norm,
            self.final_norm,
            100.0 * self.final_deviation[0],
            100.0 * self.final_deviation[1],
            self.max_courant,
            self.max_mass_error,
            self.converged,
        )
    }
}

impl fmt::Display for SimulateReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}wall time = {:.3} s", self.summary(), self.wall.as_secs_f64())
    }
}

/// Runs the configured simulation and writes `states.csv`, `norms.csv`,
/// `summary.txt` and `resolved_config.toml`.
pub fn cmd_simulate(resolved: &Resolved, out: &Path) -> Result<SimulateReport> {
    let (report, _) = simulate_record(resolved, out)?;
    Ok(report)
}

/// [`cmd_simulate`] that also hands back the record.
pub fn simulate_record(resolved: &Resolved, out: &Path) -> Result<(SimulateReport, SimRecord)> {
    let start = Instant::now();
    let net = &resolved.net;
    let sim = &resolved.sim;
    let kernels = match sim.loop_mode {
        LoopMode::Closed => Some(solve_both(net, sim.cells, resolved.config.kernels.tol)?),
        LoopMode::Open => None,
    };
    let record = run(sim, net, kernels.as_ref())?;
    let summary = norms_and_rate(&record, net)?;
    let initial_norm = summary.total[0];
    let final_norm = *summary.total.last().unwrap();

    record.write_states_csv(create(out, "states.csv")?)?;
    record.write_norms_csv(create(out, "norms.csv")?)?;
    write_text(out, "resolved_config.toml", &resolved.config.to_resolved_toml())?;

    let report = SimulateReport {
        record_len: record.times.len(),
        loop_mode: sim.loop_mode,
        cells: sim.cells,
        t_final: sim.t_final,
        steps: record.stats.steps,
        initial_norm,
        final_norm,
        rate: summary.rate,
        final_deviation: *record.deviation.last().unwrap(),
        max_mass_error: record.stats.max_mass_error,
        max_courant: record.stats.max_courant,
        converged: final_norm <= (CONVERGED_RATIO * initial_norm).max(NORM_NOISE),
        wall: start.elapsed(),
    };
    write_text(out, "summary.txt", &report.summary())?;
    Ok((report, record))
}

// ---------------------------------------------------------------- verify

/// Runs the acceptance criteria. `scratch` receives the determinism runs.
pub fn cmd_verify(config: &RunConfig, scratch: &Path) -> Result<Vec<crate::verify::CriterionReport>> {
    let reports = crate::verify::run_all(config, scratch);
    let text: String = reports.iter().map(|r| format!("{r}\n")).collect();
    write_text(scratch, "verify.txt", &text)?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolved(edit: impl FnOnce(&mut RunConfig)) -> Resolved {
        let mut c = RunConfig::default();
        edit(&mut c);
        c.resolve().unwrap()
    }

    #[test]
    fn steady_report_default() {
        let dir = tempfile::tempdir().unwrap();
        let r = cmd_steady(&resolved(|_| {}), dir.path()).unwrap();
        assert!(r.passes());
        assert!((r.sp1 - r.closed_form.value).abs() < 1e-6);
        let text = fs::read_to_string(dir.path().join("steady.txt")).unwrap();
        assert!(text.contains("PASS"));
    }

    #[test]
    fn exit_codes() {
        let mut c = RunConfig::default();
        c.network.q_star.0 = 7.6;
        let e = CommandError::from(c.resolve().unwrap_err());
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("segment 1") || e.to_string().contains("outgoing"));
        let e = CommandError::Sim(SimError::NonFinite { step: 3 });
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn kernels_written_and_rereadable() {
        let dir = tempfile::tempdir().unwrap();
        let r = resolved(|c| c.kernels.resolution = 32);
        let report = cmd_kernels(&r, dir.path()).unwrap();
        for s in &report.segments {
            let c = s.coarse_residual.unwrap();
            assert!(c.pde > s.residual.pde);
            assert!(s.residual.bc <= 1e-12);
        }
        for id in [SegmentId::Outgoing, SegmentId::Incoming] {
            let path = dir.path().join(kernel_file(id));
            let before = fs::read(&path).unwrap();
            let table = read_kernel_file(&path).unwrap();
            let mut again = Vec::new();
            table.write_csv(&mut again).unwrap();
            assert_eq!(before, again);
        }
    }

    #[test]
    fn zero_amplitude_simulation_stays_put() {
        let dir = tempfile::tempdir().unwrap();
        let r = resolved(|c| {
            c.initial.epsilon = 0.0;
            c.simulation.cells = 32;
            c.simulation.t_final = Some(crate::config::Time(200.0));
            c.simulation.record_every = 1;
        });
        let (report, record) = simulate_record(&r, dir.path()).unwrap();
        assert!(report.converged, "{report}");
        assert!(record.controls.iter().all(|&u| u.abs() < 1e-12));
        assert!(record.deviation.iter().all(|d| d[0] < 1e-12 && d[1] < 1e-12));
        for name in ["states.csv", "norms.csv", "summary.txt", "resolved_config.toml"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
    }
}
