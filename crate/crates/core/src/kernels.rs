//! Backstepping kernels `K^{vw}`, `K^{vv}` on the triangles
//! `T1 = {0 <= x <= xi <= L}` and `T2 = {-L <= xi <= x <= 0}`.
//!
//! The kernels satisfy
//!
//! ```text
//! lambda d_x Kvw - v d_xi Kvw = c(xi) Kvv
//! d_x Kvv + d_xi Kvv = 0
//! Kvw(x, x) = +-c(x) / (gamma p*)        (+ on T1, - on T2)
//! Kvv = g Kvw                            on the far edge xi = +-L
//! ```
//!
//! `Kvv` is constant along `xi - x = const`, so it is a shifted copy of the
//! far-edge trace `E(y) = Kvw(y, +-L)`. Integrating the `Kvw` equation along
//! its characteristics back to the diagonal turns the trace into the fixed
//! point of a Volterra operator, which is solved by successive
//! approximation; the full table is then filled from the converged trace.
//!
//! Segment 2 is mirrored (`x -> -x`) onto the segment 1 triangle, where the
//! same equations hold with coupling `-c2(-xi)`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linearize::{boundary_rows, Grid};
use crate::model::{NetworkParams, SegmentId};

pub const DEFAULT_RESOLUTION: usize = 128;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 500;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("kernel resolution {0} is below the minimum of {1}")]
    Resolution(usize, usize),
    #[error("tolerance must be positive, got {0}")]
    Tolerance(f64),
    #[error("kernel iteration did not converge in {iterations} iterations (last change {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("position {x} outside the {segment} interval")]
    OutsideInterval { x: f64, segment: SegmentId },
    #[error("malformed kernel CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// `c(x) = amplitude * exp(rate * x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub amplitude: f64,
    pub rate: f64,
}

impl Coupling {
    pub const ZERO: Coupling = Coupling {
        amplitude: 0.0,
        rate: 0.0,
    };

    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (self.rate * x).exp()
    }
}

/// Data of one segment's kernel equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelProblem {
    pub segment: SegmentId,
    pub length: f64,
    /// `gamma p* - v*`.
    pub lambda: f64,
    /// `v*`.
    pub speed_w: f64,
    /// In-domain coupling in physical coordinates.
    pub coupling: Coupling,
    /// `Kvv = edge_gain * Kvw` on the far edge.
    pub edge_gain: f64,
}

impl KernelProblem {
    /// Kernel equations for one segment of the linearized network.
    ///
    /// The edge gains follow from requiring the boundary terms at the far
    /// end to vanish: `v Kvw(x,L) = lambda Kvv(x,L) * outlet` on segment 1 and
    /// `v * inlet * Kvw(x,-L) = lambda Kvv(x,-L)` on segment 2.
    pub fn from_network(segment: SegmentId, net: &NetworkParams) -> Self {
        let (seg, ss) = net.segment(segment);
        let rows = boundary_rows(net);
        let edge_gain = match segment {
            SegmentId::Outgoing => ss.lambda_w / (ss.lambda_v * rows.outlet),
            SegmentId::Incoming => ss.lambda_w * rows.inlet / ss.lambda_v,
        };
        KernelProblem {
            segment,
            length: seg.length,
            lambda: ss.lambda_v,
            speed_w: ss.lambda_w,
            coupling: Coupling {
                amplitude: -1.0 / seg.tau,
                rate: -1.0 / (seg.tau * ss.v_star),
            },
            edge_gain,
        }
    }

    pub fn gamma_p(&self) -> f64 {
        self.lambda + self.speed_w
    }

    /// Prescribed `Kvw(x, x)`.
    pub fn diagonal(&self, x: f64) -> f64 {
        let sign = match self.segment {
            SegmentId::Outgoing => 1.0,
            SegmentId::Incoming => -1.0,
        };
        sign * self.coupling.eval(x) / self.gamma_p()
    }

    /// Coupling in mirrored coordinates on the upper triangle.
    fn canonical_coupling(&self, xi: f64) -> f64 {
        match self.segment {
            SegmentId::Outgoing => self.coupling.eval(xi),
            SegmentId::Incoming => -self.coupling.eval(-xi),
        }
    }
}

/// Starting trace for the successive approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// Uniform values in `[-bound, bound]`.
    Random { seed: u64, bound: f64 },
}

/// Sampled kernels on a triangular grid with `m` intervals per side.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub segment: SegmentId,
    pub m: usize,
    pub length: f64,
    // Packed upper triangle in mirrored coordinates, row-major.
    kvw: Vec<f64>,
    kvv: Vec<f64>,
    /// Sup-norm change of the edge trace at each iteration.
    pub changes: Vec<f64>,
}

fn packed_len(m: usize) -> usize {
    (m + 1) * (m + 2) / 2
}

fn packed_index(m: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j <= m);
    i * (m + 1) - i * i.saturating_sub(1) / 2 + (j - i)
}

impl KernelTable {
    /// Table with values `f(x, xi) -> (Kvw, Kvv)` at every node of the triangle.
    pub fn from_fn(
        segment: SegmentId,
        length: f64,
        m: usize,
        f: impl Fn(f64, f64) -> (f64, f64),
    ) -> Self {
        let mut table = KernelTable {
            segment,
            m,
            length,
            kvw: vec![0.0; packed_len(m)],
            kvv: vec![0.0; packed_len(m)],
            changes: Vec::new(),
        };
        let grid = table.grid();
        for i in 0..=m {
            for j in table.xi_range(i) {
                let (w, v) = f(grid.position(i), grid.position(j));
                let k = table.slot(i, j);
                table.kvw[k] = w;
                table.kvv[k] = v;
            }
        }
        table
    }

    pub fn grid(&self) -> Grid {
        Grid {
            segment: self.segment,
            length: self.length,
            intervals: self.m,
        }
    }

    /// Node indices `j` with `(x_i, xi_j)` inside the triangle, increasing in `xi`.
    pub fn xi_range(&self, i: usize) -> std::ops::RangeInclusive<usize> {
        match self.segment {
            SegmentId::Outgoing => i..=self.m,
            SegmentId::Incoming => 0..=i,
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i <= self.m && self.xi_range(i).contains(&j)
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        match self.segment {
            SegmentId::Outgoing => packed_index(self.m, i, j),
            SegmentId::Incoming => packed_index(self.m, self.m - i, self.m - j),
        }
    }

    /// `(Kvw, Kvv)` at physical node `(x_i, xi_j)`.
    pub fn get(&self, i: usize, j: usize) -> Option<(f64, f64)> {
        self.contains(i, j).then(|| {
            let k = self.slot(i, j);
            (self.kvw[k], self.kvv[k])
        })
    }

    pub fn kvw(&self, i: usize, j: usize) -> f64 {
        self.kvw[self.slot(i, j)]
    }

    pub fn kvv(&self, i: usize, j: usize) -> f64 {
        self.kvv[self.slot(i, j)]
    }

    pub fn iterations(&self) -> usize {
        self.changes.len()
    }

    /// Largest kernel magnitude.
    pub fn bound(&self) -> f64 {
        self.kvw
            .iter()
            .chain(&self.kvv)
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest pointwise difference on the nodes shared with a finer table
    /// (`other.m` a multiple of `self.m`).
    pub fn max_difference(&self, other: &KernelTable) -> f64 {
        assert!(other.m.is_multiple_of(self.m) && other.segment == self.segment);
        let s = other.m / self.m;
        let mut d = 0.0f64;
        for i in 0..=self.m {
            for j in self.xi_range(i) {
                d = d.max((self.kvw(i, j) - other.kvw(s * i, s * j)).abs());
                d = d.max((self.kvv(i, j) - other.kvv(s * i, s * j)).abs());
            }
        }
        d
    }

    /// Writes the documented layout: a `segment_id,M` header row, then
    /// `x,xi,kvw,kvv` rows in physical coordinates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        w.write_record(["segment_id", "M"])?;
        w.write_record([self.segment.number().to_string(), self.m.to_string()])?;
        w.write_record(["x", "xi", "kvw", "kvv"])?;
        let grid = self.grid();
        for i in 0..=self.m {
            for j in self.xi_range(i) {
                w.write_record([
                    format!("{:e}", grid.position(i)),
                    format!("{:e}", grid.position(j)),
                    format!("{:e}", self.kvw(i, j)),
                    format!("{:e}", self.kvv(i, j)),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(false)
            .from_reader(input);
        let mut records = r.records();
        let mut next = |what: &str| -> Result<csv::StringRecord> {
            records
                .next()
                .ok_or_else(|| KernelError::Format(format!("missing {what}")))?
                .map_err(KernelError::from)
        };
        let field = |rec: &csv::StringRecord, k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| KernelError::Format(format!("bad number in record {rec:?}")))
        };
        next("header")?;
        let meta = next("segment_id,M")?;
        let segment = SegmentId::from_number(field(&meta, 0)? as u8)
            .ok_or_else(|| KernelError::Format("segment_id must be 1 or 2".into()))?;
        let m = field(&meta, 1)? as usize;
        if m == 0 {
            return Err(KernelError::Format("M must be positive".into()));
        }
        next("column header")?;
        let mut rows = Vec::with_capacity(packed_len(m));
        for _ in 0..packed_len(m) {
            let rec = next("kernel row")?;
            rows.push([field(&rec, 0)?, field(&rec, 1)?, field(&rec, 2)?, field(&rec, 3)?]);
        }
        let length = rows
            .iter()
            .map(|row| row[0].abs().max(row[1].abs()))
            .fold(0.0, f64::max);
        let mut table = KernelTable::from_fn(segment, length, m, |_, _| (0.0, 0.0));
        let mut k = 0;
        for i in 0..=m {
            for j in table.xi_range(i) {
                let slot = table.slot(i, j);
                table.kvw[slot] = rows[k][2];
                table.kvv[slot] = rows[k][3];
                k += 1;
            }
        }
        Ok(table)
    }
}

/// Solves the kernel equations of one segment of `net`.
pub fn solve_kernels(
    segment: SegmentId,
    net: &NetworkParams,
    m: usize,
    tol: f64,
) -> Result<KernelTable> {
    solve_problem(&KernelProblem::from_network(segment, net), m, tol, Init::Zero)
}

pub const MIN_RESOLUTION: usize = 16;

/// Successive approximation of the far-edge trace followed by a sweep over
/// the triangle.
pub fn solve_problem(problem: &KernelProblem, m: usize, tol: f64, init: Init) -> Result<KernelTable> {
    if m < MIN_RESOLUTION {
        return Err(KernelError::Resolution(m, MIN_RESOLUTION));
    }
    if !(tol > 0.0) {
        return Err(KernelError::Tolerance(tol));
    }
    let sweep = Sweep::new(problem, m);
    let mut edge: Vec<f64> = match init {
        Init::Zero => vec![0.0; m + 1],
        Init::Random { seed, bound } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..=m).map(|_| rng.gen_range(-bound..=bound)).collect()
        }
    };
    let mut changes = Vec::new();
    loop {
        let next: Vec<f64> = (0..=m).map(|i| sweep.kvw(i, m, &edge)).collect();
        let change = next
            .iter()
            .zip(&edge)
            .fold(0.0f64, |d, (a, b)| d.max((a - b).abs()));
        edge = next;
        changes.push(change);
        if change < tol {
            break;
        }
        if changes.len() >= MAX_ITERATIONS || !change.is_finite() {
            return Err(KernelError::NoConvergence {
                iterations: changes.len(),
                residual: change,
            });
        }
    }
    // Mirrored upper-triangle values, then stored through the physical layout.
    let mut table = KernelTable::from_fn(problem.segment, problem.length, m, |_, _| (0.0, 0.0));
    for i in 0..=m {
        for j in i..=m {
            let k = packed_index(m, i, j);
            table.kvw[k] = if j == m { edge[i] } else { sweep.kvw(i, j, &edge) };
            table.kvv[k] = problem.edge_gain * edge[i + m - j];
        }
    }
    table.changes = changes;
    Ok(table)
}

/// Characteristic integration on the mirrored triangle `0 <= x <= xi <= L`.
struct Sweep<'a> {
    problem: &'a KernelProblem,
    m: usize,
    h: f64,
}

impl<'a> Sweep<'a> {
    fn new(problem: &'a KernelProblem, m: usize) -> Self {
        Sweep {
            problem,
            m,
            h: problem.length / m as f64,
        }
    }

    /// `Kvw(x_i, xi_j)` given the far-edge trace.
    ///
    /// The characteristic through `(x_i, xi_j)` reaches the diagonal at
    /// `x_i + lambda (xi_j - x_i) / (gamma p)`. Parametrized by the shifted
    /// coordinate `y = x + L - xi`, it crosses the nodes `y_k`, `k = i+m-j..=m`,
    /// where `Kvv = g E(y_k)`.
    fn kvw(&self, i: usize, j: usize, edge: &[f64]) -> f64 {
        let p = self.problem;
        let (h, m) = (self.h, self.m);
        let gp = p.gamma_p();
        let (x, xi) = (i as f64 * h, j as f64 * h);
        let x_diag = x + p.lambda * (xi - x) / gp;
        // Diagonal data in mirrored coordinates equals c'(x)/(gamma p).
        let diag = p.canonical_coupling(x_diag) / gp;
        let start = i + m - j;
        if start == m {
            return diag;
        }
        let mut integral = 0.0;
        for (n, &e) in edge[start..=m].iter().enumerate() {
            let weight = if n == 0 || n == m - start { 0.5 } else { 1.0 };
            let xi_k = xi - p.speed_w * n as f64 * h / gp;
            integral += weight * p.canonical_coupling(xi_k) * e;
        }
        diag - p.edge_gain / gp * integral * h
    }
}

/// Sup-norm residuals of the kernel equations on a table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelResidual {
    /// Central-difference residual of both PDEs at interior nodes.
    pub pde: f64,
    /// Diagonal and far-edge conditions.
    pub bc: f64,
}

/// Evaluates the kernel equations on `table` in physical coordinates.
pub fn kernel_residual(table: &KernelTable, problem: &KernelProblem) -> Result<KernelResidual> {
    let m = table.m;
    if m < 8 {
        return Err(KernelError::Resolution(m, 8));
    }
    let grid = table.grid();
    let h = grid.spacing();
    let mut pde = 0.0f64;
    for i in 1..m {
        for j in 1..m {
            let inner = table.contains(i + 1, j)
                && table.contains(i - 1, j)
                && table.contains(i, j + 1)
                && table.contains(i, j - 1);
            if !inner {
                continue;
            }
            let dx_w = (table.kvw(i + 1, j) - table.kvw(i - 1, j)) / (2.0 * h);
            let dxi_w = (table.kvw(i, j + 1) - table.kvw(i, j - 1)) / (2.0 * h);
            let dx_v = (table.kvv(i + 1, j) - table.kvv(i - 1, j)) / (2.0 * h);
            let dxi_v = (table.kvv(i, j + 1) - table.kvv(i, j - 1)) / (2.0 * h);
            let c = problem.coupling.eval(grid.position(j));
            let r1 = problem.lambda * dx_w - problem.speed_w * dxi_w - c * table.kvv(i, j);
            pde = pde.max(r1.abs()).max((dx_v + dxi_v).abs());
        }
    }
    let far_edge = match table.segment {
        SegmentId::Outgoing => m,
        SegmentId::Incoming => 0,
    };
    let mut bc = 0.0f64;
    for i in 0..=m {
        let x = grid.position(i);
        bc = bc.max((table.kvw(i, i) - problem.diagonal(x)).abs());
        bc = bc.max((table.kvv(i, far_edge) - problem.edge_gain * table.kvw(i, far_edge)).abs());
    }
    Ok(KernelResidual { pde, bc })
}

/// `K^{vw}(x, .)` and `K^{vv}(x, .)` sampled at the `xi` nodes of the triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRow {
    pub xi: Vec<f64>,
    pub kvw: Vec<f64>,
    pub kvv: Vec<f64>,
}

/// Row of the kernels at an arbitrary `x`, linear in `x` between the two
/// neighbouring node rows and restricted to `xi` nodes on both of them.
/// Exact at nodes.
pub fn interpolate_kernel_row(table: &KernelTable, x: f64) -> Result<KernelRow> {
    let grid = table.grid();
    let (left, right) = table.segment.interval(table.length);
    if !(left..=right).contains(&x) {
        return Err(KernelError::OutsideInterval {
            x,
            segment: table.segment,
        });
    }
    let s = (x - left) / grid.spacing();
    let i0 = (s.floor() as usize).min(table.m);
    let theta = s - i0 as f64;
    let mut row = KernelRow {
        xi: Vec::new(),
        kvw: Vec::new(),
        kvv: Vec::new(),
    };
    if theta <= 1e-12 * table.m as f64 || i0 == table.m {
        for j in table.xi_range(i0) {
            row.xi.push(grid.position(j));
            row.kvw.push(table.kvw(i0, j));
            row.kvv.push(table.kvv(i0, j));
        }
        return Ok(row);
    }
    for j in table.xi_range(i0) {
        if !table.contains(i0 + 1, j) {
            continue;
        }
        row.xi.push(grid.position(j));
        row.kvw
            .push((1.0 - theta) * table.kvw(i0, j) + theta * table.kvw(i0 + 1, j));
        row.kvv
            .push((1.0 - theta) * table.kvv(i0, j) + theta * table.kvv(i0 + 1, j));
    }
    Ok(row)
}
