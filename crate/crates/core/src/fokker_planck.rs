//! Master equation for one degree of freedom on a 2-D phase-space grid:
//!
//! ```text
//! ∂ρ/∂t + {ρ, H} = ∂x(D_x ∂x ρ) + ∂p(D_p ∂p ρ)
//! D_x = ħ/4m,   D_p = ħ m λ_loc² / 4,   λ_loc² = max(−∂²H/∂x², 0) / m
//! ```
//!
//! Advection is finite-volume with limited upwind fluxes, split by axis; the
//! velocity along each grid line is constant because the Hamiltonian is
//! separable, so each sweep is a 1-D constant-speed problem. Diffusion is an
//! explicit symmetric stencil, which keeps every step mass-conserving and
//! positivity-preserving under the checked bounds.
//!
//! Cells are stored x-major: index `ix * n_p + ip`.

use std::io::{self, Read, Write};

use statrs::function::erf::erf;

use crate::ensemble_stats::{InitialDistribution, InitialKind};
use crate::error::{Error, Result};
use crate::phase_core::{wrap_angle, HamiltonianModel, PhaseState};
use crate::sde_engine::Gating;
use crate::stability::DEFAULT_RATE_TOLERANCE;

pub const MIN_RESOLUTION: usize = 16;
pub const BINARY_MAGIC: &[u8; 4] = b"SHFP";
pub const BINARY_VERSION: u32 = 1;
pub const DEFAULT_STATIONARITY_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Boundary {
    Periodic,
    ZeroFlux,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Limiter {
    /// First order; every sweep is a doubly stochastic map.
    Upwind,
    Minmod,
    #[default]
    VanLeer,
}

impl Limiter {
    #[inline]
    fn slope(self, a: f64, b: f64) -> f64 {
        match self {
            Limiter::Upwind => 0.0,
            Limiter::Minmod => {
                if a * b <= 0.0 {
                    0.0
                } else if a.abs() < b.abs() {
                    a
                } else {
                    b
                }
            }
            Limiter::VanLeer => {
                let ab = a * b;
                if ab <= 0.0 {
                    0.0
                } else {
                    2.0 * ab / (a + b)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x_bounds: (f64, f64),
    pub p_bounds: (f64, f64),
    pub n_x: usize,
    pub n_p: usize,
    pub x_boundary: Boundary,
    pub p_boundary: Boundary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionGrid {
    pub x_bounds: (f64, f64),
    pub p_bounds: (f64, f64),
    pub n_x: usize,
    pub n_p: usize,
    pub x_boundary: Boundary,
    pub p_boundary: Boundary,
    pub rho: Vec<f64>,
    /// `(σx, σp)` of the Gaussian that stood in for a point initial condition.
    pub regularized: Option<(f64, f64)>,
}

fn normal_cell_masses(lo: f64, h: f64, n: usize, mean: f64, sd: f64) -> Vec<f64> {
    let s = std::f64::consts::SQRT_2 * sd;
    (0..n)
        .map(|i| {
            let a = (lo + i as f64 * h - mean) / s;
            let b = (lo + (i + 1) as f64 * h - mean) / s;
            0.5 * (erf(b) - erf(a))
        })
        .collect()
}

pub fn build_grid(spec: &GridSpec, init: &InitialDistribution) -> Result<DistributionGrid> {
    if init.center.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: init.center.dim(),
        });
    }
    if spec.n_x < MIN_RESOLUTION || spec.n_p < MIN_RESOLUTION {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least {MIN_RESOLUTION} cells per axis"
        )));
    }
    if !(spec.x_bounds.1 > spec.x_bounds.0) || !(spec.p_bounds.1 > spec.p_bounds.0) {
        return Err(Error::InvalidArgument("grid bounds must be increasing".into()));
    }
    let mut grid = DistributionGrid {
        x_bounds: spec.x_bounds,
        p_bounds: spec.p_bounds,
        n_x: spec.n_x,
        n_p: spec.n_p,
        x_boundary: spec.x_boundary,
        p_boundary: spec.p_boundary,
        rho: vec![0.0; spec.n_x * spec.n_p],
        regularized: None,
    };
    let (dx, dp) = (grid.dx(), grid.dp());
    let point = init.kind == InitialKind::Point;
    let mut sd_x = init.var_x[0].sqrt();
    let mut sd_p = init.var_p[0].sqrt();
    if point || sd_x == 0.0 || sd_p == 0.0 {
        if point || sd_x == 0.0 {
            sd_x = 2.0 * dx;
        }
        if point || sd_p == 0.0 {
            sd_p = 2.0 * dp;
        }
        grid.regularized = Some((sd_x, sd_p));
    }
    let mx = normal_cell_masses(spec.x_bounds.0, dx, spec.n_x, init.center.x[0], sd_x);
    let mp = normal_cell_masses(spec.p_bounds.0, dp, spec.n_p, init.center.p[0], sd_p);
    let inside = mx.iter().sum::<f64>() * mp.iter().sum::<f64>();
    if !(inside >= 0.999) {
        return Err(Error::MassOutsideDomain { inside });
    }
    let scale = 1.0 / (inside * dx * dp);
    for (ix, wx) in mx.iter().enumerate() {
        for (ip, wp) in mp.iter().enumerate() {
            grid.rho[ix * spec.n_p + ip] = wx * wp * scale;
        }
    }
    Ok(grid)
}

impl DistributionGrid {
    /// Constant density over the whole domain.
    pub fn uniform(spec: &GridSpec) -> Result<Self> {
        if spec.n_x < MIN_RESOLUTION || spec.n_p < MIN_RESOLUTION {
            return Err(Error::InvalidArgument(format!(
                "grid needs at least {MIN_RESOLUTION} cells per axis"
            )));
        }
        let area = (spec.x_bounds.1 - spec.x_bounds.0) * (spec.p_bounds.1 - spec.p_bounds.0);
        Ok(Self {
            x_bounds: spec.x_bounds,
            p_bounds: spec.p_bounds,
            n_x: spec.n_x,
            n_p: spec.n_p,
            x_boundary: spec.x_boundary,
            p_boundary: spec.p_boundary,
            rho: vec![1.0 / area; spec.n_x * spec.n_p],
            regularized: None,
        })
    }

    pub fn dx(&self) -> f64 {
        (self.x_bounds.1 - self.x_bounds.0) / self.n_x as f64
    }

    pub fn dp(&self) -> f64 {
        (self.p_bounds.1 - self.p_bounds.0) / self.n_p as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dp()
    }

    pub fn x_center(&self, ix: usize) -> f64 {
        self.x_bounds.0 + (ix as f64 + 0.5) * self.dx()
    }

    pub fn p_center(&self, ip: usize) -> f64 {
        self.p_bounds.0 + (ip as f64 + 0.5) * self.dp()
    }

    #[inline]
    pub fn at(&self, ix: usize, ip: usize) -> f64 {
        self.rho[ix * self.n_p + ip]
    }

    pub fn mass(&self) -> f64 {
        self.rho.iter().sum::<f64>() * self.cell_area()
    }

    pub fn min_density(&self) -> f64 {
        self.rho.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `(mean_x, mean_p, var_x, var_p)` of the density.
    pub fn moments(&self) -> (f64, f64, f64, f64) {
        let w = self.cell_area();
        let (mut mx, mut mp) = (0.0, 0.0);
        for ix in 0..self.n_x {
            for ip in 0..self.n_p {
                let m = self.at(ix, ip) * w;
                mx += m * self.x_center(ix);
                mp += m * self.p_center(ip);
            }
        }
        let (mut vx, mut vp) = (0.0, 0.0);
        for ix in 0..self.n_x {
            for ip in 0..self.n_p {
                let m = self.at(ix, ip) * w;
                vx += m * (self.x_center(ix) - mx).powi(2);
                vp += m * (self.p_center(ip) - mp).powi(2);
            }
        }
        (mx, mp, vx, vp)
    }

    /// Merges `factor × factor` blocks of cells.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_x % factor != 0 || self.n_p % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "factor {factor} does not divide {}×{}",
                self.n_x, self.n_p
            )));
        }
        let (nx, np) = (self.n_x / factor, self.n_p / factor);
        let mut rho = vec![0.0; nx * np];
        let norm = 1.0 / (factor * factor) as f64;
        for ix in 0..self.n_x {
            for ip in 0..self.n_p {
                rho[(ix / factor) * np + ip / factor] += self.at(ix, ip) * norm;
            }
        }
        Ok(Self {
            n_x: nx,
            n_p: np,
            rho,
            ..self.clone()
        })
    }

    /// L¹ distance `Σ|ρ − σ|·ΔxΔp` between grids of the same layout.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.rho
            .iter()
            .zip(&other.rho)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.cell_area()
    }

    /// `x,p,rho` rows in storage order, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "x,p,rho")?;
        for ix in 0..self.n_x {
            let x = self.x_center(ix);
            for ip in 0..self.n_p {
                writeln!(out, "{:.16e},{:.16e},{:.16e}", x, self.p_center(ip), self.at(ix, ip))?;
            }
        }
        Ok(())
    }

    /// Little-endian: `"SHFP"`, version u32, n_x u32, n_p u32, bounds 4×f64
    /// `(x_min, x_max, p_min, p_max)`, then the densities in storage order.
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&BINARY_VERSION.to_le_bytes())?;
        out.write_all(&(self.n_x as u32).to_le_bytes())?;
        out.write_all(&(self.n_p as u32).to_le_bytes())?;
        for b in [self.x_bounds.0, self.x_bounds.1, self.p_bounds.0, self.p_bounds.1] {
            out.write_all(&b.to_le_bytes())?;
        }
        for v in &self.rho {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`write_binary`](Self::write_binary); boundary kinds are not
    /// part of the layout and must be supplied.
    pub fn read_binary<R: Read>(
        mut input: R,
        x_boundary: Boundary,
        p_boundary: Boundary,
    ) -> io::Result<Self> {
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        let mut read_u32 = |input: &mut R| -> io::Result<u32> {
            input.read_exact(&mut word)?;
            Ok(u32::from_le_bytes(word))
        };
        let version = read_u32(&mut input)?;
        if version != BINARY_VERSION {
            return Err(bad("unsupported version"));
        }
        let n_x = read_u32(&mut input)? as usize;
        let n_p = read_u32(&mut input)? as usize;
        let mut dword = [0u8; 8];
        let mut read_f64 = |input: &mut R| -> io::Result<f64> {
            input.read_exact(&mut dword)?;
            Ok(f64::from_le_bytes(dword))
        };
        let bounds: Vec<f64> = (0..4).map(|_| read_f64(&mut input)).collect::<io::Result<_>>()?;
        let rho = (0..n_x * n_p)
            .map(|_| read_f64(&mut input))
            .collect::<io::Result<Vec<f64>>>()?;
        Ok(Self {
            x_bounds: (bounds[0], bounds[1]),
            p_bounds: (bounds[2], bounds[3]),
            n_x,
            n_p,
            x_boundary,
            p_boundary,
            rho,
            regularized: None,
        })
    }
}

/// `S = −Σ ρ ln ρ ΔxΔp`, with `0 ln 0 = 0`.
pub fn gibbs_entropy(grid: &DistributionGrid) -> f64 {
    -grid
        .rho
        .iter()
        .filter(|&&r| r > 0.0)
        .map(|&r| r * r.ln())
        .sum::<f64>()
        * grid.cell_area()
}

/// Total variation distance between the grid's cell masses and a sample
/// histogram on the same cells. Samples outside the domain count as mass the
/// grid does not have.
pub fn compare_histogram(grid: &DistributionGrid, samples: &[PhaseState]) -> Result<f64> {
    const REQUIRED: usize = 1000;
    let mut counts = vec![0u64; grid.rho.len()];
    let mut outside = 0u64;
    let (dx, dp) = (grid.dx(), grid.dp());
    for s in samples {
        let mut x = s.x[0];
        if grid.x_boundary == Boundary::Periodic {
            let width = grid.x_bounds.1 - grid.x_bounds.0;
            x = grid.x_bounds.0 + (x - grid.x_bounds.0).rem_euclid(width);
        }
        let mut p = s.p[0];
        if grid.p_boundary == Boundary::Periodic {
            let width = grid.p_bounds.1 - grid.p_bounds.0;
            p = grid.p_bounds.0 + (p - grid.p_bounds.0).rem_euclid(width);
        }
        let fx = (x - grid.x_bounds.0) / dx;
        let fp = (p - grid.p_bounds.0) / dp;
        if !(fx >= 0.0 && fp >= 0.0) {
            outside += 1;
            continue;
        }
        let (ix, ip) = (fx as usize, fp as usize);
        if ix >= grid.n_x || ip >= grid.n_p {
            outside += 1;
            continue;
        }
        counts[ix * grid.n_p + ip] += 1;
    }
    let inside = samples.len() - outside as usize;
    if inside < REQUIRED {
        return Err(Error::TooFewSamples {
            required: REQUIRED,
            got: inside,
        });
    }
    let n = samples.len() as f64;
    let area = grid.cell_area();
    let cells: f64 = grid
        .rho
        .iter()
        .zip(&counts)
        .map(|(r, &c)| (r * area - c as f64 / n).abs())
        .sum();
    Ok(0.5 * (cells + outside as f64 / n))
}

/// Wraps periodic sample coordinates into the grid's x-range.
pub fn wrap_to_grid(grid: &DistributionGrid, state: &mut PhaseState) {
    if grid.x_boundary == Boundary::Periodic
        && (grid.x_bounds.0 + std::f64::consts::PI).abs() < 1e-12
        && (grid.x_bounds.1 - std::f64::consts::PI).abs() < 1e-12
    {
        state.x[0] = wrap_angle(state.x[0]);
    }
}

fn check_one_dof(model: &HamiltonianModel) -> Result<()> {
    if model.n() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: model.n(),
        });
    }
    Ok(())
}

/// Per-line speeds: x-sweep speed for each p row, p-sweep speed for each x column.
fn velocities(model: &HamiltonianModel, grid: &DistributionGrid) -> (Vec<f64>, Vec<f64>) {
    let ux = (0..grid.n_p).map(|ip| model.velocity(0, grid.p_center(ip))).collect();
    let up = (0..grid.n_x).map(|ix| model.force(0, grid.x_center(ix))).collect();
    (ux, up)
}

pub fn advective_courant(model: &HamiltonianModel, grid: &DistributionGrid, dt: f64) -> f64 {
    let (ux, up) = velocities(model, grid);
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, u| m.max(u.abs()));
    (max_abs(&ux) * dt / grid.dx()).max(max_abs(&up) * dt / grid.dp())
}

#[inline]
fn neighbor(i: isize, n: usize, boundary: Boundary) -> usize {
    let n = n as isize;
    match boundary {
        Boundary::Periodic => i.rem_euclid(n) as usize,
        Boundary::ZeroFlux => i.clamp(0, n - 1) as usize,
    }
}

#[inline]
fn face_flux(u: f64, nu: f64, l2: f64, l: f64, r: f64, r2: f64, limiter: Limiter) -> f64 {
    if u >= 0.0 {
        u * (l + 0.5 * (1.0 - nu) * limiter.slope(l - l2, r - l))
    } else {
        u * (r - 0.5 * (1.0 - nu) * limiter.slope(r - l, r2 - r))
    }
}

/// Advection along x (stride `n_p`), speed `ux[ip]` on row `ip`.
fn sweep_x(grid: &mut DistributionGrid, ux: &[f64], dt: f64, limiter: Limiter, old: &mut Vec<f64>) {
    let (nx, np) = (grid.n_x, grid.n_p);
    let c = dt / grid.dx();
    let faces = match grid.x_boundary {
        Boundary::Periodic => nx,
        Boundary::ZeroFlux => nx - 1,
    };
    old.clear();
    old.extend_from_slice(&grid.rho);
    let rho = &mut grid.rho;
    // face f separates cell f from cell f+1 (mod nx)
    for f in 0..faces {
        let il2 = neighbor(f as isize - 1, nx, grid.x_boundary) * np;
        let il = f * np;
        let ir = neighbor(f as isize + 1, nx, grid.x_boundary) * np;
        let ir2 = neighbor(f as isize + 2, nx, grid.x_boundary) * np;
        for (ip, &u) in ux.iter().enumerate() {
            let flux = face_flux(
                u,
                u.abs() * c,
                old[il2 + ip],
                old[il + ip],
                old[ir + ip],
                old[ir2 + ip],
                limiter,
            ) * c;
            rho[il + ip] -= flux;
            rho[ir + ip] += flux;
        }
    }
}

/// Advection along p (contiguous), speed `up[ix]` on column `ix`.
fn sweep_p(grid: &mut DistributionGrid, up: &[f64], dt: f64, limiter: Limiter, line: &mut Vec<f64>) {
    let np = grid.n_p;
    let c = dt / grid.dp();
    let boundary = grid.p_boundary;
    let faces = match boundary {
        Boundary::Periodic => np,
        Boundary::ZeroFlux => np - 1,
    };
    line.clear();
    line.resize(np, 0.0);
    for (ix, &u) in up.iter().enumerate() {
        let row = &mut grid.rho[ix * np..(ix + 1) * np];
        line.copy_from_slice(row);
        let nu = u.abs() * c;
        for f in 0..faces {
            let il2 = neighbor(f as isize - 1, np, boundary);
            let ir = neighbor(f as isize + 1, np, boundary);
            let ir2 = neighbor(f as isize + 2, np, boundary);
            let flux = face_flux(u, nu, line[il2], line[f], line[ir], line[ir2], limiter) * c;
            row[f] -= flux;
            row[ir] += flux;
        }
    }
}

pub fn liouville_step(
    model: &HamiltonianModel,
    grid: &DistributionGrid,
    dt: f64,
) -> Result<DistributionGrid> {
    liouville_step_with(model, grid, dt, Limiter::default())
}

/// Half x-sweep, full p-sweep, half x-sweep.
pub fn liouville_step_with(
    model: &HamiltonianModel,
    grid: &DistributionGrid,
    dt: f64,
    limiter: Limiter,
) -> Result<DistributionGrid> {
    check_one_dof(model)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let courant = advective_courant(model, grid, dt);
    if courant > 1.0 {
        return Err(Error::CflViolation { courant });
    }
    let (ux, up) = velocities(model, grid);
    let mut out = grid.clone();
    let mut scratch = Vec::new();
    advect(&mut out, &ux, &up, dt, limiter, &mut scratch);
    Ok(out)
}

fn advect(
    grid: &mut DistributionGrid,
    ux: &[f64],
    up: &[f64],
    dt: f64,
    limiter: Limiter,
    scratch: &mut Vec<f64>,
) {
    sweep_x(grid, ux, 0.5 * dt, limiter, scratch);
    sweep_p(grid, up, dt, limiter, scratch);
    sweep_x(grid, ux, 0.5 * dt, limiter, scratch);
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterEqConfig {
    pub hbar_eff: f64,
    pub gating: Gating,
    pub dt: f64,
    /// Strang (half-advection, diffusion, half-advection) when set, Lie otherwise.
    pub strang: bool,
    pub entropy_interval: f64,
    pub limiter: Limiter,
    pub stationarity_threshold: f64,
    /// Stop once the stationarity criterion is met.
    pub stop_when_stationary: bool,
    pub rate_tolerance: f64,
}

impl MasterEqConfig {
    /// Validates `dt` against both the advective CFL bound and the explicit
    /// diffusion bound of `grid`.
    pub fn new(
        model: &HamiltonianModel,
        grid: &DistributionGrid,
        hbar_eff: f64,
        gating: Gating,
        dt: f64,
        entropy_interval: f64,
    ) -> Result<Self> {
        let config = Self {
            hbar_eff,
            gating,
            dt,
            strang: true,
            entropy_interval,
            limiter: Limiter::default(),
            stationarity_threshold: DEFAULT_STATIONARITY_THRESHOLD,
            stop_when_stationary: false,
            rate_tolerance: DEFAULT_RATE_TOLERANCE,
        };
        config.validate(model, grid)?;
        Ok(config)
    }

    /// Largest step satisfying both bounds, times `safety`.
    pub fn stable_dt(
        model: &HamiltonianModel,
        grid: &DistributionGrid,
        hbar_eff: f64,
        gating: Gating,
        safety: f64,
    ) -> f64 {
        let courant = advective_courant(model, grid, 1.0);
        let diffusion = DiffusionCoefficients::new(model, grid, hbar_eff, gating, DEFAULT_RATE_TOLERANCE)
            .number(grid, 1.0);
        let mut dt = f64::INFINITY;
        if courant > 0.0 {
            dt = dt.min(1.0 / courant);
        }
        if diffusion > 0.0 {
            dt = dt.min(0.5 / diffusion);
        }
        safety * dt
    }

    pub fn validate(&self, model: &HamiltonianModel, grid: &DistributionGrid) -> Result<()> {
        check_one_dof(model)?;
        if !(self.dt > 0.0) || !(self.entropy_interval >= self.dt) {
            return Err(Error::InvalidArgument(
                "need dt > 0 and entropy_interval ≥ dt".into(),
            ));
        }
        if !(self.hbar_eff >= 0.0) {
            return Err(Error::InvalidArgument("hbar_eff must be ≥ 0".into()));
        }
        let courant = advective_courant(model, grid, self.dt);
        if courant > 1.0 {
            return Err(Error::CflViolation { courant });
        }
        let number = DiffusionCoefficients::new(model, grid, self.hbar_eff, self.gating, self.rate_tolerance)
            .number(grid, self.dt);
        if number > 0.5 {
            return Err(Error::StabilityViolation { number });
        }
        Ok(())
    }
}

/// Per-column diffusion coefficients (both depend on x only).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionCoefficients {
    pub d_x: Vec<f64>,
    pub d_p: Vec<f64>,
}

impl DiffusionCoefficients {
    pub fn new(
        model: &HamiltonianModel,
        grid: &DistributionGrid,
        hbar_eff: f64,
        gating: Gating,
        rate_tolerance: f64,
    ) -> Self {
        let m = model.modes()[0].mass;
        let mut d_x = vec![0.0; grid.n_x];
        let mut d_p = vec![0.0; grid.n_x];
        if gating == Gating::Off || hbar_eff == 0.0 {
            return Self { d_x, d_p };
        }
        for ix in 0..grid.n_x {
            let neg_curv = -model.curvature(0, grid.x_center(ix));
            let unstable = neg_curv > rate_tolerance;
            if unstable || gating == Gating::AllOn {
                d_x[ix] = hbar_eff / (4.0 * m);
            }
            if unstable {
                // ħ m λ²/4 with λ² = −V''/m
                d_p[ix] = 0.25 * hbar_eff * neg_curv;
            }
        }
        Self { d_x, d_p }
    }

    pub fn is_zero(&self) -> bool {
        self.d_x.iter().chain(&self.d_p).all(|&d| d == 0.0)
    }

    /// `max_cell dt·(D_x/Δx² + D_p/Δp²)`; the explicit stencil is stable and
    /// positivity-preserving while this stays ≤ 1/2.
    pub fn number(&self, grid: &DistributionGrid, dt: f64) -> f64 {
        let (dx2, dp2) = (grid.dx().powi(2), grid.dp().powi(2));
        let n = grid.n_x;
        (0..n)
            .map(|ix| {
                let l = neighbor(ix as isize - 1, n, grid.x_boundary);
                let r = neighbor(ix as isize + 1, n, grid.x_boundary);
                let dx_face = 0.5 * (0.5 * (self.d_x[l] + self.d_x[ix]) + 0.5 * (self.d_x[r] + self.d_x[ix]));
                dt * (dx_face / dx2 + self.d_p[ix] / dp2)
            })
            .fold(0.0, f64::max)
    }
}

fn diffuse(grid: &mut DistributionGrid, coeff: &DiffusionCoefficients, dt: f64, scratch: &mut Vec<f64>) {
    let (nx, np) = (grid.n_x, grid.n_p);
    let cx = dt / grid.dx().powi(2);
    let cp = dt / grid.dp().powi(2);
    scratch.clear();
    scratch.resize(nx * np, 0.0);
    let rho = &grid.rho;

    let x_faces = match grid.x_boundary {
        Boundary::Periodic => nx,
        Boundary::ZeroFlux => nx - 1,
    };
    for f in 0..x_faces {
        let r = (f + 1) % nx;
        let d = 0.5 * (coeff.d_x[f] + coeff.d_x[r]) * cx;
        if d == 0.0 {
            continue;
        }
        for ip in 0..np {
            let flux = d * (rho[r * np + ip] - rho[f * np + ip]);
            scratch[f * np + ip] += flux;
            scratch[r * np + ip] -= flux;
        }
    }
    let p_faces = match grid.p_boundary {
        Boundary::Periodic => np,
        Boundary::ZeroFlux => np - 1,
    };
    for ix in 0..nx {
        let d = coeff.d_p[ix] * cp;
        if d == 0.0 {
            continue;
        }
        let base = ix * np;
        for f in 0..p_faces {
            let r = (f + 1) % np;
            let flux = d * (rho[base + r] - rho[base + f]);
            scratch[base + f] += flux;
            scratch[base + r] -= flux;
        }
    }
    for (r, d) in grid.rho.iter_mut().zip(scratch.iter()) {
        *r += d;
    }
}

pub fn diffusion_step(
    model: &HamiltonianModel,
    grid: &DistributionGrid,
    dt: f64,
    config: &MasterEqConfig,
) -> Result<DistributionGrid> {
    check_one_dof(model)?;
    let coeff = DiffusionCoefficients::new(model, grid, config.hbar_eff, config.gating, config.rate_tolerance);
    let number = coeff.number(grid, dt);
    if number > 0.5 {
        return Err(Error::StabilityViolation { number });
    }
    let mut out = grid.clone();
    if !coeff.is_zero() {
        diffuse(&mut out, &coeff, dt, &mut Vec::new());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionOutcome {
    pub grid: DistributionGrid,
    /// `(t, S)` at t = 0 and every entropy interval.
    pub entropy: Vec<(f64, f64)>,
    /// L¹ change per unit time between consecutive entropy samples.
    pub l1_rate: Vec<f64>,
    pub stationary: bool,
    pub stationary_at: Option<f64>,
    /// Smallest density seen after any step.
    pub min_density: f64,
    /// Largest `|mass − 1|` seen after any step.
    pub max_mass_defect: f64,
    pub steps: usize,
}

impl EvolutionOutcome {
    /// Most negative consecutive entropy change (0 if entropy never decreased).
    pub fn worst_entropy_decrease(&self) -> f64 {
        self.entropy
            .windows(2)
            .map(|w| (w[1].1 - w[0].1).min(0.0))
            .fold(0.0, f64::min)
    }
}

pub fn evolve_master_equation(
    model: &HamiltonianModel,
    grid: &DistributionGrid,
    horizon: f64,
    config: &MasterEqConfig,
) -> Result<EvolutionOutcome> {
    config.validate(model, grid)?;
    let steps = (horizon / config.dt).round() as usize;
    if (steps as f64 * config.dt - horizon).abs() > 1e-9 * horizon.max(config.dt) {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} is not a whole number of steps of {}",
            config.dt
        )));
    }
    let per_sample = ((config.entropy_interval / config.dt).round() as usize).max(1);
    let (ux, up) = velocities(model, grid);
    let coeff = DiffusionCoefficients::new(model, grid, config.hbar_eff, config.gating, config.rate_tolerance);
    let diffusing = !coeff.is_zero();
    let dt = config.dt;

    let mut g = grid.clone();
    let mut scratch = Vec::new();
    let mut entropy = vec![(0.0, gibbs_entropy(&g))];
    let mut l1_rate = Vec::new();
    let mut last_sample = g.rho.clone();
    let mut last_sample_t = 0.0;
    let mut stationary_at = None;
    let mut min_density = g.min_density();
    let mut max_mass_defect = (g.mass() - 1.0).abs();
    let mut taken = 0;

    // Between entropy samples the trailing half-advection of one step and the
    // leading half of the next are fused into a single full advection.
    let mut open = false;
    for step in 1..=steps {
        let sample = step % per_sample == 0 || step == steps;
        if config.strang {
            if !open {
                advect(&mut g, &ux, &up, 0.5 * dt, config.limiter, &mut scratch);
            }
            if diffusing {
                diffuse(&mut g, &coeff, dt, &mut scratch);
            }
            if sample {
                advect(&mut g, &ux, &up, 0.5 * dt, config.limiter, &mut scratch);
            } else {
                advect(&mut g, &ux, &up, dt, config.limiter, &mut scratch);
            }
            open = !sample;
        } else {
            advect(&mut g, &ux, &up, dt, config.limiter, &mut scratch);
            if diffusing {
                diffuse(&mut g, &coeff, dt, &mut scratch);
            }
        }
        taken = step;
        if sample {
            let t = step as f64 * dt;
            min_density = min_density.min(g.min_density());
            max_mass_defect = max_mass_defect.max((g.mass() - 1.0).abs());
            entropy.push((t, gibbs_entropy(&g)));
            let change: f64 = g
                .rho
                .iter()
                .zip(&last_sample)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                * g.cell_area();
            let rate = change / (t - last_sample_t);
            l1_rate.push(rate);
            last_sample.copy_from_slice(&g.rho);
            last_sample_t = t;
            if rate < config.stationarity_threshold && stationary_at.is_none() {
                stationary_at = Some(t);
                if config.stop_when_stationary {
                    break;
                }
            }
        }
    }
    Ok(EvolutionOutcome {
        grid: g,
        entropy,
        l1_rate,
        stationary: stationary_at.is_some(),
        stationary_at,
        min_density,
        max_mass_defect,
        steps: taken,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase_core::builtin_model;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn model(name: &str, kv: &[(&str, f64)]) -> HamiltonianModel {
        let params: BTreeMap<String, f64> = kv.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        builtin_model(name, &params).unwrap()
    }

    fn square(half: f64, n: usize) -> GridSpec {
        GridSpec {
            x_bounds: (-half, half),
            p_bounds: (-half, half),
            n_x: n,
            n_p: n,
            x_boundary: Boundary::ZeroFlux,
            p_boundary: Boundary::ZeroFlux,
        }
    }

    fn gaussian(x: f64, p: f64, vx: f64, vp: f64) -> InitialDistribution {
        InitialDistribution::gaussian(PhaseState::new_1d(x, p), vec![vx], vec![vp]).unwrap()
    }

    #[test]
    fn build_grid_contract() {
        let g = build_grid(&square(3.0, 128), &gaussian(0.0, 0.0, 0.1, 0.1)).unwrap();
        assert!((g.mass() - 1.0).abs() < 1e-12);
        assert!(g.min_density() >= 0.0);
        assert!(g.regularized.is_none());

        let pt = build_grid(
            &square(3.0, 64),
            &InitialDistribution::point(PhaseState::new_1d(0.5, 0.0)),
        )
        .unwrap();
        let (sx, sp) = pt.regularized.unwrap();
        assert!((sx - 2.0 * pt.dx()).abs() < 1e-15 && (sp - 2.0 * pt.dp()).abs() < 1e-15);

        assert!(matches!(
            build_grid(&square(3.0, 64), &gaussian(10.0, 0.0, 0.1, 0.1)),
            Err(Error::MassOutsideDomain { .. })
        ));
        assert!(build_grid(&square(3.0, 8), &gaussian(0.0, 0.0, 0.1, 0.1)).is_err());
    }

    #[test]
    fn uniform_entropy_is_log_area() {
        let g = DistributionGrid::uniform(&square(3.0, 64)).unwrap();
        assert!((gibbs_entropy(&g) - 36f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn uniform_is_fixed_on_periodic_pendulum() {
        let pend = model("pendulum", &[("m", 1.0), ("gl", 1.0)]);
        let spec = GridSpec {
            x_bounds: (-PI, PI),
            p_bounds: (-3.0, 3.0),
            n_x: 64,
            n_p: 64,
            x_boundary: Boundary::Periodic,
            p_boundary: Boundary::Periodic,
        };
        let g0 = DistributionGrid::uniform(&spec).unwrap();
        let mut g = g0.clone();
        for _ in 0..50 {
            g = liouville_step(&pend, &g, 0.02).unwrap();
        }
        let worst = g.rho.iter().zip(&g0.rho).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-15, "{worst}");
    }

    #[test]
    fn cfl_and_stability_checks() {
        let free = model("free_particle", &[("m", 1.0)]);
        let g = build_grid(&square(3.0, 64), &gaussian(0.0, 0.0, 0.1, 0.1)).unwrap();
        assert!(matches!(
            liouville_step(&free, &g, 1.0),
            Err(Error::CflViolation { .. })
        ));
        assert!(matches!(
            MasterEqConfig::new(&free, &g, 1.0, Gating::AllOn, 0.02, 0.1),
            Err(Error::StabilityViolation { .. })
        ));
        let dt = MasterEqConfig::stable_dt(&free, &g, 1.0, Gating::AllOn, 0.9);
        assert!(MasterEqConfig::new(&free, &g, 1.0, Gating::AllOn, dt, dt).is_ok());
    }

    #[test]
    fn diffusion_coefficients_follow_gating() {
        let inv = model("inverted", &[("m", 1.0), ("lambda", 1.0)]);
        let g = build_grid(&square(4.0, 32), &gaussian(0.0, 0.0, 0.2, 0.2)).unwrap();
        let c = DiffusionCoefficients::new(&inv, &g, 1.0, Gating::UnstableOnly, 1e-10);
        assert!(c.d_x.iter().all(|&d| d == 0.25));
        assert!(c.d_p.iter().all(|&d| d == 0.25));

        let h = model("harmonic", &[("m", 1.0), ("omega", 1.0)]);
        let config = MasterEqConfig::new(&h, &g, 1.0, Gating::UnstableOnly, 0.01, 0.01).unwrap();
        assert_eq!(diffusion_step(&h, &g, 0.01, &config).unwrap(), g);
        let config = MasterEqConfig::new(&inv, &g, 0.0, Gating::UnstableOnly, 0.01, 0.01).unwrap();
        assert_eq!(diffusion_step(&inv, &g, 0.01, &config).unwrap(), g);
    }

    #[test]
    fn binary_layout_round_trips() {
        let g = build_grid(&square(2.0, 16), &gaussian(0.3, -0.2, 0.2, 0.3)).unwrap();
        let mut buf = Vec::new();
        g.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SHFP");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 16);
        assert_eq!(buf.len(), 4 + 12 + 32 + 16 * 16 * 8);
        let back = DistributionGrid::read_binary(&buf[..], Boundary::ZeroFlux, Boundary::ZeroFlux)
            .unwrap();
        assert_eq!(back.rho, g.rho);
        assert_eq!(back.x_bounds, g.x_bounds);

        let mut csv = Vec::new();
        g.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 256);
        let second: Vec<f64> = text.lines().nth(2).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(second[0], g.x_center(0));
        assert_eq!(second[1], g.p_center(1));
        assert_eq!(second[2], g.at(0, 1));
    }

    #[test]
    fn coarsen_preserves_mass() {
        let g = build_grid(&square(3.0, 64), &gaussian(0.2, 0.1, 0.3, 0.2)).unwrap();
        let c = g.coarsen(4).unwrap();
        assert_eq!((c.n_x, c.n_p), (16, 16));
        assert!((c.mass() - 1.0).abs() < 1e-12);
        assert!(g.coarsen(3).is_err());
    }
}
