//! Splitting time integrator for
//!
//! ```text
//!     d/dt u + L u + d/dx_N (u^q) = eps * Lap u
//! ```
//!
//! on the periodic torus. The convection term uses a first-order
//! finite-volume scheme with the Godunov flux; f(u) = u^q is nondecreasing
//! on u >= 0, so the interface flux is simply the value from the upwind
//! (left) cell, and the scheme is monotone under the CFL condition. The
//! whole linear part is integrated exactly in Fourier space with the
//! multiplier exp(-dt (m(k) + eps |k|^2)). Strang symmetrization by
//! default, Lie available for debugging.
//!
//! Conservation is structural: the upwind flux telescopes around the
//! torus, the multiplier fixes the zero mode, and every substep re-pins
//! the mean with a compensated sum, so the discrete mass stays at its
//! initial value to roundoff regardless of the number of steps. Spectral
//! ringing can push isolated cells slightly negative after the multiplier
//! substep; those are clipped at zero and the clipped mass is redistributed
//! proportionally over the positive cells, which keeps both positivity and
//! exact conservation. The clipped fraction per step is tracked and stays
//! below 1e-10 of the total for spectrally resolved data (bump widths of
//! at least eight cells); it is reported so that under-resolved runs are
//! visible rather than silently smoothed.

use std::io::Write;

use crate::operators::grid::kahan_sum;
use crate::operators::{fft, Field, PeriodicGrid};
use crate::spectral_measure::SpectralMeasure;
use crate::symbols::{build_symbol_grid, SymbolSpec, SymbolVariant};
use crate::{Error, Result};

/// Which linear nonlocal operator multiplies the diffusion substep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorVariant {
    /// The full anisotropic operator L.
    Full,
    /// L', acting only on the first N - 1 coordinates.
    Primed,
    /// No nonlocal term: a pure conservation law (plus eps Lap if eps > 0).
    None,
}

/// Operator splitting flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Splitting {
    Lie,
    #[default]
    Strang,
}

/// Full description of one initial-value problem and its run schedule.
///
/// The drift direction is fixed to the last axis. `diag_interval = 0`
/// records diagnostics after every accepted step.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub alpha: f64,
    pub q: f64,
    pub eps: f64,
    pub measure: SpectralMeasure,
    pub variant: OperatorVariant,
    /// Set false to disable the u^q convection term entirely.
    pub convection: bool,
    pub grid: PeriodicGrid,
    pub t_end: f64,
    /// CFL safety factor in (0, 1).
    pub cfl: f64,
    pub splitting: Splitting,
    pub snapshot_times: Vec<f64>,
    pub diag_interval: f64,
}

impl SolverConfig {
    /// Config with defaults: eps = 0, full operator, convection on,
    /// CFL 0.45, Strang splitting, no snapshots, 200 diagnostic samples.
    pub fn new(
        alpha: f64,
        q: f64,
        measure: SpectralMeasure,
        grid: PeriodicGrid,
        t_end: f64,
    ) -> Result<Self> {
        let cfg = Self {
            alpha,
            q,
            eps: 0.0,
            measure,
            variant: OperatorVariant::Full,
            convection: true,
            grid,
            t_end,
            cfl: 0.45,
            splitting: Splitting::Strang,
            snapshot_times: Vec::new(),
            diag_interval: t_end / 200.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::AlphaOutOfRange(self.alpha));
        }
        let nd = self.grid.ndim();
        if self.measure.dim != nd {
            return Err(Error::DimensionMismatch {
                expected: nd,
                got: self.measure.dim,
            });
        }
        let q_floor = 1.0 - 1.0 / nd as f64;
        if !self.q.is_finite() || self.q <= q_floor {
            return Err(Error::InvalidParameter(format!(
                "q = {} must exceed 1 - 1/N = {} for mass conservation",
                self.q, q_floor
            )));
        }
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "viscosity eps = {} must be finite and nonnegative",
                self.eps
            )));
        }
        if !(self.cfl > 0.0 && self.cfl < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "CFL factor {} must lie in (0, 1)",
                self.cfl
            )));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "time horizon {} must be positive and finite",
                self.t_end
            )));
        }
        if !(self.diag_interval >= 0.0) || !self.diag_interval.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "diagnostics interval {} must be finite and nonnegative",
                self.diag_interval
            )));
        }
        for &s in &self.snapshot_times {
            if !s.is_finite() || s < 0.0 || s > self.t_end * (1.0 + 1e-12) {
                return Err(Error::InvalidParameter(format!(
                    "snapshot time {s} outside [0, {}]",
                    self.t_end
                )));
            }
        }
        Ok(())
    }
}

/// Time series of the run diagnostics. One row per stamp; stamps are
/// strictly increasing. Columns match the CSV layout
/// `t,mass,l1,l2,linf,min,energy_frac,energy_visc,oleinik,tail`.
#[derive(Debug, Clone, Default)]
pub struct DiagnosticsSeries {
    pub t: Vec<f64>,
    pub mass: Vec<f64>,
    pub l1: Vec<f64>,
    pub l2: Vec<f64>,
    pub linf: Vec<f64>,
    pub min: Vec<f64>,
    pub energy_frac: Vec<f64>,
    pub energy_visc: Vec<f64>,
    pub oleinik: Vec<f64>,
    pub tail: Vec<f64>,
}

struct DiagRow {
    t: f64,
    mass: f64,
    l1: f64,
    l2: f64,
    linf: f64,
    min: f64,
    energy_frac: f64,
    energy_visc: f64,
    oleinik: f64,
    tail: f64,
}

impl DiagnosticsSeries {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn push_row(&mut self, row: DiagRow) {
        debug_assert!(self.t.last().map_or(true, |&last| row.t > last));
        self.t.push(row.t);
        self.mass.push(row.mass);
        self.l1.push(row.l1);
        self.l2.push(row.l2);
        self.linf.push(row.linf);
        self.min.push(row.min);
        self.energy_frac.push(row.energy_frac);
        self.energy_visc.push(row.energy_visc);
        self.oleinik.push(row.oleinik);
        self.tail.push(row.tail);
    }

    /// Norm column addressed by the Lebesgue exponent: 1, 2, or infinity.
    pub fn norm_column(&self, p: f64) -> Result<&[f64]> {
        if p == 1.0 {
            Ok(&self.l1)
        } else if p == 2.0 {
            Ok(&self.l2)
        } else if p.is_infinite() && p > 0.0 {
            Ok(&self.linf)
        } else {
            Err(Error::InvalidParameter(format!(
                "norm exponent p = {p} not tracked; use 1, 2, or inf"
            )))
        }
    }

    /// CSV emission, 17 significant digits per value.
    pub fn to_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "t,mass,l1,l2,linf,min,energy_frac,energy_visc,oleinik,tail"
        )?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.t[i],
                self.mass[i],
                self.l1[i],
                self.l2[i],
                self.linf[i],
                self.min[i],
                self.energy_frac[i],
                self.energy_visc[i],
                self.oleinik[i],
                self.tail[i],
            )?;
        }
        Ok(())
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub snapshots: Vec<(f64, Field)>,
    pub series: DiagnosticsSeries,
    /// Largest per-step clipped-mass fraction seen in the diffusion substep.
    pub max_clip_frac: f64,
}

/// Smooth compactly supported bump with discrete integral exactly `mass`.
///
/// The profile is the standard mollifier exp(-1/(1 - s^2)) of the scaled
/// periodic distance s = |x - center| / width, sampled on the grid and then
/// normalized so the discrete integral equals `mass` to roundoff. The width
/// must span at least three cells on every axis; widths of eight cells and
/// more keep the trigonometric interpolant of the samples positive, which
/// is what the diffusion substep needs for a vanishing clipped mass.
pub fn initial_bump(grid: &PeriodicGrid, mass: f64, width: f64, center: &[f64]) -> Result<Field> {
    if center.len() != grid.ndim() {
        return Err(Error::DimensionMismatch {
            expected: grid.ndim(),
            got: center.len(),
        });
    }
    if !mass.is_finite() || mass <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "bump mass {mass} must be positive and finite"
        )));
    }
    if !width.is_finite() || width <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "bump width {width} must be positive and finite"
        )));
    }
    for axis in 0..grid.ndim() {
        let dx = grid.spacing(axis);
        if width < 3.0 * dx {
            return Err(Error::UnderResolved {
                w: width,
                min_cells: 3.0,
                cells: width / dx,
            });
        }
        if width > 0.5 * grid.lengths()[axis] {
            return Err(Error::InvalidParameter(format!(
                "bump width {width} exceeds half the domain extent {}",
                grid.lengths()[axis]
            )));
        }
    }
    let lengths = grid.lengths().to_vec();
    let center = center.to_vec();
    let mut field = Field::from_fn(grid.clone(), |x| {
        let mut s2 = 0.0;
        for (a, &xa) in x.iter().enumerate() {
            let l = lengths[a];
            let mut d = (xa - center[a]) % l;
            if d < -0.5 * l {
                d += l;
            } else if d >= 0.5 * l {
                d -= l;
            }
            s2 += (d / width) * (d / width);
        }
        if s2 < 1.0 {
            (-1.0 / (1.0 - s2)).exp()
        } else {
            0.0
        }
    })?;
    let raw = field.mass();
    if !(raw > 0.0) {
        return Err(Error::UnderResolved {
            w: width,
            min_cells: 3.0,
            cells: 0.0,
        });
    }
    let scale = mass / raw;
    for v in &mut field.data {
        *v *= scale;
    }
    Ok(field)
}

fn powq(v: f64, q: f64) -> f64 {
    if q == 1.0 {
        v
    } else if q == 2.0 {
        v * v
    } else if q == 3.0 {
        v * v * v
    } else {
        v.powf(q)
    }
}

/// Largest secant slope |f(u_i) - f(u_j)| / |u_i - u_j| over adjacent cell
/// pairs along the last axis, wrap pair included, with the 0/0 -> 0
/// convention. Values are clamped at zero before evaluating the flux.
fn max_secant_slope(data: &[f64], n_last: usize, q: f64) -> f64 {
    let mut smax = 0.0f64;
    for line in data.chunks(n_last) {
        let mut prev_u = line[n_last - 1].max(0.0);
        let mut prev_f = powq(prev_u, q);
        for &raw in line.iter() {
            let u = raw.max(0.0);
            let f = powq(u, q);
            let du = u - prev_u;
            if du != 0.0 {
                let s = ((f - prev_f) / du).abs();
                if s > smax {
                    smax = s;
                }
            }
            prev_u = u;
            prev_f = f;
        }
    }
    smax
}

/// One-sided difference statistic behind the Oleinik estimate, computed
/// without the wrap pair so a monotone profile keeps its sign:
/// for q > 1 the largest forward difference of u^(q-1) along the last axis
/// divided by the spacing, for q < 1 the negated smallest forward
/// difference of u^(1-q). The caller compares against 1/(qt) or the
/// sup-norm weighted bound.
fn oleinik_raw(data: &[f64], n_last: usize, dx: f64, q: f64) -> f64 {
    if q == 1.0 || n_last < 2 {
        return 0.0;
    }
    let expo = (q - 1.0).abs();
    let sign = if q > 1.0 { 1.0 } else { -1.0 };
    let mut best = f64::NEG_INFINITY;
    for line in data.chunks(n_last) {
        let mut prev = line[0].max(0.0).powf(expo);
        for &raw in &line[1..] {
            let g = raw.max(0.0).powf(expo);
            let d = sign * (g - prev) / dx;
            if d > best {
                best = d;
            }
            prev = g;
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

/// Public form of the statistic; `t` is validated (the estimate only makes
/// sense for positive times) but the returned value depends on `u` alone.
pub fn oleinik_statistic(u: &Field, q: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "Oleinik statistic needs t > 0, got {t}"
        )));
    }
    if !q.is_finite() || q <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "Oleinik statistic needs q > 0, got {q}"
        )));
    }
    let nd = u.grid.ndim();
    let n_last = u.grid.dims()[nd - 1];
    let dx = u.grid.spacing(nd - 1);
    Ok(oleinik_raw(&u.data, n_last, dx, q))
}

/// Adaptive time step: cfl * dx_N / s_max with s_max the largest adjacent
/// secant slope of the flux. For q > 1 this is at most q (max u)^(q-1);
/// for q < 1 the secant form sidesteps the infinite derivative at u = 0.
/// A field with no slope at all (all zero, or constant) falls back to
/// t_end / 1000.
pub fn cfl_dt(u: &Field, cfg: &SolverConfig) -> Result<f64> {
    cfg.validate()?;
    check_same_grid(&u.grid, &cfg.grid)?;
    let nd = cfg.grid.ndim();
    let n_last = cfg.grid.dims()[nd - 1];
    let smax = max_secant_slope(&u.data, n_last, cfg.q);
    if !smax.is_finite() {
        return Err(Error::NonFinite("convective flux slope"));
    }
    let fallback = cfg.t_end / 1000.0;
    if smax <= 0.0 {
        return Ok(fallback);
    }
    let dt = cfg.cfl * cfg.grid.spacing(nd - 1) / smax;
    if dt.is_finite() {
        Ok(dt)
    } else {
        Ok(fallback)
    }
}

fn check_same_grid(a: &PeriodicGrid, b: &PeriodicGrid) -> Result<()> {
    if a.dims() != b.dims() || a.lengths() != b.lengths() {
        return Err(Error::InvalidGrid(format!(
            "field grid {:?}/{:?} does not match config grid {:?}/{:?}",
            a.dims(),
            a.lengths(),
            b.dims(),
            b.lengths()
        )));
    }
    Ok(())
}

/// Precomputed machinery for stepping one configuration.
#[derive(Clone)]
struct Stepper {
    q: f64,
    eps: f64,
    convection: bool,
    splitting: Splitting,
    grid: PeriodicGrid,
    n_last: usize,
    dx_last: f64,
    total: usize,
    /// exp argument per mode: m(k) + eps |k|^2.
    decay: Vec<f64>,
    /// m(k) alone, for the energy diagnostic.
    sym: Vec<f64>,
    /// |k|^2 per mode; empty when eps = 0.
    ksq: Vec<f64>,
    linear_active: bool,
    mean0: f64,
    max_clip_frac: f64,
    flux: Vec<f64>,
}

impl Stepper {
    fn build(cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid.clone();
        let total = grid.len();
        let nd = grid.ndim();
        let sym: Vec<f64> = match cfg.variant {
            OperatorVariant::None => vec![0.0; total],
            OperatorVariant::Full | OperatorVariant::Primed => {
                let variant = if cfg.variant == OperatorVariant::Full {
                    SymbolVariant::Full
                } else {
                    SymbolVariant::Primed
                };
                let spec = SymbolSpec::new(cfg.measure.clone(), cfg.alpha, variant)?;
                build_symbol_grid(&spec, &grid)?.values.clone()
            }
        };
        let ksq: Vec<f64> = if cfg.eps > 0.0 {
            let dims = grid.dims().to_vec();
            (0..total)
                .map(|flat| {
                    let mut rest = flat;
                    let mut s = 0.0;
                    for axis in (0..nd).rev() {
                        let i = rest % dims[axis];
                        rest /= dims[axis];
                        let f = grid.freq(axis, i);
                        s += f * f;
                    }
                    s
                })
                .collect()
        } else {
            Vec::new()
        };
        let decay: Vec<f64> = if cfg.eps > 0.0 {
            sym.iter()
                .zip(&ksq)
                .map(|(m, k2)| m + cfg.eps * k2)
                .collect()
        } else {
            sym.clone()
        };
        let linear_active = decay.iter().any(|&d| d > 0.0);
        let n_last = grid.dims()[nd - 1];
        let dx_last = grid.spacing(nd - 1);
        Ok(Self {
            q: cfg.q,
            eps: cfg.eps,
            convection: cfg.convection,
            splitting: cfg.splitting,
            grid,
            n_last,
            dx_last,
            total,
            decay,
            sym,
            ksq,
            linear_active,
            mean0: 0.0,
            max_clip_frac: 0.0,
            flux: vec![0.0; n_last],
        })
    }

    fn set_reference_mean(&mut self, data: &[f64]) {
        self.mean0 = kahan_sum(data.iter().copied()) / self.total as f64;
    }

    fn pin_mean(&self, data: &mut [f64]) {
        let mean = kahan_sum(data.iter().copied()) / self.total as f64;
        let delta = self.mean0 - mean;
        if delta != 0.0 {
            for v in data.iter_mut() {
                *v += delta;
            }
        }
    }

    fn convect(&mut self, data: &mut [f64], dt: f64) {
        let c = dt / self.dx_last;
        let n = self.n_last;
        let q = self.q;
        for line in data.chunks_mut(n) {
            for (f, &v) in self.flux.iter_mut().zip(line.iter()) {
                *f = powq(v.max(0.0), q);
            }
            let mut prev = self.flux[n - 1];
            for (v, &f) in line.iter_mut().zip(self.flux.iter()) {
                *v -= c * (f - prev);
                prev = f;
            }
        }
        self.pin_mean(data);
    }

    fn diffuse(&mut self, field: &mut Field, dt: f64) {
        if !self.linear_active {
            return;
        }
        let mut hat = fft::forward(field);
        for (h, d) in hat.iter_mut().zip(&self.decay) {
            let g = (-dt * d).exp();
            h.re *= g;
            h.im *= g;
        }
        field.data = fft::inverse_real(hat, self.grid.dims());
        self.pin_mean(&mut field.data);
        self.clip(&mut field.data);
    }

    /// Clip negative cells at zero and scale the positive cells so the sum
    /// is unchanged. Tracks the clipped fraction of the total.
    fn clip(&mut self, data: &mut [f64]) {
        let mut neg = 0.0;
        for &v in data.iter() {
            if v < 0.0 {
                neg += v;
            }
        }
        if neg == 0.0 {
            return;
        }
        let pos = kahan_sum(data.iter().map(|v| v.max(0.0)));
        let target = pos + neg;
        let frac = -neg / target.abs().max(f64::MIN_POSITIVE);
        if frac > self.max_clip_frac {
            self.max_clip_frac = frac;
        }
        if pos > 0.0 && target > 0.0 {
            let s = target / pos;
            for v in data.iter_mut() {
                *v = if *v > 0.0 { *v * s } else { 0.0 };
            }
        } else {
            for v in data.iter_mut() {
                *v = 0.0;
            }
        }
    }

    fn step_inner(&mut self, field: &mut Field, dt: f64) {
        if !self.convection {
            self.diffuse(field, dt);
            return;
        }
        match self.splitting {
            Splitting::Lie => {
                self.convect(&mut field.data, dt);
                self.diffuse(field, dt);
            }
            Splitting::Strang => {
                self.convect(&mut field.data, 0.5 * dt);
                self.diffuse(field, dt);
                self.convect(&mut field.data, 0.5 * dt);
            }
        }
    }

    fn diag_row(&self, field: &Field, t: f64, tail_mask: &[bool]) -> DiagRow {
        let cellvol = self.grid.cell_volume();
        let (energy_frac, energy_visc) = if self.linear_active {
            let hat = fft::forward(field);
            let scale = cellvol / self.total as f64;
            let e_frac = kahan_sum(
                hat.iter()
                    .zip(&self.sym)
                    .map(|(h, m)| m * (h.re * h.re + h.im * h.im)),
            ) * scale;
            let e_visc = if self.eps > 0.0 {
                self.eps
                    * kahan_sum(
                        hat.iter()
                            .zip(&self.ksq)
                            .map(|(h, k2)| k2 * (h.re * h.re + h.im * h.im)),
                    )
                    * scale
            } else {
                0.0
            };
            (e_frac, e_visc)
        } else {
            (0.0, 0.0)
        };
        let tail = kahan_sum(
            field
                .data
                .iter()
                .zip(tail_mask.iter())
                .filter_map(|(&v, &m)| if m { Some(v) } else { None }),
        ) * cellvol;
        DiagRow {
            t,
            mass: field.mass(),
            l1: field.l1_norm(),
            l2: field.l2_norm(),
            linf: field.linf_norm(),
            min: field.min(),
            energy_frac,
            energy_visc,
            oleinik: oleinik_raw(&field.data, self.n_last, self.dx_last, self.q),
            tail,
        }
    }
}

/// Nodes beyond |x| > min_extent / 4, for the tail-mass diagnostic.
fn tail_mask(grid: &PeriodicGrid) -> Vec<bool> {
    let radius = grid
        .lengths()
        .iter()
        .fold(f64::INFINITY, |acc, &l| acc.min(l))
        / 4.0;
    let r2 = radius * radius;
    (0..grid.len())
        .map(|flat| {
            let x = grid.node_coords(flat);
            x.iter().map(|v| v * v).sum::<f64>() > r2
        })
        .collect()
}

fn check_admissible(u: &Field, cfg: &SolverConfig, what: &str) -> Result<()> {
    check_same_grid(&u.grid, &cfg.grid)?;
    if u.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("solver input field"));
    }
    if cfg.convection {
        let floor = -1e-3 * u.linf_norm().max(f64::MIN_POSITIVE);
        if u.min() < floor {
            return Err(Error::InvalidParameter(format!(
                "{what} must be nonnegative for the convection scheme (min = {:.3e})",
                u.min()
            )));
        }
    }
    Ok(())
}

/// Strip the sub-roundoff-scale negative cells that band-limited resampling
/// leaves behind on otherwise nonnegative data.
fn clip_intake(u: &mut Field) {
    for v in &mut u.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// One explicit splitting step. Errors on a dt above the CFL limit (when
/// convection is on) and on negative input; see `run` for the loop that
/// manages both automatically.
pub fn step(u: &Field, cfg: &SolverConfig, dt: f64) -> Result<Field> {
    cfg.validate()?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "step size {dt} must be positive and finite"
        )));
    }
    if cfg.convection {
        let strict = -1e-13 * u.linf_norm().max(1.0);
        if u.min() < strict {
            return Err(Error::InvalidParameter(format!(
                "negative input: min u = {:.3e}",
                u.min()
            )));
        }
        let limit = cfl_dt(u, cfg)?;
        if dt > limit * (1.0 + 1e-9) {
            return Err(Error::CflViolation { dt, limit });
        }
    }
    check_admissible(u, cfg, "step input")?;
    let mut stepper = Stepper::build(cfg)?;
    stepper.set_reference_mean(&u.data);
    let mut out = u.clone();
    stepper.step_inner(&mut out, dt);
    Ok(out)
}

/// Integrate the problem to `cfg.t_end` with the adaptive CFL step,
/// recording diagnostics on the configured cadence and snapshots at the
/// configured times. Aborts with a diagnostic dump if the sup norm stops
/// being finite (flux overflow) or grows beyond twice its initial value,
/// which the equation forbids and therefore signals a scheme bug or an
/// unstable configuration.
pub fn run(cfg: &SolverConfig, u0: &Field) -> Result<RunOutput> {
    cfg.validate()?;
    check_admissible(u0, cfg, "initial data")?;
    let mut u = u0.clone();
    if cfg.convection {
        clip_intake(&mut u);
    }
    let mut stepper = Stepper::build(cfg)?;
    stepper.set_reference_mean(&u.data);
    let mask = tail_mask(&cfg.grid);
    let linf0 = u.linf_norm();
    let t_end = cfg.t_end;
    let tol = 1e-12 * t_end;

    let mut snaps: Vec<f64> = cfg
        .snapshot_times
        .iter()
        .copied()
        .filter(|&s| s > tol)
        .collect();
    snaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    snaps.dedup_by(|b, a| (*b - *a).abs() <= tol);
    let mut snapshots: Vec<(f64, Field)> = Vec::new();
    if cfg.snapshot_times.iter().any(|&s| s <= tol) {
        snapshots.push((0.0, u.clone()));
    }

    let mut series = DiagnosticsSeries::default();
    series.push_row(stepper.diag_row(&u, 0.0, &mask));

    let d = cfg.diag_interval;
    let mut next_diag = if d > 0.0 { d } else { f64::INFINITY };
    let mut snap_idx = 0usize;
    let mut t = 0.0f64;

    while t < t_end - tol {
        let mut target = t_end;
        if snap_idx < snaps.len() {
            target = target.min(snaps[snap_idx]);
        }
        target = target.min(next_diag);
        let gap = target - t;
        let dt_cfl = if cfg.convection {
            let s = max_secant_slope(&u.data, stepper.n_last, cfg.q);
            if !s.is_finite() {
                return Err(Error::NonFinite("convective flux slope"));
            }
            if s > 0.0 {
                cfg.cfl * stepper.dx_last / s
            } else {
                t_end / 1000.0
            }
        } else {
            f64::INFINITY
        };
        let dt = dt_cfl.min(gap);
        stepper.step_inner(&mut u, dt);
        let hit = dt >= gap;
        t = if hit { target } else { t + dt };

        let mut record_now = d == 0.0;
        if hit {
            while snap_idx < snaps.len() && snaps[snap_idx] <= t + tol {
                snapshots.push((snaps[snap_idx], u.clone()));
                snap_idx += 1;
            }
            if next_diag <= t + tol {
                record_now = true;
                while next_diag <= t + tol {
                    next_diag += d;
                }
            }
            if (t - t_end).abs() <= tol {
                record_now = true;
            }
        }
        if record_now && series.t.last().map_or(true, |&last| t > last + tol) {
            series.push_row(stepper.diag_row(&u, t, &mask));
            // The norm folds skip NaN cells, so probe the field itself.
            let broke = !u.data.iter().all(|v| v.is_finite());
            let linf = *series.linf.last().unwrap();
            if broke || linf > 2.0 * linf0 {
                return Err(Error::BlowUp {
                    t,
                    linf: if broke { f64::NAN } else { linf },
                    linf0,
                    series: Box::new(series),
                });
            }
        }
    }
    if series.t.last().map_or(true, |&last| last < t_end - tol) {
        series.push_row(stepper.diag_row(&u, t_end, &mask));
    }
    log::debug!(
        "run finished: {} steps worth of diagnostics, max clipped fraction {:.3e}",
        series.len(),
        stepper.max_clip_frac
    );
    Ok(RunOutput {
        snapshots,
        series,
        max_clip_frac: stepper.max_clip_frac,
    })
}

/// Run two initial data on the shared step sequence (the pointwise minimum
/// of the two CFL limits) and return the L1 distance at each diagnostic
/// stamp. The L1 contraction of the scheme makes the series nonincreasing
/// up to roundoff.
pub fn contraction_check(
    cfg: &SolverConfig,
    u0: &Field,
    v0: &Field,
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    check_admissible(u0, cfg, "first initial data")?;
    check_admissible(v0, cfg, "second initial data")?;
    let mut u = u0.clone();
    let mut v = v0.clone();
    if cfg.convection {
        clip_intake(&mut u);
        clip_intake(&mut v);
    }
    let mut su = Stepper::build(cfg)?;
    let mut sv = su.clone();
    su.set_reference_mean(&u.data);
    sv.set_reference_mean(&v.data);
    let cellvol = cfg.grid.cell_volume();
    let dist =
        |u: &Field, v: &Field| kahan_sum(u.data.iter().zip(&v.data).map(|(a, b)| (a - b).abs()))
            * cellvol;

    let t_end = cfg.t_end;
    let tol = 1e-12 * t_end;
    let d = cfg.diag_interval;
    let mut next_diag = if d > 0.0 { d } else { f64::INFINITY };
    let mut times = vec![0.0];
    let mut dists = vec![dist(&u, &v)];
    let mut t = 0.0f64;
    while t < t_end - tol {
        let target = t_end.min(next_diag);
        let gap = target - t;
        let mut dt_cfl = f64::INFINITY;
        if cfg.convection {
            for fld in [&u, &v] {
                let s = max_secant_slope(&fld.data, su.n_last, cfg.q);
                if !s.is_finite() {
                    return Err(Error::NonFinite("convective flux slope"));
                }
                if s > 0.0 {
                    dt_cfl = dt_cfl.min(cfg.cfl * su.dx_last / s);
                }
            }
            if !dt_cfl.is_finite() {
                dt_cfl = t_end / 1000.0;
            }
        }
        let dt = dt_cfl.min(gap);
        su.step_inner(&mut u, dt);
        sv.step_inner(&mut v, dt);
        let hit = dt >= gap;
        t = if hit { target } else { t + dt };
        let mut record_now = d == 0.0;
        if hit && next_diag <= t + tol {
            record_now = true;
            while next_diag <= t + tol {
                next_diag += d;
            }
        }
        if hit && (t - t_end).abs() <= tol {
            record_now = true;
        }
        if record_now && times.last().map_or(true, |&last| t > last + tol) {
            times.push(t);
            dists.push(dist(&u, &v));
        }
    }
    if times.last().map_or(true, |&last| last < t_end - tol) {
        times.push(t_end);
        dists.push(dist(&u, &v));
    }
    Ok((times, dists))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbols::evaluate_symbol;

    fn grid1(n: usize, l: f64) -> PeriodicGrid {
        PeriodicGrid::new(vec![n], vec![l]).unwrap()
    }

    fn iso_cfg(n: usize, l: f64, alpha: f64, q: f64, t_end: f64) -> SolverConfig {
        let measure = SpectralMeasure::isotropic(1, 1.0).unwrap();
        SolverConfig::new(alpha, q, measure, grid1(n, l), t_end).unwrap()
    }

    #[test]
    fn bump_mass_is_exact_and_additive() {
        let grid = grid1(256, 40.0);
        let b = initial_bump(&grid, 1.0, 3.0, &[0.0]).unwrap();
        assert!((b.mass() - 1.0).abs() < 1e-13);
        assert!(b.min() >= 0.0);
        let b1 = initial_bump(&grid, 0.5, 3.0, &[-8.0]).unwrap();
        let b2 = initial_bump(&grid, 0.5, 3.0, &[8.0]).unwrap();
        let total = kahan_sum(b1.data.iter().zip(&b2.data).map(|(a, b)| a + b))
            * grid.cell_volume();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bump_width_gate() {
        let grid = grid1(256, 40.0);
        let dx = grid.spacing(0);
        match initial_bump(&grid, 1.0, 2.9 * dx, &[0.0]) {
            Err(Error::UnderResolved { .. }) => {}
            other => panic!("expected UnderResolved, got {other:?}"),
        }
        assert!(initial_bump(&grid, 1.0, 30.0, &[0.0]).is_err());
    }

    #[test]
    fn pure_diffusion_scales_cosine_mode_exactly() {
        let n = 64;
        let l = 16.0;
        let mut cfg = iso_cfg(n, l, 1.4, 2.0, 1.0);
        cfg.convection = false;
        let k = 2.0 * std::f64::consts::PI * 3.0 / l;
        let u0 = Field::from_fn(grid1(n, l), |x| 1.0 + 0.5 * (k * x[0]).cos()).unwrap();
        let dt = 0.3;
        let out = step(&u0, &cfg, dt).unwrap();
        let spec = SymbolSpec::new(cfg.measure.clone(), cfg.alpha, SymbolVariant::Full).unwrap();
        let m = evaluate_symbol(&spec, &[k]).unwrap();
        let damp = (-dt * m).exp();
        for (i, &v) in out.data.iter().enumerate() {
            let x = out.grid.coord(0, i);
            let expected = 1.0 + 0.5 * damp * (k * x).cos();
            assert!(
                (v - expected).abs() < 1e-12,
                "node {i}: {v} vs {expected}"
            );
        }
    }

    #[test]
    fn constant_field_is_steady() {
        let cfg = iso_cfg(128, 20.0, 1.5, 2.0, 1.0);
        let u0 = Field::from_fn(grid1(128, 20.0), |_| 0.7).unwrap();
        let dt = cfl_dt(&u0, &cfg).unwrap();
        assert!((dt - cfg.t_end / 1000.0).abs() < 1e-15, "fallback dt");
        let out = step(&u0, &cfg, dt).unwrap();
        for &v in &out.data {
            assert!((v - 0.7).abs() < 1e-14);
        }
    }

    #[test]
    fn riemann_shock_travels_at_unit_speed() {
        let n = 1024;
        let l = 100.0;
        let grid = grid1(n, l);
        let dx = grid.spacing(0);
        let mut cfg = iso_cfg(n, l, 1.5, 2.0, 50.0);
        cfg.variant = OperatorVariant::None;
        let mut u = Field::from_fn(grid.clone(), |x| {
            if x[0] >= -30.0 && x[0] < 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let half_height = |f: &Field| -> f64 {
            // rightmost downward crossing of 1/2
            let mut pos = f64::NAN;
            for j in 0..n - 1 {
                if f.data[j] >= 0.5 && f.data[j + 1] < 0.5 {
                    let frac = (f.data[j] - 0.5) / (f.data[j] - f.data[j + 1]);
                    pos = f.grid.coord(0, j) + frac * dx;
                }
            }
            pos
        };
        let start = half_height(&u);
        let mut elapsed = 0.0;
        for _ in 0..100 {
            let dt = cfl_dt(&u, &cfg).unwrap();
            u = step(&u, &cfg, dt).unwrap();
            elapsed += dt;
        }
        let moved = half_height(&u) - start;
        // Rankine-Hugoniot speed (f(1) - f(0)) / 1 = 1
        assert!(
            (moved - elapsed).abs() < 2.0 * dx,
            "front moved {moved} in time {elapsed}"
        );
    }

    #[test]
    fn cfl_examples() {
        let n = 100;
        let grid = grid1(n, 1.0);
        let dx = grid.spacing(0);
        let cfg = iso_cfg(n, 1.0, 1.5, 2.0, 10.0);
        let u = Field::from_fn(grid.clone(), |x| (x[0] * 6.0).cos().abs()).unwrap();
        let dt = cfl_dt(&u, &cfg).unwrap();
        let smax = max_secant_slope(&u.data, n, 2.0);
        assert!(smax <= 2.0 + 1e-12);
        assert!((dt - 0.45 * dx / smax).abs() < 1e-15);

        let zero = Field::zeros(grid.clone());
        assert!((cfl_dt(&zero, &cfg).unwrap() - 0.01).abs() < 1e-15);

        let mut cfg_sub = iso_cfg(n, 1.0, 1.5, 0.5, 10.0);
        cfg_sub.q = 0.5;
        let two_level = Field::from_fn(grid, |x| if x[0] > 0.0 { 1.0 } else { 0.0 }).unwrap();
        let dt_sub = cfl_dt(&two_level, &cfg_sub).unwrap();
        assert!(
            (dt_sub - 0.45 * dx).abs() < 1e-15,
            "secant between 0 and 1 is exactly 1"
        );
    }

    #[test]
    fn run_keeps_mass_max_principle_and_positivity() {
        let n = 512;
        let l = 60.0;
        let mut cfg = iso_cfg(n, l, 1.5, 3.0, 3.0);
        cfg.snapshot_times = vec![1.5];
        cfg.diag_interval = 0.1;
        let dx = l / n as f64;
        let u0 = initial_bump(&cfg.grid, 1.0, 10.0 * dx, &[0.0]).unwrap();
        let out = run(&cfg, &u0).unwrap();
        let s = &out.series;
        let m0 = s.mass[0];
        for (i, &m) in s.mass.iter().enumerate() {
            assert!(
                ((m - m0) / m0).abs() < 1e-12,
                "mass drift at stamp {i}: {m} vs {m0}"
            );
        }
        let max0 = s.linf[0];
        for &lf in &s.linf {
            assert!(lf <= max0 * (1.0 + 1e-12), "max principle violated");
        }
        for &mn in &s.min {
            assert!(mn >= -1e-13, "negative undershoot {mn}");
        }
        for w in s.t.windows(2) {
            assert!(w[1] > w[0], "stamps must increase");
        }
        assert!(out.max_clip_frac < 1e-10, "clip {:.3e}", out.max_clip_frac);
        assert_eq!(out.snapshots.len(), 1);
        assert!((out.snapshots[0].0 - 1.5).abs() < 1e-9);
        for &e in &s.energy_frac {
            assert!(e >= 0.0);
        }
    }

    #[test]
    fn viscous_energy_balance_audit() {
        let n = 256;
        let l = 30.0;
        let mut cfg = iso_cfg(n, l, 1.5, 2.0, 0.2);
        cfg.variant = OperatorVariant::None;
        cfg.convection = false;
        cfg.eps = 0.5;
        cfg.diag_interval = 0.01;
        let u0 = initial_bump(&cfg.grid, 1.0, 3.0, &[0.0]).unwrap();
        let out = run(&cfg, &u0).unwrap();
        let s = &out.series;
        let vol = cfg.grid.cell_volume();
        let _ = vol;
        for i in 1..s.len() {
            let dtv = s.t[i] - s.t[i - 1];
            let e1 = 0.5 * s.l2[i - 1] * s.l2[i - 1];
            let e2 = 0.5 * s.l2[i] * s.l2[i];
            let lhs = (e2 - e1) / dtv;
            let rhs = -0.5 * (s.energy_visc[i] + s.energy_visc[i - 1]);
            assert!(
                (lhs - rhs).abs() <= 0.01 * rhs.abs(),
                "energy audit at t = {}: {lhs} vs {rhs}",
                s.t[i]
            );
        }
    }

    #[test]
    fn contraction_and_comparison() {
        let n = 256;
        let l = 40.0;
        let mut cfg = iso_cfg(n, l, 1.5, 2.0, 2.0);
        cfg.diag_interval = 0.1;
        let u0 = initial_bump(&cfg.grid, 1.0, 3.0, &[0.0]).unwrap();
        let extra = initial_bump(&cfg.grid, 0.3, 3.0, &[6.0]).unwrap();
        let mut v0 = u0.clone();
        for (v, e) in v0.data.iter_mut().zip(&extra.data) {
            *v += e;
        }
        let (times, dists) = contraction_check(&cfg, &u0, &v0).unwrap();
        assert_eq!(times.len(), dists.len());
        let d0 = dists[0];
        for w in dists.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-10), "distance grew: {w:?}");
        }
        assert!((d0 - 0.3).abs() < 1e-10, "initial distance is the extra mass");

        // identical data stay identical
        let (_, same) = contraction_check(&cfg, &u0, &u0).unwrap();
        assert!(same.iter().all(|&d| d == 0.0));

        // ordered data stay ordered
        let ru = run(&cfg, &u0).unwrap();
        let rv = run(&cfg, &v0).unwrap();
        let fu = &ru.series;
        let fv = &rv.series;
        assert!(fu.linf.last().unwrap() <= fv.linf.last().unwrap());
    }

    #[test]
    fn oleinik_statistic_signs() {
        let n = 64;
        let grid = grid1(n, 10.0);
        let dx = grid.spacing(0);
        // strictly decreasing interior profile
        let dec = Field::from_fn(grid.clone(), |x| 1.0 / (1.0 + (x[0] + 5.0).max(0.0))).unwrap();
        let s = oleinik_statistic(&dec, 1.5, 1.0).unwrap();
        assert!(s <= 0.0, "monotone nonincreasing gives {s}");

        let cst = Field::from_fn(grid.clone(), |_| 0.4).unwrap();
        assert_eq!(oleinik_statistic(&cst, 1.5, 2.0).unwrap(), 0.0);

        // q < 1 branch: u^{1-q} with a downward forward step of height 1 at
        // one interface gives statistic 1/dx
        let stepf = Field::from_fn(grid.clone(), |x| if x[0] < 0.0 { 1.0 } else { 0.0 }).unwrap();
        let s_sub = oleinik_statistic(&stepf, 0.5, 1.0).unwrap();
        assert!((s_sub - 1.0 / dx).abs() < 1e-12);

        assert!(oleinik_statistic(&cst, 1.5, 0.0).is_err());
    }

    #[test]
    fn aggressive_cfl_is_range_bounded() {
        // Each updated cell lands between its own old value and its left
        // neighbor whenever dt * secant <= dx for that pair, and the
        // adaptive step enforces that for every pair via the global max
        // secant. So even cfl = 0.9 on a raw jump (where the secant
        // underestimates f' by a factor q) cannot push values outside the
        // initial range; accuracy degrades, amplitude does not.
        let n = 256;
        let l = 20.0;
        let mut cfg = iso_cfg(n, l, 1.5, 3.0, 5.0);
        cfg.variant = OperatorVariant::None;
        cfg.cfl = 0.9;
        cfg.diag_interval = 0.05;
        let u0 = Field::from_fn(grid1(n, l), |x| {
            if x[0].abs() < 5.0 {
                2.0
            } else {
                0.0
            }
        })
        .unwrap();
        let out = run(&cfg, &u0).unwrap();
        let s = &out.series;
        assert!(s.linf.iter().all(|&v| v <= 2.0 * (1.0 + 1e-12)));
        assert!(s.min.iter().all(|&v| v >= -1e-13));
    }

    #[test]
    fn flux_overflow_aborts_with_blow_up() {
        // A constant field has zero secants everywhere (0/0 -> 0), so the
        // fallback step runs; cubing 3e103 overflows, the flux differences
        // turn into NaN, and the breakdown detector must abort instead of
        // propagating NaN to the caller as a normal result.
        let n = 64;
        let l = 10.0;
        let mut cfg = iso_cfg(n, l, 1.5, 3.0, 1.0);
        cfg.variant = OperatorVariant::None;
        cfg.diag_interval = 0.0;
        let u0 = Field::from_fn(grid1(n, l), |_| 3e103).unwrap();
        match run(&cfg, &u0) {
            Err(Error::BlowUp { linf, series, .. }) => {
                assert!(!linf.is_finite());
                assert!(!series.is_empty());
            }
            other => panic!("expected blow-up abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn overflowing_jump_errors_instead_of_stalling() {
        // A jump of the same magnitude gives an infinite secant; the step
        // control must refuse it rather than collapse dt to zero.
        let n = 64;
        let l = 10.0;
        let mut cfg = iso_cfg(n, l, 1.5, 3.0, 1.0);
        cfg.variant = OperatorVariant::None;
        let u0 = Field::from_fn(grid1(n, l), |x| if x[0] < 0.0 { 2e103 } else { 0.0 }).unwrap();
        match cfl_dt(&u0, &cfg) {
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected non-finite slope error, got {other:?}"),
        }
        assert!(matches!(run(&cfg, &u0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn step_validates_inputs() {
        let cfg = iso_cfg(64, 10.0, 1.5, 2.0, 1.0);
        let u0 = initial_bump(&cfg.grid, 1.0, 1.0, &[0.0]).unwrap();
        let limit = cfl_dt(&u0, &cfg).unwrap();
        match step(&u0, &cfg, 10.0 * limit) {
            Err(Error::CflViolation { .. }) => {}
            other => panic!("expected CFL violation, got {other:?}"),
        }
        let mut neg = u0.clone();
        neg.data[3] = -0.2;
        assert!(step(&neg, &cfg, 0.5 * limit).is_err());
    }

    #[test]
    fn diagnostics_csv_layout() {
        let mut cfg = iso_cfg(64, 10.0, 1.5, 2.0, 0.5);
        cfg.diag_interval = 0.1;
        let u0 = initial_bump(&cfg.grid, 1.0, 1.0, &[0.0]).unwrap();
        let out = run(&cfg, &u0).unwrap();
        let mut buf = Vec::new();
        out.series.to_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,mass,l1,l2,linf,min,energy_frac,energy_visc,oleinik,tail"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), out.series.len());
        assert!(rows.iter().all(|r| r.split(',').count() == 10));
        assert!(rows[0].split(',').all(|f| f.parse::<f64>().is_ok()));
    }

    #[test]
    fn two_dimensional_run_smoke() {
        let grid = PeriodicGrid::new(vec![32, 32], vec![20.0, 20.0]).unwrap();
        let measure = SpectralMeasure::isotropic(2, 1.0).unwrap();
        let mut cfg = SolverConfig::new(1.5, 1.5, measure, grid.clone(), 0.5).unwrap();
        cfg.diag_interval = 0.05;
        let u0 = initial_bump(&grid, 1.0, 4.0, &[0.0, 0.0]).unwrap();
        let out = run(&cfg, &u0).unwrap();
        let s = &out.series;
        let m0 = s.mass[0];
        for &m in &s.mass {
            assert!(((m - m0) / m0).abs() < 1e-12);
        }
        assert!(s.linf.iter().all(|&v| v <= s.linf[0] * (1.0 + 1e-12)));
        assert!(s.min.iter().all(|&v| v >= -1e-13));
    }

    #[test]
    fn primed_variant_and_validation() {
        let grid = PeriodicGrid::new(vec![16, 16], vec![10.0, 10.0]).unwrap();
        let measure = SpectralMeasure::isotropic(2, 1.0).unwrap();
        let mut cfg = SolverConfig::new(1.5, 1.5, measure.clone(), grid.clone(), 0.2).unwrap();
        cfg.variant = OperatorVariant::Primed;
        let u0 = initial_bump(&grid, 1.0, 3.0, &[0.0, 0.0]).unwrap();
        assert!(run(&cfg, &u0).is_ok());

        // q at the conservation threshold is rejected
        let bad = SolverConfig::new(1.5, 0.5, measure.clone(), grid.clone(), 1.0);
        assert!(bad.is_err());
        let mut cfg2 = SolverConfig::new(1.5, 1.5, measure, grid, 1.0).unwrap();
        cfg2.cfl = 1.0;
        assert!(cfg2.validate().is_err());
    }
}
