//! Large-time machinery: regime classification with the scaling exponents,
//! rescaled initial data, family-convergence distances, decay-rate fitting,
//! self-similar profile extraction, and the interpolation bound.
//!
//! The scaling group behind everything here is
//!
//! ```text
//!     u_lambda(t, x', x_N) = lambda^gamma u(lambda t, lambda^{1/alpha} x', lambda^beta x_N)
//! ```
//!
//! with (beta, gamma) picked so the rescaled function solves an equation of
//! the same shape and keeps its mass. Which pair is right depends on whether
//! the convection power q sits above or below the critical exponent
//! q* = 1 + (alpha-1)/N, and the whole point of the laboratory is to observe
//! the corresponding decay rates and limit profiles on actual runs.

use rayon::prelude::*;
use std::io::Write;

use crate::operators::grid::kahan_sum;
use crate::operators::{Field, PeriodicGrid, QuadratureProbe};
use crate::solver::{initial_bump, run, DiagnosticsSeries, SolverConfig};
use crate::{Error, Result};

/// Which large-time mechanism dominates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Diffusion,
    Critical,
    Convection,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Diffusion => write!(f, "Diffusion"),
            Regime::Critical => write!(f, "Critical"),
            Regime::Convection => write!(f, "Convection"),
        }
    }
}

/// Classification output: the critical exponent and the scaling pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegimeParams {
    pub alpha: f64,
    pub q: f64,
    pub dim: usize,
    pub q_star: f64,
    pub regime: Regime,
    /// Scaling exponent of the last coordinate.
    pub beta: f64,
    /// Amplitude exponent; equals (N-1)/alpha + beta, which is what keeps
    /// the rescaled mass constant.
    pub gamma: f64,
}

impl RegimeParams {
    /// Per-axis spatial scaling exponents: 1/alpha on the first N-1 axes,
    /// beta on the last.
    pub fn axis_exponents(&self) -> Vec<f64> {
        let mut s = vec![1.0 / self.alpha; self.dim];
        s[self.dim - 1] = self.beta;
        s
    }

    /// The decay exponent of the sup norm: max{N/alpha, (1/q)(1+(N-1)/alpha)}.
    pub fn decay_exponent(&self) -> f64 {
        let n = self.dim as f64;
        let diff = n / self.alpha;
        let conv = (1.0 + (n - 1.0) / self.alpha) / self.q;
        diff.max(conv)
    }

    /// Predicted slope of log ||u||_p against log t: -exponent * (1 - 1/p).
    pub fn target_slope(&self, p: f64) -> Result<f64> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "Lebesgue exponent p = {p} must be >= 1"
            )));
        }
        let frac = if p.is_infinite() { 1.0 } else { 1.0 - 1.0 / p };
        Ok(-self.decay_exponent() * frac)
    }
}

/// Sort (alpha, q, N) into a regime and compute the scaling exponents.
/// alpha = 2 is accepted here (only here) so the local heat equation can be
/// used as a cross-check of the exponent table.
pub fn classify(alpha: f64, q: f64, dim: usize) -> Result<RegimeParams> {
    if !(alpha > 0.0 && alpha <= 2.0) || !alpha.is_finite() {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    if dim == 0 {
        return Err(Error::UnsupportedDimension(dim, "classification needs N >= 1"));
    }
    let n = dim as f64;
    let q_floor = 1.0 - 1.0 / n;
    if !q.is_finite() || q <= q_floor {
        return Err(Error::InvalidParameter(format!(
            "q = {q} must exceed 1 - 1/N = {q_floor} for mass conservation"
        )));
    }
    let q_star = 1.0 + (alpha - 1.0) / n;
    let tol = 1e-12 * q_star.abs().max(1.0);
    let (regime, beta) = if (q - q_star).abs() <= tol {
        (Regime::Critical, 1.0 / alpha)
    } else if q > q_star {
        (Regime::Diffusion, 1.0 / alpha)
    } else {
        let beta = (1.0 + (n - 1.0) / alpha) / q - (n - 1.0) / alpha;
        (Regime::Convection, beta)
    };
    let gamma = match regime {
        Regime::Diffusion | Regime::Critical => n / alpha,
        Regime::Convection => (n - 1.0) / alpha + beta,
    };
    if regime == Regime::Convection {
        // q < q* makes the drift scaling strictly supercritical; both facts
        // are needed downstream (truncated-operator convergence), so fail
        // loudly if floating point ever disagrees with the algebra.
        debug_assert!(beta > 1.0 / alpha && alpha * beta > 1.0);
    }
    Ok(RegimeParams {
        alpha,
        q,
        dim,
        q_star,
        regime,
        beta,
        gamma,
    })
}

/// Crude time scale after which a bump of the given width has forgotten its
/// shape under an order-alpha diffusion: 5 * width^alpha. Decay fits should
/// start well after it.
pub fn transient_time(width: f64, alpha: f64) -> f64 {
    5.0 * width.powf(alpha)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 1.0 {
        return Err(Error::InvalidParameter(format!(
            "scaling parameter lambda = {lambda} must be >= 1"
        )));
    }
    Ok(())
}

/// Occupied-slab support gate: along every axis, the scaled bump must cover
/// at least 6 cells whose slab maximum exceeds 1e-3 of the global maximum.
fn check_support_resolved(field: &Field, lambda: f64) -> Result<()> {
    let peak = field.data.iter().cloned().fold(0.0f64, f64::max);
    if !(peak > 0.0) {
        return Err(Error::UnderResolved {
            w: lambda,
            min_cells: 6.0,
            cells: 0.0,
        });
    }
    let thresh = 1e-3 * peak;
    let grid = &field.grid;
    for axis in 0..grid.ndim() {
        let n = grid.dims()[axis];
        let mut occupied = vec![false; n];
        for (flat, &v) in field.data.iter().enumerate() {
            if v > thresh {
                occupied[grid.index_to_multi(flat)[axis]] = true;
            }
        }
        let cells = occupied.iter().filter(|&&o| o).count();
        if cells < 6 {
            return Err(Error::UnderResolved {
                w: lambda,
                min_cells: 6.0,
                cells: cells as f64,
            });
        }
    }
    Ok(())
}

fn rescale_to_mass(field: &mut Field, target: f64) -> Result<()> {
    for v in &mut field.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let raw = field.mass();
    if !(raw > 0.0) || !raw.is_finite() {
        return Err(Error::UnderResolved {
            w: target,
            min_cells: 6.0,
            cells: 0.0,
        });
    }
    let s = target / raw;
    for v in &mut field.data {
        *v *= s;
    }
    Ok(())
}

/// Rescale grid data: sample lambda^gamma u0(lambda^{1/alpha} x',
/// lambda^beta x_N) through the trigonometric interpolant of `u0`, then
/// correct the discrete mass back to that of `u0`.
///
/// The interpolant is periodic, so without care the squeezed samples would
/// pick up ghost copies of the bump wherever lambda^s x wraps around the
/// torus; points whose scaled preimage leaves the fundamental domain of the
/// source grid are therefore set to zero before the mass correction.
pub fn scale_initial_data(u0: &Field, lambda: f64, params: &RegimeParams) -> Result<Field> {
    scale_initial_data_on(u0, lambda, params, &u0.grid)
}

/// Same as `scale_initial_data` but sampling onto a different target grid
/// (used by the domain-doubling certification).
pub fn scale_initial_data_on(
    u0: &Field,
    lambda: f64,
    params: &RegimeParams,
    grid: &PeriodicGrid,
) -> Result<Field> {
    check_lambda(lambda)?;
    let nd = u0.grid.ndim();
    if params.dim != nd || grid.ndim() != nd {
        return Err(Error::DimensionMismatch {
            expected: nd,
            got: if params.dim != nd { params.dim } else { grid.ndim() },
        });
    }
    let mass0 = u0.mass();
    let amp = lambda.powf(params.gamma);
    let stretch: Vec<f64> = params
        .axis_exponents()
        .iter()
        .map(|s| lambda.powf(*s))
        .collect();
    let half: Vec<f64> = u0.grid.lengths().iter().map(|l| 0.5 * l).collect();
    let probe = QuadratureProbe::from_field(u0, 1.0);
    let data: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|flat| {
            let x = grid.node_coords(flat);
            let mut z = vec![0.0; nd];
            for a in 0..nd {
                z[a] = stretch[a] * x[a];
                if z[a].abs() > half[a] {
                    return 0.0;
                }
            }
            amp * probe.eval(&z)
        })
        .collect();
    let mut out = Field {
        grid: grid.clone(),
        data,
    };
    rescale_to_mass(&mut out, mass0)?;
    check_support_resolved(&out, lambda)?;
    Ok(out)
}

/// Rescale an analytically given profile; no wrapping issues, but the same
/// mass correction (against the lambda = 1 sampling of `f`) applies.
pub fn scale_initial_data_fn(
    f: impl Fn(&[f64]) -> f64 + Sync,
    lambda: f64,
    params: &RegimeParams,
    grid: &PeriodicGrid,
) -> Result<Field> {
    check_lambda(lambda)?;
    if params.dim != grid.ndim() {
        return Err(Error::DimensionMismatch {
            expected: grid.ndim(),
            got: params.dim,
        });
    }
    let nd = grid.ndim();
    let amp = lambda.powf(params.gamma);
    let stretch: Vec<f64> = params
        .axis_exponents()
        .iter()
        .map(|s| lambda.powf(*s))
        .collect();
    let mut base = Field::zeros(grid.clone());
    let mut scaled = Field::zeros(grid.clone());
    for flat in 0..grid.len() {
        let x = grid.node_coords(flat);
        base.data[flat] = f(&x);
        let z: Vec<f64> = (0..nd).map(|a| stretch[a] * x[a]).collect();
        scaled.data[flat] = amp * f(&z);
    }
    let mass0 = base.mass();
    if !(mass0 > 0.0) || !mass0.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "reference data has nonpositive discrete mass {mass0}"
        )));
    }
    rescale_to_mass(&mut scaled, mass0)?;
    check_support_resolved(&scaled, lambda)?;
    Ok(scaled)
}

/// Domain-doubling certification numbers attached to a family run.
#[derive(Debug, Clone, Copy)]
pub struct Certification {
    pub slope_base: f64,
    pub slope_doubled: f64,
    pub shift: f64,
}

/// Pairwise distances of the rescaled family at the comparison time.
#[derive(Debug, Clone)]
pub struct FamilyDistances {
    pub lambdas: Vec<f64>,
    pub t_ref: f64,
    /// matrix[i][j] = ||u_{lambda_i}(t_ref) - u_{lambda_j}(t_ref)||_1.
    pub matrix: Vec<Vec<f64>>,
    /// Largest distance among pairs drawn from the lower half of the
    /// lambda list, and from the upper half; the Cauchy trend compares the
    /// two. NaN when a half has fewer than two entries.
    pub bottom_half_max: f64,
    pub top_half_max: f64,
    pub certification: Certification,
}

fn half_max(matrix: &[Vec<f64>], range: std::ops::Range<usize>) -> f64 {
    let mut best = f64::NAN;
    for i in range.clone() {
        for j in (i + 1)..range.end {
            if best.is_nan() || matrix[i][j] > best {
                best = matrix[i][j];
            }
        }
    }
    best
}

/// Launch one run per lambda from rescaled initial data and measure all
/// pairwise L1 distances at `t_ref`. The domain is certified first by a
/// doubling study on the most squeezed family member: the sup-norm decay
/// slope must not move by 0.01 when every extent doubles at fixed spacing.
pub fn rescaled_family_distance(
    cfg: &SolverConfig,
    u0: &Field,
    lambdas: &[f64],
    t_ref: f64,
) -> Result<FamilyDistances> {
    cfg.validate()?;
    if lambdas.len() < 2 {
        return Err(Error::TooFewSamples {
            got: lambdas.len(),
            min: 2,
        });
    }
    if lambdas.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "lambda list must be strictly increasing".into(),
        ));
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    if !(t_ref > 0.0) || !t_ref.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "comparison time t_ref = {t_ref} must be positive"
        )));
    }
    let params = classify(cfg.alpha, cfg.q, cfg.grid.ndim())?;
    let lambda_max = *lambdas.last().unwrap();
    let certification = certify_domain(cfg, u0, lambda_max, &params)?;

    let snapshots: Vec<Field> = lambdas
        .par_iter()
        .map(|&l| -> Result<Field> {
            let data = scale_initial_data(u0, l, &params)?;
            let mut c = cfg.clone();
            c.t_end = t_ref;
            c.snapshot_times = vec![t_ref];
            c.diag_interval = t_ref / 20.0;
            let out = run(&c, &data)?;
            Ok(out.snapshots.into_iter().next_back().unwrap().1)
        })
        .collect::<Result<_>>()?;

    let cellvol = cfg.grid.cell_volume();
    let m = lambdas.len();
    let mut matrix = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = kahan_sum(
                snapshots[i]
                    .data
                    .iter()
                    .zip(&snapshots[j].data)
                    .map(|(a, b)| (a - b).abs()),
            ) * cellvol;
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    let bottom_half_max = half_max(&matrix, 0..m / 2);
    let top_half_max = half_max(&matrix, m / 2..m);
    Ok(FamilyDistances {
        lambdas: lambdas.to_vec(),
        t_ref,
        matrix,
        bottom_half_max,
        top_half_max,
        certification,
    })
}

/// The doubling study behind regime certification: run the most squeezed
/// initial data on the configured grid and on a grid with every extent
/// doubled at the same spacing, fit the late-time sup-norm slope on both,
/// and demand agreement within 0.01.
fn certify_domain(
    cfg: &SolverConfig,
    u0: &Field,
    lambda_max: f64,
    params: &RegimeParams,
) -> Result<Certification> {
    let horizon = 50.0;
    let window = (horizon / 4.0, horizon);
    let slope_of = |grid: &PeriodicGrid| -> Result<f64> {
        let data = scale_initial_data_on(u0, lambda_max, params, grid)?;
        let mut c = cfg.clone();
        c.grid = grid.clone();
        c.t_end = horizon;
        c.snapshot_times = Vec::new();
        c.diag_interval = horizon / 200.0;
        let out = run(&c, &data)?;
        let (slope, _) = fit_decay_rate(&out.series, f64::INFINITY, window)?;
        Ok(slope)
    };
    let slope_base = slope_of(&cfg.grid)?;
    let doubled = PeriodicGrid::new(
        cfg.grid.dims().iter().map(|n| 2 * n).collect(),
        cfg.grid.lengths().iter().map(|l| 2.0 * l).collect(),
    )?;
    let slope_doubled = slope_of(&doubled)?;
    let shift = (slope_base - slope_doubled).abs();
    if !(shift < 0.01) {
        return Err(Error::InvalidParameter(format!(
            "domain not regime-certified: doubling the extents moved the \
             fitted slope by {shift:.4} (limit 0.01)"
        )));
    }
    Ok(Certification {
        slope_base,
        slope_doubled,
        shift,
    })
}

/// Least-squares slope of log norm against log t over a time window.
/// Returns (slope, standard error of the slope).
pub fn fit_decay_rate(
    series: &DiagnosticsSeries,
    p: f64,
    window: (f64, f64),
) -> Result<(f64, f64)> {
    let (w0, w1) = window;
    if !(w0.is_finite() && w1.is_finite() && w0 < w1) {
        return Err(Error::InvalidParameter(format!(
            "fit window [{w0}, {w1}] must be finite and increasing"
        )));
    }
    if series.is_empty() {
        return Err(Error::TooFewSamples { got: 0, min: 10 });
    }
    let t_first = series.t[0];
    let t_last = *series.t.last().unwrap();
    let slack = 1e-9 * t_last.abs().max(1.0);
    if w0 < t_first - slack || w1 > t_last + slack {
        return Err(Error::InvalidParameter(format!(
            "fit window [{w0}, {w1}] outside the simulated horizon [{t_first}, {t_last}]"
        )));
    }
    let col = series.norm_column(p)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (&t, &v) in series.t.iter().zip(col) {
        if t < w0 || t > w1 || t <= 0.0 {
            continue;
        }
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::NonFinite("norm sample inside the fit window"));
        }
        xs.push(t.ln());
        ys.push(v.ln());
    }
    let m = xs.len();
    if m < 10 {
        return Err(Error::TooFewSamples { got: m, min: 10 });
    }
    let mf = m as f64;
    let xbar = xs.iter().sum::<f64>() / mf;
    let ybar = ys.iter().sum::<f64>() / mf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - xbar) * (x - xbar);
        sxy += (x - xbar) * (y - ybar);
    }
    if !(sxx > 0.0) {
        return Err(Error::InvalidParameter(
            "fit window has no time spread".into(),
        ));
    }
    let slope = sxy / sxx;
    let mut ssr = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let r = (y - ybar) - slope * (x - xbar);
        ssr += r * r;
    }
    let stderr = (ssr / ((mf - 2.0) * sxx)).sqrt();
    Ok((slope, stderr))
}

/// Profile extraction report; see `self_similar_profile`.
#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub times: Vec<f64>,
    /// Mean of the mass-normalized mapped profiles, on the window grid.
    pub mean: Field,
    /// matrix[i][j] = L1 distance between mapped profiles i and j.
    pub defects: Vec<Vec<f64>>,
    /// Largest pairwise defect.
    pub defect: f64,
    /// Window mass of each mapped profile before normalization.
    pub window_masses: Vec<f64>,
}

/// Map late-time snapshots to self-similar coordinates and compare them.
///
/// A bump of the given mass and width evolves under `cfg` with snapshots at
/// the requested times; each snapshot is pulled back through
/// f(y) = t^gamma u(t, t^{1/alpha} y', t^beta y_N) onto the y-lattice of the
/// latest time, restricted to the quarter-extent box |x_a| <= L_a/4 (the
/// same interior region the tail diagnostic treats as wrap-safe). Sampling
/// uses the trigonometric interpolant, so the only systematic error left is
/// the torus wrap itself; each mapped profile is then normalized to the
/// snapshot mass, which makes the mean profile integrate to the bump mass
/// exactly. The defect is the largest pairwise L1 distance.
///
/// With convection disabled the run is a pure fractional heat flow whatever
/// q says, so the diffusion exponents are used for the map in that case.
pub fn self_similar_profile(
    cfg: &SolverConfig,
    mass: f64,
    width: f64,
    t_late: &[f64],
) -> Result<ProfileReport> {
    cfg.validate()?;
    if t_late.len() < 2 {
        return Err(Error::TooFewSamples {
            got: t_late.len(),
            min: 2,
        });
    }
    if t_late.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "profile times must be strictly increasing".into(),
        ));
    }
    let settle = 10.0 * transient_time(width, cfg.alpha);
    if t_late[0] < settle * (1.0 - 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "earliest profile time {} is inside the transient; need t >= {settle:.3}",
            t_late[0]
        )));
    }
    let nd = cfg.grid.ndim();
    let mut params = classify(cfg.alpha, cfg.q, nd)?;
    if !cfg.convection {
        params.beta = 1.0 / cfg.alpha;
        params.gamma = nd as f64 / cfg.alpha;
        params.regime = Regime::Diffusion;
    }
    let exps = params.axis_exponents();
    let t_max = *t_late.last().unwrap();

    let u0 = initial_bump(&cfg.grid, mass, width, &vec![0.0; nd])?;
    let mut c = cfg.clone();
    c.t_end = t_max;
    c.snapshot_times = t_late.to_vec();
    let out = run(&c, &u0)?;
    if out.snapshots.len() != t_late.len() {
        return Err(Error::InvalidParameter(
            "snapshot schedule did not cover every profile time".into(),
        ));
    }

    // escape guard: almost all mass must still live well inside the domain
    let lengths = cfg.grid.lengths().to_vec();
    for (t, field) in &out.snapshots {
        let mut outside = 0.0;
        for (flat, &v) in field.data.iter().enumerate() {
            let x = cfg.grid.node_coords(flat);
            if x.iter()
                .zip(&lengths)
                .any(|(xa, la)| xa.abs() > 0.45 * la)
            {
                outside += v.abs();
            }
        }
        outside *= cfg.grid.cell_volume();
        if outside > 1e-2 * mass {
            return Err(Error::InvalidParameter(format!(
                "profile support escaping the grid: {outside:.3e} of the mass \
                 sits beyond 0.45 L at t = {t}"
            )));
        }
    }

    // window lattice: grid nodes with |x_a| <= L_a/4, y = x / t_max^s
    let mut axis_index: Vec<Vec<usize>> = Vec::with_capacity(nd);
    for a in 0..nd {
        let idx: Vec<usize> = (0..cfg.grid.dims()[a])
            .filter(|&i| {
                let x = cfg.grid.coord(a, i);
                let dx = cfg.grid.spacing(a);
                x >= -0.25 * lengths[a] - 1e-9 * dx && x < 0.25 * lengths[a] - 1e-9 * dx
            })
            .collect();
        axis_index.push(idx);
    }
    let win_dims: Vec<usize> = axis_index.iter().map(|v| v.len()).collect();
    let shrink: Vec<f64> = exps.iter().map(|s| t_max.powf(*s)).collect();
    let win_lengths: Vec<f64> = win_dims
        .iter()
        .zip(0..nd)
        .map(|(&n, a)| n as f64 * cfg.grid.spacing(a) / shrink[a])
        .collect();
    let win_grid = PeriodicGrid::new(win_dims.clone(), win_lengths)?;
    let win_vol = win_grid.cell_volume();

    let mut profiles: Vec<Vec<f64>> = Vec::with_capacity(t_late.len());
    let mut window_masses = Vec::with_capacity(t_late.len());
    for (t, field) in &out.snapshots {
        let amp = t.powf(params.gamma);
        let ratio: Vec<f64> = exps.iter().map(|s| (t / t_max).powf(*s)).collect();
        let exact_nodes = (t - t_max).abs() <= 1e-12 * t_max;
        let probe = if exact_nodes {
            None
        } else {
            Some(QuadratureProbe::from_field(field, 1.0))
        };
        let vals: Vec<f64> = (0..win_grid.len())
            .into_par_iter()
            .map(|wflat| {
                let wmulti = win_grid.index_to_multi(wflat);
                let src: Vec<usize> = (0..nd).map(|a| axis_index[a][wmulti[a]]).collect();
                match &probe {
                    None => amp * field.data[cfg.grid.multi_to_index(&src)],
                    Some(p) => {
                        let z: Vec<f64> =
                            (0..nd).map(|a| cfg.grid.coord(a, src[a]) * ratio[a]).collect();
                        amp * p.eval(&z)
                    }
                }
            })
            .collect();
        let raw_mass = kahan_sum(vals.iter().copied()) * win_vol;
        if !(raw_mass > 0.0) || !raw_mass.is_finite() {
            return Err(Error::NonFinite("mapped profile mass"));
        }
        window_masses.push(raw_mass);
        let snap_mass = field.mass();
        let s = snap_mass / raw_mass;
        profiles.push(vals.into_iter().map(|v| v * s).collect());
    }

    let k = profiles.len();
    let mut defects = vec![vec![0.0; k]; k];
    let mut defect = 0.0f64;
    for i in 0..k {
        for j in (i + 1)..k {
            let d = kahan_sum(
                profiles[i]
                    .iter()
                    .zip(&profiles[j])
                    .map(|(a, b)| (a - b).abs()),
            ) * win_vol;
            defects[i][j] = d;
            defects[j][i] = d;
            if d > defect {
                defect = d;
            }
        }
    }
    let mut mean = vec![0.0; win_grid.len()];
    for prof in &profiles {
        for (m, v) in mean.iter_mut().zip(prof) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    Ok(ProfileReport {
        times: t_late.to_vec(),
        mean: Field {
            grid: win_grid,
            data: mean,
        },
        defects,
        defect,
        window_masses,
    })
}

/// The interpolation bound (C (k+1)/k * l1)^{1/(k+1)}: a one-sided bound
/// C on the x_N-derivative of f^k plus an L1 bound on slices turns into a
/// sup bound on f.
pub fn oleinik_linf_bound(c: f64, k: f64, l1: f64) -> Result<f64> {
    for &v in &[c, k, l1] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::NegativeArgument(v));
        }
    }
    Ok((c * (k + 1.0) / k * l1).powf(1.0 / (k + 1.0)))
}

/// Largest L1 norm over lines parallel to the last axis (for N = 1 this is
/// the plain L1 norm): the slice quantity feeding `oleinik_linf_bound`.
pub fn max_slice_l1(u: &Field) -> f64 {
    let nd = u.grid.ndim();
    let n_last = u.grid.dims()[nd - 1];
    let dx = u.grid.spacing(nd - 1);
    u.data
        .chunks(n_last)
        .map(|line| kahan_sum(line.iter().map(|v| v.abs())) * dx)
        .fold(0.0f64, f64::max)
}

/// CSV of regime classifications: one row per entry.
pub fn regime_table_csv<W: Write>(rows: &[RegimeParams], out: &mut W) -> Result<()> {
    writeln!(out, "alpha,q,N,regime,beta,gamma,target_slope_linf")?;
    for r in rows {
        writeln!(
            out,
            "{:.16e},{:.16e},{},{},{:.16e},{:.16e},{:.16e}",
            r.alpha,
            r.q,
            r.dim,
            r.regime,
            r.beta,
            r.gamma,
            r.target_slope(f64::INFINITY)?,
        )?;
    }
    Ok(())
}

/// One decay-fit outcome for the fit-report CSV.
#[derive(Debug, Clone, Copy)]
pub struct FitRow {
    pub alpha: f64,
    pub q: f64,
    pub p: f64,
    pub slope: f64,
    pub stderr: f64,
    pub target: f64,
    pub pass: bool,
}

/// CSV of decay-fit outcomes.
pub fn fit_report_csv<W: Write>(rows: &[FitRow], out: &mut W) -> Result<()> {
    writeln!(out, "alpha,q,p,slope,stderr,target,pass")?;
    for r in rows {
        let p = if r.p.is_infinite() {
            "inf".to_string()
        } else {
            format!("{:.16e}", r.p)
        };
        writeln!(
            out,
            "{:.16e},{:.16e},{p},{:.16e},{:.16e},{:.16e},{}",
            r.alpha, r.q, r.slope, r.stderr, r.target, r.pass
        )?;
    }
    Ok(())
}
