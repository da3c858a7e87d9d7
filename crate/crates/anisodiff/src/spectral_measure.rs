//! Spectral measures mu on the unit sphere S^{N-1}.
//!
//! A measure is admissible when it is finite (total mass Lambda_2 < inf) and
//! nondegenerate: Lambda_1 = inf over unit xi of int |xi.theta|^alpha dmu > 0.
//! Three representations are supported: finite atom lists, densities with a
//! sphere quadrature rule, and the isotropic constant density.
//!
//! The projection mu~ onto S^{N-2} (the measure of the operator obtained by
//! integrating out the last coordinate) is the push-forward of
//! (1 - sigma_N^2)^{alpha/2} dmu under sigma -> sigma'/(1 - sigma_N^2)^{1/2}.

use std::sync::Arc;

use crate::{Error, Result};

/// Degeneracy threshold on the sampled Lambda_1 estimate.
pub const DEGENERACY_THRESHOLD: f64 = 1e-10;

/// An atom is "at a pole" when 1 - sigma_N^2 falls below this cutoff; its
/// projected weight |P sigma|^alpha underflows meaningfully anyway.
pub const POLE_CUTOFF: f64 = 1e-14;

const DEFAULT_XI_RESOLUTION: usize = 256;

pub type DensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    /// Unit direction in R^N.
    pub dir: Vec<f64>,
    /// Strictly positive weight.
    pub weight: f64,
}

/// Quadrature rule on the sphere S^{N-1}: nodes with positive weights,
/// normalized so that sum of weights approximates the surface measure.
#[derive(Clone)]
pub struct SphereQuadrature {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Clone)]
pub enum MeasureVariant {
    Atoms(Vec<Atom>),
    Density {
        evaluator: DensityFn,
        quadrature: SphereQuadrature,
    },
    Isotropic {
        c: f64,
    },
}

#[derive(Clone)]
pub struct SpectralMeasure {
    /// Ambient dimension N; the measure lives on S^{N-1}.
    pub dim: usize,
    pub variant: MeasureVariant,
}

impl std::fmt::Debug for SpectralMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.variant {
            MeasureVariant::Atoms(atoms) => f
                .debug_struct("SpectralMeasure")
                .field("dim", &self.dim)
                .field("atoms", atoms)
                .finish(),
            MeasureVariant::Density { quadrature, .. } => f
                .debug_struct("SpectralMeasure")
                .field("dim", &self.dim)
                .field("density_nodes", &quadrature.nodes.len())
                .finish(),
            MeasureVariant::Isotropic { c } => f
                .debug_struct("SpectralMeasure")
                .field("dim", &self.dim)
                .field("isotropic_c", c)
                .finish(),
        }
    }
}

impl SpectralMeasure {
    /// Atomic measure. Directions are normalized on construction; zero or
    /// non-finite directions and nonpositive weights are rejected.
    pub fn atoms(dim: usize, atoms: Vec<(Vec<f64>, f64)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("ambient dimension must be >= 1".into()));
        }
        let mut out = Vec::with_capacity(atoms.len());
        for (dir, weight) in atoms {
            if dir.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: dir.len(),
                });
            }
            if !dir.iter().all(|x| x.is_finite()) || !weight.is_finite() {
                return Err(Error::InvalidMeasure("non-finite atom".into()));
            }
            if weight <= 0.0 {
                return Err(Error::InvalidMeasure(format!(
                    "atom weight {weight} must be strictly positive"
                )));
            }
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                return Err(Error::InvalidMeasure("zero atom direction".into()));
            }
            let dir = dir.iter().map(|x| x / norm).collect();
            out.push(Atom { dir, weight });
        }
        Ok(Self {
            dim,
            variant: MeasureVariant::Atoms(out),
        })
    }

    /// Isotropic measure c * dsigma.
    pub fn isotropic(dim: usize, c: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("ambient dimension must be >= 1".into()));
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidMeasure(format!(
                "isotropic constant {c} must be strictly positive and finite"
            )));
        }
        Ok(Self {
            dim,
            variant: MeasureVariant::Isotropic { c },
        })
    }

    /// Density h dsigma with an optional quadrature rule (defaulted per
    /// dimension when absent).
    pub fn density(
        dim: usize,
        evaluator: DensityFn,
        quadrature: Option<SphereQuadrature>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("ambient dimension must be >= 1".into()));
        }
        let quadrature = match quadrature {
            Some(q) => {
                if q.nodes.len() != q.weights.len() || q.nodes.is_empty() {
                    return Err(Error::InvalidMeasure("malformed sphere quadrature".into()));
                }
                if !q.weights.iter().all(|w| *w > 0.0) {
                    return Err(Error::InvalidMeasure("quadrature weights must be positive".into()));
                }
                q
            }
            None => default_sphere_quadrature(dim)?,
        };
        for node in &quadrature.nodes {
            let h = evaluator(node);
            if !h.is_finite() || h < 0.0 {
                return Err(Error::InvalidMeasure(
                    "density must be finite and nonnegative at quadrature nodes".into(),
                ));
            }
        }
        Ok(Self {
            dim,
            variant: MeasureVariant::Density {
                evaluator,
                quadrature,
            },
        })
    }

    /// Total mass Lambda_2 = mu(S^{N-1}).
    pub fn total_mass(&self) -> f64 {
        match &self.variant {
            MeasureVariant::Atoms(atoms) => atoms.iter().map(|a| a.weight).sum(),
            MeasureVariant::Isotropic { c } => c * surface_area(self.dim),
            MeasureVariant::Density {
                evaluator,
                quadrature,
            } => quadrature
                .nodes
                .iter()
                .zip(&quadrature.weights)
                .map(|(node, w)| w * evaluator(node))
                .sum(),
        }
    }

    /// int |xi . theta|^alpha dmu(theta) for an arbitrary (not necessarily
    /// unit) frequency vector xi of the ambient dimension.
    pub fn directional_integral(&self, xi: &[f64], alpha: f64) -> f64 {
        debug_assert_eq!(xi.len(), self.dim);
        match &self.variant {
            MeasureVariant::Atoms(atoms) => atoms
                .iter()
                .map(|a| a.weight * dot(xi, &a.dir).abs().powf(alpha))
                .sum(),
            MeasureVariant::Isotropic { c } => {
                let norm = xi.iter().map(|x| x * x).sum::<f64>().sqrt();
                c * unit_dot_moment(self.dim, alpha) * norm.powf(alpha)
            }
            MeasureVariant::Density {
                evaluator,
                quadrature,
            } => quadrature
                .nodes
                .iter()
                .zip(&quadrature.weights)
                .map(|(node, w)| w * evaluator(node) * dot(xi, node).abs().powf(alpha))
                .sum(),
        }
    }

    /// Sampled nondegeneracy constant: the minimum of int |xi.theta|^alpha dmu
    /// over a deterministic quasi-uniform sample of unit xi, followed by a
    /// local refinement pass around the coarse minimizer so the estimate does
    /// not depend on the sample grid. Zero (or near zero) signals numerical
    /// degeneracy; callers decide whether to reject.
    pub fn nondegeneracy_constant(&self, alpha: f64, resolution: usize) -> Result<f64> {
        check_alpha(alpha)?;
        if resolution < 8 {
            return Err(Error::InvalidParameter(format!(
                "sampling resolution {resolution} < 8 directions per great circle"
            )));
        }
        if let MeasureVariant::Isotropic { c } = &self.variant {
            // Rotation invariant: every direction gives the same value.
            return Ok(c * unit_dot_moment(self.dim, alpha));
        }
        let samples = sphere_sample(self.dim, resolution)?;
        let f = |xi: &[f64]| self.directional_integral(xi, alpha);
        let (mut best, mut best_idx) = (f64::INFINITY, 0usize);
        for (idx, xi) in samples.iter().enumerate() {
            let v = f(xi);
            if v < best {
                best = v;
                best_idx = idx;
            }
        }
        match self.dim {
            1 => Ok(best),
            2 => {
                // Golden-section refinement in the angle around the coarse
                // minimizer; handles the |t|^alpha kinks (unimodal locally).
                let m = samples.len() as f64;
                let phi0 = 2.0 * std::f64::consts::PI * best_idx as f64 / m;
                let h = 2.0 * std::f64::consts::PI / m;
                let g = |phi: f64| f(&[phi.cos(), phi.sin()]);
                Ok(best.min(golden_min(g, phi0 - h, phi0 + h)))
            }
            3 => {
                let start = samples[best_idx].clone();
                let step0 = 3.0 / resolution as f64;
                Ok(best.min(sphere_pattern_min(&f, &start, step0)))
            }
            n => Err(Error::UnsupportedDimension(
                n,
                "direction sampling implemented for N <= 3",
            )),
        }
    }

    /// As `nondegeneracy_constant`, but rejects estimates below `threshold`
    /// so a degenerate measure cannot slip into solver construction.
    pub fn validate_nondegenerate(&self, alpha: f64, threshold: f64) -> Result<f64> {
        let lambda1 = self.nondegeneracy_constant(alpha, DEFAULT_XI_RESOLUTION)?;
        if lambda1 < threshold {
            return Err(Error::DegenerateMeasure { lambda1, threshold });
        }
        Ok(lambda1)
    }

    /// Projected measure mu~ on S^{N-2}: push-forward of
    /// (1 - sigma_N^2)^{alpha/2} dmu under sigma -> sigma'/|sigma'|.
    ///
    /// Atoms at the poles vanish. For densities the projected density at
    /// sigma in S^{N-2} is
    ///
    /// ```text
    ///     sum_{+-} int_0^1 s^{N-2+alpha} (1-s^2)^{-1/2} h(s sigma, +-(1-s^2)^{1/2}) ds,
    /// ```
    ///
    /// evaluated with the substitution s = sin(psi) that removes the endpoint
    /// singularity.
    pub fn project(&self, alpha: f64) -> Result<SpectralMeasure> {
        check_alpha(alpha)?;
        if self.dim < 2 {
            return Err(Error::UnsupportedDimension(
                self.dim,
                "projection needs an ambient dimension of at least 2",
            ));
        }
        let sub_dim = self.dim - 1;
        match &self.variant {
            MeasureVariant::Atoms(atoms) => {
                let mut out = Vec::new();
                for a in atoms {
                    let p = &a.dir[..sub_dim];
                    let p_norm_sq: f64 = p.iter().map(|x| x * x).sum();
                    if p_norm_sq < POLE_CUTOFF {
                        continue;
                    }
                    let p_norm = p_norm_sq.sqrt();
                    let dir: Vec<f64> = p.iter().map(|x| x / p_norm).collect();
                    out.push((dir, a.weight * p_norm.powf(alpha)));
                }
                // Empty output (all atoms at poles) is a legal zero measure;
                // represent it as an empty atom list.
                Ok(SpectralMeasure {
                    dim: sub_dim,
                    variant: MeasureVariant::Atoms(
                        out.into_iter()
                            .map(|(dir, weight)| Atom { dir, weight })
                            .collect(),
                    ),
                })
            }
            MeasureVariant::Isotropic { c } => {
                // Constant density stays constant: the psi-integral does not
                // depend on sigma. 2 int_0^{pi/2} sin^{N-2+alpha} psi dpsi in
                // closed form via the Beta function.
                let p = (self.dim - 2) as f64 + alpha;
                let c_proj = c * std::f64::consts::PI.sqrt()
                    * gamma_fn((p + 1.0) / 2.0)
                    / gamma_fn((p + 2.0) / 2.0);
                SpectralMeasure::isotropic(sub_dim, c_proj)
            }
            MeasureVariant::Density {
                evaluator,
                quadrature: _,
            } => {
                let h = evaluator.clone();
                let power = (self.dim - 2) as f64 + alpha;
                let (psi_nodes, psi_weights) = gauss_legendre_on(0.0, std::f64::consts::FRAC_PI_2, 64);
                let projected = move |sigma: &[f64]| -> f64 {
                    let mut total = 0.0;
                    let mut point = vec![0.0; sigma.len() + 1];
                    for (psi, w) in psi_nodes.iter().zip(&psi_weights) {
                        let (s, c) = psi.sin_cos();
                        for (dst, src) in point.iter_mut().zip(sigma.iter()) {
                            *dst = s * src;
                        }
                        let last = point.len() - 1;
                        point[last] = c;
                        let mut val = h(&point);
                        point[last] = -c;
                        val += h(&point);
                        total += w * s.powf(power) * val;
                    }
                    total
                };
                if sub_dim == 1 {
                    // A density on S^0 is a pair of weighted points.
                    let w_plus = projected(&[1.0]);
                    let w_minus = projected(&[-1.0]);
                    let mut atoms = Vec::new();
                    if w_plus > 0.0 {
                        atoms.push((vec![1.0], w_plus));
                    }
                    if w_minus > 0.0 {
                        atoms.push((vec![-1.0], w_minus));
                    }
                    return SpectralMeasure::atoms(1, atoms);
                }
                SpectralMeasure::density(sub_dim, Arc::new(projected), None)
            }
        }
    }

    /// Push the measure forward by an orthogonal map sending `a` to the last
    /// canonical basis vector, reducing a general drift direction to the
    /// canonical one. Uses the Householder reflection through a - e_N.
    pub fn rotate_to_canonical_drift(&self, a: &[f64]) -> Result<SpectralMeasure> {
        if a.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: a.len(),
            });
        }
        let norm = dot(a, a).sqrt();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParameter(format!(
                "drift direction must be a unit vector, |a| = {norm}"
            )));
        }
        if let MeasureVariant::Isotropic { .. } = self.variant {
            return Ok(self.clone());
        }
        let n = self.dim;
        let mut v: Vec<f64> = a.to_vec();
        v[n - 1] -= 1.0;
        let vv = dot(&v, &v);
        if vv < 1e-28 {
            return Ok(self.clone()); // a is already e_N
        }
        let reflect = move |x: &[f64]| -> Vec<f64> {
            let s = 2.0 * dot(x, &v) / vv;
            x.iter().zip(&v).map(|(xi, vi)| xi - s * vi).collect()
        };
        match &self.variant {
            MeasureVariant::Atoms(atoms) => {
                let rotated = atoms
                    .iter()
                    .map(|at| (reflect(&at.dir), at.weight))
                    .collect();
                SpectralMeasure::atoms(n, rotated)
            }
            MeasureVariant::Density {
                evaluator,
                quadrature,
            } => {
                let nodes = quadrature
                    .nodes
                    .iter()
                    .map(|node| {
                        let mut r = reflect(node);
                        let nn = dot(&r, &r).sqrt();
                        r.iter_mut().for_each(|x| *x /= nn);
                        r
                    })
                    .collect();
                let h = evaluator.clone();
                let reflect2 = reflect.clone();
                // The reflection is an involution, so the pulled-back density
                // at the new node is the old density at the old node.
                let rotated_h = move |sigma: &[f64]| -> f64 { h(&reflect2(sigma)) };
                SpectralMeasure::density(
                    n,
                    Arc::new(rotated_h),
                    Some(SphereQuadrature {
                        nodes,
                        weights: quadrature.weights.clone(),
                    }),
                )
            }
            MeasureVariant::Isotropic { .. } => unreachable!(),
        }
    }

    /// Flatten to weighted point masses: atoms directly, densities through
    /// their quadrature rule, the isotropic measure through the default rule.
    pub fn point_masses(&self) -> Result<Vec<(Vec<f64>, f64)>> {
        match &self.variant {
            MeasureVariant::Atoms(atoms) => {
                Ok(atoms.iter().map(|a| (a.dir.clone(), a.weight)).collect())
            }
            MeasureVariant::Density {
                evaluator,
                quadrature,
            } => Ok(quadrature
                .nodes
                .iter()
                .zip(&quadrature.weights)
                .map(|(node, w)| (node.clone(), w * evaluator(node)))
                .collect()),
            MeasureVariant::Isotropic { c } => {
                let quad = default_sphere_quadrature(self.dim)?;
                Ok(quad
                    .nodes
                    .into_iter()
                    .zip(quad.weights)
                    .map(|(node, w)| (node, w * c))
                    .collect())
            }
        }
    }

    /// Number of atoms (0 for non-atomic variants); used by reports.
    pub fn atom_count(&self) -> usize {
        match &self.variant {
            MeasureVariant::Atoms(atoms) => atoms.len(),
            _ => 0,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Surface measure of S^{N-1}; the 0-sphere carries counting measure.
pub fn surface_area(dim: usize) -> f64 {
    match dim {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        3 => 4.0 * std::f64::consts::PI,
        n => {
            let nf = n as f64;
            2.0 * std::f64::consts::PI.powf(nf / 2.0) / gamma_fn(nf / 2.0)
        }
    }
}

/// int_{S^{N-1}} |e . theta|^alpha dsigma(theta) for any unit e; closed form
/// 2 pi^{(N-1)/2} Gamma((alpha+1)/2) / Gamma((alpha+N)/2).
pub fn unit_dot_moment(dim: usize, alpha: f64) -> f64 {
    let nf = dim as f64;
    2.0 * std::f64::consts::PI.powf((nf - 1.0) / 2.0) * gamma_fn((alpha + 1.0) / 2.0)
        / gamma_fn((alpha + nf) / 2.0)
}

fn gamma_fn(x: f64) -> f64 {
    statrs::function::gamma::gamma(x)
}

/// Deterministic quasi-uniform sample of unit directions: the two points of
/// S^0, uniform angles on S^1, a Fibonacci lattice on S^2. `resolution` is
/// the approximate number of directions per great circle.
pub fn sphere_sample(dim: usize, resolution: usize) -> Result<Vec<Vec<f64>>> {
    match dim {
        1 => Ok(vec![vec![1.0], vec![-1.0]]),
        2 => {
            let m = resolution.max(8);
            Ok((0..m)
                .map(|j| {
                    let phi = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
                    vec![phi.cos(), phi.sin()]
                })
                .collect())
        }
        3 => {
            let count = resolution * resolution;
            let golden = (1.0 + 5.0_f64.sqrt()) / 2.0;
            Ok((0..count)
                .map(|i| {
                    let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
                    let rho = (1.0 - z * z).sqrt();
                    let phi = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
                    vec![rho * phi.cos(), rho * phi.sin(), z]
                })
                .collect())
        }
        n => Err(Error::UnsupportedDimension(
            n,
            "direction sampling implemented for N <= 3",
        )),
    }
}

/// Default sphere quadrature: exact counting on S^0, trapezoid angles on S^1
/// (spectrally accurate for smooth periodic densities), Gauss-Legendre in
/// cos(theta) times uniform azimuth on S^2.
pub fn default_sphere_quadrature(dim: usize) -> Result<SphereQuadrature> {
    match dim {
        1 => Ok(SphereQuadrature {
            nodes: vec![vec![1.0], vec![-1.0]],
            weights: vec![1.0, 1.0],
        }),
        2 => {
            let m = 1024;
            let w = 2.0 * std::f64::consts::PI / m as f64;
            let mut nodes = Vec::with_capacity(m);
            for j in 0..m {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
                nodes.push(vec![phi.cos(), phi.sin()]);
            }
            Ok(SphereQuadrature {
                nodes,
                weights: vec![w; m],
            })
        }
        3 => {
            let n_polar = 64;
            let n_azimuth = 128;
            let (z_nodes, z_weights) = gauss_legendre_on(-1.0, 1.0, n_polar);
            let dphi = 2.0 * std::f64::consts::PI / n_azimuth as f64;
            let mut nodes = Vec::with_capacity(n_polar * n_azimuth);
            let mut weights = Vec::with_capacity(n_polar * n_azimuth);
            for (z, wz) in z_nodes.iter().zip(&z_weights) {
                let rho = (1.0 - z * z).sqrt();
                for j in 0..n_azimuth {
                    let phi = dphi * j as f64;
                    nodes.push(vec![rho * phi.cos(), rho * phi.sin(), *z]);
                    weights.push(wz * dphi);
                }
            }
            Ok(SphereQuadrature { nodes, weights })
        }
        n => Err(Error::UnsupportedDimension(
            n,
            "default sphere quadrature implemented for N <= 3",
        )),
    }
}

/// One-dimensional quadrature rule: positive weights, sorted nodes.
#[derive(Debug, Clone)]
pub struct Quadrature1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Quadrature1D {
    /// Gauss-Legendre rule transplanted to [a, b].
    pub fn gauss(a: f64, b: f64, n: usize) -> Self {
        let (nodes, weights) = gauss_legendre_on(a, b, n);
        Self { nodes, weights }
    }

    /// Geometrically graded composite Gauss rule on [r_min, r_max]: panel
    /// boundaries grow by `ratio`, `order` Gauss points per panel. Suited to
    /// integrands with power-law behaviour at both ends.
    pub fn radial_geometric(r_min: f64, r_max: f64, ratio: f64, order: usize) -> Self {
        assert!(r_min > 0.0 && r_max > r_min && ratio > 1.0);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut lo = r_min;
        while lo < r_max {
            let hi = (lo * ratio).min(r_max);
            let (n, w) = gauss_legendre_on(lo, hi, order);
            nodes.extend(n);
            weights.extend(w);
            lo = hi;
        }
        Self { nodes, weights }
    }

    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(*x))
            .sum()
    }
}

/// Gauss-Legendre nodes and weights on [a, b], computed by Newton iteration
/// on the Legendre recurrence.
pub(crate) fn gauss_legendre_on(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre_unit(n);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    (
        x.iter().map(|xi| mid + half * xi).collect(),
        w.iter().map(|wi| half * wi).collect(),
    )
}

fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    use once_cell::sync::Lazy;
    use std::collections::HashMap;
    use std::sync::Mutex;
    static CACHE: Lazy<Mutex<HashMap<usize, (Vec<f64>, Vec<f64>)>>> =
        Lazy::new(|| Mutex::new(HashMap::new()));
    if let Some(hit) = CACHE.lock().unwrap().get(&n) {
        return hit.clone();
    }
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        // The weight needs the derivative at the converged node, not at the
        // last pre-update iterate.
        let (_, dp) = legendre(n, x);
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    nodes.reverse();
    weights.reverse();
    CACHE
        .lock()
        .unwrap()
        .insert(n, (nodes.clone(), weights.clone()));
    (nodes, weights)
}

/// Golden-section minimization on [a, b]; tolerates V-shaped (kinked) minima.
fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..120 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
        if b - a < 1e-15 {
            break;
        }
    }
    fc.min(fd)
}

/// Pattern search on S^2 in the tangent plane of the current iterate, with
/// eight compass directions to avoid stalling on kinked valleys.
fn sphere_pattern_min(f: &dyn Fn(&[f64]) -> f64, start: &[f64], step0: f64) -> f64 {
    let mut x = [start[0], start[1], start[2]];
    let mut fx = f(&x);
    let mut step = step0;
    let normalize = |v: &mut [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        v.iter_mut().for_each(|t| *t /= n);
    };
    for _ in 0..400 {
        // Orthonormal tangent basis at x.
        let pick = if x[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let mut u = [
            pick[1] * x[2] - pick[2] * x[1],
            pick[2] * x[0] - pick[0] * x[2],
            pick[0] * x[1] - pick[1] * x[0],
        ];
        normalize(&mut u);
        let mut v = [
            x[1] * u[2] - x[2] * u[1],
            x[2] * u[0] - x[0] * u[2],
            x[0] * u[1] - x[1] * u[0],
        ];
        normalize(&mut v);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let dirs: [[f64; 2]; 8] = [
            [1.0, 0.0],
            [-1.0, 0.0],
            [0.0, 1.0],
            [0.0, -1.0],
            [r, r],
            [r, -r],
            [-r, r],
            [-r, -r],
        ];
        let mut improved = false;
        for d in dirs {
            let mut y = [
                x[0] + step * (d[0] * u[0] + d[1] * v[0]),
                x[1] + step * (d[0] * u[1] + d[1] * v[1]),
                x[2] + step * (d[0] * u[2] + d[1] * v[2]),
            ];
            normalize(&mut y);
            let fy = f(&y);
            if fy < fx {
                x = y;
                fx = fy;
                improved = true;
                break;
            }
        }
        if !improved {
            step *= 0.5;
            if step < 1e-10 {
                break;
            }
        }
    }
    fx
}

/// Legendre P_n(x) and its derivative via the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    if n == 0 {
        return (1.0, 0.0);
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
