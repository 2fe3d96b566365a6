//! Gaussians on the cover and their pushforwards onto the base.
//!
//! A [`WrappedDensity`] evaluates the pushforward of a Gaussian through a
//! covering map by summing the Gaussian over a truncated window of the fibre,
//! in log space. The analytic KL between the cover Gaussians bounds the KL
//! between their pushforwards whenever the covering preserves Lebesgue
//! measure sheet by sheet; [`kl_numeric_base`] evaluates the latter by
//! quadrature so the bound can be checked.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covering::{CoveringMap, DeckTransform};
use crate::error::{domain, Result};
use crate::exec::{pairwise_sum, Exec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian tails beyond this many standard deviations are dropped.
pub const TAIL_SIGMAS: f64 = 6.0;

/// Mean and lower-triangular scale factor `L` of a Gaussian, `Σ = L Lᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    /// Row-major `d x d`, entries above the diagonal are zero.
    pub scale_lower: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, scale_lower: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || scale_lower.len() != d * d {
            return Err(domain(format!(
                "scale factor must be {d}x{d}, got {} entries",
                scale_lower.len()
            )));
        }
        if mean.iter().chain(&scale_lower).any(|v| !v.is_finite()) {
            return Err(domain("non-finite Gaussian parameter"));
        }
        for i in 0..d {
            if scale_lower[i * d + i] <= 0.0 {
                return Err(domain(format!(
                    "scale diagonal entry {i} is {} (covariance is singular)",
                    scale_lower[i * d + i]
                )));
            }
            if (i + 1..d).any(|j| scale_lower[i * d + j] != 0.0) {
                return Err(domain("scale factor is not lower-triangular"));
            }
        }
        Ok(Self { mean, scale_lower })
    }

    /// `N(mean, sigma² I)`.
    pub fn isotropic(mean: Vec<f64>, sigma: f64) -> Result<Self> {
        let d = mean.len();
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            l[i * d + i] = sigma;
        }
        Self::new(mean, l)
    }

    /// Builds the Cholesky factor of a symmetric positive definite covariance.
    pub fn from_covariance(mean: Vec<f64>, cov: &[f64]) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(domain("covariance has the wrong size"));
        }
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
                if i == j {
                    let v = cov[i * d + i] - s;
                    if !(v > 0.0) {
                        return Err(domain("covariance is not positive definite"));
                    }
                    l[i * d + i] = v.sqrt();
                } else {
                    l[i * d + j] = (cov[i * d + j] - s) / l[j * d + j];
                }
            }
        }
        Self::new(mean, l)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> f64 {
        self.scale_lower[i * self.dim() + j]
    }

    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (0..d).map(|k| self.l(i, k) * self.l(j, k)).sum();
            }
        }
        cov
    }

    pub fn log_det_cov(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l(i, i).ln()).sum::<f64>()
    }

    /// Largest singular value of `L`, i.e. the largest marginal standard
    /// deviation along any direction.
    pub fn max_std(&self) -> f64 {
        let d = self.dim();
        let cov = self.covariance();
        if d == 1 {
            return cov[0].sqrt();
        }
        if d == 2 {
            let (a, b, c) = (cov[0], cov[1], cov[3]);
            let half_tr = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            return (half_tr + disc).sqrt();
        }
        // Power iteration on Σ.
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm;
            v = w.into_iter().map(|x| x / norm).collect();
        }
        lambda.sqrt()
    }

    /// Solves `L u = x` by forward substitution.
    fn whiten(&self, x: &[f64], u: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            let s: f64 = (0..i).map(|k| self.l(i, k) * u[k]).sum();
            u[i] = (x[i] - s) / self.l(i, i);
        }
    }

    /// Log density at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut diff = [0.0; 8];
        let mut u = [0.0; 8];
        let (diff, u) = if d <= 8 {
            (&mut diff[..d], &mut u[..d])
        } else {
            unreachable!("latent dimensions above 8 are not supported")
        };
        for i in 0..d {
            diff[i] = x[i] - self.mean[i];
        }
        self.whiten(diff, u);
        let quad: f64 = u.iter().map(|v| v * v).sum();
        -0.5 * quad - 0.5 * self.log_det_cov() - 0.5 * d as f64 * LN_2PI
    }

    /// Draws `mean + L eps` with `eps ~ N(0, I)`.
    pub fn sample_cover<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let d = self.dim();
        let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        (0..d)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.l(i, k) * eps[k]).sum::<f64>())
            .collect()
    }
}

/// A random planar Gaussian whose principal standard deviations lie in
/// `[smin, smax)`, rotated by a uniform angle, with mean uniform on
/// `[-1.5, 2.5)²`.
pub fn random_planar<R: Rng + ?Sized>(rng: &mut R, smin: f64, smax: f64) -> Result<GaussianParams> {
    if !(smin > 0.0 && smin < smax) {
        return Err(domain("need 0 < smin < smax"));
    }
    let (s1, s2) = (rng.random_range(smin..smax), rng.random_range(smin..smax));
    let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (c, s) = (a.cos(), a.sin());
    let (v1, v2) = (s1 * s1, s2 * s2);
    let cov = [
        c * c * v1 + s * s * v2,
        c * s * (v1 - v2),
        c * s * (v1 - v2),
        s * s * v1 + c * c * v2,
    ];
    let mean = vec![rng.random_range(-1.5..2.5), rng.random_range(-1.5..2.5)];
    GaussianParams::from_covariance(mean, &cov)
}

/// Gaussian density at `x`.
pub fn gaussian_pdf(params: &GaussianParams, x: &[f64]) -> Result<f64> {
    if x.len() != params.dim() {
        return Err(domain("point dimension does not match the Gaussian"));
    }
    let v = params.log_pdf(x).exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(domain("density is not finite"))
    }
}

/// Closed-form `KL(q || p)` between two Gaussians of the same dimension.
pub fn kl_gaussian_analytic(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    let d = q.dim();
    if p.dim() != d {
        return Err(domain("Gaussians differ in dimension"));
    }
    // tr(Σp⁻¹ Σq) = ‖Lp⁻¹ Lq‖²_F, Mahalanobis term = ‖Lp⁻¹ (μp - μq)‖².
    let mut trace = 0.0;
    let mut col = vec![0.0; d];
    let mut u = vec![0.0; d];
    for j in 0..d {
        for i in 0..d {
            col[i] = q.l(i, j);
        }
        p.whiten(&col, &mut u);
        trace += u.iter().map(|v| v * v).sum::<f64>();
    }
    let diff: Vec<f64> = (0..d).map(|i| p.mean[i] - q.mean[i]).collect();
    p.whiten(&diff, &mut u);
    let maha: f64 = u.iter().map(|v| v * v).sum();
    let kl = 0.5 * (trace + maha - d as f64 + p.log_det_cov() - q.log_det_cov());
    if kl.is_finite() {
        Ok(kl.max(0.0))
    } else {
        Err(domain("KL is not finite"))
    }
}

/// Pushforward of a Gaussian through a covering map, with the fibre sum
/// truncated to a window of lattice cells around the mean.
#[derive(Debug, Clone)]
pub struct WrappedDensity {
    params: GaussianParams,
    map: CoveringMap,
    window: usize,
    /// Carries the window from the fundamental domain to the mean's cell.
    deck: DeckTransform,
}

impl WrappedDensity {
    /// Uses the smallest window meeting the tail tolerance.
    pub fn new(params: GaussianParams, map: CoveringMap) -> Result<Self> {
        let window = required_window(&params, &map);
        Self::with_window(params, map, window)
    }

    pub fn with_window(params: GaussianParams, map: CoveringMap, window: usize) -> Result<Self> {
        if params.dim() != map.dim() {
            return Err(domain(format!(
                "{}-dimensional Gaussian on a {}-dimensional covering",
                params.dim(),
                map.dim()
            )));
        }
        let deck = map.deck_to(&params.mean)?;
        let w = Self {
            params,
            map,
            window,
            deck,
        };
        if !w.meets_tail_tol() {
            log::warn!(
                "window {} drops Gaussian tail mass beyond tolerance (needs {})",
                window,
                required_window(&w.params, &w.map)
            );
        }
        Ok(w)
    }

    pub fn params(&self) -> &GaussianParams {
        &self.params
    }

    pub fn map(&self) -> CoveringMap {
        self.map
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Whether the window covers `TAIL_SIGMAS` standard deviations.
    pub fn meets_tail_tol(&self) -> bool {
        self.window >= required_window(&self.params, &self.map)
    }

    /// Calls `visit` with each fibre point of `base` inside the window.
    fn for_each_lift<F: FnMut(&[f64])>(&self, base: &[f64], mut visit: F) -> Result<()> {
        let mut lifted = [0.0; 8];
        let d = self.map.dim();
        self.map.for_each_preimage(base, self.window, |q, _| {
            self.map.apply_deck(self.deck, q, &mut lifted[..d]);
            visit(&lifted[..d]);
        })
    }

    /// Log of the pushforward density at a canonical base point.
    pub fn log_pdf(&self, base: &[f64]) -> Result<f64> {
        let mut logs = Vec::with_capacity(self.map.preimage_count(self.window));
        self.for_each_lift(base, |x| logs.push(self.params.log_pdf(x)))?;
        Ok(log_sum_exp(&logs))
    }

    pub fn pdf(&self, base: &[f64]) -> Result<f64> {
        Ok(self.log_pdf(base)?.exp())
    }

    /// Draws a base point: a cover sample pushed through the covering.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = self.params.sample_cover(rng);
        let mut out = vec![0.0; z.len()];
        self.map.project_unchecked(&z, &mut out);
        out
    }
}

/// Window `ceil(6 σ_max / period) + 1`, zero for the identity covering.
pub fn required_window(params: &GaussianParams, map: &CoveringMap) -> usize {
    if !map.is_periodic() {
        return 0;
    }
    (TAIL_SIGMAS * params.max_std() / map.min_period()).ceil() as usize + 1
}

/// Pushforward density at `base`.
pub fn wrapped_pdf(w: &WrappedDensity, base: &[f64]) -> Result<f64> {
    w.pdf(base)
}

/// Draws from the pushforward.
pub fn sample<R: Rng + ?Sized>(w: &WrappedDensity, rng: &mut R) -> Vec<f64> {
    w.sample(rng)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Uniform midpoint grid over a compact fundamental domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Cells per axis.
    pub resolution: usize,
}

impl GridSpec {
    pub const DEFAULT: GridSpec = GridSpec { resolution: 200 };

    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(domain("grid resolution must be at least 2"));
        }
        Ok(Self { resolution })
    }

    fn axes(&self, map: &CoveringMap) -> Result<Vec<(f64, f64)>> {
        let dom = map.fundamental_domain();
        if dom.iter().any(|(lo, hi)| !(hi - lo).is_finite()) {
            return Err(domain("quadrature needs a compact fundamental domain"));
        }
        if dom.len() > 2 {
            return Err(domain("quadrature is implemented for 1-D and 2-D bases"));
        }
        Ok(dom)
    }

    pub fn cell_measure(&self, map: &CoveringMap) -> f64 {
        map.domain_area() / (self.resolution as f64).powi(map.dim() as i32)
    }

    /// Midpoint of cell `i` along an axis `[lo, hi)`.
    #[inline]
    fn midpoint(&self, (lo, hi): (f64, f64), i: usize) -> f64 {
        lo + (i as f64 + 0.5) * (hi - lo) / self.resolution as f64
    }
}

/// Midpoint-rule integral of `f` over the fundamental domain of `map`.
/// Rows are evaluated in parallel and summed in a fixed order.
pub fn integrate_base<F>(map: &CoveringMap, grid: GridSpec, exec: Exec, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64> + Sync + Send,
{
    let axes = grid.axes(map)?;
    let g = grid.resolution;
    let rows: Vec<Result<f64>> = if axes.len() == 1 {
        exec.map_range(g, |i| f(&[grid.midpoint(axes[0], i)]))
    } else {
        exec.map_range(g, |i| {
            let y = grid.midpoint(axes[1], i);
            let mut row = Vec::with_capacity(g);
            for j in 0..g {
                row.push(f(&[grid.midpoint(axes[0], j), y])?);
            }
            Ok(pairwise_sum(&row))
        })
    };
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&rows) * grid.cell_measure(map))
}

/// Quadrature estimate of `KL(q* || p*)` on the base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericKl {
    /// The quadrature sum as computed.
    pub raw: f64,
    /// `raw` clamped at zero.
    pub value: f64,
    /// Set when `raw` was negative.
    pub clamped: bool,
}

/// Midpoint-rule KL between two pushforwards through the same covering,
/// evaluated in log space.
pub fn kl_numeric_base(q: &WrappedDensity, p: &WrappedDensity, grid: GridSpec) -> Result<NumericKl> {
    kl_numeric_base_with(q, p, grid, Exec::default())
}

pub fn kl_numeric_base_with(
    q: &WrappedDensity,
    p: &WrappedDensity,
    grid: GridSpec,
    exec: Exec,
) -> Result<NumericKl> {
    if q.map != p.map {
        return Err(domain("pushforwards live on different coverings"));
    }
    let raw = integrate_base(&q.map, grid, exec, |x| {
        let lq = q.log_pdf(x)?;
        let lp = p.log_pdf(x)?;
        if lp == f64::NEG_INFINITY {
            return Err(domain(format!("reference density vanishes at {x:?}")));
        }
        if lq == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        Ok(lq.exp() * (lq - lp))
    })?;
    if !raw.is_finite() {
        return Err(domain("numeric KL is not finite"));
    }
    Ok(NumericKl {
        raw,
        value: raw.max(0.0),
        clamped: raw < 0.0,
    })
}

/// Both sides of the log-sum inequality at one base point:
/// `(Σq) ln(Σq / Σp)` and `Σ q ln(q / p)` over a common fibre window.
pub fn log_sum_terms(q: &WrappedDensity, p: &WrappedDensity, base: &[f64]) -> Result<(f64, f64)> {
    if q.map != p.map {
        return Err(domain("pushforwards live on different coverings"));
    }
    let map = q.map;
    // A window around the origin cell wide enough to reach both means.
    let reach = |w: &WrappedDensity| w.window as i64 + w.deck.cells.0.abs().max(w.deck.cells.1.abs()) + 1;
    let window = reach(q).max(reach(p)) as usize;
    let (mut sq, mut sp, mut rhs) = (Vec::new(), Vec::new(), 0.0);
    map.for_each_preimage(base, window, |x, _| {
        let (lq, lp) = (q.params.log_pdf(x), p.params.log_pdf(x));
        sq.push(lq);
        sp.push(lp);
        if lq > f64::NEG_INFINITY {
            rhs += lq.exp() * (lq - lp);
        }
    })?;
    let (lq, lp) = (log_sum_exp(&sq), log_sum_exp(&sp));
    Ok((lq.exp() * (lq - lp), rhs))
}
