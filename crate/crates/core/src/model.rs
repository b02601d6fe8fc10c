//! Itô market models `dS = a(t, S) dt + c(t, S)^{1/2} dW` and their
//! simulation.
//!
//! The drift `a` is the density of the finite-variation part `A = ∫ a dt` and
//! `c` is the density of `[M, M] = ∫ c dt` with respect to calendar time.
//! Against the trace clock `G = ∫ trace(c) dt` the same objects read
//! `A = ∫ (a / g) dG`, `[M, M] = ∫ (c / g) dG` with `g = trace(c)`; every
//! quantity computed downstream (`ρ = c†a`, `⟨ρ, cρ⟩ dG`) is invariant under
//! that rescaling, so calendar-time densities are used throughout.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{stream_rng, PathBundle, TimeGrid};
use crate::linalg::{mat_vec, SymEigen};

/// Eigenvalues of `c` below `CLAMP_TOL * λ_max` are clamped to zero when
/// taking square roots.
pub const CLAMP_TOL: f64 = 1e-12;

/// Negative eigenvalues larger than `PSD_TOL * λ_max` in magnitude make `c`
/// invalid.
pub const PSD_TOL: f64 = 1e-10;

/// Coefficient function `(t, s, out)`; `out` has length `d` for the drift
/// and `d * d` (row-major) for the covariance.
pub type CoefFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Closed-form functional of the horizon `T`.
pub type HorizonFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Distributionally exact sampler of the price at grid nodes.
pub trait ExactSampler: Send + Sync {
    /// Number of Brownian coordinates consumed per step.
    fn noise_dim(&self) -> usize;

    /// Write the price path into `out` (`(n + 1) * d`). When `noise` is given
    /// (`(n + 1) * noise_dim`), the driving Brownian path is recorded there.
    fn sample_path(
        &self,
        grid: &TimeGrid,
        s0: &[f64],
        rng: &mut ChaCha8Rng,
        out: &mut [f64],
        noise: Option<&mut [f64]>,
    );
}

/// Known closed forms used by the catalog agreement tests.
#[derive(Clone, Default)]
pub struct ClosedForm {
    /// `|λ|`, the norm of the risk premium, when it is constant.
    pub sharpe: Option<f64>,
    /// `E[S_T]` per component, as a function of `T`.
    pub terminal_mean: Option<Vec<HorizonFn>>,
    /// `E[Y_T]` for the deflator built from `ρ = c†a`.
    pub deflator_mean: Option<HorizonFn>,
}

impl fmt::Debug for ClosedForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClosedForm")
            .field("sharpe", &self.sharpe)
            .field("terminal_mean", &self.terminal_mean.as_ref().map(|v| v.len()))
            .field("deflator_mean", &self.deflator_mean.is_some())
            .finish()
    }
}

#[derive(Clone)]
pub struct MarketModel {
    name: String,
    dim: usize,
    s0: Vec<f64>,
    drift: CoefFn,
    covariance: CoefFn,
    exact: Option<Arc<dyn ExactSampler>>,
    closed_form: ClosedForm,
    max_horizon: Option<f64>,
    positive_prices: bool,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("s0", &self.s0)
            .field("exact_sampler", &self.exact.is_some())
            .field("closed_form", &self.closed_form)
            .finish()
    }
}

impl MarketModel {
    pub fn new(name: impl Into<String>, s0: Vec<f64>, drift: CoefFn, covariance: CoefFn) -> Result<Self> {
        if s0.is_empty() {
            return Err(Error::invalid("model dimension must be positive"));
        }
        if s0.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("initial price must be finite"));
        }
        Ok(Self {
            name: name.into(),
            dim: s0.len(),
            s0,
            drift,
            covariance,
            exact: None,
            closed_form: ClosedForm::default(),
            max_horizon: None,
            positive_prices: false,
        })
    }

    pub fn with_exact_sampler(mut self, sampler: Arc<dyn ExactSampler>) -> Self {
        self.exact = Some(sampler);
        self
    }

    pub fn with_closed_form(mut self, closed_form: ClosedForm) -> Self {
        self.closed_form = closed_form;
        self
    }

    /// Coefficients are only defined on `[0, horizon)`.
    pub fn with_max_horizon(mut self, horizon: f64) -> Self {
        self.max_horizon = Some(horizon);
        self
    }

    /// Declare that prices stay strictly positive (needed for wealth-fraction
    /// strategies).
    pub fn with_positive_prices(mut self) -> Self {
        self.positive_prices = true;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn s0(&self) -> &[f64] {
        &self.s0
    }

    pub fn closed_form(&self) -> &ClosedForm {
        &self.closed_form
    }

    pub fn has_exact_sampler(&self) -> bool {
        self.exact.is_some()
    }

    pub fn positive_prices(&self) -> bool {
        self.positive_prices
    }

    /// Brownian coordinates per step.
    pub fn noise_dim(&self) -> usize {
        self.exact.as_ref().map_or(self.dim, |e| e.noise_dim())
    }

    #[inline]
    pub fn drift(&self, t: f64, s: &[f64], out: &mut [f64]) {
        (self.drift)(t, s, out)
    }

    #[inline]
    pub fn covariance(&self, t: f64, s: &[f64], out: &mut [f64]) {
        (self.covariance)(t, s, out)
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if let Some(h) = self.max_horizon {
            if grid.horizon() > h * (1.0 + 1e-12) {
                return Err(Error::invalid(format!(
                    "model `{}` is only defined up to T = {h}, grid runs to {}",
                    self.name,
                    grid.horizon()
                )));
            }
        }
        Ok(())
    }
}

/// Scratch buffers for stepping one path.
#[derive(Debug, Clone)]
pub struct StepWorkspace {
    a: Vec<f64>,
    c: Vec<f64>,
    root: Vec<f64>,
    z: Vec<f64>,
    shock: Vec<f64>,
    eig: SymEigen,
}

impl StepWorkspace {
    pub fn new(dim: usize) -> Self {
        Self {
            a: vec![0.0; dim],
            c: vec![0.0; dim * dim],
            root: vec![0.0; dim * dim],
            z: vec![0.0; dim],
            shock: vec![0.0; dim],
            eig: SymEigen::new(dim),
        }
    }
}

/// Validate `c` as PSD and write its symmetric square root into `root`.
pub(crate) fn psd_root(t: f64, c: &[f64], eig: &mut SymEigen, root: &mut [f64]) -> Result<()> {
    if eig.dim() == 1 {
        let v = c[0];
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite covariance at t = {t}")));
        }
        if v < 0.0 {
            return Err(Error::NotPsd {
                t,
                min_eigenvalue: v,
                max_eigenvalue: v,
            });
        }
        root[0] = v.sqrt();
        return Ok(());
    }
    eig.decompose(c)?;
    let (lo, hi) = (eig.min_value(), eig.max_value());
    if lo < -PSD_TOL * hi.max(0.0) && lo < 0.0 {
        return Err(Error::NotPsd {
            t,
            min_eigenvalue: lo,
            max_eigenvalue: hi,
        });
    }
    eig.sqrt_into(CLAMP_TOL, root);
    Ok(())
}

/// Generate path `stream` of `model` into `out` (`(n + 1) * d`).
///
/// Returns `Ok(false)` when the path overflowed and must be excluded. With an
/// exact sampler the sampler is used, otherwise Euler–Maruyama:
/// `S_{i+1} = S_i + a(t_i, S_i) Δt + c^{1/2}(t_i, S_i) ΔW`.
pub fn simulate_path(
    model: &MarketModel,
    grid: &TimeGrid,
    seed: u64,
    stream: u64,
    out: &mut [f64],
    mut noise: Option<&mut [f64]>,
    ws: &mut StepWorkspace,
) -> Result<bool> {
    let d = model.dim;
    let mut rng = stream_rng(seed, stream);
    if let Some(exact) = &model.exact {
        exact.sample_path(grid, &model.s0, &mut rng, out, noise);
        return Ok(out.iter().all(|x| x.is_finite()));
    }
    out[..d].copy_from_slice(&model.s0);
    if let Some(w) = noise.as_deref_mut() {
        w[..d].fill(0.0);
    }
    for i in 0..grid.steps() {
        let t = grid.nodes()[i];
        let dt = grid.dt(i);
        let sd = dt.sqrt();
        let (head, tail) = out.split_at_mut((i + 1) * d);
        let s = &head[i * d..];
        let next = &mut tail[..d];
        model.drift(t, s, &mut ws.a);
        model.covariance(t, s, &mut ws.c);
        psd_root(t, &ws.c, &mut ws.eig, &mut ws.root)?;
        for k in 0..d {
            ws.z[k] = sd * rng.sample::<f64, _>(StandardNormal);
        }
        if let Some(w) = noise.as_deref_mut() {
            for k in 0..d {
                w[(i + 1) * d + k] = w[i * d + k] + ws.z[k];
            }
        }
        mat_vec(&ws.root, &ws.z, &mut ws.shock);
        let mut finite = true;
        for k in 0..d {
            next[k] = s[k] + ws.a[k] * dt + ws.shock[k];
            finite &= next[k].is_finite();
        }
        if !finite {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Simulate `m` paths; overflowing paths are dropped and counted.
pub fn simulate(model: &MarketModel, grid: &TimeGrid, m: usize, seed: u64) -> Result<PathBundle> {
    Ok(simulate_impl(model, grid, m, seed, false)?.0)
}

/// Like [`simulate`], also returning the driving Brownian paths of the
/// retained paths (dimension [`MarketModel::noise_dim`]).
pub fn simulate_with_noise(
    model: &MarketModel,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
) -> Result<(PathBundle, PathBundle)> {
    let (s, w) = simulate_impl(model, grid, m, seed, true)?;
    Ok((s, w.expect("noise requested")))
}

fn simulate_impl(
    model: &MarketModel,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    with_noise: bool,
) -> Result<(PathBundle, Option<PathBundle>)> {
    if m == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    model.check_grid(grid)?;
    let d = model.dim;
    let nd = model.noise_dim();
    let len = (grid.steps() + 1) * d;
    let wlen = (grid.steps() + 1) * nd;
    let results: Vec<Result<Option<(Vec<f64>, Vec<f64>)>>> = (0..m)
        .into_par_iter()
        .map_init(
            || StepWorkspace::new(d),
            |ws, p| {
                let mut s = vec![0.0; len];
                let mut w = if with_noise { vec![0.0; wlen] } else { Vec::new() };
                let noise = if with_noise { Some(&mut w[..]) } else { None };
                let ok = simulate_path(model, grid, seed, p as u64, &mut s, noise, ws)?;
                Ok(ok.then_some((s, w)))
            },
        )
        .collect();
    let mut values = Vec::with_capacity(m * len);
    let mut noise = Vec::with_capacity(if with_noise { m * wlen } else { 0 });
    let mut ids = Vec::with_capacity(m);
    let mut excluded = 0;
    for (p, r) in results.into_iter().enumerate() {
        match r? {
            Some((s, w)) => {
                values.extend_from_slice(&s);
                noise.extend_from_slice(&w);
                ids.push(p as u64);
            }
            None => excluded += 1,
        }
    }
    if ids.is_empty() {
        return Err(Error::ExclusionRate {
            excluded,
            total: m,
            limit_percent: 0.1,
        });
    }
    let w = if with_noise {
        Some(PathBundle::new(grid.clone(), nd, noise, seed, ids.clone())?.with_excluded(excluded))
    } else {
        None
    };
    let s = PathBundle::new(grid.clone(), d, values, seed, ids)?.with_excluded(excluded);
    Ok((s, w))
}

/// Realized and model-implied quadratic covariation along every path.
#[derive(Debug, Clone)]
pub struct QuadraticVariation {
    pub dim: usize,
    pub steps: usize,
    /// `Σ ΔS ΔS^T`, shape `m × (n + 1) × d × d`.
    pub realized: Vec<f64>,
    /// `Σ c(t_i, S_{t_i}) Δt`, same shape.
    pub implied: Vec<f64>,
}

impl QuadraticVariation {
    fn offset(&self, p: usize, i: usize) -> usize {
        (p * (self.steps + 1) + i) * self.dim * self.dim
    }

    pub fn realized_at(&self, p: usize, i: usize) -> &[f64] {
        let o = self.offset(p, i);
        &self.realized[o..o + self.dim * self.dim]
    }

    pub fn implied_at(&self, p: usize, i: usize) -> &[f64] {
        let o = self.offset(p, i);
        &self.implied[o..o + self.dim * self.dim]
    }
}

pub fn quadratic_variation(bundle: &PathBundle, model: &MarketModel) -> Result<QuadraticVariation> {
    let d = bundle.dim();
    if d != model.dim() {
        return Err(Error::ShapeMismatch(format!(
            "bundle has dimension {d}, model {}",
            model.dim()
        )));
    }
    let n = bundle.grid().steps();
    let dd = d * d;
    let per = (n + 1) * dd;
    let grid = bundle.grid();
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let mut real = vec![0.0; per];
            let mut imp = vec![0.0; per];
            let mut c = vec![0.0; dd];
            for i in 0..n {
                let s = bundle.at(p, i);
                let s1 = bundle.at(p, i + 1);
                model.covariance(grid.nodes()[i], s, &mut c);
                let dt = grid.dt(i);
                for a in 0..d {
                    for b in 0..d {
                        let k = a * d + b;
                        real[(i + 1) * dd + k] = real[i * dd + k] + (s1[a] - s[a]) * (s1[b] - s[b]);
                        imp[(i + 1) * dd + k] = imp[i * dd + k] + c[k] * dt;
                    }
                }
            }
            (real, imp)
        })
        .collect();
    let mut realized = Vec::with_capacity(bundle.paths() * per);
    let mut implied = Vec::with_capacity(bundle.paths() * per);
    for (r, i) in chunks {
        realized.extend(r);
        implied.extend(i);
    }
    Ok(QuadraticVariation {
        dim: d,
        steps: n,
        realized,
        implied,
    })
}

/// Left-point Itô sums `Σ ⟨ϑ_{t_i}, S_{t_{i+1}} - S_{t_i}⟩`. Only nodes
/// `0..n` of the integrand are read.
pub fn stochastic_integral(integrand: &PathBundle, integrator: &PathBundle) -> Result<PathBundle> {
    if integrand.dim() != integrator.dim()
        || integrand.paths() != integrator.paths()
        || integrand.grid() != integrator.grid()
    {
        return Err(Error::ShapeMismatch(format!(
            "integrand {}x{}x{} vs integrator {}x{}x{}",
            integrand.paths(),
            integrand.grid().steps() + 1,
            integrand.dim(),
            integrator.paths(),
            integrator.grid().steps() + 1,
            integrator.dim()
        )));
    }
    let n = integrator.grid().steps();
    let mut values = vec![0.0; integrator.paths() * (n + 1)];
    values
        .par_chunks_mut(n + 1)
        .enumerate()
        .for_each(|(p, out)| {
            for i in 0..n {
                let th = integrand.at(p, i);
                let s = integrator.at(p, i);
                let s1 = integrator.at(p, i + 1);
                let inc: f64 = th.iter().zip(s.iter().zip(s1)).map(|(t, (a, b))| t * (b - a)).sum();
                out[i + 1] = out[i] + inc;
            }
        });
    PathBundle::new(
        integrator.grid().clone(),
        1,
        values,
        integrator.seed(),
        integrator.stream_ids().to_vec(),
    )
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

/// Norm of a 3-dimensional Brownian motion started at `(s0, 0, 0)`.
#[derive(Debug, Clone, Copy)]
pub struct Bessel3Sampler;

impl ExactSampler for Bessel3Sampler {
    fn noise_dim(&self) -> usize {
        3
    }

    fn sample_path(
        &self,
        grid: &TimeGrid,
        s0: &[f64],
        rng: &mut ChaCha8Rng,
        out: &mut [f64],
        mut noise: Option<&mut [f64]>,
    ) {
        let mut x = [s0[0], 0.0, 0.0];
        out[0] = s0[0].abs();
        if let Some(w) = noise.as_deref_mut() {
            w[..3].fill(0.0);
        }
        for i in 0..grid.steps() {
            let sd = grid.dt(i).sqrt();
            for k in 0..3 {
                let z = sd * rng.sample::<f64, _>(StandardNormal);
                x[k] += z;
                if let Some(w) = noise.as_deref_mut() {
                    w[(i + 1) * 3 + k] = w[i * 3 + k] + z;
                }
            }
            out[i + 1] = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        }
    }
}

/// Deterministic `S_t = S_0 + a t`, evaluated at the grid nodes.
#[derive(Debug, Clone)]
pub struct LinearDriftSampler {
    pub rate: Vec<f64>,
}

impl ExactSampler for LinearDriftSampler {
    fn noise_dim(&self) -> usize {
        self.rate.len()
    }

    fn sample_path(
        &self,
        grid: &TimeGrid,
        s0: &[f64],
        _rng: &mut ChaCha8Rng,
        out: &mut [f64],
        noise: Option<&mut [f64]>,
    ) {
        let d = self.rate.len();
        for (i, t) in grid.nodes().iter().enumerate() {
            for k in 0..d {
                out[i * d + k] = s0[k] + self.rate[k] * t;
            }
        }
        if let Some(w) = noise {
            w.fill(0.0);
        }
    }
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().cdf(x)
}

/// Parameter names and defaults accepted by a catalog entry.
#[derive(Debug, Clone, Serialize)]
pub struct ModelCatalogEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub params: &'static [(&'static str, f64)],
}

pub const CATALOG: &[ModelCatalogEntry] = &[
    ModelCatalogEntry {
        name: "black-scholes",
        description: "geometric Brownian motion dS = mu S dt + sigma S dW",
        params: &[("mu", 0.05), ("sigma", 0.2), ("s0", 1.0)],
    },
    ModelCatalogEntry {
        name: "zero-drift",
        description: "driftless geometric Brownian motion",
        params: &[("sigma", 0.2), ("s0", 1.0)],
    },
    ModelCatalogEntry {
        name: "correlated-bs",
        description: "two correlated geometric Brownian motions",
        params: &[
            ("mu1", 0.05),
            ("mu2", 0.08),
            ("sigma1", 0.2),
            ("sigma2", 0.3),
            ("corr", 0.5),
            ("s01", 1.0),
            ("s02", 1.0),
        ],
    },
    ModelCatalogEntry {
        name: "bessel3",
        description: "three-dimensional Bessel process, sampled exactly",
        params: &[("s0", 1.0)],
    },
    ModelCatalogEntry {
        name: "pure-drift",
        description: "riskless drift dS = a dt (no noise)",
        params: &[("a", 1.0), ("s0", 0.0)],
    },
    ModelCatalogEntry {
        name: "exploding-sharpe",
        description: "dS = (H - t)^(-1/2) dt + dW on [0, H)",
        params: &[("horizon", 1.0), ("s0", 0.0)],
    },
    ModelCatalogEntry {
        name: "rank-deficient",
        description: "three assets with a rank-2 covariance; kernel_drift != 0 breaks the range condition",
        params: &[("kernel_drift", 1.0), ("range_drift", 0.5)],
    },
];

pub fn catalog_entry(name: &str) -> Option<&'static ModelCatalogEntry> {
    CATALOG.iter().find(|e| e.name == name)
}

/// Build a catalog model; unspecified parameters take their defaults and
/// unknown parameter names are rejected.
pub fn from_catalog(name: &str, params: &BTreeMap<String, f64>) -> Result<MarketModel> {
    let entry = catalog_entry(name).ok_or_else(|| Error::UnknownModel(name.to_string()))?;
    for (k, v) in params {
        if !entry.params.iter().any(|(p, _)| p == k) {
            return Err(Error::invalid(format!(
                "model `{name}` has no parameter `{k}` (expected one of: {})",
                entry.params.iter().map(|(p, _)| *p).collect::<Vec<_>>().join(", ")
            )));
        }
        if !v.is_finite() {
            return Err(Error::invalid(format!("parameter `{k}` must be finite")));
        }
    }
    let get = |k: &str| -> f64 {
        params
            .get(k)
            .copied()
            .unwrap_or_else(|| entry.params.iter().find(|(p, _)| *p == k).unwrap().1)
    };
    match name {
        "black-scholes" => black_scholes(get("mu"), get("sigma"), get("s0")),
        "zero-drift" => black_scholes(0.0, get("sigma"), get("s0")).map(|m| rename(m, "zero-drift")),
        "correlated-bs" => correlated_bs(
            [get("mu1"), get("mu2")],
            [get("sigma1"), get("sigma2")],
            get("corr"),
            [get("s01"), get("s02")],
        ),
        "bessel3" => bessel3(get("s0")),
        "pure-drift" => pure_drift(get("a"), get("s0")),
        "exploding-sharpe" => exploding_sharpe(get("horizon"), get("s0")),
        "rank-deficient" => rank_deficient(get("kernel_drift"), get("range_drift")),
        _ => unreachable!("catalog entry without constructor"),
    }
}

fn rename(mut m: MarketModel, name: &str) -> MarketModel {
    m.name = name.to_string();
    m
}

pub fn black_scholes(mu: f64, sigma: f64, s0: f64) -> Result<MarketModel> {
    if sigma < 0.0 || s0 <= 0.0 {
        return Err(Error::invalid("black-scholes needs sigma >= 0 and s0 > 0"));
    }
    let sharpe = if sigma > 0.0 { Some((mu / sigma).abs()) } else { None };
    let closed = ClosedForm {
        sharpe,
        terminal_mean: Some(vec![Arc::new(move |t: f64| s0 * (mu * t).exp())]),
        deflator_mean: sharpe.map(|_| Arc::new(|_t: f64| 1.0) as HorizonFn),
    };
    let model = MarketModel::new(
        "black-scholes",
        vec![s0],
        Arc::new(move |_t, s, out| out[0] = mu * s[0]),
        Arc::new(move |_t, s, out| out[0] = sigma * sigma * s[0] * s[0]),
    )?
    .with_closed_form(closed)
    .with_positive_prices();
    Ok(model)
}

pub fn correlated_bs(mu: [f64; 2], sigma: [f64; 2], corr: f64, s0: [f64; 2]) -> Result<MarketModel> {
    if !(corr > -1.0 && corr < 1.0) || sigma.iter().any(|s| *s <= 0.0) || s0.iter().any(|s| *s <= 0.0) {
        return Err(Error::invalid(
            "correlated-bs needs |corr| < 1, positive volatilities and prices",
        ));
    }
    // |λ|² = m^T Σ^{-1} m with Σ the return covariance
    let (a, b) = (mu[0] / sigma[0], mu[1] / sigma[1]);
    let sharpe_sq = (a * a - 2.0 * corr * a * b + b * b) / (1.0 - corr * corr);
    let closed = ClosedForm {
        sharpe: Some(sharpe_sq.sqrt()),
        terminal_mean: Some(vec![
            Arc::new(move |t: f64| s0[0] * (mu[0] * t).exp()),
            Arc::new(move |t: f64| s0[1] * (mu[1] * t).exp()),
        ]),
        deflator_mean: Some(Arc::new(|_t| 1.0)),
    };
    Ok(MarketModel::new(
        "correlated-bs",
        s0.to_vec(),
        Arc::new(move |_t, s, out| {
            out[0] = mu[0] * s[0];
            out[1] = mu[1] * s[1];
        }),
        Arc::new(move |_t, s, out| {
            let v0 = sigma[0] * s[0];
            let v1 = sigma[1] * s[1];
            out[0] = v0 * v0;
            out[1] = corr * v0 * v1;
            out[2] = out[1];
            out[3] = v1 * v1;
        }),
    )?
    .with_closed_form(closed)
    .with_positive_prices())
}

pub fn bessel3(s0: f64) -> Result<MarketModel> {
    if s0 <= 0.0 {
        return Err(Error::invalid("bessel3 needs s0 > 0"));
    }
    let closed = ClosedForm {
        sharpe: None,
        terminal_mean: None,
        // E[s0 / S_T] = 2Φ(s0/√T) − 1
        deflator_mean: Some(Arc::new(move |t: f64| 2.0 * normal_cdf(s0 / t.sqrt()) - 1.0)),
    };
    Ok(MarketModel::new(
        "bessel3",
        vec![s0],
        Arc::new(|_t, s, out| out[0] = 1.0 / s[0]),
        Arc::new(|_t, _s, out| out[0] = 1.0),
    )?
    .with_exact_sampler(Arc::new(Bessel3Sampler))
    .with_closed_form(closed)
    .with_positive_prices())
}

pub fn pure_drift(a: f64, s0: f64) -> Result<MarketModel> {
    let closed = ClosedForm {
        sharpe: None,
        terminal_mean: Some(vec![Arc::new(move |t: f64| s0 + a * t)]),
        deflator_mean: None,
    };
    Ok(MarketModel::new(
        "pure-drift",
        vec![s0],
        Arc::new(move |_t, _s, out| out[0] = a),
        Arc::new(|_t, _s, out| out[0] = 0.0),
    )?
    .with_exact_sampler(Arc::new(LinearDriftSampler { rate: vec![a] }))
    .with_closed_form(closed))
}

pub fn exploding_sharpe(horizon: f64, s0: f64) -> Result<MarketModel> {
    if horizon <= 0.0 {
        return Err(Error::invalid("exploding-sharpe needs horizon > 0"));
    }
    Ok(MarketModel::new(
        "exploding-sharpe",
        vec![s0],
        Arc::new(move |t, _s, out| out[0] = (horizon - t).powf(-0.5)),
        Arc::new(|_t, _s, out| out[0] = 1.0),
    )?
    .with_max_horizon(horizon))
}

/// Kernel direction of the rank-deficient catalog covariance.
pub const RANK_DEFICIENT_KERNEL: [f64; 3] = [
    0.577_350_269_189_625_8,
    0.577_350_269_189_625_8,
    0.577_350_269_189_625_8,
];

pub fn rank_deficient(kernel_drift: f64, range_drift: f64) -> Result<MarketModel> {
    let u = RANK_DEFICIENT_KERNEL;
    let v = [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2, 0.0];
    // c = 0.04 (I − u u^T) + 0.02 v v^T: rank 2, kernel spanned by u
    let mut c = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            c[i * 3 + j] = 0.04 * (id - u[i] * u[j]) + 0.02 * v[i] * v[j];
        }
    }
    let drift: [f64; 3] = std::array::from_fn(|k| range_drift * 0.1 * v[k] + kernel_drift * u[k]);
    Ok(MarketModel::new(
        "rank-deficient",
        vec![1.0, 1.0, 1.0],
        Arc::new(move |_t, _s, out| out.copy_from_slice(&drift)),
        Arc::new(move |_t, _s, out| out.copy_from_slice(&c)),
    )?)
}

/// Cross-sectional statistics of one asset at one report time.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalRow {
    pub t: f64,
    pub asset: usize,
    pub mean: f64,
    pub se: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub model: String,
    pub paths: usize,
    pub excluded: usize,
    pub terminal_mean: Vec<f64>,
    pub terminal_se: Vec<f64>,
    /// `E[S_T]` where the catalog knows it.
    pub closed_form_terminal_mean: Option<Vec<f64>>,
    pub marginals: Vec<MarginalRow>,
}

/// Simulate `m` paths keeping only `points + 1` report times per path.
pub fn simulation_summary(
    model: &MarketModel,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    points: usize,
) -> Result<SimulationSummary> {
    if m < 2 {
        return Err(Error::invalid("need at least two paths"));
    }
    model.check_grid(grid)?;
    let d = model.dim;
    let n = grid.steps();
    let idx: Vec<usize> = {
        let points = points.clamp(1, n);
        let mut v: Vec<usize> = (0..=points).map(|j| j * n / points).collect();
        v.dedup();
        v
    };
    let rows: Vec<Result<Option<Vec<f64>>>> = (0..m)
        .into_par_iter()
        .map_init(
            || (StepWorkspace::new(d), vec![0.0; (n + 1) * d]),
            |(ws, s), p| {
                if !simulate_path(model, grid, seed, p as u64, s, None, ws)? {
                    return Ok(None);
                }
                Ok(Some(idx.iter().flat_map(|&i| s[i * d..(i + 1) * d].to_vec()).collect()))
            },
        )
        .collect();
    let mut kept = Vec::with_capacity(m);
    let mut excluded = 0;
    for r in rows {
        match r? {
            Some(v) => kept.push(v),
            None => excluded += 1,
        }
    }
    if excluded > 0 && excluded * 1000 >= m {
        return Err(Error::ExclusionRate {
            excluded,
            total: m,
            limit_percent: 0.1,
        });
    }
    let k = kept.len() as f64;
    let mut marginals = Vec::with_capacity(idx.len() * d);
    for (j, &i) in idx.iter().enumerate() {
        for a in 0..d {
            let mut xs: Vec<f64> = kept.iter().map(|v| v[j * d + a]).collect();
            let mean = xs.iter().sum::<f64>() / k;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
            xs.sort_by(|a, b| a.total_cmp(b));
            let q = |p: f64| {
                let pos = p * (xs.len() - 1) as f64;
                let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
                xs[lo] + (xs[hi] - xs[lo]) * (pos - lo as f64)
            };
            marginals.push(MarginalRow {
                t: grid.nodes()[i],
                asset: a,
                mean,
                se: (var / k).sqrt(),
                q05: q(0.05),
                q50: q(0.5),
                q95: q(0.95),
            });
        }
    }
    let last = &marginals[marginals.len() - d..];
    Ok(SimulationSummary {
        model: model.name.clone(),
        paths: kept.len(),
        excluded,
        terminal_mean: last.iter().map(|r| r.mean).collect(),
        terminal_se: last.iter().map(|r| r.se).collect(),
        closed_form_terminal_mean: model
            .closed_form
            .terminal_mean
            .as_ref()
            .map(|fs| fs.iter().map(|f| f(grid.horizon())).collect()),
        marginals,
    })
}
