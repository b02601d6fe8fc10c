//! Deflators, wealth processes and martingale diagnostics.
//!
//! The deflator `Y = exp(−∫⟨ρ, dS⟩ + ½∫⟨ρ, cρ⟩ dt)` and the numéraire
//! portfolio `X = 1/Y` are built from one shared pair of discrete sums per
//! path. Both are stored as logarithms so that `Y · X = 1` holds exactly.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::{PathBundle, TimeGrid};
use crate::linalg::dot;
use crate::model::{simulate_path, MarketModel, StepWorkspace};
use crate::structure::{
    analyze_path, Na1Class, NodeAnalyzer, PathSeries, RiskPremiumReport, EXCLUSION_LIMIT, RANK_TOL,
};

/// How one grid step of a stochastic exponential is discretized.
///
/// With `g = ⟨π, ΔS⟩` and `q = ⟨π, cπ⟩`:
/// - `Multiplicative`: `X_{i+1} = X_i (1 + g)`, the self-financing fractional
///   recursion. Requires `1 + g > 0`.
/// - `Exponential`: `X_{i+1} = X_i exp(g − ½ q Δt)`, the exact wealth of a
///   fractional strategy held over a step with frozen coefficients.
///
/// The deflator is the reciprocal of the wealth with `π = ρ`. For Euler
/// Black–Scholes the exponential form reproduces `exp(−λW − ½λ²t)` exactly;
/// for the exactly sampled Bessel(3) process the multiplicative form gives
/// `Y = S_0/S` exactly, while the exponential one carries a
/// `½ Σ S^{-2} Δt` term that is badly biased near zero on coarse grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GrowthScheme {
    #[default]
    Multiplicative,
    Exponential,
}

impl GrowthScheme {
    /// `log(X_{i+1}/X_i)`, or `None` when the step ruins the position.
    #[inline]
    pub fn log_step(self, g: f64, q: f64, dt: f64) -> Option<f64> {
        let l = match self {
            GrowthScheme::Multiplicative => {
                if g <= -1.0 {
                    return None;
                }
                g.ln_1p()
            }
            GrowthScheme::Exponential => g - 0.5 * q * dt,
        };
        l.is_finite().then_some(l)
    }
}

impl std::str::FromStr for GrowthScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" => Ok(GrowthScheme::Multiplicative),
            "exponential" => Ok(GrowthScheme::Exponential),
            _ => Err(Error::Config(format!(
                "unknown scheme `{s}` (expected multiplicative or exponential)"
            ))),
        }
    }
}

/// Mean and standard error, summed in index order.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Fill the cumulative sums `∫⟨ρ, dS⟩`, `∫⟨ρ, cρ⟩ dt` and `log Y` along one
/// path. Returns `false` when the path has to be excluded.
pub(crate) fn deflator_log_path(
    scheme: GrowthScheme,
    grid: &TimeGrid,
    s: &[f64],
    series: &PathSeries,
    log_y: &mut [f64],
    gain: &mut [f64],
    mass: &mut [f64],
) -> bool {
    let d = series.dim;
    log_y[0] = 0.0;
    gain[0] = 0.0;
    mass[0] = 0.0;
    let mut ds = vec![0.0; d];
    for i in 0..grid.steps() {
        for k in 0..d {
            ds[k] = s[(i + 1) * d + k] - s[i * d + k];
        }
        let dt = grid.dt(i);
        let g = dot(series.rho_at(i), &ds);
        let q = series.mass_rate[i];
        let Some(l) = scheme.log_step(g, q, dt) else {
            return false;
        };
        gain[i + 1] = gain[i] + g;
        mass[i + 1] = mass[i] + q * dt;
        log_y[i + 1] = log_y[i] - l;
    }
    log_y.iter().all(|x| x.is_finite())
}

/// Deflator paths with the shared discrete integrals used to build them.
#[derive(Debug, Clone)]
pub struct DeflatorPath {
    pub grid: TimeGrid,
    pub scheme: GrowthScheme,
    /// `log Y`, path-major, `n + 1` values per path.
    pub log_y: Vec<f64>,
    /// `Σ ⟨ρ_i, ΔS_i⟩`, cumulative.
    pub gain: Vec<f64>,
    /// `Σ ⟨ρ_i, cρ_i⟩ Δt_i`, cumulative.
    pub mass: Vec<f64>,
    /// Bundle path index of every retained path.
    pub kept: Vec<usize>,
    pub excluded: usize,
    /// Set when the model was not classified `NA1_OK`.
    pub warning: Option<String>,
}

impl DeflatorPath {
    pub fn paths(&self) -> usize {
        self.kept.len()
    }

    fn len(&self) -> usize {
        self.grid.steps() + 1
    }

    pub fn log_path(&self, p: usize) -> &[f64] {
        &self.log_y[p * self.len()..(p + 1) * self.len()]
    }

    pub fn y(&self, p: usize, i: usize) -> f64 {
        self.log_y[p * self.len() + i].exp()
    }

    pub fn terminal(&self) -> Vec<f64> {
        (0..self.paths()).map(|p| self.y(p, self.len() - 1)).collect()
    }

    /// `Ê[Y_T]` and its standard error.
    pub fn strictness(&self) -> (f64, f64) {
        mean_se(&self.terminal())
    }

    /// `Y` as a one-dimensional bundle.
    pub fn as_bundle(&self) -> Result<PathBundle> {
        let values = self.log_y.iter().map(|l| l.exp()).collect();
        PathBundle::new(
            self.grid.clone(),
            1,
            values,
            0,
            self.kept.iter().map(|&p| p as u64).collect(),
        )
    }

    /// Record the model's classification; anything but `NA1_OK` is flagged.
    pub fn with_classification(mut self, class: Na1Class) -> Self {
        if class != Na1Class::Na1Ok {
            self.warning = Some(format!("model classified {class}; deflator may not exist"));
        }
        self
    }
}

fn check_report(report: &RiskPremiumReport, bundle: &PathBundle) -> Result<()> {
    if report.paths() != bundle.paths() || report.grid != *bundle.grid() || report.dim != bundle.dim() {
        return Err(Error::ShapeMismatch(
            "risk premium report does not belong to this bundle".into(),
        ));
    }
    if report.classification == Some(Na1Class::StructureFail) {
        return Err(Error::refused(format!(
            "drift is outside the range of the covariance on {:.1}% of paths; no deflator exists",
            100.0 * report.structure_fail_share()
        )));
    }
    Ok(())
}

/// Build `Y` from `ρ` and the price increments.
pub fn build_deflator(
    report: &RiskPremiumReport,
    bundle: &PathBundle,
    scheme: GrowthScheme,
) -> Result<DeflatorPath> {
    check_report(report, bundle)?;
    let grid = bundle.grid().clone();
    let len = grid.steps() + 1;
    let rows: Vec<Option<(Vec<f64>, Vec<f64>, Vec<f64>)>> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let mut ly = vec![0.0; len];
            let mut g = vec![0.0; len];
            let mut k = vec![0.0; len];
            deflator_log_path(scheme, &grid, bundle.path(p), &report.series[p], &mut ly, &mut g, &mut k)
                .then_some((ly, g, k))
        })
        .collect();
    let mut out = DeflatorPath {
        grid,
        scheme,
        log_y: Vec::with_capacity(bundle.paths() * len),
        gain: Vec::with_capacity(bundle.paths() * len),
        mass: Vec::with_capacity(bundle.paths() * len),
        kept: Vec::with_capacity(bundle.paths()),
        excluded: 0,
        warning: None,
    };
    for (p, r) in rows.into_iter().enumerate() {
        match r {
            Some((ly, g, k)) => {
                out.log_y.extend_from_slice(&ly);
                out.gain.extend_from_slice(&g);
                out.mass.extend_from_slice(&k);
                out.kept.push(p);
            }
            None => out.excluded += 1,
        }
    }
    check_exclusion(out.excluded, bundle.paths())?;
    Ok(out)
}

fn check_exclusion(excluded: usize, total: usize) -> Result<()> {
    if excluded > 0 && excluded as f64 >= EXCLUSION_LIMIT * total as f64 {
        return Err(Error::ExclusionRate {
            excluded,
            total,
            limit_percent: EXCLUSION_LIMIT * 100.0,
        });
    }
    Ok(())
}

/// The numéraire portfolio `π = ρ`, sharing its sums with the deflator.
#[derive(Debug, Clone)]
pub struct NumerairePortfolio {
    pub deflator: DeflatorPath,
    /// `log X^{num}`, same layout as `deflator.log_y`.
    pub log_x: Vec<f64>,
}

impl NumerairePortfolio {
    pub fn x(&self, p: usize, i: usize) -> f64 {
        self.log_x[p * (self.deflator.grid.steps() + 1) + i].exp()
    }

    /// `Y · X^{num}` at every node, formed as `exp(log Y + log X)`.
    pub fn products(&self) -> impl Iterator<Item = f64> + '_ {
        self.deflator
            .log_y
            .iter()
            .zip(&self.log_x)
            .map(|(ly, lx)| (ly + lx).exp())
    }

    /// True when `Y · X^{num} == 1` at every node of every path.
    pub fn duality_exact(&self) -> bool {
        self.products().all(|v| v == 1.0)
    }

    /// Largest `|Y · X − 1|` when the two are first exponentiated separately.
    pub fn max_float_product_error(&self) -> f64 {
        self.deflator
            .log_y
            .iter()
            .zip(&self.log_x)
            .map(|(ly, lx)| (ly.exp() * lx.exp() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

pub fn numeraire_portfolio(
    report: &RiskPremiumReport,
    bundle: &PathBundle,
    scheme: GrowthScheme,
) -> Result<NumerairePortfolio> {
    let deflator = build_deflator(report, bundle, scheme)?;
    let log_x = deflator.log_y.iter().map(|l| -l).collect();
    Ok(NumerairePortfolio { deflator, log_x })
}

// ---------------------------------------------------------------------------
// Strategies and wealth
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    /// `ϑ`, units of each asset.
    Absolute,
    /// `π`, fractions of current wealth in each asset.
    Fractional,
}

/// `f(i, t_i, history, out)`: the position on `[t_i, t_{i+1})`, where
/// `history` holds the prices `S_{t_0}, ..., S_{t_i}` only.
pub type StrategyFn = Arc<dyn Fn(usize, f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub initial: f64,
    pub dim: usize,
    value: StrategyFn,
}

impl std::fmt::Debug for StrategySpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StrategySpec")
            .field("kind", &self.kind)
            .field("initial", &self.initial)
            .field("dim", &self.dim)
            .finish()
    }
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, initial: f64, dim: usize, value: StrategyFn) -> Result<Self> {
        if !(initial >= 0.0 && initial.is_finite()) {
            return Err(Error::invalid("initial capital must be finite and nonnegative"));
        }
        Ok(Self {
            kind,
            initial,
            dim,
            value,
        })
    }

    pub fn constant(kind: StrategyKind, initial: f64, position: Vec<f64>) -> Result<Self> {
        let d = position.len();
        Self::new(
            kind,
            initial,
            d,
            Arc::new(move |_, _, _, out: &mut [f64]| out.copy_from_slice(&position)),
        )
    }

    pub fn with_initial(mut self, initial: f64) -> Self {
        self.initial = initial;
        self
    }

    /// Positions multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let inner = self.value.clone();
        Self {
            kind: self.kind,
            initial: self.initial,
            dim: self.dim,
            value: Arc::new(move |i, t, h, out: &mut [f64]| {
                inner(i, t, h, out);
                out.iter_mut().for_each(|x| *x *= factor);
            }),
        }
    }

    pub fn position(&self, i: usize, t: f64, history: &[f64], out: &mut [f64]) {
        (self.value)(i, t, history, out)
    }
}

#[derive(Debug, Clone)]
pub struct WealthPaths {
    pub grid: TimeGrid,
    pub initial: f64,
    /// Path-major wealth, `n + 1` values per path.
    pub values: Vec<f64>,
    /// Paths whose wealth went below zero at some node.
    pub crossed_zero: Vec<bool>,
}

impl WealthPaths {
    pub fn paths(&self) -> usize {
        self.crossed_zero.len()
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.grid.steps() + 1;
        &self.values[p * len..(p + 1) * len]
    }

    pub fn terminal(&self) -> Vec<f64> {
        (0..self.paths()).map(|p| *self.path(p).last().unwrap()).collect()
    }

    pub fn admissible(&self) -> bool {
        !self.crossed_zero.iter().any(|c| *c)
    }
}

/// Wealth of `spec` along every path of `bundle`.
///
/// Absolute: `X_{i+1} = X_i + ⟨ϑ_i, ΔS_i⟩`. Fractional:
/// `X_{i+1} = X_i (1 + ⟨π_i, ΔS_i / S_i⟩)`, computed as `x` times the growth
/// from capital 1, so `wealth(x, π) = x · wealth(1, π)` exactly.
pub fn wealth(spec: &StrategySpec, bundle: &PathBundle) -> Result<WealthPaths> {
    let d = bundle.dim();
    if spec.dim != d {
        return Err(Error::ShapeMismatch(format!(
            "strategy has dimension {} for a {d}-asset bundle",
            spec.dim
        )));
    }
    let grid = bundle.grid().clone();
    let n = grid.steps();
    let rows: Vec<Result<(Vec<f64>, bool)>> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let s = bundle.path(p);
            let mut pos = vec![0.0; d];
            let mut x = vec![0.0; n + 1];
            match spec.kind {
                StrategyKind::Absolute => {
                    x[0] = spec.initial;
                    for i in 0..n {
                        spec.position(i, grid.nodes()[i], &s[..(i + 1) * d], &mut pos);
                        let mut g = 0.0;
                        for k in 0..d {
                            g += pos[k] * (s[(i + 1) * d + k] - s[i * d + k]);
                        }
                        x[i + 1] = x[i] + g;
                    }
                }
                StrategyKind::Fractional => {
                    let mut growth = 1.0;
                    x[0] = spec.initial * growth;
                    for i in 0..n {
                        spec.position(i, grid.nodes()[i], &s[..(i + 1) * d], &mut pos);
                        let mut r = 0.0;
                        for k in 0..d {
                            let si = s[i * d + k];
                            if pos[k] != 0.0 {
                                if si == 0.0 {
                                    return Err(Error::invalid(format!(
                                        "fractional strategy holds asset {k} at a zero price (t = {})",
                                        grid.nodes()[i]
                                    )));
                                }
                                r += pos[k] * (s[(i + 1) * d + k] - si) / si;
                            }
                        }
                        growth *= 1.0 + r;
                        x[i + 1] = spec.initial * growth;
                    }
                }
            }
            let crossed = x.iter().any(|v| *v < 0.0);
            Ok((x, crossed))
        })
        .collect();
    let mut values = Vec::with_capacity(bundle.paths() * (n + 1));
    let mut crossed_zero = Vec::with_capacity(bundle.paths());
    for r in rows {
        let (x, c) = r?;
        values.extend_from_slice(&x);
        crossed_zero.push(c);
    }
    Ok(WealthPaths {
        grid,
        initial: spec.initial,
        values,
        crossed_zero,
    })
}

// ---------------------------------------------------------------------------
// Martingale test
// ---------------------------------------------------------------------------

pub const MARTINGALE_ALPHA: f64 = 0.01;
pub const CHECKPOINTS: usize = 9;
/// Terminal deficit, in standard errors, that declares a strict local
/// martingale.
pub const STRICTNESS_SE: f64 = 5.0;

#[derive(Debug, Clone, Serialize)]
pub struct CheckpointStat {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleTestReport {
    pub z0: f64,
    pub paths: usize,
    pub critical_z: f64,
    pub checkpoints: Vec<CheckpointStat>,
    pub pass: bool,
    /// `1 − Ê[Z_T]/Z_0`
    pub terminal_deficit: f64,
    pub deficit_se: f64,
    pub strict: bool,
}

/// Grid indices of the checkpoints `jT/9`, `j = 1..=9`.
pub fn checkpoint_indices(grid: &TimeGrid) -> Vec<usize> {
    let t = grid.horizon();
    let mut idx: Vec<usize> = (1..=CHECKPOINTS)
        .map(|j| grid.index_at(t * j as f64 / CHECKPOINTS as f64))
        .collect();
    idx.dedup();
    idx
}

/// Test from `samples[j][p]`, the value of path `p` at checkpoint `j`.
pub fn martingale_test_samples(z0: f64, times: &[f64], samples: &[Vec<f64>]) -> MartingaleTestReport {
    let k = times.len().max(1);
    let critical_z = Normal::standard().inverse_cdf(1.0 - MARTINGALE_ALPHA / (2.0 * k as f64));
    let checkpoints: Vec<CheckpointStat> = times
        .iter()
        .zip(samples)
        .map(|(&t, xs)| {
            let (mean, se) = mean_se(xs);
            CheckpointStat {
                t,
                mean,
                se,
                pass: (mean - z0).abs() <= critical_z * se,
            }
        })
        .collect();
    let last = checkpoints.last();
    let (terminal_deficit, deficit_se) = match last {
        Some(c) => (1.0 - c.mean / z0, c.se / z0.abs()),
        None => (0.0, 0.0),
    };
    MartingaleTestReport {
        z0,
        paths: samples.first().map_or(0, |s| s.len()),
        critical_z,
        pass: checkpoints.iter().all(|c| c.pass),
        checkpoints,
        terminal_deficit,
        deficit_se,
        strict: terminal_deficit > STRICTNESS_SE * deficit_se,
    }
}

/// Martingale test of the one-dimensional process `z`.
pub fn martingale_test(z: &PathBundle) -> Result<MartingaleTestReport> {
    if z.dim() != 1 {
        return Err(Error::ShapeMismatch("martingale test needs a scalar process".into()));
    }
    let idx = checkpoint_indices(z.grid());
    let times: Vec<f64> = idx.iter().map(|&i| z.grid().nodes()[i]).collect();
    let samples: Vec<Vec<f64>> = idx.iter().map(|&i| z.cross_section(i, 0)).collect();
    let z0 = mean_se(&z.cross_section(0, 0)).0;
    Ok(martingale_test_samples(z0, &times, &samples))
}

/// `Y · S^k` as a scalar bundle.
pub fn deflated_price(deflator: &DeflatorPath, bundle: &PathBundle, k: usize) -> Result<PathBundle> {
    let len = deflator.grid.steps() + 1;
    let mut values = Vec::with_capacity(deflator.paths() * len);
    for (p, &bp) in deflator.kept.iter().enumerate() {
        for i in 0..len {
            values.push(deflator.y(p, i) * bundle.at(bp, i)[k]);
        }
    }
    PathBundle::new(
        deflator.grid.clone(),
        1,
        values,
        bundle.seed(),
        deflator.kept.iter().map(|&p| p as u64).collect(),
    )
}

// ---------------------------------------------------------------------------
// Localization
// ---------------------------------------------------------------------------

pub const DEFAULT_LEVELS: [f64; 5] = [2.0, 4.0, 8.0, 16.0, 32.0];

/// First node where `Y ≥ level`.
pub fn first_passage(log_y: &[f64], level: f64) -> Option<usize> {
    log_y.iter().position(|l| l.exp() >= level)
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationRow {
    pub level: f64,
    /// `Ê[Y_{τ∧T}]`
    pub total_mass: f64,
    pub total_se: f64,
    /// `Ê[Y_T 1{τ ≥ T}]`
    pub survival_mass: f64,
    pub survival_se: f64,
    /// Estimated share of paths with `τ < T`.
    pub hit_share: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationSchedule {
    pub rows: Vec<LocalizationRow>,
    /// Limit of `Qⁿ[τₙ ≥ T]` extrapolated linearly in `1/n` from the last two
    /// levels.
    pub extrapolated_limit: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeasureSplit {
    pub total_mass: f64,
    pub regular_mass: f64,
    pub singular_mass: f64,
    pub se: f64,
    pub countably_additive: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationReport {
    pub schedule: LocalizationSchedule,
    pub split: MeasureSplit,
}

/// How first passage of `Y` through a level is detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitoring {
    /// Only at grid nodes; the stopped value overshoots the level.
    Discrete,
    /// Between nodes `log Y` is treated as a Brownian bridge with variance
    /// `⟨ρ, cρ⟩ Δt`; the crossing probability
    /// `exp(−2 (L − ℓ_i)(L − ℓ_{i+1}) / v)` is averaged over analytically and
    /// a crossing stops `Y` exactly at the level.
    #[default]
    Bridge,
}

impl std::str::FromStr for Monitoring {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "discrete" => Ok(Monitoring::Discrete),
            "bridge" => Ok(Monitoring::Bridge),
            _ => Err(Error::Config(format!(
                "unknown monitoring `{s}` (expected discrete or bridge)"
            ))),
        }
    }
}

/// Per-level `(E[Y_{τ∧T} | path], E[Y_T 1{τ ≥ T} | path], P[τ < T | path])`.
/// `mass` is the cumulative `Σ⟨ρ, cρ⟩Δt`, whose increments are the step
/// variances of `log Y`.
fn localize_path(
    log_y: &[f64],
    mass: &[f64],
    levels: &[f64],
    monitoring: Monitoring,
    out: &mut Vec<(f64, f64, f64)>,
) {
    let n = log_y.len() - 1;
    let y_t = log_y[n].exp();
    out.clear();
    for &level in levels {
        match monitoring {
            Monitoring::Discrete => match first_passage(log_y, level) {
                Some(i) if i < n => out.push((log_y[i].exp(), 0.0, 1.0)),
                _ => out.push((y_t, y_t, 0.0)),
            },
            Monitoring::Bridge => {
                let cap = level.ln();
                let mut alive = 1.0;
                let mut stopped = 0.0;
                for i in 0..n {
                    let (a, b) = (cap - log_y[i], cap - log_y[i + 1]);
                    let hit = if b <= 0.0 {
                        1.0
                    } else {
                        let v = mass[i + 1] - mass[i];
                        if v > 0.0 {
                            (-2.0 * a * b / v).exp()
                        } else {
                            0.0
                        }
                    };
                    stopped += alive * hit * level;
                    alive *= 1.0 - hit;
                    if alive == 0.0 {
                        break;
                    }
                }
                out.push((stopped + alive * y_t, alive * y_t, 1.0 - alive));
            }
        }
    }
}

fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() || levels.iter().any(|l| !(*l > 1.0 && l.is_finite())) {
        return Err(Error::invalid("localization levels must be finite and above 1"));
    }
    if levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("localization levels must be strictly increasing"));
    }
    Ok(())
}

/// Reduce `samples[p][level]` and terminal values into the report.
fn localization_from_samples(
    levels: &[f64],
    samples: &[Vec<(f64, f64, f64)>],
    terminal: &[f64],
) -> LocalizationReport {
    let m = samples.len();
    let rows: Vec<LocalizationRow> = levels
        .iter()
        .enumerate()
        .map(|(j, &level)| {
            let tot: Vec<f64> = samples.iter().map(|s| s[j].0).collect();
            let sur: Vec<f64> = samples.iter().map(|s| s[j].1).collect();
            let hits: f64 = samples.iter().map(|s| s[j].2).sum();
            let (total_mass, total_se) = mean_se(&tot);
            let (survival_mass, survival_se) = mean_se(&sur);
            LocalizationRow {
                level,
                total_mass,
                total_se,
                survival_mass,
                survival_se,
                hit_share: hits / m as f64,
            }
        })
        .collect();
    let extrapolated_limit = match rows.len() {
        0 => f64::NAN,
        1 => rows[0].survival_mass,
        k => {
            let (a, b) = (&rows[k - 2], &rows[k - 1]);
            (b.level * b.survival_mass - a.level * a.survival_mass) / (b.level - a.level)
        }
    };
    let (regular, se) = mean_se(terminal);
    let singular = 1.0 - regular;
    LocalizationReport {
        schedule: LocalizationSchedule {
            rows,
            extrapolated_limit,
        },
        split: MeasureSplit {
            total_mass: 1.0,
            regular_mass: regular,
            singular_mass: singular,
            se,
            countably_additive: singular <= STRICTNESS_SE * se,
        },
    }
}

/// First-passage localization of `Y` at `levels` and the regular/singular
/// split of the limiting mass.
pub fn localization_demo(
    deflator: &DeflatorPath,
    levels: &[f64],
    monitoring: Monitoring,
) -> Result<LocalizationReport> {
    validate_levels(levels)?;
    let samples: Vec<Vec<(f64, f64, f64)>> = (0..deflator.paths())
        .into_par_iter()
        .map(|p| {
            let mut v = Vec::with_capacity(levels.len());
            let len = deflator.grid.steps() + 1;
            let mass = &deflator.mass[p * len..(p + 1) * len];
            localize_path(deflator.log_path(p), mass, levels, monitoring, &mut v);
            v
        })
        .collect();
    Ok(localization_from_samples(levels, &samples, &deflator.terminal()))
}

// ---------------------------------------------------------------------------
// Streaming experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DeflatorOptions {
    pub scheme: GrowthScheme,
    pub levels: Vec<f64>,
    pub monitoring: Monitoring,
    pub rank_tol: f64,
}

impl Default for DeflatorOptions {
    fn default() -> Self {
        Self {
            scheme: GrowthScheme::default(),
            levels: DEFAULT_LEVELS.to_vec(),
            monitoring: Monitoring::default(),
            rank_tol: RANK_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DeflatorExperiment {
    pub model: String,
    pub paths: usize,
    pub excluded: usize,
    pub structure_fail_share: f64,
    pub regular_mass: f64,
    pub regular_se: f64,
    pub deflator_test: MartingaleTestReport,
    /// Tests of `Y · S^k` for each asset `k`.
    pub deflated_price_tests: Vec<MartingaleTestReport>,
    pub localization: LocalizationReport,
}

struct PathDigest {
    y_checks: Vec<f64>,
    ys_checks: Vec<Vec<f64>>,
    loc: Vec<(f64, f64, f64)>,
    y_t: f64,
    structure_ok: bool,
}

/// Deflator diagnostics computed path by path without storing the paths.
pub fn deflator_experiment(
    model: &MarketModel,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    opts: &DeflatorOptions,
) -> Result<DeflatorExperiment> {
    validate_levels(&opts.levels)?;
    if m < 2 {
        return Err(Error::invalid("need at least two paths"));
    }
    model.check_grid(grid)?;
    let d = model.dim();
    let n = grid.steps();
    let idx = checkpoint_indices(grid);
    let digests: Vec<Result<Option<PathDigest>>> = (0..m)
        .into_par_iter()
        .map_init(
            || {
                (
                    StepWorkspace::new(d),
                    NodeAnalyzer::new(d, opts.rank_tol),
                    vec![0.0; (n + 1) * d],
                    PathSeries::new(d, n),
                    [vec![0.0; n + 1], vec![0.0; n + 1], vec![0.0; n + 1]],
                )
            },
            |(ws, node, s, series, [ly, g, k]), p| {
                if !simulate_path(model, grid, seed, p as u64, s, None, ws)? {
                    return Ok(None);
                }
                analyze_path(model, grid, s, node, series)?;
                let structure_ok = series.structure_holds(grid);
                if !deflator_log_path(opts.scheme, grid, s, series, ly, g, k) {
                    return Ok(None);
                }
                let y_checks: Vec<f64> = idx.iter().map(|&i| ly[i].exp()).collect();
                let ys_checks = (0..d)
                    .map(|c| idx.iter().map(|&i| ly[i].exp() * s[i * d + c]).collect())
                    .collect();
                let mut loc = Vec::with_capacity(opts.levels.len());
                localize_path(ly, k, &opts.levels, opts.monitoring, &mut loc);
                Ok(Some(PathDigest {
                    y_checks,
                    ys_checks,
                    loc,
                    y_t: ly[n].exp(),
                    structure_ok,
                }))
            },
        )
        .collect();
    let mut kept = Vec::with_capacity(m);
    let mut excluded = 0;
    for r in digests {
        match r? {
            Some(x) => kept.push(x),
            None => excluded += 1,
        }
    }
    check_exclusion(excluded, m)?;
    let structure_fail_share =
        kept.iter().filter(|x| !x.structure_ok).count() as f64 / kept.len() as f64;
    if structure_fail_share > crate::structure::STRUCTURE_FAIL_SHARE {
        return Err(Error::refused(format!(
            "drift is outside the range of the covariance on {:.1}% of paths; no deflator exists",
            100.0 * structure_fail_share
        )));
    }
    let times: Vec<f64> = idx.iter().map(|&i| grid.nodes()[i]).collect();
    let y_samples: Vec<Vec<f64>> = (0..idx.len())
        .map(|j| kept.iter().map(|x| x.y_checks[j]).collect())
        .collect();
    let deflator_test = martingale_test_samples(1.0, &times, &y_samples);
    let deflated_price_tests = (0..d)
        .map(|c| {
            let samples: Vec<Vec<f64>> = (0..idx.len())
                .map(|j| kept.iter().map(|x| x.ys_checks[c][j]).collect())
                .collect();
            martingale_test_samples(model.s0()[c], &times, &samples)
        })
        .collect();
    let loc_samples: Vec<Vec<(f64, f64, f64)>> = kept.iter().map(|x| x.loc.clone()).collect();
    let terminal: Vec<f64> = kept.iter().map(|x| x.y_t).collect();
    let (regular_mass, regular_se) = mean_se(&terminal);
    let localization = localization_from_samples(&opts.levels, &loc_samples, &terminal);
    Ok(DeflatorExperiment {
        model: model.name().to_string(),
        paths: kept.len(),
        excluded,
        structure_fail_share,
        regular_mass,
        regular_se,
        deflator_test,
        deflated_price_tests,
        localization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{self, simulate, simulate_with_noise};
    use crate::structure::risk_premium;
    use std::collections::BTreeMap;

    fn catalog(name: &str) -> MarketModel {
        model::from_catalog(name, &BTreeMap::new()).unwrap()
    }

    fn closed_survival(level: f64) -> f64 {
        2.0 * Normal::standard().cdf(1.0 - 1.0 / level) - 1.0
    }

    #[test]
    fn exponential_scheme_matches_closed_form_bs() {
        let m = catalog("black-scholes");
        let grid = TimeGrid::uniform(1.0, 200).unwrap();
        let (s, w) = simulate_with_noise(&m, &grid, 200, 4).unwrap();
        let rep = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&rep, &s, GrowthScheme::Exponential).unwrap();
        let lam = 0.25;
        for p in 0..200 {
            for i in [0, 57, 200] {
                let t = grid.nodes()[i];
                let expect = -lam * w.at(p, i)[0] - 0.5 * lam * lam * t;
                assert!((y.log_path(p)[i] - expect).abs() < 1e-12, "path {p} node {i}");
            }
        }
    }

    #[test]
    fn multiplicative_scheme_close_to_closed_form_bs() {
        let m = catalog("black-scholes");
        let grid = TimeGrid::uniform(1.0, 1000).unwrap();
        let (s, w) = simulate_with_noise(&m, &grid, 200, 5).unwrap();
        let rep = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&rep, &s, GrowthScheme::Multiplicative).unwrap();
        let lam: f64 = 0.25;
        for p in 0..200 {
            let expect = (-lam * w.at(p, 1000)[0] - 0.5 * lam * lam).exp();
            assert!((y.y(p, 1000) / expect - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn bs_deflator_mean_is_one() {
        let m = catalog("black-scholes");
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let s = simulate(&m, &grid, 20_000, 6).unwrap();
        let rep = risk_premium(&m, &s).unwrap();
        for scheme in [GrowthScheme::Multiplicative, GrowthScheme::Exponential] {
            let y = build_deflator(&rep, &s, scheme).unwrap();
            let (mean, se) = y.strictness();
            assert!((mean - 1.0).abs() <= 3.0 * se, "{scheme:?}: {mean} ± {se}");
            assert!(y.log_y.iter().step_by(101).all(|l| *l == 0.0));
        }
    }

    #[test]
    fn bessel_deflator_is_inverse_price() {
        let m = model::bessel3(1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let s = simulate(&m, &grid, 20_000, 7).unwrap();
        let rep = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&rep, &s, GrowthScheme::Multiplicative).unwrap();
        for p in 0..100 {
            for i in 0..=100 {
                let inv = 1.0 / s.at(p, i)[0];
                assert!((y.y(p, i) / inv - 1.0).abs() < 1e-9);
            }
        }
        let (mean, se) = y.strictness();
        assert!((mean - 0.682_689_492).abs() <= 3.0 * se);
    }

    #[test]
    fn zero_drift_deflator_is_one() {
        let m = catalog("zero-drift");
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let s = simulate(&m, &grid, 100, 1).unwrap();
        let rep = risk_premium(&m, &s).unwrap();
        let num = numeraire_portfolio(&rep, &s, GrowthScheme::Multiplicative).unwrap();
        assert!(num.deflator.log_y.iter().all(|l| *l == 0.0));
        assert!(num.log_x.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn refuses_structure_failure() {
        let m = catalog("pure-drift");
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let s = simulate(&m, &grid, 10, 1).unwrap();
        let rep = risk_premium(&m, &s).unwrap();
        assert!(matches!(
            build_deflator(&rep, &s, GrowthScheme::default()),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn numeraire_duality_and_bessel_identity() {
        let m = model::bessel3(1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 64).unwrap();
        let s = simulate(&m, &grid, 500, 2).unwrap();
        let rep = risk_premium(&m, &s).unwrap();
        let num = numeraire_portfolio(&rep, &s, GrowthScheme::Multiplicative).unwrap();
        assert!(num.duality_exact());
        assert!(num.max_float_product_error() < 1e-13);
        for p in 0..500 {
            assert!((num.x(p, 64) / s.at(p, 64)[0] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wealth_trivial_strategies() {
        let m = catalog("black-scholes");
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let s = simulate(&m, &grid, 20, 3).unwrap();
        let zero = StrategySpec::constant(StrategyKind::Absolute, 2.5, vec![0.0]).unwrap();
        let x = wealth(&zero, &s).unwrap();
        assert!(x.values.iter().all(|v| *v == 2.5));
        let hold = StrategySpec::constant(StrategyKind::Absolute, 0.0, vec![1.0]).unwrap();
        let x = wealth(&hold, &s).unwrap();
        for p in 0..20 {
            let direct: f64 = (0..50).map(|i| s.at(p, i + 1)[0] - s.at(p, i)[0]).sum();
            assert_eq!(x.path(p)[50], direct);
            assert!((x.path(p)[50] - (s.at(p, 50)[0] - s.at(p, 0)[0])).abs() < 1e-12);
        }
    }

    #[test]
    fn fractional_numeraire_strategy_is_log_optimal() {
        // π = ρ S = μ/σ² as a wealth fraction
        let m = catalog("black-scholes");
        let grid = TimeGrid::uniform(1.0, 2000).unwrap();
        let (s, w) = simulate_with_noise(&m, &grid, 100, 9).unwrap();
        let spec = StrategySpec::constant(StrategyKind::Fractional, 1.0, vec![0.05 / 0.04]).unwrap();
        let x = wealth(&spec, &s).unwrap();
        for p in 0..100 {
            let expect = 0.5 * 0.0625 + 0.25 * w.at(p, 2000)[0];
            assert!((x.path(p)[2000].ln() - expect).abs() < 0.02);
        }
    }

    #[test]
    fn wealth_scaling_is_exact() {
        let m = catalog("correlated-bs");
        let grid = TimeGrid::uniform(1.0, 40).unwrap();
        let s = simulate(&m, &grid, 30, 11).unwrap();
        let frac = StrategySpec::new(
            StrategyKind::Fractional,
            1.0,
            2,
            Arc::new(|i, _t, h: &[f64], out: &mut [f64]| {
                out[0] = 0.3 + 0.01 * i as f64;
                out[1] = 0.5 * h[h.len() - 1] / h[1];
            }),
        )
        .unwrap();
        for x0 in [0.5, 3.7, 1e3] {
            let a = wealth(&frac.clone().with_initial(x0), &s).unwrap();
            let b = wealth(&frac, &s).unwrap();
            for (u, v) in a.values.iter().zip(&b.values) {
                assert_eq!(*u, x0 * v);
            }
        }
        let abs = StrategySpec::constant(StrategyKind::Absolute, 1.0, vec![0.7, -0.4]).unwrap();
        for x0 in [0.5, 2.0, 8.0] {
            let a = wealth(&abs.clone().with_initial(x0), &s).unwrap();
            let b = wealth(&abs.scaled(1.0 / x0), &s).unwrap();
            for (u, v) in a.values.iter().zip(&b.values) {
                assert_eq!(*u, x0 * v);
            }
        }
    }

    #[test]
    fn fractional_rejects_zero_price() {
        let m = model::pure_drift(1.0, 0.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let s = simulate(&m, &grid, 2, 1).unwrap();
        let spec = StrategySpec::constant(StrategyKind::Fractional, 1.0, vec![0.5]).unwrap();
        assert!(matches!(wealth(&spec, &s), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn wealth_flags_zero_crossings() {
        let m = catalog("black-scholes");
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let s = simulate(&m, &grid, 200, 3).unwrap();
        let short = StrategySpec::constant(StrategyKind::Absolute, 0.01, vec![-1.0]).unwrap();
        let x = wealth(&short, &s).unwrap();
        assert!(!x.admissible());
        let long = StrategySpec::constant(StrategyKind::Fractional, 1.0, vec![0.5]).unwrap();
        assert!(wealth(&long, &s).unwrap().admissible());
    }

    #[test]
    fn martingale_test_examples() {
        let grid = TimeGrid::uniform(1.0, 90).unwrap();
        let ones = PathBundle::new(grid.clone(), 1, vec![1.0; 91 * 50], 0, (0..50).collect()).unwrap();
        let rep = martingale_test(&ones).unwrap();
        assert!(rep.pass && !rep.strict && rep.terminal_deficit == 0.0);
        assert_eq!(rep.checkpoints.len(), 9);
        assert!((rep.critical_z - 3.2608).abs() < 1e-3);

        let m = catalog("black-scholes");
        let s = simulate(&m, &grid, 20_000, 21).unwrap();
        let r = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&r, &s, GrowthScheme::Multiplicative).unwrap();
        let ys = deflated_price(&y, &s, 0).unwrap();
        let rep = martingale_test(&ys).unwrap();
        assert!(rep.pass && !rep.strict, "{rep:?}");
    }

    #[test]
    fn bessel_deflator_fails_martingale_test() {
        let m = model::bessel3(1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 90).unwrap();
        let s = simulate(&m, &grid, 20_000, 22).unwrap();
        let r = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&r, &s, GrowthScheme::Multiplicative).unwrap();
        let rep = martingale_test(&y.as_bundle().unwrap()).unwrap();
        assert!(!rep.pass && rep.strict);
        assert!((rep.terminal_deficit - 0.3173).abs() < 5.0 * rep.deficit_se);
    }

    #[test]
    fn localization_constant_deflator() {
        let m = catalog("zero-drift");
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let s = simulate(&m, &grid, 50, 1).unwrap();
        let r = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&r, &s, GrowthScheme::default()).unwrap();
        let rep = localization_demo(&y, &DEFAULT_LEVELS, Monitoring::Bridge).unwrap();
        for row in &rep.schedule.rows {
            assert_eq!(row.total_mass, 1.0);
            assert_eq!(row.survival_mass, 1.0);
            assert_eq!(row.hit_share, 0.0);
        }
        assert_eq!(rep.split.regular_mass, 1.0);
        assert_eq!(rep.split.singular_mass, 0.0);
        assert!(rep.split.countably_additive);
        assert!(localization_demo(&y, &[1.0, 2.0], Monitoring::Bridge).is_err());
        assert!(localization_demo(&y, &[4.0, 2.0], Monitoring::Bridge).is_err());
    }

    #[test]
    fn bessel_localization_tracks_closed_form() {
        let m = model::bessel3(1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 1000).unwrap();
        let s = simulate(&m, &grid, 20_000, 23).unwrap();
        let r = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&r, &s, GrowthScheme::default()).unwrap();
        let rep = localization_demo(&y, &DEFAULT_LEVELS, Monitoring::Bridge).unwrap();
        let rows = &rep.schedule.rows;
        assert!(rows.windows(2).all(|w| w[1].survival_mass >= w[0].survival_mass));
        for row in rows {
            // the bridge approximation degrades once √Δt is comparable to 1/level
            if row.level <= 8.0 {
                assert!((row.total_mass - 1.0).abs() <= 3.0 * row.total_se, "{row:?}");
            }
            let gap = row.survival_mass - closed_survival(row.level);
            assert!(gap.abs() < 3.0 * row.survival_se + 0.01, "{row:?}");
        }
        assert!(!rep.split.countably_additive);
        // pathwise monotone first passage
        for p in 0..200 {
            let taus: Vec<usize> = DEFAULT_LEVELS
                .iter()
                .map(|l| first_passage(y.log_path(p), *l).unwrap_or(usize::MAX))
                .collect();
            assert!(taus.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn bs_localization_is_countably_additive() {
        let m = catalog("black-scholes");
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let s = simulate(&m, &grid, 20_000, 24).unwrap();
        let r = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&r, &s, GrowthScheme::default()).unwrap();
        let rep = localization_demo(&y, &DEFAULT_LEVELS, Monitoring::Bridge).unwrap();
        assert!(rep.split.countably_additive);
        let last = rep.schedule.rows.last().unwrap();
        assert!((last.survival_mass - 1.0).abs() < 3.0 * last.survival_se + 1e-3);
    }

    #[test]
    fn streaming_experiment_matches_bundle_path() {
        let m = model::bessel3(1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 90).unwrap();
        let exp = deflator_experiment(&m, &grid, 3000, 31, &DeflatorOptions::default()).unwrap();
        let s = simulate(&m, &grid, 3000, 31).unwrap();
        let r = risk_premium(&m, &s).unwrap();
        let y = build_deflator(&r, &s, GrowthScheme::default()).unwrap();
        let direct = martingale_test(&y.as_bundle().unwrap()).unwrap();
        assert_eq!(exp.deflator_test.terminal_deficit, direct.terminal_deficit);
        let loc = localization_demo(&y, &DEFAULT_LEVELS, Monitoring::Bridge).unwrap();
        assert_eq!(
            exp.localization.schedule.rows[2].survival_mass,
            loc.schedule.rows[2].survival_mass
        );
    }

    #[test]
    fn streaming_refuses_structure_failure() {
        let m = catalog("rank-deficient");
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let r = deflator_experiment(&m, &grid, 20, 1, &DeflatorOptions::default());
        assert!(matches!(r, Err(Error::Refused(_))));
    }
}
