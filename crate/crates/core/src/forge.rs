//! Explicit arbitrages of the first kind.
//!
//! Two constructions, one per way the range/mass condition can fail:
//! a bounded kernel strategy when the drift leaves the range of `c`, and a
//! truncated-leverage ladder when the mass `∫⟨ρ, cρ⟩dt` diverges. Either
//! family is then checked for unboundedness in probability.

use rayon::prelude::*;
use serde::Serialize;

use crate::deflator::GrowthScheme;
use crate::error::{Error, Result};
use crate::grid::{PathBundle, TimeGrid};
use crate::linalg::{dot, norm_sq, SymEigen};
use crate::model::{simulate_path, MarketModel, StepWorkspace};
use crate::structure::{
    analyze_path, median, quad_form, risk_premium_with_tol, Na1Class, NodeAnalyzer, PathSeries,
    RiskPremiumReport, EXCLUSION_LIMIT, RANK_TOL, STRUCT_EPS,
};

/// Unit vector along the projection of `a` onto the numerical kernel of `c`,
/// or zero when that projection is negligible.
pub fn kernel_theta(c: &[f64], a: &[f64], tol: f64) -> Result<Vec<f64>> {
    let d = a.len();
    if c.len() != d * d {
        return Err(Error::ShapeMismatch(format!(
            "covariance has {} entries for a drift of length {d}",
            c.len()
        )));
    }
    let mut eig = SymEigen::new(d);
    eig.decompose(c)?;
    let cut = eig.cutoff(tol);
    let mut k = vec![0.0; d];
    eig.apply(a, &mut k, |w| if w > cut && w > 0.0 { 0.0 } else { 1.0 });
    Ok(normalize_kernel(k, a))
}

fn normalize_kernel(mut k: Vec<f64>, a: &[f64]) -> Vec<f64> {
    let nk = norm_sq(&k);
    if nk <= STRUCT_EPS * (1.0 + norm_sq(a)) {
        k.fill(0.0);
        return k;
    }
    let r = nk.sqrt();
    k.iter_mut().for_each(|x| *x /= r);
    // the projection already satisfies ⟨θ, a⟩ = ‖P_ker a‖ ≥ 0
    if dot(&k, a) < 0.0 {
        k.iter_mut().for_each(|x| *x = -*x);
    }
    k
}

/// `θ` along every path with its riskless drift gain `∫⟨θ, a⟩ dt`.
#[derive(Debug, Clone)]
pub struct KernelStrategy {
    pub grid: TimeGrid,
    pub dim: usize,
    /// Path-major, `n * d` values per path (left nodes).
    pub theta: Vec<f64>,
    /// Cumulative `Σ⟨θ_i, a_i⟩Δt_i`, `n + 1` values per path.
    pub drift_gain: Vec<f64>,
    /// Largest `⟨θ, cθ⟩` over all nodes.
    pub max_quad: f64,
}

impl KernelStrategy {
    pub fn paths(&self) -> usize {
        self.drift_gain.len() / (self.grid.steps() + 1)
    }

    pub fn theta_at(&self, p: usize, i: usize) -> &[f64] {
        let n = self.grid.steps();
        let d = self.dim;
        &self.theta[(p * n + i) * d..(p * n + i + 1) * d]
    }

    pub fn gain_path(&self, p: usize) -> &[f64] {
        let len = self.grid.steps() + 1;
        &self.drift_gain[p * len..(p + 1) * len]
    }
}

/// Build `θ` on a bundle; refused unless the model fails the range condition.
pub fn kernel_direction(model: &MarketModel, bundle: &PathBundle) -> Result<KernelStrategy> {
    kernel_direction_with_tol(model, bundle, RANK_TOL)
}

pub fn kernel_direction_with_tol(model: &MarketModel, bundle: &PathBundle, tol: f64) -> Result<KernelStrategy> {
    let report = risk_premium_with_tol(model, bundle, tol)?;
    if report.classification != Some(Na1Class::StructureFail) {
        return Err(Error::refused(
            "drift lies in the range of the covariance; there is no kernel arbitrage",
        ));
    }
    let grid = bundle.grid().clone();
    let d = model.dim();
    let n = grid.steps();
    let rows: Vec<Result<(Vec<f64>, Vec<f64>, f64)>> = (0..bundle.paths())
        .into_par_iter()
        .map_init(
            || NodeAnalyzer::new(d, tol),
            |node, p| {
                let s = bundle.path(p);
                let mut theta = vec![0.0; n * d];
                let mut gain = vec![0.0; n + 1];
                let mut worst = 0.0f64;
                let mut k = vec![0.0; d];
                for i in 0..n {
                    node.analyze(model, grid.nodes()[i], &s[i * d..(i + 1) * d])?;
                    node.kernel_part(&mut k);
                    let th = normalize_kernel(k.clone(), &node.a);
                    worst = worst.max(quad_form(&node.c, &th));
                    gain[i + 1] = gain[i] + dot(&th, &node.a) * grid.dt(i);
                    theta[i * d..(i + 1) * d].copy_from_slice(&th);
                }
                Ok((theta, gain, worst))
            },
        )
        .collect();
    let mut out = KernelStrategy {
        grid,
        dim: d,
        theta: Vec::with_capacity(bundle.paths() * n * d),
        drift_gain: Vec::with_capacity(bundle.paths() * (n + 1)),
        max_quad: 0.0,
    };
    for r in rows {
        let (t, g, w) = r?;
        out.theta.extend_from_slice(&t);
        out.drift_gain.extend_from_slice(&g);
        out.max_quad = out.max_quad.max(w);
    }
    if out.theta.iter().all(|x| *x == 0.0) {
        return Err(Error::refused("drift has no kernel component at any node"));
    }
    Ok(out)
}

/// Terminal values of a family of wealth processes started at 1, indexed by
/// a scale or leverage parameter.
#[derive(Debug, Clone, Serialize)]
pub struct WealthFamily {
    pub index: Vec<f64>,
    /// `terminal[j][p]`: member `j`, path `p`.
    #[serde(skip)]
    pub terminal: Vec<Vec<f64>>,
    /// Smallest wealth seen on any node, per member.
    pub min_wealth: Vec<f64>,
}

/// `X^{1,kθ} = 1 + k ∫⟨θ, dS⟩` for each scale `k`.
pub fn scaled_drift_arbitrage(kernel: &KernelStrategy, bundle: &PathBundle, scales: &[f64]) -> Result<WealthFamily> {
    if bundle.grid() != &kernel.grid || bundle.paths() != kernel.paths() || bundle.dim() != kernel.dim {
        return Err(Error::ShapeMismatch("kernel strategy does not belong to this bundle".into()));
    }
    if scales.iter().any(|k| !(k.is_finite() && *k >= 0.0)) {
        return Err(Error::invalid("scales must be finite and nonnegative"));
    }
    let d = kernel.dim;
    let n = kernel.grid.steps();
    // ∫⟨θ, dS⟩ along each path
    let integrals: Vec<Vec<f64>> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let s = bundle.path(p);
            let mut acc = vec![0.0; n + 1];
            for i in 0..n {
                let th = kernel.theta_at(p, i);
                let mut g = 0.0;
                for k in 0..d {
                    g += th[k] * (s[(i + 1) * d + k] - s[i * d + k]);
                }
                acc[i + 1] = acc[i] + g;
            }
            acc
        })
        .collect();
    let mut terminal = Vec::with_capacity(scales.len());
    let mut min_wealth = Vec::with_capacity(scales.len());
    for &k in scales {
        let mut lo = f64::INFINITY;
        let t: Vec<f64> = integrals
            .iter()
            .map(|acc| {
                for v in acc {
                    lo = lo.min(1.0 + k * v);
                }
                1.0 + k * acc[n]
            })
            .collect();
        terminal.push(t);
        min_wealth.push(lo);
    }
    Ok(WealthFamily {
        index: scales.to_vec(),
        terminal,
        min_wealth,
    })
}

// ---------------------------------------------------------------------------
// Leverage ladder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LadderLevel {
    pub k: f64,
    /// `log X^k_T` per path; `−∞` marks a ruined path.
    #[serde(skip)]
    pub log_wealth: Vec<f64>,
    /// `E^k_T` per path.
    #[serde(skip)]
    pub truncated_mass: Vec<f64>,
    pub ruined: usize,
    pub median_mass: f64,
    /// Median of `log X^k_T / E^k_T` over paths with `E^k_T > 0`; `None`
    /// when every path has zero truncated mass.
    pub median_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LeverageLadder {
    pub scheme: GrowthScheme,
    pub levels: Vec<LadderLevel>,
}

impl LeverageLadder {
    pub fn family(&self) -> WealthFamily {
        WealthFamily {
            index: self.levels.iter().map(|l| l.k).collect(),
            terminal: self
                .levels
                .iter()
                .map(|l| l.log_wealth.iter().map(|x| x.exp()).collect())
                .collect(),
            min_wealth: self
                .levels
                .iter()
                .map(|l| if l.ruined > 0 { 0.0 } else { f64::NAN })
                .collect(),
        }
    }
}

/// `(log X^k_T, E^k_T)` for each `k` along one path, with
/// `π^k = ρ 1{|ρ| ≤ k}`.
fn ladder_path(
    scheme: GrowthScheme,
    grid: &TimeGrid,
    s: &[f64],
    series: &PathSeries,
    ks: &[f64],
    out: &mut [(f64, f64)],
) {
    let d = series.dim;
    let n = grid.steps();
    out.iter_mut().for_each(|o| *o = (0.0, 0.0));
    let mut ds = vec![0.0; d];
    for i in 0..n {
        let rho = series.rho_at(i);
        let size = norm_sq(rho).sqrt();
        for k in 0..d {
            ds[k] = s[(i + 1) * d + k] - s[i * d + k];
        }
        let g = dot(rho, &ds);
        let q = series.mass_rate[i];
        let dt = grid.dt(i);
        for (j, &k) in ks.iter().enumerate() {
            if size > k {
                continue;
            }
            let (lx, e) = &mut out[j];
            *e += q * dt;
            if *lx == f64::NEG_INFINITY {
                continue;
            }
            *lx = match scheme.log_step(g, q, dt) {
                Some(l) => *lx + l,
                None => f64::NEG_INFINITY,
            };
        }
    }
}

fn summarize_level(k: f64, log_wealth: Vec<f64>, truncated_mass: Vec<f64>) -> LadderLevel {
    let ratios: Vec<f64> = log_wealth
        .iter()
        .zip(&truncated_mass)
        .filter(|(_, e)| **e > 0.0)
        .map(|(l, e)| l / e)
        .collect();
    LadderLevel {
        k,
        ruined: log_wealth.iter().filter(|l| **l == f64::NEG_INFINITY).count(),
        median_mass: median(&truncated_mass),
        median_ratio: (!ratios.is_empty()).then(|| median(&ratios)),
        log_wealth,
        truncated_mass,
    }
}

fn validate_ks(ks: &[f64]) -> Result<()> {
    if ks.is_empty() || ks.iter().any(|k| !(*k >= 0.0) || k.is_nan()) {
        return Err(Error::invalid("leverage levels must be nonnegative"));
    }
    if ks.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("leverage levels must be strictly increasing"));
    }
    Ok(())
}

/// Wealth of the truncated numéraire strategies `π^k = ρ 1{|ρ| ≤ k}`.
pub fn truncated_leverage(
    report: &RiskPremiumReport,
    bundle: &PathBundle,
    ks: &[f64],
    scheme: GrowthScheme,
) -> Result<LeverageLadder> {
    validate_ks(ks)?;
    if report.paths() != bundle.paths() || report.grid != *bundle.grid() {
        return Err(Error::ShapeMismatch(
            "risk premium report does not belong to this bundle".into(),
        ));
    }
    let grid = bundle.grid();
    let per_path: Vec<Vec<(f64, f64)>> = (0..bundle.paths())
        .into_par_iter()
        .map(|p| {
            let mut out = vec![(0.0, 0.0); ks.len()];
            ladder_path(scheme, grid, bundle.path(p), &report.series[p], ks, &mut out);
            out
        })
        .collect();
    Ok(assemble_ladder(scheme, ks, &per_path))
}

fn assemble_ladder(scheme: GrowthScheme, ks: &[f64], per_path: &[Vec<(f64, f64)>]) -> LeverageLadder {
    let levels = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let lw = per_path.iter().map(|r| r[j].0).collect();
            let e = per_path.iter().map(|r| r[j].1).collect();
            summarize_level(k, lw, e)
        })
        .collect();
    LeverageLadder { scheme, levels }
}

// ---------------------------------------------------------------------------
// Unboundedness in probability
// ---------------------------------------------------------------------------

pub const DEFAULT_THRESHOLDS: [f64; 2] = [1.5, 2.0];
pub const UNBOUNDED_PROB: f64 = 0.9;
pub const BOUNDED_PROB: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NupbrVerdict {
    Unbounded,
    Bounded,
    Inconclusive,
}

impl NupbrVerdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            NupbrVerdict::Unbounded => "UNBOUNDED",
            NupbrVerdict::Bounded => "BOUNDED",
            NupbrVerdict::Inconclusive => "INCONCLUSIVE",
        }
    }
}

impl std::fmt::Display for NupbrVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExceedanceRow {
    pub k: f64,
    pub threshold: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NupbrReport {
    pub thresholds: Vec<f64>,
    pub index: Vec<f64>,
    /// `P̂[X^k_T > M]`, row per `k`, column per `M`.
    pub probabilities: Vec<Vec<f64>>,
    pub verdict: NupbrVerdict,
}

impl NupbrReport {
    pub fn rows(&self) -> Vec<ExceedanceRow> {
        let mut out = Vec::new();
        for (j, &k) in self.index.iter().enumerate() {
            for (c, &m) in self.thresholds.iter().enumerate() {
                out.push(ExceedanceRow {
                    k,
                    threshold: m,
                    probability: self.probabilities[j][c],
                });
            }
        }
        out
    }
}

/// UNBOUNDED when, for every threshold `M`, `P̂[X^k_T > M]` is nondecreasing
/// in `k` and above 0.9 at the largest `k`; BOUNDED when
/// `sup_k P̂[X^k_T > max M] < 0.05`.
pub fn unboundedness_test(family: &WealthFamily, thresholds: &[f64]) -> Result<NupbrReport> {
    if family.index.len() < 3 {
        return Err(Error::invalid("unboundedness test needs at least 3 family members"));
    }
    if thresholds.is_empty() || thresholds.iter().any(|m| !(*m > 1.0) || m.is_nan()) {
        return Err(Error::invalid("thresholds must exceed the initial capital 1"));
    }
    let probabilities: Vec<Vec<f64>> = family
        .terminal
        .iter()
        .map(|xs| {
            thresholds
                .iter()
                .map(|m| xs.iter().filter(|x| **x > *m).count() as f64 / xs.len().max(1) as f64)
                .collect()
        })
        .collect();
    let last = probabilities.len() - 1;
    let unbounded = (0..thresholds.len()).all(|c| {
        probabilities.windows(2).all(|w| w[1][c] >= w[0][c]) && probabilities[last][c] > UNBOUNDED_PROB
    });
    let top = thresholds
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(c, _)| c)
        .unwrap();
    let bounded = probabilities.iter().all(|row| row[top] < BOUNDED_PROB);
    let verdict = if unbounded {
        NupbrVerdict::Unbounded
    } else if bounded {
        NupbrVerdict::Bounded
    } else {
        NupbrVerdict::Inconclusive
    };
    Ok(NupbrReport {
        thresholds: thresholds.to_vec(),
        index: family.index.clone(),
        probabilities,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// Streaming ladder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct LadderExperiment {
    pub model: String,
    pub paths: usize,
    pub excluded: usize,
    pub ladder: LeverageLadder,
    pub nupbr: NupbrReport,
}

/// Leverage ladder and NUPBR verdict without storing price paths.
pub fn ladder_experiment(
    model: &MarketModel,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    ks: &[f64],
    thresholds: &[f64],
    scheme: GrowthScheme,
) -> Result<LadderExperiment> {
    validate_ks(ks)?;
    if m == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    model.check_grid(grid)?;
    let d = model.dim();
    let n = grid.steps();
    let rows: Vec<Result<Option<Vec<(f64, f64)>>>> = (0..m)
        .into_par_iter()
        .map_init(
            || {
                (
                    StepWorkspace::new(d),
                    NodeAnalyzer::new(d, RANK_TOL),
                    vec![0.0; (n + 1) * d],
                    PathSeries::new(d, n),
                )
            },
            |(ws, node, s, series), p| {
                if !simulate_path(model, grid, seed, p as u64, s, None, ws)? {
                    return Ok(None);
                }
                analyze_path(model, grid, s, node, series)?;
                let mut out = vec![(0.0, 0.0); ks.len()];
                ladder_path(scheme, grid, s, series, ks, &mut out);
                Ok(Some(out))
            },
        )
        .collect();
    let mut kept = Vec::with_capacity(m);
    let mut excluded = 0;
    for r in rows {
        match r? {
            Some(x) => kept.push(x),
            None => excluded += 1,
        }
    }
    if excluded > 0 && excluded as f64 >= EXCLUSION_LIMIT * m as f64 {
        return Err(Error::ExclusionRate {
            excluded,
            total: m,
            limit_percent: EXCLUSION_LIMIT * 100.0,
        });
    }
    let ladder = assemble_ladder(scheme, ks, &kept);
    let nupbr = unboundedness_test(&ladder.family(), thresholds)?;
    Ok(LadderExperiment {
        model: model.name().to_string(),
        paths: kept.len(),
        excluded,
        ladder,
        nupbr,
    })
}
