//! Range condition and mass functional.
//!
//! A continuous Itô market admits no arbitrage of the first kind exactly when
//! the drift lies in the range of the covariance, `a = c ρ`, and the mass
//! `K_T = ∫ ⟨ρ, c ρ⟩ dt` is finite. On a grid, `ρ = c†a` is computed node by
//! node with a truncated pseudo-inverse; the range condition is judged from
//! the residual `a − cρ`, and finiteness of `K_T` from its behaviour under
//! grid refinement.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{PathBundle, TimeGrid};
use crate::linalg::{check_symmetric, dot, mat_vec, norm_sq, SymEigen};
use crate::model::{psd_root, simulate_path, MarketModel, StepWorkspace, CLAMP_TOL};

/// Default rank cutoff, relative to the largest eigenvalue of `c`.
pub const RANK_TOL: f64 = 1e-10;
/// Structure tolerance: `∫‖a − cρ‖² dt ≤ STRUCT_EPS · ∫(1 + ‖a‖²) dt`.
pub const STRUCT_EPS: f64 = 1e-8;
/// Growth factor separating refinement-stable from divergent mass.
pub const GAMMA: f64 = 1.5;
/// Minimum relative mass gained per refinement for a divergent trend.
pub const MIN_RELATIVE_GROWTH: f64 = 0.05;
/// Share of structure-failing paths that makes the model fail.
pub const STRUCTURE_FAIL_SHARE: f64 = 0.01;
/// Largest tolerated share of exploded paths.
pub const EXCLUSION_LIMIT: f64 = 0.001;

/// `ρ = c†a` and `residual = a − cρ` for a symmetric PSD `c`.
///
/// Eigenvalues at or below `tol · λ_max` are treated as zero, so `cρ` is the
/// orthogonal projection of `a` onto the numerical range of `c`.
pub fn pseudo_solve(c: &[f64], a: &[f64], tol: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = a.len();
    if c.len() != d * d {
        return Err(Error::ShapeMismatch(format!(
            "covariance has {} entries for a drift of length {d}",
            c.len()
        )));
    }
    check_symmetric(c, d)?;
    let mut eig = SymEigen::new(d);
    let mut rho = vec![0.0; d];
    let mut residual = vec![0.0; d];
    solve_with(&mut eig, c, a, tol, &mut rho, &mut residual)?;
    Ok((rho, residual))
}

fn solve_with(
    eig: &mut SymEigen,
    c: &[f64],
    a: &[f64],
    tol: f64,
    rho: &mut [f64],
    residual: &mut [f64],
) -> Result<()> {
    let d = a.len();
    if d == 1 {
        let v = c[0];
        rho[0] = if v > 0.0 { a[0] / v } else { 0.0 };
    } else {
        eig.decompose(c)?;
        let cut = eig.cutoff(tol);
        eig.apply(a, rho, |w| if w > cut && w > 0.0 { 1.0 / w } else { 0.0 });
    }
    mat_vec(c, rho, residual);
    for k in 0..d {
        residual[k] = a[k] - residual[k];
    }
    Ok(())
}

/// Everything computed at one node `(t, s)`.
#[derive(Debug, Clone)]
pub struct NodeAnalyzer {
    pub dim: usize,
    pub tol: f64,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub rho: Vec<f64>,
    pub residual: Vec<f64>,
    /// `λ = c^{1/2} ρ`
    pub sharpe: Vec<f64>,
    /// `⟨ρ, cρ⟩`
    pub mass_rate: f64,
    root: Vec<f64>,
    eig: SymEigen,
}

impl NodeAnalyzer {
    pub fn new(dim: usize, tol: f64) -> Self {
        Self {
            dim,
            tol,
            a: vec![0.0; dim],
            c: vec![0.0; dim * dim],
            rho: vec![0.0; dim],
            residual: vec![0.0; dim],
            sharpe: vec![0.0; dim],
            mass_rate: 0.0,
            root: vec![0.0; dim * dim],
            eig: SymEigen::new(dim),
        }
    }

    pub fn analyze(&mut self, model: &MarketModel, t: f64, s: &[f64]) -> Result<()> {
        model.drift(t, s, &mut self.a);
        model.covariance(t, s, &mut self.c);
        psd_root(t, &self.c, &mut self.eig, &mut self.root)?;
        solve_with(
            &mut self.eig,
            &self.c,
            &self.a,
            self.tol,
            &mut self.rho,
            &mut self.residual,
        )?;
        mat_vec(&self.root, &self.rho, &mut self.sharpe);
        // ⟨ρ, cρ⟩ = |c^{1/2}ρ|², nonnegative by construction
        self.mass_rate = norm_sq(&self.sharpe);
        Ok(())
    }

    /// Component of `a` in the numerical kernel of `c` (valid after
    /// [`NodeAnalyzer::analyze`]).
    pub fn kernel_part(&self, out: &mut [f64]) {
        let d = self.dim;
        if d == 1 {
            out[0] = if self.c[0] > 0.0 { 0.0 } else { self.a[0] };
            return;
        }
        let cut = self.eig.cutoff(self.tol);
        self.eig
            .apply(&self.a, out, |w| if w > cut && w > 0.0 { 0.0 } else { 1.0 });
    }
}

/// Nodewise quantities along one path, evaluated at the left points
/// `t_0, ..., t_{n-1}` (the value on `[t_i, t_{i+1})`).
#[derive(Debug, Clone, Default)]
pub struct PathSeries {
    pub dim: usize,
    pub rho: Vec<f64>,
    pub residual: Vec<f64>,
    pub sharpe: Vec<f64>,
    pub mass_rate: Vec<f64>,
    pub residual_sq: Vec<f64>,
    pub drift_sq: Vec<f64>,
}

impl PathSeries {
    pub fn new(dim: usize, steps: usize) -> Self {
        Self {
            dim,
            rho: vec![0.0; steps * dim],
            residual: vec![0.0; steps * dim],
            sharpe: vec![0.0; steps * dim],
            mass_rate: vec![0.0; steps],
            residual_sq: vec![0.0; steps],
            drift_sq: vec![0.0; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.mass_rate.len()
    }

    pub fn rho_at(&self, i: usize) -> &[f64] {
        &self.rho[i * self.dim..(i + 1) * self.dim]
    }

    /// `∫‖a − cρ‖² dt` and `∫(1 + ‖a‖²) dt` over the grid.
    pub fn structure_integrals(&self, grid: &TimeGrid) -> (f64, f64) {
        let mut r = 0.0;
        let mut scale = 0.0;
        for i in 0..self.steps() {
            let dt = grid.dt(i);
            r += self.residual_sq[i] * dt;
            scale += (1.0 + self.drift_sq[i]) * dt;
        }
        (r, scale)
    }

    pub fn structure_holds(&self, grid: &TimeGrid) -> bool {
        let (r, scale) = self.structure_integrals(grid);
        r <= STRUCT_EPS * scale
    }

    /// Cumulative mass `K_{t_i}` for `i = 0..=n`, `K_0 = 0`.
    pub fn mass_path(&self, grid: &TimeGrid) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.steps() + 1);
        let mut acc = 0.0;
        k.push(0.0);
        for i in 0..self.steps() {
            acc += self.mass_rate[i] * grid.dt(i);
            k.push(acc);
        }
        k
    }
}

/// Fill `series` from the price path `s` (`(n + 1) * d` values).
pub fn analyze_path(
    model: &MarketModel,
    grid: &TimeGrid,
    s: &[f64],
    node: &mut NodeAnalyzer,
    series: &mut PathSeries,
) -> Result<()> {
    let d = model.dim();
    for i in 0..grid.steps() {
        node.analyze(model, grid.nodes()[i], &s[i * d..(i + 1) * d])?;
        series.rho[i * d..(i + 1) * d].copy_from_slice(&node.rho);
        series.residual[i * d..(i + 1) * d].copy_from_slice(&node.residual);
        series.sharpe[i * d..(i + 1) * d].copy_from_slice(&node.sharpe);
        series.mass_rate[i] = node.mass_rate;
        series.residual_sq[i] = norm_sq(&node.residual);
        series.drift_sq[i] = norm_sq(&node.a);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Na1Class {
    #[serde(rename = "NA1_OK")]
    Na1Ok,
    StructureFail,
    MassDiverges,
    Inconclusive,
}

impl Na1Class {
    pub fn as_str(&self) -> &'static str {
        match self {
            Na1Class::Na1Ok => "NA1_OK",
            Na1Class::StructureFail => "STRUCTURE_FAIL",
            Na1Class::MassDiverges => "MASS_DIVERGES",
            Na1Class::Inconclusive => "INCONCLUSIVE",
        }
    }
}

impl std::fmt::Display for Na1Class {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Risk premium along every path of a bundle.
#[derive(Debug, Clone)]
pub struct RiskPremiumReport {
    pub dim: usize,
    pub grid: TimeGrid,
    /// Per path: the nodewise series.
    pub series: Vec<PathSeries>,
    /// Per path: `K_{t_i}`, `i = 0..=n`.
    pub mass: Vec<Vec<f64>>,
    /// Per path: whether `∫‖a − cρ‖² dt` stays within tolerance.
    pub structure_ok: Vec<bool>,
    /// `Some(StructureFail)` when more than 1% of paths fail the range
    /// condition; refinement is needed for any other verdict.
    pub classification: Option<Na1Class>,
}

impl RiskPremiumReport {
    pub fn paths(&self) -> usize {
        self.series.len()
    }

    pub fn terminal_mass(&self) -> Vec<f64> {
        self.mass.iter().map(|k| *k.last().unwrap()).collect()
    }

    pub fn structure_fail_share(&self) -> f64 {
        let bad = self.structure_ok.iter().filter(|ok| !**ok).count();
        bad as f64 / self.paths().max(1) as f64
    }
}

pub fn risk_premium(model: &MarketModel, bundle: &PathBundle) -> Result<RiskPremiumReport> {
    risk_premium_with_tol(model, bundle, RANK_TOL)
}

pub fn risk_premium_with_tol(model: &MarketModel, bundle: &PathBundle, tol: f64) -> Result<RiskPremiumReport> {
    if bundle.dim() != model.dim() {
        return Err(Error::ShapeMismatch(format!(
            "bundle dimension {} vs model dimension {}",
            bundle.dim(),
            model.dim()
        )));
    }
    let grid = bundle.grid().clone();
    let d = model.dim();
    let n = grid.steps();
    let per_path: Vec<Result<(PathSeries, Vec<f64>, bool)>> = (0..bundle.paths())
        .into_par_iter()
        .map_init(
            || NodeAnalyzer::new(d, tol),
            |node, p| {
                let mut series = PathSeries::new(d, n);
                analyze_path(model, &grid, bundle.path(p), node, &mut series)?;
                let mass = series.mass_path(&grid);
                let ok = series.structure_holds(&grid);
                Ok((series, mass, ok))
            },
        )
        .collect();
    let mut series = Vec::with_capacity(bundle.paths());
    let mut mass = Vec::with_capacity(bundle.paths());
    let mut structure_ok = Vec::with_capacity(bundle.paths());
    for r in per_path {
        let (s, k, ok) = r?;
        series.push(s);
        mass.push(k);
        structure_ok.push(ok);
    }
    let mut report = RiskPremiumReport {
        dim: d,
        grid,
        series,
        mass,
        structure_ok,
        classification: None,
    };
    if report.structure_fail_share() > STRUCTURE_FAIL_SHARE {
        report.classification = Some(Na1Class::StructureFail);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Classification by refinement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ClassifyOptions {
    /// Number of grids, coarsest first; at least 2.
    pub levels: usize,
    /// Refinement factor between consecutive grids.
    pub factor: usize,
    pub rank_tol: f64,
    pub gamma: f64,
    /// Number of report times for the quantile time series.
    pub report_points: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            levels: 2,
            factor: 2,
            rank_tol: RANK_TOL,
            gamma: GAMMA,
            report_points: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelStats {
    pub steps: usize,
    pub median_mass: f64,
    pub min_mass: f64,
    pub max_mass: f64,
    pub q05_mass: f64,
    pub q95_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuantileRow {
    pub t: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassificationReport {
    pub model: String,
    pub classification: Na1Class,
    pub paths: usize,
    pub excluded: usize,
    pub structure_fail_share: f64,
    pub levels: Vec<LevelStats>,
    /// `median K` of level `j + 1` over level `j`.
    pub consecutive_ratios: Vec<f64>,
    /// `median K` of the finest level over the coarsest.
    pub overall_ratio: f64,
    /// Smallest and largest `|λ|` seen at any node of the finest grid.
    pub sharpe_min: f64,
    pub sharpe_max: f64,
    /// Per-path terminal mass on the coarsest grid.
    #[serde(skip)]
    pub terminal_mass: Vec<f64>,
    /// Quantiles of `|λ_t|` and `K_t` on the coarsest grid.
    pub sharpe_quantiles: Vec<QuantileRow>,
    pub mass_quantiles: Vec<QuantileRow>,
}

struct PathSummary {
    level_mass: Vec<f64>,
    structure_ok: bool,
    sharpe_min: f64,
    sharpe_max: f64,
    report_sharpe: Vec<f64>,
    report_mass: Vec<f64>,
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

pub fn sorted(mut x: Vec<f64>) -> Vec<f64> {
    x.sort_by(|a, b| a.total_cmp(b));
    x
}

pub fn median(x: &[f64]) -> f64 {
    quantile(&sorted(x.to_vec()), 0.5)
}

/// Report-time node indices on a grid with `steps` intervals.
pub(crate) fn report_indices(steps: usize, points: usize) -> Vec<usize> {
    let points = points.clamp(1, steps);
    let mut idx: Vec<usize> = (0..=points).map(|j| j * steps / points).collect();
    idx.dedup();
    idx
}

/// Classify the model from `m` paths on `grid` refined `levels − 1` times.
///
/// All levels are read off the same finest-grid paths (coarser grids are
/// sub-grids), so the refinement comparison is pathwise.
pub fn classify_na1(
    model: &MarketModel,
    grid: &TimeGrid,
    m: usize,
    seed: u64,
    opts: &ClassifyOptions,
) -> Result<ClassificationReport> {
    if opts.levels < 2 {
        return Err(Error::invalid("classification needs at least 2 refinement levels"));
    }
    if opts.factor < 2 {
        return Err(Error::invalid("refinement factor must be at least 2"));
    }
    if m == 0 {
        return Err(Error::invalid("need at least one path"));
    }
    model.check_grid(grid)?;
    let total_factor = opts.factor.pow((opts.levels - 1) as u32);
    let fine = grid.refine(total_factor)?;
    let d = model.dim();
    let nf = fine.steps();
    let strides: Vec<usize> = (0..opts.levels)
        .map(|l| opts.factor.pow((opts.levels - 1 - l) as u32))
        .collect();
    let coarse_steps = grid.steps();
    let report_idx = report_indices(coarse_steps, opts.report_points);

    let summaries: Vec<Result<Option<PathSummary>>> = (0..m)
        .into_par_iter()
        .map_init(
            || {
                (
                    StepWorkspace::new(d),
                    NodeAnalyzer::new(d, opts.rank_tol),
                    vec![0.0; (nf + 1) * d],
                    PathSeries::new(d, nf),
                )
            },
            |(ws, node, s, series), p| {
                if !simulate_path(model, &fine, seed, p as u64, s, None, ws)? {
                    return Ok(None);
                }
                analyze_path(model, &fine, s, node, series)?;
                let level_mass = strides
                    .iter()
                    .map(|&st| {
                        let mut k = 0.0;
                        let mut i = 0;
                        while i < nf {
                            k += series.mass_rate[i] * (fine.nodes()[i + st] - fine.nodes()[i]);
                            i += st;
                        }
                        k
                    })
                    .collect();
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..nf {
                    let l = norm_sq(&series.sharpe[i * d..(i + 1) * d]).sqrt();
                    lo = lo.min(l);
                    hi = hi.max(l);
                }
                // coarsest-grid time series at the report indices
                let st = strides[0];
                let mut report_sharpe = Vec::with_capacity(report_idx.len());
                let mut report_mass = Vec::with_capacity(report_idx.len());
                let mut k = 0.0;
                let mut j = 0;
                for (ci, _) in (0..=coarse_steps).enumerate() {
                    if report_idx.get(j) == Some(&ci) {
                        let fi = (ci * st).min(nf - 1);
                        report_sharpe.push(norm_sq(&series.sharpe[fi * d..(fi + 1) * d]).sqrt());
                        report_mass.push(k);
                        j += 1;
                    }
                    if ci < coarse_steps {
                        let fi = ci * st;
                        k += series.mass_rate[fi] * (fine.nodes()[fi + st] - fine.nodes()[fi]);
                    }
                }
                Ok(Some(PathSummary {
                    level_mass,
                    structure_ok: series.structure_holds(&fine),
                    sharpe_min: lo,
                    sharpe_max: hi,
                    report_sharpe,
                    report_mass,
                }))
            },
        )
        .collect();

    let mut kept = Vec::with_capacity(m);
    let mut excluded = 0;
    for s in summaries {
        match s? {
            Some(s) => kept.push(s),
            None => excluded += 1,
        }
    }
    if excluded as f64 >= EXCLUSION_LIMIT * m as f64 && excluded > 0 {
        return Err(Error::ExclusionRate {
            excluded,
            total: m,
            limit_percent: EXCLUSION_LIMIT * 100.0,
        });
    }

    let structure_fail_share =
        kept.iter().filter(|s| !s.structure_ok).count() as f64 / kept.len() as f64;
    let levels: Vec<LevelStats> = (0..opts.levels)
        .map(|l| {
            let ks = sorted(kept.iter().map(|s| s.level_mass[l]).collect());
            LevelStats {
                steps: coarse_steps * opts.factor.pow(l as u32),
                median_mass: quantile(&ks, 0.5),
                min_mass: ks[0],
                max_mass: *ks.last().unwrap(),
                q05_mass: quantile(&ks, 0.05),
                q95_mass: quantile(&ks, 0.95),
            }
        })
        .collect();
    let medians: Vec<f64> = levels.iter().map(|l| l.median_mass).collect();
    let ratio = |a: f64, b: f64| -> f64 {
        if a == 0.0 {
            if b == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            b / a
        }
    };
    let consecutive_ratios: Vec<f64> = medians.windows(2).map(|w| ratio(w[0], w[1])).collect();
    let overall_ratio = ratio(medians[0], *medians.last().unwrap());

    let classification = if structure_fail_share > STRUCTURE_FAIL_SHARE {
        Na1Class::StructureFail
    } else if mass_diverges(&medians, opts.gamma) {
        Na1Class::MassDiverges
    } else if consecutive_ratios
        .iter()
        .all(|r| *r >= 1.0 / opts.gamma && *r <= opts.gamma)
    {
        Na1Class::Na1Ok
    } else {
        Na1Class::Inconclusive
    };

    let quantile_rows = |pick: &dyn Fn(&PathSummary) -> &Vec<f64>| -> Vec<QuantileRow> {
        report_idx
            .iter()
            .enumerate()
            .map(|(j, &ci)| {
                let xs = sorted(kept.iter().map(|s| pick(s)[j]).collect());
                QuantileRow {
                    t: grid.nodes()[ci],
                    q05: quantile(&xs, 0.05),
                    q50: quantile(&xs, 0.5),
                    q95: quantile(&xs, 0.95),
                }
            })
            .collect()
    };
    let sharpe_quantiles = quantile_rows(&|s| &s.report_sharpe);
    let mass_quantiles = quantile_rows(&|s| &s.report_mass);

    Ok(ClassificationReport {
        model: model.name().to_string(),
        classification,
        paths: kept.len(),
        excluded,
        structure_fail_share,
        levels,
        consecutive_ratios,
        overall_ratio,
        sharpe_min: kept.iter().map(|s| s.sharpe_min).fold(f64::INFINITY, f64::min),
        sharpe_max: kept.iter().map(|s| s.sharpe_max).fold(f64::NEG_INFINITY, f64::max),
        terminal_mass: kept.iter().map(|s| s.level_mass[0]).collect(),
        sharpe_quantiles,
        mass_quantiles,
    })
}

/// Divergence of the median mass across refinement levels.
///
/// Either every refinement multiplies the median by at least `gamma`, or the
/// median grows at every refinement by at least [`MIN_RELATIVE_GROWTH`] of
/// its value, the increments do not shrink by more than `gamma` from one
/// refinement to the next, and the finest median exceeds the coarsest by a
/// factor `gamma`. The second branch catches logarithmic blow-up such as
/// `Σ Δt / (T − t_i) ≈ log n`, whose consecutive ratios stay below `gamma`.
pub fn mass_diverges(medians: &[f64], gamma: f64) -> bool {
    if medians.len() < 2 {
        return false;
    }
    let geometric = medians
        .windows(2)
        .all(|w| (w[0] == 0.0 && w[1] > 0.0) || (w[0] > 0.0 && w[1] >= gamma * w[0]));
    if geometric {
        return true;
    }
    let first = medians[0];
    let last = *medians.last().unwrap();
    if !(first > 0.0 && last >= gamma * first) {
        return false;
    }
    let inc: Vec<f64> = medians.windows(2).map(|w| w[1] - w[0]).collect();
    let growing = medians
        .windows(2)
        .all(|w| w[1] - w[0] >= MIN_RELATIVE_GROWTH * w[0]);
    let sustained = inc.windows(2).all(|w| w[1] >= w[0] / gamma);
    growing && sustained
}

/// Nodewise residual invariant: `‖c r‖ ≤ tol ‖c‖ ‖a‖`.
pub fn residual_orthogonal(c: &[f64], a: &[f64], residual: &[f64], tol: f64) -> bool {
    let d = a.len();
    let mut cr = vec![0.0; d];
    mat_vec(c, residual, &mut cr);
    let cn = crate::linalg::frobenius(c);
    norm_sq(&cr).sqrt() <= tol * cn * norm_sq(a).sqrt() + f64::MIN_POSITIVE
}

/// `⟨x, c x⟩`
pub fn quad_form(c: &[f64], x: &[f64]) -> f64 {
    let mut cx = vec![0.0; x.len()];
    mat_vec(c, x, &mut cx);
    dot(x, &cx)
}

/// Symmetric PSD square root with the default clamp.
pub fn psd_sqrt(c: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut eig = SymEigen::new(d);
    let mut out = vec![0.0; d * d];
    psd_root(0.0, c, &mut eig, &mut out)?;
    let _ = CLAMP_TOL;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{derive_seed, stream_rng};
    use crate::model::{self, simulate};
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeMap;

    /// Brute-force least squares: minimise ‖a − c v‖ over a dense grid of
    /// candidate v, then polish along each axis.
    fn grid_least_squares(c: &[f64], a: &[f64]) -> Vec<f64> {
        let d = a.len();
        let mut best = vec![0.0; d];
        let mut best_err = f64::INFINITY;
        let steps = 400;
        let lo = -4.0;
        let hi = 4.0;
        let mut idx = vec![0usize; d];
        loop {
            let v: Vec<f64> = idx.iter().map(|&i| lo + (hi - lo) * i as f64 / steps as f64).collect();
            let mut cv = vec![0.0; d];
            mat_vec(c, &v, &mut cv);
            let err: f64 = a.iter().zip(&cv).map(|(x, y)| (x - y).powi(2)).sum();
            // prefer the minimum-norm minimiser among ties
            if err < best_err - 1e-15 || ((err - best_err).abs() <= 1e-15 && norm_sq(&v) < norm_sq(&best)) {
                best_err = err;
                best = v;
            }
            let mut k = 0;
            loop {
                if k == d {
                    return best;
                }
                idx[k] += 1;
                if idx[k] <= steps {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    #[test]
    fn identity_covariance() {
        let (rho, r) = pseudo_solve(&[1.0, 0.0, 0.0, 1.0], &[1.0, 2.0], RANK_TOL).unwrap();
        assert_eq!(rho, vec![1.0, 2.0]);
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn singular_covariance_in_range() {
        let c = [4.0, 0.0, 0.0, 0.0];
        let (rho, r) = pseudo_solve(&c, &[2.0, 0.0], RANK_TOL).unwrap();
        let oracle = grid_least_squares(&c, &[2.0, 0.0]);
        assert!((rho[0] - 0.5).abs() < 1e-15 && rho[1] == 0.0);
        assert!((oracle[0] - 0.5).abs() < 1e-12 && oracle[1].abs() < 1e-12);
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn singular_covariance_out_of_range() {
        let c = [4.0, 0.0, 0.0, 0.0];
        let a = [2.0, 3.0];
        let (rho, r) = pseudo_solve(&c, &a, RANK_TOL).unwrap();
        let oracle = grid_least_squares(&c, &a);
        assert!((rho[0] - oracle[0]).abs() < 1e-12 && (rho[1] - oracle[1]).abs() < 1e-12);
        assert!((rho[0] - 0.5).abs() < 1e-15 && rho[1] == 0.0);
        assert_eq!(r, vec![0.0, 3.0]);
    }

    #[test]
    fn rejects_non_symmetric() {
        assert!(matches!(
            pseudo_solve(&[1.0, 1.0, 0.0, 1.0], &[1.0, 1.0], RANK_TOL),
            Err(Error::NotSymmetric { .. })
        ));
    }

    fn random_psd(rng: &mut impl Rng, d: usize, rank: usize) -> Vec<f64> {
        let b: Vec<f64> = (0..d * rank).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                for k in 0..rank {
                    c[i * d + j] += b[i * rank + k] * b[j * rank + k];
                }
            }
        }
        // exact symmetry
        for i in 0..d {
            for j in 0..i {
                c[i * d + j] = c[j * d + i];
            }
        }
        c
    }

    proptest! {
        #[test]
        fn projection_beats_random_probes(seed in 0u64..1000, d in 1usize..5, rank_sel in 0usize..5) {
            let mut rng = stream_rng(seed, 0);
            let rank = rank_sel.min(d);
            let c = random_psd(&mut rng, d, rank);
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (rho, r) = pseudo_solve(&c, &a, RANK_TOL).unwrap();
            let best = norm_sq(&r).sqrt();
            for _ in 0..100 {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
                let mut cv = vec![0.0; d];
                mat_vec(&c, &v, &mut cv);
                let err: f64 = a.iter().zip(&cv).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                prop_assert!(best <= err + 1e-9);
            }
            prop_assert!(quad_form(&c, &rho) >= -1e-12);
            prop_assert!(residual_orthogonal(&c, &a, &r, 1e-8));
        }
    }

    #[test]
    fn black_scholes_risk_premium() {
        let model = model::from_catalog("black-scholes", &BTreeMap::new()).unwrap();
        let grid = TimeGrid::uniform(1.0, 200).unwrap();
        let s = simulate(&model, &grid, 50, 3).unwrap();
        let rep = risk_premium(&model, &s).unwrap();
        for p in 0..50 {
            let ser = &rep.series[p];
            for i in 0..200 {
                let si = s.at(p, i)[0];
                assert!((ser.rho[i] - 0.05 / (0.04 * si)).abs() < 1e-12 * ser.rho[i].abs());
                assert!((ser.sharpe[i] - 0.25).abs() < 1e-12);
            }
            assert!((rep.mass[p][200] - 0.0625).abs() < 1e-12);
            assert!(rep.mass[p].windows(2).all(|w| w[1] >= w[0]));
        }
        assert_eq!(rep.classification, None);
    }

    #[test]
    fn zero_drift_has_no_mass() {
        let model = model::from_catalog("zero-drift", &BTreeMap::new()).unwrap();
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        let s = simulate(&model, &grid, 10, 3).unwrap();
        let rep = risk_premium(&model, &s).unwrap();
        assert!(rep.series.iter().all(|x| x.rho.iter().all(|r| *r == 0.0)));
        assert!(rep.terminal_mass().iter().all(|k| *k == 0.0));
    }

    #[test]
    fn bessel_mass_matches_inverse_square_sum() {
        let model = model::bessel3(1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 500).unwrap();
        let s = simulate(&model, &grid, 20, 5).unwrap();
        let rep = risk_premium(&model, &s).unwrap();
        for p in 0..20 {
            let direct: f64 = (0..500).map(|i| s.at(p, i)[0].powi(-2) * grid.dt(i)).sum();
            assert!((rep.mass[p][500] - direct).abs() < 1e-10 * direct);
            assert!((rep.series[p].rho[7] - 1.0 / s.at(p, 7)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn bessel_mass_stable_under_refinement() {
        let model = model::bessel3(1.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 250).unwrap();
        let opts = ClassifyOptions {
            levels: 2,
            factor: 4,
            ..Default::default()
        };
        let rep = classify_na1(&model, &grid, 2000, 17, &opts).unwrap();
        let r = rep.consecutive_ratios[0];
        assert!(rep.levels[1].median_mass.is_finite());
        assert!((r - 1.0).abs() < 0.05, "ratio {r}");
        assert_eq!(rep.classification, Na1Class::Na1Ok);
    }

    #[test]
    fn classify_examples() {
        let bs = model::from_catalog("black-scholes", &BTreeMap::new()).unwrap();
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let rep = classify_na1(&bs, &grid, 500, 1, &ClassifyOptions::default()).unwrap();
        assert_eq!(rep.classification, Na1Class::Na1Ok);

        let pd = model::from_catalog("pure-drift", &BTreeMap::new()).unwrap();
        let rep = classify_na1(&pd, &grid, 10, 1, &ClassifyOptions::default()).unwrap();
        assert_eq!(rep.classification, Na1Class::StructureFail);
        assert_eq!(rep.structure_fail_share, 1.0);

        let rd = model::from_catalog("rank-deficient", &BTreeMap::new()).unwrap();
        let rep = classify_na1(&rd, &grid, 50, 1, &ClassifyOptions::default()).unwrap();
        assert_eq!(rep.classification, Na1Class::StructureFail);

        let mut p = BTreeMap::new();
        p.insert("kernel_drift".to_string(), 0.0);
        let rd0 = model::from_catalog("rank-deficient", &p).unwrap();
        let rep = classify_na1(&rd0, &grid, 50, 1, &ClassifyOptions::default()).unwrap();
        assert_eq!(rep.classification, Na1Class::Na1Ok);
    }

    #[test]
    fn exploding_sharpe_mass_is_harmonic() {
        let model = model::exploding_sharpe(1.0, 0.0).unwrap();
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let opts = ClassifyOptions {
            levels: 3,
            factor: 10,
            ..Default::default()
        };
        let rep = classify_na1(&model, &grid, 20, 2, &opts).unwrap();
        for (l, n) in [(0, 100usize), (1, 1000), (2, 10_000)] {
            let h: f64 = (1..=n).map(|j| 1.0 / j as f64).sum();
            assert!((rep.levels[l].median_mass - h).abs() < 1e-9 * h, "level {l}");
        }
        assert_eq!(rep.classification, Na1Class::MassDiverges);
    }

    #[test]
    fn divergence_rule() {
        // geometric growth
        assert!(mass_diverges(&[1.0, 2.0, 4.0], 1.5));
        // harmonic sums at n = 1e3, 1e4, 1e5
        let h = |n: usize| (1..=n).map(|j| 1.0 / j as f64).sum::<f64>();
        assert!(mass_diverges(&[h(1000), h(10_000), h(100_000)], 1.5));
        // converging with shrinking increments
        assert!(!mass_diverges(&[1.0, 1.3, 1.39], 1.5));
        // stable
        assert!(!mass_diverges(&[0.0625, 0.0625], 1.5));
        assert!(!mass_diverges(&[0.0, 0.0, 0.0], 1.5));
        // single refinement that only grows a little
        assert!(!mass_diverges(&[1.0, 1.4], 1.5));
    }

    #[test]
    fn classification_seed_stability() {
        let grid = TimeGrid::uniform(1.0, 50).unwrap();
        for (name, expect) in [
            ("black-scholes", Na1Class::Na1Ok),
            ("bessel3", Na1Class::Na1Ok),
            ("pure-drift", Na1Class::StructureFail),
            ("rank-deficient", Na1Class::StructureFail),
        ] {
            let model = model::from_catalog(name, &BTreeMap::new()).unwrap();
            for k in 0..5 {
                let seed = derive_seed(100, k);
                let rep = classify_na1(&model, &grid, 300, seed, &ClassifyOptions::default()).unwrap();
                assert_eq!(rep.classification, expect, "{name} seed {seed}");
            }
        }
    }

    #[test]
    fn classify_needs_two_levels() {
        let bs = model::from_catalog("black-scholes", &BTreeMap::new()).unwrap();
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let opts = ClassifyOptions {
            levels: 1,
            ..Default::default()
        };
        assert!(classify_na1(&bs, &grid, 10, 1, &opts).is_err());
    }

    #[test]
    fn report_indices_cover_grid() {
        assert_eq!(report_indices(10, 100), (0..=10).collect::<Vec<_>>());
        let idx = report_indices(1000, 100);
        assert_eq!(idx.len(), 101);
        assert_eq!(*idx.last().unwrap(), 1000);
    }
}
