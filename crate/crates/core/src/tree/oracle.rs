//! Exact checks on finite trees: deflator feasibility, one-period arbitrage,
//! Bayes consistency over all stopping times, separation and the
//! martingale property of admissible wealth.

use num_rational::BigRational;
use rand::Rng;
use serde::Serialize;

use super::scalar::Scalar;
use super::simplex::{Cmp, Lp, LpOutcome};
use super::{TreeBuilder, TreeModel};
use crate::error::{Error, Result};

/// Upper bound on the number of stopping times enumerated.
pub const MAX_STOPPING_TIMES: usize = 1_000_000;
/// Strategy bound in the separating LP.
pub const SEPARATING_BOUND: i64 = 1000;
/// Full `{−1, 0, 1}` strategy enumeration is done only below this count.
pub const MAX_COMBO_STRATEGIES: usize = 20_000;

/// Strictly positive one-period martingale weights for `increments`, if any.
///
/// Solves `max t` over `Σq = 1`, `Σ q_j x_j = 0`, `q_j ≥ t`, `t ≤ 1`; the
/// weights exist iff the optimum is positive.
pub fn one_step_deflator<T: Scalar>(increments: &[Vec<T>]) -> Option<Vec<T>> {
    let b = increments.len();
    if b == 0 {
        return None;
    }
    let d = increments[0].len();
    let n = b + 1;
    let mut lp = Lp::new(n);
    let mut obj = vec![T::zero(); n];
    obj[b] = T::one();
    lp.maximize(obj);
    let mut sum = vec![T::one(); n];
    sum[b] = T::zero();
    lp.constraint(sum, Cmp::Eq, T::one());
    for k in 0..d {
        let mut row: Vec<T> = increments.iter().map(|x| x[k].clone()).collect();
        row.push(T::zero());
        lp.constraint(row, Cmp::Eq, T::zero());
    }
    for j in 0..b {
        let mut row = vec![T::zero(); n];
        row[j] = T::one();
        row[b] = -T::one();
        lp.constraint(row, Cmp::Ge, T::zero());
    }
    let mut cap = vec![T::zero(); n];
    cap[b] = T::one();
    lp.constraint(cap, Cmp::Le, T::one());
    match lp.solve() {
        LpOutcome::Optimal { mut x, value } if value.is_positive() => {
            x.truncate(b);
            Some(x)
        }
        _ => None,
    }
}

/// A one-period arbitrage `ϑ ∈ [−1, 1]^d` with `⟨ϑ, x_j⟩ ≥ 0` for every
/// branch and `> 0` for some, if one exists.
pub fn one_step_arbitrage<T: Scalar>(increments: &[Vec<T>]) -> Option<Vec<T>> {
    let d = increments.first()?.len();
    // ϑ = u − w with u, w ∈ [0, 1]^d
    let n = 2 * d;
    let split = |x: &[T]| -> Vec<T> {
        x.iter()
            .flat_map(|v| [v.clone(), -v.clone()])
            .collect()
    };
    let mut lp = Lp::new(n);
    let mut total = vec![T::zero(); d];
    for x in increments {
        for (t, v) in total.iter_mut().zip(x) {
            *t = t.clone() + v.clone();
        }
        lp.constraint(split(x), Cmp::Ge, T::zero());
    }
    lp.maximize(split(&total));
    for i in 0..n {
        let mut row = vec![T::zero(); n];
        row[i] = T::one();
        lp.constraint(row, Cmp::Le, T::one());
    }
    match lp.solve() {
        LpOutcome::Optimal { x, value } if value.is_positive() => Some(
            (0..d)
                .map(|k| x[2 * k].clone() - x[2 * k + 1].clone())
                .collect(),
        ),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility<T> {
    /// Density process `y` (root value 1) and the conditional probabilities
    /// of the equivalent martingale measure (1 at the root).
    Deflator { y: Vec<T>, q: Vec<T> },
    /// No strictly positive martingale weights at `node`; `certificate` is a
    /// one-period arbitrage there.
    Infeasible {
        node: usize,
        certificate: Option<Vec<T>>,
    },
}

impl<T> Feasibility<T> {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Deflator { .. })
    }
}

/// Solve the node-wise deflator LPs and chain them into a density process.
pub fn deflator_feasibility<T: Scalar>(tree: &TreeModel<T>) -> Feasibility<T> {
    let mut q = vec![T::one(); tree.len()];
    let mut y = vec![T::one(); tree.len()];
    for v in 0..tree.len() {
        if tree.is_terminal(v) {
            continue;
        }
        let inc = tree.increments(v);
        match one_step_deflator(&inc) {
            Some(weights) => {
                for (&c, w) in tree.children(v).iter().zip(weights) {
                    y[c] = y[v].clone() * w.clone() / tree.node(c).prob.clone();
                    q[c] = w;
                }
            }
            None => {
                return Feasibility::Infeasible {
                    node: v,
                    certificate: one_step_arbitrage(&inc),
                }
            }
        }
    }
    Feasibility::Deflator { y, q }
}

/// First node (in storage order) that admits a one-period arbitrage.
pub fn find_arbitrage<T: Scalar>(tree: &TreeModel<T>) -> Option<(usize, Vec<T>)> {
    tree.nonterminal()
        .into_iter()
        .find_map(|v| one_step_arbitrage(&tree.increments(v)).map(|t| (v, t)))
}

/// `z` is a martingale under the tree's own probabilities.
pub fn is_martingale<T: Scalar>(tree: &TreeModel<T>, z: &[T]) -> bool {
    tree.nonterminal().into_iter().all(|v| {
        let mean = tree
            .children(v)
            .iter()
            .fold(T::zero(), |acc, &c| acc + tree.node(c).prob.clone() * z[c].clone());
        mean.approx_eq(&z[v])
    })
}

fn check_density<T: Scalar>(tree: &TreeModel<T>, y: &[T]) -> Result<()> {
    if y.len() != tree.len() {
        return Err(Error::ShapeMismatch("one density value per node expected".into()));
    }
    if let Some(v) = y.iter().position(|x| !x.is_positive()) {
        return Err(Error::invalid(format!("density is not strictly positive at node {v}")));
    }
    if !is_martingale(tree, y) {
        return Err(Error::invalid("density is not a martingale under the tree probabilities"));
    }
    Ok(())
}

/// The tree under the measure with density process `y`: branch
/// probabilities `p_j y_j / y_v`.
pub fn reweight<T: Scalar>(tree: &TreeModel<T>, y: &[T]) -> Result<TreeModel<T>> {
    check_density(tree, y)?;
    let probs = tree
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| match n.parent {
            None => T::one(),
            Some(p) => n.prob.clone() * y[i].clone() / y[p].clone(),
        })
        .collect();
    tree.with_probabilities(probs)
}

/// Normalized terminal masses `P(ω) y_T(ω) / y_0`, one per leaf.
pub fn terminal_masses<T: Scalar>(tree: &TreeModel<T>, y: &[T]) -> Vec<(usize, T)> {
    let p = tree.path_probabilities();
    tree.leaves()
        .into_iter()
        .map(|l| (l, p[l].clone() * y[l].clone() / y[0].clone()))
        .collect()
}

/// Density process of a measure given by its terminal masses:
/// `Y_v = Q(subtree of v) / P(v)`.
pub fn density_from_masses<T: Scalar>(tree: &TreeModel<T>, masses: &[(usize, T)]) -> Result<Vec<T>> {
    let mut mass = vec![T::zero(); tree.len()];
    for (l, m) in masses {
        if *l >= tree.len() || !tree.is_terminal(*l) {
            return Err(Error::invalid(format!("node {l} is not a leaf")));
        }
        mass[*l] = m.clone();
    }
    for v in (1..tree.len()).rev() {
        let parent = tree.node(v).parent.expect("non-root node has a parent");
        mass[parent] = mass[parent].clone() + mass[v].clone();
    }
    if !mass[0].is_positive() {
        return Err(Error::invalid("measure has no mass"));
    }
    let total = mass[0].clone();
    let p = tree.path_probabilities();
    Ok(mass
        .into_iter()
        .zip(p)
        .map(|(m, p)| m / total.clone() / p)
        .collect())
}

/// The density built level by level agrees with the one recovered from
/// terminal masses alone.
pub fn patching_consistent<T: Scalar>(tree: &TreeModel<T>, y: &[T]) -> Result<bool> {
    let back = density_from_masses(tree, &terminal_masses(tree, y))?;
    Ok(back
        .iter()
        .zip(y)
        .all(|(a, b)| a.approx_eq(&(b.clone() / y[0].clone()))))
}

/// Number of stopping times (antichain cuts through every path).
pub fn count_stopping_times<T: Scalar>(tree: &TreeModel<T>) -> usize {
    let mut f = vec![1usize; tree.len()];
    for v in (0..tree.len()).rev() {
        if !tree.is_terminal(v) {
            let prod = tree
                .children(v)
                .iter()
                .fold(1usize, |acc, &c| acc.saturating_mul(f[c]));
            f[v] = prod.saturating_add(1);
        }
    }
    f[0]
}

/// `Σ_{u ∈ τ} w_u` for every stopping time `τ`.
fn stopped_sums<T: Scalar>(tree: &TreeModel<T>, w: &[T]) -> Result<Vec<T>> {
    let count = count_stopping_times(tree);
    if count > MAX_STOPPING_TIMES {
        return Err(Error::refused(format!(
            "tree has {count} stopping times, more than the {MAX_STOPPING_TIMES} enumerated"
        )));
    }
    let mut sums: Vec<Option<Vec<T>>> = vec![None; tree.len()];
    for v in (0..tree.len()).rev() {
        let mut here = vec![w[v].clone()];
        if !tree.is_terminal(v) {
            let mut combos = vec![T::zero()];
            for &c in tree.children(v) {
                let child = sums[c].take().expect("children are processed first");
                combos = combos
                    .iter()
                    .flat_map(|a| child.iter().map(move |b| a.clone() + b.clone()))
                    .collect();
            }
            here.extend(combos);
        }
        sums[v] = Some(here);
    }
    Ok(sums[0].take().expect("root processed"))
}

#[derive(Debug, Clone, Serialize)]
pub struct BayesOutcome {
    pub stopping_times: usize,
    /// `E_Q[X_τ] = X_0` for every stopping time.
    pub q_martingale: bool,
    /// `E_P[Y_τ X_τ] = Y_0 X_0` for every stopping time.
    pub deflated_p_martingale: bool,
}

impl BayesOutcome {
    pub fn consistent(&self) -> bool {
        self.q_martingale == self.deflated_p_martingale
    }
}

/// Compare the optional-stopping identity for `x` under `Q` (conditional
/// probabilities reweighted by `y`) with the one for `y x` under `P`, over
/// every stopping time of the tree.
pub fn bayes_check<T: Scalar>(tree: &TreeModel<T>, y: &[T], x: &[T]) -> Result<BayesOutcome> {
    if x.len() != tree.len() {
        return Err(Error::ShapeMismatch("one value per node expected".into()));
    }
    let qtree = reweight(tree, y)?;
    let qpath = qtree.path_probabilities();
    let ppath = tree.path_probabilities();
    let wq: Vec<T> = qpath.iter().zip(x).map(|(q, x)| q.clone() * x.clone()).collect();
    let wp: Vec<T> = (0..tree.len())
        .map(|i| ppath[i].clone() * y[i].clone() * x[i].clone())
        .collect();
    let lhs = stopped_sums(tree, &wq)?;
    let rhs = stopped_sums(tree, &wp)?;
    let x0 = x[0].clone();
    let yx0 = y[0].clone() * x[0].clone();
    Ok(BayesOutcome {
        stopping_times: lhs.len(),
        q_martingale: lhs.iter().all(|s| s.approx_eq(&x0)),
        deflated_p_martingale: rhs.iter().all(|s| s.approx_eq(&yx0)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparatingReport<T> {
    pub bound: T,
    /// `sup E_Q[X_T] − 1` over nonnegative wealth started at 1.
    pub max_gain: T,
    pub holds: bool,
    /// Optimal holdings per nonterminal node.
    pub strategy: Vec<(usize, Vec<T>)>,
}

/// Maximize `E_Q[X_T] − 1` over strategies in `[−B, B]^d` with wealth
/// `X_0 = 1` kept nonnegative. The measure is separating iff the maximum
/// is not positive.
pub fn separating_check<T: Scalar>(tree: &TreeModel<T>, y: &[T], bound: T) -> Result<SeparatingReport<T>> {
    check_density(tree, y)?;
    if bound.is_negative() {
        return Err(Error::invalid("strategy bound must be nonnegative"));
    }
    let d = tree.dim();
    let inner = tree.nonterminal();
    let mut slot = vec![usize::MAX; tree.len()];
    for (i, &v) in inner.iter().enumerate() {
        slot[v] = i;
    }
    let n = 2 * d * inner.len();
    // gain of each node as a linear form in (u, w)
    let mut gain: Vec<Vec<T>> = vec![vec![T::zero(); n]; tree.len()];
    for c in 1..tree.len() {
        let p = tree.node(c).parent.expect("non-root node has a parent");
        let mut row = gain[p].clone();
        let base = 2 * d * slot[p];
        for k in 0..d {
            let dx = tree.price(c)[k].clone() - tree.price(p)[k].clone();
            row[base + 2 * k] = row[base + 2 * k].clone() + dx.clone();
            row[base + 2 * k + 1] = row[base + 2 * k + 1].clone() - dx;
        }
        gain[c] = row;
    }
    let mut lp = Lp::new(n);
    let mut obj = vec![T::zero(); n];
    for (l, m) in terminal_masses(tree, y) {
        for (o, g) in obj.iter_mut().zip(&gain[l]) {
            *o = o.clone() + m.clone() * g.clone();
        }
    }
    lp.maximize(obj);
    for row in gain.iter().skip(1) {
        lp.constraint(row.clone(), Cmp::Ge, -T::one());
    }
    for i in 0..n {
        let mut row = vec![T::zero(); n];
        row[i] = T::one();
        lp.constraint(row, Cmp::Le, bound.clone());
    }
    match lp.solve() {
        LpOutcome::Optimal { x, value } => {
            let strategy = inner
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let base = 2 * d * i;
                    (
                        v,
                        (0..d)
                            .map(|k| x[base + 2 * k].clone() - x[base + 2 * k + 1].clone())
                            .collect(),
                    )
                })
                .collect();
            Ok(SeparatingReport {
                bound,
                holds: !value.is_positive(),
                max_gain: value,
                strategy,
            })
        }
        other => Err(Error::invalid(format!("separating program did not solve: {other:?}"))),
    }
}

/// Wealth `x0 + Σ ⟨ϑ, ΔS⟩` of the holdings `theta` (indexed like
/// `tree.nonterminal()`), shifted up by the least capital that keeps it
/// nonnegative.
pub fn admissible_wealth<T: Scalar>(tree: &TreeModel<T>, theta: &[Vec<T>]) -> Vec<T> {
    let d = tree.dim();
    let inner = tree.nonterminal();
    let mut slot = vec![usize::MAX; tree.len()];
    for (i, &v) in inner.iter().enumerate() {
        slot[v] = i;
    }
    let mut x = vec![T::zero(); tree.len()];
    for c in 1..tree.len() {
        let p = tree.node(c).parent.expect("non-root node has a parent");
        let h = &theta[slot[p]];
        let mut g = x[p].clone();
        for k in 0..d {
            g = g + h[k].clone() * (tree.price(c)[k].clone() - tree.price(p)[k].clone());
        }
        x[c] = g;
    }
    let low = x.iter().fold(T::zero(), |m, v| if *v < m { v.clone() } else { m });
    x.into_iter().map(|v| v - low.clone()).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct WealthMartingaleOutcome {
    /// Every price component is a martingale under `Q`.
    pub price_q_martingale: bool,
    /// Every enumerated admissible wealth is a martingale under `Q`.
    pub wealth_q_martingale: bool,
    pub strategies: usize,
}

impl WealthMartingaleOutcome {
    pub fn consistent(&self) -> bool {
        self.price_q_martingale == self.wealth_q_martingale
    }
}

/// Compare "prices are `Q`-martingales" with "all admissible wealth
/// processes are `Q`-martingales". Strategies enumerated: a unit long or
/// short position in one asset at one node, plus every `{−1, 0, 1}`
/// strategy when there are few enough of them.
pub fn wealth_martingale_check<T: Scalar>(tree: &TreeModel<T>, y: &[T]) -> Result<WealthMartingaleOutcome> {
    let qtree = reweight(tree, y)?;
    let d = tree.dim();
    let price_q_martingale = (0..d).all(|k| is_martingale(&qtree, &tree.price_process(k)));
    let slots = tree.nonterminal().len();
    let mut strategies = 0usize;
    let mut all = true;
    let mut test = |theta: &[Vec<T>]| {
        strategies += 1;
        if all && !is_martingale(&qtree, &admissible_wealth(tree, theta)) {
            all = false;
        }
    };
    for s in 0..slots {
        for k in 0..d {
            for sign in [T::one(), -T::one()] {
                let mut theta = vec![vec![T::zero(); d]; slots];
                theta[s][k] = sign;
                test(&theta);
            }
        }
    }
    let vars = slots * d;
    let combos = 3f64.powi(vars as i32);
    if combos <= MAX_COMBO_STRATEGIES as f64 {
        for code in 0..combos as usize {
            let mut c = code;
            let theta: Vec<Vec<T>> = (0..slots)
                .map(|_| {
                    (0..d)
                        .map(|_| {
                            let digit = c % 3;
                            c /= 3;
                            T::from_i64(digit as i64 - 1)
                        })
                        .collect()
                })
                .collect();
            test(&theta);
        }
    }
    Ok(WealthMartingaleOutcome {
        price_q_martingale,
        wealth_q_martingale: all,
        strategies,
    })
}

/// Random martingale under the tree probabilities, started at 1: children
/// get random offsets with the weighted mean removed.
pub fn random_martingale<R: Rng + ?Sized>(tree: &TreeModel<BigRational>, rng: &mut R) -> Vec<BigRational> {
    let mut x = vec![<BigRational as Scalar>::one(); tree.len()];
    for v in tree.nonterminal() {
        let kids = tree.children(v);
        let raw: Vec<BigRational> = kids
            .iter()
            .map(|_| <BigRational as Scalar>::from_i64(rng.random_range(-4..=4)) / <BigRational as Scalar>::from_i64(4))
            .collect();
        let mean = kids
            .iter()
            .zip(&raw)
            .fold(<BigRational as Scalar>::zero(), |acc, (&c, r)| acc + tree.node(c).prob.clone() * r.clone());
        for (&c, r) in kids.iter().zip(raw) {
            x[c] = x[v].clone() + r - mean.clone();
        }
    }
    x
}

/// Random process with independent values in `[0, 2]`, root 1.
pub fn random_process<R: Rng + ?Sized>(tree: &TreeModel<BigRational>, rng: &mut R) -> Vec<BigRational> {
    let mut x: Vec<BigRational> = (0..tree.len())
        .map(|_| <BigRational as Scalar>::from_i64(rng.random_range(0..=8)) / <BigRational as Scalar>::from_i64(4))
        .collect();
    x[0] = <BigRational as Scalar>::one();
    x
}

/// Random tree in which every node is arbitrage-free: the last branch is a
/// negative combination of the others, so zero lies strictly inside the
/// hull of the increments.
pub fn random_viable_tree<R: Rng + ?Sized>(
    rng: &mut R,
    depth: usize,
    max_branch: usize,
    dim: usize,
) -> TreeModel<BigRational> {
    let q = |n: i64, d: i64| <BigRational as Scalar>::from_i64(n) / <BigRational as Scalar>::from_i64(d);
    let root: Vec<BigRational> = (0..dim).map(|_| q(rng.random_range(4..8), 1)).collect();
    let mut b = TreeBuilder::new(root);
    let mut frontier = vec![0usize];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &v in &frontier {
            let k = rng.random_range(2..=max_branch.max(2));
            let weights: Vec<i64> = (0..k).map(|_| rng.random_range(1..5)).collect();
            let total: i64 = weights.iter().sum();
            let mut incs: Vec<Vec<BigRational>> = (0..k - 1)
                .map(|_| (0..dim).map(|_| q(rng.random_range(-4..=4), 4)).collect())
                .collect();
            let mut last = vec![<BigRational as Scalar>::zero(); dim];
            for x in &incs {
                let a = q(rng.random_range(1..4), 2);
                for (l, xi) in last.iter_mut().zip(x) {
                    *l = l.clone() - a.clone() * xi.clone();
                }
            }
            incs.push(last);
            let base = b.nodes[v].price.clone();
            for (w, inc) in weights.into_iter().zip(incs) {
                let price = base.iter().zip(inc).map(|(s, x)| s.clone() + x).collect();
                next.push(b.child(v, q(w, total), price));
            }
        }
        frontier = next;
    }
    b.build().expect("generated tree is valid")
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizationTable {
    pub levels: Vec<f64>,
    pub depths: Vec<usize>,
    /// `values[i][j] = E[Y_T 1{τ_n ≥ T}]` for depth `i` and level `j`.
    pub values: Vec<Vec<f64>>,
}

/// `E[Y_T 1{τ_n ≥ T}]` where `Y` is the first price component and `τ_n` its
/// first passage to `n`; a passage at the terminal date counts as `τ_n ≥ T`.
pub fn stopped_survival(tree: &TreeModel<f64>, levels: &[f64]) -> Vec<f64> {
    let p = tree.path_probabilities();
    let horizon = tree.depth();
    // running maximum of Y strictly before the terminal date
    let mut peak = vec![f64::NEG_INFINITY; tree.len()];
    for v in 0..tree.len() {
        let own = if tree.node(v).depth < horizon {
            tree.price(v)[0]
        } else {
            f64::NEG_INFINITY
        };
        peak[v] = match tree.node(v).parent {
            None => own,
            Some(parent) => peak[parent].max(own),
        };
    }
    levels
        .iter()
        .map(|&n| {
            tree.leaves()
                .into_iter()
                .filter(|&l| peak[l] < n)
                .map(|l| p[l] * tree.price(l)[0])
                .sum()
        })
        .collect()
}

/// [`stopped_survival`] on inverse Bessel trees of each depth.
pub fn inverse_bessel_table(depths: &[usize], levels: &[f64], horizon: f64) -> Result<LocalizationTable> {
    let values = depths
        .iter()
        .map(|&n| super::inverse_bessel_tree(n, horizon).map(|t| stopped_survival(&t, levels)))
        .collect::<Result<_>>()?;
    Ok(LocalizationTable {
        levels: levels.to_vec(),
        depths: depths.to_vec(),
        values,
    })
}
