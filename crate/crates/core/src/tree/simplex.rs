//! Dense two-phase simplex with Bland's rule, generic over [`Scalar`].
//!
//! Problems here have a few dozen variables at most; the point is exactness
//! (over rationals) and guaranteed termination, not speed.

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome<T> {
    Optimal { x: Vec<T>, value: T },
    Infeasible,
    Unbounded,
}

/// `maximize ⟨c, x⟩` subject to linear rows and `x ≥ 0`.
#[derive(Debug, Clone)]
pub struct Lp<T> {
    vars: usize,
    objective: Vec<T>,
    rows: Vec<(Vec<T>, Cmp, T)>,
}

impl<T: Scalar> Lp<T> {
    pub fn new(vars: usize) -> Self {
        Self {
            vars,
            objective: vec![T::zero(); vars],
            rows: Vec::new(),
        }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn maximize(&mut self, c: Vec<T>) -> &mut Self {
        assert_eq!(c.len(), self.vars);
        self.objective = c;
        self
    }

    pub fn constraint(&mut self, coeffs: Vec<T>, cmp: Cmp, rhs: T) -> &mut Self {
        assert_eq!(coeffs.len(), self.vars);
        self.rows.push((coeffs, cmp, rhs));
        self
    }

    pub fn solve(&self) -> LpOutcome<T> {
        Tableau::build(self).run(&self.objective, self.vars)
    }
}

struct Tableau<T> {
    /// `m` rows of `cols + 1` entries, the last being the right-hand side.
    a: Vec<Vec<T>>,
    basis: Vec<usize>,
    cols: usize,
    /// First artificial column.
    art: usize,
}

impl<T: Scalar> Tableau<T> {
    fn build(lp: &Lp<T>) -> Self {
        let n = lp.vars;
        let slacks = lp.rows.iter().filter(|r| r.1 != Cmp::Eq).count();
        let m = lp.rows.len();
        let art = n + slacks;
        let cols = art + m;
        let mut a = Vec::with_capacity(m);
        let mut basis = Vec::with_capacity(m);
        let mut slack = n;
        for (i, (coeffs, cmp, rhs)) in lp.rows.iter().enumerate() {
            let mut row = vec![T::zero(); cols + 1];
            row[..n].clone_from_slice(coeffs);
            match cmp {
                Cmp::Le => {
                    row[slack] = T::one();
                    slack += 1;
                }
                Cmp::Ge => {
                    row[slack] = -T::one();
                    slack += 1;
                }
                Cmp::Eq => {}
            }
            row[cols] = rhs.clone();
            if *rhs < T::zero() {
                row.iter_mut().for_each(|x| *x = -x.clone());
            }
            row[art + i] = T::one();
            a.push(row);
            basis.push(art + i);
        }
        Self { a, basis, cols, art }
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.a[r][c].clone();
        for x in self.a[r].iter_mut() {
            *x = x.clone() / p.clone();
        }
        let pivot_row = self.a[r].clone();
        for (i, row) in self.a.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c].clone();
            if f == T::zero() {
                continue;
            }
            for (x, y) in row.iter_mut().zip(&pivot_row) {
                *x = x.clone() - f.clone() * y.clone();
            }
        }
        self.basis[r] = c;
    }

    /// Maximize `⟨cost, x⟩` over columns `< limit`. Returns false when
    /// unbounded.
    fn optimize(&mut self, cost: &[T], limit: usize) -> bool {
        loop {
            // Bland: smallest improving column
            let mut entering = None;
            for j in 0..limit {
                if self.basis.contains(&j) {
                    continue;
                }
                let mut rc = cost[j].clone();
                for (i, row) in self.a.iter().enumerate() {
                    rc = rc - cost[self.basis[i]].clone() * row[j].clone();
                }
                if rc.is_positive() {
                    entering = Some(j);
                    break;
                }
            }
            let Some(j) = entering else {
                return true;
            };
            let mut leave: Option<(usize, T)> = None;
            for (i, row) in self.a.iter().enumerate() {
                if !row[j].is_positive() {
                    continue;
                }
                let ratio = row[self.cols].clone() / row[j].clone();
                let better = match &leave {
                    None => true,
                    Some((li, lr)) => {
                        ratio < *lr && !ratio.approx_eq(lr)
                            || ratio.approx_eq(lr) && self.basis[i] < self.basis[*li]
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
            let Some((r, _)) = leave else {
                return false;
            };
            self.pivot(r, j);
        }
    }

    fn value(&self, cost: &[T]) -> T {
        let mut v = T::zero();
        for (i, row) in self.a.iter().enumerate() {
            v = v + cost[self.basis[i]].clone() * row[self.cols].clone();
        }
        v
    }

    fn run(mut self, objective: &[T], n: usize) -> LpOutcome<T> {
        let cols = self.cols;
        // phase 1: maximize −Σ artificials
        let mut phase1 = vec![T::zero(); cols];
        for c in phase1.iter_mut().skip(self.art) {
            *c = -T::one();
        }
        self.optimize(&phase1, cols);
        if self.value(&phase1).is_negative() {
            return LpOutcome::Infeasible;
        }
        // drive remaining artificials out of the basis or drop their rows
        let mut i = 0;
        while i < self.a.len() {
            if self.basis[i] >= self.art {
                match (0..self.art).find(|&j| !self.a[i][j].is_negligible()) {
                    Some(j) => {
                        self.pivot(i, j);
                        i += 1;
                    }
                    None => {
                        self.a.remove(i);
                        self.basis.remove(i);
                    }
                }
            } else {
                i += 1;
            }
        }
        let mut cost = vec![T::zero(); cols];
        cost[..n].clone_from_slice(objective);
        if !self.optimize(&cost, self.art) {
            return LpOutcome::Unbounded;
        }
        let mut x = vec![T::zero(); n];
        for (i, &b) in self.basis.iter().enumerate() {
            if b < n {
                x[b] = self.a[i][cols].clone();
            }
        }
        let value = self.value(&cost);
        LpOutcome::Optimal { x, value }
    }
}
