//! Time grids, per-path random streams and path containers.
//!
//! Every simulated path is driven by its own ChaCha8 stream. The stream for
//! path `p` under master seed `s` is the ChaCha8 keystream keyed by
//! `ChaCha8Rng::seed_from_u64(s)` with stream id (nonce) `p` and word position
//! 0. A path can therefore be regenerated from `(seed, stream id)` alone,
//! independently of how many threads produced its neighbours.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Random stream for path `stream` under master seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive an independent master seed for a secondary purpose (strategy
/// randomization, probe vectors, ...) so it never shares streams with the
/// price simulation.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fill `out` with independent standard normal draws.
pub fn fill_normals<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for x in out.iter_mut() {
        *x = rng.sample(StandardNormal);
    }
}

/// Strictly increasing time nodes `0 = t_0 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    nodes: Vec<f64>,
    uniform: bool,
}

impl TimeGrid {
    /// Uniform grid with `steps` intervals of length `horizon / steps`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!(
                "grid horizon must be positive and finite, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        let n = steps as f64;
        let mut nodes: Vec<f64> = (0..=steps).map(|i| horizon * (i as f64) / n).collect();
        nodes[steps] = horizon;
        Ok(Self {
            horizon,
            nodes,
            uniform: true,
        })
    }

    /// Arbitrary grid from explicit nodes. The first node must be 0.
    pub fn from_nodes(nodes: Vec<f64>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::invalid("grid needs at least two nodes"));
        }
        if nodes[0] != 0.0 {
            return Err(Error::invalid("grid must start at t = 0"));
        }
        if nodes.iter().any(|t| !t.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("grid nodes must be finite and strictly increasing"));
        }
        let horizon = *nodes.last().unwrap();
        Ok(Self {
            horizon,
            nodes,
            uniform: false,
        })
    }

    /// Split every interval into `factor` equal pieces.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::invalid(format!(
                "refinement factor must be at least 2, got {factor}"
            )));
        }
        if self.uniform {
            return Self::uniform(self.horizon, self.steps() * factor);
        }
        let mut nodes = Vec::with_capacity(self.steps() * factor + 1);
        for w in self.nodes.windows(2) {
            let h = w[1] - w[0];
            for j in 0..factor {
                nodes.push(w[0] + h * (j as f64) / (factor as f64));
            }
        }
        nodes.push(self.horizon);
        Self::from_nodes(nodes)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    /// Length of interval `i`, i.e. `t_{i+1} - t_i`.
    #[inline]
    pub fn dt(&self, i: usize) -> f64 {
        self.nodes[i + 1] - self.nodes[i]
    }

    /// Node index closest to time `t` (clamped into the grid).
    pub fn index_at(&self, t: f64) -> usize {
        match self
            .nodes
            .binary_search_by(|x| x.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) if i >= self.nodes.len() => self.steps(),
            Err(i) => {
                if t - self.nodes[i - 1] <= self.nodes[i] - t {
                    i - 1
                } else {
                    i
                }
            }
        }
    }
}

/// `m` paths of a `d`-dimensional process on a shared grid, stored
/// path-major: value `k` of path `p` at node `i` lives at
/// `values[(p * (n + 1) + i) * d + k]`.
#[derive(Debug, Clone)]
pub struct PathBundle {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
    seed: u64,
    stream_ids: Vec<u64>,
    excluded: usize,
}

impl PathBundle {
    pub fn new(
        grid: TimeGrid,
        dim: usize,
        values: Vec<f64>,
        seed: u64,
        stream_ids: Vec<u64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("path dimension must be positive"));
        }
        let per_path = (grid.steps() + 1) * dim;
        if values.len() != per_path * stream_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} paths of {} entries",
                values.len(),
                stream_ids.len(),
                per_path
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("path bundle values must be finite"));
        }
        Ok(Self {
            grid,
            dim,
            values,
            seed,
            stream_ids,
            excluded: 0,
        })
    }

    pub(crate) fn with_excluded(mut self, excluded: usize) -> Self {
        self.excluded = excluded;
        self
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of retained paths.
    pub fn paths(&self) -> usize {
        self.stream_ids.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_ids(&self) -> &[u64] {
        &self.stream_ids
    }

    /// Paths dropped during generation because they overflowed.
    pub fn excluded(&self) -> usize {
        self.excluded
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entries per path, `(n + 1) * d`.
    pub fn path_len(&self) -> usize {
        (self.grid.steps() + 1) * self.dim
    }

    /// All nodes of path `p`, flattened node-major.
    pub fn path(&self, p: usize) -> &[f64] {
        let len = self.path_len();
        &self.values[p * len..(p + 1) * len]
    }

    /// State of path `p` at node `i`.
    pub fn at(&self, p: usize, i: usize) -> &[f64] {
        let d = self.dim;
        &self.path(p)[i * d..(i + 1) * d]
    }

    /// Component `k` of every path at node `i`.
    pub fn cross_section(&self, i: usize, k: usize) -> Vec<f64> {
        (0..self.paths()).map(|p| self.at(p, i)[k]).collect()
    }

    pub fn terminal(&self, k: usize) -> Vec<f64> {
        self.cross_section(self.grid.steps(), k)
    }
}

/// Standard `dim`-dimensional Brownian motion started at 0.
#[derive(Debug, Clone)]
pub struct BrownianDriver {
    pub dim: usize,
    pub grid: TimeGrid,
    pub seed: u64,
}

impl BrownianDriver {
    pub fn new(dim: usize, grid: TimeGrid, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("Brownian dimension must be positive"));
        }
        Ok(Self { dim, grid, seed })
    }

    /// Write path `stream` into `out` (length `(n + 1) * dim`).
    pub fn fill_path(&self, stream: u64, out: &mut [f64]) {
        let d = self.dim;
        let mut rng = stream_rng(self.seed, stream);
        out[..d].fill(0.0);
        for i in 0..self.grid.steps() {
            let sd = self.grid.dt(i).sqrt();
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                out[(i + 1) * d + k] = out[i * d + k] + sd * z;
            }
        }
    }

    /// `m` independent paths; path `p` uses stream id `p`.
    pub fn sample(&self, m: usize) -> Result<PathBundle> {
        if m == 0 {
            return Err(Error::invalid("need at least one path"));
        }
        let len = (self.grid.steps() + 1) * self.dim;
        let mut values = vec![0.0; m * len];
        values
            .par_chunks_mut(len)
            .enumerate()
            .for_each(|(p, out)| self.fill_path(p as u64, out));
        PathBundle::new(
            self.grid.clone(),
            self.dim,
            values,
            self.seed,
            (0..m as u64).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_nodes() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = TimeGrid::uniform(2.0, 1).unwrap();
        assert_eq!(g.nodes(), &[0.0, 2.0]);
        assert_eq!(g.steps(), 1);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::uniform(0.0, 3).is_err());
        assert!(TimeGrid::uniform(-1.0, 3).is_err());
        assert!(TimeGrid::uniform(f64::NAN, 3).is_err());
        assert!(TimeGrid::from_nodes(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_nodes(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn terminal_node_is_horizon() {
        for n in [1, 3, 7, 10, 1000, 99_999] {
            let g = TimeGrid::uniform(0.7, n).unwrap();
            assert_eq!(*g.nodes().last().unwrap(), 0.7);
            assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn refine_examples() {
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        assert_eq!(g.refine(2).unwrap().nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(
            g.refine(2).unwrap().refine(2).unwrap(),
            g.refine(4).unwrap()
        );
        assert!(g.refine(1).is_err());
        assert!(g.refine(0).is_err());
    }

    #[test]
    fn refine_non_uniform_keeps_old_nodes() {
        let g = TimeGrid::from_nodes(vec![0.0, 0.1, 0.5, 2.0]).unwrap();
        let r = g.refine(3).unwrap();
        assert_eq!(r.steps(), 9);
        assert_eq!(r.horizon(), 2.0);
        for (i, t) in g.nodes().iter().enumerate() {
            assert_eq!(r.nodes()[3 * i], *t);
        }
    }

    #[test]
    fn index_at_finds_nearest_node() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        assert_eq!(g.index_at(0.0), 0);
        assert_eq!(g.index_at(1.0), 10);
        assert_eq!(g.index_at(0.51), 5);
        assert_eq!(g.index_at(0.56), 6);
        assert_eq!(g.index_at(7.0), 10);
    }

    #[test]
    fn brownian_is_deterministic_per_stream() {
        let g = TimeGrid::uniform(1.0, 50).unwrap();
        let drv = BrownianDriver::new(2, g, 7).unwrap();
        let a = drv.sample(20).unwrap();
        let b = drv.sample(20).unwrap();
        assert_eq!(a.values(), b.values());
        // path 13 alone, regenerated from its stream id
        let mut one = vec![0.0; a.path_len()];
        drv.fill_path(13, &mut one);
        assert_eq!(a.path(13), &one[..]);
        // a bigger bundle extends, never reshuffles, the smaller one
        let c = drv.sample(40).unwrap();
        assert_eq!(&c.values()[..a.values().len()], a.values());
    }

    #[test]
    fn brownian_terminal_mean() {
        let m = 100_000;
        let g = TimeGrid::uniform(1.0, 1000).unwrap();
        // d=1, n=1000 is memory heavy for a unit test; the terminal value only
        // depends on the sum of increments, so check on a coarse grid too.
        let drv = BrownianDriver::new(1, TimeGrid::uniform(1.0, 10).unwrap(), 11).unwrap();
        let w = drv.sample(m).unwrap().terminal(0);
        let mean = w.iter().sum::<f64>() / m as f64;
        assert!(mean.abs() <= 3.0 / (m as f64).sqrt(), "mean {mean}");

        let drv = BrownianDriver::new(1, g, 12).unwrap();
        let mut buf = vec![0.0; 1001];
        let mut sum = 0.0;
        let mm = 10_000;
        for p in 0..mm {
            drv.fill_path(p, &mut buf);
            sum += buf[1000];
        }
        let mean = sum / mm as f64;
        assert!(mean.abs() <= 3.0 / (mm as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn brownian_components_uncorrelated() {
        let m = 100_000;
        let drv = BrownianDriver::new(2, TimeGrid::uniform(1.0, 4).unwrap(), 3).unwrap();
        let b = drv.sample(m).unwrap();
        let x = b.terminal(0);
        let y = b.terminal(1);
        let mx = x.iter().sum::<f64>() / m as f64;
        let my = y.iter().sum::<f64>() / m as f64;
        let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / m as f64;
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / m as f64;
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / m as f64;
        let corr = cov / (vx * vy).sqrt();
        assert!(corr.abs() <= 3.0 / (m as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn brownian_increment_moments() {
        let m = 20_000usize;
        let n = 64;
        let g = TimeGrid::uniform(1.0, n).unwrap();
        let dt = g.dt(0);
        let drv = BrownianDriver::new(1, g, 99).unwrap();
        let b = drv.sample(m).unwrap();
        // random subset of increments
        let mut pick = stream_rng(derive_seed(99, 1), 0);
        for _ in 0..8 {
            let i = pick.random_range(0..n);
            let inc: Vec<f64> = (0..m).map(|p| b.at(p, i + 1)[0] - b.at(p, i)[0]).collect();
            let mean = inc.iter().sum::<f64>() / m as f64;
            let var = inc.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            assert!(mean.abs() <= 4.0 * (dt / m as f64).sqrt(), "increment {i} mean {mean}");
            assert!(
                (var / dt - 1.0).abs() <= 5.0 / (m as f64).sqrt(),
                "increment {i} var ratio {}",
                var / dt
            );
        }
    }

    #[test]
    fn bundle_shape_checked() {
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        assert!(PathBundle::new(g.clone(), 1, vec![0.0; 5], 0, vec![0, 1]).is_err());
        assert!(PathBundle::new(g.clone(), 1, vec![0.0, 1.0, f64::NAN], 0, vec![0]).is_err());
        let b = PathBundle::new(g, 1, vec![0.0, 1.0, 2.0], 0, vec![0]).unwrap();
        assert_eq!(b.at(0, 2), &[2.0]);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }
}
