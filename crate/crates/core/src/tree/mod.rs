//! Finite filtered trees: exact oracles for the statements that Monte Carlo
//! can only test statistically.

pub mod oracle;
pub mod scalar;
pub mod simplex;

use std::collections::HashMap;

use num_bigint::BigInt;

use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use scalar::{parse_rational, Scalar};

pub use num_rational::BigRational;
pub use oracle::*;

#[derive(Debug, Clone)]
pub struct TreeNode<T> {
    pub label: String,
    pub parent: Option<usize>,
    pub depth: usize,
    /// Branch probability from the parent (1 at the root).
    pub prob: T,
    pub price: Vec<T>,
    pub children: Vec<usize>,
}

/// A rooted tree whose leaves all sit at the terminal depth. Parents always
/// precede their children in `nodes`.
#[derive(Debug, Clone)]
pub struct TreeModel<T> {
    dim: usize,
    depth: usize,
    nodes: Vec<TreeNode<T>>,
}

/// Incremental construction; [`TreeBuilder::build`] validates.
#[derive(Debug, Clone)]
pub struct TreeBuilder<T> {
    dim: usize,
    nodes: Vec<TreeNode<T>>,
}

impl<T: Scalar> TreeBuilder<T> {
    pub fn new(root_price: Vec<T>) -> Self {
        Self {
            dim: root_price.len(),
            nodes: vec![TreeNode {
                label: "0".into(),
                parent: None,
                depth: 0,
                prob: T::one(),
                price: root_price,
                children: Vec::new(),
            }],
        }
    }

    pub fn child(&mut self, parent: usize, prob: T, price: Vec<T>) -> usize {
        self.child_labeled(parent, prob, price, None)
    }

    fn child_labeled(&mut self, parent: usize, prob: T, price: Vec<T>, label: Option<String>) -> usize {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes[parent].children.push(id);
        self.nodes.push(TreeNode {
            label: label.unwrap_or_else(|| id.to_string()),
            parent: Some(parent),
            depth,
            prob,
            price,
            children: Vec::new(),
        });
        id
    }

    pub fn build(self) -> Result<TreeModel<T>> {
        let dim = self.dim;
        if dim == 0 {
            return Err(Error::invalid("tree prices need at least one asset"));
        }
        let depth = self.nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        if depth == 0 {
            return Err(Error::invalid("tree needs at least one period"));
        }
        if let Some(node) = self
            .nodes
            .iter()
            .find(|n| n.parent.is_some() && !(n.prob > T::zero()))
        {
            return Err(Error::invalid(format!(
                "branch probability into {} must be strictly positive",
                node.label
            )));
        }
        for node in &self.nodes {
            if node.price.len() != dim {
                return Err(Error::ShapeMismatch(format!(
                    "node {} has {} prices, expected {dim}",
                    node.label,
                    node.price.len()
                )));
            }
            if node.children.is_empty() && node.depth != depth {
                return Err(Error::invalid(format!(
                    "leaf {} sits at depth {} but the tree has depth {depth}",
                    node.label, node.depth
                )));
            }
            if !node.children.is_empty() {
                let total = node
                    .children
                    .iter()
                    .fold(T::zero(), |acc, &c| acc + self.nodes[c].prob.clone());
                if !total.approx_eq(&T::one()) {
                    return Err(Error::invalid(format!(
                        "branch probabilities out of {} sum to {:.6}, not 1",
                        node.label,
                        total.to_f64()
                    )));
                }
            }
        }
        Ok(TreeModel {
            dim,
            depth,
            nodes: self.nodes,
        })
    }
}

impl<T: Scalar> TreeModel<T> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Terminal depth `N`.
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, i: usize) -> &TreeNode<T> {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[TreeNode<T>] {
        &self.nodes
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.nodes[i].children
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.nodes[i].children.is_empty()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_terminal(i)).collect()
    }

    pub fn nonterminal(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_terminal(i)).collect()
    }

    pub fn price(&self, i: usize) -> &[T] {
        &self.nodes[i].price
    }

    /// Unconditional probability of reaching each node.
    pub fn path_probabilities(&self) -> Vec<T> {
        let mut out: Vec<T> = Vec::with_capacity(self.len());
        for node in &self.nodes {
            let p = match node.parent {
                None => T::one(),
                Some(parent) => out[parent].clone() * node.prob.clone(),
            };
            out.push(p);
        }
        out
    }

    /// Price increments `S(child) − S(node)` for each child of `i`.
    pub fn increments(&self, i: usize) -> Vec<Vec<T>> {
        let s = self.price(i);
        self.children(i)
            .iter()
            .map(|&c| {
                self.price(c)
                    .iter()
                    .zip(s)
                    .map(|(a, b)| a.clone() - b.clone())
                    .collect()
            })
            .collect()
    }

    /// Same tree with branch probabilities replaced.
    pub fn with_probabilities(&self, probs: Vec<T>) -> Result<Self> {
        if probs.len() != self.len() {
            return Err(Error::ShapeMismatch("one probability per node expected".into()));
        }
        let mut nodes = self.nodes.clone();
        for (n, p) in nodes.iter_mut().zip(probs) {
            n.prob = p;
        }
        TreeBuilder {
            dim: self.dim,
            nodes,
        }
        .build()
    }

    /// Component `k` of the price as a process on the nodes.
    pub fn price_process(&self, k: usize) -> Vec<T> {
        self.nodes.iter().map(|n| n.price[k].clone()).collect()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> TreeModel<U> {
        TreeModel {
            dim: self.dim,
            depth: self.depth,
            nodes: self
                .nodes
                .iter()
                .map(|n| TreeNode {
                    label: n.label.clone(),
                    parent: n.parent,
                    depth: n.depth,
                    prob: f(&n.prob),
                    price: n.price.iter().map(&f).collect(),
                    children: n.children.clone(),
                })
                .collect(),
        }
    }
}

impl TreeModel<BigRational> {
    pub fn to_f64(&self) -> TreeModel<f64> {
        self.map(|x| Scalar::to_f64(x))
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Number {
    Text(String),
    Int(i64),
    Float(f64),
}

impl Number {
    fn to_rational(&self) -> Result<BigRational> {
        match self {
            Number::Text(s) => parse_rational(s),
            Number::Int(v) => Ok(BigRational::from_integer(BigInt::from(*v))),
            Number::Float(v) => parse_rational(&v.to_string()),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeSpec {
    id: String,
    parent: Option<String>,
    prob: Option<Number>,
    price: Vec<Number>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TreeFile {
    #[serde(default)]
    node: Vec<NodeSpec>,
}

fn line_of(text: &str, needle: &str) -> usize {
    text.lines()
        .position(|l| l.contains(needle))
        .map_or(0, |i| i + 1)
}

/// Parse a tree description:
///
/// ```toml
/// [[node]]
/// id = "root"
/// price = ["1"]
///
/// [[node]]
/// id = "up"
/// parent = "root"
/// prob = "1/2"
/// price = ["2"]
/// ```
///
/// Numbers may be integers, decimals or `"p/q"` strings and are read
/// exactly. Parents must be listed before their children.
pub fn parse_tree(text: &str) -> Result<TreeModel<BigRational>> {
    let file: TreeFile = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map_or(0, |s| text[..s.start.min(text.len())].lines().count().max(1));
        Error::TreeFormat {
            line,
            message: e.message().to_string(),
        }
    })?;
    let err = |id: &str, message: String| Error::TreeFormat {
        line: line_of(text, &format!("\"{id}\"")),
        message,
    };
    let nums = |id: &str, xs: &[Number]| -> Result<Vec<BigRational>> {
        xs.iter()
            .map(|x| x.to_rational().map_err(|e| err(id, e.to_string())))
            .collect()
    };
    let mut specs = file.node.iter();
    let root = specs
        .next()
        .ok_or_else(|| Error::TreeFormat {
            line: 0,
            message: "tree has no nodes".into(),
        })?;
    if root.parent.is_some() || root.prob.is_some() {
        return Err(err(&root.id, "the first node is the root and takes no parent or prob".into()));
    }
    let mut builder = TreeBuilder::new(nums(&root.id, &root.price)?);
    builder.nodes[0].label = root.id.clone();
    let mut index: HashMap<&str, usize> = HashMap::new();
    index.insert(&root.id, 0);
    for spec in specs {
        let parent = spec
            .parent
            .as_deref()
            .ok_or_else(|| err(&spec.id, format!("node `{}` has no parent", spec.id)))?;
        let &pi = index
            .get(parent)
            .ok_or_else(|| err(&spec.id, format!("parent `{parent}` of `{}` is not defined above it", spec.id)))?;
        let prob = spec
            .prob
            .as_ref()
            .ok_or_else(|| err(&spec.id, format!("node `{}` has no prob", spec.id)))?
            .to_rational()
            .map_err(|e| err(&spec.id, e.to_string()))?;
        let price = nums(&spec.id, &spec.price)?;
        let id = builder.child_labeled(pi, prob, price, Some(spec.id.clone()));
        if index.insert(&spec.id, id).is_some() {
            return Err(err(&spec.id, format!("duplicate node id `{}`", spec.id)));
        }
    }
    builder.build().map_err(|e| match e {
        Error::InvalidInput(m) | Error::ShapeMismatch(m) => Error::TreeFormat { line: 0, message: m },
        other => other,
    })
}

/// Serialize back into the file format (exact rationals as strings).
pub fn write_tree(tree: &TreeModel<BigRational>) -> String {
    let mut out = String::new();
    for node in tree.nodes() {
        out.push_str("[[node]]\n");
        out.push_str(&format!("id = \"{}\"\n", node.label));
        if let Some(p) = node.parent {
            out.push_str(&format!("parent = \"{}\"\n", tree.node(p).label));
            out.push_str(&format!("prob = \"{}\"\n", node.prob));
        }
        let prices: Vec<String> = node.price.iter().map(|x| format!("\"{x}\"")).collect();
        out.push_str(&format!("price = [{}]\n\n", prices.join(", ")));
    }
    out
}

// ---------------------------------------------------------------------------
// Generators
// ---------------------------------------------------------------------------

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Random tree with small rational probabilities and prices. Each branch
/// moves each price by a multiple of 1/2 in `[−2, 2]`; some nodes end up
/// arbitrage-free and some not.
pub fn random_tree<R: Rng + ?Sized>(
    rng: &mut R,
    depth: usize,
    max_branch: usize,
    dim: usize,
) -> TreeModel<BigRational> {
    let root: Vec<BigRational> = (0..dim).map(|_| rat(rng.random_range(2..6), 1)).collect();
    let mut b = TreeBuilder::new(root);
    let mut frontier = vec![0usize];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &v in &frontier {
            let k = rng.random_range(1..=max_branch);
            let weights: Vec<i64> = (0..k).map(|_| rng.random_range(1..5)).collect();
            let total: i64 = weights.iter().sum();
            let base = b.nodes[v].price.clone();
            for w in weights {
                let price = base
                    .iter()
                    .map(|s| s.clone() + rat(rng.random_range(-4..=4), 2))
                    .collect();
                next.push(b.child(v, rat(w, total), price));
            }
        }
        frontier = next;
    }
    b.build().expect("generated tree is valid")
}

/// One-period binomial tree `S_0 = s0`, children `up`, `down`, equal odds.
pub fn binomial_one_step(s0: BigRational, up: BigRational, down: BigRational) -> TreeModel<BigRational> {
    let mut b = TreeBuilder::new(vec![s0]);
    b.child(0, rat(1, 2), vec![up]);
    b.child(0, rat(1, 2), vec![down]);
    b.build().expect("binomial tree is valid")
}

/// Recombining-price binomial tree (non-recombining nodes) with
/// multiplicative moves `u`, `d` and up-probability `p`.
pub fn binomial_tree(
    depth: usize,
    s0: BigRational,
    u: BigRational,
    d: BigRational,
    p: BigRational,
) -> TreeModel<BigRational> {
    let mut b = TreeBuilder::new(vec![s0]);
    let mut frontier = vec![0usize];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &v in &frontier {
            let s = b.nodes[v].price[0].clone();
            next.push(b.child(v, p.clone(), vec![s.clone() * u.clone()]));
            next.push(b.child(v, rat(1, 1) - p.clone(), vec![s * d.clone()]));
        }
        frontier = next;
    }
    b.build().expect("binomial tree is valid")
}

/// Above this value the inverse Bessel tree stops branching.
pub const INVERSE_BESSEL_CAP: f64 = 1e6;

/// Binomial tree for the martingale `Y_{k+1} = Y ± Y²√Δt` (down move capped
/// at `Y/2`), a discrete stand-in for the inverse Bessel(3) process. The
/// price is `Y` itself. Once `Y` passes [`INVERSE_BESSEL_CAP`] it is frozen,
/// which keeps the branch odds representable.
pub fn inverse_bessel_tree(depth: usize, horizon: f64) -> Result<TreeModel<f64>> {
    if depth == 0 || depth > 20 || !(horizon > 0.0) {
        return Err(Error::invalid("inverse Bessel tree needs 1 ≤ depth ≤ 20 and a positive horizon"));
    }
    let sd = (horizon / depth as f64).sqrt();
    let mut b = TreeBuilder::new(vec![1.0]);
    let mut frontier = vec![0usize];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for &v in &frontier {
            let y = b.nodes[v].price[0];
            if y >= INVERSE_BESSEL_CAP {
                next.push(b.child(v, 1.0, vec![y]));
                continue;
            }
            let up = y * y * sd;
            let down = up.min(0.5 * y);
            // p·up = (1 − p)·down
            let p = down / (up + down);
            next.push(b.child(v, p, vec![y + up]));
            next.push(b.child(v, 1.0 - p, vec![y - down]));
        }
        frontier = next;
    }
    b.build()
}

/// Multiplicative binomial martingale `Y (1 ± σ√Δt)` with equal odds.
pub fn binomial_martingale_tree(depth: usize, sigma: f64, horizon: f64) -> Result<TreeModel<f64>> {
    if depth == 0 || depth > 20 || !(sigma * (horizon / depth as f64).sqrt() < 1.0) {
        return Err(Error::invalid("binomial martingale tree needs 1 ≤ depth ≤ 20 and σ√Δt < 1"));
    }
    let step = sigma * (horizon / depth as f64).sqrt();
    let mut b = TreeBuilder::new(vec![1.0]);
    let mut frontier = vec![0usize];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(frontier.len() * 2);
        for &v in &frontier {
            let y = b.nodes[v].price[0];
            next.push(b.child(v, 0.5, vec![y * (1.0 + step)]));
            next.push(b.child(v, 0.5, vec![y * (1.0 - step)]));
        }
        frontier = next;
    }
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::stream_rng;

    const BINOMIAL: &str = r#"
[[node]]
id = "root"
price = ["1"]

[[node]]
id = "up"
parent = "root"
prob = "1/2"
price = [2]

[[node]]
id = "down"
parent = "root"
prob = 0.5
price = ["0.5"]
"#;

    #[test]
    fn parses_binomial() {
        let t = parse_tree(BINOMIAL).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.depth(), 1);
        assert_eq!(t.price(2)[0], rat(1, 2));
        assert_eq!(t.node(1).prob, rat(1, 2));
        assert_eq!(t.node(2).label, "down");
        let again = parse_tree(&write_tree(&t)).unwrap();
        assert_eq!(again.price(1), t.price(1));
    }

    #[test]
    fn rejects_bad_files() {
        let cases = [
            ("", "no nodes"),
            ("[[node]]\nid = \"r\"\nprice = [\"1\"]\nbogus = 1\n", "unknown field"),
            (
                "[[node]]\nid = \"r\"\nprice = [\"1\"]\n[[node]]\nid = \"a\"\nparent = \"zz\"\nprob = \"1\"\nprice = [\"1\"]\n",
                "not defined",
            ),
            (
                "[[node]]\nid = \"r\"\nprice = [\"1\"]\n[[node]]\nid = \"a\"\nparent = \"r\"\nprob = \"1/3\"\nprice = [\"1\"]\n",
                "sum to",
            ),
            (
                "[[node]]\nid = \"r\"\nprice = [\"1\"]\n[[node]]\nid = \"a\"\nparent = \"r\"\nprob = \"0\"\nprice = [\"1\"]\n",
                "strictly positive",
            ),
            (
                "[[node]]\nid = \"r\"\nprice = [\"1\"]\n[[node]]\nid = \"a\"\nparent = \"r\"\nprob = \"1\"\nprice = [\"x\"]\n",
                "cannot parse",
            ),
        ];
        for (text, want) in cases {
            match parse_tree(text) {
                Err(Error::TreeFormat { message, .. }) => assert!(message.contains(want), "{message}"),
                other => panic!("expected tree format error for {want}: {other:?}"),
            }
        }
    }

    #[test]
    fn format_error_reports_line() {
        let text = "[[node]]\nid = \"r\"\nprice = [\"1\"]\n[[node]]\nid = \"a\"\nparent = \"r\"\nprob = \"1\"\nprice = [\"x\"]\n";
        match parse_tree(text) {
            Err(Error::TreeFormat { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unequal_leaf_depths_rejected() {
        let mut b = TreeBuilder::new(vec![rat(1, 1)]);
        let a = b.child(0, rat(1, 2), vec![rat(2, 1)]);
        b.child(0, rat(1, 2), vec![rat(0, 1)]);
        b.child(a, rat(1, 1), vec![rat(2, 1)]);
        assert!(b.build().is_err());
    }

    #[test]
    fn generated_trees_are_valid() {
        let mut rng = stream_rng(5, 0);
        for _ in 0..50 {
            let t = random_tree(&mut rng, 3, 3, 2);
            assert_eq!(t.depth(), 3);
            let total = t
                .leaves()
                .iter()
                .fold(rat(0, 1), |acc, &l| acc + t.path_probabilities()[l].clone());
            assert_eq!(total, rat(1, 1));
        }
        let t = inverse_bessel_tree(6, 1.0).unwrap();
        assert_eq!(t.leaves().len(), 64);
    }
}
