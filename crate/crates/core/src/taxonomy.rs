//! Class hierarchy, tree distance and the Gaussian tree kernel.
//!
//! The kernel `C[i][j] = exp(-d(i, j)^2 / (2 sigma^2))` turns tree distance
//! into class correlation. Quadratic forms under `C` give the level/consistency
//! score of a class distribution ([`lc_score`]), the C-weighted cosine used to
//! compare neurons' real and adversarial class profiles ([`cosine_sim_c`]) and
//! the norm used by prediction differences ([`c_quadratic`]).
//!
//! A Gaussian of a tree metric is not guaranteed to be positive semidefinite,
//! so [`CorrelationMatrix::build`] repairs it with the smallest diagonal
//! jitter that lifts the spectrum to zero and rescales the diagonal back to 1.
//! The jitter is kept on the matrix and reported wherever it is used.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Serialized form: a nested node list. Leaves carry a class id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TaxonomyNode>,
}

impl TaxonomyNode {
    pub fn leaf(name: impl Into<String>, class_id: usize) -> Self {
        Self {
            name: name.into(),
            class_id: Some(class_id),
            children: Vec::new(),
        }
    }

    pub fn inner(name: impl Into<String>, children: Vec<TaxonomyNode>) -> Self {
        Self {
            name: name.into(),
            class_id: None,
            children,
        }
    }
}

/// A validated rooted tree whose leaves are exactly the classes `0..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyNode", into = "TaxonomyNode")]
pub struct ClassTaxonomy {
    root: TaxonomyNode,
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
    leaf_node: Vec<usize>,
}

impl TryFrom<TaxonomyNode> for ClassTaxonomy {
    type Error = Error;

    fn try_from(root: TaxonomyNode) -> Result<Self> {
        Self::new(root)
    }
}

impl From<ClassTaxonomy> for TaxonomyNode {
    fn from(t: ClassTaxonomy) -> Self {
        t.root
    }
}

impl ClassTaxonomy {
    pub fn new(root: TaxonomyNode) -> Result<Self> {
        let mut names = Vec::new();
        let mut parent = Vec::new();
        let mut depth = Vec::new();
        let mut leaves: Vec<(usize, usize)> = Vec::new();
        let mut stack: Vec<(&TaxonomyNode, Option<usize>, usize)> = vec![(&root, None, 0)];
        while let Some((node, par, d)) = stack.pop() {
            let idx = names.len();
            names.push(node.name.clone());
            parent.push(par);
            depth.push(d);
            match (node.class_id, node.children.is_empty()) {
                (Some(c), true) => leaves.push((c, idx)),
                (Some(c), false) => {
                    return Err(Error::InvalidArgument(format!(
                        "taxonomy node `{}` has class id {c} but also children",
                        node.name
                    )))
                }
                (None, true) => {
                    return Err(Error::InvalidArgument(format!(
                        "taxonomy leaf `{}` has no class id",
                        node.name
                    )))
                }
                (None, false) => {
                    for child in node.children.iter().rev() {
                        stack.push((child, Some(idx), d + 1));
                    }
                }
            }
        }
        let k = leaves.len();
        let mut leaf_node = vec![usize::MAX; k];
        for (c, idx) in leaves {
            if c >= k {
                return Err(Error::InvalidArgument(format!(
                    "class id {c} out of range for {k} leaves"
                )));
            }
            if leaf_node[c] != usize::MAX {
                return Err(Error::InvalidArgument(format!("class id {c} appears twice")));
            }
            leaf_node[c] = idx;
        }
        Ok(Self {
            root,
            names,
            parent,
            depth,
            leaf_node,
        })
    }

    /// Balanced binary tree of the given depth; `name(level, path_bits)` names
    /// each node, with leaves numbered left to right.
    pub fn balanced_binary(depth: usize, name: impl Fn(usize, usize) -> String) -> Result<Self> {
        fn build(level: usize, depth: usize, bits: usize, name: &dyn Fn(usize, usize) -> String) -> TaxonomyNode {
            if level == depth {
                return TaxonomyNode::leaf(name(level, bits), bits);
            }
            TaxonomyNode::inner(
                name(level, bits),
                vec![
                    build(level + 1, depth, bits << 1, name),
                    build(level + 1, depth, (bits << 1) | 1, name),
                ],
            )
        }
        Self::new(build(0, depth, 0, &name))
    }

    pub fn num_classes(&self) -> usize {
        self.leaf_node.len()
    }

    pub fn root(&self) -> &TaxonomyNode {
        &self.root
    }

    pub fn class_name(&self, class: usize) -> Result<&str> {
        let idx = *self.leaf_node.get(class).ok_or(Error::UnknownClass(class))?;
        Ok(&self.names[idx])
    }

    /// Longest root-to-leaf edge count.
    pub fn depth(&self) -> usize {
        self.leaf_node.iter().map(|&i| self.depth[i]).max().unwrap_or(0)
    }

    /// Number of edges on the path between two leaves.
    pub fn tree_distance(&self, a: usize, b: usize) -> Result<usize> {
        let mut x = *self.leaf_node.get(a).ok_or(Error::UnknownClass(a))?;
        let mut y = *self.leaf_node.get(b).ok_or(Error::UnknownClass(b))?;
        let mut dist = 0;
        while self.depth[x] > self.depth[y] {
            x = self.parent[x].expect("non-root has a parent");
            dist += 1;
        }
        while self.depth[y] > self.depth[x] {
            y = self.parent[y].expect("non-root has a parent");
            dist += 1;
        }
        while x != y {
            x = self.parent[x].expect("non-root has a parent");
            y = self.parent[y].expect("non-root has a parent");
            dist += 2;
        }
        Ok(dist)
    }
}

/// Symmetric `K x K` class-correlation kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    k: usize,
    values: Vec<f64>,
    sigma: f64,
    /// Diagonal jitter added by the PSD repair, 0 when none was needed.
    jitter: f64,
    min_eigenvalue: f64,
}

pub const DEFAULT_SIGMA: f64 = 1.0;

impl CorrelationMatrix {
    pub fn build(tax: &ClassTaxonomy, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        let k = tax.num_classes();
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let d = tax.tree_distance(i, j)? as f64;
                values[i * k + j] = (-(d * d) / (2.0 * sigma * sigma)).exp();
            }
        }
        Self::from_kernel(k, values, sigma)
    }

    /// Wrap an explicit symmetric kernel with unit diagonal, applying the same
    /// PSD repair as [`CorrelationMatrix::build`].
    pub fn from_kernel(k: usize, mut values: Vec<f64>, sigma: f64) -> Result<Self> {
        if values.len() != k * k || k == 0 {
            return Err(Error::shape("correlation matrix", &[k, k], &[values.len()]));
        }
        for i in 0..k {
            for j in 0..k {
                if values[i * k + j] != values[j * k + i] {
                    return Err(Error::InvalidArgument("correlation matrix must be symmetric".into()));
                }
            }
        }
        let lambda_min = min_eigenvalue(k, &values);
        let mut jitter = 0.0;
        if lambda_min < 0.0 {
            jitter = lambda_min.abs() + 1e-9;
            for i in 0..k {
                for j in 0..k {
                    let v = &mut values[i * k + j];
                    *v = if i == j { (*v + jitter) / (1.0 + jitter) } else { *v / (1.0 + jitter) };
                }
            }
        }
        let min_eigenvalue = if jitter > 0.0 { self::min_eigenvalue(k, &values) } else { lambda_min };
        Ok(Self {
            k,
            values,
            sigma,
            jitter,
            min_eigenvalue,
        })
    }

    pub fn identity(k: usize) -> Self {
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            values[i * k + i] = 1.0;
        }
        Self {
            k,
            values,
            sigma: 0.0,
            jitter: 0.0,
            min_eigenvalue: 1.0,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Smallest eigenvalue after any repair.
    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    /// `uᵀ C v`.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != self.k || v.len() != self.k {
            return Err(Error::shape("C inner product", &[self.k], &[u.len(), v.len()]));
        }
        let mut total = 0.0;
        for (i, ui) in u.iter().enumerate() {
            if *ui == 0.0 {
                continue;
            }
            let cv: f64 = self.row(i).iter().zip(v).map(|(c, x)| c * x).sum();
            total += ui * cv;
        }
        Ok(total)
    }
}

fn min_eigenvalue(k: usize, values: &[f64]) -> f64 {
    let m = DMatrix::from_row_slice(k, k, values);
    SymmetricEigen::new(m).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// `vᵀ C v`, the squared C-norm.
pub fn c_quadratic(v: &[f64], c: &CorrelationMatrix) -> Result<f64> {
    c.inner(v, v)
}

/// Level/consistency score `pᵀ C p` of a class distribution.
pub fn lc_score(p: &CategoricalDistribution, c: &CorrelationMatrix) -> Result<f64> {
    c_quadratic(p.probs(), c)
}

/// `pᵀCq / (‖p‖_C ‖q‖_C)`.
pub fn cosine_sim_c(p: &CategoricalDistribution, q: &CategoricalDistribution, c: &CorrelationMatrix) -> Result<f64> {
    let pq = c.inner(p.probs(), q.probs())?;
    let pp = c.inner(p.probs(), p.probs())?;
    let qq = c.inner(q.probs(), q.probs())?;
    let denom = (pp * qq).sqrt();
    if denom <= 0.0 {
        return Err(Error::Degenerate("zero C-norm distribution".into()));
    }
    Ok((pq / denom).min(1.0))
}

/// Non-negative length-K vector summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CategoricalDistribution {
    probs: Vec<f64>,
}

impl TryFrom<Vec<f64>> for CategoricalDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CategoricalDistribution> for Vec<f64> {
    fn from(d: CategoricalDistribution) -> Self {
        d.probs
    }
}

impl CategoricalDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("categorical distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalized histogram; zero total mass is rejected.
    pub fn from_counts(counts: &[f64]) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("distribution with zero total mass".into()));
        }
        Self::new(counts.iter().map(|c| c / total).collect())
    }

    pub fn from_labels(labels: impl IntoIterator<Item = usize>, k: usize) -> Result<Self> {
        let mut counts = vec![0.0; k];
        for l in labels {
            *counts.get_mut(l).ok_or(Error::UnknownClass(l))? += 1.0;
        }
        Self::from_counts(&counts)
    }

    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::UnknownClass(class));
        }
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree16() -> ClassTaxonomy {
        ClassTaxonomy::balanced_binary(4, |l, b| format!("n{l}_{b}")).unwrap()
    }

    #[test]
    fn balanced_tree_shape() {
        let t = tree16();
        assert_eq!(t.num_classes(), 16);
        assert_eq!(t.depth(), 4);
        assert_eq!(t.tree_distance(0, 0).unwrap(), 0);
        assert_eq!(t.tree_distance(0, 1).unwrap(), 2);
        assert_eq!(t.tree_distance(0, 2).unwrap(), 4);
        assert_eq!(t.tree_distance(0, 15).unwrap(), 8);
        assert!(matches!(t.tree_distance(0, 16), Err(Error::UnknownClass(16))));
    }

    #[test]
    fn rejects_bad_trees() {
        let dup = TaxonomyNode::inner("r", vec![TaxonomyNode::leaf("a", 0), TaxonomyNode::leaf("b", 0)]);
        assert!(ClassTaxonomy::new(dup).is_err());
        let gap = TaxonomyNode::inner("r", vec![TaxonomyNode::leaf("a", 0), TaxonomyNode::leaf("b", 2)]);
        assert!(ClassTaxonomy::new(gap).is_err());
        let bare = TaxonomyNode::inner("r", vec![TaxonomyNode::inner("x", vec![])]);
        assert!(ClassTaxonomy::new(bare).is_err());
    }

    #[test]
    fn json_round_trip_is_nested() {
        let t = tree16();
        let s = serde_json::to_string(&t).unwrap();
        assert!(s.starts_with("{\"name\":\"n0_0\",\"children\":["));
        let back: ClassTaxonomy = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn kernel_values() {
        let c = CorrelationMatrix::build(&tree16(), 1.0).unwrap();
        assert_eq!(c.get(3, 3), 1.0);
        assert!((c.get(0, 1) - 0.135335).abs() < 1e-6);
        assert!((c.get(0, 2) - 3.3546e-4).abs() < 1e-8);
        assert_eq!(c.jitter(), 0.0);
        assert!(c.min_eigenvalue() >= -1e-10);
        assert!(CorrelationMatrix::build(&tree16(), 0.0).is_err());
    }

    #[test]
    fn repair_lifts_indefinite_kernel() {
        // unit diagonal with strong off-diagonal mass: eigenvalue 1 - 2*0.9 < 0
        let v = vec![1.0, 0.9, 0.9, 0.9, 1.0, -0.9, 0.9, -0.9, 1.0];
        let c = CorrelationMatrix::from_kernel(3, v, 1.0).unwrap();
        assert!(c.jitter() > 0.0);
        assert!(c.min_eigenvalue() >= -1e-10);
        for i in 0..3 {
            assert!((c.get(i, i) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn lc_and_cosine_basics() {
        let c = CorrelationMatrix::build(&tree16(), 1.0).unwrap();
        let one = CategoricalDistribution::one_hot(16, 5).unwrap();
        assert_eq!(lc_score(&one, &c).unwrap(), 1.0);
        assert_eq!(cosine_sim_c(&one, &one, &c).unwrap(), 1.0);
        assert_eq!(c_quadratic(&[0.0; 16], &c).unwrap(), 0.0);
        assert!(c_quadratic(&[0.0; 3], &c).is_err());
        let far = CategoricalDistribution::one_hot(16, 15).unwrap();
        let cs = cosine_sim_c(&CategoricalDistribution::one_hot(16, 0).unwrap(), &far, &c).unwrap();
        assert!((cs - (-32.0f64).exp()).abs() < 1e-20);
    }

    #[test]
    fn distribution_validation() {
        assert!(CategoricalDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(CategoricalDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(matches!(CategoricalDistribution::from_counts(&[0.0, 0.0]), Err(Error::Degenerate(_))));
        let d = CategoricalDistribution::from_labels([0, 0, 1, 3], 4).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.25, 0.0, 0.25]);
        assert!((CategoricalDistribution::uniform(4).entropy() - 4f64.ln()).abs() < 1e-12);
    }
}
