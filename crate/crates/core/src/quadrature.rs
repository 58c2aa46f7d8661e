//! Gauss rules from the Golub–Welsch eigenproblem and tensor-product grids.

use nalgebra::{DMatrix, SymmetricEigen};

/// Default nodes per dimension.
pub const DEFAULT_NODES: usize = 64;
/// Largest tensor grid we are willing to build.
pub const MAX_TENSOR_NODES: usize = 1 << 18;

#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(offdiag: &[f64], mass: f64) -> Rule {
    let n = offdiag.len() + 1;
    let mut j = DMatrix::<f64>::zeros(n, n);
    for (k, &b) in offdiag.iter().enumerate() {
        j[(k, k + 1)] = b;
        j[(k + 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Gauss–Hermite rule for `E[f(X)]`, `X ~ N(0, 1)`; weights sum to 1.
pub fn gauss_hermite(n: usize) -> Rule {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    golub_welsch(&off, 1.0)
}

/// Gauss–Legendre rule on `[-1, 1]`; weights sum to 2.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&off, 2.0)
}

/// Nodes per dimension so that `per_dim^dim` stays under the tensor cap.
pub fn nodes_per_dim(dim: usize, requested: usize) -> usize {
    let mut n = requested.max(1);
    while dim > 1 && n > 1 && (n as f64).powi(dim as i32) > MAX_TENSOR_NODES as f64 {
        n -= 1;
    }
    n
}

/// Calls `f(point, weight)` for every node of the `dim`-fold tensor product.
pub fn for_each_tensor(rule: &Rule, dim: usize, mut f: impl FnMut(&[f64], f64)) {
    let n = rule.nodes.len();
    if dim == 0 {
        f(&[], 1.0);
        return;
    }
    let mut idx = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    loop {
        let mut w = 1.0;
        for d in 0..dim {
            point[d] = rule.nodes[idx[d]];
            w *= rule.weights[idx[d]];
        }
        f(&point, w);
        let mut d = 0;
        loop {
            idx[d] += 1;
            if idx[d] < n {
                break;
            }
            idx[d] = 0;
            d += 1;
            if d == dim {
                return;
            }
        }
    }
}
