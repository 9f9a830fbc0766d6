//! Gauss–Hermite rules for integrals against `exp(-x^2)`.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of the `n`-point rule, nodes ascending.
///
/// Built from the eigen-decomposition of the symmetric Jacobi matrix of the
/// Hermite recurrence (Golub–Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "need at least one node");
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for i in 1..n {
        let off = (i as f64 / 2.0).sqrt();
        jacobi[(i, i - 1)] = off;
        jacobi[(i - 1, i)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = eig.eigenvalues.iter().map(|&x| refine(n, x)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // symmetrize to remove eigen-solver round-off
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let node = 0.5 * (pairs[j].0 - pairs[i].0);
        let weight = 0.5 * (pairs[i].1 + pairs[j].1);
        pairs[i] = (-node, weight);
        pairs[j] = (node, weight);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    pairs.into_iter().unzip()
}

/// Orthonormal Hermite values `(p_n(x), p_{n-1}(x))` with weight `exp(-x^2)`.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let mut p1 = std::f64::consts::PI.powf(-0.25);
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        p1 = x * (2.0 / j as f64).sqrt() * p2 - ((j - 1) as f64 / j as f64).sqrt() * p3;
    }
    (p1, p2)
}

/// Newton polish of an eigenvalue node. The eigenvector weights are only
/// accurate in absolute terms, which is useless for the tiny tail weights.
fn refine(n: usize, mut x: f64) -> (f64, f64) {
    let scale = (2.0 * n as f64).sqrt();
    for _ in 0..10 {
        let (p, pm) = hermite_pair(n, x);
        let step = p / (scale * pm);
        x -= step;
        if step.abs() <= 1e-15 * x.abs().max(1.0) {
            break;
        }
    }
    let dp = scale * hermite_pair(n, x).1;
    (x, 2.0 / (dp * dp))
}
