#![allow(dead_code)]

use minilp::{ComparisonOp, OptimizationDirection, Problem};

/// Transportation LP on an h×w grid with Euclidean ground distance.
pub fn lp_emd(p: &[f64], q: &[f64], h: usize, w: usize) -> f64 {
    let n = h * w;
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let pos = |i: usize| ((i / w) as f64, (i % w) as f64);
    let mut vars = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let ((a, b), (c, d)) = (pos(i), pos(j));
            vars.push(lp.add_var(((a - c).powi(2) + (b - d).powi(2)).sqrt(), (0.0, f64::INFINITY)));
        }
    }
    for i in 0..n {
        let row: Vec<_> = (0..n).map(|j| (vars[i * n + j], 1.0)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, p[i]);
    }
    for j in 0..n {
        let col: Vec<_> = (0..n).map(|i| (vars[i * n + j], 1.0)).collect();
        lp.add_constraint(col.as_slice(), ComparisonOp::Le, q[j] + 1e-12);
    }
    lp.solve().expect("transport LP is feasible").objective()
}
