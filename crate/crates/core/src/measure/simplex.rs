use std::collections::VecDeque;

use super::MeasureError;
use crate::Scalar;

/// Optimal value of the balanced transportation problem with supplies `a`,
/// demands `b` and row-major `cost` (len(a) × len(b)), solved exactly by
/// the transportation simplex (north-west corner start, MODI pricing).
///
/// Intended for the few-hundred-atom problems that arise when comparing
/// discrete measures with arbitrary weights.
pub fn transport_cost<S: Scalar>(a: &[S], b: &[S], cost: &[S]) -> Result<S, MeasureError> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(MeasureError::Empty);
    }
    if cost.len() != n * m {
        return Err(MeasureError::Shape {
            len: cost.len(),
            dim: m,
        });
    }
    if a.iter().chain(b).any(|w| !(*w >= S::zero())) {
        return Err(MeasureError::BadWeights(f64::NAN));
    }
    let sa: S = a.iter().copied().sum();
    let sb: S = b.iter().copied().sum();
    if (sa - sb).abs() > S::lit(1e-9) * sa.max(S::one()) {
        return Err(MeasureError::BadWeights(sb.as_f64()));
    }

    // Basis cells (row, col, flow); always n + m - 1 of them.
    let mut basis: Vec<(usize, usize, S)> = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0], b[0] * sa / sb);
    loop {
        let x = ra.min(rb);
        basis.push((i, j, x));
        if i == n - 1 && j == m - 1 {
            break;
        }
        if (ra <= rb && i < n - 1) || j == m - 1 {
            rb = rb - x;
            i += 1;
            ra = a[i];
        } else {
            ra = ra - x;
            j += 1;
            rb = b[j] * sa / sb;
        }
    }

    let scale = cost
        .iter()
        .copied()
        .fold(S::zero(), |acc, c| acc.max(c.abs()));
    let tol = S::lit(1e-12) * scale.max(S::one());
    let max_iter = 50 * (n + m) * (n + m).max(10);
    let mut u = vec![S::zero(); n];
    let mut v = vec![S::zero(); m];
    // Nodes: rows 0..n, columns n..n+m.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n + m];
    for _ in 0..max_iter {
        for l in adj.iter_mut() {
            l.clear();
        }
        for (e, &(r, c, _)) in basis.iter().enumerate() {
            adj[r].push(e);
            adj[n + c].push(e);
        }
        // Potentials by traversal of the basis tree.
        let mut seen = vec![false; n + m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        u[0] = S::zero();
        while let Some(node) = queue.pop_front() {
            for &e in &adj[node] {
                let (r, c, _) = basis[e];
                let c_rc = cost[r * m + c];
                if node < n {
                    if !seen[n + c] {
                        v[c] = c_rc - u[r];
                        seen[n + c] = true;
                        queue.push_back(n + c);
                    }
                } else if !seen[r] {
                    u[r] = c_rc - v[c];
                    seen[r] = true;
                    queue.push_back(r);
                }
            }
        }

        let mut best = (usize::MAX, usize::MAX, -tol);
        for r in 0..n {
            let row = &cost[r * m..(r + 1) * m];
            for c in 0..m {
                let red = row[c] - u[r] - v[c];
                if red < best.2 {
                    best = (r, c, red);
                }
            }
        }
        let (er, ec, _) = best;
        if er == usize::MAX {
            break;
        }

        // Tree path from row `er` to column `ec`.
        let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + m];
        let mut seen = vec![false; n + m];
        seen[er] = true;
        let mut queue = VecDeque::from([er]);
        let target = n + ec;
        while let Some(node) = queue.pop_front() {
            if node == target {
                break;
            }
            for &e in &adj[node] {
                let (r, c, _) = basis[e];
                let other = if node < n { n + c } else { r };
                if !seen[other] {
                    seen[other] = true;
                    parent[other] = Some((node, e));
                    queue.push_back(other);
                }
            }
        }
        let mut path = Vec::new();
        let mut node = target;
        while node != er {
            let (prev, e) = parent[node].expect("basis is a spanning tree");
            path.push(e);
            node = prev;
        }
        path.reverse();
        // Odd positions along the path (0-based even indices) lose flow.
        let mut theta = S::infinity();
        let mut leave = 0;
        for (k, &e) in path.iter().enumerate() {
            if k % 2 == 0 && basis[e].2 < theta {
                theta = basis[e].2;
                leave = e;
            }
        }
        for (k, &e) in path.iter().enumerate() {
            let f = &mut basis[e].2;
            *f = if k % 2 == 0 { *f - theta } else { *f + theta };
        }
        basis[leave] = (er, ec, theta);
    }

    Ok(basis
        .iter()
        .map(|&(r, c, f)| f.max(S::zero()) * cost[r * m + c])
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{min_cost_assignment, wasserstein_1d, EmpiricalLaw};
    use proptest::prelude::*;

    #[test]
    fn small_instance() {
        // Move 0.5 from x=0 to y=1 and 0.5 from x=1 to y=1: cost 0.5.
        assert_eq!(
            transport_cost(&[0.5, 0.5], &[1.0], &[1.0, 0.0]).unwrap(),
            0.5
        );
        assert!(transport_cost(&[0.5, 0.5], &[0.7], &[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn matches_assignment_on_uniform(n in 1usize..7, seed in any::<u64>()) {
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 11) as f64 / (1u64 << 53) as f64 };
            let cost: Vec<f64> = (0..n * n).map(|_| next()).collect();
            let w = vec![1.0 / n as f64; n];
            let lp = transport_cost(&w, &w, &cost).unwrap();
            let hung = min_cost_assignment(&cost, n).cost / n as f64;
            prop_assert!((lp - hung).abs() < 1e-12, "{lp} vs {hung}");
        }

        #[test]
        fn matches_quantile_coupling(
            xs in prop::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 1..12),
            ys in prop::collection::vec((-5.0f64..5.0, 0.01f64..1.0), 1..12),
        ) {
            let norm = |v: &[(f64, f64)]| {
                let s: f64 = v.iter().map(|p| p.1).sum();
                v.iter().map(|p| p.1 / s).collect::<Vec<_>>()
            };
            let (wa, wb) = (norm(&xs), norm(&ys));
            let cost: Vec<f64> = xs.iter().flat_map(|x| ys.iter().map(move |y| (x.0 - y.0).abs())).collect();
            let lp = transport_cost(&wa, &wb, &cost).unwrap();
            let fix = |w: Vec<f64>| { let s: f64 = w.iter().sum(); w.into_iter().map(|v| v / s).collect::<Vec<_>>() };
            let mu = EmpiricalLaw::with_weights(xs.iter().map(|p| p.0).collect(), 1, fix(wa)).unwrap();
            let nu = EmpiricalLaw::with_weights(ys.iter().map(|p| p.0).collect(), 1, fix(wb)).unwrap();
            let q = wasserstein_1d(&mu, &nu, 1.0).unwrap();
            prop_assert!((lp - q).abs() < 1e-9, "{lp} vs {q}");
        }
    }
}
