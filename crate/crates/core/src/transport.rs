//! Discrete optimal transport between finitely supported measures.
//!
//! Exact solvers: a Hungarian assignment for two uniform clouds of equal
//! size, successive shortest paths on the dense bipartite network
//! otherwise, and sorting for measures on the line. Sliced distances average
//! sorted 1-D matchings over random projections.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, shape_err, Error, Result};
use crate::seed::{rng_for, streams};

/// Largest `N_a * N_b` accepted by the exact solvers.
pub const EXACT_LIMIT: usize = 1_000_000;

const WEIGHT_TOL: f64 = 1e-12;
const FLOW_EPS: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct Discrete<'a> {
    pub points: &'a [Vec<f64>],
    pub weights: &'a [f64],
}

fn check_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return shape_err(format!("{} weights for {n} points", w.len()));
    }
    if n == 0 {
        return invalid("empty measure");
    }
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return invalid("weights must be finite and nonnegative");
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return invalid(format!("weights sum to {s}, expected 1"));
    }
    Ok(())
}

/// Merges identical atoms, summing their weights; order of first occurrence.
pub fn dedupe(points: &[Vec<f64>], weights: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&i, &j| {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut first_of = vec![usize::MAX; points.len()];
    let mut k = 0;
    while k < idx.len() {
        let head = idx[k];
        let mut j = k;
        while j < idx.len() && points[idx[j]] == points[head] {
            first_of[idx[j]] = head;
            j += 1;
        }
        k = j;
    }
    let mut out_pts = Vec::new();
    let mut out_w = Vec::new();
    let mut slot = vec![usize::MAX; points.len()];
    for i in 0..points.len() {
        let h = first_of[i];
        if slot[h] == usize::MAX {
            slot[h] = out_pts.len();
            out_pts.push(points[h].clone());
            out_w.push(0.0);
        }
        out_w[slot[h]] += weights[i];
    }
    (out_pts, out_w)
}

/// Minimum-cost perfect matching on a square cost matrix (row-major).
/// Returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // Shortest augmenting paths with potentials, 1-based with a dummy column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Optimal transport cost `min sum pi_ij c_ij` between weight vectors `a`
/// (rows) and `b` (columns) by successive shortest paths with potentials.
pub fn transport_cost(cost: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    if cost.len() != n * m {
        return shape_err("cost matrix does not match the weight vectors");
    }
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; n * m];
    // potentials on rows and columns keep reduced costs nonnegative
    let mut pu = vec![0.0; n];
    let mut pv = vec![0.0; m];
    let min_cost = cost.iter().copied().fold(f64::INFINITY, f64::min);
    for x in pv.iter_mut() {
        *x = min_cost;
    }
    let total: f64 = a.iter().sum();
    // the marginals may disagree in the last bits, so stop once either runs out
    let tol = WEIGHT_TOL * total.max(1.0);
    let mut remaining = total;
    let mut remaining_b: f64 = b.iter().sum();
    let mut guard = 0usize;
    while remaining > tol && remaining_b > tol {
        guard += 1;
        if guard > 10 * (n + m) * (n + m) + 100 {
            return Err(Error::Divergence("transport solver failed to converge".into()));
        }
        // Dijkstra from all rows with spare supply over the residual graph:
        // row -> column always (reduced cost c - pu - pv), column -> row where flow > 0.
        let mut dist_r = vec![f64::INFINITY; n];
        let mut dist_c = vec![f64::INFINITY; m];
        let mut prev_c = vec![usize::MAX; m]; // row that reaches column
        let mut prev_r = vec![usize::MAX; n]; // column that reaches row (reverse edge)
        let mut done_r = vec![false; n];
        let mut done_c = vec![false; m];
        for i in 0..n {
            if supply[i] > FLOW_EPS {
                dist_r[i] = 0.0;
            }
        }
        let mut sink = None;
        loop {
            // pick the closest unfinished node
            let mut best = f64::INFINITY;
            let mut pick: Option<(bool, usize)> = None;
            for i in 0..n {
                if !done_r[i] && dist_r[i] < best {
                    best = dist_r[i];
                    pick = Some((true, i));
                }
            }
            for j in 0..m {
                if !done_c[j] && dist_c[j] < best {
                    best = dist_c[j];
                    pick = Some((false, j));
                }
            }
            let Some((is_row, k)) = pick else { break };
            if is_row {
                done_r[k] = true;
                for j in 0..m {
                    if done_c[j] {
                        continue;
                    }
                    let rc = (cost[k * m + j] - pu[k] - pv[j]).max(0.0);
                    let d = best + rc;
                    if d < dist_c[j] {
                        dist_c[j] = d;
                        prev_c[j] = k;
                    }
                }
            } else {
                done_c[k] = true;
                if demand[k] > FLOW_EPS {
                    sink = Some(k);
                    break;
                }
                for i in 0..n {
                    if done_r[i] || flow[i * m + k] <= FLOW_EPS {
                        continue;
                    }
                    let rc = (pu[i] + pv[k] - cost[i * m + k]).max(0.0);
                    let d = best + rc;
                    if d < dist_r[i] {
                        dist_r[i] = d;
                        prev_r[i] = k;
                    }
                }
            }
        }
        let Some(t) = sink else {
            return Err(Error::Divergence("transport solver found no augmenting path".into()));
        };
        let dt = dist_c[t];
        for i in 0..n {
            if done_r[i] {
                pu[i] += dt - dist_r[i].min(dt);
            }
        }
        for j in 0..m {
            if done_c[j] {
                pv[j] -= dt - dist_c[j].min(dt);
            }
        }
        // bottleneck along the path
        let mut amount = demand[t];
        let mut j = t;
        let source;
        loop {
            let i = prev_c[j];
            if prev_r[i] == usize::MAX {
                source = i;
                break;
            }
            let jj = prev_r[i];
            amount = amount.min(flow[i * m + jj]);
            j = jj;
        }
        amount = amount.min(supply[source]);
        let mut j = t;
        loop {
            let i = prev_c[j];
            flow[i * m + j] += amount;
            if prev_r[i] == usize::MAX {
                break;
            }
            let jj = prev_r[i];
            flow[i * m + jj] = (flow[i * m + jj] - amount).max(0.0);
            j = jj;
        }
        supply[source] -= amount;
        demand[t] -= amount;
        remaining -= amount;
        remaining_b -= amount;
    }
    Ok(flow.iter().zip(cost).map(|(f, c)| f * c).sum())
}

fn check_pair(a: &Discrete, b: &Discrete) -> Result<usize> {
    check_weights(a.weights, a.points.len())?;
    check_weights(b.weights, b.points.len())?;
    let d = a.points[0].len();
    if a.points.iter().chain(b.points).any(|p| p.len() != d) {
        return shape_err("points of different dimensions");
    }
    Ok(d)
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return invalid(format!("Wasserstein order p = {p} must be at least 1"));
    }
    Ok(())
}

fn is_uniform(w: &[f64]) -> bool {
    let u = 1.0 / w.len() as f64;
    w.iter().all(|x| (x - u).abs() <= WEIGHT_TOL)
}

/// Exact Wasserstein-`p` distance under the ground metric `ground`.
pub fn wasserstein_exact(a: &Discrete, b: &Discrete, p: f64, ground: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    check_p(p)?;
    check_pair(a, b)?;
    let (pa, wa) = dedupe(a.points, a.weights);
    let (pb, wb) = dedupe(b.points, b.weights);
    let (n, m) = (pa.len(), pb.len());
    if n.saturating_mul(m) > EXACT_LIMIT {
        return Err(Error::TooLarge(format!(
            "exact transport between {n} and {m} atoms exceeds {EXACT_LIMIT} cells"
        )));
    }
    let mut cost = Vec::with_capacity(n * m);
    for x in &pa {
        for y in &pb {
            cost.push(ground(x, y).powf(p));
        }
    }
    let total = if n == m && is_uniform(&wa) && is_uniform(&wb) {
        let assign = hungarian(&cost, n);
        assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64
    } else {
        transport_cost(&cost, &wa, &wb)?
    };
    Ok(total.max(0.0).powf(1.0 / p))
}

/// Exact Wasserstein-`p` distance between weighted measures on the line.
pub fn wasserstein_1d(xa: &[f64], wa: &[f64], xb: &[f64], wb: &[f64], p: f64) -> Result<f64> {
    check_p(p)?;
    check_weights(wa, xa.len())?;
    check_weights(wb, xb.len())?;
    let sorted = |x: &[f64], w: &[f64]| {
        let mut v: Vec<(f64, f64)> = x.iter().copied().zip(w.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    };
    let (sa, sb) = (sorted(xa, wa), sorted(xb, wb));
    let sum_a: f64 = wa.iter().sum();
    let sum_b: f64 = wb.iter().sum();
    // walk both quantile functions together
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (sa[0].1 / sum_a, sb[0].1 / sum_b);
    let mut total = 0.0;
    loop {
        let step = ra.min(rb);
        total += step * (sa[i].0 - sb[j].0).abs().powf(p);
        ra -= step;
        rb -= step;
        if ra <= WEIGHT_TOL * 1e-3 {
            i += 1;
            if i == sa.len() {
                break;
            }
            ra += sa[i].1 / sum_a;
        }
        if rb <= WEIGHT_TOL * 1e-3 {
            j += 1;
            if j == sb.len() {
                break;
            }
            rb += sb[j].1 / sum_b;
        }
    }
    Ok(total.max(0.0).powf(1.0 / p))
}

/// Sliced Wasserstein-`p`: the `p`-mean over `n_proj` random unit directions
/// of the exact 1-D distance between projections.
pub fn wasserstein_sliced(a: &Discrete, b: &Discrete, p: f64, n_proj: usize, seed: u64) -> Result<f64> {
    check_p(p)?;
    let d = check_pair(a, b)?;
    if n_proj == 0 {
        return invalid("sliced Wasserstein needs at least one projection");
    }
    let mut rng = rng_for(seed, streams::SLICED, d as u64);
    let mut acc = 0.0;
    for _ in 0..n_proj {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            dir = vec![0.0; d];
            dir[0] = 1.0;
        } else {
            dir.iter_mut().for_each(|x| *x /= norm);
        }
        let proj = |pts: &[Vec<f64>]| -> Vec<f64> { pts.iter().map(|x| x.iter().zip(&dir).map(|(a, b)| a * b).sum()).collect() };
        let w = wasserstein_1d(&proj(a.points), a.weights, &proj(b.points), b.weights, p)?;
        acc += w.powf(p);
    }
    Ok((acc / n_proj as f64).powf(1.0 / p))
}
