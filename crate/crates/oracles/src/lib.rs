//! Independent reference implementations for test code.
//!
//! Nothing in this crate depends on `cnav-core`. Every routine is written
//! directly from its defining formula, favours clarity over speed, and
//! refuses inputs larger than desk scale.

use std::collections::VecDeque;

/// Largest sequence length any oracle accepts.
pub const MAX_SEQUENCE: usize = 200;
/// Largest parameter count `fd_gradient` accepts.
pub const MAX_PARAMS: usize = 10_000;

/// Deviation record produced when an oracle is compared against an
/// implementation. Deviations are kept even when the comparison passes.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub case: String,
    pub reference: Vec<f64>,
    pub implementation: Vec<f64>,
    pub max_abs: f64,
    pub max_rel: f64,
}

impl OracleReport {
    pub fn compare(case: impl Into<String>, reference: Vec<f64>, implementation: Vec<f64>) -> Self {
        assert_eq!(
            reference.len(),
            implementation.len(),
            "oracle/implementation length mismatch"
        );
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (r, i) in reference.iter().zip(&implementation) {
            let abs = (r - i).abs();
            let rel = abs / r.abs().max(i.abs()).max(f64::MIN_POSITIVE);
            max_abs = max_abs.max(abs);
            if abs > 0.0 {
                max_rel = max_rel.max(rel);
            }
        }
        Self {
            case: case.into(),
            reference,
            implementation,
            max_abs,
            max_rel,
        }
    }
}

/// Relative error used by every gradient check: `|a - b| / max(|a|, |b|, floor)`.
pub fn gradient_rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

// ---------------------------------------------------------------------------
// LOF
// ---------------------------------------------------------------------------

fn cosine(u: &[f64], v: &[f64], epsilon: f64) -> f64 {
    let mut dot = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for idx in 0..u.len() {
        dot += u[idx] * v[idx];
        uu += u[idx] * u[idx];
        vv += v[idx] * v[idx];
    }
    let floor = epsilon * epsilon;
    let d = 1.0 - dot / (uu.max(floor) * vv.max(floor)).sqrt();
    d.clamp(0.0, 2.0)
}

/// Local outlier factor of every point, from the textbook definition.
///
/// Builds the full distance matrix, finds each point's k-distance by
/// sorting its row, takes every point within that radius as a neighbour,
/// and evaluates reachability density and LOF with neighbour sums taken in
/// ascending index order. A zero mean reachability distance is replaced by
/// `epsilon` before inversion.
pub fn lof_bruteforce(seq: &[Vec<f64>], k: usize, epsilon: f64) -> Vec<f64> {
    let n = seq.len();
    assert!(n >= 2 && n <= MAX_SEQUENCE, "oracle accepts 2..={MAX_SEQUENCE} points");
    assert!(k >= 1 && k < n, "k must lie in 1..n");

    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            dist[i][j] = cosine(&seq[i], &seq[j], epsilon);
        }
    }

    let mut kdist = vec![0.0; n];
    let mut hoods: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
        row.sort_by(|a, b| a.partial_cmp(b).unwrap());
        kdist[i] = row[k - 1];
        for j in 0..n {
            if j != i && dist[i][j] <= kdist[i] {
                hoods[i].push(j);
            }
        }
    }

    let mut lrd = vec![0.0; n];
    for i in 0..n {
        let mut total = 0.0;
        for &j in &hoods[i] {
            total += if kdist[j] > dist[i][j] { kdist[j] } else { dist[i][j] };
        }
        let mean = total / hoods[i].len() as f64;
        lrd[i] = 1.0 / if mean > 0.0 { mean } else { epsilon };
    }

    (0..n)
        .map(|i| {
            let mut total = 0.0;
            for &j in &hoods[i] {
                total += lrd[j] / lrd[i];
            }
            total / hoods[i].len() as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

/// Central finite-difference gradient of `loss` at `x`.
pub fn fd_gradient<F>(loss: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    assert!(x.len() <= MAX_PARAMS, "oracle accepts at most {MAX_PARAMS} parameters");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|idx| {
            let orig = probe[idx];
            probe[idx] = orig + step;
            let plus = loss(&probe);
            probe[idx] = orig - step;
            let minus = loss(&probe);
            probe[idx] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Grid geometry
// ---------------------------------------------------------------------------

/// Cell kinds understood by the grid oracles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleCell {
    Free,
    Wall,
    Object(u32),
}

fn in_success_region(grid: &[Vec<OracleCell>], r: usize, c: usize, category: u32) -> bool {
    if grid[r][c] != OracleCell::Free {
        return false;
    }
    for rr in r.saturating_sub(1)..=(r + 1).min(grid.len() - 1) {
        for cc in c.saturating_sub(1)..=(c + 1).min(grid[rr].len() - 1) {
            if grid[rr][cc] == OracleCell::Object(category) {
                return true;
            }
        }
    }
    false
}

/// Exact 4-connected BFS distance from `start` to the nearest free cell
/// within Chebyshev distance 1 of an object of `category`.
/// `None` when no such cell is reachable.
pub fn geodesic_bfs(grid: &[Vec<OracleCell>], start: (usize, usize), category: u32) -> Option<usize> {
    let h = grid.len();
    let w = grid[0].len();
    let mut seen = vec![vec![false; w]; h];
    let mut queue = VecDeque::new();
    seen[start.0][start.1] = true;
    queue.push_back((start, 0usize));
    while let Some(((r, c), d)) = queue.pop_front() {
        if in_success_region(grid, r, c, category) {
            return Some(d);
        }
        let nbrs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for (nr, nc) in nbrs {
            if nr < h && nc < w && !seen[nr][nc] && grid[nr][nc] == OracleCell::Free {
                seen[nr][nc] = true;
                queue.push_back(((nr, nc), d + 1));
            }
        }
    }
    None
}

/// Number of free cells reachable from `start` by 4-connected moves.
pub fn flood_fill_count(grid: &[Vec<OracleCell>], start: (usize, usize)) -> usize {
    let h = grid.len();
    let w = grid[0].len();
    let mut seen = vec![vec![false; w]; h];
    let mut stack = vec![start];
    seen[start.0][start.1] = true;
    let mut count = 0;
    while let Some((r, c)) = stack.pop() {
        count += 1;
        let nbrs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
        for (nr, nc) in nbrs {
            if nr < h && nc < w && !seen[nr][nc] && grid[nr][nc] == OracleCell::Free {
                seen[nr][nc] = true;
                stack.push((nr, nc));
            }
        }
    }
    count
}

/// Line-of-sight test in world coordinates. The segment from the centre of
/// `from` to the centre of `to` is sampled at `n - 1` interior points, where
/// `n` is the Chebyshev length; each sample is rounded half away from zero
/// and must not land on a wall or object (other than `to` itself). Cells
/// outside the grid count as blocking.
pub fn line_of_sight(grid: &[Vec<OracleCell>], from: (i64, i64), to: (i64, i64)) -> bool {
    let dr = to.0 - from.0;
    let dc = to.1 - from.1;
    let n = dr.abs().max(dc.abs());
    for i in 1..n {
        let fr = from.0 as f64 + (dr as f64) * (i as f64) / (n as f64);
        let fc = from.1 as f64 + (dc as f64) * (i as f64) / (n as f64);
        let r = (fr - from.0 as f64).round() as i64 + from.0;
        let c = (fc - from.1 as f64).round() as i64 + from.1;
        if (r, c) == to {
            continue;
        }
        if r < 0 || c < 0 || r as usize >= grid.len() || c as usize >= grid[0].len() {
            return false;
        }
        if grid[r as usize][c as usize] != OracleCell::Free {
            return false;
        }
    }
    true
}

// ---------------------------------------------------------------------------
// Exact 2-means
// ---------------------------------------------------------------------------

/// Optimal 2-partition under squared Euclidean distance, by enumerating every
/// non-trivial split. Returns the label (0/1) of each point, with point 0 in
/// cluster 0.
pub fn exact_two_means(points: &[Vec<f64>]) -> Vec<u8> {
    let n = points.len();
    assert!((2..=16).contains(&n), "exact 2-means is exponential; use at most 16 points");
    let dim = points[0].len();
    let mut best_cost = f64::INFINITY;
    let mut best_mask = 0u32;
    // Point 0 always in cluster 0 removes the label symmetry.
    for mask in 1u32..(1 << (n - 1)) {
        let labels: Vec<u8> = (0..n)
            .map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as u8 })
            .collect();
        let mut cost = 0.0;
        for cluster in 0..2u8 {
            let members: Vec<&Vec<f64>> =
                (0..n).filter(|&i| labels[i] == cluster).map(|i| &points[i]).collect();
            let mut centre = vec![0.0; dim];
            for p in &members {
                for d in 0..dim {
                    centre[d] += p[d] / members.len() as f64;
                }
            }
            for p in &members {
                for d in 0..dim {
                    cost += (p[d] - centre[d]).powi(2);
                }
            }
        }
        if cost < best_cost {
            best_cost = cost;
            best_mask = mask;
        }
    }
    (0..n)
        .map(|i| if i == 0 { 0 } else { ((best_mask >> (i - 1)) & 1) as u8 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_quadratic() {
        let g = fd_gradient(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_constant_is_zero() {
        let g = fd_gradient(|_| 4.2, &[1.0, -2.0, 0.5], 1e-5);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lof_identical_points_is_one() {
        let seq = vec![vec![0.3, -1.0, 2.0]; 6];
        for k in 1..6 {
            let s = lof_bruteforce(&seq, k, 1e-12);
            assert!(s.iter().all(|&v| v == 1.0), "k={k}: {s:?}");
        }
    }

    #[test]
    fn lof_full_neighbourhood_at_max_k() {
        // With k = L - 1 every point's neighbourhood is everything else; LOF
        // of a symmetric configuration is then exactly 1.
        let seq = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let s = lof_bruteforce(&seq, 3, 1e-12);
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    fn corridor(len: usize) -> Vec<Vec<OracleCell>> {
        // Row 1 is a corridor, object at the far end.
        let mut g = vec![vec![OracleCell::Wall; len + 3]; 3];
        for c in 1..=len + 1 {
            g[1][c] = OracleCell::Free;
        }
        g[1][len + 1] = OracleCell::Object(0);
        g
    }

    #[test]
    fn geodesic_straight_corridor() {
        // Success region starts one cell before the object.
        let g = corridor(6);
        assert_eq!(geodesic_bfs(&g, (1, 1), 0), Some(5));
        assert_eq!(geodesic_bfs(&g, (1, 6), 0), Some(0));
        assert_eq!(geodesic_bfs(&g, (1, 1), 1), None);
    }

    #[test]
    fn two_means_on_blobs() {
        let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![5.0, 5.0], vec![5.1, 5.0]];
        assert_eq!(exact_two_means(&pts), vec![0, 0, 1, 1]);
    }

    #[test]
    fn line_of_sight_blocked_by_wall() {
        let mut g = vec![vec![OracleCell::Free; 5]; 5];
        g[2][2] = OracleCell::Wall;
        assert!(!line_of_sight(&g, (2, 0), (2, 4)));
        assert!(line_of_sight(&g, (0, 0), (0, 4)));
        assert!(line_of_sight(&g, (2, 1), (2, 2)));
    }
}
