//! Exact solvers backing the optimality-gap metric.
//!
//! TSP: Held-Karp over all nodes. CVRP: per-subset optimal routes combined
//! by a set-partition sweep. OP: subset/endpoint DP under the length budget.
//! KP: 0/1 DP on a weight grid (ceiling-rounded, so returned subsets are
//! always truly feasible) with the grid error bounded from the same table.

use super::{dist, OracleMethod, OracleResult, Solution, KP_RESOLUTION};

/// Min-length paths over subsets: `dp[mask][last]` = shortest start→last
/// visiting exactly `mask`, with `start_cost[j]` the start→j leg. Returns
/// `(dp, parent)`.
fn subset_paths(
    d: &[Vec<f64>],
    start_cost: &[f64],
) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let n = start_cost.len();
    let full = 1usize << n;
    let mut dp = vec![vec![f64::INFINITY; n]; full];
    let mut parent = vec![vec![usize::MAX; n]; full];
    for j in 0..n {
        dp[1 << j][j] = start_cost[j];
    }
    for mask in 1..full {
        for j in 0..n {
            if mask & (1 << j) == 0 || !dp[mask][j].is_finite() {
                continue;
            }
            let cur = dp[mask][j];
            for k in 0..n {
                if mask & (1 << k) != 0 {
                    continue;
                }
                let next = mask | (1 << k);
                let cand = cur + d[j][k];
                if cand < dp[next][k] {
                    dp[next][k] = cand;
                    parent[next][k] = j;
                }
            }
        }
    }
    (dp, parent)
}

fn walk_back(parent: &[Vec<usize>], mut mask: usize, mut last: usize) -> Vec<usize> {
    let mut order = Vec::new();
    while last != usize::MAX {
        order.push(last);
        let prev = parent[mask][last];
        mask &= !(1 << last);
        last = prev;
    }
    order.reverse();
    order
}

pub fn tsp(coords: &[[f64; 2]]) -> OracleResult {
    let n = coords.len();
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist(coords[i], coords[j])).collect())
        .collect();
    // Fix node 0 as the tour anchor; DP runs over the remaining nodes.
    let m = n - 1;
    let dm: Vec<Vec<f64>> = (0..m)
        .map(|i| (0..m).map(|j| d[i + 1][j + 1]).collect())
        .collect();
    let start: Vec<f64> = (0..m).map(|j| d[0][j + 1]).collect();
    let (dp, parent) = subset_paths(&dm, &start);
    let full = (1usize << m) - 1;
    let (best_last, best) = (0..m)
        .map(|j| (j, dp[full][j] + d[j + 1][0]))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    let mut order = vec![0];
    order.extend(walk_back(&parent, full, best_last).iter().map(|j| j + 1));
    OracleResult {
        value: best,
        solution: Solution::Tour { order },
        method: OracleMethod::HeldKarp,
        error_bound: 0.0,
    }
}

pub fn cvrp(depot: [f64; 2], coords: &[[f64; 2]], demands: &[u32], capacity: u32) -> OracleResult {
    let n = coords.len();
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist(coords[i], coords[j])).collect())
        .collect();
    let start: Vec<f64> = coords.iter().map(|c| dist(depot, *c)).collect();
    let (dp, parent) = subset_paths(&d, &start);

    let full = 1usize << n;
    let mut route_cost = vec![f64::INFINITY; full];
    let mut route_last = vec![usize::MAX; full];
    for mask in 1..full {
        let load: u32 = (0..n)
            .filter(|j| mask & (1 << j) != 0)
            .map(|j| demands[j])
            .sum();
        if load > capacity {
            continue;
        }
        for j in 0..n {
            if mask & (1 << j) == 0 || !dp[mask][j].is_finite() {
                continue;
            }
            let cost = dp[mask][j] + start[j];
            if cost < route_cost[mask] {
                route_cost[mask] = cost;
                route_last[mask] = j;
            }
        }
    }

    // Partition the customer set into capacity-feasible routes.
    let mut best = vec![f64::INFINITY; full];
    let mut choice = vec![0usize; full];
    best[0] = 0.0;
    for mask in 1..full {
        let mut sub = mask;
        while sub > 0 {
            if route_cost[sub].is_finite() && best[mask ^ sub].is_finite() {
                let cand = best[mask ^ sub] + route_cost[sub];
                if cand < best[mask] {
                    best[mask] = cand;
                    choice[mask] = sub;
                }
            }
            sub = (sub - 1) & mask;
        }
    }

    let mut routes = Vec::new();
    let mut mask = full - 1;
    while mask > 0 {
        let sub = choice[mask];
        routes.push(walk_back(&parent, sub, route_last[sub]));
        mask ^= sub;
    }
    routes.reverse();
    OracleResult {
        value: best[full - 1],
        solution: Solution::Routes { routes },
        method: OracleMethod::Enumeration,
        error_bound: 0.0,
    }
}

pub fn op(depot: [f64; 2], coords: &[[f64; 2]], prizes: &[f64], max_len: f64) -> OracleResult {
    let n = coords.len();
    let d: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist(coords[i], coords[j])).collect())
        .collect();
    let start: Vec<f64> = coords.iter().map(|c| dist(depot, *c)).collect();
    let (dp, parent) = subset_paths(&d, &start);

    let full = 1usize << n;
    let mut prize_of = vec![0.0; full];
    for mask in 1..full {
        let j = mask.trailing_zeros() as usize;
        prize_of[mask] = prize_of[mask & (mask - 1)] + prizes[j];
    }

    // The empty tour is always admissible.
    let (mut best_prize, mut best_state) = (0.0, None);
    for mask in 1..full {
        for j in 0..n {
            if mask & (1 << j) == 0 || !dp[mask][j].is_finite() {
                continue;
            }
            if dp[mask][j] + start[j] <= max_len && prize_of[mask] > best_prize {
                best_prize = prize_of[mask];
                best_state = Some((mask, j));
            }
        }
    }
    let order = match best_state {
        Some((mask, j)) => walk_back(&parent, mask, j),
        None => Vec::new(),
    };
    OracleResult {
        value: best_prize,
        solution: Solution::Path { order },
        method: OracleMethod::Dp,
        error_bound: 0.0,
    }
}

pub fn kp(weights: &[f64], values: &[f64], capacity: f64) -> OracleResult {
    let n = weights.len();
    let grid: Vec<usize> = weights
        .iter()
        .map(|w| ((w / KP_RESOLUTION).ceil() as usize).max(1))
        .collect();
    let cap = (capacity / KP_RESOLUTION).floor() as usize;
    // Any truly feasible subset fits within cap + n grid units, so the cell
    // gap bounds the rounding loss.
    let ext = cap + n;
    let words = ext / 64 + 1;
    let mut dp = vec![0.0f64; ext + 1];
    let mut took = vec![vec![0u64; words]; n];
    for i in 0..n {
        let w = grid[i];
        if w > ext {
            continue;
        }
        for c in (w..=ext).rev() {
            let cand = dp[c - w] + values[i];
            if cand > dp[c] {
                dp[c] = cand;
                took[i][c / 64] |= 1 << (c % 64);
            }
        }
    }
    let mut c = cap;
    let mut items = Vec::new();
    for i in (0..n).rev() {
        if took[i][c / 64] >> (c % 64) & 1 == 1 {
            items.push(i);
            c -= grid[i];
        }
    }
    items.reverse();
    let value: f64 = items.iter().map(|&i| values[i]).sum();
    OracleResult {
        value,
        solution: Solution::Subset { items },
        method: OracleMethod::Dp,
        error_bound: (dp[ext] - dp[cap]).max(0.0),
    }
}
