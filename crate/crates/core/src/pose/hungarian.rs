//! Minimum-cost assignment (Kuhn–Munkres with row/column potentials).

/// Solves `min Σ cost[i][assign[i]]` over injective `assign`.
///
/// `cost` is `rows × cols` with `rows ≤ cols`; every row is assigned a
/// distinct column. Rows and columns are scanned in ascending order, so the
/// result is a deterministic function of the matrix.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    assert!(n <= m, "hungarian_min needs rows ≤ cols ({n} > {m})");
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");

    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// Maximum-weight matching restricted to `allowed` pairs.
///
/// Pads to a square matrix whose disallowed and dummy entries cost 0, so a
/// pair is only selected when its weight is positive and allowed. Returned
/// pairs are sorted by row.
pub fn max_weight_matching(weights: &[Vec<f64>], allowed: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let k = rows.max(cols);
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i < rows && j < cols && allowed(i, j) {
                        -weights[i][j]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    hungarian_min(&cost)
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < rows && j < cols && allowed(i, j))
        .collect()
}
