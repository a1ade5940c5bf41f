//! Minimum-cost assignment (Kuhn–Munkres with potentials), rectangular, with forbidden pairs.

/// Result of [`hungarian_match`]; `total` sums the costs of `pairs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unassigned_rows: Vec<usize>,
    pub unassigned_cols: Vec<usize>,
    pub total: f64,
}

/// Solves the assignment problem on `cost` (rows × cols).
///
/// Entries equal to `f64::INFINITY` are forbidden. Among assignments the
/// solver first maximizes the number of permitted pairs, then minimizes the
/// summed cost; rows or columns left without a permitted partner are reported
/// as unassigned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Assignment {
    let n_rows = cost.len();
    let n_cols = cost.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 {
        return Assignment {
            pairs: Vec::new(),
            unassigned_rows: (0..n_rows).collect(),
            unassigned_cols: (0..n_cols).collect(),
            total: 0.0,
        };
    }
    let transpose = n_rows > n_cols;
    let (n, m) = if transpose { (n_cols, n_rows) } else { (n_rows, n_cols) };
    let at = |i: usize, j: usize| if transpose { cost[j][i] } else { cost[i][j] };

    let max_finite = (0..n)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| at(i, j))
        .filter(|c| c.is_finite())
        .fold(0.0_f64, |acc, c| acc.max(c.abs()));
    // Any single forbidden pair outweighs every permitted assignment.
    let big = (max_finite + 1.0) * (n as f64 + 1.0) * 2.0;
    let a = |i: usize, j: usize| {
        let c = at(i, j);
        if c.is_finite() {
            c
        } else {
            big
        }
    };

    // 1-indexed potentials formulation; p[j] = row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
            for j in 0..=m {
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

    let mut pairs = Vec::with_capacity(n);
    for (j, &i) in p.iter().enumerate().skip(1) {
        if i == 0 {
            continue;
        }
        let (r, c) = if transpose { (j - 1, i - 1) } else { (i - 1, j - 1) };
        if cost[r][c].is_finite() {
            pairs.push((r, c));
        }
    }
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
    let mut row_used = vec![false; n_rows];
    let mut col_used = vec![false; n_cols];
    for &(r, c) in &pairs {
        row_used[r] = true;
        col_used[c] = true;
    }
    Assignment {
        pairs,
        unassigned_rows: (0..n_rows).filter(|&r| !row_used[r]).collect(),
        unassigned_cols: (0..n_cols).filter(|&c| !col_used[c]).collect(),
        total,
    }
}
