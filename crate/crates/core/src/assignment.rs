//! Dense linear assignment.
//!
//! [`maximize`] solves the square assignment problem with the O(n^3)
//! shortest-augmenting-path Hungarian method, then picks the lexicographically
//! smallest permutation among all optimal ones. Optimal permutations are
//! exactly the perfect matchings of the tight-edge subgraph under the final
//! dual potentials, so the tie-break walks that subgraph row by row.

/// Reduced costs at or below this are treated as tight.
pub const TIE_TOLERANCE: f64 = 1e-11;

/// Returns `sigma` maximizing `sum_i weights[i * n + sigma[i]]` for weights in
/// `[0, 1]`. Ties go to the lexicographically smallest `sigma`.
pub fn maximize(weights: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(weights.len(), n * n, "weight matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    let cost: Vec<f64> = weights.iter().map(|w| (1.0 - w).clamp(0.0, 1.0)).collect();
    let (row_to_col, u, v) = hungarian(&cost, n);

    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| cost[i * n + j] - u[i] - v[j] <= TIE_TOLERANCE || row_to_col[i] == j)
                .collect()
        })
        .collect();
    lexicographic_min_matching(&tight, row_to_col)
}

/// Minimizes total cost. Returns the row assignment and the row/column
/// potentials with `cost[i][j] - u[i] - v[j] >= 0`, tight on the matching.
fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    // 1-based with a virtual column 0, after the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        row_to_col[p[j] - 1] = j - 1;
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Lexicographically smallest perfect matching of a bipartite graph, given
/// ascending adjacency lists and any perfect matching to start from.
///
/// Row `i` can take column `j != M[i]` iff `(i, j)` lies on an alternating
/// cycle, i.e. `i` is reachable from `j` along matched (column to row) and
/// unmatched (row to column) edges among rows and columns not yet fixed.
fn lexicographic_min_matching(adj: &[Vec<usize>], mut row_to_col: Vec<usize>) -> Vec<usize> {
    let n = adj.len();
    let mut col_to_row = vec![0; n];
    for (r, &c) in row_to_col.iter().enumerate() {
        col_to_row[c] = r;
    }
    let mut col_adj = vec![Vec::new(); n];
    for (r, cols) in adj.iter().enumerate() {
        for &c in cols {
            col_adj[c].push(r);
        }
    }
    let mut col_locked = vec![false; n];

    // Toward-`i` successor of each node on the reverse search; usize::MAX = unseen.
    let mut next_of_col = vec![usize::MAX; n];
    let mut next_of_row = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();

    for i in 0..n {
        let current = row_to_col[i];
        let best = adj[i]
            .iter()
            .copied()
            .find(|&c| !col_locked[c])
            .expect("row keeps a tight edge");
        if best != current {
            // Reverse BFS from row i; rows < i are fixed and excluded.
            next_of_col.fill(usize::MAX);
            next_of_row.fill(usize::MAX);
            next_of_row[i] = i;
            queue.clear();
            queue.push_back(i);
            while let Some(r) = queue.pop_front() {
                // The only edge into row r is from its matched column.
                let c = row_to_col[r];
                if next_of_col[c] != usize::MAX {
                    continue;
                }
                next_of_col[c] = r;
                // Edges into column c come from rows tight on c but not matched to it.
                for &r2 in &col_adj[c] {
                    if r2 < i || col_to_row[c] == r2 || next_of_row[r2] != usize::MAX {
                        continue;
                    }
                    next_of_row[r2] = c;
                    queue.push_back(r2);
                }
            }
            let target = adj[i].iter().copied().find(|&cand| {
                cand < current && !col_locked[cand] && next_of_col[cand] != usize::MAX
            });
            if let Some(j) = target {
                // Walk j -> row -> col -> ... -> i, rematching each row to the
                // column after it; i closes the cycle by taking j.
                let mut c = j;
                loop {
                    let r = next_of_col[c];
                    if r == i {
                        break;
                    }
                    let c2 = next_of_row[r];
                    row_to_col[r] = c2;
                    col_to_row[c2] = r;
                    c = c2;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
            }
        }
        col_locked[row_to_col[i]] = true;
    }
    row_to_col
}
