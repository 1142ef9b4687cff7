//! Supervised evaluation of unsupervised partitions: normalized mutual
//! information, best-matching clustering accuracy, and the assignment
//! solver both rely on.

use crate::error::{Error, Result};

/// Joint counts of (true class, cluster) pairs.
#[derive(Debug, Clone)]
pub struct ContingencyTable {
    /// counts[class][cluster]
    pub counts: Vec<Vec<usize>>,
    pub n: usize,
}

impl ContingencyTable {
    /// Build from two label sequences. Label values are arbitrary; they are
    /// compacted to dense indices in ascending value order.
    pub fn from_labels(classes: &[usize], clusters: &[usize]) -> Result<Self> {
        if classes.len() != clusters.len() {
            return Err(Error::LengthMismatch(classes.len(), clusters.len()));
        }
        let class_ids = compact_ids(classes);
        let cluster_ids = compact_ids(clusters);
        let rows = class_ids.iter().copied().max().map_or(0, |v| v + 1);
        let cols = cluster_ids.iter().copied().max().map_or(0, |v| v + 1);
        let mut counts = vec![vec![0usize; cols]; rows];
        for (&a, &b) in class_ids.iter().zip(&cluster_ids) {
            counts[a][b] += 1;
        }
        Ok(ContingencyTable { counts, n: classes.len() })
    }

    /// Zero-pad to a square table, so cluster and class counts may differ.
    pub fn padded_square(&self) -> Vec<Vec<usize>> {
        let rows = self.counts.len();
        let cols = self.counts.first().map_or(0, |r| r.len());
        let side = rows.max(cols);
        let mut out = vec![vec![0usize; side]; side];
        for (i, row) in self.counts.iter().enumerate() {
            out[i][..cols].copy_from_slice(row);
        }
        out
    }
}

fn compact_ids(labels: &[usize]) -> Vec<usize> {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("present"))
        .collect()
}

/// A minimum-cost one-to-one assignment of rows to columns.
#[derive(Debug, Clone)]
pub struct Matching {
    /// row_to_col[i] = column assigned to row i (a permutation).
    pub row_to_col: Vec<usize>,
    pub total_cost: f64,
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Among all optimal assignments, returns the lexicographically smallest
/// permutation (row 0 gets the smallest feasible column, then row 1, ...).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Matching> {
    let n = cost.len();
    for row in cost {
        if row.len() != n {
            return Err(Error::NonSquareCost { rows: n, cols: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("cost matrix entries must be finite".into()));
        }
    }
    if n == 0 {
        return Ok(Matching { row_to_col: Vec::new(), total_cost: 0.0 });
    }

    let best = solve_min_cost(cost);

    // Fix rows in order, preferring the smallest column that still permits an
    // optimal completion. Subproblems are tiny relative to matching use
    // (clusters-to-classes), so the extra solves are cheap.
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut used = vec![false; n];
    let mut prefix = 0.0;
    for i in 0..n {
        let remaining_rows: Vec<usize> = ((i + 1)..n).collect();
        let mut pick = None;
        for c in 0..n {
            if used[c] {
                continue;
            }
            let completion = if remaining_rows.is_empty() {
                0.0
            } else {
                let free_cols: Vec<usize> =
                    (0..n).filter(|&cc| !used[cc] && cc != c).collect();
                let sub: Vec<Vec<f64>> = remaining_rows
                    .iter()
                    .map(|&r| free_cols.iter().map(|&cc| cost[r][cc]).collect())
                    .collect();
                solve_min_cost(&sub)
            };
            let total = prefix + cost[i][c] + completion;
            if total <= best + 1e-9 * (1.0 + best.abs()) {
                pick = Some(c);
                break;
            }
        }
        let c = pick.expect("an optimal column always exists");
        used[c] = true;
        prefix += cost[i][c];
        chosen.push(c);
    }

    Ok(Matching { row_to_col: chosen, total_cost: best })
}

/// O(n^3) shortest-augmenting-path assignment with potentials; returns the
/// optimal total cost only.
fn solve_min_cost(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    if n == 0 {
        return 0.0;
    }
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j (1-based)
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
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

    let mut total = 0.0;
    for j in 1..=n {
        if p[j] > 0 {
            total += cost[p[j] - 1][j - 1];
        }
    }
    total
}

/// Normalized mutual information between two labelings, in [0,1].
///
/// Plug-in entropies and mutual information from the contingency table with
/// natural logs. When both partitions are single-block the 0/0 case is
/// defined as 1 (the partitions are identical).
pub fn nmi(classes: &[usize], clusters: &[usize]) -> Result<f64> {
    if classes.len() != clusters.len() {
        return Err(Error::LengthMismatch(classes.len(), clusters.len()));
    }
    if classes.is_empty() {
        return Err(Error::Data("nmi on empty labelings".into()));
    }
    let table = ContingencyTable::from_labels(classes, clusters)?;
    let n = table.n as f64;
    let row_sums: Vec<usize> = table.counts.iter().map(|r| r.iter().sum()).collect();
    let col_count = table.counts.first().map_or(0, |r| r.len());
    let mut col_sums = vec![0usize; col_count];
    for row in &table.counts {
        for (c, &v) in row.iter().enumerate() {
            col_sums[c] += v;
        }
    }
    let entropy = |sums: &[usize]| -> f64 {
        sums.iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let p = s as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_classes = entropy(&row_sums);
    let h_clusters = entropy(&col_sums);
    let denom = 0.5 * (h_classes + h_clusters);
    if denom == 0.0 {
        // Both partitions put everything in one block: identical partitions.
        return Ok(1.0);
    }
    // Equivalent partitions (one is a relabeling of the other) score exactly
    // 1: every row and column of the table then holds a single nonzero.
    let bijective = table.counts.iter().all(|r| r.iter().filter(|&&v| v > 0).count() == 1)
        && (0..col_count).all(|c| table.counts.iter().filter(|r| r[c] > 0).count() == 1);
    if bijective {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let p_ij = c as f64 / n;
            let p_i = row_sums[i] as f64 / n;
            let p_j = col_sums[j] as f64 / n;
            mi += p_ij * (p_ij / (p_i * p_j)).ln();
        }
    }
    Ok((mi / denom).clamp(0.0, 1.0))
}

/// Unsupervised clustering accuracy: the best fraction of agreement over all
/// one-to-one cluster-to-class maps, solved on the negated contingency table.
pub fn acc(classes: &[usize], clusters: &[usize]) -> Result<f64> {
    if classes.len() != clusters.len() {
        return Err(Error::LengthMismatch(classes.len(), clusters.len()));
    }
    if classes.is_empty() {
        return Err(Error::Data("acc on empty labelings".into()));
    }
    let table = ContingencyTable::from_labels(classes, clusters)?;
    let padded = table.padded_square();
    let cost: Vec<Vec<f64>> = padded
        .iter()
        .map(|row| row.iter().map(|&c| -(c as f64)).collect())
        .collect();
    let matching = hungarian(&cost)?;
    Ok(-matching.total_cost / table.n as f64)
}
