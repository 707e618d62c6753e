//! Dense linear assignment by the Jonker-Volgenant shortest augmenting path
//! method (column reduction, reduction transfer, augmenting row reduction,
//! then Dijkstra-style augmentation).

/// Minimum-cost perfect matching of an `n x n` problem. Returns `row_to_col`.
///
/// `cost(i, j)` is queried on demand, so large geometric problems never
/// materialize the matrix.
pub fn solve(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    const NONE: usize = usize::MAX;
    let mut rowsol = vec![NONE; n];
    let mut colsol = vec![NONE; n];
    let mut v = vec![0.0f64; n];
    let mut free = Vec::with_capacity(n);

    // column reduction
    let mut matches = vec![0u32; n];
    for j in (0..n).rev() {
        let mut min = cost(0, j);
        let mut imin = 0;
        for i in 1..n {
            let c = cost(i, j);
            if c < min {
                min = c;
                imin = i;
            }
        }
        v[j] = min;
        matches[imin] += 1;
        if matches[imin] == 1 {
            rowsol[imin] = j;
            colsol[j] = imin;
        } else if v[j] < v[rowsol[imin]] {
            let j1 = rowsol[imin];
            rowsol[imin] = j;
            colsol[j] = imin;
            colsol[j1] = NONE;
        } else {
            colsol[j] = NONE;
        }
    }

    // reduction transfer
    for i in 0..n {
        match matches[i] {
            0 => free.push(i),
            1 => {
                let j1 = rowsol[i];
                let mut min = f64::INFINITY;
                for j in 0..n {
                    if j != j1 {
                        min = min.min(cost(i, j) - v[j]);
                    }
                }
                v[j1] -= min;
            }
            _ => {}
        }
    }

    // augmenting row reduction, two passes
    for _ in 0..2 {
        let prev = std::mem::take(&mut free);
        let mut queue = prev;
        let mut k = 0;
        // guards against float cycling; each reinsertion strictly lowers a price
        let mut budget = 8 * n * n + 64;
        while k < queue.len() && budget > 0 {
            budget -= 1;
            let i = queue[k];
            k += 1;
            let mut umin = cost(i, 0) - v[0];
            let mut j1 = 0;
            let mut j2 = NONE;
            let mut usubmin = f64::INFINITY;
            for j in 1..n {
                let h = cost(i, j) - v[j];
                if h < usubmin {
                    if h >= umin {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            let mut i0 = colsol[j1];
            if umin < usubmin {
                v[j1] -= usubmin - umin;
            } else if i0 != NONE && j2 != NONE {
                j1 = j2;
                i0 = colsol[j2];
            }
            if rowsol[i] != NONE && colsol[rowsol[i]] == i {
                colsol[rowsol[i]] = NONE;
            }
            rowsol[i] = j1;
            colsol[j1] = i;
            if i0 != NONE && i0 != i {
                rowsol[i0] = NONE;
                if umin < usubmin {
                    k -= 1;
                    queue[k] = i0;
                } else {
                    free.push(i0);
                }
            }
        }
        // anything left unprocessed stays free
        free.extend(queue[k..].iter().copied());
    }

    // augmentation
    let mut d = vec![0.0f64; n];
    let mut pred = vec![0usize; n];
    let mut collist: Vec<usize> = (0..n).collect();
    for &freerow in &free {
        for j in 0..n {
            d[j] = cost(freerow, j) - v[j];
            pred[j] = freerow;
            collist[j] = j;
        }
        let mut low: usize = 0;
        let mut up: usize = 0;
        let mut last: usize = 0;
        let mut min = 0.0;
        let mut endofpath = NONE;
        while endofpath == NONE {
            if up == low {
                last = low.wrapping_sub(1);
                min = d[collist[up]];
                up += 1;
                for k in up..n {
                    let j = collist[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                }
                for &j in &collist[low..up] {
                    if colsol[j] == NONE {
                        endofpath = j;
                        break;
                    }
                }
            }
            if endofpath == NONE {
                let j1 = collist[low];
                low += 1;
                let i = colsol[j1];
                let h = cost(i, j1) - v[j1] - min;
                let mut k = up;
                while k < n {
                    let j = collist[k];
                    let v2 = cost(i, j) - v[j] - h;
                    if v2 < d[j] {
                        pred[j] = i;
                        if v2 == min {
                            if colsol[j] == NONE {
                                endofpath = j;
                                break;
                            }
                            collist[k] = collist[up];
                            collist[up] = j;
                            up += 1;
                        }
                        d[j] = v2;
                    }
                    k += 1;
                }
            }
        }
        // price update for scanned columns
        if last != usize::MAX {
            for &j1 in &collist[..=last] {
                v[j1] += d[j1] - min;
            }
        }
        // flip the augmenting path
        loop {
            let i = pred[endofpath];
            colsol[endofpath] = i;
            let j1 = endofpath;
            endofpath = rowsol[i];
            rowsol[i] = j1;
            if i == freerow {
                break;
            }
        }
    }
    debug_assert!(rowsol.iter().all(|&j| j != NONE));
    rowsol
}

/// Total cost of an assignment.
pub fn assignment_cost(row_to_col: &[usize], cost: impl Fn(usize, usize) -> f64) -> f64 {
    row_to_col.iter().enumerate().map(|(i, &j)| cost(i, j)).sum()
}
