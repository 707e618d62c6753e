//! Primal network simplex for balanced, uncapacitated transportation
//! problems with integer supplies. Exact on the given integer flows.

const NONE: usize = usize::MAX;

struct Tree {
    parent: Vec<usize>,
    /// Arc id linking a node to its parent.
    arc: Vec<usize>,
    /// Whether that arc points from the node to its parent.
    up: Vec<bool>,
    flow: Vec<i64>,
    pi: Vec<f64>,
    depth: Vec<usize>,
    first_child: Vec<usize>,
    next_sib: Vec<usize>,
    prev_sib: Vec<usize>,
}

impl Tree {
    fn detach(&mut self, x: usize) {
        let p = self.parent[x];
        let (prev, next) = (self.prev_sib[x], self.next_sib[x]);
        if prev == NONE {
            self.first_child[p] = next;
        } else {
            self.next_sib[prev] = next;
        }
        if next != NONE {
            self.prev_sib[next] = prev;
        }
        self.prev_sib[x] = NONE;
        self.next_sib[x] = NONE;
    }

    fn attach(&mut self, x: usize, p: usize) {
        self.parent[x] = p;
        let head = self.first_child[p];
        self.next_sib[x] = head;
        self.prev_sib[x] = NONE;
        if head != NONE {
            self.prev_sib[head] = x;
        }
        self.first_child[p] = x;
    }

    /// Shifts potentials of the subtree at `root` and refreshes its depths.
    fn refresh_subtree(&mut self, root: usize, shift: f64, stack: &mut Vec<usize>) {
        stack.clear();
        stack.push(root);
        while let Some(x) = stack.pop() {
            self.pi[x] += shift;
            self.depth[x] = self.depth[self.parent[x]] + 1;
            let mut c = self.first_child[x];
            while c != NONE {
                stack.push(c);
                c = self.next_sib[c];
            }
        }
    }
}

/// Minimum-cost flow from `supply[i]` units at source `i` to `demand[j]`
/// units at sink `j` over the complete bipartite graph with arc costs
/// `cost(i, j)`. Totals must match. Returns `(i, j, units)` for every arc
/// carrying flow.
pub fn solve(supply: &[i64], demand: &[i64], cost: impl Fn(usize, usize) -> f64) -> Vec<(usize, usize, i64)> {
    let (n, m) = (supply.len(), demand.len());
    assert_eq!(supply.iter().sum::<i64>(), demand.iter().sum::<i64>(), "unbalanced problem");
    assert!(supply.iter().chain(demand).all(|&v| v >= 0), "negative supply");
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let nodes = n + m + 1;
    let root = n + m;
    let arcs = n * m;
    let mut max_cost = 0.0f64;
    for i in 0..n {
        for j in 0..m {
            max_cost = max_cost.max(cost(i, j));
        }
    }
    // artificial arcs cost more than any simple path of real arcs
    let big = (max_cost + 1.0) * nodes as f64;

    let mut t = Tree {
        parent: vec![NONE; nodes],
        arc: vec![NONE; nodes],
        up: vec![false; nodes],
        flow: vec![0; nodes],
        pi: vec![0.0; nodes],
        depth: vec![0; nodes],
        first_child: vec![NONE; nodes],
        next_sib: vec![NONE; nodes],
        prev_sib: vec![NONE; nodes],
    };
    for i in 0..n {
        t.attach(i, root);
        t.arc[i] = arcs + i;
        t.up[i] = true;
        t.flow[i] = supply[i];
        t.pi[i] = -big;
        t.depth[i] = 1;
    }
    for j in 0..m {
        let x = n + j;
        t.attach(x, root);
        t.arc[x] = arcs + n + j;
        t.up[x] = false;
        t.flow[x] = demand[j];
        t.pi[x] = big;
        t.depth[x] = 1;
    }

    let eps = 1e-12 * big.max(1.0);
    let block = ((arcs as f64).sqrt() as usize).max(16).min(arcs);
    let mut cursor = 0usize;
    let mut upath = Vec::new();
    let mut vpath = Vec::new();
    let mut stack = Vec::new();
    loop {
        // block search for the most negative reduced cost
        let mut best = -eps;
        let mut entering = NONE;
        let mut scanned = 0;
        while scanned < arcs {
            let a = cursor;
            cursor += 1;
            if cursor == arcs {
                cursor = 0;
            }
            scanned += 1;
            let (i, j) = (a / m, a % m);
            let rc = cost(i, j) + t.pi[i] - t.pi[n + j];
            if rc < best {
                best = rc;
                entering = a;
            }
            if scanned % block == 0 && entering != NONE {
                break;
            }
        }
        if entering == NONE {
            break;
        }
        let rc = best;
        let (u, v) = (entering / m, n + entering % m);

        // cycle apex
        let (mut a, mut b) = (u, v);
        while a != b {
            if t.depth[a] > t.depth[b] {
                a = t.parent[a];
            } else if t.depth[b] > t.depth[a] {
                b = t.parent[b];
            } else {
                a = t.parent[a];
                b = t.parent[b];
            }
        }
        let apex = a;
        upath.clear();
        let mut x = u;
        while x != apex {
            upath.push(x);
            x = t.parent[x];
        }
        vpath.clear();
        let mut x = v;
        while x != apex {
            vpath.push(x);
            x = t.parent[x];
        }

        // leaving arc: last blocking arc from the apex along the cycle
        // orientation apex -> u -> v -> apex (strongly feasible trees)
        let mut delta = i64::MAX;
        let mut leave = NONE;
        let mut leave_on_u = false;
        for &x in upath.iter().rev() {
            if t.up[x] && t.flow[x] <= delta {
                delta = t.flow[x];
                leave = x;
                leave_on_u = true;
            }
        }
        for &x in &vpath {
            if !t.up[x] && t.flow[x] <= delta {
                delta = t.flow[x];
                leave = x;
                leave_on_u = false;
            }
        }
        debug_assert!(leave != NONE, "every cycle has a backward arc");

        if delta > 0 {
            for &x in &upath {
                if t.up[x] {
                    t.flow[x] -= delta;
                } else {
                    t.flow[x] += delta;
                }
            }
            for &x in &vpath {
                if t.up[x] {
                    t.flow[x] += delta;
                } else {
                    t.flow[x] -= delta;
                }
            }
        }

        // re-hang the detached subtree from the entering arc
        let (path, hang, up0, shift) = if leave_on_u { (&upath, v, true, -rc) } else { (&vpath, u, false, rc) };
        let r = path.iter().position(|&x| x == leave).expect("leaving node lies on its path");
        let seg = &path[..=r];
        let old: Vec<(usize, bool, i64)> = seg.iter().map(|&x| (t.arc[x], t.up[x], t.flow[x])).collect();
        for &x in seg {
            t.detach(x);
        }
        t.attach(seg[0], hang);
        t.arc[seg[0]] = entering;
        t.up[seg[0]] = up0;
        t.flow[seg[0]] = delta;
        for i in 1..seg.len() {
            let (arc, up, flow) = old[i - 1];
            t.attach(seg[i], seg[i - 1]);
            t.arc[seg[i]] = arc;
            t.up[seg[i]] = !up;
            t.flow[seg[i]] = flow;
        }
        t.refresh_subtree(seg[0], shift, &mut stack);
    }

    let mut out = Vec::new();
    for x in 0..root {
        if t.flow[x] > 0 {
            let a = t.arc[x];
            assert!(a < arcs, "artificial arc carries flow in a balanced problem");
            out.push((a / m, a % m, t.flow[x]));
        }
    }
    out.sort_unstable();
    out
}
