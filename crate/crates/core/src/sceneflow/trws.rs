//! Sequential tree-reweighted message passing on a pairwise CRF.
//!
//! Nodes are processed in index order. The lower bound is evaluated on a
//! decomposition into monotonic chains: every edge belongs to one chain and
//! node `s` lies on `n_s = max(n_in, n_out, 1)` chains, each receiving
//! `θ̄_s / n_s` of the reparametrized unary.

#[derive(Debug, Clone, PartialEq)]
pub struct CrfEdge {
    pub a: usize,
    pub b: usize,
    /// Row-major `|L_a| × |L_b|` costs.
    pub cost: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairwiseCrf {
    pub unary: Vec<Vec<f64>>,
    pub edges: Vec<CrfEdge>,
}

impl PairwiseCrf {
    pub fn new(unary: Vec<Vec<f64>>) -> Self {
        Self { unary, edges: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.unary.len()
    }

    /// Adds an edge; stored with `a < b`.
    pub fn add_edge(&mut self, a: usize, b: usize, cost: Vec<f64>) {
        assert!(a != b, "self edge");
        let (la, lb) = (self.unary[a].len(), self.unary[b].len());
        assert_eq!(cost.len(), la * lb);
        if a < b {
            self.edges.push(CrfEdge { a, b, cost });
        } else {
            let mut t = vec![0.0; la * lb];
            for i in 0..la {
                for j in 0..lb {
                    t[j * la + i] = cost[i * lb + j];
                }
            }
            self.edges.push(CrfEdge { a: b, b: a, cost: t });
        }
    }

    pub fn energy(&self, labels: &[usize]) -> f64 {
        let mut e: f64 = self.unary.iter().zip(labels).map(|(u, &l)| u[l]).sum();
        for ed in &self.edges {
            e += ed.cost[labels[ed.a] * self.unary[ed.b].len() + labels[ed.b]];
        }
        e
    }

    pub fn is_forest(&self) -> bool {
        let n = self.node_count();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let (ra, rb) = (find(&mut parent, e.a), find(&mut parent, e.b));
            if ra == rb {
                return false;
            }
            parent[ra] = rb;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrwsOptions {
    pub max_sweeps: usize,
    /// Stop once a sweep raises the lower bound by less than this.
    pub tolerance: f64,
}

impl Default for TrwsOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 50,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrwsResult {
    pub labels: Vec<usize>,
    pub energy: f64,
    /// Lower bound after each sweep.
    pub lower_bounds: Vec<f64>,
    pub sweeps: usize,
}

struct Incidence {
    edge: usize,
    other: usize,
    /// Whether this node is `a` of the edge.
    is_a: bool,
}

struct Solver<'a> {
    crf: &'a PairwiseCrf,
    inc: Vec<Vec<Incidence>>,
    gamma: Vec<f64>,
    /// `msg_ab[e]`: message a → b over labels of b; `msg_ba[e]` over labels of a.
    msg_ab: Vec<Vec<f64>>,
    msg_ba: Vec<Vec<f64>>,
    chains: Vec<Vec<usize>>,
}

impl<'a> Solver<'a> {
    fn new(crf: &'a PairwiseCrf) -> Self {
        let n = crf.node_count();
        let mut inc: Vec<Vec<Incidence>> = (0..n).map(|_| Vec::new()).collect();
        for (e, ed) in crf.edges.iter().enumerate() {
            inc[ed.a].push(Incidence {
                edge: e,
                other: ed.b,
                is_a: true,
            });
            inc[ed.b].push(Incidence {
                edge: e,
                other: ed.a,
                is_a: false,
            });
        }
        for list in inc.iter_mut() {
            list.sort_by_key(|x| (x.other, x.edge));
        }
        let gamma = (0..n)
            .map(|s| {
                let n_in = inc[s].iter().filter(|x| x.other < s).count();
                let n_out = inc[s].len() - n_in;
                1.0 / n_in.max(n_out).max(1) as f64
            })
            .collect();
        let msg_ab = crf.edges.iter().map(|e| vec![0.0; crf.unary[e.b].len()]).collect();
        let msg_ba = crf.edges.iter().map(|e| vec![0.0; crf.unary[e.a].len()]).collect();
        let chains = build_chains(n, &inc);
        Self {
            crf,
            inc,
            gamma,
            msg_ab,
            msg_ba,
            chains,
        }
    }

    /// Message arriving at node `s` over the edge of incidence `x`.
    fn incoming<'s>(&'s self, x: &Incidence) -> &'s [f64] {
        if x.is_a {
            &self.msg_ba[x.edge]
        } else {
            &self.msg_ab[x.edge]
        }
    }

    fn reparam_unary(&self, s: usize) -> Vec<f64> {
        let mut th = self.crf.unary[s].clone();
        for x in &self.inc[s] {
            for (t, m) in th.iter_mut().zip(self.incoming(x)) {
                *t += m;
            }
        }
        th
    }

    /// Updates every message from `s` toward neighbors later (forward) or
    /// earlier (backward) in the order.
    fn pass_node(&mut self, s: usize, forward: bool) {
        let th = self.reparam_unary(s);
        let g = self.gamma[s];
        let ls = th.len();
        for k in 0..self.inc[s].len() {
            let x = &self.inc[s][k];
            if (x.other > s) != forward {
                continue;
            }
            let (e, is_a) = (x.edge, x.is_a);
            let ed = &self.crf.edges[e];
            let back = if is_a { &self.msg_ba[e] } else { &self.msg_ab[e] };
            let base: Vec<f64> = (0..ls).map(|i| g * th[i] - back[i]).collect();
            let lt = self.crf.unary[x.other].len();
            let lb = self.crf.unary[ed.b].len();
            let mut out = vec![f64::INFINITY; lt];
            for (i, &bi) in base.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    let c = if is_a { ed.cost[i * lb + j] } else { ed.cost[j * lb + i] };
                    let v = bi + c;
                    if v < *o {
                        *o = v;
                    }
                }
            }
            let m = out.iter().cloned().fold(f64::INFINITY, f64::min);
            for o in out.iter_mut() {
                *o -= m;
            }
            if is_a {
                self.msg_ab[e] = out;
            } else {
                self.msg_ba[e] = out;
            }
        }
    }

    fn n_chains(&self, s: usize) -> f64 {
        1.0 / self.gamma[s]
    }

    /// Reparametrized pairwise cost `θ_st(i,j) − m_{s→t}(j) − m_{t→s}(i)` in `a,b` order.
    fn reparam_edge(&self, e: usize, i: usize, j: usize) -> f64 {
        let ed = &self.crf.edges[e];
        let lb = self.crf.unary[ed.b].len();
        ed.cost[i * lb + j] - self.msg_ab[e][j] - self.msg_ba[e][i]
    }

    fn lower_bound(&self) -> f64 {
        let unary: Vec<Vec<f64>> = (0..self.crf.node_count())
            .map(|s| {
                let n = self.n_chains(s);
                self.reparam_unary(s).into_iter().map(|v| v / n).collect()
            })
            .collect();
        let mut bound = 0.0;
        for chain in &self.chains {
            // chain: alternating node list; edges looked up between consecutive nodes
            let mut cur = unary[chain[0]].clone();
            for w in chain.windows(2) {
                let (s, t) = (w[0], w[1]);
                let x = self.inc[s].iter().find(|x| x.other == t).expect("chain edge");
                let lt = unary[t].len();
                let mut next = vec![f64::INFINITY; lt];
                for (i, &ci) in cur.iter().enumerate() {
                    for (j, nj) in next.iter_mut().enumerate() {
                        let c = if x.is_a {
                            self.reparam_edge(x.edge, i, j)
                        } else {
                            self.reparam_edge(x.edge, j, i)
                        };
                        let v = ci + c;
                        if v < *nj {
                            *nj = v;
                        }
                    }
                }
                for (nj, u) in next.iter_mut().zip(&unary[t]) {
                    *nj += u;
                }
                cur = next;
            }
            bound += cur.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        bound
    }

    /// Sequential conditioning in node order.
    fn extract_labels(&self) -> Vec<usize> {
        let n = self.crf.node_count();
        let mut labels = vec![0usize; n];
        for s in 0..n {
            let mut cost = self.crf.unary[s].clone();
            for x in &self.inc[s] {
                let ed = &self.crf.edges[x.edge];
                let lb = self.crf.unary[ed.b].len();
                if x.other < s {
                    let lt = labels[x.other];
                    for (i, c) in cost.iter_mut().enumerate() {
                        *c += if x.is_a { ed.cost[i * lb + lt] } else { ed.cost[lt * lb + i] };
                    }
                } else {
                    for (c, m) in cost.iter_mut().zip(self.incoming(x)) {
                        *c += m;
                    }
                }
            }
            labels[s] = argmin(&cost);
        }
        labels
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Monotonic chains covering every edge once: each node extends as many
/// incoming chains as it has outgoing edges, starts new chains for the rest,
/// and isolated nodes form single-node chains.
fn build_chains(n: usize, inc: &[Vec<Incidence>]) -> Vec<Vec<usize>> {
    let mut chains: Vec<Vec<usize>> = Vec::new();
    // open chains ending at each node, waiting to be extended
    let mut ending: Vec<Vec<usize>> = vec![Vec::new(); n];
    for s in 0..n {
        let outs: Vec<usize> = inc[s].iter().filter(|x| x.other > s).map(|x| x.other).collect();
        let mut waiting = std::mem::take(&mut ending[s]);
        if waiting.is_empty() && outs.is_empty() {
            chains.push(vec![s]);
            continue;
        }
        waiting.reverse();
        for t in outs {
            let c = match waiting.pop() {
                Some(c) => c,
                None => {
                    chains.push(vec![s]);
                    chains.len() - 1
                }
            };
            chains[c].push(t);
            ending[t].push(c);
        }
    }
    chains
}

/// Runs TRW-S and returns the best labeling seen, never worse than `init`.
pub fn trws_optimize(crf: &PairwiseCrf, init: Option<&[usize]>, opts: &TrwsOptions) -> TrwsResult {
    let n = crf.node_count();
    let mut best_labels: Vec<usize> = match init {
        Some(l) => l.to_vec(),
        None => crf.unary.iter().map(|u| argmin(u)).collect(),
    };
    let mut best_energy = crf.energy(&best_labels);
    if n == 0 {
        return TrwsResult {
            labels: best_labels,
            energy: best_energy,
            lower_bounds: Vec::new(),
            sweeps: 0,
        };
    }
    let mut solver = Solver::new(crf);
    let mut bounds = Vec::new();
    let mut sweeps = 0;
    for _ in 0..opts.max_sweeps {
        for s in 0..n {
            solver.pass_node(s, true);
        }
        for s in (0..n).rev() {
            solver.pass_node(s, false);
        }
        sweeps += 1;
        let labels = solver.extract_labels();
        let e = crf.energy(&labels);
        if e < best_energy {
            best_energy = e;
            best_labels = labels;
        }
        let lb = solver.lower_bound();
        let improvement = bounds.last().map(|&prev: &f64| lb - prev);
        bounds.push(lb);
        let gap = best_energy - lb;
        if gap <= 1e-9 * best_energy.abs().max(1.0) {
            break;
        }
        if let Some(d) = improvement {
            if d < opts.tolerance {
                break;
            }
        }
    }
    TrwsResult {
        labels: best_labels,
        energy: best_energy,
        lower_bounds: bounds,
        sweeps,
    }
}
