//! Exact max-marginals on a tree or forest of grid edges with sparse node states.

use alloc::vec::Vec;

use super::{GridShape, NodeStates};
use crate::model::State;
use crate::{Error, Result};

/// Log-potentials of one sub-model: every node's unary plus its edges.
#[derive(Clone, Debug, PartialEq)]
pub struct TreePotentials {
    pub shape: GridShape,
    pub num_states: usize,
    /// Grid edge ids of the tree.
    pub edges: Vec<usize>,
    /// `unary[node * K + k]`.
    pub unary: Vec<f64>,
    /// Aligned with `edges`; `pairwise[i][k_u * K + k_v]` for edge `(u, v)`, `u < v`.
    pub pairwise: Vec<Vec<f64>>,
}

impl TreePotentials {
    pub fn score(&self, y: &[State]) -> Result<f64> {
        let k = self.num_states;
        if y.len() != self.shape.num_nodes() {
            return Err(Error::Shape(alloc::format!(
                "{} labels for {} nodes",
                y.len(),
                self.shape.num_nodes()
            )));
        }
        if let Some(&s) = y.iter().find(|&&s| s as usize >= k) {
            return Err(Error::Range(alloc::format!("state {s} outside 0..{k}")));
        }
        let mut total: f64 = y
            .iter()
            .enumerate()
            .map(|(v, &s)| self.unary[v * k + s as usize])
            .sum();
        for (i, &e) in self.edges.iter().enumerate() {
            let (u, v) = self.shape.edge(e);
            total += self.pairwise[i][y[u] as usize * k + y[v] as usize];
        }
        Ok(total)
    }
}

struct Rooted {
    /// BFS order, component by component.
    order: Vec<usize>,
    /// `(parent, local edge index, node is the edge's first endpoint)`.
    parent: Vec<Option<(usize, usize, bool)>>,
    children: Vec<Vec<usize>>,
    roots: Vec<usize>,
    component: Vec<usize>,
}

fn root_forest(shape: GridShape, edges: &[usize]) -> Result<Rooted> {
    let n = shape.num_nodes();
    let mut adj: Vec<Vec<(usize, usize, bool)>> = alloc::vec![Vec::new(); n];
    for (i, &e) in edges.iter().enumerate() {
        if e >= shape.num_edges() {
            return Err(Error::Range(alloc::format!("edge {e} outside the grid")));
        }
        let (u, v) = shape.edge(e);
        adj[u].push((v, i, false));
        adj[v].push((u, i, true));
    }
    let mut parent = alloc::vec![None; n];
    let mut component = alloc::vec![usize::MAX; n];
    let mut children = alloc::vec![Vec::new(); n];
    let mut order = Vec::with_capacity(n);
    let mut roots = Vec::new();
    for r in 0..n {
        if component[r] != usize::MAX {
            continue;
        }
        component[r] = roots.len();
        roots.push(r);
        let mut head = order.len();
        order.push(r);
        while head < order.len() {
            let p = order[head];
            head += 1;
            for &(c, i, c_first) in &adj[p] {
                if component[c] == usize::MAX {
                    component[c] = component[r];
                    parent[c] = Some((p, i, c_first));
                    children[p].push(c);
                    order.push(c);
                }
            }
        }
    }
    if edges.len() + roots.len() != n {
        return Err(Error::Shape("sub-model edges contain a cycle".into()));
    }
    Ok(Rooted {
        order,
        parent,
        children,
        roots,
        component,
    })
}

/// Max-marginals of every surviving node-state under one tree (or forest), with
/// the back-pointers needed to recover witnesses.
#[derive(Clone, Debug)]
pub struct TreeTable {
    states: NodeStates,
    values: Vec<Vec<f64>>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    /// Child's state index maximizing the message to its parent, per parent state index.
    up_arg: Vec<Vec<u32>>,
    /// Parent's state index maximizing the message to a child, per child state index.
    down_arg: Vec<Vec<u32>>,
    roots: Vec<usize>,
    max: f64,
    mean: f64,
    argmax: (usize, usize),
}

impl TreeTable {
    pub fn states(&self) -> &NodeStates {
        &self.states
    }

    /// Max-marginals of `node`, aligned with `states().states(node)`.
    pub fn values(&self, node: usize) -> &[f64] {
        &self.values[node]
    }

    pub fn global_max(&self) -> f64 {
        self.max
    }

    /// Mean over every surviving node-state.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `(node, state index)` attaining the global max.
    pub fn argmax(&self) -> (usize, usize) {
        self.argmax
    }

    /// The best labelling that puts `node` in its `index`-th surviving state.
    pub fn witness(&self, node: usize, index: usize) -> Vec<State> {
        let n = self.values.len();
        let mut idx = alloc::vec![u32::MAX; n];
        idx[node] = index as u32;
        let mut stack = alloc::vec![node];
        while let Some(a) = stack.pop() {
            let ia = idx[a] as usize;
            if let Some(p) = self.parent[a] {
                if idx[p] == u32::MAX {
                    idx[p] = self.down_arg[a][ia];
                    stack.push(p);
                }
            }
            for &c in &self.children[a] {
                if idx[c] == u32::MAX {
                    idx[c] = self.up_arg[c][ia];
                    stack.push(c);
                }
            }
            if stack.is_empty() {
                // Other components take their own best state.
                if let Some(&r) = self.roots.iter().find(|&&r| idx[r] == u32::MAX) {
                    let row = &self.values[r];
                    idx[r] = row
                        .iter()
                        .enumerate()
                        .fold(0, |b, (i, &m)| if m > row[b] { i } else { b })
                        as u32;
                    stack.push(r);
                }
            }
        }
        idx.iter()
            .enumerate()
            .map(|(v, &i)| self.states.states(v)[i as usize])
            .collect()
    }

    /// The MAP labelling of the tree on the surviving states.
    pub fn map(&self) -> Vec<State> {
        self.witness(self.argmax.0, self.argmax.1)
    }
}

/// Two-pass max-product on the tree restricted to the surviving states.
pub fn tree_max_marginals(pot: &TreePotentials, states: &NodeStates) -> Result<TreeTable> {
    let shape = pot.shape;
    let k = pot.num_states;
    if states.num_nodes() != shape.num_nodes() || states.num_states() != k {
        return Err(Error::Shape(
            "node states do not match the potentials".into(),
        ));
    }
    if pot.unary.len() != shape.num_nodes() * k
        || pot.pairwise.len() != pot.edges.len()
        || pot.pairwise.iter().any(|t| t.len() != k * k)
    {
        return Err(Error::Shape(
            "potential tables do not match the tree".into(),
        ));
    }
    let tree = root_forest(shape, &pot.edges)?;
    let n = shape.num_nodes();
    let unary = |v: usize, i: usize| pot.unary[v * k + states.states(v)[i] as usize];
    // Pairwise value with `a` in state index `ia`, its tree neighbour `b` in `ib`.
    let psi = |edge: usize, a_first: bool, a: usize, ia: usize, b: usize, ib: usize| {
        let (sa, sb) = (states.states(a)[ia] as usize, states.states(b)[ib] as usize);
        if a_first {
            pot.pairwise[edge][sa * k + sb]
        } else {
            pot.pairwise[edge][sb * k + sa]
        }
    };

    let mut up: Vec<Vec<f64>> = alloc::vec![Vec::new(); n];
    let mut up_arg: Vec<Vec<u32>> = alloc::vec![Vec::new(); n];
    for &v in tree.order.iter().rev() {
        let Some((p, edge, v_first)) = tree.parent[v] else {
            continue;
        };
        let inner: Vec<f64> = (0..states.states(v).len())
            .map(|iv| {
                tree.children[v]
                    .iter()
                    .fold(unary(v, iv), |acc, &c| acc + up[c][iv])
            })
            .collect();
        let np = states.states(p).len();
        let (mut msg, mut arg) = (Vec::with_capacity(np), Vec::with_capacity(np));
        for ip in 0..np {
            let mut best = (f64::NEG_INFINITY, 0u32);
            for (iv, &inn) in inner.iter().enumerate() {
                let s = inn + psi(edge, v_first, v, iv, p, ip);
                if s > best.0 {
                    best = (s, iv as u32);
                }
            }
            msg.push(best.0);
            arg.push(best.1);
        }
        up[v] = msg;
        up_arg[v] = arg;
    }

    let mut down: Vec<Vec<f64>> = alloc::vec![Vec::new(); n];
    let mut down_arg: Vec<Vec<u32>> = alloc::vec![Vec::new(); n];
    for &p in &tree.order {
        let np = states.states(p).len();
        for &v in &tree.children[p] {
            let (_, edge, v_first) = tree.parent[v].expect("child has a parent");
            let excl: Vec<f64> = (0..np)
                .map(|ip| {
                    let mut s = unary(p, ip);
                    if tree.parent[p].is_some() {
                        s += down[p][ip];
                    }
                    tree.children[p]
                        .iter()
                        .filter(|&&c| c != v)
                        .fold(s, |acc, &c| acc + up[c][ip])
                })
                .collect();
            let nv = states.states(v).len();
            let (mut msg, mut arg) = (Vec::with_capacity(nv), Vec::with_capacity(nv));
            for iv in 0..nv {
                let mut best = (f64::NEG_INFINITY, 0u32);
                for (ip, &ex) in excl.iter().enumerate() {
                    let s = ex + psi(edge, v_first, v, iv, p, ip);
                    if s > best.0 {
                        best = (s, ip as u32);
                    }
                }
                msg.push(best.0);
                arg.push(best.1);
            }
            down[v] = msg;
            down_arg[v] = arg;
        }
    }

    let belief = |v: usize, iv: usize| {
        let mut s = unary(v, iv);
        if tree.parent[v].is_some() {
            s += down[v][iv];
        }
        tree.children[v].iter().fold(s, |acc, &c| acc + up[c][iv])
    };
    // Each component adds the best score of every other component.
    let comp_max: Vec<f64> = tree
        .roots
        .iter()
        .map(|&r| {
            (0..states.states(r).len())
                .map(|i| belief(r, i))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let others = |c: usize| {
        comp_max
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != c)
            .map(|(_, m)| m)
            .sum::<f64>()
    };
    let offsets: Vec<f64> = (0..comp_max.len()).map(others).collect();
    let mut values = Vec::with_capacity(n);
    let (mut max, mut argmax, mut sum, mut count) = (f64::NEG_INFINITY, (0, 0), 0.0, 0usize);
    for v in 0..n {
        let offset = offsets[tree.component[v]];
        let row: Vec<f64> = (0..states.states(v).len())
            .map(|iv| belief(v, iv) + offset)
            .collect();
        for (iv, &m) in row.iter().enumerate() {
            if !m.is_finite() {
                return Err(Error::Range(alloc::format!(
                    "max-marginal of node {v} is not finite"
                )));
            }
            if m > max {
                max = m;
                argmax = (v, iv);
            }
            sum += m;
            count += 1;
        }
        values.push(row);
    }
    Ok(TreeTable {
        states: states.clone(),
        values,
        parent: tree.parent.iter().map(|p| p.map(|(p, _, _)| p)).collect(),
        children: tree.children,
        up_arg,
        down_arg,
        roots: tree.roots,
        max,
        mean: sum / count as f64,
        argmax,
    })
}
