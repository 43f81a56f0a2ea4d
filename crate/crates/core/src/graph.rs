//! Undirected mesh topology, neighbourhood extraction and k-hop expansion.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("topology needs at least one node")]
    NoNodes,
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) references a node >= {2}")]
    OutOfBounds(usize, usize, usize),
    #[error("hop count must be at least 1")]
    ZeroHops,
}

/// Undirected simple graph with edges kept as sorted `(i, j)` pairs, `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl Topology {
    /// Builds a topology from arbitrary pairs. Orientation is normalized and
    /// duplicates collapse; self-loops and out-of-range indices are errors.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if num_nodes == 0 {
            return Err(GraphError::NoNodes);
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(GraphError::OutOfBounds(a, b, num_nodes));
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            num_nodes,
            edges: set.into_iter().collect(),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical edge list, sorted, each pair with `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_nodes];
        for &(a, b) in &self.edges {
            lists[a].push(b);
            lists[b].push(a);
        }
        for l in &mut lists {
            l.sort_unstable();
        }
        lists
    }

    /// Connects every pair of nodes within `k` hops of each other.
    pub fn khop_expand(&self, k: usize) -> Result<Topology, GraphError> {
        if k == 0 {
            return Err(GraphError::ZeroHops);
        }
        let adj = self.adjacency_lists();
        let mut edges = Vec::new();
        let mut depth = vec![usize::MAX; self.num_nodes];
        let mut queue = VecDeque::new();
        let mut touched = Vec::new();
        for src in 0..self.num_nodes {
            depth[src] = 0;
            touched.push(src);
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                if depth[u] == k {
                    continue;
                }
                for &v in &adj[u] {
                    if depth[v] == usize::MAX {
                        depth[v] = depth[u] + 1;
                        touched.push(v);
                        queue.push_back(v);
                        if v > src {
                            edges.push((src, v));
                        }
                    }
                }
            }
            for t in touched.drain(..) {
                depth[t] = usize::MAX;
            }
        }
        edges.sort_unstable();
        Ok(Topology {
            num_nodes: self.num_nodes,
            edges,
        })
    }

    pub fn neighborhoods(&self) -> Neighborhoods {
        let lists = self.adjacency_lists();
        let mut directed = Vec::with_capacity(2 * self.edges.len());
        for (i, l) in lists.iter().enumerate() {
            directed.extend(l.iter().map(|&j| (i, j)));
        }
        Neighborhoods { lists, directed }
    }

    /// Relabels nodes: old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Topology {
        assert_eq!(perm.len(), self.num_nodes, "permutation length");
        Topology::new(
            self.num_nodes,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
        )
        .expect("a permutation keeps the topology valid")
    }
}

/// Per-node neighbour lists plus both orientations of every edge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighborhoods {
    /// `lists[i]` holds the neighbours of `i`, ascending.
    pub lists: Vec<Vec<usize>>,
    /// Every `(i, j)` and `(j, i)`, ordered by `(source, target)`.
    pub directed: Vec<(usize, usize)>,
}

impl Neighborhoods {
    pub fn sources(&self) -> Vec<usize> {
        self.directed.iter().map(|e| e.0).collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        self.directed.iter().map(|e| e.1).collect()
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }
}
