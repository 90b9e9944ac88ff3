//! Static undirected communication graph with per-link Gaussian noise and
//! noise-aware shortest-path routing.
//!
//! Route cost is `J(route) = Σ (1 + λ σ²)` over the route's links, so λ = 0
//! recovers plain hop-count routing and large λ prefers quiet links at the
//! price of extra hops.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph needs at least one node")]
    Empty,
    #[error("unknown agent id {0} (valid ids are 1..={1})")]
    UnknownNode(usize, usize),
    #[error("self-loop on agent {0}")]
    SelfLoop(usize),
    #[error("duplicate edge {0}-{1}")]
    DuplicateEdge(usize, usize),
    #[error("graph is not connected: agent {0} cannot reach agent {1}")]
    Disconnected(usize, usize),
    #[error("invalid link noise (mu {mu}, sigma2 {sigma2})")]
    BadNoise { mu: f64, sigma2: f64 },
    #[error("lambda must be finite and non-negative, got {0}")]
    BadLambda(f64),
}

/// 1-based agent identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AgentId(pub usize);

impl AgentId {
    /// Builds an id from a 0-based index.
    pub fn from_index(index: usize) -> Self {
        Self(index + 1)
    }

    /// 0-based position of this agent in stacked vectors.
    pub fn index(self) -> usize {
        self.0 - 1
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Moments of the Gaussian noise on one link; identical in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkNoise {
    pub mu: f64,
    pub sigma2: f64,
}

impl LinkNoise {
    pub fn new(mu: f64, sigma2: f64) -> Result<Self, GraphError> {
        if !mu.is_finite() || !sigma2.is_finite() || sigma2 < 0.0 {
            return Err(GraphError::BadNoise { mu, sigma2 });
        }
        Ok(Self { mu, sigma2 })
    }

    pub const NONE: LinkNoise = LinkNoise { mu: 0.0, sigma2: 0.0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    /// Smaller endpoint.
    pub a: AgentId,
    /// Larger endpoint.
    pub b: AgentId,
    pub noise: LinkNoise,
}

impl Edge {
    pub fn other(&self, node: AgentId) -> AgentId {
        if node == self.a {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    nodes: usize,
    edges: Vec<Edge>,
    /// Per node (0-based): (neighbor index, edge index), sorted by neighbor.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl NetworkGraph {
    /// Builds a connected graph on agents `1..=nodes`.
    pub fn new<I>(nodes: usize, edges: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (usize, usize, LinkNoise)>,
    {
        if nodes == 0 {
            return Err(GraphError::Empty);
        }
        let mut list = Vec::new();
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); nodes];
        for (u, v, noise) in edges {
            for id in [u, v] {
                if id == 0 || id > nodes {
                    return Err(GraphError::UnknownNode(id, nodes));
                }
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            let noise = LinkNoise::new(noise.mu, noise.sigma2)?;
            let (a, b) = (u.min(v), u.max(v));
            if !seen.insert((a, b)) {
                return Err(GraphError::DuplicateEdge(a, b));
            }
            let idx = list.len();
            adjacency[a - 1].push((b - 1, idx));
            adjacency[b - 1].push((a - 1, idx));
            list.push(Edge {
                a: AgentId(a),
                b: AgentId(b),
                noise,
            });
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        let graph = Self {
            nodes,
            edges: list,
            adjacency,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    /// Graph with noise-free links.
    pub fn from_pairs<I>(nodes: usize, pairs: I) -> Result<Self, GraphError>
    where
        I: IntoIterator<Item = (usize, usize)>,
    {
        Self::new(nodes, pairs.into_iter().map(|(u, v)| (u, v, LinkNoise::NONE)))
    }

    fn check_connected(&self) -> Result<(), GraphError> {
        let mut seen = vec![false; self.nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &(j, _) in &self.adjacency[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(j) => Err(GraphError::Disconnected(1, j + 1)),
            None => Ok(()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, index: usize) -> &Edge {
        &self.edges[index]
    }

    /// Index of the edge joining `u` and `v`, if any.
    pub fn edge_between(&self, u: AgentId, v: AgentId) -> Option<usize> {
        let (ui, vi) = (u.0.checked_sub(1)?, v.0.checked_sub(1)?);
        self.adjacency
            .get(ui)?
            .iter()
            .find(|(n, _)| *n == vi)
            .map(|&(_, e)| e)
    }

    /// Same topology with every link's noise replaced by `f(edge)`.
    pub fn map_noise<F>(&self, mut f: F) -> Self
    where
        F: FnMut(&Edge) -> LinkNoise,
    {
        let mut out = self.clone();
        for e in &mut out.edges {
            e.noise = f(e);
        }
        out
    }

    fn check_node(&self, node: AgentId) -> Result<usize, GraphError> {
        if node.0 == 0 || node.0 > self.nodes {
            Err(GraphError::UnknownNode(node.0, self.nodes))
        } else {
            Ok(node.index())
        }
    }

    /// Agents sharing a link with `node`.
    pub fn neighbors(&self, node: AgentId) -> Result<BTreeSet<AgentId>, GraphError> {
        let i = self.check_node(node)?;
        Ok(self.adjacency[i]
            .iter()
            .map(|&(j, _)| AgentId::from_index(j))
            .collect())
    }
}

/// Sum of `(1 + λσ²)` over `links`, accumulated in the given order.
fn accumulate_cost<'a, I>(links: I, lambda: f64) -> f64
where
    I: IntoIterator<Item = &'a LinkNoise>,
{
    links
        .into_iter()
        .fold(0.0, |acc, n| acc + (1.0 + lambda * n.sigma2))
}

/// Component-wise sums of link means and variances.
pub fn aggregate_route_noise(links: &[LinkNoise]) -> (f64, f64) {
    links
        .iter()
        .fold((0.0, 0.0), |(m, v), n| (m + n.mu, v + n.sigma2))
}

/// A simple path carrying a sender's data to a receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub receiver: AgentId,
    pub sender: AgentId,
    /// Node sequence from receiver to sender (inclusive).
    pub nodes: Vec<AgentId>,
    /// Edge indices in the same order as `nodes`.
    pub edges: Vec<usize>,
    /// Link noise of each edge, same order as `edges`.
    pub links: Vec<LinkNoise>,
    pub mu_total: f64,
    pub sigma2_total: f64,
}

impl Route {
    /// The zero-hop route from an agent to itself.
    pub fn to_self(agent: AgentId) -> Self {
        Self {
            receiver: agent,
            sender: agent,
            nodes: vec![agent],
            edges: Vec::new(),
            links: Vec::new(),
            mu_total: 0.0,
            sigma2_total: 0.0,
        }
    }

    fn from_nodes(graph: &NetworkGraph, nodes: Vec<AgentId>) -> Self {
        let edges: Vec<usize> = nodes
            .windows(2)
            .map(|w| {
                graph
                    .edge_between(w[0], w[1])
                    .expect("route nodes must be adjacent")
            })
            .collect();
        let links: Vec<LinkNoise> = edges.iter().map(|&e| graph.edge(e).noise).collect();
        // Summed from the lower-id endpoint so both directions agree exactly.
        let (mu_total, sigma2_total) = if nodes[0] <= nodes[nodes.len() - 1] {
            aggregate_route_noise(&links)
        } else {
            let rev: Vec<LinkNoise> = links.iter().rev().copied().collect();
            aggregate_route_noise(&rev)
        };
        Self {
            receiver: nodes[0],
            sender: *nodes.last().expect("non-empty route"),
            nodes,
            edges,
            links,
            mu_total,
            sigma2_total,
        }
    }

    /// Number of links `R`.
    pub fn hops(&self) -> usize {
        self.edges.len()
    }

    /// Relative timing offset `d = R − 1` (zero for direct links and self).
    pub fn delay(&self) -> usize {
        self.hops().saturating_sub(1)
    }

    /// Route cost `J = Σ (1 + λσ²)`.
    ///
    /// Links are summed starting from the lower-id endpoint so that a route
    /// and its reverse always evaluate to the identical float.
    pub fn cost(&self, lambda: f64) -> f64 {
        if self.receiver <= self.sender {
            accumulate_cost(self.links.iter(), lambda)
        } else {
            accumulate_cost(self.links.iter().rev(), lambda)
        }
    }

    /// Node sequence oriented from the lower-id endpoint.
    pub fn canonical_nodes(&self) -> Vec<AgentId> {
        let mut nodes = self.nodes.clone();
        if self.receiver > self.sender {
            nodes.reverse();
        }
        nodes
    }

    pub fn reversed(&self) -> Self {
        let mut r = self.clone();
        r.receiver = self.sender;
        r.sender = self.receiver;
        r.nodes.reverse();
        r.edges.reverse();
        r.links.reverse();
        r
    }
}

/// `J(route)` for a given λ; see [`Route::cost`].
pub fn route_cost(route: &Route, lambda: f64) -> f64 {
    route.cost(lambda)
}

/// λ-optimal routes between every ordered pair of agents.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTable {
    lambda: f64,
    /// `routes[receiver][sender]`, both 0-based.
    routes: Vec<Vec<Route>>,
}

impl RoutingTable {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn agents(&self) -> usize {
        self.routes.len()
    }

    pub fn route(&self, receiver: AgentId, sender: AgentId) -> &Route {
        &self.routes[receiver.index()][sender.index()]
    }

    /// Routes into `receiver`, indexed by sender.
    pub fn routes_to(&self, receiver: AgentId) -> &[Route] {
        &self.routes[receiver.index()]
    }

    /// Per-sender delays `d_{ℓ,m}` seen by `receiver`.
    pub fn delays(&self, receiver: AgentId) -> Vec<usize> {
        self.routes_to(receiver).iter().map(Route::delay).collect()
    }

    /// `D_ℓ = max_m d_{ℓ,m}`.
    pub fn max_delay(&self, receiver: AgentId) -> usize {
        self.delays(receiver).into_iter().max().unwrap_or(0)
    }

    pub fn cost(&self, receiver: AgentId, sender: AgentId) -> f64 {
        self.route(receiver, sender).cost(self.lambda)
    }
}

/// Dijkstra priority: cost, then hop count, then node sequence.
#[derive(Debug, Clone, PartialEq)]
struct Label {
    cost: f64,
    path: Vec<usize>,
}

impl Label {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.path.len().cmp(&other.path.len()))
            .then_with(|| self.path.cmp(&other.path))
    }
}

impl Eq for Label {}

impl PartialOrd for Label {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Label {
    // Reversed so `BinaryHeap` pops the smallest label.
    fn cmp(&self, other: &Self) -> Ordering {
        other.cmp_key(self)
    }
}

/// Single-source noise-aware Dijkstra; returns the best path (0-based node
/// sequence starting at `source`) to every node.
fn shortest_paths(graph: &NetworkGraph, source: usize, lambda: f64) -> Vec<Vec<usize>> {
    let n = graph.node_count();
    let mut best: Vec<Option<Label>> = vec![None; n];
    let mut settled = vec![false; n];
    let mut queue = BinaryHeap::new();
    let start = Label {
        cost: 0.0,
        path: vec![source],
    };
    best[source] = Some(start.clone());
    queue.push(start);
    while let Some(label) = queue.pop() {
        let i = *label.path.last().expect("non-empty path");
        if settled[i] {
            continue;
        }
        settled[i] = true;
        for &(j, e) in &graph.adjacency[i] {
            if settled[j] {
                continue;
            }
            let mut path = label.path.clone();
            path.push(j);
            let candidate = Label {
                cost: label.cost + (1.0 + lambda * graph.edges[e].noise.sigma2),
                path,
            };
            let better = best[j]
                .as_ref()
                .map_or(true, |cur| candidate.cmp_key(cur) == Ordering::Less);
            if better {
                best[j] = Some(candidate.clone());
                queue.push(candidate);
            }
        }
    }
    best.into_iter()
        .map(|l| l.expect("connected graph").path)
        .collect()
}

/// Computes the λ-optimal route for every ordered agent pair.
///
/// Ties are broken by fewer hops, then by the lexicographically smallest
/// node sequence read from the lower-id endpoint. Both directions of a pair
/// therefore share one path.
pub fn compute_routes(graph: &NetworkGraph, lambda: f64) -> Result<RoutingTable, GraphError> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(GraphError::BadLambda(lambda));
    }
    graph.check_connected()?;
    let n = graph.node_count();
    let trees: Vec<Vec<Vec<usize>>> = (0..n).map(|s| shortest_paths(graph, s, lambda)).collect();
    let mut routes = Vec::with_capacity(n);
    for receiver in 0..n {
        let mut row = Vec::with_capacity(n);
        for sender in 0..n {
            let route = if receiver == sender {
                Route::to_self(AgentId::from_index(receiver))
            } else {
                let lo = receiver.min(sender);
                let hi = receiver.max(sender);
                let mut nodes: Vec<AgentId> = trees[lo][hi]
                    .iter()
                    .map(|&i| AgentId::from_index(i))
                    .collect();
                if receiver != lo {
                    nodes.reverse();
                }
                Route::from_nodes(graph, nodes)
            };
            row.push(route);
        }
        routes.push(row);
    }
    Ok(RoutingTable { lambda, routes })
}

/// Enumerates every simple path between two agents (receiver first).
/// Exponential; intended for small graphs and test oracles.
pub fn all_simple_routes(graph: &NetworkGraph, receiver: AgentId, sender: AgentId) -> Vec<Route> {
    fn walk(
        graph: &NetworkGraph,
        target: usize,
        path: &mut Vec<usize>,
        on_path: &mut Vec<bool>,
        out: &mut Vec<Vec<usize>>,
    ) {
        let i = *path.last().unwrap();
        if i == target {
            out.push(path.clone());
            return;
        }
        for &(j, _) in &graph.adjacency[i] {
            if !on_path[j] {
                on_path[j] = true;
                path.push(j);
                walk(graph, target, path, on_path, out);
                path.pop();
                on_path[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    let mut on_path = vec![false; graph.node_count()];
    on_path[receiver.index()] = true;
    walk(
        graph,
        sender.index(),
        &mut vec![receiver.index()],
        &mut on_path,
        &mut out,
    );
    out.into_iter()
        .map(|p| {
            if p.len() == 1 {
                Route::to_self(receiver)
            } else {
                Route::from_nodes(graph, p.into_iter().map(AgentId::from_index).collect())
            }
        })
        .collect()
}

/// The six-agent example network with four candidate routes between
/// agents 1 and 4 whose costs are `1 + 0.05λ`, `2 + 0.03λ`, `3 + 0.05λ`
/// and `3 + 0.022λ`.
pub fn route_selection_fixture() -> NetworkGraph {
    let link = |mu, sigma2| LinkNoise { mu, sigma2 };
    NetworkGraph::new(
        6,
        [
            (1, 4, link(0.0, 0.05)),
            (1, 2, link(0.01, 0.02)),
            (2, 4, link(-0.02, 0.01)),
            (2, 3, link(0.0, 0.02)),
            (3, 4, link(0.0, 0.01)),
            (1, 6, link(0.0, 0.01)),
            (6, 5, link(0.0, 0.006)),
            (5, 4, link(0.0, 0.006)),
        ],
    )
    .expect("fixture is connected")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(v: &[usize]) -> Vec<AgentId> {
        v.iter().map(|&i| AgentId(i)).collect()
    }

    #[test]
    fn rejects_bad_graphs() {
        assert_eq!(NetworkGraph::from_pairs(3, [(1, 1)]), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            NetworkGraph::from_pairs(2, [(1, 2), (2, 1)]),
            Err(GraphError::DuplicateEdge(1, 2))
        );
        assert!(matches!(
            NetworkGraph::from_pairs(3, [(1, 2)]),
            Err(GraphError::Disconnected(_, 3))
        ));
        assert_eq!(
            NetworkGraph::from_pairs(2, [(1, 3)]),
            Err(GraphError::UnknownNode(3, 2))
        );
        assert!(matches!(
            NetworkGraph::new(2, [(1, 2, LinkNoise { mu: 0.0, sigma2: -1.0 })]),
            Err(GraphError::BadNoise { .. })
        ));
    }

    #[test]
    fn neighbors_examples() {
        let g = NetworkGraph::from_pairs(6, [(1, 2), (2, 3), (2, 6), (3, 5), (5, 4), (1, 6)]).unwrap();
        assert_eq!(g.neighbors(AgentId(2)).unwrap(), ids(&[1, 3, 6]).into_iter().collect());
        let line = NetworkGraph::from_pairs(4, [(1, 2), (2, 3), (3, 4)]).unwrap();
        assert_eq!(line.neighbors(AgentId(4)).unwrap().len(), 1);
        let complete =
            NetworkGraph::from_pairs(5, (1..=5).flat_map(|i| (i + 1..=5).map(move |j| (i, j)))).unwrap();
        assert_eq!(complete.neighbors(AgentId(3)).unwrap().len(), 4);
        assert!(complete.neighbors(AgentId(9)).is_err());
    }

    #[test]
    fn route_cost_examples() {
        let g = route_selection_fixture();
        let t = compute_routes(&g, 1.0).unwrap();
        let r14 = t.route(AgentId(1), AgentId(4));
        assert_eq!(r14.nodes, ids(&[1, 4]));
        assert_eq!(route_cost(r14, 1.0), 1.05);
        assert_eq!(route_cost(r14, 0.0), 1.0);

        let r4 = Route::from_nodes(&g, ids(&[1, 6, 5, 4]));
        assert!((r4.sigma2_total - 0.022).abs() < 1e-15);
        assert!((route_cost(&r4, 500.0) - 14.0).abs() < 1e-12);
        assert_eq!(route_cost(&r4, 0.0), 3.0);
    }

    #[test]
    fn fixture_route_switches_with_lambda() {
        let g = route_selection_fixture();
        let expect = [(1.0, vec![1, 4], 1.05), (100.0, vec![1, 2, 4], 5.0), (500.0, vec![1, 6, 5, 4], 14.0)];
        for (lambda, nodes, cost) in expect {
            let t = compute_routes(&g, lambda).unwrap();
            let r = t.route(AgentId(1), AgentId(4));
            assert_eq!(r.nodes, ids(&nodes), "lambda {lambda}");
            assert!((t.cost(AgentId(1), AgentId(4)) - cost).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_noise_examples() {
        let g = route_selection_fixture();
        let r = Route::from_nodes(&g, ids(&[1, 2, 4]));
        let (mu, s2) = aggregate_route_noise(&r.links);
        assert!((mu + 0.01).abs() < 1e-15);
        assert!((s2 - 0.03).abs() < 1e-15);
        assert_eq!(aggregate_route_noise(&[]), (0.0, 0.0));
    }

    #[test]
    fn two_node_graph() {
        let g = NetworkGraph::from_pairs(2, [(1, 2)]).unwrap();
        for lambda in [0.0, 1.0, 1e3] {
            let t = compute_routes(&g, lambda).unwrap();
            assert_eq!(t.route(AgentId(1), AgentId(2)).nodes, ids(&[1, 2]));
            assert_eq!(t.route(AgentId(2), AgentId(1)).nodes, ids(&[2, 1]));
            assert_eq!(t.route(AgentId(1), AgentId(1)).hops(), 0);
        }
    }

    #[test]
    fn self_routes_are_empty() {
        let t = compute_routes(&route_selection_fixture(), 100.0).unwrap();
        for i in 1..=6 {
            let r = t.route(AgentId(i), AgentId(i));
            assert_eq!((r.hops(), r.delay(), r.mu_total, r.sigma2_total), (0, 0, 0.0, 0.0));
        }
    }

    #[test]
    fn rejects_negative_lambda() {
        assert!(compute_routes(&route_selection_fixture(), -1.0).is_err());
    }

    fn random_connected(rng: &mut ChaCha8Rng) -> NetworkGraph {
        let n = rng.gen_range(2..=7);
        let mut edges = Vec::new();
        let mut set = BTreeSet::new();
        // Random spanning tree, then extra edges.
        for v in 2..=n {
            let u = rng.gen_range(1..v);
            set.insert((u, v));
        }
        for _ in 0..rng.gen_range(0..=n * 2) {
            let u = rng.gen_range(1..=n);
            let v = rng.gen_range(1..=n);
            if u != v {
                set.insert((u.min(v), u.max(v)));
            }
        }
        for (u, v) in set {
            edges.push((u, v, LinkNoise { mu: rng.gen_range(-0.1..0.1), sigma2: rng.gen_range(0.0..0.1) }));
        }
        NetworkGraph::new(n, edges).unwrap()
    }

    #[test]
    fn routes_match_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let g = random_connected(&mut rng);
            for lambda in [0.0, 1.0, 100.0] {
                let t = compute_routes(&g, lambda).unwrap();
                for r in 1..=g.node_count() {
                    for s in 1..=g.node_count() {
                        let best = all_simple_routes(&g, AgentId(r), AgentId(s))
                            .iter()
                            .map(|p| p.cost(lambda))
                            .fold(f64::INFINITY, f64::min);
                        let route = t.route(AgentId(r), AgentId(s));
                        assert_eq!(route.cost(lambda), best);
                        assert_eq!(route.delay(), route.hops().saturating_sub(1));
                        let (mu, s2) = aggregate_route_noise(&route.links);
                        assert!((route.mu_total - mu).abs() < 1e-14);
                        assert!((route.sigma2_total - s2).abs() < 1e-14);
                        let mut nodes = route.nodes.clone();
                        nodes.sort();
                        nodes.dedup();
                        assert_eq!(nodes.len(), route.nodes.len(), "route must be simple");
                    }
                }
            }
        }
    }

    #[test]
    fn routes_are_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let g = random_connected(&mut rng);
            let t = compute_routes(&g, 10.0).unwrap();
            for r in 1..=g.node_count() {
                for s in 1..=g.node_count() {
                    let fwd = t.route(AgentId(r), AgentId(s));
                    let back = t.route(AgentId(s), AgentId(r));
                    assert_eq!(&back.reversed(), fwd);
                    assert_eq!(fwd.cost(10.0), back.cost(10.0));
                }
            }
        }
    }

    #[test]
    fn ties_prefer_fewer_hops_then_lexicographic() {
        // λ = 0 on a 4-cycle: both 2-hop paths from 1 to 3 tie.
        let g = NetworkGraph::from_pairs(4, [(1, 2), (2, 3), (3, 4), (4, 1)]).unwrap();
        let t = compute_routes(&g, 0.0).unwrap();
        assert_eq!(t.route(AgentId(1), AgentId(3)).nodes, ids(&[1, 2, 3]));
        assert_eq!(t.route(AgentId(3), AgentId(1)).nodes, ids(&[3, 2, 1]));
        assert_eq!(t.route(AgentId(1), AgentId(3)).canonical_nodes(), ids(&[1, 2, 3]));
    }

    #[test]
    fn hop_count_monotone_in_lambda_on_fixture() {
        let g = route_selection_fixture();
        let mut last = 0;
        for lambda in [0.0, 1.0, 10.0, 50.0, 100.0, 200.0, 300.0, 500.0, 1000.0] {
            let hops = compute_routes(&g, lambda).unwrap().route(AgentId(1), AgentId(4)).hops();
            assert!(hops >= last);
            last = hops;
        }
    }
}
