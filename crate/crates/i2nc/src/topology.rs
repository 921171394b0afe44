//! The wireless mesh as a hypergraph: nodes, directed lossy links, unicast flows
//! on fixed paths, broadcast hyperarcs, per-hyperarc inter-session code sets, and
//! conflict cliques. Includes builders for the canonical relay topologies.

use crate::coding::FlowId;
use crate::loss::LossMatrix;
use std::collections::{BTreeMap, BTreeSet};

pub type NodeId = usize;
pub type Link = (NodeId, NodeId);

#[derive(Debug, thiserror::Error)]
pub enum TopologyError {
    #[error("unknown topology kind `{0}`")]
    UnknownKind(String),
    #[error("wheel topology needs at least 2 flows, got {0}")]
    WheelTooSmall(usize),
    #[error("flow {0}: path must start at the source, end at the destination, and not repeat nodes")]
    BadPath(FlowId),
    #[error("flow {0}: generation size must be >= 1")]
    BadGenerationSize(FlowId),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
}

/// Nodes and directed links with per-link capacities (packets per transmission).
#[derive(Clone, Debug, Default)]
pub struct Topology {
    names: Vec<String>,
    links: BTreeMap<Link, f64>,
}

impl Topology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, name: &str) -> NodeId {
        if let Some(id) = self.node_id(name) {
            return id;
        }
        self.names.push(name.to_string());
        self.names.len() - 1
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.names[id]
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }

    pub fn add_link(&mut self, from: NodeId, to: NodeId, capacity: f64) {
        self.links.insert((from, to), capacity);
    }

    pub fn has_link(&self, from: NodeId, to: NodeId) -> bool {
        self.links.contains_key(&(from, to))
    }

    pub fn capacity(&self, from: NodeId, to: NodeId) -> Option<f64> {
        self.links.get(&(from, to)).copied()
    }

    pub fn links(&self) -> impl Iterator<Item = (Link, f64)> + '_ {
        self.links.iter().map(|(&l, &c)| (l, c))
    }

    /// Two nodes are in radio range of each other if a link exists either way.
    pub fn in_range(&self, a: NodeId, b: NodeId) -> bool {
        self.has_link(a, b) || self.has_link(b, a)
    }

    pub fn scale_capacities(&mut self, factor: f64) {
        for c in self.links.values_mut() {
            *c *= factor;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Utility {
    Log,
}

/// A unicast flow pinned to one path.
#[derive(Clone, Debug)]
pub struct Flow {
    pub id: FlowId,
    pub source: NodeId,
    pub destination: NodeId,
    pub path: Vec<NodeId>,
    pub generation_size: u16,
    pub utility: Utility,
}

impl Flow {
    pub fn validate(&self) -> Result<(), TopologyError> {
        let ok = self.path.first() == Some(&self.source)
            && self.path.last() == Some(&self.destination)
            && self.path.iter().collect::<BTreeSet<_>>().len() == self.path.len();
        if !ok {
            return Err(TopologyError::BadPath(self.id));
        }
        if self.generation_size < 1 {
            return Err(TopologyError::BadGenerationSize(self.id));
        }
        Ok(())
    }

    /// The hop after `node` on this flow's path, if `node` relays the flow.
    pub fn next_hop(&self, node: NodeId) -> Option<NodeId> {
        self.path.iter().position(|&n| n == node).and_then(|i| self.path.get(i + 1)).copied()
    }

    /// The hop before `node` on this flow's path.
    pub fn prev_hop(&self, node: NodeId) -> Option<NodeId> {
        let i = self.path.iter().position(|&n| n == node)?;
        i.checked_sub(1).map(|j| self.path[j])
    }

    /// Whether `node` forwards this flow (is on the path and not the destination).
    pub fn crosses(&self, node: NodeId) -> bool {
        node != self.destination && self.path.contains(&node)
    }
}

/// A broadcast arc from one transmitter to a set of intended next hops.
#[derive(Clone, Debug)]
pub struct Hyperarc {
    pub id: usize,
    pub transmitter: NodeId,
    pub receivers: Vec<NodeId>,
    pub capacity: f64,
}

/// One inter-session code: the set of flows XORed together over a hyperarc.
/// A singleton is an uncoded transmission.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Code {
    pub flows: Vec<FlowId>,
}

impl Code {
    pub fn new(mut flows: Vec<FlowId>) -> Self {
        flows.sort_unstable();
        flows.dedup();
        Self { flows }
    }

    pub fn contains(&self, s: FlowId) -> bool {
        self.flows.binary_search(&s).is_ok()
    }
}

/// Per-hyperarc code sets plus the (h, k, s) routing indicator.
#[derive(Clone, Debug, Default)]
pub struct CodeBook {
    per_hyperarc: Vec<Vec<Code>>,
}

impl CodeBook {
    pub fn new(per_hyperarc: Vec<Vec<Code>>) -> Self {
        Self { per_hyperarc }
    }

    pub fn codes(&self, h: usize) -> &[Code] {
        &self.per_hyperarc[h]
    }

    pub fn hyperarc_count(&self) -> usize {
        self.per_hyperarc.len()
    }

    /// H_{h,k}^s: whether flow s rides code k over hyperarc h.
    pub fn indicator(&self, h: usize, k: usize, s: FlowId) -> bool {
        self.per_hyperarc[h][k].contains(s)
    }

    /// Drop every code with more than one flow (the no-coding baseline).
    pub fn singletons_only(&self) -> CodeBook {
        CodeBook {
            per_hyperarc: self
                .per_hyperarc
                .iter()
                .map(|codes| codes.iter().filter(|c| c.flows.len() == 1).cloned().collect())
                .collect(),
        }
    }
}

/// Interference cliques: within a clique at most one hyperarc transmits at once.
#[derive(Clone, Debug)]
pub struct ConflictStructure {
    pub cliques: Vec<Vec<usize>>,
    pub gamma: f64,
}

/// Loss-pattern shorthand used by sweeps: which marked links carry the swept rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossPattern {
    OverhearingOnly,
    DirectOnly,
    Both,
    AllLinks,
}

impl LossPattern {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "overhearing_only" => Some(Self::OverhearingOnly),
            "direct_only" => Some(Self::DirectOnly),
            "both" => Some(Self::Both),
            "all_links" => Some(Self::AllLinks),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::OverhearingOnly => "overhearing_only",
            Self::DirectOnly => "direct_only",
            Self::Both => "both",
            Self::AllLinks => "all_links",
        }
    }
}

/// The canonical marker links the patterns point at.
#[derive(Clone, Debug, Default)]
pub struct PatternLinks {
    pub overhearing_only: Vec<Link>,
    pub direct_only: Vec<Link>,
}

/// Everything one run needs: structure, flows, codes, cliques, and ground-truth loss.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub topology: Topology,
    pub flows: Vec<Flow>,
    pub hyperarcs: Vec<Hyperarc>,
    pub codebook: CodeBook,
    pub conflict: ConflictStructure,
    pub loss: LossMatrix,
    pub pattern_links: PatternLinks,
}

impl Scenario {
    /// Links a pattern refers to in this scenario.
    pub fn links_for_pattern(&self, pattern: LossPattern) -> Vec<Link> {
        match pattern {
            LossPattern::OverhearingOnly => self.pattern_links.overhearing_only.clone(),
            LossPattern::DirectOnly => self.pattern_links.direct_only.clone(),
            LossPattern::Both => {
                let mut v = self.pattern_links.overhearing_only.clone();
                v.extend(&self.pattern_links.direct_only);
                v
            }
            LossPattern::AllLinks => self.topology.links().map(|(l, _)| l).collect(),
        }
    }

    /// Reset loss to lossless on every topology link, then set `rate` on the
    /// pattern's links.
    pub fn apply_pattern(&mut self, pattern: LossPattern, rate: f64) {
        self.loss.clear();
        self.loss.fill_lossless(&self.topology);
        for link in self.links_for_pattern(pattern) {
            self.loss.set(link.0, link.1, rate);
        }
    }

    /// The no-coding twin of this scenario (singleton codes only).
    pub fn without_coding(&self) -> Scenario {
        let mut s = self.clone();
        s.codebook = self.codebook.singletons_only();
        s
    }

    /// Options (h, k) available to flow s at node i, i.e. pairs with H_{h,k}^s = 1.
    pub fn options_at(&self, i: NodeId, s: FlowId) -> Vec<(usize, usize)> {
        let flow = &self.flows[s];
        let Some(nh) = flow.next_hop(i) else { return Vec::new() };
        let mut out = Vec::new();
        for h in &self.hyperarcs {
            if h.transmitter != i || !h.receivers.contains(&nh) {
                continue;
            }
            for (k, code) in self.codebook.codes(h.id).iter().enumerate() {
                if code.contains(s) {
                    out.push((h.id, k));
                }
            }
        }
        out
    }

    pub fn max_capacity(&self) -> f64 {
        self.hyperarcs.iter().map(|h| h.capacity).fold(0.0, f64::max)
    }

    pub fn scale_capacities(&mut self, factor: f64) {
        self.topology.scale_capacities(factor);
        for h in &mut self.hyperarcs {
            h.capacity *= factor;
        }
    }
}

/// Which canonical topology to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CanonicalKind {
    X,
    Cross,
    Wheel(usize),
    MultihopChain,
}

impl CanonicalKind {
    pub fn parse(s: &str) -> Result<Self, TopologyError> {
        if s == "x" {
            return Ok(Self::X);
        }
        if s == "cross" {
            return Ok(Self::Cross);
        }
        if s == "multihop_chain" {
            return Ok(Self::MultihopChain);
        }
        if let Some(rest) = s.strip_prefix("wheel(").and_then(|r| r.strip_suffix(')')) {
            let n: usize =
                rest.trim().parse().map_err(|_| TopologyError::UnknownKind(s.to_string()))?;
            return Ok(Self::Wheel(n));
        }
        Err(TopologyError::UnknownKind(s.to_string()))
    }
}

/// How to derive conflict cliques.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interference {
    SingleClique,
    AllInRange,
}

/// Whether the next hop of `s` can obtain flow `sp`'s antidotes when the two are
/// coded together at node `i`: the next hop already carries `sp`'s packets (it is
/// on `sp`'s path no later than `i`, e.g. its origin), or an overhearing link from
/// `sp`'s previous hop reaches it.
pub fn antidotes_available(topology: &Topology, i: NodeId, s: &Flow, sp: &Flow) -> bool {
    let Some(j) = s.next_hop(i) else { return false };
    let pos_i = sp.path.iter().position(|&n| n == i);
    if let (Some(pi), Some(pj)) = (pos_i, sp.path.iter().position(|&n| n == j)) {
        if pj <= pi {
            return true;
        }
    }
    match sp.prev_hop(i) {
        Some(prev) => topology.has_link(prev, j),
        None => false,
    }
}

/// All codes available over hyperarc `h`: singletons for every crossing flow plus
/// each flow subset (up to `max_code_size`) whose members exit the transmitter
/// toward pairwise-distinct next hops in the receiver set and whose next hops can
/// all obtain the cross antidotes.
pub fn enumerate_codes(
    h: &Hyperarc,
    flows: &[Flow],
    topology: &Topology,
    max_code_size: usize,
) -> Vec<Code> {
    let i = h.transmitter;
    let crossing: Vec<&Flow> = flows
        .iter()
        .filter(|f| f.crosses(i) && f.next_hop(i).is_some_and(|nh| h.receivers.contains(&nh)))
        .collect();
    let mut codes: Vec<Code> = crossing.iter().map(|f| Code::new(vec![f.id])).collect();
    let n = crossing.len();
    // Subsets of size >= 2, enumerated by bitmask, smallest sets first.
    let mut subsets: Vec<u32> = (1u32..(1 << n)).filter(|m| m.count_ones() >= 2).collect();
    subsets.sort_by_key(|m| (m.count_ones(), *m));
    'subset: for mask in subsets {
        if mask.count_ones() as usize > max_code_size {
            continue;
        }
        let members: Vec<&Flow> =
            (0..n).filter(|b| mask & (1 << b) != 0).map(|b| crossing[b]).collect();
        let mut next_hops = BTreeSet::new();
        for f in &members {
            if !next_hops.insert(f.next_hop(i).unwrap()) {
                continue 'subset;
            }
        }
        for f in &members {
            for fp in &members {
                if f.id != fp.id && !antidotes_available(topology, i, f, fp) {
                    continue 'subset;
                }
            }
        }
        codes.push(Code::new(members.iter().map(|f| f.id).collect()));
    }
    codes
}

fn interferes(topology: &Topology, a: &Hyperarc, b: &Hyperarc) -> bool {
    if a.transmitter == b.transmitter {
        return true;
    }
    // Half-duplex: a node cannot transmit and receive in the same slot.
    if b.receivers.contains(&a.transmitter) || a.receivers.contains(&b.transmitter) {
        return true;
    }
    // A transmission is interference wherever it is audible at the other's receivers.
    let a_hits = b.receivers.iter().any(|&j| topology.in_range(a.transmitter, j));
    let b_hits = a.receivers.iter().any(|&j| topology.in_range(b.transmitter, j));
    a_hits || b_hits
}

/// Maximal cliques of an undirected graph via Bron–Kerbosch with pivoting.
fn maximal_cliques(adj: &[Vec<bool>]) -> Vec<Vec<usize>> {
    fn bk(
        adj: &[Vec<bool>],
        r: &mut Vec<usize>,
        p: &mut BTreeSet<usize>,
        x: &mut BTreeSet<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if p.is_empty() && x.is_empty() {
            out.push(r.clone());
            return;
        }
        // Pivot on the vertex with the most neighbors in P.
        let pivot = p
            .iter()
            .chain(x.iter())
            .copied()
            .max_by_key(|&u| p.iter().filter(|&&v| adj[u][v]).count())
            .unwrap();
        let candidates: Vec<usize> = p.iter().copied().filter(|&v| !adj[pivot][v]).collect();
        for v in candidates {
            r.push(v);
            let mut p2: BTreeSet<usize> = p.iter().copied().filter(|&u| adj[v][u]).collect();
            let mut x2: BTreeSet<usize> = x.iter().copied().filter(|&u| adj[v][u]).collect();
            bk(adj, r, &mut p2, &mut x2, out);
            r.pop();
            p.remove(&v);
            x.insert(v);
        }
    }
    let mut out = Vec::new();
    let mut r = Vec::new();
    let mut p: BTreeSet<usize> = (0..adj.len()).collect();
    let mut x = BTreeSet::new();
    bk(adj, &mut r, &mut p, &mut x, &mut out);
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort();
    out
}

/// Derive the conflict cliques for a set of hyperarcs.
pub fn conflict_cliques(
    topology: &Topology,
    hyperarcs: &[Hyperarc],
    interference: Interference,
    gamma: f64,
) -> ConflictStructure {
    let cliques = match interference {
        Interference::SingleClique => vec![(0..hyperarcs.len()).collect()],
        Interference::AllInRange => {
            let n = hyperarcs.len();
            let mut adj = vec![vec![false; n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    if interferes(topology, &hyperarcs[i], &hyperarcs[j]) {
                        adj[i][j] = true;
                        adj[j][i] = true;
                    }
                }
            }
            maximal_cliques(&adj)
        }
    };
    ConflictStructure { cliques, gamma }
}

/// Shared parameters for the canonical builders.
#[derive(Clone, Copy, Debug)]
pub struct CanonicalParams {
    pub generation_size: u16,
    pub gamma: f64,
    pub link_capacity: f64,
    pub max_code_size: usize,
}

impl Default for CanonicalParams {
    fn default() -> Self {
        Self { generation_size: 15, gamma: 1.0, link_capacity: 1.0, max_code_size: 4 }
    }
}

/// Build one of the named topologies with its flows, hyperarcs, codes, and cliques.
pub fn build_canonical(
    kind: CanonicalKind,
    params: CanonicalParams,
) -> Result<Scenario, TopologyError> {
    match kind {
        CanonicalKind::X => build_relay(
            "x",
            &["A1", "B1"],
            &["A2", "B2"],
            "I",
            ("A1", "B2"),
            ("I", "B2"),
            params,
        ),
        CanonicalKind::Wheel(n) => {
            if n < 2 {
                return Err(TopologyError::WheelTooSmall(n));
            }
            let sources: Vec<String> = (1..=n).map(|i| format!("S{i}")).collect();
            let sinks: Vec<String> = (1..=n).map(|i| format!("R{i}")).collect();
            let src: Vec<&str> = sources.iter().map(|s| s.as_str()).collect();
            let dst: Vec<&str> = sinks.iter().map(|s| s.as_str()).collect();
            build_relay("wheel", &src, &dst, "I", ("S1", "R2"), ("I", "R2"), params)
        }
        CanonicalKind::Cross => build_cross(params),
        CanonicalKind::MultihopChain => build_multihop(params),
    }
}

/// One relay, n source-sink pairs, every sink overhearing every foreign source.
fn build_relay(
    name: &str,
    sources: &[&str],
    sinks: &[&str],
    relay: &str,
    oh_mark: (&str, &str),
    direct_mark: (&str, &str),
    params: CanonicalParams,
) -> Result<Scenario, TopologyError> {
    let n = sources.len();
    let mut t = Topology::new();
    let src: Vec<NodeId> = sources.iter().map(|s| t.add_node(s)).collect();
    let relay_id = t.add_node(relay);
    let dst: Vec<NodeId> = sinks.iter().map(|s| t.add_node(s)).collect();
    let cap = params.link_capacity;
    for i in 0..n {
        t.add_link(src[i], relay_id, cap);
        t.add_link(relay_id, dst[i], cap);
        for j in 0..n {
            if i != j {
                t.add_link(src[i], dst[j], cap);
            }
        }
    }
    let flows: Vec<Flow> = (0..n)
        .map(|i| Flow {
            id: i,
            source: src[i],
            destination: dst[i],
            path: vec![src[i], relay_id, dst[i]],
            generation_size: params.generation_size,
            utility: Utility::Log,
        })
        .collect();
    let mut hyperarcs: Vec<Hyperarc> = (0..n)
        .map(|i| Hyperarc { id: i, transmitter: src[i], receivers: vec![relay_id], capacity: cap })
        .collect();
    hyperarcs.push(Hyperarc {
        id: n,
        transmitter: relay_id,
        receivers: dst.clone(),
        capacity: cap,
    });
    finish_scenario(name, t, flows, hyperarcs, oh_mark, direct_mark, params, Interference::SingleClique)
}

/// Four end nodes, four bidirectional flows through one relay.
fn build_cross(params: CanonicalParams) -> Result<Scenario, TopologyError> {
    let mut t = Topology::new();
    let a1 = t.add_node("A1");
    let a2 = t.add_node("A2");
    let b1 = t.add_node("B1");
    let b2 = t.add_node("B2");
    let relay = t.add_node("I");
    let cap = params.link_capacity;
    let ends = [a1, a2, b1, b2];
    for &e in &ends {
        t.add_link(e, relay, cap);
        t.add_link(relay, e, cap);
    }
    // Every end node overhears the two ends of the other pair.
    for &a in &[a1, a2] {
        for &b in &[b1, b2] {
            t.add_link(a, b, cap);
            t.add_link(b, a, cap);
        }
    }
    let pairs = [(a1, a2), (a2, a1), (b1, b2), (b2, b1)];
    let flows: Vec<Flow> = pairs
        .iter()
        .enumerate()
        .map(|(i, &(s, d))| Flow {
            id: i,
            source: s,
            destination: d,
            path: vec![s, relay, d],
            generation_size: params.generation_size,
            utility: Utility::Log,
        })
        .collect();
    let mut hyperarcs: Vec<Hyperarc> = ends
        .iter()
        .enumerate()
        .map(|(i, &e)| Hyperarc { id: i, transmitter: e, receivers: vec![relay], capacity: cap })
        .collect();
    hyperarcs.push(Hyperarc {
        id: 4,
        transmitter: relay,
        receivers: vec![a1, a2, b1, b2],
        capacity: cap,
    });
    finish_scenario("cross", t, flows, hyperarcs, ("A1", "B2"), ("I", "B2"), params, Interference::SingleClique)
        .map(|mut s| {
            // The canonical loss figures hit one direct link per pair.
            let i = s.topology.node_id("I").unwrap();
            let a2 = s.topology.node_id("A2").unwrap();
            let b2 = s.topology.node_id("B2").unwrap();
            let b1 = s.topology.node_id("B1").unwrap();
            let a1 = s.topology.node_id("A1").unwrap();
            s.pattern_links.direct_only = vec![(i, a2), (i, b2)];
            s.pattern_links.overhearing_only = vec![(a1, b2), (b1, a2)];
            s
        })
}

/// Two cascaded X stages: A1,B1 -> I1 -> A2,B2 -> I2 -> A3,B3.
fn build_multihop(params: CanonicalParams) -> Result<Scenario, TopologyError> {
    let mut t = Topology::new();
    let names = ["A1", "B1", "I1", "A2", "B2", "I2", "A3", "B3"];
    let ids: Vec<NodeId> = names.iter().map(|n| t.add_node(n)).collect();
    let [a1, b1, i1, a2, b2, i2, a3, b3] = ids[..] else { unreachable!() };
    let cap = params.link_capacity;
    for (f, to) in [
        (a1, i1),
        (b1, i1),
        (i1, a2),
        (i1, b2),
        (a1, b2),
        (b1, a2),
        (a2, i2),
        (b2, i2),
        (i2, a3),
        (i2, b3),
        (a2, b3),
        (b2, a3),
    ] {
        t.add_link(f, to, cap);
    }
    let flows = vec![
        Flow {
            id: 0,
            source: a1,
            destination: a3,
            path: vec![a1, i1, a2, i2, a3],
            generation_size: params.generation_size,
            utility: Utility::Log,
        },
        Flow {
            id: 1,
            source: b1,
            destination: b3,
            path: vec![b1, i1, b2, i2, b3],
            generation_size: params.generation_size,
            utility: Utility::Log,
        },
    ];
    let hyperarcs = vec![
        Hyperarc { id: 0, transmitter: a1, receivers: vec![i1], capacity: cap },
        Hyperarc { id: 1, transmitter: b1, receivers: vec![i1], capacity: cap },
        Hyperarc { id: 2, transmitter: i1, receivers: vec![a2, b2], capacity: cap },
        Hyperarc { id: 3, transmitter: a2, receivers: vec![i2], capacity: cap },
        Hyperarc { id: 4, transmitter: b2, receivers: vec![i2], capacity: cap },
        Hyperarc { id: 5, transmitter: i2, receivers: vec![a3, b3], capacity: cap },
    ];
    finish_scenario(
        "multihop_chain",
        t,
        flows,
        hyperarcs,
        ("A1", "B2"),
        ("I1", "B2"),
        params,
        Interference::AllInRange,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish_scenario(
    name: &str,
    topology: Topology,
    flows: Vec<Flow>,
    hyperarcs: Vec<Hyperarc>,
    oh_mark: (&str, &str),
    direct_mark: (&str, &str),
    params: CanonicalParams,
    interference: Interference,
) -> Result<Scenario, TopologyError> {
    for f in &flows {
        f.validate()?;
    }
    let codebook = CodeBook::new(
        hyperarcs.iter().map(|h| enumerate_codes(h, &flows, &topology, params.max_code_size)).collect(),
    );
    let conflict = conflict_cliques(&topology, &hyperarcs, interference, params.gamma);
    let mark = |pair: (&str, &str)| -> Result<Link, TopologyError> {
        Ok((
            topology.node_id(pair.0).ok_or_else(|| TopologyError::UnknownNode(pair.0.into()))?,
            topology.node_id(pair.1).ok_or_else(|| TopologyError::UnknownNode(pair.1.into()))?,
        ))
    };
    let pattern_links = PatternLinks {
        overhearing_only: vec![mark(oh_mark)?],
        direct_only: vec![mark(direct_mark)?],
    };
    let mut loss = LossMatrix::new();
    loss.fill_lossless(&topology);
    Ok(Scenario {
        name: name.to_string(),
        topology,
        flows,
        hyperarcs,
        codebook,
        conflict,
        loss,
        pattern_links,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x_scenario() -> Scenario {
        build_canonical(CanonicalKind::X, CanonicalParams::default()).unwrap()
    }

    #[test]
    fn x_topology_shape() {
        let s = x_scenario();
        assert_eq!(s.topology.node_count(), 5);
        assert_eq!(s.flows.len(), 2);
        assert_eq!(s.hyperarcs.len(), 3);
        let relay = &s.hyperarcs[2];
        assert_eq!(s.topology.node_name(relay.transmitter), "I");
        let mut rx: Vec<&str> =
            relay.receivers.iter().map(|&r| s.topology.node_name(r)).collect();
        rx.sort_unstable();
        assert_eq!(rx, ["A2", "B2"]);
        assert_eq!(relay.capacity, 1.0);
        // Relay codes: both singletons plus the pair.
        let codes = s.codebook.codes(2);
        assert_eq!(codes.len(), 3);
        assert!(codes.contains(&Code::new(vec![0])));
        assert!(codes.contains(&Code::new(vec![1])));
        assert!(codes.contains(&Code::new(vec![0, 1])));
        // Single clique holding every hyperarc.
        assert_eq!(s.conflict.cliques, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn x_relay_capacity_is_min_of_links() {
        let mut params = CanonicalParams::default();
        params.link_capacity = 2.0;
        let s = build_canonical(CanonicalKind::X, params).unwrap();
        assert_eq!(s.hyperarcs[2].capacity, 2.0);
    }

    #[test]
    fn source_hyperarc_carries_one_flow_one_code() {
        let s = x_scenario();
        assert_eq!(s.codebook.codes(0), &[Code::new(vec![0])]);
        assert_eq!(s.codebook.codes(1), &[Code::new(vec![1])]);
    }

    #[test]
    fn cross_topology_codes() {
        let s = build_canonical(CanonicalKind::Cross, CanonicalParams::default()).unwrap();
        assert_eq!(s.flows.len(), 4);
        assert_eq!(s.topology.node_count(), 5);
        let codes = s.codebook.codes(4);
        let by_size = |n: usize| codes.iter().filter(|c| c.flows.len() == n).count();
        assert_eq!(by_size(1), 4, "singletons");
        assert_eq!(by_size(2), 6, "pairs");
        assert_eq!(by_size(3), 4, "triples");
        assert_eq!(by_size(4), 1, "the 4-flow code");
        assert_eq!(codes.len(), 15);
        // Distinct next hops in every multi-flow code.
        for c in codes.iter().filter(|c| c.flows.len() >= 2) {
            let hops: BTreeSet<NodeId> =
                c.flows.iter().map(|&f| s.flows[f].next_hop(s.hyperarcs[4].transmitter).unwrap()).collect();
            assert_eq!(hops.len(), c.flows.len());
        }
    }

    #[test]
    fn wheel2_matches_x_structure() {
        let x = x_scenario();
        let w = build_canonical(CanonicalKind::Wheel(2), CanonicalParams::default()).unwrap();
        assert_eq!(w.topology.node_count(), x.topology.node_count());
        assert_eq!(w.flows.len(), x.flows.len());
        assert_eq!(w.hyperarcs.len(), x.hyperarcs.len());
        for h in 0..w.hyperarcs.len() {
            assert_eq!(w.codebook.codes(h), x.codebook.codes(h));
        }
        assert_eq!(w.conflict.cliques, x.conflict.cliques);
    }

    #[test]
    fn wheel_needs_two_flows() {
        assert!(matches!(
            build_canonical(CanonicalKind::Wheel(1), CanonicalParams::default()),
            Err(TopologyError::WheelTooSmall(1))
        ));
    }

    #[test]
    fn wheel_code_count_grows_with_flows() {
        let w3 = build_canonical(CanonicalKind::Wheel(3), CanonicalParams::default()).unwrap();
        let relay_codes = w3.codebook.codes(3);
        // 3 singletons + 3 pairs + 1 triple.
        assert_eq!(relay_codes.len(), 7);
        let w5 = build_canonical(CanonicalKind::Wheel(5), CanonicalParams::default()).unwrap();
        // Capped at |S_k| <= 4: 5 + C(5,2) + C(5,3) + C(5,4) = 5 + 10 + 10 + 5.
        assert_eq!(w5.codebook.codes(5).len(), 30);
    }

    #[test]
    fn multihop_has_two_relay_stages_and_two_cliques() {
        let s = build_canonical(CanonicalKind::MultihopChain, CanonicalParams::default()).unwrap();
        assert_eq!(s.flows.len(), 2);
        assert_eq!(s.hyperarcs.len(), 6);
        // Both relays can code the two flows.
        assert!(s.codebook.codes(2).contains(&Code::new(vec![0, 1])));
        assert!(s.codebook.codes(5).contains(&Code::new(vec![0, 1])));
        // Shared-range groups: the first X stage plus the A2/B2 forwarders, and
        // the region around the second relay.
        assert_eq!(s.conflict.cliques.len(), 2);
        assert_eq!(s.conflict.cliques[0], vec![0, 1, 2, 3, 4]);
        assert_eq!(s.conflict.cliques[1], vec![2, 3, 4, 5]);
        // Every hyperarc is covered.
        let covered: BTreeSet<usize> = s.conflict.cliques.iter().flatten().copied().collect();
        assert_eq!(covered.len(), 6);
    }

    #[test]
    fn codes_without_overhearing_drop_out() {
        // Remove the overhearing links: only singletons remain at the relay.
        let s = x_scenario();
        let mut t = Topology::new();
        for n in 0..s.topology.node_count() {
            t.add_node(s.topology.node_name(n));
        }
        for (l, c) in s.topology.links() {
            let names = (s.topology.node_name(l.0), s.topology.node_name(l.1));
            if names != ("A1", "B2") && names != ("B1", "A2") {
                t.add_link(l.0, l.1, c);
            }
        }
        let codes = enumerate_codes(&s.hyperarcs[2], &s.flows, &t, 4);
        assert_eq!(codes.len(), 2);
        assert!(codes.iter().all(|c| c.flows.len() == 1));
    }

    #[test]
    fn flow_conservation_options_exist_everywhere() {
        for kind in [
            CanonicalKind::X,
            CanonicalKind::Cross,
            CanonicalKind::Wheel(4),
            CanonicalKind::MultihopChain,
        ] {
            let s = build_canonical(kind, CanonicalParams::default()).unwrap();
            for f in &s.flows {
                for &node in f.path.iter().take(f.path.len() - 1) {
                    assert!(
                        !s.options_at(node, f.id).is_empty(),
                        "flow {} stuck at node {} in {:?}",
                        f.id,
                        s.topology.node_name(node),
                        kind
                    );
                }
            }
        }
    }

    #[test]
    fn indicator_counts_match_code_sizes() {
        let s = build_canonical(CanonicalKind::Cross, CanonicalParams::default()).unwrap();
        for h in 0..s.hyperarcs.len() {
            for (k, code) in s.codebook.codes(h).iter().enumerate() {
                let count = s.flows.iter().filter(|f| s.codebook.indicator(h, k, f.id)).count();
                assert_eq!(count, code.flows.len());
            }
        }
    }

    #[test]
    fn singletons_only_strips_multiflow_codes() {
        let s = build_canonical(CanonicalKind::Cross, CanonicalParams::default()).unwrap();
        let nc = s.codebook.singletons_only();
        for h in 0..nc.hyperarc_count() {
            assert!(nc.codes(h).iter().all(|c| c.flows.len() == 1));
        }
        assert_eq!(nc.codes(4).len(), 4);
    }

    #[test]
    fn canonical_kind_parsing() {
        assert_eq!(CanonicalKind::parse("x").unwrap(), CanonicalKind::X);
        assert_eq!(CanonicalKind::parse("wheel(6)").unwrap(), CanonicalKind::Wheel(6));
        assert!(CanonicalKind::parse("ring").is_err());
    }
}
