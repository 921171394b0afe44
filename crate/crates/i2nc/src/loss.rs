//! Ground-truth per-link loss, the derived per-flow loss figures (direct and
//! antidote), Bernoulli loss draws, and the windowed generation-based estimator
//! nodes use when they cannot see the ground truth.

use crate::topology::{Code, Flow, Hyperarc, NodeId, Topology};
use std::collections::{BTreeMap, VecDeque};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("flow {flow} does not cross hyperarc {hyperarc}")]
    FlowNotOnHyperarc { flow: usize, hyperarc: usize },
    #[error("flow {0} is not part of the code")]
    FlowNotInCode(usize),
    #[error("loss probability {0} outside [0, 1]")]
    BadProbability(f64),
}

/// Per-directed-link loss probabilities. Links absent from the matrix are treated
/// as never delivering (rho = 1); the scenario builders therefore pre-fill every
/// topology link with 0 so that "in the topology but unset" reads as lossless.
#[derive(Clone, Debug, Default)]
pub struct LossMatrix {
    rho: BTreeMap<(NodeId, NodeId), f64>,
}

impl LossMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, from: NodeId, to: NodeId, rho: f64) {
        debug_assert!((0.0..=1.0).contains(&rho));
        self.rho.insert((from, to), rho);
    }

    pub fn try_set(&mut self, from: NodeId, to: NodeId, rho: f64) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&rho) || rho.is_nan() {
            return Err(LossError::BadProbability(rho));
        }
        self.rho.insert((from, to), rho);
        Ok(())
    }

    /// Insert rho = 0 for every link of the topology that has no entry yet.
    pub fn fill_lossless(&mut self, topology: &Topology) {
        for (link, _) in topology.links() {
            self.rho.entry(link).or_insert(0.0);
        }
    }

    pub fn clear(&mut self) {
        self.rho.clear();
    }

    /// Loss probability of a directed link; absent links never deliver.
    pub fn rho(&self, from: NodeId, to: NodeId) -> f64 {
        self.rho.get(&(from, to)).copied().unwrap_or(1.0)
    }

    pub fn entries(&self) -> impl Iterator<Item = ((NodeId, NodeId), f64)> + '_ {
        self.rho.iter().map(|(&l, &r)| (l, r))
    }

    /// Bernoulli delivery draw for one transmission on one link.
    pub fn draw(&self, rng: &mut impl rand::Rng, from: NodeId, to: NodeId) -> bool {
        rng.gen::<f64>() >= self.rho(from, to)
    }
}

/// rho_h^s: loss on the direct link from the hyperarc's transmitter to s's next hop.
pub fn direct_loss(matrix: &LossMatrix, h: &Hyperarc, s: &Flow) -> Result<f64, LossError> {
    let nh = s
        .next_hop(h.transmitter)
        .filter(|nh| h.receivers.contains(nh))
        .ok_or(LossError::FlowNotOnHyperarc { flow: s.id, hyperarc: h.id })?;
    Ok(matrix.rho(h.transmitter, nh))
}

/// rho_{h,k}^{s,s'}: loss of s''s antidotes on the overhearing link toward s's
/// next hop. Zero when s = s', and zero when s's next hop already carries s''s
/// packets (it lies on s''s path no later than the transmitter — e.g. it is s''s
/// origin). Otherwise the overhearing link from s''s previous hop is consulted;
/// a link that does not exist never delivers.
pub fn antidote_loss(
    matrix: &LossMatrix,
    h: &Hyperarc,
    code: &Code,
    s: &Flow,
    sp: &Flow,
) -> Result<f64, LossError> {
    if !code.contains(s.id) {
        return Err(LossError::FlowNotInCode(s.id));
    }
    if !code.contains(sp.id) {
        return Err(LossError::FlowNotInCode(sp.id));
    }
    if s.id == sp.id {
        return Ok(0.0);
    }
    let i = h.transmitter;
    let Some(j) = s.next_hop(i) else {
        return Err(LossError::FlowNotOnHyperarc { flow: s.id, hyperarc: h.id });
    };
    if let (Some(pi), Some(pj)) =
        (sp.path.iter().position(|&n| n == i), sp.path.iter().position(|&n| n == j))
    {
        if pj <= pi {
            return Ok(0.0);
        }
    }
    match sp.prev_hop(i) {
        Some(prev) => Ok(matrix.rho(prev, j)),
        None => Ok(1.0),
    }
}

/// Windowed loss estimator for one (observer link, flow). Keeps the last 10
/// samples; the n-th newest sample carries weight proportional to 1/n, normalized
/// so the estimate is a convex combination of the samples.
#[derive(Clone, Debug, Default)]
pub struct LossEstimator {
    window: VecDeque<f64>,
}

pub const ESTIMATOR_WINDOW: usize = 10;

impl LossEstimator {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, sample: f64) -> f64 {
        self.window.push_front(sample.clamp(0.0, 1.0));
        self.window.truncate(ESTIMATOR_WINDOW);
        self.estimate()
    }

    /// Effective (overhearing-link) rule for one generation: if at least G of the
    /// G+P transmissions arrived the generation decodes and the sample is 0;
    /// otherwise the shortfall u = G - received counts as a loss rate of u/G.
    pub fn record_generation(&mut self, sent_total: u32, received: u32, g: u32) -> f64 {
        debug_assert!(received <= sent_total);
        debug_assert!(g >= 1);
        let sample = if received >= g {
            0.0
        } else {
            f64::from(g - received) / f64::from(g)
        };
        self.push(sample)
    }

    /// Raw (direct-link) rule: one minus the fraction of the generation's
    /// transmissions that arrived.
    pub fn record_raw(&mut self, sent_total: u32, received: u32) -> f64 {
        debug_assert!(received <= sent_total);
        if sent_total == 0 {
            return self.estimate();
        }
        self.push(1.0 - f64::from(received) / f64::from(sent_total))
    }

    /// Current weighted estimate; 0 with an empty window (optimistic start).
    pub fn estimate(&self) -> f64 {
        if self.window.is_empty() {
            return 0.0;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, s) in self.window.iter().enumerate() {
            let w = 1.0 / (i as f64 + 1.0);
            num += w * s;
            den += w;
        }
        num / den
    }

    pub fn sample_count(&self) -> usize {
        self.window.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_canonical, CanonicalKind, CanonicalParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn direct_loss_reads_the_next_hop_link() {
        let mut s = build_canonical(CanonicalKind::X, CanonicalParams::default()).unwrap();
        let i = s.topology.node_id("I").unwrap();
        let a2 = s.topology.node_id("A2").unwrap();
        s.loss.set(i, a2, 0.3);
        let relay = &s.hyperarcs[2];
        assert_eq!(direct_loss(&s.loss, relay, &s.flows[0]).unwrap(), 0.3);
        assert_eq!(direct_loss(&s.loss, relay, &s.flows[1]).unwrap(), 0.0);
        // Flow 0 does not cross B1's hyperarc.
        assert!(direct_loss(&s.loss, &s.hyperarcs[1], &s.flows[0]).is_err());
    }

    #[test]
    fn antidote_loss_cases() {
        let mut s = build_canonical(CanonicalKind::X, CanonicalParams::default()).unwrap();
        let a1 = s.topology.node_id("A1").unwrap();
        let b2 = s.topology.node_id("B2").unwrap();
        s.loss.set(a1, b2, 0.25);
        let relay = &s.hyperarcs[2];
        let pair = s.codebook.codes(2).iter().find(|c| c.flows.len() == 2).unwrap().clone();
        // S2's decode of the pair depends on overhearing S1's packets on A1-B2.
        assert_eq!(antidote_loss(&s.loss, relay, &pair, &s.flows[1], &s.flows[0]).unwrap(), 0.25);
        // Same flow: zero by convention.
        assert_eq!(antidote_loss(&s.loss, relay, &pair, &s.flows[0], &s.flows[0]).unwrap(), 0.0);
        // Flow outside the code: error.
        let singleton = Code::new(vec![0]);
        assert!(antidote_loss(&s.loss, relay, &singleton, &s.flows[0], &s.flows[1]).is_err());
    }

    #[test]
    fn antidote_loss_local_origin_is_zero() {
        let s = build_canonical(CanonicalKind::Cross, CanonicalParams::default()).unwrap();
        let relay = &s.hyperarcs[4];
        // Flows 0 (A1->A2) and 1 (A2->A1): each next hop originated the partner.
        let pair = Code::new(vec![0, 1]);
        assert_eq!(antidote_loss(&s.loss, relay, &pair, &s.flows[0], &s.flows[1]).unwrap(), 0.0);
        assert_eq!(antidote_loss(&s.loss, relay, &pair, &s.flows[1], &s.flows[0]).unwrap(), 0.0);
    }

    #[test]
    fn absent_link_never_delivers() {
        let m = LossMatrix::new();
        assert_eq!(m.rho(0, 1), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(!m.draw(&mut rng, 0, 1));
    }

    #[test]
    fn draw_extremes_and_law_of_large_numbers() {
        let mut m = LossMatrix::new();
        m.set(0, 1, 0.0);
        m.set(0, 2, 1.0);
        m.set(0, 3, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert!(m.draw(&mut rng, 0, 1));
            assert!(!m.draw(&mut rng, 0, 2));
        }
        let n = 100_000;
        let lost = (0..n).filter(|_| !m.draw(&mut rng, 0, 3)).count();
        let rate = lost as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.01, "empirical loss {rate}");
    }

    #[test]
    fn draw_is_reproducible() {
        let mut m = LossMatrix::new();
        m.set(0, 1, 0.5);
        let seq = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..64).map(|_| m.draw(&mut rng, 0, 1)).collect::<Vec<_>>()
        };
        assert_eq!(seq(42), seq(42));
        assert_ne!(seq(42), seq(43));
    }

    #[test]
    fn estimator_effective_rule() {
        let mut e = LossEstimator::new();
        // 15 of 18 received with G=15: decodes, sample 0.
        assert_eq!(e.record_generation(18, 15, 15), 0.0);
        // 12 of 18: shortfall 3 of 15.
        let est = e.record_generation(18, 12, 15);
        // Window newest-first: [0.2, 0.0] -> (0.2 + 0)/1.5.
        assert!((est - 0.2 / 1.5).abs() < 1e-12, "estimate {est}");
    }

    #[test]
    fn estimator_raw_rule_and_single_sample() {
        let mut e = LossEstimator::new();
        let est = e.record_raw(20, 15);
        assert!((est - 0.25).abs() < 1e-12);
        assert_eq!(e.sample_count(), 1);
    }

    #[test]
    fn estimator_window_cap_and_bounds() {
        let mut e = LossEstimator::new();
        for i in 0..25 {
            let est = e.record_raw(10, i % 11);
            assert!((0.0..=1.0).contains(&est));
        }
        assert_eq!(e.sample_count(), ESTIMATOR_WINDOW);
    }

    #[test]
    fn estimator_empty_window_is_zero() {
        assert_eq!(LossEstimator::new().estimate(), 0.0);
    }

    #[test]
    fn estimator_weights_are_normalized() {
        // All-equal samples must estimate exactly that value for any length.
        let mut e = LossEstimator::new();
        for n in 1..=12 {
            let est = e.record_raw(10, 4);
            assert!((est - 0.6).abs() < 1e-12, "length {n}: {est}");
        }
    }
}
