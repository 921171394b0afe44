//! The decomposed rate-control / traffic-splitting / scheduling / queue-update
//! solver. Each (hyperarc, code, flow) triple carries a dual queue q; per-node
//! traffic splits alpha live on simplices; per-(hyperarc, code) schedule shares
//! tau live on clique-capped rows; flow rates follow the inverse marginal
//! utility of the summed queues. The three variants share the machinery and
//! differ in the loss-compensation terms and available codes.

use crate::coding::{FlowId, Variant};
use crate::loss::{antidote_loss, direct_loss};
use crate::topology::{NodeId, Scenario};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptError {
    #[error("hyperarc {hyperarc} cannot serve flow {flow}: direct loss is 1")]
    InfeasibleHyperarc { hyperarc: usize, flow: FlowId },
    #[error("flow {flow} has no transmission option at node {node}")]
    NoOptions { flow: FlowId, node: NodeId },
    #[error("no such (hyperarc, code, flow) triple")]
    UnknownTriple,
    #[error("bad configuration: {0}")]
    BadConfig(&'static str),
    #[error("trajectory does not carry state snapshots; re-run with record_states")]
    NoStates,
}

/// Step-size schedule for the queue update: constant, or c0/(1 + t/t0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    Diminishing { t0: f64 },
}

impl Schedule {
    fn factor(&self, t: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Diminishing { t0 } => 1.0 / (1.0 + t as f64 / t0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub variant: Variant,
    /// Queue (dual) step; like the other two, scaled by the schedule each
    /// iteration.
    pub step_q: f64,
    /// Traffic-split step.
    pub step_alpha: f64,
    /// Schedule-share step.
    pub step_tau: f64,
    pub schedule: Schedule,
    pub max_iters: usize,
    /// Convergence tolerance on the rate trajectory (max spread of any flow's
    /// rate over the trailing window).
    pub tol: f64,
    /// Convergence also requires every capacity residual over the trailing
    /// window to stay within this bound, so a converged run is feasible to the
    /// reported tolerance and not merely rate-stable mid-drift.
    pub residual_tol: f64,
    /// Clique over-provisioning; defaults to the scenario's own gamma.
    pub gamma: Option<f64>,
    /// Rate cap absorbing the zero-queue singularity; defaults to 10x the
    /// largest hyperarc capacity.
    pub x_cap: Option<f64>,
    /// Lead-compensation gain: the split and share drives read the
    /// extrapolated queues q + damping * (q - q_prev) instead of q. Plain
    /// primal-dual dynamics leave rotational modes between the queues and the
    /// shares undamped (the Lyapunov derivative is only negative
    /// semidefinite), so trajectories can orbit an optimal point forever at a
    /// transient-set amplitude; anticipating the queue motion turns those
    /// centers into spirals. Zero recovers the plain dynamics, and any value
    /// leaves fixed points exactly where they were.
    pub damping: f64,
    /// Keep per-iteration (q, alpha, tau) snapshots for convergence reporting.
    pub record_states: bool,
}

impl OptimizerConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            step_q: 0.05,
            step_alpha: 0.1,
            step_tau: 0.1,
            schedule: Schedule::Diminishing { t0: 3000.0 },
            max_iters: 100_000,
            tol: 2e-5,
            residual_tol: 1e-3,
            gamma: None,
            x_cap: None,
            damping: 5.0,
            record_states: false,
        }
    }

    fn validate(&self) -> Result<(), OptError> {
        if !(self.step_q > 0.0 && self.step_alpha > 0.0 && self.step_tau > 0.0) {
            return Err(OptError::BadConfig("step sizes must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(OptError::BadConfig("tol must be positive"));
        }
        if !(self.residual_tol > 0.0) {
            return Err(OptError::BadConfig("residual_tol must be positive"));
        }
        if !(self.damping >= 0.0) {
            return Err(OptError::BadConfig("damping must be non-negative"));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(OptError::BadConfig("gamma must be in (0, 1]"));
            }
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::new(Variant::State)
    }
}

/// Cross-coupling of one (h, k, s) entry with a partner entry (h, k, s').
#[derive(Clone, Debug)]
struct CrossRef {
    entry: usize,
    /// rho_{h,k}^{s',s}: antidote loss the *partner* suffers from this entry's
    /// flow (used in this entry's queue value Q).
    rho_out: f64,
    /// rho_{h,k}^{s,s'}: antidote loss this flow suffers from the partner (used
    /// in this entry's queue inflow).
    rho_in: f64,
    /// 1/(1 - rho_h^{s'}) of the partner's direct link.
    partner_inv_direct: f64,
}

#[derive(Clone, Debug)]
struct Entry {
    h: usize,
    k: usize,
    s: FlowId,
    hk: usize,
    inv_direct: f64,
    cross: Vec<CrossRef>,
}

/// One traffic-split row: the options of flow s at node i.
#[derive(Clone, Debug)]
struct AlphaRow {
    flow: FlowId,
    node: NodeId,
    entries: Vec<usize>,
}

/// Flattened scenario indices for the solver.
struct OptIndex {
    entries: Vec<Entry>,
    rows: Vec<AlphaRow>,
    /// (h, k) pairs carrying at least one flow; tau is indexed by this.
    hks: Vec<(usize, usize)>,
    hk_capacity: Vec<f64>,
    hk_entries: Vec<Vec<usize>>,
    /// Per clique: indices into `hks`.
    cliques: Vec<Vec<usize>>,
    /// Per flow: its alpha rows (one per forwarding node on the path).
    flow_rows: Vec<Vec<usize>>,
    gamma: f64,
    x_cap: f64,
}

/// Solver variables. `q` and `alpha` are indexed per (h, k, s) entry, `tau` per
/// (h, k) pair, `x` per flow (see the owning [`Solver`]'s index).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub q: Vec<f64>,
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
    pub x: Vec<f64>,
    pub iter: usize,
    /// Queues before the latest queue step; memory for the lead compensator.
    /// Empty means no history yet, in which case extrapolation is a no-op.
    pub q_prev: Vec<f64>,
}

/// A per-iteration snapshot kept for convergence diagnostics.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub q: Vec<f64>,
    pub alpha: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Output of [`solve`]: rate trajectory, final state, and the convergence flag.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// x[t][s]: flow rates after iteration t.
    pub x: Vec<Vec<f64>>,
    pub final_state: OptimizerState,
    pub converged: bool,
    pub iters: usize,
    /// Per-iteration snapshots, present only under `record_states`.
    pub states: Vec<Snapshot>,
}

impl Trajectory {
    pub fn final_x(&self) -> &[f64] {
        &self.final_state.x
    }

    pub fn total_rate(&self) -> f64 {
        self.final_state.x.iter().sum()
    }

    pub fn utility(&self) -> f64 {
        self.final_state.x.iter().map(|&x| x.max(1e-300).ln()).sum()
    }
}

pub struct Solver<'a> {
    pub scenario: &'a Scenario,
    pub config: OptimizerConfig,
    idx: OptIndex,
}

const CONVERGENCE_WINDOW: usize = 100;

impl<'a> Solver<'a> {
    pub fn new(scenario: &'a Scenario, config: OptimizerConfig) -> Result<Self, OptError> {
        config.validate()?;
        let idx = build_index(scenario, &config)?;
        Ok(Self { scenario, config, idx })
    }

    pub fn flow_count(&self) -> usize {
        self.scenario.flows.len()
    }

    pub fn x_cap(&self) -> f64 {
        self.idx.x_cap
    }

    pub fn gamma(&self) -> f64 {
        self.idx.gamma
    }

    /// Queues zero, splits uniform, shares uniform within each clique (shared
    /// hyperarcs take the most constrained share), rates at the cap.
    pub fn initial_state(&self) -> OptimizerState {
        let idx = &self.idx;
        let mut alpha = vec![0.0; idx.entries.len()];
        for row in &idx.rows {
            let w = 1.0 / row.entries.len() as f64;
            for &e in &row.entries {
                alpha[e] = w;
            }
        }
        let mut tau = vec![f64::INFINITY; idx.hks.len()];
        for clique in &idx.cliques {
            let w = idx.gamma / clique.len() as f64;
            for &hk in clique {
                tau[hk] = tau[hk].min(w);
            }
        }
        OptimizerState {
            q: vec![0.0; idx.entries.len()],
            alpha,
            tau,
            x: vec![idx.x_cap; self.scenario.flows.len()],
            iter: 0,
            q_prev: Vec::new(),
        }
    }

    fn entry_index(&self, h: usize, k: usize, s: FlowId) -> Result<usize, OptError> {
        self.idx
            .entries
            .iter()
            .position(|e| e.h == h && e.k == k && e.s == s)
            .ok_or(OptError::UnknownTriple)
    }

    fn q_value_with(&self, e: usize, qv: impl Fn(usize) -> f64) -> f64 {
        let entry = &self.idx.entries[e];
        let mut v = qv(e) * entry.inv_direct;
        for c in &entry.cross {
            let w = match self.config.variant {
                Variant::Stateless => c.rho_out * c.partner_inv_direct,
                _ => c.rho_out,
            };
            v += qv(c.entry) * w;
        }
        v
    }

    fn q_value_at(&self, state: &OptimizerState, e: usize) -> f64 {
        self.q_value_with(e, |i| state.q[i])
    }

    /// Extrapolated queue seen by the split and share drives; identical to the
    /// raw queue at any fixed point and whenever no history exists.
    fn q_eff(&self, state: &OptimizerState, e: usize) -> f64 {
        match state.q_prev.get(e) {
            Some(&prev) => {
                (state.q[e] + self.config.damping * (state.q[e] - prev)).max(0.0)
            }
            None => state.q[e],
        }
    }

    fn q_value_eff(&self, state: &OptimizerState, e: usize) -> f64 {
        self.q_value_with(e, |i| self.q_eff(state, i))
    }

    /// Q_{h,k}^s: the entry's own backlog inflated by its direct loss, plus the
    /// backlog its transmissions impose on each partner through antidote loss.
    pub fn compute_q_hks(
        &self,
        state: &OptimizerState,
        h: usize,
        k: usize,
        s: FlowId,
    ) -> Result<f64, OptError> {
        Ok(self.q_value_at(state, self.entry_index(h, k, s)?))
    }

    /// Q_i^s: split-weighted sum of the option queue values at node i.
    pub fn compute_q_is(&self, state: &OptimizerState, i: NodeId, s: FlowId) -> f64 {
        self.idx
            .flow_rows
            .get(s)
            .into_iter()
            .flatten()
            .filter(|&&r| self.idx.rows[r].node == i)
            .flat_map(|&r| &self.idx.rows[r].entries)
            .map(|&e| state.alpha[e] * self.q_value_at(state, e))
            .sum()
    }

    /// x_s = min(cap, 1 / sum of Q_i^s along the path); the cap absorbs the
    /// zero-queue start.
    pub fn rate_control(&self, state: &OptimizerState, s: FlowId) -> f64 {
        let total: f64 = self.idx.flow_rows[s]
            .iter()
            .map(|&r| {
                self.idx.rows[r]
                    .entries
                    .iter()
                    .map(|&e| state.alpha[e] * self.q_value_at(state, e))
                    .sum::<f64>()
            })
            .sum();
        if total <= 0.0 {
            self.idx.x_cap
        } else {
            (1.0 / total).min(self.idx.x_cap)
        }
    }

    /// One projected step of the traffic-split dynamics for flow s at node i.
    pub fn traffic_split_step(
        &self,
        state: &mut OptimizerState,
        i: NodeId,
        s: FlowId,
    ) -> Result<(), OptError> {
        let row = self
            .idx
            .flow_rows
            .get(s)
            .into_iter()
            .flatten()
            .find(|&&r| self.idx.rows[r].node == i)
            .copied()
            .ok_or(OptError::NoOptions { flow: s, node: i })?;
        self.alpha_step_row(state, row);
        Ok(())
    }

    fn alpha_step_row(&self, state: &mut OptimizerState, row: usize) {
        let entries = &self.idx.rows[row].entries;
        if entries.len() == 1 {
            state.alpha[entries[0]] = 1.0;
            return;
        }
        let values: Vec<f64> = entries.iter().map(|&e| self.q_value_eff(state, e)).collect();
        // Active set: options already carrying traffic, joined by any option at
        // least as cheap as the running mean. Adding cheaper options only lowers
        // the mean, so iterating to the fixed point from above terminates.
        let mut active: Vec<bool> = entries.iter().map(|&e| state.alpha[e] > 0.0).collect();
        if !active.iter().any(|&a| a) {
            active.fill(true);
        }
        let mean = loop {
            let (sum, n) = values
                .iter()
                .zip(&active)
                .filter(|(_, &a)| a)
                .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
            let m = sum / n as f64;
            let mut grew = false;
            for (j, &v) in values.iter().enumerate() {
                if !active[j] && v <= m {
                    active[j] = true;
                    grew = true;
                }
            }
            if !grew {
                break m;
            }
        };
        let step = self.config.step_alpha * self.config.schedule.factor(state.iter);
        let mut sum = 0.0;
        for ((&e, &v), &a) in entries.iter().zip(&values).zip(&active) {
            if a {
                state.alpha[e] = (state.alpha[e] + step * (mean - v)).max(0.0);
            }
            sum += state.alpha[e];
        }
        if sum <= f64::MIN_POSITIVE {
            // Degenerate overshoot: restart the row from the cheapest option.
            let best = (0..entries.len())
                .min_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap())
                .unwrap();
            for (j, &e) in entries.iter().enumerate() {
                state.alpha[e] = if j == best { 1.0 } else { 0.0 };
            }
        } else {
            for &e in entries {
                state.alpha[e] /= sum;
            }
        }
    }

    /// Scheduling weight Q_{h,k} = R_h * sum of the code's queues.
    pub fn hk_weight(&self, state: &OptimizerState, hk: usize) -> f64 {
        self.idx.hk_capacity[hk]
            * self.idx.hk_entries[hk].iter().map(|&e| state.q[e]).sum::<f64>()
    }

    /// The same weight on the extrapolated queues, read by the share drive.
    fn hk_weight_eff(&self, state: &OptimizerState, hk: usize) -> f64 {
        self.idx.hk_capacity[hk]
            * self.idx.hk_entries[hk].iter().map(|&e| self.q_eff(state, e)).sum::<f64>()
    }

    /// One projected step of the schedule-share dynamics for one clique,
    /// rescaling the clique to use the full over-provisioned budget whenever any
    /// member has positive weight.
    pub fn schedule_step(&self, state: &mut OptimizerState, clique: usize) {
        let members = &self.idx.cliques[clique];
        self.tau_dynamics(state, clique);
        let any_positive = members.iter().any(|&hk| self.hk_weight(state, hk) > 0.0);
        if any_positive {
            let sum: f64 = members.iter().map(|&hk| state.tau[hk]).sum();
            if sum > 0.0 {
                let scale = self.idx.gamma / sum;
                for &hk in members {
                    state.tau[hk] *= scale;
                }
            }
        }
    }

    fn tau_dynamics(&self, state: &mut OptimizerState, clique: usize) {
        let members = &self.idx.cliques[clique];
        if members.is_empty() {
            return;
        }
        let weights: Vec<f64> =
            members.iter().map(|&hk| self.hk_weight_eff(state, hk)).collect();
        // Active set from below: members already holding a share, joined by any
        // member at least as heavy as the running mean.
        let mut active: Vec<bool> = members.iter().map(|&hk| state.tau[hk] > 0.0).collect();
        if !active.iter().any(|&a| a) {
            active.fill(true);
        }
        let mean = loop {
            let (sum, n) = weights
                .iter()
                .zip(&active)
                .filter(|(_, &a)| a)
                .fold((0.0, 0usize), |(s, n), (w, _)| (s + w, n + 1));
            let m = sum / n as f64;
            let mut grew = false;
            for (j, &w) in weights.iter().enumerate() {
                if !active[j] && w >= m {
                    active[j] = true;
                    grew = true;
                }
            }
            if !grew {
                break m;
            }
        };
        let step = self.config.step_tau * self.config.schedule.factor(state.iter);
        for ((&hk, &w), &a) in members.iter().zip(&weights).zip(&active) {
            if a {
                state.tau[hk] = (state.tau[hk] + step * (w - mean)).max(0.0);
            }
        }
    }

    /// Queue inflow of one entry: own split traffic inflated by direct loss plus
    /// the parity traffic injected on this flow's behalf by each partner.
    fn inflow(&self, state: &OptimizerState, e: usize) -> f64 {
        let entry = &self.idx.entries[e];
        let mut v = state.alpha[e] * state.x[entry.s] * entry.inv_direct;
        for c in &entry.cross {
            let partner = &self.idx.entries[c.entry];
            let base = state.alpha[c.entry] * state.x[partner.s] * c.rho_in;
            v += match self.config.variant {
                Variant::Stateless => base * entry.inv_direct,
                _ => base,
            };
        }
        v
    }

    /// One projected subgradient step on a single queue.
    pub fn queue_update(
        &self,
        state: &mut OptimizerState,
        h: usize,
        k: usize,
        s: FlowId,
    ) -> Result<f64, OptError> {
        let e = self.entry_index(h, k, s)?;
        self.queue_step_entry(state, e);
        Ok(state.q[e])
    }

    fn queue_step_entry(&self, state: &mut OptimizerState, e: usize) {
        let entry = &self.idx.entries[e];
        let outflow = self.idx.hk_capacity[entry.hk] * state.tau[entry.hk];
        let step = self.config.step_q * self.config.schedule.factor(state.iter);
        state.q[e] = (state.q[e] + step * (self.inflow(state, e) - outflow)).max(0.0);
    }

    /// One full iteration: queues, then rates, then splits, then shares.
    pub fn iterate(&self, state: &mut OptimizerState) {
        if state.q_prev.len() == state.q.len() {
            state.q_prev.copy_from_slice(&state.q);
        } else {
            state.q_prev = state.q.clone();
        }
        // The queue drive reads alpha, x, and tau but never q, so updating the
        // queues in place is already a simultaneous step.
        for e in 0..self.idx.entries.len() {
            self.queue_step_entry(state, e);
        }
        for s in 0..state.x.len() {
            state.x[s] = self.rate_control(state, s);
        }
        for row in 0..self.idx.rows.len() {
            self.alpha_step_row(state, row);
        }
        for clique in 0..self.idx.cliques.len() {
            self.tau_dynamics(state, clique);
        }
        self.rescale_tau(state);
        state.iter += 1;
    }

    /// Joint clique rescale: each clique proposes the scale that would spend its
    /// full budget; a member takes the smallest proposal among its cliques, so
    /// every clique stays within gamma and single-clique scenarios land exactly
    /// on it.
    fn rescale_tau(&self, state: &mut OptimizerState) {
        let mut scales = vec![1.0f64; self.idx.hks.len()];
        for clique in &self.idx.cliques {
            let any_positive = clique.iter().any(|&hk| self.hk_weight(state, hk) > 0.0);
            let sum: f64 = clique.iter().map(|&hk| state.tau[hk]).sum();
            let scale = if sum > 0.0 && (any_positive || sum > self.idx.gamma) {
                self.idx.gamma / sum
            } else {
                1.0
            };
            for &hk in clique {
                scales[hk] = scales[hk].min(scale);
            }
        }
        for (tau, &s) in state.tau.iter_mut().zip(&scales) {
            *tau *= s;
        }
    }

    /// Max violation of the per-entry capacity constraints at the current state.
    pub fn capacity_residual(&self, state: &OptimizerState) -> f64 {
        let mut worst: f64 = 0.0;
        for (e, entry) in self.idx.entries.iter().enumerate() {
            let outflow = self.idx.hk_capacity[entry.hk] * state.tau[entry.hk];
            worst = worst.max(self.inflow(state, e) - outflow);
        }
        worst
    }

    /// Max deviation of any split row from the simplex.
    pub fn simplex_violation(&self, state: &OptimizerState) -> f64 {
        self.idx
            .rows
            .iter()
            .map(|row| {
                (row.entries.iter().map(|&e| state.alpha[e]).sum::<f64>() - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Max clique share overshoot beyond gamma.
    pub fn clique_violation(&self, state: &OptimizerState) -> f64 {
        self.idx
            .cliques
            .iter()
            .map(|c| c.iter().map(|&hk| state.tau[hk]).sum::<f64>() - self.idx.gamma)
            .fold(0.0, f64::max)
    }
}

fn build_index(scenario: &Scenario, config: &OptimizerConfig) -> Result<OptIndex, OptError> {
    let codebook = if config.variant == Variant::Nonc {
        scenario.codebook.singletons_only()
    } else {
        scenario.codebook.clone()
    };
    let mut entries: Vec<Entry> = Vec::new();
    let mut hks: Vec<(usize, usize)> = Vec::new();
    let mut hk_capacity: Vec<f64> = Vec::new();
    let mut hk_entries: Vec<Vec<usize>> = Vec::new();
    for h in &scenario.hyperarcs {
        for (k, code) in codebook.codes(h.id).iter().enumerate() {
            // Only codes carried by some flow get a schedule share.
            let members: Vec<FlowId> = code
                .flows
                .iter()
                .copied()
                .filter(|&s| {
                    scenario.flows[s]
                        .next_hop(h.transmitter)
                        .is_some_and(|nh| h.receivers.contains(&nh))
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let hk = hks.len();
            hks.push((h.id, k));
            hk_capacity.push(h.capacity);
            let mut list: Vec<usize> = Vec::new();
            for &s in &members {
                let rho = direct_loss(&scenario.loss, h, &scenario.flows[s])
                    .expect("member flows cross their hyperarc");
                if rho >= 1.0 {
                    return Err(OptError::InfeasibleHyperarc { hyperarc: h.id, flow: s });
                }
                list.push(entries.len());
                entries.push(Entry {
                    h: h.id,
                    k,
                    s,
                    hk,
                    inv_direct: 1.0 / (1.0 - rho),
                    cross: Vec::new(),
                });
            }
            // Wire up the cross references now that sibling entries exist.
            for &e in &list {
                let s = entries[e].s;
                let mut cross = Vec::new();
                for &ep in &list {
                    let sp = entries[ep].s;
                    if sp == s {
                        continue;
                    }
                    let rho_out =
                        antidote_loss(&scenario.loss, h, code, &scenario.flows[sp], &scenario.flows[s])
                            .expect("both flows are in the code");
                    let rho_in =
                        antidote_loss(&scenario.loss, h, code, &scenario.flows[s], &scenario.flows[sp])
                            .expect("both flows are in the code");
                    let rho_partner = 1.0 - 1.0 / entries[ep].inv_direct;
                    if config.variant == Variant::Stateless && rho_partner >= 1.0 {
                        return Err(OptError::InfeasibleHyperarc { hyperarc: h.id, flow: sp });
                    }
                    cross.push(CrossRef {
                        entry: ep,
                        rho_out,
                        rho_in,
                        partner_inv_direct: entries[ep].inv_direct,
                    });
                }
                entries[e].cross = cross;
            }
            hk_entries.push(list);
        }
    }

    // Alpha rows: one per (flow, forwarding node).
    let mut rows: Vec<AlphaRow> = Vec::new();
    let mut flow_rows: Vec<Vec<usize>> = vec![Vec::new(); scenario.flows.len()];
    for flow in &scenario.flows {
        for &node in flow.path.iter().take(flow.path.len() - 1) {
            let opts: Vec<usize> = entries
                .iter()
                .enumerate()
                .filter(|(_, e)| {
                    e.s == flow.id && scenario.hyperarcs[e.h].transmitter == node
                })
                .map(|(i, _)| i)
                .collect();
            if opts.is_empty() {
                return Err(OptError::NoOptions { flow: flow.id, node });
            }
            flow_rows[flow.id].push(rows.len());
            rows.push(AlphaRow { flow: flow.id, node, entries: opts });
        }
    }

    // Cliques over the hk pairs: a clique of hyperarcs covers all their codes.
    let mut cliques: Vec<Vec<usize>> = Vec::new();
    for c in &scenario.conflict.cliques {
        let members: Vec<usize> =
            (0..hks.len()).filter(|&i| c.contains(&hks[i].0)).collect();
        if !members.is_empty() {
            cliques.push(members);
        }
    }
    let gamma = config.gamma.unwrap_or(scenario.conflict.gamma);
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(OptError::BadConfig("gamma must be in (0, 1]"));
    }
    let x_cap = config.x_cap.unwrap_or(10.0 * scenario.max_capacity());
    if !(x_cap > 0.0) {
        return Err(OptError::BadConfig("x_cap must be positive"));
    }
    Ok(OptIndex {
        entries,
        rows,
        hks,
        hk_capacity,
        hk_entries,
        cliques,
        flow_rows,
        gamma,
        x_cap,
    })
}

/// Iterate the decomposition until the rate trajectory settles (max change of
/// any flow's rate over the trailing window below tol) or `max_iters`.
pub fn solve(scenario: &Scenario, config: OptimizerConfig) -> Result<Trajectory, OptError> {
    solve_with_observer(scenario, config, |_, _, _| {})
}

/// Like [`solve`], with a per-iteration callback receiving the solver, the
/// iteration index, and the post-iteration state.
pub fn solve_with_observer(
    scenario: &Scenario,
    config: OptimizerConfig,
    mut observer: impl FnMut(&Solver, usize, &OptimizerState),
) -> Result<Trajectory, OptError> {
    let record = config.record_states;
    let solver = Solver::new(scenario, config)?;
    let mut state = solver.initial_state();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut states: Vec<Snapshot> = Vec::new();
    let mut residuals: Vec<f64> = Vec::new();
    let mut converged = false;
    while state.iter < solver.config.max_iters {
        let t = state.iter;
        solver.iterate(&mut state);
        observer(&solver, t, &state);
        xs.push(state.x.clone());
        residuals.push(solver.capacity_residual(&state));
        if record {
            states.push(Snapshot {
                q: state.q.clone(),
                alpha: state.alpha.clone(),
                tau: state.tau.clone(),
            });
        }
        if xs.len() >= CONVERGENCE_WINDOW {
            let window = &xs[xs.len() - CONVERGENCE_WINDOW..];
            let spread = (0..state.x.len())
                .map(|s| {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for row in window {
                        lo = lo.min(row[s]);
                        hi = hi.max(row[s]);
                    }
                    hi - lo
                })
                .fold(0.0, f64::max);
            let worst_residual = residuals[residuals.len() - CONVERGENCE_WINDOW..]
                .iter()
                .fold(0.0, |a: f64, &b| a.max(b));
            if spread < solver.config.tol && worst_residual <= solver.config.residual_tol {
                converged = true;
                break;
            }
        }
    }
    let iters = state.iter;
    Ok(Trajectory { x: xs, final_state: state, converged, iters, states })
}

/// Convergence diagnostics for a recorded trajectory: per-iteration capacity
/// residuals, feasibility extremes, and a Lyapunov-style proxy (weighted squared
/// distance of (q, tau, alpha) to the final iterate).
#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub residuals: Vec<f64>,
    pub lyapunov: Vec<f64>,
    /// Fraction of the tail (second half) iterations where the proxy increased.
    pub tail_increase_fraction: f64,
    pub max_simplex_violation: f64,
    pub max_clique_violation: f64,
}

pub fn convergence_report(
    trajectory: &Trajectory,
    scenario: &Scenario,
    config: &OptimizerConfig,
) -> Result<ConvergenceReport, OptError> {
    if trajectory.states.is_empty() || trajectory.states.len() != trajectory.x.len() {
        return Err(OptError::NoStates);
    }
    let solver = Solver::new(scenario, config.clone())?;
    let last = trajectory.states.last().unwrap();
    let x_star = trajectory.final_x();
    let mut residuals = Vec::with_capacity(trajectory.states.len());
    let mut lyapunov = Vec::with_capacity(trajectory.states.len());
    let mut max_simplex: f64 = 0.0;
    let mut max_clique: f64 = 0.0;
    for (snap, x_row) in trajectory.states.iter().zip(&trajectory.x) {
        let state = OptimizerState {
            q: snap.q.clone(),
            alpha: snap.alpha.clone(),
            tau: snap.tau.clone(),
            x: x_row.clone(),
            iter: 0,
            q_prev: Vec::new(),
        };
        residuals.push(solver.capacity_residual(&state));
        max_simplex = max_simplex.max(solver.simplex_violation(&state));
        max_clique = max_clique.max(solver.clique_violation(&state));
        // Appendix-style weights: queue terms by their step, shares by theirs,
        // splits by the final rate over the split step.
        let mut v = 0.0;
        for (a, b) in snap.q.iter().zip(&last.q) {
            v += (a - b).powi(2) / (2.0 * solver.config.step_q);
        }
        for (a, b) in snap.tau.iter().zip(&last.tau) {
            v += (a - b).powi(2) / (2.0 * solver.config.step_tau);
        }
        for row in &solver.idx.rows {
            let x_s = x_star[row.flow];
            for &e in &row.entries {
                v += x_s * (snap.alpha[e] - last.alpha[e]).powi(2)
                    / (2.0 * solver.config.step_alpha);
            }
        }
        lyapunov.push(v);
    }
    let tail_start = lyapunov.len() / 2;
    let tail = &lyapunov[tail_start..];
    let increases = tail.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    let steps = tail.len().saturating_sub(1).max(1);
    Ok(ConvergenceReport {
        residuals,
        lyapunov,
        tail_increase_fraction: increases as f64 / steps as f64,
        max_simplex_violation: max_simplex,
        max_clique_violation: max_clique,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_canonical, CanonicalKind, CanonicalParams, LossPattern};

    fn x_scenario() -> Scenario {
        build_canonical(CanonicalKind::X, CanonicalParams::default()).unwrap()
    }

    fn cfg(variant: Variant) -> OptimizerConfig {
        OptimizerConfig::new(variant)
    }

    /// The (h, k) of the two-flow code at the X relay.
    fn x_pair_code(s: &Scenario) -> (usize, usize) {
        let k = s.codebook.codes(2).iter().position(|c| c.flows.len() == 2).unwrap();
        (2, k)
    }

    #[test]
    fn q_hks_matches_hand_values() {
        // Direct substitution: own q over (1 - direct loss) plus partner q times
        // the antidote loss (state) or antidote loss over the partner's direct
        // survival (stateless).
        let mut s = x_scenario();
        let i = s.topology.node_id("I").unwrap();
        let a2 = s.topology.node_id("A2").unwrap();
        let b2 = s.topology.node_id("B2").unwrap();
        let a1 = s.topology.node_id("A1").unwrap();
        s.loss.set(i, a2, 0.5); // flow 0 direct
        s.loss.set(a1, b2, 0.25); // flow 1 suffers when coded with flow 0
        s.loss.set(i, b2, 0.2); // flow 1 direct
        let (h, k) = x_pair_code(&s);

        let solver = Solver::new(&s, cfg(Variant::State)).unwrap();
        let mut st = solver.initial_state();
        let e0 = solver.entry_index(h, k, 0).unwrap();
        let e1 = solver.entry_index(h, k, 1).unwrap();
        st.q[e0] = 1.0;
        st.q[e1] = 1.0;
        let got = solver.compute_q_hks(&st, h, k, 0).unwrap();
        assert!((got - 2.25).abs() < 1e-12, "state: {got}");

        let solver = Solver::new(&s, cfg(Variant::Stateless)).unwrap();
        let mut st = solver.initial_state();
        let e0 = solver.entry_index(h, k, 0).unwrap();
        let e1 = solver.entry_index(h, k, 1).unwrap();
        st.q[e0] = 1.0;
        st.q[e1] = 1.0;
        let got = solver.compute_q_hks(&st, h, k, 0).unwrap();
        assert!((got - 2.3125).abs() < 1e-12, "stateless: {got}");
    }

    #[test]
    fn q_hks_lossless_reduces_to_q() {
        let s = x_scenario();
        let solver = Solver::new(&s, cfg(Variant::State)).unwrap();
        let mut st = solver.initial_state();
        let e = solver.entry_index(0, 0, 0).unwrap();
        st.q[e] = 2.0;
        assert_eq!(solver.compute_q_hks(&st, 0, 0, 0).unwrap(), 2.0);
        assert_eq!(
            solver.compute_q_hks(&st, 0, 0, 1),
            Err(OptError::UnknownTriple)
        );
    }

    #[test]
    fn q_is_is_alpha_weighted() {
        let s = x_scenario();
        let solver = Solver::new(&s, cfg(Variant::State)).unwrap();
        let mut st = solver.initial_state();
        let i = s.topology.node_id("I").unwrap();
        let (h, k) = x_pair_code(&s);
        let e_single = solver.entry_index(h, 0, 0).unwrap_or_else(|_| {
            solver.entry_index(h, 1, 0).unwrap() // singleton index depends on order
        });
        let e_pair = solver.entry_index(h, k, 0).unwrap();
        // Two options with values 2 and 4 and an even split.
        st.q[e_single] = 2.0;
        st.q[e_pair] = 4.0;
        st.alpha[e_single] = 0.5;
        st.alpha[e_pair] = 0.5;
        let got = solver.compute_q_is(&st, i, 0);
        assert!((got - 3.0).abs() < 1e-12, "{got}");
    }

    #[test]
    fn rate_control_inverts_queue_sum() {
        let s = x_scenario();
        let solver = Solver::new(&s, cfg(Variant::State)).unwrap();
        let mut st = solver.initial_state();
        // Zero queues: rate capped.
        assert_eq!(solver.rate_control(&st, 0), solver.x_cap());
        // Put all mass on the source entry with q = 4.
        let e = solver.entry_index(0, 0, 0).unwrap();
        st.q[e] = 4.0;
        // Relay options untouched (q = 0), so the path sum is 4.
        let got = solver.rate_control(&st, 0);
        assert!((got - 0.25).abs() < 1e-12, "{got}");
    }

    #[test]
    fn traffic_split_converges_to_cheaper_option() {
        let s = x_scenario();
        let solver = Solver::new(&s, cfg(Variant::State)).unwrap();
        let mut st = solver.initial_state();
        let i = s.topology.node_id("I").unwrap();
        let (h, k_pair) = x_pair_code(&s);
        let k_single = (0..s.codebook.codes(h).len())
            .find(|&k| solver.entry_index(h, k, 0).is_ok() && k != k_pair)
            .unwrap();
        let e_cheap = solver.entry_index(h, k_single, 0).unwrap();
        let e_dear = solver.entry_index(h, k_pair, 0).unwrap();
        st.q[e_cheap] = 5.0;
        st.q[e_dear] = 10.0;
        for _ in 0..500 {
            solver.traffic_split_step(&mut st, i, 0).unwrap();
        }
        assert!((st.alpha[e_cheap] - 1.0).abs() < 1e-9, "alpha {}", st.alpha[e_cheap]);
        assert!(st.alpha[e_dear].abs() < 1e-9);
        // Equal values: nothing moves.
        st.q[e_dear] = 5.0;
        let before = (st.alpha[e_cheap], st.alpha[e_dear]);
        solver.traffic_split_step(&mut st, i, 0).unwrap();
        assert_eq!(before, (st.alpha[e_cheap], st.alpha[e_dear]));
    }

    #[test]
    fn single_option_row_stays_at_one() {
        let s = x_scenario();
        let solver = Solver::new(&s, cfg(Variant::State)).unwrap();
        let mut st = solver.initial_state();
        let a1 = s.topology.node_id("A1").unwrap();
        solver.traffic_split_step(&mut st, a1, 0).unwrap();
        let e = solver.entry_index(0, 0, 0).unwrap();
        assert_eq!(st.alpha[e], 1.0);
    }

    #[test]
    fn schedule_step_drives_heavier_code() {
        let s = x_scenario();
        let solver = Solver::new(&s, cfg(Variant::State)).unwrap();
        let mut st = solver.initial_state();
        let (h, k_pair) = x_pair_code(&s);
        let e_pair0 = solver.entry_index(h, k_pair, 0).unwrap();
        let hk_pair = solver.idx.entries[e_pair0].hk;
        // Weight 3 on the pair code, 1 on flow 0's singleton, 0 elsewhere.
        st.q[e_pair0] = 3.0;
        let k_single = (0..s.codebook.codes(h).len())
            .find(|&k| k != k_pair && solver.entry_index(h, k, 0).is_ok())
            .unwrap();
        let e_single = solver.entry_index(h, k_single, 0).unwrap();
        let hk_single = solver.idx.entries[e_single].hk;
        st.q[e_single] = 1.0;
        for _ in 0..2000 {
            solver.schedule_step(&mut st, 0);
        }
        let gamma = solver.gamma();
        assert!(
            (st.tau[hk_pair] - gamma).abs() < 1e-6,
            "pair share {} of {gamma}",
            st.tau[hk_pair]
        );
        assert!(st.tau[hk_single] < 1e-6);
    }

    #[test]
    fn schedule_step_idle_clique_unchanged() {
        let s = x_scenario();
        let solver = Solver::new(&s, cfg(Variant::State)).unwrap();
        let mut st = solver.initial_state();
        let before = st.tau.clone();
        solver.schedule_step(&mut st, 0);
        assert_eq!(before, st.tau);
    }

    #[test]
    fn queue_update_follows_subgradient() {
        let mut config = cfg(Variant::State);
        config.step_q = 0.1;
        config.schedule = Schedule::Constant;
        let s = x_scenario();
        let solver = Solver::new(&s, config).unwrap();
        let mut st = solver.initial_state();
        let e = solver.entry_index(0, 0, 0).unwrap();
        // alpha = 1 on the sole source option; x = 2 gives inflow 2; tau makes
        // outflow 1.
        let hk = solver.idx.entries[e].hk;
        st.alpha[e] = 1.0;
        st.x[0] = 2.0;
        st.tau[hk] = 1.0;
        st.q[e] = 1.0;
        let q = solver.queue_update(&mut st, 0, 0, 0).unwrap();
        assert!((q - 1.1).abs() < 1e-12, "{q}");
        // Positive projection.
        st.q[e] = 0.0;
        st.x[0] = 0.5;
        let q = solver.queue_update(&mut st, 0, 0, 0).unwrap();
        assert_eq!(q, 0.0);
    }

    #[test]
    fn stateless_cross_inflow_is_inflated() {
        // With the victim's direct loss at 0.5, a cross term of 0.3 in the state
        // variant becomes 0.6 in the stateless variant.
        let mut s = x_scenario();
        let i = s.topology.node_id("I").unwrap();
        let b2 = s.topology.node_id("B2").unwrap();
        let a1 = s.topology.node_id("A1").unwrap();
        s.loss.set(i, b2, 0.5); // victim (flow 1) direct loss
        s.loss.set(a1, b2, 0.25); // antidote loss from partner flow 0
        let (h, k) = x_pair_code(&s);
        let delta = |variant: Variant| {
            let mut config = cfg(variant);
            config.step_q = 1.0;
            config.schedule = Schedule::Constant;
            let solver = Solver::new(&s, config).unwrap();
            let mut st = solver.initial_state();
            let e0 = solver.entry_index(h, k, 0).unwrap();
            let e1 = solver.entry_index(h, k, 1).unwrap();
            for a in st.alpha.iter_mut() {
                *a = 0.0;
            }
            st.alpha[e0] = 1.0; // partner's split: all on the pair code
            st.alpha[e1] = 0.0; // victim sends nothing itself
            st.x[0] = 1.2; // 1.2 * 0.25 = 0.3 cross base
            st.x[1] = 0.0;
            for t in st.tau.iter_mut() {
                *t = 0.0; // no outflow
            }
            solver.queue_update(&mut st, h, k, 1).unwrap()
        };
        let state_q = delta(Variant::State);
        let stateless_q = delta(Variant::Stateless);
        assert!((state_q - 0.3).abs() < 1e-12, "{state_q}");
        assert!((stateless_q - 0.6).abs() < 1e-12, "{stateless_q}");
    }

    fn converge(s: &Scenario, variant: Variant) -> Trajectory {
        solve(s, cfg(variant)).expect("solve runs")
    }

    #[test]
    fn lossless_x_reaches_one_third_each_and_nonc_one_quarter() {
        let s = x_scenario();
        let nc = converge(&s, Variant::State);
        assert!(nc.converged, "state variant should converge");
        let x = nc.final_x();
        assert!((x[0] - 1.0 / 3.0).abs() < 0.01, "x1 = {}", x[0]);
        assert!((x[1] - 1.0 / 3.0).abs() < 0.01, "x2 = {}", x[1]);
        let nonc = converge(&s, Variant::Nonc);
        assert!(nonc.converged);
        let total_nc = nc.total_rate();
        let total_nonc = nonc.total_rate();
        assert!((total_nonc - 0.5).abs() < 0.01, "nonc total {total_nonc}");
        let ratio = total_nc / total_nonc;
        assert!((ratio - 4.0 / 3.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn invariants_hold_every_iteration() {
        let mut s = x_scenario();
        s.apply_pattern(LossPattern::Both, 0.3);
        let mut config = cfg(Variant::Stateless);
        config.max_iters = 2000;
        solve_with_observer(&s, config, |solver, _, state| {
            assert!(state.q.iter().all(|&q| q >= 0.0));
            assert!(solver.simplex_violation(state) < 1e-9);
            assert!(solver.clique_violation(state) < 1e-9);
        })
        .unwrap();
    }

    #[test]
    fn nonc_equals_state_on_singleton_codebook() {
        let mut s = x_scenario();
        s.apply_pattern(LossPattern::Both, 0.3);
        let mut config = cfg(Variant::Nonc);
        config.max_iters = 5000;
        let nonc = solve(&s, config.clone()).unwrap();
        let stripped = s.without_coding();
        config.variant = Variant::State;
        let state = solve(&stripped, config).unwrap();
        assert_eq!(nonc.x, state.x, "identical trajectories expected");
    }

    #[test]
    fn capacity_scaling_is_homogeneous() {
        let s1 = x_scenario();
        let mut params = CanonicalParams::default();
        params.link_capacity = 2.0;
        let s2 = build_canonical(CanonicalKind::X, params).unwrap();
        let t1 = converge(&s1, Variant::State);
        let t2 = converge(&s2, Variant::State);
        for (a, b) in t1.final_x().iter().zip(t2.final_x()) {
            assert!((2.0 * a - b).abs() < 0.01, "{a} vs {b}");
        }
    }

    #[test]
    fn nonc_ignores_overhearing_loss() {
        let mut s = x_scenario();
        let mut totals = Vec::new();
        for rate in [0.0, 0.25, 0.5] {
            s.apply_pattern(LossPattern::OverhearingOnly, rate);
            totals.push(converge(&s, Variant::Nonc).total_rate());
        }
        for w in totals.windows(2) {
            assert!((w[0] - w[1]).abs() < 5e-3, "totals {totals:?}");
        }
    }

    #[test]
    fn convergence_report_diagnostics() {
        let mut s = x_scenario();
        s.apply_pattern(LossPattern::Both, 0.3);
        let mut config = cfg(Variant::State);
        config.record_states = true;
        config.tol = 1e-3;
        let traj = solve(&s, config.clone()).unwrap();
        assert!(traj.converged);
        let report = convergence_report(&traj, &s, &config).unwrap();
        // Proxy distance to the final iterate vanishes at the final iterate.
        assert!(report.lyapunov.last().unwrap().abs() < 1e-15);
        // Tail residuals within the configured tolerance once converged.
        let tail = &report.residuals[report.residuals.len() - 50..];
        for r in tail {
            assert!(*r <= config.tol, "tail residual {r}");
        }
        assert!(report.max_simplex_violation < 1e-9);
        assert!(report.max_clique_violation < 1e-9);
        // Without snapshots the report refuses.
        let bare = solve(&s, cfg(Variant::State)).unwrap();
        assert_eq!(
            convergence_report(&bare, &s, &cfg(Variant::State)).unwrap_err(),
            OptError::NoStates
        );
    }

    #[test]
    fn thirty_percent_both_links_anchors() {
        // Independently validated optima for the X topology with rho = 0.3 on
        // the A1-B2 and I-B2 links: state 0.5905, stateless 0.5559, and a
        // 21.9% stateless gain over the singleton-only baseline.
        let mut s = x_scenario();
        s.apply_pattern(LossPattern::Both, 0.3);
        let state = converge(&s, Variant::State);
        let stateless = converge(&s, Variant::Stateless);
        let nonc = converge(&s, Variant::Nonc);
        assert!(state.converged && stateless.converged && nonc.converged);
        assert!((state.total_rate() - 0.5905).abs() < 1e-3, "{}", state.total_rate());
        assert!(
            (stateless.total_rate() - 0.5559).abs() < 1e-3,
            "{}",
            stateless.total_rate()
        );
        let gain = stateless.total_rate() / nonc.total_rate() - 1.0;
        assert!((gain - 0.219).abs() < 0.01, "gain {gain}");
    }

    #[test]
    fn fifty_percent_direct_loss_splits_rates_two_to_one() {
        // rho = 0.5 on I-B2 degrades only the crossing flow's second hop; the
        // optimum serves the clean flow at 0.4 and the lossy one at 0.2, a 44%
        // gain over the singleton-only baseline.
        let mut s = x_scenario();
        s.apply_pattern(LossPattern::DirectOnly, 0.5);
        let t = converge(&s, Variant::State);
        assert!(t.converged);
        let x = t.final_x();
        assert!((x[0] - 0.40).abs() < 0.01, "x0 = {}", x[0]);
        assert!((x[1] - 0.20).abs() < 0.01, "x1 = {}", x[1]);
        let nonc = converge(&s, Variant::Nonc);
        let gain = t.total_rate() / nonc.total_rate() - 1.0;
        assert!((gain - 0.44).abs() < 0.02, "gain {gain}");
    }

    #[test]
    fn grid_search_oracle_matches_solver_at_fifty_percent_direct() {
        // Exhaustive check against a closed-form airtime model of the same
        // scenario: first hops spend x/R each, relay singletons spend
        // x/(1 - rho_direct), and the pair code spends the largest member
        // demand; utility is the sum of logs. The solver must find the same
        // optimum as a brute-force grid over rates and splits.
        let mut s = x_scenario();
        s.apply_pattern(LossPattern::DirectOnly, 0.5);
        let t = converge(&s, Variant::State);
        let mut best_u = f64::NEG_INFINITY;
        let mut best = (0.0, 0.0);
        for i in 1..=60 {
            let x0 = i as f64 * 0.01;
            for j in 1..=60 {
                let x1 = j as f64 * 0.01;
                for a0 in (0..=50).map(|v| v as f64 * 0.02) {
                    for a1 in (0..=50).map(|v| v as f64 * 0.02) {
                        let airtime = x0
                            + x1
                            + (1.0 - a0) * x0
                            + 2.0 * (1.0 - a1) * x1
                            + (a0 * x0).max(2.0 * a1 * x1);
                        if airtime <= 1.0 {
                            let u = x0.ln() + x1.ln();
                            if u > best_u {
                                best_u = u;
                                best = (x0, x1);
                            }
                        }
                    }
                }
            }
        }
        assert!((t.final_x()[0] - best.0).abs() < 0.015, "{:?} vs {best:?}", t.final_x());
        assert!((t.final_x()[1] - best.1).abs() < 0.015, "{:?} vs {best:?}", t.final_x());
        assert!((t.utility() - best_u).abs() < 0.06, "{} vs {best_u}", t.utility());
    }

    #[test]
    fn q_is_matches_definitional_sum_at_converged_state() {
        // At a converged lossy state, Q_i^s recomputed from its definition
        // (split-weighted option values via the public per-triple API) agrees
        // with compute_q_is for every flow and forwarding node.
        let mut s = x_scenario();
        s.apply_pattern(LossPattern::Both, 0.3);
        let solver = Solver::new(&s, cfg(Variant::Stateless)).unwrap();
        let t = converge(&s, Variant::Stateless);
        let st = &t.final_state;
        for (flow, f) in s.flows.iter().enumerate() {
            for &node in &f.path[..f.path.len() - 1] {
                let options = s.options_at(node, flow);
                if options.is_empty() {
                    continue;
                }
                let by_hand: f64 = options
                    .iter()
                    .map(|&(h, k)| {
                        let e = solver.entry_index(h, k, flow).unwrap();
                        st.alpha[e] * solver.compute_q_hks(st, h, k, flow).unwrap()
                    })
                    .sum();
                let got = solver.compute_q_is(st, node, flow);
                assert!((got - by_hand).abs() < 1e-12, "node {node} flow {flow}");
            }
        }
    }
}
