//! Generation-based intra-session coding (incremental-additive source coding,
//! random-linear parities, rank decoding over GF(2^8)), inter-session XOR coding
//! with uncoded headers, the parity-count rules for both redundancy variants, and
//! a joint decoding buffer that eliminates across generations.

use crate::gf256;
use std::collections::{BTreeMap, BTreeSet};

pub type FlowId = usize;
pub type NodeId = usize;

/// Redundancy rule selector. `State` sizes cross parities from raw antidote loss;
/// `Stateless` additionally inflates them to survive loss of the partner's direct
/// transmissions; `Nonc` performs no coding and requests no parities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    State,
    Stateless,
    Nonc,
}

/// Queue/option assignment `(h, k, s)` stamped on a packet by the labeling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Label {
    pub hyperarc: usize,
    pub code: usize,
    pub flow: FlowId,
}

/// An intra-session coded packet: a linear combination of one generation's
/// originals, with the combination vector carried in the (uncoded) header.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedPacket {
    pub flow: FlowId,
    pub generation: u64,
    pub packet_id: u16,
    pub gen_size: u16,
    pub coeffs: Vec<u8>,
    pub payload: Vec<u8>,
    pub label: Option<Label>,
}

/// Header of one constituent inside an inter-coded transmission. Headers are not
/// themselves coded, so each constituent's identity, next hop, and coefficient
/// vector ride along in the clear.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstituentHeader {
    pub next_hop: NodeId,
    pub flow: FlowId,
    pub generation: u64,
    pub packet_id: u16,
    pub gen_size: u16,
    pub coeffs: Vec<u8>,
}

/// An inter-session (XOR) coded transmission of one packet per flow.
#[derive(Clone, Debug, PartialEq)]
pub struct InterCodedPacket {
    pub constituents: Vec<ConstituentHeader>,
    pub xor_payload: Vec<u8>,
}

impl InterCodedPacket {
    pub fn count(&self) -> usize {
        self.constituents.len()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CodingError {
    #[error("payload length mismatch: expected {expected}, got {got}")]
    PayloadLengthMismatch { expected: usize, got: usize },
    #[error("coefficient vector length {got} does not match generation size {expected}")]
    CoeffLengthMismatch { expected: usize, got: usize },
    #[error("loss probability {rho} saturates a redundancy denominator; flow is unservable")]
    UnservableLoss { rho: f64 },
    #[error("empty generation buffer")]
    EmptyBuffer,
    #[error("inter-code constituents must have pairwise-distinct flows")]
    RepeatedFlows,
    #[error("cannot decode: {unknown} constituents unknown")]
    Undecodable { unknown: usize },
    #[error("wire header truncated or malformed")]
    BadHeader,
    #[error("packets span multiple generations")]
    MixedGenerations,
}

// ---------------------------------------------------------------------------
// Intra-session encoding
// ---------------------------------------------------------------------------

/// Streaming incremental-additive encoder for one generation: the l-th coded
/// packet is the running sum p_1 + ... + p_l, emitted as soon as p_l arrives.
pub struct IncrementalEncoder {
    flow: FlowId,
    generation: u64,
    gen_size: u16,
    acc: Vec<u8>,
    emitted: u16,
}

impl IncrementalEncoder {
    pub fn new(flow: FlowId, generation: u64, gen_size: u16) -> Self {
        assert!(gen_size >= 1, "generation size must be >= 1");
        Self { flow, generation, gen_size, acc: Vec::new(), emitted: 0 }
    }

    pub fn is_full(&self) -> bool {
        self.emitted == self.gen_size
    }

    pub fn emitted(&self) -> u16 {
        self.emitted
    }

    /// Fold the next original into the running sum and emit the coded packet.
    pub fn push(&mut self, payload: &[u8]) -> Result<CodedPacket, CodingError> {
        assert!(!self.is_full(), "generation already complete");
        if self.acc.is_empty() {
            self.acc = payload.to_vec();
        } else {
            if payload.len() != self.acc.len() {
                return Err(CodingError::PayloadLengthMismatch {
                    expected: self.acc.len(),
                    got: payload.len(),
                });
            }
            for (a, p) in self.acc.iter_mut().zip(payload) {
                *a ^= p;
            }
        }
        self.emitted += 1;
        let mut coeffs = vec![0u8; self.gen_size as usize];
        for c in coeffs.iter_mut().take(self.emitted as usize) {
            *c = 1;
        }
        Ok(CodedPacket {
            flow: self.flow,
            generation: self.generation,
            packet_id: self.emitted - 1,
            gen_size: self.gen_size,
            coeffs,
            payload: self.acc.clone(),
            label: None,
        })
    }
}

/// Encode a whole generation at once: a_l = p_1 + ... + p_l. The coefficient
/// matrix is unit lower-triangular, so all G outputs always decode.
pub fn incremental_encode(
    flow: FlowId,
    generation: u64,
    payloads: &[Vec<u8>],
) -> Result<Vec<CodedPacket>, CodingError> {
    if payloads.is_empty() {
        return Err(CodingError::EmptyBuffer);
    }
    let mut enc = IncrementalEncoder::new(flow, generation, payloads.len() as u16);
    payloads.iter().map(|p| enc.push(p)).collect()
}

// ---------------------------------------------------------------------------
// Parity counts
// ---------------------------------------------------------------------------

/// Loss figures for one partner flow coded together with the flow under protection.
#[derive(Clone, Copy, Debug)]
pub struct CrossLoss {
    pub flow: FlowId,
    /// Loss on the overhearing link carrying s''s antidotes to s's next hop.
    pub rho_antidote: f64,
    /// Loss on s''s own direct link (used only by the stateless rule).
    pub rho_direct_partner: f64,
}

/// How many parities to inject for one (hyperarc, code, flow) allocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParityPlan {
    /// Parities protecting the flow's own direct transmissions, labeled with s.
    pub p_self: u32,
    /// Parities compensating each partner's antidote loss, labeled with that partner.
    pub p_cross: Vec<(FlowId, u32)>,
}

/// Ceiling with a tolerance so that exact-rational inputs (e.g. 4*0.25/0.5) do not
/// round up on floating-point dust.
fn ceil_tol(x: f64) -> u32 {
    let r = x.round();
    let v = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    v.max(0.0) as u32
}

/// Parity counts for a generation allocation of `g_alloc` packets of flow s:
/// self-parities cover direct loss at rate ceil(G rho/(1-rho)); cross-parities
/// cover each partner's antidote loss at ceil(G rho_a) (state) or
/// ceil(G rho_a/(1-rho_partner)) (stateless). `Nonc` requests nothing.
pub fn parity_counts(
    g_alloc: u32,
    rho_direct: f64,
    cross: &[CrossLoss],
    variant: Variant,
) -> Result<ParityPlan, CodingError> {
    if variant == Variant::Nonc {
        return Ok(ParityPlan { p_self: 0, p_cross: cross.iter().map(|c| (c.flow, 0)).collect() });
    }
    if rho_direct >= 1.0 {
        return Err(CodingError::UnservableLoss { rho: rho_direct });
    }
    let g = f64::from(g_alloc);
    let p_self = ceil_tol(g * rho_direct / (1.0 - rho_direct));
    let mut p_cross = Vec::with_capacity(cross.len());
    for c in cross {
        let p = match variant {
            Variant::State => ceil_tol(g * c.rho_antidote),
            Variant::Stateless => {
                if c.rho_direct_partner >= 1.0 {
                    return Err(CodingError::UnservableLoss { rho: c.rho_direct_partner });
                }
                ceil_tol(g * c.rho_antidote / (1.0 - c.rho_direct_partner))
            }
            Variant::Nonc => unreachable!(),
        };
        p_cross.push((c.flow, p));
    }
    Ok(ParityPlan { p_self, p_cross })
}

// ---------------------------------------------------------------------------
// Random-linear parities and rank decoding
// ---------------------------------------------------------------------------

/// Generate `n` parity packets as random linear combinations of the buffered
/// coded packets of one generation. Combination coefficients are uniform over
/// GF(2^8); draws whose resulting vector over the originals is all-zero are
/// rejected and retried.
pub fn rlnc_parities(
    buffer: &[CodedPacket],
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<CodedPacket>, CodingError> {
    let first = buffer.first().ok_or(CodingError::EmptyBuffer)?;
    let g = first.gen_size as usize;
    let plen = first.payload.len();
    for p in buffer {
        if p.flow != first.flow || p.generation != first.generation {
            return Err(CodingError::MixedGenerations);
        }
        if p.payload.len() != plen {
            return Err(CodingError::PayloadLengthMismatch { expected: plen, got: p.payload.len() });
        }
        if p.coeffs.len() != g {
            return Err(CodingError::CoeffLengthMismatch { expected: g, got: p.coeffs.len() });
        }
    }
    let mut next_id = buffer.iter().map(|p| p.packet_id).max().unwrap() + 1;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut coeffs = vec![0u8; g];
        let mut payload = vec![0u8; plen];
        // Retry until the combination is nonzero over the originals; only a
        // buffer spanning the zero space could loop, which EmptyBuffer rules out
        // short of adversarial all-zero inputs — bound the retries regardless.
        let mut ok = false;
        for _ in 0..10_000 {
            coeffs.iter_mut().for_each(|c| *c = 0);
            payload.iter_mut().for_each(|b| *b = 0);
            let mut any = false;
            for p in buffer {
                let r: u8 = rng.gen();
                any |= r != 0;
                gf256::mul_slice_xor(&mut coeffs, &p.coeffs, r);
                gf256::mul_slice_xor(&mut payload, &p.payload, r);
            }
            if any && coeffs.iter().any(|&c| c != 0) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(CodingError::EmptyBuffer);
        }
        out.push(CodedPacket {
            flow: first.flow,
            generation: first.generation,
            packet_id: next_id,
            gen_size: first.gen_size,
            coeffs,
            payload,
            label: None,
        });
        next_id += 1;
    }
    Ok(out)
}

/// Result of a rank-based decode attempt over one generation.
#[derive(Clone, Debug, PartialEq)]
pub enum IntraDecodeOutcome {
    /// Originals p_1..p_G, in order.
    Decoded(Vec<Vec<u8>>),
    /// Not yet full rank; how many independent combinations are held.
    NeedMore { rank: usize },
}

/// Gaussian elimination over GF(2^8) on the received packets of one generation.
pub fn intra_decode(
    received: &[CodedPacket],
    g: usize,
) -> Result<IntraDecodeOutcome, CodingError> {
    let mut rows: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    let mut plen = None;
    for p in received {
        if p.coeffs.len() != g {
            return Err(CodingError::CoeffLengthMismatch { expected: g, got: p.coeffs.len() });
        }
        match plen {
            None => plen = Some(p.payload.len()),
            Some(l) if l != p.payload.len() => {
                return Err(CodingError::PayloadLengthMismatch { expected: l, got: p.payload.len() })
            }
            _ => {}
        }
        rows.push((p.coeffs.clone(), p.payload.clone()));
    }
    // Forward elimination to row echelon form; pivot[j] = row index for column j.
    let mut pivot: Vec<Option<usize>> = vec![None; g];
    let mut rank = 0;
    for r in 0..rows.len() {
        for j in 0..g {
            let c = rows[r].0[j];
            if c == 0 {
                continue;
            }
            if let Some(pr) = pivot[j] {
                let (head, tail) = if pr < r { rows.split_at_mut(r) } else { unreachable!() };
                let prow = &head[pr];
                gf256::mul_slice_xor(&mut tail[0].0, &prow.0, c);
                gf256::mul_slice_xor(&mut tail[0].1, &prow.1, c);
            } else {
                let ic = gf256::inv(c);
                gf256::scale_slice(&mut rows[r].0, ic);
                gf256::scale_slice(&mut rows[r].1, ic);
                pivot[j] = Some(r);
                rank += 1;
                break;
            }
        }
    }
    if rank < g {
        return Ok(IntraDecodeOutcome::NeedMore { rank });
    }
    // Back substitution, highest column first.
    for j in (0..g).rev() {
        let pr = pivot[j].unwrap();
        let prow = rows[pr].clone();
        for jj in 0..j {
            let rr = pivot[jj].unwrap();
            let c = rows[rr].0[j];
            if c != 0 {
                gf256::mul_slice_xor(&mut rows[rr].0, &prow.0, c);
                gf256::mul_slice_xor(&mut rows[rr].1, &prow.1, c);
            }
        }
    }
    Ok(IntraDecodeOutcome::Decoded(
        (0..g).map(|j| rows[pivot[j].unwrap()].1.clone()).collect(),
    ))
}

// ---------------------------------------------------------------------------
// Inter-session XOR coding
// ---------------------------------------------------------------------------

/// XOR the packets of `xi` (one per labeled flow) into a single transmission.
/// Headers stay uncoded: each constituent's identity, coefficients, and next hop
/// ride in the clear so receivers know what was combined.
///
/// Distinctness is judged on the *label* flow when a label is present: a parity
/// drawn from flow s's generation but labeled s' (cross-protection) may be coded
/// with a packet labeled s, even though both index s's generation.
pub fn inter_encode(
    xi: &[&CodedPacket],
    next_hops: &[NodeId],
) -> Result<InterCodedPacket, CodingError> {
    if xi.is_empty() {
        return Err(CodingError::EmptyBuffer);
    }
    assert_eq!(xi.len(), next_hops.len(), "one next hop per constituent");
    let mut flows: Vec<FlowId> =
        xi.iter().map(|p| p.label.map_or(p.flow, |l| l.flow)).collect();
    flows.sort_unstable();
    flows.dedup();
    if flows.len() != xi.len() {
        return Err(CodingError::RepeatedFlows);
    }
    let plen = xi[0].payload.len();
    let mut xor_payload = vec![0u8; plen];
    let mut constituents = Vec::with_capacity(xi.len());
    for (p, &nh) in xi.iter().zip(next_hops) {
        if p.payload.len() != plen {
            return Err(CodingError::PayloadLengthMismatch { expected: plen, got: p.payload.len() });
        }
        for (x, b) in xor_payload.iter_mut().zip(&p.payload) {
            *x ^= b;
        }
        constituents.push(ConstituentHeader {
            next_hop: nh,
            flow: p.flow,
            generation: p.generation,
            packet_id: p.packet_id,
            gen_size: p.gen_size,
            coeffs: p.coeffs.clone(),
        });
    }
    Ok(InterCodedPacket { constituents, xor_payload })
}

/// Strip all known constituents out of an inter-coded packet, recovering the one
/// missing constituent bit-exactly. `known` packets are matched to constituents
/// by (flow, generation, packet id).
pub fn inter_decode(
    coded: &InterCodedPacket,
    known: &[&CodedPacket],
) -> Result<CodedPacket, CodingError> {
    let mut payload = coded.xor_payload.clone();
    let mut missing = Vec::new();
    for c in &coded.constituents {
        match known
            .iter()
            .find(|p| p.flow == c.flow && p.generation == c.generation && p.packet_id == c.packet_id)
        {
            Some(p) => {
                if p.payload.len() != payload.len() {
                    return Err(CodingError::PayloadLengthMismatch {
                        expected: payload.len(),
                        got: p.payload.len(),
                    });
                }
                for (x, b) in payload.iter_mut().zip(&p.payload) {
                    *x ^= b;
                }
            }
            None => missing.push(c),
        }
    }
    match missing.as_slice() {
        [c] => Ok(CodedPacket {
            flow: c.flow,
            generation: c.generation,
            packet_id: c.packet_id,
            gen_size: c.gen_size,
            coeffs: c.coeffs.clone(),
            payload,
            label: None,
        }),
        m => Err(CodingError::Undecodable { unknown: m.len() }),
    }
}

// ---------------------------------------------------------------------------
// Wire formats (fixed little-endian layouts; stable within a build only)
// ---------------------------------------------------------------------------

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodingError> {
        if self.0.len() < n {
            return Err(CodingError::BadHeader);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u16(&mut self) -> Result<u16, CodingError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, CodingError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, CodingError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Intra header wire layout: flow u32 | generation u64 | packet_id u16 |
/// gen_size u16 | coeffs[gen_size] | payload.
pub fn encode_intra_wire(p: &CodedPacket) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + p.coeffs.len() + p.payload.len());
    put_u32(&mut buf, p.flow as u32);
    put_u64(&mut buf, p.generation);
    put_u16(&mut buf, p.packet_id);
    put_u16(&mut buf, p.gen_size);
    buf.extend_from_slice(&p.coeffs);
    buf.extend_from_slice(&p.payload);
    buf
}

pub fn decode_intra_wire(buf: &[u8]) -> Result<CodedPacket, CodingError> {
    let mut cur = Cursor(buf);
    let flow = cur.u32()? as FlowId;
    let generation = cur.u64()?;
    let packet_id = cur.u16()?;
    let gen_size = cur.u16()?;
    let coeffs = cur.take(gen_size as usize)?.to_vec();
    Ok(CodedPacket { flow, generation, packet_id, gen_size, coeffs, payload: cur.0.to_vec(), label: None })
}

/// Inter header wire layout: count u16 | count x (next_hop u32 | flow u32 |
/// generation u64 | packet_id u16 | gen_size u16 | coeffs[gen_size]) | xor_payload.
pub fn encode_inter_wire(p: &InterCodedPacket) -> Vec<u8> {
    let mut buf = Vec::new();
    put_u16(&mut buf, p.constituents.len() as u16);
    for c in &p.constituents {
        put_u32(&mut buf, c.next_hop as u32);
        put_u32(&mut buf, c.flow as u32);
        put_u64(&mut buf, c.generation);
        put_u16(&mut buf, c.packet_id);
        put_u16(&mut buf, c.gen_size);
        buf.extend_from_slice(&c.coeffs);
    }
    buf.extend_from_slice(&p.xor_payload);
    buf
}

pub fn decode_inter_wire(buf: &[u8]) -> Result<InterCodedPacket, CodingError> {
    let mut cur = Cursor(buf);
    let count = cur.u16()?;
    if count == 0 {
        return Err(CodingError::BadHeader);
    }
    let mut constituents = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let next_hop = cur.u32()? as NodeId;
        let flow = cur.u32()? as FlowId;
        let generation = cur.u64()?;
        let packet_id = cur.u16()?;
        let gen_size = cur.u16()?;
        let coeffs = cur.take(gen_size as usize)?.to_vec();
        constituents.push(ConstituentHeader { next_hop, flow, generation, packet_id, gen_size, coeffs });
    }
    Ok(InterCodedPacket { constituents, xor_payload: cur.0.to_vec() })
}

// ---------------------------------------------------------------------------
// Joint decoding buffer
// ---------------------------------------------------------------------------

/// Column coordinate: the `index`-th original packet of `(flow, generation)`.
pub type ColKey = (FlowId, u64, u16);

/// A recovered original packet.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedOriginal {
    pub flow: FlowId,
    pub generation: u64,
    pub index: u16,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
struct Row {
    /// Sparse coefficient segments, one per (flow, generation) the row touches.
    segs: BTreeMap<(FlowId, u64), Vec<u8>>,
    payload: Vec<u8>,
}

impl Row {
    fn lead(&self) -> Option<ColKey> {
        for (&(f, g), v) in &self.segs {
            if let Some(j) = v.iter().position(|&c| c != 0) {
                return Some((f, g, j as u16));
            }
        }
        None
    }

    fn coeff_at(&self, col: ColKey) -> u8 {
        self.segs.get(&(col.0, col.1)).map_or(0, |v| v[col.2 as usize])
    }

    /// Every column with a nonzero coefficient, in column order.
    fn columns(&self) -> Vec<ColKey> {
        let mut out = Vec::new();
        for (&(f, g), v) in &self.segs {
            for (j, &c) in v.iter().enumerate() {
                if c != 0 {
                    out.push((f, g, j as u16));
                }
            }
        }
        out
    }

    fn support(&self) -> usize {
        self.segs.values().map(|v| v.iter().filter(|&&c| c != 0).count()).sum()
    }

    /// self ^= c * other
    fn axpy(&mut self, other: &Row, c: u8) {
        if c == 0 {
            return;
        }
        for (key, ov) in &other.segs {
            let sv = self.segs.entry(*key).or_insert_with(|| vec![0; ov.len()]);
            gf256::mul_slice_xor(sv, ov, c);
        }
        if self.payload.len() < other.payload.len() {
            self.payload.resize(other.payload.len(), 0);
        }
        gf256::mul_slice_xor(&mut self.payload[..other.payload.len()], &other.payload, c);
        self.segs.retain(|_, v| v.iter().any(|&c| c != 0));
    }

    fn scale(&mut self, c: u8) {
        for v in self.segs.values_mut() {
            gf256::scale_slice(v, c);
        }
        gf256::scale_slice(&mut self.payload, c);
    }
}

/// Incremental Gaussian elimination over every generation a receiver has seen.
/// Native (intra-coded) receptions insert single-segment rows; inter-coded
/// receptions insert rows coupling all constituent generations. The matrix is
/// kept in reduced row-echelon form, so back-substitution happens on insert and
/// any row whose support shrinks to a single column yields a decoded original.
#[derive(Default)]
pub struct DecodeBuffer {
    rows: Vec<Row>,
    pivots: BTreeMap<ColKey, usize>,
    delivered: BTreeSet<ColKey>,
}

impl DecodeBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Independent combinations currently held for (flow, generation).
    pub fn rank_of(&self, flow: FlowId, generation: u64) -> usize {
        self.pivots.keys().filter(|&&(f, g, _)| f == flow && g == generation).count()
    }

    /// Every (flow, generation) segment the buffer currently holds pivots
    /// in — including generations known only through inter-coded rows, which
    /// never produce a bit-exact combination of their own.
    pub fn generations(&self) -> BTreeSet<(FlowId, u64)> {
        self.pivots.keys().map(|&(f, g, _)| (f, g)).collect()
    }

    /// Pivots of the generation contributed by rows supported *only* by it.
    /// A row still inter-coupled with another segment pivots here without
    /// being reducible to originals, so `rank_of` overstates recoverable
    /// knowledge; this count is what generation repair must be driven by.
    pub fn resolved_rank(&self, flow: FlowId, generation: u64) -> usize {
        self.rows
            .iter()
            .filter(|r| {
                r.segs.iter().all(|(&(f, g), v)| {
                    (f == flow && g == generation) || v.iter().all(|&c| c == 0)
                }) && r.lead().is_some_and(|(f, g, _)| f == flow && g == generation)
            })
            .count()
    }

    /// Whether the original (flow, generation, index) has been recovered.
    pub fn has_original(&self, col: ColKey) -> bool {
        self.delivered.contains(&col)
    }

    /// True when the buffer's row space already spans this combination:
    /// reducing a copy by the stored pivots leaves the zero row, so the packet
    /// carries no information this node does not already hold (its payload is
    /// derivable and any rank it could add is already present).
    /// Support of every buffered row as (flow, generation) sets — which
    /// segments each undecoded combination still couples.
    pub fn row_supports(&self) -> Vec<Vec<(FlowId, u64)>> {
        self.rows
            .iter()
            .map(|r| {
                r.columns().into_iter().map(|(f, g, _)| (f, g)).collect::<BTreeSet<_>>().into_iter().collect()
            })
            .collect()
    }

    pub fn covers(&self, p: &CodedPacket) -> bool {
        let mut segs = BTreeMap::new();
        segs.insert((p.flow, p.generation), p.coeffs.clone());
        let mut row = Row { segs, payload: Vec::new() };
        loop {
            let pivoted: Vec<(ColKey, usize)> = row
                .columns()
                .into_iter()
                .filter_map(|col| self.pivots.get(&col).map(|&pi| (col, pi)))
                .collect();
            if pivoted.is_empty() {
                break;
            }
            for (col, pi) in pivoted {
                let c = row.coeff_at(col);
                if c != 0 {
                    row.axpy(&self.rows[pi], c);
                }
            }
        }
        row.lead().is_none()
    }

    pub fn insert_native(&mut self, p: &CodedPacket) -> Vec<DecodedOriginal> {
        let mut segs = BTreeMap::new();
        segs.insert((p.flow, p.generation), p.coeffs.clone());
        self.insert_row(Row { segs, payload: p.payload.clone() })
    }

    pub fn insert_inter(&mut self, p: &InterCodedPacket) -> Vec<DecodedOriginal> {
        let mut segs: BTreeMap<(FlowId, u64), Vec<u8>> = BTreeMap::new();
        // Constituents sharing a generation (a data packet XORed with a parity of
        // the same generation under a different label) combine into one segment.
        for c in &p.constituents {
            let seg = segs
                .entry((c.flow, c.generation))
                .or_insert_with(|| vec![0; c.gen_size as usize]);
            for (s, v) in seg.iter_mut().zip(&c.coeffs) {
                *s ^= v;
            }
        }
        self.insert_row(Row { segs, payload: p.xor_payload.clone() })
    }

    fn insert_row(&mut self, mut row: Row) -> Vec<DecodedOriginal> {
        // Reduce every pivoted column of the incoming row, not only its lead:
        // a row that keeps a later pivoted column would never shrink to a unit
        // vector, stalling delivery even at full rank. Stored rows hold no
        // pivot column but their own (reduced row-echelon form), so each
        // elimination introduces only pivot-free columns and the sweep
        // terminates; the loop re-checks purely as a guard.
        loop {
            let pivoted: Vec<(ColKey, usize)> = row
                .columns()
                .into_iter()
                .filter_map(|col| self.pivots.get(&col).map(|&pi| (col, pi)))
                .collect();
            if pivoted.is_empty() {
                break;
            }
            for (col, pi) in pivoted {
                let c = row.coeff_at(col);
                if c != 0 {
                    let pivot_row = self.rows[pi].clone();
                    row.axpy(&pivot_row, c);
                }
            }
        }
        let Some(lead) = row.lead() else { return Vec::new() };
        let c = row.coeff_at(lead);
        row.scale(gf256::inv(c));
        let new_idx = self.rows.len();
        // Clear the new pivot column from every older row.
        for i in 0..self.rows.len() {
            let c = self.rows[i].coeff_at(lead);
            if c != 0 {
                let r = row.clone();
                self.rows[i].axpy(&r, c);
            }
        }
        self.rows.push(row);
        self.pivots.insert(lead, new_idx);
        self.harvest()
    }

    /// Collect rows that have become unit vectors and were not yet delivered.
    fn harvest(&mut self) -> Vec<DecodedOriginal> {
        let mut out = Vec::new();
        for row in &self.rows {
            if row.support() != 1 {
                continue;
            }
            let col = row.lead().unwrap();
            if self.delivered.insert(col) {
                out.push(DecodedOriginal {
                    flow: col.0,
                    generation: col.1,
                    index: col.2,
                    payload: row.payload.clone(),
                });
            }
        }
        out
    }

    /// Drop every row and pivot touching (flow, generation). Used once a
    /// generation is fully recovered or has gone stale; rows that still couple
    /// other generations to this one carry no standalone value and go too.
    pub fn purge(&mut self, flow: FlowId, generation: u64) {
        let key = (flow, generation);
        let mut rows = std::mem::take(&mut self.rows);
        rows.retain(|r| !r.segs.contains_key(&key));
        self.rows = rows;
        self.rebuild_pivots();
        self.delivered.retain(|&(f, g, _)| (f, g) != key);
    }

    fn rebuild_pivots(&mut self) {
        self.pivots.clear();
        for (i, r) in self.rows.iter().enumerate() {
            if let Some(l) = r.lead() {
                self.pivots.insert(l, i);
            }
        }
    }
}
