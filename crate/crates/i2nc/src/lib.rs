//! A desk-scale laboratory for one-hop wireless network coding.
//!
//! The crate has two engines over a shared scenario model:
//!
//! * [`opt`] — a numerical solver for the decomposed network-utility-maximization
//!   problem behind joint intra-/inter-session coding (`state` and `stateless`
//!   variants, plus a no-coding baseline).
//! * [`sim`] — a packet-level, slotted simulator of the node algorithms: labeling,
//!   inter-session XOR coding over intra-coded generations, parity injection,
//!   loss estimation, and retransmission policies (`i2nc_state`, `i2nc_stateless`,
//!   `cope`, `nonc` schemes).
//!
//! Scenarios (topology, flows, codebooks, conflict cliques, loss) live in
//! [`topology`] and [`loss`]; [`scenario`] parses them from files; [`sweep`]
//! runs loss-rate sweeps and writes CSV. The `i2nc` binary exposes all of it.

pub mod coding;
pub mod gf256;
pub mod loss;
pub mod opt;
pub mod scenario;
pub mod sim;
pub mod sweep;
pub mod topology;

/// Guide chapters double as doc-tests so the book's snippets stay compiled.
#[cfg(any())] // re-enabled when the book lands
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $path:literal) => {
            #[doc = include_str!($path)]
            mod $name {}
        };
    }
    chapter!(introduction, "../../../book/src/introduction.md");
    chapter!(model, "../../../book/src/model.md");
    chapter!(optimizer, "../../../book/src/optimizer.md");
    chapter!(coding, "../../../book/src/coding.md");
    chapter!(simulator, "../../../book/src/simulator.md");
    chapter!(cli, "../../../book/src/cli.md");
}
