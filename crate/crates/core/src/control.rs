//! Bernoulli acceptance: `u = 1` iff a uniform draw `r ∈ [0, 1)` is below ψ.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::rng::CounterRng;

/// One per-step record of the control decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    #[serde(rename = "k")]
    pub step: u64,
    pub psi: f64,
    pub d_sq: Option<f64>,
    pub draw: f64,
    pub accepted: bool,
}

/// Draws exactly one uniform variate, whatever the outcome, so the RNG
/// position after `n` decisions doesn't depend on the acceptances.
pub fn decide(psi: f64, rng: &mut CounterRng, step: u64, d_sq: Option<f64>) -> Decision {
    debug_assert!((0.0..=1.0).contains(&psi), "psi out of range: {psi}");
    let draw = rng.uniform();
    Decision {
        step,
        psi,
        d_sq,
        draw,
        accepted: draw < psi,
    }
}

pub fn write_decisions_jsonl<W: Write>(decisions: &[Decision], mut out: W) -> io::Result<()> {
    for d in decisions {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
