//! Splitting a flow tensor into `G` pattern streams with sigmoid gates.
//!
//! Each of the first `G − 1` patterns owns a gating MLP
//! `Ω_g = σ(ReLU([T_D ‖ T_W ‖ E]·W1)·W2)` and takes `X ⊙ Ω_g`; the last
//! pattern is the residual `X − Σ X_g`, so the streams always add back up to
//! the input.

use sfad_tensor::{Element, Tape, Var};

use crate::error::{Error, Result};

/// Weights of one gating MLP: `w1` `[2D + Nd, hidden]`, `w2` `[hidden, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w1: Var,
    pub w2: Var,
}

#[derive(Clone, Debug)]
pub struct PatternFlows {
    /// `G` streams shaped like the input.
    pub flows: Vec<Var>,
    /// `G − 1` gates shaped like the input with a single channel.
    pub ratios: Vec<Var>,
}

/// Decouples `x` (`[.., C]`) given per-position time lookups `daily`,
/// `weekly` (`[.., D]`, same leading shape as `x`) and node embeddings
/// `node_emb` already broadcast to `[.., Nd]`.
///
/// With no gates the single stream is `x` itself.
pub fn decouple<T: Element>(
    tape: &Tape<T>,
    x: Var,
    daily: Var,
    weekly: Var,
    node_emb: Option<Var>,
    gates: &[GateVars],
) -> Result<PatternFlows> {
    if gates.is_empty() {
        return Ok(PatternFlows { flows: vec![x], ratios: Vec::new() });
    }
    let node_emb = node_emb
        .ok_or_else(|| Error::config("decoupling into several patterns needs node embeddings"))?;
    let features = tape.concat(&[daily, weekly, node_emb], -1)?;
    let mut flows = Vec::with_capacity(gates.len() + 1);
    let mut ratios = Vec::with_capacity(gates.len());
    let mut taken: Option<Var> = None;
    for g in gates {
        let hidden = tape.relu(tape.matmul(features, g.w1)?);
        let omega = tape.sigmoid(tape.matmul(hidden, g.w2)?);
        let xg = tape.mul(x, omega)?;
        taken = Some(match taken {
            None => xg,
            Some(t) => tape.add(t, xg)?,
        });
        flows.push(xg);
        ratios.push(omega);
    }
    flows.push(tape.sub(x, taken.expect("at least one gate"))?);
    Ok(PatternFlows { flows, ratios })
}
