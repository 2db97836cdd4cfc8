//! Interaction Intensifier: a per-image vector β computed from the human
//! channel re-weights every object channel.
//!
//! `β = sigmoid(fc2(relu(fc1(flatten(f_h)))))`, `f'_o[k] = β_k · f_o[k]`.
//! The MLP reads the whole `H·W` human plane, so β has one entry per object
//! class and no spatial index.

use crate::netops::{NetError, ParamStore, Tape, Var};

pub const FC1_W: &str = "iim.fc1.w";
pub const FC1_B: &str = "iim.fc1.b";
pub const FC2_W: &str = "iim.fc2.w";
pub const FC2_B: &str = "iim.fc2.b";

/// Registers the two fully connected layers: `H·W → hidden → K`.
pub fn init_params(
    store: &mut ParamStore,
    seed: u64,
    plane: usize,
    hidden: usize,
    num_classes: usize,
) -> Result<(), NetError> {
    store.init_uniform(seed, FC1_W, &[hidden, plane], plane)?;
    store.init_uniform(seed, FC1_B, &[hidden], plane)?;
    store.init_uniform(seed, FC2_W, &[num_classes, hidden], hidden)?;
    store.init_uniform(seed, FC2_B, &[num_classes], hidden)?;
    Ok(())
}

/// Channel 0 of `f_ho` as `f_h`, channels `1..=K` as `f_o`.
pub fn iim_split(tape: &mut Tape, f_ho: Var) -> Result<(Var, Var), NetError> {
    let c = tape.shape(f_ho)[0];
    if c < 2 {
        return Err(NetError::Shape(format!(
            "iim_split: need 1+K ≥ 2 channels, got {c}"
        )));
    }
    let f_h = tape.slice_channels(f_ho, 0, 1)?;
    let f_o = tape.slice_channels(f_ho, 1, c - 1)?;
    Ok((f_h, f_o))
}

/// Returns `concat(f_h, β·f_o)` (same shape as `f_ho`) and `β`.
pub fn iim_forward(tape: &mut Tape, store: &ParamStore, f_ho: Var) -> Result<(Var, Var), NetError> {
    let shape = tape.shape(f_ho).to_vec();
    if shape.len() != 3 {
        return Err(NetError::Shape(format!("iim_forward: expected (1+K)×H×W, got {shape:?}")));
    }
    let (f_h, f_o) = iim_split(tape, f_ho)?;
    let flat = tape.reshape(f_h, &[shape[1] * shape[2]])?;
    let (w1, b1) = (tape.param(store, FC1_W)?, tape.param(store, FC1_B)?);
    let (w2, b2) = (tape.param(store, FC2_W)?, tape.param(store, FC2_B)?);
    let hidden = tape.fully_connected(flat, w1, b1)?;
    let hidden = tape.relu(hidden);
    let logits = tape.fully_connected(hidden, w2, b2)?;
    let beta = tape.sigmoid(logits);
    let scaled = tape.scale_channels(f_o, beta)?;
    let out = tape.concat_channels(&[f_h, scaled])?;
    Ok((out, beta))
}
