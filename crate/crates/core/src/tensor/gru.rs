use super::{Graph, TensorError, Var};
use crate::Scalar;

/// Graph handles for one GRU layer.
///
/// Input weights are `[inputs, units]`, recurrent weights `[units, units]`,
/// biases `[units]`.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_reset: Var,
    pub w_update: Var,
    pub w_cand: Var,
    pub u_reset: Var,
    pub u_update: Var,
    pub u_cand: Var,
    pub b_reset: Var,
    pub b_update: Var,
    pub b_cand: Var,
}

fn gate<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    w: Var,
    u: Var,
    b: Var,
) -> Result<Var, TensorError> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add_bias(s, b)
}

/// One GRU step: `x` is `[B, inputs]`, `h` is `[B, units]`.
///
/// ```text
/// r  = σ(x·Wr + h·Ur + br)
/// z  = σ(x·Wz + h·Uz + bz)
/// ĥ  = tanh(x·Wh + (r⊙h)·Uh + bh)
/// h' = (1 − z)⊙h + z⊙ĥ
/// ```
pub fn gru_cell<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    h: Var,
    p: &GruParams,
) -> Result<Var, TensorError> {
    let r_pre = gate(g, x, h, p.w_reset, p.u_reset, p.b_reset)?;
    let r = g.sigmoid(r_pre);
    let z_pre = gate(g, x, h, p.w_update, p.u_update, p.b_update)?;
    let z = g.sigmoid(z_pre);
    let rh = g.mul(r, h)?;
    let c_pre = gate(g, x, rh, p.w_cand, p.u_cand, p.b_cand)?;
    let cand = g.tanh(c_pre);
    // (1 − z)⊙h + z⊙ĥ  ==  h + z⊙(ĥ − h)
    let delta = g.sub(cand, h)?;
    let step = g.mul(z, delta)?;
    g.add(h, step)
}
