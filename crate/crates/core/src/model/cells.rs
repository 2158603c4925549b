use rand_chacha::ChaCha8Rng;

use super::{xavier, Cell};
use crate::autodiff::{Bindings, Graph, ParamStore, Real, Tensor, Var};
use crate::error::Result;

const GRU_GATES: [&str; 3] = ["z", "r", "h"];
const LSTM_GATES: [&str; 4] = ["i", "f", "o", "c"];

fn gates(cell: Cell) -> &'static [&'static str] {
    match cell {
        Cell::Gru => &GRU_GATES,
        Cell::Lstm => &LSTM_GATES,
    }
}

pub(super) fn init_cell<F: Real>(
    p: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cell: Cell,
    d_in: usize,
    d_h: usize,
) -> Result<()> {
    for gate in gates(cell) {
        p.insert(format!("{prefix}.w_{gate}"), xavier(rng, d_in, d_h), true)?;
        p.insert(format!("{prefix}.u_{gate}"), xavier(rng, d_h, d_h), true)?;
        p.insert(
            format!("{prefix}.b_{gate}"),
            Tensor::zeros(vec![1, d_h]),
            true,
        )?;
    }
    Ok(())
}

/// Input, recurrent and bias handles for each gate, in the order
/// `z, r, h` (GRU) or `i, f, o, c` (LSTM).
#[derive(Clone, Debug)]
pub struct CellWeights {
    pub cell: Cell,
    pub w: Vec<Var>,
    pub u: Vec<Var>,
    pub b: Vec<Var>,
}

impl CellWeights {
    pub fn bind(b: &Bindings, prefix: &str, cell: Cell) -> Result<Self> {
        let get = |kind: &str| -> Result<Vec<Var>> {
            gates(cell)
                .iter()
                .map(|g| b.var(&format!("{prefix}.{kind}_{g}")))
                .collect()
        };
        Ok(CellWeights {
            cell,
            w: get("w")?,
            u: get("u")?,
            b: get("b")?,
        })
    }
}

fn affine<F: Real>(g: &mut Graph<F>, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add(s, b)
}

/// `h = (1 - z) * h_prev + z * tanh(W_h x + U_h (r * h_prev) + b_h)`.
pub fn gru_step<F: Real>(g: &mut Graph<F>, x: Var, h_prev: Var, w: &CellWeights) -> Result<Var> {
    let z = affine(g, x, w.w[0], h_prev, w.u[0], w.b[0])?;
    let z = g.sigmoid(z);
    let r = affine(g, x, w.w[1], h_prev, w.u[1], w.b[1])?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, h_prev)?;
    let cand = affine(g, x, w.w[2], rh, w.u[2], w.b[2])?;
    let cand = g.tanh(cand);
    // h_prev + z * (cand - h_prev)
    let diff = g.sub(cand, h_prev)?;
    let upd = g.mul(z, diff)?;
    g.add(h_prev, upd)
}

/// Standard LSTM step; returns `(h, c)`.
pub fn lstm_step<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: &CellWeights,
) -> Result<(Var, Var)> {
    let i = affine(g, x, w.w[0], h_prev, w.u[0], w.b[0])?;
    let i = g.sigmoid(i);
    let f = affine(g, x, w.w[1], h_prev, w.u[1], w.b[1])?;
    let f = g.sigmoid(f);
    let o = affine(g, x, w.w[2], h_prev, w.u[2], w.b[2])?;
    let o = g.sigmoid(o);
    let cand = affine(g, x, w.w[3], h_prev, w.u[3], w.b[3])?;
    let cand = g.tanh(cand);
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}
