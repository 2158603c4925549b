use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// How positions after the prefix are treated before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMask {
    /// Softmax over the prefix only; later positions get weight 0.
    #[default]
    Prefix,
    /// Later positions hold a literal 0 score and take part in the softmax.
    ZeroFill,
}

/// `q_i = sum_{j <= i} softmax(s_0..s_i)_j * v_j` for every prefix `i`,
/// computed with one `n x n` masked score matrix.
///
/// `scores` is `n x 1`, `values` is `n x d`.
pub fn prefix_attention<F: Real>(
    g: &mut Graph<F>,
    scores: Var,
    values: Var,
    mask: AttentionMask,
) -> Result<Var> {
    let n = g.shape(scores)[0];
    if g.shape(scores) != [n, 1] || g.shape(values)[0] != n {
        return Err(Error::Shape {
            op: "prefix_attention",
            left: g.shape(scores).to_vec(),
            right: g.shape(values).to_vec(),
        });
    }
    let ones = g.constant(Tensor::full(vec![n, 1], F::one()));
    let st = g.transpose(scores);
    // Row i of the broadcast matrix is [s_0, ..., s_{n-1}].
    let s = g.matmul(ones, st)?;
    let valid: Vec<usize> = (1..=n).collect();
    let alpha = match mask {
        AttentionMask::Prefix => g.masked_softmax_rows(s, &valid)?,
        AttentionMask::ZeroFill => g.zero_filled_softmax_rows(s, &valid)?,
    };
    g.matmul(alpha, values)
}

/// Dwell-time attention over one session: keys `p_i = tanh(h_time_i W_s +
/// b_s)`, scores `p_i . h_session_i`, prefix softmax, mix of `h_session`.
pub fn triangle_attention<F: Real>(
    g: &mut Graph<F>,
    h_session: Var,
    h_time: Var,
    w_s: Var,
    b_s: Var,
    mask: AttentionMask,
) -> Result<Var> {
    let scores = attention_scores(g, h_session, h_time, w_s, b_s)?;
    prefix_attention(g, scores, h_session, mask)
}

fn attention_scores<F: Real>(
    g: &mut Graph<F>,
    h_session: Var,
    h_time: Var,
    w_s: Var,
    b_s: Var,
) -> Result<Var> {
    if g.shape(h_session) != g.shape(h_time) {
        return Err(Error::Shape {
            op: "triangle_attention",
            left: g.shape(h_session).to_vec(),
            right: g.shape(h_time).to_vec(),
        });
    }
    let p = g.matmul(h_time, w_s)?;
    let p = g.add(p, b_s)?;
    let p = g.tanh(p);
    g.row_dot(p, h_session)
}

/// Reference implementation that rebuilds the attention block from scratch
/// for every prefix length.
pub fn naive_prefix_attention<F: Real>(
    g: &mut Graph<F>,
    h_session: Var,
    h_time: Var,
    w_s: Var,
    b_s: Var,
) -> Result<Var> {
    let n = g.shape(h_session)[0];
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let idx: Vec<(Var, usize)> = (0..=i).map(|j| (h_session, j)).collect();
        let hs = g.gather_rows(&idx)?;
        let idx: Vec<(Var, usize)> = (0..=i).map(|j| (h_time, j)).collect();
        let ht = g.gather_rows(&idx)?;
        let s = attention_scores(g, hs, ht, w_s, b_s)?;
        let st = g.transpose(s);
        let alpha = g.masked_softmax_rows(st, &[i + 1])?;
        let q = g.matmul(alpha, hs)?;
        rows.push((q, 0));
    }
    g.gather_rows(&rows)
}

/// `alpha = softmax(p_i . e_u)` over all `n` rows of `p_seq`; `e_u` is
/// `1 x d` and already projected to the width of `p_seq`. Returns `1 x n`.
pub fn user_attention<F: Real>(g: &mut Graph<F>, p_seq: Var, e_u: Var) -> Result<Var> {
    let n = g.shape(p_seq)[0];
    let s = g.matmul_nt(e_u, p_seq)?;
    g.masked_softmax_rows(s, &[n])
}

/// `tanh([h, e_u] W + b)`: user profile fused by concatenation.
pub fn fuse_user_cat<F: Real>(g: &mut Graph<F>, h: Var, e_u: Var, w: Var, b: Var) -> Result<Var> {
    let cat = g.concat_cols(h, e_u)?;
    let z = g.matmul(cat, w)?;
    let z = g.add(z, b)?;
    Ok(g.tanh(z))
}
