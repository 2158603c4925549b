use rand::Rng;

use super::{log_sigmoid, sigmoid, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

/// How the second operand of a binary op is broadcast against the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    LogSigmoid,
    Relu,
    Square,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        a_t: bool,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Scale {
        x: Var,
        c: F,
    },
    AddScalar {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    MaskedSoftmax {
        x: Var,
        valid_len: Vec<usize>,
        zero_fill: bool,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        sources: Vec<(Var, usize)>,
    },
    GatherCols {
        x: Var,
        idx: Vec<usize>,
        k: usize,
    },
    PairLookup {
        table: Var,
        rows: Vec<usize>,
        cols: Vec<usize>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    GatherElems {
        sources: Vec<Option<(Var, usize)>>,
    },
    LaneMix {
        w: Var,
        v: Var,
    },
    Transpose {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumCols {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Append-only computation graph.
///
/// Node ids are handed out in insertion order, so every node's inputs
/// precede it and the backward pass is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    macs: u64,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: 0,
            backward_done: false,
        }
    }

    /// Clears every node so the graph can be rebuilt.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.macs = 0;
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations performed by forward passes so far.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of a node after [`Graph::backward`]; `None` for nodes that do
    /// not require gradients.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, mut value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&i| self.needs_grad(i));
        value.set_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, false, b, false)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, false, b, true)
    }

    fn matmul_ext(&mut self, a: Var, a_t: bool, b: Var, b_t: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, ka) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            ka,
            n,
            self.data(a),
            a_t,
            self.data(b),
            b_t,
            F::zero(),
            &mut out,
        );
        self.macs += (m * ka * n) as u64;
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k: ka,
                n,
            },
            &[a, b],
        ))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if sa.len() == 2 && sb.len() == 2 {
            if rb == 1 && cb == 1 {
                return Ok(Broadcast::Scalar);
            }
            if rb == 1 && cb == ca {
                return Ok(Broadcast::Row);
            }
            if cb == 1 && rb == ra {
                return Ok(Broadcast::Col);
            }
        }
        Err(shape_err(op, sa, sb))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let bc = self.broadcast_kind(name, a, b)?;
        let (_, cols) = self.dims(a);
        let av = self.data(a);
        let bv = self.data(b);
        let out: Vec<F> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => bv[i],
                    Broadcast::Row => bv[i % cols],
                    Broadcast::Col => bv[i / cols],
                    Broadcast::Scalar => bv[0],
                };
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        self.macs += out.len() as u64;
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Binary { kind, a, b, bc }, &[a, b]))
    }

    /// Elementwise sum. `b` may also be a `1 x n` row, an `m x 1` column or
    /// a `1 x 1` scalar broadcast against the `m x n` operand `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    /// Elementwise difference, broadcasting `b` like [`Graph::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product, broadcasting `b` like [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let out: Vec<F> = self
            .data(x)
            .iter()
            .map(|&v| match kind {
                Unary::Tanh => v.tanh(),
                Unary::Sigmoid => sigmoid(v),
                Unary::LogSigmoid => log_sigmoid(v),
                Unary::Relu => v.max(F::zero()),
                Unary::Square => v * v,
            })
            .collect();
        self.macs += out.len() as u64;
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::LogSigmoid, x)
    }

    /// `max(x, 0)`; the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let out: Vec<F> = self.data(x).iter().map(|&v| v * c).collect();
        self.macs += out.len() as u64;
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        let out: Vec<F> = self.data(x).iter().map(|&v| v + c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push(value, Op::AddScalar { x }, &[x])
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)`, so nothing
    /// needs rescaling at evaluation time.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.data(x).len())
            .map(|_| {
                if rng.random::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<F> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Row-wise softmax over a prefix of each row.
    ///
    /// Row `i` is normalized over its first `valid_len[i]` entries and the
    /// remaining entries are exactly zero. The input may be rectangular.
    pub fn masked_softmax_rows(&mut self, x: Var, valid_len: &[usize]) -> Result<Var> {
        self.masked_softmax_impl(x, valid_len, false)
    }

    /// Literal zero-fill variant: entries past `valid_len[i]` are replaced
    /// by a score of 0 and still take part in the normalization. Kept only
    /// for ablations; it is not causal when used for attention.
    pub fn zero_filled_softmax_rows(&mut self, x: Var, valid_len: &[usize]) -> Result<Var> {
        self.masked_softmax_impl(x, valid_len, true)
    }

    fn masked_softmax_impl(&mut self, x: Var, valid_len: &[usize], zero_fill: bool) -> Result<Var> {
        let (r, n) = self.dims(x);
        if valid_len.len() != r {
            return Err(shape_err(
                "masked_softmax_rows",
                &[r, n],
                &[valid_len.len()],
            ));
        }
        if let Some((i, &l)) = valid_len.iter().enumerate().find(|(_, &l)| l == 0 || l > n) {
            return Err(Error::Invalid(format!(
                "valid_len[{i}] = {l} outside 1..={n}"
            )));
        }
        let xs = self.data(x);
        let mut out = vec![F::zero(); r * n];
        for i in 0..r {
            let row = &xs[i * n..(i + 1) * n];
            let l = valid_len[i];
            let score = |j: usize| if j < l { row[j] } else { F::zero() };
            let width = if zero_fill { n } else { l };
            let max = (0..width).map(score).fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for j in 0..width {
                let e = (score(j) - max).exp();
                out[i * n + j] = e;
                total = total + e;
            }
            for o in &mut out[i * n..i * n + width] {
                *o = *o / total;
            }
        }
        self.macs += (r * n) as u64;
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::MaskedSoftmax {
                x,
                valid_len: valid_len.to_vec(),
                zero_fill,
            },
            &[x],
        ))
    }

    /// Gathers rows of a `V x d` table; backward scatter-adds.
    pub fn embedding(&mut self, table: Var, ids: &[usize], name: &str) -> Result<Var> {
        let (v, d) = self.dims(table);
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    table: name.to_string(),
                    index: id,
                    len: v,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Stacks single rows taken from arbitrary nodes into one matrix.
    pub fn gather_rows(&mut self, sources: &[(Var, usize)]) -> Result<Var> {
        let Some(&(first, _)) = sources.first() else {
            return Err(Error::Invalid("gather_rows needs at least one row".into()));
        };
        let d = self.dims(first).1;
        let mut out = Vec::with_capacity(sources.len() * d);
        for &(v, r) in sources {
            let (rows, cols) = self.dims(v);
            if cols != d {
                return Err(shape_err("gather_rows", &[rows, cols], &[d]));
            }
            if r >= rows {
                return Err(Error::Index {
                    table: "gather_rows source".into(),
                    index: r,
                    len: rows,
                });
            }
            out.extend_from_slice(&self.data(v)[r * d..(r + 1) * d]);
        }
        let inputs: Vec<Var> = sources.iter().map(|s| s.0).collect();
        let value = Tensor::matrix(sources.len(), d, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                sources: sources.to_vec(),
            },
            &inputs,
        ))
    }

    /// `out[i][j] = x[i][idx[i * k + j]]`, an `rows x k` result.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != r * k {
            return Err(shape_err("gather_cols", &[r, c], &[idx.len(), k]));
        }
        let xs = self.data(x);
        let mut out = Vec::with_capacity(r * k);
        for i in 0..r {
            for &j in &idx[i * k..(i + 1) * k] {
                if j >= c {
                    return Err(Error::Index {
                        table: "gather_cols".into(),
                        index: j,
                        len: c,
                    });
                }
                out.push(xs[i * c + j]);
            }
        }
        let value = Tensor::matrix(r, k, out)?;
        Ok(self.push(
            value,
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
                k,
            },
            &[x],
        ))
    }

    /// `out[n][p] = table[rows[p]][cols[n]]`, a `cols.len() x rows.len()`
    /// result.
    pub fn pair_lookup(
        &mut self,
        table: Var,
        rows: &[usize],
        cols: &[usize],
        name: &str,
    ) -> Result<Var> {
        let (v, t) = self.dims(table);
        let data = self.data(table);
        for &r in rows {
            if r >= v {
                return Err(Error::Index {
                    table: name.to_string(),
                    index: r,
                    len: v,
                });
            }
        }
        for &c in cols {
            if c >= t {
                return Err(Error::Index {
                    table: format!("{name} (columns)"),
                    index: c,
                    len: t,
                });
            }
        }
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for &c in cols {
            out.extend(rows.iter().map(|&r| data[r * t + c]));
        }
        let value = Tensor::matrix(cols.len(), rows.len(), out)?;
        Ok(self.push(
            value,
            Op::PairLookup {
                table,
                rows: rows.to_vec(),
                cols: cols.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(shape_err("concat_cols", &[ra, ca], &[rb, cb]));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&ad[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        let value = Tensor::matrix(ra, ca + cb, out)?;
        Ok(self.push(value, Op::ConcatCols { a, b }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xs = self.data(x);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        let value = Tensor::matrix(c, r, out).expect("same size");
        self.push(value, Op::Transpose { x }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xs = self.data(x);
        let s: F = xs.iter().copied().sum::<F>() / F::from_usize(xs.len().max(1)).unwrap();
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xs = self.data(x);
        let out: Vec<F> = (0..r)
            .map(|i| xs[i * c..(i + 1) * c].iter().copied().sum())
            .collect();
        self.macs += (r * c) as u64;
        let value = Tensor::matrix(r, 1, out).expect("same size");
        self.push(value, Op::SumCols { x }, &[x])
    }

    /// Builds an `rows x cols` matrix whose entry `e` (row-major) is the flat
    /// element `sources[e]` of another node, or zero for `None`.
    pub fn gather_elems(
        &mut self,
        rows: usize,
        cols: usize,
        sources: &[Option<(Var, usize)>],
    ) -> Result<Var> {
        if sources.len() != rows * cols {
            return Err(shape_err("gather_elems", &[rows, cols], &[sources.len()]));
        }
        let mut out = Vec::with_capacity(sources.len());
        let mut inputs = Vec::new();
        for src in sources {
            match *src {
                None => out.push(F::zero()),
                Some((v, i)) => {
                    let d = self.data(v);
                    if i >= d.len() {
                        return Err(Error::Index {
                            table: "gather_elems source".into(),
                            index: i,
                            len: d.len(),
                        });
                    }
                    out.push(d[i]);
                    inputs.push(v);
                }
            }
        }
        inputs.sort_unstable();
        inputs.dedup();
        let value = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(
            value,
            Op::GatherElems {
                sources: sources.to_vec(),
            },
            &inputs,
        ))
    }

    /// Per-row mixture: `out[b] = sum_l w[b][l] * v[b * L + l]` for
    /// `w: B x L` and `v: (B * L) x d`.
    pub fn lane_mix(&mut self, w: Var, v: Var) -> Result<Var> {
        let (b, l) = self.dims(w);
        let (vr, d) = self.dims(v);
        if vr != b * l {
            return Err(shape_err("lane_mix", &[b, l], &[vr, d]));
        }
        let wd = self.data(w);
        let vd = self.data(v);
        let mut out = vec![F::zero(); b * d];
        for i in 0..b {
            let o = &mut out[i * d..(i + 1) * d];
            for j in 0..l {
                let a = wd[i * l + j];
                let row = &vd[(i * l + j) * d..(i * l + j + 1) * d];
                for (x, &y) in o.iter_mut().zip(row) {
                    *x = *x + a * y;
                }
            }
        }
        self.macs += (b * l * d) as u64;
        let value = Tensor::matrix(b, d, out)?;
        Ok(self.push(value, Op::LaneMix { w, v }, &[w, v]))
    }

    /// Row-wise dot product of two equally shaped matrices (`r x 1`).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum_cols(p))
    }

    /// Reverse sweep from a scalar `loss`, filling the gradient of every
    /// node that requires one. Gradients from multiple uses are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Invalid(
                "backward already ran; reset the graph first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for id in (0..n).rev() {
            let Some(gy) = grads[id].take() else { continue };
            if !self.nodes[id].value.requires_grad() {
                continue;
            }
            self.propagate(id, &gy, &mut grads);
            grads[id] = Some(gy);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if node.value.requires_grad() {
                let len = node.value.len();
                node.value
                    .set_grad(Some(g.unwrap_or_else(|| vec![F::zero(); len])));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.needs_grad(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }

    fn propagate(&self, id: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = self.nodes[id].value.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                a_t,
                b_t,
                m,
                k,
                n,
            } => {
                if self.needs_grad(a) {
                    let bd = self.data(b);
                    let ga = self.acc(grads, a).unwrap();
                    if a_t {
                        F::gemm(k, n, m, bd, b_t, gy, true, F::one(), ga);
                    } else {
                        F::gemm(m, n, k, gy, false, bd, !b_t, F::one(), ga);
                    }
                }
                if self.needs_grad(b) {
                    let ad = self.data(a);
                    let gb = self.acc(grads, b).unwrap();
                    if b_t {
                        F::gemm(n, m, k, gy, true, ad, a_t, F::one(), gb);
                    } else {
                        F::gemm(k, m, n, ad, !a_t, gy, false, F::one(), gb);
                    }
                }
            }
            &Op::Binary { kind, a, b, bc } => {
                let cols = self.dims(a).1;
                let bidx = |i: usize| match bc {
                    Broadcast::Same => i,
                    Broadcast::Row => i % cols,
                    Broadcast::Col => i / cols,
                    Broadcast::Scalar => 0,
                };
                if self.needs_grad(a) {
                    let bd = self.data(b);
                    let ga = self.acc(grads, a).unwrap();
                    for (i, g) in gy.iter().enumerate() {
                        ga[i] = ga[i]
                            + match kind {
                                Binary::Add | Binary::Sub => *g,
                                Binary::Mul => *g * bd[bidx(i)],
                            };
                    }
                }
                if self.needs_grad(b) {
                    let ad = self.data(a);
                    let gb = self.acc(grads, b).unwrap();
                    for (i, g) in gy.iter().enumerate() {
                        let j = bidx(i);
                        gb[j] = gb[j]
                            + match kind {
                                Binary::Add => *g,
                                Binary::Sub => -*g,
                                Binary::Mul => *g * ad[i],
                            };
                    }
                }
            }
            &Op::Unary { kind, x } => {
                let xd = self.data(x);
                let gx = self.acc(grads, x).unwrap();
                let one = F::one();
                for i in 0..gy.len() {
                    let d = match kind {
                        Unary::Tanh => one - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (one - y[i]),
                        Unary::LogSigmoid => sigmoid(-xd[i]),
                        Unary::Relu => {
                            if xd[i] > F::zero() {
                                one
                            } else {
                                F::zero()
                            }
                        }
                        Unary::Square => (one + one) * xd[i],
                    };
                    gx[i] = gx[i] + gy[i] * d;
                }
            }
            &Op::Scale { x, c } => {
                let gx = self.acc(grads, x).unwrap();
                for (g, &d) in gx.iter_mut().zip(gy) {
                    *g = *g + d * c;
                }
            }
            &Op::AddScalar { x } => add_into(self.acc(grads, x).unwrap(), gy),
            Op::Dropout { x, mask } => {
                let gx = self.acc(grads, *x).unwrap();
                for i in 0..gy.len() {
                    gx[i] = gx[i] + gy[i] * mask[i];
                }
            }
            Op::MaskedSoftmax {
                x,
                valid_len,
                zero_fill,
            } => {
                let (r, n) = self.dims(*x);
                let gx = self.acc(grads, *x).unwrap();
                for i in 0..r {
                    let width = if *zero_fill { n } else { valid_len[i] };
                    let row = i * n..i * n + width;
                    let dot: F = row.clone().map(|j| y[j] * gy[j]).sum();
                    // Zero-filled entries were constants, so only the valid
                    // prefix receives gradient.
                    for j in i * n..i * n + valid_len[i] {
                        gx[j] = gx[j] + y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.dims(*table).1;
                let gt = self.acc(grads, *table).unwrap();
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &gy[row * d..(row + 1) * d]);
                }
            }
            Op::GatherRows { sources } => {
                let d = self.dims(Var(id)).1;
                for (row, &(v, r)) in sources.iter().enumerate() {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(&mut gv[r * d..(r + 1) * d], &gy[row * d..(row + 1) * d]);
                    }
                }
            }
            Op::GatherCols { x, idx, k } => {
                let (r, c) = self.dims(*x);
                let gx = self.acc(grads, *x).unwrap();
                for i in 0..r {
                    for j in 0..*k {
                        let t = i * c + idx[i * k + j];
                        gx[t] = gx[t] + gy[i * k + j];
                    }
                }
            }
            Op::PairLookup { table, rows, cols } => {
                let t = self.dims(*table).1;
                let gt = self.acc(grads, *table).unwrap();
                let p = rows.len();
                for (ni, &c) in cols.iter().enumerate() {
                    for (pi, &r) in rows.iter().enumerate() {
                        gt[r * t + c] = gt[r * t + c] + gy[ni * p + pi];
                    }
                }
            }
            &Op::ConcatCols { a, b } => {
                let (r, ca) = self.dims(a);
                let cb = self.dims(b).1;
                let w = ca + cb;
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..r {
                        add_into(&mut ga[i * ca..(i + 1) * ca], &gy[i * w..i * w + ca]);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..r {
                        add_into(&mut gb[i * cb..(i + 1) * cb], &gy[i * w + ca..(i + 1) * w]);
                    }
                }
            }
            Op::GatherElems { sources } => {
                for (e, src) in sources.iter().enumerate() {
                    if let Some((v, i)) = *src {
                        if let Some(gv) = self.acc(grads, v) {
                            gv[i] = gv[i] + gy[e];
                        }
                    }
                }
            }
            &Op::LaneMix { w, v } => {
                let (b, l) = self.dims(w);
                let d = self.dims(v).1;
                if self.needs_grad(w) {
                    let vd = self.data(v);
                    let gw = self.acc(grads, w).unwrap();
                    for i in 0..b {
                        let g = &gy[i * d..(i + 1) * d];
                        for j in 0..l {
                            let row = &vd[(i * l + j) * d..(i * l + j + 1) * d];
                            gw[i * l + j] =
                                gw[i * l + j] + g.iter().zip(row).map(|(&x, &y)| x * y).sum::<F>();
                        }
                    }
                }
                if self.needs_grad(v) {
                    let wd = self.data(w);
                    let gv = self.acc(grads, v).unwrap();
                    for i in 0..b {
                        let g = &gy[i * d..(i + 1) * d];
                        for j in 0..l {
                            let a = wd[i * l + j];
                            let row = &mut gv[(i * l + j) * d..(i * l + j + 1) * d];
                            for (x, &y) in row.iter_mut().zip(g) {
                                *x = *x + a * y;
                            }
                        }
                    }
                }
            }
            &Op::Transpose { x } => {
                let (r, c) = self.dims(x);
                let gx = self.acc(grads, x).unwrap();
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + gy[j * r + i];
                    }
                }
            }
            &Op::Sum { x } => {
                for g in self.acc(grads, x).unwrap().iter_mut() {
                    *g = *g + gy[0];
                }
            }
            &Op::Mean { x } => {
                let gx = self.acc(grads, x).unwrap();
                let s = gy[0] / F::from_usize(gx.len().max(1)).unwrap();
                for g in gx.iter_mut() {
                    *g = *g + s;
                }
            }
            &Op::SumCols { x } => {
                let c = self.dims(x).1;
                let gx = self.acc(grads, x).unwrap();
                for (i, g) in gx.iter_mut().enumerate() {
                    *g = *g + gy[i / c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph<f64>, r: usize, c: usize, v: &[f64]) -> Var {
        g.leaf(Tensor::from_f64(r, c, v).unwrap().with_grad())
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut g = Graph::<f64>::new();
        let i2 = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let b = mat(&mut g, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let c = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = mat(&mut g, 2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = mat(&mut g, 2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(p, b).unwrap();
        assert_eq!(g.value(c).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = mat(&mut g, 2, 3, &[0.0; 6]);
        let b = mat(&mut g, 2, 3, &[0.0; 6]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_basics() {
        let mut g = Graph::<f64>::new();
        let z = mat(&mut g, 1, 1, &[0.0]);
        let t = g.tanh(z);
        assert_eq!(g.value(t).data()[0], 0.0);
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data()[0], 0.5);
        let a = mat(&mut g, 1, 3, &[1.0, 2.0, 3.0]);
        let b = mat(&mut g, 1, 3, &[4.0, 5.0, 6.0]);
        let m = g.mul(a, b).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 10.0, 18.0]);
        let bad = mat(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(g.mul(a, bad).is_err());
    }

    #[test]
    fn masked_softmax_contracts() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, 1, 1, &[123.0]);
        let y = g.masked_softmax_rows(x, &[1]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);

        let x = mat(&mut g, 1, 3, &[2.5, 2.5, 2.5]);
        let y = g.masked_softmax_rows(x, &[3]).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = mat(&mut g, 1, 4, &[1.0, 2.0, 3.0, 99.0]);
        let y = g.masked_softmax_rows(x, &[3]).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z, 0.0];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.masked_softmax_rows(x, &[0]).is_err());
        assert!(g.masked_softmax_rows(x, &[5]).is_err());
    }

    #[test]
    fn zero_fill_softmax_gives_masked_entries_unit_weight() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, 1, 3, &[0.0, 7.0, 7.0]);
        let y = g.zero_filled_softmax_rows(x, &[1]).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_duplicate_ids_accumulate() {
        let mut g = Graph::<f64>::new();
        let t = mat(&mut g, 4, 2, &[0., 1., 2., 3., 4., 5., 6., 7.]);
        let e = g.embedding(t, &[2, 0], "items").unwrap();
        assert_eq!(g.value(e).data(), &[4., 5., 0., 1.]);

        let e = g.embedding(t, &[1, 1], "items").unwrap();
        let w = g.constant(Tensor::from_f64(2, 2, &[0.5, -1.0, 0.5, -1.0]).unwrap());
        let p = g.mul(e, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[0., 0., 1.0, -2.0, 0., 0., 0., 0.]);

        let mut g = Graph::<f64>::new();
        let t = mat(&mut g, 4, 2, &[0.0; 8]);
        let err = g.embedding(t, &[4], "items").unwrap_err();
        assert!(err.to_string().contains("items"));
    }

    #[test]
    fn backward_simple_cases() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, 2, 3, &[1., -2., 3., 0.5, 0., 7.]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));

        let mut g = Graph::<f64>::new();
        let vals = [1., -2., 3., 0.5];
        let x = mat(&mut g, 2, 2, &vals);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
        assert!(g.backward(s).is_err(), "second backward needs a reset");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = mat(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let mut g = Graph::<f64>::new();
        let a = mat(&mut g, 2, 2, &[1., 2., 3., 4.]);
        let row = mat(&mut g, 1, 2, &[10., 20.]);
        let col = mat(&mut g, 2, 1, &[1., -1.]);
        let s1 = g.add(a, row).unwrap();
        let s2 = g.mul(s1, col).unwrap();
        let l = g.sum(s2);
        g.backward(l).unwrap();
        assert_eq!(g.grad(row).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.grad(col).unwrap(), &[33.0, 37.0]);
        assert_eq!(g.grad(a).unwrap(), &[1.0, 1.0, -1.0, -1.0]);
    }
}
