use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bpr,
    Top1,
    #[default]
    Hinge,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpr" => Ok(LossKind::Bpr),
            "top1" => Ok(LossKind::Top1),
            "hinge" => Ok(LossKind::Hinge),
            _ => Err(Error::Config(format!("unknown loss {s:?}"))),
        }
    }
}

/// Mean pairwise loss over every `(row, negative)` pair.
///
/// `pos` is `R x 1` and `neg` is `R x k`. TOP1 and hinge penalize the
/// negative score rising toward the positive one; `literal` swaps to the
/// positive-oriented forms `sigma(pos - neg) + sigma(pos^2)` and
/// `max(pos - neg + 1, 0)`.
pub fn pairwise_loss<F: Real>(
    g: &mut Graph<F>,
    kind: LossKind,
    pos: Var,
    neg: Var,
    literal: bool,
) -> Result<Var> {
    let (r, k) = (g.shape(neg)[0], g.shape(neg)[1]);
    if g.shape(pos) != [r, 1] {
        return Err(Error::Shape {
            op: "pairwise_loss",
            left: g.shape(pos).to_vec(),
            right: vec![r, k],
        });
    }
    for (name, v, width) in [("positive", pos, 1), ("negative", neg, k)] {
        if let Some(i) = g.value(v).data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{name} score of lane {} is not finite",
                i / width
            )));
        }
    }
    // neg - pos, broadcast over columns.
    let diff = g.sub(neg, pos)?;
    let per_pair = match (kind, literal) {
        (LossKind::Bpr, _) => {
            let m = g.scale(diff, F::from_f64_lossy(-1.0));
            let ls = g.log_sigmoid(m);
            g.scale(ls, F::from_f64_lossy(-1.0))
        }
        (LossKind::Top1, false) => {
            let a = g.sigmoid(diff);
            let sq = g.square(neg);
            let b = g.sigmoid(sq);
            g.add(a, b)?
        }
        (LossKind::Top1, true) => {
            let m = g.scale(diff, F::from_f64_lossy(-1.0));
            let a = g.sigmoid(m);
            let ones = g.constant(crate::autodiff::Tensor::full(vec![1, k], F::one()));
            let p = g.matmul(pos, ones)?;
            let sq = g.square(p);
            let b = g.sigmoid(sq);
            g.add(a, b)?
        }
        (LossKind::Hinge, false) => {
            let m = g.add_scalar(diff, F::one());
            g.relu(m)
        }
        (LossKind::Hinge, true) => {
            let m = g.scale(diff, F::from_f64_lossy(-1.0));
            let m = g.add_scalar(m, F::one());
            g.relu(m)
        }
    };
    Ok(g.mean(per_pair))
}
