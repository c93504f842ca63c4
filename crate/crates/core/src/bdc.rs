//! Brownian distance covariance between the channels of a token matrix.
//!
//! For `x` of shape `M x k` (tokens by channels), the channel Gram matrix
//! `K = xᵀx` gives squared column distances `Kii + Kjj - 2Kij`. These are
//! square-rooted element-wise and double-centered so that every row and
//! column of the result sums to zero.

use crate::error::{Error, Result};
use crate::numcore::{NodeId, Tape, Tensor};

/// Stabilizer added under the square root during training.
pub const DEFAULT_BDC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BdcMatrix {
    pub dim: usize,
    pub values: Tensor,
}

/// Record the BDC matrix of the `M x k` node `x` on the tape.
///
/// Built entirely from tape primitives so gradients flow to `x`.
pub fn bdc_node(tape: &mut Tape, x: NodeId, eps: f64) -> Result<NodeId> {
    let (m, k) = tape.shape(x);
    if m == 0 || k == 0 {
        return Err(Error::Param(format!("bdc needs at least one token and channel, got {m}x{k}")));
    }
    let x = canonical_row_order(tape, x)?;
    let xt = tape.transpose(x)?;
    let gram = tape.matmul(xt, x)?;

    // 2·sym(J (K∘I)) - 2K: entry (i, j) is Kii + Kjj - 2Kij.
    let eye = tape.constant(Tensor::eye(k));
    let ones = tape.constant(Tensor::ones(k, k));
    let diag = tape.hadamard(gram, eye)?;
    let col_diag = tape.matmul(ones, diag)?;
    let col_diag_t = tape.transpose(col_diag)?;
    let sym_sum = tape.add(col_diag, col_diag_t)?;
    let sym = tape.scale(sym_sum, 0.5)?;
    let two_sym = tape.scale(sym, 2.0)?;
    let two_gram = tape.scale(gram, 2.0)?;
    let sq_dist = tape.sub(two_sym, two_gram)?;

    let dist = tape.safe_sqrt(sq_dist, eps)?;

    // Â - (1/k)(JÂ + ÂJ) + (1/k²) JÂJ
    let kf = k as f64;
    let left = tape.matmul(ones, dist)?;
    let right = tape.matmul(dist, ones)?;
    let both = tape.add(left, right)?;
    let row_col = tape.scale(both, 1.0 / kf)?;
    let grand = tape.matmul(left, ones)?;
    let grand = tape.scale(grand, 1.0 / (kf * kf))?;
    let centered = tape.sub(dist, row_col)?;
    tape.add(centered, grand)
}

/// Reorder token rows into a value-determined order with a constant
/// permutation matrix, so later row sums do not depend on input order.
pub(crate) fn canonical_row_order(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let xv = tape.value(x);
    let m = xv.rows();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        xv.row(a)
            .iter()
            .zip(xv.row(b))
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut perm = Tensor::zeros(m, m);
    for (i, &src) in order.iter().enumerate() {
        perm.data_mut()[i * m + src] = 1.0;
    }
    let p = tape.constant(perm);
    tape.matmul(p, x)
}

pub fn bdc_forward(x: &Tensor, eps: f64) -> Result<BdcMatrix> {
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let b = bdc_node(&mut tape, xn, eps)?;
    Ok(BdcMatrix {
        dim: x.cols(),
        values: tape.value(b).clone(),
    })
}

/// Reference BDC by explicit column-pair distances and per-entry double
/// centering. Shares no code with [`bdc_forward`].
pub fn bdc_oracle(x: &Tensor) -> BdcMatrix {
    let (m, k) = x.shape();
    let mut a = vec![vec![0.0f64; k]; k];
    for i in 0..k {
        for j in 0..k {
            let mut s = 0.0;
            for t in 0..m {
                let d = x.get(t, i) - x.get(t, j);
                s += d * d;
            }
            a[i][j] = s.sqrt();
        }
    }
    let kf = k as f64;
    let row_mean: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_mean: Vec<f64> = (0..k).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / kf).collect();
    let grand = row_mean.iter().sum::<f64>() / kf;
    let mut out = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            out.push(a[i][j] - row_mean[i] - col_mean[j] + grand);
        }
    }
    BdcMatrix {
        dim: k,
        values: Tensor::new(k, k, out).expect("finite oracle"),
    }
}
