//! Per-modality projections, the cross-modal contrastive loss and fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{he_uniform, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `d_t × d_z`
    pub theta_t: Tensor,
    /// `d_v × d_z`
    pub theta_v: Tensor,
    /// `2·d_z × d_z`
    pub w_a: Tensor,
    /// Contrastive temperature.
    #[serde(serialize_with = "crate::io::ser_f64")]
    pub xi: f64,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(d_t: usize, d_v: usize, d_z: usize, xi: f64, rng: &mut R) -> Self {
        EncoderParams {
            theta_t: he_uniform(d_t, d_z, rng),
            theta_v: he_uniform(d_v, d_z, rng),
            w_a: he_uniform(2 * d_z, d_z, rng),
            xi,
        }
    }

    pub fn d_z(&self) -> usize {
        self.w_a.cols()
    }
}

/// `(x^t·θ^t, x^v·θ^v)`.
pub fn project(xt: &Tensor, xv: &Tensor, params: &EncoderParams) -> Result<(Tensor, Tensor)> {
    if xt.rows() != xv.rows() {
        return Err(shape_err!(
            "{} text rows vs {} image rows",
            xt.rows(),
            xv.rows()
        ));
    }
    Ok((xt.matmul(&params.theta_t)?, xv.matmul(&params.theta_v)?))
}

/// `[z^t ; z^v]·W_A`, row-wise.
pub fn fuse(zt: &Tensor, zv: &Tensor, w_a: &Tensor) -> Result<Tensor> {
    zt.concat_cols(zv)?.matmul(w_a)
}

/// Symmetric cross-modal contrastive loss over cosine similarities.
///
/// For each sample `i` the positive pair is `(z_i^t, z_i^v)`; the negatives
/// are `(z_i^t, z_j^v)` and `(z_j^t, z_i^v)` for every `j ≠ i`. The positive
/// pair is not part of the denominator.
pub fn contrastive_loss(zt: &Tensor, zv: &Tensor, xi: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(zt.clone());
    let b = tape.constant(zv.clone());
    let loss = contrastive_loss_tape(&mut tape, a, b, xi)?;
    tape.value(loss).item()
}

/// Tape version of [`contrastive_loss`].
pub fn contrastive_loss_tape(tape: &mut Tape, zt: Var, zv: Var, xi: f64) -> Result<Var> {
    let (n, d) = (tape.value(zt).rows(), tape.value(zt).cols());
    if tape.value(zv).shape() != tape.value(zt).shape() {
        return Err(shape_err!(
            "modality features {:?} vs {:?}",
            tape.value(zt).shape(),
            tape.value(zv).shape()
        ));
    }
    if n < 2 {
        return Err(Error::Input(format!(
            "contrastive loss needs at least 2 rows, got {n}"
        )));
    }
    if !(xi > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {xi}"
        )));
    }
    for (name, v) in [("text", zt), ("image", zv)] {
        let t = tape.value(v);
        if let Some(r) = (0..n).find(|&r| t.row_slice(r).iter().all(|&x| x == 0.0)) {
            return Err(Error::Numerical(format!(
                "{name} feature row {r} has zero norm (of {d} dims); cosine undefined"
            )));
        }
    }
    let nt = normalize_rows(tape, zt)?;
    let nv = normalize_rows(tape, zv)?;
    let nvt = tape.transpose(nv)?;
    let cos = tape.matmul(nt, nvt)?;
    // cosines are at most 1, so shifting by 1/ξ keeps every exponent ≤ 0
    let s = tape.affine(cos, 1.0 / xi, -1.0 / xi)?;
    let es = tape.exp(s)?;
    let mut off = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        off.data_mut()[i * n + i] = 0.0;
    }
    let mask = tape.constant(off);
    let neg = tape.mul(es, mask)?;
    let neg_t = tape.transpose(neg)?;
    let by_text = tape.sum_cols(neg)?;
    let by_image = tape.sum_cols(neg_t)?;
    let denom = tape.add(by_text, by_image)?;
    let log_denom = tape.log(denom)?;
    let pos = tape.diag(s)?;
    let per_row = tape.sub(log_denom, pos)?;
    tape.mean(per_row)
}

fn normalize_rows(tape: &mut Tape, z: Var) -> Result<Var> {
    let sq = tape.square(z)?;
    let ss = tape.sum_cols(sq)?;
    let norm = tape.sqrt(ss)?;
    tape.div_col(z, norm)
}
