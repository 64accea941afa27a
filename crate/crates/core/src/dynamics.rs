//! Environment model: a diagonal Gaussian over fake-class features whose mean
//! and variance evolve under learned ODE fields.
//!
//! Both moments are encoded into a hidden space with `W_E`, integrated from
//! `t0 = 1` to the query time, and decoded with `W_D`. The variance channel is
//! encoded through the inverse softplus and decoded through softplus, so it
//! stays positive and the identity flow reproduces the initial state exactly.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{he_uniform, linear, softplus, softplus_inverse, Tape, Tensor, Var};
use crate::odeint::{dopri5_integrate, dopri5_integrate_differentiable, OdeProblem, SolverConfig};

/// Smallest variance any estimate reports.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Time of the first event, where the initial state lives.
pub const T0: f64 = 1.0;

/// Diagonal Gaussian; `mean` and `var` are `1 × d` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvGaussian {
    pub mean: Tensor,
    pub var: Tensor,
    pub sample_count: usize,
}

impl EnvGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Moments of the event-1 fake-class features, accumulated while event 1
/// trains and frozen afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub frozen: bool,
    #[serde(serialize_with = "crate::io::ser_vec")]
    pub sum: Vec<f64>,
    #[serde(serialize_with = "crate::io::ser_vec")]
    pub sum_sq: Vec<f64>,
    pub count: usize,
}

impl InitialState {
    pub fn new(d_env: usize) -> Self {
        InitialState {
            frozen: false,
            sum: vec![0.0; d_env],
            sum_sq: vec![0.0; d_env],
            count: 0,
        }
    }

    /// Adds environment-space rows to the running moments. No effect once frozen.
    pub fn accumulate(&mut self, rows: &Tensor) -> Result<()> {
        if self.frozen {
            return Ok(());
        }
        if rows.cols() != self.sum.len() {
            return Err(shape_err!(
                "{} columns for a {}-dim state",
                rows.cols(),
                self.sum.len()
            ));
        }
        for r in 0..rows.rows() {
            for (c, &v) in rows.row_slice(r).iter().enumerate() {
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += rows.rows();
        Ok(())
    }

    /// Clears the running moments. No effect once frozen.
    pub fn reset(&mut self) {
        if !self.frozen {
            *self = InitialState::new(self.sum.len());
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// The current estimate, or `None` with fewer than two rows seen.
    pub fn gaussian(&self) -> Option<EnvGaussian> {
        if self.count < 2 {
            return None;
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let var = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| (sq / n - m * m).max(VARIANCE_FLOOR))
            .collect::<Vec<_>>();
        let d = mean.len();
        Some(EnvGaussian {
            mean: Tensor::from_parts(vec![1, d], mean),
            var: Tensor::from_parts(vec![1, d], var),
            sample_count: self.count,
        })
    }
}

/// Two-layer perceptron on `[h ; t]`: `tanh([h ; t]·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FieldNet {
    /// Output layer starts at zero, so the initial flow is the identity.
    pub fn init<R: Rng + ?Sized>(d_h: usize, rng: &mut R) -> Self {
        FieldNet {
            w1: he_uniform(d_h + 1, d_h, rng),
            b1: Tensor::zeros(&[1, d_h]),
            w2: Tensor::zeros(&[d_h, d_h]),
            b2: Tensor::zeros(&[1, d_h]),
        }
    }

    pub fn eval(&self, h: &Tensor, t: f64) -> Result<Tensor> {
        let x = h.concat_cols(&Tensor::scalar(t))?;
        let a = linear(&x, &self.w1, Some(&self.b1))?.map(f64::tanh);
        linear(&a, &self.w2, Some(&self.b2))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub phi_mu: FieldNet,
    pub phi_sigma: FieldNet,
    /// `d_env × d_h`
    pub w_e: Tensor,
    /// `d_h × d_env`
    pub w_d: Tensor,
    /// `d_e × d_env`
    pub w_f: Tensor,
}

impl DynamicsParams {
    /// `W_E = [I 0]` and `W_D = [I ; 0]`, so `W_E·W_D = I`. `W_F` starts as
    /// the padded identity.
    pub fn init<R: Rng + ?Sized>(
        d_e: usize,
        d_env: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_h < d_env {
            return Err(Error::Config(format!(
                "hidden width d_h = {d_h} must be at least d_env = {d_env}"
            )));
        }
        let mut w_e = Tensor::zeros(&[d_env, d_h]);
        let mut w_d = Tensor::zeros(&[d_h, d_env]);
        let mut w_f = Tensor::zeros(&[d_e, d_env]);
        for i in 0..d_e.min(d_env) {
            w_f.data_mut()[i * d_env + i] = 1.0;
        }
        for i in 0..d_env {
            w_e.data_mut()[i * d_h + i] = 1.0;
            w_d.data_mut()[i * d_env + i] = 1.0;
        }
        Ok(DynamicsParams {
            phi_mu: FieldNet::init(d_h, rng),
            phi_sigma: FieldNet::init(d_h, rng),
            w_e,
            w_d,
            w_f,
        })
    }
}

/// Column mean and population variance of `e_fake·W_F`.
pub fn batch_env_stats(e_fake: &Tensor, w_f: &Tensor) -> Result<EnvGaussian> {
    let m = e_fake.rows();
    if m < 2 {
        return Err(Error::InsufficientStatistics { needed: 2, got: m });
    }
    let env = e_fake.matmul(w_f)?;
    let d = env.cols();
    let mut mean = vec![0.0; d];
    for r in 0..m {
        for (acc, v) in mean.iter_mut().zip(env.row_slice(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; d];
    for r in 0..m {
        for ((acc, v), mu) in var.iter_mut().zip(env.row_slice(r)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut()
        .for_each(|v| *v = (*v / m as f64).max(VARIANCE_FLOOR));
    Ok(EnvGaussian {
        mean: Tensor::from_parts(vec![1, d], mean),
        var: Tensor::from_parts(vec![1, d], var),
        sample_count: m,
    })
}

fn encode_var(var: &Tensor) -> Tensor {
    var.map(softplus_inverse)
}

/// Forecast of the environment Gaussian at time `tau ≥ T0`.
pub fn predict_distribution(
    tau: f64,
    init: &EnvGaussian,
    params: &DynamicsParams,
    solver: &SolverConfig,
) -> Result<EnvGaussian> {
    let solve = |net: &FieldNet, h0: Tensor| -> Result<Tensor> {
        let problem = OdeProblem {
            field: |h: &Tensor, t: f64| net.eval(h, t),
            y0: h0,
            t0: T0,
            t1: tau,
        };
        Ok(dopri5_integrate(problem, solver)?.0)
    };
    let h_mu = solve(&params.phi_mu, init.mean.matmul(&params.w_e)?)?;
    let h_sigma = solve(
        &params.phi_sigma,
        encode_var(&init.var).matmul(&params.w_e)?,
    )?;
    Ok(EnvGaussian {
        mean: h_mu.matmul(&params.w_d)?,
        var: h_sigma.matmul(&params.w_d)?.map(softplus),
        sample_count: init.sample_count,
    })
}

/// Tape handles for one field network.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FieldVars {
    pub fn eval(&self, tape: &mut Tape, h: Var, t: f64) -> Result<Var> {
        let tv = tape.constant(Tensor::scalar(t));
        let x = tape.concat_cols(h, tv)?;
        let pre = tape.linear(x, self.w1, Some(self.b1))?;
        let a = tape.tanh(pre)?;
        tape.linear(a, self.w2, Some(self.b2))
    }
}

/// Tape handles for the prediction path.
#[derive(Clone, Copy, Debug)]
pub struct DynamicsVars {
    pub phi_mu: FieldVars,
    pub phi_sigma: FieldVars,
    pub w_e: Var,
    pub w_d: Var,
}

/// Tape version of [`predict_distribution`]; returns `(mean, var)` rows.
pub fn predict_distribution_tape(
    tape: &mut Tape,
    vars: &DynamicsVars,
    tau: f64,
    init: &EnvGaussian,
    solver: &SolverConfig,
) -> Result<(Var, Var)> {
    let mu0 = tape.constant(init.mean.clone());
    let s0 = tape.constant(encode_var(&init.var));
    let h_mu0 = tape.matmul(mu0, vars.w_e)?;
    let h_s0 = tape.matmul(s0, vars.w_e)?;
    let fm = vars.phi_mu;
    let fs = vars.phi_sigma;
    let (h_mu, _) = dopri5_integrate_differentiable(
        tape,
        |tp, h, t| fm.eval(tp, h, t),
        h_mu0,
        T0,
        tau,
        solver,
    )?;
    let (h_s, _) =
        dopri5_integrate_differentiable(tape, |tp, h, t| fs.eval(tp, h, t), h_s0, T0, tau, solver)?;
    let mean = tape.matmul(h_mu, vars.w_d)?;
    let pre = tape.matmul(h_s, vars.w_d)?;
    let var = tape.softplus(pre)?;
    Ok((mean, var))
}

/// `‖μ̂ − μ‖² + ‖σ̂² − σ²‖²`.
pub fn dynamics_loss(pred: &EnvGaussian, target: &EnvGaussian) -> Result<f64> {
    Ok(pred.mean.sub(&target.mean)?.sq_norm() + pred.var.sub(&target.var)?.sq_norm())
}

/// Tape version of [`dynamics_loss`]; the target is a constant.
pub fn dynamics_loss_tape(
    tape: &mut Tape,
    mean: Var,
    var: Var,
    target: &EnvGaussian,
) -> Result<Var> {
    let tm = tape.constant(target.mean.clone());
    let tv = tape.constant(target.var.clone());
    let dm = tape.sub(mean, tm)?;
    let dv = tape.sub(var, tv)?;
    let sm = tape.square(dm)?;
    let sv = tape.square(dv)?;
    let a = tape.sum(sm)?;
    let b = tape.sum(sv)?;
    tape.add(a, b)
}

/// One draw `μ̂ + sqrt(σ̂²) ⊙ ε` per row, as an `n × d` tensor.
pub fn sample_env_features<R: Rng + ?Sized>(pred: &EnvGaussian, n: usize, rng: &mut R) -> Tensor {
    let d = pred.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for (m, v) in pred.mean.data().iter().zip(pred.var.data()) {
            let eps: f64 = rng.sample(StandardNormal);
            data.push(m + v.sqrt() * eps);
        }
    }
    Tensor::from_parts(vec![n, d], data)
}

/// A single draw as a `1 × d` row.
pub fn sample_env_feature<R: Rng + ?Sized>(pred: &EnvGaussian, rng: &mut R) -> Tensor {
    sample_env_features(pred, 1, rng)
}
