//! Adaptive Dormand–Prince 5(4) integration.
//!
//! The same step controller drives two backends: plain tensors, and tape
//! variables. On the tape every accepted stage is recorded, so gradients of the
//! end state are exact for the executed discretization. Rejected trial steps
//! are truncated off the tape.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

const A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
    ],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];

// 5th-order weights minus embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Step-control settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub rtol: f64,
    pub atol: f64,
    /// `None` selects the Hairer–Nørsett–Wanner starting-step heuristic.
    #[serde(default)]
    pub initial_step: Option<f64>,
    pub max_steps: usize,
    pub safety: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rtol: 1e-6,
            atol: 1e-8,
            initial_step: None,
            max_steps: 10_000,
            safety: 0.9,
        }
    }
}

impl SolverConfig {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        SolverConfig {
            rtol,
            atol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::Config("solver max_steps must be at least 1".into()));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(Error::Config("solver safety must be in (0, 1]".into()));
        }
        if matches!(self.initial_step, Some(h) if !(h > 0.0)) {
            return Err(Error::Config("solver initial_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

/// Initial-value problem `dy/dt = f(y, t)`, `y(t0) = y0`, integrated to `t1`.
pub struct OdeProblem<F> {
    pub field: F,
    pub y0: Tensor,
    pub t0: f64,
    pub t1: f64,
}

/// Arithmetic the controller needs from a backend.
trait Backend {
    type State: Clone;
    fn eval(&mut self, t: f64, y: &Self::State) -> Result<Self::State>;
    /// `y + h · Σ coefs[j] · ks[j]`
    fn step_combo(
        &mut self,
        y: &Self::State,
        h: f64,
        coefs: &[f64],
        ks: &[Self::State],
    ) -> Result<Self::State>;
    fn values<'a>(&'a self, s: &'a Self::State) -> &'a [f64];
    fn mark(&self) -> usize;
    fn rollback(&mut self, mark: usize);
}

struct PlainBackend<F> {
    field: F,
}

impl<F> Backend for PlainBackend<F>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    type State = Tensor;

    fn eval(&mut self, t: f64, y: &Tensor) -> Result<Tensor> {
        let dy = (self.field)(y, t)?;
        if dy.shape() != y.shape() {
            return Err(shape_err!(
                "field returned {:?} for state {:?}",
                dy.shape(),
                y.shape()
            ));
        }
        Ok(dy)
    }

    fn step_combo(&mut self, y: &Tensor, h: f64, coefs: &[f64], ks: &[Tensor]) -> Result<Tensor> {
        let mut out = y.clone();
        for (c, k) in coefs.iter().zip(ks) {
            if *c != 0.0 {
                out.axpy(h * c, k)?;
            }
        }
        Ok(out)
    }

    fn values<'a>(&'a self, s: &'a Tensor) -> &'a [f64] {
        s.data()
    }

    fn mark(&self) -> usize {
        0
    }

    fn rollback(&mut self, _mark: usize) {}
}

struct TapeBackend<'t, F> {
    tape: &'t mut Tape,
    field: F,
}

impl<F> Backend for TapeBackend<'_, F>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var>,
{
    type State = Var;

    fn eval(&mut self, t: f64, y: &Var) -> Result<Var> {
        let dy = (self.field)(self.tape, *y, t)?;
        if self.tape.value(dy).shape() != self.tape.value(*y).shape() {
            return Err(shape_err!(
                "field returned {:?} for state {:?}",
                self.tape.value(dy).shape(),
                self.tape.value(*y).shape()
            ));
        }
        Ok(dy)
    }

    fn step_combo(&mut self, y: &Var, h: f64, coefs: &[f64], ks: &[Var]) -> Result<Var> {
        let mut acc = *y;
        for (c, k) in coefs.iter().zip(ks) {
            if *c != 0.0 {
                let term = self.tape.scale(*k, h * c)?;
                acc = self.tape.add(acc, term)?;
            }
        }
        Ok(acc)
    }

    fn values<'a>(&'a self, s: &'a Var) -> &'a [f64] {
        self.tape.value(*s).data()
    }

    fn mark(&self) -> usize {
        self.tape.len()
    }

    fn rollback(&mut self, mark: usize) {
        self.tape.truncate(mark);
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite {what} during integration"
        )))
    }
}

/// Weighted RMS norm used by the step controller.
fn scaled_rms(values: &[f64], reference: &[f64], cfg: &SolverConfig) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let s: f64 = values
        .iter()
        .zip(reference)
        .map(|(v, r)| {
            let sc = cfg.atol + cfg.rtol * r.abs();
            (v / sc).powi(2)
        })
        .sum();
    (s / values.len() as f64).sqrt()
}

fn initial_step<B: Backend>(
    b: &mut B,
    t0: f64,
    y0: &B::State,
    f0: &B::State,
    span: f64,
    cfg: &SolverConfig,
    stats: &mut SolverStats,
) -> Result<f64> {
    let y0v = b.values(y0).to_vec();
    let d0 = scaled_rms(&y0v, &y0v, cfg);
    let d1 = scaled_rms(b.values(f0), &y0v, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    }
    .min(span);
    let mark = b.mark();
    let y1 = b.step_combo(y0, h0, &[1.0], std::slice::from_ref(f0))?;
    let f1 = b.eval(t0 + h0, &y1)?;
    stats.evaluations += 1;
    let diff: Vec<f64> = b
        .values(&f1)
        .iter()
        .zip(b.values(f0))
        .map(|(a, c)| (a - c) / h0)
        .collect();
    b.rollback(mark);
    check_finite(&diff, "derivative")?;
    let d2 = scaled_rms(&diff, &y0v, cfg);
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

fn integrate<B: Backend>(
    b: &mut B,
    y0: B::State,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(B::State, SolverStats)> {
    cfg.validate()?;
    if !(t1 >= t0) {
        return Err(Error::Input(format!(
            "end time {t1} before start time {t0}"
        )));
    }
    let mut stats = SolverStats::default();
    if t1 == t0 {
        return Ok((y0, stats));
    }
    let span = t1 - t0;
    let mut t = t0;
    let mut y = y0;
    let mut k1 = b.eval(t, &y)?;
    stats.evaluations += 1;
    check_finite(b.values(&k1), "derivative")?;
    let mut h = match cfg.initial_step {
        Some(h) => h.min(span),
        None => initial_step(b, t, &y, &k1, span, cfg, &mut stats)?,
    };
    let mut last_rejected = false;
    while t < t1 {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::Divergence(format!(
                "exceeded {} steps at t = {t}",
                cfg.max_steps
            )));
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::Divergence(format!("step size underflow at t = {t}")));
        }
        let remaining = t1 - t;
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let mark = b.mark();
        let mut ks: Vec<B::State> = Vec::with_capacity(7);
        ks.push(k1.clone());
        let mut y_new = None;
        for s in 1..7 {
            let ys = b.step_combo(&y, h, A[s], &ks)?;
            let k = b.eval(t + C[s] * h, &ys)?;
            stats.evaluations += 1;
            check_finite(b.values(&k), "derivative")?;
            if s == 6 {
                // the last stage is evaluated at the 5th-order solution
                y_new = Some(ys);
            }
            ks.push(k);
        }
        let y_new = y_new.expect("seven stages evaluated");
        let err_vec: Vec<f64> = {
            let n = b.values(&y).len();
            let mut e = vec![0.0; n];
            for (j, k) in ks.iter().enumerate() {
                if E[j] != 0.0 {
                    for (ei, kv) in e.iter_mut().zip(b.values(k)) {
                        *ei += h * E[j] * kv;
                    }
                }
            }
            e
        };
        let reference: Vec<f64> = b
            .values(&y)
            .iter()
            .zip(b.values(&y_new))
            .map(|(a, c)| a.abs().max(c.abs()))
            .collect();
        let err = scaled_rms(&err_vec, &reference, cfg);
        check_finite(&[err], "error estimate")?;
        let fac_max = if last_rejected { 1.0 } else { 10.0 };
        if err <= 1.0 {
            stats.accepted += 1;
            t = if last { t1 } else { t + h };
            y = y_new;
            k1 = ks[6].clone();
            let fac = if err == 0.0 {
                fac_max
            } else {
                (cfg.safety * err.powf(-0.2)).clamp(0.2, fac_max)
            };
            h *= fac;
            last_rejected = false;
        } else {
            stats.rejected += 1;
            b.rollback(mark);
            h *= (cfg.safety * err.powf(-0.2)).clamp(0.2, 1.0);
            last_rejected = true;
        }
    }
    Ok((y, stats))
}

/// Integrates a plain-tensor problem to its end time.
pub fn dopri5_integrate<F>(
    problem: OdeProblem<F>,
    config: &SolverConfig,
) -> Result<(Tensor, SolverStats)>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    let mut backend = PlainBackend {
        field: problem.field,
    };
    integrate(&mut backend, problem.y0, problem.t0, problem.t1, config)
}

/// Integrates on a tape, starting from the node `y0`. The returned node carries
/// gradients back to `y0` and to every parameter the field reads.
pub fn dopri5_integrate_differentiable<F>(
    tape: &mut Tape,
    field: F,
    y0: Var,
    t0: f64,
    t1: f64,
    config: &SolverConfig,
) -> Result<(Var, SolverStats)>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var>,
{
    let mut backend = TapeBackend { tape, field };
    integrate(&mut backend, y0, t0, t1, config)
}
