//! Mixture of experts with Dirichlet-process expansion, gated routing and an
//! exponentially averaged shared expert.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{cross_entropy, lecun_uniform, sigmoid, softmax, Tape, Tensor, Var};

/// Low-rank discriminator `A·B` plus a linear autoencoder `enc·dec`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// `d_z × r`
    pub disc_a: Tensor,
    /// `r × d_e`
    pub disc_b: Tensor,
    /// `d_z × d_g`
    pub gen_enc: Tensor,
    /// `d_g × d_z`
    pub gen_dec: Tensor,
    pub frozen: bool,
    pub created_at_event: usize,
}

impl Expert {
    /// Variance-preserving uniform discriminator; the generator starts as an
    /// orthogonal projection onto a random `d_g`-dimensional subspace.
    pub fn init<R: Rng + ?Sized>(
        d_z: usize,
        r: usize,
        d_e: usize,
        d_g: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if r >= d_z.min(d_e) {
            return Err(Error::Config(format!(
                "expert rank {r} must be below min(d_z, d_e) = {}",
                d_z.min(d_e)
            )));
        }
        if d_g > d_z {
            return Err(Error::Config(format!(
                "generator width {d_g} exceeds d_z = {d_z}"
            )));
        }
        let disc_a = lecun_uniform(d_z, r, rng);
        let disc_b = lecun_uniform(r, d_e, rng);
        let enc = orthonormal_columns(d_z, d_g, rng);
        Ok(Expert {
            disc_a,
            disc_b,
            gen_enc: enc.clone(),
            gen_dec: enc.transpose(),
            frozen: false,
            created_at_event: 0,
        })
    }

    pub fn d_e(&self) -> usize {
        self.disc_b.cols()
    }
}

/// `rows × cols` matrix with orthonormal columns, by Gram-Schmidt on Gaussian
/// draws.
fn orthonormal_columns<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, a)| *x -= dot * a);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            q.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let data = (0..rows)
        .flat_map(|i| q.iter().map(move |col| col[i]))
        .collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// The always-present expert and its slow copy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedExpert {
    pub expert: Expert,
    pub shadow_a: Tensor,
    pub shadow_b: Tensor,
    #[serde(serialize_with = "crate::io::ser_f64")]
    pub epsilon: f64,
}

impl SharedExpert {
    pub fn new(expert: Expert, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Config(format!(
                "epsilon must be in [0, 1], got {epsilon}"
            )));
        }
        Ok(SharedExpert {
            shadow_a: expert.disc_a.clone(),
            shadow_b: expert.disc_b.clone(),
            expert,
            epsilon,
        })
    }

    /// The trainable generator with the shadow discriminator: the weights a
    /// new expert starts from.
    pub fn template(&self) -> Expert {
        Expert {
            disc_a: self.shadow_a.clone(),
            disc_b: self.shadow_b.clone(),
            ..self.expert.clone()
        }
    }
}

/// Expert roster and soft assignment counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpmState {
    pub experts: Vec<Expert>,
    /// Accumulated responsibility mass per expert.
    #[serde(serialize_with = "crate::io::ser_vec")]
    pub counts: Vec<f64>,
    /// `-log λ`.
    #[serde(serialize_with = "crate::io::ser_f64")]
    pub neg_log_lambda: f64,
    pub expansions_this_event: usize,
    pub max_expansions_per_event: usize,
}

impl DpmState {
    pub fn new(neg_log_lambda: f64) -> Self {
        DpmState {
            experts: Vec::new(),
            counts: Vec::new(),
            neg_log_lambda,
            expansions_this_event: 0,
            max_expansions_per_event: 1,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn latest(&self) -> Option<&Expert> {
        self.experts.last()
    }

    /// `-log n_m` for each expert's accumulated soft count.
    pub fn count_terms(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&n| if n > 0.0 { -n.ln() } else { f64::INFINITY })
            .collect()
    }

    /// Appends `expert`, freezing the previous latest one.
    pub fn push_expert(&mut self, mut expert: Expert, count: f64, event: usize) {
        if let Some(prev) = self.experts.last_mut() {
            prev.frozen = true;
        }
        expert.frozen = false;
        expert.created_at_event = event;
        self.experts.push(expert);
        self.counts.push(count);
    }
}

/// Veracity head over `[e ; ê]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// `(d_e + d_env) × 2`
    pub w: Tensor,
    /// `1 × 2`
    pub b: Tensor,
}

impl Classifier {
    pub fn init<R: Rng + ?Sized>(d_in: usize, rng: &mut R) -> Self {
        Classifier {
            w: lecun_uniform(d_in, 2, rng),
            b: Tensor::zeros(&[1, 2]),
        }
    }

    pub fn logits(&self, e: &Tensor, env: &Tensor) -> Result<Tensor> {
        let x = e.concat_cols(env)?;
        crate::numerics::linear(&x, &self.w, Some(&self.b))
    }

    /// Probability of the fake class per row.
    pub fn fake_probability(&self, e: &Tensor, env: &Tensor) -> Result<Vec<f64>> {
        let logits = self.logits(e, env)?;
        Ok((0..logits.rows())
            .map(|r| softmax(logits.row_slice(r))[1])
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    /// `d_z × 1`
    pub w_r: Tensor,
}

impl RouterParams {
    pub fn zeros(d_z: usize) -> Self {
        RouterParams {
            w_r: Tensor::zeros(&[d_z, 1]),
        }
    }
}

/// `z·A·B`.
pub fn disc_feature(expert: &Expert, z: &Tensor) -> Result<Tensor> {
    z.matmul(&expert.disc_a)?.matmul(&expert.disc_b)
}

/// Mean squared reconstruction error of `z` through the expert's autoencoder.
pub fn gen_score(expert: &Expert, z: &Tensor) -> Result<f64> {
    let rec = z.matmul(&expert.gen_enc)?.matmul(&expert.gen_dec)?;
    Ok(rec.sub(z)?.sq_norm() / z.rows() as f64)
}

/// Tape version of [`gen_score`].
pub fn gen_score_tape(tape: &mut Tape, z: Var, enc: Var, dec: Var) -> Result<Var> {
    let h = tape.matmul(z, enc)?;
    let rec = tape.matmul(h, dec)?;
    let diff = tape.sub(rec, z)?;
    let sq = tape.square(diff)?;
    let per_row = tape.sum_cols(sq)?;
    tape.mean(per_row)
}

fn expert_score(
    disc: Tensor,
    gen: &Expert,
    z: &Tensor,
    labels: &[usize],
    env: &Tensor,
    classifier: &Classifier,
) -> Result<f64> {
    let ce = cross_entropy(&classifier.logits(&disc, env)?, labels)?;
    Ok(ce + gen_score(gen, z)?)
}

/// Negative log responsibilities, one per existing expert and a final entry
/// for a prospective new expert initialised from the shared one.
pub fn responsibility_scores(
    z: &Tensor,
    labels: &[usize],
    env: &Tensor,
    state: &DpmState,
    shared: &SharedExpert,
    classifier: &Classifier,
) -> Result<Vec<f64>> {
    if z.rows() == 0 {
        return Err(Error::Input("responsibility needs at least one row".into()));
    }
    let mut scores = Vec::with_capacity(state.num_experts() + 1);
    for (expert, count_term) in state.experts.iter().zip(state.count_terms()) {
        let disc = disc_feature(expert, z)?;
        scores.push(count_term + expert_score(disc, expert, z, labels, env, classifier)?);
    }
    let shadow = z.matmul(&shared.shadow_a)?.matmul(&shared.shadow_b)?;
    scores.push(
        state.neg_log_lambda + expert_score(shadow, &shared.expert, z, labels, env, classifier)?,
    );
    Ok(scores)
}

/// Outcome of [`maybe_expand`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Expansion {
    Kept(usize),
    Created(usize),
}

/// Adds this batch's responsibility mass to the counts and creates a new
/// expert when the prospective one has the lowest score and the per-event cap
/// allows it.
pub fn maybe_expand(
    scores: &[f64],
    state: &mut DpmState,
    shared: &SharedExpert,
    event: usize,
) -> Result<Expansion> {
    let m = state.num_experts();
    if scores.len() != m + 1 {
        return Err(Error::State(format!(
            "{} scores for {m} experts",
            scores.len()
        )));
    }
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    let mass = softmax(&neg);
    for (n, p) in state.counts.iter_mut().zip(&mass) {
        *n += p;
    }
    let best = argmin(scores);
    if best == m && state.expansions_this_event < state.max_expansions_per_event {
        state.push_expert(shared.template(), mass[m], event);
        state.expansions_this_event += 1;
        Ok(Expansion::Created(m))
    } else if m == 0 {
        Err(Error::State(
            "no expert to keep and expansion is capped".into(),
        ))
    } else if best < m {
        Ok(Expansion::Kept(best))
    } else {
        Ok(Expansion::Kept(argmin(&scores[..m])))
    }
}

/// Index of the smallest score; ties resolve to the earliest entry.
pub fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    best
}

/// `r = σ(z·W_R)` per row.
pub fn gate(z: &Tensor, router: &RouterParams) -> Result<Vec<f64>> {
    Ok(z.matmul(&router.w_r)?
        .data()
        .iter()
        .map(|&v| sigmoid(v))
        .collect())
}

/// Gated mix of the latest expert and the shared shadow.
pub fn route(
    z: &Tensor,
    router: &RouterParams,
    latest: Option<&Expert>,
    shared: &SharedExpert,
) -> Result<Tensor> {
    let latest = latest.ok_or_else(|| Error::State("routing needs a specific expert".into()))?;
    let a = disc_feature(latest, z)?;
    let b = z.matmul(&shared.shadow_a)?.matmul(&shared.shadow_b)?;
    let r = gate(z, router)?;
    let d = a.cols();
    let mut out = a;
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let g = r[k / d];
        *v = g * *v + (1.0 - g) * b.data()[k];
    }
    Ok(out)
}

/// `shadow ← ε·shadow + (1 − ε)·trainable`.
pub fn ema_update(shared: &mut SharedExpert) -> Result<()> {
    let eps = shared.epsilon;
    if eps == 1.0 {
        return Ok(());
    }
    for (shadow, live) in [
        (&mut shared.shadow_a, &shared.expert.disc_a),
        (&mut shared.shadow_b, &shared.expert.disc_b),
    ] {
        if shadow.shape() != live.shape() {
            return Err(shape_err!(
                "shadow {:?} vs live {:?}",
                shadow.shape(),
                live.shape()
            ));
        }
        for (s, &l) in shadow.data_mut().iter_mut().zip(live.data()) {
            *s = eps * *s + (1.0 - eps) * l;
        }
    }
    Ok(())
}
