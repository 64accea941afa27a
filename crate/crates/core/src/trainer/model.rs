use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExpertSelection, TrainConfig};
use crate::dynamics::{
    batch_env_stats, dynamics_loss_tape, predict_distribution, predict_distribution_tape,
    sample_env_features, DynamicsParams, DynamicsVars, EnvGaussian, FieldNet, FieldVars,
    InitialState,
};
use crate::encoder::{contrastive_loss_tape, fuse, project, EncoderParams};
use crate::error::{Error, Result};
use crate::io::derived_rng;
use crate::metrics::{classification_metrics, ClassificationMetrics};
use crate::moe::{
    disc_feature, ema_update, gen_score, gen_score_tape, maybe_expand, responsibility_scores,
    route, Classifier, DpmState, Expansion, Expert, RouterParams, SharedExpert,
};
use crate::numerics::{AdamState, Tape, Tensor, Var};
use crate::stream::Batch;

pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_STEP_ENV: u64 = 2;
pub(crate) const TAG_FIXED_EXPERT: u64 = 6;

/// Loss components of one step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub vp: f64,
    pub cl: f64,
    pub vg: f64,
    pub dm: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `vp + α·cl + β·vg + γ·dm`, in the order the tape evaluates it.
    pub fn recompose(&self, alpha: f64, beta: f64, gamma: f64) -> f64 {
        self.vp + alpha * self.cl + beta * self.vg + gamma * self.dm
    }
}

/// Which loss a gradient query differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Total,
    VeracityPrediction,
    Contrastive,
    Reconstruction,
    Dynamics,
}

/// A trainable tensor of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    ThetaT,
    ThetaV,
    FuseW,
    RouterW,
    ClassifierW,
    ClassifierB,
    SharedA,
    SharedB,
    SharedEnc,
    SharedDec,
    ExpertA(usize),
    ExpertB(usize),
    ExpertEnc(usize),
    ExpertDec(usize),
    /// Field network part `0..4` (w1, b1, w2, b2) of the mean or variance flow.
    Field {
        sigma: bool,
        part: u8,
    },
    EnvEncoder,
    EnvDecoder,
}

impl ParamId {
    pub fn name(&self) -> String {
        match self {
            ParamId::ThetaT => "encoder.theta_t".into(),
            ParamId::ThetaV => "encoder.theta_v".into(),
            ParamId::FuseW => "encoder.w_a".into(),
            ParamId::RouterW => "router.w_r".into(),
            ParamId::ClassifierW => "classifier.w".into(),
            ParamId::ClassifierB => "classifier.b".into(),
            ParamId::SharedA => "shared.disc_a".into(),
            ParamId::SharedB => "shared.disc_b".into(),
            ParamId::SharedEnc => "shared.gen_enc".into(),
            ParamId::SharedDec => "shared.gen_dec".into(),
            ParamId::ExpertA(i) => format!("expert.{i}.disc_a"),
            ParamId::ExpertB(i) => format!("expert.{i}.disc_b"),
            ParamId::ExpertEnc(i) => format!("expert.{i}.gen_enc"),
            ParamId::ExpertDec(i) => format!("expert.{i}.gen_dec"),
            ParamId::Field { sigma, part } => format!(
                "dynamics.{}.{}",
                if *sigma { "phi_sigma" } else { "phi_mu" },
                ["w1", "b1", "w2", "b2"][*part as usize]
            ),
            ParamId::EnvEncoder => "dynamics.w_e".into(),
            ParamId::EnvDecoder => "dynamics.w_d".into(),
        }
    }
}

/// Everything a step needs that is computed without gradients: the sampled
/// environment feature, the dynamics target and the features the generators
/// reconstruct.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub batch: Batch,
    /// `z` at the current encoder weights. The reconstruction loss scores
    /// these, so generators fit the features without reshaping them.
    pub z: Tensor,
    /// `ê`, one row per sample.
    pub env: Tensor,
    /// Initial state used by the dynamics prediction.
    pub init: Option<EnvGaussian>,
    /// Batch statistics of the fake rows.
    pub target: Option<EnvGaussian>,
    /// Responsibility scores when an expansion check ran.
    pub scores: Option<Vec<f64>>,
    pub expansion: Option<Expansion>,
}

/// Complete model and optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: TrainConfig,
    pub encoder: EncoderParams,
    pub router: RouterParams,
    pub classifier: Classifier,
    pub shared: SharedExpert,
    pub dpm: DpmState,
    pub dynamics: DynamicsParams,
    pub init_state: InitialState,
    pub adam: AdamState,
    pub steps: u64,
    pub current_event: usize,
}

fn field_part(net: &FieldNet, part: u8) -> &Tensor {
    match part {
        0 => &net.w1,
        1 => &net.b1,
        2 => &net.w2,
        _ => &net.b2,
    }
}

fn field_part_mut(net: &mut FieldNet, part: u8) -> &mut Tensor {
    match part {
        0 => &mut net.w1,
        1 => &mut net.b1,
        2 => &mut net.w2,
        _ => &mut net.b2,
    }
}

impl Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dims.clone();
        let mut rng = derived_rng(config.seed, &[TAG_INIT]);
        let encoder = EncoderParams::init(d.d_t, d.d_v, d.d_z, config.xi, &mut rng);
        let classifier = Classifier::init(d.d_e + d.d_env, &mut rng);
        let shared = SharedExpert::new(
            Expert::init(d.d_z, d.r, d.d_e, d.d_g, &mut rng)?,
            config.epsilon,
        )?;
        let dynamics = DynamicsParams::init(d.d_e, d.d_env, d.d_h, &mut rng)?;
        let mut dpm = DpmState::new(config.neg_log_lambda);
        dpm.max_expansions_per_event = config.max_expansions_per_event;
        Ok(Model {
            router: RouterParams::zeros(d.d_z),
            init_state: InitialState::new(d.d_env),
            adam: AdamState::new(config.learning_rate),
            encoder,
            classifier,
            shared,
            dpm,
            dynamics,
            steps: 0,
            current_event: 0,
            config,
        })
    }

    /// Marks the start of event `k`. Without expansion this activates the
    /// next member of the fixed roster.
    pub fn begin_event(&mut self, k: usize) -> Result<()> {
        self.current_event = k;
        self.dpm.expansions_this_event = 0;
        if !self.config.use_dpm && self.dpm.num_experts() < self.config.fixed_experts.min(k) {
            let d = &self.config.dims;
            let mut rng = derived_rng(self.config.seed, &[TAG_FIXED_EXPERT, k as u64]);
            let expert = Expert::init(d.d_z, d.r, d.d_e, d.d_g, &mut rng)?;
            self.dpm.push_expert(expert, 1.0, k);
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        match id {
            ParamId::ThetaT => &self.encoder.theta_t,
            ParamId::ThetaV => &self.encoder.theta_v,
            ParamId::FuseW => &self.encoder.w_a,
            ParamId::RouterW => &self.router.w_r,
            ParamId::ClassifierW => &self.classifier.w,
            ParamId::ClassifierB => &self.classifier.b,
            ParamId::SharedA => &self.shared.expert.disc_a,
            ParamId::SharedB => &self.shared.expert.disc_b,
            ParamId::SharedEnc => &self.shared.expert.gen_enc,
            ParamId::SharedDec => &self.shared.expert.gen_dec,
            ParamId::ExpertA(i) => &self.dpm.experts[i].disc_a,
            ParamId::ExpertB(i) => &self.dpm.experts[i].disc_b,
            ParamId::ExpertEnc(i) => &self.dpm.experts[i].gen_enc,
            ParamId::ExpertDec(i) => &self.dpm.experts[i].gen_dec,
            ParamId::Field { sigma: false, part } => field_part(&self.dynamics.phi_mu, part),
            ParamId::Field { sigma: true, part } => field_part(&self.dynamics.phi_sigma, part),
            ParamId::EnvEncoder => &self.dynamics.w_e,
            ParamId::EnvDecoder => &self.dynamics.w_d,
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        match id {
            ParamId::ThetaT => &mut self.encoder.theta_t,
            ParamId::ThetaV => &mut self.encoder.theta_v,
            ParamId::FuseW => &mut self.encoder.w_a,
            ParamId::RouterW => &mut self.router.w_r,
            ParamId::ClassifierW => &mut self.classifier.w,
            ParamId::ClassifierB => &mut self.classifier.b,
            ParamId::SharedA => &mut self.shared.expert.disc_a,
            ParamId::SharedB => &mut self.shared.expert.disc_b,
            ParamId::SharedEnc => &mut self.shared.expert.gen_enc,
            ParamId::SharedDec => &mut self.shared.expert.gen_dec,
            ParamId::ExpertA(i) => &mut self.dpm.experts[i].disc_a,
            ParamId::ExpertB(i) => &mut self.dpm.experts[i].disc_b,
            ParamId::ExpertEnc(i) => &mut self.dpm.experts[i].gen_enc,
            ParamId::ExpertDec(i) => &mut self.dpm.experts[i].gen_dec,
            ParamId::Field { sigma: false, part } => {
                field_part_mut(&mut self.dynamics.phi_mu, part)
            }
            ParamId::Field { sigma: true, part } => {
                field_part_mut(&mut self.dynamics.phi_sigma, part)
            }
            ParamId::EnvEncoder => &mut self.dynamics.w_e,
            ParamId::EnvDecoder => &mut self.dynamics.w_d,
        }
    }

    /// Index of the latest expert while it is trainable.
    fn active_expert(&self) -> Option<usize> {
        let i = self.dpm.num_experts().checked_sub(1)?;
        (!self.dpm.experts[i].frozen).then_some(i)
    }

    /// Whether the latest expert's generator trains: only during the event
    /// that created it.
    fn active_generator(&self) -> Option<usize> {
        let i = self.active_expert()?;
        (self.config.use_dpm && self.dpm.experts[i].created_at_event == self.current_event)
            .then_some(i)
    }

    /// Parameters that receive updates in the current state, in a fixed order.
    pub fn trainable(&self) -> Vec<ParamId> {
        let c = &self.config;
        let mut ids = vec![ParamId::ThetaT, ParamId::ThetaV, ParamId::FuseW];
        if c.use_shared_expert {
            ids.push(ParamId::RouterW);
        }
        ids.extend([ParamId::ClassifierW, ParamId::ClassifierB]);
        if c.use_shared_expert {
            ids.extend([ParamId::SharedA, ParamId::SharedB]);
            if c.use_dpm {
                ids.extend([ParamId::SharedEnc, ParamId::SharedDec]);
            }
        }
        if let Some(i) = self.active_expert() {
            ids.extend([ParamId::ExpertA(i), ParamId::ExpertB(i)]);
        }
        if let Some(i) = self.active_generator() {
            ids.extend([ParamId::ExpertEnc(i), ParamId::ExpertDec(i)]);
        }
        if c.use_env_feature {
            for sigma in [false, true] {
                for part in 0..4 {
                    ids.push(ParamId::Field { sigma, part });
                }
            }
            ids.extend([ParamId::EnvEncoder, ParamId::EnvDecoder]);
        }
        ids
    }

    pub fn param_values(&self, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter().map(|&id| self.get(id).clone()).collect()
    }

    /// Fused features `z`.
    pub fn features(&self, batch: &Batch) -> Result<Tensor> {
        let (zt, zv) = project(&batch.xt, &batch.xv, &self.encoder)?;
        fuse(&zt, &zv, &self.encoder.w_a)
    }

    fn latest_index(&self) -> Result<usize> {
        self.dpm
            .num_experts()
            .checked_sub(1)
            .ok_or_else(|| Error::State("no specific expert exists yet".into()))
    }

    /// Routed feature `e` as seen by training: the shared branch uses the
    /// live weights.
    pub fn train_features(&self, z: &Tensor) -> Result<Tensor> {
        let latest = &self.dpm.experts[self.latest_index()?];
        let a = disc_feature(latest, z)?;
        if !self.config.use_shared_expert {
            return Ok(a);
        }
        let b = disc_feature(&self.shared.expert, z)?;
        let r = crate::moe::gate(z, &self.router)?;
        let d = a.cols();
        let mut out = a;
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let g = r[k / d];
            *v = g * *v + (1.0 - g) * b.data()[k];
        }
        Ok(out)
    }

    /// Routed feature `e` at evaluation: the shared branch uses the shadow.
    pub fn eval_features(&self, z: &Tensor) -> Result<Tensor> {
        let idx = match self.config.expert_selection {
            ExpertSelection::Latest => self.latest_index()?,
            ExpertSelection::MaxResponsibility => self.select_expert(z)?,
        };
        let expert = &self.dpm.experts[idx];
        if self.config.use_shared_expert {
            route(z, &self.router, Some(expert), &self.shared)
        } else {
            disc_feature(expert, z)
        }
    }

    fn select_expert(&self, z: &Tensor) -> Result<usize> {
        self.latest_index()?;
        let mut best = (f64::INFINITY, 0);
        for (i, (e, c)) in self
            .dpm
            .experts
            .iter()
            .zip(self.dpm.count_terms())
            .enumerate()
        {
            let s = c + gen_score(e, z)?;
            if s < best.0 {
                best = (s, i);
            }
        }
        Ok(best.1)
    }

    /// Forecast of the environment Gaussian at `tau`, when an initial state exists.
    pub fn forecast(&self, tau: f64) -> Result<Option<EnvGaussian>> {
        match self.init_state.gaussian() {
            Some(init) => Ok(Some(predict_distribution(
                tau,
                &init,
                &self.dynamics,
                &self.config.solver,
            )?)),
            None => Ok(None),
        }
    }

    /// `ê` rows for `n` samples at `tau`: draws from the forecast, or zeros
    /// when the feature is disabled or nothing has been observed yet.
    pub fn env_features<R: Rng + ?Sized>(&self, n: usize, tau: f64, rng: &mut R) -> Result<Tensor> {
        let d_env = self.config.dims.d_env;
        if !self.config.use_env_feature {
            return Ok(Tensor::zeros(&[n, d_env]));
        }
        Ok(match self.forecast(tau)? {
            Some(pred) => sample_env_features(&pred, n, rng),
            None => Tensor::zeros(&[n, d_env]),
        })
    }

    /// Rows of `e·W_F` for the fake samples.
    fn fake_env_rows(&self, e: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        e.select_rows(&idx).matmul(&self.dynamics.w_f)
    }

    /// Adds the fake rows of `batch` to the running initial state.
    pub fn accumulate_initial_state(&mut self, batch: &Batch) -> Result<()> {
        let z = self.features(batch)?;
        let e = self.train_features(&z)?;
        let rows = self.fake_env_rows(&e, &batch.y)?;
        self.init_state.accumulate(&rows)
    }

    /// Environment Gaussian of the fake rows of `batch` under the current
    /// training-mode features.
    pub fn env_stats(&self, batch: &Batch) -> Result<EnvGaussian> {
        let z = self.features(batch)?;
        let e = self.train_features(&z)?;
        batch_env_stats(&e.select_rows(&fake_index(&batch.y)), &self.dynamics.w_f)
    }

    /// The no-gradient part of a step: sample `ê`, run the expansion check,
    /// update the running initial state and compute the dynamics target.
    pub fn prepare_step(&mut self, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<StepInputs> {
        let c = &self.config;
        let n = batch.len();
        let z = self.features(batch)?;
        let env = self.env_features(n, batch.t, rng)?;
        let (mut scores, mut expansion) = (None, None);
        if c.use_dpm {
            let s = responsibility_scores(
                &z,
                &batch.y,
                &env,
                &self.dpm,
                &self.shared,
                &self.classifier,
            )?;
            expansion = Some(maybe_expand(
                &s,
                &mut self.dpm,
                &self.shared,
                self.current_event,
            )?);
            scores = Some(s);
        }
        let e = self.train_features(&z)?;
        let (mut init, mut target) = (None, None);
        if self.config.use_env_feature {
            let fake = self.fake_env_rows(&e, &batch.y)?;
            if !self.init_state.frozen {
                self.init_state.accumulate(&fake)?;
            }
            init = self.init_state.gaussian();
            if fake.rows() >= 2 {
                target = Some(batch_env_stats(
                    &e.select_rows(&fake_index(&batch.y)),
                    &self.dynamics.w_f,
                )?);
            }
        }
        Ok(StepInputs {
            batch: batch.clone(),
            z,
            env,
            init,
            target,
            scores,
            expansion,
        })
    }

    /// Records the step's losses on `tape` with `params` standing in for the
    /// trainable tensors listed by `ids`.
    fn record(
        &self,
        tape: &mut Tape,
        inputs: &StepInputs,
        ids: &[ParamId],
        params: &[Tensor],
    ) -> Result<(Vec<Var>, [Var; 5])> {
        if ids.len() != params.len() {
            return Err(Error::Usage(format!(
                "{} ids for {} tensors",
                ids.len(),
                params.len()
            )));
        }
        let c = &self.config;
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let lookup = |tape: &mut Tape, id: ParamId| -> Var {
            match ids.iter().position(|&x| x == id) {
                Some(k) => vars[k],
                None => tape.constant(self.get(id).clone()),
            }
        };
        let b = &inputs.batch;
        let xt = tape.constant(b.xt.clone());
        let xv = tape.constant(b.xv.clone());
        let theta_t = lookup(tape, ParamId::ThetaT);
        let theta_v = lookup(tape, ParamId::ThetaV);
        let w_a = lookup(tape, ParamId::FuseW);
        let zt = tape.matmul(xt, theta_t)?;
        let zv = tape.matmul(xv, theta_v)?;
        let l_cl = contrastive_loss_tape(tape, zt, zv, self.encoder.xi)?;
        let zcat = tape.concat_cols(zt, zv)?;
        let z = tape.matmul(zcat, w_a)?;

        let m = self.latest_index()?;
        let ea = lookup(tape, ParamId::ExpertA(m));
        let eb = lookup(tape, ParamId::ExpertB(m));
        let za = tape.matmul(z, ea)?;
        let e_latest = tape.matmul(za, eb)?;
        let e = if c.use_shared_expert {
            let sa = lookup(tape, ParamId::SharedA);
            let sb = lookup(tape, ParamId::SharedB);
            let wr = lookup(tape, ParamId::RouterW);
            let zs = tape.matmul(z, sa)?;
            let e_shared = tape.matmul(zs, sb)?;
            let logits = tape.matmul(z, wr)?;
            let r = tape.sigmoid(logits)?;
            let diff = tape.sub(e_latest, e_shared)?;
            let gated = tape.mul_col(r, diff)?;
            tape.add(e_shared, gated)?
        } else {
            e_latest
        };

        let z_fixed = tape.constant(inputs.z.clone());
        let mut l_vg = tape.constant(Tensor::scalar(0.0));
        if c.use_dpm {
            let enc = lookup(tape, ParamId::ExpertEnc(m));
            let dec = lookup(tape, ParamId::ExpertDec(m));
            let own = gen_score_tape(tape, z_fixed, enc, dec)?;
            l_vg = tape.add(l_vg, own)?;
            if c.use_shared_expert {
                let enc = lookup(tape, ParamId::SharedEnc);
                let dec = lookup(tape, ParamId::SharedDec);
                let shared = gen_score_tape(tape, z_fixed, enc, dec)?;
                l_vg = tape.add(l_vg, shared)?;
            }
        }

        let mut l_dm = tape.constant(Tensor::scalar(0.0));
        if let (true, Some(init), Some(target)) = (c.use_env_feature, &inputs.init, &inputs.target)
        {
            let field = |tape: &mut Tape, sigma: bool| FieldVars {
                w1: lookup(tape, ParamId::Field { sigma, part: 0 }),
                b1: lookup(tape, ParamId::Field { sigma, part: 1 }),
                w2: lookup(tape, ParamId::Field { sigma, part: 2 }),
                b2: lookup(tape, ParamId::Field { sigma, part: 3 }),
            };
            let phi_mu = field(tape, false);
            let phi_sigma = field(tape, true);
            let dv = DynamicsVars {
                phi_mu,
                phi_sigma,
                w_e: lookup(tape, ParamId::EnvEncoder),
                w_d: lookup(tape, ParamId::EnvDecoder),
            };
            let (mean, var) = predict_distribution_tape(tape, &dv, b.t, init, &c.solver)?;
            l_dm = dynamics_loss_tape(tape, mean, var, target)?;
        }

        let env = tape.constant(inputs.env.clone());
        let feats = tape.concat_cols(e, env)?;
        let wc = lookup(tape, ParamId::ClassifierW);
        let bc = lookup(tape, ParamId::ClassifierB);
        let logits = tape.linear(feats, wc, Some(bc))?;
        let l_vp = tape.cross_entropy(logits, &b.y)?;

        let a = tape.scale(l_cl, c.alpha)?;
        let bterm = tape.scale(l_vg, c.beta)?;
        let g = tape.scale(l_dm, c.gamma)?;
        let t1 = tape.add(l_vp, a)?;
        let t2 = tape.add(t1, bterm)?;
        let total = tape.add(t2, g)?;
        Ok((vars, [l_vp, l_cl, l_vg, l_dm, total]))
    }

    /// Loss values for the given parameter tensors.
    pub fn loss_at(
        &self,
        inputs: &StepInputs,
        ids: &[ParamId],
        params: &[Tensor],
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let (_, l) = self.record(&mut tape, inputs, ids, params)?;
        breakdown(&tape, l)
    }

    /// Loss values and the gradient of `objective` with respect to `params`.
    pub fn loss_and_grads(
        &self,
        inputs: &StepInputs,
        ids: &[ParamId],
        params: &[Tensor],
        objective: Objective,
    ) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let (vars, l) = self.record(&mut tape, inputs, ids, params)?;
        let root = match objective {
            Objective::VeracityPrediction => l[0],
            Objective::Contrastive => l[1],
            Objective::Reconstruction => l[2],
            Objective::Dynamics => l[3],
            Objective::Total => l[4],
        };
        tape.backward(root)?;
        let grads = vars.iter().map(|&v| tape.grad(v)).collect();
        Ok((breakdown(&tape, l)?, grads))
    }

    /// One optimizer step: clip, Adam update of every trainable tensor, then
    /// the shared-expert EMA.
    pub fn apply_gradients(&mut self, ids: &[ParamId], grads: &[Tensor]) -> Result<()> {
        let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
        let clip = self.config.grad_clip;
        let factor = if clip > 0.0 && norm > clip {
            clip / norm
        } else {
            1.0
        };
        for (&id, g) in ids.iter().zip(grads) {
            let g = if factor < 1.0 {
                g.scale(factor)
            } else {
                g.clone()
            };
            let name = id.name();
            let mut adam = std::mem::replace(&mut self.adam, AdamState::new(0.0));
            let res = adam.step(&name, self.get_mut(id), &g);
            self.adam = adam;
            res?;
        }
        if self.config.use_shared_expert {
            ema_update(&mut self.shared)?;
        }
        self.steps += 1;
        Ok(())
    }

    /// Full training step on one batch.
    pub fn train_step(&mut self, batch: &Batch) -> Result<(LossBreakdown, StepInputs)> {
        if batch.len() < 2 {
            return Err(Error::Input(format!(
                "training batch needs at least 2 rows, got {}",
                batch.len()
            )));
        }
        let mut rng = derived_rng(self.config.seed, &[TAG_STEP_ENV, self.steps]);
        let inputs = self.prepare_step(batch, &mut rng)?;
        let ids = self.trainable();
        let params = self.param_values(&ids);
        let (loss, grads) = self.loss_and_grads(&inputs, &ids, &params, Objective::Total)?;
        self.apply_gradients(&ids, &grads)?;
        Ok((loss, inputs))
    }

    /// Fake-class probabilities at time `tau`.
    pub fn predict_proba<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        tau: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let z = self.features(batch)?;
        let e = self.eval_features(&z)?;
        let env = self.env_features(batch.len(), tau, rng)?;
        self.classifier.fake_probability(&e, &env)
    }

    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        tau: f64,
        rng: &mut R,
    ) -> Result<ClassificationMetrics> {
        let p = self.predict_proba(batch, tau, rng)?;
        let y: Vec<u8> = batch.y.iter().map(|&v| v as u8).collect();
        classification_metrics(&p, &y)
    }
}

fn fake_index(labels: &[usize]) -> Vec<usize> {
    (0..labels.len()).filter(|&i| labels[i] == 1).collect()
}

fn breakdown(tape: &Tape, l: [Var; 5]) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        vp: tape.value(l[0]).item()?,
        cl: tape.value(l[1]).item()?,
        vg: tape.value(l[2]).item()?,
        dm: tape.value(l[3]).item()?,
        total: tape.value(l[4]).item()?,
    })
}
