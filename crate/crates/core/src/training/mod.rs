//! Client-side optimization: per-exit cross-entropy, best-exit distillation
//! with a running-loss teacher, and clipped SGD under a cosine LR.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ParamGroup, SubModel};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::ree::{forward_with_exits, ForwardFlags};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Backbone, Ree and classifier are all trained and exchanged.
    Full,
    /// Only Ree and the classifier train; the backbone stays on the server.
    Frozen,
}

impl TrainMode {
    pub fn trains(self, group: ParamGroup) -> bool {
        match self {
            TrainMode::Full => true,
            TrainMode::Frozen => !group.is_backbone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub total_rounds: usize,
    pub batch_size: usize,
    pub local_epochs: usize,
    /// Gradients are clamped elementwise to `[-clip, clip]`.
    pub clip: f64,
    pub tau: f64,
    /// Running-estimate smoothing factor.
    pub zeta: f64,
    pub eta_max: f64,
    pub ramp_rounds: usize,
    pub kd_enabled: bool,
    /// Stop the distillation gradient at the teacher exit.
    pub detach_teacher: bool,
    pub mode: TrainMode,
    /// Feature modulation ablation toggle.
    pub modulation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-2,
            lr_min: 1e-3,
            total_rounds: 1000,
            batch_size: 32,
            local_epochs: 1,
            clip: 1.0,
            tau: 1.0,
            zeta: 0.2,
            eta_max: 1.0,
            ramp_rounds: 300,
            kd_enabled: true,
            detach_teacher: true,
            mode: TrainMode::Full,
            modulation: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.zeta > 0.0 && self.zeta <= 1.0) {
            return bad("zeta must lie in (0, 1]");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.lr0 > 0.0) || !(self.lr_min >= 0.0) || self.lr_min > self.lr0 {
            return bad("need 0 <= lr_min <= lr0 and lr0 > 0");
        }
        if self.batch_size == 0 || self.local_epochs == 0 || self.total_rounds == 0 {
            return bad("batch_size, local_epochs and total_rounds must be positive");
        }
        if !(self.eta_max >= 0.0) {
            return bad("eta_max must be nonnegative");
        }
        Ok(())
    }

    pub fn flags(&self) -> ForwardFlags {
        ForwardFlags {
            modulation: self.modulation,
        }
    }
}

/// Linear ramp `η = η_max · min(t / ramp_rounds, 1)`.
pub fn eta_schedule(round: usize, cfg: &TrainConfig) -> f64 {
    if cfg.ramp_rounds == 0 {
        return cfg.eta_max;
    }
    cfg.eta_max * (round as f64 / cfg.ramp_rounds as f64).min(1.0)
}

/// Cosine annealing from `lr0` at round 1 to `lr_min` at `total_rounds`.
pub fn cosine_lr(round: usize, cfg: &TrainConfig) -> Result<f64> {
    if round == 0 || round > cfg.total_rounds {
        return Err(Error::Schedule(format!(
            "round {round} outside [1, {}]",
            cfg.total_rounds
        )));
    }
    if cfg.total_rounds == 1 {
        return Ok(cfg.lr0);
    }
    let progress = (round - 1) as f64 / (cfg.total_rounds - 1) as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Exponential moving average of per-exit training CE.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningEstimate {
    values: Option<Vec<f64>>,
}

impl RunningEstimate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_initialized(&self) -> bool {
        self.values.is_some()
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }

    /// `est ← (1 − ζ)·est + ζ·new`; an uninitialized estimate adopts `new`.
    pub fn update(&mut self, new: &[f64], zeta: f64) -> Result<()> {
        match &mut self.values {
            None => self.values = Some(new.to_vec()),
            Some(v) if v.len() != new.len() => {
                return Err(Error::State(format!(
                    "running estimate has {} exits, update has {}",
                    v.len(),
                    new.len()
                )))
            }
            Some(v) => {
                for (e, n) in v.iter_mut().zip(new) {
                    *e = (1.0 - zeta) * *e + zeta * n;
                }
            }
        }
        Ok(())
    }
}

pub fn update_running_estimate(est: &RunningEstimate, new: &[f64], zeta: f64) -> Result<RunningEstimate> {
    let mut next = est.clone();
    next.update(new, zeta)?;
    Ok(next)
}

/// Exit with the lowest running CE; ties go to the shallowest exit.
pub fn select_teacher(est: &RunningEstimate) -> Result<usize> {
    let values = est
        .values()
        .ok_or_else(|| Error::State("running estimate not initialized".into()))?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean CE of each exit's logits over the batch.
pub fn exit_ce_losses<F: Scalar>(
    g: &mut Graph<F>,
    exit_logits: &[Var],
    labels: &[usize],
    expected_exits: usize,
) -> Result<Vec<Var>> {
    if exit_logits.len() < expected_exits || expected_exits == 0 {
        return Err(Error::Trace(format!(
            "trace holds {} exit logits, expected {expected_exits}",
            exit_logits.len()
        )));
    }
    exit_logits[..expected_exits]
        .iter()
        .map(|&logits| g.cross_entropy(logits, labels))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct KdLoss {
    /// `None` when fewer than two exits are available.
    pub loss: Option<Var>,
    pub degenerate: bool,
}

/// `Σ_{e≠teacher} τ²·mean_j KL(σ(ŷ^teacher/τ) ‖ σ(ŷ^e/τ))`.
pub fn kd_loss<F: Scalar>(
    g: &mut Graph<F>,
    exit_logits: &[Var],
    teacher: usize,
    tau: f64,
    detach_teacher: bool,
) -> Result<KdLoss> {
    if teacher >= exit_logits.len() {
        return Err(Error::Trace(format!(
            "teacher exit {teacher} with {} exits",
            exit_logits.len()
        )));
    }
    if exit_logits.len() < 2 {
        return Ok(KdLoss {
            loss: None,
            degenerate: true,
        });
    }
    let t = if detach_teacher {
        g.detach(exit_logits[teacher])?
    } else {
        exit_logits[teacher]
    };
    let mut total: Option<Var> = None;
    for (e, &student) in exit_logits.iter().enumerate() {
        if e == teacher {
            continue;
        }
        let term = g.tempered_kl(t, student, F::lit(tau))?;
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(KdLoss {
        loss: total,
        degenerate: false,
    })
}

/// Loss components of one mini-batch step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub ce: Vec<f64>,
    pub kd: f64,
    pub eta: f64,
    pub teacher: Option<usize>,
    /// Value of the graph's total loss node.
    pub total: f64,
}

/// Clamps `grad` to `[-clip, clip]` and applies `param -= lr · grad`.
pub fn sgd_update<F: Scalar>(param: &mut Tensor<F>, grad: &[F], lr: f64, clip: f64) {
    let (lr, clip) = (F::lit(lr), F::lit(clip));
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p = *p - lr * g.max(-clip).min(clip);
    }
}

/// Builds the loss for one mini-batch, updates the running estimate, and takes
/// one clipped SGD step on the trainable groups.
pub fn train_batch<F: Scalar>(
    model: &mut SubModel<F>,
    batch: &[&Example<F>],
    estimate: &mut RunningEstimate,
    cfg: &TrainConfig,
    eta: f64,
    lr: f64,
) -> Result<StepReport> {
    let mut g = Graph::new();
    let train_backbone = cfg.mode == TrainMode::Full;
    let bound = model.bind(&mut g, train_backbone)?;
    let images: Vec<&Tensor<F>> = batch.iter().map(|e| &e.image).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let trace = forward_with_exits(&mut g, &bound, &model.config, &images, cfg.flags())?;
    let exits = model.config.schedule.exits_within(model.budget());
    let ce_vars = exit_ce_losses(&mut g, &trace.exit_logits, &labels, exits)?;
    let ce: Vec<f64> = ce_vars.iter().map(|&v| g.value(v).item().to_f64_lossless()).collect();

    estimate.update(&ce, cfg.zeta)?;
    let teacher = select_teacher(estimate)?;

    let mut total = ce_vars[0];
    for &v in &ce_vars[1..] {
        total = g.add(total, v)?;
    }
    let mut kd = 0.0;
    let mut used_teacher = None;
    if cfg.kd_enabled && exits > 1 {
        let kl = kd_loss(
            &mut g,
            &trace.exit_logits[..exits],
            teacher,
            cfg.tau,
            cfg.detach_teacher,
        )?;
        if let Some(kl) = kl.loss {
            kd = g.value(kl).item().to_f64_lossless();
            let weighted = g.scale(kl, F::lit(eta))?;
            total = g.add(total, weighted)?;
            used_teacher = Some(teacher);
        }
    }
    let total_value = g.value(total).item().to_f64_lossless();

    let grads = g.backward(total)?;
    let mut vars = Vec::new();
    bound.visit(&mut |group, _, v| vars.push((group, *v)));
    let mut i = 0;
    let mode = cfg.mode;
    model.visit_mut(&mut |group, _, t| {
        let (vg, var) = vars[i];
        debug_assert_eq!(vg, group);
        i += 1;
        if !mode.trains(group) {
            return;
        }
        if let Some(grad) = grads.slice(var) {
            sgd_update(t, grad, lr, cfg.clip);
        }
    });
    if !model.is_finite() {
        return Err(Error::NonFinite { op: "sgd_update" });
    }
    Ok(StepReport {
        ce,
        kd,
        eta,
        teacher: used_teacher,
        total: total_value,
    })
}

#[derive(Clone, Debug)]
pub struct LocalUpdate<F> {
    pub model: SubModel<F>,
    /// Examples processed (`N_i · local_epochs`), the aggregation weight.
    pub samples: usize,
    pub mean_loss: f64,
    pub steps: Vec<StepReport>,
}

/// Runs `local_epochs` shuffled passes of [`train_batch`] over `data` with the
/// round's learning rate and distillation weight.
pub fn local_train<F: Scalar>(
    mut model: SubModel<F>,
    data: &[Example<F>],
    estimate: &mut RunningEstimate,
    cfg: &TrainConfig,
    round: usize,
    rng: &mut impl Rng,
) -> Result<LocalUpdate<F>> {
    if data.is_empty() {
        return Err(Error::Input("client has no training data".into()));
    }
    let lr = cosine_lr(round, cfg)?;
    let eta = eta_schedule(round, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut steps = Vec::new();
    for _ in 0..cfg.local_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example<F>> = chunk.iter().map(|&i| &data[i]).collect();
            let step = train_batch(&mut model, &batch, estimate, cfg, eta, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { batch: steps.len() },
                other => other,
            })?;
            steps.push(step);
        }
    }
    let mean_loss = steps.iter().map(|s| s.total).sum::<f64>() / steps.len() as f64;
    Ok(LocalUpdate {
        model,
        samples: data.len() * cfg.local_epochs,
        mean_loss,
        steps,
    })
}
