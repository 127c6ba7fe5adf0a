//! Training objective and optimisation loop.
//!
//! Per example, with step `t` drawn uniformly from `1..=T`:
//!
//! ```text
//! x_0     = Emb(w) + sqrt(1 - alpha0) * eps0
//! x_t     = sqrt(abar_t) x_0 + sqrt(1 - abar_t) * eps_t
//! x0_hat  = f(x_t, t, I_di)
//! l_T     = mean((sqrt(abar_T) x_0)^2)
//! l_mse   = mean((x0_hat - x_0)^2)        for t > 1
//!         = mean((x0_hat - Emb(w))^2)     for t = 1
//! l_round = mean_i -log p(w_i | x_0,i)
//! total   = l_T + l_mse + l_round
//! ```
//!
//! Squared-error means run over every element of the `n x d` latent. The
//! batch loss is the mean of per-example losses; gradients are accumulated
//! example by example in batch order.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{self, DenoiserConfig, Dropout};
use crate::error::{Error, Result};
use crate::model::rounding_vars;
use crate::params::{BoundParams, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::tape::{Tape, Var};
use crate::textspace::{check_ids, rounding_logits, EMBEDDING};
use crate::vision::{toy_forward, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Linear decay to zero at the final step.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub lr_decay: LrDecay,
    pub seed: u64,
    /// Use the transposed embedding table as the rounding projection.
    pub tie_rounding: bool,
    /// Train the toy backbone together with the rest of the model.
    pub finetune_backbone: bool,
    /// Checkpoint period in steps; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 564,
            batch_size: 32,
            max_steps: 0,
            lr: 1e-4,
            weight_decay: 0.0,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_steps: 0,
            lr_decay: LrDecay::Constant,
            seed: 0,
            tie_rounding: false,
            finetune_backbone: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return fail("weight_decay and clip_norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive");
        }
        Ok(())
    }

    /// Learning rate applied at optimizer step `step` (1-based).
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let mut lr = self.lr;
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            lr *= step as f64 / self.warmup_steps as f64;
        } else if self.lr_decay == LrDecay::Linear && total_steps > self.warmup_steps {
            let span = (total_steps - self.warmup_steps) as f64;
            let done = (step - self.warmup_steps - 1) as f64;
            lr *= 1.0 - done / span;
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "l_T")]
    pub l_t: f64,
    pub l_mse: f64,
    pub l_round: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_t, self.l_mse, self.l_round, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn scaled(self, c: f64) -> Self {
        Self {
            l_t: self.l_t * c,
            l_mse: self.l_mse * c,
            l_round: self.l_round * c,
            total: self.total * c,
        }
    }

    fn plus(self, o: Self) -> Self {
        Self {
            l_t: self.l_t + o.l_t,
            l_mse: self.l_mse + o.l_mse,
            l_round: self.l_round + o.l_round,
            total: self.total + o.total,
        }
    }

    const ZERO: Self = Self {
        l_t: 0.0,
        l_mse: 0.0,
        l_round: 0.0,
        total: 0.0,
    };
}

/// Tape handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_t: Var,
    pub l_mse: Var,
    pub l_round: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, tape: &Tape<'_>) -> LossBreakdown {
        LossBreakdown {
            l_t: tape.scalar(self.l_t),
            l_mse: tape.scalar(self.l_mse),
            l_round: tape.scalar(self.l_round),
            total: tape.scalar(self.total),
        }
    }
}

/// The conditioning input of one training example.
#[derive(Debug, Clone)]
pub enum Condition {
    /// Precomputed `HW x C` residual map (frozen backbone).
    Residual(Array2<f64>),
    /// Raw images, run through the toy backbone on the tape.
    Images { before: Image, after: Image },
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    /// Fixed-length token ids, `seq_len` entries.
    pub ids: Vec<usize>,
    pub condition: Condition,
}

/// Random draws for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleNoise {
    pub t: usize,
    pub eps0: Array2<f64>,
    pub eps_t: Array2<f64>,
}

impl ExampleNoise {
    pub fn draw<R: Rng>(rng: &mut R, steps: usize, n: usize, d: usize) -> Self {
        let t = rng.gen_range(1..=steps);
        let eps0 = gaussian(rng, n, d);
        let eps_t = gaussian(rng, n, d);
        Self { t, eps0, eps_t }
    }
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

/// Loss terms given the clean embedding, the noised `x_0` and a
/// prediction, all as tape vars.
#[allow(clippy::too_many_arguments)]
pub fn loss_terms_on(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    sched: &NoiseSchedule,
    ids: &[usize],
    t: usize,
    emb: Var,
    x0: Var,
    x0_hat: Var,
) -> Result<LossVars> {
    let ab_t_final = sched.alpha_bar(sched.steps())?;
    let terminal = tape.scale(x0, ab_t_final.sqrt());
    let l_t = tape.mean_square(terminal);

    let target = if t == 1 { emb } else { x0 };
    let diff = tape.sub(x0_hat, target);
    let l_mse = tape.mean_square(diff);

    let (w, b) = rounding_vars(tape, bound)?;
    let logits = rounding_logits(tape, x0, w, b);
    let l_round = tape.cross_entropy(logits, ids);

    let partial = tape.add(l_t, l_mse);
    let total = tape.add(partial, l_round);
    Ok(LossVars {
        l_t,
        l_mse,
        l_round,
        total,
    })
}

/// Full per-example loss on the tape.
#[allow(clippy::too_many_arguments)]
pub fn training_loss_on(
    tape: &mut Tape<'_>,
    bound: &BoundParams,
    cfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    ids: &[usize],
    idi: Var,
    noise: &ExampleNoise,
    drop: &mut Dropout<'_>,
) -> Result<LossVars> {
    let t = noise.t;
    if t == 0 {
        return Err(Error::StepOutOfRange {
            t,
            steps: sched.steps(),
        });
    }
    let ab = sched.alpha_bar(t)?;
    if ids.len() != cfg.seq_len {
        return Err(Error::shape("training ids", &[cfg.seq_len], &[ids.len()]));
    }
    let table = bound.var(EMBEDDING)?;
    check_ids(ids, tape.shape(table).0)?;
    let shape = [cfg.seq_len, cfg.word_dim];
    for eps in [&noise.eps0, &noise.eps_t] {
        if eps.shape() != shape {
            return Err(Error::shape("training noise", &shape, eps.shape()));
        }
    }

    let emb = tape.gather_rows(table, ids);
    let word_noise = tape.constant(&noise.eps0 * (1.0 - sched.alpha0()).sqrt());
    let x0 = tape.add(emb, word_noise);
    let signal = tape.scale(x0, ab.sqrt());
    let diffusion_noise = tape.constant(&noise.eps_t * (1.0 - ab).sqrt());
    let x_t = tape.add(signal, diffusion_noise);
    let x0_hat = denoiser::denoise_on(tape, bound, cfg, x_t, idi, t, drop)?;
    loss_terms_on(tape, bound, sched, ids, t, emb, x0, x0_hat)
}

/// Per-example loss with dropout off.
pub fn training_loss(
    ids: &[usize],
    idi: &Array2<f64>,
    noise: &ExampleNoise,
    params: &ParamStore,
    sched: &NoiseSchedule,
    cfg: &DenoiserConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let idi = tape.constant(idi.clone());
    let vars = training_loss_on(
        &mut tape,
        &bound,
        cfg,
        sched,
        ids,
        idi,
        noise,
        &mut Dropout::disabled(),
    )?;
    Ok(vars.values(&tape))
}

fn condition_var(tape: &mut Tape<'_>, bound: &BoundParams, condition: &Condition) -> Result<Var> {
    match condition {
        Condition::Residual(idi) => Ok(tape.constant(idi.clone())),
        Condition::Images { before, after } => {
            let (fb, _, _) = toy_forward(tape, bound, before)?;
            let (fa, _, _) = toy_forward(tape, bound, after)?;
            Ok(tape.sub(fb, fa))
        }
    }
}

/// Loss and gradients of one example. `like` selects which parameters
/// receive gradients.
pub fn example_gradients(
    example: &TrainExample,
    noise: &ExampleNoise,
    params: &ParamStore,
    like: &ParamStore,
    sched: &NoiseSchedule,
    cfg: &DenoiserConfig,
    drop: &mut Dropout<'_>,
) -> Result<(LossBreakdown, ParamStore)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let idi = condition_var(&mut tape, &bound, &example.condition)?;
    let vars = training_loss_on(
        &mut tape,
        &bound,
        cfg,
        sched,
        &example.ids,
        idi,
        noise,
        drop,
    )?;
    let mut grads = tape.backward(vars.total);
    Ok((vars.values(&tape), bound.gradients(&mut grads, like)))
}

/// Mean loss and mean gradients over a batch, accumulated in order.
pub fn batch_gradients(
    batch: &[(&TrainExample, ExampleNoise)],
    params: &ParamStore,
    like: &ParamStore,
    sched: &NoiseSchedule,
    cfg: &DenoiserConfig,
    drop: &mut Dropout<'_>,
) -> Result<(LossBreakdown, ParamStore)> {
    let mut loss = LossBreakdown::ZERO;
    let mut acc = like.zeros_like();
    for (example, noise) in batch {
        let (l, g) = example_gradients(example, noise, params, like, sched, cfg, drop)?;
        loss = loss.plus(l);
        for ((_, a), (_, g)) in acc.iter_mut().zip(g.iter()) {
            *a += g;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for (_, a) in acc.iter_mut() {
        a.mapv_inplace(|v| v * inv);
    }
    Ok((loss.scaled(inv), acc))
}

pub fn global_norm(grads: &ParamStore) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_global_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / (norm + 1e-6);
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * c);
        }
    }
    norm
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: ParamStore,
    v: ParamStore,
    steps: i32,
}

impl AdamW {
    pub fn new(like: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: like.zeros_like(),
            v: like.zeros_like(),
            steps: 0,
        }
    }

    /// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)` for every
    /// parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps);
        let bc2 = 1.0 - self.beta2.powi(self.steps);
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Archive(format!("missing parameter `{name}`")))?;
            let m = self
                .m
                .get_mut(name)
                .expect("optimizer state mirrors gradients");
            let v = self
                .v
                .get_mut(name)
                .expect("optimizer state mirrors gradients");
            let decay = 1.0 - lr * self.weight_decay;
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn steps(&self) -> usize {
        self.records.len()
    }
}

/// Names that receive updates: everything except the backbone unless it is
/// being fine-tuned.
pub fn trainable(params: &ParamStore, finetune_backbone: bool) -> ParamStore {
    let mut like = ParamStore::new();
    for (name, v) in params.iter() {
        if finetune_backbone || !name.starts_with("backbone.") {
            like.insert(name.clone(), Array2::zeros(v.raw_dim()));
        }
    }
    like
}

/// Total optimizer steps the loop will run.
pub fn planned_steps(num_examples: usize, cfg: &TrainConfig) -> usize {
    let per_epoch = num_examples.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total.min(cfg.max_steps)
    } else {
        total
    }
}

/// Run the optimisation loop. `on_step` sees every log record and the
/// parameters after that step.
pub fn train<F>(
    examples: &[TrainExample],
    cfg: &TrainConfig,
    dcfg: &DenoiserConfig,
    sched: &NoiseSchedule,
    mut params: ParamStore,
    mut on_step: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&StepRecord, &ParamStore) -> Result<()>,
{
    cfg.validate()?;
    dcfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let vocab_size = params.get(EMBEDDING)?.nrows();
    for ex in examples {
        if ex.ids.len() != dcfg.seq_len {
            return Err(Error::Data(format!(
                "example has {} ids, expected seq_len {}",
                ex.ids.len(),
                dcfg.seq_len
            )));
        }
        check_ids(&ex.ids, vocab_size)?;
        if cfg.finetune_backbone && matches!(ex.condition, Condition::Residual(_)) {
            return Err(Error::Config(
                "finetune_backbone needs image examples, got precomputed features".into(),
            ));
        }
    }

    let like = trainable(&params, cfg.finetune_backbone);
    let mut opt = AdamW::new(&like, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_steps = planned_steps(examples.len(), cfg);
    let mut records = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut step = 0;

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step == total_steps {
                break 'epochs;
            }
            step += 1;
            let batch: Vec<(&TrainExample, ExampleNoise)> = chunk
                .iter()
                .map(|&i| {
                    let noise =
                        ExampleNoise::draw(&mut rng, sched.steps(), dcfg.seq_len, dcfg.word_dim);
                    (&examples[i], noise)
                })
                .collect();
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut drop = Dropout::new(dcfg.dropout, &mut drop_rng);
            let (loss, mut grads) =
                batch_gradients(&batch, &params, &like, sched, dcfg, &mut drop)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite loss {loss:?}"),
                });
            }
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("non-finite gradient norm {norm}"),
                });
            }
            let lr = cfg.lr_at(step, total_steps);
            opt.step(&mut params, &grads, lr)?;
            let record = StepRecord {
                step,
                epoch,
                loss,
                lr,
            };
            on_step(&record, &params)?;
            records.push(record);
        }
    }
    Ok(TrainOutcome { params, records })
}
