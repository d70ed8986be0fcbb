//! Two-phase self-adversarial training.
//!
//! Every iteration first takes an ordinary Adam step on the clean batch.
//! With SAT enabled it then builds an FGSM copy of the batch against the
//! parameters it just updated and takes a second step on that copy, paired
//! with the same ground-truth masks.
//!
//! All randomness of iteration `i` comes from `rng_at(seed, "train", i)`, so
//! a run resumed from a checkpoint replays exactly what an uninterrupted run
//! would have done.

use std::fmt;
use std::str::FromStr;

use forgeloc_autograd::{AdamState, FlushDenormals, Graph, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, RngExt};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, ForgerySample};
use crate::error::{Error, Result};
use crate::network::CoarseToFineModel;
use crate::seed::rng_at;

pub const DEFAULT_EPS_MAX: f64 = 0.01;
pub const DEFAULT_LR: f64 = 0.002;

#[derive(Clone, Debug, PartialEq)]
pub struct SatConfig {
    /// FGSM budgets are drawn uniformly from `(0, eps_max]`.
    pub eps_max: f64,
    pub lr: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub sat_enabled: bool,
    pub flip_rotate_enabled: bool,
}

impl Default for SatConfig {
    fn default() -> Self {
        SatConfig {
            eps_max: DEFAULT_EPS_MAX,
            lr: DEFAULT_LR,
            iterations: 1000,
            batch_size: 4,
            rng_seed: 0,
            sat_enabled: true,
            flip_rotate_enabled: false,
        }
    }
}

impl SatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_max > 0.0 && self.eps_max <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "eps_max must lie in (0, 1], got {}",
                self.eps_max
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRecord {
    pub iteration: u64,
    pub phase: u8,
    /// Per-sample FGSM budgets of phase 2; empty for phase 1.
    pub eps: Vec<f64>,
    pub loss: f64,
}

impl fmt::Display for PhaseRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} phase={} eps=", self.iteration, self.phase)?;
        if self.eps.is_empty() {
            f.write_str("-")?;
        } else {
            for (i, e) in self.eps.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{e}")?;
            }
        }
        write!(f, " loss={}", self.loss)
    }
}

impl FromStr for PhaseRecord {
    type Err = String;

    fn from_str(line: &str) -> std::result::Result<Self, Self::Err> {
        let mut fields = line.split(' ');
        let mut take = |key: &str| -> std::result::Result<&str, String> {
            let field = fields.next().ok_or_else(|| format!("missing `{key}`"))?;
            field
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(|| format!("expected `{key}=`, found `{field}`"))
        };
        let iteration = take("iter")?.parse::<u64>().map_err(|e| e.to_string())?;
        let phase = take("phase")?.parse::<u8>().map_err(|e| e.to_string())?;
        if phase != 1 && phase != 2 {
            return Err(format!("phase must be 1 or 2, got {phase}"));
        }
        let eps_field = take("eps")?;
        let eps = if eps_field == "-" {
            Vec::new()
        } else {
            eps_field
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|e| e.to_string()))
                .collect::<std::result::Result<_, _>>()?
        };
        let loss = take("loss")?.parse::<f64>().map_err(|e| e.to_string())?;
        if fields.next().is_some() {
            return Err("trailing fields".into());
        }
        Ok(PhaseRecord {
            iteration,
            phase,
            eps,
            loss,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Iterations completed so far.
    pub iteration: u64,
    pub history: Vec<PhaseRecord>,
}

impl TrainState {
    pub fn new(params: ParamStore<f32>, lr: f64) -> Self {
        let adam = AdamState::with_lr(&params, lr);
        TrainState {
            params,
            adam,
            iteration: 0,
            history: Vec::new(),
        }
    }
}

/// Budget uniform on `(0, eps_max]`: `U[0, 1)` mirrored so zero is excluded.
pub fn sample_eps<R: Rng + ?Sized>(rng: &mut R, eps_max: f64) -> f64 {
    let u: f64 = rng.random();
    eps_max * (1.0 - u)
}

/// Sum of the coarse and refined BCE terms; just the refined term when the
/// model has no coarse net.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, gt: &Tensor<T>, coarse: Option<Var>, refined: Var) -> Result<Var> {
    let refined_loss = g.bce_loss(refined, gt)?;
    match coarse {
        Some(c) => {
            let coarse_loss = g.bce_loss(c, gt)?;
            Ok(g.add(coarse_loss, refined_loss)?)
        }
        None => Ok(refined_loss),
    }
}

/// Records the forward pass on `images` and returns the loss node.
pub fn model_loss<T: Scalar>(
    model: &CoarseToFineModel,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    images: Var,
    masks: &Tensor<T>,
) -> Result<Var> {
    let out = model.forward(g, store, images)?;
    total_loss(g, masks, out.coarse_mask, out.refined_mask)
}

/// Loss value without recording gradients anywhere.
pub fn evaluate_loss(
    model: &CoarseToFineModel,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
) -> Result<f64> {
    let mut g = Graph::frozen();
    let x = g.constant(images.clone());
    let loss = model_loss(model, &mut g, store, x, masks)?;
    Ok(g.value(loss).data()[0].to_f64_lossy())
}

/// Gradient of the total loss with respect to the input images, and the loss.
/// Parameters are bound as constants, so the store is only read.
pub fn input_gradient<T: Scalar>(
    model: &CoarseToFineModel,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    masks: &Tensor<T>,
) -> Result<(Tensor<T>, f64)> {
    let mut g = Graph::frozen();
    let x = g.variable(images.clone());
    let loss = model_loss(model, &mut g, store, x, masks)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    let grads = g.backward(loss)?;
    Ok((grads.get(x), value))
}

/// `eps_i * sign(grad)` per sample, with `sign(0) = 0`. A single budget is
/// shared by the whole batch.
pub fn fgsm_perturbation<T: Scalar>(grad: &Tensor<T>, eps: &[f64]) -> Result<Tensor<T>> {
    let n = grad.shape().n();
    if eps.len() != n && eps.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "{} budgets for a batch of {n}",
            eps.len()
        )));
    }
    if let Some(bad) = eps.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "FGSM budget must be non-negative, got {bad}"
        )));
    }
    let per = grad.shape().per_sample();
    let mut out = grad.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let e = T::from_f64_lossy(eps[if eps.len() == 1 { 0 } else { i / per }]);
        *v = if *v > T::zero() {
            e
        } else if *v < T::zero() {
            -e
        } else {
            T::zero()
        };
    }
    Ok(out)
}

/// `clip[0,1](I_F + eps * sign(grad_I L))`, with `|I_adv - I_F| <= eps`
/// holding exactly. Reads the parameters only.
pub fn fgsm(
    model: &CoarseToFineModel,
    store: &ParamStore<f32>,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    eps: &[f64],
) -> Result<Tensor<f32>> {
    let (grad, _) = input_gradient(model, store, images, masks)?;
    let step = fgsm_perturbation(&grad, eps)?;
    let per_sample = images.shape().numel() / images.shape().n().max(1);
    let mut adv = images.clone();
    for (i, (a, s)) in adv.data_mut().iter_mut().zip(step.data()).enumerate() {
        let orig = *a;
        let budget = eps[if eps.len() == 1 { 0 } else { i / per_sample }];
        *a = (orig + *s).clamp(0.0, 1.0);
        // single-precision rounding of `orig + step` can overshoot the budget
        // by half an ulp; pull such values back inside
        while f64::from(*a) - f64::from(orig) > budget {
            *a = a.next_down();
        }
        while f64::from(orig) - f64::from(*a) > budget {
            *a = a.next_up();
        }
    }
    Ok(adv)
}

/// Forward, loss, backward and one Adam step. Returns the pre-step loss.
/// A non-finite loss aborts before any parameter changes.
pub fn gradient_step(
    model: &CoarseToFineModel,
    state: &mut TrainState,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    phase: u8,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let loss = model_loss(model, &mut g, &state.params, x, masks)?;
    let value = f64::from(g.value(loss).data()[0]);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            phase,
        });
    }
    let grads = g.backward(loss)?.for_params(&state.params);
    state.adam.step(&mut state.params, &grads)?;
    Ok(value)
}

/// One iteration of the two-phase loop on an assembled batch.
pub fn sat_iteration<R: Rng + ?Sized>(
    model: &CoarseToFineModel,
    state: &mut TrainState,
    cfg: &SatConfig,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    rng: &mut R,
) -> Result<()> {
    if images.shape().n() == 0 {
        return Err(Error::EmptyBatch);
    }
    let iteration = state.iteration;
    let loss = gradient_step(model, state, images, masks, 1)?;
    state.history.push(PhaseRecord {
        iteration,
        phase: 1,
        eps: Vec::new(),
        loss,
    });
    if cfg.sat_enabled {
        let eps: Vec<f64> = (0..images.shape().n()).map(|_| sample_eps(rng, cfg.eps_max)).collect();
        // the attack sees the parameters phase 1 just produced
        let adv = fgsm(model, &state.params, images, masks, &eps)?;
        let loss = gradient_step(model, state, &adv, masks, 2)?;
        state.history.push(PhaseRecord {
            iteration,
            phase: 2,
            eps,
            loss,
        });
    }
    state.iteration += 1;
    Ok(())
}

/// `count` distinct indices of `0..n` (all of them when `count >= n`).
pub fn batch_indices<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = count.min(n);
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Stacks samples into `n x 3 x h x w` images and `n x 1 x h x w` masks.
pub fn stack_samples<'a>(samples: impl IntoIterator<Item = &'a ForgerySample>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (images, masks): (Vec<_>, Vec<_>) = samples
        .into_iter()
        .map(|s| (s.image.to_tensor::<f32>(), s.mask.to_tensor::<f32>()))
        .unzip();
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Batch drawn for `iteration`, fully determined by the seed and index.
pub fn assemble_batch(
    samples: &[ForgerySample],
    cfg: &SatConfig,
    iteration: u64,
) -> Result<(Tensor<f32>, Tensor<f32>, ChaCha8Rng)> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rng = rng_at(cfg.rng_seed, "train", iteration);
    let idx = batch_indices(samples.len(), cfg.batch_size, &mut rng);
    let (images, masks) = if cfg.flip_rotate_enabled {
        let aug: Vec<ForgerySample> = idx.iter().map(|&i| augment(&samples[i], &mut rng)).collect();
        stack_samples(&aug)?
    } else {
        stack_samples(idx.iter().map(|&i| &samples[i]))?
    };
    Ok((images, masks, rng))
}

/// Runs iterations until `state.iteration == cfg.iterations`, reporting each
/// log line as it is produced.
pub fn train(
    model: &CoarseToFineModel,
    state: &mut TrainState,
    cfg: &SatConfig,
    samples: &[ForgerySample],
    mut on_record: impl FnMut(&PhaseRecord),
) -> Result<()> {
    cfg.validate()?;
    state.adam.lr = cfg.lr;
    let _ftz = FlushDenormals::new();
    while state.iteration < cfg.iterations {
        let (images, masks, mut rng) = assemble_batch(samples, cfg, state.iteration)?;
        let before = state.history.len();
        sat_iteration(model, state, cfg, &images, &masks, &mut rng)?;
        for r in &state.history[before..] {
            on_record(r);
        }
    }
    Ok(())
}
