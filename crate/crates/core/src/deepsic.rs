//! DeepSIC soft interference cancellation: a `K x Q` grid of small
//! classifiers, each refining one user's symbol posterior from the channel
//! output and the other users' estimates of the previous iteration.
//!
//! Training comes in four flavours: sequential frequentist, end-to-end
//! (frequentist or Bayesian through one posterior over all modules), and
//! modular Bayesian, where each module gets its own posterior and later
//! iterations learn from ensembled estimates of earlier ones. A
//! fully-connected black-box detector is included as a baseline.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::modem::argmax;
use crate::nn::{
    backward, cross_entropy_loss, kl_regularizer, softmax_backward, AdamConfig, AdamState, Batch,
    DropoutPosterior, MaskSchedule, NetworkParams, OutputHead, PosteriorMode, Trained,
    INITIAL_DROP_PROBABILITY,
};
use crate::seed::{open_unit, rng_for, tag};

pub const HIDDEN_UNITS: usize = 16;
pub const DEFAULT_ITERATIONS: usize = 3;
pub const DEFAULT_ENSEMBLE: usize = 5;
pub const BLACKBOX_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeepSicShape {
    pub users: usize,
    pub antennas: usize,
    pub classes: usize,
    pub iterations: usize,
}

impl DeepSicShape {
    pub fn module_input(&self) -> usize {
        2 * self.antennas + (self.users - 1) * self.classes
    }

    pub fn module_layers(&self) -> [usize; 3] {
        [self.module_input(), HIDDEN_UNITS, self.classes]
    }

    pub fn module_count(&self) -> usize {
        self.users * self.iterations
    }

    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.antennas == 0 || self.iterations == 0 || self.classes < 2 {
            return Err(Error::invalid(format!("degenerate DeepSIC shape {self:?}")));
        }
        Ok(())
    }

    fn index(&self, k: usize, q: usize) -> usize {
        q * self.users + k
    }
}

/// Per-user symbol posteriors, `probs[(i * users + k) * classes + s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSymbols {
    pub users: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl SoftSymbols {
    fn uniform(len: usize, users: usize, classes: usize) -> Self {
        Self {
            users,
            classes,
            probs: vec![1.0 / classes as f64; len * users * classes],
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len() / (self.users * self.classes)
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, i: usize, k: usize) -> &[f64] {
        let at = (i * self.users + k) * self.classes;
        &self.probs[at..at + self.classes]
    }

    /// Argmax decisions, `[i * users + k]`, ties to the lowest index.
    pub fn hard_decisions(&self) -> Vec<usize> {
        self.probs.chunks(self.classes).map(argmax).collect()
    }

    /// Probability of the hard decision for every (time, user).
    pub fn confidences(&self) -> Vec<f64> {
        self.probs
            .chunks(self.classes)
            .map(|p| p.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }

    fn set_user(&mut self, k: usize, rows: &[f64]) {
        let s = self.classes;
        for (i, r) in rows.chunks(s).enumerate() {
            let at = (i * self.users + k) * s;
            self.probs[at..at + s].copy_from_slice(r);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepSicParams {
    shape: DeepSicShape,
    /// `modules[q * users + k]`.
    modules: Vec<NetworkParams>,
}

impl DeepSicParams {
    pub fn zeros(shape: DeepSicShape) -> Result<Self> {
        shape.validate()?;
        let m = NetworkParams::zeros(&shape.module_layers(), OutputHead::Softmax)?;
        Ok(Self {
            shape,
            modules: vec![m; shape.module_count()],
        })
    }

    /// Module `(k, q)` initialized from the stream `(seed, k, q)`.
    pub fn init(shape: DeepSicShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut modules = Vec::with_capacity(shape.module_count());
        for q in 0..shape.iterations {
            for k in 0..shape.users {
                let mut rng = rng_for(seed, &[tag::INIT, k as u64, q as u64]);
                modules.push(NetworkParams::init_uniform(
                    &shape.module_layers(),
                    OutputHead::Softmax,
                    &mut rng,
                )?);
            }
        }
        Ok(Self { shape, modules })
    }

    pub fn from_modules(shape: DeepSicShape, modules: Vec<NetworkParams>) -> Result<Self> {
        shape.validate()?;
        if modules.len() != shape.module_count()
            || modules.iter().any(|m| m.layer_sizes() != shape.module_layers())
        {
            return Err(Error::invalid("module grid does not match the DeepSIC shape"));
        }
        Ok(Self { shape, modules })
    }

    pub fn shape(&self) -> DeepSicShape {
        self.shape
    }

    pub fn module(&self, k: usize, q: usize) -> &NetworkParams {
        &self.modules[self.shape.index(k, q)]
    }

    pub fn module_mut(&mut self, k: usize, q: usize) -> &mut NetworkParams {
        let i = self.shape.index(k, q);
        &mut self.modules[i]
    }

    pub fn modules(&self) -> &[NetworkParams] {
        &self.modules
    }
}

fn time_count(shape: &DeepSicShape, features: &[f64]) -> Result<usize> {
    let d = 2 * shape.antennas;
    if features.len() % d != 0 {
        return Err(Error::invalid(format!(
            "feature length {} is not a multiple of 2N = {d}",
            features.len()
        )));
    }
    Ok(features.len() / d)
}

/// Input rows of user `k`'s modules: `[Re y; Im y]` followed by the previous
/// estimates of every other user in ascending user order.
fn module_inputs(shape: &DeepSicShape, features: &[f64], prev: &SoftSymbols, k: usize) -> Vec<f64> {
    let d = 2 * shape.antennas;
    let t = features.len() / d;
    let mut out = Vec::with_capacity(t * shape.module_input());
    for i in 0..t {
        out.extend_from_slice(&features[i * d..(i + 1) * d]);
        for l in (0..shape.users).filter(|&l| l != k) {
            out.extend_from_slice(prev.get(i, l));
        }
    }
    out
}

fn apply_module(net: &NetworkParams, inputs: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    inputs
        .par_chunks(net.input_size())
        .flat_map_iter(|row| net.forward_cached(row, mask).probs)
        .collect()
}

fn average(members: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = members[0].clone();
    for m in &members[1..] {
        for (a, v) in acc.iter_mut().zip(m) {
            *a += v;
        }
    }
    let j = members.len() as f64;
    acc.iter_mut().for_each(|a| *a /= j);
    acc
}

/// Runs the SIC iterations; `module_out(k, q, inputs)` evaluates module
/// `(k, q)` on a batch of input rows.
fn run_sic(
    shape: &DeepSicShape,
    features: &[f64],
    module_out: impl Fn(usize, usize, &[f64]) -> Vec<f64>,
    mut on_iteration: impl FnMut(usize, &SoftSymbols),
) -> Result<SoftSymbols> {
    let t = time_count(shape, features)?;
    let mut prev = SoftSymbols::uniform(t, shape.users, shape.classes);
    for q in 0..shape.iterations {
        let mut next = prev.clone();
        for k in 0..shape.users {
            let inputs = module_inputs(shape, features, &prev, k);
            next.set_user(k, &module_out(k, q, &inputs));
        }
        on_iteration(q, &next);
        prev = next;
    }
    Ok(prev)
}

/// Frequentist inference on stacked features (`T x 2N`).
pub fn deepsic_infer(params: &DeepSicParams, features: &[f64]) -> Result<SoftSymbols> {
    run_sic(
        &params.shape,
        features,
        |k, q, x| apply_module(params.module(k, q), x, None),
        |_, _| {},
    )
}

/// Dropout distributions over every module.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSicPosterior {
    pub shape: DeepSicShape,
    pub mode: PosteriorMode,
    pub ensemble_size: usize,
    /// `modules[q * users + k]`.
    pub modules: Vec<DropoutPosterior>,
}

impl DeepSicPosterior {
    /// Posterior over `params` whose hard masks never drop a unit.
    pub fn without_dropout(params: &DeepSicParams, mode: PosteriorMode, ensemble_size: usize) -> Result<Self> {
        let modules = params
            .modules
            .iter()
            .map(|m| DropoutPosterior::with_logits(m.clone(), vec![f64::NEG_INFINITY; m.hidden_units()]))
            .collect::<Result<_>>()?;
        Self::new(params.shape, mode, ensemble_size, modules)
    }

    pub fn new(
        shape: DeepSicShape,
        mode: PosteriorMode,
        ensemble_size: usize,
        modules: Vec<DropoutPosterior>,
    ) -> Result<Self> {
        if ensemble_size == 0 {
            return Err(Error::invalid("ensemble size must be at least 1"));
        }
        if modules.len() != shape.module_count() {
            return Err(Error::invalid("posterior grid does not match the DeepSIC shape"));
        }
        Ok(Self {
            shape,
            mode,
            ensemble_size,
            modules,
        })
    }

    pub fn module(&self, k: usize, q: usize) -> &DropoutPosterior {
        &self.modules[self.shape.index(k, q)]
    }

    pub fn nominal(&self) -> DeepSicParams {
        DeepSicParams {
            shape: self.shape,
            modules: self.modules.iter().map(|m| m.nominal.clone()).collect(),
        }
    }

    pub fn logit_count(&self) -> usize {
        self.modules.iter().map(|m| m.dropout_logits.len()).sum()
    }

    /// Hard keep masks of member `j`, one per module, from the streams
    /// `(seed, k, q, j)`.
    fn member_masks(&self, j: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..self.shape.iterations)
            .flat_map(|q| (0..self.shape.users).map(move |k| (k, q)))
            .map(|(k, q)| {
                let mut rng = rng_for(seed, &[tag::INFER_MASK, k as u64, q as u64, j as u64]);
                self.module(k, q).sample_keep_mask(&mut rng)
            })
            .collect()
    }
}

fn require_mode(posterior: &DeepSicPosterior, mode: PosteriorMode) -> Result<()> {
    if posterior.mode != mode {
        return Err(Error::invalid(format!(
            "posterior mode is {}, expected {}",
            posterior.mode.name(),
            mode.name()
        )));
    }
    Ok(())
}

/// Averages the final estimates of `J` full-architecture realizations.
pub fn bayesian_infer(
    posterior: &DeepSicPosterior,
    features: &[f64],
    ensemble_size: usize,
    seed: u64,
) -> Result<SoftSymbols> {
    require_mode(posterior, PosteriorMode::EndToEnd)?;
    if ensemble_size == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let shape = posterior.shape;
    let members = (0..ensemble_size)
        .map(|j| {
            let masks = posterior.member_masks(j, seed);
            run_sic(
                &shape,
                features,
                |k, q, x| {
                    let i = shape.index(k, q);
                    apply_module(&posterior.modules[i].nominal, x, Some(&masks[i]))
                },
                |_, _| {},
            )
            .map(|s| s.probs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SoftSymbols {
        users: shape.users,
        classes: shape.classes,
        probs: average(&members),
    })
}

/// Ensembles every module inside the SIC loop.
pub fn modular_bayesian_infer(
    posterior: &DeepSicPosterior,
    features: &[f64],
    ensemble_size: usize,
    seed: u64,
) -> Result<SoftSymbols> {
    modular_bayesian_trace(posterior, features, ensemble_size, seed, |_, _| {})
}

/// [`modular_bayesian_infer`] reporting the ensembled estimates of every
/// iteration.
pub fn modular_bayesian_trace(
    posterior: &DeepSicPosterior,
    features: &[f64],
    ensemble_size: usize,
    seed: u64,
    on_iteration: impl FnMut(usize, &SoftSymbols),
) -> Result<SoftSymbols> {
    require_mode(posterior, PosteriorMode::Modular)?;
    if ensemble_size == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let masks: Vec<Vec<Vec<f64>>> = (0..ensemble_size)
        .map(|j| posterior.member_masks(j, seed))
        .collect();
    let shape = posterior.shape;
    run_sic(
        &shape,
        features,
        |k, q, x| {
            let i = shape.index(k, q);
            ensembled_module(&posterior.modules[i], x, masks.iter().map(|m| m[i].as_slice()))
        },
        on_iteration,
    )
}

fn ensembled_module<'a>(
    post: &DropoutPosterior,
    inputs: &[f64],
    masks: impl Iterator<Item = &'a [f64]>,
) -> Vec<f64> {
    let outs: Vec<Vec<f64>> = masks.map(|m| apply_module(&post.nominal, inputs, Some(m))).collect();
    average(&outs)
}

/// Known pilot symbols: `T x 2N` features and `T x K` labels.
#[derive(Clone, Copy, Debug)]
pub struct PilotData<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
}

impl PilotData<'_> {
    fn validate(&self, users: usize, antennas: usize, classes: usize) -> Result<usize> {
        let d = 2 * antennas;
        if self.features.is_empty() {
            return Err(Error::config("pilots", "no pilot symbols"));
        }
        if self.features.len() % d != 0 || self.labels.len() != self.features.len() / d * users {
            return Err(Error::invalid("pilot features and labels disagree"));
        }
        if self.labels.iter().any(|&s| s >= classes) {
            return Err(Error::invalid("pilot label outside the constellation"));
        }
        Ok(self.features.len() / d)
    }

    fn user_labels(&self, k: usize, users: usize) -> Vec<usize> {
        self.labels.iter().skip(k).step_by(users).copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepSicTrainConfig {
    pub iterations: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub drop_probability: f64,
    pub ensemble_size: usize,
    /// When false the Bayesian trainers use all-ones masks and never move
    /// the dropout logits.
    pub dropout: bool,
    pub seed: u64,
}

impl Default for DeepSicTrainConfig {
    fn default() -> Self {
        Self {
            iterations: DEFAULT_ITERATIONS,
            steps: 500,
            learning_rate: 5e-3,
            beta: 1e4,
            drop_probability: INITIAL_DROP_PROBABILITY,
            ensemble_size: DEFAULT_ENSEMBLE,
            dropout: true,
            seed: 0,
        }
    }
}

impl DeepSicTrainConfig {
    fn initial_logit(&self) -> Result<f64> {
        let p = self.drop_probability;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::config("drop_probability", format!("{p} outside (0,1)")));
        }
        Ok((p / (1.0 - p)).ln())
    }
}

fn module_context(k: usize, q: usize) -> String {
    format!("DeepSIC module (k={}, q={})", k + 1, q + 1)
}

/// Relaxed per-sample keep masks (`t x hidden`) and their logit
/// derivatives for module `(k, q)` at `step`.
fn training_masks(
    post: &DropoutPosterior,
    t: usize,
    k: usize,
    q: usize,
    step: usize,
    config: &DeepSicTrainConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = post.dropout_logits.len();
    if !config.dropout {
        return Ok((vec![1.0; t * h], vec![0.0; t * h]));
    }
    let mut rng = rng_for(
        config.seed,
        &[tag::TRAIN_MASK, k as u64, q as u64, step as u64],
    );
    let mut keep = Vec::with_capacity(t * h);
    let mut dkeep = Vec::with_capacity(t * h);
    let mut draws = vec![0.0; h];
    for _ in 0..t {
        draws.iter_mut().for_each(|u| *u = open_unit(&mut rng));
        let (kp, dk) = post.relaxed_keep_mask(&draws)?;
        keep.extend(kp);
        dkeep.extend(dk);
    }
    Ok((keep, dkeep))
}

/// `sum_i dL/dmask[i][u] * dkeep/dlogit[i][u] + dKL/dlogit[u]`.
fn logit_gradient(grad_mask: &[f64], dkeep: &[f64], kl_grad: &[f64], dropout: bool) -> Vec<f64> {
    let h = kl_grad.len();
    let mut g = vec![0.0; h];
    if !dropout {
        return g;
    }
    for (gm, dk) in grad_mask.chunks(h).zip(dkeep.chunks(h)) {
        for u in 0..h {
            g[u] += gm[u] * dk[u];
        }
    }
    for (a, b) in g.iter_mut().zip(kl_grad) {
        *a += b;
    }
    g
}

/// Trains one module on fixed inputs; Bayesian when `logits` is given.
fn fit_module(
    net: &mut NetworkParams,
    logits: Option<&mut Vec<f64>>,
    inputs: &[f64],
    labels: &[usize],
    (k, q): (usize, usize),
    config: &DeepSicTrainConfig,
) -> Result<Vec<f64>> {
    let t = labels.len();
    let batch = Batch::new(inputs, labels, t);
    let mut curve = Vec::with_capacity(config.steps);
    let ctx = |e: Error| e.context(&module_context(k, q));
    match logits {
        None => {
            let mut adam = AdamState::new(net.len(), AdamConfig::with_lr(config.learning_rate));
            for _ in 0..config.steps {
                let g = backward(net, &batch, MaskSchedule::None).map_err(ctx)?;
                curve.push(g.loss);
                adam.step(net.as_mut_slice(), &g.params).map_err(ctx)?;
            }
        }
        Some(logits) => {
            let n = net.len();
            let mut adam = AdamState::new(n + logits.len(), AdamConfig::with_lr(config.learning_rate));
            let mut theta = net.as_slice().to_vec();
            theta.extend_from_slice(logits);
            for step in 0..config.steps {
                let post = DropoutPosterior::with_logits(net.clone(), logits.clone())?;
                let (keep, dkeep) = training_masks(&post, t, k, q, step, config)?;
                let g = backward(net, &batch, MaskSchedule::PerSample(&keep)).map_err(ctx)?;
                let kl = kl_regularizer(&post, config.beta)?;
                let loss = g.loss + kl.value;
                if !loss.is_finite() {
                    return Err(ctx(Error::Divergence {
                        context: format!("free energy at step {step}"),
                    }));
                }
                curve.push(loss);
                let mut grads: Vec<f64> = g.params.iter().zip(&kl.grad_params).map(|(a, b)| a + b).collect();
                grads.extend(logit_gradient(
                    g.mask.as_deref().unwrap_or(&[]),
                    &dkeep,
                    &kl.grad_logits,
                    config.dropout,
                ));
                adam.step(&mut theta, &grads).map_err(ctx)?;
                net.as_mut_slice().copy_from_slice(&theta[..n]);
                logits.copy_from_slice(&theta[n..]);
            }
        }
    }
    Ok(curve)
}

fn shape_for(pilots: &PilotData<'_>, users: usize, antennas: usize, classes: usize, config: &DeepSicTrainConfig) -> Result<(DeepSicShape, usize)> {
    let shape = DeepSicShape {
        users,
        antennas,
        classes,
        iterations: config.iterations,
    };
    shape.validate().map_err(|e| match e {
        Error::InvalidInput(m) => Error::config("deepsic", m),
        other => other,
    })?;
    let t = pilots.validate(users, antennas, classes)?;
    Ok((shape, t))
}

/// Sequential per-module training: iteration `q` modules learn from the
/// outputs of the trained iteration `q - 1` modules on the pilots.
pub fn train_frequentist(
    pilots: &PilotData<'_>,
    users: usize,
    antennas: usize,
    classes: usize,
    config: &DeepSicTrainConfig,
) -> Result<Trained<DeepSicParams>> {
    let (shape, t) = shape_for(pilots, users, antennas, classes, config)?;
    let mut params = DeepSicParams::init(shape, config.seed)?;
    let mut prev = SoftSymbols::uniform(t, users, classes);
    let mut curves = vec![Vec::new(); shape.module_count()];
    for q in 0..shape.iterations {
        let mut next = prev.clone();
        for k in 0..users {
            let inputs = module_inputs(&shape, pilots.features, &prev, k);
            let labels = pilots.user_labels(k, users);
            let i = shape.index(k, q);
            curves[i] = fit_module(&mut params.modules[i], None, &inputs, &labels, (k, q), config)?;
            next.set_user(k, &apply_module(&params.modules[i], &inputs, None));
        }
        prev = next;
    }
    Ok(Trained {
        model: params,
        curves,
    })
}

/// Per-module posteriors trained in iteration order; the pilots' inputs to
/// iteration `q + 1` are the `J`-member ensembled outputs of iteration `q`.
pub fn train_modular_bayesian(
    pilots: &PilotData<'_>,
    users: usize,
    antennas: usize,
    classes: usize,
    config: &DeepSicTrainConfig,
) -> Result<Trained<DeepSicPosterior>> {
    let (shape, t) = shape_for(pilots, users, antennas, classes, config)?;
    let logit0 = config.initial_logit()?;
    let mut params = DeepSicParams::init(shape, config.seed)?;
    let mut logits = vec![vec![logit0; HIDDEN_UNITS]; shape.module_count()];
    let mut prev = SoftSymbols::uniform(t, users, classes);
    let mut curves = vec![Vec::new(); shape.module_count()];
    for q in 0..shape.iterations {
        let mut next = prev.clone();
        for k in 0..users {
            let inputs = module_inputs(&shape, pilots.features, &prev, k);
            let labels = pilots.user_labels(k, users);
            let i = shape.index(k, q);
            curves[i] = fit_module(
                &mut params.modules[i],
                Some(&mut logits[i]),
                &inputs,
                &labels,
                (k, q),
                config,
            )?;
            let post = DropoutPosterior::with_logits(params.modules[i].clone(), logits[i].clone())?;
            let masks: Vec<Vec<f64>> = (0..config.ensemble_size.max(1))
                .map(|j| {
                    let mut rng = rng_for(config.seed, &[tag::INFER_MASK, k as u64, q as u64, j as u64]);
                    post.sample_keep_mask(&mut rng)
                })
                .collect();
            next.set_user(k, &ensembled_module(&post, &inputs, masks.iter().map(|m| m.as_slice())));
        }
        prev = next;
    }
    let modules = params
        .modules
        .into_iter()
        .zip(logits)
        .map(|(m, a)| DropoutPosterior::with_logits(m, a))
        .collect::<Result<_>>()?;
    Ok(Trained {
        model: DeepSicPosterior::new(shape, PosteriorMode::Modular, config.ensemble_size, modules)?,
        curves,
    })
}

/// End-to-end training: the loss is the summed cross-entropy of the final
/// iteration, back-propagated through every module.
fn train_end_to_end(
    pilots: &PilotData<'_>,
    shape: DeepSicShape,
    t: usize,
    config: &DeepSicTrainConfig,
    bayesian: bool,
) -> Result<(DeepSicParams, Vec<Vec<f64>>, Vec<f64>)> {
    let logit0 = if bayesian { config.initial_logit()? } else { 0.0 };
    let mut params = DeepSicParams::init(shape, config.seed)?;
    let mut logits = vec![vec![logit0; HIDDEN_UNITS]; shape.module_count()];
    let sizes: Vec<usize> = params.modules.iter().map(|m| m.len()).collect();
    let total: usize = sizes.iter().sum();
    let theta_len = if bayesian { total + HIDDEN_UNITS * shape.module_count() } else { total };
    let mut adam = AdamState::new(theta_len, AdamConfig::with_lr(config.learning_rate));
    let labels: Vec<Vec<usize>> = (0..shape.users).map(|k| pilots.user_labels(k, shape.users)).collect();
    let scale = 1.0 / t as f64;
    let d = 2 * shape.antennas;
    let s = shape.classes;
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let posts: Vec<DropoutPosterior> = params
            .modules
            .iter()
            .zip(&logits)
            .map(|(m, a)| DropoutPosterior::with_logits(m.clone(), a.clone()))
            .collect::<Result<_>>()?;
        let masks: Vec<(Vec<f64>, Vec<f64>)> = if bayesian {
            (0..shape.iterations)
                .flat_map(|q| (0..shape.users).map(move |k| (k, q)))
                .map(|(k, q)| training_masks(&posts[shape.index(k, q)], t, k, q, step, config))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut grad_masks: Vec<Vec<f64>> = vec![vec![0.0; t * HIDDEN_UNITS]; shape.module_count()];
        let mut loss = 0.0;
        for i in 0..t {
            let y = &pilots.features[i * d..(i + 1) * d];
            let mask_of = |m: usize| masks.get(m).map(|(kp, _)| &kp[i * HIDDEN_UNITS..(i + 1) * HIDDEN_UNITS]);
            // forward through the grid keeping caches
            let mut prev = vec![1.0 / s as f64; shape.users * s];
            let mut caches = Vec::with_capacity(shape.module_count());
            for q in 0..shape.iterations {
                let mut next = vec![0.0; shape.users * s];
                for k in 0..shape.users {
                    let m = shape.index(k, q);
                    let mut x = y.to_vec();
                    for l in (0..shape.users).filter(|&l| l != k) {
                        x.extend_from_slice(&prev[l * s..(l + 1) * s]);
                    }
                    let cache = params.modules[m].forward_cached(&x, mask_of(m));
                    next[k * s..(k + 1) * s].copy_from_slice(&cache.probs);
                    caches.push(cache);
                }
                prev = next;
            }
            // backward from the final iteration
            let mut g_probs = vec![0.0; shape.users * s];
            for q in (0..shape.iterations).rev() {
                let mut g_prev = vec![0.0; shape.users * s];
                for k in 0..shape.users {
                    let m = shape.index(k, q);
                    let probs = &caches[m].probs;
                    let g_logits = if q + 1 == shape.iterations {
                        let ce = cross_entropy_loss(probs, labels[k][i])?;
                        loss += ce.value * scale;
                        let mut g = probs.clone();
                        if ce.clipped {
                            g.iter_mut().for_each(|v| *v = 0.0);
                        } else {
                            g[labels[k][i]] -= 1.0;
                        }
                        g.iter_mut().for_each(|v| *v *= scale);
                        g
                    } else {
                        softmax_backward(probs, &g_probs[k * s..(k + 1) * s], 1)
                    };
                    let mut g_in = vec![0.0; shape.module_input()];
                    let gm = if bayesian {
                        Some(&mut grad_masks[m][i * HIDDEN_UNITS..(i + 1) * HIDDEN_UNITS])
                    } else {
                        None
                    };
                    params.modules[m]
                        .backward_cached(&caches[m], mask_of(m), &g_logits, &mut grads[m], gm, Some(&mut g_in))
                        .map_err(|e| e.context(&module_context(k, q)))?;
                    let mut at = d;
                    for l in (0..shape.users).filter(|&l| l != k) {
                        for c in 0..s {
                            g_prev[l * s + c] += g_in[at + c];
                        }
                        at += s;
                    }
                }
                g_probs = g_prev;
            }
        }
        let mut theta_grad = Vec::with_capacity(theta_len);
        let mut logit_grads = Vec::new();
        for (m, post) in posts.iter().enumerate() {
            if bayesian {
                let kl = kl_regularizer(post, config.beta)?;
                loss += kl.value;
                theta_grad.extend(grads[m].iter().zip(&kl.grad_params).map(|(a, b)| a + b));
                logit_grads.extend(logit_gradient(&grad_masks[m], &masks[m].1, &kl.grad_logits, config.dropout));
            } else {
                theta_grad.extend_from_slice(&grads[m]);
            }
        }
        theta_grad.extend(logit_grads);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                context: format!("DeepSIC end-to-end training step {step}"),
            });
        }
        curve.push(loss);
        let mut theta: Vec<f64> = params.modules.iter().flat_map(|m| m.as_slice().to_vec()).collect();
        if bayesian {
            theta.extend(logits.iter().flatten());
        }
        adam.step(&mut theta, &theta_grad)
            .map_err(|e| e.context(&format!("DeepSIC end-to-end training step {step}")))?;
        let mut at = 0;
        for m in params.modules.iter_mut() {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&theta[at..at + n]);
            at += n;
        }
        if bayesian {
            for a in logits.iter_mut() {
                a.copy_from_slice(&theta[at..at + HIDDEN_UNITS]);
                at += HIDDEN_UNITS;
            }
        }
    }
    Ok((params, logits, curve))
}

/// Frequentist end-to-end training of all modules on the final-iteration
/// loss.
pub fn train_frequentist_end_to_end(
    pilots: &PilotData<'_>,
    users: usize,
    antennas: usize,
    classes: usize,
    config: &DeepSicTrainConfig,
) -> Result<Trained<DeepSicParams>> {
    let (shape, t) = shape_for(pilots, users, antennas, classes, config)?;
    let (params, _, curve) = train_end_to_end(pilots, shape, t, config, false)?;
    Ok(Trained {
        model: params,
        curves: vec![curve],
    })
}

/// One posterior over all modules minimizing the end-to-end free energy.
pub fn train_bayesian_e2e(
    pilots: &PilotData<'_>,
    users: usize,
    antennas: usize,
    classes: usize,
    config: &DeepSicTrainConfig,
) -> Result<Trained<DeepSicPosterior>> {
    let (shape, t) = shape_for(pilots, users, antennas, classes, config)?;
    let (params, logits, curve) = train_end_to_end(pilots, shape, t, config, true)?;
    let modules = params
        .modules
        .into_iter()
        .zip(logits)
        .map(|(m, a)| DropoutPosterior::with_logits(m, a))
        .collect::<Result<_>>()?;
    Ok(Trained {
        model: DeepSicPosterior::new(shape, PosteriorMode::EndToEnd, config.ensemble_size, modules)?,
        curves: vec![curve],
    })
}

/// Layer sizes of the black-box detector: `2N -> 32 -> 32 -> 32 -> K|S|`.
pub fn blackbox_layers(users: usize, antennas: usize, classes: usize) -> [usize; 5] {
    [
        2 * antennas,
        BLACKBOX_HIDDEN,
        BLACKBOX_HIDDEN,
        BLACKBOX_HIDDEN,
        users * classes,
    ]
}

/// Frequentist training of the fully-connected detector with one softmax
/// head per user.
pub fn blackbox_detect_train(
    pilots: &PilotData<'_>,
    users: usize,
    antennas: usize,
    classes: usize,
    config: &DeepSicTrainConfig,
) -> Result<Trained<NetworkParams>> {
    let t = pilots.validate(users, antennas, classes)?;
    let mut rng = rng_for(config.seed, &[tag::INIT, u64::MAX]);
    let mut net = NetworkParams::init_uniform(
        &blackbox_layers(users, antennas, classes),
        OutputHead::GroupedSoftmax { groups: users },
        &mut rng,
    )?;
    let batch = Batch::new(pilots.features, pilots.labels, t);
    let mut adam = AdamState::new(net.len(), AdamConfig::with_lr(config.learning_rate));
    let mut curve = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let g = backward(&net, &batch, MaskSchedule::None).map_err(|e| e.context("black-box detector"))?;
        curve.push(g.loss);
        adam.step(net.as_mut_slice(), &g.params)
            .map_err(|e| e.context("black-box detector"))?;
    }
    Ok(Trained {
        model: net,
        curves: vec![curve],
    })
}

pub fn blackbox_detect(net: &NetworkParams, features: &[f64]) -> Result<SoftSymbols> {
    let OutputHead::GroupedSoftmax { groups } = net.head() else {
        return Err(Error::invalid("black-box detector needs grouped softmax heads"));
    };
    if features.len() % net.input_size() != 0 {
        return Err(Error::invalid("feature length does not match the detector input"));
    }
    Ok(SoftSymbols {
        users: groups,
        classes: net.output_size() / groups,
        probs: apply_module(net, features, None),
    })
}

const MANIFEST: &str = "manifest.txt";

fn module_file(dir: &Path, k: usize, q: usize, ext: &str) -> std::path::PathBuf {
    dir.join(format!("deepsic_k{}_q{}.{ext}", k + 1, q + 1))
}

fn write_manifest(dir: &Path, shape: &DeepSicShape, mode: &str, ensemble: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let text = format!(
        "users={}\niterations={}\nclasses={}\nantennas={}\nmode={mode}\nensemble={ensemble}\n",
        shape.users, shape.iterations, shape.classes, shape.antennas
    );
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_manifest(dir: &Path) -> Result<(DeepSicShape, String, usize)> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut get = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: path.clone(),
                line: n + 1,
                reason: "expected key=value".into(),
            });
        };
        get.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |key: &str| -> Result<usize> {
        get.get(key).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: 0,
            reason: format!("missing or invalid `{key}`"),
        })
    };
    let shape = DeepSicShape {
        users: num("users")?,
        iterations: num("iterations")?,
        classes: num("classes")?,
        antennas: num("antennas")?,
    };
    let mode = get.get("mode").cloned().unwrap_or_default();
    Ok((shape, mode, num("ensemble")?))
}

/// One `deepsic_k{k}_q{q}.bin` file per module plus `manifest.txt`.
pub fn write_params_snapshot(dir: &Path, params: &DeepSicParams) -> Result<()> {
    write_manifest(dir, &params.shape, "frequentist", 1)?;
    for q in 0..params.shape.iterations {
        for k in 0..params.shape.users {
            params.module(k, q).write_snapshot(&module_file(dir, k, q, "bin"))?;
        }
    }
    Ok(())
}

pub fn read_params_snapshot(dir: &Path) -> Result<DeepSicParams> {
    let (shape, _, _) = read_manifest(dir)?;
    let modules = read_modules(dir, &shape)?;
    DeepSicParams::from_modules(shape, modules)
}

fn read_modules(dir: &Path, shape: &DeepSicShape) -> Result<Vec<NetworkParams>> {
    (0..shape.iterations)
        .flat_map(|q| (0..shape.users).map(move |k| (k, q)))
        .map(|(k, q)| NetworkParams::read_snapshot(&module_file(dir, k, q, "bin"), OutputHead::Softmax))
        .collect()
}

/// Module snapshots plus one `deepsic_k{k}_q{q}.logits` text file per
/// module holding its dropout logits.
pub fn write_posterior_snapshot(dir: &Path, posterior: &DeepSicPosterior) -> Result<()> {
    write_manifest(dir, &posterior.shape, posterior.mode.name(), posterior.ensemble_size)?;
    for q in 0..posterior.shape.iterations {
        for k in 0..posterior.shape.users {
            let m = posterior.module(k, q);
            m.nominal.write_snapshot(&module_file(dir, k, q, "bin"))?;
            let path = module_file(dir, k, q, "logits");
            let text: String = m.dropout_logits.iter().map(|a| format!("{a}\n")).collect();
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn read_posterior_snapshot(dir: &Path) -> Result<DeepSicPosterior> {
    let (shape, mode, ensemble) = read_manifest(dir)?;
    let mode: PosteriorMode = mode.parse()?;
    let nominal = read_modules(dir, &shape)?;
    let mut modules = Vec::with_capacity(nominal.len());
    for (i, net) in nominal.into_iter().enumerate() {
        let (k, q) = (i % shape.users, i / shape.users);
        let path = module_file(dir, k, q, "logits");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let logits = text
            .lines()
            .enumerate()
            .map(|(n, l)| {
                l.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: n + 1,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        modules.push(DropoutPosterior::with_logits(net, logits)?);
    }
    DeepSicPosterior::new(shape, mode, ensemble, modules)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{make_block, BlockConfig, CMatrix, Nonlinearity};
    use crate::modem::{Constellation, ConstellationKind};
    use num_complex::Complex64;
    use rand::Rng;

    fn shape(k: usize, n: usize, s: usize, q: usize) -> DeepSicShape {
        DeepSicShape {
            users: k,
            antennas: n,
            classes: s,
            iterations: q,
        }
    }

    fn random_features(t: usize, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, &[]);
        (0..t * 2 * n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    fn assert_simplex(s: &SoftSymbols) {
        for p in s.probs.chunks(s.classes) {
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    struct Toy {
        features: Vec<f64>,
        labels: Vec<usize>,
    }

    fn toy_block(k: usize, snr: f64, pilots: usize, seed: u64) -> Toy {
        let c = Constellation::new(ConstellationKind::Qpsk);
        let h = if k == 2 {
            let e = (-1.0f64).exp();
            CMatrix::from_rows(
                2,
                2,
                vec![
                    Complex64::new(1.0, 0.0),
                    Complex64::new(e, 0.0),
                    Complex64::new(e, 0.0),
                    Complex64::new(1.0, 0.0),
                ],
            )
            .unwrap()
        } else {
            CMatrix::identity(k)
        };
        let cfg = BlockConfig {
            users: k,
            antennas: k,
            pilots,
            info: 0,
            snr_db: snr,
            nonlinearity: Nonlinearity::Linear,
        };
        let mut rng = rng_for(seed, &[]);
        let b = make_block(&cfg, &c, None, &h, &mut rng).unwrap();
        Toy {
            features: b.features(b.pilot_range()),
            labels: b.symbols.clone(),
        }
    }

    #[test]
    fn zero_modules_give_uniform_outputs() {
        let p = DeepSicParams::zeros(shape(3, 2, 4, 3)).unwrap();
        let out = deepsic_infer(&p, &random_features(5, 2, 1)).unwrap();
        assert!(out.probs.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn output_shape_for_four_users() {
        let p = DeepSicParams::init(shape(4, 4, 4, 3), 2).unwrap();
        let out = deepsic_infer(&p, &random_features(1, 4, 3)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.probs.len(), 16);
        assert_simplex(&out);
        assert!(deepsic_infer(&p, &[0.0; 7]).is_err());
    }

    #[test]
    fn single_user_ignores_iteration_count() {
        // K = 1: every module sees only y, so identical weights give identical output
        let base = DeepSicParams::init(shape(1, 2, 4, 1), 4).unwrap();
        let m = base.module(0, 0).clone();
        let deep = DeepSicParams::from_modules(shape(1, 2, 4, 3), vec![m.clone(), m.clone(), m]).unwrap();
        let x = random_features(10, 2, 5);
        assert_eq!(deepsic_infer(&base, &x).unwrap(), deepsic_infer(&deep, &x).unwrap());
    }

    #[test]
    fn module_inputs_layout() {
        let sh = shape(3, 1, 2, 1);
        let prev = SoftSymbols {
            users: 3,
            classes: 2,
            probs: vec![0.1, 0.9, 0.2, 0.8, 0.3, 0.7],
        };
        let x = module_inputs(&sh, &[5.0, 6.0], &prev, 1);
        assert_eq!(x, vec![5.0, 6.0, 0.1, 0.9, 0.3, 0.7]);
    }

    #[test]
    fn noiseless_orthogonal_training_fits_pilots() {
        let toy = toy_block(2, 60.0, 1000, 6);
        let pilots = PilotData {
            features: &toy.features,
            labels: &toy.labels,
        };
        let cfg = DeepSicTrainConfig {
            iterations: 2,
            ..Default::default()
        };
        let t = train_frequentist(&pilots, 2, 2, 4, &cfg).unwrap();
        let out = deepsic_infer(&t.model, &toy.features).unwrap();
        let errors = out
            .hard_decisions()
            .iter()
            .zip(&toy.labels)
            .filter(|(a, b)| a != b)
            .count();
        assert!((errors as f64) / (toy.labels.len() as f64) < 0.01);
        for c in &t.curves {
            assert!(c.last().unwrap() < &c[0]);
        }
    }

    #[test]
    fn empty_pilots_rejected() {
        let pilots = PilotData {
            features: &[],
            labels: &[],
        };
        let r = train_frequentist(&pilots, 2, 2, 4, &DeepSicTrainConfig::default());
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn degenerate_posteriors_match_frequentist() {
        let p = DeepSicParams::init(shape(3, 3, 8, 3), 7).unwrap();
        let x = random_features(40, 3, 8);
        let base = deepsic_infer(&p, &x).unwrap();
        let e2e = DeepSicPosterior::without_dropout(&p, PosteriorMode::EndToEnd, 1).unwrap();
        let modular = DeepSicPosterior::without_dropout(&p, PosteriorMode::Modular, 1).unwrap();
        let a = bayesian_infer(&e2e, &x, 1, 3).unwrap();
        let b = modular_bayesian_infer(&modular, &x, 1, 3).unwrap();
        let bits = |s: &SoftSymbols| s.probs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&base));
        assert_eq!(bits(&b), bits(&base));
        assert!(bayesian_infer(&e2e, &x, 0, 3).is_err());
        assert!(bayesian_infer(&modular, &x, 1, 3).is_err());
    }

    #[test]
    fn ensemble_mean_matches_members() {
        let p = DeepSicParams::init(shape(2, 2, 4, 2), 9).unwrap();
        let modules = p
            .modules()
            .iter()
            .map(|m| DropoutPosterior::new(m.clone(), 0.3).unwrap())
            .collect();
        let post = DeepSicPosterior::new(p.shape(), PosteriorMode::EndToEnd, 5, modules).unwrap();
        let x = random_features(6, 2, 10);
        let avg = bayesian_infer(&post, &x, 5, 11).unwrap();
        assert_simplex(&avg);
        // recompute members as frequentist runs on masked realizations
        let mut sum = vec![0.0; avg.probs.len()];
        for j in 0..5 {
            let masks = post.member_masks(j, 11);
            let realized: Vec<NetworkParams> = post
                .modules
                .iter()
                .zip(&masks)
                .map(|(m, k)| crate::nn::realization_from_mask(&m.nominal, k))
                .collect();
            let member = deepsic_infer(&DeepSicParams::from_modules(p.shape(), realized).unwrap(), &x).unwrap();
            for (s, v) in sum.iter_mut().zip(&member.probs) {
                *s += v / 5.0;
            }
        }
        for (a, b) in avg.probs.iter().zip(&sum) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn modular_intermediates_are_distributions() {
        let p = DeepSicParams::init(shape(3, 3, 4, 3), 12).unwrap();
        let modules = p
            .modules()
            .iter()
            .map(|m| DropoutPosterior::new(m.clone(), 0.5).unwrap())
            .collect();
        let post = DeepSicPosterior::new(p.shape(), PosteriorMode::Modular, 5, modules).unwrap();
        let mut seen = 0;
        modular_bayesian_trace(&post, &random_features(20, 3, 13), 5, 1, |_, s| {
            assert_simplex(s);
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 3);
    }

    #[test]
    fn bayesian_posterior_logit_count_and_curve() {
        let toy = toy_block(2, 8.0, 200, 14);
        let pilots = PilotData {
            features: &toy.features,
            labels: &toy.labels,
        };
        let cfg = DeepSicTrainConfig {
            iterations: 3,
            steps: 150,
            ..Default::default()
        };
        let t = train_bayesian_e2e(&pilots, 2, 2, 4, &cfg).unwrap();
        assert_eq!(t.model.logit_count(), 2 * 3 * HIDDEN_UNITS);
        let c = &t.curves[0];
        assert!(c.last().unwrap() < &c[0]);
        let m = train_modular_bayesian(&pilots, 2, 2, 4, &cfg).unwrap();
        assert_eq!(m.model.modules.len(), 6);
        for c in &m.curves {
            assert!(c.last().unwrap() < &c[0]);
        }
    }

    #[test]
    fn infinite_beta_without_dropout_is_frequentist_end_to_end() {
        let toy = toy_block(2, 10.0, 100, 15);
        let pilots = PilotData {
            features: &toy.features,
            labels: &toy.labels,
        };
        let cfg = DeepSicTrainConfig {
            iterations: 2,
            steps: 40,
            beta: f64::INFINITY,
            dropout: false,
            seed: 3,
            ..Default::default()
        };
        let f = train_frequentist_end_to_end(&pilots, 2, 2, 4, &cfg).unwrap();
        let b = train_bayesian_e2e(&pilots, 2, 2, 4, &cfg).unwrap();
        assert_eq!(b.model.nominal(), f.model);
        assert_eq!(b.curves, f.curves);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let toy = toy_block(2, 6.0, 12, 16);
        let pilots = PilotData {
            features: &toy.features,
            labels: &toy.labels,
        };
        let cfg = DeepSicTrainConfig {
            iterations: 2,
            steps: 1,
            learning_rate: 1e-3,
            seed: 5,
            ..Default::default()
        };
        let sh = shape(2, 2, 4, 2);
        // one Adam step moves each parameter by about -lr * sign(grad)
        let (after, _, _) = train_end_to_end(&pilots, sh, 12, &cfg, false).unwrap();
        let before = DeepSicParams::init(sh, 5).unwrap();
        let loss = |p: &DeepSicParams| -> f64 {
            let out = deepsic_infer(p, &toy.features).unwrap();
            (0..12)
                .map(|i| (0..2).map(|k| -out.get(i, k)[toy.labels[i * 2 + k]].ln()).sum::<f64>())
                .sum::<f64>()
                / 12.0
        };
        let h = 1e-6;
        let mut checked = 0;
        for m in 0..4 {
            for idx in (0..before.modules[m].len()).step_by(7) {
                let mut plus = before.clone();
                plus.modules[m].as_mut_slice()[idx] += h;
                let mut minus = before.clone();
                minus.modules[m].as_mut_slice()[idx] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let moved = after.modules[m].as_slice()[idx] - before.modules[m].as_slice()[idx];
                if fd.abs() > 1e-6 {
                    assert_eq!(moved.signum(), -fd.signum(), "module {m} index {idx}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn modular_equals_end_to_end_for_one_iteration() {
        let toy = toy_block(2, 8.0, 60, 17);
        let pilots = PilotData {
            features: &toy.features,
            labels: &toy.labels,
        };
        let cfg = DeepSicTrainConfig {
            iterations: 1,
            steps: 30,
            seed: 8,
            ..Default::default()
        };
        let e2e = train_bayesian_e2e(&pilots, 2, 2, 4, &cfg).unwrap().model;
        let modular = train_modular_bayesian(&pilots, 2, 2, 4, &cfg).unwrap().model;
        assert_eq!(e2e.modules, modular.modules);
        let a = bayesian_infer(&e2e, &toy.features, 5, 2).unwrap();
        let b = modular_bayesian_infer(&modular, &toy.features, 5, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blackbox_shapes_and_training() {
        let sh = blackbox_layers(2, 2, 4);
        let zero = NetworkParams::zeros(&sh, OutputHead::GroupedSoftmax { groups: 2 }).unwrap();
        let out = blackbox_detect(&zero, &random_features(3, 2, 18)).unwrap();
        assert!(out.probs.iter().all(|&v| v == 0.25));
        let toy = toy_block(2, 60.0, 1000, 19);
        let pilots = PilotData {
            features: &toy.features,
            labels: &toy.labels,
        };
        let t = blackbox_detect_train(&pilots, 2, 2, 4, &DeepSicTrainConfig::default()).unwrap();
        let out = blackbox_detect(&t.model, &toy.features).unwrap();
        assert_simplex(&out);
        let errors = out.hard_decisions().iter().zip(&toy.labels).filter(|(a, b)| a != b).count();
        assert!((errors as f64) / (toy.labels.len() as f64) < 0.05);
    }

    #[test]
    fn snapshots_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = DeepSicParams::init(shape(2, 3, 4, 2), 20).unwrap();
        write_params_snapshot(dir.path(), &p).unwrap();
        assert!(dir.path().join("deepsic_k2_q2.bin").exists());
        assert_eq!(read_params_snapshot(dir.path()).unwrap(), p);
        let modules = p
            .modules()
            .iter()
            .map(|m| DropoutPosterior::new(m.clone(), 0.2).unwrap())
            .collect();
        let post = DeepSicPosterior::new(p.shape(), PosteriorMode::Modular, 5, modules).unwrap();
        let d2 = dir.path().join("post");
        write_posterior_snapshot(&d2, &post).unwrap();
        assert_eq!(read_posterior_snapshot(&d2).unwrap(), post);
    }

    #[test]
    fn user_permutation_consistency() {
        // swapping users 0 and 1 in a 2-user system swaps the module grid
        let p = DeepSicParams::init(shape(2, 2, 4, 2), 21).unwrap();
        let swapped = DeepSicParams::from_modules(
            p.shape(),
            vec![
                p.module(1, 0).clone(),
                p.module(0, 0).clone(),
                p.module(1, 1).clone(),
                p.module(0, 1).clone(),
            ],
        )
        .unwrap();
        let x = random_features(15, 2, 22);
        let a = deepsic_infer(&p, &x).unwrap();
        let b = deepsic_infer(&swapped, &x).unwrap();
        for i in 0..15 {
            assert_eq!(a.get(i, 0), b.get(i, 1));
            assert_eq!(a.get(i, 1), b.get(i, 0));
        }
    }
}
