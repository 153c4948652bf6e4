//! Reward-weighted flow-matching fine-tuning.
//!
//! One [`Trainer::step`] evaluates the per-element flow-matching loss, masks
//! it per DoF, scores every sample by its discounted chunk return and episode
//! reward (median/MAD normalized within its group), turns the clipped
//! advantage into a batch-normalized exponential weight, and takes one
//! optimizer step on the weighted loss plus an anchor to the initial
//! imitation parameters.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::policy::{ActionChunk, FlowPolicy, ObsBatch, Observation};
use crate::stats;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub obs: Observation,
    pub chunk: ActionChunk,
    /// Per-DoF mask broadcast over the horizon.
    pub dof_mask: Vec<bool>,
    /// `r_t .. r_{t+H-1}`, zero past the episode end.
    pub step_rewards: Vec<f64>,
    pub episode_reward: f64,
    pub group: String,
    pub timestep: usize,
    pub episode: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub c_a: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub lambda_anchor: f64,
    pub warmup_steps: u64,
    pub mad_constant: f64,
    pub scale_floor: f64,
    /// Denominator guard of the masked per-sample loss.
    pub loss_eps: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig {
            alpha: 0.25,
            beta: 0.7,
            gamma: 0.99,
            c_a: 6.0,
            w_min: 0.25,
            w_max: 4.0,
            lambda_anchor: 1e-3,
            warmup_steps: 500,
            mad_constant: 1.4826,
            scale_floor: 1e-8,
            loss_eps: 1e-8,
        }
    }
}

impl WeightingConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.w_min > 0.0
            && self.w_min <= 1.0
            && self.w_max >= 1.0
            && (0.0..=1.0).contains(&self.beta)
            && self.c_a > 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.alpha >= 0.0
            && self.lambda_anchor >= 0.0
            && self.scale_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid weighting config {self:?}")))
        }
    }

    /// Temperature after the linear warm-up ramp.
    pub fn alpha_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.alpha
        } else {
            self.alpha * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Masked per-sample loss. `loss` is the flattened `H x d_a` element row.
pub fn masked_sample_loss(loss: &[f64], mask: &[bool], horizon: usize, eps: f64) -> Result<f64> {
    let d = mask.len();
    if d == 0 || loss.len() != horizon * d {
        return Err(Error::Dimension(format!(
            "loss of {} elements for horizon {horizon} and {d} DoFs",
            loss.len()
        )));
    }
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return Err(Error::InvalidArgument("DoF mask selects nothing".into()));
    }
    let mut sum = 0.0;
    for row in loss.chunks_exact(d) {
        for (l, &m) in row.iter().zip(mask) {
            if m {
                sum += l;
            }
        }
    }
    Ok(sum / (horizon as f64 * active as f64 + eps))
}

/// `sum_k gamma^k r_k`.
pub fn chunk_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut g = 1.0;
    let mut acc = 0.0;
    for r in rewards {
        acc += g * r;
        g *= gamma;
    }
    acc
}

/// Median/MAD z-scores computed separately within each group label.
pub fn robust_normalize<G: AsRef<str>>(values: &[f64], groups: &[G], cfg: &WeightingConfig) -> Vec<f64> {
    assert_eq!(values.len(), groups.len(), "one group label per value");
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g.as_ref()).or_default().push(i);
    }
    let mut z = vec![0.0; values.len()];
    for idx in members.values() {
        let xs: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        let med = stats::median(&xs).expect("non-empty group");
        let mad = stats::mad(&xs, med).expect("non-empty group");
        let eps = cfg.scale_floor;
        let scale = if mad >= eps {
            (cfg.mad_constant * mad).max(eps)
        } else {
            let sd = stats::std_dev(&xs).expect("non-empty group");
            if sd >= eps {
                sd
            } else {
                eps
            }
        };
        for (&i, &x) in idx.iter().zip(&xs) {
            z[i] = (x - med) / scale;
        }
    }
    z
}

pub fn advantage(z_epi: f64, z_chunk: f64, cfg: &WeightingConfig) -> f64 {
    (cfg.beta * z_epi + (1.0 - cfg.beta) * z_chunk).clamp(-cfg.c_a, cfg.c_a)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchWeights {
    pub raw: Vec<f64>,
    pub clipped: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// `exp(alpha A)`, clipped to `[w_min, w_max]`, divided by the batch mean.
pub fn batch_weights(advantages: &[f64], alpha: f64, cfg: &WeightingConfig) -> Result<BatchWeights> {
    if advantages.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let raw: Vec<f64> = advantages.iter().map(|a| (alpha * a).exp()).collect();
    let clipped: Vec<f64> = raw.iter().map(|w| w.clamp(cfg.w_min, cfg.w_max)).collect();
    let mean = clipped.iter().sum::<f64>() / clipped.len() as f64;
    let normalized = clipped.iter().map(|w| w / mean).collect();
    Ok(BatchWeights {
        raw,
        clipped,
        normalized,
    })
}

pub fn rwfm_objective(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() || losses.is_empty() {
        return Err(Error::Dimension(format!(
            "{} losses against {} weights",
            losses.len(),
            weights.len()
        )));
    }
    if losses.len() == 1 {
        return Ok(losses[0]);
    }
    let wsum: f64 = weights.iter().sum();
    assert!(wsum > 0.0, "weights are bounded below by w_min > 0");
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / wsum)
}

/// Mean over parameter blocks of the squared distance to the anchor.
pub fn anchor_loss(theta: &Params, theta0: &Params) -> Result<f64> {
    let d = theta.block_sq_distances(theta0)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Gradient of [`anchor_loss`] scaled by `lambda`.
pub fn anchor_gradient(theta: &Params, theta0: &Params, lambda: f64) -> Result<Params> {
    theta.ensure_same_layout(theta0)?;
    let mut g = theta.zeros_like();
    let k = 2.0 * lambda / theta.specs().len() as f64;
    for ((gi, a), b) in g.data_mut().iter_mut().zip(theta.data()).zip(theta0.data()) {
        *gi = k * (a - b);
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Unweighted flow matching (produces the imitation anchor).
    PlainFm,
    /// Reward-weighted flow matching with anchor regularization.
    SaRwfm,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    /// Moment estimates with decoupled weight decay.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Cosine decay length in steps; 0 keeps the rate constant.
    pub decay_steps: u64,
    /// Rate reached at the end of the decay, as a fraction of `learning_rate`.
    pub final_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e-3,
            decay_steps: 0,
            final_fraction: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.decay_steps == 0 {
            return self.learning_rate;
        }
        let s = (step as f64 / self.decay_steps as f64).min(1.0);
        let f = self.final_fraction + (1.0 - self.final_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * s).cos());
        self.learning_rate * f
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchDiagnostics {
    pub step: u64,
    pub sample_losses: Vec<f64>,
    pub chunk_returns: Vec<f64>,
    pub episode_rewards: Vec<f64>,
    pub z_epi: Vec<f64>,
    pub z_chunk: Vec<f64>,
    pub advantages: Vec<f64>,
    pub w_raw: Vec<f64>,
    pub w_clip: Vec<f64>,
    pub weights: Vec<f64>,
    pub l_rwfm: f64,
    pub l_anchor: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub grad_norm: f64,
}

/// One line of the per-step training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_rwfm: f64,
    pub l_anchor: f64,
    pub l_total: f64,
    pub alpha: f64,
    pub w_mean: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub w_std: f64,
    pub grad_norm: f64,
}

impl From<&BatchDiagnostics> for StepLog {
    fn from(d: &BatchDiagnostics) -> Self {
        let w = &d.weights;
        StepLog {
            step: d.step,
            l_rwfm: d.l_rwfm,
            l_anchor: d.l_anchor,
            l_total: d.l_total,
            alpha: d.alpha,
            w_mean: stats::mean(w).unwrap_or(0.0),
            w_min: w.iter().copied().fold(f64::INFINITY, f64::min),
            w_max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            w_std: stats::std_dev(w).unwrap_or(0.0),
            grad_norm: d.grad_norm,
        }
    }
}

/// Sample weighting of a batch, independent of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleScores {
    pub chunk_returns: Vec<f64>,
    pub episode_rewards: Vec<f64>,
    pub z_epi: Vec<f64>,
    pub z_chunk: Vec<f64>,
    pub advantages: Vec<f64>,
    pub weights: BatchWeights,
}

pub fn score_batch(batch: &[&TrainSample], alpha: f64, cfg: &WeightingConfig) -> Result<SampleScores> {
    let chunk_returns: Vec<f64> = batch.iter().map(|s| chunk_return(&s.step_rewards, cfg.gamma)).collect();
    let episode_rewards: Vec<f64> = batch.iter().map(|s| s.episode_reward).collect();
    let groups: Vec<&str> = batch.iter().map(|s| s.group.as_str()).collect();
    let z_epi = robust_normalize(&episode_rewards, &groups, cfg);
    let z_chunk = robust_normalize(&chunk_returns, &groups, cfg);
    let advantages: Vec<f64> = z_epi
        .iter()
        .zip(&z_chunk)
        .map(|(&e, &c)| advantage(e, c, cfg))
        .collect();
    let weights = batch_weights(&advantages, alpha, cfg)?;
    Ok(SampleScores {
        chunk_returns,
        episode_rewards,
        z_epi,
        z_chunk,
        advantages,
        weights,
    })
}

/// Flow-time and noise draws for a batch, in sample order.
pub fn draw_flow_noise(rng: &mut ChaCha8Rng, batch: usize, chunk_len: usize) -> (Vec<f64>, Array2<f64>) {
    let mut t = Vec::with_capacity(batch);
    let mut x0 = Array2::zeros((batch, chunk_len));
    for i in 0..batch {
        t.push(rng.random::<f64>());
        for v in x0.row_mut(i).iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    (t, x0)
}

pub fn stack_chunks<'a>(chunks: impl IntoIterator<Item = &'a ActionChunk>) -> Array2<f64> {
    let rows: Vec<&ActionChunk> = chunks.into_iter().collect();
    let n = rows.first().map_or(0, |c| c.data.len());
    let mut a = Array2::zeros((rows.len(), n));
    for (i, c) in rows.iter().enumerate() {
        for (d, s) in a.row_mut(i).iter_mut().zip(&c.data) {
            *d = *s;
        }
    }
    a
}

/// Loss value and gradient of one batch, without updating parameters.
#[derive(Clone, Debug)]
pub struct Evaluated {
    pub diagnostics: BatchDiagnostics,
    pub gradient: Params,
}

pub struct Trainer {
    pub mode: TrainMode,
    pub cfg: WeightingConfig,
    pub optim: OptimConfig,
    theta0: Option<Params>,
    step: u64,
    moments: Option<(Vec<f64>, Vec<f64>)>,
}

impl Trainer {
    pub fn new(mode: TrainMode, cfg: WeightingConfig, optim: OptimConfig, theta0: Option<Params>) -> Result<Self> {
        cfg.validate()?;
        if mode == TrainMode::SaRwfm && theta0.is_none() && cfg.lambda_anchor > 0.0 {
            return Err(Error::InvalidArgument(
                "reward-weighted fine-tuning with an anchor needs initial parameters".into(),
            ));
        }
        Ok(Trainer {
            mode,
            cfg,
            optim,
            theta0,
            step: 0,
            moments: None,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn theta0(&self) -> Option<&Params> {
        self.theta0.as_ref()
    }

    /// Loss and exact gradient of `L_total` for fixed flow times and noise.
    pub fn evaluate(
        &self,
        policy: &FlowPolicy,
        batch: &[&TrainSample],
        t: &[f64],
        x0: &Array2<f64>,
    ) -> Result<Evaluated> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let dims = *policy.dims();
        let obs = ObsBatch::from_observations(batch.iter().map(|s| &s.obs), policy.uses_tactile())?;
        let targets = stack_chunks(batch.iter().map(|s| &s.chunk));
        let (loss, cache) = policy.fm_loss_elements(&obs, &targets, t, x0)?;

        let mut sample_losses = Vec::with_capacity(batch.len());
        for (row, s) in loss.rows().into_iter().zip(batch) {
            let row = row.to_vec();
            sample_losses.push(masked_sample_loss(&row, &s.dof_mask, dims.horizon, self.cfg.loss_eps)?);
        }

        let alpha = self.cfg.alpha_at(self.step);
        let scores = score_batch(batch, alpha, &self.cfg)?;
        let weights: Vec<f64> = match self.mode {
            TrainMode::SaRwfm => scores.weights.normalized.clone(),
            TrainMode::PlainFm => vec![1.0; batch.len()],
        };
        let l_rwfm = rwfm_objective(&sample_losses, &weights)?;
        let wsum: f64 = weights.iter().sum();

        let mut upstream = Array2::zeros(loss.dim());
        for (i, s) in batch.iter().enumerate() {
            let active = s.dof_mask.iter().filter(|&&m| m).count() as f64;
            let k = weights[i] / wsum / (dims.horizon as f64 * active + self.cfg.loss_eps);
            for (e, u) in upstream.row_mut(i).iter_mut().enumerate() {
                if s.dof_mask[e % dims.action_dim] {
                    *u = k;
                }
            }
        }
        let mut gradient = policy.backward(&cache, &upstream)?;

        let (l_anchor, lambda) = match &self.theta0 {
            Some(t0) => (anchor_loss(policy.params(), t0)?, self.cfg.lambda_anchor),
            None => (0.0, 0.0),
        };
        if let (Some(t0), true) = (&self.theta0, lambda > 0.0) {
            let ga = anchor_gradient(policy.params(), t0, lambda)?;
            gradient.add_scaled(&ga, 1.0);
        }
        let l_total = l_rwfm + lambda * l_anchor;
        let grad_norm = gradient.data().iter().map(|g| g * g).sum::<f64>().sqrt();

        Ok(Evaluated {
            diagnostics: BatchDiagnostics {
                step: self.step,
                sample_losses,
                chunk_returns: scores.chunk_returns,
                episode_rewards: scores.episode_rewards,
                z_epi: scores.z_epi,
                z_chunk: scores.z_chunk,
                advantages: scores.advantages,
                w_raw: scores.weights.raw,
                w_clip: scores.weights.clipped,
                weights,
                l_rwfm,
                l_anchor,
                l_total,
                alpha,
                grad_norm,
            },
            gradient,
        })
    }

    /// One fine-tuning step: draws flow times and noise from `rng`, evaluates
    /// the weighted objective and updates `policy` in place.
    pub fn step(
        &mut self,
        policy: &mut FlowPolicy,
        batch: &[&TrainSample],
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchDiagnostics> {
        let (t, x0) = draw_flow_noise(rng, batch.len(), policy.dims().chunk_len());
        let ev = self.evaluate(policy, batch, &t, &x0)?;
        let d = &ev.diagnostics;
        if !d.l_total.is_finite() || !d.grad_norm.is_finite() {
            return Err(Error::Numeric {
                step: self.step,
                detail: format!(
                    "L_rwfm = {}, L_anchor = {}, |grad| = {}, alpha = {}",
                    d.l_rwfm, d.l_anchor, d.grad_norm, d.alpha
                ),
            });
        }
        self.apply(policy, &ev.gradient);
        self.step += 1;
        Ok(ev.diagnostics)
    }

    fn apply(&mut self, policy: &mut FlowPolicy, grad: &Params) {
        let lr = self.optim.rate_at(self.step);
        match self.optim.optimizer {
            Optimizer::Sgd => policy.params_mut().add_scaled(grad, -lr),
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let n = grad.len();
                let (m, v) = self.moments.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
                let k = (self.step + 1) as i32;
                let c1 = 1.0 - beta1.powi(k);
                let c2 = 1.0 - beta2.powi(k);
                let theta = policy.params_mut().data_mut();
                for i in 0..n {
                    let g = grad.data()[i];
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    theta[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * theta[i]);
                }
            }
        }
    }
}

/// Minibatch loop settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            steps: 1000,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Run `cfg.steps` trainer steps over uniformly drawn minibatches.
/// `on_step` sees every step's diagnostics (for logging).
pub fn fit(
    policy: &mut FlowPolicy,
    trainer: &mut Trainer,
    samples: &[TrainSample],
    cfg: &LoopConfig,
    mut on_step: impl FnMut(&BatchDiagnostics),
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.steps {
        let batch: Vec<&TrainSample> = (0..cfg.batch_size)
            .map(|_| &samples[rng.random_range(0..samples.len())])
            .collect();
        let d = trainer.step(policy, &batch, &mut rng)?;
        on_step(&d);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_loss_examples() {
        let all = vec![true; 6];
        let l: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let m = masked_sample_loss(&l, &all, 2, 0.0).unwrap();
        assert!((m - 5.5).abs() < 1e-12);

        let mut one = vec![false; 6];
        one[2] = true;
        let l: Vec<f64> = (0..12).map(|i| if i % 6 == 2 { 1.0 } else { 7.0 }).collect();
        assert!((masked_sample_loss(&l, &one, 2, 1e-8).unwrap() - 1.0).abs() < 1e-8);
        assert_eq!(masked_sample_loss(&[0.0; 12], &all, 2, 1e-8).unwrap(), 0.0);
        assert!(masked_sample_loss(&l, &[false; 6], 2, 1e-8).is_err());
    }

    #[test]
    fn chunk_return_examples() {
        assert_eq!(chunk_return(&[0.0; 5], 0.99), 0.0);
        assert!((chunk_return(&[1.0, 1.0], 0.99) - 1.99).abs() < 1e-15);
        assert_eq!(chunk_return(&[1.0, -2.0, 4.0], 1.0), 3.0);
    }

    #[test]
    fn robust_normalize_examples() {
        let cfg = WeightingConfig::default();
        let z = robust_normalize(&[1.0, 2.0, 3.0, 4.0, 100.0], &["a"; 5], &cfg);
        assert!((z[4] - 97.0 / 1.4826).abs() < 1e-12);
        assert!((z[4] - 65.43).abs() < 0.01);
        assert_eq!(robust_normalize(&[5.0, 5.0, 5.0], &["g"; 3], &cfg), vec![0.0; 3]);
    }

    #[test]
    fn mad_fallback_to_std() {
        let cfg = WeightingConfig::default();
        // MAD is zero (3 of 5 equal) but the spread is not.
        let x = [1.0, 1.0, 1.0, 2.0, 4.0];
        let z = robust_normalize(&x, &["g"; 5], &cfg);
        let sd = stats::std_dev(&x).unwrap();
        assert!((z[4] - 3.0 / sd).abs() < 1e-12);
    }

    #[test]
    fn groups_are_independent() {
        let cfg = WeightingConfig::default();
        let x = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        let g = ["a", "a", "a", "b", "b", "b"];
        let z = robust_normalize(&x, &g, &cfg);
        assert!((z[0] - z[3]).abs() < 1e-12 && (z[2] - z[5]).abs() < 1e-12);
    }

    #[test]
    fn advantage_examples() {
        let cfg = WeightingConfig::default();
        assert_eq!(advantage(0.0, 0.0, &cfg), 0.0);
        assert_eq!(advantage(10.0, 0.0, &cfg), 6.0);
        assert_eq!(advantage(-10.0, -10.0, &cfg), -6.0);
    }

    #[test]
    fn weight_examples() {
        let cfg = WeightingConfig::default();
        let w = batch_weights(&[0.0; 4], 0.25, &cfg).unwrap();
        assert_eq!(w.normalized, vec![1.0; 4]);
        let w = batch_weights(&[6.0], 0.25, &cfg).unwrap();
        assert!((w.raw[0] - 1.5f64.exp()).abs() < 1e-12);
        assert!((w.raw[0] - 4.4817).abs() < 1e-4);
        assert_eq!(w.clipped[0], 4.0);

        // Clipped weights [4.0, 0.25, 1.75] have mean 2.
        let a = [6.0, -6.0, 1.75f64.ln() / 0.25];
        let w = batch_weights(&a, 0.25, &cfg).unwrap();
        assert_eq!(w.clipped[..2], [4.0, 0.25]);
        assert!((w.clipped[2] - 1.75).abs() < 1e-12);
        let expect = [2.0, 0.125, 0.875];
        for (got, e) in w.normalized.iter().zip(expect) {
            assert!((got - e).abs() < 1e-12);
        }
        assert!((w.normalized.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        assert_eq!(rwfm_objective(&[1.0, 3.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(rwfm_objective(&[1.0, 3.0], &[3.0, 1.0]).unwrap(), 1.5);
        assert_eq!(rwfm_objective(&[0.7], &[3.2]).unwrap(), 0.7);
    }

    #[test]
    fn anchor_examples() {
        use crate::params::BlockSpec;
        let specs = vec![BlockSpec::new("w", 1, 2)];
        let a = Params::from_data(specs.clone(), vec![3.0, 4.0]).unwrap();
        let b = Params::zeros(specs.clone());
        assert_eq!(anchor_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(anchor_loss(&a, &b).unwrap(), 25.0);
        let g = anchor_gradient(&b, &b, 1.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let other = Params::zeros(vec![BlockSpec::new("w", 2, 2)]);
        assert!(anchor_loss(&a, &other).is_err());
    }

    #[test]
    fn warmup_ramps_alpha() {
        let cfg = WeightingConfig::default();
        assert_eq!(cfg.alpha_at(0), 0.0);
        assert!((cfg.alpha_at(250) - 0.125).abs() < 1e-15);
        assert_eq!(cfg.alpha_at(500), 0.25);
        assert_eq!(cfg.alpha_at(10_000), 0.25);
        let mut prev = 0.0;
        for s in 0..600 {
            assert!(cfg.alpha_at(s) >= prev);
            prev = cfg.alpha_at(s);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn scored(rewards: &[(f64, f64, usize)]) -> Vec<TrainSample> {
            rewards
                .iter()
                .enumerate()
                .map(|(i, &(epi, step, g))| TrainSample {
                    obs: Observation::new(vec![], vec![0.0], None),
                    chunk: ActionChunk::zeros(1, 1),
                    dof_mask: vec![true],
                    step_rewards: vec![step, step * 0.5],
                    episode_reward: epi,
                    group: format!("g{g}"),
                    timestep: i,
                    episode: i,
                })
                .collect()
        }

        fn batch() -> impl Strategy<Value = Vec<(f64, f64, usize)>> {
            prop::collection::vec((-5.0f64..2.0, -3.0f64..0.0, 0usize..3), 1..40)
        }

        proptest! {
            #[test]
            fn weights_are_bounded_and_mean_one(b in batch(), alpha in 0.0f64..1.0) {
                let cfg = WeightingConfig::default();
                let s = scored(&b);
                let refs: Vec<&TrainSample> = s.iter().collect();
                let sc = score_batch(&refs, alpha, &cfg).unwrap();
                let mean = sc.weights.normalized.iter().sum::<f64>() / b.len() as f64;
                prop_assert!((mean - 1.0).abs() <= 1e-12);
                prop_assert!(sc.advantages.iter().all(|a| a.abs() <= cfg.c_a));
                prop_assert!(sc.weights.clipped.iter().all(|w| (cfg.w_min..=cfg.w_max).contains(w)));
            }

            #[test]
            fn z_scores_ignore_groupwise_affine_maps(
                values in prop::collection::vec((-10.0f64..10.0, 0usize..3), 1..40),
                maps in prop::array::uniform3((0.01f64..100.0, -50.0f64..50.0)),
            ) {
                let cfg = WeightingConfig::default();
                let x: Vec<f64> = values.iter().map(|v| v.0).collect();
                let g: Vec<String> = values.iter().map(|v| v.1.to_string()).collect();
                let y: Vec<f64> = values.iter().map(|&(v, k)| maps[k].0 * v + maps[k].1).collect();
                let zx = robust_normalize(&x, &g, &cfg);
                let zy = robust_normalize(&y, &g, &cfg);
                for (a, b) in zx.iter().zip(&zy) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{} vs {}", a, b);
                }
            }

            #[test]
            fn constant_rewards_give_the_plain_mean(
                losses in prop::collection::vec(0.0f64..10.0, 1..30),
                r in -3.0f64..1.0,
                alpha in 0.0f64..1.0,
            ) {
                let cfg = WeightingConfig::default();
                let s = scored(&vec![(r, r, 0); losses.len()]);
                let refs: Vec<&TrainSample> = s.iter().collect();
                let sc = score_batch(&refs, alpha, &cfg).unwrap();
                let l = rwfm_objective(&losses, &sc.weights.normalized).unwrap();
                let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                prop_assert!((l - mean).abs() <= 1e-12);
            }
        }
    }
}
