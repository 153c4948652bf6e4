//! Random small policies and batches for gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rwfm_core::policy::{ActionChunk, FlowPolicy, Observation, PolicyDims, TactileDims};
use rwfm_core::trainer::{draw_flow_noise, OptimConfig, TrainMode, TrainSample, Trainer, WeightingConfig};

pub struct Case {
    pub policy: FlowPolicy,
    pub trainer: Trainer,
    pub samples: Vec<TrainSample>,
    pub t: Vec<f64>,
    pub x0: ndarray::Array2<f64>,
}

pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tactile = seed.is_multiple_of(2);
    let dims = PolicyDims {
        horizon: rng.random_range(2..5),
        action_dim: rng.random_range(2..5),
        cond_dim: rng.random_range(1..4),
        proprio_dim: rng.random_range(2..4),
        latent_dim: rng.random_range(2..5),
        hidden: rng.random_range(3..7),
        tactile: tactile.then(|| TactileDims {
            input: rng.random_range(3..7),
            hidden: rng.random_range(2..5),
            embed: rng.random_range(2..4),
        }),
    };
    let policy = FlowPolicy::new(dims, seed + 100);
    // Anchor away from the current point so the anchor term has a gradient.
    let mut theta0 = policy.params().clone();
    for v in theta0.data_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    let cfg = WeightingConfig {
        warmup_steps: 0,
        alpha: rng.random_range(0.1..1.0),
        lambda_anchor: rng.random_range(1e-3..0.5),
        ..WeightingConfig::default()
    };
    let mode = if seed.is_multiple_of(3) {
        TrainMode::PlainFm
    } else {
        TrainMode::SaRwfm
    };
    let trainer = Trainer::new(mode, cfg, OptimConfig::default(), Some(theta0)).unwrap();

    let n = rng.random_range(3..7);
    let draw = |rng: &mut ChaCha8Rng, k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let samples = (0..n)
        .map(|i| {
            let tac = dims
                .tactile
                .map(|t| draw(&mut rng, t.input).iter().map(|v| v.abs()).collect());
            let obs = Observation::new(draw(&mut rng, dims.cond_dim), draw(&mut rng, dims.proprio_dim), tac);
            let chunk = ActionChunk::new(dims.horizon, dims.action_dim, draw(&mut rng, dims.chunk_len())).unwrap();
            let mut dof_mask: Vec<bool> = (0..dims.action_dim).map(|_| rng.random_bool(0.7)).collect();
            dof_mask[0] = true;
            TrainSample {
                obs,
                chunk,
                dof_mask,
                step_rewards: draw(&mut rng, dims.horizon),
                episode_reward: rng.random_range(-2.0..1.0),
                group: ["a", "b"][i % 2].to_string(),
                timestep: i,
                episode: i,
            }
        })
        .collect::<Vec<_>>();
    let (t, x0) = draw_flow_noise(&mut rng, n, dims.chunk_len());
    Case {
        policy,
        trainer,
        samples,
        t,
        x0,
    }
}

/// Relative error between the analytic gradient and central differences.
pub fn relative_error(seed: u64) -> f64 {
    let h = 1e-6;
    let mut c = random_case(seed);
    let batch: Vec<&TrainSample> = c.samples.iter().collect();
    let ev = c.trainer.evaluate(&c.policy, &batch, &c.t, &c.x0).unwrap();
    let grad = ev.gradient.data().to_vec();
    let mut num = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        let orig = c.policy.params().data()[i];
        c.policy.params_mut().data_mut()[i] = orig + h;
        let up = c
            .trainer
            .evaluate(&c.policy, &batch, &c.t, &c.x0)
            .unwrap()
            .diagnostics
            .l_total;
        c.policy.params_mut().data_mut()[i] = orig - h;
        let down = c
            .trainer
            .evaluate(&c.policy, &batch, &c.t, &c.x0)
            .unwrap()
            .diagnostics
            .l_total;
        c.policy.params_mut().data_mut()[i] = orig;
        num[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}
