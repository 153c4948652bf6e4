//! Conditional flow-matching action policy.
//!
//! The vector field is a two-hidden-layer tanh perceptron over
//! `[x_t, t, cond, latent]`, where `latent = W s + b` projects the robot state
//! `s`. For a tactile-conditioned policy `s = [q; f]` with `f` the output of a
//! small tactile encoder; a proprio-only policy uses `s = q`.
//!
//! Training follows the linear path `x_t = (1 - t) x0 + t a` with target
//! velocity `a - x0`; sampling integrates the field with explicit Euler steps.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{BlockSpec, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TactileDims {
    /// Flattened input width, `2 * H * W` for two pads.
    pub input: usize,
    pub hidden: usize,
    /// Embedding width `d_f`.
    pub embed: usize,
}

impl Default for TactileDims {
    fn default() -> Self {
        TactileDims {
            input: 200,
            hidden: 128,
            embed: 128,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub horizon: usize,
    pub action_dim: usize,
    pub cond_dim: usize,
    pub proprio_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub tactile: Option<TactileDims>,
}

impl PolicyDims {
    pub fn teacher(cond_dim: usize) -> Self {
        PolicyDims {
            horizon: 50,
            action_dim: 6,
            cond_dim,
            proprio_dim: 6,
            latent_dim: 32,
            hidden: 128,
            tactile: Some(TactileDims::default()),
        }
    }

    pub fn proprio_only(self) -> Self {
        PolicyDims { tactile: None, ..self }
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.proprio_dim + self.tactile.map_or(0, |t| t.embed)
    }

    pub fn vf_input(&self) -> usize {
        self.chunk_len() + 1 + self.cond_dim + self.latent_dim
    }

    pub fn layout(&self) -> Vec<BlockSpec> {
        let mut v = Vec::new();
        if let Some(t) = self.tactile {
            v.push(BlockSpec::new("tactile.w1", t.input, t.hidden));
            v.push(BlockSpec::new("tactile.b1", 1, t.hidden));
            v.push(BlockSpec::new("tactile.w2", t.hidden, t.embed));
            v.push(BlockSpec::new("tactile.b2", 1, t.embed));
        }
        v.push(BlockSpec::new("state_proj.w", self.latent_dim, self.state_dim()));
        v.push(BlockSpec::new("state_proj.b", 1, self.latent_dim));
        v.push(BlockSpec::new("vf.w1", self.vf_input(), self.hidden));
        v.push(BlockSpec::new("vf.b1", 1, self.hidden));
        v.push(BlockSpec::new("vf.w2", self.hidden, self.hidden));
        v.push(BlockSpec::new("vf.b2", 1, self.hidden));
        v.push(BlockSpec::new("vf.w3", self.hidden, self.chunk_len()));
        v.push(BlockSpec::new("vf.b3", 1, self.chunk_len()));
        v
    }
}

/// `H x d_a` joint targets, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub horizon: usize,
    pub action_dim: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, action_dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != horizon * action_dim {
            return Err(Error::Dimension(format!(
                "chunk {horizon}x{action_dim} with {} values",
                data.len()
            )));
        }
        Ok(ActionChunk {
            horizon,
            action_dim,
            data,
        })
    }

    pub fn zeros(horizon: usize, action_dim: usize) -> Self {
        ActionChunk {
            horizon,
            action_dim,
            data: vec![0.0; horizon * action_dim],
        }
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.data[h * self.action_dim..(h + 1) * self.action_dim]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Policy input at one decision time.
///
/// Tactile data is only reachable through [`Observation::tactile`], which
/// counts every read so callers can prove a policy never consumed it.
#[derive(Debug)]
pub struct Observation {
    pub cond: Vec<f64>,
    pub proprio: Vec<f64>,
    tactile: Option<Vec<f64>>,
    tactile_reads: AtomicUsize,
}

impl Clone for Observation {
    fn clone(&self) -> Self {
        Observation::new(self.cond.clone(), self.proprio.clone(), self.tactile.clone())
    }
}

impl PartialEq for Observation {
    fn eq(&self, other: &Self) -> bool {
        self.cond == other.cond && self.proprio == other.proprio && self.tactile == other.tactile
    }
}

impl Observation {
    /// `tactile` is the flattened normalized `[left; right]` pad pair.
    pub fn new(cond: Vec<f64>, proprio: Vec<f64>, tactile: Option<Vec<f64>>) -> Self {
        Observation {
            cond,
            proprio,
            tactile,
            tactile_reads: AtomicUsize::new(0),
        }
    }

    pub fn has_tactile(&self) -> bool {
        self.tactile.is_some()
    }

    pub fn tactile(&self) -> Option<&[f64]> {
        self.tactile_reads.fetch_add(1, Ordering::Relaxed);
        self.tactile.as_deref()
    }

    pub fn tactile_reads(&self) -> usize {
        self.tactile_reads.load(Ordering::Relaxed)
    }

    pub fn without_tactile(&self) -> Observation {
        Observation::new(self.cond.clone(), self.proprio.clone(), None)
    }
}

/// Row-stacked observations.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsBatch {
    pub cond: Array2<f64>,
    pub proprio: Array2<f64>,
    pub tactile: Option<Array2<f64>>,
}

impl ObsBatch {
    /// Tactile rows are read only when `with_tactile` is set.
    pub fn from_observations<'a, I>(obs: I, with_tactile: bool) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Observation>,
    {
        let obs: Vec<&Observation> = obs.into_iter().collect();
        let b = obs.len();
        if b == 0 {
            return Err(Error::InvalidArgument("empty observation batch".into()));
        }
        let cd = obs[0].cond.len();
        let pd = obs[0].proprio.len();
        let mut cond = Array2::zeros((b, cd));
        let mut proprio = Array2::zeros((b, pd));
        let mut tactile: Option<Array2<f64>> = None;
        for (i, o) in obs.iter().enumerate() {
            if o.cond.len() != cd || o.proprio.len() != pd {
                return Err(Error::Dimension("ragged observation batch".into()));
            }
            cond.row_mut(i)
                .assign(&ArrayView2::from_shape((1, cd), &o.cond).unwrap().row(0));
            proprio
                .row_mut(i)
                .assign(&ArrayView2::from_shape((1, pd), &o.proprio).unwrap().row(0));
            if with_tactile {
                let t = o.tactile().ok_or(Error::MissingTactile)?;
                let arr = tactile.get_or_insert_with(|| Array2::zeros((b, t.len())));
                if arr.ncols() != t.len() {
                    return Err(Error::Dimension("ragged tactile batch".into()));
                }
                for (dst, src) in arr.row_mut(i).iter_mut().zip(t) {
                    *dst = *src;
                }
            }
        }
        Ok(ObsBatch { cond, proprio, tactile })
    }

    pub fn len(&self) -> usize {
        self.cond.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowPolicy {
    dims: PolicyDims,
    params: Params,
    version: u64,
}

/// Forward activations kept for [`FlowPolicy::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    tactile_in: Option<Array2<f64>>,
    tactile_h: Option<Array2<f64>>,
    state: Array2<f64>,
    vf_in: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    v: Array2<f64>,
    u: Array2<f64>,
}

impl ForwardCache {
    pub fn velocity(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn target_velocity(&self) -> &Array2<f64> {
        &self.u
    }
}

fn tanh_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(f64::tanh);
}

fn add_row(a: &mut Array2<f64>, bias: ArrayView2<'_, f64>) {
    *a += &bias.row(0);
}

impl FlowPolicy {
    /// Symmetric uniform fan-in initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights, zero biases.
    pub fn new(dims: PolicyDims, seed: u64) -> Self {
        let mut params = Params::zeros(dims.layout());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<BlockSpec> = params.specs().to_vec();
        for spec in specs {
            if spec.rows == 1 {
                continue;
            }
            // state_proj.w is stored as (out, in); the others as (in, out)
            let fan_in = if spec.name == "state_proj.w" {
                spec.cols
            } else {
                spec.rows
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in params.block_slice_mut(&spec.name) {
                *v = rng.random_range(-bound..bound);
            }
        }
        FlowPolicy {
            dims,
            params,
            version: 0,
        }
    }

    pub fn from_params(dims: PolicyDims, params: Params) -> Result<Self> {
        if params.specs() != dims.layout().as_slice() {
            return Err(Error::Dimension("parameter blocks do not match policy dims".into()));
        }
        Ok(FlowPolicy {
            dims,
            params,
            version: 0,
        })
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut Params {
        self.version += 1;
        &mut self.params
    }

    /// SHA-256 over the layout and parameter bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.dims).expect("dims serialize"));
        for (spec, values) in self.params.blocks() {
            h.update(spec.name.as_bytes());
            h.update((spec.rows as u64).to_le_bytes());
            h.update((spec.cols as u64).to_le_bytes());
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn uses_tactile(&self) -> bool {
        self.dims.tactile.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_obs(&self, obs: &ObsBatch) -> Result<()> {
        let d = &self.dims;
        if obs.cond.ncols() != d.cond_dim || obs.proprio.ncols() != d.proprio_dim {
            return Err(Error::Dimension(format!(
                "observation has cond {} / proprio {}, policy expects {} / {}",
                obs.cond.ncols(),
                obs.proprio.ncols(),
                d.cond_dim,
                d.proprio_dim
            )));
        }
        match (d.tactile, &obs.tactile) {
            (None, Some(_)) => Err(Error::TactileLeak),
            (Some(_), None) => Err(Error::MissingTactile),
            (Some(t), Some(x)) if x.ncols() != t.input => Err(Error::Dimension(format!(
                "tactile input width {} != {}",
                x.ncols(),
                t.input
            ))),
            _ => Ok(()),
        }
    }

    /// Tactile embedding rows and the encoder hidden layer.
    fn encode_tactile(&self, tactile: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let p = &self.params;
        let mut h = tactile.dot(&p.block("tactile.w1"));
        add_row(&mut h, p.block("tactile.b1"));
        tanh_inplace(&mut h);
        let mut e = h.dot(&p.block("tactile.w2"));
        add_row(&mut e, p.block("tactile.b2"));
        (e, h)
    }

    /// Robot state rows `[q; f]` (or `q`), plus encoder hidden activations.
    fn state_rows(&self, obs: &ObsBatch) -> (Array2<f64>, Option<Array2<f64>>) {
        match &obs.tactile {
            Some(t) if self.dims.tactile.is_some() => {
                let (e, h) = self.encode_tactile(t);
                let b = obs.len();
                let mut st = Array2::zeros((b, self.dims.state_dim()));
                st.slice_mut(s![.., ..self.dims.proprio_dim]).assign(&obs.proprio);
                st.slice_mut(s![.., self.dims.proprio_dim..]).assign(&e);
                (st, Some(h))
            }
            _ => (obs.proprio.clone(), None),
        }
    }

    fn project(&self, state: &Array2<f64>) -> Array2<f64> {
        let p = &self.params;
        let mut z = state.dot(&p.block("state_proj.w").t());
        add_row(&mut z, p.block("state_proj.b"));
        z
    }

    /// `W [q; f] + b` for explicit state rows.
    pub fn project_state(&self, state: &[f64]) -> Result<Vec<f64>> {
        if state.len() != self.dims.state_dim() {
            return Err(Error::Dimension(format!(
                "state of width {} for projection expecting {}",
                state.len(),
                self.dims.state_dim()
            )));
        }
        let row = Array2::from_shape_vec((1, state.len()), state.to_vec()).unwrap();
        Ok(self.project(&row).row(0).to_vec())
    }

    /// Latent state of a single observation.
    pub fn encode_state(&self, obs: &Observation) -> Result<Vec<f64>> {
        let batch = ObsBatch::from_observations([obs], self.uses_tactile())?;
        self.check_obs(&batch)?;
        let (st, _) = self.state_rows(&batch);
        Ok(self.project(&st).row(0).to_vec())
    }

    /// Latent state with an explicit tactile embedding (teacher) or none (student).
    pub fn encode_state_with_embedding(&self, q: &[f64], embedding: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut s = q.to_vec();
        if let Some(e) = embedding {
            s.extend_from_slice(e);
        }
        self.project_state(&s)
    }

    fn vf_input(&self, x: &Array2<f64>, t: &[f64], cond: &Array2<f64>, latent: &Array2<f64>) -> Array2<f64> {
        let d = &self.dims;
        let b = x.nrows();
        let mut inp = Array2::zeros((b, d.vf_input()));
        let hl = d.chunk_len();
        inp.slice_mut(s![.., ..hl]).assign(x);
        for (i, &ti) in t.iter().enumerate() {
            inp[[i, hl]] = ti;
        }
        inp.slice_mut(s![.., hl + 1..hl + 1 + d.cond_dim]).assign(cond);
        inp.slice_mut(s![.., hl + 1 + d.cond_dim..]).assign(latent);
        inp
    }

    /// `(h1, h2, v)` for a prepared vector-field input.
    fn field(&self, inp: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let p = &self.params;
        let mut h1 = inp.dot(&p.block("vf.w1"));
        add_row(&mut h1, p.block("vf.b1"));
        tanh_inplace(&mut h1);
        let mut h2 = h1.dot(&p.block("vf.w2"));
        add_row(&mut h2, p.block("vf.b2"));
        tanh_inplace(&mut h2);
        let mut v = h2.dot(&p.block("vf.w3"));
        add_row(&mut v, p.block("vf.b3"));
        (h1, h2, v)
    }

    /// Vector field `v(x, t | obs)` for a batch of flattened states.
    pub fn velocity(&self, obs: &ObsBatch, x: &Array2<f64>, t: &[f64]) -> Result<Array2<f64>> {
        self.check_obs(obs)?;
        self.check_chunk_rows(x, obs.len())?;
        let (st, _) = self.state_rows(obs);
        let latent = self.project(&st);
        let inp = self.vf_input(x, t, &obs.cond, &latent);
        Ok(self.field(&inp).2)
    }

    fn check_chunk_rows(&self, x: &Array2<f64>, b: usize) -> Result<()> {
        if x.nrows() != b || x.ncols() != self.dims.chunk_len() {
            return Err(Error::Dimension(format!(
                "chunk batch {}x{} for batch {b} of width {}",
                x.nrows(),
                x.ncols(),
                self.dims.chunk_len()
            )));
        }
        Ok(())
    }

    /// Per-element flow-matching loss `(v(x_t, t) - (a - x0))^2` with
    /// `x_t = (1 - t) x0 + t a`, plus activations for the backward pass.
    pub fn fm_loss_elements(
        &self,
        obs: &ObsBatch,
        targets: &Array2<f64>,
        t: &[f64],
        x0: &Array2<f64>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_obs(obs)?;
        let b = obs.len();
        self.check_chunk_rows(targets, b)?;
        self.check_chunk_rows(x0, b)?;
        if t.len() != b {
            return Err(Error::Dimension(format!("{} flow times for batch {b}", t.len())));
        }
        let mut xt = x0.clone();
        for (i, mut row) in xt.axis_iter_mut(Axis(0)).enumerate() {
            let ti = t[i];
            row.zip_mut_with(&targets.row(i), |x, &a| *x = (1.0 - ti) * *x + ti * a);
        }
        let u = targets - x0;
        let (state, tactile_h) = self.state_rows(obs);
        let latent = self.project(&state);
        let vf_in = self.vf_input(&xt, t, &obs.cond, &latent);
        let (h1, h2, v) = self.field(&vf_in);
        let diff = &v - &u;
        let loss = diff.mapv(|d| d * d);
        Ok((
            loss,
            ForwardCache {
                version: self.version,
                tactile_in: obs.tactile.clone(),
                tactile_h,
                state,
                vf_in,
                h1,
                h2,
                v,
                u,
            },
        ))
    }

    /// Exact gradient of `sum(upstream * loss_elements)` with respect to all
    /// parameters, from a cache produced at the current parameter version.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Params> {
        if cache.version != self.version {
            return Err(Error::StaleCache {
                cached: cache.version,
                current: self.version,
            });
        }
        if upstream.dim() != cache.v.dim() {
            return Err(Error::Dimension("upstream weights shape".into()));
        }
        let d = &self.dims;
        let p = &self.params;
        let mut g = p.zeros_like();

        let dv = (&cache.v - &cache.u) * upstream * 2.0;
        g.block_mut("vf.w3").assign(&cache.h2.t().dot(&dv));
        g.block_mut("vf.b3").row_mut(0).assign(&dv.sum_axis(Axis(0)));

        let mut da2 = dv.dot(&p.block("vf.w3").t());
        da2.zip_mut_with(&cache.h2, |g, &h| *g *= 1.0 - h * h);
        g.block_mut("vf.w2").assign(&cache.h1.t().dot(&da2));
        g.block_mut("vf.b2").row_mut(0).assign(&da2.sum_axis(Axis(0)));

        let mut da1 = da2.dot(&p.block("vf.w2").t());
        da1.zip_mut_with(&cache.h1, |g, &h| *g *= 1.0 - h * h);
        g.block_mut("vf.w1").assign(&cache.vf_in.t().dot(&da1));
        g.block_mut("vf.b1").row_mut(0).assign(&da1.sum_axis(Axis(0)));

        let w1_latent = p.block("vf.w1");
        let off = d.chunk_len() + 1 + d.cond_dim;
        let dz = da1.dot(&w1_latent.slice(s![off.., ..]).t());
        g.block_mut("state_proj.w").assign(&dz.t().dot(&cache.state));
        g.block_mut("state_proj.b").row_mut(0).assign(&dz.sum_axis(Axis(0)));

        if let (Some(_), Some(tin), Some(th)) = (d.tactile, &cache.tactile_in, &cache.tactile_h) {
            let ds = dz.dot(&p.block("state_proj.w"));
            let de = ds.slice(s![.., d.proprio_dim..]).to_owned();
            g.block_mut("tactile.w2").assign(&th.t().dot(&de));
            g.block_mut("tactile.b2").row_mut(0).assign(&de.sum_axis(Axis(0)));
            let mut dh = de.dot(&p.block("tactile.w2").t());
            dh.zip_mut_with(th, |g, &h| *g *= 1.0 - h * h);
            g.block_mut("tactile.w1").assign(&tin.t().dot(&dh));
            g.block_mut("tactile.b1").row_mut(0).assign(&dh.sum_axis(Axis(0)));
        }
        Ok(g)
    }

    /// Euler integration of the field from the given noise rows to `t = 1`.
    pub fn integrate(&self, obs: &ObsBatch, x0: Array2<f64>, n_steps: usize) -> Result<Array2<f64>> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
        }
        self.check_obs(obs)?;
        self.check_chunk_rows(&x0, obs.len())?;
        let (st, _) = self.state_rows(obs);
        let latent = self.project(&st);
        let dt = 1.0 / n_steps as f64;
        let mut x = x0;
        let b = obs.len();
        for k in 0..n_steps {
            let t = vec![k as f64 * dt; b];
            let inp = self.vf_input(&x, &t, &obs.cond, &latent);
            let v = self.field(&inp).2;
            x.scaled_add(dt, &v);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteSample { step: k });
            }
        }
        Ok(x)
    }

    /// Standard-normal noise for one chunk from a seed.
    pub fn noise(&self, seed: u64) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dims.chunk_len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    pub fn sample_chunk(&self, obs: &Observation, n_steps: usize, seed: u64) -> Result<ActionChunk> {
        let batch = ObsBatch::from_observations([obs], self.uses_tactile())?;
        let x0 = self.noise(seed).insert_axis(Axis(0));
        let x = self.integrate(&batch, x0, n_steps)?;
        ActionChunk::new(self.dims.horizon, self.dims.action_dim, x.row(0).to_vec())
    }
}
