//! Deep Q-network written from scratch: MLP with ReLU hidden layers and
//! inverted dropout, Adam, Boltzmann exploration with a log-decaying
//! temperature, experience replay and a periodically synced target network.

use crate::env::{EnvError, EnvState, EpisodeAccumulator, EpisodeMetrics, HeatingEnv, MdpConfig};
use crate::thermal::{step as thermal_step, ExogenousInput, ModelKind, ThermalModelParams, ThermalState};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Occupancy-twin features: day of week, time of day, occupant count.
pub const N_RT: usize = 3;
pub const TAU_START: f64 = 1.0;
pub const TAU_END: f64 = 1e-6;
/// Shrinks the initial output weights so every Q-value starts close to 0.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum DqnError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct DqnConfig {
    pub n_tt: usize,
    pub n_actions: usize,
    pub hidden1_factor: usize,
    pub hidden2_factor: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub discount: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync_steps: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        DqnConfig {
            n_tt: 1,
            n_actions: 3,
            hidden1_factor: 10,
            hidden2_factor: 5,
            learning_rate: 1e-5,
            dropout: 0.1,
            epochs: 25,
            episodes_per_epoch: 20,
            discount: 0.95,
            tau_start: TAU_START,
            tau_end: TAU_END,
            replay_capacity: 50_000,
            batch_size: 64,
            target_sync_steps: 500,
        }
    }
}

impl DqnConfig {
    pub fn for_env(n_tt: usize, mdp: &MdpConfig) -> Self {
        DqnConfig {
            n_tt,
            n_actions: mdp.levels,
            discount: mdp.discount,
            ..Default::default()
        }
    }

    pub fn input_len(&self) -> usize {
        self.n_tt + N_RT + 1
    }

    /// [L0, L1, L2, A].
    pub fn layer_dims(&self) -> Vec<usize> {
        let l0 = self.input_len();
        let l1 = self.hidden1_factor * l0;
        let l2 = self.hidden2_factor * l1;
        vec![l0, l1, l2, self.n_actions]
    }

    pub fn validate(&self) -> Result<(), DqnError> {
        let bad = |m: &str| Err(DqnError::InvalidConfig(m.to_string()));
        if self.layer_dims().contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.tau_end > 0.0 && self.tau_end < self.tau_start) {
            return bad("tauEnd must be positive and below tauStart");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learningRate must be positive");
        }
        if self.epochs == 0 || self.episodes_per_epoch == 0 {
            return bad("epochs and episodesPerEpoch must be positive");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size || self.target_sync_steps == 0 {
            return bad("replay settings are inconsistent");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Fully connected net, ReLU on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Dense>,
}

/// Per-layer gradients (or Adam moments), same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Network {
    pub fn zeros(dims: &[usize]) -> Self {
        Network {
            layers: dims
                .windows(2)
                .map(|d| Dense {
                    w: DMatrix::zeros(d[1], d[0]),
                    b: DVector::zeros(d[1]),
                })
                .collect(),
        }
    }

    /// He-uniform weights, zero biases; the output layer starts near zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let mut net = Network::zeros(dims);
        let n_layers = net.layers.len();
        for (li, l) in net.layers.iter_mut().enumerate() {
            let scale = if li + 1 == n_layers { OUTPUT_INIT_SCALE } else { 1.0 };
            let bound = scale * (6.0 / l.w.ncols() as f64).sqrt();
            for v in l.w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].w.ncols()];
        d.extend(self.layers.iter().map(|l| l.w.nrows()));
        d
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Flat parameter access in layer order, weights (column-major storage) before biases.
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.w.len() {
                return &mut l.w.as_mut_slice()[idx];
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return &mut l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    /// Q-values for a single input without dropout.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let x = DMatrix::from_column_slice(x.len(), 1, x);
        self.forward_batch(&x).column(0).iter().copied().collect()
    }

    /// Q-values for a single input; dropout masks hidden activations when an
    /// RNG is supplied.
    pub fn forward_dropout<R: Rng + ?Sized>(&self, x: &[f64], p: f64, rng: &mut R) -> Vec<f64> {
        let x = DMatrix::from_column_slice(x.len(), 1, x);
        let (acts, _) = self.forward_cached(&x, Some((p, rng)));
        acts.last().unwrap().column(0).iter().copied().collect()
    }

    /// Columns of `x` are inputs; columns of the result are Q-vectors.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &a;
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    /// Activations of every layer (input first) and the dropout masks applied
    /// to the hidden layers.
    fn forward_cached<R: Rng + ?Sized>(
        &self,
        x: &DMatrix<f64>,
        mut dropout: Option<(f64, &mut R)>,
    ) -> (Vec<DMatrix<f64>>, Vec<Option<DMatrix<f64>>>) {
        let last = self.layers.len() - 1;
        let mut acts = vec![x.clone()];
        let mut masks = Vec::with_capacity(last);
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * acts.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if i < last {
                z.apply(|v| *v = v.max(0.0));
                let mask = match dropout.as_mut() {
                    Some((p, rng)) if *p > 0.0 => {
                        let keep = 1.0 / (1.0 - *p);
                        let m = DMatrix::from_fn(z.nrows(), z.ncols(), |_, _| {
                            if rng.random::<f64>() < *p {
                                0.0
                            } else {
                                keep
                            }
                        });
                        z.component_mul_assign(&m);
                        Some(m)
                    }
                    _ => None,
                };
                masks.push(mask);
            }
            acts.push(z);
        }
        (acts, masks)
    }

    /// Loss ½·mean((Q(x)[a] - y)²) and its gradient.
    pub fn backward<R: Rng + ?Sized>(
        &self,
        batch: &[(&[f64], usize, f64)],
        dropout: Option<(f64, &mut R)>,
    ) -> (f64, Gradients) {
        assert!(!batch.is_empty(), "empty batch");
        let n = batch.len();
        let n_in = self.input_len();
        let mut x = DMatrix::zeros(n_in, n);
        for (j, (xi, _, _)) in batch.iter().enumerate() {
            x.column_mut(j).copy_from_slice(xi);
        }
        let (acts, masks) = self.forward_cached(&x, dropout);
        let out = acts.last().unwrap();
        let mut delta = DMatrix::zeros(out.nrows(), n);
        let mut loss = 0.0;
        for (j, &(_, a, y)) in batch.iter().enumerate() {
            let err = out[(a, j)] - y;
            loss += 0.5 * err * err;
            delta[(a, j)] = err / n as f64;
        }
        loss /= n as f64;

        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let a_prev = &acts[i];
            let gw = &delta * a_prev.transpose();
            let gb = delta.column_sum();
            grads.push(Dense { w: gw, b: gb });
            if i > 0 {
                let mut d = self.layers[i].w.transpose() * &delta;
                // back through dropout and ReLU of layer i-1
                if let Some(m) = &masks[i - 1] {
                    d.component_mul_assign(m);
                }
                d.zip_apply(a_prev, |g, a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                delta = d;
            }
        }
        grads.reverse();
        (loss, Gradients { layers: grads })
    }

    pub fn loss(&self, batch: &[(&[f64], usize, f64)]) -> f64 {
        batch
            .iter()
            .map(|(x, a, y)| {
                let e = self.forward(x)[*a] - y;
                0.5 * e * e
            })
            .sum::<f64>()
            / batch.len() as f64
    }
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            layers: Network::zeros(&net.dims()).layers,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.w.iter().chain(l.b.iter()).copied())
            .collect()
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Network, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (((l, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            for (((p, g), m), v) in l.w.iter_mut().zip(g.w.iter()).zip(m.w.iter_mut()).zip(v.w.iter_mut()) {
                update(p, *g, m, v);
            }
            for (((p, g), m), v) in l.b.iter_mut().zip(g.b.iter()).zip(m.b.iter_mut()).zip(v.b.iter_mut()) {
                update(p, *g, m, v);
            }
        }
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate() {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_probs(q: &[f64], tau: f64) -> Vec<f64> {
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Samples an action from softmax(q / tau); greedy at or below `TAU_END`.
pub fn softmax_select<R: Rng + ?Sized>(q: &[f64], tau: f64, rng: &mut R) -> usize {
    if tau <= TAU_END {
        return argmax(q);
    }
    let p = softmax_probs(q, tau);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Log-linear decay from 1 at step 0 to 1e-6 at the last step.
pub fn temperature_schedule(step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 || step + 1 >= total_steps {
        return if step == 0 && total_steps <= 1 { TAU_START } else { TAU_END };
    }
    10f64.powf(-6.0 * step as f64 / (total_steps - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
}

/// Borrowed view of one stored experience.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExperienceRef<'a> {
    pub obs: &'a [f64],
    pub action: usize,
    pub reward: f64,
    pub next_obs: &'a [f64],
    pub terminal: bool,
}

/// Fixed-capacity FIFO of experiences.
///
/// Observations live in two flat ring buffers rather than one small
/// allocation per step; interleaving those with the per-update batch
/// matrices fragments the heap badly over a long run.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_len: usize,
    next_len: usize,
    obs: Vec<f64>,
    next_obs: Vec<f64>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    terminals: Vec<bool>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            ..Default::default()
        }
    }

    /// Panics if the observation widths differ from the first push.
    pub fn push(&mut self, e: Experience) {
        if self.capacity == 0 {
            return;
        }
        if self.actions.is_empty() {
            self.obs_len = e.obs.len();
            self.next_len = e.next_obs.len();
            let reserve = self.capacity.min(1 << 16);
            self.obs.reserve_exact(reserve * self.obs_len);
            self.next_obs.reserve_exact(reserve * self.next_len);
        }
        assert!(
            e.obs.len() == self.obs_len && e.next_obs.len() == self.next_len,
            "replay observation width changed"
        );
        if self.actions.len() < self.capacity {
            self.obs.extend_from_slice(&e.obs);
            self.next_obs.extend_from_slice(&e.next_obs);
            self.actions.push(e.action);
            self.rewards.push(e.reward);
            self.terminals.push(e.terminal);
        } else {
            let i = self.head;
            self.obs[i * self.obs_len..(i + 1) * self.obs_len].copy_from_slice(&e.obs);
            self.next_obs[i * self.next_len..(i + 1) * self.next_len].copy_from_slice(&e.next_obs);
            self.actions[i] = e.action;
            self.rewards[i] = e.reward;
            self.terminals[i] = e.terminal;
            self.head = (i + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// The `k`-th experience counting from the oldest.
    pub fn get(&self, k: usize) -> Option<ExperienceRef<'_>> {
        if k >= self.len() {
            return None;
        }
        let i = (self.head + k) % self.len();
        Some(ExperienceRef {
            obs: &self.obs[i * self.obs_len..(i + 1) * self.obs_len],
            action: self.actions[i],
            reward: self.rewards[i],
            next_obs: &self.next_obs[i * self.next_len..(i + 1) * self.next_len],
            terminal: self.terminals[i],
        })
    }

    pub fn oldest(&self) -> Option<ExperienceRef<'_>> {
        self.get(0)
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<ExperienceRef<'_>> {
        (0..n)
            .map(|_| self.get(rng.random_range(0..self.len())).expect("index in range"))
            .collect()
    }
}

/// Extra bookkeeping a heating environment reports with each step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub level: f64,
    pub occupants: usize,
    pub t_i: f64,
    pub slot: usize,
    pub day: usize,
    /// Position of the next state in the ambient trace.
    pub trace_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Episode is over (time limit or terminal).
    pub done: bool,
    /// No bootstrapping past this step.
    pub terminal: bool,
    pub info: Option<StepInfo>,
}

/// What the agent sees of an environment.
pub trait Environment {
    fn n_actions(&self) -> usize;
    fn obs_len(&self) -> usize;
    fn episode_len(&self) -> usize;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<StepResult, DqnError>;
}

/// Normalization of the network inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FeatureStats {
    pub kind: ModelKind,
    pub temp_mean: f64,
    pub temp_std: f64,
    pub ambient_mean: f64,
    pub ambient_std: f64,
    pub n_max: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, if v > 1e-12 { v.sqrt() } else { 1.0 })
}

impl FeatureStats {
    /// Statistics of the twin's training window.
    pub fn from_window(kind: ModelKind, t_i: &[f64], t_a: &[f64], n_max: usize) -> Self {
        let (temp_mean, temp_std) = mean_std(t_i);
        let (ambient_mean, ambient_std) = mean_std(t_a);
        FeatureStats {
            kind,
            temp_mean,
            temp_std,
            ambient_mean,
            ambient_std,
            n_max,
        }
    }

    pub fn len(&self) -> usize {
        self.kind.hidden_states() + N_RT + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn features(&self, thermal: &ThermalState, day: usize, slot: usize, occupants: usize, t_a: f64) -> Vec<f64> {
        let mut f: Vec<f64> = thermal
            .features(self.kind)
            .into_iter()
            .map(|t| (t - self.temp_mean) / self.temp_std)
            .collect();
        f.push(day as f64 / crate::occupancy::DAYS as f64);
        f.push(slot as f64 / crate::occupancy::SLOTS as f64);
        f.push(occupants as f64 / self.n_max.max(1) as f64);
        f.push((t_a - self.ambient_mean) / self.ambient_std);
        f
    }
}

/// Exposes a [`HeatingEnv`] to the agent. With an observer the thermal
/// features come from the twin tracking the measured room temperature;
/// without one they are the environment's own states.
#[derive(Debug, Clone)]
pub struct TwinFeatureEnv {
    pub env: HeatingEnv,
    pub stats: FeatureStats,
    observer: Option<(ModelKind, ThermalModelParams)>,
    estimate: ThermalState,
    last: Option<EnvState>,
}

impl TwinFeatureEnv {
    pub fn new(env: HeatingEnv, stats: FeatureStats) -> Self {
        TwinFeatureEnv {
            env,
            stats,
            observer: None,
            estimate: ThermalState::at(0.0),
            last: None,
        }
    }

    pub fn with_observer(env: HeatingEnv, stats: FeatureStats, kind: ModelKind, params: ThermalModelParams) -> Self {
        TwinFeatureEnv {
            observer: Some((kind, params)),
            ..TwinFeatureEnv::new(env, stats)
        }
    }

    pub fn mdp(&self) -> &MdpConfig {
        &self.env.cfg
    }

    fn observe(&self, s: &EnvState) -> Vec<f64> {
        let thermal = if self.observer.is_some() { &self.estimate } else { &s.thermal };
        self.stats
            .features(thermal, s.day, s.slot, s.occupancy.count(), s.t_a)
    }
}

impl Environment for TwinFeatureEnv {
    fn n_actions(&self) -> usize {
        self.env.n_actions()
    }

    fn obs_len(&self) -> usize {
        self.stats.len()
    }

    fn episode_len(&self) -> usize {
        self.env.cfg.episode_len
    }

    fn reset(&mut self) -> Vec<f64> {
        let s = self.env.reset();
        self.estimate = ThermalState::at(s.thermal.t_i);
        let obs = self.observe(&s);
        self.last = Some(s);
        obs
    }

    fn step(&mut self, action: usize) -> Result<StepResult, DqnError> {
        let tr = self.env.step(action)?;
        let level = self.env.cfg.level(action);
        if let Some((kind, params)) = &self.observer {
            let input = ExogenousInput {
                t_a: tr.state.t_a,
                a: level,
            };
            let mut est = thermal_step(*kind, params, self.estimate, input, self.env.cfg.step_minutes, None)
                .unwrap_or(ThermalState::at(tr.next_state.thermal.t_i));
            est.t_i = tr.next_state.thermal.t_i;
            self.estimate = est;
        }
        let obs = self.observe(&tr.next_state);
        let info = StepInfo {
            level,
            occupants: tr.next_state.occupancy.count(),
            t_i: tr.next_state.thermal.t_i,
            slot: tr.next_state.slot,
            day: tr.next_state.day,
            trace_index: self.env.trace_index(),
        };
        self.last = Some(tr.next_state);
        Ok(StepResult {
            obs,
            reward: tr.reward,
            done: tr.done,
            terminal: false,
            info: Some(info),
        })
    }
}

fn push_info(acc: &mut EpisodeAccumulator, res: &StepResult, comfort_temp: f64) {
    if let Some(info) = &res.info {
        acc.push_parts(res.reward, info.level, info.occupants, info.t_i, comfort_temp);
    } else {
        acc.push_parts(res.reward, 0.0, 0, 0.0, comfort_temp);
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: Network,
    /// Mean undiscounted step reward per epoch.
    pub epoch_rewards: Vec<f64>,
    pub episodes: Vec<EpisodeMetrics>,
    pub steps: usize,
}

/// Trains a fresh network on `env`. Deterministic for a given seed.
pub fn train<E: Environment + ?Sized>(
    env: &mut E,
    cfg: &DqnConfig,
    comfort_temp: f64,
    seed: u64,
) -> Result<TrainOutput, DqnError> {
    cfg.validate()?;
    let dims = cfg.layer_dims();
    if env.obs_len() != dims[0] || env.n_actions() != cfg.n_actions {
        return Err(DqnError::Dimension(format!(
            "env has {} inputs and {} actions, network expects {} and {}",
            env.obs_len(),
            env.n_actions(),
            dims[0],
            cfg.n_actions
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(&dims, &mut rng);
    let mut target = net.clone();
    let mut adam = Adam::new(&net, cfg.learning_rate);
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let total = cfg.epochs * cfg.episodes_per_epoch * env.episode_len();
    let mut global = 0usize;
    let mut updates = 0usize;
    let mut epoch_rewards = Vec::with_capacity(cfg.epochs);
    let mut episodes = Vec::with_capacity(cfg.epochs * cfg.episodes_per_epoch);

    for _ in 0..cfg.epochs {
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for _ in 0..cfg.episodes_per_epoch {
            let mut obs = env.reset();
            let mut acc = EpisodeAccumulator::default();
            loop {
                let tau = cfg.tau_start * temperature_schedule(global, total.max(1)) / TAU_START;
                let tau = tau.max(cfg.tau_end);
                let q = net.forward(&obs);
                let action = softmax_select(&q, tau, &mut rng);
                let res = env.step(action)?;
                push_info(&mut acc, &res, comfort_temp);
                epoch_sum += res.reward;
                epoch_steps += 1;
                global += 1;
                replay.push(Experience {
                    obs: std::mem::take(&mut obs),
                    action,
                    reward: res.reward,
                    next_obs: res.obs.clone(),
                    terminal: res.terminal,
                });
                if replay.len() >= cfg.batch_size {
                    let sample = replay.sample(cfg.batch_size, &mut rng);
                    let mut next = DMatrix::zeros(dims[0], sample.len());
                    for (j, e) in sample.iter().enumerate() {
                        next.column_mut(j).copy_from_slice(&e.next_obs);
                    }
                    let q_next = target.forward_batch(&next);
                    let batch: Vec<(&[f64], usize, f64)> = sample
                        .iter()
                        .enumerate()
                        .map(|(j, e)| {
                            let boot = if e.terminal { 0.0 } else { q_next.column(j).max() };
                            (e.obs, e.action, e.reward + cfg.discount * boot)
                        })
                        .collect();
                    let (_, grads) = net.backward(&batch, Some((cfg.dropout, &mut rng)));
                    adam.step(&mut net, &grads);
                    updates += 1;
                    if updates % cfg.target_sync_steps == 0 {
                        target = net.clone();
                    }
                }
                obs = res.obs;
                if res.done {
                    break;
                }
            }
            episodes.push(acc.finish(episodes.len()));
        }
        epoch_rewards.push(epoch_sum / epoch_steps.max(1) as f64);
    }
    Ok(TrainOutput {
        net,
        epoch_rewards,
        episodes,
        steps: global,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalOutput {
    pub mean_reward: f64,
    pub episodes: Vec<EpisodeMetrics>,
}

/// Greedy rollouts without dropout. `on_step` sees every (action, result).
pub fn evaluate_with<E: Environment + ?Sized>(
    net: &Network,
    env: &mut E,
    episodes: usize,
    comfort_temp: f64,
    mut on_step: impl FnMut(usize, &StepResult),
) -> Result<EvalOutput, DqnError> {
    if env.obs_len() != net.input_len() || env.n_actions() != net.n_outputs() {
        return Err(DqnError::Dimension("network does not match environment".into()));
    }
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs = env.reset();
        let mut acc = EpisodeAccumulator::default();
        loop {
            let action = argmax(&net.forward(&obs));
            let res = env.step(action)?;
            push_info(&mut acc, &res, comfort_temp);
            on_step(action, &res);
            if res.done {
                break;
            }
            obs = res.obs;
        }
        out.push(acc.finish(ep));
    }
    let mean_reward = out.iter().map(|m| m.mean_reward).sum::<f64>() / out.len().max(1) as f64;
    Ok(EvalOutput {
        mean_reward,
        episodes: out,
    })
}

pub fn evaluate<E: Environment + ?Sized>(
    net: &Network,
    env: &mut E,
    episodes: usize,
    comfort_temp: f64,
) -> Result<EvalOutput, DqnError> {
    evaluate_with(net, env, episodes, comfort_temp, |_, _| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// Row-major, `out` rows of `in` columns.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// On-disk form of a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Checkpoint {
    pub layer_dims: Vec<usize>,
    pub seed: u64,
    pub trained_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureStats>,
    pub layers: Vec<LayerRecord>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, seed: u64, trained_epochs: usize, features: Option<FeatureStats>) -> Self {
        Checkpoint {
            layer_dims: net.dims(),
            seed,
            trained_epochs,
            features,
            layers: net
                .layers
                .iter()
                .map(|l| LayerRecord {
                    weights: l.w.transpose().as_slice().to_vec(),
                    biases: l.b.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn to_network(&self) -> Result<Network, DqnError> {
        let dims = &self.layer_dims;
        if dims.len() != self.layers.len() + 1 {
            return Err(DqnError::Checkpoint("layerDims does not match layer count".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(dims.windows(2))
            .enumerate()
            .map(|(i, (rec, d))| {
                let (n_in, n_out) = (d[0], d[1]);
                if rec.weights.len() != n_in * n_out || rec.biases.len() != n_out {
                    return Err(DqnError::Checkpoint(format!("layer {i} has the wrong size")));
                }
                Ok(Dense {
                    w: DMatrix::from_row_slice(n_out, n_in, &rec.weights),
                    b: DVector::from_column_slice(&rec.biases),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let net = Network { layers };
        if !net.is_finite() {
            return Err(DqnError::Checkpoint("non-finite parameter".into()));
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn zero_net_outputs_zero() {
        let net = Network::zeros(&[4, 8, 6, 3]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.0, 0.5]), vec![0.0; 3]);
    }

    #[test]
    fn handcrafted_net() {
        // 2 -> 1 -> 1 -> 2
        let mut net = Network::zeros(&[2, 1, 1, 2]);
        net.layers[0].w = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        net.layers[0].b = DVector::from_vec(vec![-0.5]);
        net.layers[1].w = DMatrix::from_row_slice(1, 1, &[3.0]);
        net.layers[2].w = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        net.layers[2].b = DVector::from_vec(vec![0.25, 0.0]);
        // h1 = relu(1 + 2 - 0.5) = 2.5; h2 = 7.5; q = (7.75, -7.5)
        assert_eq!(net.forward(&[1.0, 1.0]), vec![7.75, -7.5]);
        // negative pre-activation is clipped
        assert_eq!(net.forward(&[-1.0, 0.0]), vec![0.25, 0.0]);
    }

    fn random_net(seed: u64, dims: &[usize]) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::init(dims, &mut rng);
        for l in &mut net.layers {
            for b in l.b.iter_mut() {
                *b = rng.random_range(-0.3..0.3);
            }
        }
        net
    }

    fn random_batch(seed: u64, n_in: usize, n_out: usize, n: usize) -> Vec<(Vec<f64>, usize, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x = (0..n_in).map(|_| rng.random_range(-1.5..1.5)).collect();
                (x, rng.random_range(0..n_out), rng.random_range(-2.0..2.0))
            })
            .collect()
    }

    fn as_refs(b: &[(Vec<f64>, usize, f64)]) -> Vec<(&[f64], usize, f64)> {
        b.iter().map(|(x, a, y)| (x.as_slice(), *a, *y)).collect()
    }

    const NO_DROPOUT: Option<(f64, &mut ChaCha8Rng)> = None;

    pub(crate) fn gradient_check_error(seed: u64, dims: &[usize]) -> f64 {
        let net = random_net(seed, dims);
        let batch = random_batch(seed + 1, dims[0], *dims.last().unwrap(), 5);
        let b = as_refs(&batch);
        let (_, g) = net.backward(&b, NO_DROPOUT);
        let analytic = g.flat();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for (i, ga) in analytic.iter().enumerate() {
            let mut plus = net.clone();
            *plus.param_mut(i) += eps;
            let mut minus = net.clone();
            *minus.param_mut(i) -= eps;
            let fd = (plus.loss(&b) - minus.loss(&b)) / (2.0 * eps);
            let err = (fd - ga).abs() / (fd.abs() + ga.abs()).max(1e-7);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..5 {
            let err = gradient_check_error(seed, &[4, 7, 5, 3]);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn target_equal_to_q_gives_zero_gradient() {
        let net = random_net(3, &[3, 6, 4, 2]);
        let x = vec![0.2, -0.4, 0.9];
        let q = net.forward(&x);
        let (loss, g) = net.backward(&[(&x, 1, q[1])], NO_DROPOUT);
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_sample_gives_same_gradient() {
        let net = random_net(4, &[3, 6, 4, 2]);
        let x = vec![0.2, -0.4, 0.9];
        let (_, g1) = net.backward(&[(&x, 0, 1.0)], NO_DROPOUT);
        let (_, g3) = net.backward(&[(&x, 0, 1.0), (&x, 0, 1.0), (&x, 0, 1.0)], NO_DROPOUT);
        for (a, b) in g1.flat().iter().zip(g3.flat()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let net = random_net(5, &[3, 50, 40, 2]);
        let x = [0.3, 0.1, -0.2];
        let a = net.forward_dropout(&x, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        let b = net.forward_dropout(&x, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(net.forward(&x), net.forward(&x));
        // averaged over masks the first hidden layer keeps its scale
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = Network {
            layers: vec![net.layers[0].clone(), Dense { w: DMatrix::from_element(1, 50, 1.0), b: DVector::zeros(1) }],
        };
        let plain = one.forward(&x)[0];
        let mean = (0..20000).map(|_| one.forward_dropout(&x, 0.1, &mut rng)[0]).sum::<f64>() / 20000.0;
        assert!((mean - plain).abs() / plain.abs() < 0.01, "{mean} vs {plain}");
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut net = random_net(6, &[2, 3, 2, 2]);
        let before = net.clone();
        let mut g = Gradients::zeros_like(&net);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for l in &mut g.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let mut adam = Adam::new(&net, 1e-5);
        adam.step(&mut net, &g);
        let flat_g = g.flat();
        let mut b = before.clone();
        for (i, gi) in flat_g.iter().enumerate() {
            let expected = *b.param_mut(i) - 1e-5 * gi / (gi.abs() + 1e-8);
            assert!((*net.param_mut(i) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut net = random_net(7, &[2, 3, 2, 2]);
        let before = net.clone();
        let mut adam = Adam::new(&net, 1e-3);
        adam.step(&mut net, &Gradients::zeros_like(&before));
        assert_eq!(net, before);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(temperature_schedule(0, 1001), 1.0);
        assert_eq!(temperature_schedule(1000, 1001), 1e-6);
        assert!((temperature_schedule(500, 1001) - 1e-3).abs() < 1e-15);
        let mut prev = 2.0;
        for s in 0..1001 {
            let t = temperature_schedule(s, 1001);
            assert!(t < prev);
            prev = t;
        }
    }

    #[test]
    fn softmax_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| softmax_select(&[1.0, 0.0], 1e-6, &mut rng) == 0));
        assert_eq!(softmax_select(&[2.0, 2.0, 1.0], 1e-7, &mut rng), 0);
        let n = 100_000;
        let ones = (0..n).filter(|_| softmax_select(&[0.0, 0.0], 1.0, &mut rng) == 1).count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
        let zeros = (0..n).filter(|_| softmax_select(&[1.0, 0.0], 1.0, &mut rng) == 0).count();
        let e = std::f64::consts::E;
        assert!((zeros as f64 / n as f64 - e / (e + 1.0)).abs() < 0.01);
    }

    #[test]
    fn softmax_is_stable_for_large_values() {
        let p = softmax_probs(&[1000.0, 999.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn argmax_scale_invariant(q in proptest::collection::vec(-10.0f64..10.0, 1..6), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = q.iter().map(|v| v * c).collect();
            prop_assert_eq!(argmax(&q), argmax(&scaled));
        }

        #[test]
        fn replay_is_bounded_fifo(cap in 1usize..20, n in 0usize..60) {
            let mut r = ReplayBuffer::new(cap);
            for i in 0..n {
                r.push(Experience { obs: vec![i as f64, 0.5], action: i, reward: 0.0, next_obs: vec![], terminal: false });
                prop_assert!(r.len() <= cap);
            }
            if n > 0 {
                let oldest = n.saturating_sub(cap);
                prop_assert_eq!(r.oldest().unwrap().obs[0], oldest as f64);
            }
            for k in 0..r.len() {
                let e = r.get(k).unwrap();
                prop_assert_eq!(e.action, n.saturating_sub(cap) + k);
                prop_assert_eq!(e.obs, &[e.action as f64, 0.5][..]);
            }
            prop_assert!(r.get(r.len()).is_none());
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = random_net(8, &[5, 10, 7, 3]);
        let ck = Checkpoint::from_network(&net, 8, 2, None);
        let json = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(back.to_network().unwrap(), net);
        // row-major layout
        assert_eq!(ck.layers[0].weights[1], net.layers[0].w[(0, 1)]);
    }

    #[test]
    fn checkpoint_size_mismatch_rejected() {
        let net = random_net(8, &[2, 3, 2, 2]);
        let mut ck = Checkpoint::from_network(&net, 0, 0, None);
        ck.layers[1].weights.pop();
        assert!(ck.to_network().is_err());
    }
}
