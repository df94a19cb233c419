//! Server orchestration for one federated round.
//!
//! Round `t` runs, in order:
//!
//! 1. broadcast `θ_i^{t−1}` to every client;
//! 2. clients tune locally and return `Δ_i^t`;
//! 3. one learner step on `s(ψ) = −Σ_i ⟨ξ_i^{t−1}, Δ_i^t⟩`, with `ξ^{t−1}` read
//!    from the buffered window that ends at `t−1` (skipped at `t = 1`);
//! 4. `θ̃_i = θ_i + Δ_i` and the size-weighted average `θ̃_g`;
//! 5. push `Δ^t` into the capped update buffer;
//! 6. personalize: `θ_i = θ̃_g` while `t ≤ W`, then `θ_i = θ̃_g + ξ_i^t`;
//! 7. evaluate every client on its test split with `θ_i^t`.
//!
//! A failing round leaves the server and clients exactly as they were.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clientsim::{
    wire, Adapter, ClientState, ClientUpdate, EvalResult, LocalTrainConfig, ModelDims, ServerBroadcast,
};
use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, Tape, Tensor, Var};
use crate::seqlearner::{learner_bank_assign, stack_window, Learner, LearnerSpec};

/// `θ̃_i = θ_prev + Δ_i`.
pub fn reconstruct_updated(theta_prev: &[f64], delta: &[f64]) -> Result<Vec<f64>> {
    if theta_prev.len() != delta.len() {
        return Err(Error::Protocol(format!(
            "update of length {} for an adapter of length {}",
            delta.len(),
            theta_prev.len()
        )));
    }
    Ok(theta_prev.iter().zip(delta).map(|(t, d)| t + d).collect())
}

/// `w_i = |D_i| / Σ|D_j|`.
pub fn aggregation_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Protocol("aggregation over zero clients".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::Protocol("client with an empty training set".into()));
    }
    let total = sizes.iter().sum::<usize>() as f64;
    Ok(sizes.iter().map(|&s| s as f64 / total).collect())
}

/// Dataset-size weighted average of equally long vectors.
pub fn aggregate(thetas: &[Vec<f64>], sizes: &[usize]) -> Result<Vec<f64>> {
    if thetas.len() != sizes.len() {
        return Err(Error::Protocol("one size per client required".into()));
    }
    let w = aggregation_weights(sizes)?;
    let len = thetas[0].len();
    if thetas.iter().any(|t| t.len() != len) {
        return Err(Error::Protocol("adapters of different lengths".into()));
    }
    let mut out = vec![0.0; len];
    for (theta, wi) in thetas.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(theta) {
            *o += wi * v;
        }
    }
    Ok(out)
}

/// Stacks per-client flat vectors as the columns of a `[D, N]` matrix.
pub fn columns_to_matrix(cols: &[&[f64]]) -> Result<Tensor> {
    let n = cols.len();
    let d = cols.first().map_or(0, |c| c.len());
    if n == 0 || cols.iter().any(|c| c.len() != d) {
        return Err(Error::Dimension("columns must be non-empty and equally long".into()));
    }
    let mut data = vec![0.0; d * n];
    for (i, c) in cols.iter().enumerate() {
        for (r, &v) in c.iter().enumerate() {
            data[r * n + i] = v;
        }
    }
    Tensor::new(vec![d, n], data)
}

/// Column `i` of a `[D, N]` matrix.
pub fn matrix_column(m: &Tensor, i: usize) -> Vec<f64> {
    let n = m.shape()[1];
    m.data().iter().skip(i).step_by(n).copied().collect()
}

/// Per-round `Δ` matrices (one `[D_block, N]` tensor per adapter block),
/// capped at the most recent `capacity` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSequenceBuffer {
    capacity: usize,
    entries: VecDeque<(usize, Vec<Tensor>)>,
}

impl UpdateSequenceBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("max_seq_len", "must be >= 1"));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rounds(&self) -> Vec<usize> {
        self.entries.iter().map(|(r, _)| *r).collect()
    }

    pub fn push(&mut self, round: usize, deltas: Vec<Tensor>) -> Result<()> {
        if let Some((last, _)) = self.entries.back() {
            if round <= *last {
                return Err(Error::Protocol(format!("buffer push for round {round} after round {last}")));
            }
        }
        self.entries.push_back((round, deltas));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// The buffered window for adapter block `block`, `[D, len, N]`, oldest first.
    pub fn window(&self, block: usize) -> Result<Tensor> {
        let steps: Vec<&Tensor> = self
            .entries
            .iter()
            .map(|(_, ds)| {
                ds.get(block)
                    .ok_or_else(|| Error::Dimension(format!("buffer has no block {block}")))
            })
            .collect::<Result<_>>()?;
        stack_window(&steps)
    }
}

/// How calibrations turn into personalized adapters after warm-up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Personalization {
    /// `θ_i = θ̃_g + ξ_i`.
    #[default]
    Additive,
    /// `θ_i = ξ_i`.
    Direct,
}

/// Direction of the learner step relative to the proxy gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSign {
    /// Adam on `s = −Σ⟨ξ_i, Δ_i⟩`, i.e. `ψ` moves along `+Σ(∇ψ ξ_i)ᵀ Δ_i`.
    #[default]
    Descent,
    /// Adam on `+Σ⟨ξ_i, Δ_i⟩`.
    Ascent,
}

impl UpdateSign {
    fn factor(self) -> f64 {
        match self {
            Self::Descent => -1.0,
            Self::Ascent => 1.0,
        }
    }
}

/// Surrogate `±Σ ξ ⊙ Δ` on a tape whose learner parameters are `vars`.
pub fn surrogate_on_tape(
    tape: &mut Tape,
    learner: &Learner,
    vars: &[Var],
    window: &Tensor,
    delta: &Tensor,
    sign: UpdateSign,
) -> Result<Var> {
    let w = tape.constant(window.clone());
    let xi = learner.forward_on_tape(tape, vars, w)?;
    if tape.shape(xi) != delta.shape() {
        return Err(Error::Dimension(format!(
            "calibration {:?} vs update {:?}",
            tape.shape(xi),
            delta.shape()
        )));
    }
    let d = tape.constant(delta.clone());
    let prod = tape.mul(xi, d)?;
    let s = tape.sum_all(prod)?;
    tape.scale(s, sign.factor())
}

/// Value and gradient of the surrogate with respect to the learner parameters.
pub fn surrogate_gradients(
    learner: &Learner,
    window: &Tensor,
    delta: &Tensor,
    sign: UpdateSign,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = learner.push_params(&mut tape, true);
    let s = surrogate_on_tape(&mut tape, learner, &vars, window, delta, sign)?;
    let value = tape.value(s).item()?;
    let grads = tape.backward(s)?;
    let grads = vars
        .iter()
        .map(|&v| grads.get(v).cloned().expect("learner parameters are leaves"))
        .collect();
    Ok((value, grads))
}

/// One optimizer step on the surrogate; returns the surrogate value.
pub fn update_learner(
    learner: &mut Learner,
    opt: &mut OptimizerState,
    window: &Tensor,
    delta: &Tensor,
    sign: UpdateSign,
) -> Result<f64> {
    let (value, grads) = surrogate_gradients(learner, window, delta, sign)?;
    let mut params: Vec<Tensor> = learner.params().into_iter().cloned().collect();
    opt.step(&mut params, &grads)?;
    for (dst, src) in learner.params_mut().into_iter().zip(params) {
        *dst = src;
    }
    Ok(value)
}

/// Personalized adapters `[client][block]` and, when the learner ran, ξ per block.
pub type Personalized = (Vec<Vec<Vec<f64>>>, Option<Vec<Tensor>>);

/// Builds `θ_i` for round `t` from the buffered window ending at `t`.
pub fn generate_personalized(
    learners: &[Learner],
    buffer: &UpdateSequenceBuffer,
    global: &[Vec<f64>],
    num_clients: usize,
    round: usize,
    warmup: usize,
    mode: Personalization,
) -> Result<Personalized> {
    if learners.is_empty() || round <= warmup {
        return Ok((vec![global.to_vec(); num_clients], None));
    }
    if learners.len() != global.len() {
        return Err(Error::State("one learner per adapter block required".into()));
    }
    let xis: Vec<Tensor> = learners
        .par_iter()
        .enumerate()
        .map(|(k, l)| l.forward(&buffer.window(k)?))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(num_clients);
    for i in 0..num_clients {
        let mut blocks = Vec::with_capacity(global.len());
        for (g, xi) in global.iter().zip(&xis) {
            let col = matrix_column(xi, i);
            if col.len() != g.len() {
                return Err(Error::Dimension("calibration length differs from adapter block".into()));
            }
            blocks.push(match mode {
                Personalization::Additive => g.iter().zip(&col).map(|(a, b)| a + b).collect(),
                Personalization::Direct => col,
            });
        }
        out.push(blocks);
    }
    Ok((out, Some(xis)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub num_clients: usize,
    pub warmup: usize,
    pub max_seq_len: usize,
    pub learner_lr: f64,
    pub personalization: Personalization,
    pub update_sign: UpdateSign,
    /// `None` gives plain FedAvg: no learner is ever built.
    pub learner: Option<LearnerSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub config: ServerConfig,
    pub dims: ModelDims,
    /// Last completed round; 0 before the first.
    pub round: usize,
    /// `θ̃_g` per adapter block.
    pub global: Vec<Vec<f64>>,
    /// `θ_i` per client and block, as last broadcast.
    pub personalized: Vec<Vec<Vec<f64>>>,
    pub learners: Vec<Learner>,
    pub optimizers: Vec<OptimizerState>,
    pub buffer: UpdateSequenceBuffer,
    /// ξ per block from the latest personalization, if the learner ran.
    pub last_calibration: Option<Vec<Tensor>>,
    /// Surrogate value per block from the latest learner step.
    pub last_surrogate: Option<Vec<f64>>,
}

impl ServerState {
    /// Starts every client from `initial`, the zero-product adapter.
    pub fn new(config: ServerConfig, dims: ModelDims, initial: &Adapter, master_seed: u64) -> Result<Self> {
        if config.num_clients == 0 {
            return Err(Error::config("num_clients", "must be >= 1"));
        }
        let global = initial.flatten_blocks();
        let (learners, optimizers) = match &config.learner {
            Some(spec) => {
                if spec.clients() != config.num_clients {
                    return Err(Error::config("learner.width", "must equal the number of clients"));
                }
                let lens: Vec<usize> = global.iter().map(Vec::len).collect();
                let bank = learner_bank_assign(&lens, spec, master_seed)?;
                let opts = bank.iter().map(|_| OptimizerState::adam(config.learner_lr)).collect();
                (bank, opts)
            }
            None => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            personalized: vec![global.clone(); config.num_clients],
            buffer: UpdateSequenceBuffer::new(config.max_seq_len)?,
            config,
            dims,
            round: 0,
            global,
            learners,
            optimizers,
            last_calibration: None,
            last_surrogate: None,
        })
    }

    pub fn has_learner(&self) -> bool {
        !self.learners.is_empty()
    }

    pub fn broadcast_for(&self, client: usize) -> Result<ServerBroadcast> {
        let adapter = self.personalized_adapter(client)?;
        Ok(ServerBroadcast::from_adapter(self.round, &adapter))
    }

    pub fn personalized_adapter(&self, client: usize) -> Result<Adapter> {
        let flats = self
            .personalized
            .get(client)
            .ok_or_else(|| Error::Protocol(format!("unknown client {client}")))?;
        Adapter::from_flat_blocks(&self.dims, flats)
    }

    pub fn global_adapter(&self) -> Result<Adapter> {
        Adapter::from_flat_blocks(&self.dims, &self.global)
    }

    /// Server side of a round (steps 3 to 6) given every client's update,
    /// in client-id order.
    pub fn apply_updates(&mut self, updates: &[ClientUpdate]) -> Result<()> {
        let t = self.round + 1;
        let n = self.config.num_clients;
        if updates.len() != n {
            return Err(Error::Protocol(format!("{} updates for {n} clients", updates.len())));
        }
        let names = self.dims.block_names();
        let mut deltas: Vec<Vec<&[f64]>> = vec![Vec::with_capacity(n); names.len()];
        for (i, u) in updates.iter().enumerate() {
            if u.client_id != i || u.round != t {
                return Err(Error::Protocol(format!(
                    "expected client {i} round {t}, got client {} round {}",
                    u.client_id, u.round
                )));
            }
            for (k, name) in names.iter().enumerate() {
                let d = u
                    .deltas
                    .get(name)
                    .ok_or_else(|| Error::Protocol(format!("update lacks block {name}")))?;
                deltas[k].push(d);
            }
        }
        let delta_mats: Vec<Tensor> = deltas.iter().map(|cols| columns_to_matrix(cols)).collect::<Result<_>>()?;

        // 3. learner step against the window ending at t−1
        self.last_surrogate = None;
        if self.has_learner() && t >= 2 {
            if self.buffer.is_empty() {
                return Err(Error::State(format!("update buffer empty at round {t}")));
            }
            let sign = self.config.update_sign;
            let buffer = &self.buffer;
            let values = self
                .learners
                .par_iter_mut()
                .zip(self.optimizers.par_iter_mut())
                .zip(delta_mats.par_iter())
                .enumerate()
                .map(|(k, ((l, o), d))| update_learner(l, o, &buffer.window(k)?, d, sign))
                .collect::<Result<Vec<f64>>>()?;
            self.last_surrogate = Some(values);
        }

        // 4. reconstruct and aggregate
        let sizes: Vec<usize> = updates.iter().map(|u| u.dataset_size).collect();
        let mut global = Vec::with_capacity(names.len());
        for (k, cols) in deltas.iter().enumerate() {
            let tuned: Vec<Vec<f64>> = cols
                .iter()
                .enumerate()
                .map(|(i, d)| reconstruct_updated(&self.personalized[i][k], d))
                .collect::<Result<_>>()?;
            global.push(aggregate(&tuned, &sizes)?);
        }
        self.global = global;

        // 5. buffer
        self.buffer.push(t, delta_mats)?;

        // 6. personalize
        let (personalized, xi) = generate_personalized(
            &self.learners,
            &self.buffer,
            &self.global,
            n,
            t,
            self.config.warmup,
            self.config.personalization,
        )?;
        self.personalized = personalized;
        self.last_calibration = xi;
        self.round = t;
        Ok(())
    }
}

/// In-process transport that pushes every message through the wire format.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub messages: usize,
    pub bytes: usize,
}

impl Channel {
    pub fn transmit<T: Serialize + for<'de> Deserialize<'de>>(&mut self, msg: &T) -> Result<T> {
        let bytes = wire::encode(msg)?;
        self.messages += 1;
        self.bytes += bytes.len();
        wire::decode(&bytes)
    }
}

/// Per-client evaluation after a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClientEval {
    pub client_id: usize,
    pub train: EvalResult,
    pub test: EvalResult,
}

/// Runs one full round. On error the server, the clients and the channel
/// are restored to their state before the call.
pub fn run_round(
    state: &mut ServerState,
    clients: &mut [ClientState],
    local: &LocalTrainConfig,
    channel: &mut Channel,
    parallel: bool,
) -> Result<Vec<ClientEval>> {
    let saved = (state.clone(), clients.to_vec(), channel.clone());
    let result = run_round_inner(state, clients, local, channel, parallel);
    if result.is_err() {
        *state = saved.0;
        clients.clone_from_slice(&saved.1);
        *channel = saved.2;
    }
    result
}

fn run_round_inner(
    state: &mut ServerState,
    clients: &mut [ClientState],
    local: &LocalTrainConfig,
    channel: &mut Channel,
    parallel: bool,
) -> Result<Vec<ClientEval>> {
    if clients.len() != state.config.num_clients {
        return Err(Error::Protocol(format!(
            "{} clients for a server configured with {}",
            clients.len(),
            state.config.num_clients
        )));
    }
    let t = state.round + 1;
    for (i, c) in clients.iter_mut().enumerate() {
        if c.client_id != i {
            return Err(Error::Protocol("clients must be ordered by id".into()));
        }
        let msg = channel.transmit(&state.broadcast_for(i)?)?;
        c.receive(&msg, &state.dims)?;
    }

    let train = |c: &mut ClientState| c.local_round(t, local);
    let raw: Vec<ClientUpdate> = if parallel {
        clients.par_iter_mut().map(train).collect::<Result<_>>()?
    } else {
        clients.iter_mut().map(train).collect::<Result<_>>()?
    };
    let updates: Vec<ClientUpdate> = raw.iter().map(|u| channel.transmit(u)).collect::<Result<_>>()?;

    state.apply_updates(&updates)?;

    let evaluate = |(i, c): (usize, &ClientState)| -> Result<ClientEval> {
        let adapter = state.personalized_adapter(i)?;
        Ok(ClientEval {
            client_id: i,
            train: c.evaluate_train(&adapter)?,
            test: c.evaluate_test(&adapter)?,
        })
    };
    if parallel {
        clients.par_iter().enumerate().map(evaluate).collect()
    } else {
        clients.iter().enumerate().map(evaluate).collect()
    }
}

/// Serialized server state plus the configuration it was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerCheckpoint {
    pub fingerprint: String,
    pub state: ServerState,
}

impl ServerCheckpoint {
    pub fn fingerprint_of(config: &ServerConfig, dims: &ModelDims) -> Result<String> {
        serde_json::to_string(&(config, dims)).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(state: &ServerState) -> Result<Self> {
        Ok(Self {
            fingerprint: Self::fingerprint_of(&state.config, &state.dims)?,
            state: state.clone(),
        })
    }

    /// Returns the stored state if it was written for `config` and `dims`.
    pub fn restore(self, config: &ServerConfig, dims: &ModelDims) -> Result<ServerState> {
        if self.fingerprint != Self::fingerprint_of(config, dims)? {
            return Err(Error::State("checkpoint was written for a different configuration".into()));
        }
        Ok(self.state)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_tape_gradients, FdOptions};
    use crate::rng::stream_rng;
    use crate::seqlearner::{ScanMode, SsmConfig, SsmLearner};

    fn ssm(width: usize) -> SsmConfig {
        SsmConfig {
            width,
            expand: 2,
            state_dim: 3,
            conv_kernel: 2,
            num_blocks: 2,
            zero_bias: true,
            norm_eps: 1e-5,
            out_gain_init: 1.0,
            out_proj_scale: 1.0,
            scan_mode: ScanMode::Sequential,
        }
    }

    #[test]
    fn reconstruct_examples() {
        let v = vec![1.5, -2.0, 3.25];
        assert_eq!(reconstruct_updated(&v, &[0.0; 3]).unwrap(), v);
        assert_eq!(reconstruct_updated(&[0.0; 3], &v).unwrap(), v);
        assert!(matches!(reconstruct_updated(&v, &[1.0]), Err(Error::Protocol(_))));
    }

    #[test]
    fn aggregate_examples() {
        let v = vec![0.3, -1.2];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(aggregate(&[v.clone(), neg], &[5, 5]).unwrap(), vec![0.0, 0.0]);
        let same = aggregate(&[v.clone(), v.clone(), v.clone()], &[1, 7, 3]).unwrap();
        for (a, b) in same.iter().zip(&v) {
            assert!((a - b).abs() <= 1e-15);
        }
        let nine = aggregate(&[vec![6.0], vec![6.0], vec![12.0]], &[1, 2, 3]).unwrap();
        assert!((nine[0] - 9.0).abs() <= 1e-12);
        assert!(aggregate(&[], &[]).is_err());
        let w = aggregation_weights(&[3, 9, 11, 1]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn buffer_ring_semantics() {
        let mut b = UpdateSequenceBuffer::new(3).unwrap();
        for r in 1..=5 {
            b.push(r, vec![Tensor::full(&[2, 1], r as f64)]).unwrap();
        }
        assert_eq!(b.rounds(), vec![3, 4, 5]);
        let w = b.window(0).unwrap();
        assert_eq!(w.shape(), [2, 3, 1]);
        assert_eq!(w.data(), [3.0, 4.0, 5.0, 3.0, 4.0, 5.0]);
        assert!(matches!(b.push(5, vec![Tensor::zeros(&[2, 1])]), Err(Error::Protocol(_))));

        let mut one = UpdateSequenceBuffer::new(1).unwrap();
        for r in 1..=4 {
            one.push(r, vec![Tensor::zeros(&[1, 1])]).unwrap();
            assert_eq!(one.rounds(), vec![r]);
        }
    }

    #[test]
    fn zero_update_gives_zero_first_step() {
        let mut l = Learner::Ssm(SsmLearner::randomized(ssm(2), &mut stream_rng(1, &[1]), 0.5).unwrap());
        let before = l.clone();
        let mut opt = OptimizerState::adam(0.01);
        let window = Tensor::randn(&[3, 2, 2], 1.0, &mut stream_rng(2, &[1]));
        update_learner(&mut l, &mut opt, &window, &Tensor::zeros(&[3, 2]), UpdateSign::Descent).unwrap();
        assert_eq!(l, before);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        let l = Learner::Ssm(SsmLearner::randomized(ssm(2), &mut stream_rng(3, &[1]), 0.5).unwrap());
        let window = Tensor::randn(&[2, 2, 2], 1.0, &mut stream_rng(4, &[1]));
        let delta = Tensor::randn(&[2, 2], 1.0, &mut stream_rng(5, &[1]));
        let params: Vec<Tensor> = l.params().into_iter().cloned().collect();
        let report = check_tape_gradients(
            |tape, vars| surrogate_on_tape(tape, &l, vars, &window, &delta, UpdateSign::Descent),
            &params,
            FdOptions { tol: 1e-5, ..Default::default() },
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn sign_flag_flips_gradient() {
        let l = Learner::Ssm(SsmLearner::randomized(ssm(2), &mut stream_rng(6, &[1]), 0.5).unwrap());
        let window = Tensor::randn(&[2, 3, 2], 1.0, &mut stream_rng(7, &[1]));
        let delta = Tensor::randn(&[2, 2], 1.0, &mut stream_rng(8, &[1]));
        let (a, ga) = surrogate_gradients(&l, &window, &delta, UpdateSign::Descent).unwrap();
        let (b, gb) = surrogate_gradients(&l, &window, &delta, UpdateSign::Ascent).unwrap();
        assert_eq!(a, -b);
        for (x, y) in ga.iter().zip(&gb) {
            assert!(x.data().iter().zip(y.data()).all(|(p, q)| *p == -*q));
        }
    }

    #[test]
    fn personalization_respects_warmup() {
        let spec = LearnerSpec::Ssm(ssm(2));
        let learners = learner_bank_assign(&[4], &spec, 0).unwrap();
        let mut buf = UpdateSequenceBuffer::new(2).unwrap();
        buf.push(1, vec![Tensor::randn(&[4, 2], 1.0, &mut stream_rng(9, &[1]))]).unwrap();
        let global = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let (p, xi) = generate_personalized(&learners, &buf, &global, 2, 1, 1, Personalization::Additive).unwrap();
        assert!(xi.is_none());
        assert!(p.iter().all(|c| c == &global));

        let (p, xi) = generate_personalized(&learners, &buf, &global, 2, 2, 1, Personalization::Additive).unwrap();
        let xi = xi.unwrap();
        let recomputed = learners[0].forward(&buf.window(0).unwrap()).unwrap();
        assert_eq!(xi[0], recomputed);
        for i in 0..2 {
            let col = matrix_column(&recomputed, i);
            for r in 0..4 {
                assert_eq!(p[i][0][r], global[0][r] + col[r]);
            }
        }
        let (p, _) = generate_personalized(&learners, &buf, &global, 2, 2, 1, Personalization::Direct).unwrap();
        assert_eq!(p[1][0], matrix_column(&recomputed, 1));
    }

    #[test]
    fn zero_buffer_keeps_global_after_warmup() {
        let learners = learner_bank_assign(&[3], &LearnerSpec::Ssm(ssm(2)), 0).unwrap();
        let mut buf = UpdateSequenceBuffer::new(3).unwrap();
        buf.push(1, vec![Tensor::zeros(&[3, 2])]).unwrap();
        buf.push(2, vec![Tensor::zeros(&[3, 2])]).unwrap();
        let global = vec![vec![1.0, -2.0, 0.5]];
        let (p, _) = generate_personalized(&learners, &buf, &global, 2, 2, 0, Personalization::Additive).unwrap();
        assert!(p.iter().all(|c| c == &global));
    }

    #[test]
    fn matrix_columns_round_trip() {
        let a = [1.0, 2.0, 3.0];
        let b = [4.0, 5.0, 6.0];
        let m = columns_to_matrix(&[&a, &b]).unwrap();
        assert_eq!(m.data(), [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(matrix_column(&m, 1), b);
    }
}
