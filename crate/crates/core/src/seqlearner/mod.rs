//! Server-side sequential learners.
//!
//! A learner maps a window of stacked client updates `[D, L', N]` (oldest
//! step first) to calibrations ξ `[D, N]`, one column per client. The
//! adapter coordinate `D` is a batch axis, so learner size depends only on
//! the client count and the architecture.

pub mod config;
pub mod mlp;
pub mod scan;
pub mod ssm;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use config::{ScanMode, SsmConfig};
pub use mlp::{MlpConfig, MlpLearner};
pub use scan::{ssm_hidden_states, ssm_scan_parallel, ssm_scan_sequential, ScanProblem};
pub use ssm::{discretize, mamba_block_forward, selection, ssm_scan_on_tape, BlockVars, SsmLearner};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{stream::LEARNER_INIT, stream_rng};

/// Which learner architecture to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    /// One SSM stack over all `N` client channels.
    Ssm(SsmConfig),
    /// `clients` independent width-1 SSM stacks; stack `i` sees only column `i`.
    PerClient { config: SsmConfig, clients: usize },
    Mlp(MlpConfig),
}

impl LearnerSpec {
    pub fn clients(&self) -> usize {
        match self {
            Self::Ssm(c) => c.width,
            Self::PerClient { clients, .. } => *clients,
            Self::Mlp(c) => c.width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Ssm(c) => c.validate(),
            Self::PerClient { config, clients } => {
                config.validate()?;
                if config.width != 1 {
                    return Err(Error::config("learner.width", "per-client learners have width 1"));
                }
                if *clients == 0 {
                    return Err(Error::config("num_clients", "must be >= 1"));
                }
                Ok(())
            }
            Self::Mlp(c) => c.validate(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Ssm(c) => c.param_count(),
            Self::PerClient { config, clients } => clients * config.param_count(),
            Self::Mlp(c) => c.param_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Learner {
    Ssm(SsmLearner),
    PerClient(Vec<SsmLearner>),
    Mlp(MlpLearner),
}

impl Learner {
    pub fn init(spec: &LearnerSpec, rng: &mut crate::rng::Rng) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            LearnerSpec::Ssm(c) => Self::Ssm(SsmLearner::init(*c, rng)?),
            LearnerSpec::PerClient { config, clients } => Self::PerClient(
                (0..*clients)
                    .map(|_| SsmLearner::init(*config, rng))
                    .collect::<Result<_>>()?,
            ),
            LearnerSpec::Mlp(c) => Self::Mlp(MlpLearner::init(c.clone(), rng)?),
        })
    }

    pub fn clients(&self) -> usize {
        match self {
            Self::Ssm(l) => l.config.width,
            Self::PerClient(ls) => ls.len(),
            Self::Mlp(l) => l.config.width,
        }
    }

    /// All parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Self::Ssm(l) => l.params().iter().collect(),
            Self::PerClient(ls) => ls.iter().flat_map(|l| l.params()).collect(),
            Self::Mlp(l) => l.params().iter().collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Self::Ssm(l) => l.params_mut().iter_mut().collect(),
            Self::PerClient(ls) => ls.iter_mut().flat_map(|l| l.params_mut().iter_mut()).collect(),
            Self::Mlp(l) => l.params_mut().iter_mut().collect(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Self::Ssm(l) => SsmLearner::param_names(&l.config),
            Self::PerClient(ls) => ls
                .iter()
                .enumerate()
                .flat_map(|(i, l)| SsmLearner::param_names(&l.config).into_iter().map(move |n| format!("client{i}.{n}")))
                .collect(),
            Self::Mlp(l) => MlpLearner::param_names(&l.config),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Pushes every parameter onto `tape`, trainable when `trainable` is set.
    pub fn push_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| if trainable { tape.param(p.clone()) } else { tape.constant(p.clone()) })
            .collect()
    }

    /// ξ `[D, N]` for a window `[D, L', N]` already on the tape.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], window: Var) -> Result<Var> {
        match self {
            Self::Ssm(l) => l.forward_on_tape(tape, vars, window),
            Self::PerClient(ls) => {
                let n = tape.shape(window).last().copied().unwrap_or(0);
                if n != ls.len() {
                    return Err(Error::Dimension(format!("window has {n} channels, bank has {} learners", ls.len())));
                }
                let per = vars.len() / ls.len();
                let mut cols = Vec::with_capacity(n);
                for (i, l) in ls.iter().enumerate() {
                    let column = tape.slice_last(window, i, 1)?;
                    let xi = l.forward_on_tape(tape, &vars[i * per..(i + 1) * per], column)?;
                    cols.push(tape.select(xi, 1, 0)?);
                }
                tape.stack(&cols, 1)
            }
            Self::Mlp(l) => {
                let padded = l.pad_window(tape.value(window))?;
                let padded = tape.constant(padded);
                l.forward_on_tape(tape, vars, padded)
            }
        }
    }

    /// Gradient-free ξ for a window.
    pub fn forward(&self, window: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.push_params(&mut tape, false);
        let w = tape.constant(window.clone());
        let xi = self.forward_on_tape(&mut tape, &vars, w)?;
        Ok(tape.value(xi).clone())
    }

    /// Value of `Σ ξ ⊙ probe` and its gradient with respect to every parameter.
    pub fn probe_gradients(&self, window: &Tensor, probe: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.push_params(&mut tape, true);
        let w = tape.constant(window.clone());
        let xi = self.forward_on_tape(&mut tape, &vars, w)?;
        let g = tape.constant(probe.clone());
        let prod = tape.mul(xi, g)?;
        let s = tape.sum_all(prod)?;
        let value = tape.value(s).item()?;
        let grads = tape.backward(s)?;
        Ok((value, vars.iter().map(|&v| grads.get(v).cloned().expect("learner parameters are leaves")).collect()))
    }
}

/// Stacks per-round update matrices `[D, N]`, oldest first, into a window `[D, L', N]`.
pub fn stack_window(steps: &[&Tensor]) -> Result<Tensor> {
    let first = steps.first().ok_or_else(|| Error::Sequence("empty window".into()))?;
    let [d, n] = first.shape()[..] else {
        return Err(Error::Dimension("update matrices must be [D, N]".into()));
    };
    if steps.iter().any(|s| s.shape() != [d, n]) {
        return Err(Error::Dimension("update matrices in a window must share a shape".into()));
    }
    let l = steps.len();
    let mut data = vec![0.0; d * l * n];
    for (j, s) in steps.iter().enumerate() {
        for di in 0..d {
            data[(di * l + j) * n..(di * l + j + 1) * n].copy_from_slice(&s.data()[di * n..(di + 1) * n]);
        }
    }
    Tensor::new(vec![d, l, n], data)
}

/// One independent learner per adapter block, block `k` seeded from stream
/// `(LEARNER_INIT, k)`. Sizes do not depend on the blocks' lengths.
pub fn learner_bank_assign(block_lens: &[usize], spec: &LearnerSpec, master_seed: u64) -> Result<Vec<Learner>> {
    if block_lens.is_empty() {
        return Err(Error::Parameter("learner bank needs at least one adapter block".into()));
    }
    (0..block_lens.len())
        .map(|k| Learner::init(spec, &mut stream_rng(master_seed, &[LEARNER_INIT, k as u64])))
        .collect()
}

/// Identifies the architecture a checkpoint was written for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerFingerprint {
    pub kind: String,
    pub width: usize,
    pub inner: usize,
    pub state_dim: usize,
    pub conv_kernel: usize,
    pub num_blocks: usize,
    pub param_count: usize,
}

impl LearnerFingerprint {
    pub fn of(learner: &Learner) -> Self {
        let ssm = |kind: &str, c: &SsmConfig, width: usize| Self {
            kind: kind.into(),
            width,
            inner: c.inner(),
            state_dim: c.state_dim,
            conv_kernel: c.conv_kernel,
            num_blocks: c.num_blocks,
            param_count: learner.param_count(),
        };
        match learner {
            Learner::Ssm(l) => ssm("ssm", &l.config, l.config.width),
            Learner::PerClient(ls) => ssm("per_client", &ls[0].config, ls.len()),
            Learner::Mlp(l) => Self {
                kind: "mlp".into(),
                width: l.config.width,
                inner: l.config.hidden.iter().sum(),
                state_dim: 0,
                conv_kernel: 0,
                num_blocks: l.config.hidden.len(),
                param_count: learner.param_count(),
            },
        }
    }
}

/// Named-tensor container for learner parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerCheckpoint {
    pub fingerprint: LearnerFingerprint,
    pub tensors: BTreeMap<String, Tensor>,
}

impl LearnerCheckpoint {
    pub fn save(learner: &Learner) -> Self {
        Self {
            fingerprint: LearnerFingerprint::of(learner),
            tensors: learner.param_names().into_iter().zip(learner.params().into_iter().cloned()).collect(),
        }
    }

    /// Copies the stored tensors into `learner`, which must have the same
    /// architecture.
    pub fn load_into(&self, learner: &mut Learner) -> Result<()> {
        let want = LearnerFingerprint::of(learner);
        if want != self.fingerprint {
            return Err(Error::State(format!(
                "checkpoint fingerprint {:?} does not match learner {:?}",
                self.fingerprint, want
            )));
        }
        let names = learner.param_names();
        for (name, p) in names.iter().zip(learner.params_mut()) {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::State(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != p.shape() {
                return Err(Error::State(format!("checkpoint tensor {name} has shape {:?}", t.shape())));
            }
            *p = t.clone();
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}
