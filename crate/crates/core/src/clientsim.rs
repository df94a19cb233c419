//! Simulated clients.
//!
//! A client classifies `x ∈ R^p` with
//!
//! ```text
//! logits = W · (tanh(W0·x) + Σ_k B_k·(A_k·x)) + b
//! ```
//!
//! where `W0` is the frozen backbone shared by everyone, `(A_k, B_k)` are
//! the low-rank adapter blocks exchanged with the server, and `(W, b)` is the
//! head, which never leaves the client.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, OptimizerState, Tape, Tensor, Var};
use crate::rng::{stream, stream_rng, Rng};
use crate::synthdata::{ClientData, Samples};

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Input dimension `p`.
    pub input_dim: usize,
    /// Backbone feature dimension `d`.
    pub feature_dim: usize,
    /// Adapter rank `r`.
    pub rank: usize,
    pub num_classes: usize,
    pub num_adapter_blocks: usize,
}

impl ModelDims {
    /// Flattened length of one adapter block, `r·p + d·r`.
    pub fn block_len(&self) -> usize {
        self.rank * self.input_dim + self.feature_dim * self.rank
    }

    pub fn block_names(&self) -> Vec<String> {
        (0..self.num_adapter_blocks).map(block_name).collect()
    }
}

pub fn block_name(k: usize) -> String {
    format!("block{k}")
}

/// Fixed random-features layer `x ↦ tanh(W0·x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    w0: Tensor,
}

impl FrozenBackbone {
    /// `W0[d×p]` with entries `~ N(0, 1/p)`.
    pub fn new(dims: &ModelDims, master_seed: u64) -> Self {
        let mut rng = stream_rng(master_seed, &[stream::BACKBONE]);
        let std = 1.0 / (dims.input_dim as f64).sqrt();
        Self {
            w0: Tensor::randn(&[dims.feature_dim, dims.input_dim], std, &mut rng),
        }
    }

    pub fn weights(&self) -> &Tensor {
        &self.w0
    }

    /// `tanh(X·W0ᵀ)` for a batch `X[n×p]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w0.transpose()?)?.map(f64::tanh))
    }

    /// SHA-256 of the weights, used to assert the backbone never changes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in self.w0.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.w0.data() {
            h.update(v.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

/// One low-rank adapter block `B·A`, flattened as `[A row-major, B row-major]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterBlock {
    pub name: String,
    /// `r×p`
    pub a: Tensor,
    /// `d×r`
    pub b: Tensor,
}

impl AdapterBlock {
    /// `A ~ N(0, 0.02²)`, `B = 0`: the effective map starts at zero.
    pub fn init(name: impl Into<String>, dims: &ModelDims, rng: &mut Rng) -> Self {
        Self {
            name: name.into(),
            a: Tensor::randn(&[dims.rank, dims.input_dim], ADAPTER_INIT_STD, rng),
            b: Tensor::zeros(&[dims.feature_dim, dims.rank]),
        }
    }

    pub fn len(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(self.a.data());
        v.extend_from_slice(self.b.data());
        v
    }

    pub fn unflatten(name: impl Into<String>, dims: &ModelDims, flat: &[f64]) -> Result<Self> {
        let na = dims.rank * dims.input_dim;
        if flat.len() != dims.block_len() {
            return Err(Error::Dimension(format!(
                "adapter block needs {} values, got {}",
                dims.block_len(),
                flat.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            a: Tensor::new(vec![dims.rank, dims.input_dim], flat[..na].to_vec())?,
            b: Tensor::new(vec![dims.feature_dim, dims.rank], flat[na..].to_vec())?,
        })
    }

    /// The effective `d×p` map `B·A`.
    pub fn effective(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }
}

/// A full adapter θ: one block per backbone attachment point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub blocks: Vec<AdapterBlock>,
}

impl Adapter {
    pub fn init(dims: &ModelDims, master_seed: u64) -> Self {
        let blocks = (0..dims.num_adapter_blocks)
            .map(|k| {
                let mut rng = stream_rng(master_seed, &[stream::ADAPTER_INIT, k as u64]);
                AdapterBlock::init(block_name(k), dims, &mut rng)
            })
            .collect();
        Self { blocks }
    }

    pub fn flatten_blocks(&self) -> Vec<Vec<f64>> {
        self.blocks.iter().map(AdapterBlock::flatten).collect()
    }

    pub fn from_flat_blocks(dims: &ModelDims, flats: &[Vec<f64>]) -> Result<Self> {
        if flats.len() != dims.num_adapter_blocks {
            return Err(Error::Dimension(format!(
                "{} adapter blocks expected, got {}",
                dims.num_adapter_blocks,
                flats.len()
            )));
        }
        let blocks = flats
            .iter()
            .enumerate()
            .map(|(k, f)| AdapterBlock::unflatten(block_name(k), dims, f))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    fn check(&self, dims: &ModelDims) -> Result<()> {
        if self.blocks.len() != dims.num_adapter_blocks {
            return Err(Error::Dimension("adapter block count".into()));
        }
        for blk in &self.blocks {
            if blk.a.shape() != [dims.rank, dims.input_dim] || blk.b.shape() != [dims.feature_dim, dims.rank] {
                return Err(Error::Dimension(format!("adapter block {} shape", blk.name)));
            }
        }
        Ok(())
    }
}

/// Local classification head `(W[C×d], b[C])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w: Tensor,
    pub b: Tensor,
}

impl Head {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            w: Tensor::zeros(&[dims.num_classes, dims.feature_dim]),
            b: Tensor::zeros(&[dims.num_classes]),
        }
    }
}

/// Records logits `[n×C]` for a batch on `tape`.
///
/// `feats` are the backbone features `tanh(X·W0ᵀ)` for the same batch.
pub fn forward_on_tape(
    tape: &mut Tape,
    x: Var,
    feats: Var,
    blocks: &[(Var, Var)],
    head_w: Var,
    head_b: Var,
) -> Result<Var> {
    let mut z = feats;
    for &(a, b) in blocks {
        let at = tape.transpose(a)?;
        let xa = tape.matmul(x, at)?;
        let bt = tape.transpose(b)?;
        let delta = tape.matmul(xa, bt)?;
        z = tape.add(z, delta)?;
    }
    let wt = tape.transpose(head_w)?;
    let zw = tape.matmul(z, wt)?;
    tape.add(zw, head_b)
}

/// Logits for a batch without recording a tape.
pub fn logits_batch(x: &Tensor, feats: &Tensor, adapter: &Adapter, head: &Head) -> Result<Tensor> {
    let mut z = feats.clone();
    for blk in &adapter.blocks {
        let delta = x.matmul(&blk.a.transpose()?)?.matmul(&blk.b.transpose()?)?;
        for (zv, dv) in z.data_mut().iter_mut().zip(delta.data()) {
            *zv += dv;
        }
    }
    let mut logits = z.matmul(&head.w.transpose()?)?;
    let c = head.b.len();
    for row in logits.data_mut().chunks_mut(c) {
        for (l, bv) in row.iter_mut().zip(head.b.data()) {
            *l += bv;
        }
    }
    logits.ensure_finite("logits")
}

/// Logits for one input vector.
pub fn forward(backbone: &FrozenBackbone, x: &Tensor, adapter: &Adapter, head: &Head) -> Result<Tensor> {
    let p = backbone.weights().shape()[1];
    if x.len() != p {
        return Err(Error::Dimension(format!("input has {} entries, backbone expects {p}", x.len())));
    }
    let xb = x.reshape(&[1, p])?;
    let feats = backbone.features(&xb)?;
    let logits = logits_batch(&xb, &feats, adapter, head)?;
    logits.reshape(&[head.b.len()])
}

/// Mean cross-entropy and top-1 accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

/// Evaluates on precomputed features; argmax ties go to the lowest class.
pub fn evaluate_with_features(
    x: &Tensor,
    feats: &Tensor,
    labels: &[usize],
    adapter: &Adapter,
    head: &Head,
) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::Client("cannot evaluate an empty split".into()));
    }
    let logits = logits_batch(x, feats, adapter, head)?;
    let c = head.b.len();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        loss += log_sum_exp(row) - row[y];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    let n = labels.len() as f64;
    Ok(EvalResult {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}

pub fn evaluate(backbone: &FrozenBackbone, adapter: &Adapter, head: &Head, split: &Samples) -> Result<EvalResult> {
    if split.is_empty() {
        return Err(Error::Client("cannot evaluate an empty split".into()));
    }
    let (x, labels) = split.all();
    let feats = backbone.features(&x)?;
    evaluate_with_features(&x, &feats, &labels, adapter, head)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTrainOutput {
    /// Locally tuned adapter θ̃, equal to `θ_in + Δ` exactly.
    pub adapter: Adapter,
    pub head: Head,
    /// `flatten(θ̃) − flatten(θ_in)` per block.
    pub deltas: Vec<Vec<f64>>,
}

/// Mean cross-entropy loss over a batch and its gradient with respect to
/// every adapter block and the head.
pub fn loss_and_grads(
    x: &Tensor,
    feats: &Tensor,
    labels: &[usize],
    adapter: &Adapter,
    head: &Head,
) -> Result<(f64, Vec<(Tensor, Tensor)>, (Tensor, Tensor))> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fv = tape.constant(feats.clone());
    let blocks: Vec<(Var, Var)> = adapter
        .blocks
        .iter()
        .map(|b| (tape.param(b.a.clone()), tape.param(b.b.clone())))
        .collect();
    let w = tape.param(head.w.clone());
    let bias = tape.param(head.b.clone());
    let logits = forward_on_tape(&mut tape, xv, fv, &blocks, w, bias)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let value = tape.value(loss).item()?;
    let g = tape.backward(loss)?;
    let grab = |v: Var| g.get(v).cloned().expect("param gradient");
    let block_grads = blocks.iter().map(|&(a, b)| (grab(a), grab(b))).collect();
    Ok((value, block_grads, (grab(w), grab(bias))))
}

/// SGD over shuffled mini-batches on the local cross-entropy, updating the
/// adapter and head jointly.
pub fn local_train(
    adapter_in: &Adapter,
    head_in: &Head,
    x: &Tensor,
    feats: &Tensor,
    labels: &[usize],
    cfg: &LocalTrainConfig,
    rng: &mut Rng,
) -> Result<LocalTrainOutput> {
    if labels.is_empty() {
        return Err(Error::Client("empty training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("local.batch_size", "must be >= 1"));
    }
    let mut adapter = adapter_in.clone();
    let mut head = head_in.clone();
    let mut opt = OptimizerState::sgd(cfg.lr);
    let (p, d) = (x.shape()[1], feats.shape()[1]);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let bx = gather_rows(x, batch, p);
            let bf = gather_rows(feats, batch, d);
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, block_grads, (gw, gb)) = loss_and_grads(&bx, &bf, &by, &adapter, &head)?;

            let mut params = Vec::with_capacity(2 * adapter.blocks.len() + 2);
            let mut grads = Vec::with_capacity(params.capacity());
            for (blk, (ga, gbk)) in adapter.blocks.iter().zip(block_grads) {
                params.push(blk.a.clone());
                params.push(blk.b.clone());
                grads.push(ga);
                grads.push(gbk);
            }
            params.push(head.w.clone());
            params.push(head.b.clone());
            grads.push(gw);
            grads.push(gb);
            opt.step(&mut params, &grads)?;

            let mut it = params.into_iter();
            for blk in adapter.blocks.iter_mut() {
                blk.a = it.next().unwrap();
                blk.b = it.next().unwrap();
            }
            head.w = it.next().unwrap();
            head.b = it.next().unwrap();
        }
    }

    // Δ is defined first, then θ̃ := θ_in + Δ, so reconstruction on the server
    // reproduces θ̃ bit for bit.
    let flat_in = adapter_in.flatten_blocks();
    let deltas: Vec<Vec<f64>> = adapter
        .flatten_blocks()
        .iter()
        .zip(&flat_in)
        .map(|(new, old)| new.iter().zip(old).map(|(a, b)| a - b).collect())
        .collect();
    let rebuilt: Vec<Vec<f64>> = flat_in
        .iter()
        .zip(&deltas)
        .map(|(old, dl)| old.iter().zip(dl).map(|(a, b)| a + b).collect())
        .collect();
    let dims_names: Vec<String> = adapter_in.blocks.iter().map(|b| b.name.clone()).collect();
    let blocks = adapter_in
        .blocks
        .iter()
        .zip(rebuilt)
        .zip(dims_names)
        .map(|((tmpl, flat), name)| {
            let na = tmpl.a.len();
            Ok(AdapterBlock {
                name,
                a: Tensor::new(tmpl.a.shape().to_vec(), flat[..na].to_vec())?,
                b: Tensor::new(tmpl.b.shape().to_vec(), flat[na..].to_vec())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LocalTrainOutput {
        adapter: Adapter { blocks },
        head,
        deltas,
    })
}

fn gather_rows(t: &Tensor, idx: &[usize], width: usize) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
    }
    Tensor::from_parts(vec![idx.len(), width], data)
}

/// Client → server: the adapter update for every block. No head fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub round: usize,
    pub dataset_size: usize,
    pub deltas: BTreeMap<String, Vec<f64>>,
}

/// Server → client: the adapter to start the next local round from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerBroadcast {
    pub round: usize,
    pub adapters: BTreeMap<String, Vec<f64>>,
}

/// Encodes and decodes protocol messages as JSON.
pub mod wire {
    use super::*;

    pub fn encode<T: Serialize>(msg: &T) -> Result<Vec<u8>> {
        serde_json::to_vec(msg).map_err(|e| Error::Protocol(e.to_string()))
    }

    pub fn decode<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T> {
        serde_json::from_slice(bytes).map_err(|e| Error::Protocol(e.to_string()))
    }
}

impl ServerBroadcast {
    pub fn from_adapter(round: usize, adapter: &Adapter) -> Self {
        Self {
            round,
            adapters: adapter
                .blocks
                .iter()
                .map(|b| (b.name.clone(), b.flatten()))
                .collect(),
        }
    }

    pub fn to_adapter(&self, dims: &ModelDims) -> Result<Adapter> {
        let flats = dims
            .block_names()
            .iter()
            .map(|n| {
                self.adapters
                    .get(n)
                    .cloned()
                    .ok_or_else(|| Error::Protocol(format!("broadcast missing block {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Adapter::from_flat_blocks(dims, &flats)
    }
}

/// One client's full local state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub data: ClientData,
    train_x: Tensor,
    train_feats: Tensor,
    test_x: Tensor,
    test_feats: Tensor,
    pub head: Head,
    /// The most recent adapter received from the server.
    pub adapter: Adapter,
    /// Adapter after the latest local training.
    pub tuned: Option<Adapter>,
    master_seed: u64,
}

impl ClientState {
    pub fn new(
        data: ClientData,
        backbone: &FrozenBackbone,
        dims: &ModelDims,
        initial_adapter: Adapter,
        master_seed: u64,
    ) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::Client(format!("client {} has no training data", data.client_id)));
        }
        initial_adapter.check(dims)?;
        let (train_x, _) = data.train.all();
        let (test_x, _) = data.test.all();
        let train_feats = backbone.features(&train_x)?;
        let test_feats = backbone.features(&test_x)?;
        Ok(Self {
            client_id: data.client_id,
            data,
            train_x,
            train_feats,
            test_x,
            test_feats,
            head: Head::zeros(dims),
            adapter: initial_adapter,
            tuned: None,
            master_seed,
        })
    }

    pub fn dataset_size(&self) -> usize {
        self.data.train.len()
    }

    /// RNG stream for this client's shuffles in `round`.
    pub fn round_rng(&self, round: usize) -> Rng {
        stream_rng(
            self.master_seed,
            &[stream::CLIENT_TRAIN, self.client_id as u64, round as u64],
        )
    }

    /// Installs a server broadcast as the adapter to train from.
    pub fn receive(&mut self, msg: &ServerBroadcast, dims: &ModelDims) -> Result<()> {
        self.adapter = msg.to_adapter(dims)?;
        Ok(())
    }

    /// Trains from the last received adapter and returns the update message.
    pub fn local_round(&mut self, round: usize, cfg: &LocalTrainConfig) -> Result<ClientUpdate> {
        let mut rng = self.round_rng(round);
        let out = local_train(
            &self.adapter,
            &self.head,
            &self.train_x,
            &self.train_feats,
            &self.data.train.labels,
            cfg,
            &mut rng,
        )?;
        self.head = out.head;
        self.tuned = Some(out.adapter);
        Ok(ClientUpdate {
            client_id: self.client_id,
            round,
            dataset_size: self.dataset_size(),
            deltas: self
                .adapter
                .blocks
                .iter()
                .zip(out.deltas)
                .map(|(b, d)| (b.name.clone(), d))
                .collect(),
        })
    }

    pub fn evaluate_train(&self, adapter: &Adapter) -> Result<EvalResult> {
        evaluate_with_features(&self.train_x, &self.train_feats, &self.data.train.labels, adapter, &self.head)
    }

    pub fn evaluate_test(&self, adapter: &Adapter) -> Result<EvalResult> {
        evaluate_with_features(&self.test_x, &self.test_feats, &self.data.test.labels, adapter, &self.head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_tape_gradients, FdOptions};
    use rand::SeedableRng;

    fn dims() -> ModelDims {
        ModelDims {
            input_dim: 5,
            feature_dim: 6,
            rank: 2,
            num_classes: 3,
            num_adapter_blocks: 1,
        }
    }

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    #[test]
    fn flatten_roundtrip_and_length() {
        let d = dims();
        let mut r = rng(1);
        let mut blk = AdapterBlock::init("block0", &d, &mut r);
        blk.b = Tensor::randn(&[6, 2], 1.0, &mut r);
        let flat = blk.flatten();
        assert_eq!(flat.len(), 2 * 5 + 6 * 2);
        assert_eq!(AdapterBlock::unflatten("block0", &d, &flat).unwrap(), blk);
        assert!(AdapterBlock::unflatten("block0", &d, &flat[1..]).is_err());
    }

    #[test]
    fn zero_b_adapter_contributes_nothing() {
        let d = dims();
        let bb = FrozenBackbone::new(&d, 3);
        let mut r = rng(2);
        let adapter = Adapter::init(&d, 3);
        let head = Head {
            w: Tensor::randn(&[3, 6], 1.0, &mut r),
            b: Tensor::randn(&[3], 1.0, &mut r),
        };
        let x = Tensor::randn(&[5], 1.0, &mut r);
        let got = forward(&bb, &x, &adapter, &head).unwrap();
        let f = bb.features(&x.reshape(&[1, 5]).unwrap()).unwrap();
        let want = f.matmul(&head.w.transpose().unwrap()).unwrap();
        for (g, (w, b)) in got.data().iter().zip(want.data().iter().zip(head.b.data())) {
            assert!((g - (w + b)).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_head_gives_log_c_loss_and_class_zero_predictions() {
        let d = dims();
        let bb = FrozenBackbone::new(&d, 3);
        let mut r = rng(4);
        let split = Samples {
            dim: 5,
            features: Tensor::randn(&[7, 5], 1.0, &mut r).into_data(),
            labels: vec![0, 1, 2, 0, 0, 1, 2],
        };
        let res = evaluate(&bb, &Adapter::init(&d, 1), &Head::zeros(&d), &split).unwrap();
        assert!((res.loss - 3f64.ln()).abs() < 1e-14);
        assert_eq!(res.accuracy, 3.0 / 7.0);
    }

    #[test]
    fn empty_split_is_client_error() {
        let d = dims();
        let bb = FrozenBackbone::new(&d, 3);
        let r = evaluate(&bb, &Adapter::init(&d, 1), &Head::zeros(&d), &Samples::empty(5));
        assert!(matches!(r, Err(Error::Client(_))));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let d = dims();
        let bb = FrozenBackbone::new(&d, 3);
        for seed in 0..5 {
            let mut r = rng(seed);
            let x = Tensor::randn(&[4, 5], 1.0, &mut r);
            let feats = bb.features(&x).unwrap();
            let labels = vec![0, 2, 1, 2];
            let params = vec![
                Tensor::randn(&[2, 5], 0.5, &mut r),
                Tensor::randn(&[6, 2], 0.5, &mut r),
                Tensor::randn(&[3, 6], 0.5, &mut r),
                Tensor::randn(&[3], 0.5, &mut r),
            ];
            let report = check_tape_gradients(
                |t, p| {
                    let xv = t.constant(x.clone());
                    let fv = t.constant(feats.clone());
                    let logits = forward_on_tape(t, xv, fv, &[(p[0], p[1])], p[2], p[3])?;
                    t.cross_entropy(logits, &labels)
                },
                &params,
                FdOptions::default(),
            )
            .unwrap();
            assert!(report.pass, "{report:?}");
        }
    }

    fn tiny_training_set(d: &ModelDims, bb: &FrozenBackbone, n: usize) -> (Tensor, Tensor, Vec<usize>) {
        let mut r = rng(9);
        let x = Tensor::randn(&[n, d.input_dim], 1.0, &mut r);
        let f = bb.features(&x).unwrap();
        let labels = (0..n).map(|i| i % d.num_classes).collect();
        (x, f, labels)
    }

    #[test]
    fn no_epochs_or_zero_lr_is_a_no_op() {
        let d = dims();
        let bb = FrozenBackbone::new(&d, 3);
        let (x, f, y) = tiny_training_set(&d, &bb, 6);
        let adapter = Adapter::init(&d, 5);
        let head = Head::zeros(&d);
        for cfg in [
            LocalTrainConfig { epochs: 0, lr: 0.1, batch_size: 2 },
            LocalTrainConfig { epochs: 2, lr: 0.0, batch_size: 2 },
        ] {
            let out = local_train(&adapter, &head, &x, &f, &y, &cfg, &mut rng(0)).unwrap();
            assert!(out.deltas.iter().flatten().all(|&v| v == 0.0));
            assert_eq!(out.adapter, adapter);
            assert_eq!(out.head, head);
        }
    }

    #[test]
    fn single_sample_step_matches_hand_sgd() {
        let d = dims();
        let bb = FrozenBackbone::new(&d, 3);
        let (x, f, y) = tiny_training_set(&d, &bb, 1);
        let mut r = rng(12);
        let mut adapter = Adapter::init(&d, 5);
        adapter.blocks[0].b = Tensor::randn(&[6, 2], 0.3, &mut r);
        let head = Head {
            w: Tensor::randn(&[3, 6], 0.3, &mut r),
            b: Tensor::zeros(&[3]),
        };
        let lr = 0.07;
        let cfg = LocalTrainConfig { epochs: 1, lr, batch_size: 1 };
        let out = local_train(&adapter, &head, &x, &f, &y, &cfg, &mut rng(0)).unwrap();
        let (_, g, _) = loss_and_grads(&x, &f, &y, &adapter, &head).unwrap();
        let want: Vec<f64> = g[0].0.data().iter().chain(g[0].1.data()).map(|v| -lr * v).collect();
        for (a, b) in out.deltas[0].iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn delta_additivity_is_exact() {
        let d = dims();
        let bb = FrozenBackbone::new(&d, 3);
        let (x, f, y) = tiny_training_set(&d, &bb, 9);
        let adapter = Adapter::init(&d, 5);
        let cfg = LocalTrainConfig { epochs: 3, lr: 0.3, batch_size: 4 };
        let out = local_train(&adapter, &Head::zeros(&d), &x, &f, &y, &cfg, &mut rng(1)).unwrap();
        let before = adapter.flatten_blocks();
        let after = out.adapter.flatten_blocks();
        for ((a, b), dl) in after[0].iter().zip(&before[0]).zip(&out.deltas[0]) {
            assert_eq!(*a, b + dl);
        }
    }

    #[test]
    fn update_message_has_no_head_fields() {
        let msg = ClientUpdate {
            client_id: 1,
            round: 2,
            dataset_size: 10,
            deltas: [("block0".to_string(), vec![0.5, -0.25])].into_iter().collect(),
        };
        let bytes = wire::encode(&msg).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["client_id", "dataset_size", "deltas", "round"]);
        assert_eq!(wire::decode::<ClientUpdate>(&bytes).unwrap(), msg);
    }

    #[test]
    fn backbone_fingerprint_is_stable() {
        let d = dims();
        assert_eq!(FrozenBackbone::new(&d, 8).fingerprint(), FrozenBackbone::new(&d, 8).fingerprint());
        assert_ne!(FrozenBackbone::new(&d, 8).fingerprint(), FrozenBackbone::new(&d, 9).fingerprint());
    }
}
