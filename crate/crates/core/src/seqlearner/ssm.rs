//! Mamba-style selective SSM blocks on the tape.
//!
//! Inputs are laid out `[D, L, N]`: the flattened adapter coordinate is the
//! batch axis, then the step axis, then one channel per client. Each block:
//!
//! ```text
//! x ─ rmsnorm ─ in_proj ─┬─ main ─ causal conv ─ SiLU ─ selective scan ─┐
//!                         └─ gate ─────────────────────────── SiLU ─── ⊙ ─ out_proj ─ + x
//! ```
//!
//! The stack ends with an rmsnorm and keeps only the final step.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::Rng;
use crate::seqlearner::config::{ScanMode, SsmConfig};
use crate::seqlearner::scan::{ssm_scan_parallel, ScanProblem};

const DT_MIN: f64 = 0.001;
const DT_MAX: f64 = 0.1;

/// Tape handles for one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    pub norm_gain: Var,
    pub in_proj: Var,
    pub in_proj_bias: Option<Var>,
    pub conv_w: Var,
    pub conv_bias: Option<Var>,
    pub a_log: Var,
    pub b_proj: Var,
    pub b_proj_bias: Option<Var>,
    pub c_proj: Var,
    pub c_proj_bias: Option<Var>,
    pub dt_w: Var,
    pub dt_b: Var,
    pub d_skip: Var,
    pub out_proj: Var,
    pub out_proj_bias: Option<Var>,
}

/// Parameters ψ of one SSM learner stack, stored in [`SsmLearner::param_names`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmLearner {
    pub config: SsmConfig,
    params: Vec<Tensor>,
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmLearner {
    pub fn param_names(config: &SsmConfig) -> Vec<String> {
        let mut names = Vec::new();
        for b in 0..config.num_blocks {
            let mut push = |s: &str| names.push(format!("blocks.{b}.{s}"));
            push("norm_gain");
            push("in_proj");
            if !config.zero_bias {
                push("in_proj_bias");
            }
            push("conv_w");
            if !config.zero_bias {
                push("conv_bias");
            }
            push("a_log");
            push("b_proj");
            if !config.zero_bias {
                push("b_proj_bias");
            }
            push("c_proj");
            if !config.zero_bias {
                push("c_proj_bias");
            }
            push("dt_w");
            push("dt_b");
            push("d_skip");
            push("out_proj");
            if !config.zero_bias {
                push("out_proj_bias");
            }
        }
        names.push("final_norm_gain".into());
        names
    }

    fn shapes(config: &SsmConfig) -> Vec<Vec<usize>> {
        let (n, e, m, k) = (config.width, config.inner(), config.state_dim, config.conv_kernel);
        Self::param_names(config)
            .iter()
            .map(|name| {
                let leaf = name.rsplit('.').next().unwrap();
                match leaf {
                    "norm_gain" | "final_norm_gain" | "out_proj_bias" => vec![n],
                    "in_proj" => vec![n, 2 * e],
                    "in_proj_bias" => vec![2 * e],
                    "conv_w" => vec![e, k],
                    "a_log" | "b_proj" | "c_proj" => vec![e, m],
                    "b_proj_bias" | "c_proj_bias" => vec![m],
                    "conv_bias" | "dt_w" | "dt_b" | "d_skip" => vec![e],
                    "out_proj" => vec![e, n],
                    _ => unreachable!("unknown parameter {name}"),
                }
            })
            .collect()
    }

    /// Standard initialization: `A = −(1..M)` per channel, `softplus(dt_b)`
    /// log-uniform in `[0.001, 0.1]`, unit skip and norm gains, zero biases,
    /// and the output gain at `config.out_gain_init`.
    pub fn init(config: SsmConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (n, e, m, k) = (config.width, config.inner(), config.state_dim, config.conv_kernel);
        let names = Self::param_names(&config);
        let shapes = Self::shapes(&config);
        let mut params = Vec::with_capacity(names.len());
        for (name, shape) in names.iter().zip(&shapes) {
            let leaf = name.rsplit('.').next().unwrap();
            let t = match leaf {
                "norm_gain" | "d_skip" => Tensor::full(shape, 1.0),
                "final_norm_gain" => Tensor::full(shape, config.out_gain_init),
                "in_proj" => Tensor::randn(shape, 1.0 / (n as f64).sqrt(), rng),
                "conv_w" => Tensor::randn(shape, 1.0 / (k as f64).sqrt(), rng),
                "b_proj" | "c_proj" => Tensor::randn(shape, 1.0 / (e as f64).sqrt(), rng),
                "out_proj" => Tensor::randn(shape, config.out_proj_scale / (e as f64).sqrt(), rng),
                "a_log" => {
                    let data = (0..e).flat_map(|_| (1..=m).map(|j| (j as f64).ln())).collect();
                    Tensor::new(shape.clone(), data)?
                }
                "dt_w" => Tensor::randn(shape, 0.1, rng),
                "dt_b" => {
                    let data = (0..e)
                        .map(|_| {
                            let u: f64 = rng.random();
                            let dt = (DT_MIN.ln() + u * (DT_MAX.ln() - DT_MIN.ln())).exp();
                            inverse_softplus(dt)
                        })
                        .collect();
                    Tensor::new(shape.clone(), data)?
                }
                _ => Tensor::zeros(shape),
            };
            params.push(t);
        }
        Ok(Self { config, params })
    }

    /// Every parameter redrawn from a broad Gaussian, biases and gains
    /// included. Used to probe non-degenerate behavior in tests.
    pub fn randomized(config: SsmConfig, rng: &mut Rng, std: f64) -> Result<Self> {
        let mut me = Self::init(config, rng)?;
        for (name, p) in Self::param_names(&config).iter().zip(me.params.iter_mut()) {
            let shape = p.shape().to_vec();
            let mut t = Tensor::randn(&shape, std, rng);
            if name.ends_with("a_log") {
                // keep A away from zero
                t = t.map(|v| v.abs().min(2.0));
            }
            if name.ends_with("norm_gain") {
                t = t.map(|v| 1.0 + v);
            }
            *p = t;
        }
        Ok(me)
    }

    pub fn from_params(config: SsmConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = Self::shapes(&config);
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::Dimension("SSM parameters do not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Splits the flat var list into per-block handles plus the final gain.
    pub fn bind(&self, vars: &[Var]) -> Result<(Vec<BlockVars>, Var)> {
        if vars.len() != self.params.len() {
            return Err(Error::Dimension("wrong number of learner vars".into()));
        }
        let mut it = vars.iter().copied();
        let zb = self.config.zero_bias;
        let next_opt = |present: bool, it: &mut dyn Iterator<Item = Var>| if present { it.next() } else { None };
        let mut blocks = Vec::with_capacity(self.config.num_blocks);
        for _ in 0..self.config.num_blocks {
            let norm_gain = it.next().unwrap();
            let in_proj = it.next().unwrap();
            let in_proj_bias = next_opt(!zb, &mut it);
            let conv_w = it.next().unwrap();
            let conv_bias = next_opt(!zb, &mut it);
            let a_log = it.next().unwrap();
            let b_proj = it.next().unwrap();
            let b_proj_bias = next_opt(!zb, &mut it);
            let c_proj = it.next().unwrap();
            let c_proj_bias = next_opt(!zb, &mut it);
            let dt_w = it.next().unwrap();
            let dt_b = it.next().unwrap();
            let d_skip = it.next().unwrap();
            let out_proj = it.next().unwrap();
            let out_proj_bias = next_opt(!zb, &mut it);
            blocks.push(BlockVars {
                norm_gain,
                in_proj,
                in_proj_bias,
                conv_w,
                conv_bias,
                a_log,
                b_proj,
                b_proj_bias,
                c_proj,
                c_proj_bias,
                dt_w,
                dt_b,
                d_skip,
                out_proj,
                out_proj_bias,
            });
        }
        let final_gain = it.next().unwrap();
        Ok((blocks, final_gain))
    }

    /// Pushes the parameters as trainable leaves.
    pub fn params_on_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Pushes the parameters as constants (no gradient).
    pub fn constants_on_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// ξ `[D, N]` from a window `[D, L, N]`, read out at the final step.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[Var], window: Var) -> Result<Var> {
        let shape = tape.shape(window).to_vec();
        let [_, l, n] = shape[..] else {
            return Err(Error::Dimension(format!("learner window must be [D, L, N], got {shape:?}")));
        };
        if l == 0 {
            return Err(Error::Sequence("empty window".into()));
        }
        if n != self.config.width {
            return Err(Error::Dimension(format!(
                "window has {n} client channels, learner width is {}",
                self.config.width
            )));
        }
        let (blocks, final_gain) = self.bind(vars)?;
        let mut x = window;
        for b in &blocks {
            x = mamba_block_forward(tape, x, b, &self.config)?;
        }
        let normed = tape.rmsnorm(x, final_gain, self.config.norm_eps)?;
        tape.select(normed, 1, l - 1)
    }

    /// Gradient-free forward on plain tensors.
    pub fn forward(&self, window: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.constants_on_tape(&mut tape);
        let w = tape.constant(window.clone());
        let out = self.forward_on_tape(&mut tape, &vars, w)?;
        Ok(tape.value(out).clone())
    }
}

/// Input-dependent SSM parameters from the post-conv activation `x[..., E]`:
/// `Δt = softplus(x⊙dt_w + dt_b)`, `B = x·B_proj`, `C = x·C_proj`.
pub fn selection(tape: &mut Tape, x: Var, b: &BlockVars) -> Result<(Var, Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let e = *shape.last().ok_or_else(|| Error::Dimension("selection on scalar".into()))?;
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let xdt = tape.mul(x, b.dt_w)?;
    let pre = tape.add(xdt, b.dt_b)?;
    let dt = tape.softplus(pre)?;

    let flat = tape.reshape(x, &[rows, e])?;
    let project = |tape: &mut Tape, w: Var, bias: Option<Var>| -> Result<Var> {
        let m = tape.shape(w)[1];
        let mut y = tape.matmul(flat, w)?;
        if let Some(bias) = bias {
            y = tape.add(y, bias)?;
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(m);
        tape.reshape(y, &out_shape)
    };
    let bsel = project(tape, b.b_proj, b.b_proj_bias)?;
    let csel = project(tape, b.c_proj, b.c_proj_bias)?;
    Ok((dt, bsel, csel))
}

/// Zero-order hold for `Ā = exp(Δt ⊗ A)` and Euler `B̄ = Δt ⊗ B`.
///
/// `a` is `[E, M]`, `dt` is `[..., E]`, `bsel` is `[..., M]`; both outputs
/// are `[..., E, M]`.
pub fn discretize(tape: &mut Tape, a: Var, dt: Var, bsel: Var) -> Result<(Var, Var)> {
    let [e, m] = tape.shape(a)[..] else {
        return Err(Error::Dimension("A must be [E, M]".into()));
    };
    let nd = tape.shape(dt).len();
    if tape.shape(dt)[nd - 1] != e || tape.shape(bsel)[nd - 1] != m {
        return Err(Error::Dimension("discretize: inconsistent E/M".into()));
    }
    let dt_b = tape.broadcast_axis(dt, nd, m)?;
    let dta = tape.mul(dt_b, a)?;
    let abar = tape.exp(dta)?;
    let b_b = tape.broadcast_axis(bsel, nd - 1, e)?;
    let bbar = tape.mul(dt_b, b_b)?;
    Ok((abar, bbar))
}

/// Selective scan over the step axis of `u[D, L, E]`, returning `y[D, L, E]`.
///
/// With `mode == Parallel` and no gradient required, the recurrence runs
/// through the Blelloch kernel; otherwise it is unrolled step by step on
/// the tape.
#[allow(clippy::too_many_arguments)]
pub fn ssm_scan_on_tape(
    tape: &mut Tape,
    u: Var,
    dt: Var,
    bsel: Var,
    csel: Var,
    a: Var,
    d_skip: Var,
    mode: ScanMode,
) -> Result<Var> {
    let [d, l, e] = tape.shape(u)[..] else {
        return Err(Error::Dimension("scan input must be [D, L, E]".into()));
    };
    let m = tape.shape(a)[1];
    let any_grad = [u, dt, bsel, csel, a, d_skip].iter().any(|&v| tape.requires_grad(v));

    if mode == ScanMode::Parallel && !any_grad {
        let (abar, bbar) = discretize(tape, a, dt, bsel)?;
        let problem = ScanProblem {
            batch: d,
            steps: l,
            inner: e,
            state: m,
            abar: tape.value(abar).data().to_vec(),
            bbar: tape.value(bbar).data().to_vec(),
            u: tape.value(u).data().to_vec(),
            c: tape.value(csel).data().to_vec(),
            d_skip: tape.value(d_skip).data().to_vec(),
        };
        let y = ssm_scan_parallel(&problem)?;
        return Ok(tape.constant(Tensor::new(vec![d, l, e], y)?));
    }

    let mut h: Option<Var> = None;
    let mut ys = Vec::with_capacity(l);
    for j in 0..l {
        let u_j = tape.select(u, 1, j)?;
        let dt_j = tape.select(dt, 1, j)?;
        let b_j = tape.select(bsel, 1, j)?;
        let c_j = tape.select(csel, 1, j)?;
        let (abar, bbar) = discretize(tape, a, dt_j, b_j)?;
        let u_b = tape.broadcast_axis(u_j, 2, m)?;
        let drive = tape.mul(bbar, u_b)?;
        let next = match h {
            None => drive,
            Some(prev) => {
                let decayed = tape.mul(abar, prev)?;
                tape.add(decayed, drive)?
            }
        };
        h = Some(next);
        let c_b = tape.broadcast_axis(c_j, 1, e)?;
        let hc = tape.mul(next, c_b)?;
        let y_ssm = tape.sum_axis(hc, 2)?;
        let skip = tape.mul(u_j, d_skip)?;
        ys.push(tape.add(y_ssm, skip)?);
    }
    tape.stack(&ys, 1)
}

/// One residual Mamba block on `x[D, L, N]`.
pub fn mamba_block_forward(tape: &mut Tape, x: Var, b: &BlockVars, cfg: &SsmConfig) -> Result<Var> {
    let [d, l, n] = tape.shape(x)[..] else {
        return Err(Error::Dimension("block input must be [D, L, N]".into()));
    };
    let e = cfg.inner();
    let xn = tape.rmsnorm(x, b.norm_gain, cfg.norm_eps)?;
    let flat = tape.reshape(xn, &[d * l, n])?;
    let mut proj = tape.matmul(flat, b.in_proj)?;
    if let Some(bias) = b.in_proj_bias {
        proj = tape.add(proj, bias)?;
    }
    let main = tape.slice_last(proj, 0, e)?;
    let gate = tape.slice_last(proj, e, e)?;

    let main = tape.reshape(main, &[d, l, e])?;
    let mut conv = tape.causal_conv(main, b.conv_w)?;
    if let Some(bias) = b.conv_bias {
        conv = tape.add(conv, bias)?;
    }
    let u = tape.silu(conv)?;

    let (dt, bsel, csel) = selection(tape, u, b)?;
    let a_pos = tape.exp(b.a_log)?;
    let a = tape.neg(a_pos)?;
    let y = ssm_scan_on_tape(tape, u, dt, bsel, csel, a, b.d_skip, cfg.scan_mode)?;

    let y = tape.reshape(y, &[d * l, e])?;
    let g = tape.silu(gate)?;
    let gated = tape.mul(y, g)?;
    let mut out = tape.matmul(gated, b.out_proj)?;
    if let Some(bias) = b.out_proj_bias {
        out = tape.add(out, bias)?;
    }
    let out = tape.reshape(out, &[d, l, n])?;
    tape.add(x, out)
}
