use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clientsim::forward_on_tape;
use crate::error::{Error, Result};
use crate::fedserver::{surrogate_on_tape, UpdateSign};
use crate::numerics::{finite_diff_check, tape_gradients, Coords, Fault, FdOptions, Tape, Tensor, Var};
use crate::rng::{stream_rng, Rng};
use crate::seqlearner::{Learner, ScanMode, SsmConfig, SsmLearner};

pub const GRADCHECK_TOL: f64 = 1e-5;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Client cross-entropy with respect to adapter and head.
    Client,
    /// `⟨ξ, G⟩` for a random probe `G`, with respect to every learner parameter.
    Learner,
    /// The learner surrogate `−Σ⟨ξ_i, Δ_i⟩`.
    Surrogate,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Client, Suite::Learner, Suite::Surrogate];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub instances: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub h: f64,
    pub tol: f64,
    pub suites: Vec<SuiteReport>,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub instances: usize,
    pub seed: u64,
    /// Test hook: corrupt a derivative rule on the differentiated tape.
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            fault: None,
        }
    }
}

/// One random problem: parameters and a scalar objective over them.
struct Instance {
    params: Vec<Tensor>,
    build: Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>,
}

fn client_instance(rng: &mut Rng) -> Instance {
    let p = rng.random_range(2..=5);
    let d = rng.random_range(2..=5);
    let r = rng.random_range(1..=3);
    let c = rng.random_range(2..=4);
    let blocks = rng.random_range(1..=2);
    let n = rng.random_range(2..=6);
    let x = Tensor::randn(&[n, p], 1.0, rng);
    let w0 = Tensor::randn(&[d, p], 1.0 / (p as f64).sqrt(), rng);
    let feats = x.matmul(&w0.transpose().expect("matrix")).expect("shapes agree").map(f64::tanh);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut params = Vec::new();
    for _ in 0..blocks {
        params.push(Tensor::randn(&[r, p], 0.5, rng));
        params.push(Tensor::randn(&[d, r], 0.5, rng));
    }
    params.push(Tensor::randn(&[c, d], 0.5, rng));
    params.push(Tensor::randn(&[c], 0.5, rng));
    Instance {
        params,
        build: Box::new(move |tape, vars| {
            let xv = tape.constant(x.clone());
            let fv = tape.constant(feats.clone());
            let k = (vars.len() - 2) / 2;
            let pairs: Vec<(Var, Var)> = (0..k).map(|i| (vars[2 * i], vars[2 * i + 1])).collect();
            let logits = forward_on_tape(tape, xv, fv, &pairs, vars[2 * k], vars[2 * k + 1])?;
            tape.cross_entropy(logits, &labels)
        }),
    }
}

/// Random small learner, window and dimensions `(D, L, N)`.
fn random_learner(rng: &mut Rng, index: usize) -> Result<(Learner, usize, usize, usize)> {
    let n = rng.random_range(1..=4);
    let d = rng.random_range(1..=4);
    let l = rng.random_range(1..=6);
    let per_client = index % 5 == 4;
    let cfg = SsmConfig {
        width: if per_client { 1 } else { n },
        expand: rng.random_range(1..=2),
        state_dim: rng.random_range(1..=4),
        conv_kernel: rng.random_range(1..=3),
        num_blocks: rng.random_range(1..=2),
        zero_bias: rng.random_bool(0.5),
        norm_eps: 1e-5,
        out_gain_init: 1.0,
            out_proj_scale: 1.0,
        scan_mode: ScanMode::Sequential,
    };
    let learner = if per_client {
        Learner::PerClient(
            (0..n)
                .map(|_| SsmLearner::randomized(cfg, rng, 0.5))
                .collect::<Result<_>>()?,
        )
    } else {
        Learner::Ssm(SsmLearner::randomized(cfg, rng, 0.5)?)
    };
    Ok((learner, d, l, n))
}

fn learner_instance(rng: &mut Rng, index: usize) -> Result<Instance> {
    let (learner, d, l, n) = random_learner(rng, index)?;
    let window = Tensor::randn(&[d, l, n], 1.0, rng);
    let probe = Tensor::randn(&[d, n], 1.0, rng);
    let params = learner.params().into_iter().cloned().collect();
    Ok(Instance {
        params,
        build: Box::new(move |tape, vars| {
            let w = tape.constant(window.clone());
            let xi = learner.forward_on_tape(tape, vars, w)?;
            let g = tape.constant(probe.clone());
            let prod = tape.mul(xi, g)?;
            tape.sum_all(prod)
        }),
    })
}

fn surrogate_instance(rng: &mut Rng, index: usize) -> Result<Instance> {
    let (learner, d, l, n) = random_learner(rng, index)?;
    let window = Tensor::randn(&[d, l, n], 1.0, rng);
    let delta = Tensor::randn(&[d, n], 0.1, rng);
    let params = learner.params().into_iter().cloned().collect();
    Ok(Instance {
        params,
        build: Box::new(move |tape, vars| surrogate_on_tape(tape, &learner, vars, &window, &delta, UpdateSign::Descent)),
    })
}

fn check_instance(inst: &Instance, fault: Option<Fault>) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    let grads = tape_gradients(&mut tape, &inst.build, &inst.params)?;
    let report = finite_diff_check(
        |ps| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
            let out = (inst.build)(&mut t, &vars)?;
            t.value(out).item()
        },
        &inst.params,
        &grads,
        FdOptions {
            h: GRADCHECK_STEP,
            tol: GRADCHECK_TOL,
            coords: Coords::All,
        },
    )?;
    Ok((report.max_rel_err, report.checked))
}

pub fn run_suite(suite: Suite, opts: &GradcheckOptions) -> Result<SuiteReport> {
    if opts.instances == 0 {
        return Err(Error::config("instances", "must be >= 1"));
    }
    let mut rng = stream_rng(opts.seed, &[0x6772_6164, suite as u64]);
    let mut max_rel_err = 0.0f64;
    let mut coords = 0;
    for i in 0..opts.instances {
        let inst = match suite {
            Suite::Client => client_instance(&mut rng),
            Suite::Learner => learner_instance(&mut rng, i)?,
            Suite::Surrogate => surrogate_instance(&mut rng, i)?,
        };
        let (err, checked) = check_instance(&inst, opts.fault)?;
        max_rel_err = max_rel_err.max(err);
        coords += checked;
    }
    Ok(SuiteReport {
        suite,
        instances: opts.instances,
        coords_checked: coords,
        max_rel_err,
        pass: max_rel_err <= GRADCHECK_TOL,
    })
}

/// Runs the requested suites (all when empty).
pub fn gradcheck(suites: &[Suite], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let suites = if suites.is_empty() { &Suite::ALL[..] } else { suites };
    let reports = suites.iter().map(|&s| run_suite(s, opts)).collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        h: GRADCHECK_STEP,
        tol: GRADCHECK_TOL,
        pass: reports.iter().all(|r| r.pass),
        suites: reports,
    })
}
