//! Central finite-difference checks against tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which coordinates to perturb.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coords {
    All,
    /// `count` coordinates sampled without replacement over all parameters.
    Random { count: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub h: f64,
    pub tol: f64,
    pub coords: Coords,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-6,
            coords: Coords::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdReport {
    /// `max |g_fd − g| / max(1, |g|)` over the checked coordinates.
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

/// Compares `grads` with central differences of `f` around `params`.
///
/// `f` is evaluated twice at `params` first; any bitwise disagreement is
/// reported as a determinism error.
pub fn finite_diff_check<F>(mut f: F, params: &[Tensor], grads: &[Tensor], opts: FdOptions) -> Result<FdReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&opts.h) {
        return Err(Error::Parameter(format!(
            "finite-difference step {} outside [1e-7, 1e-3]",
            opts.h
        )));
    }
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::Dimension("gradients do not match parameters".into()));
    }
    let a = f(params)?;
    let b = f(params)?;
    if a.to_bits() != b.to_bits() {
        return Err(Error::Determinism(format!(
            "function returned {a} then {b} at identical inputs"
        )));
    }

    let offsets: Vec<usize> = params
        .iter()
        .scan(0, |acc, p| {
            let start = *acc;
            *acc += p.len();
            Some(start)
        })
        .collect();
    let total: usize = params.iter().map(Tensor::len).sum();
    let flat: Vec<usize> = match opts.coords {
        Coords::All => (0..total).collect(),
        Coords::Random { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total, count.min(total)).into_vec();
            picked.sort_unstable();
            picked
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = 0.0_f64;
    let mut worst = None;
    for &k in &flat {
        let pi = offsets.partition_point(|&o| o <= k) - 1;
        let ci = k - offsets[pi];
        let orig = work[pi].data()[ci];
        work[pi].data_mut()[ci] = orig + opts.h;
        let plus = f(&work)?;
        work[pi].data_mut()[ci] = orig - opts.h;
        let minus = f(&work)?;
        work[pi].data_mut()[ci] = orig;

        let fd = (plus - minus) / (2.0 * opts.h);
        let g = grads[pi].data()[ci];
        let rel = (fd - g).abs() / g.abs().max(1.0);
        if rel > max_rel_err || worst.is_none() {
            max_rel_err = max_rel_err.max(rel);
            worst = Some((pi, ci));
        }
    }
    Ok(FdReport {
        max_rel_err,
        checked: flat.len(),
        worst,
        pass: max_rel_err <= opts.tol,
    })
}

/// Builds the scalar `build(tape, params)` on a fresh tape, differentiates
/// it, and checks the result with [`finite_diff_check`].
pub fn check_tape_gradients<F>(build: F, params: &[Tensor], opts: FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let grads = tape_gradients(&mut tape, &build, params)?;
    finite_diff_check(
        |ps| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
            let out = build(&mut t, &vars)?;
            t.value(out).item()
        },
        params,
        &grads,
        opts,
    )
}

/// Like [`check_tape_gradients`] but differentiates on a caller-supplied tape,
/// which lets tests inject faulty derivative rules.
pub fn tape_gradients<F>(tape: &mut Tape, build: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = build(tape, &vars)?;
    let g = tape.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| g.get(v).cloned().expect("param leaf always has a gradient"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Fault;
    use std::cell::Cell;

    fn sum_squares(t: &mut Tape, p: &[Var]) -> Result<Var> {
        let sq = t.mul(p[0], p[0])?;
        t.sum_all(sq)
    }

    #[test]
    fn quadratic_passes_tightly() {
        let p = vec![Tensor::from_vec(vec![0.3, -1.2, 2.5, 7.0])];
        let r = check_tape_gradients(sum_squares, &p, FdOptions { tol: 1e-8, ..Default::default() }).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn wrong_derivative_fails() {
        let build = |t: &mut Tape, p: &[Var]| {
            let s = t.silu(p[0])?;
            t.sum_all(s)
        };
        let p = vec![Tensor::from_vec(vec![0.4, -0.9, 1.3])];
        let mut tape = Tape::new();
        tape.inject_fault(Fault::SiluDerivative);
        let grads = tape_gradients(&mut tape, &build, &p).unwrap();
        let r = finite_diff_check(
            |ps| {
                let mut t = Tape::new();
                let v: Vec<Var> = ps.iter().map(|x| t.param(x.clone())).collect();
                let o = build(&mut t, &v)?;
                t.value(o).item()
            },
            &p,
            &grads,
            FdOptions::default(),
        )
        .unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn nondeterminism_detected() {
        let calls = Cell::new(0u32);
        let p = vec![Tensor::scalar(1.0)];
        let r = finite_diff_check(
            |_| {
                calls.set(calls.get() + 1);
                Ok(calls.get() as f64)
            },
            &p,
            &[Tensor::scalar(0.0)],
            FdOptions::default(),
        );
        assert!(matches!(r, Err(Error::Determinism(_))));
    }

    #[test]
    fn step_range_enforced() {
        let p = vec![Tensor::scalar(1.0)];
        let opts = FdOptions { h: 1e-2, ..Default::default() };
        assert!(matches!(
            check_tape_gradients(sum_squares, &p, opts),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn random_coords_subset() {
        let p = vec![Tensor::from_vec((0..50).map(|i| i as f64 * 0.1).collect())];
        let opts = FdOptions {
            coords: Coords::Random { count: 20, seed: 3 },
            ..Default::default()
        };
        let r = check_tape_gradients(sum_squares, &p, opts).unwrap();
        assert_eq!(r.checked, 20);
        assert!(r.pass);
    }
}
