//! Selective-scan kernels over plain arrays.
//!
//! Layout is batch-major: `Ā`, `B̄` are `[D][L][E][M]`, `u` is `[D][L][E]`,
//! `C` is `[D][L][M]`, and the output `y` is `[D][L][E]`. The recurrence,
//! starting from `h⁰ = 0`, is
//!
//! ```text
//! hʲ = Āʲ ⊙ hʲ⁻¹ + B̄ʲ ⊙ uʲ        yʲ[e] = Σ_m Cʲ[m]·hʲ[e,m] + D_skip[e]·uʲ[e]
//! ```
//!
//! [`ssm_scan_sequential`] is the reference. [`ssm_scan_parallel`] evaluates
//! the same recurrence as a Blelloch scan over the affine maps
//! `h ↦ a⊙h + b`, whose composition `(a₂,b₂)∘(a₁,b₁) = (a₂a₁, a₂b₁ + b₂)`
//! is associative.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScanProblem {
    pub batch: usize,
    pub steps: usize,
    pub inner: usize,
    pub state: usize,
    pub abar: Vec<f64>,
    pub bbar: Vec<f64>,
    pub u: Vec<f64>,
    pub c: Vec<f64>,
    pub d_skip: Vec<f64>,
}

impl ScanProblem {
    pub fn validate(&self) -> Result<()> {
        let (d, l, e, m) = (self.batch, self.steps, self.inner, self.state);
        let ok = self.abar.len() == d * l * e * m
            && self.bbar.len() == d * l * e * m
            && self.u.len() == d * l * e
            && self.c.len() == d * l * m
            && self.d_skip.len() == e;
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "scan arrays inconsistent with D={d} L={l} E={e} M={m}"
            )))
        }
    }

    fn readout(&self, di: usize, j: usize, h: &[f64], y: &mut [f64]) {
        let (l, e, m) = (self.steps, self.inner, self.state);
        let c = &self.c[(di * l + j) * m..(di * l + j + 1) * m];
        let u = &self.u[(di * l + j) * e..(di * l + j + 1) * e];
        for ei in 0..e {
            let mut acc = 0.0;
            for mi in 0..m {
                acc += h[ei * m + mi] * c[mi];
            }
            y[ei] = acc + u[ei] * self.d_skip[ei];
        }
    }
}

/// Reference recurrence, one step at a time.
pub fn ssm_scan_sequential(p: &ScanProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let (d, l, e, m) = (p.batch, p.steps, p.inner, p.state);
    let mut y = vec![0.0; d * l * e];
    let mut h = vec![0.0; e * m];
    for di in 0..d {
        h.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..l {
            let base = (di * l + j) * e * m;
            let u = &p.u[(di * l + j) * e..(di * l + j + 1) * e];
            for ei in 0..e {
                for mi in 0..m {
                    let k = ei * m + mi;
                    h[k] = p.abar[base + k] * h[k] + p.bbar[base + k] * u[ei];
                }
            }
            p.readout(di, j, &h, &mut y[(di * l + j) * e..(di * l + j + 1) * e]);
        }
    }
    Ok(y)
}

/// Hidden states `[D][L][E][M]` from the reference recurrence.
pub fn ssm_hidden_states(p: &ScanProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let (d, l, e, m) = (p.batch, p.steps, p.inner, p.state);
    let mut hs = vec![0.0; d * l * e * m];
    for di in 0..d {
        for j in 0..l {
            let base = (di * l + j) * e * m;
            for ei in 0..e {
                let u = p.u[(di * l + j) * e + ei];
                for mi in 0..m {
                    let k = ei * m + mi;
                    let prev = if j == 0 { 0.0 } else { hs[base - e * m + k] };
                    hs[base + k] = p.abar[base + k] * prev + p.bbar[base + k] * u;
                }
            }
        }
    }
    Ok(hs)
}

/// Work-efficient Blelloch scan of the same recurrence.
pub fn ssm_scan_parallel(p: &ScanProblem) -> Result<Vec<f64>> {
    p.validate()?;
    let (d, l, e, m) = (p.batch, p.steps, p.inner, p.state);
    let width = l.next_power_of_two();
    let mut y = vec![0.0; d * l * e];
    let mut a = vec![1.0; width];
    let mut b = vec![0.0; width];
    let mut h_all = vec![0.0; l * e * m];
    for di in 0..d {
        for lane in 0..e * m {
            let ei = lane / m;
            a.iter_mut().for_each(|v| *v = 1.0);
            b.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..l {
                let k = (di * l + j) * e * m + lane;
                a[j] = p.abar[k];
                b[j] = p.bbar[k] * p.u[(di * l + j) * e + ei];
            }
            inclusive_affine_scan(&mut a, &mut b);
            // With h⁰ = 0 the composed map applied to zero is its offset.
            for j in 0..l {
                h_all[j * e * m + lane] = b[j];
            }
        }
        for j in 0..l {
            p.readout(
                di,
                j,
                &h_all[j * e * m..(j + 1) * e * m],
                &mut y[(di * l + j) * e..(di * l + j + 1) * e],
            );
        }
    }
    Ok(y)
}

/// In-place inclusive scan of affine maps `(a[j], b[j])`, earliest first.
/// `a.len()` must be a power of two; padding entries are identities.
fn inclusive_affine_scan(a: &mut [f64], b: &mut [f64]) {
    let n = a.len();
    debug_assert!(n.is_power_of_two());
    let (orig_a, orig_b) = (a.to_vec(), b.to_vec());

    // Up-sweep: node at i accumulates the composition of its subtree.
    let mut stride = 1;
    while stride < n {
        let mut i = 2 * stride - 1;
        while i < n {
            let (la, lb) = (a[i - stride], b[i - stride]);
            let (ra, rb) = (a[i], b[i]);
            a[i] = ra * la;
            b[i] = ra * lb + rb;
            i += 2 * stride;
        }
        stride *= 2;
    }

    // Down-sweep to an exclusive scan.
    a[n - 1] = 1.0;
    b[n - 1] = 0.0;
    let mut stride = n / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < n {
            let (la, lb) = (a[i - stride], b[i - stride]);
            let (pa, pb) = (a[i], b[i]);
            // left child gets the parent prefix; right child gets prefix then left subtree
            a[i - stride] = pa;
            b[i - stride] = pb;
            a[i] = la * pa;
            b[i] = la * pb + lb;
            i += 2 * stride;
        }
        stride /= 2;
    }

    // Exclusive → inclusive: apply each element's own map after its prefix.
    for j in 0..n {
        let (pa, pb) = (a[j], b[j]);
        a[j] = orig_a[j] * pa;
        b[j] = orig_a[j] * pb + orig_b[j];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_problem(rng: &mut ChaCha8Rng, d: usize, e: usize, m: usize, l: usize) -> ScanProblem {
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        ScanProblem {
            batch: d,
            steps: l,
            inner: e,
            state: m,
            abar: v(d * l * e * m, 0.01, 0.999),
            bbar: v(d * l * e * m, -1.0, 1.0),
            u: v(d * l * e, -2.0, 2.0),
            c: v(d * l * m, -1.0, 1.0),
            d_skip: v(e, -1.0, 1.0),
        }
    }

    #[test]
    fn single_step_unrolls() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_problem(&mut rng, 2, 3, 4, 1);
        let y = ssm_scan_sequential(&p).unwrap();
        for di in 0..2 {
            for ei in 0..3 {
                let u = p.u[di * 3 + ei];
                let mut want = 0.0;
                for mi in 0..4 {
                    want += p.c[di * 4 + mi] * p.bbar[(di * 3 + ei) * 4 + mi] * u;
                }
                want += p.d_skip[ei] * u;
                assert!((y[di * 3 + ei] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = random_problem(&mut rng, 2, 2, 3, 5);
        p.u.iter_mut().for_each(|v| *v = 0.0);
        assert!(ssm_scan_sequential(&p).unwrap().iter().all(|&v| v == 0.0));
        assert!(ssm_scan_parallel(&p).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parallel_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_problem(&mut rng, 3, 2, 4, 6);
        let s = ssm_scan_sequential(&p).unwrap();
        let q = ssm_scan_parallel(&p).unwrap();
        for (a, b) in s.iter().zip(&q) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn hidden_state_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = random_problem(&mut rng, 1, 2, 3, 64);
        // |B̄u| ≤ 2 and Ā ≤ 0.999 bound |h| by 2 / (1 - 0.999).
        p.abar.iter_mut().for_each(|v| *v = v.min(0.9));
        let hs = ssm_hidden_states(&p).unwrap();
        let bound = 2.0 / (1.0 - 0.9);
        assert!(hs.iter().all(|h| h.abs() <= bound));
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = random_problem(&mut rng, 1, 2, 2, 2);
        p.c.pop();
        assert!(ssm_scan_sequential(&p).is_err());
    }
}
