//! Acceptance criteria. Each test prints one `[PASS]`/`[FAIL]` line with the
//! measured value and the pinned tolerance, then asserts.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pfedseq::fedserver::matrix_column;
use pfedseq::harness::{
    final_test_accuracy, gradcheck, run_rows, test_curve, write_metrics, ExperimentConfig, GradcheckOptions, Method,
    ModelSection, RoundMetrics, Simulation,
};
use pfedseq::rng::stream_rng;
use pfedseq::seqlearner::{ssm_scan_parallel, ssm_scan_sequential, ScanProblem};
use rand::Rng as _;

const GRAD_TOL: f64 = 1e-5;
const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const SCAN_TOL: f64 = 1e-12;
const SCAN_INSTANCES: usize = 100;
const SCAN_BUDGET: Duration = Duration::from_secs(10);
const AGG_TOL: f64 = 1e-12;
const PROTOCOL_ROUNDS: usize = 30;
const PROTOCOL_BUDGET: Duration = Duration::from_secs(120);
const SEEDS: [u64; 3] = [0, 1, 2];
/// Accuracy points are percentages of 1.0.
const TREND_MARGIN: f64 = 0.01;
const ABLATION_SEED_MARGIN: f64 = -0.005;
const ABLATION_TIE: f64 = 0.005;

fn report(name: &str, pass: bool, detail: String) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn default_runs(method: Method) -> &'static [Vec<RoundMetrics>] {
    static CACHE: [OnceLock<Vec<Vec<RoundMetrics>>>; Method::ALL.len()] = [const { OnceLock::new() }; Method::ALL.len()];
    let idx = Method::ALL.iter().position(|&m| m == method).unwrap();
    CACHE[idx].get_or_init(|| {
        let base = ExperimentConfig {
            method,
            max_seq_len: if method == Method::VariantB { 1 } else { ExperimentConfig::default().max_seq_len },
            ..Default::default()
        };
        SEEDS.iter().map(|&s| run_rows(&base.with_seed(s)).unwrap().0).collect()
    })
}

fn finals(method: Method) -> Vec<f64> {
    default_runs(method).iter().map(|r| final_test_accuracy(r).unwrap()).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let rep = gradcheck(
        &[],
        &GradcheckOptions {
            instances: GRAD_INSTANCES,
            ..Default::default()
        },
    )
    .unwrap();
    let elapsed = start.elapsed();
    let worst = rep.suites.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    let pass = rep.pass && rep.suites.len() == 3 && rep.suites.iter().all(|s| s.instances >= GRAD_INSTANCES) && elapsed < GRAD_BUDGET;
    report(
        "gradient suite",
        pass,
        format!(
            "client/learner/surrogate x{GRAD_INSTANCES}, max rel err {worst:.2e} (tol {GRAD_TOL:e}), {:.1}s (budget {}s)",
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    );
    assert!(pass);
}

#[test]
fn scan_oracle() {
    let start = Instant::now();
    let mut rng = stream_rng(7, &[0x5ca9]);
    let mut worst = 0.0f64;
    for _ in 0..SCAN_INSTANCES {
        let (d, l, e, m) = (
            rng.random_range(1..=4),
            rng.random_range(1..=16),
            rng.random_range(1..=4),
            rng.random_range(1..=8),
        );
        let mut draw = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        let p = ScanProblem {
            batch: d,
            steps: l,
            inner: e,
            state: m,
            abar: draw(d * l * e * m, 0.0, 1.0),
            bbar: draw(d * l * e * m, -2.0, 2.0),
            u: draw(d * l * e, -2.0, 2.0),
            c: draw(d * l * m, -2.0, 2.0),
            d_skip: draw(e, -1.0, 1.0),
        };
        let seq = ssm_scan_sequential(&p).unwrap();
        let par = ssm_scan_parallel(&p).unwrap();
        worst = seq.iter().zip(&par).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    let elapsed = start.elapsed();
    let pass = worst <= SCAN_TOL && elapsed < SCAN_BUDGET;
    report(
        "scan oracle",
        pass,
        format!(
            "{SCAN_INSTANCES} instances, max abs diff {worst:.2e} (tol {SCAN_TOL:e}), {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

/// Small randomized setting for the protocol checks.
fn protocol_config(method: Method, seed: u64) -> ExperimentConfig {
    let mut rng = stream_rng(seed, &[0x9707]);
    let mut c = ExperimentConfig {
        method,
        rounds: PROTOCOL_ROUNDS,
        num_clients: rng.random_range(3..=5),
        warmup: rng.random_range(2..=6),
        max_seq_len: if method == Method::VariantB { 1 } else { rng.random_range(2..=6) },
        master_seed: seed,
        ..Default::default()
    };
    c.model = ModelSection {
        input_dim: 8,
        feature_dim: 16,
        rank: 2,
        num_classes: 4,
        num_adapter_blocks: 2,
    };
    c.data.samples_per_class = 60;
    c.learner.state_dim = 4;
    c
}

#[test]
fn protocol_invariants() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst_agg = 0.0f64;
    for seed in SEEDS {
        let cfg = protocol_config(Method::Pfedseq, seed);
        let mut sim = Simulation::new(&cfg).unwrap();
        let sizes: Vec<f64> = sim.clients.iter().map(|c| c.data.train.len() as f64).collect();
        let total: f64 = sizes.iter().sum();
        while !sim.is_done() {
            sim.step().unwrap();
            let t = sim.round();
            let s = sim.server.as_ref().unwrap();

            // hand-weighted oracle over the clients' updated adapters
            let tuned: Vec<Vec<Vec<f64>>> = sim
                .clients
                .iter()
                .map(|c| c.tuned.as_ref().unwrap().flatten_blocks())
                .collect();
            for (b, g) in s.global.iter().enumerate() {
                for (j, &gj) in g.iter().enumerate() {
                    let oracle: f64 = tuned.iter().zip(&sizes).map(|(th, n)| n * th[b][j]).sum::<f64>() / total;
                    worst_agg = worst_agg.max((gj - oracle).abs());
                }
            }

            if s.buffer.len() != t.min(cfg.max_seq_len) {
                failures.push(format!("seed {seed} t {t}: buffer length {}", s.buffer.len()));
            }
            for (i, p) in s.personalized.iter().enumerate() {
                if t <= cfg.warmup {
                    if p != &s.global {
                        failures.push(format!("seed {seed} t {t}: client {i} differs from global in warm-up"));
                    }
                } else {
                    let xi = s.last_calibration.as_ref().unwrap();
                    for (b, pb) in p.iter().enumerate() {
                        let col = matrix_column(&xi[b], i);
                        let sum: Vec<f64> = s.global[b].iter().zip(&col).map(|(g, x)| g + x).collect();
                        if pb != &sum {
                            failures.push(format!("seed {seed} t {t}: client {i} block {b} not global + xi"));
                        }
                    }
                }
            }
        }

        let (b_rows, _) = run_rows(&protocol_config(Method::VariantB, seed)).unwrap();
        let mut p1 = protocol_config(Method::Pfedseq, seed);
        p1.max_seq_len = 1;
        p1.num_clients = protocol_config(Method::VariantB, seed).num_clients;
        p1.warmup = protocol_config(Method::VariantB, seed).warmup;
        let (p_rows, _) = run_rows(&p1).unwrap();
        let same = b_rows.len() == p_rows.len()
            && b_rows.iter().zip(&p_rows).all(|(a, b)| {
                a.round == b.round
                    && a.client_id == b.client_id
                    && a.split == b.split
                    && a.loss.to_bits() == b.loss.to_bits()
                    && a.accuracy.to_bits() == b.accuracy.to_bits()
            });
        if !same {
            failures.push(format!("seed {seed}: variant B differs from pfedseq with L = 1"));
        }
    }
    let elapsed = start.elapsed();
    if worst_agg > AGG_TOL {
        failures.push(format!("aggregation error {worst_agg:.2e}"));
    }
    let pass = failures.is_empty() && elapsed < PROTOCOL_BUDGET;
    report(
        "protocol invariants",
        pass,
        format!(
            "{PROTOCOL_ROUNDS} rounds x {} seeds, aggregation err {worst_agg:.2e} (tol {AGG_TOL:e}), {} violations, {:.1}s",
            SEEDS.len(),
            failures.len(),
            elapsed.as_secs_f64()
        ),
    );
    for f in failures.iter().take(5) {
        println!("    {f}");
    }
    assert!(pass);
}

#[test]
fn determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    for method in Method::ALL {
        let mut cfg = protocol_config(method, 3);
        cfg.rounds = 12;
        let mut files = Vec::new();
        for (k, parallel) in [false, false, true, true].into_iter().enumerate() {
            cfg.parallel = parallel;
            let (rows, _) = run_rows(&cfg).unwrap();
            let path = dir.path().join(format!("{method}_{k}.csv"));
            write_metrics(&path, &cfg, &rows).unwrap();
            files.push((std::fs::read(&path).unwrap(), rows));
        }
        if files[0].0 != files[1].0 || files[2].0 != files[3].0 || files[0].1 != files[2].1 {
            mismatches.push(method.to_string());
        }
    }
    let pass = mismatches.is_empty();
    report(
        "determinism",
        pass,
        format!(
            "{} methods, serial and parallel reruns byte-identical; mismatches: {mismatches:?}",
            Method::ALL.len()
        ),
    );
    assert!(pass);
}

#[test]
fn trend() {
    let start = Instant::now();
    let p = finals(Method::Pfedseq);
    let f = finals(Method::Fedavg);
    let l = finals(Method::Local);
    let wins = (0..SEEDS.len()).filter(|&k| p[k] >= f[k] && p[k] >= l[k]).count();
    let margin = mean(&p) - mean(&f);
    let pass = wins == SEEDS.len() && margin >= TREND_MARGIN;
    report(
        "trend",
        pass,
        format!(
            "pfedseq {p:.4?} fedavg {f:.4?} local {l:.4?}; wins {wins}/{}, mean margin over fedavg {:+.2} pts (need >= {:.1}), {:.0}s",
            SEEDS.len(),
            100.0 * margin,
            100.0 * TREND_MARGIN,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn ablation() {
    let start = Instant::now();
    let p = finals(Method::Pfedseq);
    let b = finals(Method::VariantB);
    let a = finals(Method::VariantA);
    let c = finals(Method::VariantC);
    let b_margins: Vec<f64> = p.iter().zip(&b).map(|(x, y)| x - y).collect();
    let b_ok = b_margins.iter().all(|&m| m >= ABLATION_SEED_MARGIN) && mean(&b_margins) > 0.0;
    let a_ok = mean(&a) <= mean(&p) + ABLATION_TIE;
    let c_ok = mean(&c) <= mean(&p) + ABLATION_TIE;
    let pass = b_ok && a_ok && c_ok;
    report(
        "ablation",
        pass,
        format!(
            "pfedseq {:.4}, B {:.4} (per-seed margins {:+.4?}), A {:.4}, C {:.4}; ties within {:.1} pts allowed, {:.0}s",
            mean(&p),
            mean(&b),
            b_margins,
            mean(&a),
            mean(&c),
            100.0 * ABLATION_TIE,
            start.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn warmup_curve() {
    let w = ExperimentConfig::default().warmup;
    let mut ok = true;
    let mut detail = Vec::new();
    for (k, seed) in SEEDS.iter().enumerate() {
        let pc = test_curve(&default_runs(Method::Pfedseq)[k]);
        let fc = test_curve(&default_runs(Method::Fedavg)[k]);
        let equal = pc[..w] == fc[..w];
        let diverges = pc[w] != fc[w];
        ok &= equal && diverges;
        detail.push(format!("seed {seed}: equal through {w} = {equal}, diverges at {} = {diverges}", w + 1));
    }
    report("warm-up curve", ok, detail.join("; "));
    assert!(ok);
}
