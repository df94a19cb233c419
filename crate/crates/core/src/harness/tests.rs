use super::*;
use crate::error::Error;
use crate::numerics::Fault;
use crate::synthdata::LabelSkew;

fn tiny(method: Method) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        method,
        rounds: 5,
        num_clients: 3,
        warmup: 2,
        max_seq_len: if method == Method::VariantB { 1 } else { 3 },
        parallel: false,
        ..Default::default()
    };
    c.model = ModelSection {
        input_dim: 6,
        feature_dim: 8,
        rank: 2,
        num_classes: 3,
        num_adapter_blocks: 1,
    };
    c.data.samples_per_class = 40;
    c.learner.state_dim = 4;
    c.learner.mlp_hidden = vec![8];
    c
}

#[test]
fn config_round_trips_through_toml() {
    for m in Method::ALL {
        let mut c = tiny(m);
        c.name = Some("x".into());
        c.seeds = vec![1, 2];
        c.data.label_skew = LabelSkew::Iid;
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }
    let d = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&d.to_toml().unwrap()).unwrap(), d);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), d);
}

#[test]
fn invalid_configs_name_the_field() {
    let field = |text: &str| match ExperimentConfig::from_toml(text) {
        Err(Error::Config { field, .. }) => field,
        other => panic!("expected config error, got {other:?}"),
    };
    assert_eq!(field("method = \"variant_b\"\nmax_seq_len = 5"), "max_seq_len");
    assert_eq!(field("rounds = 10\nwarmup = 10"), "warmup");
    assert_eq!(field("[local]\nlr = -1.0"), "local.lr");
    assert_eq!(field("bogus = 1"), "bogus");
    assert!(ExperimentConfig::from_toml("method = \"variant_b\"\nmax_seq_len = 1").is_ok());
}

#[test]
fn dispatch_builds_expected_components() {
    for m in Method::ALL {
        let sim = Simulation::new(&tiny(m)).unwrap();
        assert_eq!(log_has_learner(&sim.construction_log), m.uses_learner(), "{m}");
        assert_eq!(sim.server.is_some(), m != Method::Local);
    }
    let w = dispatch_variant(&tiny(Method::VariantA)).unwrap();
    assert_eq!(
        w.server.unwrap().personalization,
        crate::fedserver::Personalization::Direct
    );
}

#[test]
fn local_never_sends_messages() {
    let (rows, sim) = run_rows(&tiny(Method::Local)).unwrap();
    assert_eq!(sim.channel.messages, 0);
    assert_eq!(rows.len(), 5 * 3 * 2);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

#[test]
fn fedavg_broadcasts_the_global_adapter() {
    let mut sim = Simulation::new(&tiny(Method::Fedavg)).unwrap();
    while !sim.is_done() {
        sim.step().unwrap();
        let s = sim.server.as_ref().unwrap();
        assert!(s.personalized.iter().all(|p| p == &s.global));
    }
    // 3 broadcasts and 3 updates per round
    assert_eq!(sim.channel.messages, 5 * 6);
}

#[test]
fn reruns_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Method::Pfedseq);
    c.output.dir = dir.path().join("a");
    let a = run_experiment(&c).unwrap();
    c.output.dir = dir.path().join("b");
    c.parallel = true;
    let b = run_experiment(&c).unwrap();
    let fa = std::fs::read_to_string(&a.metrics_path).unwrap();
    let fb = std::fs::read_to_string(&b.metrics_path).unwrap();
    // the embedded configs differ only in output dir and the parallel flag
    let strip = |s: &str| s.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&fa), strip(&fb));
    assert!(fa.lines().any(|l| l == METRICS_HEADER));

    let (cfg, rows) = read_metrics(&a.metrics_path).unwrap();
    assert_eq!(cfg.output.dir, dir.path().join("a"));
    assert_eq!(rows, a.rows);
}

#[test]
fn compare_against_itself() {
    let c = tiny(Method::Fedavg);
    let cmp = compare(&[c.clone(), c.clone()], false).unwrap();
    assert_eq!(cmp.summary[0], cmp.summary[1]);
    assert_eq!(cmp.summary[0].std_final_accuracy, 0.0);
    assert_eq!(cmp.curves.len(), 2 * 5);

    let mut other = c.clone();
    other.data.noise_std = 2.0;
    assert!(matches!(compare(&[c.clone(), other], false), Err(Error::Comparison(_))));
    let mut seeds = c.clone();
    seeds.seeds = vec![4, 5];
    assert!(matches!(compare(&[c, seeds], false), Err(Error::Comparison(_))));
}

#[test]
fn sample_std_uses_n_minus_one() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
    assert_eq!(m, 2.0);
    assert!((s - 1.0).abs() < 1e-15);
}

#[test]
fn sweeps_label_each_config() {
    let base = tiny(Method::Pfedseq);
    let cfgs = sweep_seq_len(&base, &[1, 3]);
    assert_eq!(cfgs[1].max_seq_len, 3);
    assert_eq!(cfgs[0].label(), "pfedseq_L1");
    assert_eq!(sweep_warmup(&base, &[0, 4])[1].warmup, 4);
}

#[test]
fn gradcheck_passes_and_catches_faults() {
    let opts = GradcheckOptions {
        instances: 3,
        ..Default::default()
    };
    let report = gradcheck(&[], &opts).unwrap();
    assert!(report.pass, "{report:?}");
    assert_eq!(report.suites.len(), 3);
    let json = serde_json::to_value(&report).unwrap();
    for s in json["suites"].as_array().unwrap() {
        assert!(s["max_rel_err"].is_number());
    }

    let bad = gradcheck(
        &[Suite::Learner],
        &GradcheckOptions {
            fault: Some(Fault::SiluDerivative),
            ..opts
        },
    )
    .unwrap();
    assert!(!bad.pass);
}
