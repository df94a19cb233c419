use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pfedseq"))
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "rounds = 5\nwarmup = 9\n").unwrap();
    assert_eq!(code(bin().arg("run").arg(&bad)), 1);
    assert_eq!(code(bin().arg("run").arg(dir.path().join("missing.toml"))), 3);
    assert_eq!(code(bin().args(["gradcheck", "--suite", "client", "--instances", "2"])), 0);
}

#[test]
fn gen_data_then_run_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("data.toml");
    std::fs::write(
        &spec,
        r#"num_clients = 3
label_skew = { kind = "dirichlet", alpha = 0.5 }

[spec]
num_classes = 3
input_dim = 6
samples_per_class = 40
class_mean_scale = 1.0
noise_std = 1.0
feature_skew = { kind = "none" }
master_seed = 4
"#,
    )
    .unwrap();
    let data = dir.path().join("data.bin");
    assert_eq!(code(bin().arg("gen-data").arg(&spec).arg(&data)), 0);

    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            r#"method = "fedavg"
rounds = 3
num_clients = 3
warmup = 1
max_seq_len = 2

[model]
input_dim = 6
feature_dim = 8
rank = 2
num_classes = 3
num_adapter_blocks = 1

[data]
file = "{}"

[output]
dir = "{}"
"#,
            data.display(),
            dir.path().join("runs").display()
        ),
    )
    .unwrap();
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_dir(dir.path().join("runs")).unwrap().count();
    assert_eq!(csv, 1);

    // a dataset whose shape disagrees with the model is a config error
    let wrong = std::fs::read_to_string(&cfg).unwrap().replace("num_classes = 3", "num_classes = 4");
    std::fs::write(&cfg, wrong).unwrap();
    assert_eq!(code(bin().arg("run").arg(&cfg)), 1);
}
