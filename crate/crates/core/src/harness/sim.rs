use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clientsim::{Adapter, ClientState, FrozenBackbone, Head};
use crate::error::{Error, Result};
use crate::fedserver::{run_round, Channel, ClientEval, ServerCheckpoint, ServerState};
use crate::harness::config::{dispatch_variant, ExperimentConfig};
use crate::synthdata::{build_federated_dataset, FederatedDataset};

pub const METRICS_HEADER: &str = "round,client_id,split,loss,accuracy,method,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub client_id: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub method: String,
    pub seed: u64,
}

/// Unweighted mean over clients of test accuracy in `round`.
pub fn mean_test_accuracy(rows: &[RoundMetrics], round: usize) -> Option<f64> {
    let accs: Vec<f64> = rows
        .iter()
        .filter(|r| r.round == round && r.split == Split::Test)
        .map(|r| r.accuracy)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Mean final-round test accuracy over clients: the headline number.
pub fn final_test_accuracy(rows: &[RoundMetrics]) -> Option<f64> {
    let last = rows.iter().map(|r| r.round).max()?;
    mean_test_accuracy(rows, last)
}

/// Per-round mean test accuracy, rounds ascending.
pub fn test_curve(rows: &[RoundMetrics]) -> Vec<(usize, f64)> {
    let last = rows.iter().map(|r| r.round).max().unwrap_or(0);
    (1..=last).filter_map(|t| mean_test_accuracy(rows, t).map(|a| (t, a))).collect()
}

/// Client-side state saved alongside the server for exact resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSnapshot {
    pub head: Head,
    pub adapter: Adapter,
    pub tuned: Option<Adapter>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationCheckpoint {
    pub config_toml: String,
    pub round: usize,
    pub server: Option<ServerCheckpoint>,
    pub clients: Vec<ClientSnapshot>,
    pub channel: Channel,
}

/// A running experiment; [`Simulation::step`] advances one round.
pub struct Simulation {
    pub config: ExperimentConfig,
    pub clients: Vec<ClientState>,
    pub server: Option<ServerState>,
    pub channel: Channel,
    /// Components instantiated, in construction order.
    pub construction_log: Vec<String>,
    round: usize,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let wiring = dispatch_variant(config)?;
        let mut log = Vec::new();
        let dataset = load_dataset(config)?;
        log.push(format!("dataset: {} clients", dataset.clients.len()));
        let dims = config.dims();
        let backbone = FrozenBackbone::new(&dims, config.master_seed);
        log.push(format!("backbone: {}", &backbone.fingerprint()[..12]));
        let initial = Adapter::init(&dims, config.master_seed);
        let clients = dataset
            .clients
            .into_iter()
            .map(|d| ClientState::new(d, &backbone, &dims, initial.clone(), config.master_seed))
            .collect::<Result<Vec<_>>>()?;
        log.push(format!("clients: {}", clients.len()));
        let server = match wiring.server {
            Some(sc) => {
                let s = ServerState::new(sc, dims, &initial, config.master_seed)?;
                log.push(format!("server: L={} W={}", s.config.max_seq_len, s.config.warmup));
                for (k, l) in s.learners.iter().enumerate() {
                    log.push(format!(
                        "learner[{k}]: {} with {} parameters",
                        crate::seqlearner::LearnerFingerprint::of(l).kind,
                        l.param_count()
                    ));
                }
                Some(s)
            }
            None => None,
        };
        Ok(Self {
            config: config.clone(),
            clients,
            server,
            channel: Channel::default(),
            construction_log: log,
            round: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.round >= self.config.rounds
    }

    /// Runs the next round and returns its metric rows.
    pub fn step(&mut self) -> Result<Vec<RoundMetrics>> {
        if self.is_done() {
            return Err(Error::State(format!("all {} rounds already ran", self.config.rounds)));
        }
        let local = self.config.local_train();
        let evals = match &mut self.server {
            Some(server) => run_round(server, &mut self.clients, &local, &mut self.channel, self.config.parallel)?,
            None => local_round(&mut self.clients, self.round + 1, &local, self.config.parallel)?,
        };
        self.round += 1;
        Ok(self.rows(&evals))
    }

    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        let mut rows = Vec::new();
        while !self.is_done() {
            rows.extend(self.step()?);
        }
        Ok(rows)
    }

    fn rows(&self, evals: &[ClientEval]) -> Vec<RoundMetrics> {
        let method = self.config.method.name().to_string();
        evals
            .iter()
            .flat_map(|e| {
                [(Split::Train, e.train), (Split::Test, e.test)].map(|(split, r)| RoundMetrics {
                    round: self.round,
                    client_id: e.client_id,
                    split,
                    loss: r.loss,
                    accuracy: r.accuracy,
                    method: method.clone(),
                    seed: self.config.master_seed,
                })
            })
            .collect()
    }

    pub fn checkpoint(&self) -> Result<SimulationCheckpoint> {
        Ok(SimulationCheckpoint {
            config_toml: self.config.to_toml()?,
            round: self.round,
            server: self.server.as_ref().map(ServerCheckpoint::save).transpose()?,
            clients: self
                .clients
                .iter()
                .map(|c| ClientSnapshot {
                    head: c.head.clone(),
                    adapter: c.adapter.clone(),
                    tuned: c.tuned.clone(),
                })
                .collect(),
            channel: self.channel.clone(),
        })
    }

    /// Rebuilds a simulation from its config and continues from `ck`.
    pub fn resume(ck: SimulationCheckpoint) -> Result<Self> {
        let config = ExperimentConfig::from_toml(&ck.config_toml)?;
        let mut sim = Self::new(&config)?;
        if ck.clients.len() != sim.clients.len() {
            return Err(Error::State("checkpoint client count differs from config".into()));
        }
        for (c, s) in sim.clients.iter_mut().zip(ck.clients) {
            c.head = s.head;
            c.adapter = s.adapter;
            c.tuned = s.tuned;
        }
        sim.server = match (sim.server.take(), ck.server) {
            (Some(fresh), Some(saved)) => Some(saved.restore(&fresh.config, &fresh.dims)?),
            (None, None) => None,
            _ => return Err(Error::State("checkpoint and config disagree on the server".into())),
        };
        sim.channel = ck.channel;
        sim.round = ck.round;
        Ok(sim)
    }
}

fn load_dataset(config: &ExperimentConfig) -> Result<FederatedDataset> {
    let ds = match &config.data.file {
        Some(path) => FederatedDataset::read(path)?,
        None => build_federated_dataset(&config.data_config())?,
    };
    if ds.clients.len() != config.num_clients
        || ds.num_classes != config.model.num_classes
        || ds.input_dim != config.model.input_dim
    {
        return Err(Error::config(
            "data.file",
            "dataset shape does not match num_clients / model.num_classes / model.input_dim",
        ));
    }
    Ok(ds)
}

/// Local baseline: every client continues from its own tuned adapter and
/// nothing is exchanged.
fn local_round(
    clients: &mut [ClientState],
    round: usize,
    cfg: &crate::clientsim::LocalTrainConfig,
    parallel: bool,
) -> Result<Vec<ClientEval>> {
    let saved = clients.to_vec();
    let step = |c: &mut ClientState| -> Result<ClientEval> {
        if let Some(t) = c.tuned.take() {
            c.adapter = t;
        }
        c.local_round(round, cfg)?;
        let tuned = c.tuned.clone().expect("local_round sets the tuned adapter");
        Ok(ClientEval {
            client_id: c.client_id,
            train: c.evaluate_train(&tuned)?,
            test: c.evaluate_test(&tuned)?,
        })
    };
    let result = if parallel {
        clients.par_iter_mut().map(step).collect::<Result<Vec<_>>>()
    } else {
        clients.iter_mut().map(step).collect::<Result<Vec<_>>>()
    };
    if result.is_err() {
        clients.clone_from_slice(&saved);
    }
    result
}

/// Writes the metrics CSV with the config embedded as `#` comment lines.
pub fn write_metrics(path: &Path, config: &ExperimentConfig, rows: &[RoundMetrics]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "# pfedseq metrics; config follows")?;
    for line in config.to_toml()?.lines() {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a metrics CSV, checking the header.
pub fn read_metrics(path: &Path) -> Result<(ExperimentConfig, Vec<RoundMetrics>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut toml_text = String::new();
    let mut body = String::new();
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if !rest.starts_with(" pfedseq metrics") {
                toml_text.push_str(rest.strip_prefix(' ').unwrap_or(rest));
                toml_text.push('\n');
            }
        } else {
            body.push_str(line);
            body.push('\n');
        }
    }
    if body.lines().next() != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{}: unexpected metrics header", path.display())));
    }
    let config = ExperimentConfig::from_toml(&toml_text)?;
    let rows = csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<RoundMetrics>, _>>()
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((config, rows))
}

/// Metrics file name for a config: `<label>_seed<seed>.csv` under the output dir.
pub fn metrics_path(config: &ExperimentConfig) -> PathBuf {
    config
        .output
        .dir
        .join(format!("{}_seed{}.csv", config.label(), config.master_seed))
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics_path: PathBuf,
    pub rows: Vec<RoundMetrics>,
    pub final_test_accuracy: f64,
    pub construction_log: Vec<String>,
    pub messages: usize,
}

/// Runs all rounds in memory.
pub fn run_rows(config: &ExperimentConfig) -> Result<(Vec<RoundMetrics>, Simulation)> {
    let mut sim = Simulation::new(config)?;
    let rows = sim.run()?;
    Ok((rows, sim))
}

/// Runs the experiment and writes its metrics CSV.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput> {
    let (rows, sim) = run_rows(config)?;
    let path = metrics_path(config);
    write_metrics(&path, config, &rows)?;
    Ok(RunOutput {
        metrics_path: path,
        final_test_accuracy: final_test_accuracy(&rows).unwrap_or(f64::NAN),
        rows,
        construction_log: sim.construction_log,
        messages: sim.channel.messages,
    })
}

/// Whether a method builds a learner, as recorded in the construction log.
pub fn log_has_learner(log: &[String]) -> bool {
    log.iter().any(|l| l.starts_with("learner"))
}
