use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clientsim::{LocalTrainConfig, ModelDims};
use crate::error::{Error, Result};
use crate::fedserver::{Personalization, ServerConfig, UpdateSign};
use crate::seqlearner::{LearnerSpec, MlpConfig, ScanMode, SsmConfig};
use crate::synthdata::{DataConfig, DatasetSpec, FeatureSkew, LabelSkew, DEFAULT_TRAIN_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Pfedseq,
    Fedavg,
    Local,
    /// Personalized adapters are the calibrations themselves.
    VariantA,
    /// Sequence length fixed to one round.
    VariantB,
    /// One width-1 learner per client.
    VariantC,
    /// Feed-forward learner over the flattened window.
    MlpLearner,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Pfedseq,
        Method::Fedavg,
        Method::Local,
        Method::VariantA,
        Method::VariantB,
        Method::VariantC,
        Method::MlpLearner,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pfedseq => "pfedseq",
            Method::Fedavg => "fedavg",
            Method::Local => "local",
            Method::VariantA => "variant_a",
            Method::VariantB => "variant_b",
            Method::VariantC => "variant_c",
            Method::MlpLearner => "mlp_learner",
        }
    }

    pub fn uses_learner(self) -> bool {
        !matches!(self, Method::Fedavg | Method::Local)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LocalSection {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 1,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerSection {
    pub lr: f64,
    pub expand: usize,
    pub state_dim: usize,
    pub conv_kernel: usize,
    pub num_blocks: usize,
    pub zero_bias: bool,
    pub norm_eps: f64,
    /// Initial output gain (SSM) or output-layer scale (MLP).
    pub out_gain_init: f64,
    /// Scale of each SSM block's initial output projection.
    pub out_proj_scale: f64,
    pub scan_mode: ScanMode,
    pub update_sign: UpdateSign,
    pub mlp_hidden: Vec<usize>,
}

impl Default for LearnerSection {
    fn default() -> Self {
        Self {
            lr: 0.001,
            expand: 2,
            state_dim: 16,
            conv_kernel: 4,
            num_blocks: 2,
            zero_bias: true,
            norm_eps: 1e-4,
            out_gain_init: 0.01,
            out_proj_scale: 0.0,
            scan_mode: ScanMode::Sequential,
            update_sign: UpdateSign::Descent,
            mlp_hidden: vec![64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub rank: usize,
    pub num_classes: usize,
    pub num_adapter_blocks: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            input_dim: 32,
            feature_dim: 64,
            rank: 4,
            num_classes: 8,
            num_adapter_blocks: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub samples_per_class: usize,
    pub class_mean_scale: f64,
    pub noise_std: f64,
    pub label_skew: LabelSkew,
    pub feature_skew: FeatureSkew,
    pub train_fraction: f64,
    /// Pre-generated dataset; generated from the fields above when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            samples_per_class: 400,
            class_mean_scale: 1.0,
            noise_std: 4.0,
            label_skew: LabelSkew::Dirichlet { alpha: 0.1 },
            feature_skew: FeatureSkew::None,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

/// A complete experiment. Every field has a default, so a config file only
/// needs the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Label for outputs; defaults to the method name.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub method: Method,
    pub rounds: usize,
    pub num_clients: usize,
    pub warmup: usize,
    pub max_seq_len: usize,
    pub master_seed: u64,
    /// Seed set used by `compare`; empty means `[master_seed]`.
    pub seeds: Vec<u64>,
    /// Train clients on the rayon pool.
    pub parallel: bool,
    pub local: LocalSection,
    pub learner: LearnerSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: None,
            method: Method::Pfedseq,
            rounds: 60,
            num_clients: 8,
            warmup: 10,
            max_seq_len: 10,
            master_seed: 0,
            seeds: Vec::new(),
            parallel: true,
            local: LocalSection::default(),
            learner: LearnerSection::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            output: OutputSection::default(),
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::config(field, "must be >= 1"))
    } else {
        Ok(())
    }
}

fn positive_f(field: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::config(field, "must be a positive finite number"))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("<config>")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn seed_set(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.master_seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            master_seed: seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        positive("rounds", self.rounds)?;
        positive("num_clients", self.num_clients)?;
        positive("max_seq_len", self.max_seq_len)?;
        if self.warmup >= self.rounds {
            return Err(Error::config("warmup", "must be smaller than rounds"));
        }
        if self.method == Method::VariantB && self.max_seq_len != 1 {
            return Err(Error::config("max_seq_len", "variant_b requires max_seq_len = 1"));
        }
        positive_f("local.lr", self.local.lr)?;
        positive("local.batch_size", self.local.batch_size)?;
        positive_f("learner.lr", self.learner.lr)?;
        positive("learner.expand", self.learner.expand)?;
        positive("learner.state_dim", self.learner.state_dim)?;
        positive("learner.conv_kernel", self.learner.conv_kernel)?;
        positive("learner.num_blocks", self.learner.num_blocks)?;
        positive_f("learner.norm_eps", self.learner.norm_eps)?;
        if !self.learner.out_gain_init.is_finite() {
            return Err(Error::config("learner.out_gain_init", "must be finite"));
        }
        if !(self.learner.out_proj_scale >= 0.0 && self.learner.out_proj_scale.is_finite()) {
            return Err(Error::config("learner.out_proj_scale", "must be finite and >= 0"));
        }
        if self.learner.mlp_hidden.contains(&0) {
            return Err(Error::config("learner.mlp_hidden", "layer sizes must be >= 1"));
        }
        positive("model.input_dim", self.model.input_dim)?;
        positive("model.feature_dim", self.model.feature_dim)?;
        positive("model.rank", self.model.rank)?;
        positive("model.num_adapter_blocks", self.model.num_adapter_blocks)?;
        if self.model.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be >= 2"));
        }
        if let LabelSkew::Dirichlet { alpha } = self.data.label_skew {
            positive_f("data.label_skew.alpha", alpha)?;
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::config("data.train_fraction", "must lie in (0, 1)"));
        }
        self.data_config().spec.validate()?;
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.model.input_dim,
            feature_dim: self.model.feature_dim,
            rank: self.model.rank,
            num_classes: self.model.num_classes,
            num_adapter_blocks: self.model.num_adapter_blocks,
        }
    }

    pub fn local_train(&self) -> LocalTrainConfig {
        LocalTrainConfig {
            epochs: self.local.epochs,
            lr: self.local.lr,
            batch_size: self.local.batch_size,
        }
    }

    pub fn data_config(&self) -> DataConfig {
        DataConfig {
            spec: DatasetSpec {
                num_classes: self.model.num_classes,
                input_dim: self.model.input_dim,
                samples_per_class: self.data.samples_per_class,
                class_mean_scale: self.data.class_mean_scale,
                noise_std: self.data.noise_std,
                feature_skew: self.data.feature_skew,
                master_seed: self.master_seed,
            },
            num_clients: self.num_clients,
            label_skew: self.data.label_skew,
            train_fraction: self.data.train_fraction,
        }
    }

    fn ssm_config(&self, width: usize) -> SsmConfig {
        let l = &self.learner;
        SsmConfig {
            width,
            expand: l.expand,
            state_dim: l.state_dim,
            conv_kernel: l.conv_kernel,
            num_blocks: l.num_blocks,
            zero_bias: l.zero_bias,
            norm_eps: l.norm_eps,
            out_gain_init: l.out_gain_init,
            out_proj_scale: l.out_proj_scale,
            scan_mode: l.scan_mode,
        }
    }
}

/// What a method instantiates.
#[derive(Debug, Clone, PartialEq)]
pub struct Wiring {
    /// `None` for the local baseline: no server, no messages.
    pub server: Option<ServerConfig>,
}

/// Maps a method onto server and learner settings.
pub fn dispatch_variant(cfg: &ExperimentConfig) -> Result<Wiring> {
    cfg.validate()?;
    let n = cfg.num_clients;
    let learner = match cfg.method {
        Method::Local => return Ok(Wiring { server: None }),
        Method::Fedavg => None,
        Method::Pfedseq | Method::VariantA | Method::VariantB => Some(LearnerSpec::Ssm(cfg.ssm_config(n))),
        Method::VariantC => Some(LearnerSpec::PerClient {
            config: cfg.ssm_config(1),
            clients: n,
        }),
        Method::MlpLearner => Some(LearnerSpec::Mlp(MlpConfig {
            width: n,
            window: cfg.max_seq_len,
            hidden: cfg.learner.mlp_hidden.clone(),
            out_init_scale: cfg.learner.out_gain_init,
        })),
    };
    let personalization = if cfg.method == Method::VariantA {
        Personalization::Direct
    } else {
        Personalization::Additive
    };
    Ok(Wiring {
        server: Some(ServerConfig {
            num_clients: n,
            warmup: cfg.warmup,
            max_seq_len: cfg.max_seq_len,
            learner_lr: cfg.learner.lr,
            personalization,
            update_sign: cfg.learner.update_sign,
            learner,
        }),
    })
}
