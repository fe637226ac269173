//! Experiment configuration: a TOML file read as flat dotted keys.
//!
//! Nested tables and dotted keys are equivalent (`[loss]\ntau = 0.05` and
//! `"loss.tau" = 0.05` set the same field). Unknown keys are rejected.
//! Relative paths are resolved against the config file's directory.

use crate::corpus::{load_corpus, load_sts_pairs, synth_sts, CorpusConfig, StsPair, SynthConfig, TokenSequence};
use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trainer::{NoiseMode, TrainConfig, TrainObjective};
use std::path::{Path, PathBuf};

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "CLLAB_SEED";
pub const DEFAULT_SEED: u64 = 42;

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "$CLLAB_SEED or 42", "training seed (init, shuffling, dropout)"),
    ("output_dir", "\"out\"", "directory for all artifacts"),
    ("objective", "\"info_nce\"", "info_nce | off_info | dcl_only | bt | combined"),
    ("lr", "3e-5", "Adam learning rate"),
    ("batch_size", "64", "sentences per update"),
    ("epochs", "1", "passes over the corpus"),
    ("eval_interval", "125", "update steps between dev evaluations"),
    ("eval_pre_mlp", "true", "evaluate at the pooling output instead of the head"),
    ("bt_pad_rows", "0", "Gaussian rows appended per batch for objective bt"),
    ("loss.tau", "0.05", "InfoNCE temperature"),
    ("loss.m", "0.9", "weight of the dropout-off negatives"),
    ("loss.tau_dcl", "5.0", "DCL temperature"),
    ("loss.lambda_dcl", "0.1", "weight of the auxiliary (DCL or Barlow Twins) term"),
    ("loss.lambda_bt", "0.005", "Barlow Twins off-diagonal weight"),
    ("model.embed_dim", "64", "token embedding width E"),
    ("model.hidden_dim", "128", "hidden width H"),
    ("model.out_dim", "64", "output width D"),
    ("model.p_keep", "0.9", "dropout keep probability"),
    ("model.activation", "\"tanh\"", "tanh | identity"),
    ("corpus.vocab_size", "30000", "hash buckets of the tokenizer"),
    ("corpus.max_seq_len", "32", "tokens kept per sentence"),
    ("corpus.lowercase", "true", "lowercase before hashing"),
    ("data.source", "\"synth\"", "synth | files"),
    ("data.corpus", "none", "training sentences, one per line (files)"),
    ("data.dev", "none", "dev pairs, left<TAB>right<TAB>gold (files)"),
    ("data.test", "none", "test pairs, same format (files)"),
    ("synth.seed", "7", "generator seed, independent of the training seed"),
    ("synth.n_train_sentences", "8192", "training sentences"),
    ("synth.n_eval_pairs", "2000", "pairs in each of dev and test"),
    ("synth.latent_dim", "16", "planted latent dimension"),
    ("synth.n_words", "2000", "content words"),
    ("synth.n_filler_words", "5", "topic-free filler words"),
    ("synth.filler_prob", "0.6", "probability a token is filler"),
    ("synth.sharpness", "4.0", "inverse temperature of word choice"),
    ("synth.min_len", "16", "shortest sentence"),
    ("synth.max_len", "32", "longest sentence"),
    ("noise.pos", "\"none\"", "positive views: none | plus | mean"),
    ("noise.neg", "\"none\"", "negative views: none | plus | mean"),
    ("noise.variance", "0.1", "Gaussian variance for plus"),
    ("noise.k", "10", "forwards averaged for mean"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth { seed: u64, config: SynthConfig },
    Files { corpus: PathBuf, dev: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub data: DataSource,
    pub train: TrainConfig,
}

pub struct Dataset {
    pub corpus: Vec<TokenSequence>,
    pub dev: Vec<StsPair>,
    pub test: Vec<StsPair>,
}

/// Raw key state before validation; file paths and noise pieces are kept
/// separately until every key is known.
#[derive(Debug, Clone)]
struct Builder {
    base_dir: PathBuf,
    seed: Option<u64>,
    output_dir: PathBuf,
    corpus: CorpusConfig,
    source: String,
    files: [Option<PathBuf>; 3],
    synth_seed: u64,
    synth: SynthConfig,
    train: TrainConfig,
    noise_pos: String,
    noise_neg: String,
    noise_variance: f64,
    noise_k: usize,
}

fn key_error(key: &str, expected: &str, value: &toml::Value) -> Error {
    Error::Config(format!("{key}: expected {expected}, got {value}"))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => Err(key_error(key, "a number", v)),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(key_error(key, "a non-negative integer", v)),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        // seeds beyond i64 range may be quoted
        toml::Value::String(s) => s.parse().map_err(|_| key_error(key, "an unsigned integer", v)),
        _ => Err(key_error(key, "an unsigned integer", v)),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| key_error(key, "true or false", v))
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str().ok_or_else(|| key_error(key, "a string", v))
}

impl Builder {
    fn new(base_dir: PathBuf) -> Self {
        Self {
            base_dir,
            seed: None,
            output_dir: PathBuf::from("out"),
            corpus: CorpusConfig::default(),
            source: "synth".into(),
            files: [None, None, None],
            synth_seed: 7,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            noise_pos: "none".into(),
            noise_neg: "none".into(),
            noise_variance: 0.1,
            noise_k: 10,
        }
    }

    fn path(&self, key: &str, v: &toml::Value) -> Result<PathBuf> {
        let p = Path::new(as_str(key, v)?);
        Ok(if p.is_absolute() { p.to_path_buf() } else { self.base_dir.join(p) })
    }

    fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = Some(as_u64(key, v)?),
            "output_dir" => self.output_dir = self.path(key, v)?,
            "objective" => {
                let name = as_str(key, v)?;
                t.objective = TrainObjective::parse(name).ok_or_else(|| {
                    Error::Config(format!(
                        "objective: unknown value {name:?} (expected info_nce, off_info, dcl_only, bt or combined)"
                    ))
                })?
            }
            "lr" => t.lr = as_f64(key, v)?,
            "batch_size" => t.batch_size = as_usize(key, v)?,
            "epochs" => t.epochs = as_usize(key, v)?,
            "eval_interval" => t.eval_interval = as_usize(key, v)?,
            "eval_pre_mlp" => t.eval_pre_mlp = as_bool(key, v)?,
            "bt_pad_rows" => t.bt_pad_rows = as_usize(key, v)?,
            "loss.tau" => t.loss.tau = as_f64(key, v)?,
            "loss.m" => t.loss.m = as_f64(key, v)?,
            "loss.tau_dcl" => t.loss.tau_dcl = as_f64(key, v)?,
            "loss.lambda_dcl" => t.loss.lambda_dcl = as_f64(key, v)?,
            "loss.lambda_bt" => t.loss.lambda_bt = as_f64(key, v)?,
            "model.embed_dim" => t.encoder.embed_dim = as_usize(key, v)?,
            "model.hidden_dim" => t.encoder.hidden_dim = as_usize(key, v)?,
            "model.out_dim" => t.encoder.out_dim = as_usize(key, v)?,
            "model.p_keep" => t.encoder.p_keep = as_f64(key, v)?,
            "model.activation" => {
                t.encoder.activation = match as_str(key, v)? {
                    "tanh" => Activation::Tanh,
                    "identity" => Activation::Identity,
                    other => {
                        return Err(Error::Config(format!(
                            "model.activation: unknown value {other:?} (expected tanh or identity)"
                        )))
                    }
                }
            }
            "corpus.vocab_size" => self.corpus.vocab_size = as_usize(key, v)?,
            "corpus.max_seq_len" => self.corpus.max_seq_len = as_usize(key, v)?,
            "corpus.lowercase" => self.corpus.lowercase = as_bool(key, v)?,
            "data.source" => self.source = as_str(key, v)?.to_string(),
            "data.corpus" => self.files[0] = Some(self.path(key, v)?),
            "data.dev" => self.files[1] = Some(self.path(key, v)?),
            "data.test" => self.files[2] = Some(self.path(key, v)?),
            "synth.seed" => self.synth_seed = as_u64(key, v)?,
            "synth.n_train_sentences" => self.synth.n_train_sentences = as_usize(key, v)?,
            "synth.n_eval_pairs" => self.synth.n_eval_pairs = as_usize(key, v)?,
            "synth.latent_dim" => self.synth.latent_dim = as_usize(key, v)?,
            "synth.n_words" => self.synth.n_words = as_usize(key, v)?,
            "synth.n_filler_words" => self.synth.n_filler_words = as_usize(key, v)?,
            "synth.filler_prob" => self.synth.filler_prob = as_f64(key, v)?,
            "synth.sharpness" => self.synth.sharpness = as_f64(key, v)?,
            "synth.min_len" => self.synth.min_len = as_usize(key, v)?,
            "synth.max_len" => self.synth.max_len = as_usize(key, v)?,
            "noise.pos" => self.noise_pos = as_str(key, v)?.to_string(),
            "noise.neg" => self.noise_neg = as_str(key, v)?.to_string(),
            "noise.variance" => self.noise_variance = as_f64(key, v)?,
            "noise.k" => self.noise_k = as_usize(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    fn noise(&self, key: &str, mode: &str) -> Result<NoiseMode> {
        match mode {
            "none" => Ok(NoiseMode::None),
            "plus" => Ok(NoiseMode::PlusNoise { variance: self.noise_variance }),
            "mean" => Ok(NoiseMode::MeanSampled { k: self.noise_k }),
            other => Err(Error::Config(format!("{key}: unknown value {other:?} (expected none, plus or mean)"))),
        }
    }

    fn build(mut self, env_seed: Option<&str>) -> Result<ExperimentConfig> {
        self.train.seed = match (self.seed, env_seed) {
            (Some(s), _) => s,
            (None, Some(s)) => s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: expected an unsigned integer, got {s:?}")))?,
            (None, None) => DEFAULT_SEED,
        };
        self.train.pos_noise = self.noise("noise.pos", &self.noise_pos)?;
        self.train.neg_noise = self.noise("noise.neg", &self.noise_neg)?;
        self.train.encoder.vocab_size = self.corpus.vocab_size;
        self.corpus.validate()?;
        self.train.validate()?;
        let data = match self.source.as_str() {
            "synth" => {
                self.synth.validate()?;
                DataSource::Synth { seed: self.synth_seed, config: self.synth }
            }
            "files" => {
                let names = ["data.corpus", "data.dev", "data.test"];
                let mut paths = Vec::new();
                for (name, p) in names.iter().zip(self.files) {
                    paths.push(p.ok_or_else(|| Error::Config(format!("{name}: required when data.source = \"files\"")))?);
                }
                let [corpus, dev, test]: [PathBuf; 3] = paths.try_into().expect("three paths");
                DataSource::Files { corpus, dev, test }
            }
            other => return Err(Error::Config(format!("data.source: unknown value {other:?} (expected synth or files)"))),
        };
        Ok(ExperimentConfig {
            output_dir: self.output_dir,
            corpus: self.corpus,
            data,
            train: self.train,
        })
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parse the right-hand side of `--set key=value` as a TOML value; bare
/// words that are not valid TOML are taken as strings.
fn parse_override(text: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {text:?} is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

impl ExperimentConfig {
    /// Load `path` (or defaults when `None`), apply overrides in order, and
    /// validate. `env_seed` is the value of [`SEED_ENV`], if set.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut entries = Vec::new();
        let base_dir = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                let table: toml::Table = toml::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?;
                flatten("", &table, &mut entries);
                p.parent().map(Path::to_path_buf).unwrap_or_default()
            }
            None => PathBuf::new(),
        };
        let mut builder = Builder::new(base_dir);
        for (k, v) in &entries {
            builder.set(k, v)?;
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            builder.set(&k, &v)?;
        }
        builder.build(env_seed)
    }

    /// Like [`ExperimentConfig::load`] with the seed fallback read from the
    /// process environment.
    pub fn load_with_env(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env = std::env::var(SEED_ENV).ok();
        Self::load(path, overrides, env.as_deref())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Synth { seed, config } => {
                let d = synth_sts(&Rng::new(*seed), config, &self.corpus)?;
                Ok(Dataset { corpus: d.corpus, dev: d.dev, test: d.test })
            }
            DataSource::Files { corpus, dev, test } => Ok(Dataset {
                corpus: load_corpus(corpus, &self.corpus)?,
                dev: load_sts_pairs(dev, &self.corpus)?,
                test: load_sts_pairs(test, &self.corpus)?,
            }),
        }
    }

    /// Resolved settings as a JSON object, for echoing into reports.
    pub fn echo(&self) -> serde_json::Value {
        let data = match &self.data {
            DataSource::Synth { seed, config } => serde_json::json!({"source": "synth", "seed": seed, "synth": config}),
            DataSource::Files { corpus, dev, test } => serde_json::json!({
                "source": "files", "corpus": corpus, "dev": dev, "test": test
            }),
        };
        serde_json::json!({
            "output_dir": self.output_dir,
            "corpus": self.corpus,
            "data": data,
            "train": self.train,
        })
    }
}
