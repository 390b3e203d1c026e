//! Run configuration: a flat `key = value` file where keys carry dotted
//! section names (`stage2.epochs = 40`). A `[section]` header prefixes the
//! keys below it. Later sources override earlier ones: defaults, file,
//! `--set` flags, dedicated flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use microcor_core::datagen::CorpusConfig;
use microcor_core::generator::{EntityTrainConfig, DEFAULT_MAX_NEW_TOKENS};
use microcor_core::models::{PretrainConfig, ToyLmConfig};
use microcor_core::retriever::{EncoderTrainConfig, StageConfig};

use crate::CliError;

/// Overrides the output directory from the file or the default.
pub const OUT_ENV: &str = "MICROCOR_OUT";
pub const DEFAULT_OUT: &str = "microcor-out";

#[derive(Debug, Clone, PartialEq)]
pub struct LmDims {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub init_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed; drives the synthetic corpus.
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset directory; defaults to `<out>/data`.
    pub data: Option<PathBuf>,
    pub corpus: CorpusConfig,
    pub lm: LmDims,
    pub pretrain: PretrainConfig,
    pub encoder: EncoderTrainConfig,
    pub encoder_init_seed: u64,
    pub retriever_init_seed: u64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub xi: EntityTrainConfig,
    pub max_new_tokens: usize,
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = ToyLmConfig::new(0);
        Self {
            seed: CorpusConfig::default().seed,
            out: PathBuf::from(DEFAULT_OUT),
            data: None,
            corpus: CorpusConfig::default(),
            lm: LmDims {
                d_model: lm.d_model,
                layers: lm.n_layers,
                heads: lm.n_heads,
                d_ff: lm.d_ff,
                max_seq: lm.max_seq,
                init_seed: 1,
            },
            pretrain: PretrainConfig::default(),
            encoder: EncoderTrainConfig::default(),
            encoder_init_seed: 3,
            retriever_init_seed: 5,
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            xi: EntityTrainConfig::default(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            ks: vec![1, 5, 10],
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value {value:?} for key {key}")))
}

pub fn parse_ks(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    let ks = value
        .split(',')
        .map(|k| parse::<usize>(key, k))
        .collect::<Result<Vec<_>, _>>()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Config(format!("invalid value {value:?} for key {key}")));
    }
    Ok(ks)
}

impl RunConfig {
    /// Every accepted key, in documentation order.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "out",
        "data",
        "data.groups",
        "data.train",
        "data.test",
        "data.golden",
        "data.noise",
        "lm.d_model",
        "lm.layers",
        "lm.heads",
        "lm.d_ff",
        "lm.max_seq",
        "lm.init_seed",
        "pretrain.epochs",
        "pretrain.lr",
        "pretrain.batch",
        "pretrain.two_image_fraction",
        "pretrain.documents",
        "pretrain.seed",
        "encoder.epochs",
        "encoder.lr",
        "encoder.batch",
        "encoder.seed",
        "encoder.init_seed",
        "retriever.init_seed",
        "stage1.epochs",
        "stage1.lr",
        "stage1.batch",
        "stage1.seed",
        "stage2.epochs",
        "stage2.lr",
        "stage2.batch",
        "stage2.seed",
        "stage2.comment_prob",
        "xi.epochs",
        "xi.lr",
        "xi.batch",
        "xi.seed",
        "generate.max_new_tokens",
        "eval.k",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let v = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, v)?;
                self.corpus.seed = self.seed;
            }
            "out" => self.out = PathBuf::from(v),
            "data" => self.data = Some(PathBuf::from(v)),
            "data.groups" => self.corpus.groups = parse(key, v)?,
            "data.train" => self.corpus.train = parse(key, v)?,
            "data.test" => self.corpus.test = parse(key, v)?,
            "data.golden" => self.corpus.golden = parse(key, v)?,
            "data.noise" => self.corpus.noise = parse(key, v)?,
            "lm.d_model" => self.lm.d_model = parse(key, v)?,
            "lm.layers" => self.lm.layers = parse(key, v)?,
            "lm.heads" => self.lm.heads = parse(key, v)?,
            "lm.d_ff" => self.lm.d_ff = parse(key, v)?,
            "lm.max_seq" => self.lm.max_seq = parse(key, v)?,
            "lm.init_seed" => self.lm.init_seed = parse(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.batch" => self.pretrain.batch = parse(key, v)?,
            "pretrain.two_image_fraction" => self.pretrain.two_image_fraction = parse(key, v)?,
            "pretrain.documents" => self.pretrain.documents = parse(key, v)?,
            "pretrain.seed" => self.pretrain.seed = parse(key, v)?,
            "encoder.epochs" => self.encoder.epochs = parse(key, v)?,
            "encoder.lr" => self.encoder.lr = parse(key, v)?,
            "encoder.batch" => self.encoder.batch = parse(key, v)?,
            "encoder.seed" => self.encoder.seed = parse(key, v)?,
            "encoder.init_seed" => self.encoder_init_seed = parse(key, v)?,
            "retriever.init_seed" => self.retriever_init_seed = parse(key, v)?,
            "stage1.epochs" => self.stage1.epochs = parse(key, v)?,
            "stage1.lr" => self.stage1.lr = parse(key, v)?,
            "stage1.batch" => self.stage1.batch = parse(key, v)?,
            "stage1.seed" => self.stage1.seed = parse(key, v)?,
            "stage2.epochs" => self.stage2.epochs = parse(key, v)?,
            "stage2.lr" => self.stage2.lr = parse(key, v)?,
            "stage2.batch" => self.stage2.batch = parse(key, v)?,
            "stage2.seed" => self.stage2.seed = parse(key, v)?,
            "stage2.comment_prob" => self.stage2.comment_prob = parse(key, v)?,
            "xi.epochs" => self.xi.epochs = parse(key, v)?,
            "xi.lr" => self.xi.lr = parse(key, v)?,
            "xi.batch" => self.xi.batch = parse(key, v)?,
            "xi.seed" => self.xi.seed = parse(key, v)?,
            "generate.max_new_tokens" => self.max_new_tokens = parse(key, v)?,
            "eval.k" => self.ks = parse_ks(key, v)?,
            _ => return Err(CliError::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Applies a config file's contents. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Config(format!("{origin}:{}: expected key = value", i + 1)));
            };
            let k = k.trim();
            let key = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
            self.set(&key, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn lm_config(&self, vocab_size: usize) -> ToyLmConfig {
        let mut c = ToyLmConfig::new(vocab_size);
        c.d_model = self.lm.d_model;
        c.n_layers = self.lm.layers;
        c.n_heads = self.lm.heads;
        c.d_ff = self.lm.d_ff;
        c.max_seq = self.lm.max_seq;
        c
    }

    /// Checks cross-field constraints before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.lm.heads == 0 || !self.lm.d_model.is_multiple_of(self.lm.heads) {
            return bad(format!("lm.d_model {} is not divisible by lm.heads {}", self.lm.d_model, self.lm.heads));
        }
        for (k, v) in [
            ("pretrain.batch", self.pretrain.batch),
            ("encoder.batch", self.encoder.batch),
            ("stage1.batch", self.stage1.batch),
            ("stage2.batch", self.stage2.batch),
            ("xi.batch", self.xi.batch),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        for (k, v) in [
            ("pretrain.lr", self.pretrain.lr),
            ("encoder.lr", self.encoder.lr),
            ("stage1.lr", self.stage1.lr),
            ("stage2.lr", self.stage2.lr),
            ("xi.lr", self.xi.lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be a positive number"));
            }
        }
        if !(0.0..=1.0).contains(&self.stage2.comment_prob) {
            return bad("stage2.comment_prob must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.pretrain.two_image_fraction) {
            return bad("pretrain.two_image_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// The effective configuration as a config file.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("data", self.data_dir().display().to_string());
        kv("data.groups", self.corpus.groups.to_string());
        kv("data.train", self.corpus.train.to_string());
        kv("data.test", self.corpus.test.to_string());
        kv("data.golden", self.corpus.golden.to_string());
        kv("data.noise", self.corpus.noise.to_string());
        kv("lm.d_model", self.lm.d_model.to_string());
        kv("lm.layers", self.lm.layers.to_string());
        kv("lm.heads", self.lm.heads.to_string());
        kv("lm.d_ff", self.lm.d_ff.to_string());
        kv("lm.max_seq", self.lm.max_seq.to_string());
        kv("lm.init_seed", self.lm.init_seed.to_string());
        kv("pretrain.epochs", self.pretrain.epochs.to_string());
        kv("pretrain.lr", self.pretrain.lr.to_string());
        kv("pretrain.batch", self.pretrain.batch.to_string());
        kv("pretrain.two_image_fraction", self.pretrain.two_image_fraction.to_string());
        kv("pretrain.documents", self.pretrain.documents.to_string());
        kv("pretrain.seed", self.pretrain.seed.to_string());
        kv("encoder.epochs", self.encoder.epochs.to_string());
        kv("encoder.lr", self.encoder.lr.to_string());
        kv("encoder.batch", self.encoder.batch.to_string());
        kv("encoder.seed", self.encoder.seed.to_string());
        kv("encoder.init_seed", self.encoder_init_seed.to_string());
        kv("retriever.init_seed", self.retriever_init_seed.to_string());
        for (name, st) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            kv(&format!("{name}.epochs"), st.epochs.to_string());
            kv(&format!("{name}.lr"), st.lr.to_string());
            kv(&format!("{name}.batch"), st.batch.to_string());
            kv(&format!("{name}.seed"), st.seed.to_string());
        }
        kv("stage2.comment_prob", self.stage2.comment_prob.to_string());
        kv("xi.epochs", self.xi.epochs.to_string());
        kv("xi.lr", self.xi.lr.to_string());
        kv("xi.batch", self.xi.batch.to_string());
        kv("xi.seed", self.xi.seed.to_string());
        kv("generate.max_new_tokens", self.max_new_tokens.to_string());
        kv(
            "eval.k",
            self.ks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        s
    }
}
