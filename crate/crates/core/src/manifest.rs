//! Run manifests: flat `section.key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so a typo never silently falls back to a default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{DatasetSpec, SplitSpec};
use crate::error::{Error, Result};
use crate::hho::HhoConfig;
use crate::model::{activation_name, parse_activation, ModelConfig, NormKind};
use crate::search::{SearchSpace, DEFAULT_BUDGET};
use crate::tensor::Activation;
use crate::trainer::TrainConfig;

/// Structural fields that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub rounds: usize,
    pub blocks: usize,
    pub slots: usize,
    pub hidden: usize,
    pub norm: NormKind,
    pub activation: Activation,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(1, 1, 1);
        Self {
            rounds: m.rounds,
            blocks: m.blocks,
            slots: m.slots,
            hidden: m.hidden,
            norm: m.norm,
            activation: m.activation,
            dropout: m.dropout,
        }
    }
}

impl ModelSection {
    pub fn from_config(m: &ModelConfig) -> Self {
        Self {
            rounds: m.rounds,
            blocks: m.blocks,
            slots: m.slots,
            hidden: m.hidden,
            norm: m.norm,
            activation: m.activation,
            dropout: m.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchSection {
    pub space: SearchSpace,
    pub budget: usize,
    /// Epoch cap for each trial; `None` uses `train.max_epochs`.
    pub trial_epochs: Option<usize>,
    /// Trials forced to fail, for exercising failure handling.
    pub abort_trials: Vec<usize>,
}

impl Default for SearchSection {
    fn default() -> Self {
        Self {
            space: SearchSpace::pinned_lookback(),
            budget: DEFAULT_BUDGET,
            trial_epochs: None,
            abort_trials: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub data: DatasetSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub hho: HhoConfig,
    pub search: SearchSection,
    pub out: PathBuf,
    pub seed: u64,
}

impl RunManifest {
    /// A manifest for `path` with every other field at its default.
    pub fn for_dataset(path: impl Into<PathBuf>) -> Self {
        let path = path.into();
        Self {
            data: DatasetSpec {
                name: dataset_name(&path),
                path,
                has_header: true,
                date_column: None,
                split: SplitSpec::DEFAULT,
                lookback: 96,
                horizon: 96,
                target_channels: None,
                stride: 1,
            },
            model: ModelSection::default(),
            train: TrainConfig::default(),
            hho: HhoConfig::default(),
            search: SearchSection::default(),
            out: PathBuf::from("out"),
            seed: 0,
        }
    }

    /// Full model config once the channel count is known.
    pub fn model_config(&self, channels: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            lookback: self.data.lookback,
            horizon: self.data.horizon,
            channels,
            target_channels: self
                .data
                .target_channels
                .clone()
                .unwrap_or_else(|| (0..channels).collect()),
            rounds: m.rounds,
            blocks: m.blocks,
            slots: m.slots,
            hidden: m.hidden,
            norm: m.norm,
            activation: m.activation,
            dropout: m.dropout,
        }
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn hho_config(&self) -> HhoConfig {
        HhoConfig {
            seed: self.seed,
            ..self.hho.clone()
        }
    }

    /// Checks every field that does not need the dataset contents.
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.path.as_os_str().is_empty() {
            return Err(Error::config("data.path", "is required"));
        }
        d.split.validate()?;
        for (field, v) in [
            ("data.lookback", d.lookback),
            ("data.horizon", d.horizon),
            ("data.stride", d.stride),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if let Some(t) = &d.target_channels {
            if t.is_empty() {
                return Err(Error::config("data.target_channels", "must not be empty"));
            }
        }
        // Channel count is unknown here; any width covering the targets works.
        let width = d
            .target_channels
            .as_ref()
            .and_then(|t| t.iter().max())
            .map_or(1, |m| m + 1);
        self.model_config(width).validate()?;
        self.train.validate()?;
        self.hho.validate()?;
        self.search.space.validate()?;
        if self.search.budget == 0 {
            return Err(Error::config("search.budget", "must be at least 1"));
        }
        if self.search.trial_epochs == Some(0) {
            return Err(Error::config("search.trial_epochs", "must be at least 1"));
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::config("run.out", "must not be empty"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }

    /// Every key with its value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut e = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            e.insert(k.to_string(), v);
        };
        let d = &self.data;
        put("data.name", d.name.clone());
        put("data.path", d.path.display().to_string());
        put("data.has_header", d.has_header.to_string());
        put("data.date_column", d.date_column.clone().unwrap_or_else(|| "none".into()));
        put("data.split", d.split.to_text());
        put("data.lookback", d.lookback.to_string());
        put("data.horizon", d.horizon.to_string());
        put(
            "data.target_channels",
            d.target_channels.as_ref().map_or("all".into(), |t| join(t)),
        );
        put("data.stride", d.stride.to_string());
        let m = &self.model;
        put("model.rounds", m.rounds.to_string());
        put("model.blocks", m.blocks.to_string());
        put("model.slots", m.slots.to_string());
        put("model.hidden", m.hidden.to_string());
        put("model.norm", m.norm.as_str().into());
        put("model.activation", activation_name(m.activation).into());
        put("model.dropout_rate", m.dropout.to_string());
        let t = &self.train;
        put("train.learning_rate", t.learning_rate.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.max_epochs", t.max_epochs.to_string());
        put("train.patience", t.patience.to_string());
        let h = &self.hho;
        put("hho.population", h.population.to_string());
        put("hho.max_iter", h.max_iter.to_string());
        put("hho.lower", h.lower.to_string());
        put("hho.upper", h.upper.to_string());
        put("hho.fitness_epochs", h.fitness_epochs.to_string());
        put("hho.levy_beta", h.levy_beta.to_string());
        put("hho.levy_scale", h.levy_scale.to_string());
        let sp = &self.search.space;
        put("search.budget", self.search.budget.to_string());
        put(
            "search.trial_epochs",
            self.search.trial_epochs.map_or("train".into(), |n| n.to_string()),
        );
        put("search.abort_trials", join(&self.search.abort_trials));
        put("search.rounds", join(&sp.rounds));
        put("search.blocks", join(&sp.blocks));
        put("search.slots", join(&sp.slots));
        put("search.hidden", format!("{},{}", sp.hidden.0, sp.hidden.1));
        put(
            "search.learning_rate",
            format!("{},{}", sp.learning_rate.0, sp.learning_rate.1),
        );
        put("search.lookback", sp.lookback.as_ref().map_or("pinned".into(), |l| join(l)));
        put("search.batch_size", join(&sp.batch_size));
        put(
            "search.norm",
            sp.norm.iter().map(|n| n.as_str()).collect::<Vec<_>>().join(","),
        );
        put("run.out", self.out.display().to_string());
        put("run.seed", self.seed.to_string());
        e
    }

    /// Parses manifest text. Relative `data.path`, `data.manifest` and
    /// `run.out` values resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut raw = parse_pairs(text)?;
        if let Some(inc) = raw.remove("data.manifest") {
            let path = resolve(base, &inc);
            let inner = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            for (k, v) in parse_pairs(&inner)? {
                let key = if k.starts_with("data.") { k } else { format!("data.{k}") };
                if !key.starts_with("data.") || key == "data.manifest" {
                    return Err(Error::config(key, "dataset manifests may only set data fields"));
                }
                let v = if key == "data.path" {
                    resolve(&dir, &v).display().to_string()
                } else {
                    v
                };
                raw.entry(key).or_insert(v);
            }
        }
        let path = raw
            .get("data.path")
            .ok_or_else(|| Error::config("data.path", "is required"))?;
        let mut m = RunManifest::for_dataset(resolve(base, path));
        let mut name_set = false;
        for (key, value) in &raw {
            let v = value.as_str();
            let k = key.as_str();
            match k {
                "data.path" => {}
                "data.name" => {
                    m.data.name = v.to_string();
                    name_set = true;
                }
                "data.has_header" => m.data.has_header = boolean(k, v)?,
                "data.date_column" => {
                    m.data.date_column = match v {
                        "" | "none" => None,
                        c => Some(c.to_string()),
                    }
                }
                "data.split" => m.data.split = SplitSpec::parse(v)?,
                "data.lookback" => m.data.lookback = number(k, v)?,
                "data.horizon" => m.data.horizon = number(k, v)?,
                "data.target_channels" => {
                    m.data.target_channels = match v {
                        "all" => None,
                        _ => Some(list(k, v)?),
                    }
                }
                "data.stride" => m.data.stride = number(k, v)?,
                "model.rounds" => m.model.rounds = number(k, v)?,
                "model.blocks" => m.model.blocks = number(k, v)?,
                "model.slots" => m.model.slots = number(k, v)?,
                "model.hidden" => m.model.hidden = number(k, v)?,
                "model.norm" => {
                    m.model.norm =
                        NormKind::parse(v).ok_or_else(|| Error::config(k, "expected layer or batch"))?
                }
                "model.activation" => {
                    m.model.activation = parse_activation(v)
                        .ok_or_else(|| Error::config(k, "expected relu or gelu"))?
                }
                "model.dropout_rate" => m.model.dropout = number(k, v)?,
                "train.learning_rate" => m.train.learning_rate = number(k, v)?,
                "train.batch_size" => m.train.batch_size = number(k, v)?,
                "train.max_epochs" => m.train.max_epochs = number(k, v)?,
                "train.patience" => m.train.patience = number(k, v)?,
                "hho.population" => m.hho.population = number(k, v)?,
                "hho.max_iter" => m.hho.max_iter = number(k, v)?,
                "hho.lower" => m.hho.lower = number(k, v)?,
                "hho.upper" => m.hho.upper = number(k, v)?,
                "hho.fitness_epochs" => m.hho.fitness_epochs = number(k, v)?,
                "hho.levy_beta" => m.hho.levy_beta = number(k, v)?,
                "hho.levy_scale" => m.hho.levy_scale = number(k, v)?,
                "search.budget" => m.search.budget = number(k, v)?,
                "search.trial_epochs" => {
                    m.search.trial_epochs = match v {
                        "train" => None,
                        _ => Some(number(k, v)?),
                    }
                }
                "search.abort_trials" => m.search.abort_trials = list(k, v)?,
                "search.rounds" => m.search.space.rounds = list(k, v)?,
                "search.blocks" => m.search.space.blocks = list(k, v)?,
                "search.slots" => m.search.space.slots = list(k, v)?,
                "search.hidden" => m.search.space.hidden = pair(k, v)?,
                "search.learning_rate" => m.search.space.learning_rate = pair(k, v)?,
                "search.lookback" => {
                    m.search.space.lookback = match v {
                        "pinned" => None,
                        _ => Some(list(k, v)?),
                    }
                }
                "search.batch_size" => m.search.space.batch_size = list(k, v)?,
                "search.norm" => {
                    m.search.space.norm = v
                        .split(',')
                        .map(|n| {
                            NormKind::parse(n)
                                .ok_or_else(|| Error::config(k, format!("unknown norm `{n}`")))
                        })
                        .collect::<Result<_>>()?
                }
                "run.out" => m.out = resolve(base, v),
                "run.seed" => m.seed = number(k, v)?,
                other => return Err(Error::config(other, "unknown manifest key")),
            }
        }
        if !name_set {
            m.data.name = dataset_name(&m.data.path);
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::config("--manifest", format!("{} does not exist", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn resolve(base: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() || base.as_os_str().is_empty() {
        p
    } else {
        base.join(p)
    }
}

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::config(format!("line {}", i + 1), "expected `key = value`")
        })?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(k, "set more than once"));
        }
    }
    Ok(out)
}

fn number<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| number(key, x.trim())).collect()
}

fn pair<T: std::str::FromStr + Copy>(key: &str, v: &str) -> Result<(T, T)> {
    let items: Vec<T> = list(key, v)?;
    match items.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::config(key, "expected `lo,hi`")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
