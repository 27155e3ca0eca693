//! Plain-text checkpoints.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! reload reproduces every parameter bit for bit.

use std::fmt::Write as _;
use std::path::Path;

use super::{parse_activation, ModelConfig, ModelParams, NormKind, RunningStats};
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "slotmixer-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Dataset-level standardization fitted on the training split.
    pub norm_stats: Option<NormStats>,
    pub feature_names: Vec<String>,
}

fn join(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 20);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").unwrap();
    }
    out
}

fn join_usize(values: &[usize]) -> String {
    values.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let cfg = &self.params.config;
        let mut s = String::new();
        writeln!(s, "{MAGIC}").unwrap();
        for (key, value) in cfg.fields() {
            writeln!(s, "config.{key} {value}").unwrap();
        }
        writeln!(s, "features {}", self.feature_names.join("\t")).unwrap();
        if let Some(stats) = &self.norm_stats {
            writeln!(s, "stats.mean {}", join(&stats.mean)).unwrap();
            writeln!(s, "stats.std {}", join(&stats.std)).unwrap();
        }
        for (name, t) in self.params.tensors() {
            writeln!(s, "tensor {name} {} : {}", join_usize(t.shape()), join(t.data())).unwrap();
        }
        for (i, b) in self.params.blocks.iter().enumerate() {
            for (tag, r) in [("norm1", &b.norm1_running), ("norm2", &b.norm2_running)] {
                writeln!(s, "running blocks.{i}.{tag}.mean {}", join(&r.mean)).unwrap();
                writeln!(s, "running blocks.{i}.{tag}.var {}", join(&r.var)).unwrap();
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Checkpoint(format!("line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == MAGIC => {}
            _ => return Err(Error::Checkpoint(format!("missing '{MAGIC}' header"))),
        }
        let mut cfg = ModelConfig::new(1, 1, 1);
        let mut features = Vec::new();
        let mut mean = None;
        let mut std = None;
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        let mut running: Vec<(String, Vec<f64>)> = Vec::new();

        let floats = |line: usize, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad(line, &format!("bad number '{t}'"))))
                .collect()
        };
        let ints = |line: usize, s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|_| bad(line, &format!("bad integer '{t}'"))))
                .collect()
        };

        for (idx, raw) in lines {
            let n = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let (key, rest) = raw.split_once(' ').unwrap_or((raw, ""));
            let one = |v: &str| -> Result<usize> {
                v.trim().parse().map_err(|_| bad(n, &format!("bad value for {key}")))
            };
            match key {
                "config.lookback" => cfg.lookback = one(rest)?,
                "config.horizon" => cfg.horizon = one(rest)?,
                "config.channels" => cfg.channels = one(rest)?,
                "config.target_channels" => cfg.target_channels = ints(n, rest)?,
                "config.rounds" => cfg.rounds = one(rest)?,
                "config.blocks" => cfg.blocks = one(rest)?,
                "config.slots" => cfg.slots = one(rest)?,
                "config.hidden" => cfg.hidden = one(rest)?,
                "config.norm" => {
                    cfg.norm = NormKind::parse(rest).ok_or_else(|| bad(n, "unknown norm"))?
                }
                "config.activation" => {
                    cfg.activation =
                        parse_activation(rest).ok_or_else(|| bad(n, "unknown activation"))?
                }
                "config.dropout" => {
                    cfg.dropout = rest.trim().parse().map_err(|_| bad(n, "bad dropout"))?
                }
                "features" => {
                    features = if rest.is_empty() {
                        Vec::new()
                    } else {
                        rest.split('\t').map(str::to_string).collect()
                    }
                }
                "stats.mean" => mean = Some(floats(n, rest)?),
                "stats.std" => std = Some(floats(n, rest)?),
                "tensor" => {
                    let (head, body) =
                        rest.split_once(" : ").ok_or_else(|| bad(n, "tensor line lacks ' : '"))?;
                    let (name, dims) = head.split_once(' ').unwrap_or((head, ""));
                    let shape = ints(n, dims)?;
                    let t = Tensor::new(shape, floats(n, body)?)
                        .map_err(|e| bad(n, &e.to_string()))?;
                    tensors.push((name.to_string(), t));
                }
                "running" => {
                    let (name, body) = rest.split_once(' ').unwrap_or((rest, ""));
                    running.push((name.to_string(), floats(n, body)?));
                }
                other => return Err(bad(n, &format!("unknown key '{other}'"))),
            }
        }

        let mut rng = crate::tensor::Rng::seed_from(0);
        let mut params = ModelParams::init(&cfg, &mut rng)?;
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        if tensors.len() != names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        for ((slot, want), (got, t)) in params.tensors_mut().into_iter().zip(&names).zip(tensors) {
            if *want != got {
                return Err(Error::Checkpoint(format!("expected tensor {want}, found {got}")));
            }
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        for (name, values) in running {
            let parts: Vec<&str> = name.split('.').collect();
            let [_, idx, tag, field] = parts.as_slice() else {
                return Err(Error::Checkpoint(format!("bad running-stat name {name}")));
            };
            let block = idx
                .parse::<usize>()
                .ok()
                .and_then(|i| params.blocks.get_mut(i))
                .ok_or_else(|| Error::Checkpoint(format!("bad block in {name}")))?;
            let stats: &mut RunningStats = match *tag {
                "norm1" => &mut block.norm1_running,
                "norm2" => &mut block.norm2_running,
                _ => return Err(Error::Checkpoint(format!("bad norm tag in {name}"))),
            };
            if values.len() != cfg.channels {
                return Err(Error::Checkpoint(format!("{name} has the wrong width")));
            }
            match *field {
                "mean" => stats.mean = values,
                "var" => stats.var = values,
                _ => return Err(Error::Checkpoint(format!("bad field in {name}"))),
            }
        }
        params.validate()?;
        let norm_stats = match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete dataset statistics".into())),
        };
        Ok(Self {
            params,
            norm_stats,
            feature_names: features,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
