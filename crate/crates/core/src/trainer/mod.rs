//! Mini-batch Adam training with validation-based early stopping.

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Rng, Tape, Tensor, Var};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be at least 1"));
        }
        Ok(())
    }
}

/// Mean squared error over every entry of `pred` against `target`.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    tape.mse(pred, target)
}

/// Bias-corrected Adam moments for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        Self {
            first: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        let tensors = params.tensors();
        let refs: Vec<&Tensor> = tensors.iter().map(|(_, t)| *t).collect();
        Self::new(&refs)
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update applied in place. `grads[i] == None` counts as zero.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Option<&[f64]>],
    state: &mut AdamState,
    learning_rate: f64,
) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(Error::contract(format!(
            "adam: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let g_len = g.map_or(p.len(), <[f64]>::len);
        if p.len() != state.first[i].len() || g_len != p.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g_len],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let data = p.data_mut();
        for j in 0..data.len() {
            let gj = grads[i].map_or(0.0, |g| g[j]);
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            data[j] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Forward, backward and one Adam update on a single batch. Returns the
/// batch loss before the update.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    x: &Tensor,
    y: &Tensor,
    learning_rate: f64,
    dropout_rng: &mut Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let pass = params.forward(&mut tape, &bound, x, true, dropout_rng)?;
    let loss = mse_loss(&mut tape, pass.output, y)?;
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Diverged(format!("non-finite batch loss {value}")));
    }
    tape.backward(loss)?;
    let vars = bound.vars();
    let grads: Vec<Option<&[f64]>> = vars.iter().map(|&v| tape.grad(v)).collect();
    let mut tensors = params.tensors_mut();
    adam_step(&mut tensors, &grads, state, learning_rate)?;
    drop(tensors);
    params.absorb_moments(&pass.moments);
    Ok(value)
}

/// Inference-mode MSE over every window of `data`, in standardized units.
pub fn evaluate_loss(params: &ModelParams, data: &WindowedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("data.split", "evaluation split has no windows"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let pred = params.predict(&x)?;
        total += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += y.len();
    }
    Ok(total / count as f64)
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> Verdict {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_time: Duration,
}

impl PartialEq for TrainReport {
    /// Wall time is excluded.
    fn eq(&self, other: &Self) -> bool {
        self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.best_epoch == other.best_epoch
            && self.best_val_loss.to_bits() == other.best_val_loss.to_bits()
    }
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }

    /// One `epoch,train_loss,val_loss` record per line after a header.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("epoch,train_loss,val_loss\n");
        for (e, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            text.push_str(&format!("{e},{t},{v}\n"));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `params` in place and leaves them at the best validation epoch.
///
/// Shuffling and dropout draw from sub-streams of `config.seed`, so two
/// calls with equal inputs give equal reports and parameters.
pub fn train(
    params: &mut ModelParams,
    train_set: &WindowedDataset,
    val_set: &WindowedDataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    params.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("data.split", "training split has no windows"));
    }
    if val_set.is_empty() {
        return Err(Error::config("data.split", "validation split has no windows"));
    }
    let started = Instant::now();
    let mut shuffle_rng = Rng::substream(config.seed, "shuffle");
    let mut dropout_rng = Rng::substream(config.seed, "dropout");
    let mut state = AdamState::for_model(params);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = params.clone();
    let mut train_hist = Vec::new();
    let mut val_hist = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train_set.batch(chunk);
            let loss = train_step(
                params,
                &mut state,
                &x,
                &y,
                config.learning_rate,
                &mut dropout_rng,
            )?;
            weighted += loss * chunk.len() as f64;
        }
        let train_loss = weighted / order.len() as f64;
        let val_loss = evaluate_loss(params, val_set)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        train_hist.push(train_loss);
        val_hist.push(val_loss);
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best.clone_from(params),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    *params = best;
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one epoch ran");
    Ok(TrainReport {
        train_loss: train_hist,
        val_loss: val_hist,
        best_epoch,
        best_val_loss,
        wall_time: started.elapsed(),
    })
}
