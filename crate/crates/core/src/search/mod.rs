//! Seeded random search over structural hyperparameters.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, NormKind};
use crate::tensor::Rng;
use crate::trainer::{evaluate_loss, train, TrainConfig};

const MAX_RESAMPLES: usize = 100;
pub const DEFAULT_BUDGET: usize = 20;

/// Candidate values per axis. Log-uniform axes are inclusive ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub rounds: Vec<usize>,
    pub blocks: Vec<usize>,
    pub slots: Vec<usize>,
    pub hidden: (usize, usize),
    pub learning_rate: (f64, f64),
    /// `None` keeps the template lookback fixed.
    pub lookback: Option<Vec<usize>>,
    pub batch_size: Vec<usize>,
    pub norm: Vec<NormKind>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            rounds: vec![2, 4, 6, 8],
            blocks: vec![2, 4, 8],
            slots: vec![8, 16, 32, 64, 128, 256],
            hidden: (16, 2048),
            learning_rate: (1e-4, 1e-2),
            lookback: Some((2..=10).map(|k| 1usize << k).collect()),
            batch_size: vec![16, 32, 64],
            norm: vec![NormKind::Batch, NormKind::Layer],
        }
    }
}

impl SearchSpace {
    /// The default space with the lookback axis removed.
    pub fn pinned_lookback() -> Self {
        Self {
            lookback: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |name: &str, v: &[usize]| {
            if v.is_empty() || v.contains(&0) {
                Err(Error::config(
                    format!("search.{name}"),
                    "needs at least one positive choice",
                ))
            } else {
                Ok(())
            }
        };
        nonempty("rounds", &self.rounds)?;
        nonempty("blocks", &self.blocks)?;
        nonempty("slots", &self.slots)?;
        nonempty("batch_size", &self.batch_size)?;
        if let Some(l) = &self.lookback {
            nonempty("lookback", l)?;
        }
        if self.norm.is_empty() {
            return Err(Error::config("search.norm", "needs at least one choice"));
        }
        let (lo, hi) = self.hidden;
        if lo == 0 || lo > hi {
            return Err(Error::config("search.hidden", "need 0 < lo <= hi"));
        }
        let (lo, hi) = self.learning_rate;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("search.learning_rate", "need 0 < lo <= hi"));
        }
        Ok(())
    }
}

/// Fixed fields a search fills in around the sampled axes.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchTemplate {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Length of the shortest split; `lookback + horizon` must fit in it.
    pub max_window: usize,
}

impl SearchTemplate {
    pub fn for_data(model: ModelConfig, train: TrainConfig, data: &PreparedData) -> Self {
        let r = &data.ranges;
        let max_window = r.train.len().min(r.val.len()).min(r.test.len());
        Self {
            model,
            train,
            max_window,
        }
    }
}

fn pick<T: Copy>(choices: &[T], rng: &mut Rng) -> T {
    choices[rng.below(choices.len())]
}

/// `exp(U(ln lo, ln hi))`.
pub fn log_uniform(lo: f64, hi: f64, rng: &mut Rng) -> f64 {
    let x = rng.uniform_in(lo.ln(), hi.ln()).exp();
    x.clamp(lo, hi)
}

/// Log-uniform draw rounded to an integer in `[lo, hi]`.
pub fn log_uniform_int(lo: usize, hi: usize, rng: &mut Rng) -> usize {
    (log_uniform(lo as f64, hi as f64, rng).round() as usize).clamp(lo, hi)
}

/// Draws one configuration, resampling when the window does not fit the
/// shortest split.
pub fn sample_config(
    space: &SearchSpace,
    template: &SearchTemplate,
    rng: &mut Rng,
) -> Result<(ModelConfig, TrainConfig)> {
    space.validate()?;
    for _ in 0..MAX_RESAMPLES {
        let mut model = template.model.clone();
        let mut tc = template.train.clone();
        model.rounds = pick(&space.rounds, rng);
        model.blocks = pick(&space.blocks, rng);
        model.slots = pick(&space.slots, rng);
        model.hidden = log_uniform_int(space.hidden.0, space.hidden.1, rng);
        tc.learning_rate = log_uniform(space.learning_rate.0, space.learning_rate.1, rng);
        if let Some(l) = &space.lookback {
            model.lookback = pick(l, rng);
        }
        tc.batch_size = pick(&space.batch_size, rng);
        model.norm = pick(&space.norm, rng);
        if model.lookback + model.horizon > template.max_window {
            continue;
        }
        model.validate()?;
        tc.validate()?;
        return Ok((model, tc));
    }
    Err(Error::config(
        "search.lookback",
        format!(
            "no sampled lookback fits a split of {} steps after {MAX_RESAMPLES} draws",
            template.max_window
        ),
    ))
}

#[derive(Clone, Debug)]
pub struct Trial {
    pub index: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub val_mse: f64,
    pub wall_time: Duration,
    /// Seeds both initialization and training.
    pub seed: u64,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// Successful trials, best first; ties keep trial order.
    pub leaderboard: Vec<Trial>,
    /// `(trial index, cause)` for every failed trial.
    pub failures: Vec<(usize, String)>,
}

impl SearchOutcome {
    pub fn best(&self) -> &Trial {
        &self.leaderboard[0]
    }
}

/// Trains one configuration from its seed and returns the validation MSE
/// of the restored best epoch.
pub fn run_trial(
    data: &PreparedData,
    index: usize,
    model: ModelConfig,
    mut tc: TrainConfig,
    seed: u64,
) -> Result<Trial> {
    let started = Instant::now();
    tc.seed = seed;
    let cut;
    let data = if model.lookback == data.train.lookback() {
        data
    } else {
        cut = data.with_lookback(model.lookback)?;
        &cut
    };
    let mut params = ModelParams::init(&model, &mut Rng::substream(seed, "init"))?;
    let report = train(&mut params, &data.train, &data.val, &tc)?;
    Ok(Trial {
        index,
        model,
        train: tc,
        val_mse: report.best_val_loss,
        wall_time: started.elapsed(),
        seed,
        params,
    })
}

/// Re-evaluates a trial's parameters on the validation split.
pub fn reevaluate(data: &PreparedData, trial: &Trial) -> Result<f64> {
    if trial.model.lookback == data.train.lookback() {
        evaluate_loss(&trial.params, &data.val)
    } else {
        evaluate_loss(&trial.params, &data.with_lookback(trial.model.lookback)?.val)
    }
}

/// Samples `budget` configurations serially from `seed`, trains them in
/// parallel on the current rayon pool, and ranks the survivors.
pub fn run_search(
    data: &PreparedData,
    space: &SearchSpace,
    template: &SearchTemplate,
    budget: usize,
    seed: u64,
) -> Result<SearchOutcome> {
    run_search_with(data, space, template, budget, seed, |_| Ok(()))
}

/// [`run_search`] with a hook called before each trial; an error from the
/// hook fails that trial. Used for fault injection.
pub fn run_search_with<H>(
    data: &PreparedData,
    space: &SearchSpace,
    template: &SearchTemplate,
    budget: usize,
    seed: u64,
    before_trial: H,
) -> Result<SearchOutcome>
where
    H: Fn(usize) -> Result<()> + Sync,
{
    if budget == 0 {
        return Err(Error::config("search.budget", "must be at least 1"));
    }
    let mut rng = Rng::substream(seed, "search");
    let plans: Vec<(ModelConfig, TrainConfig, u64)> = (0..budget)
        .map(|_| {
            let (m, t) = sample_config(space, template, &mut rng)?;
            Ok((m, t, rng.next_u64()))
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<Trial>> = plans
        .into_par_iter()
        .enumerate()
        .map(|(i, (m, t, s))| {
            before_trial(i)?;
            run_trial(data, i, m, t, s)
        })
        .collect();
    let mut leaderboard = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(t) => leaderboard.push(t),
            Err(e) => {
                log::warn!("trial {i} failed: {e}");
                failures.push((i, e.to_string()));
            }
        }
    }
    if leaderboard.is_empty() {
        return Err(Error::Search {
            causes: failures.iter().map(|(i, c)| format!("trial {i}: {c}")).collect(),
        });
    }
    rank_trials(&mut leaderboard);
    Ok(SearchOutcome {
        leaderboard,
        failures,
    })
}

/// Ascending validation MSE; equal losses keep trial order.
pub fn rank_trials(trials: &mut [Trial]) {
    trials.sort_by(|a, b| a.val_mse.total_cmp(&b.val_mse).then(a.index.cmp(&b.index)));
}

/// One CSV row per trial, in the order given.
pub fn leaderboard_csv(trials: &[Trial]) -> String {
    let mut out = String::from(
        "trial,rounds,blocks,slots,hidden,learning_rate,lookback,batch_size,norm,seed,val_mse,wall_time_s\n",
    );
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            t.index,
            t.model.rounds,
            t.model.blocks,
            t.model.slots,
            t.model.hidden,
            t.train.learning_rate,
            t.model.lookback,
            t.train.batch_size,
            t.model.norm.as_str(),
            t.seed,
            t.val_mse,
            t.wall_time.as_secs_f64()
        )
        .unwrap();
    }
    out
}
