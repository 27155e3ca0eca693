//! Harris Hawks Optimization of a scalar rate in `[LB, UB]`.
//!
//! The update formulas are exposed as pure functions of their random
//! inputs so they can be checked by hand; [`run_hho`] draws those inputs
//! from one seeded stream and evaluates fitness through a cache.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;

use rayon::prelude::*;
use statrs::function::gamma::gamma;

use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Rng;
use crate::trainer::{train, TrainConfig};

pub const LEVY_BETA: f64 = 1.5;
pub const LEVY_SCALE: f64 = 0.01;
const CACHE_QUANTUM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct HhoConfig {
    pub population: usize,
    pub max_iter: usize,
    pub lower: f64,
    pub upper: f64,
    /// Epochs each fitness evaluation trains for.
    pub fitness_epochs: usize,
    pub seed: u64,
    pub levy_beta: f64,
    pub levy_scale: f64,
}

impl Default for HhoConfig {
    fn default() -> Self {
        Self {
            population: 10,
            max_iter: 20,
            lower: 0.0,
            upper: 0.5,
            fitness_epochs: 10,
            seed: 0,
            levy_beta: LEVY_BETA,
            levy_scale: LEVY_SCALE,
        }
    }
}

impl HhoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::config("hho.population", "must be at least 2"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("hho.max_iter", "must be at least 1"));
        }
        if !self.lower.is_finite() || !self.upper.is_finite() || self.lower >= self.upper {
            return Err(Error::config("hho.bounds", "need finite LB < UB"));
        }
        if self.fitness_epochs == 0 {
            return Err(Error::config("hho.fitness_epochs", "must be at least 1"));
        }
        if !(self.levy_beta > 0.0 && self.levy_beta <= 2.0) {
            return Err(Error::config("hho.levy_beta", "must lie in (0, 2]"));
        }
        Ok(())
    }

    fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lower, self.upper)
    }
}

/// Maps a rate to a validation loss. Implementations must be deterministic
/// and safe to call from several threads at once.
pub trait FitnessFn: Sync {
    fn evaluate(&self, rate: f64) -> Result<f64>;
}

impl<F> FitnessFn for F
where
    F: Fn(f64) -> Result<f64> + Sync,
{
    fn evaluate(&self, rate: f64) -> Result<f64> {
        self(rate)
    }
}

/// Validation MSE of a fresh model trained at the candidate dropout rate.
/// Initialization and training draw from `seed`, so equal rates give
/// equal fitness.
#[derive(Clone, Debug)]
pub struct TrainingFitness<'a> {
    pub data: &'a PreparedData,
    pub model: ModelConfig,
    /// `max_epochs` is the per-evaluation epoch budget.
    pub train: TrainConfig,
    pub seed: u64,
}

impl<'a> TrainingFitness<'a> {
    pub fn new(
        data: &'a PreparedData,
        model: ModelConfig,
        train: TrainConfig,
        fitness_epochs: usize,
        seed: u64,
    ) -> Self {
        let train = TrainConfig {
            max_epochs: fitness_epochs,
            seed,
            ..train
        };
        Self {
            data,
            model,
            train,
            seed,
        }
    }
}

impl FitnessFn for TrainingFitness<'_> {
    fn evaluate(&self, rate: f64) -> Result<f64> {
        let cfg = ModelConfig {
            dropout: rate,
            ..self.model.clone()
        };
        let mut params = ModelParams::init(&cfg, &mut Rng::substream(self.seed, "init"))?;
        let report = train(&mut params, &self.data.train, &self.data.val, &self.train)?;
        Ok(report.best_val_loss)
    }
}

// ---- update formulas ----------------------------------------------------

/// `E = 2·E0·(1 − t/T_max)`.
pub fn energy(e0: f64, t: usize, t_max: usize) -> f64 {
    2.0 * e0 * (1.0 - t as f64 / t_max as f64)
}

/// Draws `E0 ~ U(−1, 1)` and returns `(E, E0)`.
pub fn escape_energy(t: usize, t_max: usize, rng: &mut Rng) -> (f64, f64) {
    let e0 = rng.uniform_in(-1.0, 1.0);
    (energy(e0, t, t_max), e0)
}

/// Exploration around a random hawk: `p_rand − r1·|p_rand − 2·r2·p_i|`.
pub fn explore_random(p_i: f64, p_rand: f64, r1: f64, r2: f64) -> f64 {
    p_rand - r1 * (p_rand - 2.0 * r2 * p_i).abs()
}

/// Exploration relative to the population mean:
/// `(p_rabbit − p̄) − r3·(LB + r4·(UB − LB))`.
pub fn explore_mean(p_rabbit: f64, p_mean: f64, r3: f64, r4: f64, lower: f64, upper: f64) -> f64 {
    (p_rabbit - p_mean) - r3 * (lower + r4 * (upper - lower))
}

/// Jump strength `J = 2·(1 − r5)`.
pub fn jump_strength(r5: f64) -> f64 {
    2.0 * (1.0 - r5)
}

/// `p_rabbit − E·|J·p_rabbit − p_i|`.
pub fn soft_besiege(p_i: f64, p_rabbit: f64, e: f64, j: f64) -> f64 {
    p_rabbit - e * (j * p_rabbit - p_i).abs()
}

/// `p_rabbit − E·|p_rabbit − p_i|`.
pub fn hard_besiege(p_i: f64, p_rabbit: f64, e: f64) -> f64 {
    p_rabbit - e * (p_rabbit - p_i).abs()
}

/// Candidate of the hard dive: `p_rabbit − E·|p_rabbit − p̄|`.
pub fn hard_dive_candidate(p_rabbit: f64, p_mean: f64, e: f64) -> f64 {
    p_rabbit - e * (p_rabbit - p_mean).abs()
}

/// Mantegna's `σ_u` for stability index `beta`.
pub fn mantegna_sigma(beta: f64) -> f64 {
    let num = gamma(1.0 + beta) * (PI * beta / 2.0).sin();
    let den = gamma((1.0 + beta) / 2.0) * beta * 2f64.powf((beta - 1.0) / 2.0);
    (num / den).powf(1.0 / beta)
}

/// One Lévy-stable step by Mantegna's algorithm:
/// `scale · u / |v|^(1/β)`, `u ~ N(0, σ_u²)`, `v ~ N(0, 1)`.
pub fn levy(rng: &mut Rng, beta: f64, scale: f64) -> f64 {
    let u = rng.normal() * mantegna_sigma(beta);
    let v = rng.normal();
    scale * u / v.abs().powf(1.0 / beta)
}

/// Shared by both dives: keep the candidate on strict improvement,
/// otherwise perturb it with a scaled Lévy step. Returns the unclamped
/// position and whether a Lévy step was drawn.
pub fn dive_resolve(
    candidate: f64,
    candidate_fitness: f64,
    current_fitness: f64,
    rng: &mut Rng,
    beta: f64,
    scale: f64,
) -> (f64, bool) {
    if candidate_fitness < current_fitness {
        (candidate, false)
    } else {
        let r6 = rng.uniform();
        (candidate + r6 * levy(rng, beta, scale), true)
    }
}

// ---- driver -------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Branch {
    ExploreRandom,
    ExploreMean,
    SoftBesiege,
    HardBesiege,
    SoftDive,
    HardDive,
}

impl Branch {
    pub const ALL: [Branch; 6] = [
        Branch::ExploreRandom,
        Branch::ExploreMean,
        Branch::SoftBesiege,
        Branch::HardBesiege,
        Branch::SoftDive,
        Branch::HardDive,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Branch::ExploreRandom => "explore-random",
            Branch::ExploreMean => "explore-mean",
            Branch::SoftBesiege => "soft-besiege",
            Branch::HardBesiege => "hard-besiege",
            Branch::SoftDive => "soft-dive",
            Branch::HardDive => "hard-dive",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Picks the branch for one hawk from its energy and, under exploitation,
/// the draw `r`.
pub fn dispatch(e: f64, q_or_r: f64) -> Branch {
    let abs = e.abs();
    if abs >= 1.0 {
        if q_or_r >= 0.5 {
            Branch::ExploreRandom
        } else {
            Branch::ExploreMean
        }
    } else {
        match (q_or_r >= 0.5, abs >= 0.5) {
            (true, true) => Branch::SoftBesiege,
            (true, false) => Branch::HardBesiege,
            (false, true) => Branch::SoftDive,
            (false, false) => Branch::HardDive,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HawkRecord {
    pub iteration: usize,
    pub hawk: usize,
    pub rate: f64,
    pub fitness: f64,
    pub branch: Branch,
    /// Whether a dive fell back to a Lévy step.
    pub levy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HhoResult {
    pub best_rate: f64,
    pub best_fitness: f64,
    /// Rabbit fitness after each iteration.
    pub trace: Vec<f64>,
    /// Initial population and its fitness.
    pub initial: Vec<(f64, f64)>,
    pub records: Vec<HawkRecord>,
    /// How often each branch was taken, indexed like [`Branch::ALL`].
    pub branch_counts: [usize; 6],
    /// Fitness calls actually made (cache misses).
    pub evaluations: usize,
}

impl HhoResult {
    pub fn count(&self, branch: Branch) -> usize {
        self.branch_counts[branch.index()]
    }

    /// `iteration,hawk,rate,fitness,branch` lines after a header.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,hawk,rate,fitness,branch\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.iteration,
                r.hawk,
                r.rate,
                r.fitness,
                r.branch.tag()
            ));
        }
        out
    }
}

/// Memoizes fitness by rate quantized to `1e-12`.
struct FitnessCache<'a, F: FitnessFn + ?Sized> {
    fitness: &'a F,
    values: Mutex<HashMap<i64, f64>>,
    calls: Mutex<usize>,
}

impl<'a, F: FitnessFn + ?Sized> FitnessCache<'a, F> {
    fn new(fitness: &'a F) -> Self {
        Self {
            fitness,
            values: Mutex::new(HashMap::new()),
            calls: Mutex::new(0),
        }
    }

    fn key(rate: f64) -> i64 {
        (rate / CACHE_QUANTUM).round() as i64
    }

    /// Evaluates every rate, each distinct key at most once, in parallel.
    /// On failure returns the position (within `rates`) of the first failing
    /// entry together with its error.
    fn evaluate_all(&self, rates: &[f64]) -> std::result::Result<Vec<f64>, (usize, Error)> {
        let missing: Vec<(i64, f64)> = {
            let known = self.values.lock().unwrap();
            let mut seen = std::collections::BTreeMap::new();
            for &r in rates {
                let k = Self::key(r);
                if !known.contains_key(&k) {
                    seen.entry(k).or_insert(r);
                }
            }
            seen.into_iter().collect()
        };
        let results: Vec<(i64, Result<f64>)> = missing
            .par_iter()
            .map(|&(k, r)| (k, self.fitness.evaluate(r)))
            .collect();
        *self.calls.lock().unwrap() += results.len();
        let mut failed: HashMap<i64, Error> = HashMap::new();
        {
            let mut known = self.values.lock().unwrap();
            for (k, res) in results {
                match res {
                    Ok(v) => {
                        known.insert(k, v);
                    }
                    Err(e) => {
                        failed.insert(k, e);
                    }
                }
            }
        }
        if !failed.is_empty() {
            let pos = rates
                .iter()
                .position(|&r| failed.contains_key(&Self::key(r)))
                .expect("a failed key came from these rates");
            let err = failed.remove(&Self::key(rates[pos])).unwrap();
            return Err((pos, err));
        }
        let known = self.values.lock().unwrap();
        Ok(rates.iter().map(|&r| known[&Self::key(r)]).collect())
    }

    fn calls(&self) -> usize {
        *self.calls.lock().unwrap()
    }
}

enum Plan {
    Direct { rate: f64, branch: Branch },
    Dive { candidate: f64, branch: Branch },
}

/// Runs the optimizer and returns the best rate seen.
///
/// Each iteration draws all hawk updates from the positions at its start,
/// evaluates the dive candidates, resolves the dives in hawk order,
/// evaluates the new positions, and finally moves the rabbit to the best
/// fitness observed so far (including dive candidates), so the trace never
/// increases. Fitness calls within a phase run in parallel.
pub fn run_hho<F: FitnessFn + ?Sized>(fitness: &F, config: &HhoConfig) -> Result<HhoResult> {
    config.validate()?;
    let mut rng = Rng::substream(config.seed, "hho");
    let cache = FitnessCache::new(fitness);
    let h = config.population;
    let tuning = |hawk: usize, trace: &[f64], source: Error| Error::Tuning {
        hawk,
        trace: trace.to_vec(),
        source: Box::new(source),
    };

    let mut positions: Vec<f64> = (0..h)
        .map(|_| rng.uniform_in(config.lower, config.upper))
        .collect();
    let mut fit = cache
        .evaluate_all(&positions)
        .map_err(|(i, e)| tuning(i, &[], e))?;
    let initial: Vec<(f64, f64)> = positions.iter().copied().zip(fit.iter().copied()).collect();
    let (mut rabbit, mut rabbit_fit) = argmin(&positions, &fit).expect("population is non-empty");

    let mut trace = Vec::with_capacity(config.max_iter);
    let mut records = Vec::with_capacity(h * config.max_iter);
    let mut counts = [0usize; 6];

    for t in 0..config.max_iter {
        let mean = positions.iter().sum::<f64>() / h as f64;
        let plans: Vec<Plan> = (0..h)
            .map(|i| {
                let p_i = positions[i];
                let (e, _) = escape_energy(t, config.max_iter, &mut rng);
                let branch = dispatch(e, rng.uniform());
                let plan = match branch {
                    Branch::ExploreRandom => {
                        let k = rng.below(h);
                        let (r1, r2) = (rng.uniform(), rng.uniform());
                        Plan::Direct {
                            rate: explore_random(p_i, positions[k], r1, r2),
                            branch,
                        }
                    }
                    Branch::ExploreMean => {
                        let (r3, r4) = (rng.uniform(), rng.uniform());
                        Plan::Direct {
                            rate: explore_mean(rabbit, mean, r3, r4, config.lower, config.upper),
                            branch,
                        }
                    }
                    Branch::SoftBesiege => {
                        let j = jump_strength(rng.uniform());
                        Plan::Direct {
                            rate: soft_besiege(p_i, rabbit, e, j),
                            branch,
                        }
                    }
                    Branch::HardBesiege => Plan::Direct {
                        rate: hard_besiege(p_i, rabbit, e),
                        branch,
                    },
                    Branch::SoftDive => {
                        let j = jump_strength(rng.uniform());
                        Plan::Dive {
                            candidate: config.clamp(soft_besiege(p_i, rabbit, e, j)),
                            branch,
                        }
                    }
                    Branch::HardDive => Plan::Dive {
                        candidate: config.clamp(hard_dive_candidate(rabbit, mean, e)),
                        branch,
                    },
                };
                counts[branch.index()] += 1;
                plan
            })
            .collect();

        let dive_hawks: Vec<usize> = plans
            .iter()
            .enumerate()
            .filter_map(|(i, p)| matches!(p, Plan::Dive { .. }).then_some(i))
            .collect();
        let dive_rates: Vec<f64> = dive_hawks
            .iter()
            .map(|&i| match plans[i] {
                Plan::Dive { candidate, .. } => candidate,
                Plan::Direct { .. } => unreachable!(),
            })
            .collect();
        let dive_fit = cache
            .evaluate_all(&dive_rates)
            .map_err(|(k, e)| tuning(dive_hawks[k], &trace, e))?;

        let mut next = Vec::with_capacity(h);
        let mut branches = Vec::with_capacity(h);
        let mut levy_flags = Vec::with_capacity(h);
        let mut dive_iter = dive_fit.iter().zip(&dive_rates);
        for (i, plan) in plans.iter().enumerate() {
            let (rate, branch, used_levy) = match *plan {
                Plan::Direct { rate, branch } => (rate, branch, false),
                Plan::Dive { branch, .. } => {
                    let (&cf, &cand) = dive_iter.next().unwrap();
                    let (rate, used) = dive_resolve(
                        cand,
                        cf,
                        fit[i],
                        &mut rng,
                        config.levy_beta,
                        config.levy_scale,
                    );
                    (rate, branch, used)
                }
            };
            let clamped = config.clamp(rate);
            debug_assert!((config.lower..=config.upper).contains(&clamped));
            next.push(clamped);
            branches.push(branch);
            levy_flags.push(used_levy);
        }

        let next_fit = cache
            .evaluate_all(&next)
            .map_err(|(i, e)| tuning(i, &trace, e))?;
        positions = next;
        fit = next_fit;

        for (i, (&rate, &f)) in positions.iter().zip(&fit).enumerate() {
            records.push(HawkRecord {
                iteration: t,
                hawk: i,
                rate,
                fitness: f,
                branch: branches[i],
                levy: levy_flags[i],
            });
        }
        let candidates = positions
            .iter()
            .zip(&fit)
            .chain(dive_rates.iter().zip(&dive_fit));
        for (&r, &f) in candidates {
            if f < rabbit_fit {
                rabbit = r;
                rabbit_fit = f;
            }
        }
        trace.push(rabbit_fit);
        log::debug!("hho iteration {t}: rabbit {rabbit:.6} fitness {rabbit_fit:.6}");
    }

    Ok(HhoResult {
        best_rate: rabbit,
        best_fitness: rabbit_fit,
        trace,
        initial,
        records,
        branch_counts: counts,
        evaluations: cache.calls(),
    })
}

fn argmin(rates: &[f64], fit: &[f64]) -> Option<(f64, f64)> {
    rates
        .iter()
        .zip(fit)
        .fold(None, |best: Option<(f64, f64)>, (&r, &f)| match best {
            Some((_, bf)) if bf <= f => best,
            _ => Some((r, f)),
        })
}
