//! Goal exploration engine.
//!
//! An exploration run alternates between sampling a goal in some goal space,
//! inferring motor parameters with a nearest-neighbour inverse model, running
//! the episode and storing the outcome for every goal module (hindsight).
//! Modular runs additionally pick the module to practise from its recent
//! learning progress.
//!
//! Random streams: motor babbling draws from [`Stream::Params`], exploration
//! noise from [`Stream::Noise`], goals from [`Stream::Goal`], module choices
//! from [`Stream::Module`] and each episode's dynamics from its own
//! [`episode_stream`]. Babbling episodes therefore coincide across strategies
//! that share a seed.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dmp::{integrate, random_params, DmpConfig, DmpParams};
use crate::env_sim::{engineered_features, rollout, EnvConfig, EnvVariant, Outcome, SceneState};
use crate::error::{argument, state, Error, Result};
use crate::renderer::{ImageDataset, RenderConfig};
use crate::representation::{ranges_of, train, Representation, TrainConfig, VaeArchitecture};
use crate::seeding::{self, episode_stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Random parameter exploration.
    Rpe,
    RgeEfr,
    RgeVae,
    /// Random babbling, then a representation trained on the babbling images.
    RgeOnline,
    MgeEfr,
    MgeVae,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Rpe,
        Strategy::RgeEfr,
        Strategy::RgeVae,
        Strategy::RgeOnline,
        Strategy::MgeEfr,
        Strategy::MgeVae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rpe => "RPE",
            Strategy::RgeEfr => "RGE-EFR",
            Strategy::RgeVae => "RGE-VAE",
            Strategy::RgeOnline => "RGE-Online",
            Strategy::MgeEfr => "MGE-EFR",
            Strategy::MgeVae => "MGE-VAE",
        }
    }

    /// Whether the run needs a pre-trained representation.
    pub fn needs_representation(self) -> bool {
        matches!(self, Strategy::RgeVae | Strategy::MgeVae)
    }

    pub fn is_modular(self) -> bool {
        matches!(self, Strategy::MgeEfr | Strategy::MgeVae)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().to_ascii_lowercase() == key)
            .ok_or_else(|| {
                argument(format!(
                    "unknown strategy {s:?}; expected one of rpe, rge-efr, rge-vae, rge-online, mge-efr, mge-vae"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    pub strategy: Strategy,
    /// Total episodes, babbling included.
    pub budget: usize,
    /// Random babbling episodes before goal sampling starts.
    pub bootstrap: usize,
    /// Babbling length of RGE-Online, after which its representation is
    /// trained.
    pub online_switch: usize,
    /// Minibatch iterations of the online representation training.
    pub online_iterations: usize,
    /// Standard deviation of the Gaussian noise added to inferred parameters.
    pub noise_sigma: f64,
    /// Latent dimensions per module for modular learned goal spaces.
    pub module_group_size: usize,
    pub interest_measure: InterestMeasure,
    pub interest_window: usize,
    pub interest_epsilon: f64,
    /// Total relative widening of learned goal bounds, split evenly between
    /// both ends.
    pub goal_expansion: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::RgeEfr,
            budget: 5000,
            bootstrap: 200,
            online_switch: 2000,
            online_iterations: 3000,
            noise_sigma: 0.05,
            module_group_size: 2,
            interest_measure: InterestMeasure::GoalProgress,
            interest_window: 40,
            interest_epsilon: 0.2,
            goal_expansion: 0.2,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(argument("budget must be positive"));
        }
        if self.bootstrap == 0 {
            return Err(argument("bootstrap must be at least one episode"));
        }
        if self.strategy == Strategy::RgeOnline && self.online_switch == 0 {
            return Err(argument("online_switch must be at least one episode"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(argument("noise_sigma must be finite and non-negative"));
        }
        if self.module_group_size == 0 {
            return Err(argument("module_group_size must be positive"));
        }
        if self.interest_window < 2 || !self.interest_window.is_multiple_of(2) {
            return Err(argument("interest_window must be even and at least 2"));
        }
        if !(0.0..=1.0).contains(&self.interest_epsilon) {
            return Err(argument("interest_epsilon must lie in [0, 1]"));
        }
        if !(self.goal_expansion >= 0.0) || !self.goal_expansion.is_finite() {
            return Err(argument("goal_expansion must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One episode of the exploration history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    /// 1-based.
    pub episode: usize,
    pub context: Vec<f64>,
    pub params: DmpParams,
    pub outcome: Outcome,
    /// The outcome in the goal space active when the episode ran.
    pub embedding: Option<Vec<f64>>,
    pub goal: Option<Vec<f64>>,
    pub module: Option<usize>,
    pub cost: Option<f64>,
}

/// How a module's learning progress is estimated from its recent episodes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterestMeasure {
    /// Window mean of per-episode progress, clipped at zero. Progress is the
    /// cost previously achieved on the nearest goal practised in the module
    /// minus the new cost, so goal difficulty cancels out.
    #[default]
    GoalProgress,
    /// Mean-shift of achieved costs between the older and newer half of the
    /// window.
    CostShift,
}

/// Sliding window of per-episode signals and the progress estimate built on
/// it: achieved costs for [`InterestMeasure::CostShift`], progress values for
/// [`InterestMeasure::GoalProgress`].
#[derive(Debug, Clone, PartialEq)]
pub struct InterestTracker {
    measure: InterestMeasure,
    size: usize,
    window: VecDeque<f64>,
}

impl InterestTracker {
    pub fn new(size: usize, measure: InterestMeasure) -> Result<Self> {
        if size < 2 || !size.is_multiple_of(2) {
            return Err(argument("interest window must be even and at least 2"));
        }
        Ok(Self {
            measure,
            size,
            window: VecDeque::with_capacity(size),
        })
    }

    pub fn measure(&self) -> InterestMeasure {
        self.measure
    }

    pub fn push(&mut self, value: f64) {
        if self.window.len() == self.size {
            self.window.pop_front();
        }
        self.window.push_back(value);
    }

    pub fn is_full(&self) -> bool {
        self.window.len() == self.size
    }

    /// Non-negative progress estimate; zero while the window fills.
    pub fn interest(&self) -> f64 {
        if !self.is_full() {
            return 0.0;
        }
        match self.measure {
            InterestMeasure::CostShift => {
                let half = self.size / 2;
                let old: f64 = self.window.iter().take(half).sum::<f64>() / half as f64;
                let new: f64 = self.window.iter().skip(half).sum::<f64>() / half as f64;
                (new - old).abs()
            }
            InterestMeasure::GoalProgress => {
                (self.window.iter().sum::<f64>() / self.size as f64).max(0.0)
            }
        }
    }
}

/// A slice of the goal space with its own sampler, cost and interest.
#[derive(Debug, Clone, PartialEq)]
pub struct GoalModule {
    pub id: usize,
    /// Goal-space dimensions selected by this module.
    pub dims: Vec<usize>,
    bounds: Option<Vec<[f64; 2]>>,
    pub interest: InterestTracker,
    /// Goals practised so far with the cost achieved on each (goal-progress
    /// measure only).
    practised: Vec<(Vec<f64>, f64)>,
}

impl GoalModule {
    pub fn new(
        id: usize,
        dims: Vec<usize>,
        interest_window: usize,
        measure: InterestMeasure,
    ) -> Result<Self> {
        if dims.is_empty() {
            return Err(argument("a goal module needs at least one dimension"));
        }
        Ok(Self {
            id,
            dims,
            bounds: None,
            interest: InterestTracker::new(interest_window, measure)?,
            practised: Vec::new(),
        })
    }

    pub fn bounds(&self) -> Option<&[[f64; 2]]> {
        self.bounds.as_deref()
    }

    pub fn set_bounds(&mut self, bounds: Vec<[f64; 2]>) -> Result<()> {
        if bounds.len() != self.dims.len() {
            return Err(argument(format!(
                "module {} has {} dimensions, got {} bounds",
                self.id,
                self.dims.len(),
                bounds.len()
            )));
        }
        if bounds
            .iter()
            .any(|&[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
        {
            return Err(argument("goal bounds must be finite with min <= max"));
        }
        self.bounds = Some(bounds);
        Ok(())
    }

    /// `P_k x`.
    pub fn project(&self, point: &[f64]) -> Vec<f64> {
        self.dims.iter().map(|&d| point[d]).collect()
    }

    /// Euclidean distance between a goal and the projected goal-space point.
    pub fn cost(&self, goal: &[f64], point: &[f64]) -> f64 {
        self.dims
            .iter()
            .zip(goal)
            .map(|(&d, &g)| (point[d] - g).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Feeds the cost achieved on a goal of this module to its interest.
    pub fn record(&mut self, goal: &[f64], cost: f64) {
        let signal = match self.interest.measure() {
            InterestMeasure::CostShift => cost,
            InterestMeasure::GoalProgress => {
                let mut best: Option<(f64, f64)> = None;
                for (g, c) in &self.practised {
                    let d: f64 = g.iter().zip(goal).map(|(a, b)| (a - b) * (a - b)).sum();
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, *c));
                    }
                }
                self.practised.push((goal.to_vec(), cost));
                best.map_or(0.0, |(_, before)| before - cost)
            }
        };
        self.interest.push(signal);
    }

    /// Goal drawn uniformly from the module's box.
    pub fn sample_goal<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        let bounds = self
            .bounds
            .as_ref()
            .ok_or_else(|| state(format!("goal bounds of module {} are not set", self.id)))?;
        Ok(bounds
            .iter()
            .map(|&[lo, hi]| {
                let u: f64 = rng.random();
                lo + u * (hi - lo)
            })
            .collect())
    }
}

/// Module selection probabilities: an `epsilon` share spread uniformly, the
/// rest proportional to interest (uniform when every interest is zero).
pub fn module_probabilities(interests: &[f64], epsilon: f64) -> Vec<f64> {
    let n = interests.len() as f64;
    let total: f64 = interests.iter().sum();
    interests
        .iter()
        .map(|&i| {
            let share = if total > 0.0 { i / total } else { 1.0 / n };
            epsilon / n + (1.0 - epsilon) * share
        })
        .collect()
}

/// Draws a module index from [`module_probabilities`].
pub fn sample_module<R: Rng + ?Sized>(
    interests: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<usize> {
    if interests.is_empty() {
        return Err(argument("no modules to sample from"));
    }
    if interests.iter().any(|&i| !(i >= 0.0) || !i.is_finite()) {
        return Err(argument("interests must be finite and non-negative"));
    }
    let probs = module_probabilities(interests, epsilon);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(k);
        }
    }
    Ok(probs.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
struct Database {
    key_len: usize,
    keys: Vec<f64>,
}

/// Nearest-neighbour inverse model with one database per goal module.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaPolicy {
    pub sigma: f64,
    context_len: usize,
    projections: Vec<Vec<usize>>,
    databases: Vec<Database>,
    params: Vec<DmpParams>,
}

impl MetaPolicy {
    pub fn new(context_len: usize, projections: Vec<Vec<usize>>, sigma: f64) -> Self {
        let databases = projections
            .iter()
            .map(|dims| Database {
                key_len: context_len + dims.len(),
                keys: Vec::new(),
            })
            .collect();
        Self {
            sigma,
            context_len,
            projections,
            databases,
            params: Vec::new(),
        }
    }

    pub fn modules(&self) -> usize {
        self.databases.len()
    }

    /// Records in module `k`'s database.
    pub fn len(&self, k: usize) -> usize {
        let db = &self.databases[k];
        db.keys.len() / db.key_len
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Adds `(c, θ, P_k x)` to every module database.
    pub fn update(&mut self, context: &[f64], params: &DmpParams, point: &[f64]) -> Result<()> {
        if context.len() != self.context_len {
            return Err(argument(format!(
                "context has {} entries, expected {}",
                context.len(),
                self.context_len
            )));
        }
        for dims in &self.projections {
            if let Some(&d) = dims.iter().find(|&&d| d >= point.len()) {
                return Err(argument(format!(
                    "goal-space point has {} dimensions, module uses {d}",
                    point.len()
                )));
            }
        }
        for (db, dims) in self.databases.iter_mut().zip(&self.projections) {
            db.keys.extend_from_slice(context);
            db.keys.extend(dims.iter().map(|&d| point[d]));
        }
        self.params.push(params.clone());
        Ok(())
    }

    /// Index of the record of module `k` nearest to `(c, τ)`; ties go to the
    /// earliest record.
    pub fn nearest(&self, context: &[f64], goal: &[f64], k: usize) -> Result<usize> {
        let db = self
            .databases
            .get(k)
            .ok_or_else(|| argument(format!("no module {k}")))?;
        if context.len() + goal.len() != db.key_len {
            return Err(argument(format!(
                "query has {} entries, database keys have {}",
                context.len() + goal.len(),
                db.key_len
            )));
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, key) in db.keys.chunks_exact(db.key_len).enumerate() {
            let (kc, kg) = key.split_at(context.len());
            let d: f64 = kc
                .iter()
                .zip(context)
                .chain(kg.iter().zip(goal))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
            .ok_or_else(|| state(format!("database of module {k} is empty")))
    }

    /// Parameters of the nearest record plus clipped Gaussian noise.
    pub fn infer<R: Rng + ?Sized>(
        &self,
        context: &[f64],
        goal: &[f64],
        k: usize,
        rng: &mut R,
    ) -> Result<DmpParams> {
        let base = &self.params[self.nearest(context, goal, k)?];
        let noise = Normal::new(0.0, self.sigma).map_err(|e| argument(e.to_string()))?;
        DmpParams::new(
            base.as_slice()
                .iter()
                .map(|&p| p + noise.sample(rng))
                .collect(),
        )
    }
}

fn ensure_finite(point: &[f64], episode: usize) -> Result<()> {
    if point.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite goal-space point at episode {episode}"
        )))
    }
}

/// Where goal-space points come from.
#[derive(Debug, Clone, Copy)]
pub enum GoalSpace<'a> {
    Engineered,
    Learned(&'a Representation),
}

impl GoalSpace<'_> {
    pub fn point(&self, outcome: &Outcome) -> Result<Vec<f64>> {
        match self {
            GoalSpace::Engineered => Ok(outcome.engineered_features.clone()),
            GoalSpace::Learned(model) => model.embed(&outcome.image),
        }
    }

    pub fn dim(&self, env: &EnvConfig) -> usize {
        match self {
            GoalSpace::Engineered => env.variant.feature_len(),
            GoalSpace::Learned(model) => model.latent_dim(),
        }
    }
}

/// Physical bounds of the engineered features.
pub fn engineered_bounds(env: &EnvConfig) -> Vec<[f64; 2]> {
    match env.variant {
        EnvVariant::ArmBall => vec![
            [-1.0, 1.0],
            [-1.0, 1.0],
            [env.ring_radius, env.ring_radius],
            [0.0, std::f64::consts::TAU],
        ],
        EnvVariant::Arm2Balls => vec![[-1.0, 1.0]; 6],
    }
}

/// Per-dimension `[min, max]` widened by `expansion` of the width in total.
pub fn expand_bounds(ranges: &[[f64; 2]], expansion: f64) -> Vec<[f64; 2]> {
    ranges
        .iter()
        .map(|&[lo, hi]| {
            let pad = 0.5 * expansion * (hi - lo);
            [lo - pad, hi + pad]
        })
        .collect()
}

/// Goal-space dimension groups: one group for random goal exploration,
/// per-object groups (engineered) or contiguous latent groups (learned) for
/// modular exploration.
pub fn module_partition(
    strategy: Strategy,
    variant: EnvVariant,
    goal_dim: usize,
    group_size: usize,
) -> Vec<Vec<usize>> {
    match strategy {
        Strategy::MgeEfr => (0..variant.feature_len())
            .collect::<Vec<_>>()
            .chunks(2)
            .map(<[usize]>::to_vec)
            .collect(),
        Strategy::MgeVae => (0..goal_dim)
            .collect::<Vec<_>>()
            .chunks(group_size.max(1))
            .map(<[usize]>::to_vec)
            .collect(),
        _ => vec![(0..goal_dim).collect()],
    }
}

/// Everything a run needs besides its seed.
#[derive(Debug, Clone, Copy)]
pub struct RunSetup<'a> {
    pub env: &'a EnvConfig,
    pub dmp: &'a DmpConfig,
    pub render: &'a RenderConfig,
    pub exploration: &'a ExplorationConfig,
    /// Pre-trained representation for RGE-VAE and MGE-VAE.
    pub representation: Option<&'a Representation>,
    /// Architecture and training settings for RGE-Online; the training seed
    /// is replaced by the run seed.
    pub online: Option<(&'a VaeArchitecture, &'a TrainConfig)>,
}

#[derive(Debug)]
pub struct ExplorationRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub history: Vec<HistoryEntry>,
    /// Goal modules with their final interest windows (empty for RPE).
    pub modules: Vec<GoalModule>,
    /// Databases of the inverse model (absent for RPE).
    pub meta: Option<MetaPolicy>,
    /// Representation trained during an RGE-Online run.
    pub online_model: Option<Representation>,
}

impl ExplorationRun {
    /// Share of episodes in `range` (1-based, inclusive) that pursued module
    /// `k`.
    pub fn module_share(&self, k: usize, first: usize, last: usize) -> f64 {
        let picked: Vec<_> = self
            .history
            .iter()
            .filter(|e| (first..=last).contains(&e.episode))
            .collect();
        if picked.is_empty() {
            return 0.0;
        }
        picked.iter().filter(|e| e.module == Some(k)).count() as f64 / picked.len() as f64
    }
}

struct Explorer<'a> {
    setup: RunSetup<'a>,
    seed: u64,
    params_rng: seeding::Rng,
    noise_rng: seeding::Rng,
    goal_rng: seeding::Rng,
    module_rng: seeding::Rng,
    initial: SceneState,
    context: Vec<f64>,
    history: Vec<HistoryEntry>,
}

impl<'a> Explorer<'a> {
    fn new(setup: RunSetup<'a>, seed: u64) -> Result<Self> {
        setup.env.validate()?;
        setup.dmp.validate(setup.env.episode_steps)?;
        setup.render.validate()?;
        setup.exploration.validate()?;
        let initial = setup.env.initial_state();
        let context = engineered_features(&initial, setup.env);
        Ok(Self {
            setup,
            seed,
            params_rng: seeding::stream(seed, Stream::Params),
            noise_rng: seeding::stream(seed, Stream::Noise),
            goal_rng: seeding::stream(seed, Stream::Goal),
            module_rng: seeding::stream(seed, Stream::Module),
            initial,
            context,
            history: Vec::with_capacity(setup.exploration.budget),
        })
    }

    fn execute(&self, params: &DmpParams) -> Result<Outcome> {
        let env = self.setup.env;
        let traj = integrate(params, &self.initial.joint_angles, self.setup.dmp, env)?;
        let mut rng = episode_stream(self.seed, self.history.len());
        rollout(env, self.setup.render, &traj, &self.initial, &mut rng)
    }

    fn babble(&mut self, until: usize) -> Result<()> {
        while self.history.len() < until {
            let params = random_params(self.setup.env.n_joints, &mut self.params_rng);
            let outcome = self.execute(&params)?;
            self.history.push(HistoryEntry {
                episode: self.history.len() + 1,
                context: self.context.clone(),
                params,
                outcome,
                embedding: None,
                goal: None,
                module: None,
                cost: None,
            });
        }
        Ok(())
    }

    /// Goal-space points of the whole history so far.
    fn points(&self, space: GoalSpace<'_>) -> Result<Vec<Vec<f64>>> {
        match space {
            GoalSpace::Engineered => Ok(self
                .history
                .iter()
                .map(|e| e.outcome.engineered_features.clone())
                .collect()),
            GoalSpace::Learned(model) => {
                let images: Vec<_> = self
                    .history
                    .iter()
                    .map(|e| e.outcome.image.clone())
                    .collect();
                model.embed_all(&images)
            }
        }
    }

    /// Goal-directed episodes until the budget is spent.
    fn explore(
        mut self,
        strategy: Strategy,
        space: GoalSpace<'_>,
    ) -> Result<(Vec<HistoryEntry>, Vec<GoalModule>, MetaPolicy)> {
        let env = self.setup.env;
        let cfg = self.setup.exploration;
        let dim = space.dim(env);
        let points = self.points(space)?;
        for (i, p) in points.iter().enumerate() {
            ensure_finite(p, i + 1)?;
        }
        let full_bounds = match space {
            GoalSpace::Engineered => engineered_bounds(env),
            GoalSpace::Learned(_) => expand_bounds(&ranges_of(&points), cfg.goal_expansion),
        };
        let partition = module_partition(strategy, env.variant, dim, cfg.module_group_size);
        let mut modules = Vec::with_capacity(partition.len());
        for (id, dims) in partition.iter().enumerate() {
            let mut m =
                GoalModule::new(id, dims.clone(), cfg.interest_window, cfg.interest_measure)?;
            m.set_bounds(dims.iter().map(|&d| full_bounds[d]).collect())?;
            modules.push(m);
        }
        let mut meta = MetaPolicy::new(self.context.len(), partition, cfg.noise_sigma);
        for (entry, point) in self.history.iter().zip(&points) {
            meta.update(&entry.context, &entry.params, point)?;
        }

        while self.history.len() < cfg.budget {
            let k = if modules.len() == 1 {
                0
            } else {
                let interests: Vec<f64> = modules.iter().map(|m| m.interest.interest()).collect();
                sample_module(&interests, cfg.interest_epsilon, &mut self.module_rng)?
            };
            let goal = modules[k].sample_goal(&mut self.goal_rng)?;
            let params = meta.infer(&self.context, &goal, k, &mut self.noise_rng)?;
            let outcome = self.execute(&params)?;
            let point = space.point(&outcome)?;
            ensure_finite(&point, self.history.len() + 1)?;
            let cost = modules[k].cost(&goal, &point);
            modules[k].record(&goal, cost);
            meta.update(&self.context, &params, &point)?;
            self.history.push(HistoryEntry {
                episode: self.history.len() + 1,
                context: self.context.clone(),
                params,
                outcome,
                embedding: Some(point),
                goal: Some(goal),
                module: Some(k),
                cost: Some(cost),
            });
        }
        Ok((self.history, modules, meta))
    }
}

/// `n` random-parameter episodes.
pub fn bootstrap(setup: RunSetup<'_>, seed: u64, n: usize) -> Result<Vec<HistoryEntry>> {
    if n == 0 {
        return Err(argument("bootstrap needs at least one episode"));
    }
    let mut ex = Explorer::new(setup, seed)?;
    ex.babble(n)?;
    Ok(ex.history)
}

/// Runs one full exploration of `setup.exploration.budget` episodes.
pub fn run_exploration(setup: RunSetup<'_>, seed: u64) -> Result<ExplorationRun> {
    let cfg = setup.exploration;
    let strategy = cfg.strategy;
    if strategy.needs_representation() && setup.representation.is_none() {
        return Err(argument(format!(
            "{strategy} needs a trained representation"
        )));
    }
    if strategy == Strategy::RgeOnline && setup.online.is_none() {
        return Err(argument(
            "RGE-Online needs representation training settings",
        ));
    }
    let mut ex = Explorer::new(setup, seed)?;
    let mut online_model = None;
    let (history, modules, meta) = match strategy {
        Strategy::Rpe => {
            ex.babble(cfg.budget)?;
            (ex.history, Vec::new(), None)
        }
        Strategy::RgeEfr | Strategy::MgeEfr => {
            ex.babble(cfg.bootstrap.min(cfg.budget))?;
            let (h, m, meta) = ex.explore(strategy, GoalSpace::Engineered)?;
            (h, m, Some(meta))
        }
        Strategy::RgeVae | Strategy::MgeVae => {
            let model = setup.representation.expect("checked above");
            ex.babble(cfg.bootstrap.min(cfg.budget))?;
            let (h, m, meta) = ex.explore(strategy, GoalSpace::Learned(model))?;
            (h, m, Some(meta))
        }
        Strategy::RgeOnline => {
            let switch = cfg.online_switch.min(cfg.budget);
            ex.babble(switch)?;
            if switch == cfg.budget {
                (ex.history, Vec::new(), None)
            } else {
                let (arch, train_cfg) = setup.online.expect("checked above");
                let mut dataset = ImageDataset::new(arch.image_size);
                for e in &ex.history {
                    dataset.push(e.outcome.image.clone())?;
                }
                let train_cfg = TrainConfig {
                    iterations: cfg.online_iterations,
                    seed,
                    ..train_cfg.clone()
                };
                let model = train(&dataset, arch, &train_cfg)?.model;
                let (h, m, meta) = ex.explore(Strategy::RgeOnline, GoalSpace::Learned(&model))?;
                online_model = Some(model);
                (h, m, Some(meta))
            }
        }
    };
    Ok(ExplorationRun {
        strategy,
        seed,
        history,
        modules,
        meta,
        online_model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::representation::Precision;
    use rand::SeedableRng;

    fn rng(seed: u64) -> seeding::Rng {
        seeding::Rng::seed_from_u64(seed)
    }

    struct Fixture {
        env: EnvConfig,
        dmp: DmpConfig,
        render: RenderConfig,
        exploration: ExplorationConfig,
    }

    impl Fixture {
        fn new(env: EnvConfig, strategy: Strategy, budget: usize) -> Self {
            let dmp = DmpConfig::standard(env.episode_steps);
            Self {
                env,
                dmp,
                render: RenderConfig::default(),
                exploration: ExplorationConfig {
                    strategy,
                    budget,
                    bootstrap: 20,
                    ..ExplorationConfig::default()
                },
            }
        }

        fn setup(&self) -> RunSetup<'_> {
            RunSetup {
                env: &self.env,
                dmp: &self.dmp,
                render: &self.render,
                exploration: &self.exploration,
                representation: None,
                online: None,
            }
        }
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("mge_efr".parse::<Strategy>().unwrap(), Strategy::MgeEfr);
        assert!(matches!(
            "rge-magic".parse::<Strategy>(),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn degenerate_box_returns_its_point() {
        let mut m = GoalModule::new(0, vec![0, 1], 4, InterestMeasure::CostShift).unwrap();
        m.set_bounds(vec![[0.3, 0.3], [-0.2, -0.2]]).unwrap();
        assert_eq!(m.sample_goal(&mut rng(1)).unwrap(), vec![0.3, -0.2]);
    }

    #[test]
    fn goals_stay_in_box_with_centred_mean() {
        let mut m = GoalModule::new(0, vec![0, 1], 4, InterestMeasure::CostShift).unwrap();
        m.set_bounds(vec![[-1.0, 1.0], [2.0, 4.0]]).unwrap();
        let mut r = rng(2);
        let n = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let g = m.sample_goal(&mut r).unwrap();
            assert!((-1.0..=1.0).contains(&g[0]) && (2.0..=4.0).contains(&g[1]));
            sum[0] += g[0];
            sum[1] += g[1];
        }
        // within 1% of the box width
        assert!((sum[0] / n as f64).abs() < 0.02);
        assert!((sum[1] / n as f64 - 3.0).abs() < 0.02);
    }

    #[test]
    fn unset_bounds_is_a_state_error() {
        let m = GoalModule::new(0, vec![0], 4, InterestMeasure::CostShift).unwrap();
        assert!(matches!(m.sample_goal(&mut rng(0)), Err(Error::State(_))));
    }

    #[test]
    fn cost_shift_of_linear_costs() {
        let mut t = InterestTracker::new(4, InterestMeasure::CostShift).unwrap();
        for c in [10.0, 9.0, 8.0] {
            t.push(c);
            assert_eq!(t.interest(), 0.0);
        }
        t.push(7.0);
        assert_eq!(t.interest(), 2.0);
        for _ in 0..4 {
            t.push(1.5);
        }
        assert_eq!(t.interest(), 0.0);
    }

    #[test]
    fn odd_window_rejected() {
        assert!(InterestTracker::new(3, InterestMeasure::GoalProgress).is_err());
        assert!(InterestTracker::new(0, InterestMeasure::CostShift).is_err());
    }

    #[test]
    fn goal_progress_uses_nearest_practised_goal() {
        let mut m = GoalModule::new(0, vec![0], 2, InterestMeasure::GoalProgress).unwrap();
        m.record(&[0.0], 1.0); // nothing practised: progress 0
        m.record(&[5.0], 3.0); // nearest is 0.0 → 1 - 3 = -2
        assert_eq!(m.interest.interest(), 0.0);
        m.record(&[4.9], 0.5); // nearest is 5.0 → 3 - 0.5 = 2.5
        m.record(&[0.1], 0.2); // nearest is 0.0 → 1 - 0.2 = 0.8
        assert!((m.interest.interest() - 1.65).abs() < 1e-12);
    }

    #[test]
    fn goal_progress_never_negative() {
        let mut m = GoalModule::new(0, vec![0], 2, InterestMeasure::GoalProgress).unwrap();
        for (i, c) in [0.1, 0.5, 0.9, 1.3].into_iter().enumerate() {
            m.record(&[i as f64 * 0.01], c);
        }
        assert_eq!(m.interest.interest(), 0.0);
    }

    #[test]
    fn module_sampling_frequencies() {
        let mut r = rng(3);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_module(&[3.0, 1.0], 0.2, &mut r).unwrap() == 0)
            .count();
        assert!((hits as f64 / n as f64 - 0.70).abs() < 0.01);
        for _ in 0..100 {
            assert_eq!(sample_module(&[1.0, 0.0, 0.0], 0.0, &mut r).unwrap(), 0);
            assert_eq!(sample_module(&[0.4], 0.2, &mut r).unwrap(), 0);
        }
    }

    #[test]
    fn probabilities_normalized_with_floor() {
        for interests in [vec![0.0, 0.0, 0.0], vec![5.0, 0.0, 1e-9], vec![0.2, 0.3]] {
            let p = module_probabilities(&interests, 0.2);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.2 / interests.len() as f64 - 1e-12));
        }
        assert!(sample_module(&[1.0, -0.1], 0.2, &mut rng(0)).is_err());
        assert!(sample_module(&[], 0.2, &mut rng(0)).is_err());
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut r = rng(4);
        for _ in 0..100 {
            let mut meta = MetaPolicy::new(2, vec![vec![0, 1, 2]], 0.0);
            let mut keys = Vec::new();
            for _ in 0..20 {
                let c = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
                let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
                meta.update(&c, &random_params(2, &mut r), &x).unwrap();
                keys.push([c, x].concat());
            }
            let q: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
            let dist = |k: &[f64]| k.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let mut expect = 0;
            for (i, k) in keys.iter().enumerate() {
                if dist(k) < dist(&keys[expect]) {
                    expect = i;
                }
            }
            assert_eq!(meta.nearest(&q[..2], &q[2..], 0).unwrap(), expect);
        }
    }

    #[test]
    fn exact_query_returns_stored_params() {
        let mut r = rng(5);
        let mut meta = MetaPolicy::new(1, vec![vec![0, 1]], 0.0);
        let mut stored = Vec::new();
        for _ in 0..30 {
            let p = random_params(3, &mut r);
            let x = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
            meta.update(&[0.5], &p, &x).unwrap();
            stored.push((p, x));
        }
        for (p, x) in &stored {
            assert_eq!(&meta.infer(&[0.5], x, 0, &mut r).unwrap(), p);
        }
    }

    #[test]
    fn ties_go_to_earliest_record() {
        let mut r = rng(6);
        let mut meta = MetaPolicy::new(0, vec![vec![0]], 0.0);
        meta.update(&[], &random_params(1, &mut r), &[1.0]).unwrap();
        meta.update(&[], &random_params(1, &mut r), &[-1.0])
            .unwrap();
        assert_eq!(meta.nearest(&[], &[0.0], 0).unwrap(), 0);
    }

    #[test]
    fn inferred_params_are_clipped() {
        let mut r = rng(7);
        let mut meta = MetaPolicy::new(0, vec![vec![0]], 5.0);
        meta.update(&[], &DmpParams::new(vec![1.0; 8]).unwrap(), &[0.0])
            .unwrap();
        for _ in 0..50 {
            let p = meta.infer(&[], &[0.0], 0, &mut r).unwrap();
            assert!(p.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn engineered_partitions() {
        assert_eq!(
            module_partition(Strategy::MgeEfr, EnvVariant::Arm2Balls, 6, 2),
            vec![vec![0, 1], vec![2, 3], vec![4, 5]]
        );
        assert_eq!(
            module_partition(Strategy::MgeEfr, EnvVariant::ArmBall, 4, 2).len(),
            2
        );
        assert_eq!(
            module_partition(Strategy::MgeVae, EnvVariant::ArmBall, 10, 2).len(),
            5
        );
        assert_eq!(
            module_partition(Strategy::RgeVae, EnvVariant::ArmBall, 10, 2),
            vec![(0..10).collect::<Vec<_>>()]
        );
    }

    #[test]
    fn expansion_is_symmetric() {
        assert_eq!(
            expand_bounds(&[[0.0, 1.0], [-2.0, 2.0]], 0.2),
            vec![[-0.1, 1.1], [-2.4, 2.4]]
        );
    }

    #[test]
    fn modular_run_fills_every_database() {
        let fx = Fixture::new(EnvConfig::arm_two_balls(), Strategy::MgeEfr, 120);
        let run = run_exploration(fx.setup(), 11).unwrap();
        assert_eq!(run.history.len(), 120);
        let meta = run.meta.as_ref().unwrap();
        assert_eq!(meta.modules(), 3);
        for k in 0..3 {
            assert_eq!(meta.len(k), 120);
        }
        assert!(run.history[..20].iter().all(|e| e.goal.is_none()));
        assert!(run.history[20..]
            .iter()
            .all(|e| e.module.is_some() && e.cost.is_some()));
        let shares: f64 = (0..3).map(|k| run.module_share(k, 21, 120)).sum();
        assert!((shares - 1.0).abs() < 1e-12);
    }

    #[test]
    fn runs_are_deterministic() {
        for strategy in [Strategy::Rpe, Strategy::RgeEfr, Strategy::MgeEfr] {
            let fx = Fixture::new(EnvConfig::arm_two_balls(), strategy, 60);
            let a = run_exploration(fx.setup(), 3).unwrap();
            let b = run_exploration(fx.setup(), 3).unwrap();
            assert_eq!(a.history, b.history);
            let c = run_exploration(fx.setup(), 4).unwrap();
            assert_ne!(a.history, c.history);
        }
    }

    #[test]
    fn budget_counts_every_episode() {
        for budget in [1, 10, 45] {
            let fx = Fixture::new(EnvConfig::arm_ball(), Strategy::RgeEfr, budget);
            let run = run_exploration(fx.setup(), 0).unwrap();
            assert_eq!(run.history.len(), budget);
            assert!(run
                .history
                .iter()
                .enumerate()
                .all(|(i, e)| e.episode == i + 1));
        }
    }

    #[test]
    fn babbling_is_shared_across_strategies() {
        let rpe = Fixture::new(EnvConfig::arm_ball(), Strategy::Rpe, 40);
        let rge = Fixture::new(EnvConfig::arm_ball(), Strategy::RgeEfr, 40);
        let a = run_exploration(rpe.setup(), 9).unwrap();
        let b = run_exploration(rge.setup(), 9).unwrap();
        assert_eq!(a.history[..20], b.history[..20]);
        assert_eq!(a.history[..20], bootstrap(rpe.setup(), 9, 20).unwrap()[..]);
    }

    #[test]
    fn online_run_starts_as_random_babbling() {
        let mut fx = Fixture::new(EnvConfig::arm_ball(), Strategy::RgeOnline, 40);
        fx.exploration.online_switch = 30;
        fx.exploration.online_iterations = 2;
        let arch = VaeArchitecture::desk();
        let train_cfg = TrainConfig {
            batch_size: 4,
            precision: Precision::F32,
            ..TrainConfig::desk(0)
        };
        let setup = RunSetup {
            online: Some((&arch, &train_cfg)),
            ..fx.setup()
        };
        let online = run_exploration(setup, 2).unwrap();
        let mut rpe_cfg = fx.exploration.clone();
        rpe_cfg.strategy = Strategy::Rpe;
        let rpe = run_exploration(
            RunSetup {
                exploration: &rpe_cfg,
                ..fx.setup()
            },
            2,
        )
        .unwrap();
        assert_eq!(online.history[..30], rpe.history[..30]);
        assert!(online.history[30..].iter().all(|e| e.goal.is_some()));
        assert!(online.online_model.is_some());
    }

    #[test]
    fn missing_representation_rejected() {
        let fx = Fixture::new(EnvConfig::arm_ball(), Strategy::RgeVae, 10);
        assert!(matches!(
            run_exploration(fx.setup(), 0),
            Err(Error::Argument(_))
        ));
        let fx = Fixture::new(EnvConfig::arm_ball(), Strategy::RgeOnline, 10);
        assert!(matches!(
            run_exploration(fx.setup(), 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = [
            ExplorationConfig {
                budget: 0,
                ..Default::default()
            },
            ExplorationConfig {
                interest_window: 5,
                ..Default::default()
            },
            ExplorationConfig {
                interest_epsilon: 1.5,
                ..Default::default()
            },
            ExplorationConfig {
                noise_sigma: f64::NAN,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        assert!(ExplorationConfig::default().validate().is_ok());
    }
}
