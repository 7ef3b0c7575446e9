//! The train-interaction loop, run configuration and persistence.

pub mod metrics;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, Algo, LearnerConfig};
use crate::augment::LossWeights;
use crate::dqn::{act, Checkpoint, CheckpointManifest, EpsilonSchedule, NStepAccumulator};
use crate::env::{Action, Environment, PixelTaxi, TaxiConfig, TaxiState};
use crate::error::{Error, Result};
use crate::feedback::FeedbackBuffer;
use crate::nn::QNetworkSpec;
use crate::oracle::oracle_feedback;
use crate::state::{preprocess, RawFrame, StackedState};

pub use metrics::{EpisodeMetrics, MetricsWriter};

pub const CHECKPOINT_EVERY: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    Oracle,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkSize {
    Standard,
    Tiny,
}

/// Flat run configuration; keys follow the hyperparameter table names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algo: Algo,
    pub env: String,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub feedback: FeedbackMode,
    /// Episodes between queries; 4 with the oracle, 10 with a human when unset.
    pub feedback_frequency: Option<usize>,
    /// Fraction of trajectory steps the oracle labels.
    pub feedback_density: f64,
    pub update_interval: usize,
    pub grid_size: usize,
    pub n_passengers: usize,
    pub max_steps: usize,
    pub cell_px: usize,
    pub network: NetworkSize,
    pub discount_factor: f64,
    pub replay_buffer_size: usize,
    pub batch_size: usize,
    pub feedback_buffer_size: usize,
    pub feedback_batch_size: usize,
    pub learning_rate: f64,
    pub prioritized_replay_alpha: f64,
    pub prioritized_replay_beta: f64,
    pub priority_epsilon: f64,
    pub advantage_loss_margin: f64,
    pub multi_step_returns: usize,
    pub epsilon_decay: f64,
    pub soft_update_tau: f64,
    pub advantage_weight: f64,
    pub invariance_weight: f64,
    pub augmentation: String,
    pub checkpoint_every: usize,
    /// Annotation time budget per human query.
    pub session_budget_secs: f64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let taxi = TaxiConfig::default();
        let learner = LearnerConfig::new(Action::ALL.len());
        Self {
            algo: Algo::Expand,
            env: "pixel-taxi".into(),
            episodes: 500,
            seeds: vec![0, 1, 2, 3, 4],
            feedback: FeedbackMode::Oracle,
            feedback_frequency: None,
            feedback_density: 1.0,
            update_interval: 4,
            grid_size: taxi.grid_size,
            n_passengers: taxi.n_passengers,
            max_steps: taxi.max_steps,
            cell_px: taxi.cell_px,
            network: NetworkSize::Standard,
            discount_factor: learner.gamma,
            replay_buffer_size: learner.replay_capacity,
            batch_size: learner.batch_size,
            feedback_buffer_size: learner.feedback_capacity,
            feedback_batch_size: learner.feedback_batch_size,
            learning_rate: learner.learning_rate,
            prioritized_replay_alpha: learner.alpha,
            prioritized_replay_beta: learner.beta,
            priority_epsilon: learner.priority_eps,
            advantage_loss_margin: learner.margin,
            multi_step_returns: learner.n_step,
            epsilon_decay: learner.epsilon_decay,
            soft_update_tau: learner.tau,
            advantage_weight: learner.loss_weights.advantage,
            invariance_weight: learner.loss_weights.invariance,
            augmentation: learner.preset,
            checkpoint_every: CHECKPOINT_EVERY,
            session_budget_secs: 300.0,
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.env != "pixel-taxi" {
            return bad(&format!("unsupported env `{}`", self.env));
        }
        if self.feedback_frequency == Some(0) {
            return bad("feedback_frequency must be >= 1");
        }
        if self.update_interval == 0 {
            return bad("update_interval must be >= 1");
        }
        if self.multi_step_returns == 0 || self.batch_size == 0 || self.feedback_batch_size == 0 {
            return bad("multi_step_returns, batch_size and feedback_batch_size must be >= 1");
        }
        if self.replay_buffer_size < self.batch_size || self.feedback_buffer_size == 0 {
            return bad("buffers must hold at least one batch");
        }
        if !(0.0..=1.0).contains(&self.feedback_density) {
            return bad("feedback_density must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.soft_update_tau) || !(0.0..=1.0).contains(&self.discount_factor) {
            return bad("soft_update_tau and discount_factor must lie in [0, 1]");
        }
        if self.advantage_loss_margin <= 0.0 {
            return bad("advantage_loss_margin must be positive");
        }
        if self.advantage_weight < 0.0 || self.invariance_weight < 0.0 {
            return bad("loss weights must be nonnegative");
        }
        if self.session_budget_secs <= 0.0 {
            return bad("session_budget_secs must be positive");
        }
        self.taxi().validate()?;
        crate::augment::AugmentationPreset::named(&self.augmentation)?;
        Ok(())
    }

    pub fn feedback_frequency(&self) -> usize {
        self.feedback_frequency.unwrap_or(match self.feedback {
            FeedbackMode::Oracle => 4,
            FeedbackMode::Human => 10,
        })
    }

    pub fn taxi(&self) -> TaxiConfig {
        TaxiConfig {
            grid_size: self.grid_size,
            n_passengers: self.n_passengers,
            max_steps: self.max_steps,
            cell_px: self.cell_px,
        }
    }

    pub fn learner(&self) -> LearnerConfig {
        let actions = Action::ALL.len();
        LearnerConfig {
            spec: match self.network {
                NetworkSize::Standard => QNetworkSpec::standard(actions),
                NetworkSize::Tiny => QNetworkSpec::tiny(actions),
            },
            gamma: self.discount_factor,
            n_step: self.multi_step_returns,
            batch_size: self.batch_size,
            feedback_batch_size: self.feedback_batch_size,
            learning_rate: self.learning_rate,
            alpha: self.prioritized_replay_alpha,
            beta: self.prioritized_replay_beta,
            priority_eps: self.priority_epsilon,
            tau: self.soft_update_tau,
            margin: self.advantage_loss_margin,
            loss_weights: LossWeights {
                advantage: self.advantage_weight,
                invariance: self.invariance_weight,
            },
            preset: self.augmentation.clone(),
            replay_capacity: self.replay_buffer_size,
            feedback_capacity: self.feedback_buffer_size,
            epsilon_decay: self.epsilon_decay,
        }
    }

    /// Output directory of one seed.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(self.algo.as_str()).join(format!("seed{seed}"))
    }
}

/// One step of the most recent episode, as shown to the trainer.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub taxi: TaxiState,
    pub frame: RawFrame,
    pub state: StackedState,
    pub action: usize,
}

/// Source of feedback for a queried trajectory.
pub trait FeedbackProvider {
    /// Obtain feedback on `trajectory` and append it to `buffer`; returns the
    /// number of records appended.
    fn collect(&mut self, episode: usize, trajectory: &[TrajectoryStep], buffer: &FeedbackBuffer) -> Result<usize>;
}

/// In-process scripted trainer.
#[derive(Debug, Clone, Copy)]
pub struct OracleProvider {
    pub density: f64,
}

impl FeedbackProvider for OracleProvider {
    fn collect(&mut self, _episode: usize, trajectory: &[TrajectoryStep], buffer: &FeedbackBuffer) -> Result<usize> {
        let steps: Vec<_> = trajectory
            .iter()
            .map(|s| (s.taxi.clone(), s.state.clone(), s.action))
            .collect();
        let records = oracle_feedback(&steps, self.density)?;
        let n = records.len();
        buffer.extend(records);
        Ok(n)
    }
}

#[derive(Default)]
struct LossSums {
    dqn: Vec<f64>,
    advantage: Vec<f64>,
    invariance: Vec<f64>,
    explanation: Vec<f64>,
    feedback: Vec<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// A single-seed training run.
pub struct Trainer {
    config: RunConfig,
    seed: u64,
    agent: Agent,
    replay: crate::dqn::PrioritizedReplay,
    feedback: std::sync::Arc<FeedbackBuffer>,
    env: PixelTaxi,
    schedule: EpsilonSchedule,
    act_rng: ChaCha8Rng,
    layout_rng: ChaCha8Rng,
    episode: usize,
    env_steps: u64,
    started: Instant,
}

impl Trainer {
    pub fn new(config: RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let learner = config.learner();
        let mut base = ChaCha8Rng::seed_from_u64(seed);
        let agent = Agent::new(config.algo, learner.clone(), base.next_u64())?;
        let act_rng = ChaCha8Rng::seed_from_u64(base.next_u64());
        let layout_rng = ChaCha8Rng::seed_from_u64(base.next_u64());
        Ok(Self {
            replay: agent.new_replay(),
            feedback: std::sync::Arc::new(agent.new_feedback_buffer()),
            env: PixelTaxi::new(config.taxi())?,
            schedule: EpsilonSchedule::new(learner.epsilon_decay),
            agent,
            config,
            seed,
            act_rng,
            layout_rng,
            episode: 0,
            env_steps: 0,
            started: Instant::now(),
        })
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn feedback_buffer(&self) -> std::sync::Arc<FeedbackBuffer> {
        self.feedback.clone()
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    pub fn epsilon(&self) -> f64 {
        self.schedule.epsilon
    }

    /// Run one episode, train on the update ticks, query feedback on the
    /// query episodes and decay epsilon.
    pub fn run_episode(&mut self, provider: &mut dyn FeedbackProvider) -> Result<EpisodeMetrics> {
        self.episode += 1;
        let layout_seed = self.layout_rng.next_u64();
        let first = self.env.reset(layout_seed)?;
        let mut state = StackedState::reset(preprocess(&first));
        let mut frame = first;
        let mut accumulator = NStepAccumulator::new(self.config.multi_step_returns, self.config.discount_factor);
        let mut trajectory = Vec::new();
        let mut sums = LossSums::default();
        let mut episode_return = 0.0;
        let mut steps = 0;
        let epsilon = self.schedule.epsilon;

        for t in 1..=self.config.max_steps {
            let taxi = self.env.state().expect("reset").clone();
            let q = self.agent.q_values(&state);
            let action = act(&q, &self.schedule, &mut self.act_rng);
            let result = self.env.step(action)?;
            let next = state.push_frame(preprocess(&result.frame));
            for tr in accumulator.push(state.clone(), action, result.reward, &next, result.terminal) {
                self.replay.push(tr);
            }
            trajectory.push(TrajectoryStep {
                taxi,
                frame,
                state,
                action,
            });
            episode_return += result.reward;
            steps += 1;
            self.env_steps += 1;
            state = next;
            frame = result.frame;

            if t % self.config.update_interval == 0 && self.replay.len() >= self.config.batch_size {
                sums.dqn.push(self.agent.dqn_step(&mut self.replay)?);
                if let Some(l) = self.agent.feedback_step(&self.feedback)? {
                    sums.advantage.push(l.advantage);
                    sums.invariance.push(l.invariance);
                    sums.explanation.push(l.explanation);
                    sums.feedback.push(l.total);
                }
            }
            if result.terminal {
                break;
            }
        }

        self.schedule = self.schedule.decayed();
        if self.agent.algo().uses_feedback() && self.episode % self.config.feedback_frequency() == 0 {
            let n = provider.collect(self.episode, &trajectory, &self.feedback)?;
            info!("episode {}: {} feedback record(s) added, {} stored", self.episode, n, self.feedback.len());
        }

        Ok(EpisodeMetrics {
            episode: self.episode,
            steps,
            total_steps: self.env_steps,
            episode_return,
            epsilon,
            dqn_loss: mean(&sums.dqn),
            advantage_loss: mean(&sums.advantage),
            invariance_loss: mean(&sums.invariance),
            explanation_loss: mean(&sums.explanation),
            feedback_loss: mean(&sums.feedback),
            updates: sums.dqn.len(),
            feedback_updates: sums.feedback.len(),
            feedback_records: self.feedback.len(),
            wall_clock: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CheckpointManifest {
            algo: self.config.algo.as_str().to_string(),
            seed: self.seed,
            episode: self.episode,
            env_steps: self.env_steps,
            epsilon: self.schedule.epsilon,
            replay_len: self.replay.len(),
            replay_capacity: self.replay.capacity(),
            replay_max_priority: self.replay.max_priority(),
            feedback_records: self.feedback.len(),
            optimizer_steps: self.agent.optimizer_steps(),
            ..Default::default()
        });
        self.agent.save_into(&mut ck);
        ck
    }
}

/// Run every episode of one seed. With `out`, metrics stream to
/// `metrics.jsonl` and checkpoints land in `checkpoints/`.
pub fn run_experiment(config: &RunConfig, seed: u64, provider: &mut dyn FeedbackProvider, out: Option<&Path>) -> Result<Vec<EpisodeMetrics>> {
    run_with_trainer(config, Trainer::new(config.clone(), seed)?, provider, out)
}

/// [`run_experiment`] with a trainer built by the caller, e.g. to share its
/// feedback buffer with the annotation service.
pub fn run_with_trainer(config: &RunConfig, mut trainer: Trainer, provider: &mut dyn FeedbackProvider, out: Option<&Path>) -> Result<Vec<EpisodeMetrics>> {
    let seed = trainer.seed;
    let mut writer = match out {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints"))?;
            fs::write(dir.join("config.toml"), config.to_toml()?)?;
            Some(MetricsWriter::create(&dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut all = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let m = trainer.run_episode(provider)?;
        if let Some(w) = writer.as_mut() {
            w.write(&m)?;
        }
        if let Some(dir) = out {
            let last = m.episode == config.episodes;
            if last || (config.checkpoint_every > 0 && m.episode % config.checkpoint_every == 0) {
                trainer
                    .checkpoint()
                    .save(&dir.join("checkpoints"), &format!("episode_{:05}", m.episode))?;
            }
        }
        if m.episode % 10 == 0 {
            info!(
                "{} seed {} episode {} steps {} return {:.0} eps {:.3}",
                config.algo, seed, m.episode, m.total_steps, m.episode_return, m.epsilon
            );
        }
        all.push(m);
    }
    Ok(all)
}

/// Greedy evaluation of a restored agent; returns per-episode returns.
pub fn evaluate(config: &RunConfig, checkpoint: &Checkpoint, episodes: usize, seed: u64) -> Result<Vec<f64>> {
    let algo: Algo = checkpoint.manifest.algo.parse()?;
    let mut agent = Agent::new(algo, config.learner(), 0)?;
    agent.restore_from(checkpoint)?;
    let mut env = PixelTaxi::new(config.taxi())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let greedy = EpsilonSchedule {
        epsilon: crate::dqn::EPSILON_FLOOR,
        ..EpsilonSchedule::new(1.0)
    };
    let mut returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let first = env.reset(rng.next_u64())?;
        let mut state = StackedState::reset(preprocess(&first));
        let mut ret = 0.0;
        loop {
            let a = act(&agent.q_values(&state), &greedy, &mut rng);
            let r = env.step(a)?;
            ret += r.reward;
            if r.terminal {
                break;
            }
            state = state.push_frame(preprocess(&r.frame));
        }
        returns.push(ret);
    }
    if returns.iter().any(|r| !r.is_finite()) {
        warn!("non-finite evaluation return");
    }
    Ok(returns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(algo: Algo, episodes: usize) -> RunConfig {
        RunConfig {
            algo,
            episodes,
            network: NetworkSize::Tiny,
            batch_size: 8,
            feedback_batch_size: 4,
            max_steps: 20,
            augmentation: "aug1".into(),
            ..RunConfig::default()
        }
    }

    struct Recorder {
        episodes: Vec<usize>,
        inner: OracleProvider,
    }

    impl FeedbackProvider for Recorder {
        fn collect(&mut self, episode: usize, trajectory: &[TrajectoryStep], buffer: &FeedbackBuffer) -> Result<usize> {
            self.episodes.push(episode);
            self.inner.collect(episode, trajectory, buffer)
        }
    }

    #[test]
    fn config_defaults_and_toml() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.feedback_frequency(), 4);
        assert_eq!(
            RunConfig {
                feedback: FeedbackMode::Human,
                ..cfg.clone()
            }
            .feedback_frequency(),
            10
        );
        assert_eq!(cfg.update_interval, 4);
        assert_eq!(cfg.learner(), LearnerConfig::new(6));
        let parsed = RunConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(parsed, cfg);
        let partial = RunConfig::from_toml_str("algo = \"dqn-feedback\"\nlearning_rate = 0.001\n").unwrap();
        assert_eq!(partial.algo, Algo::DqnFeedback);
        assert_eq!(partial.learning_rate, 0.001);
        assert_eq!(partial.batch_size, 64);
        assert!(RunConfig::from_toml_str("update_interval = 0").is_err());
        assert!(RunConfig::from_toml_str("feedback_frequency = 0").is_err());
        assert!(RunConfig::from_toml_str("no_such_key = 1").is_err());
        assert!(RunConfig::from_toml_str("augmentation = \"aug7\"").is_err());
    }

    #[test]
    fn feedback_is_queried_every_n_episodes_from_the_last_trajectory() {
        let cfg = tiny(Algo::DqnFeedback, 12);
        let mut rec = Recorder {
            episodes: Vec::new(),
            inner: OracleProvider { density: 1.0 },
        };
        let metrics = run_experiment(&cfg, 0, &mut rec, None).unwrap();
        assert_eq!(rec.episodes, vec![4, 8, 12]);
        // records after episode 4 equal the length of episode 4
        assert_eq!(metrics[4].feedback_records, metrics[3].steps);
        assert_eq!(metrics.len(), 12);
    }

    #[test]
    fn one_update_of_each_kind_per_tick() {
        let cfg = tiny(Algo::Expand, 6);
        let mut trainer = Trainer::new(cfg.clone(), 3).unwrap();
        let mut oracle = OracleProvider { density: 1.0 };
        let mut dqn = 0;
        let mut fb = 0;
        for _ in 0..cfg.episodes {
            let m = trainer.run_episode(&mut oracle).unwrap();
            assert!(m.feedback_updates <= m.updates);
            assert!(m.updates <= m.steps / cfg.update_interval);
            dqn += m.updates;
            fb += m.feedback_updates;
        }
        assert!(fb > 0);
        assert_eq!(trainer.agent().optimizer_steps()["opt"], (dqn + fb) as u64);
    }

    #[test]
    fn dqn_only_never_collects_or_uses_feedback() {
        let cfg = tiny(Algo::DqnOnly, 8);
        let mut rec = Recorder {
            episodes: Vec::new(),
            inner: OracleProvider { density: 1.0 },
        };
        let metrics = run_experiment(&cfg, 1, &mut rec, None).unwrap();
        assert!(rec.episodes.is_empty());
        assert!(metrics.iter().all(|m| m.feedback_updates == 0 && m.feedback_loss.is_none() && m.feedback_records == 0));
        assert!(metrics.iter().any(|m| m.updates > 0));
    }

    #[test]
    fn epsilon_decays_per_episode() {
        let cfg = tiny(Algo::DqnOnly, 3);
        let metrics = run_experiment(&cfg, 2, &mut OracleProvider { density: 1.0 }, None).unwrap();
        let eps: Vec<f64> = metrics.iter().map(|m| m.epsilon).collect();
        assert_eq!(eps, vec![1.0, 0.99, 0.99 * 0.99]);
    }

    #[test]
    fn fixed_seed_runs_are_identical() {
        let cfg = tiny(Algo::Expand, 5);
        let strip = |ms: Vec<EpisodeMetrics>| {
            ms.into_iter()
                .map(|m| EpisodeMetrics { wall_clock: 0.0, ..m })
                .map(|m| serde_json::to_string(&m).unwrap())
                .collect::<Vec<_>>()
        };
        let a = strip(run_experiment(&cfg, 7, &mut OracleProvider { density: 1.0 }, None).unwrap());
        let b = strip(run_experiment(&cfg, 7, &mut OracleProvider { density: 1.0 }, None).unwrap());
        assert_eq!(a, b);
        let c = strip(run_experiment(&cfg, 8, &mut OracleProvider { density: 1.0 }, None).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn artifacts_and_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            checkpoint_every: 2,
            ..tiny(Algo::ExAgil, 3)
        };
        let metrics = run_experiment(&cfg, 0, &mut OracleProvider { density: 1.0 }, Some(dir.path())).unwrap();
        let replayed = metrics::read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(replayed, metrics);
        assert_eq!(RunConfig::load(&dir.path().join("config.toml")).unwrap(), cfg);
        let ck_dir = dir.path().join("checkpoints");
        assert!(ck_dir.join("episode_00002.json").exists());
        let ck = Checkpoint::load(&ck_dir.join("episode_00003.json")).unwrap();
        assert_eq!(ck.manifest.episode, 3);
        assert_eq!(ck.manifest.algo, "ex-agil");
        assert_eq!(ck.manifest.env_steps, metrics[2].total_steps);
        assert!(ck.manifest.optimizer_steps.contains_key("attention_opt"));
        let returns = evaluate(&cfg, &ck, 2, 0).unwrap();
        assert_eq!(returns.len(), 2);
        assert!(returns.iter().all(|&r| r == 0.0 || r == 1.0));
    }
}
