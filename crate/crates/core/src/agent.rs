//! Agents: one learner configuration, nine training variants. Every variant
//! shares replay, exploration and optimizer settings; they differ only in
//! architecture and in how feedback records enter the second update.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_state, invariance_loss_grad, random_blur, random_crop, AugmentationPreset, LossWeights};
use crate::baselines::{explanation_loss_grad, mask_input, ATTENTION_ALIGN_WEIGHT};
use crate::dqn::{batch_inputs, dqn_update, Checkpoint, PrioritizedReplay, QFunction};
use crate::error::{Error, Result};
use crate::feedback::{advantage_loss_grad, FeedbackBuffer, FeedbackRecord, ADVANTAGE_MARGIN};
use crate::nn::{cast, soft_update, Adam, AttentionNet, GatedQNetwork, Maps, QNetwork, QNetworkSpec, Scalar};
use crate::state::StackedState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Expand,
    ExpandNoInvariance,
    ExpandNoAugAdvantage,
    DqnFeedback,
    ExAgil,
    AttentionAlign,
    AugCrop,
    AugBlur,
    DqnOnly,
}

impl Algo {
    pub const ALL: [Algo; 9] = [
        Algo::Expand,
        Algo::ExpandNoInvariance,
        Algo::ExpandNoAugAdvantage,
        Algo::DqnFeedback,
        Algo::ExAgil,
        Algo::AttentionAlign,
        Algo::AugCrop,
        Algo::AugBlur,
        Algo::DqnOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Expand => "expand",
            Algo::ExpandNoInvariance => "expand-no-invariance",
            Algo::ExpandNoAugAdvantage => "expand-no-aug-advantage",
            Algo::DqnFeedback => "dqn-feedback",
            Algo::ExAgil => "ex-agil",
            Algo::AttentionAlign => "attention-align",
            Algo::AugCrop => "aug-crop",
            Algo::AugBlur => "aug-blur",
            Algo::DqnOnly => "dqn-only",
        }
    }

    /// Whether the run collects feedback and performs the second update.
    pub fn uses_feedback(self) -> bool {
        self != Algo::DqnOnly
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown algo `{s}`")))
    }
}

/// Learner hyperparameters shared by every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub spec: QNetworkSpec,
    pub gamma: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub feedback_batch_size: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub beta: f64,
    pub priority_eps: f64,
    pub tau: f64,
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub preset: String,
    pub replay_capacity: usize,
    pub feedback_capacity: usize,
    pub epsilon_decay: f64,
}

impl LearnerConfig {
    pub fn new(actions: usize) -> Self {
        Self {
            spec: QNetworkSpec::standard(actions),
            gamma: 0.99,
            n_step: 5,
            batch_size: 64,
            feedback_batch_size: 64,
            learning_rate: 1e-4,
            alpha: 0.6,
            beta: 0.4,
            priority_eps: 1e-6,
            tau: 0.01,
            margin: ADVANTAGE_MARGIN,
            loss_weights: LossWeights::default(),
            preset: "aug5".into(),
            replay_capacity: 50_000,
            feedback_capacity: 50_000,
            epsilon_decay: 0.99,
        }
    }
}

/// How feedback states are augmented before the feedback loss.
#[derive(Debug, Clone, PartialEq)]
pub enum Augmenter {
    None,
    /// Blur outside the trainer's boxes, one copy per preset filter.
    Saliency(AugmentationPreset),
    /// Context-agnostic pad-and-crop, this many copies.
    Crop(usize),
    /// Context-agnostic 23x23 blur with random sigma, this many copies.
    Blur(usize),
}

impl Augmenter {
    pub fn copies(&self) -> usize {
        match self {
            Augmenter::None => 0,
            Augmenter::Saliency(p) => p.len(),
            Augmenter::Crop(g) | Augmenter::Blur(g) => *g,
        }
    }

    pub fn augment<R: Rng + ?Sized>(&self, record: &FeedbackRecord, rng: &mut R) -> Vec<StackedState> {
        match self {
            Augmenter::None => Vec::new(),
            Augmenter::Saliency(p) => augment_state(&record.state, record.mask(), p),
            Augmenter::Crop(g) => (0..*g).map(|_| random_crop(&record.state, rng).0).collect(),
            Augmenter::Blur(g) => (0..*g).map(|_| random_blur(&record.state, rng).0).collect(),
        }
    }
}

/// Feedback-loss recipe of a variant.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPlan {
    pub augmenter: Augmenter,
    /// Apply the advantage loss to augmented copies as well as originals.
    pub augmented_advantage: bool,
    pub weights: LossWeights,
    /// Weight of the saliency alignment term (gated network only).
    pub explanation_weight: f64,
}

impl FeedbackPlan {
    pub fn for_algo(algo: Algo, cfg: &LearnerConfig) -> Result<Self> {
        let preset = AugmentationPreset::named(&cfg.preset)?;
        let g = preset.len();
        let base = FeedbackPlan {
            augmenter: Augmenter::None,
            augmented_advantage: false,
            weights: LossWeights {
                invariance: 0.0,
                ..cfg.loss_weights
            },
            explanation_weight: 0.0,
        };
        let expand = FeedbackPlan {
            augmenter: Augmenter::Saliency(preset),
            augmented_advantage: true,
            weights: cfg.loss_weights,
            explanation_weight: 0.0,
        };
        Ok(match algo {
            Algo::Expand => expand,
            Algo::ExpandNoInvariance => FeedbackPlan {
                weights: base.weights,
                ..expand
            },
            Algo::ExpandNoAugAdvantage => FeedbackPlan {
                augmented_advantage: false,
                ..expand
            },
            Algo::AugCrop => FeedbackPlan {
                augmenter: Augmenter::Crop(g),
                ..expand
            },
            Algo::AugBlur => FeedbackPlan {
                augmenter: Augmenter::Blur(g),
                ..expand
            },
            Algo::AttentionAlign => FeedbackPlan {
                explanation_weight: ATTENTION_ALIGN_WEIGHT,
                ..base
            },
            Algo::DqnFeedback | Algo::ExAgil | Algo::DqnOnly => base,
        })
    }
}

/// Components of one feedback update, for metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLosses {
    pub advantage: f64,
    pub invariance: f64,
    pub explanation: f64,
    pub total: f64,
}

/// Feedback loss over a Q batch laid out record-major: row `r * (1 + g)` is
/// record `r`'s original state, the next `g` rows its augmented copies.
/// Returns the loss components and `dL/dq`.
pub fn feedback_loss_grad<T: Scalar>(
    q: &Array2<T>,
    records: &[&FeedbackRecord],
    copies: usize,
    plan: &FeedbackPlan,
    margin: f64,
) -> Result<(FeedbackLosses, Array2<T>)> {
    let stride = 1 + copies;
    if q.nrows() != records.len() * stride {
        return Err(Error::LengthMismatch {
            expected: records.len() * stride,
            got: q.nrows(),
        });
    }
    let row = |i: usize| -> Vec<f64> { q.row(i).iter().map(|v| v.to_f64().expect("finite")).collect() };
    let mut dq = Array2::<f64>::zeros(q.dim());
    let adv_rows: Vec<usize> = (0..records.len())
        .flat_map(|r| {
            let extra = if plan.augmented_advantage { copies } else { 0 };
            (0..=extra).map(move |k| r * stride + k)
        })
        .collect();
    let mut advantage = 0.0;
    let scale_a = plan.weights.advantage / adv_rows.len().max(1) as f64;
    for &i in &adv_rows {
        let rec = records[i / stride];
        let (l, g) = advantage_loss_grad(&row(i), rec.action, rec.label, margin)?;
        advantage += l;
        for (a, v) in g.into_iter().enumerate() {
            dq[[i, a]] += scale_a * v;
        }
    }
    advantage /= adv_rows.len().max(1) as f64;

    let mut invariance = 0.0;
    if copies > 0 {
        let scale_i = plan.weights.invariance / records.len() as f64;
        for r in 0..records.len() {
            let base = r * stride;
            let augmented: Vec<Vec<f64>> = (1..=copies).map(|k| row(base + k)).collect();
            let (l, d_orig, d_aug) = invariance_loss_grad(&row(base), &augmented)?;
            invariance += l;
            for (a, v) in d_orig.into_iter().enumerate() {
                dq[[base, a]] += scale_i * v;
            }
            for (k, d) in d_aug.into_iter().enumerate() {
                for (a, v) in d.into_iter().enumerate() {
                    dq[[base + 1 + k, a]] += scale_i * v;
                }
            }
        }
        invariance /= records.len() as f64;
    }
    let total = plan.weights.advantage * advantage + plan.weights.invariance * invariance;
    Ok((
        FeedbackLosses {
            advantage,
            invariance,
            explanation: 0.0,
            total,
        },
        dq.mapv(cast),
    ))
}

/// Original and augmented states of a feedback batch in record-major order.
pub fn feedback_states<R: Rng + ?Sized>(records: &[&FeedbackRecord], augmenter: &Augmenter, rng: &mut R) -> Vec<StackedState> {
    let mut out = Vec::with_capacity(records.len() * (1 + augmenter.copies()));
    for r in records {
        out.push(r.state.clone());
        out.extend(augmenter.augment(r, rng));
    }
    out
}

fn pack<T: Scalar>(states: &[StackedState]) -> Maps<T> {
    let refs: Vec<&StackedState> = states.iter().collect();
    Maps::from_states(&refs)
}

fn check_finite(losses: &FeedbackLosses) -> Result<()> {
    if losses.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            context: "feedback",
            value: losses.total,
        })
    }
}

/// Feedback gradients for a plain or gated Q-network, accumulated into `grads`.
pub fn q_feedback_grads<T: Scalar, Q: QFunction<T>>(
    net: &Q,
    inputs: &Maps<T>,
    records: &[&FeedbackRecord],
    copies: usize,
    plan: &FeedbackPlan,
    margin: f64,
    grads: &mut Q,
) -> Result<FeedbackLosses> {
    let (q, trace) = net.forward_q(inputs);
    let (losses, dq) = feedback_loss_grad(&q, records, copies, plan, margin)?;
    check_finite(&losses)?;
    net.backward_q(&trace, &dq, grads);
    Ok(losses)
}

/// Attention-masked variant: the policy sees `0.5 * (s + s * m)` with the
/// attention map treated as a constant, and the attention net is fit to the
/// record masks by the explanation loss alone.
pub fn masked_feedback_grads<T: Scalar>(
    policy: &QNetwork<T>,
    attention: &AttentionNet<T>,
    states: &Maps<T>,
    records: &[&FeedbackRecord],
    plan: &FeedbackPlan,
    margin: f64,
    policy_grads: &mut QNetwork<T>,
    attention_grads: &mut AttentionNet<T>,
) -> Result<FeedbackLosses> {
    let att = attention.forward(states);
    let masked = mask_input(states, &att.map)?;
    let (q, trace) = policy.forward(&masked);
    let (mut losses, dq) = feedback_loss_grad(&q, records, 0, plan, margin)?;
    let masks: Vec<_> = records.iter().map(|r| r.mask()).collect();
    let (explanation, dmap) = explanation_loss_grad(&att.map, &masks)?;
    losses.explanation = explanation;
    check_finite(&losses)?;
    if !explanation.is_finite() {
        return Err(Error::NonFiniteLoss {
            context: "explanation",
            value: explanation,
        });
    }
    policy.backward(&trace, &dq, policy_grads);
    attention.backward(&att, &dmap, attention_grads);
    Ok(losses)
}

/// Gated variant: advantage loss plus the weighted explanation loss on the
/// network's own saliency map.
pub fn gated_feedback_grads<T: Scalar>(
    net: &GatedQNetwork<T>,
    states: &Maps<T>,
    records: &[&FeedbackRecord],
    plan: &FeedbackPlan,
    margin: f64,
    grads: &mut GatedQNetwork<T>,
) -> Result<FeedbackLosses> {
    let (q, trace) = net.forward(states);
    let (mut losses, dq) = feedback_loss_grad(&q, records, 0, plan, margin)?;
    let masks: Vec<_> = records.iter().map(|r| r.mask()).collect();
    let (explanation, mut dsal) = explanation_loss_grad(&trace.saliency, &masks)?;
    let w: T = cast(plan.explanation_weight);
    dsal.data.mapv_inplace(|v| v * w);
    losses.explanation = explanation;
    losses.total += plan.explanation_weight * explanation;
    check_finite(&losses)?;
    net.backward(&trace, &dq, Some(&dsal), grads);
    Ok(losses)
}

#[derive(Debug, Clone)]
enum Nets {
    Plain {
        online: QNetwork<f32>,
        target: QNetwork<f32>,
        opt: Adam<f32>,
    },
    Masked {
        online: QNetwork<f32>,
        target: QNetwork<f32>,
        opt: Adam<f32>,
        attention: AttentionNet<f32>,
        attention_opt: Adam<f32>,
    },
    Gated {
        online: GatedQNetwork<f32>,
        target: GatedQNetwork<f32>,
        opt: Adam<f32>,
    },
}

/// A learner with its networks, optimizers and sampling stream.
#[derive(Debug, Clone)]
pub struct Agent {
    algo: Algo,
    config: LearnerConfig,
    plan: FeedbackPlan,
    nets: Nets,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(algo: Algo, config: LearnerConfig, seed: u64) -> Result<Self> {
        let plan = FeedbackPlan::for_algo(algo, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = config.spec;
        let lr = config.learning_rate;
        let nets = match algo {
            Algo::ExAgil => {
                let online = QNetwork::new(spec, &mut rng);
                Nets::Masked {
                    target: online.clone(),
                    online,
                    opt: Adam::new(lr),
                    attention: AttentionNet::new(spec, &mut rng),
                    attention_opt: Adam::new(lr),
                }
            }
            Algo::AttentionAlign => {
                let online = GatedQNetwork::new(spec, &mut rng);
                Nets::Gated {
                    target: online.clone(),
                    online,
                    opt: Adam::new(lr),
                }
            }
            _ => {
                let online = QNetwork::new(spec, &mut rng);
                Nets::Plain {
                    target: online.clone(),
                    online,
                    opt: Adam::new(lr),
                }
            }
        };
        Ok(Self {
            algo,
            config,
            plan,
            nets,
            rng,
        })
    }

    pub fn algo(&self) -> Algo {
        self.algo
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn plan(&self) -> &FeedbackPlan {
        &self.plan
    }

    pub fn new_replay(&self) -> PrioritizedReplay {
        PrioritizedReplay::new(self.config.replay_capacity, self.config.alpha, self.config.priority_eps)
    }

    pub fn new_feedback_buffer(&self) -> FeedbackBuffer {
        FeedbackBuffer::new(self.config.feedback_capacity)
    }

    /// Q-values for a single state.
    pub fn q_values(&self, state: &StackedState) -> Vec<f32> {
        let x = Maps::from_states(&[state]);
        let q = match &self.nets {
            Nets::Plain { online, .. } => online.predict(&x),
            Nets::Masked { online, attention, .. } => {
                let m = attention.predict(&x);
                online.predict(&mask_input(&x, &m).expect("matching shapes"))
            }
            Nets::Gated { online, .. } => online.predict(&x),
        };
        q.row(0).to_vec()
    }

    /// Predicted attention map for the masked variant.
    pub fn attention_map(&self, state: &StackedState) -> Option<Vec<f32>> {
        match &self.nets {
            Nets::Masked { attention, .. } => Some(attention.predict(&Maps::from_states(&[state])).data.row(0).to_vec()),
            _ => None,
        }
    }

    /// One prioritized DQN update followed by a soft target update. Returns the loss.
    pub fn dqn_step(&mut self, replay: &mut PrioritizedReplay) -> Result<f64> {
        let sampled = replay.sample(self.config.batch_size, self.config.beta, &mut self.rng);
        let (states, boots) = batch_inputs::<f32>(&sampled.transitions);
        let gamma = self.config.gamma;
        let tau = self.config.tau;
        let update = match &mut self.nets {
            Nets::Plain { online, target, opt } => {
                let u = dqn_update(replay, &sampled, &states, &boots, online, target, opt, gamma)?;
                soft_update(target, online, tau)?;
                u
            }
            Nets::Masked {
                online,
                target,
                opt,
                attention,
                ..
            } => {
                let s = mask_input(&states, &attention.predict(&states))?;
                let b = mask_input(&boots, &attention.predict(&boots))?;
                let u = dqn_update(replay, &sampled, &s, &b, online, target, opt, gamma)?;
                soft_update(target, online, tau)?;
                u
            }
            Nets::Gated { online, target, opt } => {
                let u = dqn_update(replay, &sampled, &states, &boots, online, target, opt, gamma)?;
                soft_update(target, online, tau)?;
                u
            }
        };
        Ok(update.loss)
    }

    /// One feedback update on a uniform batch from `buffer`; `None` when the
    /// variant ignores feedback or the buffer is empty.
    pub fn feedback_step(&mut self, buffer: &FeedbackBuffer) -> Result<Option<FeedbackLosses>> {
        if !self.algo.uses_feedback() {
            return Ok(None);
        }
        let batch: Vec<Arc<FeedbackRecord>> = buffer.sample(self.config.feedback_batch_size, &mut self.rng);
        if batch.is_empty() {
            return Ok(None);
        }
        let records: Vec<&FeedbackRecord> = batch.iter().map(|r| r.as_ref()).collect();
        let margin = self.config.margin;
        let plan = &self.plan;
        let losses = match &mut self.nets {
            Nets::Plain { online, opt, .. } => {
                let states = feedback_states(&records, &plan.augmenter, &mut self.rng);
                let mut grads = online.zeroed();
                let l = q_feedback_grads(&*online, &pack(&states), &records, plan.augmenter.copies(), plan, margin, &mut grads)?;
                opt.step(online, &grads)?;
                l
            }
            Nets::Masked {
                online,
                opt,
                attention,
                attention_opt,
                ..
            } => {
                let states = feedback_states(&records, &Augmenter::None, &mut self.rng);
                let mut pg = online.zeroed();
                let mut ag = attention.zeros_like();
                let l = masked_feedback_grads(&*online, &*attention, &pack(&states), &records, plan, margin, &mut pg, &mut ag)?;
                opt.step(online, &pg)?;
                attention_opt.step(attention, &ag)?;
                l
            }
            Nets::Gated { online, opt, .. } => {
                let states = feedback_states(&records, &Augmenter::None, &mut self.rng);
                let mut grads = online.zeroed();
                let l = gated_feedback_grads(&*online, &pack(&states), &records, plan, margin, &mut grads)?;
                opt.step(online, &grads)?;
                l
            }
        };
        Ok(Some(losses))
    }

    /// Adam step counters by checkpoint prefix.
    pub fn optimizer_steps(&self) -> std::collections::BTreeMap<String, u64> {
        let mut out = std::collections::BTreeMap::new();
        match &self.nets {
            Nets::Plain { opt, .. } | Nets::Gated { opt, .. } => {
                out.insert("opt".to_string(), opt.t);
            }
            Nets::Masked { opt, attention_opt, .. } => {
                out.insert("opt".to_string(), opt.t);
                out.insert("attention_opt".to_string(), attention_opt.t);
            }
        }
        out
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        match &self.nets {
            Nets::Plain { online, target, opt } => {
                ck.add_params("online", online);
                ck.add_params("target", target);
                ck.add_optimizer("opt", opt);
            }
            Nets::Masked {
                online,
                target,
                opt,
                attention,
                attention_opt,
            } => {
                ck.add_params("online", online);
                ck.add_params("target", target);
                ck.add_optimizer("opt", opt);
                ck.add_params("attention", attention);
                ck.add_optimizer("attention_opt", attention_opt);
            }
            Nets::Gated { online, target, opt } => {
                ck.add_params("online", online);
                ck.add_params("target", target);
                ck.add_optimizer("opt", opt);
            }
        }
    }

    pub fn restore_from(&mut self, ck: &Checkpoint) -> Result<()> {
        match &mut self.nets {
            Nets::Plain { online, target, opt } => {
                ck.restore_params("online", online)?;
                ck.restore_params("target", target)?;
                ck.restore_optimizer("opt", opt)
            }
            Nets::Masked {
                online,
                target,
                opt,
                attention,
                attention_opt,
            } => {
                ck.restore_params("online", online)?;
                ck.restore_params("target", target)?;
                ck.restore_optimizer("opt", opt)?;
                ck.restore_params("attention", attention)?;
                ck.restore_optimizer("attention_opt", attention_opt)
            }
            Nets::Gated { online, target, opt } => {
                ck.restore_params("online", online)?;
                ck.restore_params("target", target)?;
                ck.restore_optimizer("opt", opt)
            }
        }
    }
}
