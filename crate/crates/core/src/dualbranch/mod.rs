//! Dual-branch training objective and posterior-only inference.
//!
//! Both branches share one vision prefix per episode. The prior branch
//! supplies a vision-only action loss on detached query states and the
//! language log-likelihood used by the log-likelihood-ratio term; the
//! posterior branch supplies the main action loss and the stop-gradient
//! baseline of that ratio.

mod trainer;

pub use trainer::{TrainConfig, Trainer, TrainerState};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowhead::{FlowConfig, FlowHead, FlowSample};
use crate::gradcore::{ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::seqmodel::{Branch, ModelConfig, SeqModel};
use crate::trajectory::ActionTrajectory;
use crate::worldgen::Vocab;

/// What a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Both branches with the weighted flow losses and the ratio term.
    Dual,
    /// Posterior branch and its flow loss only: a plain VLA trainer.
    Baseline,
    /// Like `Baseline`, but every instruction token is replaced by padding.
    VisionOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Dual => "dual",
            Mode::Baseline => "baseline",
            Mode::VisionOnly => "vision_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dual" => Some(Mode::Dual),
            "baseline" => Some(Mode::Baseline),
            "vision_only" => Some(Mode::VisionOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetachPolicy {
    /// Condition the prior flow loss on a detached copy of the prior query states.
    pub detach_hq_prior_for_fm: bool,
    /// Stop the gradient through the posterior language log-likelihood.
    pub sg_posterior_baseline: bool,
}

impl Default for DetachPolicy {
    fn default() -> Self {
        Self {
            detach_hq_prior_for_fm: true,
            sg_posterior_baseline: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub mode: Mode,
    pub lambda: f64,
    pub beta: f64,
    pub detach: DetachPolicy,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            mode: Mode::Dual,
            lambda: 0.3,
            beta: 0.1,
            detach: DetachPolicy::default(),
        }
    }
}

impl Objective {
    pub fn baseline() -> Self {
        Self {
            mode: Mode::Baseline,
            lambda: 0.0,
            beta: 0.0,
            ..Self::default()
        }
    }

    pub fn vision_only() -> Self {
        Self {
            mode: Mode::VisionOnly,
            ..Self::baseline()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config {
                key: "train.lambda".into(),
                reason: "must lie in [0, 1]".into(),
            });
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config {
                key: "train.beta".into(),
                reason: "must be finite and nonnegative".into(),
            });
        }
        if self.mode != Mode::Dual && (self.lambda != 0.0 || self.beta != 0.0) {
            return Err(Error::Config {
                key: "train.mode".into(),
                reason: "single-branch modes need lambda = beta = 0".into(),
            });
        }
        Ok(())
    }
}

/// Plain-number view of one step's losses (batch means for a batch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fm_post: f64,
    pub fm_prior: f64,
    pub llr: f64,
    pub total: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Mean language log-probability in the prior layout.
    pub lp_prior: f64,
    /// Mean language log-probability in the posterior layout.
    pub lp_post: f64,
}

impl LossBreakdown {
    /// `(1−λ)·fm_post + λ·fm_prior − β·llr` from the logged parts.
    pub fn recompose(&self) -> f64 {
        (1.0 - self.lambda) * self.fm_post + self.lambda * self.fm_prior - self.beta * self.llr
    }

    pub fn is_finite(&self) -> bool {
        [self.fm_post, self.fm_prior, self.llr, self.total].iter().all(|x| x.is_finite())
    }
}

/// Tape handles for one episode. Prior-branch entries are absent in single-branch modes.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutputs {
    pub hq_prior: Option<Var>,
    pub hq_post: Var,
    pub lp_prior: Option<Var>,
    pub lp_post: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct EpisodeLosses {
    pub fm_post: Var,
    pub fm_prior: Option<Var>,
    pub llr: Option<Var>,
}

/// The sequence model plus the action head, sharing one parameter store.
#[derive(Clone, Debug)]
pub struct DualModel {
    pub vlm: SeqModel,
    pub head: FlowHead,
}

impl DualModel {
    /// The head's condition shape is taken from the sequence model.
    pub fn new<S: Scalar>(model: ModelConfig, flow: FlowConfig, store: &mut ParamStore<S>) -> Result<Self> {
        let flow = FlowConfig {
            cond_rows: model.num_queries,
            cond_dim: model.d_model,
            ..flow
        };
        let vlm = SeqModel::new(model, store, "vlm.")?;
        let head = FlowHead::new(flow, store, "head.")?;
        Ok(Self { vlm, head })
    }

    pub fn vlm_params(&self) -> Vec<ParamId> {
        self.vlm.param_ids()
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }

    /// Builds both branches for one episode on `tape`.
    pub fn run_branches<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        vision: &[usize],
        language: &[usize],
        sample: &FlowSample,
        objective: &Objective,
    ) -> Result<(BranchOutputs, EpisodeLosses)> {
        let cfg = self.vlm.config();
        let masked;
        let language = if objective.mode == Mode::VisionOnly {
            masked = vec![Vocab::PAD; language.len()];
            &masked
        } else {
            language
        };
        let cache = self.vlm.prefill(tape, store, vision)?;
        let post = cfg.layout(Branch::Posterior, vision, language)?;
        let h_post = self.vlm.continue_layout(tape, store, &cache, &post)?;
        let hq_post = self.vlm.extract_query_states(tape, &h_post, &post)?;
        let fm_post = self.head.fm_loss(tape, store, std::slice::from_ref(sample), hq_post)?;
        if objective.mode != Mode::Dual {
            let out = BranchOutputs {
                hq_prior: None,
                hq_post,
                lp_prior: None,
                lp_post: None,
            };
            return Ok((out, EpisodeLosses { fm_post, fm_prior: None, llr: None }));
        }
        let lp_post = self.vlm.language_logprobs(tape, store, &h_post, &post)?.mean;
        let prior = cfg.layout(Branch::Prior, vision, language)?;
        let h_prior = self.vlm.continue_layout(tape, store, &cache, &prior)?;
        let hq_prior = self.vlm.extract_query_states(tape, &h_prior, &prior)?;
        let lp_prior = self.vlm.language_logprobs(tape, store, &h_prior, &prior)?.mean;
        let cond = if objective.detach.detach_hq_prior_for_fm {
            tape.detach(hq_prior)
        } else {
            hq_prior
        };
        let fm_prior = self.head.fm_loss(tape, store, std::slice::from_ref(sample), cond)?;
        let llr = llr_loss(tape, lp_prior, lp_post, objective.detach.sg_posterior_baseline)?;
        let out = BranchOutputs {
            hq_prior: Some(hq_prior),
            hq_post,
            lp_prior: Some(lp_prior),
            lp_post: Some(lp_post),
        };
        Ok((
            out,
            EpisodeLosses {
                fm_post,
                fm_prior: Some(fm_prior),
                llr: Some(llr),
            },
        ))
    }

    /// Posterior branch only: no prior layout is ever built here.
    pub fn infer<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        vision: &[usize],
        language: &[usize],
        steps: usize,
        seed: u64,
    ) -> Result<ActionTrajectory> {
        let layout = self.vlm.config().layout(Branch::Posterior, vision, language)?;
        let cond = self.vlm.query_states_value(store, &layout)?;
        self.head.sample_actions(store, &cond, steps, seed)
    }
}

/// `lp_prior − sg(lp_post)`; with `stop_gradient = false` the baseline is
/// differentiated too (ablation only).
pub fn llr_loss<S: Scalar>(tape: &mut Tape<S>, lp_prior: Var, lp_post: Var, stop_gradient: bool) -> Result<Var> {
    let (a, b) = (tape.value(lp_prior).len(), tape.value(lp_post).len());
    if a != 1 || b != 1 {
        return Err(Error::contract(format!(
            "ratio needs scalar per-token means, got {a} and {b} values"
        )));
    }
    let base = if stop_gradient { tape.detach(lp_post) } else { lp_post };
    tape.sub(lp_prior, base)
}

/// Batch means of the per-episode terms combined into the total loss.
pub fn compose_total<S: Scalar>(
    tape: &mut Tape<S>,
    episodes: &[EpisodeLosses],
    objective: &Objective,
) -> Result<(Var, LossBreakdownVars)> {
    if episodes.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let w = S::of(1.0 / episodes.len() as f64);
    let mean_of = |tape: &mut Tape<S>, vars: Vec<Var>| tape.weighted_sum(&vars.into_iter().map(|v| (w, v)).collect::<Vec<_>>());
    let fm_post = mean_of(tape, episodes.iter().map(|e| e.fm_post).collect())?;
    if objective.mode != Mode::Dual {
        return Ok((fm_post, LossBreakdownVars { fm_post, fm_prior: None, llr: None }));
    }
    let fm_prior = mean_of(tape, episodes.iter().map(|e| e.fm_prior.expect("dual mode")).collect())?;
    let llr = mean_of(tape, episodes.iter().map(|e| e.llr.expect("dual mode")).collect())?;
    let total = tape.weighted_sum(&[
        (S::of(1.0 - objective.lambda), fm_post),
        (S::of(objective.lambda), fm_prior),
        (S::of(-objective.beta), llr),
    ])?;
    Ok((
        total,
        LossBreakdownVars {
            fm_post,
            fm_prior: Some(fm_prior),
            llr: Some(llr),
        },
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdownVars {
    pub fm_post: Var,
    pub fm_prior: Option<Var>,
    pub llr: Option<Var>,
}

#[cfg(test)]
mod tests;
