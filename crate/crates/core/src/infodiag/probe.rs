use serde::{Deserialize, Serialize};

use crate::dualbranch::DualModel;
use crate::error::{Error, Result};
use crate::gradcore::{ParamStore, Tape};
use crate::scalar::Scalar;
use crate::seqmodel::Branch;
use crate::trajectory::ActionTrajectory;
use crate::worldgen::{rollout, Episode, Vocab, WorldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Full,
    /// Instruction tokens replaced by padding at inference.
    VisionOnly,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Full => "full",
            Condition::VisionOnly => "vision_only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub condition: Condition,
    pub split: String,
    pub success_rate: f64,
    pub successes: usize,
    pub trials: usize,
    pub seeds: Vec<u64>,
    /// Success rate per seed, in `seeds` order.
    pub per_seed: Vec<f64>,
}

/// Rolls out `policy(episode, seed)` on every episode for every seed.
pub fn eval_policy<'a>(
    episodes: &[&'a Episode],
    world: &WorldConfig,
    seeds: &[u64],
    split: &str,
    condition: Condition,
    mut policy: impl FnMut(&'a Episode, u64) -> Result<ActionTrajectory>,
) -> Result<ProbeResult> {
    if episodes.is_empty() || seeds.is_empty() {
        return Err(Error::contract("evaluation needs episodes and seeds"));
    }
    let mut successes = 0;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut hits = 0;
        for (i, ep) in episodes.iter().enumerate() {
            let actions = policy(ep, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            if rollout(&ep.scene, &ep.instruction, &actions, world)?.success {
                hits += 1;
            }
        }
        successes += hits;
        per_seed.push(hits as f64 / episodes.len() as f64);
    }
    let trials = episodes.len() * seeds.len();
    Ok(ProbeResult {
        condition,
        split: split.into(),
        success_rate: successes as f64 / trials as f64,
        successes,
        trials,
        seeds: seeds.to_vec(),
        per_seed,
    })
}

/// Posterior-branch inference plus rollout, scored against each episode's instruction.
#[allow(clippy::too_many_arguments)]
pub fn eval_success<S: Scalar>(
    model: &DualModel,
    store: &ParamStore<S>,
    episodes: &[&Episode],
    world: &WorldConfig,
    seeds: &[u64],
    steps: usize,
    split: &str,
    condition: Condition,
) -> Result<ProbeResult> {
    eval_policy(episodes, world, seeds, split, condition, |ep, seed| {
        let language = match condition {
            Condition::Full => ep.language.clone(),
            Condition::VisionOnly => vec![Vocab::PAD; ep.language.len()],
        };
        model.infer(store, &ep.vision, &language, steps, seed)
    })
}

pub fn vision_only_probe<S: Scalar>(
    model: &DualModel,
    store: &ParamStore<S>,
    episodes: &[&Episode],
    world: &WorldConfig,
    seeds: &[u64],
    steps: usize,
    split: &str,
) -> Result<ProbeResult> {
    eval_success(model, store, episodes, world, seeds, steps, split, Condition::VisionOnly)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    /// Mean over episodes of the per-token negative log-likelihood, nats.
    pub nll_per_token: f64,
    pub ppl: f64,
    /// Standard deviation of the per-episode values.
    pub std: f64,
    pub episodes: usize,
}

/// Instruction NLL given vision: the language positions of the posterior
/// layout, which by causality see only the vision prefix and earlier words.
pub fn model_nll<S: Scalar>(model: &DualModel, store: &ParamStore<S>, episodes: &[&Episode]) -> Result<NllReport> {
    if episodes.is_empty() {
        return Err(Error::contract("NLL of an empty dataset"));
    }
    let mut per = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let layout = model.vlm.config().layout(Branch::Posterior, &ep.vision, &ep.language)?;
        let mut tape = Tape::new();
        let h = model.vlm.forward(&mut tape, store, &layout)?;
        let lp = model.vlm.language_logprobs(&mut tape, store, &h, &layout)?;
        per.push(-tape.value(lp.mean).item().to_f64_lossy());
    }
    let n = per.len() as f64;
    let mean = per.iter().sum::<f64>() / n;
    let var = per.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(NllReport {
        nll_per_token: mean,
        ppl: mean.exp(),
        std: var.sqrt(),
        episodes: per.len(),
    })
}
