use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compose_total, DualModel, EpisodeLosses, LossBreakdown, Mode, Objective};
use crate::error::{Error, Result};
use crate::flowhead::{draw_sample, FlowConfig};
use crate::gradcore::{AdamWConfig, OptimizerState, ParamStore, Tape, TensorRecord};
use crate::scalar::Scalar;
use crate::seqmodel::ModelConfig;
use crate::worldgen::Episode;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Seeds batch selection and flow-noise draws.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::default(),
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

/// Model, weights, optimizer and random streams of one training run.
pub struct Trainer<S> {
    pub model: DualModel,
    pub store: ParamStore<S>,
    pub opt: OptimizerState<S>,
    pub config: TrainConfig,
    data_rng: ChaCha8Rng,
    flow_rng: ChaCha8Rng,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerState {
    pub step: u64,
    pub params: Vec<TensorRecord>,
    pub first_moments: Vec<TensorRecord>,
    pub second_moments: Vec<TensorRecord>,
    pub data_rng: RngState,
    pub flow_rng: RngState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128.
    pub word_pos: String,
}

impl RngState {
    fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Format(format!("rng state: bad {what}"));
        let bytes = hex::decode(&self.seed).map_err(|_| bad("seed"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad("seed length"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: ModelConfig, flow: FlowConfig, config: TrainConfig) -> Result<Self> {
        config.objective.validate()?;
        if config.batch_size == 0 {
            return Err(Error::Config {
                key: "train.batch_size".into(),
                reason: "must be positive".into(),
            });
        }
        let mut store = ParamStore::new();
        let model = DualModel::new(model, flow, &mut store)?;
        let opt = OptimizerState::new(config.optimizer, &store);
        Ok(Self {
            model,
            store,
            opt,
            config,
            data_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xda7a),
            flow_rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0xf10e),
        })
    }

    pub fn step(&self) -> u64 {
        self.opt.step()
    }

    /// Batch indices drawn uniformly with replacement.
    pub fn sample_batch(&mut self, n_train: usize) -> Vec<usize> {
        (0..self.config.batch_size)
            .map(|_| self.data_rng.random_range(0..n_train))
            .collect()
    }

    /// Draws a batch from `train` and takes one step on it.
    pub fn train_on(&mut self, train: &[Episode]) -> Result<LossBreakdown> {
        if train.is_empty() {
            return Err(Error::contract("no training episodes"));
        }
        let idx = self.sample_batch(train.len());
        let batch: Vec<(usize, &Episode)> = idx.iter().map(|&i| (i, &train[i])).collect();
        self.train_step(&batch)
    }

    /// One forward of both branches per episode, one backward on the batch-mean
    /// total and one clipped AdamW update. Episodes are tagged with their
    /// dataset index for error reports.
    pub fn train_step(&mut self, batch: &[(usize, &Episode)]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let obj = self.config.objective;
        let mut tape = Tape::new();
        let mut per_episode: Vec<EpisodeLosses> = Vec::with_capacity(batch.len());
        let mut lp = (0.0, 0.0);
        for &(_, ep) in batch {
            let sample = draw_sample(&ep.expert, &mut self.flow_rng);
            let (out, losses) = self
                .model
                .run_branches(&mut tape, &self.store, &ep.vision, &ep.language, &sample, &obj)?;
            if let (Some(a), Some(b)) = (out.lp_prior, out.lp_post) {
                lp.0 += tape.value(a).item().to_f64_lossy();
                lp.1 += tape.value(b).item().to_f64_lossy();
            }
            per_episode.push(losses);
        }
        let (total, parts) = compose_total(&mut tape, &per_episode, &obj)?;
        let val = |v: Option<crate::gradcore::Var>| v.map_or(0.0, |v| tape.value(v).item().to_f64_lossy());
        let n = batch.len() as f64;
        let report = LossBreakdown {
            fm_post: val(Some(parts.fm_post)),
            fm_prior: val(parts.fm_prior),
            llr: val(parts.llr),
            total: val(Some(total)),
            lambda: obj.lambda,
            beta: obj.beta,
            lp_prior: lp.0 / n,
            lp_post: lp.1 / n,
        };
        if !report.is_finite() {
            return Err(self.non_finite(&tape, batch, &per_episode, &report));
        }
        let grads = tape.backward(total)?.param_map(&tape, &self.store);
        self.opt.apply(&mut self.store, &grads)?;
        Ok(report)
    }

    fn non_finite(&self, tape: &Tape<S>, batch: &[(usize, &Episode)], eps: &[EpisodeLosses], r: &LossBreakdown) -> Error {
        let bad = |v: Option<crate::gradcore::Var>| v.is_some_and(|v| !tape.value(v).item().is_finite());
        let (slot, losses) = eps
            .iter()
            .enumerate()
            .find(|(_, e)| bad(Some(e.fm_post)) || bad(e.fm_prior) || bad(e.llr))
            .unwrap_or((0, &eps[0]));
        let val = |v: Option<crate::gradcore::Var>| v.map(|v| tape.value(v).item().to_f64_lossy());
        let (index, ep) = batch[slot];
        Error::NonFinite {
            episode: index,
            detail: format!(
                "step {} batch slot {slot} family {} `{}`: fm_post {:?} fm_prior {:?} llr {:?}; batch total {}",
                self.step(),
                ep.family,
                ep.instruction.text(),
                val(Some(losses.fm_post)),
                val(losses.fm_prior),
                val(losses.llr),
                r.total
            ),
        }
    }

    pub fn export_state(&self) -> TrainerState {
        let (m, v) = self.opt.moments();
        let rec = |ts: &[crate::gradcore::Tensor<S>]| {
            self.store
                .iter()
                .zip(ts)
                .map(|((_, name, _), t)| TensorRecord::of(name, t))
                .collect()
        };
        TrainerState {
            step: self.opt.step(),
            params: self.store.to_records(),
            first_moments: rec(m),
            second_moments: rec(v),
            data_rng: RngState::of(&self.data_rng),
            flow_rng: RngState::of(&self.flow_rng),
        }
    }

    /// Restores weights, moments, step counter and random streams.
    pub fn import_state(&mut self, state: &TrainerState) -> Result<()> {
        let mut store = self.store.clone();
        store.load_records(&state.params)?;
        let moments = |recs: &[TensorRecord]| -> Result<Vec<crate::gradcore::Tensor<S>>> {
            let mut scratch = self.store.clone();
            scratch.load_records(recs)?;
            Ok(scratch.iter().map(|(_, _, t)| t.clone()).collect())
        };
        let first = moments(&state.first_moments)?;
        let second = moments(&state.second_moments)?;
        self.opt = OptimizerState::from_parts(self.config.optimizer, state.step, first, second);
        self.store = store;
        self.data_rng = state.data_rng.restore()?;
        self.flow_rng = state.flow_rng.restore()?;
        Ok(())
    }

    pub fn infer(&self, vision: &[usize], language: &[usize], steps: usize, seed: u64) -> Result<crate::trajectory::ActionTrajectory> {
        let masked;
        let language = if self.config.objective.mode == Mode::VisionOnly {
            masked = vec![crate::worldgen::Vocab::PAD; language.len()];
            &masked
        } else {
            language
        };
        self.model.infer(&self.store, vision, language, steps, seed)
    }
}
