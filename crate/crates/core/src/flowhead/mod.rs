//! Rectified flow-matching action head.
//!
//! The velocity net reads one token per trajectory scalar. Each token carries
//! its current value and sinusoidal features of `t`, and cross-attends to the
//! condition rows coming from the sequence model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{AttnMask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::trajectory::ActionTrajectory;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub horizon: usize,
    pub action_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Rows K of the condition matrix.
    pub cond_rows: usize,
    /// Width of each condition row.
    pub cond_dim: usize,
    /// Number of sinusoidal time features; even.
    pub time_features: usize,
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            action_dim: 2,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            cond_rows: 8,
            cond_dim: 64,
            time_features: 8,
            sample_steps: 10,
            seed: 1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.horizon == 0 || self.action_dim == 0 {
            return bad("horizon", "horizon and action_dim must be positive");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model", "must be a positive multiple of n_heads");
        }
        if self.cond_rows == 0 || self.cond_dim == 0 {
            return bad("cond_rows", "condition must be nonempty");
        }
        if self.time_features == 0 || !self.time_features.is_multiple_of(2) {
            return bad("time_features", "must be positive and even");
        }
        if self.sample_steps == 0 {
            return bad("sample_steps", "must be at least 1");
        }
        Ok(())
    }

    /// Scalars per trajectory, which is also the token count of the net.
    pub fn tokens(&self) -> usize {
        self.horizon * self.action_dim
    }
}

/// One training example for the flow objective.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    pub a0: ActionTrajectory,
    pub a1: ActionTrajectory,
    pub at: ActionTrajectory,
    pub target_velocity: ActionTrajectory,
}

/// `a_t = (1−t)·a0 + t·a1` and target `a1 − a0`.
pub fn interpolate(a0: &ActionTrajectory, a1: &ActionTrajectory, t: f64) -> Result<FlowSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("flow time {t} outside [0, 1]")));
    }
    if a0.horizon != a1.horizon || a0.dim != a1.dim {
        return Err(Error::dim(format!(
            "noise {}×{} vs target {}×{}",
            a0.horizon, a0.dim, a1.horizon, a1.dim
        )));
    }
    let mix = a0.data.iter().zip(&a1.data).map(|(&x, &y)| (1.0 - t) * x + t * y).collect();
    let vel = a0.data.iter().zip(&a1.data).map(|(&x, &y)| y - x).collect();
    Ok(FlowSample {
        t,
        a0: a0.clone(),
        a1: a1.clone(),
        at: ActionTrajectory::new(a0.horizon, a0.dim, mix)?,
        target_velocity: ActionTrajectory::new(a0.horizon, a0.dim, vel)?,
    })
}

pub fn gaussian_trajectory(horizon: usize, dim: usize, rng: &mut impl Rng) -> ActionTrajectory {
    let data = (0..horizon * dim).map(|_| rng.sample(StandardNormal)).collect();
    ActionTrajectory { horizon, dim, data }
}

/// Draws `t ~ U[0,1]` and `a0 ~ N(0, I)` and interpolates toward `a1`.
pub fn draw_sample(a1: &ActionTrajectory, rng: &mut impl Rng) -> FlowSample {
    let t: f64 = rng.random_range(0.0..=1.0);
    let a0 = gaussian_trajectory(a1.horizon, a1.dim, rng);
    interpolate(&a0, a1, t).expect("shapes and t are valid by construction")
}

/// Explicit Euler from `t = 0` to `t = 1` in `steps` uniform steps.
pub fn euler_integrate(
    a0: &ActionTrajectory,
    steps: usize,
    mut field: impl FnMut(&ActionTrajectory, f64) -> Result<Vec<f64>>,
) -> Result<ActionTrajectory> {
    if steps == 0 {
        return Err(Error::contract("sampler needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = a0.clone();
    for i in 0..steps {
        let v = field(&x, i as f64 * dt)?;
        if v.len() != x.data.len() {
            return Err(Error::dim(format!("velocity of {} values for {} actions", v.len(), x.data.len())));
        }
        for (a, dv) in x.data.iter_mut().zip(v) {
            *a += dt * dv;
        }
    }
    Ok(x)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct FlowHead {
    config: FlowConfig,
    input: (ParamId, ParamId),
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl FlowHead {
    pub fn new<S: Scalar>(config: FlowConfig, store: &mut ParamStore<S>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let n = |s: &str| format!("{prefix}{s}");
        let input = (
            store.add_normal(n("in.w"), &[1 + config.time_features, d], INIT_STD, &mut rng)?,
            store.add_const(n("in.b"), &[d], 0.0)?,
        );
        let pos = store.add_normal(n("pos"), &[config.tokens(), d], INIT_STD, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for l in 0..config.n_blocks {
            let ln = |name: &str, store: &mut ParamStore<S>| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.add_const(n(&format!("b{l}.{name}.g")), &[d], 1.0)?,
                    store.add_const(n(&format!("b{l}.{name}.b")), &[d], 0.0)?,
                ))
            };
            let ln1 = ln("ln1", store)?;
            let ln2 = ln("ln2", store)?;
            let mut lin = |name: &str, i: usize, o: usize, store: &mut ParamStore<S>| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.add_normal(n(&format!("b{l}.{name}.w")), &[i, o], INIT_STD, &mut rng)?,
                    store.add_const(n(&format!("b{l}.{name}.b")), &[o], 0.0)?,
                ))
            };
            blocks.push(Block {
                ln1,
                wq: lin("wq", d, d, store)?,
                wk: lin("wk", config.cond_dim, d, store)?,
                wv: lin("wv", config.cond_dim, d, store)?,
                wo: lin("wo", d, d, store)?,
                ln2,
                fc1: lin("fc1", d, 4 * d, store)?,
                fc2: lin("fc2", 4 * d, d, store)?,
            });
        }
        let ln_f = (store.add_const(n("ln_f.g"), &[d], 1.0)?, store.add_const(n("ln_f.b"), &[d], 0.0)?);
        let out = (
            store.add_normal(n("out.w"), &[d, 1], INIT_STD, &mut rng)?,
            store.add_const(n("out.b"), &[1], 0.0)?,
        );
        Ok(Self {
            config,
            input,
            pos,
            blocks,
            ln_f,
            out,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.input.0, self.input.1, self.pos];
        for b in &self.blocks {
            for (w, bias) in [b.ln1, b.ln2, b.wq, b.wk, b.wv, b.wo, b.fc1, b.fc2] {
                ids.extend([w, bias]);
            }
        }
        ids.extend([self.ln_f.0, self.ln_f.1, self.out.0, self.out.1]);
        ids.sort();
        ids
    }

    /// Output projection `(weight, bias)`; the bias is the velocity of an all-zero net.
    pub fn output_params(&self) -> (ParamId, ParamId) {
        self.out
    }

    fn time_features(&self, t: f64) -> Vec<f64> {
        let half = self.config.time_features / 2;
        let mut f = Vec::with_capacity(2 * half);
        for i in 0..half {
            let w = std::f64::consts::PI * (1u64 << i.min(62)) as f64;
            f.push((w * t).sin());
            f.push((w * t).cos());
        }
        f
    }

    fn check_cond<S: Scalar>(&self, tape: &Tape<S>, cond: Var) -> Result<()> {
        let c = tape.value(cond);
        if c.shape() != [self.config.cond_rows, self.config.cond_dim] {
            return Err(Error::dim(format!(
                "condition {:?}, expected [{}, {}]",
                c.shape(),
                self.config.cond_rows,
                self.config.cond_dim
            )));
        }
        Ok(())
    }

    /// Predicted velocities for a stack of `(a_t, t)` pairs sharing one
    /// condition, as a column with one row per trajectory scalar.
    pub fn velocity<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        points: &[(&ActionTrajectory, f64)],
        cond: Var,
    ) -> Result<Var> {
        self.check_cond(tape, cond)?;
        if points.is_empty() {
            return Err(Error::contract("velocity of an empty batch"));
        }
        let c = &self.config;
        let n_tok = c.tokens();
        let width = 1 + c.time_features;
        let mut feats = Vec::with_capacity(points.len() * n_tok * width);
        let mut positions = Vec::with_capacity(points.len() * n_tok);
        for (a, t) in points {
            if a.horizon != c.horizon || a.dim != c.action_dim {
                return Err(Error::dim(format!(
                    "trajectory {}×{}, head expects {}×{}",
                    a.horizon, a.dim, c.horizon, c.action_dim
                )));
            }
            let tf = self.time_features(*t);
            for (j, &x) in a.data.iter().enumerate() {
                feats.push(S::of(x));
                feats.extend(tf.iter().map(|&v| S::of(v)));
                positions.push(j);
            }
        }
        let rows = points.len() * n_tok;
        let x_in = tape.constant(Tensor::new(&[rows, width], feats)?);
        let mut x = self.linear(tape, store, x_in, self.input)?;
        let pe = tape.param(store, self.pos);
        let pos = tape.gather_rows(pe, &positions)?;
        x = tape.add(x, pos)?;
        for b in &self.blocks {
            let h = self.norm(tape, store, x, b.ln1)?;
            let q = self.linear(tape, store, h, b.wq)?;
            let k = self.linear(tape, store, cond, b.wk)?;
            let v = self.linear(tape, store, cond, b.wv)?;
            let a = tape.attention(q, k, v, c.n_heads, AttnMask::Full)?;
            let a = self.linear(tape, store, a, b.wo)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, store, x, b.ln2)?;
            let m = self.linear(tape, store, h, b.fc1)?;
            let m = tape.gelu(m);
            let m = self.linear(tape, store, m, b.fc2)?;
            x = tape.add(x, m)?;
        }
        let h = self.norm(tape, store, x, self.ln_f)?;
        self.linear(tape, store, h, self.out)
    }

    /// Mean squared error between predicted and target velocity over every
    /// sample and element.
    pub fn fm_loss<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        samples: &[FlowSample],
        cond: Var,
    ) -> Result<Var> {
        let points: Vec<(&ActionTrajectory, f64)> = samples.iter().map(|s| (&s.at, s.t)).collect();
        let pred = self.velocity(tape, store, &points, cond)?;
        let target: Vec<S> = samples
            .iter()
            .flat_map(|s| s.target_velocity.data.iter().map(|&v| S::of(v)))
            .collect();
        let n = target.len();
        let target = tape.constant(Tensor::new(&[n, 1], target)?);
        tape.sq_err_mean(pred, target)
    }

    /// Euler-integrates the learned field from seeded Gaussian noise.
    pub fn sample_actions<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cond: &Tensor<S>,
        steps: usize,
        seed: u64,
    ) -> Result<ActionTrajectory> {
        if steps == 0 {
            return Err(Error::contract("sampler needs at least one step"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a0 = gaussian_trajectory(self.config.horizon, self.config.action_dim, &mut rng);
        euler_integrate(&a0, steps, |x, t| {
            let mut tape = Tape::new();
            let c = tape.constant(cond.clone());
            let v = self.velocity(&mut tape, store, &[(x, t)], c)?;
            Ok(tape.value(v).to_f64_vec())
        })
    }

    fn linear<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (tape.param(store, w), tape.param(store, b));
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let (g, b) = (tape.param(store, g), tape.param(store, b));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[cfg(test)]
mod tests;
