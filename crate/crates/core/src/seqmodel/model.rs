use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Role, SequenceLayout};
use crate::error::{Error, Result};
use crate::gradcore::{AttnMask, ParamId, ParamStore, Tape, Tensor, Var};
use crate::scalar::Scalar;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;
const MLP_RATIO: usize = 4;

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

/// Handles into a [`ParamStore`] for one transformer. The weights themselves
/// live in the store so that several modules can share one optimizer.
#[derive(Clone, Debug)]
pub struct SeqModel {
    prefix: String,
    config: ModelConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    lm_head: ParamId,
}

/// Final-layer states for a contiguous run of positions `start..start+len`.
#[derive(Clone, Copy, Debug)]
pub struct HiddenStates {
    pub start: usize,
    pub len: usize,
    /// `len × d_model`, absent when `len == 0`.
    pub hidden: Option<Var>,
    /// `1 × d_model` state at position `start − 1`, kept so the first suffix
    /// token can still be scored.
    pub context: Option<Var>,
}

/// Per-layer keys and values of a vision prefix, bound to the tape that built it.
#[derive(Clone, Debug)]
pub struct PrefixCache {
    pub tokens: Vec<usize>,
    kv: Vec<(Var, Var)>,
    last: Var,
    tape: u64,
}

impl PrefixCache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LanguageLogProbs {
    /// One log-probability per language token.
    pub per_token: Var,
    pub mean: Var,
}

impl SeqModel {
    /// Registers freshly initialised weights under `prefix`.
    pub fn new<S: Scalar>(config: ModelConfig, store: &mut ParamStore<S>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let n = |s: &str| format!("{prefix}{s}");
        let tok_emb = store.add_normal(n("tok_emb"), &[config.vocab_size(), d], INIT_STD, &mut rng)?;
        let pos_emb = store.add_normal(n("pos_emb"), &[config.max_seq_len, d], INIT_STD, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let ln = |name: &str, store: &mut ParamStore<S>| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.add_const(n(&format!("l{l}.{name}.g")), &[d], 1.0)?,
                    store.add_const(n(&format!("l{l}.{name}.b")), &[d], 0.0)?,
                ))
            };
            let ln1 = ln("ln1", store)?;
            let ln2 = ln("ln2", store)?;
            let mut lin = |name: &str, i: usize, o: usize, store: &mut ParamStore<S>| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.add_normal(n(&format!("l{l}.{name}.w")), &[i, o], INIT_STD, &mut rng)?,
                    store.add_const(n(&format!("l{l}.{name}.b")), &[o], 0.0)?,
                ))
            };
            blocks.push(Block {
                ln1,
                wq: lin("wq", d, d, store)?,
                wk: lin("wk", d, d, store)?,
                wv: lin("wv", d, d, store)?,
                wo: lin("wo", d, d, store)?,
                ln2,
                fc1: lin("fc1", d, MLP_RATIO * d, store)?,
                fc2: lin("fc2", MLP_RATIO * d, d, store)?,
            });
        }
        let ln_f = (store.add_const(n("ln_f.g"), &[d], 1.0)?, store.add_const(n("ln_f.b"), &[d], 0.0)?);
        let lm_head = store.add_normal(n("lm_head"), &[d, config.base_vocab], INIT_STD, &mut rng)?;
        Ok(Self {
            prefix: prefix.into(),
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            lm_head,
        })
    }

    /// Name prefix of every parameter this model registered.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter this model owns, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            for (g, bias) in [b.ln1, b.ln2, b.wq, b.wk, b.wv, b.wo, b.fc1, b.fc2] {
                ids.extend([g, bias]);
            }
        }
        ids.extend([self.ln_f.0, self.ln_f.1, self.lm_head]);
        ids.sort();
        ids
    }

    /// Token embedding table; rows `V..V+K` are the query embeddings.
    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    pub fn lm_head(&self) -> ParamId {
        self.lm_head
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, layout: &SequenceLayout) -> Result<HiddenStates> {
        let tokens = layout.tokens();
        let (h, _) = self.run(tape, store, &tokens, 0, &[])?;
        Ok(HiddenStates {
            start: 0,
            len: tokens.len(),
            hidden: Some(h),
            context: None,
        })
    }

    /// Runs the vision tokens once and keeps what later positions attend to.
    pub fn prefill<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, vision: &[usize]) -> Result<PrefixCache> {
        if vision.is_empty() {
            return Err(Error::contract("cannot prefill an empty prefix"));
        }
        let (h, kv) = self.run(tape, store, vision, 0, &[])?;
        let last = tape.slice_rows(h, vision.len() - 1, 1)?;
        Ok(PrefixCache {
            tokens: vision.to_vec(),
            kv,
            last,
            tape: tape.id(),
        })
    }

    /// States for `suffix` placed directly after the cached prefix.
    pub fn continue_from<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        cache: &PrefixCache,
        suffix: &[usize],
    ) -> Result<HiddenStates> {
        if cache.tape != tape.id() {
            return Err(Error::contract("prefix cache belongs to a different tape"));
        }
        let start = cache.len();
        if suffix.is_empty() {
            return Ok(HiddenStates {
                start,
                len: 0,
                hidden: None,
                context: Some(cache.last),
            });
        }
        let (h, _) = self.run(tape, store, suffix, start, &cache.kv)?;
        Ok(HiddenStates {
            start,
            len: suffix.len(),
            hidden: Some(h),
            context: Some(cache.last),
        })
    }

    /// [`continue_from`](Self::continue_from) for the part of `layout` after
    /// its vision segment, which must equal the cached prefix.
    pub fn continue_layout<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        cache: &PrefixCache,
        layout: &SequenceLayout,
    ) -> Result<HiddenStates> {
        let vision = layout.segment(Role::Vision).ok_or_else(|| Error::contract("layout has no vision segment"))?;
        if vision.start != 0 || vision.tokens != cache.tokens {
            return Err(Error::contract("layout prefix does not match the cached vision tokens"));
        }
        self.continue_from(tape, store, cache, &layout.suffix())
    }

    /// The K rows at the query positions, in query order.
    pub fn extract_query_states<S: Scalar>(&self, tape: &mut Tape<S>, h: &HiddenStates, layout: &SequenceLayout) -> Result<Var> {
        let q = layout.segment(Role::Query).ok_or_else(|| Error::contract("layout has no query segment"))?;
        let hidden = match h.hidden {
            Some(v) if q.start >= h.start && q.end() <= h.start + h.len => v,
            _ => {
                return Err(Error::contract(format!(
                    "query positions {}..{} not covered by states {}..{}",
                    q.start,
                    q.end(),
                    h.start,
                    h.start + h.len
                )))
            }
        };
        tape.slice_rows(hidden, q.start - h.start, q.tokens.len())
    }

    /// Next-token log-probabilities over the base vocabulary, one row per covered position.
    pub fn logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: &HiddenStates) -> Result<Option<Var>> {
        let Some(hidden) = h.hidden else { return Ok(None) };
        let w = tape.param(store, self.lm_head);
        Ok(Some(tape.matmul(hidden, w)?))
    }

    /// Log-probability of each language token given everything before it.
    pub fn language_logprobs<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        h: &HiddenStates,
        layout: &SequenceLayout,
    ) -> Result<LanguageLogProbs> {
        let lang = layout
            .segment(Role::Language)
            .ok_or_else(|| Error::contract("layout has no language segment"))?;
        let n = lang.tokens.len();
        if n == 0 {
            return Err(Error::contract("empty language segment"));
        }
        if lang.start == 0 {
            return Err(Error::contract("language segment at position 0 has no context"));
        }
        // Predictor rows sit at positions lang.start-1 .. lang.end()-1.
        let first = lang.start - 1;
        let end = h.start + h.len;
        let pred = match h.hidden {
            Some(hidden) if first >= h.start && lang.end() - 1 <= end => tape.slice_rows(hidden, first - h.start, n)?,
            _ if first + 1 == h.start && h.context.is_some() && lang.end() - 1 <= end => {
                let ctx = h.context.expect("checked");
                if n == 1 {
                    ctx
                } else {
                    let rest = tape.slice_rows(h.hidden.expect("n > 1 implies states"), 0, n - 1)?;
                    tape.concat_rows(&[ctx, rest])?
                }
            }
            _ => {
                return Err(Error::contract(format!(
                    "language predictors {}..{} not covered by states {}..{end}",
                    first,
                    lang.end() - 1,
                    h.start
                )))
            }
        };
        let w = tape.param(store, self.lm_head);
        let logits = tape.matmul(pred, w)?;
        let rows: Vec<usize> = (0..n).collect();
        let per_token = tape.pick_log_softmax(logits, &rows, &lang.tokens)?;
        let mean = tape.mean(per_token);
        Ok(LanguageLogProbs { per_token, mean })
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

    /// Runs `tokens` at positions `start..`, attending to `past` keys/values
    /// for earlier positions. Every op is row-local apart from attention, so a
    /// split run reproduces the single run bit for bit.
    fn run<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        tokens: &[usize],
        start: usize,
        past: &[(Var, Var)],
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let c = &self.config;
        let end = start + tokens.len();
        if end > c.max_seq_len {
            return Err(Error::Length {
                len: end,
                max: c.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= c.vocab_size()) {
            return Err(Error::Index(format!("token {t} outside vocabulary of {}", c.vocab_size())));
        }
        if past.len() != if start == 0 { 0 } else { self.blocks.len() } {
            return Err(Error::contract("prefix cache does not match the model depth"));
        }
        let te = tape.param(store, self.tok_emb);
        let pe = tape.param(store, self.pos_emb);
        let tok = tape.gather_rows(te, tokens)?;
        let positions: Vec<usize> = (start..end).collect();
        let pos = tape.gather_rows(pe, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for (l, b) in self.blocks.iter().enumerate() {
            let h = self.norm(tape, store, x, b.ln1)?;
            let q = self.linear(tape, store, h, b.wq)?;
            let mut k = self.linear(tape, store, h, b.wk)?;
            let mut v = self.linear(tape, store, h, b.wv)?;
            if let Some(&(pk, pv)) = past.get(l) {
                k = tape.concat_rows(&[pk, k])?;
                v = tape.concat_rows(&[pv, v])?;
            }
            kv.push((k, v));
            let a = tape.attention(q, k, v, c.n_heads, AttnMask::Causal { query_offset: start })?;
            let a = self.linear(tape, store, a, b.wo)?;
            x = tape.add(x, a)?;
            let h = self.norm(tape, store, x, b.ln2)?;
            let m = self.linear(tape, store, h, b.fc1)?;
            let m = tape.gelu(m);
            let m = self.linear(tape, store, m, b.fc2)?;
            x = tape.add(x, m)?;
        }
        let out = self.norm(tape, store, x, self.ln_f)?;
        Ok((out, kv))
    }

    /// Convenience for inference: the K query rows of `layout` as a plain tensor.
    pub fn query_states_value<S: Scalar>(&self, store: &ParamStore<S>, layout: &SequenceLayout) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let h = self.forward(&mut tape, store, layout)?;
        let q = self.extract_query_states(&mut tape, &h, layout)?;
        Ok(tape.value(q).clone())
    }
}
