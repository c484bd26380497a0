//! Exact information measures on discrete joints and behavioural probes of
//! trained policies.

mod probe;

pub use probe::{eval_policy, eval_success, model_nll, vision_only_probe, Condition, NllReport, ProbeResult};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldgen::Episode;

const NORM_TOL: f64 = 1e-12;

/// Table `p(v, ℓ, a)` over finite supports, stored `v`-major then `ℓ` then `a`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointDistribution {
    pub nv: usize,
    pub nl: usize,
    pub na: usize,
    p: Vec<f64>,
}

impl JointDistribution {
    pub fn new(nv: usize, nl: usize, na: usize, p: Vec<f64>) -> Result<Self> {
        if nv * nl * na == 0 || p.len() != nv * nl * na {
            return Err(Error::dim(format!("{} entries for a {nv}×{nl}×{na} table", p.len())));
        }
        if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::contract("probabilities must be finite and nonnegative"));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::contract(format!("table sums to {total}, not 1")));
        }
        Ok(Self { nv, nl, na, p })
    }

    /// Normalizes nonnegative weights.
    pub fn from_counts(nv: usize, nl: usize, na: usize, counts: &[f64]) -> Result<Self> {
        let total: f64 = counts.iter().sum();
        if !(total > 0.0) {
            return Err(Error::contract("counts sum to zero"));
        }
        Self::new(nv, nl, na, counts.iter().map(|c| c / total).collect())
    }

    pub fn p(&self, v: usize, l: usize, a: usize) -> f64 {
        self.p[(v * self.nl + l) * self.na + a]
    }

    fn p_v(&self, v: usize) -> f64 {
        (0..self.nl).flat_map(|l| (0..self.na).map(move |a| (l, a))).map(|(l, a)| self.p(v, l, a)).sum()
    }

    fn p_vl(&self, v: usize, l: usize) -> f64 {
        (0..self.na).map(|a| self.p(v, l, a)).sum()
    }

    fn p_va(&self, v: usize, a: usize) -> f64 {
        (0..self.nl).map(|l| self.p(v, l, a)).sum()
    }

    fn support(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        (0..self.nv)
            .flat_map(move |v| (0..self.nl).flat_map(move |l| (0..self.na).map(move |a| (v, l, a))))
            .map(|(v, l, a)| (v, l, a, self.p(v, l, a)))
            .filter(|&(.., p)| p > 0.0)
    }
}

/// Entropies in nats, plus model likelihood fields when they were measured.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InfoReport {
    pub h_l_given_v: f64,
    pub h_l_given_av: f64,
    pub cmi: f64,
    /// `log p(ℓ|a,v) − log p(ℓ|v)` at every support point, in table order.
    pub pmi: Vec<f64>,
    pub nll_per_token: Option<f64>,
    pub ppl: Option<f64>,
    pub nll_std: Option<f64>,
    pub samples: usize,
}

/// Exact `H(ℓ|v)`, `H(ℓ|a,v)` and `I(ℓ; a | v)` by enumeration, with `0·log 0 = 0`.
///
/// The mutual information is summed directly from its definition rather than
/// as a difference of the two entropies, so the entropy identity is a real check.
pub fn brute_force_cmi(j: &JointDistribution) -> InfoReport {
    let mut h_lv = 0.0;
    let mut h_lav = 0.0;
    let mut cmi = 0.0;
    let mut pmi = Vec::new();
    for (v, l, a, p) in j.support() {
        let (pv, pvl, pva) = (j.p_v(v), j.p_vl(v, l), j.p_va(v, a));
        h_lv -= p * (pvl / pv).ln();
        h_lav -= p * (p / pva).ln();
        cmi += p * ((p * pv) / (pvl * pva)).ln();
        pmi.push((p / pva).ln() - (pvl / pv).ln());
    }
    InfoReport {
        h_l_given_v: h_lv,
        h_l_given_av: h_lav,
        cmi,
        samples: pmi.len(),
        pmi,
        ..InfoReport::default()
    }
}

/// Largest disagreement between `log π(a|v,ℓ)/p(a|v)` and `log p(ℓ|a,v)/p(ℓ|v)`
/// over the support, and how many points had an undefined conditional.
pub fn pmi_identity_check(j: &JointDistribution) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut excluded = 0;
    for (v, l, a, p) in j.support() {
        let (pv, pvl, pva) = (j.p_v(v), j.p_vl(v, l), j.p_va(v, a));
        if pv == 0.0 || pvl == 0.0 || pva == 0.0 {
            excluded += 1;
            continue;
        }
        let action_form = (p / pvl).ln() - (pva / pv).ln();
        let language_form = (p / pva).ln() - (pvl / pv).ln();
        worst = worst.max((action_form - language_form).abs());
    }
    (worst, excluded)
}

/// Frequency table over (rendered vision, instruction, task label) keys. The
/// task label `(OBJ, REC)` stands in for the continuous action.
pub fn empirical_joint<'a>(episodes: impl IntoIterator<Item = &'a Episode>) -> Result<JointDistribution> {
    let mut vis: BTreeMap<&[usize], usize> = BTreeMap::new();
    let mut lang: BTreeMap<&[usize], usize> = BTreeMap::new();
    let mut act: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut keys = Vec::new();
    for e in episodes {
        let n = vis.len();
        let v = *vis.entry(&e.vision).or_insert(n);
        let n = lang.len();
        let l = *lang.entry(&e.language).or_insert(n);
        let n = act.len();
        let a = *act.entry((e.instruction.object, e.instruction.receptacle)).or_insert(n);
        keys.push((v, l, a));
    }
    if keys.is_empty() {
        return Err(Error::contract("empirical joint of no episodes"));
    }
    let (nv, nl, na) = (vis.len(), lang.len(), act.len());
    let mut counts = vec![0.0; nv * nl * na];
    for (v, l, a) in keys {
        counts[(v * nl + l) * na + a] += 1.0;
    }
    JointDistribution::from_counts(nv, nl, na, &counts)
}

#[cfg(test)]
mod tests;
