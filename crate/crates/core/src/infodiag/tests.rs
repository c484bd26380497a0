use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::dualbranch::DualModel;
use crate::flowhead::FlowConfig;
use crate::gradcore::ParamStore;
use crate::seqmodel::ModelConfig;
use crate::trajectory::ActionTrajectory;
use crate::worldgen::{Dataset, DatasetSpec, Split, TaskRule};

const LN2: f64 = std::f64::consts::LN_2;

fn check_identity(r: &InfoReport) {
    assert!((r.h_l_given_v - r.h_l_given_av - r.cmi).abs() < 1e-12, "{r:?}");
}

#[test]
fn copy_channel_carries_one_bit() {
    // One vision, ℓ uniform on {0,1}, a = ℓ.
    let j = JointDistribution::new(1, 2, 2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    let r = brute_force_cmi(&j);
    assert!((r.cmi - LN2).abs() < 1e-15);
    assert!((r.h_l_given_v - LN2).abs() < 1e-15);
    assert_eq!(r.h_l_given_av, 0.0);
    check_identity(&r);
}

#[test]
fn deterministic_language_has_no_information() {
    // ℓ is a function of v, so nothing is left for the action to explain.
    let mut p = vec![0.0; 3 * 3 * 2];
    for v in 0..3 {
        for a in 0..2 {
            p[(v * 3 + v) * 2 + a] = 1.0 / 6.0;
        }
    }
    let r = brute_force_cmi(&JointDistribution::new(3, 3, 2, p).unwrap());
    assert_eq!(r.cmi, 0.0);
    assert_eq!(r.h_l_given_v, 0.0);
    check_identity(&r);
}

#[test]
fn independent_language_and_action() {
    let (pl, pa) = ([0.2, 0.8], [0.1, 0.6, 0.3]);
    let mut p = Vec::new();
    for l in pl {
        for a in pa {
            p.push(l * a);
        }
    }
    let r = brute_force_cmi(&JointDistribution::new(1, 2, 3, p).unwrap());
    assert!(r.cmi.abs() < 1e-15);
    let h = -(0.2f64 * 0.2f64.ln() + 0.8 * 0.8f64.ln());
    assert!((r.h_l_given_v - h).abs() < 1e-15);
    check_identity(&r);
}

#[test]
fn random_joints_satisfy_identity_and_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (nv, nl, na) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
        // Sparse tables exercise the 0·log 0 convention.
        let counts: Vec<f64> = (0..nv * nl * na)
            .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
            .collect();
        if counts.iter().all(|&c| c == 0.0) {
            continue;
        }
        let j = JointDistribution::from_counts(nv, nl, na, &counts).unwrap();
        let r = brute_force_cmi(&j);
        check_identity(&r);
        assert!(r.cmi >= -1e-12);
        assert!(r.cmi <= r.h_l_given_v + 1e-12);
        assert!(r.h_l_given_v <= (nl as f64).ln() + 1e-12);
        let (gap, excluded) = pmi_identity_check(&j);
        assert!(gap < 1e-12);
        assert_eq!(excluded, 0);
        // The expected pointwise term is the conditional mutual information.
        let mut k = 0;
        let mut mean = 0.0;
        for v in 0..nv {
            for l in 0..nl {
                for a in 0..na {
                    if j.p(v, l, a) > 0.0 {
                        mean += j.p(v, l, a) * r.pmi[k];
                        k += 1;
                    }
                }
            }
        }
        assert!((mean - r.cmi).abs() < 1e-12);
    }
}

#[test]
fn unnormalized_tables_are_rejected() {
    assert!(JointDistribution::new(1, 1, 2, vec![0.5, 0.6]).is_err());
    assert!(JointDistribution::new(1, 1, 2, vec![1.0]).is_err());
    assert!(JointDistribution::from_counts(1, 1, 1, &[0.0]).is_err());
}

fn corpus(alpha: usize, rule: TaskRule, per_family: usize) -> Dataset {
    Dataset::generate(&DatasetSpec {
        n_episodes: 400,
        alpha,
        episodes_per_family: per_family,
        rule,
        ..DatasetSpec::default()
    })
    .unwrap()
}

#[test]
fn deterministic_corpus_has_zero_cmi() {
    let d = corpus(1, TaskRule::Cue, 1);
    let r = brute_force_cmi(&empirical_joint(d.split(Split::Train)).unwrap());
    assert_eq!(r.cmi, 0.0);
    assert_eq!(r.h_l_given_v, 0.0);
}

#[test]
fn two_task_corpus_approaches_one_bit() {
    let d = corpus(2, TaskRule::Uniform, 40);
    let r = brute_force_cmi(&empirical_joint(d.split(Split::Train)).unwrap());
    assert!((r.h_l_given_v - LN2).abs() < 0.02, "{r:?}");
    assert!((r.cmi - LN2).abs() < 0.02, "{r:?}");
    check_identity(&r);
}

fn tiny_model() -> (DualModel, ParamStore<f64>) {
    let m = ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        num_queries: 2,
        max_seq_len: 40,
        ..ModelConfig::default()
    };
    let f = FlowConfig {
        d_model: 16,
        n_heads: 2,
        n_blocks: 1,
        time_features: 4,
        ..FlowConfig::default()
    };
    let mut store = ParamStore::new();
    let dm = DualModel::new(m, f, &mut store).unwrap();
    (dm, store)
}

#[test]
fn zero_logits_give_uniform_nll() {
    let (dm, mut store) = tiny_model();
    let head = dm.vlm.lm_head();
    let n_out = store.get(head).cols();
    store.get_mut(head).data_mut().fill(0.0);
    let d = corpus(1, TaskRule::Cue, 1);
    let eps: Vec<&Episode> = d.split(Split::Train).take(5).collect();
    let r = model_nll(&dm, &store, &eps).unwrap();
    assert!((r.nll_per_token - (n_out as f64).ln()).abs() < 1e-12, "{r:?}");
    assert!(r.std < 1e-12);
    assert!((r.ppl - n_out as f64).abs() < 1e-9);
}

#[test]
fn expert_replay_always_succeeds() {
    let d = corpus(1, TaskRule::Cue, 1);
    let eps: Vec<&Episode> = d.split(Split::Id).collect();
    let w = &d.spec.world;
    let r = eval_policy(&eps, w, &[0, 1], "id", Condition::Full, |ep, _| Ok(ep.expert.clone())).unwrap();
    assert_eq!(r.success_rate, 1.0);
    assert_eq!(r.trials, 2 * eps.len());
    assert_eq!(r.per_seed, vec![1.0, 1.0]);
}

#[test]
fn random_actions_rarely_succeed() {
    let d = corpus(1, TaskRule::Cue, 1);
    let eps: Vec<&Episode> = d.split(Split::Id).collect();
    let w = &d.spec.world;
    let r = eval_policy(&eps, w, &[0, 1, 2], "id", Condition::Full, |ep, seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 0.05).unwrap();
        let data: Vec<f64> = (0..ep.expert.horizon * 2).map(|_| n.sample(&mut rng)).collect();
        ActionTrajectory::new(ep.expert.horizon, 2, data)
    })
    .unwrap();
    assert!(r.success_rate < 0.1, "{r:?}");
}

#[test]
fn untrained_model_runs_through_probes() {
    let (dm, store) = tiny_model();
    let d = corpus(1, TaskRule::Cue, 1);
    let eps: Vec<&Episode> = d.split(Split::Id).take(4).collect();
    let w = &d.spec.world;
    let full = eval_success(&dm, &store, &eps, w, &[3], 2, "id", Condition::Full).unwrap();
    let vo = vision_only_probe(&dm, &store, &eps, w, &[3], 2, "id").unwrap();
    assert_eq!(vo.condition, Condition::VisionOnly);
    assert_eq!(full.trials, 4);
    assert!((0.0..=1.0).contains(&vo.success_rate));
}

proptest! {
    #[test]
    fn cmi_bounds_hold(raw in prop::collection::vec(0.0f64..1.0, 2 * 3 * 3)) {
        prop_assume!(raw.iter().sum::<f64>() > 1e-3);
        let j = JointDistribution::from_counts(2, 3, 3, &raw).unwrap();
        let r = brute_force_cmi(&j);
        prop_assert!((r.h_l_given_v - r.h_l_given_av - r.cmi).abs() < 1e-12);
        prop_assert!(r.cmi >= -1e-12 && r.cmi <= r.h_l_given_v + 1e-12);
    }
}
