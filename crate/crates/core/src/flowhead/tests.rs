use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcore::{AdamWConfig, OptimizerState, Schedule};

fn traj(h: usize, d: usize, v: &[f64]) -> ActionTrajectory {
    ActionTrajectory::new(h, d, v.to_vec()).unwrap()
}

fn small(seed: u64) -> (FlowHead, ParamStore<f64>) {
    let cfg = FlowConfig {
        horizon: 3,
        action_dim: 2,
        d_model: 8,
        n_heads: 2,
        n_blocks: 2,
        cond_rows: 2,
        cond_dim: 6,
        time_features: 4,
        sample_steps: 10,
        seed,
    };
    let mut store = ParamStore::new();
    let head = FlowHead::new(cfg, &mut store, "head.").unwrap();
    (head, store)
}

fn random_cond(seed: u64, rows: usize, cols: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = gaussian_trajectory(rows, cols, &mut rng);
    Tensor::new(&[rows, cols], t.data).unwrap()
}

fn force_output(head: &FlowHead, store: &mut ParamStore<f64>, c: f64) {
    let (w, b) = head.output_params();
    let shape = store.get(w).shape().to_vec();
    *store.get_mut(w) = Tensor::zeros(&shape);
    *store.get_mut(b) = Tensor::full(&[1], c);
}

#[test]
fn interpolation_examples() {
    let a0 = traj(1, 2, &[0.0, 0.0]);
    let a1 = traj(1, 2, &[2.0, 4.0]);
    let s = interpolate(&a0, &a1, 0.5).unwrap();
    assert_eq!(s.at.data, vec![1.0, 2.0]);
    assert_eq!(s.target_velocity.data, vec![2.0, 4.0]);
    assert!(matches!(interpolate(&a0, &a1, 1.5), Err(Error::Contract(_))));
    assert!(matches!(interpolate(&a0, &a1, -0.1), Err(Error::Contract(_))));
    assert!(matches!(interpolate(&a0, &traj(2, 1, &[1.0, 1.0]), 0.3), Err(Error::Dimension(_))));
}

#[test]
fn forced_target_output_gives_zero_loss() {
    let (head, mut store) = small(0);
    force_output(&head, &mut store, 1.5);
    let a0 = ActionTrajectory::zeros(3, 2);
    let a1 = traj(3, 2, &[1.5; 6]);
    let samples = vec![interpolate(&a0, &a1, 0.2).unwrap(), interpolate(&a0, &a1, 0.9).unwrap()];
    let mut tape = Tape::new();
    let cond = tape.leaf(random_cond(1, 2, 6));
    let loss = head.fm_loss(&mut tape, &store, &samples, cond).unwrap();
    assert_eq!(tape.value(loss).item(), 0.0);
}

#[test]
fn zero_output_loss_is_mean_target_energy() {
    let (head, mut store) = small(1);
    force_output(&head, &mut store, 0.0);
    let a0 = traj(3, 2, &[0.5, -1.0, 0.0, 2.0, 1.0, -0.5]);
    let a1 = traj(3, 2, &[1.0, 1.0, -1.0, 0.0, 3.0, 0.5]);
    let s = interpolate(&a0, &a1, 0.37).unwrap();
    let energy: f64 = s.target_velocity.data.iter().map(|v| v * v).sum();
    let mut tape = Tape::new();
    let cond = tape.leaf(random_cond(2, 2, 6));
    let loss = head.fm_loss(&mut tape, &store, &[s], cond).unwrap();
    assert!((tape.value(loss).item() - energy / 6.0).abs() < 1e-12);
}

#[test]
fn condition_shape_is_checked() {
    let (head, store) = small(2);
    let mut tape = Tape::new();
    let cond = tape.leaf(random_cond(3, 3, 6));
    let s = draw_sample(&ActionTrajectory::zeros(3, 2), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(head.fm_loss(&mut tape, &store, &[s], cond), Err(Error::Dimension(_))));
}

fn fd_rel_err(head: &FlowHead, store: &ParamStore<f64>, samples: &[FlowSample], cond: &Tensor<f64>) -> f64 {
    let loss = |c: &Tensor<f64>| {
        let mut tape = Tape::new();
        let cv = tape.leaf(c.clone());
        let l = head.fm_loss(&mut tape, store, samples, cv).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let cv = tape.leaf(cond.clone());
    let l = head.fm_loss(&mut tape, store, samples, cv).unwrap();
    let g = tape.backward(l).unwrap().wrt(&tape, cv).unwrap();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for j in 0..cond.len() {
        let mut p = cond.clone();
        p.data_mut()[j] += eps;
        let mut m = cond.clone();
        m.data_mut()[j] -= eps;
        let num = (loss(&p) - loss(&m)) / (2.0 * eps);
        let ana = g.data()[j];
        worst = worst.max((ana - num).abs() / ana.abs().max(num.abs()).max(1e-5));
    }
    worst
}

#[test]
fn condition_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let (head, mut store) = small(seed);
        // Larger weights make the check meaningful; init-scale nets are nearly linear.
        for id in head.param_ids() {
            let t = store.get(id).map(|x| x * 20.0);
            *store.get_mut(id) = t;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let samples: Vec<FlowSample> = (0..2)
            .map(|_| draw_sample(&gaussian_trajectory(3, 2, &mut rng), &mut rng))
            .collect();
        let err = fd_rel_err(&head, &store, &samples, &random_cond(seed, 2, 6));
        assert!(err < 1e-4, "seed {seed}: rel err {err}");
    }
}

#[test]
fn head_parameters_get_gradients() {
    let (head, store) = small(3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = draw_sample(&gaussian_trajectory(3, 2, &mut rng), &mut rng);
    let mut tape = Tape::new();
    let cond = tape.constant(random_cond(4, 2, 6));
    let l = head.fm_loss(&mut tape, &store, &[s], cond).unwrap();
    let g = tape.backward(l).unwrap().param_map(&tape, &store);
    assert!(!g.is_zero(head.output_params().0));
    assert!(!g.is_zero(head.output_params().1));
}

#[test]
fn constant_field_moves_noise_by_the_constant() {
    let (head, mut store) = small(4);
    force_output(&head, &mut store, 0.75);
    let cond = random_cond(5, 2, 6);
    for steps in [1, 3, 10] {
        let out = head.sample_actions(&store, &cond, steps, 42).unwrap();
        let a0 = gaussian_trajectory(3, 2, &mut ChaCha8Rng::seed_from_u64(42));
        for (x, y) in out.data.iter().zip(&a0.data) {
            assert!((x - (y + 0.75)).abs() < 1e-12);
        }
    }
}

#[test]
fn euler_error_shrinks_on_an_analytic_field() {
    // dx/dt = 2t has exact flow x(1) = x(0) + 1; Euler with n steps lands at x(0) + (n−1)/n.
    let a0 = traj(1, 1, &[0.3]);
    let mut last = f64::INFINITY;
    for n in [1, 2, 10, 100] {
        let x = euler_integrate(&a0, n, |_, t| Ok(vec![2.0 * t])).unwrap();
        let err = (x.data[0] - 1.3).abs();
        assert!((err - 1.0 / n as f64).abs() < 1e-12);
        assert!(err < last);
        last = err;
    }
}

#[test]
fn sampler_is_seeded() {
    let (head, store) = small(5);
    let cond = random_cond(6, 2, 6);
    let a = head.sample_actions(&store, &cond, 10, 7).unwrap();
    assert!(a.bit_eq(&head.sample_actions(&store, &cond, 10, 7).unwrap()));
    assert!(!a.bit_eq(&head.sample_actions(&store, &cond, 10, 8).unwrap()));
    assert!(matches!(head.sample_actions(&store, &cond, 0, 7), Err(Error::Contract(_))));
}

#[test]
fn f32_head_runs() {
    let mut store = ParamStore::<f32>::new();
    let head = FlowHead::new(FlowConfig { d_model: 8, cond_dim: 8, ..FlowConfig::default() }, &mut store, "").unwrap();
    let cond = Tensor::<f32>::full(&[8, 8], 0.1);
    let a = head.sample_actions(&store, &cond, 4, 1).unwrap();
    assert_eq!(a.data.len(), 32);
    assert!(a.data.iter().all(|x| x.is_finite()));
}

/// Sampler error against a deterministic conditional target, averaged over noise seeds.
fn sampler_mse(head: &FlowHead, store: &ParamStore<f64>, data: &[(Tensor<f64>, ActionTrajectory)]) -> f64 {
    let mut total = 0.0;
    for (c, a1) in data {
        for s in 0..4 {
            total += head.sample_actions(store, c, 10, 1000 + s).unwrap().mse(a1);
        }
    }
    total / (4 * data.len()) as f64
}

#[test]
fn training_pulls_samples_toward_the_conditional_target() {
    for seed in 0..3 {
        let cfg = FlowConfig {
            horizon: 2,
            action_dim: 1,
            d_model: 16,
            n_heads: 2,
            n_blocks: 2,
            cond_rows: 1,
            cond_dim: 2,
            time_features: 4,
            sample_steps: 10,
            seed,
        };
        let mut store = ParamStore::new();
        let head = FlowHead::new(cfg, &mut store, "").unwrap();
        let data = vec![
            (Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), traj(2, 1, &[1.0, -1.0])),
            (Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(), traj(2, 1, &[-1.0, 0.5])),
        ];
        let mut opt = OptimizerState::new(AdamWConfig {
                lr: 3e-3,
                schedule: Schedule::Cosine { total_steps: 600 },
                ..AdamWConfig::default()
            }, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut history = vec![sampler_mse(&head, &store, &data)];
        for step in 1..=600 {
            let mut tape = Tape::new();
            let mut losses = Vec::new();
            for (c, a1) in &data {
                let cv = tape.constant(c.clone());
                let samples: Vec<FlowSample> = (0..4).map(|_| draw_sample(a1, &mut rng)).collect();
                losses.push((0.5, head.fm_loss(&mut tape, &store, &samples, cv).unwrap()));
            }
            let loss = tape.weighted_sum(&losses).unwrap();
            let g = tape.backward(loss).unwrap().param_map(&tape, &store);
            opt.apply(&mut store, &g).unwrap();
            if [50, 200, 600].contains(&step) {
                history.push(sampler_mse(&head, &store, &data));
            }
        }
        assert!(history.windows(2).all(|w| w[1] < w[0]), "seed {seed}: {history:?}");
        assert!(*history.last().unwrap() < 0.1 * history[0], "seed {seed}: {history:?}");
    }
}

proptest! {
    #[test]
    fn interpolation_invariants(
        a0 in prop::collection::vec(-5.0f64..5.0, 6),
        a1 in prop::collection::vec(-5.0f64..5.0, 6),
        t in 0.0f64..=1.0,
    ) {
        let (x0, x1) = (traj(3, 2, &a0), traj(3, 2, &a1));
        let s = interpolate(&x0, &x1, t).unwrap();
        for i in 0..6 {
            prop_assert_eq!(s.at.data[i].to_bits(), ((1.0 - t) * a0[i] + t * a1[i]).to_bits());
            prop_assert_eq!(s.target_velocity.data[i].to_bits(), (a1[i] - a0[i]).to_bits());
        }
        prop_assert!(interpolate(&x0, &x1, 0.0).unwrap().at.bit_eq(&x0));
        prop_assert!(interpolate(&x0, &x1, 1.0).unwrap().at.bit_eq(&x1));
    }
}
