mod common;

use nalgebra::DMatrix;
use tsdlab::adapters::{
    enter_dash_phase_with, lora_random_init, tsd_init_split, AdapterState, DashTerm, Method, Phase,
};
use tsdlab::harness::train_method;
use tsdlab::metrics::{ground_truth_tsd, mean, pr_score};
use tsdlab::models::{
    forward, gen_task, loss_mse, train, train_full, Planting, Task, TaskSpec, TrainConfig,
};
use tsdlab::spectral::{svd, Matrix, DEFAULT_EPSILON};

fn planted(seed: u64, noise: f64) -> Task {
    gen_task(&TaskSpec {
        n: 16,
        m: 32,
        planting: Planting::Random {
            count: 4,
            lowest: 0,
            rate_min: 1.0,
            rate_max: 4.0,
        },
        noise_std: noise,
        seed,
        ..TaskSpec::default()
    })
    .unwrap()
}

fn short() -> TrainConfig {
    TrainConfig {
        steps: 60,
        t_prelaunch: 20,
        s_dash: 4,
        record_every: 20,
        ..TrainConfig::default()
    }
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

#[test]
fn defaults_follow_the_reference_setup() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.t_prelaunch, 100);
    assert_eq!(cfg.s_dash, 8);
    assert_eq!(cfg.epsilon, 1e-6);
    assert_eq!(DEFAULT_EPSILON, 1e-6);
    assert_eq!(cfg.batch, 16);
    assert_eq!(cfg.alpha(), cfg.rank as f64);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let task = planted(3, 0.01);
    let cfg = TrainConfig { lr: 0.0, ..short() };
    for method in [Method::Lora, Method::Dash] {
        let trace = train_method(&task, &cfg, method, "tsd").unwrap();
        assert_eq!(bits(&trace.final_state.merged_weight()), bits(&task.base_w));
        let first = trace.val_losses[0].1;
        assert!(trace.val_losses.iter().all(|&(_, v)| v == first));
    }
}

#[test]
fn dash_that_never_launches_is_plain_lora() {
    let task = planted(4, 0.01);
    let cfg = TrainConfig {
        t_prelaunch: 60,
        ..short()
    };
    let lora = train_method(&task, &cfg, Method::Lora, "tsd").unwrap();
    let dash = train_method(&task, &cfg, Method::Dash, "tsd").unwrap();
    assert!(dash.launch_rates.is_none());
    assert_eq!(lora.losses, dash.losses);
    assert_eq!(lora.val_losses, dash.val_losses);
    assert_eq!(
        bits(&lora.final_state.merged_weight()),
        bits(&dash.final_state.merged_weight())
    );
}

#[test]
fn frozen_parameters_stay_bit_identical() {
    let task = planted(5, 0.01);
    let cfg = short();
    for method in [Method::Lora, Method::Dash, Method::Init, Method::Tsd] {
        let fin = train_method(&task, &cfg, method, "tsd")
            .unwrap()
            .final_state;
        if method.uses_split() {
            let split = tsd_init_split(&task.base_w, &task.factors, &fin.split_indices).unwrap();
            assert_eq!(bits(&fin.base), bits(&split.w_res), "{method:?}");
        } else {
            assert_eq!(bits(&fin.base), bits(&task.base_w), "{method:?}");
        }
        if let Some(d) = &fin.dash {
            let fresh = DashTerm::new(&task.factors, &d.indices).unwrap();
            assert_eq!(bits(&d.u_bar), bits(&fresh.u_bar));
            assert_eq!(bits(&d.v_bar), bits(&fresh.v_bar));
            assert!(d.dsigma.iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn dash_loss_is_continuous_across_the_switch() {
    // A run that launches after 20 steps and one that never does see the
    // same batch at step 21 with the same merged weight.
    let task = planted(6, 0.01);
    let launched = train_method(&task, &short(), Method::Dash, "tsd").unwrap();
    let cfg = TrainConfig {
        steps: 21,
        t_prelaunch: 21,
        record_every: 21,
        ..short()
    };
    let plain = train_method(&task, &cfg, Method::Dash, "tsd").unwrap();
    assert_eq!(launched.losses[20], plain.losses[20]);
    assert_eq!(launched.losses[..21], plain.losses[..]);

    for seed in 0..10 {
        let st = common::random_state(Method::Dash, Phase::Prelaunch, 6, 8, seed);
        let f = svd(&st.base).unwrap();
        let next = enter_dash_phase_with(&st, &f, &[0, 2], &[]).unwrap();
        let batch = common::random_batch(6, 8, 9, seed);
        let before = loss_mse(&forward(&st, &batch.x).unwrap(), &batch.y).unwrap();
        let after = loss_mse(&forward(&next, &batch.x).unwrap(), &batch.y).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn training_is_deterministic() {
    let task = planted(7, 0.01);
    for method in [Method::Lora, Method::Dash, Method::Init, Method::Tsd] {
        let a = train_method(&task, &short(), method, "tsd").unwrap();
        let b = train_method(&task, &short(), method, "tsd").unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.ltsd_snapshots, b.ltsd_snapshots);
        assert_eq!(
            bits(&a.final_state.merged_weight()),
            bits(&b.final_state.merged_weight())
        );
    }
}

#[test]
fn snapshots_land_on_the_recording_grid() {
    let task = planted(8, 0.01);
    let cfg = TrainConfig {
        steps: 50,
        record_every: 7,
        t_prelaunch: 10,
        ..short()
    };
    let trace = train_method(&task, &cfg, Method::Tsd, "tsd").unwrap();
    let steps: Vec<usize> = trace.ltsd_snapshots.iter().map(|s| s.0).collect();
    assert_eq!(steps, vec![7, 14, 21, 28, 35, 42, 49]);
    assert_eq!(trace.losses.len(), 50);
    for (_, idx) in &trace.ltsd_snapshots {
        assert_eq!(idx.len(), 8);
        assert!(idx.iter().all(|&i| i < 16));
    }
}

#[test]
fn full_fine_tuning_recovers_the_noiseless_target() {
    for seed in 0..3 {
        let task = planted(seed, 0.0);
        let cfg = TrainConfig {
            lr: 0.5,
            steps: 400,
            ..TrainConfig::default()
        };
        let w_ft = train_full(&task.base_w, &task, &cfg).unwrap();
        let rel = w_ft.sub(&task.w_star).frob_norm() / task.w_star.frob_norm();
        assert!(rel <= 1e-2, "seed {seed}: {rel:e}");
    }
}

#[test]
fn fine_tuned_ground_truth_matches_the_plants() {
    let mut hits = 0;
    for seed in 0..10 {
        let task = planted(seed, 0.01);
        let cfg = TrainConfig {
            steps: 400,
            ..TrainConfig::default()
        };
        let w_ft = train_full(&task.base_w, &task, &cfg).unwrap();
        let truth = ground_truth_tsd(&task.base_w, &w_ft, DEFAULT_EPSILON).unwrap();
        let mut got = truth.top4.clone();
        got.sort_unstable();
        hits += usize::from(got == task.planted_indices);
    }
    assert!(hits >= 9, "{hits}/10");
}

#[test]
fn generated_data_solves_back_to_the_target() {
    // Least squares on noiseless samples must return W* itself.
    for seed in 0..5 {
        let task = planted(seed, 0.0);
        assert!(task.train.len() >= 4 * task.spec.m);
        let x = to_na(&task.train.x);
        let y = to_na(&task.train.y);
        let sol = x.svd(true, true).solve(&y, 1e-12).unwrap().transpose();
        let want = to_na(&task.w_star);
        assert!((sol - &want).amax() <= 1e-6);
    }
}

#[test]
fn planted_spectrum_spikes_only_at_plants() {
    let task = planted(9, 0.0);
    let rates = ground_truth_tsd(&task.base_w, &task.w_star, DEFAULT_EPSILON)
        .unwrap()
        .rates;
    for (i, d) in rates.delta.iter().enumerate() {
        if task.planted_indices.contains(&i) {
            assert!(*d >= 0.9, "index {i}: {d}");
        } else {
            assert!(*d <= 1e-12, "index {i}: {d}");
        }
    }
}

#[test]
fn lora_recovers_most_of_the_top_directions() {
    let mut recalls = Vec::new();
    for seed in 0..10 {
        let task = planted(seed, 0.01);
        let truth = ground_truth_tsd(&task.base_w, &task.w_star, DEFAULT_EPSILON).unwrap();
        let cfg = TrainConfig {
            steps: 100,
            ..TrainConfig::default()
        };
        let core = lora_random_init(16, 32, 4, 4.0, seed).unwrap();
        let st = AdapterState::new(Method::Lora, task.base_w.clone(), core).unwrap();
        let trace = train(st, &task, &cfg).unwrap();
        let ltsd = &trace.ltsd_snapshots.last().unwrap().1;
        recalls.push(pr_score(ltsd, &truth, 16, 4).unwrap().recall);
    }
    let r = mean(&recalls).unwrap();
    assert!(r >= 0.70, "{r}");
}

#[test]
fn prelaunch_longer_than_training_is_rejected() {
    let task = planted(1, 0.0);
    let cfg = TrainConfig {
        t_prelaunch: 61,
        ..short()
    };
    assert!(train_method(&task, &cfg, Method::Dash, "tsd").is_err());
}
