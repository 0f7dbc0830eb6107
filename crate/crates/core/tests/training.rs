mod common;

use driftfollow::clreg::{ImportanceKind, ImportanceVector};
use driftfollow::eval::{self, StageMatrix};
use driftfollow::nn::{self, ParamVector};
use driftfollow::sim::{self, ReplayController, ZeroController};
use driftfollow::train::{self, AdamState, Checkpoint, Consolidation, Method, Normalizer, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn replay_controller_has_no_loss() {
    let cfg = TrainConfig::default();
    for e in common::events(5, 8) {
        let loss = train::controller_loss(&ReplayController::new(&e), &e, &cfg).unwrap();
        assert!(loss.mse < 1e-12, "{} mse {}", e.event_id, loss.mse);
        assert!(!loss.collided && !loss.clamped);
        assert_eq!(loss.value, loss.mse);
    }
}

#[test]
fn zero_controller_collision_is_penalized() {
    let event = common::closing_event(0.0, 10.0, 5.0, 10, 20);
    let cfg = TrainConfig::default();
    let loss = train::controller_loss(&ZeroController, &event, &cfg).unwrap();
    assert!(loss.collided);
    assert!(loss.value >= 1000.0);

    // an all-zero LSTM commands zero acceleration too
    let zero = ParamVector::zeros(cfg.hidden_size).unwrap();
    let lstm = train::event_loss(&zero, &Normalizer::identity(), &event, &cfg).unwrap();
    assert!(lstm.collided && lstm.value >= 1000.0);
}

#[test]
fn adam_matches_scripted_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 7;
    let lr = 0.01;
    let mut params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut reference = params.clone();
    let mut state = AdamState::new(n);
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    for t in 1..=100 {
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        train::adam_step(&mut params, &g, &mut state, lr).unwrap();
        for i in 0..n {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let m_hat = m[i] / (1.0 - 0.9f64.powi(t));
            let v_hat = v[i] / (1.0 - 0.999f64.powi(t));
            reference[i] -= lr * m_hat / (v_hat.sqrt() + 1e-8);
        }
    }
    for (a, b) in params.iter().zip(&reference) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn training_loss_decreases_on_small_task() {
    let events = common::events(7, 42);
    let train_set = &events[..20];
    let norm = Normalizer::fit(train_set).unwrap();
    let mut cfg = TrainConfig::for_method(Method::Baseline);
    cfg.batch_size = 4;
    let init = nn::init_params(cfg.hidden_size, cfg.seed).unwrap();
    let (_, history) = train::train_task(&init, &norm, 1, train_set, &events[20..], &cfg, None).unwrap();
    assert_eq!(history.len(), 5);
    assert!(
        history[4].train_loss < history[0].train_loss,
        "{} -> {}",
        history[0].train_loss,
        history[4].train_loss
    );
}

#[test]
fn huge_lambda_pins_parameters_to_anchor() {
    let events = common::events(4, 5);
    let norm = Normalizer::fit(&events).unwrap();
    let mut cfg = common::small_config(Method::Ewc);
    cfg.reg.lambda = 1e9;
    let anchor = nn::init_params(cfg.hidden_size, 3).unwrap();
    let imp = train::estimate_importance(ImportanceKind::Fisher, &anchor, &norm, &events, &cfg, 1).unwrap();
    let consolidation = Consolidation {
        importance: &imp,
        reg: &cfg.reg,
    };
    let (trained, _) = train::train_task(&anchor, &norm, 2, &events, &[], &cfg, Some(consolidation)).unwrap();
    let drift = trained
        .values()
        .iter()
        .zip(anchor.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift <= 1e-3, "max drift {drift}");
}

#[test]
fn importance_is_nonnegative_and_anchored() {
    let events = common::events(3, 6);
    let norm = Normalizer::fit(&events).unwrap();
    let cfg = common::small_config(Method::Mas);
    let p = nn::init_params(cfg.hidden_size, 1).unwrap();
    for kind in [ImportanceKind::Fisher, ImportanceKind::Mas] {
        let imp: ImportanceVector = train::estimate_importance(kind, &p, &norm, &events, &cfg, 1).unwrap();
        assert_eq!(imp.kind(), kind);
        assert!(imp.weights().iter().all(|w| *w >= 0.0 && w.is_finite()));
        assert!(imp.weights().iter().any(|w| *w > 0.0));
        assert_eq!(imp.anchor(), p.values());
    }
}

fn curriculum(method: Method, tasks: &[driftfollow::data::TaskSet; 3]) -> Vec<Checkpoint> {
    train::run_curriculum(tasks, &common::small_config(method)).unwrap().checkpoints
}

#[test]
fn curricula_and_stage_matrix() {
    let tasks = common::tasks(6, 12);
    let baseline = curriculum(Method::Baseline, &tasks);
    let ewc = curriculum(Method::Ewc, &tasks);
    let joint = curriculum(Method::Joint, &tasks);
    assert_eq!(baseline.len(), 3);
    assert_eq!(ewc.len(), 3);
    assert_eq!(joint.len(), 1);
    assert_eq!(joint[0].stage, 3);
    assert_eq!(ewc[2].importance.as_ref().unwrap().tasks_seen(), 3);
    assert!(baseline.iter().all(|c| c.importance.is_none()));

    // normalization is frozen from task 1's training split
    let norm = Normalizer::fit(&tasks[0].train).unwrap();
    assert!(baseline.iter().chain(&joint).all(|c| c.normalizer == norm));

    let m = eval::build_stage_matrix(&baseline, &tasks, 0.1).unwrap();
    assert_eq!(m.len(), 6);
    let m = eval::build_stage_matrix(&joint, &tasks, 0.1).unwrap();
    assert_eq!(m.len(), 3);

    let all: Vec<Checkpoint> = baseline.iter().chain(&ewc).cloned().collect();
    let m = eval::build_stage_matrix(&all, &tasks, 0.1).unwrap();
    let direct = eval::taskset_metrics(&ewc[0], &tasks[0], 0.1).unwrap();
    assert_eq!(m.get(Method::Ewc, 1, 1), Some(&direct));

    // a missing stage is an error, not a silent gap
    assert!(eval::build_stage_matrix(&baseline[..2], &tasks, 0.1).is_err());

    let text = m.to_csv();
    assert_eq!(StageMatrix::from_csv(&text).unwrap(), m);
}

#[test]
fn training_is_deterministic() {
    let tasks = common::tasks(5, 21);
    let a = curriculum(Method::Mas, &tasks);
    let b = curriculum(Method::Mas, &tasks);
    assert_eq!(a, b);
}

#[test]
fn metrics_recomputed_from_trajectory_csv() {
    let tasks = common::tasks(8, 30);
    let ck = &curriculum(Method::Baseline, &tasks)[2];
    let event = tasks.iter().flat_map(|t| &t.test).next().expect("a test event");
    let cfg = sim::RolloutConfig {
        horizon: ck.horizon,
        dt: 0.1,
        stop_on_collision: false,
    };
    let traj = sim::rollout(&ck.controller(), event, &cfg).unwrap();
    let mut buf = Vec::new();
    sim::write_trajectory_csv(&mut buf, event, &traj, None, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (fv, sv, sp_rec, sp_sim) = (
        col("fv_speed_recorded"),
        col("sv_speed_sim"),
        col("spacing_recorded"),
        col("spacing_sim"),
    );
    let (mut se_sp, mut se_sv, mut n, mut collided) = (0.0, 0.0, 0usize, false);
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        se_sp += (f[sp_sim] - f[sp_rec]).powi(2);
        se_sv += (f[sv] - f[fv]).powi(2);
        collided |= f[sp_sim] <= 0.0;
        n += 1;
    }
    let m = eval::event_metrics(&ck.controller(), event, &cfg).unwrap();
    assert_eq!(m.n_steps, n);
    assert_eq!(m.se_spacing, se_sp);
    assert_eq!(m.se_speed, se_sv);
    assert_eq!(m.collided, collided);
}
