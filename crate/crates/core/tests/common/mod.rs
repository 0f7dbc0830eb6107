#![allow(dead_code)]

use driftfollow::data::{self, Event, Regime, TaskSet};
use driftfollow::train::{Method, TrainConfig};

/// `per_regime` synthetic events from each regime.
pub fn events(per_regime: usize, seed: u64) -> Vec<Event> {
    Regime::ALL
        .iter()
        .flat_map(|&r| data::generate_events(r, per_regime, 0.1, seed).unwrap())
        .collect()
}

pub fn tasks(per_regime: usize, seed: u64) -> [TaskSet; 3] {
    data::split_tasks(&events(per_regime, seed), seed).unwrap().0
}

/// Small, fast configuration for pipeline tests.
pub fn small_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::for_method(method);
    cfg.hidden_size = 6;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.importance_cap = 500;
    cfg
}

/// Event with constant speeds whose spacing equals `spacing_at_start` at
/// the last warm-up index `h - 1`.
pub fn closing_event(lv: f64, fv: f64, spacing_at_start: f64, h: usize, tail: usize) -> Event {
    let n = h + tail;
    let spacing = (0..n)
        .map(|k| {
            if k < h {
                spacing_at_start + (h - 1 - k) as f64 * (fv - lv) * 0.1
            } else {
                spacing_at_start
            }
        })
        .collect();
    Event {
        event_id: "closing".into(),
        dt: 0.1,
        lv_speed: vec![lv; n],
        fv_speed: vec![fv; n],
        spacing,
    }
}
