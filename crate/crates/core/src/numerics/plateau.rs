use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.5,
            patience: 3,
            threshold: 1e-4,
            min_lr: 1e-6,
        }
    }
}

/// Reduce-on-plateau learning-rate controller; lower metric is better.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauState {
    pub config: PlateauConfig,
    pub best: f64,
    pub since_improvement: usize,
    pub lr: f64,
}

impl PlateauState {
    pub fn new(lr: f64, config: PlateauConfig) -> Self {
        PlateauState {
            config,
            best: f64::INFINITY,
            since_improvement: 0,
            lr: lr.max(config.min_lr),
        }
    }

    pub fn at_floor(&self) -> bool {
        self.lr <= self.config.min_lr
    }
}

pub fn plateau_step(state: &PlateauState, metric: f64) -> PlateauState {
    let mut next = *state;
    if metric < state.best - state.config.threshold {
        next.best = metric;
        next.since_improvement = 0;
    } else {
        next.since_improvement += 1;
    }
    if next.since_improvement > next.config.patience {
        next.lr = (next.lr * next.config.factor).max(next.config.min_lr);
        next.since_improvement = 0;
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halves_after_patience_exhausted() {
        let cfg = PlateauConfig {
            patience: 2,
            factor: 0.5,
            ..PlateauConfig::default()
        };
        let mut s = PlateauState::new(1e-4, cfg);
        let mut trace = Vec::new();
        for _ in 0..4 {
            s = plateau_step(&s, 1.0);
            trace.push(s.lr);
        }
        assert_eq!(trace, vec![1e-4, 1e-4, 1e-4, 5e-5]);
    }

    #[test]
    fn improving_never_reduces() {
        let mut s = PlateauState::new(1e-3, PlateauConfig::default());
        for i in 0..50 {
            s = plateau_step(&s, 10.0 - i as f64 * 0.1);
            assert_eq!(s.lr, 1e-3);
        }
    }

    #[test]
    fn floor_is_respected() {
        let cfg = PlateauConfig {
            patience: 0,
            min_lr: 1e-6,
            ..PlateauConfig::default()
        };
        let mut s = PlateauState::new(1e-6, cfg);
        for _ in 0..5 {
            s = plateau_step(&s, 1.0);
            assert_eq!(s.lr, 1e-6);
        }
    }

    #[test]
    fn lr_is_non_increasing() {
        let mut s = PlateauState::new(1e-2, PlateauConfig::default());
        let mut prev = s.lr;
        for i in 0..200 {
            s = plateau_step(&s, ((i * 37) % 11) as f64);
            assert!(s.lr <= prev && s.lr >= s.config.min_lr);
            prev = s.lr;
        }
    }
}
