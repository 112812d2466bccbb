//! Learning-rate halving and early stopping driven by a monitored value.

/// Smallest drop below the best value that counts as an improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScheduleStep {
    pub improved: bool,
    pub halve: bool,
    pub stop: bool,
}

/// After every epoch, feed the monitored value to [`PlateauSchedule::observe`].
/// A value at least [`IMPROVEMENT_EPS`] below the best so far resets the
/// counter of epochs without improvement. When that counter reaches
/// `stop_patience` training stops; otherwise every `halve_patience`
/// non-improving epochs the learning rate is halved.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    halve_patience: usize,
    stop_patience: usize,
    best: f64,
    since_improve: usize,
    epochs: usize,
}

impl PlateauSchedule {
    pub fn new(halve_patience: usize, stop_patience: usize) -> Self {
        PlateauSchedule {
            halve_patience: halve_patience.max(1),
            stop_patience,
            best: f64::INFINITY,
            since_improve: 0,
            epochs: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs_seen(&self) -> usize {
        self.epochs
    }

    pub fn observe(&mut self, value: f64) -> ScheduleStep {
        self.epochs += 1;
        let improved =
            value < self.best - IMPROVEMENT_EPS || (self.best.is_infinite() && value.is_finite());
        if improved {
            self.best = value;
            self.since_improve = 0;
        } else {
            self.since_improve += 1;
        }
        let stop = self.since_improve >= self.stop_patience;
        let halve =
            !stop && self.since_improve > 0 && self.since_improve.is_multiple_of(self.halve_patience);
        ScheduleStep {
            improved,
            halve,
            stop,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Returns (epoch of stop, epochs at which lr was halved) for `curve`,
    /// truncated at `max_epochs`.
    fn trace(curve: &[f64], max_epochs: usize) -> (usize, Vec<usize>) {
        let mut s = PlateauSchedule::new(5, 10);
        let mut halvings = Vec::new();
        for (i, v) in curve.iter().take(max_epochs).enumerate() {
            let step = s.observe(*v);
            if step.halve {
                halvings.push(i + 1);
            }
            if step.stop {
                return (i + 1, halvings);
            }
        }
        (curve.len().min(max_epochs), halvings)
    }

    #[test]
    fn strictly_improving_runs_to_the_end() {
        let curve: Vec<f64> = (0..100).map(|i| 10.0 - i as f64 * 0.01).collect();
        assert_eq!(trace(&curve, 100), (100, vec![]));
    }

    #[test]
    fn frozen_curve_halves_at_six_and_stops_at_eleven() {
        assert_eq!(trace(&[1.0; 100], 100), (11, vec![6]));
    }

    #[test]
    fn sub_epsilon_drops_are_not_improvements() {
        let curve: Vec<f64> = (0..100).map(|i| 1.0 - i as f64 * 1e-8).collect();
        assert_eq!(trace(&curve, 100), (11, vec![6]));
    }

    #[test]
    fn nan_never_improves() {
        let mut s = PlateauSchedule::new(5, 10);
        assert!(s.observe(2.0).improved);
        assert!(!s.observe(f64::NAN).improved);
    }

    proptest! {
        #[test]
        fn halving_only_between_improvements(curve in proptest::collection::vec(0.0f64..1.0, 1..100)) {
            let mut s = PlateauSchedule::new(5, 10);
            let mut since = 0usize;
            for v in curve {
                let step = s.observe(v);
                since = if step.improved { 0 } else { since + 1 };
                prop_assert_eq!(step.halve, since > 0 && since < 10 && since.is_multiple_of(5));
                prop_assert_eq!(step.stop, since >= 10);
                if step.stop {
                    break;
                }
            }
        }
    }
}
