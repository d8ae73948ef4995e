use serde::{Deserialize, Serialize};

/// Accuracy gain that counts as an improvement.
pub const IMPROVEMENT_TOL: f64 = 1e-4;

/// Reduce-on-plateau bookkeeping over evaluation accuracies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    /// Evaluations since the last improvement or the last trigger.
    pub stale: usize,
}

impl Plateau {
    /// Records one accuracy; `true` when `patience` evaluations in a row
    /// failed to improve on the best. The counter restarts after a trigger.
    pub fn observe(&mut self, acc: f64, patience: usize) -> bool {
        match self.best {
            Some(b) if acc <= b + IMPROVEMENT_TOL => {
                self.stale += 1;
                if self.stale >= patience {
                    self.stale = 0;
                    return true;
                }
                false
            }
            _ => {
                self.best = Some(acc);
                self.stale = 0;
                false
            }
        }
    }
}

/// Learning rate to use after the last entry of `history`.
pub fn lr_schedule_step(history: &[f64], lr: f64, patience: usize, factor: f64, min_lr: f64) -> f64 {
    let mut p = Plateau::default();
    let mut fired = false;
    for &acc in history {
        fired = p.observe(acc, patience.max(1));
    }
    if fired {
        (lr * factor).max(min_lr)
    } else {
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn improving_history_keeps_lr() {
        let h = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(lr_schedule_step(&h, 0.002, 3, 0.1, 1e-5), 0.002);
    }

    #[test]
    fn flat_tail_decays() {
        let lr = lr_schedule_step(&[0.5, 0.7, 0.7, 0.7, 0.7], 0.002, 3, 0.1, 1e-5);
        assert!((lr - 0.0002).abs() < 1e-15);
        // gains below the tolerance do not count
        let lr = lr_schedule_step(&[0.7, 0.70005, 0.7, 0.70009], 0.002, 3, 0.1, 1e-5);
        assert!((lr - 0.0002).abs() < 1e-15);
        // two flat evals are not enough
        assert_eq!(lr_schedule_step(&[0.5, 0.7, 0.7, 0.7], 0.002, 3, 0.1, 1e-5), 0.002);
    }

    #[test]
    fn floor_is_respected() {
        let h = [0.5, 0.5, 0.5, 0.5];
        assert_eq!(lr_schedule_step(&h, 1e-5, 3, 0.1, 1e-5), 1e-5);
        assert_eq!(lr_schedule_step(&h, 5e-5, 3, 0.1, 1e-5), 1e-5);
    }

    #[test]
    fn counter_restarts_after_trigger() {
        let mut p = Plateau::default();
        let fired: Vec<bool> = [0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5].iter().map(|&a| p.observe(a, 3)).collect();
        assert_eq!(fired, [false, false, false, true, false, false, true]);
    }

    proptest! {
        #[test]
        fn lr_sequence_non_increasing(h in prop::collection::vec(0.0..1.0f64, 1..40), patience in 1usize..5) {
            let min_lr = 1e-5;
            let mut lr = 0.002;
            for t in 1..=h.len() {
                let next = lr_schedule_step(&h[..t], lr, patience, 0.1, min_lr);
                prop_assert!(next <= lr && next >= min_lr);
                lr = next;
            }
        }
    }
}
