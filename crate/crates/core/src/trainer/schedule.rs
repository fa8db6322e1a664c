use serde::{Deserialize, Serialize};

/// Divide-by-ten on validation plateau.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub min_delta: f64,
    pub floor: f64,
    pub best: Option<f64>,
    /// Consecutive evaluations without sufficient improvement.
    pub stale: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, min_delta: f64, floor: f64) -> Self {
        PlateauSchedule {
            patience,
            min_delta,
            floor,
            best: None,
            stale: 0,
        }
    }

    /// Records one validation mAP and returns the learning rate to use next.
    pub fn observe(&mut self, map: f64, lr: f64) -> f64 {
        match self.best {
            Some(b) if map < b + self.min_delta => self.stale += 1,
            _ => {
                self.best = Some(map);
                self.stale = 0;
            }
        }
        if self.patience > 0 && self.stale >= self.patience {
            self.stale = 0;
            return (lr / 10.0).max(self.floor);
        }
        lr
    }
}

/// Learning rate after feeding a whole validation history to a fresh schedule.
pub fn lr_schedule(history: &[f64], lr: f64, patience: usize, min_delta: f64, floor: f64) -> f64 {
    let mut s = PlateauSchedule::new(patience, min_delta, floor);
    history.iter().fold(lr, |lr, &m| s.observe(m, lr))
}
