//! Learning-rate schedules.
//!
//! Positions are fractional epochs: iteration `i` of `n` in epoch `e` sits
//! at `e + i/n`. Every schedule is a pure function of the position and, for
//! plateau phases, of the validation-accuracy history.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        lr: f64,
    },
    /// Triangle wave starting at `min_lr` and rising for `half_cycle` epochs.
    Cyclical {
        min_lr: f64,
        max_lr: f64,
        half_cycle: f64,
    },
    /// `(first epoch, lr)` pairs; valid until `end`.
    Step {
        table: Vec<(usize, f64)>,
        end: usize,
    },
    /// Multiplies the rate by `factor` after `patience` epochs without a
    /// new best validation accuracy.
    Plateau {
        initial_lr: f64,
        patience: usize,
        factor: f64,
    },
    /// Exponential sweep over iterations (epoch position is ignored).
    RangeTest {
        lr_start: f64,
        lr_end: f64,
        total_iters: usize,
    },
    Piecewise {
        phases: Vec<Phase>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    /// First epoch of the phase.
    pub start: usize,
    /// One past the last epoch.
    pub end: usize,
    pub schedule: ScheduleSpec,
    /// Reload the best checkpoint before the phase begins.
    #[serde(default)]
    pub reload_best: bool,
}

/// Where in training a rate is requested.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub epoch: usize,
    pub iter: usize,
    pub iters_per_epoch: usize,
}

impl Position {
    pub fn epoch_start(epoch: usize) -> Self {
        Position {
            epoch,
            iter: 0,
            iters_per_epoch: 1,
        }
    }

    fn fractional(&self) -> f64 {
        self.epoch as f64 + self.iter as f64 / self.iters_per_epoch.max(1) as f64
    }
}

/// Rate after replaying `history` (validation accuracy per epoch) through
/// the plateau rule.
pub fn plateau_update(initial_lr: f64, patience: usize, factor: f64, history: &[f64]) -> f64 {
    let mut lr = initial_lr;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0;
    for &acc in history {
        if acc > best {
            best = acc;
            stale = 0;
        } else {
            stale += 1;
            if stale >= patience {
                lr *= factor;
                stale = 0;
            }
        }
    }
    lr
}

fn positive(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("learning rate {lr} must be positive")))
    }
}

impl ScheduleSpec {
    /// Stateless plan: two cyclical phases, a constant phase, then plateau
    /// halving from 2e-4 after reloading the best weights.
    pub fn reference_stateless() -> Self {
        let cyc = |min_lr, max_lr| ScheduleSpec::Cyclical {
            min_lr,
            max_lr,
            half_cycle: 3.0,
        };
        ScheduleSpec::Piecewise {
            phases: vec![
                Phase {
                    start: 0,
                    end: 21,
                    schedule: cyc(8e-5, 9.8e-4),
                    reload_best: false,
                },
                Phase {
                    start: 21,
                    end: 44,
                    schedule: cyc(1e-5, 1e-4),
                    reload_best: false,
                },
                Phase {
                    start: 44,
                    end: 48,
                    schedule: ScheduleSpec::Constant { lr: 1e-5 },
                    reload_best: false,
                },
                Phase {
                    start: 48,
                    end: 75,
                    schedule: ScheduleSpec::Plateau {
                        initial_lr: 2e-4,
                        patience: 4,
                        factor: 0.5,
                    },
                    reload_best: true,
                },
            ],
        }
    }

    /// Stateful step table, halving every 4 epochs after epoch 15.
    pub fn reference_stateful() -> Self {
        ScheduleSpec::Step {
            table: vec![(0, 9e-5), (4, 3e-5), (8, 8e-6), (15, 4e-6), (19, 2e-6), (23, 1e-6)],
            end: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleSpec::Constant { lr } => positive(*lr),
            ScheduleSpec::Cyclical {
                min_lr,
                max_lr,
                half_cycle,
            } => {
                positive(*min_lr)?;
                positive(*max_lr)?;
                if min_lr > max_lr || *half_cycle <= 0.0 {
                    return Err(Error::invalid(
                        "cyclical schedule needs min_lr <= max_lr and half_cycle > 0",
                    ));
                }
                Ok(())
            }
            ScheduleSpec::Step { table, end } => {
                if table.is_empty() || table[0].0 != 0 {
                    return Err(Error::invalid("step table must start at epoch 0"));
                }
                if table.windows(2).any(|p| p[0].0 >= p[1].0) || table.last().unwrap().0 >= *end {
                    return Err(Error::invalid("step epochs must increase and precede the end"));
                }
                table.iter().try_for_each(|&(_, lr)| positive(lr))
            }
            ScheduleSpec::Plateau {
                initial_lr,
                patience,
                factor,
            } => {
                positive(*initial_lr)?;
                if *patience == 0 || !(*factor > 0.0 && *factor < 1.0) {
                    return Err(Error::invalid("plateau needs patience >= 1 and 0 < factor < 1"));
                }
                Ok(())
            }
            ScheduleSpec::RangeTest {
                lr_start,
                lr_end,
                total_iters,
            } => {
                positive(*lr_start)?;
                positive(*lr_end)?;
                if lr_start >= lr_end || *total_iters < 2 {
                    return Err(Error::invalid(
                        "range test needs lr_start < lr_end and at least 2 iterations",
                    ));
                }
                Ok(())
            }
            ScheduleSpec::Piecewise { phases } => {
                if phases.is_empty() {
                    return Err(Error::invalid("piecewise schedule has no phases"));
                }
                for (i, p) in phases.iter().enumerate() {
                    if p.start >= p.end || (i > 0 && phases[i - 1].end != p.start) {
                        return Err(Error::invalid("phases must be non-empty, ordered and contiguous"));
                    }
                    if matches!(p.schedule, ScheduleSpec::Piecewise { .. }) {
                        return Err(Error::invalid("phases cannot nest"));
                    }
                    p.schedule.validate()?;
                }
                Ok(())
            }
        }
    }

    /// Epochs covered, if bounded.
    pub fn end(&self) -> Option<usize> {
        match self {
            ScheduleSpec::Step { end, .. } => Some(*end),
            ScheduleSpec::Piecewise { phases } => phases.last().map(|p| p.end),
            _ => None,
        }
    }

    /// Rate at `pos`, treating plateau phases as if no epoch had stalled.
    pub fn lr_at(&self, pos: Position) -> Result<f64> {
        self.lr_with_history(pos, &[])
    }

    /// Rate at `pos`; `history[e]` is the validation accuracy after epoch `e`.
    pub fn lr_with_history(&self, pos: Position, history: &[f64]) -> Result<f64> {
        self.eval(pos, 0, history)
    }

    /// Phase starting at exactly `epoch`, if any.
    pub fn phase_starting(&self, epoch: usize) -> Option<&Phase> {
        match self {
            ScheduleSpec::Piecewise { phases } => phases.iter().find(|p| p.start == epoch),
            _ => None,
        }
    }

    fn eval(&self, pos: Position, origin: usize, history: &[f64]) -> Result<f64> {
        let outside = Error::OutsideSchedule { epoch: pos.epoch };
        match self {
            ScheduleSpec::Constant { lr } => Ok(*lr),
            ScheduleSpec::Cyclical {
                min_lr,
                max_lr,
                half_cycle,
            } => {
                let x = (pos.fractional() - origin as f64) / half_cycle;
                let k = x.floor();
                let frac = x - k;
                let s = if k as i64 % 2 == 0 { frac } else { 1.0 - frac };
                Ok((1.0 - s) * min_lr + s * max_lr)
            }
            ScheduleSpec::Step { table, end } => {
                if pos.epoch >= *end {
                    return Err(outside);
                }
                Ok(table.iter().rev().find(|(e, _)| *e <= pos.epoch).ok_or(outside)?.1)
            }
            ScheduleSpec::Plateau {
                initial_lr,
                patience,
                factor,
            } => {
                let lo = origin.min(history.len());
                let hi = pos.epoch.clamp(lo, history.len());
                Ok(plateau_update(*initial_lr, *patience, *factor, &history[lo..hi]))
            }
            ScheduleSpec::RangeTest {
                lr_start,
                lr_end,
                total_iters,
            } => {
                if pos.iter >= *total_iters {
                    return Err(outside);
                }
                let u = pos.iter as f64 / (*total_iters - 1) as f64;
                Ok(lr_start * (lr_end / lr_start).powf(u))
            }
            ScheduleSpec::Piecewise { phases } => {
                let phase = phases
                    .iter()
                    .find(|p| p.start <= pos.epoch && pos.epoch < p.end)
                    .ok_or(outside)?;
                phase.schedule.eval(pos, phase.start, history)
            }
        }
    }
}
