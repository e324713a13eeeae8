use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open range of simulation intervals `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalRange {
    pub start: usize,
    pub end: usize,
}

impl IntervalRange {
    pub fn new(start: usize, end: usize) -> Self {
        IntervalRange { start, end }
    }

    pub fn contains(&self, interval: usize) -> bool {
        (self.start..self.end).contains(&interval)
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &IntervalRange) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Spend cap `B_k` over a window of intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryWindow {
    pub name: String,
    pub intervals: IntervalRange,
    pub cap: f64,
}

/// Result floor `V_k` over a window of intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeWindow {
    pub name: String,
    pub intervals: IntervalRange,
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub budget: f64,
    #[serde(default)]
    pub cost_target: Option<f64>,
    #[serde(default)]
    pub delivery_windows: Vec<DeliveryWindow>,
    #[serde(default)]
    pub guarantee_windows: Vec<GuaranteeWindow>,
}

impl ConstraintSet {
    pub fn budget_only(budget: f64) -> Self {
        ConstraintSet {
            budget,
            ..Default::default()
        }
    }

    /// Checks the set. A zero budget is accepted and means "never bid".
    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(Error::Config(format!("budget must be finite and >= 0, got {}", self.budget)));
        }
        if let Some(c) = self.cost_target {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("cost_target must be > 0, got {c}")));
            }
        }
        for w in &self.delivery_windows {
            if !(w.cap > 0.0) {
                return Err(Error::Config(format!("delivery window '{}': cap must be > 0", w.name)));
            }
            if w.intervals.is_empty() {
                return Err(Error::Config(format!("delivery window '{}' is empty", w.name)));
            }
        }
        for w in &self.guarantee_windows {
            if !(w.floor > 0.0) {
                return Err(Error::Config(format!("guarantee window '{}': floor must be > 0", w.name)));
            }
            if w.intervals.is_empty() {
                return Err(Error::Config(format!("guarantee window '{}' is empty", w.name)));
            }
        }
        check_disjoint(
            "delivery",
            self.delivery_windows.iter().map(|w| (w.name.as_str(), w.intervals)),
        )?;
        check_disjoint(
            "guarantee",
            self.guarantee_windows.iter().map(|w| (w.name.as_str(), w.intervals)),
        )
    }

    pub fn delivery_window_at(&self, interval: usize) -> Option<usize> {
        self.delivery_windows
            .iter()
            .position(|w| w.intervals.contains(interval))
    }

    pub fn guarantee_window_at(&self, interval: usize) -> Option<usize> {
        self.guarantee_windows
            .iter()
            .position(|w| w.intervals.contains(interval))
    }
}

fn check_disjoint<'a>(kind: &str, windows: impl Iterator<Item = (&'a str, IntervalRange)>) -> Result<()> {
    let windows: Vec<_> = windows.collect();
    for (i, (a, ra)) in windows.iter().enumerate() {
        for (b, rb) in &windows[i + 1..] {
            if ra.overlaps(rb) {
                return Err(Error::Config(format!(
                    "{kind} windows '{a}' and '{b}' overlap"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_windows_named_in_error() {
        let set = ConstraintSet {
            budget: 10.0,
            delivery_windows: vec![
                DeliveryWindow {
                    name: "sat".into(),
                    intervals: IntervalRange::new(5, 10),
                    cap: 1.0,
                },
                DeliveryWindow {
                    name: "sun".into(),
                    intervals: IntervalRange::new(9, 12),
                    cap: 1.0,
                },
            ],
            ..Default::default()
        };
        let err = set.validate().unwrap_err().to_string();
        assert!(err.contains("'sat'") && err.contains("'sun'"), "{err}");
    }

    #[test]
    fn adjacent_windows_are_disjoint() {
        let a = IntervalRange::new(0, 5);
        let b = IntervalRange::new(5, 8);
        assert!(!a.overlaps(&b));
        assert!(a.contains(4) && !a.contains(5));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ConstraintSet::budget_only(-1.0).validate().is_err());
        let mut c = ConstraintSet::budget_only(1.0);
        c.cost_target = Some(0.0);
        assert!(c.validate().is_err());
        assert!(ConstraintSet::budget_only(0.0).validate().is_ok());
    }
}
