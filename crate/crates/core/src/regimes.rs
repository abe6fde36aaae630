//! Reversibility / catastrophe classification from task accuracies of the
//! original, unlearned and relearned models.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds in accuracy percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegimeThresholds {
    pub catastrophic_drop: f64,
    pub irreversible_residual: f64,
    pub near_zero_band: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        Self {
            catastrophic_drop: 20.0,
            irreversible_residual: 10.0,
            near_zero_band: 3.0,
        }
    }
}

impl RegimeThresholds {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("catastrophic_drop", self.catastrophic_drop),
            ("irreversible_residual", self.irreversible_residual),
            ("near_zero_band", self.near_zero_band),
        ];
        for (field, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if self.near_zero_band > self.irreversible_residual {
            return Err(Error::config(
                "near_zero_band",
                "must not exceed irreversible_residual",
            ));
        }
        Ok(())
    }
}

/// Accuracies (fractions in `[0, 1]`) for one task across the three states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskAccuracies {
    pub original: f64,
    pub unlearned: f64,
    pub relearned: f64,
}

/// Accuracy drops, in percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeDeltas {
    /// `Acc_f(θ0) − Acc_f(θu)`
    pub du_forget: f64,
    /// `Acc_r(θ0) − Acc_r(θu)`
    pub du_retain: f64,
    /// `Acc_f(θ0) − Acc_f(θr)`
    pub dr_forget: f64,
    /// `Acc_r(θ0) − Acc_r(θr)`
    pub dr_retain: f64,
}

fn check_acc(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Invalid(format!("{name} accuracy {v} outside [0, 1]")));
    }
    Ok(())
}

pub fn compute_deltas(forget: &TaskAccuracies, retain: &TaskAccuracies) -> Result<RegimeDeltas> {
    for (n, v) in [
        ("forget original", forget.original),
        ("forget unlearned", forget.unlearned),
        ("forget relearned", forget.relearned),
        ("retain original", retain.original),
        ("retain unlearned", retain.unlearned),
        ("retain relearned", retain.relearned),
    ] {
        check_acc(n, v)?;
    }
    Ok(RegimeDeltas {
        du_forget: 100.0 * (forget.original - forget.unlearned),
        du_retain: 100.0 * (retain.original - retain.unlearned),
        dr_forget: 100.0 * (forget.original - forget.relearned),
        dr_retain: 100.0 * (retain.original - retain.relearned),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reversibility {
    Reversible,
    Irreversible,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Catastrophic,
    NonCatastrophic,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub reversibility: Reversibility,
    pub severity: Severity,
    pub deltas: RegimeDeltas,
}

impl RegimeVerdict {
    /// `reversible`, `irreversible_catastrophic`, ... or `indeterminate`.
    pub fn label(&self) -> String {
        let r = match self.reversibility {
            Reversibility::Reversible => "reversible",
            Reversibility::Irreversible => "irreversible",
            Reversibility::Indeterminate => return "indeterminate".into(),
        };
        match self.severity {
            Severity::Catastrophic => format!("{r}_catastrophic"),
            Severity::NonCatastrophic => format!("{r}_non_catastrophic"),
            Severity::Indeterminate => r.into(),
        }
    }
}

impl fmt::Display for RegimeVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "regime={} dU_f={:.2} dU_r={:.2} dR_f={:.2}",
            self.label(),
            self.deltas.du_forget,
            self.deltas.du_retain,
            self.deltas.dr_forget
        )
    }
}

/// Catastrophic when both forget and retain collapse by at least
/// `catastrophic_drop`; non-catastrophic when retain stays within it.
/// Reversible when relearning restores forget accuracy to within
/// `near_zero_band`; irreversible past `irreversible_residual`.
pub fn classify(deltas: &RegimeDeltas, t: &RegimeThresholds) -> RegimeVerdict {
    let severity = if deltas.du_retain >= t.catastrophic_drop && deltas.du_forget >= t.catastrophic_drop {
        Severity::Catastrophic
    } else if deltas.du_retain < t.catastrophic_drop {
        Severity::NonCatastrophic
    } else {
        Severity::Indeterminate
    };
    let reversibility = if deltas.dr_forget <= t.near_zero_band {
        Reversibility::Reversible
    } else if deltas.dr_forget >= t.irreversible_residual {
        Reversibility::Irreversible
    } else {
        Reversibility::Indeterminate
    };
    RegimeVerdict {
        reversibility,
        severity,
        deltas: *deltas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn deltas(f0: f64, fu: f64, fr: f64, r0: f64, ru: f64) -> RegimeDeltas {
        compute_deltas(
            &TaskAccuracies {
                original: f0,
                unlearned: fu,
                relearned: fr,
            },
            &TaskAccuracies {
                original: r0,
                unlearned: ru,
                relearned: ru,
            },
        )
        .unwrap()
    }

    #[test]
    fn mild_unlearning_is_reversible() {
        let d = deltas(0.789, 0.654, 0.766, 0.655, 0.540);
        assert!((d.du_forget - 13.5).abs() < 1e-9);
        assert!((d.dr_forget - 2.3).abs() < 1e-9);
        let v = classify(&d, &RegimeThresholds::default());
        assert_eq!(v.reversibility, Reversibility::Reversible);
        assert_eq!(v.severity, Severity::NonCatastrophic);
        assert_eq!(v.label(), "reversible_non_catastrophic");
    }

    #[test]
    fn collapse_is_irreversible_catastrophic() {
        let d = RegimeDeltas {
            du_forget: 78.9,
            du_retain: 65.5,
            dr_forget: 76.8,
            dr_retain: 60.0,
        };
        let v = classify(&d, &RegimeThresholds::default());
        assert_eq!(v.label(), "irreversible_catastrophic");
        assert_eq!(
            v.to_string(),
            "regime=irreversible_catastrophic dU_f=78.90 dU_r=65.50 dR_f=76.80"
        );
    }

    #[test]
    fn unchanged_model_has_zero_deltas() {
        let d = deltas(0.7, 0.7, 0.7, 0.6, 0.6);
        assert_eq!((d.du_forget, d.dr_forget, d.du_retain), (0.0, 0.0, 0.0));
        let v = classify(&d, &RegimeThresholds::default());
        assert_eq!(v.label(), "reversible_non_catastrophic");
    }

    #[test]
    fn between_bands_is_indeterminate() {
        let d = RegimeDeltas {
            du_forget: 50.0,
            du_retain: 1.0,
            dr_forget: 5.0,
            dr_retain: 0.0,
        };
        assert_eq!(classify(&d, &RegimeThresholds::default()).label(), "indeterminate");
    }

    #[test]
    fn rejects_out_of_range_accuracy() {
        let a = TaskAccuracies {
            original: 1.2,
            unlearned: 0.0,
            relearned: 0.0,
        };
        assert!(compute_deltas(&a, &a).is_err());
        let bad = RegimeThresholds {
            near_zero_band: 11.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn rank_rev(r: Reversibility) -> u8 {
        match r {
            Reversibility::Reversible => 0,
            Reversibility::Indeterminate => 1,
            Reversibility::Irreversible => 2,
        }
    }

    fn rank_sev(s: Severity) -> u8 {
        match s {
            Severity::NonCatastrophic => 0,
            Severity::Indeterminate => 1,
            Severity::Catastrophic => 2,
        }
    }

    proptest! {
        #[test]
        fn larger_residual_never_more_reversible(
            du_f in -100.0..100.0f64, du_r in -100.0..100.0f64,
            dr in -100.0..100.0f64, extra in 0.0..50.0f64,
        ) {
            let t = RegimeThresholds::default();
            let a = classify(&RegimeDeltas { du_forget: du_f, du_retain: du_r, dr_forget: dr, dr_retain: 0.0 }, &t);
            let b = classify(&RegimeDeltas { du_forget: du_f, du_retain: du_r, dr_forget: dr + extra, dr_retain: 0.0 }, &t);
            prop_assert!(rank_rev(b.reversibility) >= rank_rev(a.reversibility));
        }

        #[test]
        fn larger_drops_never_less_catastrophic(
            du_f in -100.0..100.0f64, du_r in -100.0..100.0f64,
            dr in -100.0..100.0f64, ef in 0.0..50.0f64, er in 0.0..50.0f64,
        ) {
            let t = RegimeThresholds::default();
            let a = classify(&RegimeDeltas { du_forget: du_f, du_retain: du_r, dr_forget: dr, dr_retain: 0.0 }, &t);
            let b = classify(&RegimeDeltas { du_forget: du_f + ef, du_retain: du_r + er, dr_forget: dr, dr_retain: 0.0 }, &t);
            prop_assert!(rank_sev(b.severity) >= rank_sev(a.severity));
        }

        #[test]
        fn raising_catastrophic_drop_never_adds_catastrophe(
            du_f in -100.0..100.0f64, du_r in -100.0..100.0f64,
            cd in 0.0..60.0f64, extra in 0.0..40.0f64,
        ) {
            let d = RegimeDeltas { du_forget: du_f, du_retain: du_r, dr_forget: 0.0, dr_retain: 0.0 };
            let lo = RegimeThresholds { catastrophic_drop: cd, ..Default::default() };
            let hi = RegimeThresholds { catastrophic_drop: cd + extra, ..Default::default() };
            if classify(&d, &lo).severity != Severity::Catastrophic {
                prop_assert_ne!(classify(&d, &hi).severity, Severity::Catastrophic);
            }
        }

        #[test]
        fn common_accuracy_offset_leaves_verdict_unchanged(
            f0 in 0.2..0.8f64, fu in 0.2..0.8f64, fr in 0.2..0.8f64,
            r0 in 0.2..0.8f64, ru in 0.2..0.8f64, c in -0.2..0.2f64,
        ) {
            let t = RegimeThresholds::default();
            let a = classify(&deltas(f0, fu, fr, r0, ru), &t);
            let b = classify(&deltas(f0 + c, fu + c, fr + c, r0 + c, ru + c), &t);
            // deltas agree up to rounding; compare labels away from band edges
            let near = |x: f64, e: f64| (x - e).abs() < 1e-6;
            let d = a.deltas;
            let edge = [20.0, 10.0, 3.0].iter().any(|&e| near(d.du_forget, e) || near(d.du_retain, e) || near(d.dr_forget, e));
            prop_assume!(!edge);
            prop_assert_eq!(a.label(), b.label());
        }
    }
}
