use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `3 / (1/old + 1/new + 1/gen)`, or 0 when any input is 0.
pub fn harmonic_mean(old: f64, new: f64, gen: f64) -> f64 {
    if old <= 0.0 || new <= 0.0 || gen <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / old + 1.0 / new + 1.0 / gen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Baseline,
    NonDissonantUpdate,
    DissonantUpdate,
    ControlThirdRound,
    PlasticitySweep,
    ContradictionScale,
    Lottery,
    Classification,
    StubbornHistogram,
}

impl Stage {
    pub fn dir_name(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::NonDissonantUpdate => "nondissonant",
            Stage::DissonantUpdate => "dissonant",
            Stage::ControlThirdRound => "control",
            Stage::PlasticitySweep => "sweep",
            Stage::ContradictionScale => "scale",
            Stage::Lottery => "lottery",
            Stage::Classification => "classification",
            Stage::StubbornHistogram => "histogram",
        }
    }
}

/// Accuracies of one arm on one fold, measured after training stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub old: f64,
    pub new: f64,
    pub gen: f64,
    pub harmonic_mean: f64,
    pub epochs: usize,
    pub steps: u64,
    pub converged: bool,
    pub n_old: usize,
    pub n_new: usize,
}

impl FoldMetrics {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fold: usize,
        old: f64,
        new: f64,
        gen: f64,
        epochs: usize,
        steps: u64,
        converged: bool,
        sizes: (usize, usize),
    ) -> Self {
        Self {
            fold,
            old,
            new,
            gen,
            harmonic_mean: harmonic_mean(old, new, gen),
            epochs,
            steps,
            converged,
            n_old: sizes.0,
            n_new: sizes.1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub old: f64,
    pub new: f64,
    pub gen: f64,
    pub epochs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub strategy: Option<String>,
    pub selection_n: Option<usize>,
    pub fraction: Option<f64>,
    pub folds: Vec<FoldMetrics>,
    pub mean: Summary,
    /// Population standard deviation over folds.
    pub std: Summary,
    /// Harmonic mean of the mean accuracies.
    pub harmonic_mean: f64,
    pub extra: BTreeMap<String, f64>,
}

impl ArmReport {
    pub fn new(arm: impl Into<String>, mut folds: Vec<FoldMetrics>) -> Self {
        folds.sort_by_key(|f| f.fold);
        let pick = |g: fn(&FoldMetrics) -> f64| -> (f64, f64) {
            let xs: Vec<f64> = folds.iter().map(g).collect();
            crate::dissonance::mean_std(&xs)
        };
        let (old, old_s) = pick(|f| f.old);
        let (new, new_s) = pick(|f| f.new);
        let (gen, gen_s) = pick(|f| f.gen);
        let (ep, ep_s) = pick(|f| f.epochs as f64);
        Self {
            arm: arm.into(),
            strategy: None,
            selection_n: None,
            fraction: None,
            folds,
            mean: Summary {
                old,
                new,
                gen,
                epochs: ep,
            },
            std: Summary {
                old: old_s,
                new: new_s,
                gen: gen_s,
                epochs: ep_s,
            },
            harmonic_mean: harmonic_mean(old, new, gen),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_selection(mut self, strategy: &str, selection_n: usize, fraction: f64) -> Self {
        self.strategy = Some(strategy.to_owned());
        self.selection_n = Some(selection_n);
        self.fraction = Some(fraction);
        self
    }

    pub fn fold(&self, fold: usize) -> Option<&FoldMetrics> {
        self.folds.iter().find(|f| f.fold == fold)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub corpus_fingerprint: String,
    /// Named checkpoint and profile fingerprints.
    pub artifacts: BTreeMap<String, String>,
    pub crate_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub stage: Stage,
    pub arms: Vec<ArmReport>,
    pub provenance: Provenance,
    pub notes: Vec<String>,
    /// Stage-specific tables and scalars.
    pub details: serde_json::Value,
}

impl ExperimentReport {
    pub fn new(stage: Stage, provenance: Provenance) -> Self {
        Self {
            stage,
            arms: Vec::new(),
            provenance,
            notes: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// Every accuracy lies in [0, 1] and every stored harmonic mean matches
    /// its inputs.
    pub fn check_consistency(&self) -> Result<()> {
        let ok = |x: f64| (0.0..=1.0).contains(&x);
        for a in &self.arms {
            for f in &a.folds {
                if !(ok(f.old) && ok(f.new) && ok(f.gen)) {
                    return Err(Error::Shape(format!(
                        "arm {} fold {} has an accuracy outside [0, 1]",
                        a.arm, f.fold
                    )));
                }
                if f.harmonic_mean != harmonic_mean(f.old, f.new, f.gen) {
                    return Err(Error::Shape(format!(
                        "arm {} fold {} harmonic mean is stale",
                        a.arm, f.fold
                    )));
                }
            }
            if a.harmonic_mean != harmonic_mean(a.mean.old, a.mean.new, a.mean.gen) {
                return Err(Error::Shape(format!(
                    "arm {} harmonic mean is stale",
                    a.arm
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
    }

    /// One row per arm, fold and metric.
    pub fn tidy_csv(&self) -> String {
        let mut out = String::from("stage,arm,strategy,selection_n,fraction,fold,metric,value\n");
        let stage = self.stage.dir_name();
        for a in &self.arms {
            let strategy = a.strategy.as_deref().unwrap_or("");
            let n = a.selection_n.map(|n| n.to_string()).unwrap_or_default();
            let frac = a.fraction.map(|f| f.to_string()).unwrap_or_default();
            for f in &a.folds {
                let rows = [
                    ("old", f.old),
                    ("new", f.new),
                    ("gen", f.gen),
                    ("harmonic_mean", f.harmonic_mean),
                    ("epochs", f.epochs as f64),
                ];
                for (metric, v) in rows {
                    let _ = writeln!(
                        out,
                        "{stage},{},{strategy},{n},{frac},{},{metric},{v}",
                        a.arm, f.fold
                    );
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(0.5, 1.0, 0.5) - 0.6).abs() < 1e-12);
        assert_eq!(harmonic_mean(0.0, 1.0, 1.0), 0.0);
        assert_eq!(harmonic_mean(1.0, 1.0, 1.0), 1.0);
    }

    #[test]
    fn arm_aggregates_use_population_std() {
        let folds = vec![
            FoldMetrics::new(1, 0.5, 1.0, 0.5, 10, 5, true, (10, 10)),
            FoldMetrics::new(0, 1.0, 1.0, 1.0, 20, 5, true, (10, 10)),
        ];
        let a = ArmReport::new("full", folds);
        assert_eq!(a.folds[0].fold, 0);
        assert_eq!(a.mean.old, 0.75);
        assert_eq!(a.std.old, 0.25);
        assert_eq!(a.mean.epochs, 15.0);
        let mut r = ExperimentReport::new(Stage::Baseline, Provenance::default());
        r.arms.push(a);
        r.check_consistency().unwrap();
        r.arms[0].harmonic_mean = 0.1;
        assert!(r.check_consistency().is_err());
        let back = ExperimentReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.tidy_csv().lines().count(), 1 + 2 * 5);
    }
}
