//! Zero-shot and generalized zero-shot evaluation.
//!
//! All accuracies are class-balanced: the mean runs over classes that have at
//! least one test sample, not over samples. Values are kept in `[0, 1]` and
//! only scaled to percent for display.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::zsl::{AttributeTable, CompatibilityModel, LabeledEmbeddings, Regime};
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerClassAccuracy {
    pub per_class: BTreeMap<ClassId, ClassAccuracy>,
    pub mean: f64,
}

pub fn per_class_accuracy(
    predictions: &[ClassId],
    labels: &[ClassId],
    classes: &BTreeSet<ClassId>,
) -> Result<PerClassAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::dims("per_class_accuracy", labels.len(), predictions.len()));
    }
    let mut counts: BTreeMap<ClassId, (usize, usize)> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        if !classes.contains(&y) {
            return Err(Error::Split(format!("label {y} is outside the evaluated class set")));
        }
        let e = counts.entry(y).or_default();
        e.1 += 1;
        if p == y {
            e.0 += 1;
        }
    }
    let per_class: BTreeMap<ClassId, ClassAccuracy> = counts
        .into_iter()
        .map(|(c, (correct, total))| {
            (
                c,
                ClassAccuracy {
                    correct,
                    total,
                    accuracy: correct as f64 / total as f64,
                },
            )
        })
        .collect();
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().map(|a| a.accuracy).sum::<f64>() / per_class.len() as f64
    };
    Ok(PerClassAccuracy { per_class, mean })
}

/// `2us/(u+s)`, or 0 when both are 0. Both arguments must use the same scale.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if u < 0.0 || s < 0.0 || !u.is_finite() || !s.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "harmonic mean needs non-negative inputs, got u={u}, s={s}"
        )));
    }
    if u + s == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * u * s / (u + s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GzslReport {
    /// ZSL regime, mean per-class top-1 over unseen test classes.
    pub t1: f64,
    /// GZSL regime, unseen test classes.
    pub u: f64,
    /// GZSL regime, seen test classes.
    pub s: f64,
    pub h: f64,
    pub zsl_unseen: PerClassAccuracy,
    pub gzsl_unseen: PerClassAccuracy,
    pub gzsl_seen: PerClassAccuracy,
}

pub fn evaluate(
    model: &CompatibilityModel,
    test_seen: &LabeledEmbeddings,
    test_unseen: &LabeledEmbeddings,
    table: &AttributeTable,
) -> Result<GzslReport> {
    if test_seen.is_empty() || test_unseen.is_empty() {
        return Err(Error::InvalidArgument(
            "evaluation needs non-empty seen and unseen test splits".into(),
        ));
    }
    let zsl_pred = model.predict(&test_unseen.embeddings, table, Regime::Zsl)?;
    let gzsl_unseen_pred = model.predict(&test_unseen.embeddings, table, Regime::Gzsl)?;
    let gzsl_seen_pred = model.predict(&test_seen.embeddings, table, Regime::Gzsl)?;
    let zsl_unseen = per_class_accuracy(&zsl_pred, &test_unseen.labels, table.unseen())?;
    let gzsl_unseen = per_class_accuracy(&gzsl_unseen_pred, &test_unseen.labels, table.unseen())?;
    let gzsl_seen = per_class_accuracy(&gzsl_seen_pred, &test_seen.labels, table.seen())?;
    let (u, s) = (gzsl_unseen.mean, gzsl_seen.mean);
    Ok(GzslReport {
        t1: zsl_unseen.mean,
        u,
        s,
        h: harmonic_mean(u, s)?,
        zsl_unseen,
        gzsl_unseen,
        gzsl_seen,
    })
}

impl GzslReport {
    /// `t1=…`, `u=…`, `s=…`, `h=…`, one per line, full precision in `[0, 1]`.
    pub fn to_key_values(&self) -> String {
        format!(
            "t1={:.17}\nu={:.17}\ns={:.17}\nh={:.17}\n",
            self.t1, self.u, self.s, self.h
        )
    }

    /// Aligned table in percent with one decimal, followed by the per-class breakdown.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>8} {:>8} {:>8} {:>8}", "T1", "u", "s", "H");
        let _ = writeln!(
            out,
            "{:>8.1} {:>8.1} {:>8.1} {:>8.1}",
            100.0 * self.t1,
            100.0 * self.u,
            100.0 * self.s,
            100.0 * self.h
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "{:>8} {:>10} {:>8} {:>10}", "class", "split", "samples", "accuracy");
        for (split, acc) in [
            ("zsl", &self.zsl_unseen),
            ("gzsl-u", &self.gzsl_unseen),
            ("gzsl-s", &self.gzsl_seen),
        ] {
            for (c, a) in &acc.per_class {
                let _ = writeln!(out, "{:>8} {:>10} {:>8} {:>10.1}", c, split, a.total, 100.0 * a.accuracy);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use crate::zsl::CompatConfig;

    #[test]
    fn per_class_examples() {
        let classes: BTreeSet<ClassId> = [0, 1].into();
        let r = per_class_accuracy(&[0, 1, 1], &[0, 0, 1], &classes).unwrap();
        assert_eq!(r.per_class[&0].accuracy, 0.5);
        assert_eq!(r.per_class[&1].accuracy, 1.0);
        assert_eq!(r.mean, 0.75);
        assert_eq!(per_class_accuracy(&[1, 0], &[1, 0], &classes).unwrap().mean, 1.0);
    }

    #[test]
    fn per_class_mean_ignores_imbalance() {
        let classes: BTreeSet<ClassId> = [0, 1].into();
        let mut labels = vec![0; 98];
        labels.extend([1, 1]);
        let mut preds = vec![0; 98];
        preds.extend([0, 0]);
        assert_eq!(per_class_accuracy(&preds, &labels, &classes).unwrap().mean, 0.5);
    }

    #[test]
    fn per_class_errors() {
        let classes: BTreeSet<ClassId> = [0].into();
        assert!(per_class_accuracy(&[0], &[0, 0], &classes).is_err());
        assert!(per_class_accuracy(&[0], &[3], &classes).is_err());
    }

    #[test]
    fn classes_without_samples_are_excluded() {
        let classes: BTreeSet<ClassId> = [0, 1, 2].into();
        let r = per_class_accuracy(&[0, 0], &[0, 0], &classes).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn harmonic_mean_examples() {
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert!((harmonic_mean(0.37, 0.37).unwrap() - 0.37).abs() < 1e-15);
        assert!(harmonic_mean(-1.0, 2.0).is_err());
    }

    fn fixture() -> (AttributeTable, LabeledEmbeddings, LabeledEmbeddings) {
        let table = AttributeTable::new(vec![0, 1, 2, 3], Matrix::identity(4), [0, 1].into(), [2, 3].into()).unwrap();
        let seen = LabeledEmbeddings::new(
            Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]).unwrap(),
            vec![0, 1],
        )
        .unwrap();
        let unseen = LabeledEmbeddings::new(
            Matrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]]).unwrap(),
            vec![2, 3],
        )
        .unwrap();
        (table, seen, unseen)
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let (table, seen, unseen) = fixture();
        let model = CompatibilityModel {
            w: Matrix::identity(4),
            config: CompatConfig::default(),
        };
        let r = evaluate(&model, &seen, &unseen, &table).unwrap();
        assert_eq!((r.t1, r.u, r.s, r.h), (1.0, 1.0, 1.0, 1.0));
        let kv = r.to_key_values();
        assert!(kv.starts_with("t1=1.0"));
        assert!(r.to_table().contains("100.0"));
    }

    #[test]
    fn constant_seen_prediction_zeroes_u_and_h() {
        let (table, seen, unseen) = fixture();
        // Every embedding maps onto attribute 0: always predicts seen class 0 under GZSL.
        let mut w = Matrix::zeros(4, 4);
        for r in 0..4 {
            w.set(r, 0, 1.0);
        }
        let model = CompatibilityModel {
            w,
            config: CompatConfig::default(),
        };
        let r = evaluate(&model, &seen, &unseen, &table).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.h, 0.0);
        assert_eq!(r.s, 0.5);
    }

    #[test]
    fn empty_split_is_an_error() {
        let (table, seen, _) = fixture();
        let empty = LabeledEmbeddings::new(Matrix::zeros(0, 4), vec![]).unwrap();
        let model = CompatibilityModel {
            w: Matrix::identity(4),
            config: CompatConfig::default(),
        };
        assert!(evaluate(&model, &seen, &empty, &table).is_err());
    }
}
