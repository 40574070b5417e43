use serde::{Deserialize, Serialize};

use super::evaluate;
use crate::data::Dataset;
use crate::eaconv::Model;
use crate::perturb::{perturb_dataset, PerturbKind, PerturbSpec, Schedule};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub kind: PerturbKind,
    pub severity: f64,
    pub model: String,
    /// Percent.
    pub accuracy: f64,
    /// Clean accuracy minus this accuracy, in percentage points.
    pub drop: f64,
}

/// Accuracy per (perturbation, severity, model); the clean rows come first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,severity,model,accuracy,drop\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4}\n",
                r.kind.name(),
                r.severity,
                r.model,
                r.accuracy,
                r.drop
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn models(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.model) {
                names.push(r.model.clone());
            }
        }
        names
    }

    pub fn clean_accuracy(&self, model: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.kind == PerturbKind::Clean && r.model == model)
            .map(|r| r.accuracy)
    }

    /// `(severity, accuracy)` of one model along one kind, in schedule order.
    pub fn curve(&self, kind: PerturbKind, model: &str) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.kind == kind && r.model == model)
            .map(|r| (r.severity, r.accuracy))
            .collect()
    }

    /// Mean accuracy of `model` over the severities of `kind`.
    pub fn mean_accuracy(&self, kind: PerturbKind, model: &str) -> Option<f64> {
        let c = self.curve(kind, model);
        (!c.is_empty()).then(|| c.iter().map(|(_, a)| a).sum::<f64>() / c.len() as f64)
    }
}

/// Evaluates every model on the clean set and on each perturbed set of every
/// schedule. Perturbed sets are generated once per severity with `seed`, so
/// all models see identical images.
pub fn robustness_sweep(
    models: &[(&str, &Model)],
    data: &Dataset,
    schedules: &[Schedule],
    seed: u64,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::Empty("model list"));
    }
    let mut rows = Vec::new();
    let mut clean = Vec::with_capacity(models.len());
    for (name, model) in models {
        let acc = evaluate(model, data)?;
        clean.push(acc);
        rows.push(ReportRow {
            kind: PerturbKind::Clean,
            severity: 0.0,
            model: name.to_string(),
            accuracy: acc,
            drop: 0.0,
        });
    }
    for schedule in schedules {
        for spec in schedule.specs(seed) {
            let perturbed = perturbed_set(data, &spec)?;
            for ((name, model), &base) in models.iter().zip(&clean) {
                let acc = evaluate(model, &perturbed)?;
                rows.push(ReportRow {
                    kind: schedule.kind,
                    severity: spec.perturbation.severity(),
                    model: name.to_string(),
                    accuracy: acc,
                    drop: base - acc,
                });
            }
            log::info!("swept {} at {}", schedule.kind.name(), spec.perturbation.severity());
        }
    }
    Ok(EvalReport { rows })
}

fn perturbed_set(data: &Dataset, spec: &PerturbSpec) -> Result<Dataset> {
    if spec.perturbation.kind() == PerturbKind::Clean {
        return Ok(data.clone());
    }
    perturb_dataset(data, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::eaconv::{build_model, ModelConfig};

    fn setup() -> (Dataset, Model, Model) {
        let spec = SyntheticSpec {
            image_size: 16,
            ..SyntheticSpec::new(3, 5)
        };
        let data = generate_synthetic(&spec).unwrap();
        let cfg = ModelConfig::four_conv([1, 16, 16], [4, 4, 4, 4], 4);
        (
            data,
            build_model(&cfg, None, 1).unwrap(),
            build_model(&cfg, None, 2).unwrap(),
        )
    }

    #[test]
    fn row_count_and_clean_drop() {
        let (data, a, b) = setup();
        let schedules = vec![
            Schedule {
                kind: PerturbKind::Clean,
                severities: vec![0.0, 0.0],
            },
            Schedule {
                kind: PerturbKind::Rotation,
                severities: vec![5.0, 10.0, 20.0],
            },
        ];
        let report = robustness_sweep(&[("a", &a), ("b", &b)], &data, &schedules, 0).unwrap();
        assert_eq!(report.rows.len(), 2 * (1 + 2 + 3));
        assert_eq!(report.models(), vec!["a", "b"]);
        for r in report.rows.iter().filter(|r| r.kind == PerturbKind::Clean) {
            assert_eq!(r.drop, 0.0);
        }
        assert_eq!(report.curve(PerturbKind::Rotation, "b").len(), 3);
        let csv = report.to_csv();
        assert!(csv.starts_with("kind,severity,model,accuracy,drop\n"));
        assert_eq!(csv.lines().count(), 1 + report.rows.len());
        let back: EvalReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn empty_model_list_is_an_error() {
        let (data, _, _) = setup();
        assert!(robustness_sweep(&[], &data, &[], 0).is_err());
    }
}
