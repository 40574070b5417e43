use serde::{Deserialize, Serialize};

use super::{evaluate, robustness_sweep, train, ElasticAugment, EvalReport, History, TrainConfig};
use crate::basis::{build_basis_bank, BasisConfig};
use crate::data::Dataset;
use crate::eaconv::{build_model, transfer_weights, Model, ModelConfig};
use crate::perturb::{default_schedules, PerturbKind, Schedule};
use crate::{Error, Result};

pub const STANDARD: &str = "standard";
pub const DATA_AUG: &str = "data_aug";
pub const EACONV: &str = "eaconv";

fn d_widths() -> [usize; 4] {
    [16, 32, 32, 64]
}
fn d_basis() -> BasisConfig {
    BasisConfig::standard(3, 1.0, 0.5)
}
fn d_finetune() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        learning_rate: 0.005,
        ..TrainConfig::default()
    }
}
fn d_aug() -> ElasticAugment {
    ElasticAugment::default()
}

/// Settings of the three-model comparison. Missing fields take desk-scale
/// defaults; the host architecture defaults to the four-conv CNN sized from
/// the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default = "d_widths")]
    pub widths: [usize; 4],
    #[serde(default = "d_basis")]
    pub basis: BasisConfig,
    /// Layer indices to augment; the first convolution when absent.
    #[serde(default)]
    pub augment: Option<Vec<usize>>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Fine-tuning of the transfer-initialized EAConv model.
    #[serde(default = "d_finetune")]
    pub finetune: TrainConfig,
    #[serde(default = "d_aug")]
    pub augmentation: ElasticAugment,
    #[serde(default)]
    pub schedules: Option<Vec<Schedule>>,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub sweep_seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// Table-style summary for one model: clean accuracy and accuracy at the
/// elastic severities where the standard model loses about 5 and 10 points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub clean: f64,
    pub drop5_severity: f64,
    pub drop5_accuracy: f64,
    pub drop10_severity: f64,
    pub drop10_accuracy: f64,
    pub elastic_mean: f64,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub report: EvalReport,
    pub summary: Vec<SummaryRow>,
    pub histories: Vec<(String, History)>,
    /// Clean accuracy of the EAConv model straight after transfer minus the
    /// standard model's; zero when the transfer is exact.
    pub transfer_gap: f64,
    pub models: Vec<(String, Model)>,
}

impl CompareOutcome {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "model,clean,drop5_severity,drop5_accuracy,drop10_severity,drop10_accuracy,elastic_mean\n",
        );
        for r in &self.summary {
            out.push_str(&format!(
                "{},{:.4},{},{:.4},{},{:.4},{:.4}\n",
                r.model,
                r.clean,
                r.drop5_severity,
                r.drop5_accuracy,
                r.drop10_severity,
                r.drop10_accuracy,
                r.elastic_mean
            ));
        }
        out
    }

    pub fn model(&self, name: &str) -> Option<&Model> {
        self.models.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }
}

/// Elastic severity whose standard-model drop is closest to `target`.
fn severity_near(report: &EvalReport, reference: &str, target: f64) -> Option<f64> {
    let clean = report.clean_accuracy(reference)?;
    report
        .curve(PerturbKind::Elastic, reference)
        .into_iter()
        .min_by(|a, b| {
            let da = (clean - a.1 - target).abs();
            let db = (clean - b.1 - target).abs();
            da.total_cmp(&db)
        })
        .map(|(s, _)| s)
}

pub fn summarize(report: &EvalReport, reference: &str) -> Result<Vec<SummaryRow>> {
    let s5 = severity_near(report, reference, 5.0);
    let s10 = severity_near(report, reference, 10.0);
    let at = |model: &str, s: Option<f64>| {
        s.and_then(|s| {
            report
                .curve(PerturbKind::Elastic, model)
                .into_iter()
                .find(|&(sv, _)| sv == s)
                .map(|(_, a)| a)
        })
        .unwrap_or(f64::NAN)
    };
    report
        .models()
        .iter()
        .map(|m| {
            Ok(SummaryRow {
                model: m.clone(),
                clean: report
                    .clean_accuracy(m)
                    .ok_or_else(|| Error::Config(format!("no clean row for {m}")))?,
                drop5_severity: s5.unwrap_or(f64::NAN),
                drop5_accuracy: at(m, s5),
                drop10_severity: s10.unwrap_or(f64::NAN),
                drop10_accuracy: at(m, s10),
                elastic_mean: report
                    .mean_accuracy(PerturbKind::Elastic, m)
                    .unwrap_or(f64::NAN),
            })
        })
        .collect()
}

/// Trains a standard model, the same model with elastic data augmentation,
/// and an EAConv model initialized from the standard one by weight transfer
/// and then fine-tuned; sweeps all three over identical perturbed test sets.
pub fn compare_protocol(
    train_set: &Dataset,
    test_set: &Dataset,
    config: &CompareConfig,
) -> Result<CompareOutcome> {
    let host = match &config.model {
        Some(m) => m.clone(),
        None => ModelConfig::four_conv(
            train_set.image_shape(),
            config.widths,
            train_set.num_classes(),
        ),
    };
    if host.is_augmented() {
        return Err(Error::Config("host architecture must be a standard model".into()));
    }
    let ea_config = match &config.augment {
        Some(positions) => host.augment(positions)?,
        None => host.augment_first_conv()?,
    };
    let bank = build_basis_bank(&config.basis)?.into_shared();

    log::info!("training the standard model");
    let mut standard = build_model(&host, None, config.model_seed)?;
    let h_std = train(&mut standard, train_set, &config.train, None)?;

    log::info!("training the data-augmentation model");
    let mut data_aug = build_model(&host, None, config.model_seed)?;
    let aug_cfg = TrainConfig {
        elastic: Some(config.augmentation.clone()),
        ..config.train.clone()
    };
    let h_aug = train(&mut data_aug, train_set, &aug_cfg, None)?;

    log::info!("transferring into the EAConv model and fine-tuning");
    let mut eaconv = build_model(&ea_config, Some(bank), config.model_seed)?;
    transfer_weights(&standard, &mut eaconv)?;
    let transfer_gap = evaluate(&eaconv, test_set)? - evaluate(&standard, test_set)?;
    let h_ea = train(&mut eaconv, train_set, &config.finetune, None)?;

    let schedules = config
        .schedules
        .clone()
        .unwrap_or_else(|| default_schedules(test_set.image_shape()[2]));
    let report = robustness_sweep(
        &[(STANDARD, &standard), (DATA_AUG, &data_aug), (EACONV, &eaconv)],
        test_set,
        &schedules,
        config.sweep_seed,
    )?;
    let summary = summarize(&report, STANDARD)?;
    Ok(CompareOutcome {
        report,
        summary,
        histories: vec![
            (STANDARD.into(), h_std),
            (DATA_AUG.into(), h_aug),
            (EACONV.into(), h_ea),
        ],
        transfer_gap,
        models: vec![
            (STANDARD.into(), standard),
            (DATA_AUG.into(), data_aug),
            (EACONV.into(), eaconv),
        ],
    })
}
