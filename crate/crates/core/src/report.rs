//! Machine-readable run artifacts: estimate rows, diagnostic rows, and the
//! per-criterion summary.

use serde::{Deserialize, Serialize};

/// One estimate row. Field order is the CSV column order:
/// `scheme, kind, phi, chi, n, N, estimate, stderr, reference, z_score`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub scheme: String,
    pub kind: String,
    pub phi: String,
    pub chi: String,
    pub n: u32,
    #[serde(rename = "N")]
    pub samples: u64,
    pub estimate: f64,
    pub stderr: f64,
    pub reference: Option<f64>,
    pub z_score: Option<f64>,
}

impl EstimateRecord {
    pub fn from_estimate(
        scheme: &str,
        est: &crate::estimation::BiasEstimate,
        reference: Option<f64>,
    ) -> Self {
        let z_score = reference.map(|r| {
            if est.stderr > 0.0 {
                (est.value - r) / est.stderr
            } else {
                0.0
            }
        });
        EstimateRecord {
            scheme: scheme.to_string(),
            kind: est.kind.label().to_string(),
            phi: est.phi.clone(),
            chi: est.chi.clone(),
            n: est.level,
            samples: est.samples,
            estimate: est.value,
            stderr: est.stderr,
            reference,
            z_score,
        }
    }
}

/// One diagnostic row: `test_name, statistic, threshold, pass`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub test_name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// A pass/fail criterion: passes when `statistic <= threshold`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CriterionOutcome {
    pub fn new(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        CriterionOutcome {
            name: name.into(),
            statistic,
            threshold,
            pass: statistic <= threshold,
        }
    }

    pub fn to_diagnostic(&self) -> DiagnosticRecord {
        DiagnosticRecord {
            test_name: self.name.clone(),
            statistic: self.statistic,
            threshold: self.threshold,
            pass: self.pass,
        }
    }
}

/// Everything one experiment run produces.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub records: Vec<EstimateRecord>,
    pub diagnostics: Vec<DiagnosticRecord>,
    pub criteria: Vec<CriterionOutcome>,
    pub wall_time_secs: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    experiment: &'a str,
    seed: u64,
    criteria: &'a [CriterionOutcome],
    pass: bool,
    wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.pass)
    }

    /// The JSON summary document.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&Summary {
            experiment: &self.experiment,
            seed: self.seed,
            criteria: &self.criteria,
            pass: self.passed(),
            wall_time_secs: self.wall_time_secs,
        })
        .expect("summary serialization")
    }
}
