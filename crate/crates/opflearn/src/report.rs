//! Evaluation metrics and the ablation comparison driver.
//!
//! The accuracy index of a variable group is the percentage of elementwise
//! errors strictly below the group threshold: voltage magnitudes use an
//! absolute 0.001 p.u. threshold, angles 0.5 degrees, flow and generation
//! groups one percent of their mean absolute training value, and the
//! objective one tenth of a percent of its training mean. Angle errors are
//! compared in degrees.

use crate::acopf::OpfConfig;
use crate::case_io::CaseData;
use crate::pipeline::{
    train_direct, train_pipeline, ConstraintFamily, GroupMeans, PipelineConfig, PipelineError,
    TrainedOpf,
};
use crate::scenario::{build_dataset, ColumnLabel, Dataset, Quantity, ScenarioError, UncertaintyConfig};
use crate::selm::SelmConfig;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    /// Voltage magnitude threshold, p.u.
    pub v_thr: f64,
    /// Angle threshold, degrees.
    pub theta_thr_deg: f64,
    /// Relative threshold for PF, QF, PG, QG as a fraction of the group's
    /// mean absolute training value.
    pub flow_gen_fraction: f64,
    /// Relative threshold for the objective value.
    pub objective_fraction: f64,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec {
            v_thr: 0.001,
            theta_thr_deg: 0.5,
            flow_gen_fraction: 0.01,
            objective_fraction: 0.001,
        }
    }
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<(), ReportError> {
        for (v, what) in [
            (self.v_thr, "v_thr"),
            (self.theta_thr_deg, "theta_thr_deg"),
            (self.flow_gen_fraction, "flow_gen_fraction"),
            (self.objective_fraction, "objective_fraction"),
        ] {
            if !(v > 0.0) {
                return Err(ReportError::DimensionMismatch(format!(
                    "{} must be positive",
                    what
                )));
            }
        }
        Ok(())
    }
}

/// Absolute per-group thresholds derived from training-set means. Angle
/// thresholds are in degrees; everything else in the unit of its column.
pub fn absolute_thresholds(
    spec: &ThresholdSpec,
    group_means: &GroupMeans,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (tag, mean) in group_means {
        let thr = match tag.as_str() {
            "V" => spec.v_thr,
            "THETA" => spec.theta_thr_deg,
            "F" => spec.objective_fraction * mean,
            _ => spec.flow_gen_fraction * mean,
        };
        out.insert(tag.clone(), thr);
    }
    out
}

/// Per-group accuracy plus the counting evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub p: f64,
    pub hits: usize,
    pub total: usize,
    pub threshold: f64,
}

/// Eq.-style accuracy index: share of elementwise errors strictly below
/// the group threshold, as a percentage. Angles are compared in degrees.
pub fn accuracy_index(
    pred: &ArrayView2<f64>,
    truth: &ArrayView2<f64>,
    labels: &[ColumnLabel],
    thresholds: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, GroupAccuracy>, ReportError> {
    if pred.dim() != truth.dim() {
        return Err(ReportError::DimensionMismatch(format!(
            "pred is {:?}, truth is {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    if pred.ncols() != labels.len() {
        return Err(ReportError::DimensionMismatch(format!(
            "{} columns vs {} labels",
            pred.ncols(),
            labels.len()
        )));
    }
    let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (c, label) in labels.iter().enumerate() {
        let tag = label.quantity.tag().to_string();
        let thr = *thresholds.get(&tag).ok_or_else(|| {
            ReportError::DimensionMismatch(format!("no threshold for group {}", tag))
        })?;
        let entry = hits.entry(tag).or_insert((0, 0));
        for r in 0..pred.nrows() {
            let mut err = (pred[[r, c]] - truth[[r, c]]).abs();
            if label.quantity == Quantity::Theta {
                err = err.to_degrees();
            }
            if err < thr {
                entry.0 += 1;
            }
            entry.1 += 1;
        }
    }
    Ok(hits
        .into_iter()
        .map(|(tag, (h, n))| {
            let threshold = thresholds[&tag];
            (
                tag,
                GroupAccuracy {
                    p: 100.0 * h as f64 / n.max(1) as f64,
                    hits: h,
                    total: n,
                    threshold,
                },
            )
        })
        .collect())
}

pub fn mean_p(groups: &BTreeMap<String, GroupAccuracy>) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    groups.values().map(|g| g.p).sum::<f64>() / groups.len() as f64
}

// ---------------------------------------------------------------------------
// Ablation methods

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Direct single SELM from demands to every target.
    M3,
    /// Three-stage framework, one class, single reinforcement layer.
    M4,
    /// Three-stage framework with the full reinforcement depth, one class.
    M5,
    /// Full pipeline: reinforcement plus active-set pre-classification.
    M6,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::M3 => "M3",
            Method::M4 => "M4",
            Method::M5 => "M5",
            Method::M6 => "M6",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s.trim() {
            "M3" | "m3" => Some(Method::M3),
            "M4" | "m4" => Some(Method::M4),
            "M5" | "m5" => Some(Method::M5),
            "M6" | "m6" => Some(Method::M6),
            _ => None,
        }
    }

    /// Staged-pipeline configuration of this method; None for the direct
    /// baseline.
    pub fn pipeline_config(&self, selm: SelmConfig) -> Option<PipelineConfig> {
        let (classes, reinforcement_layers) = match self {
            Method::M3 => return None,
            Method::M4 => (1, 1),
            Method::M5 => (1, 2),
            Method::M6 => (2, 2),
        };
        Some(PipelineConfig {
            classes,
            reinforcement_layers,
            constraint_family: ConstraintFamily::VoltageMagnitude,
            selm,
            stage_selm: [None, None, None],
            classifier_selm: None,
        })
    }
}

pub fn train_method(
    method: Method,
    train: &Dataset,
    case: &CaseData,
    selm: SelmConfig,
) -> Result<TrainedOpf, ReportError> {
    Ok(match method.pipeline_config(selm) {
        None => TrainedOpf::Direct(train_direct(train, case, &selm)?),
        Some(cfg) => TrainedOpf::Staged(train_pipeline(train, case, &cfg)?),
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub seed: u64,
    pub groups: BTreeMap<String, GroupAccuracy>,
    pub mean_p: f64,
    /// Derived absolute thresholds used for this row.
    pub thresholds: BTreeMap<String, f64>,
    /// Training-set mean absolute values the thresholds derive from.
    pub group_means: GroupMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub seed: u64,
    pub train_seconds: f64,
    pub test_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResults {
    pub case_name: String,
    pub case_hash: String,
    pub train_rows: usize,
    pub test_rows: usize,
    pub threshold_spec: ThresholdSpec,
    pub uncertainty: UncertaintyConfig,
    pub selm: SelmConfig,
    pub rows: Vec<MethodResult>,
}

/// Comparison report. Everything under `results` is a deterministic
/// function of the inputs and seeds; wall-clock measurements live under
/// `timing` and the timestamp under `meta`, so reproducibility checks
/// compare `results` alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub results: CompareResults,
    pub timing: Vec<MethodTiming>,
    pub meta: ReportMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub generated_at_unix: u64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// CSV table of the accuracy rows: one line per (seed, method, group).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,method,group,p,hits,total,threshold\n");
        for row in &self.results.rows {
            for (tag, g) in &row.groups {
                out.push_str(&format!(
                    "{},{},{},{:.6},{},{},{:.12e}\n",
                    row.seed, row.method, tag, g.p, g.hits, g.total, g.threshold
                ));
            }
        }
        out
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

const TEST_SEED_SALT: u64 = 0x7E57;
const WEIGHT_SEED_SALT: u64 = 0x5EED;

/// Derive the test-set sampling seed from an experiment seed.
pub fn test_seed(experiment_seed: u64) -> u64 {
    crate::pipeline::derive_seed(experiment_seed, &[TEST_SEED_SALT])
}

/// Derive the shared model weight seed from an experiment seed.
pub fn weight_seed(experiment_seed: u64) -> u64 {
    crate::pipeline::derive_seed(experiment_seed, &[WEIGHT_SEED_SALT])
}

/// Evaluate one trained model against a dataset, returning the accuracy
/// rows and the prediction wall time.
pub fn evaluate_model(
    model: &TrainedOpf,
    data: &Dataset,
    spec: &ThresholdSpec,
    seed: u64,
    method_name: &str,
) -> Result<(MethodResult, f64), ReportError> {
    spec.validate()?;
    if model.case_hash() != data.meta.case_hash {
        return Err(ReportError::DimensionMismatch(format!(
            "model was trained on case {} but the dataset is from {}",
            model.case_hash(),
            data.meta.case_hash
        )));
    }
    let t0 = std::time::Instant::now();
    let pred = model.predict(&data.inputs.view())?;
    let test_seconds = t0.elapsed().as_secs_f64();
    let thresholds = absolute_thresholds(spec, model.group_means());
    let groups = accuracy_index(&pred.view(), &data.targets.view(), model.target_labels(), &thresholds)?;
    let mp = mean_p(&groups);
    Ok((
        MethodResult {
            method: method_name.to_string(),
            seed,
            mean_p: mp,
            thresholds,
            group_means: model.group_means().clone(),
            groups,
        },
        test_seconds,
    ))
}

/// Paired ablation comparison: per experiment seed one train/test dataset
/// pair is generated and shared across every method.
#[allow(clippy::too_many_arguments)]
pub fn compare_methods(
    case: &CaseData,
    ucfg: &UncertaintyConfig,
    train_n: usize,
    test_n: usize,
    methods: &[Method],
    seeds: &[u64],
    selm_base: SelmConfig,
    opf_cfg: &OpfConfig,
    spec: &ThresholdSpec,
) -> Result<EvalReport, ReportError> {
    spec.validate()?;
    if train_n == 0 || test_n == 0 {
        return Err(ReportError::DimensionMismatch(
            "train_n and test_n must be >= 1".into(),
        ));
    }
    if methods.is_empty() {
        return Err(ReportError::DimensionMismatch("no methods requested".into()));
    }
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for &seed in seeds {
        let mut train_cfg = ucfg.clone();
        train_cfg.seed = seed;
        let mut test_cfg = ucfg.clone();
        test_cfg.seed = test_seed(seed);
        let train = build_dataset(case, &train_cfg, train_n, opf_cfg)?;
        let test = build_dataset(case, &test_cfg, test_n, opf_cfg)?;
        let selm = selm_base.with_seed(weight_seed(seed));
        for &method in methods {
            let t0 = std::time::Instant::now();
            let model = train_method(method, &train, case, selm)?;
            let train_seconds = t0.elapsed().as_secs_f64();
            let (row, test_seconds) = evaluate_model(&model, &test, spec, seed, method.name())?;
            rows.push(row);
            timing.push(MethodTiming {
                method: method.name().to_string(),
                seed,
                train_seconds,
                test_seconds,
            });
        }
    }
    Ok(EvalReport {
        schema_version: 1,
        results: CompareResults {
            case_name: case.name.clone(),
            case_hash: case.content_hash(),
            train_rows: train_n,
            test_rows: test_n,
            threshold_spec: *spec,
            uncertainty: ucfg.clone(),
            selm: selm_base,
            rows,
        },
        timing,
        meta: ReportMeta {
            generated_at_unix: now_unix(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn labels_small() -> Vec<ColumnLabel> {
        vec![
            ColumnLabel { quantity: Quantity::V, element: 1 },
            ColumnLabel { quantity: Quantity::V, element: 2 },
            ColumnLabel { quantity: Quantity::Theta, element: 1 },
            ColumnLabel { quantity: Quantity::Pf, element: 1 },
        ]
    }

    fn thresholds_small() -> BTreeMap<String, f64> {
        let mut m = GroupMeans::new();
        m.insert("V".into(), 1.0);
        m.insert("THETA".into(), 0.1);
        m.insert("PF".into(), 2.0);
        absolute_thresholds(&ThresholdSpec::default(), &m)
    }

    #[test]
    fn exact_predictions_score_100() {
        let labels = labels_small();
        let truth = Array2::from_shape_fn((6, 4), |(r, c)| (r * 4 + c) as f64 * 0.01);
        let acc = accuracy_index(&truth.view(), &truth.view(), &labels, &thresholds_small()).unwrap();
        for g in acc.values() {
            assert_eq!(g.p, 100.0);
        }
    }

    #[test]
    fn uniform_double_threshold_errors_score_0() {
        let labels = labels_small();
        let thr = thresholds_small();
        let truth = Array2::zeros((5, 4));
        let mut pred = Array2::zeros((5, 4));
        for (c, l) in labels.iter().enumerate() {
            let t = thr[l.quantity.tag()];
            let err = match l.quantity {
                Quantity::Theta => (2.0 * t).to_radians(),
                _ => 2.0 * t,
            };
            for r in 0..5 {
                pred[[r, c]] = err;
            }
        }
        let acc = accuracy_index(&pred.view(), &truth.view(), &labels, &thr).unwrap();
        for g in acc.values() {
            assert_eq!(g.p, 0.0);
        }
    }

    #[test]
    fn counting_matches_brute_force_oracle() {
        // 4-element group with errors (0, 0, 2thr, 2thr) -> p = 50
        let labels = vec![
            ColumnLabel { quantity: Quantity::Pg, element: 1 },
            ColumnLabel { quantity: Quantity::Pg, element: 2 },
        ];
        let mut means = GroupMeans::new();
        means.insert("PG".into(), 10.0); // threshold 0.1
        let thr = absolute_thresholds(&ThresholdSpec::default(), &means);
        let truth = Array2::zeros((2, 2));
        let mut pred = Array2::zeros((2, 2));
        pred[[1, 0]] = 0.2;
        pred[[1, 1]] = 0.2;
        let acc = accuracy_index(&pred.view(), &truth.view(), &labels, &thr).unwrap();
        let g = &acc["PG"];
        assert_eq!(g.hits, 2);
        assert_eq!(g.total, 4);
        assert_eq!(g.p, 50.0);
    }

    #[test]
    fn strictly_below_threshold_counts_at_boundary() {
        let labels = vec![ColumnLabel { quantity: Quantity::V, element: 1 }];
        let mut thr = BTreeMap::new();
        thr.insert("V".to_string(), 0.001);
        let truth = Array2::zeros((2, 1));
        let mut pred = Array2::zeros((2, 1));
        pred[[0, 0]] = 0.001; // exactly at threshold: not a hit
        pred[[1, 0]] = 0.000999;
        let acc = accuracy_index(&pred.view(), &truth.view(), &labels, &thr).unwrap();
        assert_eq!(acc["V"].hits, 1);
    }

    #[test]
    fn theta_thresholds_compare_in_degrees() {
        let labels = vec![ColumnLabel { quantity: Quantity::Theta, element: 1 }];
        let mut thr = BTreeMap::new();
        thr.insert("THETA".to_string(), 0.5);
        let truth = Array2::zeros((2, 1));
        let mut pred = Array2::zeros((2, 1));
        pred[[0, 0]] = 0.4f64.to_radians();
        pred[[1, 0]] = 0.6f64.to_radians();
        let acc = accuracy_index(&pred.view(), &truth.view(), &labels, &thr).unwrap();
        assert_eq!(acc["THETA"].hits, 1);
        assert_eq!(acc["THETA"].total, 2);
    }

    #[test]
    fn threshold_derivation_is_auditable() {
        let mut means = GroupMeans::new();
        means.insert("PF".into(), 3.7);
        means.insert("QF".into(), 1.1);
        means.insert("PG".into(), 2.0);
        means.insert("QG".into(), 0.5);
        means.insert("V".into(), 1.0);
        means.insert("THETA".into(), 2.0);
        means.insert("F".into(), 4321.0);
        let spec = ThresholdSpec::default();
        let thr = absolute_thresholds(&spec, &means);
        assert!((thr["PF"] - 0.037).abs() <= 1e-12);
        assert!((thr["QF"] - 0.011).abs() <= 1e-12);
        assert!((thr["F"] - 4.321).abs() <= 1e-12);
        assert_eq!(thr["V"], 0.001);
        assert_eq!(thr["THETA"], 0.5);
    }

    #[test]
    fn method_configs_match_the_ablation_ladder() {
        let selm = SelmConfig::default();
        assert!(Method::M3.pipeline_config(selm).is_none());
        let m4 = Method::M4.pipeline_config(selm).unwrap();
        assert_eq!((m4.classes, m4.reinforcement_layers), (1, 1));
        let m5 = Method::M5.pipeline_config(selm).unwrap();
        assert_eq!((m5.classes, m5.reinforcement_layers), (1, 2));
        let m6 = Method::M6.pipeline_config(selm).unwrap();
        assert_eq!((m6.classes, m6.reinforcement_layers), (2, 2));
        assert_eq!(Method::parse("m5"), Some(Method::M5));
        assert_eq!(Method::parse("M7"), None);
    }
}
