//! Three-stage OPF regression with reinforcement chains and
//! active-constraint sample pre-classification.
//!
//! Stage 1 maps demands to branch flows, stage 2 maps branch flows to the
//! voltage state, stage 3 maps everything to the control variables and the
//! cost. Each stage is a chain of SELMs: the first model sees the stage
//! input, every later model sees the stage input concatenated with the
//! previous model's prediction, and the last model's output is the stage
//! output. Training is teacher-forced (stages consume true upstream
//! columns); inference feeds predictions forward.
//!
//! Samples are clustered by the voltage-magnitude slice of their
//! active-set signatures (k-medoids under Hamming distance) and each class
//! gets its own stage models; a SELM classifier routes unseen demands.

use crate::acopf::{ActiveSetSignature, ConstraintLayout};
use crate::case_io::CaseData;
use crate::scenario::{group_range, ColumnLabel, Dataset, Quantity};
use crate::selm::{
    classify, selm_predict, train_classifier, train_selm, SelmConfig, SelmError, SelmModel,
};
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("InsufficientData: {0}")]
    InsufficientData(String),
    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),
    #[error("CaseMismatch: {0}")]
    CaseMismatch(String),
    #[error(transparent)]
    Selm(#[from] SelmError),
    #[error("MalformedModel: {0}")]
    MalformedModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintFamily {
    /// Bus voltage upper/lower bits only.
    #[default]
    VoltageMagnitude,
    /// Every inequality bit.
    AllInequalities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Number of sample classes m.
    pub classes: usize,
    /// Reinforcement models appended after the base model of each stage.
    pub reinforcement_layers: usize,
    pub constraint_family: ConstraintFamily,
    /// Base SELM configuration; its `weight_seed` seeds every derived model.
    pub selm: SelmConfig,
    /// Per-stage overrides, index 0..2.
    pub stage_selm: [Option<SelmConfig>; 3],
    /// Override for the classifier head.
    pub classifier_selm: Option<SelmConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            classes: 2,
            reinforcement_layers: 2,
            constraint_family: ConstraintFamily::VoltageMagnitude,
            selm: SelmConfig::default(),
            stage_selm: [None, None, None],
            classifier_selm: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.classes < 1 {
            return Err(PipelineError::DimensionMismatch("classes must be >= 1".into()));
        }
        if self.reinforcement_layers < 1 {
            return Err(PipelineError::DimensionMismatch(
                "reinforcement_layers must be >= 1".into(),
            ));
        }
        self.selm.validate()?;
        for s in self.stage_selm.iter().flatten() {
            s.validate()?;
        }
        if let Some(c) = &self.classifier_selm {
            c.validate()?;
        }
        Ok(())
    }

    fn stage_cfg(&self, stage: usize) -> SelmConfig {
        self.stage_selm[stage].unwrap_or(self.selm)
    }
}

/// splitmix64 over the base seed and a role tag, so every model in a
/// regressor draws independent weights while staying reproducible.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut state = base;
    for &p in parts {
        state = state.wrapping_add(0x9E3779B97F4A7C15).wrapping_add(p);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        state = z ^ (z >> 31);
    }
    state
}

// ---------------------------------------------------------------------------
// Active-set clustering

/// Deterministic k-medoids under Hamming distance. Initial medoids are the
/// `m` most frequent distinct signatures (frequency, then lexicographic
/// bitstring order); if fewer distinct signatures exist, `m` collapses to
/// that count. Sample labels break ties toward the lowest medoid index.
pub fn cluster_by_active_set(
    signatures: &[ActiveSetSignature],
    m: usize,
) -> (Vec<usize>, Vec<ActiveSetSignature>) {
    assert!(!signatures.is_empty(), "cluster_by_active_set needs samples");
    assert!(m >= 1);
    // distinct signatures with counts, deterministic order
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in signatures {
        *counts.entry(s.to_bitstring()).or_insert(0) += 1;
    }
    let mut by_freq: Vec<(&String, &usize)> = counts.iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let m_eff = m.min(by_freq.len());
    let mut medoids: Vec<String> = by_freq[..m_eff].iter().map(|(s, _)| (*s).clone()).collect();

    let distinct: Vec<(String, usize)> = counts.iter().map(|(s, &c)| (s.clone(), c)).collect();
    let ham = |a: &str, b: &str| -> usize {
        a.bytes().zip(b.bytes()).filter(|(x, y)| x != y).count()
    };

    for _round in 0..50 {
        // assign distinct signatures to nearest medoid, ties to lowest index
        let assign: Vec<usize> = distinct
            .iter()
            .map(|(s, _)| {
                let mut best = 0usize;
                let mut best_d = usize::MAX;
                for (k, med) in medoids.iter().enumerate() {
                    let d = ham(s, med);
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                best
            })
            .collect();
        // update: the member minimizing weighted distance to its cluster
        let mut new_medoids = medoids.clone();
        for k in 0..m_eff {
            let members: Vec<usize> = (0..distinct.len()).filter(|&i| assign[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            let mut best: Option<(usize, &String)> = None;
            for &cand in &members {
                let cost: usize = members
                    .iter()
                    .map(|&i| distinct[i].1 * ham(&distinct[cand].0, &distinct[i].0))
                    .sum();
                let better = match best {
                    None => true,
                    Some((c, s)) => cost < c || (cost == c && distinct[cand].0 < *s),
                };
                if better {
                    best = Some((cost, &distinct[cand].0));
                }
            }
            new_medoids[k] = best.expect("nonempty cluster").1.clone();
        }
        if new_medoids == medoids {
            break;
        }
        medoids = new_medoids;
    }

    let labels: Vec<usize> = signatures
        .iter()
        .map(|s| {
            let bs = s.to_bitstring();
            let mut best = 0usize;
            let mut best_d = usize::MAX;
            for (k, med) in medoids.iter().enumerate() {
                let d = ham(&bs, med);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect();
    let medoid_sigs = medoids
        .iter()
        .map(|s| ActiveSetSignature::from_bitstring(s).expect("built from bitstrings"))
        .collect();
    (labels, medoid_sigs)
}

// ---------------------------------------------------------------------------
// Stage chains

/// An ordered reinforcement chain; the last model's output is the stage
/// output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageChain {
    pub models: Vec<SelmModel>,
}

impl StageChain {
    pub fn d_in(&self) -> usize {
        self.models[0].d_in()
    }
    pub fn d_out(&self) -> usize {
        self.models.last().expect("nonempty chain").d_out()
    }
}

/// Train one stage: base model on `input -> target`, then
/// `reinforcement_layers` models on `[input | previous prediction] -> target`.
pub fn train_stage(
    input: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    reinforcement_layers: usize,
    cfg: &SelmConfig,
    seed_parts: &[u64],
) -> Result<StageChain, PipelineError> {
    if input.nrows() == 0 {
        return Err(PipelineError::InsufficientData("empty stage slice".into()));
    }
    let mut models = Vec::with_capacity(1 + reinforcement_layers);
    let mut cfg0 = *cfg;
    cfg0.weight_seed = derive_seed(cfg.weight_seed, &[seed_parts, &[0]].concat());
    let base = train_selm(input, target, &cfg0)?;
    let mut pred = selm_predict(&base, input)?;
    models.push(base);
    for k in 1..=reinforcement_layers {
        let joined = concatenate(Axis(1), &[input.view(), pred.view()]).expect("rows match");
        let mut cfg_k = *cfg;
        cfg_k.weight_seed = derive_seed(cfg.weight_seed, &[seed_parts, &[k as u64]].concat());
        let model = train_selm(&joined.view(), target, &cfg_k)?;
        if k < reinforcement_layers {
            pred = selm_predict(&model, &joined.view())?;
        }
        models.push(model);
    }
    Ok(StageChain { models })
}

/// Replay a chain on new stage inputs.
pub fn chain_predict(chain: &StageChain, input: &ArrayView2<f64>) -> Result<Array2<f64>, PipelineError> {
    let mut pred = selm_predict(&chain.models[0], input)?;
    for model in &chain.models[1..] {
        let joined = concatenate(Axis(1), &[input.view(), pred.view()]).expect("rows match");
        pred = selm_predict(model, &joined.view())?;
    }
    Ok(pred)
}

// ---------------------------------------------------------------------------
// The regressor

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassModels {
    pub stages: Vec<StageChain>,
}

/// Mean absolute value of each target quantity group over the training
/// targets; the evaluation thresholds derive from these.
pub type GroupMeans = BTreeMap<String, f64>;

pub fn group_mean_abs(targets: &ArrayView2<f64>, labels: &[ColumnLabel]) -> GroupMeans {
    let mut out = GroupMeans::new();
    for q in [
        Quantity::Pf,
        Quantity::Qf,
        Quantity::V,
        Quantity::Theta,
        Quantity::Pg,
        Quantity::Qg,
        Quantity::F,
    ] {
        let r = group_range(labels, q);
        if r.is_empty() {
            continue;
        }
        let mut acc = 0.0;
        let mut count = 0usize;
        for row in targets.rows() {
            for c in r.clone() {
                acc += row[c].abs();
                count += 1;
            }
        }
        out.insert(q.tag().to_string(), acc / count.max(1) as f64);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfRegressor {
    pub case_name: String,
    pub case_hash: String,
    pub base_mva: f64,
    pub slack_bus_id: u32,
    pub config: PipelineConfig,
    /// Routing head; absent when the effective class count is 1.
    pub classifier: Option<SelmModel>,
    /// Cluster representatives in the restricted constraint family.
    pub medoids: Vec<ActiveSetSignature>,
    pub per_class: Vec<ClassModels>,
    /// Classes that fell back to the global model pool (too few rows).
    pub fallbacks: Vec<usize>,
    pub input_labels: Vec<ColumnLabel>,
    pub target_labels: Vec<ColumnLabel>,
    pub layout: ConstraintLayout,
    pub group_means: GroupMeans,
    pub warnings: Vec<String>,
}

/// One predicted operating point; no convergence flag, no duals.
#[derive(Debug, Clone, PartialEq)]
pub struct OpfPrediction {
    pub pf: Vec<f64>,
    pub qf: Vec<f64>,
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub pg: Vec<f64>,
    pub qg: Vec<f64>,
    pub objective: f64,
}

fn family_range(layout: &ConstraintLayout, family: ConstraintFamily) -> std::ops::Range<usize> {
    match family {
        ConstraintFamily::VoltageMagnitude => layout.voltage_range(),
        ConstraintFamily::AllInequalities => 0..layout.len(),
    }
}

fn slice_cols(m: &ArrayView2<f64>, cols: &[std::ops::Range<usize>]) -> Array2<f64> {
    let total: usize = cols.iter().map(|r| r.len()).sum();
    let mut out = Array2::zeros((m.nrows(), total));
    let mut at = 0usize;
    for r in cols {
        for c in r.clone() {
            for row in 0..m.nrows() {
                out[[row, at]] = m[[row, c]];
            }
            at += 1;
        }
    }
    out
}

/// Train the full regressor on a labeled dataset.
pub fn train_pipeline(
    train: &Dataset,
    case: &CaseData,
    cfg: &PipelineConfig,
) -> Result<OpfRegressor, PipelineError> {
    cfg.validate()?;
    if train.meta.case_hash != case.content_hash() {
        return Err(PipelineError::CaseMismatch(format!(
            "dataset was generated from case {} ({}), got {}",
            train.meta.case_name, train.meta.case_hash, case.name
        )));
    }
    let n = train.n_rows();
    if n < 10 {
        return Err(PipelineError::InsufficientData(format!(
            "{} training rows; need at least 10",
            n
        )));
    }
    if train.signatures.len() != n {
        return Err(PipelineError::DimensionMismatch(
            "dataset rows carry no active-set signatures".into(),
        ));
    }

    let fam = family_range(&train.layout, cfg.constraint_family);
    let restricted: Vec<ActiveSetSignature> = train
        .signatures
        .iter()
        .map(|s| s.restrict(fam.clone()))
        .collect();
    let (labels, medoids) = cluster_by_active_set(&restricted, cfg.classes);
    let m_eff = medoids.len();
    let mut warnings = Vec::new();
    if m_eff < cfg.classes {
        warnings.push(format!(
            "requested {} classes but only {} distinct signatures; collapsed to {}",
            cfg.classes, m_eff, m_eff
        ));
    }

    let base_seed = cfg.selm.weight_seed;

    // classifier on (PD, QD) -> label
    let classifier = if m_eff > 1 {
        let mut ccfg = cfg.classifier_selm.unwrap_or(cfg.selm);
        ccfg.weight_seed = derive_seed(base_seed, &[0xC1A5]);
        Some(train_classifier(&train.inputs.view(), &labels, &ccfg)?)
    } else {
        None
    };

    // stage column plan
    let inputs = train.inputs.view();
    let targets = train.targets.view();
    let pf = train.target_group(Quantity::Pf);
    let qf = train.target_group(Quantity::Qf);
    let v = train.target_group(Quantity::V);
    let th = train.target_group(Quantity::Theta);
    let pg = train.target_group(Quantity::Pg);
    let qg = train.target_group(Quantity::Qg);
    let f = train.target_group(Quantity::F);

    let stage1_in = inputs.to_owned();
    let stage1_t = slice_cols(&targets, &[pf.clone(), qf.clone()]);
    let stage2_in = stage1_t.clone();
    let stage2_t = slice_cols(&targets, &[v.clone(), th.clone()]);
    let stage3_in = concatenate(
        Axis(1),
        &[inputs.view(), stage1_t.view(), stage2_t.view()],
    )
    .expect("rows match");
    let stage3_t = slice_cols(&targets, &[pg.clone(), qg.clone(), f.clone()]);

    let stage_data: [(&Array2<f64>, &Array2<f64>); 3] = [
        (&stage1_in, &stage1_t),
        (&stage2_in, &stage2_t),
        (&stage3_in, &stage3_t),
    ];

    let train_pool = |rows: Option<&[usize]>, tag: u64| -> Result<ClassModels, PipelineError> {
        let mut stages = Vec::with_capacity(3);
        for (stage, (xin, tout)) in stage_data.iter().enumerate() {
            let (xs, ts) = match rows {
                None => ((*xin).clone(), (*tout).clone()),
                Some(idx) => (take_rows(xin, idx), take_rows(tout, idx)),
            };
            let chain = train_stage(
                &xs.view(),
                &ts.view(),
                cfg.reinforcement_layers,
                &cfg.stage_cfg(stage),
                &[tag, stage as u64],
            )?;
            stages.push(chain);
        }
        Ok(ClassModels { stages })
    };

    let class_floor = 50.max(5 * cfg.selm.hidden_neurons / 100);
    let mut class_rows: Vec<Vec<usize>> = vec![Vec::new(); m_eff];
    for (r, &c) in labels.iter().enumerate() {
        class_rows[c].push(r);
    }
    let needs_global = m_eff == 1 || class_rows.iter().any(|rows| rows.len() < class_floor);
    let global = if needs_global {
        Some(train_pool(None, 1)?)
    } else {
        None
    };

    let mut per_class = Vec::with_capacity(m_eff);
    let mut fallbacks = Vec::new();
    for (c, rows) in class_rows.iter().enumerate() {
        if m_eff == 1 {
            per_class.push(global.clone().expect("global trained"));
        } else if rows.len() < class_floor {
            warnings.push(format!(
                "class {} has {} rows (< {}); using the global model pool",
                c,
                rows.len(),
                class_floor
            ));
            fallbacks.push(c);
            per_class.push(global.clone().expect("global trained"));
        } else {
            per_class.push(train_pool(Some(rows), 2 + c as u64)?);
        }
    }

    let reg = OpfRegressor {
        case_name: case.name.clone(),
        case_hash: train.meta.case_hash.clone(),
        base_mva: case.base_mva,
        slack_bus_id: case.buses[case.slack_index()].id,
        config: cfg.clone(),
        classifier,
        medoids,
        per_class,
        fallbacks,
        input_labels: train.input_labels.clone(),
        target_labels: train.target_labels.clone(),
        layout: train.layout,
        group_means: group_mean_abs(&targets, &train.target_labels),
        warnings,
    };
    reg.validate_dims()?;
    Ok(reg)
}

fn take_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        for c in 0..m.ncols() {
            out[[i, c]] = m[[r, c]];
        }
    }
    out
}

impl OpfRegressor {
    /// Stage input/output widths must chain: stage 1 takes the 2·n_bus
    /// demand vector and emits 2·n_branch flows, stage 2 maps flows to the
    /// 2·n_bus state, stage 3 consumes all of it and emits 2·n_gen + 1.
    pub fn validate_dims(&self) -> Result<(), PipelineError> {
        let n_in = self.input_labels.len();
        let n_flow = group_range(&self.target_labels, Quantity::Pf).len()
            + group_range(&self.target_labels, Quantity::Qf).len();
        let n_state = group_range(&self.target_labels, Quantity::V).len()
            + group_range(&self.target_labels, Quantity::Theta).len();
        let n_ctrl = group_range(&self.target_labels, Quantity::Pg).len()
            + group_range(&self.target_labels, Quantity::Qg).len()
            + group_range(&self.target_labels, Quantity::F).len();
        for (c, class) in self.per_class.iter().enumerate() {
            if class.stages.len() != 3 {
                return Err(PipelineError::DimensionMismatch(format!(
                    "class {} has {} stages",
                    c,
                    class.stages.len()
                )));
            }
            let dims = [
                (self.config.reinforcement_layers + 1, n_in, n_flow),
                (self.config.reinforcement_layers + 1, n_flow, n_state),
                (self.config.reinforcement_layers + 1, n_in + n_flow + n_state, n_ctrl),
            ];
            for (stage, (chain_len, d_in, d_out)) in dims.iter().enumerate() {
                let chain = &class.stages[stage];
                if chain.models.len() != *chain_len
                    || chain.d_in() != *d_in
                    || chain.d_out() != *d_out
                {
                    return Err(PipelineError::DimensionMismatch(format!(
                        "class {} stage {} has shape ({} models, {} -> {}), want ({}, {} -> {})",
                        c,
                        stage + 1,
                        chain.models.len(),
                        chain.d_in(),
                        chain.d_out(),
                        chain_len,
                        d_in,
                        d_out
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.per_class.len()
    }

    /// Class labels the router assigns to a batch of demand rows.
    pub fn route(&self, inputs: &ArrayView2<f64>) -> Result<Vec<usize>, PipelineError> {
        match &self.classifier {
            None => Ok(vec![0; inputs.nrows()]),
            Some(clf) => Ok(classify(clf, inputs)?),
        }
    }

    /// Batch inference: one row of predicted targets (in `target_labels`
    /// order) per input row. Rows are routed to their class models and
    /// processed through per-row kernels, so batch results equal
    /// row-at-a-time results exactly.
    pub fn infer_batch(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>, PipelineError> {
        let labels = self.route(inputs)?;
        self.infer_batch_with_labels(inputs, &labels)
    }

    /// Inference with externally forced class labels; the routing-error
    /// diagnostic path.
    pub fn infer_batch_with_labels(
        &self,
        inputs: &ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<Array2<f64>, PipelineError> {
        if inputs.ncols() != self.input_labels.len() {
            return Err(PipelineError::DimensionMismatch(format!(
                "expected {} input columns, got {}",
                self.input_labels.len(),
                inputs.ncols()
            )));
        }
        if labels.len() != inputs.nrows() {
            return Err(PipelineError::DimensionMismatch(
                "one class label per row required".into(),
            ));
        }
        if labels.iter().any(|&c| c >= self.per_class.len()) {
            return Err(PipelineError::DimensionMismatch("class label out of range".into()));
        }
        let n_t = self.target_labels.len();
        let mut out = Array2::zeros((inputs.nrows(), n_t));
        let pf = group_range(&self.target_labels, Quantity::Pf);
        let qf = group_range(&self.target_labels, Quantity::Qf);
        let v = group_range(&self.target_labels, Quantity::V);
        let th = group_range(&self.target_labels, Quantity::Theta);
        let rest_start = group_range(&self.target_labels, Quantity::Pg).start;
        let slack_theta_col = self
            .target_labels
            .iter()
            .position(|l| l.quantity == Quantity::Theta && l.element == self.slack_bus_id)
            .expect("slack theta column exists");

        // group rows by class, keep original order within each group
        for class in 0..self.per_class.len() {
            let rows: Vec<usize> = (0..inputs.nrows()).filter(|&r| labels[r] == class).collect();
            if rows.is_empty() {
                continue;
            }
            let x = take_rows(&inputs.to_owned(), &rows);
            let stages = &self.per_class[class].stages;
            let flows = chain_predict(&stages[0], &x.view())?;
            let state = chain_predict(&stages[1], &flows.view())?;
            let s3_in = concatenate(Axis(1), &[x.view(), flows.view(), state.view()])
                .expect("rows match");
            let ctrl = chain_predict(&stages[2], &s3_in.view())?;
            for (i, &r) in rows.iter().enumerate() {
                for (k, c) in pf.clone().chain(qf.clone()).enumerate() {
                    out[[r, c]] = flows[[i, k]];
                }
                for (k, c) in v.clone().chain(th.clone()).enumerate() {
                    out[[r, c]] = state[[i, k]];
                }
                for k in 0..ctrl.ncols() {
                    out[[r, rest_start + k]] = ctrl[[i, k]];
                }
                out[[r, slack_theta_col]] = 0.0;
            }
        }
        Ok(out)
    }

    /// Single-point inference.
    pub fn infer_opf(&self, pd: &[f64], qd: &[f64]) -> Result<OpfPrediction, PipelineError> {
        let n = self.input_labels.len() / 2;
        if pd.len() != n || qd.len() != n {
            return Err(PipelineError::DimensionMismatch(format!(
                "expected {} buses of demand",
                n
            )));
        }
        let mut x = Array2::zeros((1, 2 * n));
        for i in 0..n {
            x[[0, i]] = pd[i];
            x[[0, n + i]] = qd[i];
        }
        let y = self.infer_batch(&x.view())?;
        let take = |q: Quantity| -> Vec<f64> {
            group_range(&self.target_labels, q)
                .map(|c| y[[0, c]])
                .collect()
        };
        let f_col = group_range(&self.target_labels, Quantity::F).start;
        Ok(OpfPrediction {
            pf: take(Quantity::Pf),
            qf: take(Quantity::Qf),
            v: take(Quantity::V),
            theta: take(Quantity::Theta),
            pg: take(Quantity::Pg),
            qg: take(Quantity::Qg),
            objective: y[[0, f_col]],
        })
    }
}

// ---------------------------------------------------------------------------
// Direct baseline and the serialized archive

/// One SELM mapping demands to every target column: the direct-learning
/// baseline the staged pipeline is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectOpfModel {
    pub case_name: String,
    pub case_hash: String,
    pub model: SelmModel,
    pub input_labels: Vec<ColumnLabel>,
    pub target_labels: Vec<ColumnLabel>,
    pub group_means: GroupMeans,
}

pub fn train_direct(
    train: &Dataset,
    case: &CaseData,
    cfg: &SelmConfig,
) -> Result<DirectOpfModel, PipelineError> {
    if train.meta.case_hash != case.content_hash() {
        return Err(PipelineError::CaseMismatch(
            "dataset case hash does not match the case".into(),
        ));
    }
    let mut c = *cfg;
    c.weight_seed = derive_seed(cfg.weight_seed, &[0xD17EC7]);
    let model = train_selm(&train.inputs.view(), &train.targets.view(), &c)?;
    Ok(DirectOpfModel {
        case_name: case.name.clone(),
        case_hash: train.meta.case_hash.clone(),
        model,
        input_labels: train.input_labels.clone(),
        target_labels: train.target_labels.clone(),
        group_means: group_mean_abs(&train.targets.view(), &train.target_labels),
    })
}

/// Any trained OPF surrogate, as stored in a model archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainedOpf {
    Direct(DirectOpfModel),
    Staged(OpfRegressor),
}

const ARCHIVE_MAGIC: &[u8; 8] = b"OPFMDL01";

impl TrainedOpf {
    pub fn predict(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>, PipelineError> {
        match self {
            TrainedOpf::Direct(d) => Ok(selm_predict(&d.model, inputs)?),
            TrainedOpf::Staged(r) => r.infer_batch(inputs),
        }
    }

    pub fn target_labels(&self) -> &[ColumnLabel] {
        match self {
            TrainedOpf::Direct(d) => &d.target_labels,
            TrainedOpf::Staged(r) => &r.target_labels,
        }
    }

    pub fn input_labels(&self) -> &[ColumnLabel] {
        match self {
            TrainedOpf::Direct(d) => &d.input_labels,
            TrainedOpf::Staged(r) => &r.input_labels,
        }
    }

    pub fn group_means(&self) -> &GroupMeans {
        match self {
            TrainedOpf::Direct(d) => &d.group_means,
            TrainedOpf::Staged(r) => &r.group_means,
        }
    }

    pub fn case_hash(&self) -> &str {
        match self {
            TrainedOpf::Direct(d) => &d.case_hash,
            TrainedOpf::Staged(r) => &r.case_hash,
        }
    }

    /// Versioned single-file archive embedding every model matrix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = ARCHIVE_MAGIC.to_vec();
        out.extend(bincode::serialize(self).expect("archive serialization cannot fail"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<TrainedOpf, PipelineError> {
        if bytes.len() < 8 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(PipelineError::MalformedModel("bad archive magic".into()));
        }
        bincode::deserialize(&bytes[8..]).map_err(|e| PipelineError::MalformedModel(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| PipelineError::MalformedModel(format!("write {}: {}", path.display(), e)))
    }

    pub fn load(path: &std::path::Path) -> Result<TrainedOpf, PipelineError> {
        let bytes = std::fs::read(path)
            .map_err(|e| PipelineError::MalformedModel(format!("read {}: {}", path.display(), e)))?;
        TrainedOpf::from_bytes(&bytes)
    }
}
