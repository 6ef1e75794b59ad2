//! Metrics and the cross-validated protocol.
//!
//! Per fold: optional ANOVA F preselection, standardization and
//! construction on the training fold; training on the fit rows with early
//! stopping on the fold's validation rows; scoring on the test fold. The
//! matched dense baseline, when requested, is trained on the same rows.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::builder::{build_birdnet, BuildConfig, ConstructionReport};
use crate::dataio::{anova_f_select, stratified_holdout, stratified_kfold, LabeledDataset, Standardizer, VAL_FRACTION};
use crate::error::{Error, Result};
use crate::explain::{extract_rules, RuleRecord, DEFAULT_MIN_SUPPORT};
use crate::matrix::Matrix;
use crate::mining::Execution;
use crate::network::{active_param_count, matched_param_count, ParamAccounting};
use crate::persist::{ModelFile, Preprocessing};
use crate::trainer::{train, TrainConfig, TrainHistory};

/// Rank-based AUROC with midranks for ties. `None` when either class is
/// empty.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&r| positive[r]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AurocReport {
    /// Mean over evaluable classes.
    pub macro_auroc: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes left out because they have no positive (or no negative) row.
    pub skipped: Vec<usize>,
}

/// One-vs-rest AUROC of every score column, macro-averaged over the classes
/// that have both positive and negative rows.
pub fn auroc_macro_ovr(scores: &Matrix, labels: &[usize]) -> Result<AurocReport> {
    if labels.len() != scores.rows() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: scores.rows(),
            found: labels.len(),
        });
    }
    let per_class: Vec<Option<f64>> = (0..scores.cols())
        .map(|c| {
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            auroc_binary(&scores.column(c), &pos)
        })
        .collect();
    let skipped: Vec<usize> = (0..per_class.len()).filter(|&c| per_class[c].is_none()).collect();
    let vals: Vec<f64> = per_class.iter().flatten().copied().collect();
    if vals.is_empty() {
        return Err(Error::invalid("no class has both positive and negative rows"));
    }
    Ok(AurocReport {
        macro_auroc: vals.iter().sum::<f64>() / vals.len() as f64,
        per_class,
        skipped,
    })
}

/// Fraction of rows whose argmax score (ties to the lowest class) matches.
pub fn accuracy(scores: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = (0..scores.rows()).filter(|&r| scores.argmax_row(r) == labels[r]).count();
    hits as f64 / labels.len() as f64
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Keep the `m` best features by ANOVA F when the data has more than `m`.
    pub preselect: Option<usize>,
    pub build: BuildConfig,
    pub train: TrainConfig,
    pub folds: usize,
    /// Seeds the fold assignment and the early-stopping split.
    pub seed: u64,
    /// Also train the matched dense baseline.
    pub matched_mlp: bool,
    /// Keep every fold's fitted model in the report.
    pub keep_models: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            preselect: Some(2000),
            build: BuildConfig::default(),
            train: TrainConfig::default(),
            folds: 5,
            seed: 42,
            matched_mlp: false,
            keep_models: false,
        }
    }
}

/// A model fitted on one training set.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: ModelFile,
    pub history: TrainHistory,
    pub construction: ConstructionReport,
    /// The dense baseline trained on the same rows, if requested.
    pub matched: Option<(ModelFile, TrainHistory)>,
}

/// Preselects, standardizes and builds on `train` rows, then trains on
/// `train \ val` with early stopping on `val`.
pub fn fit_pipeline(
    data: &LabeledDataset,
    train_rows: &[usize],
    val_rows: &[usize],
    cfg: &PipelineConfig,
    exec: Execution,
) -> Result<FittedModel> {
    let is_val: std::collections::HashSet<usize> = val_rows.iter().copied().collect();
    let fit_rows: Vec<usize> = train_rows.iter().copied().filter(|i| !is_val.contains(i)).collect();
    if fit_rows.len() < 2 || val_rows.is_empty() {
        return Err(Error::invalid(format!(
            "training split too small: {} fit rows, {} validation rows",
            fit_rows.len(),
            val_rows.len()
        )));
    }
    let train_set = data.subset(train_rows);
    let selected: Vec<usize> = match cfg.preselect {
        Some(m) if data.n_features() > m => anova_f_select(&train_set.values, &train_set.labels, m)?,
        _ => (0..data.n_features()).collect(),
    };
    let train_sel = train_set.select_features(&selected);
    let standardizer = Standardizer::fit(&train_sel.values)?;
    let preprocessing = Preprocessing {
        source_features: data.feature_names.clone(),
        selected,
        standardizer,
    };
    let x_train = preprocessing.apply(&train_set.values)?;
    let construction = build_birdnet(
        &x_train,
        &train_sel.feature_names,
        &data.class_names,
        &cfg.build,
        exec,
    )?;

    let x_fit = preprocessing.apply(&data.values.select_rows(&fit_rows))?;
    let y_fit: Vec<usize> = fit_rows.iter().map(|&i| data.labels[i]).collect();
    let x_val = preprocessing.apply(&data.values.select_rows(val_rows))?;
    let y_val: Vec<usize> = val_rows.iter().map(|&i| data.labels[i]).collect();

    let mut net = construction.network;
    let history = train(&mut net, &x_fit, &y_fit, &x_val, &y_val, &cfg.train)?;
    let mut model = ModelFile::new(preprocessing.clone(), cfg.build.clone(), net);
    model.train = Some(cfg.train.clone());
    model.construction = Some(construction.report.clone());

    let matched = if cfg.matched_mlp {
        let mut dense = model.network.to_matched_mlp(cfg.build.seed);
        let h = train(&mut dense, &x_fit, &y_fit, &x_val, &y_val, &cfg.train)?;
        let mut m = ModelFile::new(preprocessing, cfg.build.clone(), dense);
        m.train = Some(cfg.train.clone());
        m.matched_mlp = true;
        Some((m, h))
    } else {
        None
    };
    Ok(FittedModel {
        model,
        history,
        construction: construction.report,
        matched,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub auroc: f64,
    pub accuracy: f64,
    pub accounting: ParamAccounting,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub n_fit: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub skipped_classes: Vec<usize>,
    pub depth: usize,
    pub layer_widths: Vec<usize>,
    pub birdnet: ModelScore,
    /// Shape-derived accounting of the dense counterpart.
    pub matched_accounting: ParamAccounting,
    pub matched: Option<ModelScore>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Per fold, when `keep_models` is set: the network and, if trained,
    /// the dense baseline.
    pub models: Vec<(ModelFile, Option<ModelFile>)>,
}

fn score(model: &ModelFile, history: &TrainHistory, x_raw: &Matrix, y: &[usize]) -> Result<(ModelScore, Vec<usize>)> {
    let logits = model.predict_raw(x_raw)?;
    let auroc = auroc_macro_ovr(&logits, y)?;
    Ok((
        ModelScore {
            auroc: auroc.macro_auroc,
            accuracy: accuracy(&logits, y),
            accounting: active_param_count(&model.network),
            best_epoch: history.best_epoch,
            epochs_run: history.epochs.len(),
        },
        auroc.skipped,
    ))
}

/// Stratified k-fold evaluation. Folds run in parallel under
/// `Execution::Parallel`; results do not depend on the execution mode.
pub fn cross_validate(data: &LabeledDataset, cfg: &PipelineConfig, exec: Execution) -> Result<CvReport> {
    let plan = stratified_kfold(&data.labels, cfg.folds, cfg.seed)?;
    let run = |f: usize| -> Result<(FoldResult, Option<(ModelFile, Option<ModelFile>)>)> {
        let split = plan.split(f);
        let fitted = fit_pipeline(data, &split.train, &split.val, cfg, Execution::Sequential)?;
        let x_test = data.values.select_rows(&split.test);
        let y_test: Vec<usize> = split.test.iter().map(|&i| data.labels[i]).collect();
        let (birdnet, skipped) = score(&fitted.model, &fitted.history, &x_test, &y_test)?;
        let matched = match &fitted.matched {
            Some((m, h)) => Some(score(m, h, &x_test, &y_test)?.0),
            None => None,
        };
        let net = &fitted.model.network;
        let result = FoldResult {
            fold: f,
            n_fit: split.fit.len(),
            n_val: split.val.len(),
            n_test: split.test.len(),
            skipped_classes: skipped,
            depth: net.depth(),
            layer_widths: net.layers.iter().map(|l| l.width()).collect(),
            birdnet,
            matched_accounting: matched_param_count(net),
            matched,
        };
        let kept = cfg
            .keep_models
            .then(|| (fitted.model, fitted.matched.map(|(m, _)| m)));
        Ok((result, kept))
    };
    let outcomes: Vec<_> = match exec {
        Execution::Sequential => (0..cfg.folds).map(run).collect::<Result<_>>()?,
        Execution::Parallel => (0..cfg.folds).into_par_iter().map(run).collect::<Result<_>>()?,
    };
    let mut folds = Vec::new();
    let mut models = Vec::new();
    for (r, m) in outcomes {
        folds.push(r);
        models.extend(m);
    }
    Ok(CvReport { folds, models })
}

impl CvReport {
    pub fn birdnet_auroc(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.birdnet.auroc).collect::<Vec<_>>())
    }

    pub fn birdnet_accuracy(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.birdnet.accuracy).collect::<Vec<_>>())
    }

    fn matched_scores(&self) -> Option<Vec<ModelScore>> {
        self.folds.iter().map(|f| f.matched).collect()
    }

    /// One row per fold and model, then mean and std rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "fold,model,auroc,accuracy,depth,width,bir_active,total_active,best_epoch,epochs_run,skipped_classes\n",
        );
        let row = |out: &mut String, fold: &str, model: &str, s: &ModelScore, depth: usize, skipped: &str| {
            let _ = writeln!(
                out,
                "{fold},{model},{},{},{depth},{},{},{},{},{},{skipped}",
                s.auroc,
                s.accuracy,
                s.accounting.width,
                s.accounting.bir_active,
                s.accounting.total_active,
                s.best_epoch,
                s.epochs_run
            );
        };
        for f in &self.folds {
            let skipped = f.skipped_classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";");
            row(&mut out, &f.fold.to_string(), "birdnet", &f.birdnet, f.depth, &skipped);
            if let Some(m) = &f.matched {
                row(&mut out, &f.fold.to_string(), "matched_mlp", m, f.depth, &skipped);
            }
        }
        let mut summary = |model: &str, scores: Vec<ModelScore>| {
            let (am, asd) = mean_std(&scores.iter().map(|s| s.auroc).collect::<Vec<_>>());
            let (cm, csd) = mean_std(&scores.iter().map(|s| s.accuracy).collect::<Vec<_>>());
            let _ = writeln!(out, "mean,{model},{am},{cm},,,,,,,");
            let _ = writeln!(out, "std,{model},{asd},{csd},,,,,,,");
        };
        summary("birdnet", self.folds.iter().map(|f| f.birdnet).collect());
        if let Some(m) = self.matched_scores() {
            summary("matched_mlp", m);
        }
        out
    }

    /// Metric and parameter-accounting tables.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>18} {:>18}", "model", "AUROC", "Accuracy");
        let fmt = |(m, s): (f64, f64)| format!("{m:.3} ± {s:.3}");
        let _ = writeln!(
            out,
            "{:<12} {:>18} {:>18}",
            "BIRDNet",
            fmt(self.birdnet_auroc()),
            fmt(self.birdnet_accuracy())
        );
        if let Some(m) = self.matched_scores() {
            let a = mean_std(&m.iter().map(|s| s.auroc).collect::<Vec<_>>());
            let c = mean_std(&m.iter().map(|s| s.accuracy).collect::<Vec<_>>());
            let _ = writeln!(out, "{:<12} {:>18} {:>18}", "MatchedMLP", fmt(a), fmt(c));
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<6} {:>6} {:>8} {:>12} {:>14} {:>14} {:>8}",
            "fold", "depth", "width", "bir_active", "total_active", "matched_total", "ratio"
        );
        for f in &self.folds {
            let a = f.birdnet.accounting;
            let _ = writeln!(
                out,
                "{:<6} {:>6} {:>8} {:>12} {:>14} {:>14} {:>8.1}",
                f.fold,
                f.depth,
                a.width,
                a.bir_active,
                a.total_active,
                f.matched_accounting.total_active,
                f.matched_accounting.total_active as f64 / a.total_active as f64
            );
        }
        out
    }
}

/// Rules read from a single stratified holdout split.
#[derive(Debug, Clone)]
pub struct RuleReport {
    pub train_rows: Vec<usize>,
    pub heldout_rows: Vec<usize>,
    pub fitted: FittedModel,
    pub rules: Vec<RuleRecord>,
}

/// Trains on a stratified `1 − fraction` share of the data and extracts
/// rules on the remaining rows.
pub fn holdout_rules_run(
    data: &LabeledDataset,
    cfg: &PipelineConfig,
    fraction: f64,
    min_support: Option<usize>,
    exec: Execution,
) -> Result<RuleReport> {
    let (train_rows, heldout_rows) = stratified_holdout(&data.labels, fraction, cfg.seed)?;
    if heldout_rows.is_empty() {
        return Err(Error::invalid("holdout split is empty"));
    }
    let train_labels: Vec<usize> = train_rows.iter().map(|&i| data.labels[i]).collect();
    let (_, val_pos) = stratified_holdout(&train_labels, VAL_FRACTION, cfg.seed)?;
    let val_rows: Vec<usize> = val_pos.iter().map(|&p| train_rows[p]).collect();
    let fitted = fit_pipeline(data, &train_rows, &val_rows, cfg, exec)?;
    let x = fitted.model.preprocessing.apply(&data.values.select_rows(&heldout_rows))?;
    let y: Vec<usize> = heldout_rows.iter().map(|&i| data.labels[i]).collect();
    let rules = extract_rules(
        &fitted.model.network,
        &x,
        &y,
        min_support.unwrap_or(DEFAULT_MIN_SUPPORT),
    )?;
    Ok(RuleReport {
        train_rows,
        heldout_rows,
        fitted,
        rules,
    })
}
