//! Zero-shot decision rule, per-class accuracy metrics and multi-run
//! aggregation.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Role};
use crate::error::{Error, Result};
use crate::mining::Strategy;
use crate::model::ModelParameters;
use crate::train::{train, TrainConfig};

/// Attribute descriptors for the classes under evaluation.
#[derive(Debug, Clone)]
pub struct ClassDescriptorSet {
    /// Ascending class indices.
    pub class_ids: Vec<usize>,
    /// One descriptor row per entry of `class_ids`.
    pub descriptors: Array2<f64>,
}

impl ClassDescriptorSet {
    pub fn new(class_ids: Vec<usize>, descriptors: Array2<f64>) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::EmptyDescriptorSet);
        }
        if descriptors.nrows() != class_ids.len() {
            return Err(Error::dim("descriptor rows", class_ids.len(), descriptors.nrows()));
        }
        Ok(ClassDescriptorSet { class_ids, descriptors })
    }

    /// Descriptors for the classes with `role`: the manifest's explicit
    /// descriptors when present, otherwise the per-class mean attribute
    /// vector of that class's images.
    pub fn for_role(dataset: &Dataset, role: Role) -> Result<Self> {
        let class_ids = dataset.classes_with_role(role);
        if class_ids.is_empty() {
            return Err(Error::EmptyDescriptorSet);
        }
        let a = dataset.attribute_dim();
        let mut descriptors = Array2::zeros((class_ids.len(), a));
        for (row, &class) in class_ids.iter().enumerate() {
            if let Some(explicit) = &dataset.class_descriptors {
                descriptors.row_mut(row).assign(&explicit.row(class - 1));
            } else {
                let images = dataset.images_of_class(class);
                if images.is_empty() {
                    return Err(Error::EmptyTestClass { class });
                }
                let mut mean = descriptors.row_mut(row);
                for &i in &images {
                    mean += &dataset.attributes.row(i);
                }
                mean /= images.len() as f64;
            }
        }
        ClassDescriptorSet::new(class_ids, descriptors)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// Assigns an image to the class whose descriptor is most similar
/// (minimum metric distance). Ties break to the lowest class index.
pub fn classify(
    model: &ModelParameters<f64>,
    x: ArrayView1<'_, f64>,
    descriptors: &ClassDescriptorSet,
) -> Result<usize> {
    if descriptors.is_empty() {
        return Err(Error::EmptyDescriptorSet);
    }
    let emb = model.embed(x)?;
    let mut best_class = usize::MAX;
    let mut best_score = f64::INFINITY;
    for (row, &class) in descriptors.class_ids.iter().enumerate() {
        let s = model.similarity_from_embedding(emb.view(), descriptors.descriptors.row(row))?;
        if s < best_score || (s == best_score && class < best_class) {
            best_score = s;
            best_class = class;
        }
    }
    Ok(best_class)
}

/// Per-class accuracy of one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub accuracy: f64,
    pub num_images: usize,
}

/// Evaluation results, single run or aggregated over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassAccuracy>,
    /// Unweighted mean of per-class accuracies (averaged over runs when
    /// `run_count` > 1).
    pub mean_accuracy: f64,
    /// Sample std of the per-run mean accuracies (0 for a single run).
    pub std_over_runs: f64,
    /// Std of the per-class accuracies within a run (averaged over runs).
    pub std_over_classes: f64,
    pub run_count: usize,
    /// Resolved configuration echoed into the artifact.
    pub config: serde_json::Value,
}

fn std_sample(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

fn std_population(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// Evaluates a model on the classes with the given role (zero-shot:
/// each image is assigned to one of those classes only).
pub fn evaluate_role(
    model: &ModelParameters<f64>,
    dataset: &Dataset,
    role: Role,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let descriptors = ClassDescriptorSet::for_role(dataset, role)?;
    let mut per_class = Vec::with_capacity(descriptors.len());
    for &class in &descriptors.class_ids {
        let images = dataset.images_of_class(class);
        if images.is_empty() {
            return Err(Error::EmptyTestClass { class });
        }
        let mut correct = 0usize;
        for &i in &images {
            if classify(model, dataset.features.row(i), &descriptors)? == class {
                correct += 1;
            }
        }
        per_class.push(ClassAccuracy {
            class,
            accuracy: correct as f64 / images.len() as f64,
            num_images: images.len(),
        });
    }
    let accs: Vec<f64> = per_class.iter().map(|c| c.accuracy).collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok(EvalReport {
        per_class,
        mean_accuracy: mean,
        std_over_runs: 0.0,
        std_over_classes: std_population(&accs),
        run_count: 1,
        config,
    })
}

/// Evaluates on the test split. Asserts the class-disjoint contract.
pub fn evaluate(
    model: &ModelParameters<f64>,
    dataset: &Dataset,
    config: serde_json::Value,
) -> Result<EvalReport> {
    evaluate_role(model, dataset, Role::Test, config)
}

/// Trains and evaluates once per seed, reporting the mean and sample std
/// of the per-run mean accuracies.
pub fn multi_run(
    dataset: &Dataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<(Vec<EvalReport>, EvalReport)> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("multi_run needs at least one seed".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &s in seeds {
        if !seen.insert(s) {
            return Err(Error::DuplicateSeed(s));
        }
    }
    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut run_config = config.clone();
        run_config.hp.seed = seed;
        let run_echo = serde_json::to_value(&run_config).unwrap_or(serde_json::Value::Null);
        let (params, _) = train(dataset, &run_config).map_err(|e| Error::RunFailed {
            seed,
            source: Box::new(e),
        })?;
        reports.push(evaluate(&params, dataset, run_echo).map_err(|e| Error::RunFailed {
            seed,
            source: Box::new(e),
        })?);
    }
    let echo = serde_json::json!({
        "config": serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
        "seeds": seeds,
    });
    let aggregated = aggregate(&reports, echo)?;
    Ok((reports, aggregated))
}

/// One cell of the negative/positive ratio sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub neg_ratio: usize,
    pub report: EvalReport,
}

/// Runs [`multi_run`] for every (strategy, ratio) cell.
pub fn ratio_sweep(
    dataset: &Dataset,
    config: &TrainConfig,
    strategies: &[Strategy],
    ratios: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    if ratios.is_empty() {
        return Err(Error::InvalidConfig("ratio sweep needs at least one ratio".into()));
    }
    let mut cells = Vec::new();
    for &strategy in strategies {
        for &ratio in ratios {
            let mut cell_config = config.clone();
            cell_config.strategy = strategy;
            cell_config.hp.neg_ratio = ratio;
            let (_, aggregated) = multi_run(dataset, &cell_config, seeds)?;
            cells.push(SweepCell {
                strategy,
                neg_ratio: ratio,
                report: aggregated,
            });
        }
    }
    Ok(cells)
}

/// Renders sweep cells as CSV.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("strategy,neg_ratio,mean,std_runs,std_classes\n");
    for cell in cells {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            cell.strategy,
            cell.neg_ratio,
            cell.report.mean_accuracy,
            cell.report.std_over_runs,
            cell.report.std_over_classes
        ));
    }
    out
}

/// Combines single-run reports into a mean/std-over-runs summary.
pub fn aggregate(reports: &[EvalReport], config: serde_json::Value) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("no runs to aggregate".into()));
    }
    let means: Vec<f64> = reports.iter().map(|r| r.mean_accuracy).collect();
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let std_classes =
        reports.iter().map(|r| r.std_over_classes).sum::<f64>() / reports.len() as f64;
    // per-class accuracies averaged over runs
    let mut per_class = reports[0].per_class.clone();
    for entry in per_class.iter_mut() {
        let mut total = 0.0;
        for r in reports {
            total += r
                .per_class
                .iter()
                .find(|c| c.class == entry.class)
                .map_or(0.0, |c| c.accuracy);
        }
        entry.accuracy = total / reports.len() as f64;
    }
    Ok(EvalReport {
        per_class,
        mean_accuracy: mean,
        std_over_runs: std_sample(&means),
        std_over_classes: std_classes,
        run_count: reports.len(),
        config,
    })
}
