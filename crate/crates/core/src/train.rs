//! SGD training loop with per-epoch negative-set growth, learning-curve
//! recording and hyperparameter grid search.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{build_candidate_pool, Dataset, Role};
use crate::error::{Error, Result};
use crate::eval::{evaluate_role, ClassDescriptorSet};
use crate::mining::{MiningState, Strategy};
use crate::model::{
    accumulate_pair_gradient, accumulate_regularizer_gradient, weighted_objective, Gradients,
    Hyperparameters, ModelParameters, Pair, Sign,
};

/// Objectives above this are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hp: Hyperparameters,
    pub strategy: Strategy,
    pub minibatch_size: usize,
    /// Epochs between learning-curve snapshots.
    pub curve_sample_period: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hp: Hyperparameters::default(),
            strategy: Strategy::Random,
            minibatch_size: 64,
            curve_sample_period: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.minibatch_size == 0 {
            return Err(Error::InvalidConfig("minibatch_size must be >= 1".into()));
        }
        if self.curve_sample_period == 0 {
            return Err(Error::InvalidConfig("curve_sample_period must be >= 1".into()));
        }
        Ok(())
    }
}

/// One learning-curve sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub objective: f64,
    /// Mean per-class accuracy on validation-role classes, when any exist.
    pub val_accuracy: Option<f64>,
    pub d_minus_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    /// Writes the curve as CSV. A leading `#` comment line echoes the
    /// resolved configuration so the artifact is self-describing.
    pub fn write_csv(&self, path: &Path, config: &serde_json::Value) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("# config: {config}\n"));
        out.push_str("epoch,objective,val_accuracy,d_minus_size\n");
        for p in &self.points {
            let val = p
                .val_accuracy
                .map_or_else(|| "NaN".to_string(), |v| format!("{v}"));
            out.push_str(&format!("{},{},{},{}\n", p.epoch, p.objective, val, p.d_minus_size));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Trains the model for `hp.epochs` epochs.
///
/// Each epoch first grows the negative set (epoch 1 with one random
/// negative per positive, later epochs with one strategy-sampled negative
/// per positive) until it reaches `neg_ratio * |D+|`, then runs SGD over
/// shuffled minibatches of D+ and D- under the frequency-weighted
/// objective. Deterministic given the seed.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(ModelParameters<f64>, LearningCurve)> {
    train_with_dump(dataset, config, None)
}

/// Like [`train`], optionally dumping the per-image sampling
/// distributions of the first strategy-driven epoch as CSV.
pub fn train_with_dump(
    dataset: &Dataset,
    config: &TrainConfig,
    dump_distributions: Option<&Path>,
) -> Result<(ModelParameters<f64>, LearningCurve)> {
    config.validate()?;
    dataset.validate()?;
    let hp = &config.hp;

    let train_classes = dataset.classes_with_role(Role::Train);
    if train_classes.len() < 2 {
        return Err(Error::SingleTrainingClass);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut params = ModelParameters::<f64>::init(
        dataset.feature_dim(),
        dataset.attribute_dim(),
        hp.m,
        hp.w_a_init_std,
        &mut rng,
    );

    // D+: one positive pair per training image.
    let d_plus: Vec<Pair<f64>> = dataset
        .images_with_role(Role::Train)
        .into_iter()
        .map(|i| Pair {
            image_index: i,
            attributes: dataset.attributes.row(i).to_owned(),
            z: Sign::Positive,
            source_index: i,
        })
        .collect();

    let pool = build_candidate_pool(dataset)?;
    let mining_rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x6d69_6e65);
    let mut mining = MiningState::new(config.strategy, dataset, &pool, mining_rng);
    if config.strategy == Strategy::UncertaintyCorrelation && mining.correlation_degenerate() {
        log::warn!(
            "all classes have identical within-class attributes: q == 1, \
             unc-cor reduces to uncertainty"
        );
    }

    let cap = hp.neg_ratio * d_plus.len();
    let has_validation = !dataset.classes_with_role(Role::Validation).is_empty();
    let mut curve = LearningCurve::default();
    let mut dumped = false;

    for epoch in 1..=hp.epochs {
        if mining.d_minus.len() < cap {
            if epoch == 1 {
                mining.grow_random(dataset, &pool, &d_plus, 1, cap)?;
            } else {
                if let Some(path) = dump_distributions {
                    if !dumped {
                        dump_epoch_distributions(&mining, &params, dataset, &pool, &d_plus, path)?;
                        dumped = true;
                    }
                }
                mining.grow_scored(&params, dataset, &pool, &d_plus, 1, cap)?;
            }
        }

        sgd_epoch(&mut params, hp, &d_plus, &mining.d_minus, dataset, config, &mut rng)?;

        let objective = weighted_objective(&params, hp, &d_plus, &mining.d_minus, &dataset.features)?;
        if !objective.is_finite() || objective > DIVERGENCE_LIMIT {
            log::error!(
                "divergence at epoch {epoch}: objective {objective}, tau {}, ||W_A||_F^2 {}",
                params.tau,
                params.w_a.iter().map(|v| v * v).sum::<f64>()
            );
            return Err(Error::Diverged { epoch, objective });
        }

        if epoch % config.curve_sample_period == 0 {
            let val_accuracy = if has_validation {
                Some(
                    evaluate_role(&params, dataset, Role::Validation, serde_json::Value::Null)?
                        .mean_accuracy,
                )
            } else {
                None
            };
            curve.points.push(CurvePoint {
                epoch,
                objective,
                val_accuracy,
                d_minus_size: mining.d_minus.len(),
            });
        }
    }

    if !params.is_finite() {
        return Err(Error::Diverged {
            epoch: hp.epochs,
            objective: f64::NAN,
        });
    }
    Ok((params, curve))
}

/// One SGD pass over shuffled minibatches of D+ and D-.
///
/// Positive terms carry weight 1/|D+|, negative terms 1/|D-|, and the
/// regularizer gradient is scaled by batch_len/(|D+|+|D-|), so the
/// epoch's summed minibatch gradients equal the full-batch gradient of
/// the weighted objective.
fn sgd_epoch(
    params: &mut ModelParameters<f64>,
    hp: &Hyperparameters,
    d_plus: &[Pair<f64>],
    d_minus: &[Pair<f64>],
    dataset: &Dataset,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n_pos = d_plus.len();
    let n_neg = d_minus.len();
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::EmptyPairSet("SGD epoch".into()));
    }
    let w_pos = 1.0 / n_pos as f64;
    let w_neg = 1.0 / n_neg as f64;
    let total = n_pos + n_neg;

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);

    for batch in order.chunks(config.minibatch_size) {
        let mut grads = Gradients::zeros_like(params);
        for &idx in batch {
            let (pair, weight) = if idx < n_pos {
                (&d_plus[idx], w_pos)
            } else {
                (&d_minus[idx - n_pos], w_neg)
            };
            accumulate_pair_gradient(
                params,
                pair,
                dataset.features.row(pair.image_index),
                hp.lambda,
                weight,
                &mut grads,
            )?;
        }
        let reg_weight = batch.len() as f64 / total as f64;
        accumulate_regularizer_gradient(params, hp.mu, reg_weight, &mut grads);

        let lr = hp.learning_rate;
        params.w_x.scaled_add(-lr, &grads.w_x);
        params.b_x.scaled_add(-lr, &grads.b_x);
        params.w_a.scaled_add(-lr, &grads.w_a);
        params.tau -= lr * grads.tau;
    }
    Ok(())
}

fn dump_epoch_distributions(
    mining: &MiningState,
    params: &ModelParameters<f64>,
    dataset: &Dataset,
    pool: &crate::data::CandidatePool,
    d_plus: &[Pair<f64>],
    path: &Path,
) -> Result<()> {
    let mut out = String::from("image,candidate,probability\n");
    for pos in d_plus {
        let (candidates, probs) = mining.distribution(params, dataset, pool, pos.image_index)?;
        for (c, p) in candidates.iter().zip(probs.iter()) {
            out.push_str(&format!("{},{},{}\n", pos.image_index, c, p));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Candidate values for the grid search over (lambda, mu, m).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    pub lambdas: Vec<f64>,
    pub mus: Vec<f64>,
    pub ms: Vec<usize>,
}

/// Holds out 20% of the training classes as validation, trains each grid
/// point on the remaining classes, picks the point with the best
/// validation mean per-class accuracy and retrains on the full training
/// set with it.
pub fn grid_search(
    dataset: &Dataset,
    grid: &Grid,
    config: &TrainConfig,
) -> Result<(Hyperparameters, ModelParameters<f64>, LearningCurve)> {
    if grid.lambdas.is_empty() || grid.mus.is_empty() || grid.ms.is_empty() {
        return Err(Error::InvalidConfig("empty grid".into()));
    }
    let train_classes = dataset.classes_with_role(Role::Train);
    if train_classes.len() < 5 {
        return Err(Error::InvalidConfig(format!(
            "grid search needs >= 5 training classes, got {}",
            train_classes.len()
        )));
    }
    let holdout_count = (train_classes.len() as f64 * 0.2).ceil() as usize;
    let mut shuffled = train_classes.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.hp.seed ^ 0x6772_6964);
    shuffled.shuffle(&mut rng);
    let holdout: Vec<usize> = shuffled[..holdout_count].to_vec();

    let mut inner = dataset.clone();
    for &class in &holdout {
        inner.split[class - 1] = Role::Validation;
    }

    let mut best: Option<(f64, Hyperparameters)> = None;
    for &lambda in &grid.lambdas {
        for &mu in &grid.mus {
            for &m in &grid.ms {
                let mut hp = config.hp.clone();
                hp.lambda = lambda;
                hp.mu = mu;
                hp.m = m;
                let point_config = TrainConfig {
                    hp: hp.clone(),
                    ..config.clone()
                };
                let (params, _) = train(&inner, &point_config)?;
                let report =
                    evaluate_role(&params, &inner, Role::Validation, serde_json::Value::Null)?;
                let acc = report.mean_accuracy;
                log::info!("grid point lambda={lambda} mu={mu} m={m}: val accuracy {acc:.4}");
                let better = best.as_ref().map_or(true, |(b, _)| acc > *b);
                if better {
                    best = Some((acc, hp));
                }
            }
        }
    }
    let (_, best_hp) = best.expect("grid is non-empty");

    let final_config = TrainConfig {
        hp: best_hp.clone(),
        ..config.clone()
    };
    let (params, curve) = train(dataset, &final_config)?;
    Ok((best_hp, params, curve))
}

/// Classes held out by grid search for a given seed; exposed so callers
/// can verify the validation/fit disjointness.
pub fn grid_holdout_classes(dataset: &Dataset, seed: u64) -> Result<Vec<usize>> {
    let train_classes = dataset.classes_with_role(Role::Train);
    let holdout_count = (train_classes.len() as f64 * 0.2).ceil() as usize;
    let mut shuffled = train_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6964);
    shuffled.shuffle(&mut rng);
    Ok(shuffled[..holdout_count].to_vec())
}

/// Descriptor set covering the validation classes, for callers that need
/// the same construction the trainer uses.
pub fn validation_descriptors(dataset: &Dataset) -> Result<ClassDescriptorSet> {
    ClassDescriptorSet::for_role(dataset, Role::Validation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::io::save_model;
    use crate::model::ModelParameters;
    use rand::SeedableRng;

    fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            hp: Hyperparameters {
                epochs,
                seed,
                m: 4,
                ..Hyperparameters::default()
            },
            strategy: Strategy::Uncertainty,
            ..TrainConfig::default()
        }
    }

    fn quick_dataset() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            c_total: 5,
            c_test: 1,
            images_per_class: 4,
            d: 6,
            a: 4,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization_unchanged() {
        let dataset = quick_dataset();
        let config = quick_config(0, 3);
        let (params, curve) = train(&dataset, &config).unwrap();
        assert!(curve.points.is_empty());
        // must equal a fresh draw from the same seeded initialization
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let expected = ModelParameters::<f64>::init(6, 4, 4, config.hp.w_a_init_std, &mut rng);
        assert_eq!(params, expected);
    }

    #[test]
    fn identical_seeds_give_byte_identical_models_and_curves() {
        let dataset = quick_dataset();
        let config = quick_config(8, 11);
        let dir = tempfile::tempdir().unwrap();
        let echo = serde_json::json!({"check": "determinism"});
        let mut files = Vec::new();
        for run in 0..2 {
            let (params, curve) = train(&dataset, &config).unwrap();
            let model_path = dir.path().join(format!("model{run}.zmodel"));
            let curve_path = dir.path().join(format!("curve{run}.csv"));
            save_model(&model_path, &params).unwrap();
            curve.write_csv(&curve_path, &echo).unwrap();
            files.push((
                std::fs::read(model_path).unwrap(),
                std::fs::read(curve_path).unwrap(),
            ));
        }
        assert_eq!(files[0].0, files[1].0, "model files differ");
        assert_eq!(files[0].1, files[1].1, "learning curves differ");
    }

    #[test]
    fn different_seeds_give_different_models() {
        let dataset = quick_dataset();
        let (a, _) = train(&dataset, &quick_config(5, 0)).unwrap();
        let (b, _) = train(&dataset, &quick_config(5, 1)).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn objective_decreases_and_accuracy_is_high_on_easy_task() {
        let dataset = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let config = TrainConfig {
            hp: Hyperparameters {
                neg_ratio: 10,
                seed: 0,
                ..Hyperparameters::default()
            },
            strategy: Strategy::Random,
            ..TrainConfig::default()
        };
        let (params, curve) = train(&dataset, &config).unwrap();
        let first = curve.points.first().unwrap().objective;
        let last = curve.points.last().unwrap().objective;
        assert!(last < first, "objective must drop: {first} -> {last}");
        let report =
            crate::eval::evaluate(&params, &dataset, serde_json::Value::Null).unwrap();
        assert!(
            report.mean_accuracy >= 0.9,
            "accuracy {} below 0.9",
            report.mean_accuracy
        );
    }

    #[test]
    fn negative_set_growth_follows_epoch_schedule() {
        let dataset = quick_dataset();
        let mut config = quick_config(6, 2);
        config.hp.neg_ratio = 3;
        let (_, curve) = train(&dataset, &config).unwrap();
        let n_pos = dataset.images_with_role(Role::Train).len();
        let sizes: Vec<usize> = curve.points.iter().map(|p| p.d_minus_size).collect();
        // 1 negative per positive at epoch 1, +1 per epoch up to the cap
        assert_eq!(
            sizes,
            vec![n_pos, 2 * n_pos, 3 * n_pos, 3 * n_pos, 3 * n_pos, 3 * n_pos]
        );
    }

    #[test]
    fn curve_csv_embeds_config_and_rows() {
        let dataset = quick_dataset();
        let config = quick_config(3, 5);
        let (_, curve) = train(&dataset, &config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let echo = serde_json::to_value(&config).unwrap();
        curve.write_csv(&path, &echo).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("# config: "));
        assert!(header.contains("\"seed\":5"));
        assert_eq!(lines.next().unwrap(), "epoch,objective,val_accuracy,d_minus_size");
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn single_training_class_is_rejected() {
        let mut dataset = quick_dataset();
        for k in 2..=dataset.num_classes() {
            dataset.split[k - 1] = Role::Test;
        }
        match train(&dataset, &quick_config(2, 0)) {
            Err(Error::SingleTrainingClass) => {}
            other => panic!("expected SingleTrainingClass, got {other:?}"),
        }
    }

    #[test]
    fn grid_of_one_point_returns_it() {
        let dataset = generate_synthetic(&SyntheticSpec {
            c_total: 7,
            c_test: 1,
            images_per_class: 4,
            d: 6,
            a: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let config = quick_config(3, 7);
        let grid = Grid {
            lambdas: vec![0.5],
            mus: vec![1e-3],
            ms: vec![4],
        };
        let (best, _, _) = grid_search(&dataset, &grid, &config).unwrap();
        assert_eq!(best.lambda, 0.5);
        assert_eq!(best.mu, 1e-3);
        assert_eq!(best.m, 4);
    }

    #[test]
    fn degenerate_grid_point_loses() {
        // lambda = 0 with an enormous mu crushes the parameters to zero;
        // the healthy point must win validation accuracy.
        let dataset = generate_synthetic(&SyntheticSpec {
            c_total: 10,
            c_test: 2,
            images_per_class: 10,
            d: 16,
            a: 8,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let config = TrainConfig {
            hp: Hyperparameters {
                epochs: 150,
                m: 8,
                neg_ratio: 5,
                seed: 0,
                ..Hyperparameters::default()
            },
            strategy: Strategy::Random,
            ..TrainConfig::default()
        };
        let grid = Grid {
            lambdas: vec![1.0, 0.0],
            mus: vec![1e-4, 50.0],
            ms: vec![8],
        };
        let (best, _, _) = grid_search(&dataset, &grid, &config).unwrap();
        assert_eq!(best.lambda, 1.0);
        assert_eq!(best.mu, 1e-4);
    }

    #[test]
    fn grid_holdout_is_fifth_of_classes_and_disjoint() {
        let dataset = generate_synthetic(&SyntheticSpec {
            c_total: 12,
            c_test: 2,
            images_per_class: 2,
            d: 4,
            a: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        // 10 training classes -> ceil(0.2 * 10) = 2 held out
        let holdout = grid_holdout_classes(&dataset, 9).unwrap();
        assert_eq!(holdout.len(), 2);
        let train_classes = dataset.classes_with_role(Role::Train);
        for class in &holdout {
            assert!(train_classes.contains(class));
        }
        let remaining: Vec<usize> = train_classes
            .iter()
            .copied()
            .filter(|k| !holdout.contains(k))
            .collect();
        assert_eq!(remaining.len(), 8);
        assert!(holdout.iter().all(|k| !remaining.contains(k)));
        // deterministic per seed
        assert_eq!(holdout, grid_holdout_classes(&dataset, 9).unwrap());
    }
}
