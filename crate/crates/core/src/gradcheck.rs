//! Central finite-difference verification of the analytic gradients.
//!
//! The numeric side only ever evaluates the objective, so it stays
//! independent of the analytic gradient path it checks.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{
    objective_gradient, weighted_objective, Hyperparameters, ModelParameters, Pair, Sign,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Minimum distance of every hinge/ReLU argument from its kink.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub points: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// A randomly generated objective instance for gradient checking.
pub struct TestInstance {
    pub params: ModelParameters<f64>,
    pub hp: Hyperparameters,
    pub d_plus: Vec<Pair<f64>>,
    pub d_minus: Vec<Pair<f64>>,
    pub features: Array2<f64>,
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| (rng.gen::<f64>() * 2.0 - 1.0) * scale)
}

/// True when every ReLU pre-activation and hinge argument in the
/// instance is at least `KINK_MARGIN` away from zero.
fn away_from_kinks(inst: &TestInstance) -> bool {
    let pairs = inst.d_plus.iter().chain(inst.d_minus.iter());
    for pair in pairs {
        let x = inst.features.row(pair.image_index);
        let mut pre = x.dot(&inst.params.w_x);
        pre += &inst.params.b_x;
        if pre.iter().any(|v| v.abs() <= KINK_MARGIN) {
            return false;
        }
        let emb = pre.mapv(|v| v.max(0.0));
        let diff = &emb - &pair.attributes;
        let v = diff.dot(&inst.params.w_a);
        let s2 = v.dot(&v);
        let arg = 1.0 - pair.z.value::<f64>() * (inst.params.tau - s2);
        if arg.abs() <= KINK_MARGIN {
            return false;
        }
    }
    true
}

/// Draws a small random instance whose kink arguments all clear the
/// margin, resampling until they do.
pub fn random_instance(seed: u64) -> TestInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, a, m) = (5, 4, 3);
    loop {
        let params = ModelParameters {
            w_x: rand_mat(&mut rng, d, a, 0.8),
            b_x: rand_vec(&mut rng, a, 0.5),
            w_a: rand_mat(&mut rng, a, m, 0.8),
            tau: rng.gen::<f64>() * 2.0,
        };
        let n_images = 5;
        let features = rand_mat(&mut rng, n_images, d, 1.0);
        let mut make_pairs = |count: usize, z: Sign| -> Vec<Pair<f64>> {
            (0..count)
                .map(|i| Pair {
                    image_index: i % n_images,
                    attributes: rand_vec(&mut rng, a, 1.0),
                    z,
                    source_index: i % n_images,
                })
                .collect()
        };
        let d_plus = make_pairs(2, Sign::Positive);
        let d_minus = make_pairs(3, Sign::Negative);
        let hp = Hyperparameters {
            lambda: 0.5 + rng.gen::<f64>(),
            mu: 0.1 + 0.4 * rng.gen::<f64>(),
            m,
            ..Hyperparameters::default()
        };
        let inst = TestInstance {
            params,
            hp,
            d_plus,
            d_minus,
            features,
        };
        if away_from_kinks(&inst) {
            return inst;
        }
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares the analytic gradient of one instance against central finite
/// differences, returning the maximum relative error over all parameter
/// coordinates.
pub fn check_instance(inst: &TestInstance, step: f64) -> Result<f64> {
    let analytic = objective_gradient(
        &inst.params,
        &inst.hp,
        &inst.d_plus,
        &inst.d_minus,
        &inst.features,
    )?;

    let eval = |params: &ModelParameters<f64>| -> Result<f64> {
        weighted_objective(params, &inst.hp, &inst.d_plus, &inst.d_minus, &inst.features)
    };

    let mut max_err: f64 = 0.0;
    let mut probe = inst.params.clone();

    macro_rules! check_coords {
        ($field:ident) => {
            for idx in 0..inst.params.$field.len() {
                let orig = inst.params.$field.as_slice().unwrap()[idx];
                probe.$field.as_slice_mut().unwrap()[idx] = orig + step;
                let plus = eval(&probe)?;
                probe.$field.as_slice_mut().unwrap()[idx] = orig - step;
                let minus = eval(&probe)?;
                probe.$field.as_slice_mut().unwrap()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let err = relative_error(analytic.$field.as_slice().unwrap()[idx], numeric);
                max_err = max_err.max(err);
            }
        };
    }
    check_coords!(w_x);
    check_coords!(b_x);
    check_coords!(w_a);

    let plus = eval(&ModelParameters {
        tau: inst.params.tau + step,
        ..inst.params.clone()
    })?;
    let minus = eval(&ModelParameters {
        tau: inst.params.tau - step,
        ..inst.params.clone()
    })?;
    let numeric = (plus - minus) / (2.0 * step);
    max_err = max_err.max(relative_error(analytic.tau, numeric));

    Ok(max_err)
}

/// Runs the finite-difference check on `points` seeded random instances.
pub fn run(points: usize, base_seed: u64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    let mut max_err: f64 = 0.0;
    for i in 0..points {
        let inst = random_instance(base_seed.wrapping_add(i as u64));
        max_err = max_err.max(check_instance(&inst, step)?);
    }
    Ok(GradCheckReport {
        points,
        max_relative_error: max_err,
        tolerance,
        passed: max_err < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let report = run(10, 0, DEFAULT_STEP, DEFAULT_TOLERANCE).unwrap();
        assert!(
            report.passed,
            "max relative error {}",
            report.max_relative_error
        );
    }

    #[test]
    fn instances_are_deterministic_per_seed() {
        let a = random_instance(5);
        let b = random_instance(5);
        assert_eq!(a.params, b.params);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn relative_error_floors_tiny_magnitudes() {
        assert_eq!(relative_error(0.0, 1e-12), 0.0);
        assert!(relative_error(1.0, 1.1) > 0.0);
    }
}
