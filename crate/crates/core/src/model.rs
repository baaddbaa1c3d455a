//! Model parameters, embedding, similarity, loss terms and their gradients.
//!
//! The model embeds image features into attribute space with a linear map
//! followed by a ReLU, then measures image/attribute similarity as a
//! Euclidean norm in a learned metric space. Training minimizes a
//! frequency-weighted sum of a hinge loss on squared similarity, a quadratic
//! attribute-prediction loss on positive pairs, and a quadratic regularizer.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pair label: consistent image/attribute pair (+1) or cross-class pair (-1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    pub fn value<F: Scalar>(self) -> F {
        match self {
            Sign::Positive => F::one(),
            Sign::Negative => -F::one(),
        }
    }
}

/// One training pair: an image index, an attribute vector and its label.
#[derive(Debug, Clone)]
pub struct Pair<F> {
    pub image_index: usize,
    pub attributes: Array1<F>,
    pub z: Sign,
    /// Index of the image the attribute vector came from. Equals
    /// `image_index` for positive pairs; identifies the candidate for
    /// de-duplication on negatives.
    pub source_index: usize,
}

/// Learned parameters: embedding map (W_X, b_X), metric matrix W_A and
/// the similar/dissimilar threshold tau.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F> {
    /// d x a embedding matrix.
    pub w_x: Array2<F>,
    /// a-dimensional embedding bias.
    pub b_x: Array1<F>,
    /// a x m metric matrix.
    pub w_a: Array2<F>,
    pub tau: F,
}

impl<F: Scalar> ModelParameters<F> {
    /// Random initialization. W_X entries are i.i.d. normal(0, 0.01) and
    /// W_A entries normal(0, w_a_std); b_X is a small positive constant
    /// so every ReLU unit starts active (with a zero bias and small
    /// weights, units whose pre-activation is negative on the whole
    /// training set never receive gradient); tau = 1.
    pub fn init<R: Rng>(d: usize, a: usize, m: usize, w_a_std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f64, 0.01).unwrap();
        let normal_wa = Normal::new(0.0f64, w_a_std).unwrap();
        let w_x = Array2::from_shape_fn((d, a), |_| F::from_f64(normal.sample(rng)).unwrap());
        let w_a = Array2::from_shape_fn((a, m), |_| F::from_f64(normal_wa.sample(rng)).unwrap());
        ModelParameters {
            w_x,
            b_x: Array1::from_elem(a, F::from_f64(0.5).unwrap()),
            w_a,
            tau: F::one(),
        }
    }

    pub fn zeros(d: usize, a: usize, m: usize) -> Self {
        ModelParameters {
            w_x: Array2::zeros((d, a)),
            b_x: Array1::zeros(a),
            w_a: Array2::zeros((a, m)),
            tau: F::one(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w_x.nrows()
    }

    pub fn attribute_dim(&self) -> usize {
        self.w_x.ncols()
    }

    pub fn metric_dim(&self) -> usize {
        self.w_a.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.w_x.iter().all(|v| v.is_finite())
            && self.b_x.iter().all(|v| v.is_finite())
            && self.w_a.iter().all(|v| v.is_finite())
            && self.tau.is_finite()
    }

    /// ReLU embedding of an image feature vector into attribute space:
    /// max(0, x^T W_X + b_X).
    pub fn embed(&self, x: ArrayView1<'_, F>) -> Result<Array1<F>> {
        if x.len() != self.feature_dim() {
            return Err(Error::dim("embed input", self.feature_dim(), x.len()));
        }
        let mut pre = x.dot(&self.w_x);
        pre += &self.b_x;
        pre.mapv_inplace(|v| v.max(F::zero()));
        Ok(pre)
    }

    /// Similarity between an image and an attribute vector: the Euclidean
    /// norm of (embed(x) - y)^T W_A in metric space. Lower is more similar.
    pub fn similarity(&self, x: ArrayView1<'_, F>, y: ArrayView1<'_, F>) -> Result<F> {
        let emb = self.embed(x)?;
        self.similarity_from_embedding(emb.view(), y)
    }

    /// Same as [`similarity`](Self::similarity) but reusing a precomputed
    /// embedding of the image.
    pub fn similarity_from_embedding(
        &self,
        embedded: ArrayView1<'_, F>,
        y: ArrayView1<'_, F>,
    ) -> Result<F> {
        if y.len() != self.attribute_dim() {
            return Err(Error::dim("similarity attributes", self.attribute_dim(), y.len()));
        }
        let diff = &embedded - &y;
        let v = diff.dot(&self.w_a);
        Ok(v.dot(&v).sqrt())
    }
}

/// Hinge loss on squared similarity: max(0, 1 - z * (tau - s^2)).
pub fn hinge_loss<F: Scalar>(s: F, z: Sign, tau: F) -> F {
    let arg = F::one() - z.value::<F>() * (tau - s * s);
    arg.max(F::zero())
}

/// Quadratic attribute-prediction loss, applied to positive pairs only:
/// max(0, z) * ||y - y_hat||^2.
pub fn attribute_loss<F: Scalar>(
    y: ArrayView1<'_, F>,
    y_hat: ArrayView1<'_, F>,
    z: Sign,
) -> Result<F> {
    if y.len() != y_hat.len() {
        return Err(Error::dim("attribute_loss", y.len(), y_hat.len()));
    }
    if z == Sign::Negative {
        return Ok(F::zero());
    }
    let diff = &y - &y_hat;
    Ok(diff.dot(&diff))
}

/// Quadratic penalty: ||W_X||_F^2 + ||b_X||^2 + ||W_A||_F^2.
pub fn regularizer<F: Scalar>(params: &ModelParameters<F>) -> F {
    let sq = |it: &mut dyn Iterator<Item = &F>| it.map(|v| *v * *v).sum::<F>();
    sq(&mut params.w_x.iter()) + sq(&mut params.b_x.iter()) + sq(&mut params.w_a.iter())
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// Weight of the attribute-prediction loss.
    pub lambda: f64,
    /// Weight of the quadratic regularizer.
    pub mu: f64,
    /// Metric-space dimensionality (columns of W_A).
    pub m: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Std of the normal initialization of W_A. Small values make the
    /// metric channel nearly inert early in training; larger values let
    /// the hinge term shape the metric from the start.
    #[serde(default = "default_w_a_init_std")]
    pub w_a_init_std: f64,
    /// Target |D-| / |D+| ratio.
    pub neg_ratio: usize,
    pub seed: u64,
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig("lambda must be finite and >= 0".into()));
        }
        if self.mu < 0.0 || !self.mu.is_finite() {
            return Err(Error::InvalidConfig("mu must be finite and >= 0".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidConfig("m must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be finite and > 0".into()));
        }
        if self.neg_ratio == 0 {
            return Err(Error::InvalidConfig("neg_ratio must be >= 1".into()));
        }
        if self.w_a_init_std <= 0.0 || !self.w_a_init_std.is_finite() {
            return Err(Error::InvalidConfig("w_a_init_std must be finite and > 0".into()));
        }
        Ok(())
    }
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            lambda: 1.0,
            mu: 1e-4,
            m: 16,
            learning_rate: 0.005,
            epochs: 300,
            w_a_init_std: default_w_a_init_std(),
            neg_ratio: 1,
            seed: 0,
        }
    }
}

fn default_w_a_init_std() -> f64 {
    0.01
}

/// Gradient of the objective with respect to every parameter.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub w_x: Array2<F>,
    pub b_x: Array1<F>,
    pub w_a: Array2<F>,
    pub tau: F,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(params: &ModelParameters<F>) -> Self {
        Gradients {
            w_x: Array2::zeros(params.w_x.raw_dim()),
            b_x: Array1::zeros(params.b_x.raw_dim()),
            w_a: Array2::zeros(params.w_a.raw_dim()),
            tau: F::zero(),
        }
    }

    pub fn scaled_add(&mut self, c: F, other: &Gradients<F>) {
        self.w_x.scaled_add(c, &other.w_x);
        self.b_x.scaled_add(c, &other.b_x);
        self.w_a.scaled_add(c, &other.w_a);
        self.tau = self.tau + c * other.tau;
    }
}

/// Accumulates `weight * d(l_H + lambda * l_A)/d(params)` for one pair.
///
/// At hinge and ReLU kinks (argument exactly zero) the zero subgradient
/// branch is taken.
pub fn accumulate_pair_gradient<F: Scalar>(
    params: &ModelParameters<F>,
    pair: &Pair<F>,
    x: ArrayView1<'_, F>,
    lambda: F,
    weight: F,
    grads: &mut Gradients<F>,
) -> Result<()> {
    if x.len() != params.feature_dim() {
        return Err(Error::dim("pair gradient features", params.feature_dim(), x.len()));
    }
    if pair.attributes.len() != params.attribute_dim() {
        return Err(Error::dim(
            "pair gradient attributes",
            params.attribute_dim(),
            pair.attributes.len(),
        ));
    }

    let mut pre = x.dot(&params.w_x);
    pre += &params.b_x;
    let emb = pre.mapv(|v| v.max(F::zero()));
    let diff = &emb - &pair.attributes;
    // v = diff^T W_A, s2 = ||v||^2
    let v = diff.dot(&params.w_a);
    let s2 = v.dot(&v);

    let z = pair.z.value::<F>();
    let hinge_arg = F::one() - z * (params.tau - s2);

    // Gradient flowing back into the embedding (pre-ReLU it gets masked).
    let mut d_emb: Array1<F> = Array1::zeros(params.attribute_dim());

    if hinge_arg > F::zero() {
        // dl_H/ds2 = z, dl_H/dtau = -z
        grads.tau = grads.tau - weight * z;
        // ds2/dW_A = 2 * diff (outer) v
        let two_wz = F::from_f64(2.0).unwrap() * weight * z;
        for (i, di) in diff.iter().enumerate() {
            let mut row = grads.w_a.row_mut(i);
            row.scaled_add(two_wz * *di, &v);
        }
        // ds2/d(emb) = 2 * W_A v
        d_emb.scaled_add(two_wz, &params.w_a.dot(&v));
    }

    if pair.z == Sign::Positive && lambda != F::zero() {
        // l_A = ||y - emb||^2, d/d(emb) = 2 (emb - y) = 2 diff
        let c = F::from_f64(2.0).unwrap() * weight * lambda;
        d_emb.scaled_add(c, &diff);
    }

    // Back through the ReLU: zero where pre-activation <= 0.
    for (g, p) in d_emb.iter_mut().zip(pre.iter()) {
        if *p <= F::zero() {
            *g = F::zero();
        }
    }

    grads.b_x += &d_emb;
    for (i, xi) in x.iter().enumerate() {
        let mut row = grads.w_x.row_mut(i);
        row.scaled_add(*xi, &d_emb);
    }
    Ok(())
}

/// Adds `weight * mu * dR/d(params)` to `grads`.
pub fn accumulate_regularizer_gradient<F: Scalar>(
    params: &ModelParameters<F>,
    mu: F,
    weight: F,
    grads: &mut Gradients<F>,
) {
    let c = F::from_f64(2.0).unwrap() * mu * weight;
    grads.w_x.scaled_add(c, &params.w_x);
    grads.b_x.scaled_add(c, &params.b_x);
    grads.w_a.scaled_add(c, &params.w_a);
}

/// Frequency-weighted training objective:
/// (1/|D+|) sum_{D+} [l_H + lambda l_A] + (1/|D-|) sum_{D-} l_H + mu R.
pub fn weighted_objective<F: Scalar>(
    params: &ModelParameters<F>,
    hp: &Hyperparameters,
    d_plus: &[Pair<F>],
    d_minus: &[Pair<F>],
    features: &Array2<F>,
) -> Result<F> {
    if d_plus.is_empty() {
        return Err(Error::EmptyPairSet("D+".into()));
    }
    if d_minus.is_empty() {
        return Err(Error::EmptyPairSet("D-".into()));
    }
    let lambda = F::from_f64(hp.lambda).unwrap();
    let mu = F::from_f64(hp.mu).unwrap();

    let pair_terms = |pairs: &[Pair<F>], with_attr: bool| -> Result<F> {
        let mut total = F::zero();
        for pair in pairs {
            let x = features.row(pair.image_index);
            let emb = params.embed(x)?;
            let s = params.similarity_from_embedding(emb.view(), pair.attributes.view())?;
            total = total + hinge_loss(s, pair.z, params.tau);
            if with_attr {
                total = total
                    + lambda * attribute_loss(pair.attributes.view(), emb.view(), pair.z)?;
            }
        }
        Ok(total)
    };

    let pos = pair_terms(d_plus, true)? / F::from_usize(d_plus.len()).unwrap();
    let neg = pair_terms(d_minus, false)? / F::from_usize(d_minus.len()).unwrap();
    Ok(pos + neg + mu * regularizer(params))
}

/// Analytic subgradient of [`weighted_objective`].
pub fn objective_gradient<F: Scalar>(
    params: &ModelParameters<F>,
    hp: &Hyperparameters,
    d_plus: &[Pair<F>],
    d_minus: &[Pair<F>],
    features: &Array2<F>,
) -> Result<Gradients<F>> {
    if d_plus.is_empty() {
        return Err(Error::EmptyPairSet("D+".into()));
    }
    if d_minus.is_empty() {
        return Err(Error::EmptyPairSet("D-".into()));
    }
    let lambda = F::from_f64(hp.lambda).unwrap();
    let mu = F::from_f64(hp.mu).unwrap();
    let mut grads = Gradients::zeros_like(params);

    let w_pos = F::from_usize(d_plus.len()).unwrap().recip();
    for pair in d_plus {
        accumulate_pair_gradient(params, pair, features.row(pair.image_index), lambda, w_pos, &mut grads)?;
    }
    let w_neg = F::from_usize(d_minus.len()).unwrap().recip();
    for pair in d_minus {
        accumulate_pair_gradient(params, pair, features.row(pair.image_index), lambda, w_neg, &mut grads)?;
    }
    accumulate_regularizer_gradient(params, mu, F::one(), &mut grads);
    Ok(grads)
}
