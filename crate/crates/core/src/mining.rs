//! Negative-pair generation: Random, Uncertainty and
//! Uncertainty/Correlation strategies with epoch-wise pair-set growth.

use std::collections::BTreeSet;
use std::str::FromStr;

use ndarray::ArrayView1;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CandidatePool, Dataset};
use crate::error::{Error, Result};
use crate::model::{ModelParameters, Pair, Sign};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    Uncertainty,
    UncertaintyCorrelation,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Uncertainty => "uncertainty",
            Strategy::UncertaintyCorrelation => "unc-cor",
        }
    }

    pub const ALL: [Strategy; 3] = [
        Strategy::Random,
        Strategy::Uncertainty,
        Strategy::UncertaintyCorrelation,
    ];
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Strategy> {
        match s {
            "random" => Ok(Strategy::Random),
            "uncertainty" => Ok(Strategy::Uncertainty),
            "unc-cor" => Ok(Strategy::UncertaintyCorrelation),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy '{other}' (expected random|uncertainty|unc-cor)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Uncertainty score of a candidate annotation for image x:
/// exp(-(S(x, y) - S(x, y*))) where y* is x's true annotation.
/// Close to 1 (or above) when the candidate is nearly as similar as the
/// truth, which is what makes the pair informative.
pub fn uncertainty_score(
    model: &ModelParameters<f64>,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
    y_star: ArrayView1<'_, f64>,
) -> Result<f64> {
    let emb = model.embed(x)?;
    let s_cand = model.similarity_from_embedding(emb.view(), y)?;
    let s_true = model.similarity_from_embedding(emb.view(), y_star)?;
    Ok((-(s_cand - s_true)).exp())
}

/// Intra-class correlation score of an attribute vector: the exponential
/// of its negated mean Euclidean distance to the vectors of its class.
pub fn correlation_score(y: ArrayView1<'_, f64>, class_set: &[ArrayView1<'_, f64>]) -> Result<f64> {
    if class_set.is_empty() {
        return Err(Error::EmptyClassSet(0));
    }
    let mean_dist: f64 = class_set
        .iter()
        .map(|other| {
            let diff = &y - other;
            diff.dot(&diff).sqrt()
        })
        .sum::<f64>()
        / class_set.len() as f64;
    Ok((-mean_dist).exp())
}

/// Trade-off between uncertainty and correlation: p = u * q.
pub fn combined_score(u: f64, q: f64) -> f64 {
    u * q
}

/// Negative pair-set accumulator for one training run.
#[derive(Debug, Clone)]
pub struct MiningState {
    pub strategy: Strategy,
    pub d_minus: Vec<Pair<f64>>,
    /// (image, candidate source image) pairs already selected.
    selected: BTreeSet<(usize, usize)>,
    /// q(Y) per training image row, model-independent, computed once.
    q_cache: Option<Vec<f64>>,
    rng: ChaCha8Rng,
    /// Images skipped because all their candidates were already taken.
    pub exhausted_images: usize,
}

impl MiningState {
    pub fn new(strategy: Strategy, dataset: &Dataset, pool: &CandidatePool, rng: ChaCha8Rng) -> Self {
        let q_cache = match strategy {
            Strategy::UncertaintyCorrelation => Some(build_q_cache(dataset, pool)),
            _ => None,
        };
        MiningState {
            strategy,
            d_minus: Vec::new(),
            selected: BTreeSet::new(),
            q_cache,
            rng,
            exhausted_images: 0,
        }
    }

    /// True when every class's attribute vectors are identical within the
    /// class, making q identically 1 and reducing Uncertainty/Correlation
    /// to plain Uncertainty.
    pub fn correlation_degenerate(&self) -> bool {
        self.q_cache
            .as_ref()
            .map_or(false, |q| q.iter().all(|&v| (v - 1.0).abs() < 1e-12))
    }

    fn already_selected(&self, image: usize, candidate: usize) -> bool {
        self.selected.contains(&(image, candidate))
    }

    fn push(&mut self, dataset: &Dataset, image: usize, candidate: usize) {
        self.selected.insert((image, candidate));
        self.d_minus.push(Pair {
            image_index: image,
            attributes: dataset.attributes.row(candidate).to_owned(),
            z: Sign::Negative,
            source_index: candidate,
        });
    }

    /// Draws `count` uniform negatives per positive pair, up to `cap`
    /// total. Falls back to sampling with replacement when an image has
    /// fewer unselected candidates than requested.
    pub fn grow_random(
        &mut self,
        dataset: &Dataset,
        pool: &CandidatePool,
        d_plus: &[Pair<f64>],
        count_per_positive: usize,
        cap: usize,
    ) -> Result<()> {
        for pos in d_plus {
            if self.d_minus.len() >= cap {
                break;
            }
            let image = pos.image_index;
            let candidates = pool
                .per_image_candidates
                .get(&image)
                .filter(|c| !c.is_empty())
                .ok_or(Error::EmptyCandidatePool { image })?;
            let fresh: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&c| !self.already_selected(image, c))
                .collect();
            let want = count_per_positive.min(cap - self.d_minus.len());
            if fresh.is_empty() {
                // candidates exist but were all selected in earlier epochs
                self.exhausted_images += 1;
                continue;
            }
            if fresh.len() >= want {
                // uniform without replacement
                let mut remaining = fresh;
                for _ in 0..want {
                    let idx = self.rng.gen_range(0..remaining.len());
                    let candidate = remaining.swap_remove(idx);
                    self.push(dataset, image, candidate);
                }
            } else {
                log::warn!(
                    "image {image}: only {} fresh candidates for {} requested negatives; \
                     sampling with replacement",
                    fresh.len(),
                    want
                );
                for &c in &fresh {
                    self.push(dataset, image, c);
                }
                for _ in fresh.len()..want {
                    let idx = self.rng.gen_range(0..candidates.len());
                    let candidate = candidates[idx];
                    self.selected.insert((image, candidate));
                    self.d_minus.push(Pair {
                        image_index: image,
                        attributes: dataset.attributes.row(candidate).to_owned(),
                        z: Sign::Negative,
                        source_index: candidate,
                    });
                }
            }
        }
        Ok(())
    }

    /// Per-epoch growth under the configured strategy: scores each
    /// positive image's unselected candidates, normalizes to a
    /// distribution and draws `quota` negatives per image without
    /// replacement, stopping at `cap` total pairs.
    pub fn grow_scored(
        &mut self,
        model: &ModelParameters<f64>,
        dataset: &Dataset,
        pool: &CandidatePool,
        d_plus: &[Pair<f64>],
        quota: usize,
        cap: usize,
    ) -> Result<()> {
        if quota == 0 {
            return Ok(());
        }
        for pos in d_plus {
            if self.d_minus.len() >= cap {
                break;
            }
            let image = pos.image_index;
            let candidates = pool
                .per_image_candidates
                .get(&image)
                .ok_or(Error::EmptyCandidatePool { image })?;
            let fresh: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|&c| !self.already_selected(image, c))
                .collect();
            if fresh.is_empty() {
                self.exhausted_images += 1;
                continue;
            }
            let weights = self.candidate_scores(model, dataset, image, &fresh)?;
            let want = quota.min(fresh.len()).min(cap - self.d_minus.len());
            let picks = weighted_sample_without_replacement(&weights, want, &mut self.rng);
            for p in picks {
                self.push(dataset, image, fresh[p]);
            }
        }
        Ok(())
    }

    /// Raw (unnormalized) sampling scores for the given candidate rows of
    /// one image: u_t for Uncertainty, u_t * q for Uncertainty/Correlation
    /// and all-ones for Random.
    pub fn candidate_scores(
        &self,
        model: &ModelParameters<f64>,
        dataset: &Dataset,
        image: usize,
        candidates: &[usize],
    ) -> Result<Vec<f64>> {
        if self.strategy == Strategy::Random {
            return Ok(vec![1.0; candidates.len()]);
        }
        let x = dataset.features.row(image);
        let emb = model.embed(x)?;
        let y_star = dataset.attributes.row(image);
        let s_true = model.similarity_from_embedding(emb.view(), y_star)?;
        let mut scores = Vec::with_capacity(candidates.len());
        for &c in candidates {
            let s_cand =
                model.similarity_from_embedding(emb.view(), dataset.attributes.row(c))?;
            let u = (-(s_cand - s_true)).exp();
            let score = match (&self.strategy, &self.q_cache) {
                (Strategy::UncertaintyCorrelation, Some(q)) => combined_score(u, q[c]),
                _ => u,
            };
            scores.push(score);
        }
        Ok(scores)
    }

    /// Normalized per-image sampling distribution over the image's
    /// currently unselected candidates. Used by the debug dump and tests.
    pub fn distribution(
        &self,
        model: &ModelParameters<f64>,
        dataset: &Dataset,
        pool: &CandidatePool,
        image: usize,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let candidates = pool
            .per_image_candidates
            .get(&image)
            .ok_or(Error::EmptyCandidatePool { image })?;
        let fresh: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&c| !self.already_selected(image, c))
            .collect();
        let scores = self.candidate_scores(model, dataset, image, &fresh)?;
        let total: f64 = scores.iter().sum();
        let probs = scores.iter().map(|s| s / total).collect();
        Ok((fresh, probs))
    }
}

fn build_q_cache(dataset: &Dataset, pool: &CandidatePool) -> Vec<f64> {
    // Rows of non-training images are never scored; the neutral 1.0 keeps
    // them out of the degeneracy check.
    let mut cache = vec![1.0; dataset.num_images()];
    for members in pool.class_members.values() {
        let views: Vec<_> = members.iter().map(|&i| dataset.attributes.row(i)).collect();
        for &i in members {
            cache[i] = correlation_score(dataset.attributes.row(i), &views)
                .expect("class members are non-empty");
        }
    }
    cache
}

/// Draws `n` uniform cross-class negatives for each positive pair.
pub fn random_negatives(
    dataset: &Dataset,
    pool: &CandidatePool,
    d_plus: &[Pair<f64>],
    count_per_positive: usize,
    rng: ChaCha8Rng,
) -> Result<Vec<Pair<f64>>> {
    let mut state = MiningState::new(Strategy::Random, dataset, pool, rng);
    let cap = count_per_positive * d_plus.len();
    state.grow_random(dataset, pool, d_plus, count_per_positive, cap)?;
    Ok(state.d_minus)
}

/// Draws `k` distinct indices with probability proportional to `weights`,
/// by repeated cumulative-sum inversion with the drawn weight zeroed out.
pub fn weighted_sample_without_replacement<R: Rng>(
    weights: &[f64],
    k: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut w: Vec<f64> = weights.to_vec();
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k.min(w.len()) {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.gen::<f64>() * total;
        let mut chosen = w.len() - 1;
        for (i, wi) in w.iter().enumerate() {
            if *wi <= 0.0 {
                continue;
            }
            if r < *wi {
                chosen = i;
                break;
            }
            r -= *wi;
        }
        // guard against accumulated rounding picking an exhausted slot
        if w[chosen] <= 0.0 {
            if let Some(i) = w.iter().position(|&v| v > 0.0) {
                chosen = i;
            } else {
                break;
            }
        }
        picks.push(chosen);
        w[chosen] = 0.0;
    }
    picks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_candidate_pool, generate_synthetic, SyntheticSpec};
    use crate::model::ModelParameters;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1, Array2};
    use rand::SeedableRng;

    fn small_dataset(attribute_noise_sigma: f64) -> crate::data::Dataset {
        generate_synthetic(&SyntheticSpec {
            c_total: 4,
            c_test: 1,
            images_per_class: 3,
            d: 6,
            a: 4,
            attribute_noise_sigma,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn seeded_model(seed: u64, d: usize, a: usize, m: usize) -> ModelParameters<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParameters::init(d, a, m, 0.5, &mut rng)
    }

    #[test]
    fn strategy_parsing_round_trips() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("hardest".parse::<Strategy>().is_err());
    }

    #[test]
    fn uncertainty_score_of_equal_similarities_is_one() {
        let model = seeded_model(1, 3, 2, 2);
        let x = array![0.2, -0.1, 0.4];
        let y = array![0.3, 0.7];
        let u = uncertainty_score(&model, x.view(), y.view(), y.view()).unwrap();
        assert_abs_diff_eq!(u, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_score_halves_at_ln2_gap() {
        // Identity pipeline: embed((a, b)) = (a, b), similarity = distance.
        let mut model = ModelParameters::<f64>::zeros(2, 2, 2);
        model.w_x = Array2::eye(2);
        model.w_a = Array2::eye(2);
        let x = array![0.0, 0.0];
        let y_star = array![0.0, 0.0]; // s = 0
        let gap = std::f64::consts::LN_2;
        let y = array![gap, 0.0]; // s = ln 2
        let u = uncertainty_score(&model, x.view(), y.view(), y_star.view()).unwrap();
        assert_abs_diff_eq!(u, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn uncertainty_score_matches_compose_oracle() {
        let model = seeded_model(2, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut vec = |n: usize| Array1::from_shape_fn(n, |_| rng.gen::<f64>());
        let x = vec(4);
        let y = vec(3);
        let y_star = vec(3);
        let s_cand = model.similarity(x.view(), y.view()).unwrap();
        let s_true = model.similarity(x.view(), y_star.view()).unwrap();
        let expected = (-(s_cand - s_true)).exp();
        let u = uncertainty_score(&model, x.view(), y.view(), y_star.view()).unwrap();
        assert_abs_diff_eq!(u, expected, epsilon = 1e-12);
    }

    #[test]
    fn correlation_score_degenerate_cases() {
        let y = array![1.0, 2.0];
        let singleton = vec![y.view()];
        assert_abs_diff_eq!(correlation_score(y.view(), &singleton).unwrap(), 1.0, epsilon = 1e-15);
        let same = vec![y.view(), y.view(), y.view()];
        assert_abs_diff_eq!(correlation_score(y.view(), &same).unwrap(), 1.0, epsilon = 1e-15);
        assert!(correlation_score(y.view(), &[]).is_err());
    }

    #[test]
    fn correlation_score_hand_case() {
        // class set {(0,0), (3,4)}, y = (0,0): mean distance (0 + 5)/2
        let y = array![0.0, 0.0];
        let other = array![3.0, 4.0];
        let set = vec![y.view(), other.view()];
        assert_abs_diff_eq!(
            correlation_score(y.view(), &set).unwrap(),
            (-2.5f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn combined_score_cases() {
        assert_eq!(combined_score(1.0, 1.0), 1.0);
        assert_eq!(combined_score(0.7, 1.0), 0.7);
        assert_abs_diff_eq!(
            combined_score(0.5, (-2.5f64).exp()),
            0.5 * (-2.5f64).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn weighted_sampling_forced_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks = weighted_sample_without_replacement(&[3.7], 1, &mut rng);
        assert_eq!(picks, vec![0]);
    }

    #[test]
    fn weighted_sampling_two_equiprobable_candidates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 2];
        for _ in 0..100_000 {
            let picks = weighted_sample_without_replacement(&[1.0, 1.0], 1, &mut rng);
            counts[picks[0]] += 1;
        }
        let freq = counts[0] as f64 / 100_000.0;
        assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
    }

    #[test]
    fn weighted_sampling_without_replacement_is_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let picks = weighted_sample_without_replacement(&[1.0, 2.0, 3.0, 4.0, 5.0], 3, &mut rng);
        assert_eq!(picks.len(), 3);
        let set: std::collections::BTreeSet<_> = picks.iter().collect();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn weighted_sampling_uniform_scores_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let weights = vec![2.5; 4];
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[weighted_sample_without_replacement(&weights, 1, &mut rng)[0]] += 1;
        }
        for c in counts {
            let freq = c as f64 / 100_000.0;
            assert!((freq - 0.25).abs() < 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn weighted_sampling_dominant_score_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let weights = [1e6, 1.0, 1.0, 1.0];
        let mut first = 0usize;
        for _ in 0..100_000 {
            if weighted_sample_without_replacement(&weights, 1, &mut rng)[0] == 0 {
                first += 1;
            }
        }
        assert!(first as f64 / 100_000.0 > 0.999);
    }

    #[test]
    fn grow_scored_quota_zero_is_noop() {
        let dataset = small_dataset(0.05);
        let pool = build_candidate_pool(&dataset).unwrap();
        let model = seeded_model(9, 6, 4, 2);
        let d_plus: Vec<Pair<f64>> = dataset
            .images_with_role(crate::data::Role::Train)
            .into_iter()
            .map(|i| Pair {
                image_index: i,
                attributes: dataset.attributes.row(i).to_owned(),
                z: Sign::Positive,
                source_index: i,
            })
            .collect();
        let mut state = MiningState::new(
            Strategy::Uncertainty,
            &dataset,
            &pool,
            ChaCha8Rng::seed_from_u64(1),
        );
        state
            .grow_scored(&model, &dataset, &pool, &d_plus, 0, 100)
            .unwrap();
        assert!(state.d_minus.is_empty());
    }

    #[test]
    fn growth_respects_cap_and_dedup() {
        let dataset = small_dataset(0.05);
        let pool = build_candidate_pool(&dataset).unwrap();
        let model = seeded_model(10, 6, 4, 2);
        let d_plus: Vec<Pair<f64>> = dataset
            .images_with_role(crate::data::Role::Train)
            .into_iter()
            .map(|i| Pair {
                image_index: i,
                attributes: dataset.attributes.row(i).to_owned(),
                z: Sign::Negative, // label irrelevant for growth
                source_index: i,
            })
            .collect();
        let cap = 2 * d_plus.len();
        let mut state = MiningState::new(
            Strategy::UncertaintyCorrelation,
            &dataset,
            &pool,
            ChaCha8Rng::seed_from_u64(2),
        );
        state.grow_random(&dataset, &pool, &d_plus, 1, cap).unwrap();
        assert_eq!(state.d_minus.len(), d_plus.len());
        state
            .grow_scored(&model, &dataset, &pool, &d_plus, 1, cap)
            .unwrap();
        state
            .grow_scored(&model, &dataset, &pool, &d_plus, 1, cap)
            .unwrap();
        assert_eq!(state.d_minus.len(), cap, "growth stops at the cap");
        // no duplicate (image, source) pairs, no same-class negatives
        let mut seen = std::collections::BTreeSet::new();
        for pair in &state.d_minus {
            assert!(seen.insert((pair.image_index, pair.source_index)));
            assert_ne!(
                dataset.labels[pair.image_index], dataset.labels[pair.source_index],
                "negatives must cross classes"
            );
            assert_eq!(pair.z, Sign::Negative);
        }
    }

    #[test]
    fn zero_attribute_noise_collapses_unc_cor_to_uncertainty() {
        let dataset = small_dataset(0.0);
        let pool = build_candidate_pool(&dataset).unwrap();
        let model = seeded_model(11, 6, 4, 2);
        let unc = MiningState::new(
            Strategy::Uncertainty,
            &dataset,
            &pool,
            ChaCha8Rng::seed_from_u64(3),
        );
        let unc_cor = MiningState::new(
            Strategy::UncertaintyCorrelation,
            &dataset,
            &pool,
            ChaCha8Rng::seed_from_u64(3),
        );
        assert!(unc_cor.correlation_degenerate());
        for &image in pool.per_image_candidates.keys() {
            let (c1, p1) = unc.distribution(&model, &dataset, &pool, image).unwrap();
            let (c2, p2) = unc_cor.distribution(&model, &dataset, &pool, image).unwrap();
            assert_eq!(c1, c2);
            assert_eq!(p1, p2, "distributions must be exactly equal");
        }
    }

    #[test]
    fn noisy_attributes_are_not_degenerate() {
        let dataset = small_dataset(0.1);
        let pool = build_candidate_pool(&dataset).unwrap();
        let state = MiningState::new(
            Strategy::UncertaintyCorrelation,
            &dataset,
            &pool,
            ChaCha8Rng::seed_from_u64(4),
        );
        assert!(!state.correlation_degenerate());
    }

    #[test]
    fn distribution_is_normalized() {
        let dataset = small_dataset(0.05);
        let pool = build_candidate_pool(&dataset).unwrap();
        let model = seeded_model(12, 6, 4, 2);
        for strategy in Strategy::ALL {
            let state = MiningState::new(strategy, &dataset, &pool, ChaCha8Rng::seed_from_u64(5));
            let image = *pool.per_image_candidates.keys().next().unwrap();
            let (cands, probs) = state.distribution(&model, &dataset, &pool, image).unwrap();
            assert_eq!(cands.len(), probs.len());
            assert_abs_diff_eq!(probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn random_negatives_draws_requested_count() {
        let dataset = small_dataset(0.05);
        let pool = build_candidate_pool(&dataset).unwrap();
        let d_plus: Vec<Pair<f64>> = dataset
            .images_with_role(crate::data::Role::Train)
            .into_iter()
            .map(|i| Pair {
                image_index: i,
                attributes: dataset.attributes.row(i).to_owned(),
                z: Sign::Positive,
                source_index: i,
            })
            .collect();
        let negs =
            random_negatives(&dataset, &pool, &d_plus, 2, ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(negs.len(), 2 * d_plus.len());
    }
}
