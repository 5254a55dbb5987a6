//! Attack intensity, visibility, the decaying norm budget and the penalized
//! single-objective fitness `gamma - lambda * max(0, ||delta|| - epsilon)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{predict, ClassifierOracle};
use crate::scalar::Scalar;
use crate::tensor::{apply_perturbation, l2_norm_255, mse_255, ImageBatch, NormalizationSpec, Perturbation};

/// How attack intensity is scored from predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    /// Fraction of images whose top-1 differs from the label.
    #[default]
    Rate,
    /// Mean over images of `1 - p(true label)` for misclassified images, 0 otherwise.
    ConfidenceWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessReport<T> {
    pub gamma: T,
    pub mse_255: T,
    pub l2_255: T,
    pub epsilon: T,
    pub penalty: T,
    pub net_fitness: T,
    pub mean_confidence_true: T,
}

impl<T: Scalar> FitnessReport<T> {
    pub fn satisfies_constraint(&self) -> bool {
        self.l2_255 <= self.epsilon
    }
}

/// Exponential decay `eps_start * (eps_end / eps_start)^(g / horizon)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule<T> {
    eps_start: T,
    eps_end: T,
    horizon: usize,
}

impl<T: Scalar> EpsilonSchedule<T> {
    pub fn new(eps_start: T, eps_end: T, horizon: usize) -> Result<Self> {
        if !(eps_end > T::zero()) || eps_start < eps_end {
            return Err(Error::InvalidArgument(format!(
                "epsilon schedule needs eps_start >= eps_end > 0, got {eps_start} -> {eps_end}"
            )));
        }
        Ok(Self {
            eps_start,
            eps_end,
            horizon,
        })
    }

    pub fn eps_start(&self) -> T {
        self.eps_start
    }

    pub fn eps_end(&self) -> T {
        self.eps_end
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn at(&self, g: usize) -> Result<T> {
        epsilon_at(self, g)
    }
}

pub fn epsilon_at<T: Scalar>(schedule: &EpsilonSchedule<T>, g: usize) -> Result<T> {
    if g > schedule.horizon {
        return Err(Error::ScheduleExhausted {
            generation: g,
            horizon: schedule.horizon,
        });
    }
    if g == 0 {
        return Ok(schedule.eps_start);
    }
    if g == schedule.horizon {
        return Ok(schedule.eps_end);
    }
    let frac = T::from_usize_lossy(g) / T::from_usize_lossy(schedule.horizon);
    Ok(schedule.eps_start * (schedule.eps_end / schedule.eps_start).powf(frac))
}

pub fn penalized_fitness<T: Scalar>(gamma: T, l2_255: T, epsilon: T, lambda: T) -> T {
    gamma - penalty(l2_255, epsilon, lambda)
}

fn penalty<T: Scalar>(l2_255: T, epsilon: T, lambda: T) -> T {
    lambda * (l2_255 - epsilon).max(T::zero())
}

/// Attack intensity and mean true-label confidence of `delta` on `batch`.
pub fn misclassification_rate<T, O>(
    oracle: &O,
    batch: &ImageBatch<T>,
    delta: &Perturbation<T>,
    norm: &NormalizationSpec<T>,
) -> Result<(T, T)>
where
    T: Scalar,
    O: ClassifierOracle<T> + ?Sized,
{
    let perturbed = apply_perturbation(batch, delta, norm)?;
    let pred = predict(oracle, &perturbed)?;
    let wrong = batch.len() - pred.correct(batch.labels());
    Ok((
        T::from_usize_lossy(wrong) / T::from_usize_lossy(batch.len()),
        pred.mean_confidence(),
    ))
}

/// Knobs shared by every evaluation in a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitnessSettings<T> {
    pub lambda: T,
    pub gamma_mode: GammaMode,
}

impl<T: Scalar> Default for FitnessSettings<T> {
    fn default() -> Self {
        Self {
            lambda: T::lit(0.01),
            gamma_mode: GammaMode::Rate,
        }
    }
}

pub fn evaluate_chromosome<T, O>(
    oracle: &O,
    batch: &ImageBatch<T>,
    delta: &Perturbation<T>,
    norm: &NormalizationSpec<T>,
    epsilon: T,
    settings: &FitnessSettings<T>,
) -> Result<FitnessReport<T>>
where
    T: Scalar,
    O: ClassifierOracle<T> + ?Sized,
{
    if settings.lambda < T::zero() {
        return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", settings.lambda)));
    }
    let perturbed = apply_perturbation(batch, delta, norm)?;
    let pred = predict(oracle, &perturbed)?;
    let n = T::from_usize_lossy(batch.len());
    let gamma = match settings.gamma_mode {
        GammaMode::Rate => T::from_usize_lossy(batch.len() - pred.correct(batch.labels())) / n,
        GammaMode::ConfidenceWeighted => {
            pred.top1
                .iter()
                .zip(batch.labels())
                .zip(&pred.probs_true_label)
                .filter(|((p, l), _)| p != l)
                .map(|(_, prob)| T::one() - *prob)
                .sum::<T>()
                / n
        }
    };
    let l2 = l2_norm_255(delta, norm);
    let penalty = penalty(l2, epsilon, settings.lambda);
    Ok(FitnessReport {
        gamma,
        mse_255: mse_255(batch, &perturbed, norm)?,
        l2_255: l2,
        epsilon,
        penalty,
        net_fitness: gamma - penalty,
        mean_confidence_true: pred.mean_confidence(),
    })
}

/// Scores every chromosome against the same batch and the same `epsilon_g`.
///
/// Chromosomes are evaluated in parallel; the result is ordered by index.
pub fn evaluate_population<T, O>(
    oracle: &O,
    population: &[Perturbation<T>],
    batch: &ImageBatch<T>,
    g: usize,
    schedule: &EpsilonSchedule<T>,
    settings: &FitnessSettings<T>,
    norm: &NormalizationSpec<T>,
) -> Result<Vec<FitnessReport<T>>>
where
    T: Scalar,
    O: ClassifierOracle<T> + ?Sized,
{
    if population.is_empty() {
        return Err(Error::InvalidArgument("population is empty".into()));
    }
    let epsilon = schedule.at(g)?;
    population
        .par_iter()
        .map(|delta| evaluate_chromosome(oracle, batch, delta, norm, epsilon, settings))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{accuracy, DenseLayer, LinearOracle};
    use crate::tensor::ImageShape;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn schedule(horizon: usize) -> EpsilonSchedule<f64> {
        EpsilonSchedule::new(85.0, 35.0, horizon).unwrap()
    }

    #[test]
    fn epsilon_endpoints_and_midpoint() {
        let s = schedule(64);
        assert_eq!(s.at(0).unwrap(), 85.0);
        assert_eq!(s.at(64).unwrap(), 35.0);
        assert_relative_eq!(s.at(32).unwrap(), (85.0f64 * 35.0).sqrt(), max_relative = 1e-12);
        assert_relative_eq!(s.at(32).unwrap(), 54.544, epsilon = 1e-3);
        assert!(matches!(s.at(65), Err(Error::ScheduleExhausted { generation: 65, horizon: 64 })));
    }

    #[test]
    fn epsilon_is_strictly_decreasing_or_constant() {
        let s = schedule(40);
        for g in 0..40 {
            assert!(s.at(g + 1).unwrap() < s.at(g).unwrap());
        }
        let flat = EpsilonSchedule::new(10.0f64, 10.0, 5).unwrap();
        assert!((0..=5).all(|g| flat.at(g).unwrap() == 10.0));
        assert!(EpsilonSchedule::new(10.0f64, 20.0, 5).is_err());
        assert!(EpsilonSchedule::new(10.0f64, 0.0, 5).is_err());
    }

    #[test]
    fn zero_horizon_returns_start() {
        assert_eq!(schedule(0).at(0).unwrap(), 85.0);
    }

    #[test]
    fn penalized_fitness_examples() {
        assert_eq!(penalized_fitness(0.7, 30.0, 35.0, 0.01), 0.7);
        assert_relative_eq!(penalized_fitness(0.5, 45.0, 35.0, 0.01), 0.40, epsilon = 1e-12);
        assert_eq!(penalized_fitness(0.0, 35.0, 35.0, 0.01), 0.0);
    }

    /// 2x2 images, 2 classes; logit difference is the sum of pixels on channel 0.
    fn toy() -> (LinearOracle<f64>, ImageBatch<f64>, NormalizationSpec<f64>) {
        let shape = ImageShape::rgb(2, 2);
        let mut w = vec![0.0; 2 * 12];
        for i in 0..4 {
            w[i] = -1.0;
            w[12 + i] = 1.0;
        }
        let oracle = LinearOracle::linear(shape, DenseLayer::new(2, 12, w, vec![0.0, 0.0]).unwrap()).unwrap();
        let norm = NormalizationSpec::identity();
        // channel-0 pixel value v per image; class 0 when sum < 0
        let levels = [-0.1, -0.2, -0.3, 0.5];
        let data = levels
            .iter()
            .flat_map(|v| (0..12).map(move |i| if i < 4 { *v } else { 0.0 }))
            .collect();
        let batch = ImageBatch::new(shape, data, vec![0, 0, 0, 1], 0).unwrap();
        (oracle, batch, norm)
    }

    #[test]
    fn zero_delta_gamma_is_one_minus_accuracy() {
        let (oracle, batch, norm) = toy();
        let (gamma, _) = misclassification_rate(&oracle, &batch, &Perturbation::zeros(batch.shape()), &norm).unwrap();
        assert_eq!(gamma, 0.0);
        assert_eq!(gamma, 1.0 - accuracy(&oracle, &batch).unwrap());
    }

    #[test]
    fn hand_constructed_delta_flips_three_of_four() {
        let (oracle, batch, norm) = toy();
        // channel-0 shift of +0.35 per pixel: levels become 0.25, 0.15, 0.05, 0.85
        // -> predictions 1, 1, 1, 1 against labels 0, 0, 0, 1
        let genes = (0..12).map(|i| if i < 4 { 0.35 } else { 0.0 }).collect();
        let delta = Perturbation::from_genes(batch.shape(), genes).unwrap();
        let (gamma, _) = misclassification_rate(&oracle, &batch, &delta, &norm).unwrap();
        assert_eq!(gamma, 0.75);
    }

    #[test]
    fn confidence_weighted_mode() {
        let (oracle, batch, norm) = toy();
        let genes = (0..12).map(|i| if i < 4 { 0.35 } else { 0.0 }).collect();
        let delta = Perturbation::from_genes(batch.shape(), genes).unwrap();
        let settings = FitnessSettings {
            lambda: 0.0,
            gamma_mode: GammaMode::ConfidenceWeighted,
        };
        let r = evaluate_chromosome(&oracle, &batch, &delta, &norm, 1e9, &settings).unwrap();
        // logit gap 2*4*level for the three flipped images
        let expected: f64 = [0.25f64, 0.15, 0.05]
            .iter()
            .map(|v| {
                let z = 8.0 * v;
                1.0 - 1.0 / (1.0 + z.exp())
            })
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(r.gamma, expected, epsilon = 1e-12);
        assert!(r.gamma < 0.75);
    }

    #[test]
    fn population_reports_match_scalar_composition() {
        use rand::{Rng, SeedableRng};
        let (oracle, batch, norm) = toy();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pop: Vec<_> = (0..5)
            .map(|_| {
                let genes = (0..12).map(|_| rng.random_range(-0.5..0.5)).collect();
                Perturbation::from_genes(batch.shape(), genes).unwrap()
            })
            .collect();
        let sched = EpsilonSchedule::new(85.0, 35.0, 10).unwrap();
        let settings = FitnessSettings { lambda: 0.01, gamma_mode: GammaMode::Rate };
        let reports = evaluate_population(&oracle, &pop, &batch, 3, &sched, &settings, &norm).unwrap();
        let eps = 85.0 * (35.0f64 / 85.0).powf(0.3);
        for (delta, r) in pop.iter().zip(&reports) {
            let (gamma, conf) = misclassification_rate(&oracle, &batch, delta, &norm).unwrap();
            let l2 = l2_norm_255(delta, &norm);
            let perturbed = apply_perturbation(&batch, delta, &norm).unwrap();
            assert_eq!(r.gamma, gamma);
            assert_eq!(r.mean_confidence_true, conf);
            assert_eq!(r.l2_255, l2);
            assert_eq!(r.mse_255, mse_255(&batch, &perturbed, &norm).unwrap());
            assert_relative_eq!(r.epsilon, eps, max_relative = 1e-12);
            assert_eq!(r.net_fitness, penalized_fitness(gamma, l2, r.epsilon, 0.01));
        }
    }

    #[test]
    fn identical_chromosomes_give_identical_reports() {
        let (oracle, batch, norm) = toy();
        let d = Perturbation::from_genes(batch.shape(), vec![0.1; 12]).unwrap();
        let reports = evaluate_population(
            &oracle,
            &[d.clone(), d.clone(), d],
            &batch,
            0,
            &schedule(4),
            &FitnessSettings::default(),
            &norm,
        )
        .unwrap();
        assert!(reports.windows(2).all(|w| w[0] == w[1]));
        assert!(evaluate_population(&oracle, &[], &batch, 0, &schedule(4), &FitnessSettings::default(), &norm).is_err());
    }

    #[test]
    fn shifting_logits_leaves_gamma_unchanged() {
        let (oracle, batch, norm) = toy();
        let layer = oracle.output();
        let shifted_bias: Vec<f64> = layer.bias().iter().map(|b| b + 3.7).collect();
        let shifted = LinearOracle::linear(
            batch.shape(),
            DenseLayer::new(2, 12, layer.weights().to_vec(), shifted_bias).unwrap(),
        )
        .unwrap();
        let delta = Perturbation::from_genes(batch.shape(), (0..12).map(|i| i as f64 * 0.03).collect()).unwrap();
        let a = misclassification_rate(&oracle, &batch, &delta, &norm).unwrap().0;
        let b = misclassification_rate(&shifted, &batch, &delta, &norm).unwrap().0;
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn penalty_is_continuous_and_monotone(gamma in 0.0f64..1.0, eps in 1.0f64..100.0, lambda in 0.0f64..1.0, x in 0.0f64..200.0, h in 1e-6f64..10.0) {
            let f = |l2: f64| penalized_fitness(gamma, l2, eps, lambda);
            prop_assert!(f(x + h) <= f(x));
            prop_assert!(f(x) <= gamma);
            prop_assert_eq!(f(x) == gamma, x <= eps || lambda == 0.0);
            let left = f(eps - 1e-12);
            let right = f(eps + 1e-12);
            prop_assert!((left - right).abs() <= 1e-9);
        }
    }
}
