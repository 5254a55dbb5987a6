//! Variation and selection operators. Every operator keeps genes inside
//! their [`PerturbationBounds`] box: crossover only swaps genes, mutation
//! samples inside the box and cleaning writes zero, which the symmetric box
//! always contains.

use rand::distr::{Bernoulli, Distribution};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::fitness::FitnessReport;
use crate::scalar::Scalar;
use crate::tensor::{Perturbation, PerturbationBounds};

fn coin(p: f64) -> Bernoulli {
    Bernoulli::new(p.clamp(0.0, 1.0)).expect("probability clamped to [0, 1]")
}

#[inline]
fn sample_gene<T: Scalar, R: Rng + ?Sized>(upper: T, rng: &mut R) -> T {
    if upper > T::zero() {
        rng.random_range(-upper..=upper)
    } else {
        T::zero()
    }
}

/// A mostly-zero chromosome: each gene is nonzero with probability `density`,
/// drawn uniformly from its interval.
pub fn random_chromosome<T: Scalar, R: Rng + ?Sized>(
    bounds: &PerturbationBounds<T>,
    density: f64,
    rng: &mut R,
) -> Perturbation<T> {
    let pick = coin(density);
    let genes = bounds
        .upper()
        .iter()
        .map(|u| {
            if pick.sample(rng) {
                sample_gene(*u, rng)
            } else {
                T::zero()
            }
        })
        .collect();
    Perturbation::from_genes(bounds.shape(), genes).expect("genes sized from bounds")
}

pub fn init_population<T: Scalar, R: Rng + ?Sized>(
    bounds: &PerturbationBounds<T>,
    population_size: usize,
    density: f64,
    rng: &mut R,
) -> Vec<Perturbation<T>> {
    (0..population_size)
        .map(|_| random_chromosome(bounds, density, rng))
        .collect()
}

/// Highest net fitness among `candidates`; ties go to the lowest index.
pub fn tournament_winner<T: Scalar>(reports: &[FitnessReport<T>], candidates: &[usize]) -> usize {
    let mut best = candidates[0];
    for &i in &candidates[1..] {
        let (fi, fb) = (reports[i].net_fitness, reports[best].net_fitness);
        if fi > fb || (fi == fb && i < best) {
            best = i;
        }
    }
    best
}

/// Samples `size` distinct indices uniformly and returns the fittest.
pub fn tournament_select<T: Scalar, R: Rng + ?Sized>(
    reports: &[FitnessReport<T>],
    size: usize,
    rng: &mut R,
) -> usize {
    let size = size.clamp(1, reports.len());
    let candidates = index::sample(rng, reports.len(), size).into_vec();
    tournament_winner(reports, &candidates)
}

/// Per gene, `child1` takes `a`'s value with probability 1/2 and `child2`
/// takes the other parent's value at the same locus.
pub fn uniform_crossover<T: Scalar, R: Rng + ?Sized>(
    a: &Perturbation<T>,
    b: &Perturbation<T>,
    rng: &mut R,
) -> Result<(Perturbation<T>, Perturbation<T>)> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let n = a.genes().len();
    let mut c1 = Vec::with_capacity(n);
    let mut c2 = Vec::with_capacity(n);
    for (x, y) in a.genes().iter().zip(b.genes()) {
        if rng.random::<bool>() {
            c1.push(*x);
            c2.push(*y);
        } else {
            c1.push(*y);
            c2.push(*x);
        }
    }
    Ok((
        Perturbation::from_genes(a.shape(), c1)?,
        Perturbation::from_genes(a.shape(), c2)?,
    ))
}

/// Gene re-randomization. Returns how many genes were resampled.
pub fn mutate<T: Scalar, R: Rng + ?Sized>(
    chromosome: &mut Perturbation<T>,
    bounds: &PerturbationBounds<T>,
    p_flip: f64,
    rng: &mut R,
) -> Result<usize> {
    if chromosome.shape() != bounds.shape() {
        return Err(Error::shape(bounds.shape(), chromosome.shape()));
    }
    let flip = coin(p_flip);
    let mut flipped = 0;
    for (g, u) in chromosome.genes_mut().iter_mut().zip(bounds.upper()) {
        if flip.sample(rng) {
            *g = sample_gene(*u, rng);
            flipped += 1;
        }
    }
    Ok(flipped)
}

/// Zeroes each gene with probability `lambda_t0`, but only while the
/// chromosome violates the norm budget (`l2_255 > epsilon`). When the gate
/// is closed the chromosome and the generator are left untouched.
///
/// Returns how many genes were selected for zeroing.
pub fn pixel_clean<T: Scalar, R: Rng + ?Sized>(
    chromosome: &mut Perturbation<T>,
    l2_255: T,
    epsilon: T,
    lambda_t0: f64,
    rng: &mut R,
) -> usize {
    if l2_255 <= epsilon {
        return 0;
    }
    let zap = coin(lambda_t0);
    let mut zeroed = 0;
    for g in chromosome.genes_mut() {
        if zap.sample(rng) {
            *g = T::zero();
            zeroed += 1;
        }
    }
    zeroed
}

/// [`pixel_clean`] gated by an existing evaluation of the chromosome.
pub fn pixel_clean_with_report<T: Scalar, R: Rng + ?Sized>(
    chromosome: &mut Perturbation<T>,
    report: &FitnessReport<T>,
    lambda_t0: f64,
    rng: &mut R,
) -> usize {
    pixel_clean(chromosome, report.l2_255, report.epsilon, lambda_t0, rng)
}
