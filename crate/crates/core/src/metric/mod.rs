//! Latent-space distortion metrics.
//!
//! For one image encoded under `n` different masks, the squared distortion
//! is the mean squared distance between two latents drawn independently
//! from those `n` encodings:
//!
//! ```text
//! dist²(P) = 1/n² Σᵢⱼ ‖xᵢ − xⱼ‖² = 2/n Σᵢ ‖xᵢ − x̄‖²
//! ```
//!
//! The second form costs O(nD) instead of O(n²D). Averaging over `k`
//! images gives the dataset distortion, and dividing by `2D` (the expected
//! squared distance between two independent standard-normal vectors)
//! gives the normalized squared distortion (NSD): 0 when every mask yields
//! the same latent, about 1 when latents are unrelated noise.

mod dump;
mod protocol;
mod report;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use dump::{read_latent_dump, read_manifest, write_latent_dump, write_manifest};
pub use protocol::{collect_latents, evaluate, CallId, EvalProtocol};
pub use report::DistortionReport;

use crate::error::{Error, Result};
use crate::numeric::{mean_and_sample_std, CompensatedSum};

/// Mask count used per image by the standard evaluation protocol.
pub const DEFAULT_MASKS_PER_IMAGE: usize = 100;
/// Image count used by the standard evaluation protocol.
pub const DEFAULT_IMAGES: usize = 250;

/// Encoder output for one (image, mask) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for LatentVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// All latents of one image, one per mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSet {
    pub image_id: String,
    pub latents: Vec<LatentVector>,
}

impl LatentSet {
    pub fn new(image_id: impl Into<String>, latents: Vec<LatentVector>) -> Self {
        Self {
            image_id: image_id.into(),
            latents,
        }
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// Checks the set is usable for distortion and returns its dimension.
    pub fn validate(&self) -> Result<usize> {
        if self.latents.len() < 2 {
            return Err(Error::TooFewLatents(self.latents.len()));
        }
        let d = self.latents[0].dim();
        if d == 0 {
            return Err(Error::DegenerateSize("zero-dimensional latent".into()));
        }
        for (i, v) in self.latents.iter().enumerate() {
            if v.dim() != d {
                return Err(Error::mismatch(
                    format!("latent dimension {d}"),
                    format!("{} at mask {i} of image {}", v.dim(), self.image_id),
                ));
            }
            if let Some(j) = v.0.iter().position(|x| !x.is_finite()) {
                return Err(Error::DegenerateSize(format!(
                    "non-finite latent component {j} at mask {i} of image {}",
                    self.image_id
                )));
            }
        }
        Ok(d)
    }

    /// Component-wise mean of the latents.
    pub fn centroid(&self) -> Vec<f64> {
        let d = self.latents.first().map_or(0, LatentVector::dim);
        let n = self.latents.len() as f64;
        (0..d)
            .map(|j| {
                self.latents
                    .iter()
                    .map(|v| v.0[j])
                    .collect::<CompensatedSum>()
                    .total()
                    / n
            })
            .collect()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .collect::<CompensatedSum>()
        .total()
}

/// Quadratic-cost estimator: `1/n² Σᵢⱼ ‖xᵢ − xⱼ‖²` over all ordered pairs.
pub fn pairwise_sq_distortion(set: &LatentSet) -> Result<f64> {
    set.validate()?;
    let n = set.len();
    let mut acc = CompensatedSum::new();
    for a in &set.latents {
        for b in &set.latents {
            acc.add(sq_dist(&a.0, &b.0));
        }
    }
    Ok(acc.total() / (n * n) as f64)
}

/// Sum of squared deviations from the centroid, `Σᵢ ‖xᵢ − x̄‖²`.
fn centered_sum_of_squares(set: &LatentSet) -> f64 {
    let centroid = set.centroid();
    set.latents
        .iter()
        .map(|v| sq_dist(&v.0, &centroid))
        .collect::<CompensatedSum>()
        .total()
}

/// Linear-cost estimator: `2/n Σᵢ ‖xᵢ − x̄‖²`.
pub fn mean_sq_distortion(set: &LatentSet) -> Result<f64> {
    set.validate()?;
    Ok(2.0 * centered_sum_of_squares(set) / set.len() as f64)
}

/// Mean of per-image distortions.
pub fn dataset_distortion(per_image: &[f64]) -> Result<f64> {
    if per_image.is_empty() {
        return Err(Error::Empty("per-image distortion list"));
    }
    let total: CompensatedSum = per_image.iter().copied().collect();
    Ok(total.total() / per_image.len() as f64)
}

/// Estimates the normalized squared distortion over `k` images.
///
/// Every set must hold the same number of latents `n`, each of dimension
/// `latent_dim`. Per-image work runs in parallel; the reduction is done in
/// input order, so results do not depend on the thread count.
pub fn nsd_estimate(sets: &[LatentSet], latent_dim: usize) -> Result<DistortionReport> {
    if sets.is_empty() {
        return Err(Error::Empty("latent sets"));
    }
    if latent_dim == 0 {
        return Err(Error::DegenerateSize("latent dimension is zero".into()));
    }
    let n = sets[0].len();
    for set in sets {
        let d = set.validate()?;
        if set.len() != n {
            return Err(Error::Heterogeneous(format!(
                "image {} has {} latents, expected {n}",
                set.image_id,
                set.len()
            )));
        }
        if d != latent_dim {
            return Err(Error::Heterogeneous(format!(
                "image {} has latent dimension {d}, expected {latent_dim}",
                set.image_id
            )));
        }
    }

    let per_image_dist2: Vec<f64> = sets
        .par_iter()
        .map(|s| 2.0 * centered_sum_of_squares(s) / n as f64)
        .collect();
    let dataset_dist2 = dataset_distortion(&per_image_dist2)?;
    let norm = 2.0 * latent_dim as f64;
    let per_image_nsd: Vec<f64> = per_image_dist2.iter().map(|d| d / norm).collect();
    let (_, nsd_std) = mean_and_sample_std(&per_image_nsd);

    Ok(DistortionReport {
        image_ids: sets.iter().map(|s| s.image_id.clone()).collect(),
        per_image_dist2,
        dataset_dist2,
        nsd_mean: dataset_dist2 / norm,
        nsd_std,
        latent_dim,
        masks_per_image: n,
        images: sets.len(),
        standardized: false,
        mask_strategy: String::from("unspecified"),
    })
}

/// Monte-Carlo estimate of `E‖X − Y‖²` for independent `X, Y ~ N(0, I_D)`.
///
/// The exact value is `2D`; this sampler is the reference the `1/(2D)`
/// normalization is checked against.
///
/// # Panics
///
/// If `samples < 1000`.
pub fn chi2_reference<R: Rng + ?Sized>(dim: usize, samples: usize, rng: &mut R) -> f64 {
    chi2_moments(dim, samples, rng).0 * 2.0
}

/// Sample mean and variance of `½‖X − Y‖²`, which is χ²-distributed with
/// `D` degrees of freedom (mean `D`, variance `2D`).
///
/// # Panics
///
/// If `samples < 1000`.
pub fn chi2_moments<R: Rng + ?Sized>(dim: usize, samples: usize, rng: &mut R) -> (f64, f64) {
    assert!(
        samples >= 1000,
        "chi2 reference needs at least 1000 samples"
    );
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            let mut acc = 0.0;
            for _ in 0..dim {
                let x: f64 = rng.sample(StandardNormal);
                let y: f64 = rng.sample(StandardNormal);
                acc += (x - y) * (x - y);
            }
            0.5 * acc
        })
        .collect();
    let (mean, std) = mean_and_sample_std(&draws);
    (mean, std * std)
}

/// Pooled per-dimension statistics used by [`standardize_latents`].
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    /// Per-dimension scale; dimensions with (near) zero spread hold `EPS`.
    pub std: Vec<f64>,
    /// Dimensions whose pooled spread was below `EPS`.
    pub zero_variance_dims: Vec<usize>,
}

impl Standardization {
    pub const EPS: f64 = 1e-12;

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }
}

/// Shifts and scales every dimension so the pooled latents across all sets
/// have zero mean and unit (population) standard deviation.
pub fn standardize_latents(sets: &[LatentSet]) -> Result<(Vec<LatentSet>, Standardization)> {
    let pooled: Vec<&LatentVector> = sets.iter().flat_map(|s| &s.latents).collect();
    if pooled.len() < 2 {
        return Err(Error::TooFewLatents(pooled.len()));
    }
    let d = pooled[0].dim();
    if let Some(bad) = pooled.iter().find(|v| v.dim() != d) {
        return Err(Error::mismatch(format!("latent dimension {d}"), bad.dim()));
    }
    let count = pooled.len() as f64;
    let mut mean = Vec::with_capacity(d);
    let mut std = Vec::with_capacity(d);
    let mut zero_variance_dims = Vec::new();
    for j in 0..d {
        let m = pooled
            .iter()
            .map(|v| v.0[j])
            .collect::<CompensatedSum>()
            .total()
            / count;
        let var = pooled
            .iter()
            .map(|v| (v.0[j] - m) * (v.0[j] - m))
            .collect::<CompensatedSum>()
            .total()
            / count;
        let s = var.sqrt();
        mean.push(m);
        if s < Standardization::EPS {
            zero_variance_dims.push(j);
            std.push(Standardization::EPS);
        } else {
            std.push(s);
        }
    }
    let stats = Standardization {
        mean,
        std,
        zero_variance_dims,
    };
    let out = sets
        .iter()
        .map(|s| LatentSet {
            image_id: s.image_id.clone(),
            latents: s
                .latents
                .iter()
                .map(|v| LatentVector(stats.apply(&v.0)))
                .collect(),
        })
        .collect();
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(values: &[&[f64]]) -> LatentSet {
        LatentSet::new(
            "img",
            values.iter().map(|v| LatentVector(v.to_vec())).collect(),
        )
    }

    fn gaussian_sets(k: usize, n: usize, d: usize, seed: u64) -> Vec<LatentSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k)
            .map(|j| {
                LatentSet::new(
                    format!("img{j}"),
                    (0..n)
                        .map(|_| LatentVector((0..d).map(|_| rng.sample(StandardNormal)).collect()))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn two_point_hand_computation() {
        let s = set(&[&[1.0], &[-1.0]]);
        assert_eq!(pairwise_sq_distortion(&s).unwrap(), 2.0);
        assert_eq!(mean_sq_distortion(&s).unwrap(), 2.0);
    }

    #[test]
    fn identical_latents_have_zero_distortion() {
        let s = set(&[&[0.3, -2.0], &[0.3, -2.0], &[0.3, -2.0]]);
        assert_eq!(pairwise_sq_distortion(&s).unwrap(), 0.0);
        assert_eq!(mean_sq_distortion(&s).unwrap(), 0.0);
    }

    #[test]
    fn estimator_errors() {
        assert!(matches!(
            mean_sq_distortion(&set(&[&[1.0]])),
            Err(Error::TooFewLatents(1))
        ));
        assert!(matches!(
            pairwise_sq_distortion(&set(&[&[1.0], &[1.0, 2.0]])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dataset_distortion_cases() {
        assert_eq!(dataset_distortion(&[2.0]).unwrap(), 2.0);
        assert_eq!(dataset_distortion(&[0.0, 4.0]).unwrap(), 2.0);
        assert!(matches!(dataset_distortion(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn dataset_distortion_matches_reference_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f64> = (0..250).map(|_| rng.gen_range(0.0..500.0)).collect();
        // reference: exact integer accumulation of the values scaled to 2^-40 units
        let scale = (1u64 << 40) as f64;
        let exact: i128 = values.iter().map(|v| (v * scale).round() as i128).sum();
        let reference = exact as f64 / scale / 250.0;
        let got = dataset_distortion(&values).unwrap();
        assert!((got - reference).abs() <= 1e-12 * reference.max(1.0));
    }

    #[test]
    fn nsd_two_point() {
        let r = nsd_estimate(&[set(&[&[1.0], &[-1.0]])], 1).unwrap();
        assert_eq!(r.nsd_mean, 1.0);
        assert_eq!(r.nsd_std, 0.0);
        assert_eq!(r.dataset_dist2, 2.0);
        assert_eq!((r.latent_dim, r.masks_per_image, r.images), (1, 2, 1));
    }

    #[test]
    fn nsd_zero_for_mask_invariant_latents() {
        let sets: Vec<LatentSet> = (0..5)
            .map(|j| {
                let v = vec![j as f64, -(j as f64), 0.5];
                LatentSet::new(format!("{j}"), vec![LatentVector(v); 4])
            })
            .collect();
        let r = nsd_estimate(&sets, 3).unwrap();
        assert_eq!(r.nsd_mean, 0.0);
        assert!(r.per_image_dist2.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn nsd_of_independent_normals_is_near_one() {
        let r = nsd_estimate(&gaussian_sets(50, 100, 64, 5), 64).unwrap();
        assert!((0.95..=1.05).contains(&r.nsd_mean), "{}", r.nsd_mean);
    }

    #[test]
    fn nsd_rejects_heterogeneous_sets() {
        let mut sets = gaussian_sets(3, 4, 2, 1);
        sets[1].latents.pop();
        assert!(matches!(
            nsd_estimate(&sets, 2),
            Err(Error::Heterogeneous(_))
        ));
        let sets = gaussian_sets(3, 4, 2, 1);
        assert!(matches!(
            nsd_estimate(&sets, 3),
            Err(Error::Heterogeneous(_))
        ));
    }

    #[test]
    fn chi2_reference_matches_two_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = chi2_reference(1, 1_000_000, &mut rng);
        assert!((one - 2.0).abs() < 0.02, "{one}");
        let sixty_four = chi2_reference(64, 100_000, &mut rng);
        assert!((sixty_four - 128.0).abs() < 128.0 * 0.02, "{sixty_four}");
    }

    #[test]
    fn chi2_variance_is_two_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [1usize, 8, 32] {
            let (mean, var) = chi2_moments(d, 200_000, &mut rng);
            assert!(
                (mean - d as f64).abs() < 0.02 * d as f64,
                "D={d} mean {mean}"
            );
            assert!(
                (var - 2.0 * d as f64).abs() < 0.05 * 2.0 * d as f64,
                "D={d} var {var}"
            );
        }
    }

    #[test]
    fn standardize_constant_dimension_maps_to_zero() {
        let sets = vec![
            set(&[&[1.0, 5.0], &[3.0, 5.0]]),
            set(&[&[2.0, 5.0], &[4.0, 5.0]]),
        ];
        let (out, stats) = standardize_latents(&sets).unwrap();
        assert_eq!(stats.zero_variance_dims, vec![1]);
        assert!(out.iter().flat_map(|s| &s.latents).all(|v| v.0[1] == 0.0));
        for (orig, z) in sets.iter().zip(&out) {
            for (a, b) in orig.latents.iter().zip(&z.latents) {
                let back = stats.invert(&b.0);
                assert!(a.0.iter().zip(&back).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn standardize_recovers_unit_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shifts = [3.0, -7.0, 0.5];
        let scales = [0.1, 4.0, 2.5];
        let sets: Vec<LatentSet> = (0..20)
            .map(|j| {
                LatentSet::new(
                    format!("{j}"),
                    (0..30)
                        .map(|_| {
                            LatentVector(
                                (0..3)
                                    .map(|i| {
                                        let z: f64 = rng.sample(StandardNormal);
                                        shifts[i] + scales[i] * z
                                    })
                                    .collect(),
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        let (out, _) = standardize_latents(&sets).unwrap();
        let pooled: Vec<&LatentVector> = out.iter().flat_map(|s| &s.latents).collect();
        let m = pooled.len() as f64;
        for i in 0..3 {
            let mean: f64 = pooled.iter().map(|v| v.0[i]).sum::<f64>() / m;
            let var: f64 = pooled.iter().map(|v| (v.0[i] - mean).powi(2)).sum::<f64>() / m;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn standardizing_standardized_data_is_idempotent() {
        let (once, _) = standardize_latents(&gaussian_sets(40, 50, 4, 8)).unwrap();
        let (twice, _) = standardize_latents(&once).unwrap();
        let max_dev = once
            .iter()
            .zip(&twice)
            .flat_map(|(a, b)| a.latents.iter().zip(&b.latents))
            .flat_map(|(x, y)| x.0.iter().zip(&y.0).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        assert!(max_dev < 1e-6, "{max_dev}");
    }
}
