//! Numeric primitives shared by the rest of the crate.
//!
//! Everything is `f64`. Vector routines take plain slices so they work on
//! rows of a matrix as well as on owned [`RealVector`]s.
//!
//! Randomness comes from [`RngStream`], a PCG-64 (XSL-RR 128/64) generator
//! seeded through `SeedableRng::seed_from_u64`. Normal draws use the ziggurat
//! sampler of `rand_distr::StandardNormal`. Both algorithms are fixed, so a
//! seed reproduces the same sample sequence on every platform.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Cosines outside `[-1, 1]` by at most this much are treated as rounding.
pub const COSINE_CLAMP_TOL: f64 = 1e-9;

/// A dense, finite, non-empty vector of reals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVector(Vec<f64>);

impl RealVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("vector must have dimension >= 1"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!("entry {i} is not finite")));
        }
        Ok(RealVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "vector must have dimension >= 1");
        RealVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        RealVector::new(values)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.0
    }
}

impl Deref for RealVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for RealVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn mean(a: &[f64]) -> f64 {
    a.iter().sum::<f64>() / a.len() as f64
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// Angle between two non-zero vectors in radians, in `[0, pi]`.
///
/// The cosine is validated against `[-1, 1]` with a tolerance of
/// [`COSINE_CLAMP_TOL`]; the angle itself is evaluated as
/// `2 atan2(|a/|a| - b/|b||, |a/|a| + b/|b||)`, which equals the arccos of the
/// cosine but keeps full precision for nearly parallel vectors.
pub fn angle_between(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a.len(), b.len())?;
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || na.is_nan() {
        return Err(Error::domain("angle_between: first argument has zero norm"));
    }
    if nb == 0.0 || nb.is_nan() {
        return Err(Error::domain("angle_between: second argument has zero norm"));
    }
    let cos = dot(a, b) / (na * nb);
    if !(cos.abs() <= 1.0 + COSINE_CLAMP_TOL) {
        return Err(Error::domain(format!(
            "angle_between: cosine {cos} outside [-1, 1] beyond rounding tolerance"
        )));
    }
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (ux, uy) = (x / na, y / nb);
        diff += (ux - uy) * (ux - uy);
        sum += (ux + uy) * (ux + uy);
    }
    let angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
    Ok(angle.clamp(0.0, std::f64::consts::PI))
}

/// `v - (<v, basis> / |basis|^2) basis`.
pub fn project_out(v: &[f64], basis: &[f64]) -> Result<Vec<f64>> {
    let mut out = v.to_vec();
    project_out_in_place(&mut out, basis)?;
    Ok(out)
}

pub fn project_out_in_place(v: &mut [f64], basis: &[f64]) -> Result<()> {
    check_dims(basis.len(), v.len())?;
    let nb = norm_sq(basis);
    if nb == 0.0 {
        return Err(Error::domain("project_out: basis has zero norm"));
    }
    let coeff = dot(v, basis) / nb;
    for (x, b) in v.iter_mut().zip(basis) {
        *x -= coeff * b;
    }
    Ok(())
}

/// Removes the component along the all-ones vector, i.e. subtracts the mean.
pub fn remove_mean_in_place(v: &mut [f64]) {
    let m = mean(v);
    for x in v.iter_mut() {
        *x -= m;
    }
}

/// Root-mean-square over consecutive blocks of `factor` samples. A trailing
/// partial block is averaged over its own length.
pub fn rms_downsample(series: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor == 0 {
        return Err(Error::domain("rms_downsample: factor must be >= 1"));
    }
    Ok(series
        .chunks(factor)
        .map(|block| (block.iter().map(|x| x * x).sum::<f64>() / block.len() as f64).sqrt())
        .collect())
}

/// Seeded random stream; see the module docs for the exact algorithms.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: Pcg64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: Pcg64::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream for sub-task `index`, a pure function of
    /// `(seed, index)`.
    pub fn derive(&self, index: u64) -> RngStream {
        let mixed = self
            .seed
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
        RngStream::new(splitmix64(mixed))
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw from the closed-open interval `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], std: f64) {
        for x in out.iter_mut() {
            *x = std * self.standard_normal();
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.rng);
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` i.i.d. draws from `N(0, std^2)`.
pub fn sample_normal(rng: &mut RngStream, n: usize, std: f64) -> Result<RealVector> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::domain(format!("sample_normal: std must be >= 0, got {std}")));
    }
    if n == 0 {
        return Err(Error::domain("sample_normal: n must be >= 1"));
    }
    let mut v = vec![0.0; n];
    rng.fill_normal(&mut v, std);
    Ok(RealVector(v))
}

/// Running mean and mean-of-squares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamingMoments {
    count: u64,
    mean: f64,
    mean_sq: f64,
}

impl StreamingMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let n = self.count as f64;
        self.mean += (x - self.mean) / n;
        self.mean_sq += (x * x - self.mean_sq) / n;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn mean_sq(&self) -> f64 {
        self.mean_sq
    }

    pub fn rms(&self) -> f64 {
        self.mean_sq.max(0.0).sqrt()
    }

    /// Population variance, floored at zero.
    pub fn variance(&self) -> f64 {
        (self.mean_sq - self.mean * self.mean).max(0.0)
    }

    /// Standard error of the mean assuming independent samples.
    pub fn std_error(&self) -> f64 {
        if self.count < 2 {
            return f64::INFINITY;
        }
        let n = self.count as f64;
        (self.variance() * n / (n - 1.0) / n).sqrt()
    }
}

impl Extend<f64> for StreamingMoments {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.push(x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn angle_examples() {
        assert_eq!(angle_between(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((angle_between(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((angle_between(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - FRAC_PI_4).abs() < 1e-15);
    }

    #[test]
    fn angle_zero_norm_names_argument() {
        let err = angle_between(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("first"));
        let err = angle_between(&[1.0, 0.0], &[0.0, 0.0]).unwrap_err();
        assert!(err.to_string().contains("second"));
    }

    #[test]
    fn angle_small_rotation_is_accurate() {
        // acos(cos) would lose about half the digits here.
        let theta = 1e-7_f64;
        let a = [1.0, 0.0, 0.0];
        let b = [theta.cos(), theta.sin(), 0.0];
        let got = angle_between(&a, &b).unwrap();
        assert!((got - theta).abs() < 1e-20);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_out(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(project_out(&[2.0, 0.0], &[1.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(project_out(&[3.0, 4.0], &[0.0, 2.0]).unwrap(), vec![3.0, 0.0]);
        assert!(project_out(&[3.0, 4.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn downsample_examples() {
        let out = rms_downsample(&[3.0, 4.0], 2).unwrap();
        assert!((out[0] - 3.5355339059327378).abs() < 1e-15);
        assert_eq!(rms_downsample(&[5.0], 2).unwrap(), vec![5.0]);
        assert_eq!(rms_downsample(&[1.0; 4], 2).unwrap(), vec![1.0, 1.0]);
        assert!(rms_downsample(&[], 3).unwrap().is_empty());
        assert!(rms_downsample(&[1.0], 0).is_err());
    }

    #[test]
    fn normal_sampling() {
        let mut rng = RngStream::new(1);
        assert_eq!(sample_normal(&mut rng, 3, 0.0).unwrap().to_vec(), vec![0.0; 3]);
        assert!(sample_normal(&mut rng, 3, -1.0).is_err());

        let a = sample_normal(&mut RngStream::new(9), 100, 1.0).unwrap();
        let b = sample_normal(&mut RngStream::new(9), 100, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn normal_sampling_moments_seed_7() {
        let v = sample_normal(&mut RngStream::new(7), 1_000_000, 1.0).unwrap();
        let mut m = StreamingMoments::new();
        m.extend(v.iter().copied());
        assert!(m.mean().abs() < 0.004, "mean {}", m.mean());
        assert!((m.variance().sqrt() - 1.0).abs() < 0.004);
    }

    #[test]
    fn derived_streams_differ_and_repeat() {
        let base = RngStream::new(3);
        let mut a = base.derive(0);
        let mut b = base.derive(1);
        let mut a2 = base.derive(0);
        let x = a.standard_normal();
        assert_ne!(x, b.standard_normal());
        assert_eq!(x, a2.standard_normal());
    }

    #[test]
    fn real_vector_rejects_bad_input() {
        assert!(RealVector::new(vec![]).is_err());
        assert!(RealVector::new(vec![1.0, f64::NAN]).is_err());
        assert_eq!(RealVector::new(vec![1.0, 2.0]).unwrap().dim(), 2);
    }

    #[test]
    fn moments() {
        let mut m = StreamingMoments::new();
        m.extend([1.0, 3.0]);
        assert_eq!(m.mean(), 2.0);
        assert_eq!(m.mean_sq(), 5.0);
        assert_eq!(m.variance(), 1.0);
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0..10.0f64, 1..16).prop_filter("non-zero", |v| norm(v) > 1e-3)
    }

    proptest! {
        #[test]
        fn angle_self_and_opposite(a in nonzero_vec()) {
            let neg: Vec<f64> = a.iter().map(|x| -x).collect();
            prop_assert!(angle_between(&a, &a).unwrap().abs() <= 1e-9);
            prop_assert!((angle_between(&a, &neg).unwrap() - PI).abs() <= 1e-9);
        }

        #[test]
        fn projection_is_orthogonal(
            (v, b) in (1usize..16).prop_flat_map(|n| (
                prop::collection::vec(-10.0..10.0f64, n),
                prop::collection::vec(-10.0..10.0f64, n),
            )).prop_filter("non-zero basis", |(_, b)| norm(b) > 1e-3)
        ) {
            let p = project_out(&v, &b).unwrap();
            prop_assert!(dot(&p, &b).abs() <= 1e-12 * norm(&v).max(1e-300) * norm(&b) + 1e-300);
        }

        #[test]
        fn downsample_factor_one_is_identity(v in prop::collection::vec(0.0..1e3f64, 0..64)) {
            prop_assert_eq!(rms_downsample(&v, 1).unwrap(), v);
        }
    }
}
