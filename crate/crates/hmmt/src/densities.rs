//! Emission densities: the parametric Gaussian null density, the weighted
//! Gaussian-kernel density estimator used for the non-null state, and Gaussian
//! mixtures. All of them expose the score f'(x)/f(x) analytically, which is
//! what the Tweedie-style shrinkage rules consume.

use crate::error::{Error, Result};
use crate::numeric::{quantile, std_dev, LN_SQRT_2PI, SQRT_2PI};

/// Kernel contributions beyond this many bandwidths are treated as exactly
/// zero: phi(8) < 1e-14, below every tolerance in the crate.
pub(crate) const KERNEL_CUTOFF: f64 = 8.0;

/// Hard floor for score denominators.
const DENSITY_FLOOR_ABS: f64 = 1e-300;
/// Soft floor, relative to the tallest kernel of the estimate.
const DENSITY_FLOOR_REL: f64 = 1e-12;

/// A probability density with an analytically evaluable score f'(x)/f(x).
pub trait Density {
    fn eval(&self, x: f64) -> f64;

    /// f'(x)/f(x). Errors with [`Error::DensityUnderflow`] when the density
    /// at `x` is below the evaluation floor.
    fn score(&self, x: f64) -> Result<f64>;

    fn log_eval(&self, x: f64) -> f64 {
        self.eval(x).ln()
    }
}

impl<D: Density + ?Sized> Density for &D {
    fn eval(&self, x: f64) -> f64 {
        (**self).eval(x)
    }
    fn score(&self, x: f64) -> Result<f64> {
        (**self).score(x)
    }
    fn log_eval(&self, x: f64) -> f64 {
        (**self).log_eval(x)
    }
}

/// Gaussian density with location `nu` and scale `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDensity {
    location: f64,
    scale: f64,
}

impl GaussianDensity {
    pub fn new(location: f64, scale: f64) -> Result<Self> {
        if !location.is_finite() || !scale.is_finite() || scale <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "Gaussian density needs finite location and positive scale, got ({location}, {scale})"
            )));
        }
        Ok(Self { location, scale })
    }

    pub fn location(&self) -> f64 {
        self.location
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Same location, scale widened to sqrt(scale^2 + extra_variance).
    pub fn convolve_extra_variance(&self, extra_variance: f64) -> Self {
        Self {
            location: self.location,
            scale: (self.scale * self.scale + extra_variance).sqrt(),
        }
    }
}

impl Density for GaussianDensity {
    fn eval(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        (-0.5 * z * z).exp() / (self.scale * SQRT_2PI)
    }

    fn log_eval(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.scale;
        -0.5 * z * z - self.scale.ln() - LN_SQRT_2PI
    }

    /// The Gaussian score is exact and never underflows: -(x - nu)/tau^2.
    fn score(&self, x: f64) -> Result<f64> {
        Ok(-(x - self.location) / (self.scale * self.scale))
    }
}

/// Weighted kernel density estimate with a standard Gaussian kernel:
/// f(x) = sum_i w_i/h K((x_i - x)/h), weights nonnegative and summing to one.
///
/// Support points are stored sorted ascending (weights aligned) so evaluation
/// can restrict to the kernel window around the query point.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedKde {
    points: Vec<f64>,
    weights: Vec<f64>,
    bandwidth: f64,
    max_weight: f64,
}

impl WeightedKde {
    /// Builds the estimate; weights are normalized to sum to one.
    pub fn new(points: Vec<f64>, weights: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter("KDE needs at least one support point".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: points.len(),
                got: weights.len(),
            });
        }
        if !bandwidth.is_finite() || bandwidth <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "KDE bandwidth must be positive, got {bandwidth}"
            )));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidParameter("KDE support points must be finite".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParameter("KDE weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("KDE weights must have positive total".into()));
        }

        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].partial_cmp(&points[b]).unwrap());
        let sorted_points: Vec<f64> = order.iter().map(|&i| points[i]).collect();
        let sorted_weights: Vec<f64> = order.iter().map(|&i| weights[i] / total).collect();
        let max_weight = sorted_weights.iter().cloned().fold(0.0, f64::max);

        Ok(Self {
            points: sorted_points,
            weights: sorted_weights,
            bandwidth,
            max_weight,
        })
    }

    /// KDE with equal mass on every support point.
    pub fn uniform(points: Vec<f64>, bandwidth: f64) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n], bandwidth)
    }

    /// Support points, sorted ascending.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Weights aligned with `points()`, summing to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Smallest and largest support point.
    pub fn support_hull(&self) -> (f64, f64) {
        (self.points[0], *self.points.last().unwrap())
    }

    /// Index range of support points within the kernel window of `x`.
    #[inline]
    fn window(&self, x: f64) -> (usize, usize) {
        let cut = KERNEL_CUTOFF * self.bandwidth;
        let lo = self.points.partition_point(|&p| p < x - cut);
        let hi = self.points.partition_point(|&p| p <= x + cut);
        (lo, hi)
    }

    /// The density floor below which score queries are rejected.
    fn floor(&self) -> f64 {
        let tallest = self.max_weight / (self.bandwidth * SQRT_2PI);
        DENSITY_FLOOR_ABS.max(DENSITY_FLOOR_REL * tallest)
    }

    /// Weighted kernel sums at `x`: (sum w K, sum w (p - x) K), both without
    /// the 1/h density normalization.
    #[inline]
    fn kernel_sums(&self, x: f64) -> (f64, f64) {
        let (lo, hi) = self.window(x);
        let inv_h = 1.0 / self.bandwidth;
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        for i in lo..hi {
            let d = self.points[i] - x;
            let t = d * inv_h;
            let k = (-0.5 * t * t).exp();
            let wk = self.weights[i] * k;
            s0 += wk;
            s1 += wk * d;
        }
        (s0 / SQRT_2PI, s1 / SQRT_2PI)
    }
}

impl Density for WeightedKde {
    fn eval(&self, x: f64) -> f64 {
        let (lo, hi) = self.window(x);
        let inv_h = 1.0 / self.bandwidth;
        let mut acc = 0.0;
        for i in lo..hi {
            let t = (self.points[i] - x) * inv_h;
            acc += self.weights[i] * (-0.5 * t * t).exp();
        }
        acc / (self.bandwidth * SQRT_2PI)
    }

    /// Analytic score of the Gaussian-kernel estimate:
    /// [sum_i w_i (x_i - x) K_i] / [h^2 sum_i w_i K_i].
    fn score(&self, x: f64) -> Result<f64> {
        let (s0, s1) = self.kernel_sums(x);
        let density = s0 / self.bandwidth;
        if density < self.floor() {
            return Err(Error::DensityUnderflow { x });
        }
        Ok(s1 / (self.bandwidth * self.bandwidth * s0))
    }
}

/// One Gaussian mixture component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Finite Gaussian mixture; weights normalized to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture needs at least one component".into()));
        }
        for c in &components {
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "mixture weight must be nonnegative, got {}",
                    c.weight
                )));
            }
            if !c.mean.is_finite() || !c.sd.is_finite() || c.sd <= 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "mixture component needs finite mean and positive sd, got ({}, {})",
                    c.mean, c.sd
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if total <= 0.0 {
            return Err(Error::InvalidParameter("mixture weights must have positive total".into()));
        }
        let components = components
            .into_iter()
            .map(|c| MixtureComponent {
                weight: c.weight / total,
                ..c
            })
            .collect();
        Ok(Self { components })
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn component_count(&self) -> usize {
        self.components.len()
    }

    /// Mode approximated by the highest-density component mean; exact for a
    /// single component and adequate for the truncated rule's centering.
    pub fn mode(&self) -> f64 {
        self.components
            .iter()
            .map(|c| (c.mean, self.eval(c.mean)))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(m, _)| m)
            .unwrap()
    }

    /// Every component widened by the same extra variance.
    pub fn convolve_extra_variance(&self, extra_variance: f64) -> Self {
        Self {
            components: self
                .components
                .iter()
                .map(|c| MixtureComponent {
                    weight: c.weight,
                    mean: c.mean,
                    sd: (c.sd * c.sd + extra_variance).sqrt(),
                })
                .collect(),
        }
    }
}

impl Density for GaussianMixture {
    fn eval(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let z = (x - c.mean) / c.sd;
                c.weight * (-0.5 * z * z).exp() / (c.sd * SQRT_2PI)
            })
            .sum()
    }

    /// Mixture score as the density-weighted average of component scores.
    fn score(&self, x: f64) -> Result<f64> {
        let mut den = 0.0;
        let mut num = 0.0;
        for c in &self.components {
            let z = (x - c.mean) / c.sd;
            let pdf = c.weight * (-0.5 * z * z).exp() / (c.sd * SQRT_2PI);
            den += pdf;
            num += pdf * (-(x - c.mean) / (c.sd * c.sd));
        }
        if den < DENSITY_FLOOR_ABS {
            return Err(Error::DensityUnderflow { x });
        }
        Ok(num / den)
    }
}

/// In-control density: either a fitted/knowable Gaussian or a fixed mixture
/// supplied by the caller (real-data workflows).
#[derive(Debug, Clone, PartialEq)]
pub enum NullDensity {
    Gaussian(GaussianDensity),
    Mixture(GaussianMixture),
}

impl NullDensity {
    /// Mode of the density; the in-control center used by the truncated rule.
    pub fn mode(&self) -> f64 {
        match self {
            NullDensity::Gaussian(g) => g.location(),
            NullDensity::Mixture(m) => m.mode(),
        }
    }

    pub fn convolve_extra_variance(&self, extra_variance: f64) -> Self {
        match self {
            NullDensity::Gaussian(g) => {
                NullDensity::Gaussian(g.convolve_extra_variance(extra_variance))
            }
            NullDensity::Mixture(m) => {
                NullDensity::Mixture(m.convolve_extra_variance(extra_variance))
            }
        }
    }
}

impl Density for NullDensity {
    fn eval(&self, x: f64) -> f64 {
        match self {
            NullDensity::Gaussian(g) => g.eval(x),
            NullDensity::Mixture(m) => m.eval(x),
        }
    }

    fn score(&self, x: f64) -> Result<f64> {
        match self {
            NullDensity::Gaussian(g) => g.score(x),
            NullDensity::Mixture(m) => m.score(x),
        }
    }

    fn log_eval(&self, x: f64) -> f64 {
        match self {
            NullDensity::Gaussian(g) => g.log_eval(x),
            NullDensity::Mixture(m) => m.log_eval(x),
        }
    }
}

/// Silverman's rule-of-thumb bandwidth, robust variant:
/// 0.9 min(sd, IQR/1.34) n^(-1/5). Returns 0 for a spread-free sample.
pub fn silverman_bandwidth(points: &[f64]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let sd = std_dev(points);
    let iqr = quantile(points, 0.75) - quantile(points, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (points.len() as f64).powf(-0.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_log_score<D: Density>(d: &D, x: f64, step: f64) -> f64 {
        (d.eval(x + step).ln() - d.eval(x - step).ln()) / (2.0 * step)
    }

    #[test]
    fn gaussian_eval_known_values() {
        let std = GaussianDensity::new(0.0, 1.0).unwrap();
        assert!((std.eval(0.0) - 0.398942).abs() < 1e-6);
        assert!((std.eval(1.0) - 0.241971).abs() < 1e-6);
        // Scale identity: peak of N(2, 0.5) is 1/(0.5 sqrt(2 pi)).
        let narrow = GaussianDensity::new(2.0, 0.5).unwrap();
        assert!((narrow.eval(2.0) - 0.797885).abs() < 1e-6);
    }

    #[test]
    fn gaussian_log_eval_consistent() {
        let d = GaussianDensity::new(1.5, 0.3).unwrap();
        for x in [-2.0, 0.0, 1.5, 4.0] {
            assert!((d.log_eval(x) - d.eval(x).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_score_values_and_linearity() {
        let std = GaussianDensity::new(0.0, 1.0).unwrap();
        assert_eq!(std.score(0.0).unwrap(), 0.0);
        assert_eq!(std.score(2.0).unwrap(), -2.0);

        // Finite-difference oracle at (nu=1, tau=2, x=3): expect -0.5.
        let d = GaussianDensity::new(1.0, 2.0).unwrap();
        let fd = fd_log_score(&d, 3.0, 1e-6);
        let s = d.score(3.0).unwrap();
        assert!((s - -0.5).abs() < 1e-12);
        assert!((s - fd).abs() < 1e-6);

        // Exactly linear in x with slope -1/tau^2.
        let slope = (d.score(5.0).unwrap() - d.score(1.0).unwrap()) / 4.0;
        assert!((slope - -0.25).abs() < 1e-15);
    }

    #[test]
    fn gaussian_rejects_bad_scale() {
        assert!(GaussianDensity::new(0.0, 0.0).is_err());
        assert!(GaussianDensity::new(0.0, -1.0).is_err());
        assert!(GaussianDensity::new(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn kde_eval_known_values() {
        let single = WeightedKde::new(vec![0.0], vec![1.0], 1.0).unwrap();
        assert!((single.eval(0.0) - 0.398942).abs() < 1e-6);

        let wide = WeightedKde::new(vec![0.0], vec![1.0], 2.0).unwrap();
        assert!((wide.eval(0.0) - 0.199471).abs() < 1e-6);

        // Two symmetric kernels, evaluated at the midpoint: phi(1).
        let pair = WeightedKde::new(vec![-1.0, 1.0], vec![0.5, 0.5], 1.0).unwrap();
        let direct = 0.5 * (-0.5f64).exp() / SQRT_2PI + 0.5 * (-0.5f64).exp() / SQRT_2PI;
        assert!((pair.eval(0.0) - direct).abs() < 1e-15);
        assert!((pair.eval(0.0) - 0.241971).abs() < 1e-6);
    }

    #[test]
    fn kde_score_known_values() {
        let single = WeightedKde::new(vec![0.0], vec![1.0], 1.0).unwrap();
        assert_eq!(single.score(0.0).unwrap(), 0.0);

        let pair = WeightedKde::new(vec![-1.0, 1.0], vec![0.5, 0.5], 1.0).unwrap();
        assert!(pair.score(0.0).unwrap().abs() < 1e-15);

        // Single Gaussian: score is -(x - x1)/h^2; cross-check by FD.
        let s = single.score(0.5).unwrap();
        assert!((s - -0.5).abs() < 1e-12);
        let fd = fd_log_score(&single, 0.5, 1e-6);
        assert!((s - fd).abs() < 1e-5);
    }

    #[test]
    fn kde_normalizes_weights() {
        let k = WeightedKde::new(vec![1.0, 2.0], vec![2.0, 6.0], 0.5).unwrap();
        let w = k.weights();
        assert!((w[0] - 0.25).abs() < 1e-15);
        assert!((w[1] - 0.75).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kde_sorts_support() {
        let k = WeightedKde::new(vec![3.0, -1.0, 2.0], vec![0.2, 0.5, 0.3], 1.0).unwrap();
        assert_eq!(k.points(), &[-1.0, 2.0, 3.0]);
        assert_eq!(k.weights(), &[0.5, 0.3, 0.2]);
        assert_eq!(k.support_hull(), (-1.0, 3.0));
    }

    #[test]
    fn kde_uniform_weights_equal_unweighted() {
        let pts = vec![0.3, -1.2, 4.0, 2.2, 0.0];
        let k1 = WeightedKde::uniform(pts.clone(), 0.7).unwrap();
        let k2 = WeightedKde::new(pts.clone(), vec![7.0; 5], 0.7).unwrap();
        for x in [-2.0, 0.0, 1.3, 5.0] {
            let a = k1.eval(x);
            let b = k2.eval(x);
            // Same code path, identical arithmetic.
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }

    #[test]
    fn kde_score_underflows_far_from_support() {
        let k = WeightedKde::new(vec![0.0], vec![1.0], 0.1).unwrap();
        // 8 bandwidths away the kernel is cut to exactly zero.
        match k.score(5.0) {
            Err(Error::DensityUnderflow { .. }) => {}
            other => panic!("expected underflow, got {other:?}"),
        }
        assert_eq!(k.eval(5.0), 0.0);
    }

    #[test]
    fn kde_kernel_cutoff_bounds_window() {
        let k = WeightedKde::new(vec![0.0, 100.0], vec![0.5, 0.5], 1.0).unwrap();
        // Query near the first point sees no contribution from the second.
        let lone = WeightedKde::new(vec![0.0], vec![1.0], 1.0).unwrap();
        assert!((k.eval(0.0) - 0.5 * lone.eval(0.0)).abs() < 1e-16);
    }

    #[test]
    fn kde_rejects_invalid_input() {
        assert!(WeightedKde::new(vec![], vec![], 1.0).is_err());
        assert!(WeightedKde::new(vec![0.0], vec![1.0, 2.0], 1.0).is_err());
        assert!(WeightedKde::new(vec![0.0], vec![-1.0], 1.0).is_err());
        assert!(WeightedKde::new(vec![0.0], vec![0.0], 1.0).is_err());
        assert!(WeightedKde::new(vec![0.0], vec![1.0], 0.0).is_err());
    }

    #[test]
    fn mixture_eval_and_score() {
        let m = GaussianMixture::new(vec![
            MixtureComponent { weight: 0.4, mean: -1.0, sd: 0.8 },
            MixtureComponent { weight: 0.6, mean: 2.0, sd: 1.5 },
        ])
        .unwrap();
        for x in [-2.0, 0.0, 0.7, 3.0] {
            let fd = fd_log_score(&m, x, 1e-6);
            assert!((m.score(x).unwrap() - fd).abs() < 1e-5);
        }
        // Single component reduces to the Gaussian.
        let g = GaussianDensity::new(2.0, 1.5).unwrap();
        let m1 = GaussianMixture::new(vec![MixtureComponent { weight: 1.0, mean: 2.0, sd: 1.5 }])
            .unwrap();
        for x in [-1.0, 2.0, 4.5] {
            assert!((m1.eval(x) - g.eval(x)).abs() < 1e-15);
            assert!((m1.score(x).unwrap() - g.score(x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_mode_picks_highest_density_component() {
        let m = GaussianMixture::new(vec![
            MixtureComponent { weight: 0.2, mean: 0.0, sd: 1.0 },
            MixtureComponent { weight: 0.8, mean: 5.0, sd: 1.0 },
        ])
        .unwrap();
        assert_eq!(m.mode(), 5.0);
    }

    #[test]
    fn null_density_dispatch() {
        let g = NullDensity::Gaussian(GaussianDensity::new(1.0, 2.0).unwrap());
        assert_eq!(g.mode(), 1.0);
        assert!((g.score(3.0).unwrap() - -0.5).abs() < 1e-15);
        let widened = g.convolve_extra_variance(5.0);
        match widened {
            NullDensity::Gaussian(ref d) => assert!((d.scale() - 3.0).abs() < 1e-15),
            _ => unreachable!(),
        }
    }

    #[test]
    fn silverman_positive_on_spread_data() {
        let pts: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        let h = silverman_bandwidth(&pts);
        assert!(h > 0.0);
        assert_eq!(silverman_bandwidth(&[1.0, 1.0, 1.0]), 0.0);
    }
}
