//! Scenario generators for the simulation study: Markov state paths,
//! out-of-control priors, exact marginal densities by quadrature convolution,
//! the replication runner, and MSE scoring.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Normal, Weibull};

use rayon::prelude::*;

use crate::baselines::{gmm_fit, tnd_estimate, MixtureSelector};
use crate::densities::{Density, GaussianDensity};
use crate::error::{Error, Result};
use crate::fit::{fit_hmmt, FitConfig};
use crate::hmm::TransitionMatrix;
use crate::numeric::{derive_seed, integrate_segmented, SQRT_2PI};
use crate::shrinkage::{oracle_rule, ShrinkageResult};

/// An observed sequence with its known noise scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub values: Vec<f64>,
    pub sigma: f64,
}

impl Sequence {
    pub fn new(values: Vec<f64>, sigma: f64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("sequence entries must be finite".into()));
        }
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise scale must be positive, got {sigma}"
            )));
        }
        Ok(Self { values, sigma })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Out-of-control prior families used by the simulation scenarios.
#[derive(Debug, Clone, PartialEq)]
pub enum Prior {
    Uniform { lo: f64, hi: f64 },
    Triangle { lo: f64, hi: f64, mode: f64 },
    Levy { scale: f64 },
    NoncentralChiSq { df: f64, ncp: f64 },
    Weibull { shape: f64, scale: f64 },
    Burr { c: f64, k: f64, scale: f64 },
    Mixture(Vec<(f64, Prior)>),
}

impl Prior {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidParameter(format!("uniform needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Prior::Uniform { lo, hi })
    }

    pub fn triangle(lo: f64, hi: f64, mode: f64) -> Result<Self> {
        if !(lo < hi) || !(lo <= mode && mode <= hi) {
            return Err(Error::InvalidParameter(format!(
                "triangle needs lo < hi and mode inside, got [{lo}, {hi}] mode {mode}"
            )));
        }
        Ok(Prior::Triangle { lo, hi, mode })
    }

    pub fn levy(scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::InvalidParameter(format!("Levy scale must be positive, got {scale}")));
        }
        Ok(Prior::Levy { scale })
    }

    pub fn noncentral_chisq(df: f64, ncp: f64) -> Result<Self> {
        if !(df >= 1.0) || !(ncp >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "noncentral chi-square needs df >= 1 and ncp >= 0, got ({df}, {ncp})"
            )));
        }
        Ok(Prior::NoncentralChiSq { df, ncp })
    }

    pub fn weibull(shape: f64, scale: f64) -> Result<Self> {
        if !(shape > 0.0) || !(scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Weibull needs positive shape and scale, got ({shape}, {scale})"
            )));
        }
        Ok(Prior::Weibull { shape, scale })
    }

    /// Burr type XII with shape parameters `c`, `k` and a scale.
    pub fn burr(c: f64, k: f64, scale: f64) -> Result<Self> {
        if !(c > 0.0) || !(k > 0.0) || !(scale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Burr needs positive parameters, got ({c}, {k}, {scale})"
            )));
        }
        Ok(Prior::Burr { c, k, scale })
    }

    pub fn mixture(components: Vec<(f64, Prior)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidParameter("mixture prior needs components".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if components.iter().any(|(w, _)| *w < 0.0) || total <= 0.0 {
            return Err(Error::InvalidParameter("mixture weights must be nonnegative with positive total".into()));
        }
        let components = components
            .into_iter()
            .map(|(w, p)| (w / total, p))
            .collect();
        Ok(Prior::Mixture(components))
    }

    /// Density of the prior at `u`.
    pub fn pdf(&self, u: f64) -> f64 {
        match self {
            Prior::Uniform { lo, hi } => {
                if u >= *lo && u <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            Prior::Triangle { lo, hi, mode } => {
                if u < *lo || u > *hi {
                    0.0
                } else if u < *mode {
                    2.0 * (u - lo) / ((hi - lo) * (mode - lo))
                } else if u > *mode {
                    2.0 * (hi - u) / ((hi - lo) * (hi - mode))
                } else {
                    2.0 / (hi - lo)
                }
            }
            Prior::Levy { scale } => {
                if u <= 0.0 {
                    0.0
                } else {
                    (scale / (2.0 * std::f64::consts::PI)).sqrt()
                        * (-scale / (2.0 * u)).exp()
                        / (u * u.sqrt())
                }
            }
            Prior::NoncentralChiSq { df, ncp } => noncentral_chisq_pdf(u, *df, *ncp),
            Prior::Weibull { shape, scale } => {
                if u < 0.0 || (u == 0.0 && *shape < 1.0) {
                    0.0
                } else if u == 0.0 {
                    if *shape == 1.0 {
                        1.0 / scale
                    } else {
                        0.0
                    }
                } else {
                    let t = u / scale;
                    (shape / scale) * t.powf(shape - 1.0) * (-t.powf(*shape)).exp()
                }
            }
            Prior::Burr { c, k, scale } => {
                if u <= 0.0 {
                    0.0
                } else {
                    let t = u / scale;
                    (c * k / scale) * t.powf(c - 1.0) * (1.0 + t.powf(*c)).powf(-k - 1.0)
                }
            }
            Prior::Mixture(parts) => parts.iter().map(|(w, p)| w * p.pdf(u)).sum(),
        }
    }

    /// Support interval; unbounded ends are infinite.
    pub fn support(&self) -> (f64, f64) {
        match self {
            Prior::Uniform { lo, hi } => (*lo, *hi),
            Prior::Triangle { lo, hi, .. } => (*lo, *hi),
            Prior::Levy { .. } | Prior::Burr { .. } => (0.0, f64::INFINITY),
            Prior::NoncentralChiSq { .. } | Prior::Weibull { .. } => (0.0, f64::INFINITY),
            Prior::Mixture(parts) => parts.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY),
                |(lo, hi), (_, p)| {
                    let (a, b) = p.support();
                    (lo.min(a), hi.max(b))
                },
            ),
        }
    }

    /// Points where the density is non-smooth; quadrature panels are split
    /// there. Half-line priors get a graded mesh near the origin because
    /// their densities behave like a fractional power there.
    fn breakpoints(&self) -> Vec<f64> {
        match self {
            Prior::Uniform { lo, hi } => vec![*lo, *hi],
            Prior::Triangle { lo, hi, mode } => vec![*lo, *mode, *hi],
            Prior::Mixture(parts) => {
                let mut b: Vec<f64> = parts.iter().flat_map(|(_, p)| p.breakpoints()).collect();
                b.sort_by(|a, c| a.partial_cmp(c).unwrap());
                b.dedup();
                b
            }
            _ => vec![0.0, 0.005, 0.05, 0.5],
        }
    }

    /// One draw from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Prior::Uniform { lo, hi } => rng.random_range(*lo..*hi),
            Prior::Triangle { lo, hi, mode } => {
                let p: f64 = rng.random();
                let fc = (mode - lo) / (hi - lo);
                if p < fc {
                    lo + (p * (hi - lo) * (mode - lo)).sqrt()
                } else {
                    hi - ((1.0 - p) * (hi - lo) * (hi - mode)).sqrt()
                }
            }
            Prior::Levy { scale } => {
                // Levy(c) equals c / Z^2 for standard normal Z.
                let normal = Normal::new(0.0, 1.0).unwrap();
                loop {
                    let z: f64 = normal.sample(rng);
                    if z != 0.0 {
                        return scale / (z * z);
                    }
                }
            }
            Prior::NoncentralChiSq { df, ncp } => {
                let normal = Normal::new(0.0, 1.0).unwrap();
                let z: f64 = normal.sample(rng);
                let shifted = (z + ncp.sqrt()) * (z + ncp.sqrt());
                if *df > 1.0 {
                    let central: f64 = ChiSquared::new(df - 1.0).unwrap().sample(rng);
                    central + shifted
                } else {
                    shifted
                }
            }
            Prior::Weibull { shape, scale } => {
                Weibull::new(*scale, *shape).unwrap().sample(rng)
            }
            Prior::Burr { c, k, scale } => {
                let p: f64 = rng.random();
                scale * ((1.0 - p).powf(-1.0 / k) - 1.0).powf(1.0 / c)
            }
            Prior::Mixture(parts) => {
                let p: f64 = rng.random();
                let mut acc = 0.0;
                for (w, prior) in parts {
                    acc += w;
                    if p < acc {
                        return prior.sample(rng);
                    }
                }
                parts.last().unwrap().1.sample(rng)
            }
        }
    }
}

/// Series form of the noncentral chi-square density: a Poisson(ncp/2)
/// mixture of central chi-square densities.
fn noncentral_chisq_pdf(u: f64, df: f64, ncp: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if ncp == 0.0 {
        return central_chisq_pdf(u, df);
    }
    let half = ncp / 2.0;
    let max_j = (half + 12.0 * half.sqrt() + 25.0) as usize;
    let mut log_w = -half; // log Poisson weight at j = 0
    let mut acc = 0.0;
    for j in 0..=max_j {
        if j > 0 {
            log_w += half.ln() - (j as f64).ln();
        }
        acc += log_w.exp() * central_chisq_pdf(u, df + 2.0 * j as f64);
    }
    acc
}

fn central_chisq_pdf(u: f64, df: f64) -> f64 {
    let half = df / 2.0;
    ((half - 1.0) * u.ln() - u / 2.0 - half * std::f64::consts::LN_2 - crate::numeric::ln_gamma(half))
        .exp()
}

/// Exact state-conditional marginal f(x) = int phi_sigma(x - u) g(u) du,
/// evaluated by composite Gauss-Legendre quadrature over the kernel window.
/// This is the density the oracle estimators use.
#[derive(Debug, Clone)]
pub struct MarginalDensity {
    prior: Prior,
    sigma: f64,
    support: (f64, f64),
    breaks: Vec<f64>,
}

/// Integration window half-width in noise standard deviations.
const WINDOW_SDS: f64 = 8.5;
const PANELS_PER_SEGMENT: usize = 10;

impl MarginalDensity {
    pub fn new(prior: Prior, sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise scale must be positive, got {sigma}"
            )));
        }
        let support = prior.support();
        let breaks = prior.breakpoints();
        Ok(Self {
            prior,
            sigma,
            support,
            breaks,
        })
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    /// Density and derivative in one quadrature pass.
    fn eval_with_derivative(&self, x: f64) -> (f64, f64) {
        let a = (x - WINDOW_SDS * self.sigma).max(self.support.0);
        let b = (x + WINDOW_SDS * self.sigma).min(self.support.1);
        if !(a < b) {
            return (0.0, 0.0);
        }
        let s2 = self.sigma * self.sigma;
        let norm = self.sigma * SQRT_2PI;
        let f = integrate_segmented(
            |u| {
                let z = (x - u) / self.sigma;
                (-0.5 * z * z).exp() / norm * self.prior.pdf(u)
            },
            a,
            b,
            &self.breaks,
            PANELS_PER_SEGMENT,
        );
        let fp = integrate_segmented(
            |u| {
                let z = (x - u) / self.sigma;
                -((x - u) / s2) * (-0.5 * z * z).exp() / norm * self.prior.pdf(u)
            },
            a,
            b,
            &self.breaks,
            PANELS_PER_SEGMENT,
        );
        (f, fp)
    }
}

impl Density for MarginalDensity {
    fn eval(&self, x: f64) -> f64 {
        self.eval_with_derivative(x).0
    }

    fn score(&self, x: f64) -> Result<f64> {
        let (f, fp) = self.eval_with_derivative(x);
        if f < 1e-300 {
            return Err(Error::DensityUnderflow { x });
        }
        Ok(fp / f)
    }
}

/// Generative description of one simulation scenario.
#[derive(Debug, Clone)]
pub struct ScenarioSpec {
    pub name: String,
    pub g1: Prior,
    pub a00: f64,
    pub a11: f64,
    pub n: usize,
    pub sigma: f64,
}

impl ScenarioSpec {
    /// Scenario with the study defaults: a00 = 0.95, n = 2000, sigma = 1.
    pub fn new(name: impl Into<String>, g1: Prior, a11: f64) -> Result<Self> {
        Self::with_size(name, g1, a11, 2000)
    }

    pub fn with_size(name: impl Into<String>, g1: Prior, a11: f64, n: usize) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            g1,
            a00: 0.95,
            a11,
            n,
            sigma: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        for (label, p) in [("a00", self.a00), ("a11", self.a11)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "{label} must lie in (0, 1), got {p}"
                )));
            }
        }
        if self.n == 0 {
            return Err(Error::InvalidParameter("scenario needs n >= 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter("sigma must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn transitions(&self) -> TransitionMatrix {
        TransitionMatrix::new(self.a00, self.a11).expect("validated on construction")
    }

    /// The scenario catalog of the simulation study, keyed by Roman numeral.
    pub fn by_name(name: &str, a11: f64) -> Result<Self> {
        let g1 = scenario_prior(name).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "unknown scenario {name:?}; expected one of {}",
                SCENARIO_NAMES.join(", ")
            ))
        })?;
        Self::new(name.trim().to_uppercase(), g1, a11)
    }
}

pub const SCENARIO_NAMES: [&str; 12] = [
    "I", "II", "III", "IV", "V", "VI", "VII", "VIII", "IX", "X", "XI", "XII",
];

/// Out-of-control prior for a named scenario, or None for an unknown name.
pub fn scenario_prior(name: &str) -> Option<Prior> {
    let uniform_wide = || Prior::uniform(-9.0, 9.0).unwrap();
    let uniform_narrow = || Prior::uniform(3.0, 8.0).unwrap();
    let triangle = || Prior::triangle(-30.0, 30.0, 6.0).unwrap();
    let levy = || Prior::levy(7.0).unwrap();
    let ncchisq = || Prior::noncentral_chisq(3.0, 2.0).unwrap();
    let weibull = || Prior::weibull(2.0, 5.0).unwrap();
    let burr = || Prior::burr(2.0, 0.5, 2.0).unwrap();
    let mix = |parts: Vec<(f64, Prior)>| Prior::mixture(parts).unwrap();

    Some(match name.trim().to_uppercase().as_str() {
        "I" => uniform_wide(),
        "II" => triangle(),
        "III" => levy(),
        "IV" => ncchisq(),
        "V" => weibull(),
        "VI" => burr(),
        "VII" => mix(vec![(0.4, uniform_narrow()), (0.6, levy())]),
        "VIII" => mix(vec![(0.4, ncchisq()), (0.6, triangle())]),
        "IX" => mix(vec![(0.4, uniform_narrow()), (0.6, weibull())]),
        "X" => mix(vec![(0.5, weibull()), (0.5, levy())]),
        "XI" => mix(vec![(0.5, ncchisq()), (0.5, burr())]),
        "XII" => mix(vec![(0.6, ncchisq()), (0.4, uniform_narrow())]),
        _ => return None,
    })
}

/// One simulated dataset: true states, true means, observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationRun {
    pub theta: Vec<u8>,
    pub mu: Vec<f64>,
    pub x: Sequence,
    pub seed: u64,
}

/// Sample a state path of length `n` started at the stationary distribution.
pub fn sample_chain(t: &TransitionMatrix, n: usize, seed: u64) -> Vec<u8> {
    assert!(n >= 1, "chain length must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, pi1) = t.stationary();
    let mut states = Vec::with_capacity(n);
    let first: f64 = rng.random();
    states.push(u8::from(first < pi1));
    for i in 1..n {
        let stay: f64 = rng.random();
        let prev = states[i - 1];
        let p_one = if prev == 0 { t.a01 } else { t.a11 };
        states.push(u8::from(stay < p_one));
    }
    states
}

/// i.i.d. draws from an out-of-control prior.
pub fn sample_prior(g1: &Prior, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| g1.sample(&mut rng)).collect()
}

/// Generate a full scenario dataset: state path, means, and noisy
/// observations. Deterministic given the seed.
pub fn generate(spec: &ScenarioSpec, seed: u64) -> SimulationRun {
    let t = spec.transitions();
    let theta = sample_chain(&t, spec.n, derive_seed(seed, 1));

    let signal_count = theta.iter().filter(|&&s| s == 1).count();
    let draws = sample_prior(&spec.g1, signal_count, derive_seed(seed, 2));
    let mut mu = vec![0.0; spec.n];
    let mut next = 0;
    for (m, &s) in mu.iter_mut().zip(&theta) {
        if s == 1 {
            *m = draws[next];
            next += 1;
        }
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let values: Vec<f64> = if spec.sigma == 0.0 {
        mu.clone()
    } else {
        let normal = Normal::new(0.0, spec.sigma).unwrap();
        mu.iter().map(|m| m + normal.sample(&mut noise_rng)).collect()
    };

    SimulationRun {
        theta,
        mu,
        x: Sequence {
            values,
            sigma: if spec.sigma == 0.0 { 1.0 } else { spec.sigma },
        },
        seed,
    }
}


/// Estimators the replication runner knows how to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    /// The bandwidth-selected dependent Tweedie estimator.
    Hmmt,
    /// Its robust variant with truncated out-of-control magnitudes.
    HmmtTruncated,
    /// Tweedie's formula ignoring the dependence structure.
    Tnd,
    /// Baum-Welch with a 3-component Gaussian mixture.
    Gmm3,
    /// Baum-Welch with the mixture order selected by BIC.
    GmmAuto,
    /// The parameter oracle: the posterior-weighted rule with the true
    /// transition matrix and true state-conditional marginals (the
    /// minimum-MSE rule given the model). This is the benchmark column the
    /// study compares against.
    Oracle,
    /// The infeasible state oracle: per-state Tweedie with the true states
    /// and true marginals.
    StateOracle,
}

impl EstimatorKind {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorKind::Hmmt => "HMMT",
            EstimatorKind::HmmtTruncated => "HMMT.T",
            EstimatorKind::Tnd => "T.ND",
            EstimatorKind::Gmm3 => "GMM.3",
            EstimatorKind::GmmAuto => "GMM.AUTO",
            EstimatorKind::Oracle => "Oracle",
            EstimatorKind::StateOracle => "Oracle.S",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name.trim().to_lowercase().as_str() {
            "hmmt" => EstimatorKind::Hmmt,
            "hmmt-t" | "hmmt.t" | "hmmt_t" | "truncated" => EstimatorKind::HmmtTruncated,
            "tnd" | "t.nd" | "t-nd" => EstimatorKind::Tnd,
            "gmm3" | "gmm.3" | "gmm-3" => EstimatorKind::Gmm3,
            "gmm-auto" | "gmm.auto" | "gmmauto" | "gmm_auto" => EstimatorKind::GmmAuto,
            "oracle" | "or" => EstimatorKind::Oracle,
            "state-oracle" | "oracle.s" | "oracle-s" => EstimatorKind::StateOracle,
            _ => return None,
        })
    }
}

/// Aggregated benchmark row for one estimator.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub estimator: EstimatorKind,
    pub mean_mse: f64,
    /// Monte Carlo standard error of the mean.
    pub se: f64,
    pub successes: usize,
    pub failures: usize,
}

/// Replication results for one scenario cell.
#[derive(Debug, Clone)]
pub struct BenchmarkTable {
    pub scenario: String,
    pub a11: f64,
    pub n: usize,
    pub replications: usize,
    pub rows: Vec<BenchRow>,
    /// Human-readable descriptions of per-replication failures.
    pub failure_log: Vec<String>,
}

impl BenchmarkTable {
    pub fn row(&self, kind: EstimatorKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.estimator == kind)
    }

    /// CSV rendering with a header; floats carry 17 significant digits so
    /// re-reading reproduces the values exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,a11,estimator,mean_mse,se,replications\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{},{:.16e},{:.16e},{}\n",
                self.scenario,
                self.a11,
                row.estimator.label(),
                row.mean_mse,
                row.se,
                row.successes,
            ));
        }
        out
    }
}

/// The exact state-conditional marginals of a scenario: in-control the noise
/// density itself (the null prior is a point mass at zero), out-of-control
/// the quadrature convolution of the prior.
pub fn scenario_marginals(spec: &ScenarioSpec) -> Result<(GaussianDensity, MarginalDensity)> {
    let sigma = if spec.sigma > 0.0 { spec.sigma } else { 1.0 };
    Ok((
        GaussianDensity::new(0.0, sigma)?,
        MarginalDensity::new(spec.g1.clone(), sigma)?,
    ))
}

/// Run `replications` independent draws of a scenario and score every
/// requested estimator. Per-replication failures are recorded in the table
/// rather than aborting the run; only a run where every single replication
/// failed is an error.
pub fn run_benchmark(
    spec: &ScenarioSpec,
    estimators: &[EstimatorKind],
    replications: usize,
    seed: u64,
) -> Result<BenchmarkTable> {
    if replications == 0 {
        return Err(Error::InvalidParameter("replications must be at least 1".into()));
    }
    if estimators.is_empty() {
        return Err(Error::InvalidParameter("estimator list must be nonempty".into()));
    }
    let sigma = if spec.sigma > 0.0 { spec.sigma } else { 1.0 };
    let needs_oracle = estimators
        .iter()
        .any(|e| matches!(e, EstimatorKind::Oracle | EstimatorKind::StateOracle));
    let marginals = if needs_oracle {
        Some(scenario_marginals(spec)?)
    } else {
        None
    };
    let true_params = marginals.as_ref().map(|(f0, f1)| {
        crate::hmm::HmmParams::with_stationary_initial(
            spec.transitions(),
            f0.clone(),
            f1.clone(),
        )
    });

    let per_rep: Vec<Vec<(EstimatorKind, std::result::Result<f64, String>)>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, rep as u64 + 1);
            let run = generate(spec, rep_seed);
            let x = &run.x.values;
            let mut scores = Vec::with_capacity(estimators.len());

            let wants_hmmt = estimators.contains(&EstimatorKind::Hmmt);
            let wants_trunc = estimators.contains(&EstimatorKind::HmmtTruncated);
            if wants_hmmt || wants_trunc {
                let config = FitConfig::with_seed(derive_seed(rep_seed, 0x11));
                match fit_hmmt(x, sigma, &config) {
                    Ok((fit, est)) => {
                        if wants_hmmt {
                            let m = mse(&est, &run.mu).map_err(|e| e.to_string());
                            scores.push((EstimatorKind::Hmmt, m));
                        }
                        if wants_trunc {
                            let m = mse(&fit.truncated, &run.mu).map_err(|e| e.to_string());
                            scores.push((EstimatorKind::HmmtTruncated, m));
                        }
                    }
                    Err(e) => {
                        let msg = e.to_string();
                        if wants_hmmt {
                            scores.push((EstimatorKind::Hmmt, Err(msg.clone())));
                        }
                        if wants_trunc {
                            scores.push((EstimatorKind::HmmtTruncated, Err(msg)));
                        }
                    }
                }
            }

            for &kind in estimators {
                let outcome: std::result::Result<f64, String> = match kind {
                    EstimatorKind::Hmmt | EstimatorKind::HmmtTruncated => continue,
                    EstimatorKind::Tnd => {
                        let config = FitConfig::with_seed(derive_seed(rep_seed, 0x22));
                        tnd_estimate(x, sigma, &config)
                            .and_then(|est| mse(&est, &run.mu))
                            .map_err(|e| e.to_string())
                    }
                    EstimatorKind::Gmm3 => {
                        let config = FitConfig::with_seed(derive_seed(rep_seed, 0x33));
                        gmm_fit(x, sigma, MixtureSelector::Fixed(3), &config)
                            .and_then(|(_, est)| mse(&est, &run.mu))
                            .map_err(|e| e.to_string())
                    }
                    EstimatorKind::GmmAuto => {
                        let config = FitConfig::with_seed(derive_seed(rep_seed, 0x44));
                        gmm_fit(x, sigma, MixtureSelector::Auto, &config)
                            .and_then(|(_, est)| mse(&est, &run.mu))
                            .map_err(|e| e.to_string())
                    }
                    EstimatorKind::Oracle => {
                        let params = true_params.as_ref().expect("built above");
                        crate::shrinkage::bayes_rule(x, params, sigma)
                            .and_then(|est| mse(&est, &run.mu))
                            .map_err(|e| e.to_string())
                    }
                    EstimatorKind::StateOracle => {
                        let (f0, f1) = marginals.as_ref().expect("built above");
                        oracle_rule(x, &run.theta, f0, f1, sigma)
                            .and_then(|est| mse(&est, &run.mu))
                            .map_err(|e| e.to_string())
                    }
                };
                scores.push((kind, outcome));
            }
            scores
        })
        .collect();

    let mut rows = Vec::with_capacity(estimators.len());
    let mut failure_log = Vec::new();
    let mut any_success = false;
    for &kind in estimators {
        let mut values = Vec::new();
        let mut failures = 0;
        for (rep, scores) in per_rep.iter().enumerate() {
            for (k, outcome) in scores {
                if *k != kind {
                    continue;
                }
                match outcome {
                    Ok(v) => values.push(*v),
                    Err(e) => {
                        failures += 1;
                        failure_log.push(format!(
                            "{} rep {}: {}",
                            kind.label(),
                            rep,
                            e
                        ));
                    }
                }
            }
        }
        let successes = values.len();
        any_success |= successes > 0;
        let mean_mse = if successes > 0 {
            values.iter().sum::<f64>() / successes as f64
        } else {
            f64::NAN
        };
        let se = if successes > 1 {
            let m = mean_mse;
            let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                / (successes - 1) as f64;
            (var / successes as f64).sqrt()
        } else {
            f64::NAN
        };
        rows.push(BenchRow {
            estimator: kind,
            mean_mse,
            se,
            successes,
            failures,
        });
    }
    if !any_success {
        return Err(Error::AllBandwidthsFailed(format!(
            "every replication failed; first: {}",
            failure_log.first().cloned().unwrap_or_default()
        )));
    }

    Ok(BenchmarkTable {
        scenario: spec.name.clone(),
        a11: spec.a11,
        n: spec.n,
        replications,
        rows,
        failure_log,
    })
}

/// Empirical mean squared error of an estimate against the true means.
pub fn mse(estimates: &ShrinkageResult, truth: &[f64]) -> Result<f64> {
    if estimates.estimates.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: estimates.estimates.len(),
        });
    }
    let n = truth.len() as f64;
    Ok(estimates
        .estimates
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t) * (e - t))
        .sum::<f64>()
        / n)
}
