//! The end-to-end fitting pipeline: sample splitting, deterministic
//! initialization, the generalized EM loop that pairs a parametric in-control
//! density with a weighted-KDE out-of-control density, bandwidth selection by
//! split-sample prediction error, and the final dependent-Tweedie estimate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::densities::{
    silverman_bandwidth, Density, GaussianDensity, NullDensity, WeightedKde, KERNEL_CUTOFF,
};
use crate::error::{Error, Result};
use crate::hmm::{
    forward_backward_from_log_emissions, HmmParams, PosteriorState, TransitionMatrix,
};
use crate::numeric::{derive_seed, geomspace, mad, median, weighted_mean_sd, SQRT_2PI};
use crate::shrinkage::{td_rule, truncated_rule, ShrinkageResult, TruncationMode};
use crate::simulate::Sequence;

/// Maximum relative parameter drift treated as converged.
pub(crate) const PARAM_TOL: f64 = 1e-4;
/// A log-likelihood drop beyond this absolute slack stops the loop at the
/// previous iterate; below it is indistinguishable from accumulation noise.
pub(crate) const LL_DECREASE_SLACK: f64 = 2e-9;
/// Total out-of-control posterior mass below this is a collapse.
pub(crate) const WEIGHT_COLLAPSE_TOL: f64 = 1e-8;
/// The fitted in-control scale never drops below this fraction of the
/// working noise scale.
pub(crate) const TAU_FLOOR_FRAC: f64 = 0.05;
/// Robust-threshold labeling cut, in units of the robust scale.
const LABEL_SDS: f64 = 2.0;
/// The initializer guarantees at least this many labeled signal points.
const MIN_SIGNAL_POINTS: usize = 5;
/// Initialization needs at least this many observations.
const MIN_FIT_LENGTH: usize = 20;

const DEFAULT_GRID_SIZE: usize = 16;
const GRID_LO_FRAC: f64 = 0.05;
const GRID_HI_FRAC: f64 = 2.0;

/// Noise-augmented split of one observed sequence into an estimation half
/// `u` and a selection half `v`, conditionally independent given the means.
#[derive(Debug, Clone)]
pub struct SplitSample {
    pub u: Sequence,
    pub v: Sequence,
    pub alpha: f64,
    /// The auxiliary noise draws; kept so tests can check the construction
    /// identities u - x = alpha z and v - x = -z/alpha.
    pub z: Vec<f64>,
}

impl SplitSample {
    pub fn sigma_u(&self) -> f64 {
        self.u.sigma
    }

    pub fn sigma_v(&self) -> f64 {
        self.v.sigma
    }
}

/// How the in-control density is handled during fitting.
#[derive(Debug, Clone)]
pub enum F0Mode {
    /// Refit location and scale each M-step (weighted Gaussian MLE).
    FitLocationScale,
    /// Keep the supplied density fixed. The density must describe the sample
    /// actually being fitted; when fitting a noise-augmented half, widen it
    /// with [`NullDensity::convolve_extra_variance`] first.
    FixedKnown(NullDensity),
}

/// Tuning knobs for the fitting pipeline.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Scale-relative bandwidth grid: the effective kernel bandwidth during a
    /// fit is `h` times the working noise scale. None selects a geometric
    /// default spanning 0.05 to 2 times Silverman's rule on the initial
    /// signal points.
    pub bandwidth_grid: Option<Vec<f64>>,
    /// Split fraction for bandwidth selection.
    pub alpha: f64,
    pub max_iterations: usize,
    /// Relative log-likelihood change treated as converged.
    pub convergence_tol: f64,
    pub rng_seed: u64,
    pub truncation_mode: TruncationMode,
    pub f0_mode: F0Mode,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            bandwidth_grid: None,
            alpha: 0.1,
            max_iterations: 500,
            convergence_tol: 1e-6,
            rng_seed: 0,
            truncation_mode: TruncationMode::Clamp,
            f0_mode: F0Mode::FitLocationScale,
        }
    }
}

impl FitConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(grid) = &self.bandwidth_grid {
            if grid.is_empty() {
                return Err(Error::InvalidParameter("bandwidth grid must be nonempty".into()));
            }
            if grid.iter().any(|h| !h.is_finite() || *h <= 0.0) {
                return Err(Error::InvalidParameter("bandwidth grid entries must be positive".into()));
            }
            if grid.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidParameter("bandwidth grid must be strictly increasing".into()));
            }
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParameter("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::InvalidParameter("convergence_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one EM run at a fixed bandwidth.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: HmmParams<NullDensity, WeightedKde>,
    /// Posterior computed under `params` (the final accepted iterate).
    pub posterior: PosteriorState,
    /// Scale-relative bandwidth the run was fit at.
    pub h: f64,
    /// Log-likelihood of each accepted iterate, first entry is the
    /// initializer's.
    pub loglik_trace: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Full output of the bandwidth-selected pipeline.
#[derive(Debug, Clone)]
pub struct FitResult {
    /// Final refit on the full sequence at the chosen bandwidth.
    pub fit: EmFit,
    pub chosen_h: f64,
    /// (h, estimated prediction error) for every bandwidth that fit cleanly.
    pub mse_by_h: Vec<(f64, f64)>,
    /// Bandwidths that failed, with the error description.
    pub failed_h: Vec<(f64, String)>,
    /// Robust variant of the estimates (out-of-control magnitudes limited).
    pub truncated: ShrinkageResult,
}

impl FitResult {
    /// Fitted mode of the in-control density.
    pub fn nu_hat(&self) -> f64 {
        self.fit.params.f0.mode()
    }
}

/// Split `x` into the estimation half u = x + alpha z and the selection half
/// v = x - z/alpha, with z ~ N(0, sigma^2) i.i.d. Deterministic given `seed`.
pub fn split_sample(x: &[f64], alpha: f64, sigma: f64, seed: u64) -> Result<SplitSample> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    let z: Vec<f64> = (0..x.len()).map(|_| normal.sample(&mut rng)).collect();
    let u: Vec<f64> = x.iter().zip(&z).map(|(xi, zi)| xi + alpha * zi).collect();
    let v: Vec<f64> = x.iter().zip(&z).map(|(xi, zi)| xi - zi / alpha).collect();
    Ok(SplitSample {
        u: Sequence {
            values: u,
            sigma: sigma * (1.0 + alpha * alpha).sqrt(),
        },
        v: Sequence {
            values: v,
            sigma: sigma * (1.0 + 1.0 / (alpha * alpha)).sqrt(),
        },
        alpha,
        z,
    })
}

/// Robust-threshold provisional labels: median/MAD location and scale, cut at
/// `LABEL_SDS` robust deviations, then a median-of-3 filter to drop isolated
/// flips, then the minimum-signal fallback.
pub(crate) fn robust_labels(u: &[f64], sigma_u: f64) -> Result<(f64, f64, Vec<bool>)> {
    let nu0 = median(u);
    let spread = mad(u) * 1.4826;
    if spread == 0.0 && u.iter().all(|&v| v == u[0]) {
        return Err(Error::DegenerateInput("all observations identical".into()));
    }
    let tau0 = spread.max(sigma_u);

    let raw: Vec<bool> = u.iter().map(|&v| (v - nu0).abs() > LABEL_SDS * tau0).collect();
    let n = raw.len();
    let mut labels = raw.clone();
    for i in 1..n.saturating_sub(1) {
        let votes = raw[i - 1] as u8 + raw[i] as u8 + raw[i + 1] as u8;
        labels[i] = votes >= 2;
    }

    if labels.iter().filter(|&&l| l).count() < MIN_SIGNAL_POINTS {
        // Too few signal points: take the most extreme deviations instead.
        let mut by_dev: Vec<usize> = (0..n).collect();
        by_dev.sort_by(|&a, &b| {
            let da = (u[a] - nu0).abs();
            let db = (u[b] - nu0).abs();
            db.partial_cmp(&da).unwrap()
        });
        labels = vec![false; n];
        for &i in by_dev.iter().take(MIN_SIGNAL_POINTS) {
            labels[i] = true;
        }
    }
    Ok((nu0, tau0, labels))
}

/// Deterministic initializer: robust location/scale for the in-control
/// density, threshold labels for a provisional state path, add-one-smoothed
/// transition counts, and a uniform-weight KDE on the labeled signal points.
pub fn initialize(u: &[f64], sigma_u: f64, config: &FitConfig) -> Result<HmmParams<NullDensity, WeightedKde>> {
    if u.len() < MIN_FIT_LENGTH {
        return Err(Error::InvalidParameter(format!(
            "initialization needs at least {MIN_FIT_LENGTH} observations, got {}",
            u.len()
        )));
    }
    let (nu0, tau0, labels) = robust_labels(u, sigma_u)?;

    let mut counts = [[0u64; 2]; 2];
    for w in labels.windows(2) {
        counts[w[0] as usize][w[1] as usize] += 1;
    }
    let a00 = (counts[0][0] + 1) as f64 / (counts[0][0] + counts[0][1] + 2) as f64;
    let a11 = (counts[1][1] + 1) as f64 / (counts[1][0] + counts[1][1] + 2) as f64;
    let transitions = TransitionMatrix::new(a00, a11)?;

    let signal: Vec<f64> = u
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l)
        .map(|(&v, _)| v)
        .collect();
    let h_init = {
        let h = silverman_bandwidth(&signal);
        if h > 0.0 {
            h
        } else {
            sigma_u
        }
    };
    let f1 = WeightedKde::uniform(signal, h_init)?;

    let f0 = match &config.f0_mode {
        F0Mode::FitLocationScale => {
            NullDensity::Gaussian(GaussianDensity::new(nu0, tau0)?)
        }
        F0Mode::FixedKnown(d) => d.clone(),
    };

    Ok(HmmParams::with_stationary_initial(transitions, f0, f1))
}

/// Sorted-support kernel table for one (sample, bandwidth) pair. The support
/// points and bandwidth are fixed across EM iterations; only the weights
/// change, so each density evaluation is a windowed dot product. Rows are
/// summed ascending, matching [`WeightedKde::eval`] bit for bit.
struct KernelCache {
    /// Support points sorted ascending; equals the KDE's own support order.
    sorted: Vec<f64>,
    /// Window start (in sorted positions) per original-order query point.
    row_lo: Vec<usize>,
    offsets: Vec<usize>,
    /// Raw kernel values exp(-t^2/2), ascending within each row.
    vals: Vec<f64>,
    bandwidth: f64,
}

impl KernelCache {
    fn build(u: &[f64], bandwidth: f64) -> Self {
        let n = u.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| u[a].partial_cmp(&u[b]).unwrap());
        let sorted: Vec<f64> = order.iter().map(|&i| u[i]).collect();

        let cut = KERNEL_CUTOFF * bandwidth;
        let inv_h = 1.0 / bandwidth;
        let mut row_lo = Vec::with_capacity(n);
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut vals = Vec::new();
        for &x in u {
            let lo = sorted.partition_point(|&p| p < x - cut);
            let hi = sorted.partition_point(|&p| p <= x + cut);
            row_lo.push(lo);
            for &p in &sorted[lo..hi] {
                let t = (p - x) * inv_h;
                vals.push((-0.5 * t * t).exp());
            }
            offsets.push(vals.len());
        }
        Self {
            sorted,
            row_lo,
            offsets,
            vals,
            bandwidth,
        }
    }

    /// Density of `kde` at every query point the cache was built from. The
    /// KDE must have been built on the same support and bandwidth; its
    /// sorted weights then line up with the cached kernel rows.
    fn eval_all(&self, kde: &WeightedKde, out: &mut Vec<f64>) {
        debug_assert_eq!(kde.points(), &self.sorted[..]);
        debug_assert_eq!(kde.bandwidth(), self.bandwidth);
        let w_sorted = kde.weights();
        out.clear();
        let norm = self.bandwidth * SQRT_2PI;
        for i in 0..self.row_lo.len() {
            let lo = self.row_lo[i];
            let row = &self.vals[self.offsets[i]..self.offsets[i + 1]];
            let mut acc = 0.0;
            for (k, &kv) in row.iter().enumerate() {
                acc += w_sorted[lo + k] * kv;
            }
            out.push(acc / norm);
        }
    }
}

/// Shared M-step: update the state proportions, transitions, KDE weights,
/// and (unless fixed) the in-control Gaussian by weighted MLE.
fn m_step_kde(
    prev: &HmmParams<NullDensity, WeightedKde>,
    posterior: &PosteriorState,
    u: &[f64],
    h: f64,
    sigma_u: f64,
    config: &FitConfig,
) -> Result<HmmParams<NullDensity, WeightedKde>> {
    let p1 = &posterior.p;
    let total_p1: f64 = p1.iter().sum();
    if total_p1 < WEIGHT_COLLAPSE_TOL {
        return Err(Error::WeightCollapse { total: total_p1 });
    }

    let (transitions, initial) = chain_updates(posterior, &prev.transitions);
    let transitions = transitions?;

    let weights: Vec<f64> = p1.iter().map(|p| p / total_p1).collect();
    let f1 = WeightedKde::new(u.to_vec(), weights, h * sigma_u)?;
    let f0 = update_f0(&prev.f0, u, p1, sigma_u, config)?;

    HmmParams::new(transitions, initial, f0, f1)
}

/// State-proportion and transition updates shared by the KDE and mixture
/// M-steps: psi_j is the average posterior mass, A_jk the pairwise-posterior
/// ratio over i = 1..n-1.
pub(crate) fn chain_updates(
    posterior: &PosteriorState,
    prev: &TransitionMatrix,
) -> (Result<TransitionMatrix>, (f64, f64)) {
    let n = posterior.p.len();
    let psi1 = (posterior.p.iter().sum::<f64>() / n as f64).clamp(1e-9, 1.0 - 1e-9);
    let initial = (1.0 - psi1, psi1);

    let mut xi_sum = [[0.0f64; 2]; 2];
    let mut den = [0.0f64; 2];
    for (i, table) in posterior.xi.iter().enumerate() {
        for j in 0..2 {
            for k in 0..2 {
                xi_sum[j][k] += table[j][k];
            }
        }
        den[0] += 1.0 - posterior.p[i];
        den[1] += posterior.p[i];
    }
    let a00 = if den[0] > 0.0 {
        xi_sum[0][0] / den[0]
    } else {
        prev.a00
    };
    let a11 = if den[1] > 0.0 {
        xi_sum[1][1] / den[1]
    } else {
        prev.a11
    };
    (TransitionMatrix::new(a00, a11), initial)
}

/// Weighted Gaussian MLE update of the in-control density (no-op when the
/// density is fixed). The scale is floored at a fraction of the working
/// noise scale so the null density cannot collapse onto a point.
pub(crate) fn update_f0(
    prev: &NullDensity,
    u: &[f64],
    p1: &[f64],
    sigma_u: f64,
    config: &FitConfig,
) -> Result<NullDensity> {
    match &config.f0_mode {
        F0Mode::FixedKnown(_) => Ok(prev.clone()),
        F0Mode::FitLocationScale => {
            let p0: Vec<f64> = p1.iter().map(|p| 1.0 - p).collect();
            match weighted_mean_sd(u, &p0) {
                Some((nu, sd)) => {
                    let tau = sd.max(TAU_FLOOR_FRAC * sigma_u);
                    Ok(NullDensity::Gaussian(GaussianDensity::new(nu, tau)?))
                }
                None => Ok(prev.clone()),
            }
        }
    }
}

/// Largest relative movement across the scalar parameters (transitions,
/// state proportion, and the fitted Gaussian location/scale). The KDE
/// weights are the nonparametric part; their drift shows up in the
/// log-likelihood criterion instead.
fn param_distance(
    a: &HmmParams<NullDensity, WeightedKde>,
    b: &HmmParams<NullDensity, WeightedKde>,
) -> f64 {
    let rel = |x: f64, y: f64| (x - y).abs() / (1.0 + x.abs());
    let mut d = rel(a.transitions.a00, b.transitions.a00)
        .max(rel(a.transitions.a11, b.transitions.a11))
        .max(rel(a.initial.1, b.initial.1));
    if let (NullDensity::Gaussian(ga), NullDensity::Gaussian(gb)) = (&a.f0, &b.f0) {
        d = d
            .max(rel(ga.location(), gb.location()))
            .max(rel(ga.scale(), gb.scale()));
    }
    d
}

/// Log emissions under `params` at every point of `u`. Uses the kernel cache
/// when `params.f1` lives on the cached support (every iterate after the
/// first M-step); the initializer's KDE is evaluated directly.
fn log_emissions_cached(
    params: &HmmParams<NullDensity, WeightedKde>,
    u: &[f64],
    cache: &KernelCache,
    f1_buf: &mut Vec<f64>,
) -> Vec<[f64; 2]> {
    let cacheable =
        params.f1.bandwidth() == cache.bandwidth && params.f1.points() == &cache.sorted[..];
    if cacheable {
        cache.eval_all(&params.f1, f1_buf);
        u.iter()
            .zip(f1_buf.iter())
            .map(|(&xi, &f1)| [params.f0.log_eval(xi), f1.ln()])
            .collect()
    } else {
        u.iter()
            .map(|&xi| [params.f0.log_eval(xi), params.f1.log_eval(xi)])
            .collect()
    }
}

/// One EM iteration: forward-backward under the current parameters, then the
/// parameter updates of the M-step. Returns the updated parameters together
/// with the posterior computed under the input parameters.
pub fn em_step(
    params: &HmmParams<NullDensity, WeightedKde>,
    u: &[f64],
    h: f64,
    sigma_u: f64,
    config: &FitConfig,
) -> Result<(HmmParams<NullDensity, WeightedKde>, PosteriorState)> {
    let log_e: Vec<[f64; 2]> = u
        .iter()
        .map(|&xi| [params.f0.log_eval(xi), params.f1.log_eval(xi)])
        .collect();
    let posterior =
        forward_backward_from_log_emissions(&params.transitions, params.initial, &log_e)?;
    let next = m_step_kde(params, &posterior, u, h, sigma_u, config)?;
    Ok((next, posterior))
}

/// EM at a fixed bandwidth from a caller-supplied starting point.
pub fn fit_at_bandwidth_with_init(
    init: HmmParams<NullDensity, WeightedKde>,
    u: &[f64],
    h: f64,
    sigma_u: f64,
    config: &FitConfig,
) -> Result<EmFit> {
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("bandwidth must be positive, got {h}")));
    }
    config.validate()?;
    let cache = KernelCache::build(u, h * sigma_u);
    let mut f1_buf = Vec::with_capacity(u.len());

    let mut pending = init;
    let mut accepted: Option<(HmmParams<NullDensity, WeightedKde>, PosteriorState)> = None;
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations_used = 0;
    let mut converged = false;
    let mut last_rel = f64::INFINITY;

    for iter in 1..=config.max_iterations {
        iterations_used = iter;
        let log_e = log_emissions_cached(&pending, u, &cache, &mut f1_buf);
        let posterior =
            forward_backward_from_log_emissions(&pending.transitions, pending.initial, &log_e)?;
        let ll = posterior.loglik;

        let mut done = false;
        if let Some((prev_params, prev_post)) = &accepted {
            let prev_ll = prev_post.loglik;
            if ll < prev_ll - LL_DECREASE_SLACK {
                // The surrogate update lowered the likelihood: keep the
                // previous iterate and stop.
                converged = true;
                break;
            }
            last_rel = (ll - prev_ll).abs() / (1.0 + prev_ll.abs());
            let drift = param_distance(prev_params, &pending);
            done = last_rel < config.convergence_tol && drift < PARAM_TOL;
        }
        trace.push(ll);
        accepted = Some((pending, posterior));
        if done {
            converged = true;
            break;
        }
        let (cur, post) = accepted.as_ref().unwrap();
        pending = m_step_kde(cur, post, u, h, sigma_u, config)?;
    }

    let (params, posterior) = accepted.expect("at least one EM iteration ran");
    if !converged && last_rel > 10.0 * config.convergence_tol {
        return Err(Error::NonConvergence {
            iterations: iterations_used,
            oscillation: last_rel,
        });
    }

    Ok(EmFit {
        params,
        posterior,
        h,
        loglik_trace: trace,
        iterations_used,
        converged,
    })
}

/// EM at a fixed bandwidth from the deterministic initializer.
pub fn fit_at_bandwidth(u: &[f64], h: f64, sigma_u: f64, config: &FitConfig) -> Result<EmFit> {
    let init = initialize(u, sigma_u, config)?;
    fit_at_bandwidth_with_init(init, u, h, sigma_u, config)
}

/// Split-sample prediction error of a fitted model: the dependent-Tweedie
/// prediction on the estimation half, scored against the selection half.
pub fn bandwidth_mse(split: &SplitSample, fit: &EmFit) -> Result<f64> {
    let sigma_u = split.sigma_u();
    let pred = td_rule(
        &split.u.values,
        &fit.posterior,
        &fit.params.f0,
        &fit.params.f1,
        sigma_u,
    )?;
    Ok(pred
        .estimates
        .iter()
        .zip(&split.v.values)
        .map(|(p, v)| (p - v) * (p - v))
        .sum())
}

/// Data-driven default bandwidth grid: `DEFAULT_GRID_SIZE` geometric points
/// spanning 0.05 to 2 times Silverman's rule on the initializer's signal
/// points, expressed relative to the working noise scale. The low end is
/// floored at 1/sqrt(log n) noise scales, the smallest bandwidth order at
/// which the score of a Gaussian-noise marginal is estimable; below it the
/// split-sample criterion cannot distinguish signal from its own noise.
pub fn default_bandwidth_grid(u: &[f64], sigma_u: f64) -> Result<Vec<f64>> {
    let (nu0, _, labels) = robust_labels(u, sigma_u)?;
    let signal: Vec<f64> = u
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l)
        .map(|(&v, _)| v)
        .collect();
    let mut h_s = silverman_bandwidth(&signal);
    if !(h_s > 0.0) {
        // Spread-free signal points: fall back to the scale of their
        // deviations from the center, or the noise scale.
        let dev = signal.iter().map(|s| (s - nu0).abs()).fold(0.0, f64::max);
        h_s = if dev > 0.0 { dev / 2.0 } else { sigma_u };
    }
    let floor = 1.0 / (u.len() as f64).ln().max(2.0).sqrt();
    let lo = (GRID_LO_FRAC * h_s / sigma_u).max(floor);
    let hi = (GRID_HI_FRAC * h_s / sigma_u).max(2.0 * floor);
    Ok(geomspace(lo, hi, DEFAULT_GRID_SIZE))
}

/// The full pipeline: split, fit every bandwidth on the estimation half,
/// select by prediction error against the other half, refit on the complete
/// sequence at the chosen bandwidth, and return the dependent-Tweedie
/// estimates (plain and truncated).
pub fn fit_hmmt(x: &[f64], sigma: f64, config: &FitConfig) -> Result<(FitResult, ShrinkageResult)> {
    config.validate()?;
    let split = split_sample(x, config.alpha, sigma, derive_seed(config.rng_seed, 0x5bfa))?;
    let sigma_u = split.sigma_u();
    let u = &split.u.values;

    let grid = match &config.bandwidth_grid {
        Some(g) => g.clone(),
        None => default_bandwidth_grid(u, sigma_u)?,
    };

    // Fitting the augmented half: a fixed in-control density must be widened
    // by the extra split noise.
    let u_config = FitConfig {
        f0_mode: match &config.f0_mode {
            F0Mode::FixedKnown(d) => F0Mode::FixedKnown(
                d.convolve_extra_variance(config.alpha * config.alpha * sigma * sigma),
            ),
            F0Mode::FitLocationScale => F0Mode::FitLocationScale,
        },
        ..config.clone()
    };

    let per_h: Vec<(f64, std::result::Result<f64, String>)> = grid
        .par_iter()
        .map(|&h| {
            let outcome = fit_at_bandwidth(u, h, sigma_u, &u_config)
                .and_then(|fit| bandwidth_mse(&split, &fit))
                .map_err(|e| e.to_string());
            (h, outcome)
        })
        .collect();

    let mut mse_by_h = Vec::new();
    let mut failed_h = Vec::new();
    for (h, outcome) in per_h {
        match outcome {
            Ok(m) => mse_by_h.push((h, m)),
            Err(e) => failed_h.push((h, e)),
        }
    }
    if mse_by_h.is_empty() {
        let detail = failed_h
            .iter()
            .map(|(h, e)| format!("h={h:.4}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::AllBandwidthsFailed(detail));
    }

    let chosen_h = mse_by_h
        .iter()
        .fold((f64::INFINITY, f64::INFINITY), |best, &(h, m)| {
            if m < best.1 {
                (h, m)
            } else {
                best
            }
        })
        .0;

    // Final refit on the original sequence: the whole sample, working scale
    // sigma, the caller's in-control density as supplied.
    let fit = fit_at_bandwidth(x, chosen_h, sigma, config)?;
    let estimates = td_rule(x, &fit.posterior, &fit.params.f0, &fit.params.f1, sigma)?;
    let truncated = truncated_rule(
        x,
        &fit.posterior,
        fit.params.f0.mode(),
        &fit.params.f1,
        sigma,
        x.len(),
        config.truncation_mode,
    )?;

    Ok((
        FitResult {
            fit,
            chosen_h,
            mse_by_h,
            failed_h,
            truncated,
        },
        estimates,
    ))
}

/// The infeasible oracle KDE: uniform mass on the truly out-of-control
/// points.
pub fn oracle_kde(x: &[f64], theta: &[u8], h: f64) -> Result<WeightedKde> {
    if x.len() != theta.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            got: theta.len(),
        });
    }
    let signal: Vec<f64> = x
        .iter()
        .zip(theta)
        .filter(|(_, &t)| t == 1)
        .map(|(&v, _)| v)
        .collect();
    if signal.is_empty() {
        return Err(Error::NoSignalPoints);
    }
    WeightedKde::uniform(signal, h)
}
