//! Comparator estimators: T.ND (Tweedie ignoring the dependence structure)
//! and the Baum-Welch variants with a Gaussian-mixture out-of-control
//! density, with the mixture order either fixed or selected by BIC.

use rayon::prelude::*;

use crate::densities::{
    silverman_bandwidth, GaussianDensity, GaussianMixture, MixtureComponent, NullDensity,
    WeightedKde,
};
use crate::error::{Error, Result};
use crate::fit::{
    chain_updates, robust_labels, split_sample, update_f0, F0Mode, FitConfig, LL_DECREASE_SLACK,
    PARAM_TOL, TAU_FLOOR_FRAC, WEIGHT_COLLAPSE_TOL,
};
use crate::hmm::{forward_backward, HmmParams, PosteriorState, TransitionMatrix};
use crate::numeric::{derive_seed, geomspace, quantile, SQRT_2PI};
use crate::shrinkage::{td_rule, tweedie_independent, ShrinkageResult};

const DEFAULT_GRID_SIZE: usize = 16;
const COMPONENT_WEIGHT_FLOOR: f64 = 1e-8;
const BIC_MAX_COMPONENTS: usize = 8;

/// Tweedie's formula with no dependence structure: a uniform-weight KDE on
/// the whole sample, bandwidth chosen by the same split-sample prediction
/// error restricted to a single state.
pub fn tnd_estimate(x: &[f64], sigma: f64, config: &FitConfig) -> Result<ShrinkageResult> {
    config.validate()?;
    if x.len() < 20 {
        return Err(Error::InvalidParameter(format!(
            "T.ND needs at least 20 observations, got {}",
            x.len()
        )));
    }
    let split = split_sample(x, config.alpha, sigma, derive_seed(config.rng_seed, 0x7d4a))?;
    let sigma_u = split.sigma_u();
    let u = &split.u.values;

    let grid = match &config.bandwidth_grid {
        Some(g) => g.clone(),
        None => {
            let h_s = silverman_bandwidth(u).max(f64::MIN_POSITIVE);
            geomspace(0.05 * h_s / sigma_u, 2.0 * h_s / sigma_u, DEFAULT_GRID_SIZE)
        }
    };

    let per_h: Vec<(f64, std::result::Result<f64, String>)> = grid
        .par_iter()
        .map(|&h| {
            let outcome = (|| -> Result<f64> {
                let kde = WeightedKde::uniform(u.clone(), h * sigma_u)?;
                let pred = tweedie_independent(u, &kde, sigma_u)?;
                Ok(pred
                    .estimates
                    .iter()
                    .zip(&split.v.values)
                    .map(|(p, v)| (p - v) * (p - v))
                    .sum())
            })()
            .map_err(|e| e.to_string());
            (h, outcome)
        })
        .collect();

    let mut best: Option<(f64, f64)> = None;
    let mut failures = Vec::new();
    for (h, outcome) in per_h {
        match outcome {
            Ok(m) => {
                if best.is_none_or(|(_, bm)| m < bm) {
                    best = Some((h, m));
                }
            }
            Err(e) => failures.push(format!("h={h:.4}: {e}")),
        }
    }
    let (chosen_h, _) = best.ok_or_else(|| Error::AllBandwidthsFailed(failures.join("; ")))?;

    let final_kde = WeightedKde::uniform(x.to_vec(), chosen_h * sigma)?;
    tweedie_independent(x, &final_kde, sigma)
}

/// Result of a Baum-Welch fit with a Gaussian-mixture out-of-control
/// density.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: HmmParams<NullDensity, GaussianMixture>,
    pub posterior: PosteriorState,
    pub loglik_trace: Vec<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Bayesian information criterion of the converged fit.
    pub bic: f64,
}

/// Mixture-order selection strategy.
#[derive(Debug, Clone, Copy)]
pub enum MixtureSelector {
    Fixed(usize),
    /// BIC over 1..=8 components; stand-in for the nonparametric order
    /// selection of the reference method.
    Auto,
}

/// One weighted EM pass for the mixture: responsibilities under the current
/// components, tilted by the outer (state-1 posterior) weights, then the
/// closed-form weight/mean/sd updates. Components whose weight or scale
/// collapses are pruned.
pub(crate) fn mixture_weighted_em_pass(
    mixture: &GaussianMixture,
    u: &[f64],
    outer: &[f64],
    sigma: f64,
) -> Result<GaussianMixture> {
    let total_outer: f64 = outer.iter().sum();
    if total_outer < WEIGHT_COLLAPSE_TOL {
        return Err(Error::WeightCollapse { total: total_outer });
    }
    let comps = mixture.components();
    let m = comps.len();
    let mut sum_r = vec![0.0; m];
    let mut sum_ru = vec![0.0; m];
    let mut resp = vec![0.0; m];
    // First pass: weights and means.
    for (&ui, &g) in u.iter().zip(outer) {
        if g == 0.0 {
            continue;
        }
        let mut total = 0.0;
        for (k, c) in comps.iter().enumerate() {
            let z = (ui - c.mean) / c.sd;
            let pdf = c.weight * (-0.5 * z * z).exp() / (c.sd * SQRT_2PI);
            resp[k] = pdf;
            total += pdf;
        }
        for (k, r) in resp.iter_mut().enumerate() {
            // If every component underflows, fall back to the prior weights.
            let share = if total > 0.0 { *r / total } else { comps[k].weight };
            sum_r[k] += g * share;
            sum_ru[k] += g * share * ui;
        }
    }
    let means: Vec<f64> = (0..m)
        .map(|k| {
            if sum_r[k] > 0.0 {
                sum_ru[k] / sum_r[k]
            } else {
                comps[k].mean
            }
        })
        .collect();
    // Second pass: scales about the new means.
    let mut sum_rd = vec![0.0; m];
    for (&ui, &g) in u.iter().zip(outer) {
        if g == 0.0 {
            continue;
        }
        let mut total = 0.0;
        for (k, c) in comps.iter().enumerate() {
            let z = (ui - c.mean) / c.sd;
            let pdf = c.weight * (-0.5 * z * z).exp() / (c.sd * SQRT_2PI);
            resp[k] = pdf;
            total += pdf;
        }
        for (k, r) in resp.iter().enumerate() {
            let share = if total > 0.0 { *r / total } else { comps[k].weight };
            let d = ui - means[k];
            sum_rd[k] += g * share * d * d;
        }
    }

    let mut updated = Vec::with_capacity(m);
    for k in 0..m {
        let weight = sum_r[k] / total_outer;
        let sd = if sum_r[k] > 0.0 {
            (sum_rd[k] / sum_r[k]).sqrt()
        } else {
            comps[k].sd
        };
        // Prune collapsed components; the survivors are renormalized by the
        // mixture constructor.
        if weight < COMPONENT_WEIGHT_FLOOR || sd < TAU_FLOOR_FRAC * sigma {
            continue;
        }
        updated.push(MixtureComponent {
            weight,
            mean: means[k],
            sd,
        });
    }
    if updated.is_empty() {
        return Err(Error::ComponentCollapse);
    }
    GaussianMixture::new(updated)
}

/// One EM iteration of the mixture variant: shared E-step, then the chain,
/// in-control, and mixture updates.
pub fn gmm_em_step(
    params: &HmmParams<NullDensity, GaussianMixture>,
    u: &[f64],
    sigma: f64,
    config: &FitConfig,
) -> Result<(HmmParams<NullDensity, GaussianMixture>, PosteriorState)> {
    let posterior = forward_backward(params, u)?;
    let next = gmm_m_step(params, &posterior, u, sigma, config)?;
    Ok((next, posterior))
}

fn gmm_m_step(
    prev: &HmmParams<NullDensity, GaussianMixture>,
    posterior: &PosteriorState,
    u: &[f64],
    sigma: f64,
    config: &FitConfig,
) -> Result<HmmParams<NullDensity, GaussianMixture>> {
    let total_p1: f64 = posterior.p.iter().sum();
    if total_p1 < WEIGHT_COLLAPSE_TOL {
        return Err(Error::WeightCollapse { total: total_p1 });
    }
    let (transitions, initial) = chain_updates(posterior, &prev.transitions);
    let transitions = transitions?;
    let f1 = mixture_weighted_em_pass(&prev.f1, u, &posterior.p, sigma)?;
    let f0 = update_f0(&prev.f0, u, &posterior.p, sigma, config)?;
    HmmParams::new(transitions, initial, f0, f1)
}

fn gmm_param_distance(
    a: &HmmParams<NullDensity, GaussianMixture>,
    b: &HmmParams<NullDensity, GaussianMixture>,
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
    let ca = a.f1.components();
    let cb = b.f1.components();
    if ca.len() == cb.len() {
        for (x, y) in ca.iter().zip(cb) {
            d = d
                .max(rel(x.weight, y.weight))
                .max(rel(x.mean, y.mean))
                .max(rel(x.sd, y.sd));
        }
    }
    d
}

/// Quantile-binned deterministic mixture initializer on the provisional
/// signal points.
fn initialize_mixture(
    u: &[f64],
    sigma: f64,
    m: usize,
    config: &FitConfig,
) -> Result<HmmParams<NullDensity, GaussianMixture>> {
    if m == 0 {
        return Err(Error::InvalidParameter("mixture order must be at least 1".into()));
    }
    if u.len() < 20 {
        return Err(Error::InvalidParameter(format!(
            "initialization needs at least 20 observations, got {}",
            u.len()
        )));
    }
    let (nu0, tau0, labels) = robust_labels(u, sigma)?;
    let mut signal: Vec<f64> = u
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l)
        .map(|(&v, _)| v)
        .collect();
    signal.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = m.min(signal.len());

    let mut components = Vec::with_capacity(m);
    for k in 0..m {
        let lo = k * signal.len() / m;
        let hi = ((k + 1) * signal.len() / m).max(lo + 1);
        let bin = &signal[lo..hi];
        let mean = bin.iter().sum::<f64>() / bin.len() as f64;
        let var = bin.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / bin.len() as f64;
        let spread = quantile(&signal, 0.9) - quantile(&signal, 0.1);
        let sd = var.sqrt().max(0.25 * sigma).max(0.05 * spread.abs());
        components.push(MixtureComponent {
            weight: bin.len() as f64 / signal.len() as f64,
            mean,
            sd,
        });
    }
    let f1 = GaussianMixture::new(components)?;

    let mut counts = [[0u64; 2]; 2];
    for w in labels.windows(2) {
        counts[w[0] as usize][w[1] as usize] += 1;
    }
    let a00 = (counts[0][0] + 1) as f64 / (counts[0][0] + counts[0][1] + 2) as f64;
    let a11 = (counts[1][1] + 1) as f64 / (counts[1][0] + counts[1][1] + 2) as f64;
    let transitions = TransitionMatrix::new(a00, a11)?;

    let f0 = match &config.f0_mode {
        F0Mode::FitLocationScale => NullDensity::Gaussian(GaussianDensity::new(nu0, tau0)?),
        F0Mode::FixedKnown(d) => d.clone(),
    };
    Ok(HmmParams::with_stationary_initial(transitions, f0, f1))
}

/// Free parameter count for BIC: transitions (2), state proportion (1),
/// in-control Gaussian (2), mixture (3m - 1).
fn parameter_count(m: usize) -> f64 {
    (3 * m + 4) as f64
}

fn gmm_fit_fixed(
    x: &[f64],
    sigma: f64,
    m: usize,
    config: &FitConfig,
) -> Result<GmmFit> {
    let init = initialize_mixture(x, sigma, m, config)?;

    let mut pending = init;
    let mut accepted: Option<(HmmParams<NullDensity, GaussianMixture>, PosteriorState)> = None;
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations_used = 0;
    let mut converged = false;
    let mut last_rel = f64::INFINITY;

    for iter in 1..=config.max_iterations {
        iterations_used = iter;
        let posterior = forward_backward(&pending, x)?;
        let ll = posterior.loglik;

        let mut done = false;
        if let Some((prev_params, prev_post)) = &accepted {
            let prev_ll = prev_post.loglik;
            if ll < prev_ll - LL_DECREASE_SLACK {
                converged = true;
                break;
            }
            last_rel = (ll - prev_ll).abs() / (1.0 + prev_ll.abs());
            let drift = gmm_param_distance(prev_params, &pending);
            done = last_rel < config.convergence_tol && drift < PARAM_TOL;
        }
        trace.push(ll);
        accepted = Some((pending, posterior));
        if done {
            converged = true;
            break;
        }
        let (cur, post) = accepted.as_ref().unwrap();
        pending = gmm_m_step(cur, post, x, sigma, config)?;
    }

    let (params, posterior) = accepted.expect("at least one EM iteration ran");
    if !converged && last_rel > 10.0 * config.convergence_tol {
        return Err(Error::NonConvergence {
            iterations: iterations_used,
            oscillation: last_rel,
        });
    }
    let k = parameter_count(params.f1.component_count());
    let bic = -2.0 * posterior.loglik + k * (x.len() as f64).ln();
    Ok(GmmFit {
        params,
        posterior,
        loglik_trace: trace,
        iterations_used,
        converged,
        bic,
    })
}

/// Full Baum-Welch fit with a Gaussian-mixture out-of-control density and
/// the posterior-weighted Tweedie estimates under the fitted model.
pub fn gmm_fit(
    x: &[f64],
    sigma: f64,
    selector: MixtureSelector,
    config: &FitConfig,
) -> Result<(GmmFit, ShrinkageResult)> {
    config.validate()?;
    let fit = match selector {
        MixtureSelector::Fixed(m) => gmm_fit_fixed(x, sigma, m, config)?,
        MixtureSelector::Auto => {
            let candidates: Vec<Result<GmmFit>> = (1..=BIC_MAX_COMPONENTS)
                .into_par_iter()
                .map(|m| gmm_fit_fixed(x, sigma, m, config))
                .collect();
            let mut best: Option<GmmFit> = None;
            let mut first_err: Option<Error> = None;
            for outcome in candidates {
                match outcome {
                    Ok(f) => {
                        if best.as_ref().is_none_or(|b| f.bic < b.bic) {
                            best = Some(f);
                        }
                    }
                    Err(e) => {
                        if first_err.is_none() {
                            first_err = Some(e);
                        }
                    }
                }
            }
            match best {
                Some(f) => f,
                None => return Err(first_err.expect("no candidates at all")),
            }
        }
    };
    let estimates = td_rule(x, &fit.posterior, &fit.params.f0, &fit.params.f1, sigma)?;
    Ok((fit, estimates))
}
