//! Exact posterior inference for the two-state hidden Markov chain: log-space
//! forward-backward with marginal and pairwise posteriors, plus a brute-force
//! path-enumeration oracle used by the tests.

use crate::densities::Density;
use crate::error::{Error, Result};
use crate::numeric::logsumexp2;

/// Transition probabilities are clamped into this closed interval on
/// construction; EM updates can otherwise hit the boundary on degenerate data.
const PROB_CLAMP: f64 = 1e-9;

/// Enumeration limit for the brute-force oracle.
const BRUTE_FORCE_MAX: usize = 20;

/// Row-stochastic 2x2 transition matrix for the hidden chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionMatrix {
    pub a00: f64,
    pub a01: f64,
    pub a10: f64,
    pub a11: f64,
}

impl TransitionMatrix {
    /// Builds the matrix from the two diagonal entries; off-diagonals are the
    /// exact complements. Entries are clamped into (0, 1).
    pub fn new(a00: f64, a11: f64) -> Result<Self> {
        if !a00.is_finite() || !a11.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "transition probabilities must be finite, got ({a00}, {a11})"
            )));
        }
        let a00 = a00.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let a11 = a11.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        Ok(Self {
            a00,
            a01: 1.0 - a00,
            a10: 1.0 - a11,
            a11,
        })
    }

    #[inline]
    pub fn prob(&self, from: usize, to: usize) -> f64 {
        match (from, to) {
            (0, 0) => self.a00,
            (0, 1) => self.a01,
            (1, 0) => self.a10,
            (1, 1) => self.a11,
            _ => panic!("state index out of range"),
        }
    }

    /// Stationary distribution (pi0, pi1) solving pi A = pi.
    pub fn stationary(&self) -> (f64, f64) {
        let pi1 = self.a01 / (self.a01 + self.a10);
        (1.0 - pi1, pi1)
    }
}

/// Stationary distribution of a two-state chain: pi1 = a01/(a01 + a10).
pub fn stationary_distribution(t: &TransitionMatrix) -> (f64, f64) {
    t.stationary()
}

/// Full parameter set of the two-state HMM: transitions, initial state
/// distribution, and the two emission densities.
#[derive(Debug, Clone)]
pub struct HmmParams<F0, F1> {
    pub transitions: TransitionMatrix,
    pub initial: (f64, f64),
    pub f0: F0,
    pub f1: F1,
}

impl<F0, F1> HmmParams<F0, F1> {
    pub fn new(
        transitions: TransitionMatrix,
        initial: (f64, f64),
        f0: F0,
        f1: F1,
    ) -> Result<Self> {
        let (p0, p1) = initial;
        if !p0.is_finite() || !p1.is_finite() || (p0 + p1 - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "initial distribution must sum to 1, got ({p0}, {p1})"
            )));
        }
        if p0 <= 0.0 || p1 <= 0.0 {
            return Err(Error::InvalidParameter(
                "initial probabilities must lie strictly inside (0, 1)".into(),
            ));
        }
        Ok(Self {
            transitions,
            initial,
            f0,
            f1,
        })
    }

    /// Parameters started at the stationary distribution of `transitions`.
    pub fn with_stationary_initial(transitions: TransitionMatrix, f0: F0, f1: F1) -> Self {
        let initial = transitions.stationary();
        Self {
            transitions,
            initial,
            f0,
            f1,
        }
    }
}

/// Posterior summaries from forward-backward: per-position marginals
/// p_i = P(theta_i = 1 | x), pairwise tables xi_i(j, k), and the exact
/// marginal log-likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub p: Vec<f64>,
    pub xi: Vec<[[f64; 2]; 2]>,
    pub loglik: f64,
}

/// Log emission matrix: log f_j(x_i) for j in {0, 1}.
fn log_emissions<F0: Density, F1: Density>(
    params: &HmmParams<F0, F1>,
    x: &[f64],
) -> Result<Vec<[f64; 2]>> {
    x.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let e = [params.f0.log_eval(xi), params.f1.log_eval(xi)];
            if e[0] == f64::NEG_INFINITY && e[1] == f64::NEG_INFINITY {
                Err(Error::EmissionUnderflow { index: i, x: xi })
            } else {
                Ok(e)
            }
        })
        .collect()
}

/// Forward-backward on precomputed log emissions. All recursions run in log
/// space so nothing underflows even for sequences of length 10^6.
pub fn forward_backward_from_log_emissions(
    transitions: &TransitionMatrix,
    initial: (f64, f64),
    log_e: &[[f64; 2]],
) -> Result<PosteriorState> {
    let n = log_e.len();
    if n == 0 {
        return Err(Error::DegenerateInput("empty sequence".into()));
    }
    for (i, e) in log_e.iter().enumerate() {
        if e[0] == f64::NEG_INFINITY && e[1] == f64::NEG_INFINITY {
            return Err(Error::EmissionUnderflow {
                index: i,
                x: f64::NAN,
            });
        }
    }

    let la = [
        [transitions.a00.ln(), transitions.a01.ln()],
        [transitions.a10.ln(), transitions.a11.ln()],
    ];
    let lpsi = [initial.0.ln(), initial.1.ln()];

    // Forward: alpha_i(j) = P(x_1..x_i, theta_i = j).
    let mut alpha = vec![[0.0f64; 2]; n];
    alpha[0] = [lpsi[0] + log_e[0][0], lpsi[1] + log_e[0][1]];
    for i in 1..n {
        for k in 0..2 {
            alpha[i][k] = logsumexp2(
                alpha[i - 1][0] + la[0][k],
                alpha[i - 1][1] + la[1][k],
            ) + log_e[i][k];
        }
    }
    let loglik = logsumexp2(alpha[n - 1][0], alpha[n - 1][1]);
    if loglik == f64::NEG_INFINITY {
        return Err(Error::EmissionUnderflow {
            index: 0,
            x: f64::NAN,
        });
    }

    // Backward: beta_i(j) = P(x_{i+1}..x_n | theta_i = j).
    let mut beta = vec![[0.0f64; 2]; n];
    beta[n - 1] = [0.0, 0.0];
    for i in (0..n - 1).rev() {
        for j in 0..2 {
            beta[i][j] = logsumexp2(
                la[j][0] + log_e[i + 1][0] + beta[i + 1][0],
                la[j][1] + log_e[i + 1][1] + beta[i + 1][1],
            );
        }
    }

    // Marginals, normalized per position to absorb rounding.
    let mut p = vec![0.0f64; n];
    for i in 0..n {
        let g0 = alpha[i][0] + beta[i][0];
        let g1 = alpha[i][1] + beta[i][1];
        let m = g0.max(g1);
        let w0 = (g0 - m).exp();
        let w1 = (g1 - m).exp();
        p[i] = w1 / (w0 + w1);
    }

    // Pairwise posteriors, normalized per table.
    let mut xi = Vec::with_capacity(n.saturating_sub(1));
    for i in 0..n - 1 {
        let mut table = [[0.0f64; 2]; 2];
        let mut m = f64::NEG_INFINITY;
        let mut logs = [[0.0f64; 2]; 2];
        for j in 0..2 {
            for k in 0..2 {
                let v = alpha[i][j] + la[j][k] + log_e[i + 1][k] + beta[i + 1][k];
                logs[j][k] = v;
                m = m.max(v);
            }
        }
        let mut total = 0.0;
        for j in 0..2 {
            for k in 0..2 {
                table[j][k] = (logs[j][k] - m).exp();
                total += table[j][k];
            }
        }
        for row in &mut table {
            for cell in row.iter_mut() {
                *cell /= total;
            }
        }
        xi.push(table);
    }

    Ok(PosteriorState { p, xi, loglik })
}

/// Exact posterior inference for the two-state HMM.
pub fn forward_backward<F0: Density, F1: Density>(
    params: &HmmParams<F0, F1>,
    x: &[f64],
) -> Result<PosteriorState> {
    let log_e = log_emissions(params, x)?;
    forward_backward_from_log_emissions(&params.transitions, params.initial, &log_e)
}

/// Brute-force posterior by summing over all 2^n state paths. Test oracle for
/// [`forward_backward`]; rejects n > 20.
pub fn brute_force_posterior<F0: Density, F1: Density>(
    params: &HmmParams<F0, F1>,
    x: &[f64],
) -> Result<PosteriorState> {
    let n = x.len();
    if n == 0 {
        return Err(Error::DegenerateInput("empty sequence".into()));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::InstanceTooLarge {
            n,
            max: BRUTE_FORCE_MAX,
        });
    }
    let log_e = log_emissions(params, x)?;

    let la = [
        [params.transitions.a00.ln(), params.transitions.a01.ln()],
        [params.transitions.a10.ln(), params.transitions.a11.ln()],
    ];
    let lpsi = [params.initial.0.ln(), params.initial.1.ln()];

    // Log-space accumulators: total evidence, per-position state-1 mass,
    // and pairwise cell masses.
    let mut log_total = f64::NEG_INFINITY;
    let mut log_p1 = vec![f64::NEG_INFINITY; n];
    let mut log_xi = vec![[[f64::NEG_INFINITY; 2]; 2]; n.saturating_sub(1)];

    for mask in 0u32..(1u32 << n) {
        let state = |i: usize| ((mask >> i) & 1) as usize;
        let mut lp = lpsi[state(0)] + log_e[0][state(0)];
        for i in 1..n {
            lp += la[state(i - 1)][state(i)] + log_e[i][state(i)];
        }
        if lp == f64::NEG_INFINITY {
            continue;
        }
        log_total = logsumexp2(log_total, lp);
        for (i, acc) in log_p1.iter_mut().enumerate() {
            if state(i) == 1 {
                *acc = logsumexp2(*acc, lp);
            }
        }
        for i in 0..n - 1 {
            let cell = &mut log_xi[i][state(i)][state(i + 1)];
            *cell = logsumexp2(*cell, lp);
        }
    }

    if log_total == f64::NEG_INFINITY {
        return Err(Error::EmissionUnderflow {
            index: 0,
            x: x[0],
        });
    }

    let p = log_p1.iter().map(|&lp| (lp - log_total).exp()).collect();
    let xi = log_xi
        .iter()
        .map(|t| {
            let mut out = [[0.0f64; 2]; 2];
            for j in 0..2 {
                for k in 0..2 {
                    out[j][k] = (t[j][k] - log_total).exp();
                }
            }
            out
        })
        .collect();

    Ok(PosteriorState {
        p,
        xi,
        loglik: log_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{GaussianDensity, WeightedKde};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_pair(
        t: TransitionMatrix,
        initial: (f64, f64),
    ) -> HmmParams<GaussianDensity, GaussianDensity> {
        HmmParams::new(
            t,
            initial,
            GaussianDensity::new(0.0, 1.0).unwrap(),
            GaussianDensity::new(3.0, 1.5).unwrap(),
        )
        .unwrap()
    }

    fn assert_posteriors_close(a: &PosteriorState, b: &PosteriorState, tol: f64) {
        assert_eq!(a.p.len(), b.p.len());
        assert!((a.loglik - b.loglik).abs() < tol, "loglik {} vs {}", a.loglik, b.loglik);
        for (pa, pb) in a.p.iter().zip(&b.p) {
            assert!((pa - pb).abs() < tol, "p {} vs {}", pa, pb);
        }
        for (xa, xb) in a.xi.iter().zip(&b.xi) {
            for j in 0..2 {
                for k in 0..2 {
                    assert!((xa[j][k] - xb[j][k]).abs() < tol);
                }
            }
        }
    }

    #[test]
    fn transition_matrix_rows_sum_to_one() {
        let t = TransitionMatrix::new(0.95, 0.8).unwrap();
        assert_eq!(t.a00 + t.a01, 1.0);
        assert_eq!(t.a10 + t.a11, 1.0);
        // Boundary values are clamped inside (0, 1).
        let clamped = TransitionMatrix::new(0.0, 1.0).unwrap();
        assert!(clamped.a00 > 0.0 && clamped.a11 < 1.0);
    }

    #[test]
    fn stationary_known_values() {
        let t = TransitionMatrix::new(0.95, 0.8).unwrap();
        let (pi0, pi1) = stationary_distribution(&t);
        assert!((pi1 - 0.2).abs() < 1e-12);
        assert!((pi0 - 0.8).abs() < 1e-12);

        let sym = TransitionMatrix::new(0.5, 0.5).unwrap();
        assert!((sym.stationary().1 - 0.5).abs() < 1e-15);

        let t2 = TransitionMatrix::new(0.95, 0.2).unwrap();
        assert!((t2.stationary().1 - 0.05 / 0.85).abs() < 1e-12);
        assert!((t2.stationary().1 - 0.0588235).abs() < 1e-7);
    }

    #[test]
    fn identical_emissions_carry_no_information() {
        // n = 1, symmetric initial, f0 = f1: posterior stays 0.5.
        let t = TransitionMatrix::new(0.7, 0.6).unwrap();
        let d = GaussianDensity::new(0.0, 1.0).unwrap();
        let params = HmmParams::new(t, (0.5, 0.5), d.clone(), d.clone()).unwrap();
        let post = forward_backward(&params, &[0.3]).unwrap();
        assert!((post.p[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn identical_emissions_reduce_to_chain_marginals() {
        // With f0 = f1 the posterior equals the prior chain marginal psi A^i.
        let t = TransitionMatrix::new(0.9, 0.4).unwrap();
        let d = GaussianDensity::new(0.0, 1.0).unwrap();
        let initial = (0.7, 0.3);
        let params = HmmParams::new(t, initial, d.clone(), d.clone()).unwrap();
        let post = forward_backward(&params, &[0.1, -0.5, 2.0]).unwrap();

        let mut marg = initial;
        for i in 0..3 {
            assert!((post.p[i] - marg.1).abs() < 1e-12, "position {i}");
            marg = (
                marg.0 * t.a00 + marg.1 * t.a10,
                marg.0 * t.a01 + marg.1 * t.a11,
            );
        }
    }

    #[test]
    fn forward_backward_matches_enumeration_on_kde_instance() {
        let t = TransitionMatrix::new(0.9, 0.7).unwrap();
        let f1 = WeightedKde::new(vec![2.0, 3.5, 5.0], vec![0.3, 0.4, 0.3], 0.8).unwrap();
        let params = HmmParams::new(
            t,
            (0.8, 0.2),
            GaussianDensity::new(0.0, 1.0).unwrap(),
            f1,
        )
        .unwrap();
        let x = [0.2, 3.1, 4.0, -0.5, 0.0, 2.6, 5.2, 0.7];
        let fb = forward_backward(&params, &x).unwrap();
        let bf = brute_force_posterior(&params, &x).unwrap();
        assert_posteriors_close(&fb, &bf, 1e-10);
    }

    #[test]
    fn brute_force_single_point_matches() {
        let params = gaussian_pair(TransitionMatrix::new(0.9, 0.6).unwrap(), (0.75, 0.25));
        let x = [1.4];
        let fb = forward_backward(&params, &x).unwrap();
        let bf = brute_force_posterior(&params, &x).unwrap();
        assert_posteriors_close(&fb, &bf, 1e-12);
    }

    #[test]
    fn brute_force_near_degenerate_chain_concentrates_on_constant_paths() {
        // a01 = a10 ~ 0: only the two constant paths carry mass; their
        // weights are the prior times the emission products.
        let t = TransitionMatrix::new(1.0, 1.0).unwrap(); // clamped to 1 - 1e-9
        let f0 = GaussianDensity::new(0.0, 1.0).unwrap();
        let f1 = GaussianDensity::new(3.0, 1.0).unwrap();
        let params = HmmParams::new(t, (0.5, 0.5), f0.clone(), f1.clone()).unwrap();
        let x = [2.0, 2.5];
        let bf = brute_force_posterior(&params, &x).unwrap();

        let w0 = 0.5 * f0.eval(2.0) * f0.eval(2.5) * t.a00;
        let w1 = 0.5 * f1.eval(2.0) * f1.eval(2.5) * t.a11;
        let expect_p1 = w1 / (w0 + w1);
        assert!((bf.p[0] - expect_p1).abs() < 1e-6);
        assert!((bf.p[1] - expect_p1).abs() < 1e-6);
        assert!((bf.xi[0][1][1] - expect_p1).abs() < 1e-6);
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let params = gaussian_pair(TransitionMatrix::new(0.9, 0.6).unwrap(), (0.75, 0.25));
        let x = vec![0.0; 21];
        match brute_force_posterior(&params, &x) {
            Err(Error::InstanceTooLarge { n: 21, max: 20 }) => {}
            other => panic!("expected InstanceTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn random_instance_agreement_n10() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t = TransitionMatrix::new(0.85, 0.55).unwrap();
        let params = gaussian_pair(t, t.stationary());
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..5.0)).collect();
        let fb = forward_backward(&params, &x).unwrap();
        let bf = brute_force_posterior(&params, &x).unwrap();
        assert_posteriors_close(&fb, &bf, 1e-10);
    }

    #[test]
    fn xi_marginals_match_p() {
        let params = gaussian_pair(TransitionMatrix::new(0.9, 0.6).unwrap(), (0.8, 0.2));
        let x = [0.5, 2.8, 3.1, -0.2, 1.0];
        let post = forward_backward(&params, &x).unwrap();
        for i in 0..x.len() - 1 {
            let row1 = post.xi[i][1][0] + post.xi[i][1][1];
            let col1 = post.xi[i][0][1] + post.xi[i][1][1];
            assert!((row1 - post.p[i]).abs() < 1e-10);
            assert!((col1 - post.p[i + 1]).abs() < 1e-10);
            let total: f64 = post.xi[i].iter().flatten().sum();
            assert!((total - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn emission_scaling_shifts_loglik_only() {
        // Scaling both densities by c multiplies every path weight by c^n:
        // posteriors unchanged, loglik shifted by n log c.
        struct Scaled<D>(D, f64);
        impl<D: Density> Density for Scaled<D> {
            fn eval(&self, x: f64) -> f64 {
                self.1 * self.0.eval(x)
            }
            fn score(&self, x: f64) -> crate::error::Result<f64> {
                self.0.score(x)
            }
            fn log_eval(&self, x: f64) -> f64 {
                self.1.ln() + self.0.log_eval(x)
            }
        }

        let t = TransitionMatrix::new(0.9, 0.6).unwrap();
        let f0 = GaussianDensity::new(0.0, 1.0).unwrap();
        let f1 = GaussianDensity::new(3.0, 1.5).unwrap();
        let base = HmmParams::new(t, (0.8, 0.2), f0.clone(), f1.clone()).unwrap();
        let c = 7.3;
        let scaled = HmmParams::new(t, (0.8, 0.2), Scaled(f0, c), Scaled(f1, c)).unwrap();

        let x = [0.1, 2.2, 3.3, -1.0, 0.4, 2.9];
        let a = forward_backward(&base, &x).unwrap();
        let b = forward_backward(&scaled, &x).unwrap();
        for i in 0..x.len() {
            assert!((a.p[i] - b.p[i]).abs() < 1e-12);
        }
        for i in 0..x.len() - 1 {
            for j in 0..2 {
                for k in 0..2 {
                    assert!((a.xi[i][j][k] - b.xi[i][j][k]).abs() < 1e-12);
                }
            }
        }
        assert!((b.loglik - a.loglik - x.len() as f64 * c.ln()).abs() < 1e-9);
    }

    #[test]
    fn reversal_invariance_at_stationarity() {
        // Two-state chains are reversible; started at stationarity the
        // likelihood of a sequence equals that of its reversal.
        let t = TransitionMatrix::new(0.92, 0.55).unwrap();
        let params = gaussian_pair(t, t.stationary());
        let x = [0.5, 2.8, 3.1, -0.2, 1.0, 4.2, 0.3];
        let mut rev = x.to_vec();
        rev.reverse();
        let a = forward_backward(&params, &x).unwrap();
        let b = forward_backward(&params, &rev).unwrap();
        assert!((a.loglik - b.loglik).abs() < 1e-8);
    }

    #[test]
    fn long_sequence_does_not_underflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = TransitionMatrix::new(0.95, 0.8).unwrap();
        let params = gaussian_pair(t, t.stationary());
        let x: Vec<f64> = (0..100_000).map(|_| rng.random_range(-3.0..6.0)).collect();
        let post = forward_backward(&params, &x).unwrap();
        assert!(post.loglik.is_finite());
        assert!(post.p.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
    }
}
