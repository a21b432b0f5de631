//! Second-order pooling of visual tokens.
//!
//! The forward chain is
//!
//! ```text
//! tokens (N x r) -> centred covariance Sigma -> Q = Sigma / tr(Sigma)
//!   -> J_k via coupled Newton-Schulz -> sqrt(tr(Sigma)) * J_k -> upper-triangle vector
//! ```
//!
//! [`sopool_forward`] records every intermediate on a [`SoPoolTape`] and
//! [`sopool_backward`] replays the chain in reverse, differentiating through
//! each unrolled Newton-Schulz step rather than through a closed-form
//! matrix-function adjoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Visual tokens, one per row (`N x r`).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(Mat);

impl TokenMatrix {
    pub fn new(mat: Mat) -> Result<Self> {
        if mat.rows() == 0 || mat.cols() == 0 {
            return Err(Error::Shape(format!(
                "token matrix must be non-empty, got {}x{}",
                mat.rows(),
                mat.cols()
            )));
        }
        if !mat.is_finite() {
            return Err(Error::Validation("token matrix has non-finite entries".into()));
        }
        Ok(Self(mat))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Mat::from_rows(rows)?)
    }

    pub fn n_tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.0
    }

    pub fn into_mat(self) -> Mat {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoPoolConfig {
    pub ns_iterations: usize,
    pub trace_epsilon: f64,
    /// Width of the projected tokens fed to the pooling.
    pub reduced_dim: usize,
    /// Fail on degenerate covariance instead of emitting zero features.
    pub strict: bool,
}

impl Default for SoPoolConfig {
    fn default() -> Self {
        Self {
            ns_iterations: 3,
            trace_epsilon: 1e-8,
            reduced_dim: 96,
            strict: false,
        }
    }
}

impl SoPoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ns_iterations < 1 {
            return Err(Error::Config("ns_iterations must be >= 1".into()));
        }
        if !(self.trace_epsilon > 0.0) {
            return Err(Error::Config("trace_epsilon must be > 0".into()));
        }
        if self.reduced_dim < 1 {
            return Err(Error::Config("reduced_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Length of the upper-triangle vector of an `r x r` matrix.
pub const fn vech_len(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Mean-centres the tokens and returns `(centred, Sigma)`.
fn centre_and_covariance(tokens: &TokenMatrix) -> Result<(Mat, Mat)> {
    let x = tokens.as_mat();
    let (n, r) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InsufficientTokens(n));
    }
    // offsets from the first token: identical tokens centre to exact zeros
    let origin = x.row(0);
    let offsets = Mat::from_fn(n, r, |i, j| x.get(i, j) - origin[j]);
    let mut mean = vec![0.0; r];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(offsets.row(i)) {
            *m += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    for m in &mut mean {
        *m *= inv_n;
    }
    let centred = Mat::from_fn(n, r, |i, j| offsets.get(i, j) - mean[j]);

    // upper triangle, then mirrored: exact symmetry
    let mut sigma = Mat::zeros(r, r);
    for a in 0..r {
        for b in a..r {
            let mut acc = 0.0;
            for i in 0..n {
                acc += centred.get(i, a) * centred.get(i, b);
            }
            let v = acc * inv_n;
            sigma.set(a, b, v);
            sigma.set(b, a, v);
        }
    }
    Ok((centred, sigma))
}

/// `Sigma = (1/N) sum_i (x_i - mu)(x_i - mu)^T` over token rows.
pub fn covariance_pool(tokens: &TokenMatrix) -> Result<Mat> {
    centre_and_covariance(tokens).map(|(_, sigma)| sigma)
}

/// Divides `sigma` by its trace. Returns `(Q, trace)`.
pub fn trace_normalize(sigma: &Mat, trace_epsilon: f64) -> Result<(Mat, f64)> {
    let trace = sigma.trace()?;
    if !(trace > trace_epsilon) {
        return Err(Error::DegenerateCovariance {
            trace,
            epsilon: trace_epsilon,
        });
    }
    Ok((sigma.scale(1.0 / trace), trace))
}

/// Iterates of the coupled Newton-Schulz recursion, `J_0..=J_k` and `P_0..=P_k`.
#[derive(Debug, Clone)]
pub struct NewtonSchulz {
    pub js: Vec<Mat>,
    pub ps: Vec<Mat>,
}

impl NewtonSchulz {
    /// `J_k`, the square-root estimate.
    pub fn sqrt(&self) -> &Mat {
        self.js.last().expect("at least J_0")
    }

    pub fn iterations(&self) -> usize {
        self.js.len() - 1
    }
}

/// Runs `k` steps of `J <- J(3I - PJ)/2`, `P <- (3I - PJ)P/2` from
/// `J_0 = q`, `P_0 = I`. Converges to `q^{1/2}` when `q` has unit trace.
pub fn newton_schulz_sqrt(q: &Mat, k: usize) -> Result<NewtonSchulz> {
    if k < 1 {
        return Err(Error::Config("Newton-Schulz needs at least one iteration".into()));
    }
    if !q.is_square() {
        return Err(Error::Shape(format!(
            "Newton-Schulz input must be square, got {}x{}",
            q.rows(),
            q.cols()
        )));
    }
    let n = q.rows();
    let three_i = Mat::identity(n).scale(3.0);
    let mut js = Vec::with_capacity(k + 1);
    let mut ps = Vec::with_capacity(k + 1);
    js.push(q.clone());
    ps.push(Mat::identity(n));
    for step in 1..=k {
        let (j, p) = (&js[step - 1], &ps[step - 1]);
        let t = &three_i - &(p * j);
        let j_next = (j * &t).scale(0.5);
        let p_next = (&t * p).scale(0.5);
        if !j_next.is_finite() || !p_next.is_finite() {
            return Err(Error::Divergence { step });
        }
        js.push(j_next);
        ps.push(p_next);
    }
    Ok(NewtonSchulz { js, ps })
}

/// Row-major upper triangle of a symmetric matrix, diagonal included.
pub fn vech_upper(s: &Mat) -> Result<Vec<f64>> {
    if !s.is_symmetric(1e-9) {
        return Err(Error::Validation("vech_upper requires a symmetric matrix".into()));
    }
    Ok(upper_entries(s))
}

fn upper_entries(s: &Mat) -> Vec<f64> {
    let r = s.rows();
    let mut out = Vec::with_capacity(vech_len(r));
    for a in 0..r {
        out.extend_from_slice(&s.row(a)[a..]);
    }
    out
}

/// Inverse of [`vech_upper`]: rebuilds the symmetric matrix.
pub fn unvech_upper(v: &[f64], r: usize) -> Result<Mat> {
    if v.len() != vech_len(r) {
        return Err(Error::Shape(format!(
            "vech of a {r}x{r} matrix has {} entries, got {}",
            vech_len(r),
            v.len()
        )));
    }
    let mut s = Mat::zeros(r, r);
    let mut it = v.iter();
    for a in 0..r {
        for b in a..r {
            let x = *it.next().expect("length checked");
            s.set(a, b, x);
            s.set(b, a, x);
        }
    }
    Ok(s)
}

#[derive(Debug, Clone)]
enum TapeState {
    /// Trace fell below epsilon; features were forced to zero.
    Degenerate,
    Full {
        centred: Mat,
        sigma: Mat,
        trace: f64,
        ns: NewtonSchulz,
    },
}

/// Intermediates saved by [`sopool_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct SoPoolTape {
    n_tokens: usize,
    dim: usize,
    ns_iterations: usize,
    state: TapeState,
}

impl SoPoolTape {
    pub fn is_degenerate(&self) -> bool {
        matches!(self.state, TapeState::Degenerate)
    }

    pub fn ns_iterations(&self) -> usize {
        self.ns_iterations
    }

    pub fn trace(&self) -> Option<f64> {
        match &self.state {
            TapeState::Full { trace, .. } => Some(*trace),
            TapeState::Degenerate => None,
        }
    }

    pub fn covariance(&self) -> Option<&Mat> {
        match &self.state {
            TapeState::Full { sigma, .. } => Some(sigma),
            TapeState::Degenerate => None,
        }
    }

    pub fn newton_schulz(&self) -> Option<&NewtonSchulz> {
        match &self.state {
            TapeState::Full { ns, .. } => Some(ns),
            TapeState::Degenerate => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SoPoolOutput {
    /// `vech_upper(sqrt(tr Sigma) * J_k)`, length `r(r+1)/2`.
    pub features: Vec<f64>,
    pub tape: SoPoolTape,
}

impl SoPoolOutput {
    pub fn is_degenerate(&self) -> bool {
        self.tape.is_degenerate()
    }
}

pub fn sopool_forward(tokens: &TokenMatrix, cfg: &SoPoolConfig) -> Result<SoPoolOutput> {
    cfg.validate()?;
    let (n, r) = (tokens.n_tokens(), tokens.dim());
    let (centred, sigma) = centre_and_covariance(tokens)?;
    let (q, trace) = match trace_normalize(&sigma, cfg.trace_epsilon) {
        Ok(v) => v,
        Err(Error::DegenerateCovariance { .. }) if !cfg.strict => {
            return Ok(SoPoolOutput {
                features: vec![0.0; vech_len(r)],
                tape: SoPoolTape {
                    n_tokens: n,
                    dim: r,
                    ns_iterations: cfg.ns_iterations,
                    state: TapeState::Degenerate,
                },
            });
        }
        Err(e) => return Err(e),
    };
    let ns = newton_schulz_sqrt(&q, cfg.ns_iterations)?;
    let root = ns.sqrt().scale(trace.sqrt());
    // J_k is symmetric only up to rounding, so read the upper triangle directly
    let features = upper_entries(&root);
    Ok(SoPoolOutput {
        features,
        tape: SoPoolTape {
            n_tokens: n,
            dim: r,
            ns_iterations: cfg.ns_iterations,
            state: TapeState::Full {
                centred,
                sigma,
                trace,
                ns,
            },
        },
    })
}

/// Gradient of a scalar loss with respect to the input tokens, given its
/// gradient with respect to the pooled features.
pub fn sopool_backward(grad_features: &[f64], tape: &SoPoolTape) -> Result<Mat> {
    let (n, r) = (tape.n_tokens, tape.dim);
    if grad_features.len() != vech_len(r) {
        return Err(Error::Validation(format!(
            "gradient has {} entries but the tape was recorded for r = {r} ({} features)",
            grad_features.len(),
            vech_len(r)
        )));
    }
    let (centred, sigma, trace, ns) = match &tape.state {
        TapeState::Degenerate => return Ok(Mat::zeros(n, r)),
        TapeState::Full {
            centred,
            sigma,
            trace,
            ns,
        } => (centred, sigma, *trace, ns),
    };
    if ns.iterations() != tape.ns_iterations {
        return Err(Error::Validation("tape iterate count does not match its config".into()));
    }

    // vech: only upper entries were read
    let mut g_root = Mat::zeros(r, r);
    let mut it = grad_features.iter();
    for a in 0..r {
        for b in a..r {
            g_root.set(a, b, *it.next().expect("length checked"));
        }
    }

    // root = sqrt(trace) * J_k
    let s = trace.sqrt();
    let mut g_trace = g_root.dot(ns.sqrt()) * 0.5 / s;
    let mut g_j = g_root.scale(s);
    let mut g_p = Mat::zeros(r, r);

    let three_i = Mat::identity(r).scale(3.0);
    for step in (0..ns.iterations()).rev() {
        let (j, p) = (&ns.js[step], &ns.ps[step]);
        let t = &three_i - &(p * j);
        let j_t = j.transpose();
        let p_t = p.transpose();
        let t_t = t.transpose();
        // J' = J T / 2, P' = T P / 2, T = 3I - P J
        let mut g_j_prev = (&g_j * &t_t).scale(0.5);
        let mut g_p_prev = (&t_t * &g_p).scale(0.5);
        let mut g_t = (&j_t * &g_j).scale(0.5);
        g_t.axpy(0.5, &(&g_p * &p_t));
        g_p_prev.axpy(-1.0, &(&g_t * &j_t));
        g_j_prev.axpy(-1.0, &(&p_t * &g_t));
        g_j = g_j_prev;
        g_p = g_p_prev;
    }
    // J_0 = Q, P_0 = I is constant
    let g_q = g_j;

    // Q = Sigma / trace, trace = tr(Sigma)
    g_trace -= g_q.dot(sigma) / (trace * trace);
    let mut g_sigma = g_q.scale(1.0 / trace);
    for a in 0..r {
        g_sigma.set(a, a, g_sigma.get(a, a) + g_trace);
    }

    // Sigma = Xc^T Xc / N
    let sym = &g_sigma + &g_sigma.transpose();
    let mut g_x = (centred * &sym).scale(1.0 / n as f64);

    // Xc = X - 1 mean^T
    let mut col_mean = vec![0.0; r];
    for i in 0..n {
        for (m, v) in col_mean.iter_mut().zip(g_x.row(i)) {
            *m += v;
        }
    }
    for m in &mut col_mean {
        *m /= n as f64;
    }
    for i in 0..n {
        for (v, m) in g_x.row_mut(i).iter_mut().zip(&col_mean) {
            *v -= m;
        }
    }
    Ok(g_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::jacobi_eigh;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize, r: usize) -> TokenMatrix {
        TokenMatrix::new(Mat::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0))).unwrap()
    }

    /// Unit-trace SPD matrix with eigenvalues drawn from `[lo, hi]` before normalising.
    fn random_unit_trace_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Mat {
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let basis = jacobi_eigh(&(&a + &a.transpose())).unwrap().vectors;
        let mut eig: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let total: f64 = eig.iter().sum();
        for e in &mut eig {
            *e /= total;
        }
        let scaled = Mat::from_fn(n, n, |i, j| basis.get(i, j) * eig[j]);
        let q = &scaled * &basis.transpose();
        // symmetrise away rounding
        Mat::from_fn(n, n, |i, j| 0.5 * (q.get(i, j) + q.get(j, i)))
    }

    /// Brute force: explicit mean, then explicit sum of outer products.
    fn covariance_oracle(x: &Mat) -> Mat {
        let (n, r) = (x.rows(), x.cols());
        let mu: Vec<f64> = (0..r)
            .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
            .collect();
        let mut s = Mat::zeros(r, r);
        for i in 0..n {
            let d: Vec<f64> = (0..r).map(|j| x.get(i, j) - mu[j]).collect();
            for a in 0..r {
                for b in 0..r {
                    s.set(a, b, s.get(a, b) + d[a] * d[b] / n as f64);
                }
            }
        }
        s
    }

    #[test]
    fn covariance_of_two_unit_vectors() {
        let t = TokenMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let s = covariance_pool(&t).unwrap();
        assert_eq!(s, Mat::from_rows(&[[0.25, -0.25], [-0.25, 0.25]]).unwrap());
    }

    #[test]
    fn covariance_of_identical_tokens_is_zero() {
        let t = TokenMatrix::from_rows(&[[0.3, -2.0, 1.5]; 5]).unwrap();
        assert_eq!(covariance_pool(&t).unwrap(), Mat::zeros(3, 3));
    }

    #[test]
    fn covariance_needs_two_tokens() {
        let t = TokenMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(covariance_pool(&t), Err(Error::InsufficientTokens(1))));
    }

    #[test]
    fn covariance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t = random_tokens(&mut rng, 16, 8);
            let diff = covariance_pool(&t).unwrap().max_abs_diff(&covariance_oracle(t.as_mat()));
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn trace_normalize_cases() {
        let s = Mat::from_rows(&[[0.25, -0.25], [-0.25, 0.25]]).unwrap();
        let (q, tr) = trace_normalize(&s, 1e-8).unwrap();
        assert_eq!(tr, 0.5);
        assert_eq!(q, Mat::from_rows(&[[0.5, -0.5], [-0.5, 0.5]]).unwrap());

        let (q, tr) = trace_normalize(&Mat::identity(4), 1e-8).unwrap();
        assert_eq!(tr, 4.0);
        assert_eq!(q, Mat::identity(4).scale(0.25));

        assert!(matches!(
            trace_normalize(&Mat::zeros(3, 3), 1e-8),
            Err(Error::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn newton_schulz_identity_is_fixed_point() {
        for k in 1..6 {
            let ns = newton_schulz_sqrt(&Mat::identity(3), k).unwrap();
            assert_eq!(ns.sqrt(), &Mat::identity(3));
        }
    }

    #[test]
    fn newton_schulz_scalar_recurrence() {
        // exact rational value of the k = 3 recurrence from J0 = 1/4, P0 = 1
        let expected = 1_072_353_284_651.0 / 2_199_023_255_552.0;
        let ns = newton_schulz_sqrt(&Mat::diag(&[0.25]), 3).unwrap();
        assert!((ns.sqrt().get(0, 0) - expected).abs() < 1e-12);
        assert!((ns.sqrt().get(0, 0) - 0.5).abs() < 0.02);
    }

    #[test]
    fn newton_schulz_rejects_zero_iterations() {
        assert!(matches!(
            newton_schulz_sqrt(&Mat::identity(2), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn newton_schulz_reports_divergence() {
        // far outside the convergence basin the iterates blow up
        let q = Mat::diag(&[1e80]);
        assert!(matches!(
            newton_schulz_sqrt(&q, 10),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn newton_schulz_converges_on_8x8() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_unit_trace_spd(&mut rng, 8, 1.0, 10.0);
        let ns = newton_schulz_sqrt(&q, 20).unwrap();
        let j = ns.sqrt();
        assert!((&(j * j) - &q).frobenius() / q.frobenius() < 1e-6);

        let eig_q = jacobi_eigh(&q).unwrap();
        let oracle = eig_q.map_spectrum(f64::sqrt);
        assert!(j.max_abs_diff(&oracle) < 1e-6);
        let j_sym = Mat::from_fn(8, 8, |a, b| 0.5 * (j.get(a, b) + j.get(b, a)));
        let eig_j = jacobi_eigh(&j_sym).unwrap();
        for (lj, lq) in eig_j.values.iter().zip(&eig_q.values) {
            assert!((lj - lq.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn newton_schulz_error_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let q = random_unit_trace_spd(&mut rng, 8, 1.0, 10.0);
            let eig = jacobi_eigh(&q).unwrap();
            assert!(eig.values[0] >= 0.01);
            let ns = newton_schulz_sqrt(&q, 5).unwrap();
            let errs: Vec<f64> = ns.js[1..]
                .iter()
                .map(|j| (&(j * j) - &q).frobenius())
                .collect();
            assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
        }
    }

    #[test]
    fn vech_cases() {
        let s = Mat::from_rows(&[[1.0, 2.0], [2.0, 3.0]]).unwrap();
        assert_eq!(vech_upper(&s).unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(
            vech_upper(&Mat::identity(3)).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]
        );
        let asym = Mat::from_rows(&[[1.0, 2.0], [0.0, 3.0]]).unwrap();
        assert!(matches!(vech_upper(&asym), Err(Error::Validation(_))));
        assert!(matches!(unvech_upper(&[1.0, 2.0], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_degenerate_non_strict_gives_flagged_zeros() {
        let t = TokenMatrix::from_rows(&[[1.0, 2.0]; 4]).unwrap();
        let out = sopool_forward(&t, &SoPoolConfig::default()).unwrap();
        assert!(out.is_degenerate());
        assert_eq!(out.features, vec![0.0; 3]);
        let g = sopool_backward(&[1.0, -2.0, 3.0], &out.tape).unwrap();
        assert_eq!(g, Mat::zeros(4, 2));
    }

    #[test]
    fn forward_degenerate_strict_errors() {
        let t = TokenMatrix::from_rows(&[[1.0, 2.0]; 4]).unwrap();
        let cfg = SoPoolConfig {
            strict: true,
            ..SoPoolConfig::default()
        };
        assert!(matches!(
            sopool_forward(&t, &cfg),
            Err(Error::DegenerateCovariance { .. })
        ));
    }

    #[test]
    fn forward_on_two_unit_vectors() {
        // Q = [[.5,-.5],[-.5,.5]] is idempotent, so every NS iterate equals Q
        let t = TokenMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let out = sopool_forward(&t, &SoPoolConfig::default()).unwrap();
        let c = 0.5_f64.sqrt() * 0.5;
        let expected = [c, -c, c];
        for (a, b) in out.features.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_of_zero_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_tokens(&mut rng, 6, 4);
        let out = sopool_forward(&t, &SoPoolConfig::default()).unwrap();
        let g = sopool_backward(&vec![0.0; 10], &out.tape).unwrap();
        assert_eq!(g.frobenius(), 0.0);
    }

    #[test]
    fn backward_rejects_mismatched_tape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = random_tokens(&mut rng, 6, 4);
        let out = sopool_forward(&t, &SoPoolConfig::default()).unwrap();
        assert!(matches!(
            sopool_backward(&[0.0; 6], &out.tape),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn backward_matches_central_differences() {
        let cfg = SoPoolConfig::default();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let t = random_tokens(&mut rng, 6, 4);
            let w: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |m: &Mat| -> f64 {
                let f = sopool_forward(&TokenMatrix::new(m.clone()).unwrap(), &cfg)
                    .unwrap()
                    .features;
                f.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            let out = sopool_forward(&t, &cfg).unwrap();
            let g = sopool_backward(&w, &out.tape).unwrap();
            for idx in 0..24 {
                let mut plus = t.as_mat().clone();
                plus.data_mut()[idx] += h;
                let mut minus = t.as_mat().clone();
                minus.data_mut()[idx] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = g.data()[idx];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        assert!(checked >= 100);
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn covariance_is_symmetric_psd_and_permutation_invariant(seed in any::<u64>(), n in 2usize..12, r in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tokens(&mut rng, n, r);
            let s = covariance_pool(&t).unwrap();
            prop_assert_eq!(s.max_abs_diff(&s.transpose()), 0.0);
            let eig = jacobi_eigh(&s).unwrap();
            prop_assert!(eig.values.iter().all(|&l| l >= -1e-10));

            let mut order: Vec<usize> = (0..n).collect();
            crate::rng::shuffle(&mut rng, &mut order);
            let shuffled = TokenMatrix::new(Mat::from_fn(n, r, |i, j| t.as_mat().get(order[i], j))).unwrap();
            prop_assert!(covariance_pool(&shuffled).unwrap().max_abs_diff(&s) < 1e-12);
        }

        #[test]
        fn normalized_trace_is_one(seed in any::<u64>(), n in 2usize..12, r in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = covariance_pool(&random_tokens(&mut rng, n, r)).unwrap();
            let (q, _) = trace_normalize(&s, 1e-8).unwrap();
            prop_assert!((q.trace().unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn features_are_homogeneous_in_deviation_scale(seed in any::<u64>(), c in 0.05f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = random_tokens(&mut rng, 7, 4);
            let x = t.as_mat();
            let mu: Vec<f64> = (0..4).map(|j| (0..7).map(|i| x.get(i, j)).sum::<f64>() / 7.0).collect();
            let scaled = TokenMatrix::new(Mat::from_fn(7, 4, |i, j| mu[j] + c * (x.get(i, j) - mu[j]))).unwrap();
            let cfg = SoPoolConfig::default();
            let f = sopool_forward(&t, &cfg).unwrap().features;
            let g = sopool_forward(&scaled, &cfg).unwrap().features;
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let err = f.iter().zip(&g).map(|(a, b)| (c * a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err / (c * norm) < 1e-9);
        }

        #[test]
        fn vech_round_trips(seed in any::<u64>(), r in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Mat::from_fn(r, r, |_, _| rng.random_range(-5.0..5.0));
            let s = Mat::from_fn(r, r, |i, j| if i <= j { a.get(i, j) } else { a.get(j, i) });
            let v = vech_upper(&s).unwrap();
            prop_assert_eq!(v.len(), vech_len(r));
            prop_assert_eq!(unvech_upper(&v, r).unwrap(), s);
        }
    }
}
