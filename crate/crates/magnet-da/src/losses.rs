//! Loss terms of the adaptation objective.
//!
//! The objective has three parts: softmax negative log-likelihood on labeled
//! source samples, mean prediction entropy on unlabeled target samples, and a
//! biased Gaussian-kernel MMD between source and target features at every tap
//! site. [`total_loss`] combines them as `NLL + gamma * H + lambda * sum MMD`
//! and reports the decomposition.
//!
//! [`mmd_biased_reference`] is a deliberately naive scalar triple loop kept
//! independent of the vectorized tape op so either can check the other.

use crate::autodiff::{Tape, Var};
use crate::error::{MagnetError, Result};
use crate::tensor::{row, Tensor};

/// Bandwidth ladder applied around the median-heuristic sigma.
pub const MEDIAN_LADDER: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Gaussian kernel configuration for MMD.
///
/// The median variants resolve their bandwidth from the pooled batch at every
/// call, so they stay hyperparameter-free; the resolved sigma is a constant
/// with respect to gradients.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelSpec {
    /// Single bandwidth, the median heuristic over the pooled sample.
    MedianHeuristic,
    /// Median-heuristic sigma scaled by `MEDIAN_LADDER`, uniform weights.
    MedianLadder,
    /// Fixed bandwidths with weights summing to 1.
    Explicit {
        bandwidths: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl KernelSpec {
    /// Fixed bandwidths with uniform weights.
    pub fn explicit(bandwidths: Vec<f64>) -> Result<Self> {
        let n = bandwidths.len();
        if n == 0 {
            return Err(MagnetError::Parameter(
                "kernel needs at least one bandwidth".into(),
            ));
        }
        Self::explicit_weighted(bandwidths, vec![1.0 / n as f64; n])
    }

    pub fn explicit_weighted(bandwidths: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(MagnetError::Parameter(
                "kernel needs at least one bandwidth".into(),
            ));
        }
        if bandwidths.len() != weights.len() {
            return Err(MagnetError::Parameter(format!(
                "{} bandwidths with {} weights",
                bandwidths.len(),
                weights.len()
            )));
        }
        if let Some(&b) = bandwidths.iter().find(|&&b| b <= 0.0) {
            return Err(MagnetError::Parameter(format!(
                "bandwidth {b} must be > 0"
            )));
        }
        if let Some(&w) = weights.iter().find(|&&w| w <= 0.0) {
            return Err(MagnetError::Parameter(format!("weight {w} must be > 0")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(MagnetError::Parameter(format!(
                "kernel weights sum to {sum}, expected 1"
            )));
        }
        Ok(KernelSpec::Explicit {
            bandwidths,
            weights,
        })
    }

    /// Resolve to concrete `(bandwidths, weights)` for one feature pair.
    pub fn resolve(&self, zs: &Tensor, zt: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            KernelSpec::MedianHeuristic => {
                let sigma = median_bandwidth(zs, zt)?;
                Ok((vec![sigma], vec![1.0]))
            }
            KernelSpec::MedianLadder => {
                let sigma = median_bandwidth(zs, zt)?;
                let n = MEDIAN_LADDER.len();
                Ok((
                    MEDIAN_LADDER.iter().map(|f| f * sigma).collect(),
                    vec![1.0 / n as f64; n],
                ))
            }
            KernelSpec::Explicit {
                bandwidths,
                weights,
            } => Ok((bandwidths.clone(), weights.clone())),
        }
    }
}

/// `exp(-||x - y||^2 / (2 sigma^2))`.
pub fn gaussian_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MagnetError::Dimension(format!(
            "gaussian_kernel of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if sigma <= 0.0 {
        return Err(MagnetError::Parameter(format!(
            "gaussian_kernel sigma {sigma} must be > 0"
        )));
    }
    let mut sq = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        sq += d * d;
    }
    Ok((-sq / (2.0 * sigma * sigma)).exp())
}

/// Median-heuristic bandwidth over the pooled rows of `zs` and `zt`.
///
/// Computes the median of all squared pairwise distances among the pooled
/// sample (self-distances excluded; even counts average the two middle
/// values) and returns its square root. Falls back to 1.0 when the median is
/// zero, which covers the all-identical-points case.
pub fn median_bandwidth(zs: &Tensor, zt: &Tensor) -> Result<f64> {
    let (ss, st) = (zs.shape(), zt.shape());
    if ss.len() != 2 || st.len() != 2 || ss[1] != st[1] {
        return Err(MagnetError::Dimension(format!(
            "median_bandwidth of {ss:?} and {st:?}"
        )));
    }
    let (ns, nt, d) = (ss[0], st[0], ss[1]);
    let n = ns + nt;
    if n < 2 {
        return Err(MagnetError::Parameter(
            "median_bandwidth needs a pooled sample of at least 2 points".into(),
        ));
    }
    let point = |i: usize| -> &[f64] {
        if i < ns {
            row(zs, i)
        } else {
            row(zt, i - ns)
        }
    };
    let mut sq = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        let a = point(i);
        for j in (i + 1)..n {
            let b = point(j);
            let mut acc = 0.0;
            for t in 0..d {
                let diff = a[t] - b[t];
                acc += diff * diff;
            }
            sq.push(acc);
        }
    }
    sq.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = sq.len();
    let median = if m % 2 == 1 {
        sq[m / 2]
    } else {
        0.5 * (sq[m / 2 - 1] + sq[m / 2])
    };
    if median <= 0.0 {
        return Ok(1.0);
    }
    Ok(median.sqrt())
}

/// Differentiable biased MMD between the rows of `zs` and `zt`.
///
/// The kernel spec is resolved against the current feature values (median
/// bandwidths are recomputed per call and are constants w.r.t. gradients).
pub fn mmd_biased(tape: &mut Tape, zs: Var, zt: Var, kernel: &KernelSpec) -> Result<Var> {
    let (sigmas, weights) = kernel.resolve(tape.value(zs), tape.value(zt))?;
    tape.mmd_biased(zs, zt, &sigmas, &weights)
}

/// Scalar triple-loop reference for the biased MMD, written directly from the
/// estimator's definition. Kept independent of the vectorized tape op.
pub fn mmd_biased_reference(
    zs: &Tensor,
    zt: &Tensor,
    sigmas: &[f64],
    weights: &[f64],
) -> Result<f64> {
    let (ss, st) = (zs.shape(), zt.shape());
    if ss.len() != 2 || st.len() != 2 || ss[1] != st[1] {
        return Err(MagnetError::Dimension(format!(
            "mmd_biased_reference of {ss:?} and {st:?}"
        )));
    }
    let (ns, nt) = (ss[0], st[0]);
    let mut total = 0.0;
    for (&sigma, &wt) in sigmas.iter().zip(weights) {
        let mut acc = 0.0;
        for i in 0..ns {
            for j in 0..ns {
                acc += gaussian_kernel(row(zs, i), row(zs, j), sigma)? / (ns * ns) as f64;
            }
        }
        for i in 0..nt {
            for j in 0..nt {
                acc += gaussian_kernel(row(zt, i), row(zt, j), sigma)? / (nt * nt) as f64;
            }
        }
        for i in 0..ns {
            for j in 0..nt {
                acc -= 2.0 * gaussian_kernel(row(zs, i), row(zt, j), sigma)? / (ns * nt) as f64;
            }
        }
        total += wt * acc;
    }
    Ok(total)
}

/// Row-wise softmax (tape op re-export for the loss-level API).
pub fn softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.softmax(logits)
}

/// Mean prediction entropy of a probability matrix.
pub fn entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    tape.entropy(probs)
}

/// Source negative log-likelihood under the softmax model.
pub fn nll_source(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.nll_loss(logits, labels)
}

/// Per-iteration decomposition of the combined objective.
#[derive(Clone, Debug)]
pub struct LossReport {
    pub source_nll: f64,
    pub target_entropy: f64,
    pub mmd_per_tap: Vec<f64>,
    pub total: f64,
    pub lambda_mmd: f64,
    pub gamma_entropy: f64,
}

impl LossReport {
    /// Absolute deviation between `total` and its recomposed parts.
    pub fn decomposition_error(&self) -> f64 {
        let mut mmd_sum = 0.0;
        for &m in &self.mmd_per_tap {
            mmd_sum += m;
        }
        let recomposed =
            (self.source_nll + self.gamma_entropy * self.target_entropy) + self.lambda_mmd * mmd_sum;
        (self.total - recomposed).abs()
    }
}

/// Combined objective: `NLL(f_s on source) + gamma * H(f_t on target) +
/// lambda * sum_i MMD(zs_i, zt_i)`.
///
/// Returns the differentiable scalar and its decomposition. Every tap's MMD is
/// evaluated (and reported) even when `lambda` is zero, so ablation traces
/// still show the feature gap.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    source_logits_fs: Var,
    source_labels: &[usize],
    target_probs_ft: Var,
    tap_features: &[(Var, Var)],
    kernel: &KernelSpec,
    lambda_mmd: f64,
    gamma_entropy: f64,
) -> Result<(Var, LossReport)> {
    if tap_features.is_empty() {
        return Err(MagnetError::Config(
            "total_loss needs at least one MMD tap".into(),
        ));
    }
    let nll = nll_source(tape, source_logits_fs, source_labels)?;
    let ent = entropy(tape, target_probs_ft)?;

    let mut mmd_vars = Vec::with_capacity(tap_features.len());
    for &(zs, zt) in tap_features {
        mmd_vars.push(mmd_biased(tape, zs, zt, kernel)?);
    }
    let mut mmd_sum = mmd_vars[0];
    for &m in &mmd_vars[1..] {
        mmd_sum = tape.add(mmd_sum, m)?;
    }

    let ent_scaled = tape.scale(ent, gamma_entropy);
    let mmd_scaled = tape.scale(mmd_sum, lambda_mmd);
    let partial = tape.add(nll, ent_scaled)?;
    let total = tape.add(partial, mmd_scaled)?;

    let report = LossReport {
        source_nll: tape.value(nll).item()?,
        target_entropy: tape.value(ent).item()?,
        mmd_per_tap: mmd_vars
            .iter()
            .map(|&v| tape.value(v).item())
            .collect::<Result<_>>()?,
        total: tape.value(total).item()?,
        lambda_mmd,
        gamma_entropy,
    };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, FnTarget, GradCheckConfig, ParamSet, Tape};
    use crate::rng::SplitMix64;

    fn random_matrix(n: usize, d: usize, rng: &mut SplitMix64) -> Tensor {
        Tensor::from_vec(
            vec![n, d],
            (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_kernel_closed_forms() {
        let x = [0.3, -0.7, 1.1];
        assert_eq!(gaussian_kernel(&x, &x, 0.5).unwrap(), 1.0);
        let k = gaussian_kernel(&[0.0], &[2.0], 1.0).unwrap();
        assert!((k - (-2.0f64).exp()).abs() < 1e-12);
        assert!((k - 0.135335).abs() < 1e-6);
        // Wide-bandwidth limit approaches 1.
        let k = gaussian_kernel(&[0.0], &[1.0], 1e6).unwrap();
        assert!(k > 0.999999);
        assert!(gaussian_kernel(&[0.0], &[1.0], 0.0).is_err());
        assert!(gaussian_kernel(&[0.0], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn median_bandwidth_single_pair_and_fallback() {
        let zs = Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap();
        let zt = Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap();
        assert_eq!(median_bandwidth(&zs, &zt).unwrap(), 2.0);

        let same = Tensor::from_vec(vec![3, 2], vec![1.0; 6]).unwrap();
        assert_eq!(median_bandwidth(&same, &same).unwrap(), 1.0);
    }

    #[test]
    fn median_bandwidth_matches_brute_force() {
        let mut rng = SplitMix64::new(77);
        let zs = random_matrix(16, 4, &mut rng);
        let zt = random_matrix(16, 4, &mut rng);
        let got = median_bandwidth(&zs, &zt).unwrap();

        // Brute force: gather the pooled points, all i<j squared distances,
        // full sort, midpoint of the two central elements.
        let mut pooled: Vec<Vec<f64>> = Vec::new();
        for i in 0..16 {
            pooled.push(row(&zs, i).to_vec());
        }
        for i in 0..16 {
            pooled.push(row(&zt, i).to_vec());
        }
        let mut dists = Vec::new();
        for i in 0..pooled.len() {
            for j in (i + 1)..pooled.len() {
                let sq: f64 = pooled[i]
                    .iter()
                    .zip(&pooled[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                dists.push(sq);
            }
        }
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let m = dists.len();
        let median = if m % 2 == 1 {
            dists[m / 2]
        } else {
            0.5 * (dists[m / 2 - 1] + dists[m / 2])
        };
        assert_eq!(got, median.sqrt());
    }

    #[test]
    fn mmd_vanishes_on_identical_samples() {
        let mut rng = SplitMix64::new(1);
        let z = random_matrix(6, 3, &mut rng);
        let mut tape = Tape::new();
        let zs = tape.input(z.clone());
        let zt = tape.input(z);
        let m = mmd_biased(&mut tape, zs, zt, &KernelSpec::explicit(vec![1.0]).unwrap()).unwrap();
        assert_eq!(tape.value(m).item().unwrap(), 0.0);
    }

    #[test]
    fn mmd_single_pair_closed_form() {
        let mut tape = Tape::new();
        let zs = tape.input(Tensor::from_vec(vec![1, 1], vec![0.0]).unwrap());
        let zt = tape.input(Tensor::from_vec(vec![1, 1], vec![2.0]).unwrap());
        let m = mmd_biased(&mut tape, zs, zt, &KernelSpec::explicit(vec![1.0]).unwrap()).unwrap();
        let got = tape.value(m).item().unwrap();
        let want = 2.0 - 2.0 * (-2.0f64).exp();
        assert!((got - want).abs() < 1e-15);
        assert!((got - 1.729329).abs() < 1e-6);
    }

    #[test]
    fn mmd_matches_triple_loop_reference() {
        let mut rng = SplitMix64::new(9);
        let zs = random_matrix(8, 3, &mut rng);
        let zt = random_matrix(8, 3, &mut rng);
        let spec = KernelSpec::explicit_weighted(vec![0.7, 2.3], vec![0.4, 0.6]).unwrap();
        let (sigmas, weights) = spec.resolve(&zs, &zt).unwrap();
        let reference = mmd_biased_reference(&zs, &zt, &sigmas, &weights).unwrap();
        let mut tape = Tape::new();
        let a = tape.input(zs);
        let b = tape.input(zt);
        let m = tape.mmd_biased(a, b, &sigmas, &weights).unwrap();
        assert!((tape.value(m).item().unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn mmd_gradients_match_finite_differences() {
        let mut rng = SplitMix64::new(13);
        let zs0 = random_matrix(8, 3, &mut rng);
        let zt0 = random_matrix(8, 3, &mut rng);
        let mut params = ParamSet::new();
        let zs = params.register("zs", zs0).unwrap();
        let zt = params.register("zt", zt0).unwrap();
        let sigmas = vec![1.3];
        let weights = vec![1.0];

        let mut tape = Tape::new();
        let a = tape.param(&params, zs);
        let b = tape.param(&params, zt);
        let loss = tape.mmd_biased(a, b, &sigmas, &weights).unwrap();
        tape.backward(loss, &mut params).unwrap();

        let (s2, w2) = (sigmas.clone(), weights.clone());
        let mut target = FnTarget::new(params, move |ps: &ParamSet| {
            let mut tape = Tape::new();
            let a = tape.param(ps, zs);
            let b = tape.param(ps, zt);
            let loss = tape.mmd_biased(a, b, &s2, &w2)?;
            tape.value(loss).item()
        });
        let report = grad_check(
            &mut target,
            &GradCheckConfig {
                step: 1e-6,
                coords_per_tensor: 32,
                seed: 3,
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn entropy_closed_forms() {
        let mut tape = Tape::new();
        let onehot = tape.input(
            Tensor::from_vec(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let h = entropy(&mut tape, onehot).unwrap();
        assert_eq!(tape.value(h).item().unwrap(), 0.0);

        let uniform = tape.input(Tensor::full(&[3, 4], 0.25));
        let h = entropy(&mut tape, uniform).unwrap();
        let got = tape.value(h).item().unwrap();
        assert!((got - 4.0f64.ln()).abs() < 1e-12);
        assert!((got - 1.386294).abs() < 1e-6);

        // Independent scalar evaluation for a specific distribution.
        let p = [0.7, 0.2, 0.1];
        let want: f64 = -p.iter().map(|&v: &f64| v * v.ln()).sum::<f64>();
        let probs = tape.input(Tensor::from_vec(vec![1, 3], p.to_vec()).unwrap());
        let h = entropy(&mut tape, probs).unwrap();
        assert!((tape.value(h).item().unwrap() - want).abs() < 1e-12);
        assert!((want - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_bad_rows() {
        let mut tape = Tape::new();
        let bad = tape.input(Tensor::from_vec(vec![1, 2], vec![0.7, 0.2]).unwrap());
        assert!(entropy(&mut tape, bad).is_err());
        let neg = tape.input(Tensor::from_vec(vec![1, 2], vec![1.5, -0.5]).unwrap());
        assert!(entropy(&mut tape, neg).is_err());
    }

    #[test]
    fn softmax_closed_forms_and_shift_invariance() {
        let mut tape = Tape::new();
        let equal = tape.input(Tensor::full(&[2, 5], 3.0));
        let p = softmax(&mut tape, equal).unwrap();
        assert!(tape
            .value(p)
            .data()
            .iter()
            .all(|&v| (v - 0.2).abs() < 1e-15));

        let z = tape.input(Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let p = softmax(&mut tape, z).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(p).data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((tape.value(p).data()[0] - 0.731059).abs() < 1e-6);
        assert!((tape.value(p).data()[1] - 0.268941).abs() < 1e-6);

        let mut rng = SplitMix64::new(2);
        let logits = random_matrix(4, 6, &mut rng);
        let mut shifted = logits.clone();
        for v in shifted.data_mut() {
            *v += 1000.0;
        }
        let a = tape.input(logits);
        let b = tape.input(shifted);
        let pa = softmax(&mut tape, a).unwrap();
        let pb = softmax(&mut tape, b).unwrap();
        let diff = tape.value(pa).max_abs_diff(tape.value(pb)).unwrap();
        assert!(diff < 1e-12, "shift changed softmax by {diff}");
    }

    #[test]
    fn nll_closed_forms_and_scalar_oracle() {
        let mut tape = Tape::new();
        // Margin 100 in favor of the true class.
        let confident = tape.input(
            Tensor::from_vec(vec![2, 3], vec![100.0, 0.0, 0.0, 0.0, 100.0, 0.0]).unwrap(),
        );
        let loss = nll_source(&mut tape, confident, &[0, 1]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-6);

        let uniform = tape.input(Tensor::zeros(&[4, 10]));
        let loss = nll_source(&mut tape, uniform, &[3, 1, 9, 0]).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - 10.0f64.ln()).abs() < 1e-12);
        assert!((got - 2.302585).abs() < 1e-6);

        // Random batch against a per-sample scalar computation.
        let mut rng = SplitMix64::new(33);
        let logits = random_matrix(5, 3, &mut rng);
        let labels = [2usize, 0, 1, 1, 2];
        let mut want = 0.0;
        for i in 0..5 {
            let r = row(&logits, i);
            let denom: f64 = r.iter().map(|v| v.exp()).sum();
            want -= (r[labels[i]].exp() / denom).ln();
        }
        want /= 5.0;
        let lv = tape.input(logits);
        let loss = nll_source(&mut tape, lv, &labels).unwrap();
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-12);

        let out_of_range = tape.input(Tensor::zeros(&[1, 3]));
        assert!(nll_source(&mut tape, out_of_range, &[3]).is_err());
    }

    #[test]
    fn total_loss_reduces_to_components() {
        let mut rng = SplitMix64::new(71);
        let logits = random_matrix(4, 3, &mut rng);
        let labels = [0usize, 1, 2, 0];
        let t_logits = random_matrix(4, 3, &mut rng);
        let zs = random_matrix(4, 5, &mut rng);
        let zt = random_matrix(4, 5, &mut rng);
        let kernel = KernelSpec::MedianHeuristic;

        // lambda = gamma = 0 reduces exactly to the source NLL.
        let mut tape = Tape::new();
        let sl = tape.input(logits.clone());
        let tl = tape.input(t_logits.clone());
        let tp = softmax(&mut tape, tl).unwrap();
        let a = tape.input(zs.clone());
        let b = tape.input(zt.clone());
        let (loss, report) =
            total_loss(&mut tape, sl, &labels, tp, &[(a, b)], &kernel, 0.0, 0.0).unwrap();
        let nll_only = nll_source(&mut tape, sl, &labels).unwrap();
        assert_eq!(
            tape.value(loss).item().unwrap(),
            tape.value(nll_only).item().unwrap()
        );
        assert_eq!(report.decomposition_error(), 0.0);

        // Identical tap features kill the MMD contribution.
        let mut tape = Tape::new();
        let sl = tape.input(logits.clone());
        let tl = tape.input(t_logits.clone());
        let tp = softmax(&mut tape, tl).unwrap();
        let a = tape.input(zs.clone());
        let b = tape.input(zs.clone());
        let (_, report) =
            total_loss(&mut tape, sl, &labels, tp, &[(a, b)], &kernel, 1.0, 0.5).unwrap();
        assert!(report.mmd_per_tap.iter().all(|&m| m == 0.0));

        // Random micro-batch: total equals independently summed components.
        let mut tape = Tape::new();
        let sl = tape.input(logits);
        let tl = tape.input(t_logits);
        let tp = softmax(&mut tape, tl).unwrap();
        let a = tape.input(zs.clone());
        let b = tape.input(zt.clone());
        let a2 = tape.input(zt.clone());
        let b2 = tape.input(zs.clone());
        let (loss, report) = total_loss(
            &mut tape,
            sl,
            &labels,
            tp,
            &[(a, b), (a2, b2)],
            &kernel,
            1.0,
            1.0,
        )
        .unwrap();
        assert!(report.decomposition_error() < 1e-12);
        assert_eq!(report.mmd_per_tap.len(), 2);
        assert_eq!(tape.value(loss).item().unwrap(), report.total);

        // Empty tap list is a configuration error.
        let mut tape = Tape::new();
        let sl = tape.input(Tensor::zeros(&[2, 3]));
        let tl = tape.input(Tensor::zeros(&[2, 3]));
        let tp = softmax(&mut tape, tl).unwrap();
        assert!(total_loss(&mut tape, sl, &[0, 1], tp, &[], &kernel, 1.0, 1.0).is_err());
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        // Micro-batch of raw feature parameters straight into the objective.
        let mut rng = SplitMix64::new(90);
        let mut params = ParamSet::new();
        let sl = params.register("sl", random_matrix(4, 3, &mut rng)).unwrap();
        let tl = params.register("tl", random_matrix(4, 3, &mut rng)).unwrap();
        let zs = params.register("zs", random_matrix(4, 5, &mut rng)).unwrap();
        let zt = params.register("zt", random_matrix(4, 5, &mut rng)).unwrap();
        let labels = vec![0usize, 1, 2, 0];
        // Fixed bandwidth so the loss stays differentiable in the features
        // (the median heuristic would make sigma jump between evaluations).
        let kernel = KernelSpec::explicit(vec![1.5]).unwrap();

        let build = {
            let labels = labels.clone();
            let kernel = kernel.clone();
            move |tape: &mut Tape, ps: &ParamSet| -> crate::error::Result<Var> {
                let slv = tape.param(ps, sl);
                let tlv = tape.param(ps, tl);
                let zsv = tape.param(ps, zs);
                let ztv = tape.param(ps, zt);
                let tp = tape.softmax(tlv)?;
                let (loss, _) =
                    total_loss(tape, slv, &labels, tp, &[(zsv, ztv)], &kernel, 1.0, 1.0)?;
                Ok(loss)
            }
        };

        let mut tape = Tape::new();
        let loss = build(&mut tape, &params).unwrap();
        tape.backward(loss, &mut params).unwrap();

        let rebuild = build.clone();
        let mut target = FnTarget::new(params, move |ps: &ParamSet| {
            let mut tape = Tape::new();
            let loss = rebuild(&mut tape, ps)?;
            tape.value(loss).item()
        });
        let report = grad_check(
            &mut target,
            &GradCheckConfig {
                step: 1e-5,
                coords_per_tensor: 32,
                seed: 5,
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
