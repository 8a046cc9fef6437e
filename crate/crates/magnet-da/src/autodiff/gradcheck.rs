//! Finite-difference verification of analytic gradients.
//!
//! The harness compares gradients already accumulated in a [`ParamSet`]
//! against central differences `(f(p+h) - f(p-h)) / 2h`, coordinate by
//! coordinate. It is deliberately independent of the tape: it only perturbs
//! parameter values and re-evaluates a scalar loss.

use crate::error::Result;
use crate::rng::SplitMix64;

use super::params::ParamSet;

/// Relative-error denominator floor.
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates checked per tensor. Tensors at or below this size are
    /// checked exhaustively; larger ones get this many sampled coordinates
    /// (never fewer than 32).
    pub coords_per_tensor: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            coords_per_tensor: 32,
            seed: 0x6d61_676e_6574,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Something whose scalar loss can be re-evaluated after perturbing its
/// parameters. `loss` must be deterministic in the parameter values.
pub trait GradCheckTarget {
    fn loss(&mut self) -> Result<f64>;
    fn params(&mut self) -> &mut ParamSet;
}

/// Adapter turning a closure over a [`ParamSet`] into a target.
pub struct FnTarget<F: FnMut(&ParamSet) -> Result<f64>> {
    params: ParamSet,
    f: F,
}

impl<F: FnMut(&ParamSet) -> Result<f64>> FnTarget<F> {
    pub fn new(params: ParamSet, f: F) -> Self {
        FnTarget { params, f }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }
}

impl<F: FnMut(&ParamSet) -> Result<f64>> GradCheckTarget for FnTarget<F> {
    fn loss(&mut self) -> Result<f64> {
        (self.f)(&self.params)
    }

    fn params(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Compare the analytic gradients stored in the target's parameters against
/// central finite differences of its loss.
///
/// The caller is expected to have run one backward pass beforehand so that
/// `param.grad` holds exactly one accumulation of `dloss/dp`. Relative error
/// uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    target: &mut dyn GradCheckTarget,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let h = cfg.step;
    let budget = cfg.coords_per_tensor.max(32);
    let n_params = target.params().len();
    let mut per_param = Vec::with_capacity(n_params);
    let mut global_max: f64 = 0.0;

    for idx in 0..n_params {
        let (name, numel, analytic) = {
            let ps = target.params();
            let p = ps.iter().nth(idx).expect("index in range").1;
            (p.name.clone(), p.value.numel(), p.grad.data().to_vec())
        };
        let coords: Vec<usize> = if numel <= budget {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            let mut rng = SplitMix64::stream(cfg.seed, idx as u64);
            rng.shuffle(&mut all);
            all.truncate(budget);
            all.sort_unstable();
            all
        };

        let mut max_rel: f64 = 0.0;
        for &c in &coords {
            let original = {
                let ps = target.params();
                let p = ps.iter().nth(idx).expect("index in range").1;
                p.value.data()[c]
            };
            set_coord(target.params(), idx, c, original + h);
            let f_plus = target.loss()?;
            set_coord(target.params(), idx, c, original - h);
            let f_minus = target.loss()?;
            set_coord(target.params(), idx, c, original);

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
        }
        global_max = global_max.max(max_rel);
        per_param.push(ParamCheck {
            name,
            max_rel_err: max_rel,
            coords_checked: coords.len(),
        });
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err: global_max,
    })
}

fn set_coord(params: &mut ParamSet, idx: usize, coord: usize, value: f64) {
    let p = params.iter_mut().nth(idx).expect("index in range").1;
    p.value.data_mut()[coord] = value;
}
