//! White-box ℓ∞ attacks on the pixel view.
//!
//! FGSM, PGD and BIM share one loop: starting from `v` (or a uniform random
//! point in the ε-ball), repeatedly step `ξ·sign(∇_v L)` and project back onto
//! `{x : ‖x − v‖_∞ ≤ ε}` intersected with the optional data range. The
//! projection is applied after every step and is exact in floating point: the
//! computed `x − v` never exceeds `ε`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A differentiable scalar objective of the attacked input.
pub trait InputObjective {
    fn loss_and_grad(&self, v: &Tensor) -> Result<(f64, Tensor)>;
}

impl<F> InputObjective for F
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    fn loss_and_grad(&self, v: &Tensor) -> Result<(f64, Tensor)> {
        self(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    Bim,
}

impl AttackFamily {
    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::Bim => "bim",
        }
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackFamily::Fgsm),
            "pgd" => Ok(AttackFamily::Pgd),
            "bim" => Ok(AttackFamily::Bim),
            other => Err(Error::config(format!("unknown attack family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub xi: f64,
    pub steps: usize,
    pub random_start: bool,
    pub clip_data_range: Option<(f64, f64)>,
}

impl Default for AttackSpec {
    /// PGD-3 with ε = ξ = 1/255 on `[0, 1]` data.
    fn default() -> Self {
        Self::pgd(1.0 / 255.0, 1.0 / 255.0, 3)
    }
}

impl AttackSpec {
    pub fn pgd(epsilon: f64, xi: f64, steps: usize) -> Self {
        Self {
            family: AttackFamily::Pgd,
            epsilon,
            xi,
            steps,
            random_start: false,
            clip_data_range: Some((0.0, 1.0)),
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon,
            xi: epsilon,
            steps: 1,
            random_start: false,
            clip_data_range: Some((0.0, 1.0)),
        }
    }

    pub fn bim(epsilon: f64, xi: f64, steps: usize) -> Self {
        Self {
            family: AttackFamily::Bim,
            ..Self::pgd(epsilon, xi, steps)
        }
    }

    /// `ε = 0` is accepted and makes every attack the identity.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(Error::config(format!("step size must be > 0, got {}", self.xi)));
        }
        if self.steps == 0 {
            return Err(Error::config("an attack needs at least one step"));
        }
        match self.family {
            AttackFamily::Fgsm if self.steps != 1 => {
                return Err(Error::config("fgsm takes exactly one step"))
            }
            AttackFamily::Fgsm | AttackFamily::Bim if self.random_start => {
                return Err(Error::config("random start is only defined for pgd"))
            }
            _ => {}
        }
        if let Some((lo, hi)) = self.clip_data_range {
            if !(lo < hi) {
                return Err(Error::config("clip range needs lo < hi"));
            }
        }
        Ok(())
    }

    /// Short label such as `pgd3`.
    pub fn label(&self) -> String {
        match self.family {
            AttackFamily::Fgsm => "fgsm".into(),
            f => format!("{}{}", f.name(), self.steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub v_adv: Tensor,
    /// `v_adv − v`
    pub delta: Tensor,
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `x` onto the ε-ball around `v` (and the data range), nudging by
/// ulps so that the computed `|x − v|` is at most `ε`.
fn project(x: f64, v: f64, eps: f64, range: Option<(f64, f64)>) -> f64 {
    let mut y = x.clamp(v - eps, v + eps);
    if let Some((lo, hi)) = range {
        y = y.clamp(lo, hi);
    }
    while y - v > eps {
        y = y.next_down();
    }
    while v - y > eps {
        y = y.next_up();
    }
    y
}

/// Runs `spec` against `objective` starting from `v`. `observe` sees the
/// iterate after every projected step.
pub fn run_observed(
    objective: &impl InputObjective,
    v: &Tensor,
    spec: &AttackSpec,
    rng: &mut Rng,
    mut observe: impl FnMut(usize, &Tensor),
) -> Result<AdversarialBatch> {
    spec.validate()?;
    let eps = spec.epsilon;
    let range = spec.clip_data_range;
    let mut x = v.clone();
    if spec.random_start && eps > 0.0 {
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            let start = vi + rng.random_range(-eps..=eps);
            *xi = project(start, vi, eps, range);
        }
    }
    for step in 0..spec.steps {
        let (loss, grad) = objective.loss_and_grad(&x)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Attack(format!("non-finite gradient at step {step}")));
        }
        if grad.shape() != v.shape() {
            return Err(Error::dim("objective gradient shape differs from input"));
        }
        for ((xi, &vi), &gi) in x.data_mut().iter_mut().zip(v.data()).zip(grad.data()) {
            *xi = project(*xi + spec.xi * sign(gi), vi, eps, range);
        }
        observe(step, &x);
    }
    let delta = x.sub(v)?;
    Ok(AdversarialBatch { v_adv: x, delta })
}

/// Dispatches on `spec.family`.
pub fn run(objective: &impl InputObjective, v: &Tensor, spec: &AttackSpec, rng: &mut Rng) -> Result<AdversarialBatch> {
    run_observed(objective, v, spec, rng, |_, _| {})
}

/// Iterated signed-gradient ascent with per-step projection.
pub fn pgd(objective: &impl InputObjective, v: &Tensor, spec: &AttackSpec, rng: &mut Rng) -> Result<AdversarialBatch> {
    if spec.family != AttackFamily::Pgd {
        return Err(Error::config("pgd called with a non-pgd spec"));
    }
    run(objective, v, spec, rng)
}

/// One signed-gradient step of size ε.
pub fn fgsm(objective: &impl InputObjective, v: &Tensor, spec: &AttackSpec, rng: &mut Rng) -> Result<AdversarialBatch> {
    if spec.family != AttackFamily::Fgsm {
        return Err(Error::config("fgsm called with a non-fgsm spec"));
    }
    let one_step = AttackSpec {
        xi: spec.epsilon.max(f64::MIN_POSITIVE),
        steps: 1,
        random_start: false,
        ..*spec
    };
    run(objective, v, &one_step, rng)
}

/// PGD without random start.
pub fn bim(objective: &impl InputObjective, v: &Tensor, spec: &AttackSpec, rng: &mut Rng) -> Result<AdversarialBatch> {
    if spec.family != AttackFamily::Bim {
        return Err(Error::config("bim called with a non-bim spec"));
    }
    run(objective, v, spec, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn square(v: &Tensor) -> Result<(f64, Tensor)> {
        Ok((v.sum_squares(), v.scale(2.0)))
    }

    fn no_clip(mut s: AttackSpec) -> AttackSpec {
        s.clip_data_range = None;
        s
    }

    #[test]
    fn scalar_square_three_steps() {
        let v = Tensor::vector(vec![1.0]);
        let spec = no_clip(AttackSpec::pgd(0.1, 0.1, 3));
        let mut r = rng::stream(0, "t");
        let out = pgd(&square, &v, &spec, &mut r).unwrap();
        assert!((out.v_adv.data()[0] - 1.1).abs() < 1e-12);
        assert!(out.delta.data()[0] <= 0.1);
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let zero = |v: &Tensor| Ok((0.0, Tensor::zeros(v.shape())));
        let v = Tensor::vector(vec![0.2, 0.7]);
        let mut r = rng::stream(0, "t");
        let out = fgsm(&zero, &v, &AttackSpec::fgsm(0.05), &mut r).unwrap();
        assert_eq!(out.v_adv, v);
    }

    #[test]
    fn fgsm_uses_full_budget_on_monotone_objective() {
        let linear = |v: &Tensor| Ok((v.sum(), Tensor::full(v.shape(), 3.0)));
        let v = Tensor::vector(vec![0.5]);
        let mut r = rng::stream(0, "t");
        let out = fgsm(&linear, &v, &AttackSpec::fgsm(0.25), &mut r).unwrap();
        assert_eq!(out.delta.data(), &[0.25]);
    }

    #[test]
    fn pgd_one_step_equals_fgsm() {
        let f = |v: &Tensor| Ok((0.0, v.map(|x| (7.0 * x).sin())));
        let v = Tensor::vector((0..20).map(|i| i as f64 / 20.0).collect());
        let mut r = rng::stream(0, "t");
        let a = fgsm(&f, &v, &AttackSpec::fgsm(0.03), &mut r).unwrap();
        let b = pgd(&f, &v, &AttackSpec::pgd(0.03, 0.03, 1), &mut r).unwrap();
        assert!(a.v_adv.bitwise_eq(&b.v_adv));
        let mut bim_spec = AttackSpec::bim(0.03, 0.03, 1);
        bim_spec.random_start = false;
        let c = bim(&f, &v, &bim_spec, &mut r).unwrap();
        assert!(a.v_adv.bitwise_eq(&c.v_adv));
    }

    #[test]
    fn zero_epsilon_is_identity() {
        let v = Tensor::vector(vec![0.0, 0.3, 1.0]);
        let mut r = rng::stream(0, "t");
        let out = pgd(&square, &v, &AttackSpec::pgd(0.0, 0.01, 3), &mut r).unwrap();
        assert!(out.v_adv.bitwise_eq(&v));
    }

    #[test]
    fn respects_data_range() {
        let v = Tensor::vector(vec![0.999, 0.001]);
        let push = |v: &Tensor| Ok((0.0, Tensor::vector(vec![1.0, -1.0]).map(|x| x * v.len() as f64)));
        let mut r = rng::stream(0, "t");
        let out = pgd(&push, &v, &AttackSpec::pgd(0.01, 0.01, 2), &mut r).unwrap();
        assert_eq!(out.v_adv.data(), &[1.0, 0.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::pgd(-0.1, 0.1, 3).validate().is_err());
        assert!(AttackSpec::pgd(0.1, 0.0, 3).validate().is_err());
        assert!(AttackSpec::pgd(0.1, 0.1, 0).validate().is_err());
        let mut f = AttackSpec::fgsm(0.1);
        f.steps = 2;
        assert!(f.validate().is_err());
        assert!("pgd".parse::<AttackFamily>().is_ok());
        assert!("zoo".parse::<AttackFamily>().is_err());
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let bad = |v: &Tensor| Ok((0.0, Tensor::full(v.shape(), f64::NAN)));
        let mut r = rng::stream(0, "t");
        let v = Tensor::vector(vec![0.5]);
        assert!(matches!(
            pgd(&bad, &v, &AttackSpec::default(), &mut r),
            Err(Error::Attack(_))
        ));
    }
}
