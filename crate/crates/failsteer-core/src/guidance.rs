//! Score/velocity combiners and the guided score callback.
//!
//! Five sampling regimes over the dual-generator model:
//!
//! - `None` — success head only.
//! - `Cfg` — classic guidance extrapolation `s_uc + λ(s_c − s_uc)`, with the
//!   failure prediction standing in for the unconditional branch.
//! - `Np` — negative-prompt combination `s_uc + λ(s_neg − s_uc)` with the
//!   success head as the base score and the failure head as the negative
//!   branch. Note this form moves *toward* the negative branch for λ > 0; it
//!   is kept as the textbook combination, not used by the evaluation arms.
//! - `StaticFi` — failure-informed extrapolation `ε_s − λ(ε_f − ε_s)` with a
//!   constant scale.
//! - `AdaptiveFi` — the same combination with the per-step scale
//!   `λ̂ = α · (1 − cos(ε_s, ε_f))` over the flattened chunk, so repulsion
//!   vanishes where the two generators agree and grows where they diverge.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, CoreResult};
use crate::generative::ScoreFn;
use crate::model::{Conditioning, DagModel, Head};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceKind {
    None,
    Cfg,
    Np,
    StaticFi,
    AdaptiveFi,
}

/// Which combiner to apply during sampling and its scale parameters.
/// `lambda` is read by `cfg`/`np`/`static_fi`, `alpha` by `adaptive_fi`;
/// the rest are ignored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    pub kind: GuidanceKind,
    pub lambda: f64,
    pub alpha: f64,
    pub cos_floor: f64,
}

pub const DEFAULT_COS_FLOOR: f64 = 1e-8;

impl GuidanceSpec {
    pub fn none() -> Self {
        GuidanceSpec {
            kind: GuidanceKind::None,
            lambda: 0.0,
            alpha: 0.0,
            cos_floor: DEFAULT_COS_FLOOR,
        }
    }

    pub fn cfg(lambda: f64) -> Self {
        GuidanceSpec {
            kind: GuidanceKind::Cfg,
            lambda,
            ..Self::none()
        }
    }

    pub fn np(lambda: f64) -> Self {
        GuidanceSpec {
            kind: GuidanceKind::Np,
            lambda,
            ..Self::none()
        }
    }

    pub fn static_fi(lambda: f64) -> Self {
        GuidanceSpec {
            kind: GuidanceKind::StaticFi,
            lambda,
            ..Self::none()
        }
    }

    pub fn adaptive_fi(alpha: f64) -> Self {
        GuidanceSpec {
            kind: GuidanceKind::AdaptiveFi,
            alpha,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> CoreResult<()> {
        let checks = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("cos_floor", self.cos_floor),
        ];
        for (name, v) in checks {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::Config(format!(
                    "guidance {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// `s_uncond + lambda * (s_cond - s_uncond)`.
pub fn cfg_combine(s_uncond: &Tensor, s_cond: &Tensor, lambda: f64) -> CoreResult<Tensor> {
    let diff = s_cond.sub(s_uncond)?;
    s_uncond.add(&diff.scale(lambda)?)
}

/// `s_uncond + lambda * (s_neg - s_uncond)`, exactly as the negative-prompt
/// posterior is usually written.
pub fn np_combine(s_uncond: &Tensor, s_neg: &Tensor, lambda: f64) -> CoreResult<Tensor> {
    let diff = s_neg.sub(s_uncond)?;
    s_uncond.add(&diff.scale(lambda)?)
}

/// Failure-informed score `eps_succ - lambda * (eps_fail - eps_succ)`.
pub fn fi_combine_static(eps_succ: &Tensor, eps_fail: &Tensor, lambda: f64) -> CoreResult<Tensor> {
    let diff = eps_fail.sub(eps_succ)?;
    eps_succ.sub(&diff.scale(lambda)?)
}

/// Debug-only alternate form `eps_succ - lambda_hat * eps_fail`. Not
/// algebraically equal to [`fi_combine_static`] for a shared scale; kept for
/// inspection, never used by the evaluation arms.
pub fn fi_combine_lambda_hat_form(
    eps_succ: &Tensor,
    eps_fail: &Tensor,
    lambda_hat: f64,
) -> CoreResult<Tensor> {
    eps_succ.sub(&eps_fail.scale(lambda_hat)?)
}

/// Cosine similarity over the flattened chunk, clamped to [-1, 1].
/// Returns `None` when either norm is below `floor`.
fn cosine(a: &Tensor, b: &Tensor, floor: f64) -> CoreResult<Option<f64>> {
    let (na, nb) = (a.norm(), b.norm());
    if na < floor || nb < floor {
        return Ok(None);
    }
    let c = a.dot(b)? / (na * nb);
    Ok(Some(c.clamp(-1.0, 1.0)))
}

fn adaptive_lambda_with_cos(
    eps_succ: &Tensor,
    eps_fail: &Tensor,
    alpha: f64,
    cos_floor: f64,
) -> CoreResult<(f64, f64)> {
    match cosine(eps_succ, eps_fail, cos_floor)? {
        // a vanishing prediction carries no directional information: no repulsion
        None => Ok((0.0, 1.0)),
        Some(c) => Ok((alpha * (1.0 - c), c)),
    }
}

/// Per-step adaptive guidance scale `alpha * (1 - cos(eps_succ, eps_fail))`;
/// zero when either prediction norm underflows `cos_floor`.
pub fn adaptive_lambda(
    eps_succ: &Tensor,
    eps_fail: &Tensor,
    alpha: f64,
    cos_floor: f64,
) -> CoreResult<f64> {
    adaptive_lambda_with_cos(eps_succ, eps_fail, alpha, cos_floor).map(|(l, _)| l)
}

/// [`fi_combine_static`] with the scale set by [`adaptive_lambda`]. Also
/// returns the scale actually applied.
pub fn fi_combine_adaptive(
    eps_succ: &Tensor,
    eps_fail: &Tensor,
    alpha: f64,
    cos_floor: f64,
) -> CoreResult<(Tensor, f64)> {
    let (lambda_hat, _) = adaptive_lambda_with_cos(eps_succ, eps_fail, alpha, cos_floor)?;
    let out = fi_combine_static(eps_succ, eps_fail, lambda_hat)?;
    Ok((out, lambda_hat))
}

/// One record per sampler step of an FI-guided rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSample {
    pub lambda: f64,
    pub cosine: f64,
}

/// Guided score callback over a read-only model. Records the applied scale
/// and cosine per sampler step for the dual-query kinds.
pub struct GuidedScore<'m> {
    model: &'m DagModel,
    obs_norm: Vec<f64>,
    task: Vec<f64>,
    spec: GuidanceSpec,
    pub trace: Vec<LambdaSample>,
}

/// Build the per-step score callback for a sampling run. The observation is
/// raw (env units); it is normalized here with the model's stats. Fails fast
/// on an invalid spec or a conditioning/model dimension mismatch.
pub fn make_score_fn<'m>(
    model: &'m DagModel,
    obs_raw: &[f64],
    task_index: usize,
    spec: &GuidanceSpec,
) -> CoreResult<GuidedScore<'m>> {
    spec.validate()?;
    if obs_raw.len() != model.config.obs_dim {
        return Err(CoreError::Config(format!(
            "observation length {} does not match model obs_dim {}",
            obs_raw.len(),
            model.config.obs_dim
        )));
    }
    if task_index >= model.config.task_dim {
        return Err(CoreError::Config(format!(
            "task index {task_index} out of range for task_dim {}",
            model.config.task_dim
        )));
    }
    let mut task = alloc::vec![0.0; model.config.task_dim];
    task[task_index] = 1.0;
    Ok(GuidedScore {
        model,
        obs_norm: model.stats.normalize_obs(obs_raw),
        task,
        spec: *spec,
        trace: Vec::new(),
    })
}

impl GuidedScore<'_> {
    fn conditioning(&self, step: usize) -> Conditioning {
        Conditioning {
            observation: self.obs_norm.clone(),
            task: self.task.clone(),
            diffusion_step: step,
        }
    }
}

impl ScoreFn for GuidedScore<'_> {
    fn eval(&mut self, a: &Tensor, step: usize) -> CoreResult<Tensor> {
        let cond = self.conditioning(step);
        if self.spec.kind == GuidanceKind::None {
            return self.model.predict_success(a, &cond);
        }
        // dual query: one trunk pass, both heads
        let h = self.model.encode(&cond)?;
        let eps_succ = self.model.head_forward(Head::Success, &h, a)?;
        let eps_fail = self.model.head_forward(Head::Failure, &h, a)?;
        let cos = cosine(&eps_succ, &eps_fail, self.spec.cos_floor)?.unwrap_or(1.0);
        let (out, lambda) = match self.spec.kind {
            GuidanceKind::None => unreachable!(),
            GuidanceKind::Cfg => (
                cfg_combine(&eps_fail, &eps_succ, self.spec.lambda)?,
                self.spec.lambda,
            ),
            GuidanceKind::Np => (
                np_combine(&eps_succ, &eps_fail, self.spec.lambda)?,
                self.spec.lambda,
            ),
            GuidanceKind::StaticFi => (
                fi_combine_static(&eps_succ, &eps_fail, self.spec.lambda)?,
                self.spec.lambda,
            ),
            GuidanceKind::AdaptiveFi => {
                fi_combine_adaptive(&eps_succ, &eps_fail, self.spec.alpha, self.spec.cos_floor)?
            }
        };
        self.trace.push(LambdaSample {
            lambda,
            cosine: cos,
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn cfg_endpoints_and_extrapolation() {
        let uc = t(&[0.0, 0.0]);
        let c = t(&[1.0, 2.0]);
        assert_eq!(cfg_combine(&uc, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&uc, &c, 0.0).unwrap(), uc);
        assert_eq!(cfg_combine(&uc, &c, 2.0).unwrap(), t(&[2.0, 4.0]));
    }

    #[test]
    fn np_combination() {
        let uc = t(&[0.0, 0.0]);
        let neg = t(&[2.0, 0.0]);
        assert_eq!(np_combine(&uc, &neg, 0.0).unwrap(), uc);
        assert_eq!(np_combine(&uc, &neg, 0.5).unwrap(), t(&[1.0, 0.0]));
        let same = t(&[1.0, 1.0]);
        assert_eq!(np_combine(&same, &same, 7.3).unwrap(), same);
    }

    #[test]
    fn static_fi_reduces_and_extrapolates() {
        let s = t(&[1.0, 0.0]);
        let f = t(&[-1.0, 0.0]);
        assert_eq!(fi_combine_static(&s, &f, 0.0).unwrap(), s);
        assert_eq!(fi_combine_static(&s, &s, 5.0).unwrap(), s);
        assert_eq!(fi_combine_static(&s, &f, 2.0).unwrap(), t(&[5.0, 0.0]));
    }

    #[test]
    fn static_fi_matches_cfg_form_bitwise() {
        // eps_succ - l*(eps_fail - eps_succ) == eps_succ + l*(eps_succ - eps_fail)
        let s = t(&[0.3, -1.7, 0.002, 9.1]);
        let f = t(&[-0.4, 2.2, 0.5, -3.0]);
        for &l in &[0.0, 0.05, 1.0, 3.7] {
            let a = fi_combine_static(&s, &f, l).unwrap();
            let b = s
                .add(&s.sub(&f).unwrap().scale(l).unwrap())
                .unwrap();
            assert_eq!(a, b, "lambda={l}");
        }
    }

    #[test]
    fn adaptive_lambda_trivial_angles() {
        let x = t(&[1.0, 0.0]);
        let anti = t(&[-1.0, 0.0]);
        let orth = t(&[0.0, 1.0]);
        let fl = DEFAULT_COS_FLOOR;
        assert_eq!(adaptive_lambda(&x, &x, 1.0, fl).unwrap(), 0.0);
        assert_eq!(adaptive_lambda(&x, &anti, 1.0, fl).unwrap(), 2.0);
        assert_eq!(adaptive_lambda(&x, &orth, 1.5, fl).unwrap(), 1.5);
    }

    #[test]
    fn adaptive_lambda_degenerate_norm_gives_zero() {
        let x = t(&[1.0, 0.0]);
        let tiny = t(&[1e-12, 0.0]);
        assert_eq!(adaptive_lambda(&x, &tiny, 3.0, DEFAULT_COS_FLOOR).unwrap(), 0.0);
        assert_eq!(adaptive_lambda(&tiny, &x, 3.0, DEFAULT_COS_FLOOR).unwrap(), 0.0);
    }

    #[test]
    fn adaptive_lambda_bounds_and_scale_invariance() {
        use crate::rng::Rng;
        use rand::SeedableRng;
        let mut rng = Rng::seed_from_u64(4);
        for _ in 0..200 {
            let a = Tensor::standard_normal(alloc::vec![6], &mut rng);
            let b = Tensor::standard_normal(alloc::vec![6], &mut rng);
            let alpha = 1.3;
            let l = adaptive_lambda(&a, &b, alpha, DEFAULT_COS_FLOOR).unwrap();
            assert!((0.0..=2.0 * alpha).contains(&l), "lambda {l}");
            // invariant under positive rescaling of either argument
            let l2 = adaptive_lambda(
                &a.scale(37.0).unwrap(),
                &b.scale(0.01).unwrap(),
                alpha,
                DEFAULT_COS_FLOOR,
            )
            .unwrap();
            assert!((l - l2).abs() < 1e-9, "{l} vs {l2}");
        }
    }

    #[test]
    fn adaptive_combiner_composes_the_scalar_cases() {
        let s = t(&[1.0, 0.0]);
        let f = t(&[-1.0, 0.0]);
        // anti-parallel, alpha=1 -> lambda_hat=2 -> [5, 0]
        let (out, l) = fi_combine_adaptive(&s, &f, 1.0, DEFAULT_COS_FLOOR).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(out, t(&[5.0, 0.0]));
        // coincident predictions: doubly forced to eps_succ
        let (out, l) = fi_combine_adaptive(&s, &s, 4.0, DEFAULT_COS_FLOOR).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(out, s);
        // alpha = 0 recovers success-only bitwise
        let (out, _) = fi_combine_adaptive(&s, &f, 0.0, DEFAULT_COS_FLOOR).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn combiners_commute_with_coordinate_permutation() {
        let s = t(&[0.3, -1.0, 2.0]);
        let f = t(&[1.5, 0.2, -0.7]);
        let perm = |x: &Tensor| t(&[x.data()[2], x.data()[0], x.data()[1]]);
        let (direct, l1) = fi_combine_adaptive(&s, &f, 1.2, DEFAULT_COS_FLOOR).unwrap();
        let (permuted, l2) =
            fi_combine_adaptive(&perm(&s), &perm(&f), 1.2, DEFAULT_COS_FLOOR).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(perm(&direct), permuted);
    }

    #[test]
    fn aligned_predictions_get_negligible_correction() {
        // cos > 0.99 implies ||out - eps_succ|| < 0.02 * alpha * ||eps_fail - eps_succ||
        let s = t(&[1.0, 0.0, 0.0]);
        let f = t(&[0.995, 0.0999, 0.0]); // nearly aligned with s
        let alpha = 1.0;
        let cos = s.dot(&f).unwrap() / (s.norm() * f.norm());
        assert!(cos > 0.99, "setup: cos = {cos}");
        let (out, _) = fi_combine_adaptive(&s, &f, alpha, DEFAULT_COS_FLOOR).unwrap();
        let correction = out.sub(&s).unwrap().norm();
        let gap = f.sub(&s).unwrap().norm();
        assert!(correction < 0.02 * alpha * gap, "{correction} vs {gap}");
    }

    #[test]
    fn spec_validation_rejects_bad_scales() {
        let mut s = GuidanceSpec::static_fi(-0.1);
        assert!(s.validate().is_err());
        s = GuidanceSpec::adaptive_fi(f64::NAN);
        assert!(s.validate().is_err());
        assert!(GuidanceSpec::none().validate().is_ok());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = t(&[1.0, 2.0]);
        let b = t(&[1.0]);
        assert!(matches!(
            cfg_combine(&a, &b, 1.0),
            Err(CoreError::Shape { .. })
        ));
        assert!(matches!(
            adaptive_lambda(&a, &b, 1.0, DEFAULT_COS_FLOOR),
            Err(CoreError::Shape { .. })
        ));
    }
}
