//! Verification, adversarial, reconstruction and same-pose losses.
//!
//! Every loss takes graph variables so it can be differentiated, validates
//! its inputs, and returns a scalar variable. Probabilities are clamped into
//! `[PROB_FLOOR, 1 - PROB_FLOOR]` before any logarithm; clamped entries are
//! tallied in a [`Saturation`] counter and keep an identity gradient, so a
//! saturated score still yields `-1/p` at the clamped value.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp for probabilities entering a logarithm.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_pd: f64,
    pub lambda_r: f64,
    pub lambda_sp: f64,
    /// One-sided smoothing: discriminators aim real scores at `1 - label_smoothing`.
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_id: 0.1, lambda_pd: 0.1, lambda_r: 10.0, lambda_sp: 1.0, label_smoothing: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_id", self.lambda_id),
            ("lambda_pd", self.lambda_pd),
            ("lambda_r", self.lambda_r),
            ("lambda_sp", self.lambda_sp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing must lie in [0, 0.5), got {}", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Count of probabilities that fell outside the clamp window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Saturation {
    pub count: u64,
}

fn probabilities<'g, S: Scalar>(scores: Var<'g, S>, term: &str, sat: &mut Saturation) -> Result<Var<'g, S>> {
    let v = scores.value();
    if v.numel() == 0 {
        return Err(Error::InvalidArgument(format!("{term}: empty score set")));
    }
    if !v.all_finite() {
        let bad = v.data().iter().find(|x| !x.is_finite()).map(|x| x.as_f64()).unwrap_or(f64::NAN);
        return Err(Error::Divergence { term: term.to_string(), value: bad });
    }
    // patch maps are averaged to one score per sample before the logarithm
    let scores = if v.shape().len() > 1 { scores.mean_rows() } else { scores };
    let lo = S::from_f64_lossy(PROB_FLOOR);
    let hi = S::one() - lo;
    let sv = scores.value();
    let hits = sv.data().iter().filter(|&&p| p < lo || p > hi).count();
    if hits == 0 {
        return Ok(scores);
    }
    sat.count += hits as u64;
    let shift = sv.map(|p| p.max(lo).min(hi) - p);
    Ok(scores.add(scores.graph().constant(shift)))
}

/// Binary cross-entropy `-C log d - (1 - C) log(1 - d)`, batch mean.
pub fn verification_loss<'g, S: Scalar>(d: Var<'g, S>, same: &[bool], sat: &mut Saturation) -> Result<Var<'g, S>> {
    let p = probabilities(d, "L_v", sat)?;
    if p.shape() != [same.len()] {
        return Err(Error::InvalidArgument(format!("L_v: {} labels for scores of shape {:?}", same.len(), d.shape())));
    }
    let g = p.graph();
    let c = crate::Tensor::from_vec(&[same.len()], same.iter().map(|&s| if s { S::one() } else { S::zero() }).collect())?;
    let not_c = c.map(|x| S::one() - x);
    let pos = p.ln().mul(g.constant(c));
    let neg = p.neg().add_scalar(S::one()).ln().mul(g.constant(not_c));
    Ok(pos.add(neg).mean().neg())
}

/// Discriminator side: `sum_k [-(1 - eps) mean log D(real_k) - mean log(1 - D(fake_k))]`.
///
/// Branches are passed as separate score vectors (or patch maps) and may
/// differ in length, e.g. when a branch has no real target image.
pub fn adversarial_discriminator_loss<'g, S: Scalar>(
    real: &[Var<'g, S>],
    fake: &[Var<'g, S>],
    label_smoothing: f64,
    sat: &mut Saturation,
) -> Result<Var<'g, S>> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidArgument("adversarial loss needs real and fake scores".into()));
    }
    let target = S::from_f64_lossy(1.0 - label_smoothing);
    let mut terms = Vec::with_capacity(real.len() + fake.len());
    for &r in real {
        terms.push(probabilities(r, "L_adv_D", sat)?.ln().mean().scale(-target));
    }
    for &f in fake {
        terms.push(probabilities(f, "L_adv_D", sat)?.neg().add_scalar(S::one()).ln().mean().neg());
    }
    Ok(sum(terms))
}

/// Generator side, non-saturating: `sum_k -mean log D(fake_k)`.
pub fn adversarial_generator_loss<'g, S: Scalar>(fake: &[Var<'g, S>], sat: &mut Saturation) -> Result<Var<'g, S>> {
    if fake.is_empty() {
        return Err(Error::InvalidArgument("adversarial loss needs fake scores".into()));
    }
    let terms = fake
        .iter()
        .map(|&f| Ok(probabilities(f, "L_adv_G", sat)?.ln().mean().neg()))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum(terms))
}

fn mean_abs_diff<'g, S: Scalar>(a: Var<'g, S>, b: Var<'g, S>, term: &str) -> Result<Var<'g, S>> {
    if a.shape() != b.shape() {
        return Err(Error::InvalidArgument(format!("{term}: shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.value().numel() == 0 {
        return Err(Error::InvalidArgument(format!("{term}: empty images")));
    }
    Ok(a.sub(b).abs().mean())
}

/// Mean absolute pixel difference between a generated image and its target.
pub fn reconstruction_loss<'g, S: Scalar>(generated: Var<'g, S>, truth: Var<'g, S>) -> Result<Var<'g, S>> {
    mean_abs_diff(generated, truth, "L_r")
}

/// Mean absolute difference between two branch generations of positive pairs.
pub fn same_pose_loss<'g, S: Scalar>(generated_1: Var<'g, S>, generated_2: Var<'g, S>, same: &[bool]) -> Result<Var<'g, S>> {
    if let Some(i) = same.iter().position(|&s| !s) {
        return Err(Error::ContractViolation(format!("same-pose loss called on negative pair {i}")));
    }
    if generated_1.shape().first() != Some(&same.len()) {
        return Err(Error::InvalidArgument(format!("L_sp: {} labels for images of shape {:?}", same.len(), generated_1.shape())));
    }
    mean_abs_diff(generated_1, generated_2, "L_sp")
}

fn sum<'g, S: Scalar>(terms: Vec<Var<'g, S>>) -> Var<'g, S> {
    let mut it = terms.into_iter();
    let first = it.next().expect("at least one term");
    it.fold(first, |acc, t| acc.add(t))
}

/// Per-term values of one iteration; absent terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(rename = "L_v")]
    pub l_v: f64,
    #[serde(rename = "L_id_D")]
    pub l_id_d: f64,
    #[serde(rename = "L_id_G")]
    pub l_id_g: f64,
    #[serde(rename = "L_pd_D")]
    pub l_pd_d: f64,
    #[serde(rename = "L_pd_G")]
    pub l_pd_g: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_sp")]
    pub l_sp: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("L_v", self.l_v),
            ("L_id_D", self.l_id_d),
            ("L_id_G", self.l_id_g),
            ("L_pd_D", self.l_pd_d),
            ("L_pd_G", self.l_pd_g),
            ("L_r", self.l_r),
            ("L_sp", self.l_sp),
            ("total", self.total),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.terms().into_iter().find(|(_, v)| !v.is_finite()) {
            Some((term, value)) => Err(Error::Divergence { term: term.to_string(), value }),
            None => Ok(()),
        }
    }

    /// Sets `total` from the generator-side terms.
    pub fn with_total(mut self, w: &LossWeights) -> Result<Self> {
        self.total = total_objective(&self, w)?;
        Ok(self)
    }
}

/// `L_v + l_id L_id_G + l_pd L_pd_G + l_r L_r + l_sp L_sp`.
pub fn total_objective(parts: &LossReport, w: &LossWeights) -> Result<f64> {
    let terms = [
        ("L_v", parts.l_v, 1.0),
        ("L_id_G", parts.l_id_g, w.lambda_id),
        ("L_pd_G", parts.l_pd_g, w.lambda_pd),
        ("L_r", parts.l_r, w.lambda_r),
        ("L_sp", parts.l_sp, w.lambda_sp),
    ];
    let mut total = 0.0;
    for (term, value, weight) in terms {
        if !value.is_finite() {
            return Err(Error::Divergence { term: term.to_string(), value });
        }
        total += weight * value;
    }
    Ok(total)
}

/// Graph-side terms of the generator objective; `None` terms are skipped.
#[derive(Clone, Copy, Default)]
pub struct ObjectiveTerms<'g, S: Scalar> {
    pub v: Option<Var<'g, S>>,
    pub id: Option<Var<'g, S>>,
    pub pd: Option<Var<'g, S>>,
    pub r: Option<Var<'g, S>>,
    pub sp: Option<Var<'g, S>>,
}

/// Differentiable weighted sum matching [`total_objective`].
pub fn weighted_objective<'g, S: Scalar>(t: &ObjectiveTerms<'g, S>, w: &LossWeights) -> Option<Var<'g, S>> {
    let parts: Vec<Var<'g, S>> = [(t.v, 1.0), (t.id, w.lambda_id), (t.pd, w.lambda_pd), (t.r, w.lambda_r), (t.sp, w.lambda_sp)]
        .into_iter()
        .filter_map(|(v, k)| v.map(|v| if k == 1.0 { v } else { v.scale(S::from_f64_lossy(k)) }))
        .collect();
    (!parts.is_empty()).then(|| sum(parts))
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::autograd::Graph;
    use crate::Tensor;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_values() {
        let g = Graph::new();
        let mut sat = Saturation::default();
        let l = verification_loss(g.constant(t(&[0.5, 0.5])), &[true, false], &mut sat).unwrap();
        assert_abs_diff_eq!(l.item(), 2f64.ln(), epsilon = 1e-12);
        let l = verification_loss(g.constant(t(&[0.9])), &[true], &mut sat).unwrap();
        assert_abs_diff_eq!(l.item(), -(0.9f64.ln()), epsilon = 1e-12);
        let l = verification_loss(g.constant(t(&[1.0 - 1e-9])), &[true], &mut sat).unwrap();
        assert!(l.item() < 2e-7);
        assert_eq!(sat.count, 1);
    }

    #[test]
    fn bce_clamps_exact_zero_and_one() {
        let g = Graph::new();
        let mut sat = Saturation::default();
        let l = verification_loss(g.constant(t(&[0.0, 1.0])), &[true, false], &mut sat).unwrap();
        assert!(l.item().is_finite());
        assert_abs_diff_eq!(l.item(), -(1e-7f64.ln()), epsilon = 1e-6);
        assert_eq!(sat.count, 2);
    }

    #[test]
    fn nan_scores_report_divergence() {
        let g = Graph::new();
        let mut sat = Saturation::default();
        let res = verification_loss(g.constant(t(&[f64::NAN])), &[true], &mut sat);
        assert!(matches!(res, Err(Error::Divergence { ref term, .. }) if term == "L_v"));
    }

    #[test]
    fn adversarial_values() {
        let g = Graph::new();
        let mut sat = Saturation::default();
        let half = g.constant(t(&[0.5; 4]));
        let l = adversarial_discriminator_loss(&[half], &[half], 0.0, &mut sat).unwrap();
        assert_abs_diff_eq!(l.item(), 2.0 * 2f64.ln(), epsilon = 1e-12);
        // one-sided smoothing: real term is -(1 - eps) log D(real)
        let real = g.constant(t(&[0.9]));
        let fake = g.constant(t(&[0.0]));
        let l = adversarial_discriminator_loss(&[real], &[fake], 0.1, &mut sat).unwrap();
        assert_abs_diff_eq!(l.item(), -0.9 * 0.9f64.ln(), epsilon = 1e-6);
        let l = adversarial_generator_loss(&[half], &mut sat).unwrap();
        assert_abs_diff_eq!(l.item(), 2f64.ln(), epsilon = 1e-12);
        assert!(adversarial_generator_loss::<f64>(&[], &mut sat).is_err());
        let empty = g.constant(Tensor::zeros(&[0]));
        assert!(adversarial_discriminator_loss(&[empty], &[half], 0.1, &mut sat).is_err());
    }

    #[test]
    fn generator_gradient_scales_inversely() {
        let g = Graph::new();
        let mut sat = Saturation::default();
        let s = g.variable(t(&[0.1, 1.0]));
        let l = adversarial_generator_loss(&[s], &mut sat).unwrap();
        let grads = g.backward(l);
        let d = grads.of(s).unwrap().data().to_vec();
        assert_abs_diff_eq!(d[0] / d[1], 10.0, epsilon = 1e-5);
    }

    #[test]
    fn patch_maps_are_averaged_before_log() {
        let g = Graph::new();
        let mut sat = Saturation::default();
        let map = g.constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.2, 0.8]).unwrap());
        let l = adversarial_generator_loss(&[map], &mut sat).unwrap();
        assert_abs_diff_eq!(l.item(), 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn l1_losses() {
        let g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3, 4, 2], 1.0));
        let b = g.constant(Tensor::full(&[2, 3, 4, 2], -1.0));
        assert_eq!(reconstruction_loss(a, b).unwrap().item(), 2.0);
        assert_eq!(reconstruction_loss(a, a).unwrap().item(), 0.0);
        let h = g.constant(Tensor::full(&[2, 3, 4, 2], 0.5));
        let l = g.constant(Tensor::full(&[2, 3, 4, 2], -0.5));
        assert_eq!(same_pose_loss(h, l, &[true, true]).unwrap().item(), 1.0);
        assert!(matches!(same_pose_loss(h, l, &[true, false]), Err(Error::ContractViolation(_))));
        assert!(reconstruction_loss(a, g.constant(Tensor::zeros(&[2, 3, 4, 1]))).is_err());
    }

    #[test]
    fn objective_arithmetic() {
        let w = LossWeights::default();
        let parts = LossReport { l_v: 0.7, l_id_g: 0.6, l_pd_g: 0.6, l_r: 0.2, l_sp: 0.1, ..Default::default() };
        assert_abs_diff_eq!(total_objective(&parts, &w).unwrap(), 2.92, epsilon = 1e-12);
        assert_eq!(total_objective(&LossReport::default(), &w).unwrap(), 0.0);
        let no_sp = LossWeights { lambda_sp: 0.0, ..w };
        assert_abs_diff_eq!(total_objective(&parts, &no_sp).unwrap(), 2.82, epsilon = 1e-12);
        let bad = LossReport { l_r: f64::INFINITY, ..parts };
        assert!(matches!(total_objective(&bad, &w), Err(Error::Divergence { ref term, .. }) if term == "L_r"));
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { label_smoothing: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda_r: -1.0, ..Default::default() }.validate().is_err());
    }
}
