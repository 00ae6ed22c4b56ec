//! Classification heads and loss terms.
//!
//! The rotation branch uses a cosine classifier, `p = softmax(γ · cos(F, w_j))`,
//! whose scale `γ = softplus(ρ)` is learned through an unconstrained `ρ`. The
//! re-identification branches pair a batch-hard triplet loss on the raw feature
//! with a label-smoothed cross entropy on its batch-normalized copy (the BNNeck
//! arrangement). [`total_loss`] combines the five terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{BatchStats, BnMode, TripletStats};
use crate::tape::{softplus, Tape, Var};
use crate::tensor::Tensor;

/// Initial value of the cosine-classifier scale.
pub const GAMMA_INIT: f64 = 10.0;

/// `ρ` such that `softplus(ρ) = γ`.
pub fn softplus_inverse(gamma: f64) -> f64 {
    if gamma > 30.0 {
        gamma
    } else {
        gamma.exp_m1().ln()
    }
}

/// Cosine classifier weights and scale, detached from any tape.
#[derive(Clone, Debug)]
pub struct CosineClassifier {
    /// `[b, d]`, one row per class.
    pub weights: Tensor,
    /// Unconstrained scale parameter; `γ = softplus(gamma_raw)`.
    pub gamma_raw: f64,
}

impl CosineClassifier {
    pub fn new(weights: Tensor, gamma: f64) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::shape(
                "CosineClassifier",
                format!("weights must be [b,d], got {:?}", weights.shape()),
            ));
        }
        if gamma <= 0.0 {
            return Err(Error::invalid("CosineClassifier", format!("gamma {} must be positive", gamma)));
        }
        Ok(Self {
            weights,
            gamma_raw: softplus_inverse(gamma),
        })
    }

    pub fn gamma(&self) -> f64 {
        softplus(self.gamma_raw)
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Class probabilities for one embedding `[d]` or a batch `[n,d]`.
    pub fn probs(&self, f: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let w = tape.constant(self.weights.clone());
        let g = tape.constant(Tensor::scalar(self.gamma_raw));
        let logits = cosine_logits(&mut tape, fv, w, g)?;
        let p = tape.softmax(logits, tape.value(logits).rank() - 1)?;
        Ok(tape.value(p).clone())
    }
}

/// `softplus(gamma_raw) · cos(F, w_j)` for `F: [d]` or `[n,d]`, `W: [b,d]`.
pub fn cosine_logits(tape: &mut Tape, f: Var, weights: Var, gamma_raw: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let ws = tape.shape(weights).to_vec();
    let d = *fs.last().unwrap_or(&0);
    if ws.len() != 2 || ws[1] != d || fs.is_empty() || fs.len() > 2 {
        return Err(Error::shape(
            "cosine_logits",
            format!("embedding {:?} vs class weights {:?}", fs, ws),
        ));
    }
    let single = fs.len() == 1;
    let f2 = if single { tape.reshape(f, [1, d])? } else { f };
    let fu = tape
        .l2_normalize(f2, 1)
        .map_err(|_| Error::invalid("cosine_logits", "embedding has zero norm"))?;
    let wu = tape
        .l2_normalize(weights, 1)
        .map_err(|_| Error::invalid("cosine_logits", "a class weight row has zero norm"))?;
    let cos = tape.linear(fu, wu)?;
    let gamma = tape.softplus(gamma_raw);
    let logits = tape.mul_scalar(cos, gamma)?;
    if single {
        tape.reshape(logits, [ws[0]])
    } else {
        Ok(logits)
    }
}

/// `-ln max(probs[y], 1e-12)`.
pub fn cross_entropy(probs: &Tensor, y: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = tape.cross_entropy(p, &[y])?;
    Ok(tape.value(l).item())
}

/// Label-smoothed one-hot targets, `(1 - eps)·1[j = y] + eps / n`, as `[labels.len(), n]`.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(
            "smoothed_cross_entropy",
            format!("smoothing {} outside [0, 1)", eps),
        ));
    }
    if classes < 2 {
        return Err(Error::invalid(
            "smoothed_cross_entropy",
            format!("need at least two classes, got {}", classes),
        ));
    }
    let mut t = Tensor::full([labels.len(), classes], eps / classes as f64);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(
                "smoothed_cross_entropy",
                format!("class index {} out of range for {} classes", y, classes),
            ));
        }
        let o = r * classes + y;
        t.data_mut()[o] += 1.0 - eps;
    }
    Ok(t)
}

/// Smoothed cross entropy of `logits: [n] or [B, n]` (mean over rows).
pub fn smoothed_cross_entropy_var(tape: &mut Tape, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let classes = *tape.shape(logits).last().unwrap();
    let targets = smoothed_targets(labels, classes, eps)?;
    let targets = targets.reshape(tape.shape(logits).to_vec())?;
    tape.soft_target_cross_entropy(logits, targets)
}

pub fn smoothed_cross_entropy(logits: &Tensor, y: usize, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = smoothed_cross_entropy_var(&mut tape, l, &[y], eps)?;
    Ok(tape.value(loss).item())
}

pub fn batch_hard_triplet(embeddings: &Tensor, labels: &[usize], margin: f64) -> Result<(f64, TripletStats)> {
    let mut tape = Tape::new();
    let e = tape.constant(embeddings.clone());
    let (l, stats) = tape.batch_hard_triplet(e, labels, margin)?;
    Ok((tape.value(l).item(), stats))
}

/// The two views of a feature under BNNeck.
pub struct BnNeck {
    /// Pre-normalization feature, consumed by the triplet loss.
    pub triplet_view: Var,
    /// Batch-normalized feature, consumed by the identity classifier.
    pub classifier_view: Var,
    pub batch_stats: Option<BatchStats>,
}

/// Splits `[B, d]` features into their triplet and classifier views.
pub fn bnneck_split(
    tape: &mut Tape,
    feature: Var,
    gamma: Option<Var>,
    mode: BnMode<'_>,
) -> Result<BnNeck> {
    let (classifier_view, batch_stats) = tape.batch_norm(feature, gamma, None, mode)?;
    Ok(BnNeck {
        triplet_view: feature,
        classifier_view,
        batch_stats,
    })
}

/// Importance coefficients and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tri_gb: f64,
    pub sce_gb: f64,
    pub tri_gfb: f64,
    pub sce_gfb: f64,
    pub slb: f64,
    pub margin: f64,
    pub smoothing_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tri_gb: 0.5,
            sce_gb: 0.5,
            tri_gfb: 0.5,
            sce_gfb: 0.5,
            slb: 1.0,
            margin: 0.5,
            smoothing_eps: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            tri_gb: 0.0,
            sce_gb: 0.0,
            tri_gfb: 0.0,
            sce_gfb: 0.0,
            slb: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("tri_gb", self.tri_gb),
            ("sce_gb", self.sce_gb),
            ("tri_gfb", self.tri_gfb),
            ("sce_gfb", self.sce_gfb),
            ("slb", self.slb),
            ("margin", self.margin),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !(*v >= 0.0)) {
            return Err(Error::invalid("LossWeights", format!("{} = {} must be >= 0", name, v)));
        }
        if !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(Error::invalid(
                "LossWeights",
                format!("smoothing_eps = {} outside [0, 1)", self.smoothing_eps),
            ));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 5] {
        [self.tri_gb, self.sce_gb, self.tri_gfb, self.sce_gfb, self.slb]
    }
}

/// The five loss terms, in objective order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub tri_gb: f64,
    pub sce_gb: f64,
    pub tri_gfb: f64,
    pub sce_gfb: f64,
    pub slb: f64,
}

impl LossTerms {
    fn as_array(&self) -> [f64; 5] {
        [self.tri_gb, self.sce_gb, self.tri_gfb, self.sce_gfb, self.slb]
    }

    pub fn names() -> [&'static str; 5] {
        ["l_tri_gb", "l_sce_gb", "l_tri_gfb", "l_sce_gfb", "l_slb"]
    }
}

/// Per-step loss values plus batch diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub terms: LossTerms,
    pub total: f64,
    pub active_triplets_gb: usize,
    pub active_triplets_gfb: usize,
}

#[derive(Serialize, Deserialize, Debug, PartialEq)]
pub struct LossLogLine {
    pub step: u64,
    pub l_tri_gb: f64,
    pub l_sce_gb: f64,
    pub l_tri_gfb: f64,
    pub l_sce_gfb: f64,
    pub l_slb: f64,
    pub total: f64,
}

impl LossReport {
    /// One JSON-lines record (no trailing newline).
    pub fn to_json_line(&self, step: u64) -> String {
        let line = LossLogLine {
            step,
            l_tri_gb: self.terms.tri_gb,
            l_sce_gb: self.terms.sce_gb,
            l_tri_gfb: self.terms.tri_gfb,
            l_sce_gfb: self.terms.sce_gfb,
            l_slb: self.terms.slb,
            total: self.total,
        };
        serde_json::to_string(&line).expect("plain struct serializes")
    }
}

/// Weighted sum of the five terms.
pub fn total_loss(terms: LossTerms, w: &LossWeights) -> LossReport {
    let total = terms
        .as_array()
        .iter()
        .zip(w.as_array())
        .map(|(t, l)| t * l)
        .sum();
    LossReport {
        terms,
        total,
        ..LossReport::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn cosine_two_classes_hand_evaluated() {
        let w = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let head = CosineClassifier::new(w, 1.0).unwrap();
        close(head.gamma(), 1.0, 1e-12);
        let p = head.probs(&Tensor::new([2], vec![3.0, 0.0]).unwrap()).unwrap();
        let e = std::f64::consts::E;
        close(p.data()[0], e / (e + 1.0), 1e-12);
        close(p.data()[1], 1.0 / (e + 1.0), 1e-12);
    }

    #[test]
    fn cosine_equal_angles_is_uniform() {
        let w = Tensor::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let head = CosineClassifier::new(w, GAMMA_INIT).unwrap();
        let p = head.probs(&Tensor::new([3], vec![2.0, 2.0, 2.0]).unwrap()).unwrap();
        for &v in p.data() {
            close(v, 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn cosine_rejects_zero_norms() {
        let head = CosineClassifier::new(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap(), 1.0).unwrap();
        let msg = head.probs(&Tensor::new([2], vec![1.0, 1.0]).unwrap()).unwrap_err().to_string();
        assert!(msg.contains("weight row"), "{msg}");
        let head = CosineClassifier::new(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 1.0).unwrap();
        let msg = head.probs(&Tensor::zeros([2])).unwrap_err().to_string();
        assert!(msg.contains("embedding"), "{msg}");
    }

    #[test]
    fn cross_entropy_examples() {
        close(cross_entropy(&Tensor::new([3], vec![0.0, 1.0, 0.0]).unwrap(), 1).unwrap(), 0.0, 1e-15);
        close(cross_entropy(&Tensor::full([4], 0.25), 2).unwrap(), 4f64.ln(), 1e-12);
        let p = Tensor::new([3], vec![0.25, 0.7, 0.05]).unwrap();
        close(cross_entropy(&p, 0).unwrap(), 1.3863, 1e-4);
        assert!(cross_entropy(&p, 3).is_err());
        // clamped, not infinite
        close(cross_entropy(&Tensor::new([2], vec![1.0, 0.0]).unwrap(), 1).unwrap(), -(1e-12f64).ln(), 1e-9);
    }

    #[test]
    fn smoothed_examples() {
        close(smoothed_cross_entropy(&Tensor::zeros([2]), 0, 0.1).unwrap(), 2f64.ln(), 1e-12);
        close(smoothed_cross_entropy(&Tensor::full([5], 0.3), 4, 0.6).unwrap(), 5f64.ln(), 1e-12);
        assert!(smoothed_cross_entropy(&Tensor::zeros([2]), 0, 1.0).is_err());
        assert!(smoothed_cross_entropy(&Tensor::zeros([2]), 0, -0.1).is_err());
        assert!(smoothed_cross_entropy(&Tensor::zeros([1]), 0, 0.1).is_err());
    }

    #[test]
    fn triplet_single_anchor_value() {
        // anchor 0 at origin, positive at distance 0.8, negative at 0.6
        let e = Tensor::new([3, 1], vec![0.0, 0.8, -0.6]).unwrap();
        let choices = crate::ops::batch_hard_choices(&e, &[0, 0, 1], 0.5).unwrap();
        let a0 = &choices[0];
        close(a0.d_ap, 0.8, 1e-15);
        close(a0.d_an, 0.6, 1e-15);
        close(a0.loss, 0.7, 1e-12);
    }

    #[test]
    fn triplet_margin_satisfied_is_zero() {
        let e = Tensor::new([4, 1], vec![0.0, 0.1, 5.0, 5.1]).unwrap();
        let (l, stats) = batch_hard_triplet(&e, &[0, 0, 1, 1], 0.5).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(stats.active, 0);
        assert_eq!(stats.valid_anchors, 4);
    }

    #[test]
    fn triplet_rejects_single_identity() {
        let e = Tensor::zeros([3, 2]);
        assert!(batch_hard_triplet(&e, &[1, 1, 1], 0.5).is_err());
        assert!(batch_hard_triplet(&e, &[0, 1, 2], 0.5).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let ones = LossTerms {
            tri_gb: 1.0,
            sce_gb: 1.0,
            tri_gfb: 1.0,
            sce_gfb: 1.0,
            slb: 1.0,
        };
        assert_eq!(total_loss(ones, &LossWeights::zero()).total, 0.0);
        close(total_loss(ones, &LossWeights::default()).total, 3.0, 1e-15);
        let t = LossTerms {
            tri_gb: 0.2,
            sce_gb: 0.4,
            tri_gfb: 0.1,
            sce_gfb: 0.3,
            slb: 0.6,
        };
        close(total_loss(t, &LossWeights::default()).total, 1.1, 1e-12);
    }

    #[test]
    fn json_line_keys() {
        let r = total_loss(LossTerms::default(), &LossWeights::default());
        let line = r.to_json_line(3);
        assert_eq!(
            line,
            r#"{"step":3,"l_tri_gb":0.0,"l_sce_gb":0.0,"l_tri_gfb":0.0,"l_sce_gfb":0.0,"l_slb":0.0,"total":0.0}"#
        );
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let mut w = LossWeights::default();
        w.slb = -1.0;
        assert!(w.validate().is_err());
        let mut w = LossWeights::default();
        w.smoothing_eps = 1.0;
        assert!(w.validate().is_err());
    }
}
