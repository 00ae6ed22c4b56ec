use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking their logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Squared distances below this are treated as zero (no gradient).
const DIST_SQ_FLOOR: f64 = 1e-24;

fn rows_cols(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [b] => Ok((1, b)),
        [n, b] => Ok((n, b)),
        _ => Err(Error::shape(op, format!("expected [b] or [n,b], got {:?}", shape))),
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub(crate) fn soft_target_ce_backward(g: &Tensor, logits: &Tensor, targets: &Tensor) -> Tensor {
    let (n, b) = rows_cols("soft_target_cross_entropy", logits.shape()).unwrap();
    let scale = g.item() / n as f64;
    let mut d = Vec::with_capacity(n * b);
    for r in 0..n {
        let p = softmax_row(&logits.data()[r * b..(r + 1) * b]);
        let t = &targets.data()[r * b..(r + 1) * b];
        let mass: f64 = t.iter().sum();
        d.extend(p.iter().zip(t).map(|(&pj, &tj)| scale * (pj * mass - tj)));
    }
    Tensor::new(logits.shape().to_vec(), d).unwrap()
}

pub(crate) fn ce_probs_backward(g: &Tensor, probs: &Tensor, labels: &[usize]) -> Tensor {
    let (n, b) = rows_cols("cross_entropy", probs.shape()).unwrap();
    let mut d = vec![0.0; n * b];
    for (r, &y) in labels.iter().enumerate() {
        let p = probs.data()[r * b + y];
        if p >= PROB_FLOOR {
            d[r * b + y] = -g.item() / (p * n as f64);
        }
    }
    Tensor::new(probs.shape().to_vec(), d).unwrap()
}

/// One anchor's hardest positive and hardest negative.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletChoice {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
    pub loss: f64,
}

/// Summary of a batch-hard triplet evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletStats {
    /// Anchors with at least one positive and one negative.
    pub valid_anchors: usize,
    /// Anchors whose hinge is strictly positive.
    pub active: usize,
}

pub(crate) struct TripletSaved {
    pub embeddings: Var,
    choices: Vec<TripletChoice>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    if sq < DIST_SQ_FLOOR {
        0.0
    } else {
        sq.sqrt()
    }
}

/// Hardest positive (largest distance) and hardest negative (smallest distance)
/// per anchor; ties resolve to the lowest index. Anchors without a positive or
/// without a negative are skipped.
pub fn batch_hard_choices(emb: &Tensor, labels: &[usize], margin: f64) -> Result<Vec<TripletChoice>> {
    const OP: &str = "batch_hard_triplet";
    let [b, _] = *emb.shape() else {
        return Err(Error::shape(OP, format!("embeddings must be [B,d], got {:?}", emb.shape())));
    };
    if labels.len() != b {
        return Err(Error::shape(
            OP,
            format!("{} labels for {} embeddings", labels.len(), b),
        ));
    }
    if margin < 0.0 {
        return Err(Error::invalid(OP, format!("margin {} is negative", margin)));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::invalid(OP, "batch holds a single identity, no negatives exist"));
    }
    let dist: Vec<f64> = (0..b * b)
        .map(|k| euclidean(emb.row(k / b), emb.row(k % b)))
        .collect();
    let mut out = Vec::new();
    for a in 0..b {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dist[a * b + j];
            if labels[j] == labels[a] {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        if let (Some((p, d_ap)), Some((n, d_an))) = (pos, neg) {
            out.push(TripletChoice {
                anchor: a,
                positive: p,
                negative: n,
                d_ap,
                d_an,
                loss: (d_ap - d_an + margin).max(0.0),
            });
        }
    }
    if out.is_empty() {
        return Err(Error::invalid(OP, "no identity has two samples, no positives exist"));
    }
    Ok(out)
}

pub(crate) fn triplet_backward(saved: &TripletSaved, g: &Tensor, emb: &Tensor) -> Tensor {
    let d = emb.shape()[1];
    let mut grad = vec![0.0; emb.len()];
    let coef = g.item() / saved.choices.len() as f64;
    let mut pull = |from: usize, to: usize, dist: f64, sign: f64| {
        if dist == 0.0 {
            return;
        }
        for k in 0..d {
            let unit = (emb.data()[from * d + k] - emb.data()[to * d + k]) / dist;
            grad[from * d + k] += sign * coef * unit;
            grad[to * d + k] -= sign * coef * unit;
        }
    };
    for c in saved.choices.iter().filter(|c| c.loss > 0.0) {
        pull(c.anchor, c.positive, c.d_ap, 1.0);
        pull(c.anchor, c.negative, c.d_an, -1.0);
    }
    Tensor::new(emb.shape().to_vec(), grad).unwrap()
}

impl Tape {
    /// Mean over rows of `-sum_j t_j log softmax(logits)_j` for constant targets `t`.
    pub fn soft_target_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let (n, b) = rows_cols("soft_target_cross_entropy", self.shape(logits))?;
        if targets.shape() != self.shape(logits) {
            return Err(Error::shape(
                "soft_target_cross_entropy",
                format!("targets {:?} vs logits {:?}", targets.shape(), self.shape(logits)),
            ));
        }
        let x = self.value(logits);
        let mut total = 0.0;
        for r in 0..n {
            let row = &x.data()[r * b..(r + 1) * b];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total -= row
                .iter()
                .zip(&targets.data()[r * b..(r + 1) * b])
                .map(|(&v, &t)| t * (v - lse))
                .sum::<f64>();
        }
        let v = Tensor::scalar(total / n as f64);
        Ok(self.push(v, Op::SoftTargetCrossEntropy { logits, targets }, &[logits]))
    }

    /// Mean over rows of `-ln max(p[y], 1e-12)`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, b) = rows_cols("cross_entropy", self.shape(probs))?;
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {} rows", labels.len(), n),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= b) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("class index {} out of range for {} classes", y, b),
            ));
        }
        let p = self.value(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &y)| -p.data()[r * b + y].max(PROB_FLOOR).ln())
            .sum();
        let v = Tensor::scalar(total / n as f64);
        Ok(self.push(
            v,
            Op::CrossEntropyProbs {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        ))
    }

    /// Batch-hard triplet loss with Euclidean distance, averaged over valid anchors.
    pub fn batch_hard_triplet(
        &mut self,
        embeddings: Var,
        labels: &[usize],
        margin: f64,
    ) -> Result<(Var, TripletStats)> {
        let choices = batch_hard_choices(self.value(embeddings), labels, margin)?;
        let stats = TripletStats {
            valid_anchors: choices.len(),
            active: choices.iter().filter(|c| c.loss > 0.0).count(),
        };
        let mean = choices.iter().map(|c| c.loss).sum::<f64>() / choices.len() as f64;
        let saved = TripletSaved { embeddings, choices };
        let var = self.push(Tensor::scalar(mean), Op::BatchHardTriplet(saved), &[embeddings]);
        Ok((var, stats))
    }
}
