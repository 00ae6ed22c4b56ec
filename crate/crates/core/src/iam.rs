//! Interpretable attention: a parameter-free spatial attention map built from
//! local maxima of an activation tensor `L ∈ R^{c×h×w}`.
//!
//! The map is assembled in three steps:
//!
//! 1. **Local softmax** along each channel,
//!    `M(k,u,v) = exp L(k,u,v) / Σ_{(m,n)∈N(u,v)} exp L(k,m,n)`, where `N(u,v)`
//!    is the `K×K` window centred on `(u,v)` clipped to the grid. A location
//!    that dominates its neighbourhood gets `M` close to 1.
//! 2. **Cross-channel suppression**, `G(k,u,v) = L(k,u,v) / (max_t L(t,u,v) + ε)`,
//!    which scores how strongly each channel fires relative to the strongest
//!    channel at the same location. `L` must be nonnegative.
//! 3. **Fusion and normalization**, `Q̃(u,v) = max_t M(t,u,v)·G(t,u,v)` and
//!    `Q = Q̃ / Σ Q̃`. If `Σ Q̃` underflows, `Q` falls back to the uniform map and
//!    the sample is flagged as degenerate.
//!
//! Every channel maximum routes its subgradient to the lowest channel index
//! that attains it.
//!
//! ```
//! use geomattn::iam::iam_forward;
//! use geomattn::Tensor;
//!
//! let l = Tensor::new([1, 1, 3], vec![0.0, 2f64.ln(), 0.0]).unwrap();
//! let maps = iam_forward(&l, 3).unwrap();
//! // M = [1/3, 1/2, 1/3] and G = [0, 1, 0], so all mass lands on the peak.
//! assert!((maps.q.at(&[0, 1]) - 1.0).abs() < 1e-9);
//! ```

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Guard added to the channel maximum in the suppression step.
pub const NMS_EPS: f64 = 1e-12;
/// Below this total mass the attention map is replaced by the uniform map.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// Intermediate and final maps for one `[c,h,w]` activation tensor.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub l: Tensor,
    pub m: Tensor,
    pub g: Tensor,
    pub q_tilde: Tensor,
    pub q: Tensor,
    pub k: usize,
    /// `Q` is the uniform fallback because `Σ Q̃` vanished.
    pub degenerate: bool,
}

/// `(n, c, h, w)` for `[c,h,w]` or `[n,c,h,w]`.
fn dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected [c,h,w] or [n,c,h,w], got {:?}", shape),
        )),
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::invalid(
            "local_softmax",
            format!("neighbourhood side {} must be odd and positive", k),
        ));
    }
    Ok(())
}

/// Window `[lo, hi)` of half-width `r` around `i`, clipped to `0..len`.
fn span(i: usize, r: usize, len: usize) -> (usize, usize) {
    (i.saturating_sub(r), (i + r + 1).min(len))
}

/// Window max and stabilized exp-sum for every location of one plane.
fn window_stats(plane: &[f64], h: usize, w: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
    let mut maxes = vec![0.0; h * w];
    let mut sums = vec![0.0; h * w];
    for u in 0..h {
        let (u0, u1) = span(u, r, h);
        for v in 0..w {
            let (v0, v1) = span(v, r, w);
            let mut m = f64::NEG_INFINITY;
            for a in u0..u1 {
                for b in v0..v1 {
                    m = m.max(plane[a * w + b]);
                }
            }
            let mut s = 0.0;
            for a in u0..u1 {
                for b in v0..v1 {
                    s += (plane[a * w + b] - m).exp();
                }
            }
            maxes[u * w + v] = m;
            sums[u * w + v] = s;
        }
    }
    (maxes, sums)
}

fn local_softmax_raw(l: &Tensor, k: usize) -> Result<Tensor> {
    check_k(k)?;
    let (n, c, h, w) = dims("local_softmax", l.shape())?;
    let r = k / 2;
    let mut out = vec![0.0; l.len()];
    for p in 0..n * c {
        let plane = &l.data()[p * h * w..(p + 1) * h * w];
        let (maxes, sums) = window_stats(plane, h, w, r);
        for i in 0..h * w {
            out[p * h * w + i] = (plane[i] - maxes[i]).exp() / sums[i];
        }
    }
    Tensor::new(l.shape().to_vec(), out)
}

fn local_softmax_backward(l: &Tensor, m_out: &Tensor, g: &Tensor, k: usize) -> Tensor {
    let (n, c, h, w) = dims("local_softmax", l.shape()).unwrap();
    let r = k / 2;
    let mut d = vec![0.0; l.len()];
    for p in 0..n * c {
        let base = p * h * w;
        let plane = &l.data()[base..base + h * w];
        let (maxes, sums) = window_stats(plane, h, w, r);
        for u in 0..h {
            let (u0, u1) = span(u, r, h);
            for v in 0..w {
                let i = u * w + v;
                let gm = g.data()[base + i] * m_out.data()[base + i];
                if gm == 0.0 {
                    continue;
                }
                d[base + i] += gm;
                let scale = gm / sums[i];
                let (v0, v1) = span(v, r, w);
                for a in u0..u1 {
                    for b in v0..v1 {
                        let j = a * w + b;
                        d[base + j] -= scale * (plane[j] - maxes[i]).exp();
                    }
                }
            }
        }
    }
    Tensor::new(l.shape().to_vec(), d).unwrap()
}

/// Returns `(G, first argmax channel per location)`.
fn channel_nms_raw(l: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = dims("channel_nms", l.shape())?;
    if let Some(pos) = l.data().iter().position(|&x| x < 0.0 || x.is_nan()) {
        return Err(Error::invalid(
            "channel_nms",
            format!(
                "activation at flat index {} is {}; inputs must be nonnegative",
                pos,
                l.data()[pos]
            ),
        ));
    }
    let hw = h * w;
    let mut out = vec![0.0; l.len()];
    let mut argmax = vec![0; n * hw];
    for s in 0..n {
        for i in 0..hw {
            let at = |t: usize| l.data()[(s * c + t) * hw + i];
            let mut best = 0;
            for t in 1..c {
                if at(t) > at(best) {
                    best = t;
                }
            }
            argmax[s * hw + i] = best;
            let denom = at(best) + NMS_EPS;
            for t in 0..c {
                out[(s * c + t) * hw + i] = at(t) / denom;
            }
        }
    }
    Ok((Tensor::new(l.shape().to_vec(), out)?, argmax))
}

fn channel_nms_backward(l: &Tensor, argmax: &[usize], g: &Tensor) -> Tensor {
    let (n, c, h, w) = dims("channel_nms", l.shape()).unwrap();
    let hw = h * w;
    let mut d = vec![0.0; l.len()];
    for s in 0..n {
        for i in 0..hw {
            let idx = |t: usize| (s * c + t) * hw + i;
            let best = argmax[s * hw + i];
            let denom = l.data()[idx(best)] + NMS_EPS;
            let mut through_max = 0.0;
            for t in 0..c {
                let gt = g.data()[idx(t)];
                d[idx(t)] += gt / denom;
                through_max += gt * l.data()[idx(t)];
            }
            d[idx(best)] -= through_max / (denom * denom);
        }
    }
    Tensor::new(l.shape().to_vec(), d).unwrap()
}

fn spatial_shape(shape: &[usize]) -> Vec<usize> {
    match *shape {
        [_, h, w] => vec![h, w],
        [n, _, h, w] => vec![n, h, w],
        _ => unreachable!(),
    }
}

/// Returns `(Q̃, first argmax channel per location)`.
fn fuse_max_raw(m: &Tensor, g: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if m.shape() != g.shape() {
        return Err(Error::shape(
            "fuse_normalize",
            format!("M {:?} vs G {:?}", m.shape(), g.shape()),
        ));
    }
    let (n, c, h, w) = dims("fuse_normalize", m.shape())?;
    let hw = h * w;
    let mut out = vec![0.0; n * hw];
    let mut argmax = vec![0; n * hw];
    for s in 0..n {
        for i in 0..hw {
            let prod = |t: usize| {
                let j = (s * c + t) * hw + i;
                m.data()[j] * g.data()[j]
            };
            let mut best = 0;
            let mut best_v = prod(0);
            for t in 1..c {
                let v = prod(t);
                if v > best_v {
                    best = t;
                    best_v = v;
                }
            }
            argmax[s * hw + i] = best;
            out[s * hw + i] = best_v;
        }
    }
    Ok((Tensor::new(spatial_shape(m.shape()), out)?, argmax))
}

/// Returns `(Q, per-sample mass Σ Q̃, per-sample degenerate flag)`.
fn spatial_normalize_raw(qt: &Tensor) -> (Tensor, Vec<f64>, Vec<bool>) {
    let shape = qt.shape();
    let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
    let n = qt.len() / hw;
    let mut out = vec![0.0; qt.len()];
    let mut sums = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for s in 0..n {
        let plane = &qt.data()[s * hw..(s + 1) * hw];
        let total: f64 = plane.iter().sum();
        let flat = total < DEGENERATE_MASS;
        for (o, &x) in out[s * hw..(s + 1) * hw].iter_mut().zip(plane) {
            *o = if flat { 1.0 / hw as f64 } else { x / total };
        }
        sums.push(total);
        degenerate.push(flat);
    }
    (Tensor::new(shape.to_vec(), out).unwrap(), sums, degenerate)
}

/// Tape records for the attention steps.
pub(crate) enum IamSaved {
    LocalSoftmax { input: Var, k: usize },
    ChannelNms { input: Var, argmax: Vec<usize> },
    FuseMax { m: Var, g: Var, argmax: Vec<usize> },
    SpatialNormalize { input: Var, sums: Vec<f64>, degenerate: Vec<bool> },
}

pub(crate) fn backward(
    tape: &Tape,
    saved: &IamSaved,
    grad: &Tensor,
    out: &Tensor,
    acc: &mut dyn FnMut(Var, Tensor),
) {
    match saved {
        IamSaved::LocalSoftmax { input, k } => {
            acc(*input, local_softmax_backward(tape.value(*input), out, grad, *k));
        }
        IamSaved::ChannelNms { input, argmax } => {
            acc(*input, channel_nms_backward(tape.value(*input), argmax, grad));
        }
        IamSaved::FuseMax { m, g, argmax } => {
            let (mv, gv) = (tape.value(*m), tape.value(*g));
            let (n, c, h, w) = dims("fuse_normalize", mv.shape()).unwrap();
            let hw = h * w;
            let mut dm = vec![0.0; mv.len()];
            let mut dg = vec![0.0; gv.len()];
            for s in 0..n {
                for i in 0..hw {
                    let j = (s * c + argmax[s * hw + i]) * hw + i;
                    let up = grad.data()[s * hw + i];
                    dm[j] = up * gv.data()[j];
                    dg[j] = up * mv.data()[j];
                }
            }
            if tape.needs(*m) {
                acc(*m, Tensor::new(mv.shape().to_vec(), dm).unwrap());
            }
            if tape.needs(*g) {
                acc(*g, Tensor::new(gv.shape().to_vec(), dg).unwrap());
            }
        }
        IamSaved::SpatialNormalize {
            input,
            sums,
            degenerate,
        } => {
            let qt = tape.value(*input);
            let hw = grad.len() / sums.len();
            let mut d = vec![0.0; qt.len()];
            for (s, (&total, &flat)) in sums.iter().zip(degenerate).enumerate() {
                if flat {
                    continue;
                }
                let range = s * hw..(s + 1) * hw;
                let dot: f64 = grad.data()[range.clone()]
                    .iter()
                    .zip(&qt.data()[range.clone()])
                    .map(|(g, x)| g * x)
                    .sum();
                for i in range {
                    d[i] = grad.data()[i] / total - dot / (total * total);
                }
            }
            acc(*input, Tensor::new(qt.shape().to_vec(), d).unwrap());
        }
    }
}

/// Tape handles for one attention evaluation.
#[derive(Clone, Debug)]
pub struct IamVars {
    pub m: Var,
    pub g: Var,
    pub q_tilde: Var,
    pub q: Var,
    /// One flag per sample.
    pub degenerate: Vec<bool>,
}

impl Tape {
    pub fn local_softmax(&mut self, l: Var, k: usize) -> Result<Var> {
        let v = local_softmax_raw(self.value(l), k)?;
        Ok(self.push(v, crate::tape::Op::Iam(IamSaved::LocalSoftmax { input: l, k }), &[l]))
    }

    pub fn channel_nms(&mut self, l: Var) -> Result<Var> {
        let (v, argmax) = channel_nms_raw(self.value(l))?;
        Ok(self.push(
            v,
            crate::tape::Op::Iam(IamSaved::ChannelNms { input: l, argmax }),
            &[l],
        ))
    }

    /// `Q̃ = max over channels of M ⊙ G`.
    pub fn fuse_max(&mut self, m: Var, g: Var) -> Result<Var> {
        let (v, argmax) = fuse_max_raw(self.value(m), self.value(g))?;
        Ok(self.push(v, crate::tape::Op::Iam(IamSaved::FuseMax { m, g, argmax }), &[m, g]))
    }

    /// `Q = Q̃ / Σ Q̃` per sample, with the uniform fallback.
    pub fn spatial_normalize(&mut self, q_tilde: Var) -> Result<(Var, Vec<bool>)> {
        let r = self.value(q_tilde).rank();
        if r != 2 && r != 3 {
            return Err(Error::shape(
                "spatial_normalize",
                format!("expected [h,w] or [n,h,w], got {:?}", self.shape(q_tilde)),
            ));
        }
        let (v, sums, degenerate) = spatial_normalize_raw(self.value(q_tilde));
        let saved = IamSaved::SpatialNormalize {
            input: q_tilde,
            sums,
            degenerate: degenerate.clone(),
        };
        Ok((self.push(v, crate::tape::Op::Iam(saved), &[q_tilde]), degenerate))
    }

    /// Full attention module on `[c,h,w]` or `[n,c,h,w]` activations.
    pub fn iam(&mut self, l: Var, k: usize) -> Result<IamVars> {
        let m = self.local_softmax(l, k)?;
        let g = self.channel_nms(l)?;
        let q_tilde = self.fuse_max(m, g)?;
        let (q, degenerate) = self.spatial_normalize(q_tilde)?;
        Ok(IamVars {
            m,
            g,
            q_tilde,
            q,
            degenerate,
        })
    }
}

/// Local-window softmax of each channel of a `[c,h,w]` tensor.
pub fn local_softmax(l: &Tensor, k: usize) -> Result<Tensor> {
    if l.rank() != 3 {
        return Err(Error::shape("local_softmax", format!("expected [c,h,w], got {:?}", l.shape())));
    }
    local_softmax_raw(l, k)
}

/// Ratio of each channel to the channel maximum at the same location.
pub fn channel_nms(l: &Tensor) -> Result<Tensor> {
    if l.rank() != 3 {
        return Err(Error::shape("channel_nms", format!("expected [c,h,w], got {:?}", l.shape())));
    }
    Ok(channel_nms_raw(l)?.0)
}

/// `(Q̃, Q, degenerate)` from `M` and `G`.
pub fn fuse_normalize(m: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, bool)> {
    if m.rank() != 3 {
        return Err(Error::shape("fuse_normalize", format!("expected [c,h,w], got {:?}", m.shape())));
    }
    let (qt, _) = fuse_max_raw(m, g)?;
    let (q, _, degenerate) = spatial_normalize_raw(&qt);
    Ok((qt, q, degenerate[0]))
}

/// All attention maps for one `[c,h,w]` activation tensor.
pub fn iam_forward(l: &Tensor, k: usize) -> Result<AttentionMaps> {
    let m = local_softmax(l, k)?;
    let g = channel_nms(l)?;
    let (q_tilde, q, degenerate) = fuse_normalize(&m, &g)?;
    Ok(AttentionMaps {
        l: l.clone(),
        m,
        g,
        q_tilde,
        q,
        k,
        degenerate,
    })
}
