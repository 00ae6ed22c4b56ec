use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running averages on every training batch.
pub const BN_MOMENTUM: f64 = 0.9;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    Ok(())
}

/// Visits each 1-D lane along `axis` as a list of flat indices.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut idx = vec![0; n];
    for o in 0..outer {
        for i in 0..inner {
            for (j, slot) in idx.iter_mut().enumerate() {
                *slot = (o * n + j) * inner + i;
            }
            f(&idx);
        }
    }
}

pub(crate) fn softmax_backward(g: &Tensor, y: &Tensor, axis: usize) -> Tensor {
    let mut dx = vec![0.0; y.len()];
    for_each_lane(y.shape(), axis, |lane| {
        let dot: f64 = lane.iter().map(|&i| g.data()[i] * y.data()[i]).sum();
        for &i in lane {
            dx[i] = y.data()[i] * (g.data()[i] - dot);
        }
    });
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

pub(crate) fn log_softmax_backward(g: &Tensor, y: &Tensor, axis: usize) -> Tensor {
    let mut dx = vec![0.0; y.len()];
    for_each_lane(y.shape(), axis, |lane| {
        let total: f64 = lane.iter().map(|&i| g.data()[i]).sum();
        for &i in lane {
            dx[i] = g.data()[i] - y.data()[i].exp() * total;
        }
    });
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

pub(crate) fn l2_normalize_backward(g: &Tensor, y: &Tensor, norms: &[f64], axis: usize) -> Tensor {
    let mut dx = vec![0.0; y.len()];
    let mut lane_no = 0;
    for_each_lane(y.shape(), axis, |lane| {
        let dot: f64 = lane.iter().map(|&i| g.data()[i] * y.data()[i]).sum();
        let n = norms[lane_no];
        for &i in lane {
            dx[i] = (g.data()[i] - y.data()[i] * dot) / n;
        }
        lane_no += 1;
    });
    Tensor::new(y.shape().to_vec(), dx).unwrap()
}

/// Exponential moving averages of per-channel mean and variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Mean 0, variance 1: the identity normalization.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, batch: &BatchStats) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }
}

/// Statistics observed on one training batch (variance is unbiased).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the given running averages.
    Eval(&'a RunningStats),
}

pub(crate) struct BnSaved {
    pub input: Var,
    pub gamma: Option<Var>,
    pub beta: Option<Var>,
    train: bool,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    gamma_values: Option<Vec<f64>>,
}

pub(crate) struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::shape(
            "batch_norm",
            format!("expected [n,c] or [n,c,h,w], got {:?}", shape),
        ));
    }
    Ok(split_axis(shape, 1))
}

pub(crate) fn batch_norm_backward(saved: &BnSaved, g: &Tensor, x: &Tensor) -> BnGrads {
    let (n, c, inner) = bn_layout(x.shape()).unwrap();
    let m = (n * inner) as f64;
    let gd = g.data();
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let idx = |s: usize, i: usize| (s * c + ch) * inner + i;
        let (mut sg, mut sgx) = (0.0, 0.0);
        for s in 0..n {
            for i in 0..inner {
                let j = idx(s, i);
                sg += gd[j];
                sgx += gd[j] * saved.xhat[j];
            }
        }
        dgamma[ch] = sgx;
        dbeta[ch] = sg;
        let gm = saved.gamma_values.as_ref().map_or(1.0, |v| v[ch]);
        let is = saved.inv_std[ch];
        for s in 0..n {
            for i in 0..inner {
                let j = idx(s, i);
                dx[j] = if saved.train {
                    gm * is / m * (m * gd[j] - sg - saved.xhat[j] * sgx)
                } else {
                    gm * is * gd[j]
                };
            }
        }
    }
    BnGrads {
        input: Tensor::new(x.shape().to_vec(), dx).unwrap(),
        gamma: Tensor::new([c], dgamma).unwrap(),
        beta: Tensor::new([c], dbeta).unwrap(),
    }
}

impl Tape {
    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        check_axis("softmax", x.shape(), axis)?;
        let mut out = vec![0.0; x.len()];
        for_each_lane(x.shape(), axis, |lane| {
            let m = lane.iter().map(|&i| x.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &i in lane {
                out[i] = (x.data()[i] - m).exp();
                z += out[i];
            }
            for &i in lane {
                out[i] /= z;
            }
        });
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::Softmax { input, axis }, &[input]))
    }

    pub fn log_softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        check_axis("log_softmax", x.shape(), axis)?;
        let mut out = vec![0.0; x.len()];
        for_each_lane(x.shape(), axis, |lane| {
            let m = lane.iter().map(|&i| x.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|&i| (x.data()[i] - m).exp()).sum::<f64>().ln();
            for &i in lane {
                out[i] = x.data()[i] - lse;
            }
        });
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::LogSoftmax { input, axis }, &[input]))
    }

    /// Divides every lane along `axis` by its Euclidean norm. Zero lanes are rejected.
    pub fn l2_normalize(&mut self, input: Var, axis: usize) -> Result<Var> {
        let x = self.value(input);
        check_axis("l2_normalize", x.shape(), axis)?;
        let mut out = vec![0.0; x.len()];
        let mut norms = Vec::new();
        let mut bad = None;
        for_each_lane(x.shape(), axis, |lane| {
            let n = lane.iter().map(|&i| x.data()[i].powi(2)).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                bad.get_or_insert(norms.len());
            }
            for &i in lane {
                out[i] = x.data()[i] / n;
            }
            norms.push(n);
        });
        if let Some(lane) = bad {
            return Err(Error::invalid(
                "l2_normalize",
                format!("lane {} has zero or non-finite norm", lane),
            ));
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(v, Op::L2Normalize { input, axis, norms }, &[input]))
    }

    /// Per-channel batch normalization over axis 1 of `[n,c]` or `[n,c,h,w]`.
    ///
    /// In [`BnMode::Train`] the observed batch statistics are returned so the
    /// caller can fold them into its running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        mode: BnMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.value(input);
        let (n, c, inner) = bn_layout(x.shape())?;
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine parameter {:?} does not match {} channels", self.shape(p), c),
                ));
            }
        }
        let m = n * inner;
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::invalid(
                        "batch_norm",
                        "training mode needs at least two values per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = (0..n).flat_map(|s| {
                        let base = (s * c + ch) * inner;
                        x.data()[base..base + inner].iter().copied()
                    });
                    let mu = vals.clone().sum::<f64>() / m as f64;
                    let ss = vals.map(|v| (v - mu).powi(2)).sum::<f64>();
                    mean[ch] = mu;
                    var[ch] = ss / m as f64;
                }
                let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval(rs) => {
                if rs.mean.len() != c || rs.var.len() != c {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running stats hold {} channels, input has {}", rs.mean.len(), c),
                    ));
                }
                (rs.mean.clone(), rs.var.clone(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = gamma.map(|g| self.value(g).data().to_vec());
        let bv = beta.map(|b| self.value(b).data().to_vec());
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * inner;
                let ga = gv.as_ref().map_or(1.0, |g| g[ch]);
                let be = bv.as_ref().map_or(0.0, |b| b[ch]);
                for i in base..base + inner {
                    xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                    out[i] = ga * xhat[i] + be;
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        let mut inputs = vec![input];
        inputs.extend(gamma);
        inputs.extend(beta);
        let saved = BnSaved {
            input,
            gamma,
            beta,
            train: matches!(mode, BnMode::Train),
            xhat,
            inv_std,
            gamma_values: gv,
        };
        Ok((self.push(v, Op::BatchNorm(saved), &inputs), stats))
    }
}
