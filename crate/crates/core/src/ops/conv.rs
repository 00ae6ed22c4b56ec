//! Spatial operators on `[c, h, w]` feature maps and `[n, c, h, w]` batches.
//!
//! Convolution lowers each sample to an im2col matrix and runs a single GEMM;
//! the backward pass recomputes the column matrix rather than storing it.

use crate::error::{Error, Result};
use crate::ops::linalg::{gemm, Mat};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub(crate) struct ConvSaved {
    pub input: Var,
    pub kernel: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output side length of a convolution along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
}

fn geom(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Geom> {
    const OP: &str = "conv2d";
    let (n, ci, h, w) = match *input {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::shape(
                OP,
                format!("input must be [c,h,w] or [n,c,h,w], got {:?}", input),
            ))
        }
    };
    let [co, kci, kh, kw] = *kernel else {
        return Err(Error::shape(
            OP,
            format!("kernel must be [c_out,c_in,k,k], got {:?}", kernel),
        ));
    };
    if kci != ci {
        return Err(Error::shape(
            OP,
            format!(
                "channel axis: input has {} channels but kernel axis 1 expects {}",
                ci, kci
            ),
        ));
    }
    if kh != kw {
        return Err(Error::shape(
            OP,
            format!("kernel axes 2 and 3 must be equal, got {}x{}", kh, kw),
        ));
    }
    if kh % 2 == 0 {
        return Err(Error::invalid(OP, format!("kernel side {} must be odd", kh)));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(OP, format!("stride {} not in {{1, 2}}", stride)));
    }
    let ho = conv_out_len(h, kh, stride, pad)
        .ok_or_else(|| Error::shape(OP, format!("height axis {} smaller than kernel {}", h, kh)))?;
    let wo = conv_out_len(w, kh, stride, pad)
        .ok_or_else(|| Error::shape(OP, format!("width axis {} smaller than kernel {}", w, kh)))?;
    Ok(Geom {
        n,
        ci,
        h,
        w,
        co,
        k: kh,
        stride,
        pad,
        ho,
        wo,
    })
}

fn im2col(x: &[f64], g: &Geom, col: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let cols = g.cols();
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut col[((c * k + kh) * k + kw) * cols..][..cols];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + kh as isize - p;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize * s + kw as isize - p;
                        *d = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geom, dx: &mut [f64]) {
    let (k, s, p) = (g.k, g.stride as isize, g.pad as isize);
    let cols = g.cols();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &col[((c * k + kh) * k + kw) * cols..][..cols];
                for oy in 0..g.ho {
                    let iy = oy as isize * s + kh as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = ox as isize * s + kw as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    saved: &ConvSaved,
    grad: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    need_input: bool,
    need_kernel: bool,
) -> ConvGrads {
    let g = geom(input.shape(), kernel.shape(), saved.stride, saved.pad).expect("validated in forward");
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = g.ci * g.h * g.w;
    let out_len = g.co * cols;
    let mut col = vec![0.0; rows * cols];
    let mut dcol = vec![0.0; rows * cols];
    let mut dk = need_kernel.then(|| vec![0.0; g.co * rows]);
    let mut dx = need_input.then(|| vec![0.0; input.len()]);
    let mut db = saved.bias.map(|_| vec![0.0; g.co]);
    let wmat = Mat::new(kernel.data(), g.co, rows);

    for s in 0..g.n {
        let go = &grad.data()[s * out_len..(s + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (c, b) in db.iter_mut().enumerate() {
                *b += go[c * cols..(c + 1) * cols].iter().sum::<f64>();
            }
        }
        if let Some(dk) = dk.as_mut() {
            im2col(&input.data()[s * in_len..(s + 1) * in_len], &g, &mut col);
            gemm(1.0, Mat::new(go, g.co, cols), Mat::new(&col, rows, cols).t(), 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(1.0, wmat.t(), Mat::new(go, g.co, cols), 0.0, &mut dcol);
            col2im(&dcol, &g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    ConvGrads {
        input: dx.map(|d| Tensor::new(input.shape().to_vec(), d).unwrap()),
        kernel: dk.map(|d| Tensor::new(kernel.shape().to_vec(), d).unwrap()),
        bias: db.map(|d| Tensor::new([g.co], d).unwrap()),
    }
}

pub(crate) fn gap_backward(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    let hw = in_shape[in_shape.len() - 2] * in_shape[in_shape.len() - 1];
    let scale = 1.0 / hw as f64;
    let mut out = Vec::with_capacity(grad.len() * hw);
    for &g in grad.data() {
        out.extend(std::iter::repeat(g * scale).take(hw));
    }
    Tensor::new(in_shape.to_vec(), out).unwrap()
}

/// Counter-clockwise quarter turns of the last two axes:
/// one turn sends `x[k, u, v]` to `y[k, w - 1 - v, u]`.
pub(crate) fn rotate90_raw(t: &Tensor, times: u8) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let planes = t.len() / (h * w);
    let mut cur = t.data().to_vec();
    let (mut ch, mut cw) = (h, w);
    for _ in 0..times % 4 {
        let mut next = vec![0.0; cur.len()];
        for p in 0..planes {
            let src = &cur[p * ch * cw..(p + 1) * ch * cw];
            let dst = &mut next[p * ch * cw..(p + 1) * ch * cw];
            // new plane has shape [cw, ch]
            for u in 0..ch {
                for v in 0..cw {
                    dst[(cw - 1 - v) * ch + u] = src[u * cw + v];
                }
            }
        }
        cur = next;
        std::mem::swap(&mut ch, &mut cw);
    }
    let mut out_shape = shape.to_vec();
    out_shape[r - 2] = ch;
    out_shape[r - 1] = cw;
    Tensor::new(out_shape, cur).unwrap()
}

pub fn rotate90(image: &Tensor, times: u8) -> Result<Tensor> {
    if times > 3 {
        return Err(Error::invalid("rotate90", format!("times {} not in 0..=3", times)));
    }
    if image.rank() < 2 {
        return Err(Error::shape(
            "rotate90",
            format!("need at least two spatial axes, got {:?}", image.shape()),
        ));
    }
    Ok(rotate90_raw(image, times))
}

fn spatial_dims(x: &[usize], q: &[usize]) -> Result<(usize, usize, usize)> {
    let ok = match (x.len(), q.len()) {
        (3, 2) => x[1..] == q[..],
        (4, 3) => x[0] == q[0] && x[2..] == q[1..],
        _ => false,
    };
    if !ok {
        return Err(Error::shape(
            "spatial_mul",
            format!("features {:?} cannot be weighted by attention {:?}", x, q),
        ));
    }
    let r = x.len();
    let n = if r == 4 { x[0] } else { 1 };
    Ok((n, x[r - 3], x[r - 2] * x[r - 1]))
}

pub(crate) fn spatial_mul_backward(grad: &Tensor, x: &Tensor, q: &Tensor) -> (Tensor, Tensor) {
    let (n, c, hw) = spatial_dims(x.shape(), q.shape()).expect("validated in forward");
    let mut dx = vec![0.0; x.len()];
    let mut dq = vec![0.0; q.len()];
    for s in 0..n {
        let qs = &q.data()[s * hw..(s + 1) * hw];
        for k in 0..c {
            let base = (s * c + k) * hw;
            for i in 0..hw {
                dx[base + i] = grad.data()[base + i] * qs[i];
                dq[s * hw + i] += grad.data()[base + i] * x.data()[base + i];
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).unwrap(),
        Tensor::new(q.shape().to_vec(), dq).unwrap(),
    )
}

impl Tape {
    /// 2-D cross-correlation with zero padding; output side is
    /// `floor((h + 2 pad - k) / stride) + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let g = geom(self.shape(input), self.shape(kernel), stride, pad)?;
        if let Some(b) = bias {
            if self.shape(b) != [g.co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} does not match {} output channels", self.shape(b), g.co),
                ));
            }
        }
        let (rows, cols) = (g.rows(), g.cols());
        let in_len = g.ci * g.h * g.w;
        let mut out = vec![0.0; g.n * g.co * cols];
        let mut col = vec![0.0; rows * cols];
        {
            let x = self.value(input).data();
            let wmat = Mat::new(self.value(kernel).data(), g.co, rows);
            let bias = bias.map(|b| self.value(b).data());
            for s in 0..g.n {
                im2col(&x[s * in_len..(s + 1) * in_len], &g, &mut col);
                let dst = &mut out[s * g.co * cols..(s + 1) * g.co * cols];
                gemm(1.0, wmat, Mat::new(&col, rows, cols), 0.0, dst);
                if let Some(b) = bias {
                    for (c, &bc) in b.iter().enumerate() {
                        dst[c * cols..(c + 1) * cols].iter_mut().for_each(|v| *v += bc);
                    }
                }
            }
        }
        let shape = if self.value(input).rank() == 3 {
            vec![g.co, g.ho, g.wo]
        } else {
            vec![g.n, g.co, g.ho, g.wo]
        };
        let v = Tensor::new(shape, out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            v,
            Op::Conv2d(ConvSaved {
                input,
                kernel,
                bias,
                stride,
                pad,
            }),
            &inputs,
        ))
    }

    /// Mean over the two trailing spatial axes: `[c,h,w] -> [c]`, `[n,c,h,w] -> [n,c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 && shape.len() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected [c,h,w] or [n,c,h,w], got {:?}", shape),
            ));
        }
        let hw = shape[shape.len() - 2] * shape[shape.len() - 1];
        if hw == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let data = self
            .value(input)
            .data()
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::new(shape[..shape.len() - 2].to_vec(), data)?;
        Ok(self.push(v, Op::GlobalAvgPool(input), &[input]))
    }

    pub fn rotate90(&mut self, input: Var, times: u8) -> Result<Var> {
        let v = rotate90(self.value(input), times)?;
        Ok(self.push(v, Op::Rotate90 { input, times }, &[input]))
    }

    /// Multiplies every channel of `x` by the spatial map `q`.
    pub fn spatial_mul(&mut self, x: Var, q: Var) -> Result<Var> {
        let (n, c, hw) = spatial_dims(self.shape(x), self.shape(q))?;
        let (xv, qv) = (self.value(x).data(), self.value(q).data());
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for k in 0..c {
                let base = (s * c + k) * hw;
                for i in 0..hw {
                    out[base + i] = xv[base + i] * qv[s * hw + i];
                }
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(v, Op::SpatialMul(x, q), &[x, q]))
    }
}
