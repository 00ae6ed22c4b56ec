//! Training-time augmentation: padded random crop, horizontal flip and
//! random erasing.

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Zero padding before cropping back to the original size.
    pub pad: usize,
    pub crop_p: f64,
    pub flip_p: f64,
    pub erase_p: f64,
    /// Erased area as a fraction of the image.
    pub erase_area: (f64, f64),
    /// Erased rectangle height / width.
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            pad: 4,
            crop_p: 1.0,
            flip_p: 0.5,
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
            erase_aspect: (0.3, 3.3),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            crop_p: 0.0,
            flip_p: 0.0,
            erase_p: 0.0,
            ..Self::default()
        }
    }
}

/// Rectangle `[top, top + h) × [left, left + w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub h: usize,
    pub w: usize,
}

/// What [`augment`] did to one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AugmentTrace {
    /// Shift `(du, dv)` of the crop window relative to the unpadded image.
    pub shift: Option<(isize, isize)>,
    pub flipped: bool,
    pub erased: Option<Rect>,
}

fn sample_erase(rng: &mut impl Rng, cfg: &AugmentConfig, h: usize, w: usize) -> Option<Rect> {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1);
        let (lo, hi) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
        let aspect = rng.gen_range(lo..=hi).exp();
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh >= 1 && ew >= 1 && eh < h && ew < w {
            return Some(Rect {
                top: rng.gen_range(0..=h - eh),
                left: rng.gen_range(0..=w - ew),
                h: eh,
                w: ew,
            });
        }
    }
    None
}

/// Augments a `[C, H, W]` image; `fill` holds one erasing value per channel.
pub fn augment(image: &Tensor, cfg: &AugmentConfig, fill: &[f64], rng: &mut impl Rng) -> (Tensor, AugmentTrace) {
    let [c, h, w] = *image.shape() else {
        panic!("augment expects [C,H,W], got {:?}", image.shape());
    };
    assert_eq!(fill.len(), c, "one fill value per channel");
    let mut trace = AugmentTrace::default();
    let mut out = image.clone();
    if cfg.pad > 0 && rng.gen_bool(cfg.crop_p) {
        let p = cfg.pad as isize;
        let (du, dv) = (rng.gen_range(-p..=p), rng.gen_range(-p..=p));
        trace.shift = Some((du, dv));
        out = Tensor::from_fn([c, h, w], |i| {
            let (ch, u, v) = (i / (h * w), (i / w) % h, i % w);
            let (su, sv) = (u as isize + du, v as isize + dv);
            if su < 0 || sv < 0 || su >= h as isize || sv >= w as isize {
                0.0
            } else {
                image.data()[(ch * h + su as usize) * w + sv as usize]
            }
        });
    }
    if rng.gen_bool(cfg.flip_p) {
        trace.flipped = true;
        let src = out.clone();
        for ch in 0..c {
            for u in 0..h {
                for v in 0..w {
                    out.data_mut()[(ch * h + u) * w + v] = src.data()[(ch * h + u) * w + (w - 1 - v)];
                }
            }
        }
    }
    if rng.gen_bool(cfg.erase_p) {
        if let Some(r) = sample_erase(rng, cfg, h, w) {
            trace.erased = Some(r);
            for (ch, &f) in fill.iter().enumerate() {
                for u in r.top..r.top + r.h {
                    for v in r.left..r.left + r.w {
                        out.data_mut()[(ch * h + u) * w + v] = f;
                    }
                }
            }
        }
    }
    (out, trace)
}

/// Per-channel mean over `[C, H, W]` images.
pub fn channel_mean(images: &[Tensor]) -> Vec<f64> {
    let Some(first) = images.first() else {
        return Vec::new();
    };
    let c = first.shape()[0];
    let mut sums = vec![0.0; c];
    let mut count = 0usize;
    for img in images {
        let hw = img.len() / c;
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += img.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
        }
        count += hw;
    }
    sums.into_iter().map(|s| s / count as f64).collect()
}
