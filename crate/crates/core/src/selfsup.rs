//! Rotation prediction as a pretext task.
//!
//! Each image is rotated counter-clockwise by `90° · r` for a class
//! `r ∈ {0, 1, 2, 3}` and the rotation branch predicts `r`. The branch reads
//! the same attention-encoder parameters as the attention pathway, so this
//! objective shapes the features the attention is computed from.
//!
//! ```
//! use geomattn::selfsup::make_rotation_batch;
//! use geomattn::Tensor;
//!
//! let img = Tensor::from_fn([1, 4, 4], |i| i as f64);
//! let a = make_rotation_batch(&[img.clone(), img.clone()], 7).unwrap();
//! let b = make_rotation_batch(&[img.clone(), img], 7).unwrap();
//! assert_eq!(a, b);
//! assert!(a.iter().all(|s| s.rotation_class < 4));
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::GeomAttnModel;
use crate::ops::rotate90;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ROTATION_CLASSES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct RotationSample {
    /// `[C, s, s]`, already rotated.
    pub image: Tensor,
    /// Quarter turns counter-clockwise.
    pub rotation_class: u8,
}

/// Rotation samples stacked for a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationBatch {
    /// `[n, C, s, s]`.
    pub images: Tensor,
    pub classes: Vec<usize>,
}

impl RotationBatch {
    pub fn from_samples(samples: &[RotationSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("RotationBatch", "empty batch"));
        }
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        Ok(Self {
            images: Tensor::stack(&images)?,
            classes: samples.iter().map(|s| s.rotation_class as usize).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

fn check_square(image: &Tensor) -> Result<()> {
    match image.shape() {
        [_, h, w] if h == w => Ok(()),
        s => Err(Error::invalid(
            "make_rotation_batch",
            format!("image {:?} is not a square [C, s, s]", s),
        )),
    }
}

fn rotated(image: &Tensor, class: u8) -> Result<RotationSample> {
    Ok(RotationSample {
        image: rotate90(image, class)?,
        rotation_class: class,
    })
}

/// One sample per image with a class drawn uniformly by a generator seeded with `seed`.
pub fn make_rotation_batch(images: &[Tensor], seed: u64) -> Result<Vec<RotationSample>> {
    images.iter().try_for_each(check_square)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images
        .iter()
        .map(|img| rotated(img, rng.gen_range(0..ROTATION_CLASSES as u8)))
        .collect()
}

/// All four rotations of every image, in class order.
pub fn make_rotation_batch_all_four(images: &[Tensor]) -> Result<Vec<RotationSample>> {
    images.iter().try_for_each(check_square)?;
    let mut out = Vec::with_capacity(images.len() * ROTATION_CLASSES);
    for img in images {
        for r in 0..ROTATION_CLASSES as u8 {
            out.push(rotated(img, r)?);
        }
    }
    Ok(out)
}

/// Rotation-class probabilities of one sample (evaluation-mode normalization).
pub fn slb_forward(model: &GeomAttnModel, sample: &RotationSample) -> Result<Tensor> {
    let s = sample.image.shape().to_vec();
    let batch = sample.image.clone().reshape([1, s[0], s[1], s[2]])?;
    let p = model.predict_rotation(&batch)?;
    p.reshape([ROTATION_CLASSES])
}

/// Mean cross entropy of rotation predictions `[n, 4]`.
pub fn slb_loss_from_probs(probs: &Tensor, classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::invalid("slb_loss", "empty batch"));
    }
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = tape.cross_entropy(p, classes)?;
    Ok(tape.value(l).item())
}

/// Rotation loss of a batch under training-mode normalization, with no update.
pub fn slb_loss(model: &GeomAttnModel, samples: &[RotationSample]) -> Result<f64> {
    let batch = RotationBatch::from_samples(samples).map_err(|_| Error::invalid("slb_loss", "empty batch"))?;
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let x = tape.constant(batch.images);
    let (probs, _) = model.rotation_probs(&mut tape, &bound, x, batch.classes.len() > 1)?;
    slb_loss_from_probs(tape.value(probs), &batch.classes)
}

/// Fraction of samples whose most probable class is the true class.
pub fn rotation_accuracy(probs: &Tensor, classes: &[usize]) -> f64 {
    let b = ROTATION_CLASSES;
    let hits = classes
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &probs.data()[i * b..(i + 1) * b];
            let best = (0..b).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            best == y
        })
        .count();
    hits as f64 / classes.len().max(1) as f64
}
