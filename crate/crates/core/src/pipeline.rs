//! Dataset loading, the training loop, evaluation and attention export.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RotationMode, RunConfig};
use crate::data::{augment, channel_mean, Manifest, PkSampler, Raster, Record, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Meta, Metrics};
use crate::heads::LossReport;
use crate::model::{GeomAttnModel, TrainBatch};
use crate::params::Adam;
use crate::selfsup::{make_rotation_batch, make_rotation_batch_all_four, RotationBatch};
use crate::tensor::Tensor;

/// A manifest with every image decoded to `[C, H, W]` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Tensor>,
}

impl Dataset {
    /// Reads `manifest.tsv` and the images it lists under `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::load(dir.join("manifest.tsv"))?;
        let images = manifest
            .records
            .iter()
            .map(|r| Ok(Raster::load(dir.join(&r.path))?.to_tensor()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    pub fn from_items(items: Vec<(Raster, Record)>) -> Result<Self> {
        let (images, records): (Vec<Tensor>, Vec<Record>) =
            items.into_iter().map(|(r, rec)| (r.to_tensor(), rec)).unzip();
        let manifest = Manifest { records };
        manifest.validate()?;
        Ok(Self { manifest, images })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest.split(split).map(|(i, _)| i).collect()
    }

    pub fn meta(&self, i: usize) -> Meta {
        let r = &self.manifest.records[i];
        Meta::new(r.identity, r.camera, r.track)
    }

    fn check_side(&self, side: usize) -> Result<()> {
        match self.images.iter().position(|t| t.shape() != [3, side, side]) {
            Some(i) => Err(Error::shape(
                "dataset",
                format!("{} is {:?}, model expects [3, {side}, {side}]", self.manifest.records[i].path, self.images[i].shape()),
            )),
            None => Ok(()),
        }
    }
}

/// Progress notifications from [`train`].
pub enum TrainEvent<'a> {
    Step {
        step: usize,
        report: &'a LossReport,
    },
    EpochEnd {
        epoch: usize,
        model: &'a GeomAttnModel,
        optimizer: &'a Adam,
    },
}

pub struct TrainOutcome {
    pub model: GeomAttnModel,
    pub optimizer: Adam,
    pub steps: usize,
}

fn rotation_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains a fresh model on the `train` split.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    mut on_event: impl FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.check_side(cfg.side)?;
    let labels = data.manifest.train_labels();
    let mut groups = vec![Vec::new(); labels.len()];
    for (i, r) in data.manifest.split(Split::Train) {
        groups[labels[&r.identity]].push(i);
    }
    let mut sampler = PkSampler::new(groups, cfg.p, cfg.k_img, cfg.seed)?;
    let mut model = GeomAttnModel::new(cfg.model_config(labels.len()))?;
    let mut optimizer = Adam::new(cfg.adam(), &model.store);
    let weights = cfg.effective_weights();
    let schedule = cfg.schedule();
    let aug = cfg.augment();
    let train_images: Vec<Tensor> = data.indices(Split::Train).into_iter().map(|i| data.images[i].clone()).collect();
    let fill = channel_mean(&train_images);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch);
        for batch in sampler.epoch() {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let raw: Vec<Tensor> = batch.items.iter().map(|&i| data.images[i].clone()).collect();
            let augmented: Vec<Tensor> = raw.iter().map(|t| augment(t, &aug, &fill, &mut rng).0).collect();
            let rotation = if weights.slb > 0.0 {
                let samples = match cfg.rotation {
                    RotationMode::Single => make_rotation_batch(&raw, rotation_seed(cfg.seed, step))?,
                    RotationMode::AllFour => make_rotation_batch_all_four(&raw)?,
                };
                Some(RotationBatch::from_samples(&samples)?)
            } else {
                None
            };
            let tb = TrainBatch {
                images: Tensor::stack(&augmented)?,
                labels: batch.labels,
                rotation,
            };
            let report = model.train_step(&tb, &mut optimizer, &weights, lr)?;
            on_event(TrainEvent::Step { step, report: &report })?;
            step += 1;
        }
        on_event(TrainEvent::EpochEnd {
            epoch,
            model: &model,
            optimizer: &optimizer,
        })?;
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        steps: step,
    })
}

/// Query and gallery embeddings (concatenated form) with their metadata.
pub struct Embedded {
    pub queries: Tensor,
    pub gallery: Tensor,
    pub query_meta: Vec<Meta>,
    pub gallery_meta: Vec<Meta>,
}

pub fn embed_splits(model: &GeomAttnModel, data: &Dataset) -> Result<Embedded> {
    data.check_side(model.config.side)?;
    let embed = |idx: &[usize]| -> Result<Tensor> {
        let imgs: Vec<Tensor> = idx.iter().map(|&i| data.images[i].clone()).collect();
        let pairs = model.embed_all(&imgs, 32)?;
        let rows: Vec<Tensor> = pairs.into_iter().map(|p| p.concat).collect();
        Tensor::stack(&rows)
    };
    let (q, g) = (data.indices(Split::Query), data.indices(Split::Gallery));
    if q.is_empty() || g.is_empty() {
        return Err(Error::invalid("evaluate", "dataset has no query or no gallery images"));
    }
    Ok(Embedded {
        queries: embed(&q)?,
        gallery: embed(&g)?,
        query_meta: q.iter().map(|&i| data.meta(i)).collect(),
        gallery_meta: g.iter().map(|&i| data.meta(i)).collect(),
    })
}

pub fn evaluate_model(model: &GeomAttnModel, data: &Dataset) -> Result<Metrics> {
    let e = embed_splits(model, data)?;
    eval::evaluate(&e.queries, &e.gallery, &e.query_meta, &e.gallery_meta)
}

/// Attention map of one image with its visualizations.
pub struct AttentionExport {
    /// `[h, w]`, sums to 1.
    pub q: Tensor,
    pub pgm: Raster,
    pub csv: String,
    pub overlay: Raster,
}

/// Renders `Q` as grayscale (min to 0, max to 255; a constant map is all 0),
/// as CSV, and as a red-blue heat map upsampled to the image and blended at 0.5.
pub fn attention_export(model: &GeomAttnModel, image: &Tensor) -> Result<AttentionExport> {
    match image.shape() {
        [_, h, w] if h == w => {}
        s => return Err(Error::invalid("attention_export", format!("image {:?} is not square", s))),
    }
    let q = model.attention_maps(image)?.q;
    let [gh, gw] = *q.shape() else { unreachable!() };
    let (lo, hi) = q.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let norm = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    let pgm = Raster::new(gw, gh, 1, q.data().iter().map(|&v| (norm(v) * 255.0).round() as u8).collect())?;
    let csv: String = (0..gh)
        .map(|u| {
            let row: Vec<String> = (0..gw).map(|v| q.at(&[u, v]).to_string()).collect();
            row.join(",") + "\n"
        })
        .collect();
    let base = Raster::from_tensor(image)?;
    let (h, w) = (base.height, base.width);
    let (su, sv) = (h / gh, w / gw);
    let mut px = Vec::with_capacity(h * w * 3);
    for u in 0..h {
        for v in 0..w {
            let a = norm(q.at(&[(u / su).min(gh - 1), (v / sv).min(gw - 1)]));
            let heat = [a, 0.0, 1.0 - a];
            for (ch, hc) in heat.iter().enumerate() {
                let src = base.pixels[(u * w + v) * base.channels + ch.min(base.channels - 1)] as f64 / 255.0;
                px.push(((0.5 * src + 0.5 * hc) * 255.0).round() as u8);
            }
        }
    }
    Ok(AttentionExport {
        q,
        pgm,
        csv,
        overlay: Raster::new(w, h, 3, px)?,
    })
}

/// Writes `<prefix>.pgm`, `<prefix>.csv` and `<prefix>_overlay.ppm`.
pub fn write_attention(export: &AttentionExport, prefix: &str) -> Result<()> {
    export.pgm.save(format!("{prefix}.pgm"))?;
    std::fs::write(format!("{prefix}.csv"), &export.csv)?;
    export.overlay.save(format!("{prefix}_overlay.ppm"))?;
    Ok(())
}

/// Mean landmark mass of the attention map and of a uniform map over held-out images.
pub fn landmark_mass(model: &GeomAttnModel, data: &Dataset, radius: usize) -> Result<(f64, f64)> {
    let cell = model.config.side / model.config.grid();
    let held: Vec<usize> = data
        .manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split != Split::Train && !r.landmarks.is_empty())
        .map(|(i, _)| i)
        .collect();
    if held.is_empty() {
        return Err(Error::invalid("landmark_mass", "no held-out images with landmarks"));
    }
    let g = model.config.grid();
    let (mut att, mut uni) = (0.0, 0.0);
    for &i in &held {
        let q = model.attention_maps(&data.images[i])?.q;
        let pts: Vec<(usize, usize)> = data.manifest.records[i]
            .landmarks
            .iter()
            .map(|l| ((l.u.max(0.0) as usize / cell).min(g - 1), (l.v.max(0.0) as usize / cell).min(g - 1)))
            .collect();
        att += eval::attention_landmark_mass(&q, &pts, radius)?;
        uni += eval::uniform_landmark_mass(g, g, &pts, radius)?;
    }
    let n = held.len() as f64;
    Ok((att / n, uni / n))
}

/// Rotation accuracy over all four rotations of the held-out images.
pub fn rotation_accuracy(model: &GeomAttnModel, data: &Dataset) -> Result<f64> {
    let held: Vec<Tensor> = data
        .manifest
        .records
        .iter()
        .zip(&data.images)
        .filter(|(r, _)| r.split != Split::Train)
        .map(|(_, t)| t.clone())
        .collect();
    let samples = make_rotation_batch_all_four(&held)?;
    let mut hits = 0.0;
    for chunk in samples.chunks(64) {
        let b = RotationBatch::from_samples(chunk)?;
        let p = model.predict_rotation(&b.images)?;
        hits += crate::selfsup::rotation_accuracy(&p, &b.classes) * b.len() as f64;
    }
    Ok(hits / samples.len() as f64)
}
