//! The three-branch re-identification network.
//!
//! ```text
//! image ─ gb_stage1 ─ x1 ─ gb_stage2 ─ GAP ─ f_gb ─ BNNeck ─ id_head_gb
//!   │                  │
//!   │                  ⊙ Q ─ gfb_tail ─ GAP ─ f_gfb ─ BNNeck ─ id_head_gfb
//!   │                  │
//!   └─ attn_encoder ─ L ─ IAM ─ Q
//!
//! rotated image ─ attn_encoder ─ f_se ─ GAP ─ cosine classifier (4 classes)
//! ```
//!
//! The attention encoder is a single set of parameters read by both the
//! attention pathway and the rotation branch. Every conv block is a 3×3
//! convolution, batch norm and ReLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::heads::{self, LossReport, LossTerms, LossWeights, GAMMA_INIT};
use crate::iam::AttentionMaps;
use crate::ops::{BatchStats, BnMode};
use crate::params::{Adam, Bound, BufferId, ParamId, ParamStore};
use crate::selfsup::RotationBatch;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which spatial map weights the stage-1 features in the second branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Learned local-maxima attention from the shared encoder.
    Iam,
    /// Constant `1 / (h w)` map: a plain second branch.
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub side: usize,
    pub in_channels: usize,
    /// Channel widths of the three resolution levels.
    pub widths: [usize; 3],
    /// Attention window size (odd).
    pub k: usize,
    pub n_ids: usize,
    pub attention: AttentionKind,
    /// Whether the geometric features branch exists at all.
    pub gfb: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            side: 64,
            in_channels: 3,
            widths: [16, 32, 64],
            k: 3,
            n_ids: 2,
            attention: AttentionKind::Iam,
            gfb: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.side % 8 != 0 {
            return Err(Error::invalid("ModelConfig", format!("side {} is not a positive multiple of 8", self.side)));
        }
        if self.k % 2 == 0 {
            return Err(Error::invalid("ModelConfig", format!("attention window {} must be odd", self.k)));
        }
        if self.n_ids < 2 {
            return Err(Error::invalid("ModelConfig", format!("need at least two identities, got {}", self.n_ids)));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::invalid("ModelConfig", "channel widths must be positive"));
        }
        Ok(())
    }

    /// Side of the attention map and of the stage-1 features.
    pub fn grid(&self) -> usize {
        self.side / 8
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: BufferId,
    stride: usize,
}

/// Accumulates the batch-norm statistics produced during one forward pass.
struct Pass<'a> {
    tape: &'a mut Tape,
    bound: &'a Bound,
    store: &'a ParamStore,
    train: bool,
    stats: Vec<(BufferId, BatchStats)>,
}

impl Pass<'_> {
    fn batch_norm(&mut self, x: Var, gamma: ParamId, beta: Option<ParamId>, buf: BufferId) -> Result<Var> {
        let mode = if self.train {
            BnMode::Train
        } else {
            BnMode::Eval(self.store.buffer(buf))
        };
        let g = Some(self.bound.var(gamma));
        let b = beta.map(|b| self.bound.var(b));
        let (y, stats) = self.tape.batch_norm(x, g, b, mode)?;
        if let Some(s) = stats {
            self.stats.push((buf, s));
        }
        Ok(y)
    }

    fn block(&mut self, b: &ConvBlock, x: Var) -> Result<Var> {
        let y = self.tape.conv2d(x, self.bound.var(b.weight), None, b.stride, 1)?;
        let y = self.batch_norm(y, b.gamma, Some(b.beta), b.stats)?;
        Ok(self.tape.relu(y))
    }

    fn stack(&mut self, blocks: &[ConvBlock], mut x: Var) -> Result<Var> {
        for b in blocks {
            x = self.block(b, x)?;
        }
        Ok(x)
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape.to_vec(), |_| dist.sample(&mut self.rng))
    }
}

fn add_stack(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    cin: usize,
    layers: &[(usize, usize)],
) -> Vec<ConvBlock> {
    let mut c = cin;
    layers
        .iter()
        .enumerate()
        .map(|(i, &(co, stride))| {
            let std = (2.0 / (c * 9) as f64).sqrt();
            let block = ConvBlock {
                weight: store.add(format!("{name}.{i}.conv"), init.normal(&[co, c, 3, 3], std), true),
                gamma: store.add(format!("{name}.{i}.bn.gamma"), Tensor::full([co], 1.0), false),
                beta: store.add(format!("{name}.{i}.bn.beta"), Tensor::zeros([co]), false),
                stats: store.add_buffer(format!("{name}.{i}.bn"), co),
                stride,
            };
            c = co;
            block
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Neck {
    gamma: ParamId,
    stats: BufferId,
    classifier: ParamId,
}

/// Tape handles for one branch after BNNeck.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    /// Pooled feature before batch norm (triplet view).
    pub feature: Var,
    /// Batch-normalized feature (classifier view).
    pub normalized: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct TrainForward {
    pub gb: BranchVars,
    pub gfb: Option<BranchVars>,
    /// Attention map `[B, h, w]` when the second branch is present.
    pub q: Option<Var>,
}

/// Inference embeddings of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingPair {
    pub f_gb: Tensor,
    pub f_gfb: Tensor,
    /// `f_gb` followed by `f_gfb`.
    pub concat: Tensor,
}

/// A P×K re-identification batch with an optional rotation batch.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `[B, C, side, side]`.
    pub images: Tensor,
    /// Dense identity index of each image.
    pub labels: Vec<usize>,
    pub rotation: Option<RotationBatch>,
}

#[derive(Clone, Debug)]
pub struct GeomAttnModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    gb_stage1: Vec<ConvBlock>,
    gb_stage2: Vec<ConvBlock>,
    attn_encoder: Vec<ConvBlock>,
    f_se: Vec<ConvBlock>,
    gfb_tail: Vec<ConvBlock>,
    neck_gb: Neck,
    neck_gfb: Option<Neck>,
    rot_weights: ParamId,
    rot_gamma: ParamId,
}

impl GeomAttnModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let [w1, w2, w3] = config.widths;
        let cin = config.in_channels;
        let gb_stage1 = add_stack(&mut store, &mut init, "gb_stage1", cin, &[(w1, 2), (w2, 2), (w2, 2)]);
        let gb_stage2 = add_stack(&mut store, &mut init, "gb_stage2", w2, &[(w3, 1), (w3, 1)]);
        let attn_encoder = add_stack(&mut store, &mut init, "attn_encoder", cin, &[(w1, 2), (w2, 2), (w2, 2)]);
        let f_se = add_stack(&mut store, &mut init, "f_se", w2, &[(w3, 2), (w3, 2)]);
        let gfb_tail = if config.gfb {
            add_stack(&mut store, &mut init, "gfb_tail", w2, &[(w3, 1), (w3, 1)])
        } else {
            Vec::new()
        };
        let neck = |store: &mut ParamStore, init: &mut Init, name: &str| Neck {
            gamma: store.add(format!("{name}.bnneck.gamma"), Tensor::full([w3], 1.0), false),
            stats: store.add_buffer(format!("{name}.bnneck"), w3),
            classifier: store.add(
                format!("{name}.id_head"),
                init.normal(&[config.n_ids, w3], (1.0 / w3 as f64).sqrt()),
                true,
            ),
        };
        let neck_gb = neck(&mut store, &mut init, "gb");
        let neck_gfb = config.gfb.then(|| neck(&mut store, &mut init, "gfb"));
        let rot_weights = store.add("rot_head.weights", init.normal(&[4, w3], (1.0 / w3 as f64).sqrt()), true);
        let rot_gamma = store.add(
            "rot_head.gamma_raw",
            Tensor::scalar(heads::softplus_inverse(GAMMA_INIT)),
            false,
        );
        Ok(Self {
            config,
            store,
            gb_stage1,
            gb_stage2,
            attn_encoder,
            f_se,
            gfb_tail,
            neck_gb,
            neck_gfb,
            rot_weights,
            rot_gamma,
        })
    }

    /// Parameters of the shared attention encoder.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.attn_encoder.iter().flat_map(|b| [b.weight, b.gamma, b.beta]).collect()
    }

    /// Parameters of the global branch backbone.
    pub fn backbone_params(&self) -> Vec<ParamId> {
        self.gb_stage1
            .iter()
            .chain(&self.gb_stage2)
            .flat_map(|b| [b.weight, b.gamma, b.beta])
            .collect()
    }

    pub fn embedding_dims(&self) -> (usize, usize) {
        let d = self.config.widths[2];
        (d, if self.config.gfb { d } else { 0 })
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.side;
        match shape {
            [_, c, h, w] if *c == self.config.in_channels && *h == s && *w == s => Ok(()),
            _ => Err(Error::shape(
                "GeomAttnModel",
                format!(
                    "images {:?} do not match [B, {}, {}, {}]",
                    shape, self.config.in_channels, s, s
                ),
            )),
        }
    }

    fn branch(&self, pass: &mut Pass<'_>, pooled: Var, neck: &Neck) -> Result<BranchVars> {
        let normalized = pass.batch_norm(pooled, neck.gamma, None, neck.stats)?;
        let logits = pass.tape.linear(normalized, pass.bound.var(neck.classifier))?;
        Ok(BranchVars {
            feature: pooled,
            normalized,
            logits,
        })
    }

    fn attention(&self, pass: &mut Pass<'_>, images: Var) -> Result<Var> {
        match self.config.attention {
            AttentionKind::Iam => {
                let l = pass.stack(&self.attn_encoder, images)?;
                Ok(pass.tape.iam(l, self.config.k)?.q)
            }
            AttentionKind::Uniform => {
                let n = pass.tape.shape(images)[0];
                let g = self.config.grid();
                Ok(pass.tape.constant(Tensor::full([n, g, g], 1.0 / (g * g) as f64)))
            }
        }
    }

    fn run(&self, pass: &mut Pass<'_>, images: Var) -> Result<TrainForward> {
        self.check_images(pass.tape.shape(images))?;
        let x1 = pass.stack(&self.gb_stage1, images)?;
        let x2 = pass.stack(&self.gb_stage2, x1)?;
        let pooled = pass.tape.global_avg_pool(x2)?;
        let gb = self.branch(pass, pooled, &self.neck_gb)?;
        let (gfb, q) = match &self.neck_gfb {
            Some(neck) => {
                let q = self.attention(pass, images)?;
                let weighted = pass.tape.spatial_mul(x1, q)?;
                let tail = pass.stack(&self.gfb_tail, weighted)?;
                let pooled = pass.tape.global_avg_pool(tail)?;
                (Some(self.branch(pass, pooled, neck)?), Some(q))
            }
            None => (None, None),
        };
        Ok(TrainForward { gb, gfb, q })
    }

    /// Training-mode forward pass of the re-identification branches. Batch
    /// statistics observed by every batch norm are returned for
    /// [`apply_batch_stats`](Self::apply_batch_stats).
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: Var,
    ) -> Result<(TrainForward, Vec<(BufferId, BatchStats)>)> {
        let mut pass = Pass {
            tape,
            bound,
            store: &self.store,
            train: true,
            stats: Vec::new(),
        };
        let out = self.run(&mut pass, images)?;
        Ok((out, pass.stats))
    }

    /// Rotation-class probabilities `[n, 4]` for `[n, C, side, side]` images.
    pub fn rotation_probs(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: Var,
        train: bool,
    ) -> Result<(Var, Vec<(BufferId, BatchStats)>)> {
        self.check_images(tape.shape(images))?;
        let mut pass = Pass {
            tape,
            bound,
            store: &self.store,
            train,
            stats: Vec::new(),
        };
        let l = pass.stack(&self.attn_encoder, images)?;
        let se = pass.stack(&self.f_se, l)?;
        let f_sl = pass.tape.global_avg_pool(se)?;
        let logits = heads::cosine_logits(
            pass.tape,
            f_sl,
            bound.var(self.rot_weights),
            bound.var(self.rot_gamma),
        )?;
        let probs = pass.tape.softmax(logits, 1)?;
        Ok((probs, pass.stats))
    }

    pub fn apply_batch_stats(&mut self, stats: &[(BufferId, BatchStats)]) {
        for (id, s) in stats {
            self.store.update_buffer(*id, s);
        }
    }

    /// Builds the weighted objective on `tape`. Terms with zero weight are not
    /// evaluated and report 0.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &TrainBatch,
        weights: &LossWeights,
    ) -> Result<LossGraph> {
        weights.validate()?;
        let images = tape.constant(batch.images.clone());
        let (fwd, mut stats) = self.forward_train(tape, bound, images)?;
        let mut terms: Vec<(&'static str, f64, Var)> = Vec::new();
        let mut report = LossReport::default();
        let eps = weights.smoothing_eps;
        if weights.tri_gb > 0.0 {
            let (l, s) = tape.batch_hard_triplet(fwd.gb.feature, &batch.labels, weights.margin)?;
            report.active_triplets_gb = s.active;
            terms.push(("l_tri_gb", weights.tri_gb, l));
        }
        if weights.sce_gb > 0.0 {
            let l = heads::smoothed_cross_entropy_var(tape, fwd.gb.logits, &batch.labels, eps)?;
            terms.push(("l_sce_gb", weights.sce_gb, l));
        }
        if let Some(gfb) = fwd.gfb {
            if weights.tri_gfb > 0.0 {
                let (l, s) = tape.batch_hard_triplet(gfb.feature, &batch.labels, weights.margin)?;
                report.active_triplets_gfb = s.active;
                terms.push(("l_tri_gfb", weights.tri_gfb, l));
            }
            if weights.sce_gfb > 0.0 {
                let l = heads::smoothed_cross_entropy_var(tape, gfb.logits, &batch.labels, eps)?;
                terms.push(("l_sce_gfb", weights.sce_gfb, l));
            }
        }
        if weights.slb > 0.0 {
            let rot = batch.rotation.as_ref().ok_or_else(|| {
                Error::invalid("train_step", "rotation weight is positive but the batch has no rotation samples")
            })?;
            let rimg = tape.constant(rot.images.clone());
            let (probs, s) = self.rotation_probs(tape, bound, rimg, true)?;
            stats.extend(s);
            let l = tape.cross_entropy(probs, &rot.classes)?;
            terms.push(("l_slb", weights.slb, l));
        }
        for &(name, _, v) in &terms {
            let x = tape.value(v).item();
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("loss term {name} = {x}"),
                });
            }
            match name {
                "l_tri_gb" => report.terms.tri_gb = x,
                "l_sce_gb" => report.terms.sce_gb = x,
                "l_tri_gfb" => report.terms.tri_gfb = x,
                "l_sce_gfb" => report.terms.sce_gfb = x,
                _ => report.terms.slb = x,
            }
        }
        let mut total: Option<Var> = None;
        for &(_, w, v) in &terms {
            let scaled = tape.scale(v, w);
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
        let total = match total {
            Some(t) => t,
            None => tape.constant(Tensor::scalar(0.0)),
        };
        report.total = tape.value(total).item();
        Ok(LossGraph {
            total,
            report,
            stats,
            forward: fwd,
        })
    }

    /// One optimization step on the weighted objective.
    pub fn train_step(
        &mut self,
        batch: &TrainBatch,
        optimizer: &mut Adam,
        weights: &LossWeights,
        lr: f64,
    ) -> Result<LossReport> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let graph = self.loss_graph(&mut tape, &bound, batch, weights)?;
        let grads = if tape.requires_grad(graph.total) {
            let mut g = tape.backward(graph.total)?;
            bound.collect(&mut g, &self.store)
        } else {
            self.store
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        optimizer.apply(&mut self.store, &grads, lr);
        self.apply_batch_stats(&graph.stats);
        Ok(graph.report)
    }

    /// Evaluation-mode embeddings of `[B, C, side, side]` images.
    pub fn forward_infer(&self, images: &Tensor) -> Result<Vec<EmbeddingPair>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let mut pass = Pass {
            tape: &mut tape,
            bound: &bound,
            store: &self.store,
            train: false,
            stats: Vec::new(),
        };
        let out = self.run(&mut pass, x)?;
        let gb = tape.value(out.gb.normalized).unstack();
        let gfb = out.gfb.map(|b| tape.value(b.normalized).unstack());
        Ok(gb
            .into_iter()
            .enumerate()
            .map(|(i, f_gb)| {
                let f_gfb = gfb.as_ref().map_or_else(|| Tensor::zeros([0]), |g| g[i].clone());
                let concat: Vec<f64> = f_gb.data().iter().chain(f_gfb.data()).copied().collect();
                let n = concat.len();
                EmbeddingPair {
                    f_gb,
                    f_gfb,
                    concat: Tensor::new([n], concat).unwrap(),
                }
            })
            .collect())
    }

    /// Embeds many `[C, side, side]` images in chunks.
    pub fn embed_all(&self, images: &[Tensor], chunk: usize) -> Result<Vec<EmbeddingPair>> {
        let mut out = Vec::with_capacity(images.len());
        for part in images.chunks(chunk.max(1)) {
            out.extend(self.forward_infer(&Tensor::stack(part)?)?);
        }
        Ok(out)
    }

    /// Evaluation-mode attention maps of one `[C, side, side]` image.
    pub fn attention_maps(&self, image: &Tensor) -> Result<AttentionMaps> {
        let batch = image.clone().reshape([1, image.shape().first().copied().unwrap_or(0), self.config.side, self.config.side])
            .map_err(|_| Error::shape("attention_maps", format!("image {:?} is not [C, {s}, {s}]", image.shape(), s = self.config.side)))?;
        self.check_images(batch.shape())?;
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(batch);
        let mut pass = Pass {
            tape: &mut tape,
            bound: &bound,
            store: &self.store,
            train: false,
            stats: Vec::new(),
        };
        let l = pass.stack(&self.attn_encoder, x)?;
        let l = tape.value(l).unstack().remove(0);
        match self.config.attention {
            AttentionKind::Iam => crate::iam::iam_forward(&l, self.config.k),
            AttentionKind::Uniform => {
                let g = self.config.grid();
                let mut maps = crate::iam::iam_forward(&l, self.config.k)?;
                maps.q = Tensor::full([g, g], 1.0 / (g * g) as f64);
                Ok(maps)
            }
        }
    }

    /// Evaluation-mode rotation probabilities `[n, 4]`.
    pub fn predict_rotation(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let (p, _) = self.rotation_probs(&mut tape, &bound, x, false)?;
        Ok(tape.value(p).clone())
    }
}

/// The objective recorded on a tape, with its forward handles.
pub struct LossGraph {
    pub total: Var,
    pub report: LossReport,
    pub stats: Vec<(BufferId, BatchStats)>,
    pub forward: TrainForward,
}

/// Component-wise check that a report holds only finite values.
pub fn report_is_finite(r: &LossReport) -> bool {
    let LossTerms {
        tri_gb,
        sce_gb,
        tri_gfb,
        sce_gfb,
        slb,
    } = r.terms;
    [tri_gb, sce_gb, tri_gfb, sce_gfb, slb, r.total].iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(side: usize) -> ModelConfig {
        ModelConfig {
            side,
            widths: [4, 6, 8],
            n_ids: 3,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn stage_shapes_follow_strides() {
        let m = GeomAttnModel::new(small(32)).unwrap();
        let mut tape = Tape::new();
        let bound = m.store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn([2, 3, 32, 32], |i| (i as f64 * 0.37).sin()));
        let (out, stats) = m.forward_train(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(out.q.unwrap()), &[2, 4, 4]);
        assert_eq!(tape.shape(out.gb.feature), &[2, 8]);
        assert_eq!(tape.shape(out.gfb.unwrap().logits), &[2, 3]);
        assert!(!stats.is_empty());
    }

    #[test]
    fn rejects_wrong_image_size() {
        let m = GeomAttnModel::new(small(32)).unwrap();
        let err = m.forward_infer(&Tensor::zeros([1, 3, 64, 64])).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 64, 64]") && err.contains("32"), "{err}");
        assert!(GeomAttnModel::new(small(36)).is_err());
    }

    #[test]
    fn infer_is_pure_and_deterministic() {
        let m = GeomAttnModel::new(small(32)).unwrap();
        let x = Tensor::from_fn([2, 3, 32, 32], |i| (i as f64 * 0.11).cos());
        let before = m.store.fingerprint();
        let a = m.forward_infer(&x).unwrap();
        let b = m.forward_infer(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.store.fingerprint(), before);
        assert_eq!(a[0].concat.len(), 16);
        assert_eq!(&a[0].concat.data()[..8], a[0].f_gb.data());
        assert_eq!(&a[0].concat.data()[8..], a[0].f_gfb.data());
    }

    #[test]
    fn gb_only_model_has_no_second_branch() {
        let m = GeomAttnModel::new(ModelConfig {
            gfb: false,
            attention: AttentionKind::Uniform,
            ..small(32)
        })
        .unwrap();
        let e = m.forward_infer(&Tensor::full([1, 3, 32, 32], 0.5)).unwrap();
        assert_eq!(e[0].f_gfb.len(), 0);
        assert_eq!(e[0].concat, e[0].f_gb);
    }
}
