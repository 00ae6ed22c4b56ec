//! Finite-difference checks for every tape operation and for the full objective.

use geomattn::gradcheck::{check_gradients_with, compare_with_numeric, GradCheckOptions, GradCheckReport};
use geomattn::heads::{cosine_logits, smoothed_cross_entropy_var, LossWeights};
use geomattn::model::{GeomAttnModel, ModelConfig, TrainBatch};
use geomattn::ops::norm::{BnMode, RunningStats};
use geomattn::selfsup::{make_rotation_batch, RotationBatch};
use geomattn::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

fn opts() -> GradCheckOptions {
    GradCheckOptions {
        step: STEP,
        skip_kinks: true,
        ..GradCheckOptions::default()
    }
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for checks through ReLU-like kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar `Σ out ⊙ R` with a fixed random `R`, so every output coordinate matters.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.constant(rand_t(&mut rng, t.shape(y), -1.0, 1.0));
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

fn check(f: impl Fn(&mut Tape, Var) -> Result<Var>, point: &Tensor) -> GradCheckReport {
    check_gradients_with(
        |t: &mut Tape, x: Var| {
            let y = f(t, x)?;
            project(t, y, 99)
        },
        point,
        &opts(),
    )
    .unwrap()
}

/// One report per operation (and per differentiable input).
pub fn op_reports() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();
    let a = rand_t(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_t(&mut rng, &[3, 4], -1.0, 1.0);

    out.push(("add", check(|t, x| { let c = t.constant(b.clone()); t.add(x, c) }, &a)));
    out.push(("sub", check(|t, x| { let c = t.constant(b.clone()); t.sub(c, x) }, &a)));
    out.push(("mul", check(|t, x| { let c = t.constant(b.clone()); t.mul(x, c) }, &a)));
    out.push(("mul self", check(|t, x| t.mul(x, x), &a)));
    out.push(("scale", check(|t, x| Ok(t.scale(x, -2.5)), &a)));
    out.push(("mul_scalar tensor", check(|t, x| { let s = t.constant(Tensor::scalar(1.7)); t.mul_scalar(x, s) }, &a)));
    out.push(("mul_scalar scalar", check(|t, s| { let c = t.constant(b.clone()); t.mul_scalar(c, s) }, &Tensor::scalar(0.6))));
    out.push(("softplus", check(|t, x| Ok(t.softplus(x)), &rand_t(&mut rng, &[5], -30.0, 30.0))));
    out.push(("relu", check(|t, x| Ok(t.relu(x)), &away_from_zero(&mut rng, &[3, 4]))));
    out.push(("reshape", check(|t, x| t.reshape(x, vec![2, 6]), &a)));
    out.push(("sum", check(|t, x| Ok(t.sum(x)), &a)));
    out.push(("mean", check(|t, x| Ok(t.mean(x)), &a)));
    let c2 = rand_t(&mut rng, &[3, 2], -1.0, 1.0);
    out.push(("concat", check(|t, x| { let c = t.constant(c2.clone()); t.concat(&[c, x, x]) }, &a)));

    let w = rand_t(&mut rng, &[5, 4], -1.0, 1.0);
    out.push(("matmul lhs", check(|t, x| { let c = t.constant(w.clone()); let ct = t.transpose(c)?; t.matmul(x, ct) }, &a)));
    out.push(("matmul rhs", check(|t, x| { let c = t.constant(a.clone()); t.matmul(c, x) }, &rand_t(&mut rng, &[4, 2], -1.0, 1.0))));
    out.push(("transpose", check(|t, x| t.transpose(x), &a)));
    out.push(("linear input", check(|t, x| { let c = t.constant(w.clone()); t.linear(x, c) }, &a)));
    out.push(("linear weight", check(|t, x| { let c = t.constant(a.clone()); t.linear(c, x) }, &w)));

    let img = rand_t(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let ker = rand_t(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let bias = rand_t(&mut rng, &[3], -1.0, 1.0);
    for stride in [1, 2] {
        let name = if stride == 1 { "conv2d input" } else { "conv2d input stride 2" };
        out.push((name, check(|t, x| { let k = t.constant(ker.clone()); let b = t.constant(bias.clone()); t.conv2d(x, k, Some(b), stride, 1) }, &img)));
    }
    out.push(("conv2d kernel", check(|t, k| { let x = t.constant(img.clone()); t.conv2d(x, k, None, 2, 1) }, &ker)));
    out.push(("conv2d bias", check(|t, b| { let x = t.constant(img.clone()); let k = t.constant(ker.clone()); t.conv2d(x, k, Some(b), 1, 1) }, &bias)));
    out.push(("global_avg_pool", check(|t, x| t.global_avg_pool(x), &img)));
    out.push(("rotate90", check(|t, x| t.rotate90(x, 3), &rand_t(&mut rng, &[2, 3, 3], -1.0, 1.0))));
    let q = rand_t(&mut rng, &[2, 5, 5], 0.0, 1.0);
    out.push(("spatial_mul features", check(|t, x| { let c = t.constant(q.clone()); t.spatial_mul(x, c) }, &img)));
    out.push(("spatial_mul map", check(|t, m| { let c = t.constant(img.clone()); t.spatial_mul(c, m) }, &q)));

    out.push(("softmax", check(|t, x| t.softmax(x, 1), &a)));
    out.push(("log_softmax", check(|t, x| t.log_softmax(x, 1), &a)));
    out.push(("l2_normalize", check(|t, x| t.l2_normalize(x, 1), &a)));
    let gamma = rand_t(&mut rng, &[2], 0.5, 1.5);
    let beta = rand_t(&mut rng, &[2], -0.5, 0.5);
    out.push(("batch_norm train input", check(|t, x| { let g = t.constant(gamma.clone()); let be = t.constant(beta.clone()); Ok(t.batch_norm(x, Some(g), Some(be), BnMode::Train)?.0) }, &img)));
    out.push(("batch_norm train gamma", check(|t, g| { let x = t.constant(img.clone()); Ok(t.batch_norm(x, Some(g), None, BnMode::Train)?.0) }, &gamma)));
    out.push(("batch_norm train beta", check(|t, be| { let x = t.constant(img.clone()); Ok(t.batch_norm(x, None, Some(be), BnMode::Train)?.0) }, &beta)));
    let running = RunningStats { mean: vec![0.2, -0.1], var: vec![0.5, 2.0] };
    out.push(("batch_norm eval input", check(|t, x| { let g = t.constant(gamma.clone()); Ok(t.batch_norm(x, Some(g), None, BnMode::Eval(&running))?.0) }, &img)));
    out.push(("batch_norm 2d", check(|t, x| Ok(t.batch_norm(x, None, None, BnMode::Train)?.0), &a)));

    let targets = Tensor::from_fn([3, 4], |i| if i % 5 == 0 { 0.7 } else { 0.1 });
    out.push(("soft_target_cross_entropy", check(|t, x| t.soft_target_cross_entropy(x, targets.clone()), &a)));
    out.push(("cross_entropy", check(|t, x| t.cross_entropy(x, &[1, 3, 0]), &rand_t(&mut rng, &[3, 4], 0.1, 1.0))));
    out.push(("smoothed cross entropy", check(|t, x| smoothed_cross_entropy_var(t, x, &[2, 0, 1], 0.1), &a)));
    let emb = rand_t(&mut rng, &[6, 3], -1.0, 1.0);
    out.push(("batch_hard_triplet", check(|t, x| Ok(t.batch_hard_triplet(x, &[0, 0, 1, 1, 2, 2], 2.0)?.0), &emb)));
    let cw = rand_t(&mut rng, &[4, 3], -1.0, 1.0);
    out.push(("cosine_logits features", check(|t, x| { let w = t.constant(cw.clone()); let g = t.constant(Tensor::scalar(1.2)); cosine_logits(t, x, w, g) }, &emb)));
    out.push(("cosine_logits weights", check(|t, w| { let x = t.constant(emb.clone()); let g = t.constant(Tensor::scalar(1.2)); cosine_logits(t, x, w, g) }, &cw)));
    out.push(("cosine_logits gamma", check(|t, g| { let x = t.constant(emb.clone()); let w = t.constant(cw.clone()); cosine_logits(t, x, w, g) }, &Tensor::scalar(0.8))));

    let l = rand_t(&mut rng, &[2, 3, 5, 4], 0.1, 2.0);
    for k in [1, 3, 5] {
        out.push(("local_softmax", check(|t, x| t.local_softmax(x, k), &l)));
    }
    out.push(("channel_nms", check(|t, x| t.channel_nms(x), &l)));
    let m = rand_t(&mut rng, &[2, 3, 5, 4], 0.1, 1.0);
    out.push(("fuse_max m", check(|t, x| { let g = t.constant(m.clone()); t.fuse_max(x, g) }, &l)));
    out.push(("fuse_max g", check(|t, g| { let x = t.constant(l.clone()); t.fuse_max(x, g) }, &m)));
    out.push(("spatial_normalize", check(|t, x| Ok(t.spatial_normalize(x)?.0), &rand_t(&mut rng, &[2, 5, 4], 0.1, 1.0))));
    out.push(("iam", check(|t, x| Ok(t.iam(x, 3)?.q), &l)));
    out
}

/// A 32 × 32 micro-batch of 2 identities × 2 images with its rotation batch.
pub fn micro_setup() -> (GeomAttnModel, TrainBatch) {
    let cfg = ModelConfig {
        side: 32,
        widths: [4, 6, 8],
        n_ids: 2,
        seed: 5,
        ..ModelConfig::default()
    };
    let model = GeomAttnModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images: Vec<Tensor> = (0..4).map(|_| rand_t(&mut rng, &[3, 32, 32], 0.0, 1.0)).collect();
    let rotation = RotationBatch::from_samples(&make_rotation_batch(&images, 3).unwrap()).unwrap();
    let batch = TrainBatch {
        images: Tensor::stack(&images).unwrap(),
        labels: vec![0, 0, 1, 1],
        rotation: Some(rotation),
    };
    (model, batch)
}

pub fn model_loss(model: &GeomAttnModel, batch: &TrainBatch, w: &LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    Ok(model.loss_graph(&mut tape, &bound, batch, w)?.report.total)
}

/// Checks `per_param` coordinates of every parameter tensor of the full objective.
pub fn model_report(w: &LossWeights, per_param: usize) -> GradCheckReport {
    let (model, batch) = micro_setup();
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let graph = model.loss_graph(&mut tape, &bound, &batch, w).unwrap();
    let mut g = tape.backward(graph.total).unwrap();
    let grads = bound.collect(&mut g, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut report = GradCheckReport::default();
    for (id, analytic) in model.store.ids().zip(&grads) {
        let point = model.store.get(id).clone();
        let n = point.len();
        let coords: Vec<usize> = (0..per_param.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let eval = |p: &Tensor| {
            let mut m = model.clone();
            *m.store.get_mut(id) = p.clone();
            model_loss(&m, &batch, w)
        };
        let o = GradCheckOptions {
            coords: Some(coords),
            ..opts()
        };
        let r = compare_with_numeric(eval, &point, analytic, &o).unwrap();
        report.merge(&r);
    }
    report
}
