use geomattn::config::{Preset, RunConfig};
use geomattn::data::{synthesize, SynthConfig};
use geomattn::eval::{chance_ap, evaluate, Meta};
use geomattn::heads::LossWeights;
use geomattn::model::{GeomAttnModel, ModelConfig, TrainBatch};
use geomattn::params::{Adam, AdamConfig};
use geomattn::pipeline::{evaluate_model, train, Dataset, TrainEvent};
use geomattn::selfsup::{make_rotation_batch, RotationBatch};
use geomattn::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_model() -> GeomAttnModel {
    GeomAttnModel::new(ModelConfig {
        side: 32,
        widths: [4, 6, 8],
        n_ids: 2,
        seed: 1,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn small_batch(seed: u64) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn([3, 32, 32], |_| rng.gen())).collect();
    TrainBatch {
        images: Tensor::stack(&images).unwrap(),
        labels: vec![0, 0, 1, 1],
        rotation: Some(RotationBatch::from_samples(&make_rotation_batch(&images, seed).unwrap()).unwrap()),
    }
}

fn no_decay(model: &GeomAttnModel) -> Adam {
    Adam::new(
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        },
        &model.store,
    )
}

fn slb_only() -> LossWeights {
    LossWeights {
        slb: 1.0,
        ..LossWeights::zero()
    }
}

#[test]
fn rotation_loss_reaches_the_encoder_but_not_the_backbone() {
    let model = small_model();
    let batch = small_batch(2);
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let g = model.loss_graph(&mut tape, &bound, &batch, &slb_only()).unwrap();
    let mut grads = tape.backward(g.total).unwrap();
    let grads = bound.collect(&mut grads, &model.store);
    let norm = |ids: Vec<geomattn::params::ParamId>| ids.iter().map(|id| grads[model.store.ids().position(|x| x == *id).unwrap()].data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
    assert!(norm(model.encoder_params()) > 0.0);
    assert_eq!(norm(model.backbone_params()), 0.0);
}

#[test]
fn rotation_step_changes_the_attention_map() {
    let mut model = small_model();
    let image = small_batch(3).images.unstack().remove(0);
    let before = model.attention_maps(&image).unwrap().q;
    let backbone: Vec<Tensor> = model.backbone_params().iter().map(|&id| model.store.get(id).clone()).collect();
    let mut opt = no_decay(&model);
    model.train_step(&small_batch(2), &mut opt, &slb_only(), 1e-2).unwrap();
    let after = model.attention_maps(&image).unwrap().q;
    assert!(before.max_abs_diff(&after) > 0.0);
    for (&id, old) in model.backbone_params().iter().zip(&backbone) {
        assert_eq!(model.store.get(id), old, "{}", model.store.param(id).name);
    }
}

#[test]
fn zero_weights_leave_parameters_bit_exact() {
    let mut model = small_model();
    let before: Vec<Tensor> = model.store.params().iter().map(|p| p.value.clone()).collect();
    let mut opt = no_decay(&model);
    let report = model.train_step(&small_batch(4), &mut opt, &LossWeights::zero(), 1e-2).unwrap();
    assert_eq!(report.total, 0.0);
    for (p, old) in model.store.params().iter().zip(&before) {
        assert_eq!(&p.value, old, "{}", p.name);
    }
}

#[test]
fn zero_rotation_weight_freezes_the_rotation_head() {
    let mut model = small_model();
    let id = model.store.id("rot_head.weights").unwrap();
    let before = model.store.get(id).clone();
    let w = LossWeights {
        slb: 0.0,
        ..LossWeights::default()
    };
    let mut opt = no_decay(&model);
    let report = model.train_step(&small_batch(5), &mut opt, &w, 1e-2).unwrap();
    assert_eq!(report.terms.slb, 0.0);
    assert_eq!(model.store.get(id), &before);
}

#[test]
fn one_step_is_reproducible() {
    let run = || {
        let mut model = small_model();
        let mut opt = Adam::new(AdamConfig::default(), &model.store);
        let r = model.train_step(&small_batch(6), &mut opt, &LossWeights::default(), 1e-3).unwrap();
        (r.total.to_bits(), model.store.fingerprint())
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_names_the_term() {
    let mut model = small_model();
    let id = model.store.id("gb.id_head").unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let mut opt = no_decay(&model);
    let before = model.store.fingerprint();
    let err = model.train_step(&small_batch(7), &mut opt, &LossWeights::default(), 1e-3).unwrap_err();
    assert!(err.to_string().contains("loss term l_sce_gb"), "{err}");
    assert_eq!(model.store.fingerprint(), before);
}

#[test]
fn nan_pixels_abort_the_step() {
    let mut model = small_model();
    let mut batch = small_batch(7);
    batch.images.data_mut()[0] = f64::NAN;
    let mut opt = no_decay(&model);
    let before = model.store.fingerprint();
    let err = model.train_step(&batch, &mut opt, &LossWeights::default(), 1e-3).unwrap_err();
    assert!(err.to_string().contains("NaN"), "{err}");
    assert_eq!(model.store.fingerprint(), before);
}

#[test]
fn toy_loss_decreases() {
    let data = Dataset::from_items(synthesize(&SynthConfig::new(2, 8, 1)).unwrap()).unwrap();
    let cfg = RunConfig {
        p: 2,
        lr: 1e-3,
        epochs: 100,
        max_steps: 50,
        widths: [8, 16, 32],
        ..RunConfig::default()
    };
    let mut losses = Vec::new();
    train(&cfg, &data, |e| {
        if let TrainEvent::Step { report, .. } = e {
            losses.push(report.total);
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(losses.len(), 50);
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let smoothed: Vec<f64> = losses.chunks(10).map(window).collect();
    assert!(smoothed.windows(2).all(|w| w[1] < w[0]), "{smoothed:?}");
}

#[test]
fn presets_reach_each_branch_configuration() {
    let w = |p: Preset| RunConfig { preset: p, ..RunConfig::default() }.effective_weights();
    assert_eq!(w(Preset::GbGfb).slb, 0.0);
    assert_eq!(w(Preset::GbR18).slb, 0.0);
    assert_eq!(w(Preset::Gb).tri_gfb + w(Preset::Gb).sce_gfb + w(Preset::Gb).slb, 0.0);
    assert!(w(Preset::Full).slb > 0.0);
    let m = |p: Preset| RunConfig { preset: p, ..RunConfig::default() }.model_config(2);
    assert_eq!(m(Preset::GbR18).attention, geomattn::model::AttentionKind::Uniform);
    assert_eq!(m(Preset::Full).attention, geomattn::model::AttentionKind::Iam);
    assert!(!m(Preset::Gb).gfb);
}

#[test]
fn raw_pixels_separate_identities_above_chance() {
    let items = synthesize(&SynthConfig {
        train_ids: 10,
        test_ids: 0,
        per_id: 12,
        side: 48,
        seed: 9,
    })
    .unwrap();
    let mut centroids = vec![vec![0.0; 3 * 48 * 48]; 10];
    let mut probes = Vec::new();
    for (j, (raster, rec)) in items.iter().enumerate() {
        let t = raster.to_tensor();
        if j % 12 < 8 {
            centroids[rec.identity].iter_mut().zip(t.data()).for_each(|(c, v)| *c += v / 8.0);
        } else {
            probes.push((rec.identity, t));
        }
    }
    let correct = probes
        .iter()
        .filter(|(id, t)| {
            let d = |c: &Vec<f64>| c.iter().zip(t.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (0..10).min_by(|&a, &b| d(&centroids[a]).total_cmp(&d(&centroids[b]))) == Some(*id)
        })
        .count();
    let accuracy = correct as f64 / probes.len() as f64;
    assert!(accuracy > 2.0 * 0.1, "nearest-centroid accuracy {accuracy}");
}

/// Mean chance AP over the queries of a split, from its composition.
fn split_chance(queries: &[Meta], gallery: &[Meta]) -> f64 {
    let aps: Vec<f64> = queries
        .iter()
        .filter_map(|q| {
            let kept: Vec<&Meta> = gallery.iter().filter(|g| !(g.identity == q.identity && g.camera == q.camera)).collect();
            let r = kept.iter().filter(|g| g.identity == q.identity).count();
            (r > 0).then(|| chance_ap(kept.len(), r))
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}

#[test]
fn random_embeddings_score_chance_level() {
    let data = Dataset::from_items(synthesize(&SynthConfig::new(8, 10, 2)).unwrap()).unwrap();
    let q: Vec<Meta> = data.indices(geomattn::data::Split::Query).iter().map(|&i| data.meta(i)).collect();
    let g: Vec<Meta> = data.indices(geomattn::data::Split::Gallery).iter().map(|&i| data.meta(i)).collect();
    let chance = split_chance(&q, &g);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = 300;
    let mut total = 0.0;
    for _ in 0..draws {
        let qe = Tensor::from_fn([q.len(), 16], |_| rng.gen::<f64>() - 0.5);
        let ge = Tensor::from_fn([g.len(), 16], |_| rng.gen::<f64>() - 0.5);
        total += evaluate(&qe, &ge, &q, &g).unwrap().imap;
    }
    let mean = total / draws as f64;
    assert!((mean - chance).abs() < 0.02, "{mean} vs {chance}");
}

#[test]
fn untrained_model_is_near_chance() {
    let data = Dataset::from_items(synthesize(&SynthConfig::new(8, 10, 2)).unwrap()).unwrap();
    let q: Vec<Meta> = data.indices(geomattn::data::Split::Query).iter().map(|&i| data.meta(i)).collect();
    let g: Vec<Meta> = data.indices(geomattn::data::Split::Gallery).iter().map(|&i| data.meta(i)).collect();
    let chance = split_chance(&q, &g);
    let cfg = RunConfig::default();
    let model = GeomAttnModel::new(cfg.model_config(8)).unwrap();
    let m = evaluate_model(&model, &data).unwrap();
    assert!(m.imap > 0.5 * chance && m.imap < 0.5 + chance, "{} vs chance {chance}", m.imap);
}
