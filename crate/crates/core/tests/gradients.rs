mod common;

use common::grads::{micro_setup, model_loss, model_report, op_reports};
use geomattn::heads::LossWeights;
use geomattn::Tape;

#[test]
fn every_op_matches_central_differences() {
    for (name, r) in op_reports() {
        assert!(r.max_rel_error < 1e-4, "{name}: {r:?}");
        assert!(r.checked > 0, "{name}: every coordinate was skipped");
    }
}

#[test]
fn full_objective_matches_central_differences() {
    let r = model_report(&LossWeights::default(), 4);
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.checked > 50, "{r:?}");
}

#[test]
fn each_term_alone_matches_central_differences() {
    for i in 0..5 {
        let mut w = LossWeights::zero();
        match i {
            0 => w.tri_gb = 1.0,
            1 => w.sce_gb = 1.0,
            2 => w.tri_gfb = 1.0,
            3 => w.sce_gfb = 1.0,
            _ => w.slb = 1.0,
        }
        let r = model_report(&w, 2);
        assert!(r.max_rel_error < 1e-4, "term {i}: {r:?}");
    }
}

#[test]
fn weighted_total_is_sum_of_terms() {
    let (model, batch) = micro_setup();
    let w = LossWeights::default();
    let mut tape = Tape::new();
    let bound = model.store.bind_frozen(&mut tape);
    let g = model.loss_graph(&mut tape, &bound, &batch, &w).unwrap();
    let t = g.report.terms;
    let expected = w.tri_gb * t.tri_gb + w.sce_gb * t.sce_gb + w.tri_gfb * t.tri_gfb + w.sce_gfb * t.sce_gfb + w.slb * t.slb;
    assert!((g.report.total - expected).abs() < 1e-12);
    assert_eq!(model_loss(&model, &batch, &w).unwrap(), g.report.total);
}
