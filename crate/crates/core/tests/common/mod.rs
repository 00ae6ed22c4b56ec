//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grads;

use geomattn::eval::Meta;
use geomattn::Tensor;
use rand::Rng;

/// Attention map by direct loops: plain exponentials, explicit window sums.
pub fn naive_iam(l: &Tensor, k: usize) -> Vec<f64> {
    let (c, h, w) = (l.shape()[0], l.shape()[1], l.shape()[2]);
    let r = (k / 2) as isize;
    let at = |t: usize, u: usize, v: usize| l.data()[(t * h + u) * w + v];
    let mut qt = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut cmax = 0.0f64;
            for t in 0..c {
                cmax = cmax.max(at(t, u, v));
            }
            let mut best = 0.0f64;
            for t in 0..c {
                let mut denom = 0.0;
                for du in -r..=r {
                    for dv in -r..=r {
                        let (a, b) = (u as isize + du, v as isize + dv);
                        if a >= 0 && b >= 0 && (a as usize) < h && (b as usize) < w {
                            denom += at(t, a as usize, b as usize).exp();
                        }
                    }
                }
                let m = at(t, u, v).exp() / denom;
                let g = at(t, u, v) / (cmax + 1e-12);
                best = best.max(m * g);
            }
            qt[u * w + v] = best;
        }
    }
    let total: f64 = qt.iter().sum();
    if total < 1e-12 {
        return vec![1.0 / (h * w) as f64; h * w];
    }
    qt.iter().map(|x| x / total).collect()
}

pub fn random_nonneg(rng: &mut impl Rng, shape: [usize; 3], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        if rng.gen_bool(0.2) {
            0.0
        } else {
            rng.gen::<f64>() * scale
        }
    })
}

/// Position (1-based, junk skipped) of gallery `j` in the ranking of `sims`.
fn position(sims: &[f64], j: usize, skip: &[bool]) -> usize {
    1 + (0..sims.len())
        .filter(|&i| !skip[i] && (sims[i] > sims[j] || (sims[i] == sims[j] && i < j)))
        .count()
}

/// AP by counting, without sorting: for each relevant item, the share of
/// relevant items ranked at or above it.
pub fn brute_ap(sims: &[f64], q: Meta, gallery: &[Meta]) -> Option<f64> {
    let junk: Vec<bool> = gallery.iter().map(|g| g.identity == q.identity && g.camera == q.camera).collect();
    let rel: Vec<usize> = (0..gallery.len()).filter(|&j| !junk[j] && gallery[j].identity == q.identity).collect();
    if rel.is_empty() {
        return None;
    }
    let pos: Vec<usize> = rel.iter().map(|&j| position(sims, j, &junk)).collect();
    let sum: f64 = pos
        .iter()
        .map(|&p| pos.iter().filter(|&&o| o <= p).count() as f64 / p as f64)
        .sum();
    Some(sum / rel.len() as f64)
}

pub fn brute_imap(sim: &Tensor, queries: &[Meta], gallery: &[Meta]) -> f64 {
    let ng = gallery.len();
    let aps: Vec<f64> = queries
        .iter()
        .enumerate()
        .filter_map(|(i, &q)| brute_ap(&sim.data()[i * ng..(i + 1) * ng], q, gallery))
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

pub fn brute_cmc(sim: &Tensor, queries: &[Meta], gallery: &[Meta], k: usize) -> f64 {
    let ng = gallery.len();
    let (mut hits, mut valid) = (0, 0);
    for (i, &q) in queries.iter().enumerate() {
        let sims = &sim.data()[i * ng..(i + 1) * ng];
        let junk: Vec<bool> = gallery.iter().map(|g| g.identity == q.identity && g.camera == q.camera).collect();
        let rel: Vec<usize> = (0..ng).filter(|&j| !junk[j] && gallery[j].identity == q.identity).collect();
        if rel.is_empty() {
            continue;
        }
        valid += 1;
        if rel.iter().any(|&j| position(sims, j, &junk) <= k) {
            hits += 1;
        }
    }
    if valid == 0 {
        0.0
    } else {
        hits as f64 / valid as f64
    }
}

/// Track-level mAP: each distinct track id becomes one gallery item scored by
/// its best member, in ascending track-id order.
pub fn brute_tmap(sim: &Tensor, queries: &[Meta], gallery: &[Meta]) -> f64 {
    let ng = gallery.len();
    let mut ids: Vec<usize> = gallery.iter().map(|g| g.track).collect();
    ids.sort_unstable();
    ids.dedup();
    let metas: Vec<Meta> = ids
        .iter()
        .map(|&t| *gallery.iter().find(|g| g.track == t).unwrap())
        .collect();
    let collapsed = Tensor::from_fn([queries.len(), ids.len()], |k| {
        let (i, t) = (k / ids.len(), ids[k % ids.len()]);
        (0..ng)
            .filter(|&j| gallery[j].track == t)
            .map(|j| sim.data()[i * ng + j])
            .fold(f64::NEG_INFINITY, f64::max)
    });
    brute_imap(&collapsed, queries, &metas)
}

/// A random retrieval instance with quantized similarities, so ties occur.
pub fn random_instance(rng: &mut impl Rng, singleton_tracks: bool) -> (Tensor, Vec<Meta>, Vec<Meta>) {
    let nq = rng.gen_range(1..=10);
    let ng = rng.gen_range(1..=20);
    let ids = rng.gen_range(1..=5);
    let cams = rng.gen_range(1..=3);
    let queries: Vec<Meta> = (0..nq)
        .map(|_| Meta::new(rng.gen_range(0..ids), rng.gen_range(0..cams), 0))
        .collect();
    let gallery: Vec<Meta> = (0..ng)
        .map(|j| {
            let id = rng.gen_range(0..ids);
            let cam = rng.gen_range(0..cams);
            let track = if singleton_tracks { j } else { id * 10 + cam * 2 + rng.gen_range(0..2) };
            Meta::new(id, cam, track)
        })
        .collect();
    let levels = rng.gen_range(3..40) as f64;
    let sim = Tensor::from_fn([nq, ng], |_| (rng.gen::<f64>() * levels).floor() / levels * 2.0 - 1.0);
    (sim, queries, gallery)
}
