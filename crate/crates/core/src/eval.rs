//! Retrieval ranking and metrics.
//!
//! Gallery entries are ranked by descending cosine similarity, ties by
//! ascending gallery index. When camera ids are known, gallery entries showing
//! the query identity from the query's own camera are junk: they are removed
//! before positions are counted.
//!
//! ```
//! use geomattn::eval::{average_precision, rank, Meta};
//!
//! let gallery = [Meta::new(1, 0, 0), Meta::new(2, 0, 1), Meta::new(1, 1, 2)];
//! let r = rank(&[0.9, 0.5, 0.1], Meta::new(1, 5, 9), &gallery, true);
//! assert_eq!(r.order, vec![0, 1, 2]);
//! // relevant at positions 1 and 3
//! assert!((average_precision(&r).unwrap() - 5.0 / 6.0).abs() < 1e-15);
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identity, camera and track of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Meta {
    pub identity: usize,
    pub camera: usize,
    pub track: usize,
}

impl Meta {
    pub fn new(identity: usize, camera: usize, track: usize) -> Self {
        Self {
            identity,
            camera,
            track,
        }
    }
}

/// `cos(q_i, g_j)` for `[nq, d]` queries and `[ng, d]` gallery rows.
pub fn similarity_matrix(queries: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    let (&[nq, d], &[ng, d2]) = (queries.shape(), gallery.shape()) else {
        return Err(Error::shape(
            "similarity_matrix",
            format!("queries {:?} and gallery {:?} must be [n, d]", queries.shape(), gallery.shape()),
        ));
    };
    if d != d2 {
        return Err(Error::shape(
            "similarity_matrix",
            format!("queries {:?} vs gallery {:?}", queries.shape(), gallery.shape()),
        ));
    }
    let unit = |t: &Tensor, n: usize, what: &str| -> Result<Vec<Vec<f64>>> {
        (0..n)
            .map(|i| {
                let row = t.row(i);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(Error::invalid("similarity_matrix", format!("{what} row {i} has zero or non-finite norm")));
                }
                Ok(row.iter().map(|v| v / norm).collect())
            })
            .collect()
    };
    let (qu, gu) = (unit(queries, nq, "query")?, unit(gallery, ng, "gallery")?);
    Ok(Tensor::from_fn([nq, ng], |k| {
        let (a, b) = (&qu[k / ng], &gu[k % ng]);
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
    }))
}

/// One query's ranked gallery.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query: Meta,
    /// Gallery indices by descending similarity; a permutation.
    pub order: Vec<usize>,
    /// Indexed by gallery position: same identity and not junk.
    pub relevant: Vec<bool>,
    /// Indexed by gallery position.
    pub junk: Vec<bool>,
}

impl RankingResult {
    /// Relevance flags in rank order with junk removed.
    pub fn hits(&self) -> Vec<bool> {
        self.order
            .iter()
            .filter(|&&j| !self.junk[j])
            .map(|&j| self.relevant[j])
            .collect()
    }

    pub fn relevant_count(&self) -> usize {
        self.relevant.iter().filter(|&&r| r).count()
    }
}

/// Ranks gallery entries for one query from its similarity row.
pub fn rank(similarities: &[f64], query: Meta, gallery: &[Meta], mask_same_camera: bool) -> RankingResult {
    assert_eq!(similarities.len(), gallery.len());
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    let junk: Vec<bool> = gallery
        .iter()
        .map(|g| mask_same_camera && g.identity == query.identity && g.camera == query.camera)
        .collect();
    let relevant = gallery
        .iter()
        .zip(&junk)
        .map(|(g, &j)| !j && g.identity == query.identity)
        .collect();
    RankingResult {
        query,
        order,
        relevant,
        junk,
    }
}

/// Mean of precision at each relevant position; `None` without relevant items.
pub fn average_precision(r: &RankingResult) -> Option<f64> {
    ap_of_hits(&r.hits())
}

pub fn ap_of_hits(hits: &[bool]) -> Option<f64> {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (pos, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (pos + 1) as f64;
        }
    }
    (found > 0).then(|| sum / found as f64)
}

/// Whether a relevant item appears in the first `k` non-junk positions.
pub fn hit_at(r: &RankingResult, k: usize) -> bool {
    r.hits().iter().take(k).any(|&h| h)
}

/// Mean AP and the number of queries without any relevant item.
pub fn mean_ap(rankings: &[RankingResult]) -> (f64, usize) {
    let aps: Vec<f64> = rankings.iter().filter_map(average_precision).collect();
    let excluded = rankings.len() - aps.len();
    let mean = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    (mean, excluded)
}

/// CMC Top-k over queries that have at least one relevant item.
pub fn cmc(rankings: &[RankingResult], k: usize) -> f64 {
    let valid: Vec<&RankingResult> = rankings.iter().filter(|r| r.relevant_count() > 0).collect();
    if valid.is_empty() {
        return 0.0;
    }
    valid.iter().filter(|r| hit_at(r, k)).count() as f64 / valid.len() as f64
}

/// Gallery collapsed to tracks: one similarity row per query, one [`Meta`] per track.
pub fn collapse_tracks(sim: &Tensor, gallery: &[Meta]) -> (Tensor, Vec<Meta>) {
    let [nq, ng] = *sim.shape() else {
        panic!("similarity must be [nq, ng]");
    };
    assert_eq!(ng, gallery.len());
    let mut tracks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, g) in gallery.iter().enumerate() {
        tracks.entry(g.track).or_default().push(j);
    }
    let metas: Vec<Meta> = tracks.values().map(|m| gallery[m[0]]).collect();
    let members: Vec<&Vec<usize>> = tracks.values().collect();
    let nt = members.len();
    let collapsed = Tensor::from_fn([nq, nt], |k| {
        let (i, t) = (k / nt, k % nt);
        members[t]
            .iter()
            .map(|&j| sim.data()[i * ng + j])
            .fold(f64::NEG_INFINITY, f64::max)
    });
    (collapsed, metas)
}

pub fn rank_all(sim: &Tensor, queries: &[Meta], gallery: &[Meta], mask_same_camera: bool) -> Vec<RankingResult> {
    let ng = gallery.len();
    queries
        .iter()
        .enumerate()
        .map(|(i, &q)| rank(&sim.data()[i * ng..(i + 1) * ng], q, gallery, mask_same_camera))
        .collect()
}

/// Image-to-track mean AP: track score is the best member similarity.
pub fn tmap(sim: &Tensor, queries: &[Meta], gallery: &[Meta], mask_same_camera: bool) -> (f64, usize) {
    let (collapsed, metas) = collapse_tracks(sim, gallery);
    mean_ap(&rank_all(&collapsed, queries, &metas, mask_same_camera))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub imap: f64,
    pub tmap: f64,
    pub top1: f64,
    pub top5: f64,
    pub n_queries: usize,
    pub n_excluded: usize,
}

/// All metrics from a similarity matrix.
pub fn evaluate_similarity(sim: &Tensor, queries: &[Meta], gallery: &[Meta], mask_same_camera: bool) -> Metrics {
    let rankings = rank_all(sim, queries, gallery, mask_same_camera);
    let (imap, n_excluded) = mean_ap(&rankings);
    let (tmap, _) = tmap(sim, queries, gallery, mask_same_camera);
    Metrics {
        imap,
        tmap,
        top1: cmc(&rankings, 1),
        top5: cmc(&rankings, 5),
        n_queries: queries.len(),
        n_excluded,
    }
}

pub fn evaluate(q_emb: &Tensor, g_emb: &Tensor, queries: &[Meta], gallery: &[Meta]) -> Result<Metrics> {
    let sim = similarity_matrix(q_emb, g_emb)?;
    Ok(evaluate_similarity(&sim, queries, gallery, true))
}

/// `query\tap\trank_of_first_hit` lines for evaluated rankings.
pub fn per_query_tsv(rankings: &[RankingResult]) -> String {
    let mut out = String::from("query\tidentity\tcamera\tap\tfirst_hit\n");
    for (i, r) in rankings.iter().enumerate() {
        let hits = r.hits();
        let ap = ap_of_hits(&hits).map_or("NA".to_string(), |a| a.to_string());
        let first = hits.iter().position(|&h| h).map_or("NA".to_string(), |p| (p + 1).to_string());
        out.push_str(&format!("{i}\t{}\t{}\t{ap}\t{first}\n", r.query.identity, r.query.camera));
    }
    out
}

/// Expected AP of a uniformly random ranking of `n` items, `r` of them relevant.
pub fn chance_ap(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n);
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    let nf = n as f64;
    if n == 1 {
        return 1.0;
    }
    (h + (r as f64 - 1.0) / (nf - 1.0) * (nf - h)) / nf
}

/// Attention mass within Chebyshev distance `radius` of any landmark `(u, v)`.
pub fn attention_landmark_mass(q: &Tensor, landmarks: &[(usize, usize)], radius: usize) -> Result<f64> {
    let [h, w] = *q.shape() else {
        return Err(Error::shape("attention_landmark_mass", format!("expected [h,w], got {:?}", q.shape())));
    };
    if landmarks.is_empty() {
        return Err(Error::invalid("attention_landmark_mass", "no landmarks"));
    }
    let mut mask = vec![false; h * w];
    for &(lu, lv) in landmarks {
        for u in lu.saturating_sub(radius)..(lu + radius + 1).min(h) {
            for v in lv.saturating_sub(radius)..(lv + radius + 1).min(w) {
                mask[u * w + v] = true;
            }
        }
    }
    Ok(q.data().iter().zip(&mask).filter(|(_, &m)| m).map(|(x, _)| x).sum())
}

/// Fraction of cells within `radius` of any landmark: the mass a uniform map would get.
pub fn uniform_landmark_mass(h: usize, w: usize, landmarks: &[(usize, usize)], radius: usize) -> Result<f64> {
    attention_landmark_mass(&Tensor::full([h, w], 1.0 / (h * w) as f64), landmarks, radius)
}
