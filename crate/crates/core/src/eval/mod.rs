//! Evaluation protocols: top-k accuracy, per-object deltas, similar-pair
//! mining and test-time sweeps.

pub mod manifest;
pub mod report;
mod sweep;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use manifest::{ingest_dataset, load_manifest, meshes_from_manifest, queries_from_manifest, save_manifest, ManifestRecord};
pub use report::{emit_report, Report, ReportFormat};
pub use sweep::{strategy_label, sweep_multiview, sweep_viewpoints, SweepRow, SweepSummary, SweepTable, DEFAULT_TRIALS};

use crate::classify::{aggregate, classify_embedding, AggregationMethod, ClassifyError, PredictionRanking};
use crate::encoder::{cosine, load_image, EncoderError, EncoderHandle};
use crate::prototypes::{ClassificationSet, PrototypeError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query label {0:?} is not in the set")]
    UnknownLabel(String),
    #[error("reports cover different objects: {0}")]
    ObjectMismatch(String),
    #[error("need at least two prototypes to mine pairs, got {0}")]
    TooFewPrototypes(usize),
    #[error("invalid sweep: {0}")]
    InvalidSweep(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Image {
        path: String,
        #[source]
        source: EncoderError,
    },
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A query photograph on disk with its ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub image_path: PathBuf,
    pub true_object_id: String,
    pub condition_tag: String,
}

/// A decoded query image with its ground truth.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub query_ref: String,
    pub image: RgbImage,
    pub true_object_id: String,
    pub condition_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` when there were no queries.
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    /// Top-1 accuracy per true object.
    pub per_object: BTreeMap<String, f64>,
    pub per_object_queries: BTreeMap<String, usize>,
    pub n_queries: usize,
    pub set_id: String,
    pub method: AggregationMethod,
    pub config_digest: String,
}

/// Scores already-computed rankings against their labels.
pub fn report_from_rankings(
    rankings: &[(PredictionRanking, String)],
    set_id: &str,
    method: AggregationMethod,
    config_digest: &str,
) -> EvalReport {
    let n = rankings.len();
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut obj_hits: BTreeMap<String, usize> = BTreeMap::new();
    let mut obj_n: BTreeMap<String, usize> = BTreeMap::new();
    for (r, truth) in rankings {
        let rank = r.rank_of(truth);
        let h1 = rank == Some(0);
        hits1 += usize::from(h1);
        hits5 += usize::from(rank.is_some_and(|k| k < 5));
        *obj_hits.entry(truth.clone()).or_default() += usize::from(h1);
        *obj_n.entry(truth.clone()).or_default() += 1;
    }
    let frac = |h: usize| (n > 0).then(|| h as f64 / n as f64);
    EvalReport {
        top1: frac(hits1),
        top5: frac(hits5),
        per_object: obj_n
            .iter()
            .map(|(k, &c)| (k.clone(), obj_hits[k] as f64 / c as f64))
            .collect(),
        per_object_queries: obj_n,
        n_queries: n,
        set_id: set_id.to_string(),
        method,
        config_digest: config_digest.to_string(),
    }
}

fn digest_of(set: &ClassificationSet, encoder_id: &str, method: AggregationMethod, refs: &[&str]) -> String {
    let mut h = Sha256::new();
    for part in [set.set_id.as_str(), encoder_id, method.as_str()] {
        h.update(part.as_bytes());
        h.update([0]);
    }
    for r in refs {
        h.update(r.as_bytes());
        h.update([0]);
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Evaluates in-memory queries. With `single`, each image is one query;
/// with an aggregation method, all images sharing a true object and
/// condition form one multi-view query.
pub fn evaluate_images(
    queries: &[LabeledImage],
    set: &ClassificationSet,
    encoder: &EncoderHandle,
    method: AggregationMethod,
) -> Result<EvalReport, EvalError> {
    if let Some(q) = queries.iter().find(|q| set.get(&q.true_object_id).is_none()) {
        return Err(EvalError::UnknownLabel(q.true_object_id.clone()));
    }
    let refs: Vec<&str> = queries.iter().map(|q| q.query_ref.as_str()).collect();
    let digest = digest_of(set, &encoder.encoder_id(), method, &refs);
    if queries.is_empty() {
        return Ok(report_from_rankings(&[], &set.set_id, method, &digest));
    }
    let images: Vec<RgbImage> = queries.iter().map(|q| q.image.clone()).collect();
    let embeddings = encoder.encode(&images)?;
    let per_image: Vec<PredictionRanking> = embeddings
        .par_iter()
        .zip(queries)
        .map(|(e, q)| classify_embedding(e, set).map(|r| r.with_query_ref(q.query_ref.clone())))
        .collect::<Result<_, _>>()?;
    let rankings: Vec<(PredictionRanking, String)> = match method {
        AggregationMethod::Single => per_image
            .into_iter()
            .zip(queries)
            .map(|(r, q)| (r, q.true_object_id.clone()))
            .collect(),
        _ => {
            let mut groups: BTreeMap<(&str, &str), Vec<PredictionRanking>> = BTreeMap::new();
            for (r, q) in per_image.into_iter().zip(queries) {
                groups
                    .entry((q.true_object_id.as_str(), q.condition_tag.as_str()))
                    .or_default()
                    .push(r);
            }
            groups
                .into_iter()
                .map(|((truth, _), views)| Ok((aggregate(&views, method)?, truth.to_string())))
                .collect::<Result<_, ClassifyError>>()?
        }
    };
    Ok(report_from_rankings(&rankings, &set.set_id, method, &digest))
}

pub fn load_queries(queries: &[LabeledQuery]) -> Result<Vec<LabeledImage>, EvalError> {
    queries
        .par_iter()
        .map(|q| {
            let image = load_image(&q.image_path).map_err(|source| EvalError::Image {
                path: q.image_path.display().to_string(),
                source,
            })?;
            Ok(LabeledImage {
                query_ref: q.image_path.display().to_string(),
                image,
                true_object_id: q.true_object_id.clone(),
                condition_tag: q.condition_tag.clone(),
            })
        })
        .collect()
}

/// Evaluates photographs listed by path.
pub fn evaluate(
    queries: &[LabeledQuery],
    set: &ClassificationSet,
    encoder: &EncoderHandle,
    method: AggregationMethod,
) -> Result<EvalReport, EvalError> {
    if let Some(q) = queries.iter().find(|q| set.get(&q.true_object_id).is_none()) {
        return Err(EvalError::UnknownLabel(q.true_object_id.clone()));
    }
    evaluate_images(&load_queries(queries)?, set, encoder, method)
}

/// Signed change in per-object accuracy from `a` to `b`, keeping only
/// objects whose accuracy changed.
pub fn per_object_delta(a: &EvalReport, b: &EvalReport) -> Result<BTreeMap<String, f64>, EvalError> {
    if !a.per_object.keys().eq(b.per_object.keys()) {
        let ka: BTreeSet<_> = a.per_object.keys().collect();
        let kb: BTreeSet<_> = b.per_object.keys().collect();
        let diff: Vec<_> = ka.symmetric_difference(&kb).collect();
        return Err(EvalError::ObjectMismatch(format!("{diff:?}")));
    }
    Ok(a.per_object
        .iter()
        .filter_map(|(k, &x)| {
            let d = b.per_object[k] - x;
            (d != 0.0).then(|| (k.clone(), d))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarPair {
    pub a: String,
    pub b: String,
    pub similarity: f64,
}

/// The `top_n` most similar unordered prototype pairs, by descending
/// cosine similarity (ties by ids).
pub fn mine_similar_pairs(set: &ClassificationSet, top_n: usize) -> Result<Vec<SimilarPair>, EvalError> {
    if set.len() < 2 {
        return Err(EvalError::TooFewPrototypes(set.len()));
    }
    let protos: Vec<_> = set.prototypes.values().collect();
    let mut pairs: Vec<SimilarPair> = (0..protos.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let protos = &protos;
            (i + 1..protos.len()).map(move |j| SimilarPair {
                a: protos[i].object_id.clone(),
                b: protos[j].object_id.clone(),
                similarity: cosine(&protos[i].vector, &protos[j].vector).unwrap_or(0.0),
            })
        })
        .collect();
    pairs.sort_by(|x, y| {
        y.similarity
            .total_cmp(&x.similarity)
            .then_with(|| x.a.cmp(&y.a))
            .then_with(|| x.b.cmp(&y.b))
    });
    pairs.truncate(top_n);
    Ok(pairs)
}

pub fn unique_objects(pairs: &[SimilarPair]) -> Vec<String> {
    pairs
        .iter()
        .flat_map(|p| [p.a.clone(), p.b.clone()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::PredictionRanking;
    use crate::prototypes::Prototype;
    use proptest::prelude::*;

    fn set_of(protos: &[(&str, Vec<f32>)]) -> ClassificationSet {
        let ps = protos
            .iter()
            .map(|(id, v)| Prototype {
                object_id: id.to_string(),
                vector: v.clone(),
                k: 1,
                viewpoints: vec![],
                encoder_id: "e".into(),
                thumbnail_png: None,
            })
            .collect();
        ClassificationSet::from_prototypes(Some("s".into()), ps, "e", "d").unwrap()
    }

    fn ranking(order: &[&str]) -> PredictionRanking {
        let n = order.len() as f64;
        PredictionRanking::from_scores(
            "q",
            "s",
            AggregationMethod::Single,
            order.iter().enumerate().map(|(i, id)| (id.to_string(), 1.0 - i as f64 / n)).collect(),
        )
    }

    #[test]
    fn third_rank_is_top5_not_top1() {
        let r = report_from_rankings(
            &[(ranking(&["b", "c", "a", "d", "e", "f"]), "a".into())],
            "s",
            AggregationMethod::Single,
            "x",
        );
        assert_eq!(r.top1, Some(0.0));
        assert_eq!(r.top5, Some(1.0));
        assert_eq!(r.per_object["a"], 0.0);
    }

    #[test]
    fn sixth_rank_misses_top5() {
        let r = report_from_rankings(
            &[(ranking(&["b", "c", "d", "e", "f", "a"]), "a".into())],
            "s",
            AggregationMethod::Single,
            "x",
        );
        assert_eq!(r.top5, Some(0.0));
    }

    #[test]
    fn empty_queries_give_undefined_accuracy() {
        let set = set_of(&[("a", vec![1.0])]);
        let r = evaluate_images(&[], &set, &EncoderHandle::pixel(32), AggregationMethod::Single).unwrap();
        assert_eq!(r.n_queries, 0);
        assert_eq!(r.top1, None);
        assert_eq!(r.top5, None);
    }

    #[test]
    fn unknown_label_is_rejected() {
        let set = set_of(&[("a", vec![1.0])]);
        let q = LabeledImage {
            query_ref: "x".into(),
            image: RgbImage::new(32, 32),
            true_object_id: "zz".into(),
            condition_tag: "c".into(),
        };
        assert!(matches!(
            evaluate_images(&[q], &set, &EncoderHandle::pixel(32), AggregationMethod::Single),
            Err(EvalError::UnknownLabel(id)) if id == "zz"
        ));
    }

    #[test]
    fn delta_identity_and_arithmetic() {
        let mk = |acc: &[(&str, f64)]| EvalReport {
            top1: Some(0.0),
            top5: Some(0.0),
            per_object: acc.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            per_object_queries: acc.iter().map(|(k, _)| (k.to_string(), 10)).collect(),
            n_queries: 10 * acc.len(),
            set_id: "s".into(),
            method: AggregationMethod::Single,
            config_digest: "d".into(),
        };
        let a = mk(&[("x", 0.4), ("y", 0.7)]);
        assert!(per_object_delta(&a, &a).unwrap().is_empty());
        let b = mk(&[("x", 0.9), ("y", 0.7)]);
        let d = per_object_delta(&a, &b).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d["x"] - 0.5).abs() < 1e-12);
        assert!(per_object_delta(&a, &mk(&[("x", 0.4)])).is_err());
    }

    #[test]
    fn mining_hand_computed_pair() {
        let set = set_of(&[("p", vec![1.0, 0.0]), ("q", vec![0.99, 0.14]), ("r", vec![0.0, 1.0])]);
        let pairs = mine_similar_pairs(&set, 1).unwrap();
        assert_eq!((pairs[0].a.as_str(), pairs[0].b.as_str()), ("p", "q"));
        let expected = 0.99 / (0.99f64 * 0.99 + 0.14 * 0.14).sqrt();
        assert!((pairs[0].similarity - expected).abs() < 1e-6);
        let all = mine_similar_pairs(&set, 3).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(mine_similar_pairs(&set, 100).unwrap(), all);
        assert!(mine_similar_pairs(&set_of(&[("p", vec![1.0])]), 1).is_err());
    }

    proptest! {
        #[test]
        fn mined_similarities_are_sorted_and_bounded(vs in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 3), 2..30), top_n in 1usize..50) {
            let named: Vec<(String, Vec<f32>)> = vs.iter().enumerate().map(|(i, v)| (format!("o{i:02}"), v.clone())).collect();
            let refs: Vec<(&str, Vec<f32>)> = named.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
            let set = set_of(&refs);
            let pairs = mine_similar_pairs(&set, top_n).unwrap();
            let n = vs.len();
            prop_assert_eq!(pairs.len(), top_n.min(n * (n - 1) / 2));
            for w in pairs.windows(2) {
                prop_assert!(w[0].similarity >= w[1].similarity);
            }
            prop_assert!(unique_objects(&pairs).len() <= 2 * top_n);
        }

        #[test]
        fn report_invariants(truths in proptest::collection::vec(0usize..6, 0..40), ranks in proptest::collection::vec(0usize..6, 40)) {
            let ids = ["a", "b", "c", "d", "e", "f"];
            let rankings: Vec<(PredictionRanking, String)> = truths.iter().zip(&ranks).map(|(&t, &r)| {
                let mut order: Vec<&str> = ids.iter().copied().filter(|&x| x != ids[t]).collect();
                order.insert(r, ids[t]);
                (ranking(&order), ids[t].to_string())
            }).collect();
            let rep = report_from_rankings(&rankings, "s", AggregationMethod::Single, "d");
            if let (Some(t1), Some(t5)) = (rep.top1, rep.top5) {
                prop_assert!(0.0 <= t1 && t1 <= t5 && t5 <= 1.0);
                let weighted: f64 = rep.per_object.iter().map(|(k, acc)| acc * rep.per_object_queries[k] as f64).sum::<f64>() / rep.n_queries as f64;
                prop_assert!((weighted - t1).abs() < 1e-12);
            } else {
                prop_assert_eq!(rep.n_queries, 0);
            }
        }
    }
}
