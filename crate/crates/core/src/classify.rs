//! Nearest-prototype classification by cosine similarity, with multi-view
//! aggregation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{cosine, EmbeddingVector, EncoderError, EncoderHandle};
use crate::prototypes::ClassificationSet;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("encoder {encoder} does not match set encoder {set}")]
    EncoderMismatch { set: String, encoder: String },
    #[error("classification set is empty")]
    EmptySet,
    #[error("rankings come from different sets: {0}")]
    SetMismatch(String),
    #[error("no views to aggregate")]
    EmptyViews,
    #[error("single-view aggregation got {0} views")]
    NotSingle(usize),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    #[default]
    Single,
    MajorityVote,
    ScoreAverage,
}

impl AggregationMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMethod::Single => "single",
            AggregationMethod::MajorityVote => "majority_vote",
            AggregationMethod::ScoreAverage => "score_average",
        }
    }
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "single" => Ok(AggregationMethod::Single),
            "majority_vote" | "vote" | "majority" => Ok(AggregationMethod::MajorityVote),
            "score_average" | "average" | "mean" => Ok(AggregationMethod::ScoreAverage),
            _ => Err(format!(
                "unknown aggregation method {s:?} (expected single, majority_vote or score_average)"
            )),
        }
    }
}

/// Full ranking of a set's objects for one query (or aggregated queries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRanking {
    pub query_ref: String,
    pub set_id: String,
    pub method: AggregationMethod,
    pub scores: BTreeMap<String, f64>,
    /// Descending score, ties by ascending object id.
    pub ranked_ids: Vec<String>,
}

fn by_score_then_id(scores: &BTreeMap<String, f64>) -> Vec<String> {
    let mut ids: Vec<String> = scores.keys().cloned().collect();
    ids.sort_by(|a, b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.cmp(b))
    });
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub object_id: String,
    pub score: f64,
}

/// Serializable top-k view of a ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub query_ref: String,
    pub set_id: String,
    pub method: AggregationMethod,
    pub candidates: Vec<Candidate>,
}

impl PredictionRanking {
    pub fn from_scores(
        query_ref: impl Into<String>,
        set_id: impl Into<String>,
        method: AggregationMethod,
        scores: BTreeMap<String, f64>,
    ) -> Self {
        let ranked_ids = by_score_then_id(&scores);
        PredictionRanking {
            query_ref: query_ref.into(),
            set_id: set_id.into(),
            method,
            scores,
            ranked_ids,
        }
    }

    pub fn top1(&self) -> Option<&str> {
        self.ranked_ids.first().map(String::as_str)
    }

    /// Zero-based rank of `object_id`.
    pub fn rank_of(&self, object_id: &str) -> Option<usize> {
        self.ranked_ids.iter().position(|id| id == object_id)
    }

    pub fn top_k(&self, k: usize) -> Vec<Candidate> {
        self.ranked_ids
            .iter()
            .take(k)
            .map(|id| Candidate {
                object_id: id.clone(),
                score: self.scores[id],
            })
            .collect()
    }

    pub fn record(&self, k: usize) -> RankingRecord {
        RankingRecord {
            query_ref: self.query_ref.clone(),
            set_id: self.set_id.clone(),
            method: self.method,
            candidates: self.top_k(k),
        }
    }

    /// The ranking filtered to `keep`, preserving order and scores.
    pub fn restricted(&self, keep: &BTreeSet<String>) -> Self {
        PredictionRanking {
            query_ref: self.query_ref.clone(),
            set_id: self.set_id.clone(),
            method: self.method,
            scores: self
                .scores
                .iter()
                .filter(|(k, _)| keep.contains(*k))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
            ranked_ids: self.ranked_ids.iter().filter(|id| keep.contains(*id)).cloned().collect(),
        }
    }

    pub fn with_query_ref(mut self, query_ref: impl Into<String>) -> Self {
        self.query_ref = query_ref.into();
        self
    }
}

fn check_set(set: &ClassificationSet, encoder_id: &str, dim: usize) -> Result<(), ClassifyError> {
    if set.is_empty() {
        return Err(ClassifyError::EmptySet);
    }
    if set.encoder_id != encoder_id || set.dim != dim {
        return Err(ClassifyError::EncoderMismatch {
            set: format!("{} (D={})", set.encoder_id, set.dim),
            encoder: format!("{encoder_id} (D={dim})"),
        });
    }
    Ok(())
}

/// Scores an embedding against every prototype. A zero-norm prototype
/// scores 0.
pub fn classify_embedding(
    query: &EmbeddingVector,
    set: &ClassificationSet,
) -> Result<PredictionRanking, ClassifyError> {
    check_set(set, &query.encoder_id, query.dim())?;
    if query.norm() == 0.0 {
        return Err(EncoderError::ZeroVector.into());
    }
    let scores = set
        .prototypes
        .iter()
        .map(|(id, p)| (id.clone(), cosine(&query.values, &p.vector).unwrap_or(0.0)))
        .collect();
    Ok(PredictionRanking::from_scores(
        "",
        &set.set_id,
        AggregationMethod::Single,
        scores,
    ))
}

pub fn classify_image(
    image: &RgbImage,
    set: &ClassificationSet,
    encoder: &EncoderHandle,
) -> Result<PredictionRanking, ClassifyError> {
    check_set(set, &encoder.encoder_id(), encoder.dim())?;
    classify_embedding(&encoder.encode_one(image)?, set)
}

fn mean_sorted(mut xs: Vec<f64>) -> f64 {
    // Summing in sorted order makes the result independent of view order.
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Combines per-view rankings of one physical object.
///
/// Majority vote ranks by the fraction of views voting for each object,
/// ties broken by mean similarity and then id; the returned scores are the
/// vote fractions. Score averaging ranks by per-object mean similarity.
/// `Single` accepts exactly one view.
pub fn aggregate(
    views: &[PredictionRanking],
    method: AggregationMethod,
) -> Result<PredictionRanking, ClassifyError> {
    let first = views.first().ok_or(ClassifyError::EmptyViews)?;
    for v in &views[1..] {
        if v.set_id != first.set_id || !v.scores.keys().eq(first.scores.keys()) {
            return Err(ClassifyError::SetMismatch(format!(
                "{} vs {}",
                first.set_id, v.set_id
            )));
        }
    }
    let query_ref = views
        .iter()
        .map(|v| v.query_ref.as_str())
        .collect::<Vec<_>>()
        .join("+");
    let means: BTreeMap<String, f64> = first
        .scores
        .keys()
        .map(|id| (id.clone(), mean_sorted(views.iter().map(|v| v.scores[id]).collect())))
        .collect();
    match method {
        AggregationMethod::Single => {
            if views.len() != 1 {
                return Err(ClassifyError::NotSingle(views.len()));
            }
            Ok(first.clone())
        }
        AggregationMethod::ScoreAverage => Ok(PredictionRanking::from_scores(
            query_ref,
            &first.set_id,
            method,
            means,
        )),
        AggregationMethod::MajorityVote => {
            let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
            for v in views {
                if let Some(t) = v.top1() {
                    *votes.entry(t).or_default() += 1;
                }
            }
            let n = views.len() as f64;
            let fractions: BTreeMap<String, f64> = first
                .scores
                .keys()
                .map(|id| (id.clone(), votes.get(id.as_str()).copied().unwrap_or(0) as f64 / n))
                .collect();
            let mut ranked_ids: Vec<String> = fractions.keys().cloned().collect();
            ranked_ids.sort_by(|a, b| {
                fractions[b]
                    .total_cmp(&fractions[a])
                    .then_with(|| means[b].total_cmp(&means[a]))
                    .then_with(|| a.cmp(b))
            });
            Ok(PredictionRanking {
                query_ref,
                set_id: first.set_id.clone(),
                method,
                scores: fractions,
                ranked_ids,
            })
        }
    }
}

pub fn classify_multiview(
    images: &[RgbImage],
    set: &ClassificationSet,
    encoder: &EncoderHandle,
    method: AggregationMethod,
) -> Result<PredictionRanking, ClassifyError> {
    if images.is_empty() {
        return Err(ClassifyError::EmptyViews);
    }
    check_set(set, &encoder.encoder_id(), encoder.dim())?;
    let views = encoder
        .encode(images)?
        .iter()
        .enumerate()
        .map(|(i, e)| classify_embedding(e, set).map(|r| r.with_query_ref(format!("view{i}"))))
        .collect::<Result<Vec<_>, _>>()?;
    aggregate(&views, method)
}

#[cfg(test)]
mod tests {
    use super::*;
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

    fn ranking(scores: &[(&str, f64)]) -> PredictionRanking {
        PredictionRanking::from_scores(
            "q",
            "s",
            AggregationMethod::Single,
            scores.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        )
    }

    fn emb(v: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector::new(v, "e")
    }

    #[test]
    fn parallel_and_orthogonal() {
        let set = set_of(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 2.0])]);
        let r = classify_embedding(&emb(vec![0.0, 3.0]), &set).unwrap();
        assert_eq!(r.top1(), Some("b"));
        assert!((r.scores["b"] - 1.0).abs() < 1e-12);
        assert!(r.scores["a"].abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let r = ranking(&[("c", 0.5), ("a", 0.5), ("b", 0.9)]);
        assert_eq!(r.ranked_ids, vec!["b", "a", "c"]);
    }

    #[test]
    fn encoder_mismatch_and_empty_set() {
        let set = set_of(&[("a", vec![1.0, 0.0])]);
        let other = EmbeddingVector::new(vec![1.0, 0.0], "zzz");
        assert!(matches!(
            classify_embedding(&other, &set),
            Err(ClassifyError::EncoderMismatch { .. })
        ));
        assert!(matches!(
            classify_embedding(&emb(vec![1.0, 0.0, 0.0]), &set),
            Err(ClassifyError::EncoderMismatch { .. })
        ));
        let empty = ClassificationSet::from_prototypes(None, vec![], "e", "d").unwrap();
        assert!(matches!(classify_embedding(&emb(vec![1.0]), &empty), Err(ClassifyError::EmptySet)));
        let enc = EncoderHandle::pixel(32);
        let img = RgbImage::new(32, 32);
        assert!(matches!(classify_image(&img, &set, &enc), Err(ClassifyError::EncoderMismatch { .. })));
    }

    #[test]
    fn zero_query_is_an_error() {
        let set = set_of(&[("a", vec![1.0, 0.0])]);
        assert!(matches!(
            classify_embedding(&emb(vec![0.0, 0.0]), &set),
            Err(ClassifyError::Encoder(EncoderError::ZeroVector))
        ));
    }

    #[test]
    fn self_match_with_pixel_encoder() {
        use crate::geometry::primitives::sandbox_meshes;
        use crate::geometry::ViewpointSpec;
        use crate::prototypes::build_set;
        use crate::prototypes::SamplingStrategy;
        use crate::renderer::{render, RenderConfig};
        let cfg = RenderConfig::default().with_size(32);
        let enc = EncoderHandle::pixel(32);
        let meshes = sandbox_meshes();
        let set = build_set(&meshes, &SamplingStrategy::uniform(1, &[30.0]), &enc, &cfg).unwrap();
        let img = render(&meshes[3], &ViewpointSpec::new(0.0, 30.0, 0.0), &cfg, 0).unwrap().pixels;
        let r = classify_image(&img, &set, &enc).unwrap();
        assert_eq!(r.top1(), Some(meshes[3].object_id.as_str()));
        assert!((r.scores[&meshes[3].object_id] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_view_aggregation_is_identity() {
        let r = ranking(&[("a", 0.2), ("b", 0.7), ("c", -0.1)]);
        let avg = aggregate(std::slice::from_ref(&r), AggregationMethod::ScoreAverage).unwrap();
        assert_eq!(avg.scores, r.scores);
        assert_eq!(avg.ranked_ids, r.ranked_ids);
        let vote = aggregate(std::slice::from_ref(&r), AggregationMethod::MajorityVote).unwrap();
        assert_eq!(vote.ranked_ids, r.ranked_ids);
        assert_eq!(vote.scores["b"], 1.0);
        assert_eq!(aggregate(std::slice::from_ref(&r), AggregationMethod::Single).unwrap(), r);
        assert!(matches!(
            aggregate(&[r.clone(), r], AggregationMethod::Single),
            Err(ClassifyError::NotSingle(2))
        ));
    }

    #[test]
    fn majority_is_modal() {
        let a = ranking(&[("A", 0.8), ("B", 0.1)]);
        let b = ranking(&[("A", 0.1), ("B", 0.9)]);
        let v = aggregate(&[a.clone(), a, b], AggregationMethod::MajorityVote).unwrap();
        assert_eq!(v.top1(), Some("A"));
        assert!((v.scores["A"] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vote_tie_breaks_by_mean_similarity() {
        let v1 = ranking(&[("A", 0.9), ("B", 0.1)]);
        let v2 = ranking(&[("A", 0.2), ("B", 0.6)]);
        let avg = aggregate(&[v1.clone(), v2.clone()], AggregationMethod::ScoreAverage).unwrap();
        assert_eq!(avg.top1(), Some("A"));
        assert!((avg.scores["A"] - 0.55).abs() < 1e-12);
        assert!((avg.scores["B"] - 0.35).abs() < 1e-12);
        let vote = aggregate(&[v1, v2], AggregationMethod::MajorityVote).unwrap();
        assert_eq!(vote.scores["A"], 0.5);
        assert_eq!(vote.top1(), Some("A"));
    }

    #[test]
    fn full_tie_breaks_by_id() {
        let v1 = ranking(&[("B", 0.9), ("A", 0.1)]);
        let v2 = ranking(&[("B", 0.1), ("A", 0.9)]);
        let vote = aggregate(&[v1, v2], AggregationMethod::MajorityVote).unwrap();
        assert_eq!(vote.top1(), Some("A"));
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[], AggregationMethod::ScoreAverage), Err(ClassifyError::EmptyViews)));
        let a = ranking(&[("A", 0.8)]);
        let b = ranking(&[("B", 0.8)]);
        assert!(matches!(
            aggregate(&[a.clone(), b], AggregationMethod::ScoreAverage),
            Err(ClassifyError::SetMismatch(_))
        ));
        let mut other = a.clone();
        other.set_id = "t".into();
        assert!(matches!(
            aggregate(&[a, other], AggregationMethod::MajorityVote),
            Err(ClassifyError::SetMismatch(_))
        ));
    }

    #[test]
    fn restriction_preserves_order_and_scores() {
        let r = ranking(&[("a", 0.2), ("b", 0.7), ("c", -0.1), ("d", 0.5)]);
        let keep: BTreeSet<String> = ["a", "c", "d"].iter().map(|s| s.to_string()).collect();
        let sub = r.restricted(&keep);
        assert_eq!(sub.ranked_ids, vec!["d", "a", "c"]);
        assert_eq!(sub.scores["a"], 0.2);
        assert_eq!(sub.top_k(2).len(), 2);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("score-average".parse(), Ok(AggregationMethod::ScoreAverage));
        assert_eq!("majority_vote".parse(), Ok(AggregationMethod::MajorityVote));
        assert!("median".parse::<AggregationMethod>().is_err());
    }

    fn vecs(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, d), n)
    }

    proptest! {
        #[test]
        fn scale_invariance(protos in vecs(5, 4), q in proptest::collection::vec(-1.0f32..1.0, 4), c in 0.01f32..100.0) {
            prop_assume!(q.iter().any(|x| x.abs() > 1e-3));
            let named: Vec<(String, Vec<f32>)> = protos.iter().enumerate().map(|(i, v)| (format!("o{i}"), v.clone())).collect();
            let refs: Vec<(&str, Vec<f32>)> = named.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
            let scaled: Vec<(&str, Vec<f32>)> = named.iter().map(|(k, v)| (k.as_str(), v.iter().map(|x| x * c).collect())).collect();
            let a = classify_embedding(&emb(q.clone()), &set_of(&refs)).unwrap();
            let b = classify_embedding(&emb(q), &set_of(&scaled)).unwrap();
            // Cosine is scale invariant; allow reordering only among near-ties.
            for (x, y) in a.ranked_ids.iter().zip(&b.ranked_ids) {
                if x != y {
                    prop_assert!((a.scores[x] - a.scores[y]).abs() < 1e-6);
                }
            }
            for s in a.scores.values() {
                prop_assert!((-1.0..=1.0).contains(s));
            }
        }

        #[test]
        fn aggregation_is_order_independent(scores in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..6), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let views: Vec<PredictionRanking> = scores.iter().map(|s| {
                ranking(&[("a", s[0]), ("b", s[1]), ("c", s[2]), ("d", s[3])])
            }).collect();
            let mut shuffled = views.clone();
            shuffled.shuffle(&mut crate::seed::rng(seed));
            for m in [AggregationMethod::MajorityVote, AggregationMethod::ScoreAverage] {
                let x = aggregate(&views, m).unwrap();
                let y = aggregate(&shuffled, m).unwrap();
                prop_assert_eq!(&x.ranked_ids, &y.ranked_ids);
                prop_assert_eq!(&x.scores, &y.scores);
            }
        }

        #[test]
        fn averaging_identical_views_is_identity(s in proptest::collection::vec(-1.0f64..1.0, 3), n in 1usize..5) {
            let r = ranking(&[("a", s[0]), ("b", s[1]), ("c", s[2])]);
            let avg = aggregate(&vec![r.clone(); n], AggregationMethod::ScoreAverage).unwrap();
            prop_assert_eq!(&avg.ranked_ids, &r.ranked_ids);
            for (k, v) in &r.scores {
                prop_assert!((avg.scores[k] - v).abs() < 1e-15);
            }
        }
    }
}
