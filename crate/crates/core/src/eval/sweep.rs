//! Test-time sweeps over prototype view count and query view count.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{report_from_rankings, EvalError, LabeledImage};
use crate::classify::{aggregate, classify_embedding, AggregationMethod, PredictionRanking};
use crate::encoder::{EmbeddingVector, EncoderHandle};
use crate::geometry::Mesh;
use crate::prototypes::{build_set, SamplingMode, SamplingStrategy};
use crate::renderer::RenderConfig;
use crate::seed;

/// Repetitions of randomized sweep cells.
pub const DEFAULT_TRIALS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: String,
    pub n: usize,
    pub trial: usize,
    pub top1: f64,
    pub top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub strategy: String,
    pub n: usize,
    pub trials: usize,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub mean_top5: f64,
    pub std_top5: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// `viewpoints` or `multiview`.
    pub kind: String,
    /// What `n` counts: rendered views per prototype or query views.
    pub x_label: String,
    pub rows: Vec<SweepRow>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepTable {
    /// Mean and sample standard deviation per (strategy, n), in first-seen
    /// strategy order and ascending n.
    pub fn summary(&self) -> Vec<SweepSummary> {
        let mut order: Vec<&str> = Vec::new();
        let mut cells: BTreeMap<(&str, usize), Vec<&SweepRow>> = BTreeMap::new();
        for r in &self.rows {
            if !order.contains(&r.strategy.as_str()) {
                order.push(&r.strategy);
            }
            cells.entry((&r.strategy, r.n)).or_default().push(r);
        }
        let mut out = Vec::new();
        for s in order {
            for ((_, n), rows) in cells.range((s, 0)..=(s, usize::MAX)) {
                let t1: Vec<f64> = rows.iter().map(|r| r.top1).collect();
                let t5: Vec<f64> = rows.iter().map(|r| r.top5).collect();
                let (mean_top1, std_top1) = mean_std(&t1);
                let (mean_top5, std_top5) = mean_std(&t5);
                out.push(SweepSummary {
                    strategy: s.to_string(),
                    n: *n,
                    trials: rows.len(),
                    mean_top1,
                    std_top1,
                    mean_top5,
                    std_top5,
                });
            }
        }
        out
    }

    pub fn mean_top1(&self, strategy: &str, n: usize) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.strategy == strategy && s.n == n)
            .map(|s| s.mean_top1)
    }
}

pub fn strategy_label(s: &SamplingStrategy) -> String {
    let mode = match s.mode {
        SamplingMode::Uniform => "uniform",
        SamplingMode::Random => "random",
    };
    let els: Vec<String> = s.elevations_deg.iter().map(|e| format!("{e}")).collect();
    format!("{mode}:{}", els.join(","))
}

fn embed_queries(queries: &[LabeledImage], encoder: &EncoderHandle) -> Result<Vec<EmbeddingVector>, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::InvalidSweep("no queries".into()));
    }
    let images: Vec<_> = queries.iter().map(|q| q.image.clone()).collect();
    Ok(encoder.encode(&images)?)
}

/// Rebuilds prototypes for every (strategy, n) and evaluates single-image
/// queries. Uniform cells are deterministic and run once; random cells run
/// `trials` times with per-trial seeds derived from the template's seed.
pub fn sweep_viewpoints(
    meshes: &[Mesh],
    queries: &[LabeledImage],
    encoder: &EncoderHandle,
    render_cfg: &RenderConfig,
    n_values: &[usize],
    strategies: &[SamplingStrategy],
    trials: usize,
) -> Result<SweepTable, EvalError> {
    if trials == 0 {
        return Err(EvalError::InvalidSweep("trials must be >= 1".into()));
    }
    let embeddings = embed_queries(queries, encoder)?;
    let mut rows = Vec::new();
    for template in strategies {
        let label = strategy_label(template);
        for &n in n_values {
            let reps = match template.mode {
                SamplingMode::Uniform => 1,
                SamplingMode::Random => trials,
            };
            for trial in 0..reps {
                let mut strategy = template.with_n_views(n);
                if strategy.mode == SamplingMode::Random {
                    strategy.seed = seed::derive(template.seed, &[n as u64, trial as u64]);
                }
                strategy
                    .validate()
                    .map_err(|e| EvalError::InvalidSweep(format!("{label} n={n}: {e}")))?;
                let set = build_set(meshes, &strategy, encoder, render_cfg)?;
                let rankings = embeddings
                    .iter()
                    .zip(queries)
                    .map(|(e, q)| Ok((classify_embedding(e, &set)?, q.true_object_id.clone())))
                    .collect::<Result<Vec<_>, EvalError>>()?;
                let rep = report_from_rankings(&rankings, &set.set_id, AggregationMethod::Single, "");
                rows.push(SweepRow {
                    strategy: label.clone(),
                    n,
                    trial,
                    top1: rep.top1.unwrap_or(0.0),
                    top5: rep.top5.unwrap_or(0.0),
                });
            }
        }
    }
    Ok(SweepTable {
        kind: "viewpoints".into(),
        x_label: "n".into(),
        rows,
    })
}

/// For each m, draws m query views per object (without replacement; all
/// views when fewer exist), aggregates and evaluates. The same draw is
/// shared by every method within a trial.
pub fn sweep_multiview(
    queries: &[LabeledImage],
    set: &crate::prototypes::ClassificationSet,
    encoder: &EncoderHandle,
    m_values: &[usize],
    methods: &[AggregationMethod],
    trials: usize,
    base_seed: u64,
) -> Result<SweepTable, EvalError> {
    if trials == 0 || m_values.contains(&0) {
        return Err(EvalError::InvalidSweep("trials and m must be >= 1".into()));
    }
    if let Some(q) = queries.iter().find(|q| set.get(&q.true_object_id).is_none()) {
        return Err(EvalError::UnknownLabel(q.true_object_id.clone()));
    }
    let embeddings = embed_queries(queries, encoder)?;
    let per_image: Vec<PredictionRanking> = embeddings
        .iter()
        .map(|e| classify_embedding(e, set))
        .collect::<Result<_, _>>()?;
    let mut groups: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        groups
            .entry((&q.true_object_id, &q.condition_tag))
            .or_default()
            .push(i);
    }
    let mut rows = Vec::new();
    for &method in methods {
        for &m in m_values {
            for trial in 0..trials {
                let mut rankings = Vec::with_capacity(groups.len());
                for (g, ((truth, _), idx)) in groups.iter().enumerate() {
                    let mut rng = seed::rng(seed::derive(base_seed, &[m as u64, trial as u64, g as u64]));
                    let take = m.min(idx.len());
                    let views: Vec<PredictionRanking> = index::sample(&mut rng, idx.len(), take)
                        .into_iter()
                        .map(|k| per_image[idx[k]].clone())
                        .collect();
                    let method = if views.len() == 1 && method == AggregationMethod::Single {
                        AggregationMethod::Single
                    } else if method == AggregationMethod::Single {
                        return Err(EvalError::InvalidSweep("single aggregation needs m = 1".into()));
                    } else {
                        method
                    };
                    rankings.push((aggregate(&views, method)?, truth.to_string()));
                }
                let rep = report_from_rankings(&rankings, &set.set_id, method, "");
                rows.push(SweepRow {
                    strategy: method.as_str().to_string(),
                    n: m,
                    trial,
                    top1: rep.top1.unwrap_or(0.0),
                    top5: rep.top5.unwrap_or(0.0),
                });
            }
        }
    }
    Ok(SweepTable {
        kind: "multiview".into(),
        x_label: "m".into(),
        rows,
    })
}
