//! Interaction type and duration prediction with MRR/MAE aggregation,
//! including the per-size-bucket breakdowns.

use thiserror::Error;

use crate::registry::{AssembledModel, CandidateIntensity, IntensityFamily, ModelError};
use crate::tensor::Tape;
use crate::tpp::{
    expected_duration_numeric, rayleigh_expected_duration, EventRecord, Hyperedge, TppError,
};
use crate::training::NegativeSampler;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate an empty test split")]
    EmptyTestSplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tpp(#[from] TppError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Evaluation knobs; the negative count and seed fix the candidate sets so
/// runs are comparable.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub negatives: usize,
    pub seed: u64,
    pub horizon_factor: f64,
    pub duration_grid: usize,
    pub median_gap: f64,
    pub threads: usize,
    pub with_duration: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            negatives: 20,
            seed: 0,
            horizon_factor: 20.0,
            duration_grid: 1024,
            median_gap: 1.0,
            threads: 1,
            with_duration: true,
        }
    }
}

/// 0-based rank of the true candidate among `candidates` alternatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankResult {
    pub rank: usize,
    pub candidates: usize,
}

impl RankResult {
    pub fn reciprocal(&self) -> f64 {
        1.0 / (self.rank as f64 + 1.0)
    }
}

/// Rank by intensity, counting ties against the true candidate so the
/// result is deterministic and pessimistic.
pub fn rank_candidates(true_intensity: f64, negative_intensities: &[f64]) -> RankResult {
    let mut rank = 0;
    for &s in negative_intensities {
        if s >= true_intensity {
            rank += 1;
        }
    }
    RankResult {
        rank,
        candidates: negative_intensities.len() + 1,
    }
}

/// Size buckets used by the per-bucket breakdowns.
pub const BUCKET_LABELS: [&str; 4] = ["k=2", "3<=k<=4", "5<=k<=8", "k>=9"];

pub fn bucket_of(size: usize) -> usize {
    match size {
        0..=2 => 0,
        3..=4 => 1,
        5..=8 => 2,
        _ => 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketMetrics {
    pub count: usize,
    pub mrr: f64,
    pub mae: Option<f64>,
}

/// Aggregated evaluation outcome.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub count: usize,
    pub mrr: f64,
    pub mae: Option<f64>,
    pub buckets: [BucketMetrics; 4],
}

/// One evaluated test event.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub index: usize,
    pub time: f64,
    pub size: usize,
    pub rank: usize,
    pub candidates: usize,
    pub true_duration: f64,
    pub predicted_duration: Option<f64>,
}

/// Score the true hyperedge against sampled negatives at time `t`.
/// `threads > 1` fans candidate scoring out over a frozen state snapshot.
pub fn predict_type(
    model: &AssembledModel,
    edge: &Hyperedge,
    t: f64,
    negatives: &[Hyperedge],
    threads: usize,
) -> Result<RankResult> {
    let true_score = model.intensity_value(edge, t)?;
    let neg_scores: Vec<f64> = if threads > 1 && negatives.len() > 1 {
        let chunk = negatives.len().div_ceil(threads);
        let mut out: Vec<Vec<std::result::Result<f64, ModelError>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = negatives
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|h| model.intensity_value(h, t))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                out.push(h.join().expect("scoring thread panicked"));
            }
        });
        out.into_iter()
            .flatten()
            .collect::<std::result::Result<Vec<f64>, ModelError>>()?
    } else {
        negatives
            .iter()
            .map(|h| model.intensity_value(h, t))
            .collect::<std::result::Result<Vec<f64>, ModelError>>()?
    };
    Ok(rank_candidates(true_score, &neg_scores))
}

/// Expected time until the hyperedge fires again, measured from its anchor.
/// Rayleigh models use the closed form; clique baselines average per-pair
/// durations; attention models integrate the density numerically.
pub fn predict_duration(model: &AssembledModel, edge: &Hyperedge, cfg: &EvalConfig) -> Result<f64> {
    match model.config.family {
        IntensityFamily::Rayleigh => {
            let mut tape = Tape::forward_only();
            let mut cache = crate::registry::EmbedCache::new();
            let alpha = model.rayleigh_scale(&mut tape, &mut cache, edge)?.item();
            Ok(rayleigh_expected_duration(alpha)?)
        }
        IntensityFamily::Neural => {
            if model.config.hyperedge {
                let anchor = model.anchor_time(edge);
                let intensity = CandidateIntensity { model, edge };
                Ok(expected_duration_numeric(
                    &intensity,
                    anchor,
                    cfg.horizon_factor,
                    cfg.duration_grid,
                    cfg.median_gap,
                )?)
            } else {
                // decomposition baselines: average the per-pair estimates
                let pairs: Vec<Hyperedge> = match edge {
                    Hyperedge::Homogeneous(nodes) => crate::encoders::clique_decompose(nodes)
                        .map_err(ModelError::from)?
                        .into_iter()
                        .map(|(a, b)| Hyperedge::Homogeneous(vec![a, b]))
                        .collect(),
                    Hyperedge::Bipartite(l, r) => crate::encoders::bipartite_decompose(l, r)
                        .into_iter()
                        .map(|(a, b)| Hyperedge::Bipartite(vec![a], vec![b]))
                        .collect(),
                };
                let mut total = 0.0;
                for pair in &pairs {
                    let anchor = model.anchor_time(pair);
                    let intensity = CandidateIntensity { model, edge: pair };
                    total += expected_duration_numeric(
                        &intensity,
                        anchor,
                        cfg.horizon_factor,
                        cfg.duration_grid,
                        cfg.median_gap,
                    )?;
                }
                Ok(total / pairs.len() as f64)
            }
        }
    }
}

/// Streaming evaluation: each event is ranked against fresh seeded
/// negatives and its duration predicted, then consumed as history.
/// Concurrent events are scored against the pre-group state and advanced
/// together.
pub fn evaluate_stream(
    model: &mut AssembledModel,
    events: &[EventRecord],
    sampler: &NegativeSampler,
    cfg: &EvalConfig,
) -> Result<(Metrics, Vec<PredictionRow>)> {
    if events.is_empty() {
        return Err(EvalError::EmptyTestSplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(events.len());
    let mut i = 0;
    while i < events.len() {
        let t = events[i].time;
        let mut j = i;
        while j < events.len() && events[j].time == t {
            j += 1;
        }
        for (offset, event) in events[i..j].iter().enumerate() {
            let mut negatives = Vec::with_capacity(cfg.negatives);
            for n in 0..cfg.negatives {
                if let Some(neg) = sampler.sample(&event.edge, n, &mut rng)? {
                    negatives.push(neg);
                }
            }
            let rank = predict_type(model, &event.edge, t, &negatives, cfg.threads)?;
            let anchor = model.anchor_time(&event.edge);
            let predicted = if cfg.with_duration {
                Some(predict_duration(model, &event.edge, cfg)?)
            } else {
                None
            };
            rows.push(PredictionRow {
                index: i + offset,
                time: t,
                size: event.edge.size(),
                rank: rank.rank,
                candidates: rank.candidates,
                true_duration: t - anchor,
                predicted_duration: predicted,
            });
        }
        let mut tape = Tape::forward_only();
        model.advance_group(&mut tape, &events[i..j])?;
        i = j;
    }
    Ok((summarize(&rows), rows))
}

/// Aggregate rows into overall and per-bucket MRR/MAE.
pub fn summarize(rows: &[PredictionRow]) -> Metrics {
    let mut bucket_rows: [Vec<&PredictionRow>; 4] = Default::default();
    for row in rows {
        bucket_rows[bucket_of(row.size)].push(row);
    }
    let aggregate = |rows: &[&PredictionRow]| -> BucketMetrics {
        if rows.is_empty() {
            return BucketMetrics {
                count: 0,
                mrr: 0.0,
                mae: None,
            };
        }
        let mrr = rows
            .iter()
            .map(|r| 1.0 / (r.rank as f64 + 1.0))
            .sum::<f64>()
            / rows.len() as f64;
        let errors: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.predicted_duration.map(|p| (p - r.true_duration).abs()))
            .collect();
        let mae = if errors.is_empty() {
            None
        } else {
            Some(errors.iter().sum::<f64>() / errors.len() as f64)
        };
        BucketMetrics {
            count: rows.len(),
            mrr,
            mae,
        }
    };
    let all: Vec<&PredictionRow> = rows.iter().collect();
    let overall = aggregate(&all);
    Metrics {
        count: overall.count,
        mrr: overall.mrr,
        mae: overall.mae,
        buckets: [
            aggregate(&bucket_rows[0]),
            aggregate(&bucket_rows[1]),
            aggregate(&bucket_rows[2]),
            aggregate(&bucket_rows[3]),
        ],
    }
}
