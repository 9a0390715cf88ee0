//! Segmented maximum-likelihood training: per-event loss with Monte-Carlo
//! survival terms, two-step negative sampling, and an Adam loop with
//! truncated backpropagation through time at segment boundaries.

use thiserror::Error;

use crate::evaluation::{evaluate_stream, EvalConfig};
use crate::registry::{AssembledModel, EmbedCache, IntensityFamily, ModelError, Side};
use crate::tensor::{ParamSet, Tape, Tensor, TensorError};
use crate::tpp::{uniform_sorted_samples, EventRecord, Hyperedge};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("event stream is not time-ordered: {at} after {prev}")]
    NonMonotone { prev: f64, at: f64 },
    #[error("negative sampler needs {need} nodes outside the positive but only {have} exist")]
    UniverseTooSmall { need: usize, have: usize },
    #[error("loss diverged (non-finite) at epoch {epoch}, segment {segment}")]
    Diverged { epoch: usize, segment: usize },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training hyperparameters, defaulted to the published settings
/// (lr 0.001, segment 128, 20 negatives, 20 Monte-Carlo samples,
/// 100 epochs).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub segment_len: usize,
    pub negatives: usize,
    pub mc_samples: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validate (and track the best checkpoint) every this many epochs;
    /// 0 disables validation entirely.
    pub validate_every: usize,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            segment_len: 128,
            negatives: 20,
            mc_samples: 20,
            epochs: 100,
            seed: 0,
            validate_every: 1,
            eval: EvalConfig::default(),
        }
    }
}

/// Which size statistic a distribution describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeSide {
    Homogeneous,
    Left,
    Right,
}

/// Empirical categorical distribution over hyperedge sizes.
#[derive(Debug, Clone)]
pub struct SizeDistribution {
    sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl SizeDistribution {
    /// Frequencies of the observed sizes in `events`.
    pub fn fit(events: &[EventRecord], side: SizeSide) -> Result<Self> {
        if events.is_empty() {
            return Err(TrainError::EmptyTrainSplit);
        }
        let mut counts: std::collections::BTreeMap<usize, usize> = Default::default();
        for e in events {
            let size = match side {
                SizeSide::Homogeneous => e.edge.size(),
                SizeSide::Left => e.edge.left().len(),
                SizeSide::Right => e.edge.right().len(),
            };
            *counts.entry(size).or_insert(0) += 1;
        }
        let total: usize = counts.values().sum();
        let (sizes, probs): (Vec<usize>, Vec<f64>) = counts
            .into_iter()
            .map(|(k, c)| (k, c as f64 / total as f64))
            .unzip();
        Ok(SizeDistribution { sizes, probs })
    }

    pub fn support(&self) -> &[usize] {
        &self.sizes
    }

    pub fn prob(&self, size: usize) -> f64 {
        self.sizes
            .iter()
            .position(|&s| s == size)
            .map_or(0.0, |ix| self.probs[ix])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen_range(0.0..1.0f64);
        let mut acc = 0.0;
        for (&size, &p) in self.sizes.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return size;
            }
        }
        *self.sizes.last().expect("nonempty support")
    }
}

fn sample_without_replacement<R: Rng>(pool: &mut Vec<usize>, k: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(k <= pool.len());
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool[..k].to_vec()
}

const NEGATIVE_RETRIES: usize = 100;

/// Two-step negative draw for homogeneous hyperedges: the size comes from
/// the fitted categorical and min(ceil(k/2), |h|) member nodes are kept so
/// the negative is never trivially far from the positive. A draw that
/// collides with the positive is retried; after 100 collisions the draw is
/// skipped (`None`).
pub fn sample_negative_homogeneous<R: Rng>(
    positive: &[usize],
    num_nodes: usize,
    dist: &SizeDistribution,
    rng: &mut R,
) -> Result<Option<Vec<usize>>> {
    for _ in 0..NEGATIVE_RETRIES {
        let k = dist.sample(rng);
        let keep = (kseg_half(k)).min(positive.len());
        let outside_needed = k - keep.min(k);
        let outside_available = num_nodes - positive.len();
        if outside_needed > outside_available {
            return Err(TrainError::UniverseTooSmall {
                need: outside_needed,
                have: outside_available,
            });
        }
        let mut inside_pool = positive.to_vec();
        let mut nodes = sample_without_replacement(&mut inside_pool, keep.min(k), rng);
        if outside_needed > 0 {
            let mut outside_pool: Vec<usize> =
                (0..num_nodes).filter(|v| !positive.contains(v)).collect();
            nodes.extend(sample_without_replacement(
                &mut outside_pool,
                outside_needed,
                rng,
            ));
        }
        nodes.sort_unstable();
        nodes.dedup();
        if nodes.as_slice() != positive {
            return Ok(Some(nodes));
        }
    }
    Ok(None)
}

fn kseg_half(k: usize) -> usize {
    k.div_ceil(2)
}

/// One-sided bipartite negative: copy the fixed side, replace the corrupted
/// side by a uniform random subset of its universe with a size drawn from
/// that side's distribution.
pub fn sample_negative_bipartite<R: Rng>(
    positive: (&[usize], &[usize]),
    universe: usize,
    dist: &SizeDistribution,
    corrupt: Side,
    rng: &mut R,
) -> Result<Option<Hyperedge>> {
    let (left, right) = positive;
    for _ in 0..NEGATIVE_RETRIES {
        let k = dist.sample(rng).min(universe);
        if k == 0 {
            continue;
        }
        let mut pool: Vec<usize> = (0..universe).collect();
        let mut subset = sample_without_replacement(&mut pool, k, rng);
        subset.sort_unstable();
        let (new_left, new_right) = match corrupt {
            Side::Left => (subset, right.to_vec()),
            Side::Right => (left.to_vec(), subset),
        };
        if new_left.as_slice() != left || new_right.as_slice() != right {
            return Ok(Some(Hyperedge::Bipartite(new_left, new_right)));
        }
    }
    Ok(None)
}

/// Fitted size distributions plus universe sizes, bundled for drawing
/// negatives for one candidate event.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    pub bipartite: bool,
    pub num_left: usize,
    pub num_right: usize,
    pub homogeneous: Option<SizeDistribution>,
    pub left_sizes: Option<SizeDistribution>,
    pub right_sizes: Option<SizeDistribution>,
}

impl NegativeSampler {
    pub fn fit(
        events: &[EventRecord],
        num_left: usize,
        num_right: usize,
        bipartite: bool,
    ) -> Result<Self> {
        Ok(if bipartite {
            NegativeSampler {
                bipartite,
                num_left,
                num_right,
                homogeneous: None,
                left_sizes: Some(SizeDistribution::fit(events, SizeSide::Left)?),
                right_sizes: Some(SizeDistribution::fit(events, SizeSide::Right)?),
            }
        } else {
            NegativeSampler {
                bipartite,
                num_left,
                num_right,
                homogeneous: Some(SizeDistribution::fit(events, SizeSide::Homogeneous)?),
                left_sizes: None,
                right_sizes: None,
            }
        })
    }

    /// Draw the `index`-th negative for a positive edge. Bipartite draws
    /// alternate the corrupted side by index so both sides are exercised.
    pub fn sample<R: Rng>(
        &self,
        positive: &Hyperedge,
        index: usize,
        rng: &mut R,
    ) -> Result<Option<Hyperedge>> {
        match positive {
            Hyperedge::Homogeneous(nodes) => {
                let dist = self.homogeneous.as_ref().expect("homogeneous sampler");
                Ok(
                    sample_negative_homogeneous(nodes, self.num_left, dist, rng)?
                        .map(Hyperedge::Homogeneous),
                )
            }
            Hyperedge::Bipartite(l, r) => {
                let corrupt = if index % 2 == 0 { Side::Right } else { Side::Left };
                let (universe, dist) = match corrupt {
                    Side::Left => (self.num_left, self.left_sizes.as_ref().unwrap()),
                    Side::Right => (self.num_right, self.right_sizes.as_ref().unwrap()),
                };
                sample_negative_bipartite((l, r), universe, dist, corrupt, rng)
            }
        }
    }
}

/// The model interface the segment loss needs; implemented by
/// [`AssembledModel`] and by test stubs with pinned intensities.
pub trait SegmentModel {
    fn family(&self) -> IntensityFamily;
    fn anchor_time(&self, h: &Hyperedge) -> f64;
    fn intensity_at(
        &self,
        tape: &mut Tape,
        cache: &mut EmbedCache,
        h: &Hyperedge,
        t: f64,
    ) -> std::result::Result<Tensor, ModelError>;
    fn rayleigh_scale(
        &self,
        tape: &mut Tape,
        cache: &mut EmbedCache,
        h: &Hyperedge,
    ) -> std::result::Result<Tensor, ModelError>;
    fn advance_group(
        &mut self,
        tape: &mut Tape,
        events: &[EventRecord],
    ) -> std::result::Result<(), ModelError>;
}

impl SegmentModel for AssembledModel {
    fn family(&self) -> IntensityFamily {
        self.config.family
    }
    fn anchor_time(&self, h: &Hyperedge) -> f64 {
        AssembledModel::anchor_time(self, h)
    }
    fn intensity_at(
        &self,
        tape: &mut Tape,
        cache: &mut EmbedCache,
        h: &Hyperedge,
        t: f64,
    ) -> std::result::Result<Tensor, ModelError> {
        AssembledModel::intensity_at(self, tape, cache, h, t)
    }
    fn rayleigh_scale(
        &self,
        tape: &mut Tape,
        cache: &mut EmbedCache,
        h: &Hyperedge,
    ) -> std::result::Result<Tensor, ModelError> {
        AssembledModel::rayleigh_scale(self, tape, cache, h)
    }
    fn advance_group(
        &mut self,
        tape: &mut Tape,
        events: &[EventRecord],
    ) -> std::result::Result<(), ModelError> {
        AssembledModel::advance_group(self, tape, events)
    }
}

/// Carry-through state for one segment's loss: the sampler, the loss
/// hyperparameters, and the previous segment's closing timestamp.
pub struct LossContext<'a> {
    pub sampler: &'a NegativeSampler,
    pub negatives: usize,
    pub mc_samples: usize,
    pub prev_time: f64,
}

/// The differentiable loss plus per-event diagnostics. The grand total is
/// the left-fold sum of `positive_terms[i] + survival_terms[i]`, one add
/// per event, so the decomposition is exact in floating point.
pub struct SegmentLoss {
    pub total: Tensor,
    pub positive_terms: Vec<f64>,
    pub survival_terms: Vec<f64>,
    pub skipped_negatives: usize,
}

/// Negative log-likelihood of one segment: for each event, -log lambda at
/// the event time plus integrated-intensity terms for the event and its
/// sampled negatives over the gap since the previous event. Rayleigh models
/// use the closed-form integral; neural models use the shared Monte-Carlo
/// sample grid. The model state advances through each concurrent group
/// after it is scored.
pub fn segment_loss<M: SegmentModel, R: Rng>(
    tape: &mut Tape,
    model: &mut M,
    events: &[EventRecord],
    ctx: &mut LossContext,
    rng: &mut R,
) -> Result<SegmentLoss> {
    let mut total: Option<Tensor> = None;
    let mut positive_terms = Vec::with_capacity(events.len());
    let mut survival_terms = Vec::with_capacity(events.len());
    let mut skipped = 0usize;
    let mut cache = EmbedCache::new();

    let mut i = 0;
    let mut prev_t = ctx.prev_time;
    while i < events.len() {
        let t = events[i].time;
        if t < prev_t {
            return Err(TrainError::NonMonotone { prev: prev_t, at: t });
        }
        let mut j = i;
        while j < events.len() && events[j].time == t {
            j += 1;
        }
        let group = &events[i..j];

        for (offset, event) in group.iter().enumerate() {
            let interval_start = if offset == 0 { prev_t } else { t };

            let mut candidates = Vec::with_capacity(ctx.negatives + 1);
            candidates.push(event.edge.clone());
            for n in 0..ctx.negatives {
                match ctx.sampler.sample(&event.edge, n, rng)? {
                    Some(neg) => candidates.push(neg),
                    None => skipped += 1,
                }
            }

            let lambda = model.intensity_at(tape, &mut cache, &event.edge, t)?;
            let log_lambda = tape.log(&lambda)?;
            let positive = tape.scale_const(&log_lambda, -1.0)?;

            let mut survival: Option<Tensor> = None;
            match model.family() {
                IntensityFamily::Rayleigh => {
                    for cand in &candidates {
                        let anchor = model.anchor_time(cand);
                        let a = interval_start.max(anchor);
                        if t <= a {
                            continue;
                        }
                        let width = 0.5 * ((t - anchor).powi(2) - (a - anchor).powi(2));
                        if width <= 0.0 {
                            continue;
                        }
                        let scale = model.rayleigh_scale(tape, &mut cache, cand)?;
                        let term = tape.scale_const(&scale, width)?;
                        survival = Some(match survival {
                            None => term,
                            Some(acc) => tape.add(&acc, &term)?,
                        });
                    }
                }
                IntensityFamily::Neural => {
                    if interval_start < t && ctx.mc_samples >= 2 {
                        let samples =
                            uniform_sorted_samples(rng, interval_start, t, ctx.mc_samples);
                        for s in 1..samples.len() {
                            let gap = samples[s] - samples[s - 1];
                            for cand in &candidates {
                                let lam = model.intensity_at(tape, &mut cache, cand, samples[s])?;
                                let term = tape.scale_const(&lam, gap)?;
                                survival = Some(match survival {
                                    None => term,
                                    Some(acc) => tape.add(&acc, &term)?,
                                });
                            }
                        }
                    }
                }
            }

            positive_terms.push(positive.item());
            let event_term = match survival {
                Some(surv) => {
                    survival_terms.push(surv.item());
                    tape.add(&positive, &surv)?
                }
                None => {
                    survival_terms.push(0.0);
                    positive
                }
            };
            total = Some(match total {
                None => event_term,
                Some(acc) => tape.add(&acc, &event_term)?,
            });
        }

        model.advance_group(tape, group)?;
        cache.reset();
        prev_t = t;
        i = j;
    }

    ctx.prev_time = prev_t;
    Ok(SegmentLoss {
        total: total.unwrap_or_else(|| Tensor::scalar(0.0)),
        positive_terms,
        survival_terms,
        skipped_negatives: skipped,
    })
}

/// Adam with the published defaults (moment decays 0.9/0.999, eps 1e-8).
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let shapes: Vec<usize> = params.ids().map(|id| params.value(id).len()).collect();
        Adam {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.step += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step as i32);
        let correction2 = 1.0 - self.beta2.powi(self.step as i32);
        for (ix, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let grad = params.grad(id).to_vec();
            let m = &mut self.m[ix];
            let v = &mut self.v[ix];
            for ((m_i, v_i), g) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *m_i = self.beta1 * *m_i + (1.0 - self.beta1) * g;
                *v_i = self.beta2 * *v_i + (1.0 - self.beta2) * g * g;
            }
            let beta1 = self.beta1;
            let beta2 = self.beta2;
            let eps = self.eps;
            let _ = (beta1, beta2);
            params.update_value(id, |vals| {
                for ((val, m_i), v_i) in vals.iter_mut().zip(m.iter()).zip(v.iter()) {
                    let m_hat = m_i / correction1;
                    let v_hat = v_i / correction2;
                    *val -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
    }
}

/// One row of the training trace.
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mrr: Option<f64>,
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
}

fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Epoch loop: replay the training stream from a cold start each epoch in
/// segments of `segment_len` events, backpropagate each segment's loss,
/// detach states across boundaries, and (optionally) track the best
/// parameters by validation MRR. The model ends up holding the best
/// parameters (when validation ran) with its runtime state reset.
pub fn train(
    model: &mut AssembledModel,
    train_events: &[EventRecord],
    val_events: &[EventRecord],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if train_events.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let sampler = NegativeSampler::fit(
        train_events,
        model.num_left(),
        model.num_right(),
        model.config.bipartite,
    )?;
    let mut adam = Adam::new(&model.params);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;

    for epoch in 0..config.epochs {
        model.reset();
        // the sampling stream restarts every epoch: negatives and
        // Monte-Carlo grids are identical across epochs, so the loss trace
        // moves only when the parameters do
        let mut rng = stream_rng(config.seed, 1);
        let mut prev_time = 0.0;
        let mut epoch_loss = 0.0;
        for (seg_ix, segment) in train_events.chunks(config.segment_len.max(1)).enumerate() {
            let mut tape = Tape::new();
            let mut ctx = LossContext {
                sampler: &sampler,
                negatives: config.negatives,
                mc_samples: config.mc_samples,
                prev_time,
            };
            let loss = segment_loss(&mut tape, model, segment, &mut ctx, &mut rng)?;
            let value = loss.total.item();
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    segment: seg_ix,
                });
            }
            epoch_loss += value;
            tape.backward(&loss.total, &mut model.params)?;
            adam.step(&mut model.params, config.lr);
            model.params.zero_grad();
            model.detach_states();
            prev_time = ctx.prev_time;
        }
        let train_loss = epoch_loss / train_events.len() as f64;

        let mut val_mrr = None;
        let mut val_mae = None;
        let validate = config.validate_every > 0
            && !val_events.is_empty()
            && (epoch + 1) % config.validate_every == 0;
        if validate {
            let mut probe = model.snapshot();
            let (metrics, _) = evaluate_stream(&mut probe, val_events, &sampler, &config.eval)
                .map_err(|e| TrainError::Validation(e.to_string()))?;
            val_mrr = Some(metrics.mrr);
            val_mae = metrics.mae;
            let improved = best
                .as_ref()
                .map(|(_, mrr, _)| metrics.mrr > *mrr)
                .unwrap_or(true);
            if improved {
                best = Some((epoch, metrics.mrr, model.params.snapshot()));
            }
        }
        trace.push(EpochRow {
            epoch,
            train_loss,
            val_mrr,
            val_mae,
        });
    }

    let best_epoch = best.as_ref().map(|(e, _, _)| *e);
    if let Some((_, _, params)) = best {
        model.params = params;
        model.reset();
    }
    Ok(TrainReport { trace, best_epoch })
}

/// Central-difference check of `loss_fn`'s analytic gradients over every
/// parameter entry of the model. `loss_fn` must be deterministic: it is
/// responsible for resetting model state and fixing its own sample seeds.
pub fn finite_difference_check_model<F>(
    model: &mut AssembledModel,
    mut loss_fn: F,
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&mut Tape, &mut AssembledModel) -> Result<Tensor>,
{
    model.params.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, model)?;
    tape.backward(&loss, &mut model.params)?;
    let ids: Vec<_> = model.params.ids().collect();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| model.params.grad(id).to_vec()).collect();

    let mut max_rel = 0.0f64;
    for (pix, &id) in ids.iter().enumerate() {
        for entry in 0..model.params.value(id).len() {
            model.params.nudge(id, entry, epsilon);
            let mut fwd = Tape::forward_only();
            let plus = loss_fn(&mut fwd, model)?.item();
            model.params.nudge(id, entry, -2.0 * epsilon);
            let mut fwd = Tape::forward_only();
            let minus = loss_fn(&mut fwd, model)?.item();
            model.params.nudge(id, entry, epsilon);
            let central = (plus - minus) / (2.0 * epsilon);
            let a = analytic[pix][entry];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
