//! Model assembly: every named model is a combination of stage flags,
//! an encoder kind, and an intensity family over one shared code path.

use std::collections::HashMap;

use thiserror::Error;

use crate::dynamics::{
    self, DynamicsError, DynamicsParams, HistoryWindow, NodeState, StageFlags,
};
use crate::encoders::{
    self, encode_bipartite, encode_homogeneous, encode_pairwise, BipartiteEncoderParams,
    EncoderError, HomogeneousEncoderParams,
};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, TensorError};
use crate::tpp::{EventRecord, Hyperedge, IntensityFn};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown model name `{0}`")]
    UnknownName(String),
    #[error("model {model} expects a {expected} dataset")]
    DatasetKindMismatch {
        model: &'static str,
        expected: &'static str,
    },
    #[error("node id {node} out of range for a universe of {universe}")]
    UnknownNode { node: usize, universe: usize },
    #[error("rayleigh intensity queried at {t} before the anchor {anchor}")]
    BeforeAnchor { t: f64, anchor: f64 },
    #[error("model needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityFamily {
    Neural,
    Rayleigh,
}

/// The model vocabulary. Flag combinations per name are fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelName {
    Rhe,
    Rdhe,
    DeDrift,
    De,
    DheDrift,
    Dhe,
    HgdheHist,
    Hgdhe,
    Bde,
    Bdhe,
    Hgbdhe,
}

impl ModelName {
    pub const ALL: [ModelName; 11] = [
        ModelName::Rhe,
        ModelName::Rdhe,
        ModelName::DeDrift,
        ModelName::De,
        ModelName::DheDrift,
        ModelName::Dhe,
        ModelName::HgdheHist,
        ModelName::Hgdhe,
        ModelName::Bde,
        ModelName::Bdhe,
        ModelName::Hgbdhe,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelName::Rhe => "RHE",
            ModelName::Rdhe => "RDHE",
            ModelName::DeDrift => "DE-drift",
            ModelName::De => "DE",
            ModelName::DheDrift => "DHE-drift",
            ModelName::Dhe => "DHE",
            ModelName::HgdheHist => "HGDHE-hist",
            ModelName::Hgdhe => "HGDHE",
            ModelName::Bde => "BDE",
            ModelName::Bdhe => "BDHE",
            ModelName::Hgbdhe => "HGBDHE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ModelName::ALL
            .iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| ModelError::UnknownName(s.to_string()))
    }
}

/// Which of the representation stages, edge structure, and intensity family
/// a model uses, plus its sizing knobs.
#[derive(Debug, Clone, Copy)]
pub struct ModelConfig {
    pub name: ModelName,
    pub stages: StageFlags,
    pub hyperedge: bool,
    pub bipartite: bool,
    pub family: IntensityFamily,
    pub dim: usize,
    pub history_capacity: usize,
}

impl ModelConfig {
    /// The fixed flag grid. RDHE keeps embeddings frozen between events
    /// (piecewise constant, interaction update only), matching its
    /// definition as the co-evolving baseline.
    pub fn for_name(name: ModelName, dim: usize, history_capacity: usize) -> Self {
        use ModelName::*;
        let (drift, hist, update, hyper, bip, family) = match name {
            Rhe => (false, false, false, true, false, IntensityFamily::Rayleigh),
            Rdhe => (false, false, true, true, false, IntensityFamily::Rayleigh),
            DeDrift => (true, false, false, false, false, IntensityFamily::Neural),
            De => (true, false, true, false, false, IntensityFamily::Neural),
            DheDrift => (true, false, false, true, false, IntensityFamily::Neural),
            Dhe => (true, false, true, true, false, IntensityFamily::Neural),
            HgdheHist => (true, true, false, true, false, IntensityFamily::Neural),
            Hgdhe => (true, true, true, true, false, IntensityFamily::Neural),
            Bde => (true, false, true, false, true, IntensityFamily::Neural),
            Bdhe => (true, false, true, true, true, IntensityFamily::Neural),
            Hgbdhe => (true, true, true, true, true, IntensityFamily::Neural),
        };
        ModelConfig {
            name,
            stages: StageFlags {
                temporal_drift: drift,
                history_aggregation: hist,
                interaction_update: update,
            },
            hyperedge: hyper,
            bipartite: bip,
            family,
            dim,
            history_capacity,
        }
    }
}

/// Which side of a bipartite model a node id refers to. Homogeneous models
/// only use `Left`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone)]
pub enum EncoderKind {
    Homogeneous(HomogeneousEncoderParams),
    Bipartite(BipartiteEncoderParams),
    /// Clique/cross decomposition baselines. The value matrices exist only
    /// when interaction update needs dynamic embeddings.
    Pairwise {
        left_value: Option<ParamId>,
        right_value: Option<ParamId>,
    },
}

/// Node states, history window, and stage weights of one node universe.
pub struct SideModel {
    pub dynamics: DynamicsParams,
    pub states: Vec<NodeState>,
    pub window: HistoryWindow,
    initial: Vec<ParamId>,
}

impl SideModel {
    fn snapshot(&self) -> SideModel {
        SideModel {
            dynamics: self.dynamics.clone(),
            states: self.states.clone(),
            window: self.window.clone(),
            initial: self.initial.clone(),
        }
    }

    fn reset(&mut self) {
        for (state, &id) in self.states.iter_mut().zip(&self.initial) {
            *state = NodeState::initial(id);
        }
        self.window.clear();
    }
}

/// Per-scoring-pass cache of node embeddings (keyed to one query time) and
/// aggregated history vectors (valid until the stream advances). Callers
/// must reset it after any state mutation and must not reuse tensors across
/// tapes within a recording pass.
#[derive(Default)]
pub struct EmbedCache {
    time: Option<f64>,
    embeddings: HashMap<(Side, usize), Tensor>,
    history: HashMap<(Side, usize), Tensor>,
}

impl EmbedCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.time = None;
        self.embeddings.clear();
        self.history.clear();
    }

    fn roll_to(&mut self, t: f64) {
        if self.time != Some(t) {
            self.embeddings.clear();
            self.time = Some(t);
        }
    }
}

/// A ready-to-train model: parameters plus runtime state.
pub struct AssembledModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub encoder: EncoderKind,
    pub left: SideModel,
    pub right: Option<SideModel>,
}

/// Build the named model over `num_left` (and, when bipartite, `num_right`)
/// nodes with seeded initialization.
pub fn assemble(config: ModelConfig, num_left: usize, num_right: usize, seed: u64) -> Result<AssembledModel> {
    if num_left < 2 {
        return Err(ModelError::TooFewNodes(num_left));
    }
    if config.bipartite && num_right == 0 {
        return Err(ModelError::DatasetKindMismatch {
            model: config.name.as_str(),
            expected: "bipartite",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let bound = 1.0 / (config.dim as f64).sqrt();

    let (left_prefix, right_prefix) = if config.bipartite {
        ("left.", Some("right."))
    } else {
        ("", None)
    };

    let left_dynamics =
        DynamicsParams::define(&mut params, left_prefix, config.dim, config.stages, &mut rng)?;
    let right_dynamics = right_prefix
        .map(|p| DynamicsParams::define(&mut params, p, config.dim, config.stages, &mut rng))
        .transpose()?;

    let encoder = match (config.hyperedge, config.bipartite) {
        (true, false) => EncoderKind::Homogeneous(HomogeneousEncoderParams::define(
            &mut params,
            "",
            config.dim,
            &mut rng,
        )?),
        (true, true) => EncoderKind::Bipartite(BipartiteEncoderParams::define(
            &mut params,
            "",
            config.dim,
            &mut rng,
        )?),
        (false, false) => EncoderKind::Pairwise {
            left_value: config
                .stages
                .interaction_update
                .then(|| {
                    params.define("W_V", Tensor::uniform(vec![config.dim, config.dim], bound, &mut rng))
                })
                .transpose()?,
            right_value: None,
        },
        (false, true) => {
            let (lv, rv) = if config.stages.interaction_update {
                (
                    Some(params.define(
                        "left.W_V",
                        Tensor::uniform(vec![config.dim, config.dim], bound, &mut rng),
                    )?),
                    Some(params.define(
                        "right.W_V",
                        Tensor::uniform(vec![config.dim, config.dim], bound, &mut rng),
                    )?),
                )
            } else {
                (None, None)
            };
            EncoderKind::Pairwise {
                left_value: lv,
                right_value: rv,
            }
        }
    };

    let mut define_side = |prefix: &str, n: usize, dynamics: DynamicsParams, rng: &mut ChaCha8Rng| -> Result<SideModel> {
        let mut initial = Vec::with_capacity(n);
        for v in 0..n {
            initial.push(params.define(
                &format!("{prefix}node_embed.{v}"),
                Tensor::uniform(vec![config.dim], bound, rng),
            )?);
        }
        let states = initial.iter().map(|&id| NodeState::initial(id)).collect();
        Ok(SideModel {
            dynamics,
            states,
            window: HistoryWindow::new(config.history_capacity),
            initial,
        })
    };

    let left = define_side(left_prefix, num_left, left_dynamics, &mut rng)?;
    let right = match right_dynamics {
        Some(dynamics) => Some(define_side("right.", num_right, dynamics, &mut rng)?),
        None => None,
    };

    Ok(AssembledModel {
        config,
        params,
        encoder,
        left,
        right,
    })
}

impl AssembledModel {
    pub fn num_left(&self) -> usize {
        self.left.states.len()
    }

    pub fn num_right(&self) -> usize {
        self.right.as_ref().map_or(0, |s| s.states.len())
    }

    fn side(&self, side: Side) -> &SideModel {
        match side {
            Side::Left => &self.left,
            Side::Right => self.right.as_ref().expect("bipartite model"),
        }
    }

    fn check_edge(&self, h: &Hyperedge) -> Result<()> {
        match h {
            Hyperedge::Homogeneous(nodes) => {
                if self.config.bipartite {
                    return Err(ModelError::DatasetKindMismatch {
                        model: self.config.name.as_str(),
                        expected: "bipartite",
                    });
                }
                for &v in nodes {
                    if v >= self.num_left() {
                        return Err(ModelError::UnknownNode {
                            node: v,
                            universe: self.num_left(),
                        });
                    }
                }
            }
            Hyperedge::Bipartite(l, r) => {
                if !self.config.bipartite {
                    return Err(ModelError::DatasetKindMismatch {
                        model: self.config.name.as_str(),
                        expected: "homogeneous",
                    });
                }
                for &v in l {
                    if v >= self.num_left() {
                        return Err(ModelError::UnknownNode {
                            node: v,
                            universe: self.num_left(),
                        });
                    }
                }
                for &v in r {
                    if v >= self.num_right() {
                        return Err(ModelError::UnknownNode {
                            node: v,
                            universe: self.num_right(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Most recent interaction time over the member nodes (the survival
    /// anchor t_h^p).
    pub fn anchor_time(&self, h: &Hyperedge) -> f64 {
        let mut anchor: f64 = 0.0;
        for &v in h.left() {
            anchor = anchor.max(self.left.states[v].last_time);
        }
        if let Some(right) = &self.right {
            for &v in h.right() {
                anchor = anchor.max(right.states[v].last_time);
            }
        }
        anchor
    }

    /// Embedding of one node at query time `t`, cached per (side, node, t).
    fn embedding(
        &self,
        tape: &mut Tape,
        cache: &mut EmbedCache,
        side: Side,
        node: usize,
        t: f64,
    ) -> Result<Tensor> {
        cache.roll_to(t);
        if let Some(e) = cache.embeddings.get(&(side, node)) {
            return Ok(e.clone());
        }
        let sm = self.side(side);
        let history = if self.config.stages.history_aggregation {
            if let Some(vs) = cache.history.get(&(side, node)) {
                Some(vs.clone())
            } else {
                let theta = sm
                    .dynamics
                    .hgnn
                    .ok_or(DynamicsError::MissingStage("Theta"))?;
                let mut vs_map = dynamics::history_aggregate(
                    tape,
                    &self.params,
                    &sm.window,
                    &sm.states,
                    theta,
                    &[node],
                )?;
                let vs = vs_map.remove(&node).expect("requested node");
                cache.history.insert((side, node), vs.clone());
                Some(vs)
            }
        } else {
            None
        };
        let emb = dynamics::embedding_at(
            tape,
            &self.params,
            &sm.dynamics,
            &sm.states[node],
            history.as_ref(),
            t,
        )?;
        cache.embeddings.insert((side, node), emb.clone());
        Ok(emb)
    }

    /// Forward-only embedding values, for inspection and tests.
    pub fn node_embedding_value(&self, side: Side, node: usize, t: f64) -> Result<Vec<f64>> {
        let mut tape = Tape::forward_only();
        let mut cache = EmbedCache::new();
        Ok(self
            .embedding(&mut tape, &mut cache, side, node, t)?
            .values()
            .to_vec())
    }

    /// The positive scale factor of a Rayleigh model: the encoder score over
    /// embeddings at the anchor time.
    pub fn rayleigh_scale(
        &self,
        tape: &mut Tape,
        cache: &mut EmbedCache,
        h: &Hyperedge,
    ) -> Result<Tensor> {
        let anchor = self.anchor_time(h);
        let enc = match &self.encoder {
            EncoderKind::Homogeneous(enc) => enc,
            _ => unreachable!("rayleigh models are homogeneous hyperedge models"),
        };
        let embeds: Vec<Tensor> = h
            .left()
            .iter()
            .map(|&v| self.embedding(tape, cache, Side::Left, v, anchor))
            .collect::<Result<_>>()?;
        Ok(encode_homogeneous(tape, &self.params, enc, &embeds)?.score)
    }

    /// Differentiable conditional intensity of candidate `h` at time `t`.
    pub fn intensity_at(
        &self,
        tape: &mut Tape,
        cache: &mut EmbedCache,
        h: &Hyperedge,
        t: f64,
    ) -> Result<Tensor> {
        self.check_edge(h)?;
        match self.config.family {
            IntensityFamily::Rayleigh => {
                let anchor = self.anchor_time(h);
                if t < anchor {
                    return Err(ModelError::BeforeAnchor { t, anchor });
                }
                let scale = self.rayleigh_scale(tape, cache, h)?;
                Ok(tape.scale_const(&scale, t - anchor)?)
            }
            IntensityFamily::Neural => match (&self.encoder, h) {
                (EncoderKind::Homogeneous(enc), Hyperedge::Homogeneous(nodes)) => {
                    let embeds: Vec<Tensor> = nodes
                        .iter()
                        .map(|&v| self.embedding(tape, cache, Side::Left, v, t))
                        .collect::<Result<_>>()?;
                    Ok(encode_homogeneous(tape, &self.params, enc, &embeds)?.score)
                }
                (EncoderKind::Bipartite(enc), Hyperedge::Bipartite(l, r)) => {
                    let lefts: Vec<Tensor> = l
                        .iter()
                        .map(|&v| self.embedding(tape, cache, Side::Left, v, t))
                        .collect::<Result<_>>()?;
                    let rights: Vec<Tensor> = r
                        .iter()
                        .map(|&v| self.embedding(tape, cache, Side::Right, v, t))
                        .collect::<Result<_>>()?;
                    Ok(encode_bipartite(tape, &self.params, enc, &lefts, &rights)?.score)
                }
                (EncoderKind::Pairwise { .. }, Hyperedge::Homogeneous(nodes)) => {
                    let pairs = encoders::clique_decompose(nodes)?;
                    let mut product: Option<Tensor> = None;
                    for (a, b) in pairs {
                        let va = self.embedding(tape, cache, Side::Left, a, t)?;
                        let vb = self.embedding(tape, cache, Side::Left, b, t)?;
                        let s = encode_pairwise(tape, &va, &vb)?;
                        product = Some(match product {
                            None => s,
                            Some(p) => tape.mul(&p, &s)?,
                        });
                    }
                    Ok(product.expect("at least one pair"))
                }
                (EncoderKind::Pairwise { .. }, Hyperedge::Bipartite(l, r)) => {
                    let mut product: Option<Tensor> = None;
                    for &a in l.iter() {
                        for &b in r.iter() {
                            let va = self.embedding(tape, cache, Side::Left, a, t)?;
                            let vb = self.embedding(tape, cache, Side::Right, b, t)?;
                            let s = encode_pairwise(tape, &va, &vb)?;
                            product = Some(match product {
                                None => s,
                                Some(p) => tape.mul(&p, &s)?,
                            });
                        }
                    }
                    Ok(product.expect("nonempty sides"))
                }
                _ => unreachable!("encoder kind matches edge kind"),
            },
        }
    }

    /// Plain-number intensity (forward only).
    pub fn intensity_value(&self, h: &Hyperedge, t: f64) -> Result<f64> {
        let mut tape = Tape::forward_only();
        let mut cache = EmbedCache::new();
        Ok(self.intensity_at(&mut tape, &mut cache, h, t)?.item())
    }

    /// Advance states and windows through one group of concurrent events.
    /// All events must share a timestamp and both score-time embeddings and
    /// updates use the pre-group state.
    pub fn advance_group(&mut self, tape: &mut Tape, events: &[EventRecord]) -> Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let t = events[0].time;
        for e in events {
            self.check_edge(&e.edge)?;
            debug_assert_eq!(e.time, t, "advance group must share one timestamp");
        }

        if !self.config.bipartite {
            // clique baselines treat one hyperedge as concurrent pair events
            let update_events: Vec<(Vec<usize>, f64)> = if self.config.hyperedge {
                events.iter().map(|e| (e.edge.left().to_vec(), t)).collect()
            } else {
                let mut pairs = Vec::new();
                for e in events {
                    for (a, b) in encoders::clique_decompose(e.edge.left())? {
                        pairs.push((vec![a, b], t));
                    }
                }
                pairs
            };

            let params = &self.params;
            let encoder = self.encoder.clone();
            let config = self.config;
            let left = &mut self.left;
            // the window receives the observed hyperedges, never the
            // decomposed pairs
            let mut scratch_window = HistoryWindow::new(1);
            let window = if config.hyperedge {
                &mut left.window
            } else {
                &mut scratch_window
            };
            dynamics::advance_stream(
                tape,
                params,
                &left.dynamics,
                &mut left.states,
                window,
                &update_events,
                |tape, members| match (&encoder, config.hyperedge) {
                    (EncoderKind::Homogeneous(enc), true) => {
                        Ok(encode_homogeneous(tape, params, enc, members)
                            .map_err(DynamicsError::from_encoder)?
                            .left_dynamic)
                    }
                    (EncoderKind::Pairwise { left_value, .. }, false) => {
                        // pair event: each end's dynamic embedding is the
                        // value projection of its peer
                        let w_v = tape.param(
                            params,
                            left_value.ok_or(DynamicsError::MissingStage("W_V"))?,
                        );
                        let d0 = {
                            let m = tape.matmul(&members[1], &w_v)?;
                            tape.tanh(&m)?
                        };
                        let d1 = {
                            let m = tape.matmul(&members[0], &w_v)?;
                            tape.tanh(&m)?
                        };
                        Ok(vec![d0, d1])
                    }
                    _ => unreachable!("encoder kind matches model structure"),
                },
            )?;
            if !self.config.hyperedge {
                for e in events {
                    self.left.window.push(e.edge.left().to_vec(), t);
                }
            }
            return Ok(());
        }

        self.advance_group_bipartite(tape, events, t)
    }

    fn advance_group_bipartite(
        &mut self,
        tape: &mut Tape,
        events: &[EventRecord],
        t: f64,
    ) -> Result<()> {
        let mut involved_left: Vec<usize> = events
            .iter()
            .flat_map(|e| e.edge.left().iter().copied())
            .collect();
        involved_left.sort_unstable();
        involved_left.dedup();
        let mut involved_right: Vec<usize> = events
            .iter()
            .flat_map(|e| e.edge.right().iter().copied())
            .collect();
        involved_right.sort_unstable();
        involved_right.dedup();

        if self.config.stages.interaction_update {
            let mut cache = EmbedCache::new();
            let mut left_in: HashMap<usize, Vec<Tensor>> = HashMap::new();
            let mut right_in: HashMap<usize, Vec<Tensor>> = HashMap::new();

            for e in events {
                let (l, r) = (e.edge.left(), e.edge.right());
                let lefts: Vec<Tensor> = l
                    .iter()
                    .map(|&v| self.embedding(tape, &mut cache, Side::Left, v, t))
                    .collect::<Result<_>>()?;
                let rights: Vec<Tensor> = r
                    .iter()
                    .map(|&v| self.embedding(tape, &mut cache, Side::Right, v, t))
                    .collect::<Result<_>>()?;
                match &self.encoder {
                    EncoderKind::Bipartite(enc) => {
                        let out = encode_bipartite(tape, &self.params, enc, &lefts, &rights)?;
                        for (v, d) in l.iter().zip(out.left_dynamic) {
                            left_in.entry(*v).or_default().push(d);
                        }
                        for (v, d) in r.iter().zip(out.right_dynamic) {
                            right_in.entry(*v).or_default().push(d);
                        }
                    }
                    EncoderKind::Pairwise {
                        left_value,
                        right_value,
                    } => {
                        // cross pairs: a left node's dynamic embedding uses
                        // the right side's value weights and vice versa
                        let w_v_left = tape.param(
                            &self.params,
                            left_value.ok_or(DynamicsError::MissingStage("left.W_V"))?,
                        );
                        let w_v_right = tape.param(
                            &self.params,
                            right_value.ok_or(DynamicsError::MissingStage("right.W_V"))?,
                        );
                        for (li, &lv) in l.iter().enumerate() {
                            for (ri, &rv) in r.iter().enumerate() {
                                let dl = {
                                    let m = tape.matmul(&rights[ri], &w_v_right)?;
                                    tape.tanh(&m)?
                                };
                                let dr = {
                                    let m = tape.matmul(&lefts[li], &w_v_left)?;
                                    tape.tanh(&m)?
                                };
                                left_in.entry(lv).or_default().push(dl);
                                right_in.entry(rv).or_default().push(dr);
                            }
                        }
                    }
                    EncoderKind::Homogeneous(_) => {
                        unreachable!("bipartite model with homogeneous encoder")
                    }
                }
            }

            for &v in &involved_left {
                let ds = left_in.remove(&v).unwrap_or_default();
                self.left.states[v] = dynamics::interaction_update(
                    tape,
                    &self.params,
                    &self.left.dynamics,
                    &self.left.states[v],
                    &ds,
                    t,
                )?;
            }
            let right = self.right.as_mut().expect("bipartite model");
            for &v in &involved_right {
                let ds = right_in.remove(&v).unwrap_or_default();
                right.states[v] = dynamics::interaction_update(
                    tape,
                    &self.params,
                    &right.dynamics,
                    &right.states[v],
                    &ds,
                    t,
                )?;
            }
        } else {
            for &v in &involved_left {
                self.left.states[v].last_time = t;
            }
            let right = self.right.as_mut().expect("bipartite model");
            for &v in &involved_right {
                right.states[v].last_time = t;
            }
        }

        for e in events {
            self.left.window.push(e.edge.left().to_vec(), t);
            self.right
                .as_mut()
                .expect("bipartite model")
                .window
                .push(e.edge.right().to_vec(), t);
        }
        Ok(())
    }

    /// Cut gradient paths at a segment boundary.
    pub fn detach_states(&mut self) {
        for s in self.left.states.iter_mut() {
            s.detach();
        }
        if let Some(right) = &mut self.right {
            for s in right.states.iter_mut() {
                s.detach();
            }
        }
    }

    /// Cold start: initial embeddings, zero interaction times, empty windows.
    pub fn reset(&mut self) {
        self.left.reset();
        if let Some(right) = &mut self.right {
            right.reset();
        }
    }

    /// Deep copy of parameters and runtime state.
    pub fn snapshot(&self) -> AssembledModel {
        AssembledModel {
            config: self.config,
            params: self.params.snapshot(),
            encoder: self.encoder.clone(),
            left: self.left.snapshot(),
            right: self.right.as_ref().map(|r| r.snapshot()),
        }
    }
}

impl DynamicsError {
    fn from_encoder(e: EncoderError) -> DynamicsError {
        match e {
            EncoderError::Tensor(t) => DynamicsError::Tensor(t),
            other => DynamicsError::Encode(other.to_string()),
        }
    }
}

/// Numeric intensity adapter for duration quadrature over a frozen model.
pub struct CandidateIntensity<'a> {
    pub model: &'a AssembledModel,
    pub edge: &'a Hyperedge,
}

impl IntensityFn for CandidateIntensity<'_> {
    fn lambda(&self, t: f64) -> f64 {
        self.model.intensity_value(self.edge, t).unwrap_or(0.0)
    }
}

/// The exact parameter names `assemble` registers for a configuration; the
/// manifest invariant checks the built set against this.
pub fn expected_parameter_names(
    config: &ModelConfig,
    num_left: usize,
    num_right: usize,
) -> Vec<String> {
    let mut names = Vec::new();
    let evolves = config.stages.temporal_drift || config.stages.history_aggregation;
    let needs_time = config.stages.temporal_drift || config.stages.interaction_update;
    let side_names = |prefix: &str, names: &mut Vec<String>| {
        if evolves {
            names.push(format!("{prefix}W0"));
        }
        if config.stages.temporal_drift {
            names.push(format!("{prefix}W1"));
        }
        if config.stages.history_aggregation {
            names.push(format!("{prefix}W2"));
        }
        if evolves {
            names.push(format!("{prefix}b0"));
        }
        if config.stages.interaction_update {
            for n in ["W3", "W4", "W5", "b1"] {
                names.push(format!("{prefix}{n}"));
            }
        }
        if needs_time {
            names.push(format!("{prefix}omega"));
            names.push(format!("{prefix}theta"));
        }
        if config.stages.history_aggregation {
            names.push(format!("{prefix}Theta"));
        }
    };
    let encoder_names = |prefix: &str, names: &mut Vec<String>| {
        for n in ["W_Q", "W_K", "W_V", "W_s", "W_o", "b_o"] {
            names.push(format!("{prefix}{n}"));
        }
    };
    if config.bipartite {
        side_names("left.", &mut names);
        side_names("right.", &mut names);
        if config.hyperedge {
            encoder_names("left.", &mut names);
            encoder_names("right.", &mut names);
        } else if config.stages.interaction_update {
            names.push("left.W_V".into());
            names.push("right.W_V".into());
        }
        for v in 0..num_left {
            names.push(format!("left.node_embed.{v}"));
        }
        for v in 0..num_right {
            names.push(format!("right.node_embed.{v}"));
        }
    } else {
        side_names("", &mut names);
        if config.hyperedge {
            encoder_names("", &mut names);
        } else if config.stages.interaction_update {
            names.push("W_V".into());
        }
        for v in 0..num_left {
            names.push(format!("node_embed.{v}"));
        }
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::EmbeddingRef;
    use std::collections::BTreeSet;

    fn model(name: ModelName, n_left: usize, n_right: usize, seed: u64) -> AssembledModel {
        let config = ModelConfig::for_name(name, 4, 8);
        assemble(config, n_left, n_right, seed).unwrap()
    }

    fn ev(nodes: &[usize], t: f64) -> EventRecord {
        EventRecord {
            edge: Hyperedge::homogeneous(nodes.to_vec()).unwrap(),
            time: t,
        }
    }

    #[test]
    fn flag_grid_matches_the_published_table() {
        use ModelName::*;
        // (name, drift, history, update, hyperedge, bipartite)
        let grid = [
            (Rhe, false, false, false, true, false),
            (Rdhe, false, false, true, true, false),
            (DeDrift, true, false, false, false, false),
            (De, true, false, true, false, false),
            (DheDrift, true, false, false, true, false),
            (Dhe, true, false, true, true, false),
            (HgdheHist, true, true, false, true, false),
            (Hgdhe, true, true, true, true, false),
            (Bde, true, false, true, false, true),
            (Bdhe, true, false, true, true, true),
            (Hgbdhe, true, true, true, true, true),
        ];
        for (name, drift, hist, update, hyper, bip) in grid {
            let c = ModelConfig::for_name(name, 8, 16);
            assert_eq!(c.stages.temporal_drift, drift, "{name:?} drift");
            assert_eq!(c.stages.history_aggregation, hist, "{name:?} history");
            assert_eq!(c.stages.interaction_update, update, "{name:?} update");
            assert_eq!(c.hyperedge, hyper, "{name:?} hyperedge");
            assert_eq!(c.bipartite, bip, "{name:?} bipartite");
            let rayleigh = matches!(name, Rhe | Rdhe);
            assert_eq!(
                c.family == IntensityFamily::Rayleigh,
                rayleigh,
                "{name:?} family"
            );
        }
    }

    #[test]
    fn parse_round_trips_every_name() {
        for name in ModelName::ALL {
            assert_eq!(ModelName::parse(name.as_str()).unwrap(), name);
        }
        assert!(matches!(
            ModelName::parse("HYPE"),
            Err(ModelError::UnknownName(_))
        ));
    }

    #[test]
    fn parameter_manifest_matches_golden_set() {
        for name in ModelName::ALL {
            let config = ModelConfig::for_name(name, 4, 8);
            let (nl, nr) = if config.bipartite { (3, 2) } else { (3, 0) };
            let m = assemble(config, nl, nr, 1).unwrap();
            let got: BTreeSet<String> =
                m.params.iter().map(|p| p.name().to_string()).collect();
            let expect: BTreeSet<String> = expected_parameter_names(&config, nl, nr)
                .into_iter()
                .collect();
            assert_eq!(got, expect, "manifest mismatch for {name:?}");
        }
    }

    #[test]
    fn rayleigh_intensity_vanishes_at_the_anchor() {
        let m = model(ModelName::Rhe, 4, 0, 3);
        let h = Hyperedge::homogeneous(vec![0, 1]).unwrap();
        let lambda = m.intensity_value(&h, 0.0).unwrap();
        assert_eq!(lambda, 0.0);
        let later = m.intensity_value(&h, 2.0).unwrap();
        assert!(later > 0.0);
        // linear in (t - anchor)
        let half = m.intensity_value(&h, 1.0).unwrap();
        assert!((later - 2.0 * half).abs() < 1e-12);
    }

    #[test]
    fn neural_intensity_is_positive() {
        for name in [ModelName::Dhe, ModelName::Hgdhe, ModelName::De] {
            let m = model(name, 4, 0, 5);
            let h = Hyperedge::homogeneous(vec![0, 2]).unwrap();
            assert!(m.intensity_value(&h, 1.0).unwrap() > 0.0, "{name:?}");
        }
    }

    #[test]
    fn clique_product_of_equal_scores_is_a_cube() {
        // identical embeddings make all three pairwise scores equal
        let mut m = model(ModelName::De, 3, 0, 7);
        let shared = Tensor::vector(vec![0.3, -0.2, 0.5, 0.1]);
        for v in 0..3 {
            let id = m.params.id(&format!("node_embed.{v}")).unwrap();
            m.params.set_value(id, shared.clone()).unwrap();
        }
        let h = Hyperedge::homogeneous(vec![0, 1, 2]).unwrap();
        let lambda = m.intensity_value(&h, 0.5).unwrap();
        let pair = Hyperedge::homogeneous(vec![0, 1]).unwrap();
        let s = m.intensity_value(&pair, 0.5).unwrap();
        assert!((lambda - s.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn rdhe_embeddings_are_piecewise_constant() {
        let mut m = model(ModelName::Rdhe, 4, 0, 11);
        let mut tape = Tape::forward_only();
        m.advance_group(&mut tape, &[ev(&[0, 1], 1.0)]).unwrap();
        let a = m.node_embedding_value(Side::Left, 0, 1.5).unwrap();
        let b = m.node_embedding_value(Side::Left, 0, 3.9).unwrap();
        assert_eq!(a, b);
        // and the update did change the embedding
        let before = model(ModelName::Rdhe, 4, 0, 11)
            .node_embedding_value(Side::Left, 0, 0.0)
            .unwrap();
        assert_ne!(a, before);
    }

    #[test]
    fn drift_only_models_ignore_unrelated_events() {
        let run = |swap: bool| -> Vec<f64> {
            let mut m = model(ModelName::DheDrift, 5, 0, 13);
            let mut tape = Tape::forward_only();
            let mut events = vec![ev(&[1, 2], 1.0), ev(&[3, 4], 2.0)];
            if swap {
                // reorder events that never touch node 0
                events = vec![ev(&[3, 4], 1.0), ev(&[1, 2], 2.0)];
            }
            for e in events {
                m.advance_group(&mut tape, &[e]).unwrap();
            }
            m.node_embedding_value(Side::Left, 0, 3.0).unwrap()
        };
        assert_eq!(run(false), run(true));
    }

    #[test]
    fn interaction_update_disabled_keeps_initial_embedding_but_advances_time() {
        let mut m = model(ModelName::HgdheHist, 4, 0, 17);
        let mut tape = Tape::forward_only();
        m.advance_group(&mut tape, &[ev(&[0, 1], 2.0)]).unwrap();
        assert_eq!(m.left.states[0].last_time, 2.0);
        assert!(matches!(
            m.left.states[0].embedding,
            EmbeddingRef::Param(_)
        ));
    }

    #[test]
    fn bipartite_models_reject_homogeneous_edges_and_vice_versa() {
        let m = model(ModelName::Bdhe, 3, 2, 19);
        let homo = Hyperedge::homogeneous(vec![0, 1]).unwrap();
        assert!(matches!(
            m.intensity_value(&homo, 1.0),
            Err(ModelError::DatasetKindMismatch { .. })
        ));
        let m2 = model(ModelName::Dhe, 3, 0, 19);
        let bip = Hyperedge::bipartite(vec![0], vec![1]).unwrap();
        assert!(matches!(
            m2.intensity_value(&bip, 1.0),
            Err(ModelError::DatasetKindMismatch { .. })
        ));
        let far = Hyperedge::homogeneous(vec![0, 9]).unwrap();
        assert!(matches!(
            m2.intensity_value(&far, 1.0),
            Err(ModelError::UnknownNode { .. })
        ));
    }

    #[test]
    fn bipartite_intensity_and_updates_work() {
        let mut m = model(ModelName::Hgbdhe, 3, 2, 23);
        let h = Hyperedge::bipartite(vec![0, 1], vec![0]).unwrap();
        assert!(m.intensity_value(&h, 0.5).unwrap() > 0.0);
        let mut tape = Tape::forward_only();
        m.advance_group(
            &mut tape,
            &[EventRecord {
                edge: h.clone(),
                time: 1.0,
            }],
        )
        .unwrap();
        assert_eq!(m.left.states[0].last_time, 1.0);
        assert_eq!(m.right.as_ref().unwrap().states[0].last_time, 1.0);
        assert_eq!(m.left.states[2].last_time, 0.0);
        assert!(m.intensity_value(&h, 1.5).unwrap() > 0.0);
    }

    #[test]
    fn reset_restores_cold_start() {
        let mut m = model(ModelName::Hgdhe, 4, 0, 29);
        let before = m.node_embedding_value(Side::Left, 0, 0.0).unwrap();
        let mut tape = Tape::forward_only();
        m.advance_group(&mut tape, &[ev(&[0, 1], 1.0)]).unwrap();
        m.reset();
        assert_eq!(m.left.states[0].last_time, 0.0);
        assert!(m.left.window.is_empty());
        assert_eq!(m.node_embedding_value(Side::Left, 0, 0.0).unwrap(), before);
    }

    #[test]
    fn snapshot_is_independent_of_the_original() {
        let mut m = model(ModelName::Dhe, 4, 0, 31);
        let snap = m.snapshot();
        let mut tape = Tape::forward_only();
        m.advance_group(&mut tape, &[ev(&[0, 1], 1.0)]).unwrap();
        assert_eq!(snap.left.states[0].last_time, 0.0);
        assert_eq!(m.left.states[0].last_time, 1.0);
    }

    #[test]
    fn concurrent_hyperedges_share_the_group_mean() {
        let mut m = model(ModelName::Dhe, 4, 0, 37);
        let mut tape = Tape::forward_only();
        m.advance_group(&mut tape, &[ev(&[0, 1], 1.0), ev(&[0, 2], 1.0)])
            .unwrap();
        assert_eq!(m.left.states[0].last_time, 1.0);
        assert_eq!(m.left.states[1].last_time, 1.0);
        assert_eq!(m.left.states[2].last_time, 1.0);
    }
}
