//! Dynamic node representations evolved through three stages: temporal
//! drift between events, hypergraph-convolution aggregation over a window
//! of recent events, and a post-event interaction update.

use std::collections::{BTreeMap, HashMap, VecDeque};

use thiserror::Error;

use crate::tensor::{ParamId, ParamSet, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("query time {t} precedes the node's last interaction at {last}")]
    TimeBeforeLastEvent { t: f64, last: f64 },
    #[error("interaction update needs at least one dynamic embedding")]
    NoDynamicEmbeddings,
    #[error("history aggregation requested for unknown node {0}")]
    UnknownNode(usize),
    #[error("stage parameter missing: {0}")]
    MissingStage(&'static str),
    #[error("encoding failed during interaction update: {0}")]
    Encode(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

/// Which representation stages a model enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageFlags {
    pub temporal_drift: bool,
    pub history_aggregation: bool,
    pub interaction_update: bool,
}

impl StageFlags {
    pub fn none() -> Self {
        StageFlags {
            temporal_drift: false,
            history_aggregation: false,
            interaction_update: false,
        }
    }
}

/// Where a node's current embedding lives: the seeded initial parameter
/// before any interaction (and forever, when interaction update is off),
/// or the evolving value produced by the last update.
#[derive(Clone)]
pub enum EmbeddingRef {
    Param(ParamId),
    Value(Tensor),
}

/// Per-node snapshot: embedding just after the previous interaction and the
/// time of that interaction (0 before any event).
#[derive(Clone)]
pub struct NodeState {
    pub embedding: EmbeddingRef,
    pub last_time: f64,
}

impl NodeState {
    pub fn initial(param: ParamId) -> Self {
        NodeState {
            embedding: EmbeddingRef::Param(param),
            last_time: 0.0,
        }
    }

    pub fn resolve(&self, tape: &mut Tape, params: &ParamSet) -> Tensor {
        match &self.embedding {
            EmbeddingRef::Param(id) => tape.param(params, *id),
            EmbeddingRef::Value(t) => t.clone(),
        }
    }

    /// Cut the gradient path into this state (segment boundary).
    pub fn detach(&mut self) {
        if let EmbeddingRef::Value(t) = &self.embedding {
            self.embedding = EmbeddingRef::Value(t.detached());
        }
    }
}

/// Weights of the three stages; fields exist only for enabled stages so
/// that a model's parameter manifest is exactly its enabled-stage union.
#[derive(Clone)]
pub struct DynamicsParams {
    pub w0: Option<ParamId>,
    pub w1: Option<ParamId>,
    pub w2: Option<ParamId>,
    pub b0: Option<ParamId>,
    pub w3: Option<ParamId>,
    pub w4: Option<ParamId>,
    pub w5: Option<ParamId>,
    pub b1: Option<ParamId>,
    pub omega: Option<ParamId>,
    pub theta: Option<ParamId>,
    pub hgnn: Option<ParamId>,
    pub flags: StageFlags,
}

impl DynamicsParams {
    /// Register the stage parameters enabled by `flags` under `prefix`.
    pub fn define<R: rand::Rng>(
        params: &mut ParamSet,
        prefix: &str,
        dim: usize,
        flags: StageFlags,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let mat = |name: &str, params: &mut ParamSet, rng: &mut R| {
            params
                .define(
                    &format!("{prefix}{name}"),
                    Tensor::uniform(vec![dim, dim], bound, rng),
                )
                .map_err(DynamicsError::from)
        };
        let evolves = flags.temporal_drift || flags.history_aggregation;
        let needs_time = flags.temporal_drift || flags.interaction_update;
        let w0 = evolves.then(|| mat("W0", params, rng)).transpose()?;
        let w1 = flags
            .temporal_drift
            .then(|| mat("W1", params, rng))
            .transpose()?;
        let w2 = flags
            .history_aggregation
            .then(|| mat("W2", params, rng))
            .transpose()?;
        let b0 = evolves
            .then(|| params.define(&format!("{prefix}b0"), Tensor::zeros(vec![dim])))
            .transpose()?;
        let w3 = flags
            .interaction_update
            .then(|| mat("W3", params, rng))
            .transpose()?;
        let w4 = flags
            .interaction_update
            .then(|| mat("W4", params, rng))
            .transpose()?;
        let w5 = flags
            .interaction_update
            .then(|| mat("W5", params, rng))
            .transpose()?;
        let b1 = flags
            .interaction_update
            .then(|| params.define(&format!("{prefix}b1"), Tensor::zeros(vec![dim])))
            .transpose()?;
        let omega = needs_time
            .then(|| {
                params.define(
                    &format!("{prefix}omega"),
                    Tensor::uniform(vec![dim], bound, rng),
                )
            })
            .transpose()?;
        let theta = needs_time
            .then(|| {
                params.define(
                    &format!("{prefix}theta"),
                    Tensor::uniform(vec![dim], bound, rng),
                )
            })
            .transpose()?;
        let hgnn = flags
            .history_aggregation
            .then(|| mat("Theta", params, rng))
            .transpose()?;
        Ok(DynamicsParams {
            w0,
            w1,
            w2,
            b0,
            w3,
            w4,
            w5,
            b1,
            omega,
            theta,
            hgnn,
            flags,
        })
    }
}

/// Fourier time features cos(omega_i * t + theta_i), entries in [-1, 1].
pub fn time_features(
    tape: &mut Tape,
    params: &ParamSet,
    omega: ParamId,
    theta: ParamId,
    elapsed: f64,
) -> Result<Tensor> {
    let w = tape.param(params, omega);
    let th = tape.param(params, theta);
    let scaled = tape.scale_const(&w, elapsed)?;
    let arg = tape.add(&scaled, &th)?;
    Ok(tape.cos(&arg)?)
}

/// Ring buffer of the last `capacity` events, in nondecreasing time order.
/// Only the membership structure is stored; embeddings are read from the
/// node states at aggregation time.
#[derive(Clone)]
pub struct HistoryWindow {
    capacity: usize,
    events: VecDeque<(Vec<usize>, f64)>,
}

impl HistoryWindow {
    pub fn new(capacity: usize) -> Self {
        HistoryWindow {
            capacity: capacity.max(1),
            events: VecDeque::new(),
        }
    }

    pub fn push(&mut self, nodes: Vec<usize>, time: f64) {
        if self.events.len() == self.capacity {
            self.events.pop_front();
        }
        self.events.push_back((nodes, time));
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn clear(&mut self) {
        self.events.clear();
    }

    pub fn events(&self) -> impl Iterator<Item = &(Vec<usize>, f64)> {
        self.events.iter()
    }
}

/// One symmetric-normalized hypergraph convolution over the window:
/// X_out = D_v^{-1/2} H D_e^{-1} H^T D_v^{-1/2} X Theta with unit edge
/// weights. Nodes in no window event get zero vectors, as does everything
/// when the window is empty.
///
/// Returns the aggregated vector for each node in `wanted`.
pub fn history_aggregate(
    tape: &mut Tape,
    params: &ParamSet,
    window: &HistoryWindow,
    states: &[NodeState],
    theta: ParamId,
    wanted: &[usize],
) -> Result<HashMap<usize, Tensor>> {
    let dim = params.value(theta).shape()[0];
    let mut out = HashMap::with_capacity(wanted.len());
    for &u in wanted {
        if u >= states.len() {
            return Err(DynamicsError::UnknownNode(u));
        }
    }
    if window.is_empty() {
        for &u in wanted {
            out.insert(u, Tensor::zeros(vec![dim]));
        }
        return Ok(out);
    }

    // node degrees over the window
    let mut degree: HashMap<usize, f64> = HashMap::new();
    for (nodes, _) in window.events() {
        for &v in nodes {
            *degree.entry(v).or_insert(0.0) += 1.0;
        }
    }

    let theta_t = tape.param(params, theta);
    for &u in wanted {
        if out.contains_key(&u) {
            continue;
        }
        let d_u = degree.get(&u).copied().unwrap_or(0.0);
        if d_u == 0.0 {
            out.insert(u, Tensor::zeros(vec![dim]));
            continue;
        }
        // A_uv = sum over events containing both u and v of
        //        1 / (sqrt(d_u) * |e| * sqrt(d_v))
        let mut weights: BTreeMap<usize, f64> = BTreeMap::new();
        for (nodes, _) in window.events() {
            if !nodes.contains(&u) {
                continue;
            }
            let edge_size = nodes.len() as f64;
            for &v in nodes {
                let d_v = degree[&v];
                *weights.entry(v).or_insert(0.0) += 1.0 / (d_u.sqrt() * edge_size * d_v.sqrt());
            }
        }
        let mut coeffs = Vec::with_capacity(weights.len());
        let mut rows = Vec::with_capacity(weights.len());
        for (&v, &w) in &weights {
            coeffs.push(w);
            rows.push(states[v].resolve(tape, params));
        }
        let row_refs: Vec<&Tensor> = rows.iter().collect();
        let stacked = tape.stack_rows(&row_refs)?;
        let coeff_vec = Tensor::vector(coeffs);
        let mixed = tape.matmul(&coeff_vec, &stacked)?;
        let aggregated = tape.matmul(&mixed, &theta_t)?;
        out.insert(u, aggregated);
    }
    Ok(out)
}

/// The inter-event embedding v(t): identity on the stored state when
/// neither drift nor history is enabled, otherwise
/// tanh(W0 v(tp+) + [W1 Phi(t - tp)] + [W2 vs] + b0).
pub fn embedding_at(
    tape: &mut Tape,
    params: &ParamSet,
    dynamics: &DynamicsParams,
    state: &NodeState,
    history: Option<&Tensor>,
    t: f64,
) -> Result<Tensor> {
    if t < state.last_time {
        return Err(DynamicsError::TimeBeforeLastEvent {
            t,
            last: state.last_time,
        });
    }
    let base = state.resolve(tape, params);
    let flags = dynamics.flags;
    if !flags.temporal_drift && !flags.history_aggregation {
        return Ok(base);
    }
    let w0 = tape.param(params, dynamics.w0.ok_or(DynamicsError::MissingStage("W0"))?);
    let mut acc = tape.matmul(&w0, &base)?;
    if flags.temporal_drift {
        let w1 = tape.param(params, dynamics.w1.ok_or(DynamicsError::MissingStage("W1"))?);
        let phi = time_features(
            tape,
            params,
            dynamics.omega.ok_or(DynamicsError::MissingStage("omega"))?,
            dynamics.theta.ok_or(DynamicsError::MissingStage("theta"))?,
            t - state.last_time,
        )?;
        let drift = tape.matmul(&w1, &phi)?;
        acc = tape.add(&acc, &drift)?;
    }
    if flags.history_aggregation {
        let w2 = tape.param(params, dynamics.w2.ok_or(DynamicsError::MissingStage("W2"))?);
        let vs = history.ok_or(DynamicsError::MissingStage("history vector"))?;
        let smoothed = tape.matmul(&w2, vs)?;
        acc = tape.add(&acc, &smoothed)?;
    }
    let b0 = tape.param(params, dynamics.b0.ok_or(DynamicsError::MissingStage("b0"))?);
    acc = tape.add(&acc, &b0)?;
    Ok(tape.tanh(&acc)?)
}

/// Post-event refresh v(t+) = tanh(W3 v(tp+) + W4 Phi(t - tp) + W5 d + b1),
/// where d is the mean dynamic embedding over the node's concurrent events.
/// Advances the node's last-interaction time to `t`.
pub fn interaction_update(
    tape: &mut Tape,
    params: &ParamSet,
    dynamics: &DynamicsParams,
    state: &NodeState,
    dynamic_embeddings: &[Tensor],
    t: f64,
) -> Result<NodeState> {
    if dynamic_embeddings.is_empty() {
        return Err(DynamicsError::NoDynamicEmbeddings);
    }
    if t < state.last_time {
        return Err(DynamicsError::TimeBeforeLastEvent {
            t,
            last: state.last_time,
        });
    }
    let refs: Vec<&Tensor> = dynamic_embeddings.iter().collect();
    let mean = tape.mean(&refs)?;
    let base = state.resolve(tape, params);
    let w3 = tape.param(params, dynamics.w3.ok_or(DynamicsError::MissingStage("W3"))?);
    let w4 = tape.param(params, dynamics.w4.ok_or(DynamicsError::MissingStage("W4"))?);
    let w5 = tape.param(params, dynamics.w5.ok_or(DynamicsError::MissingStage("W5"))?);
    let b1 = tape.param(params, dynamics.b1.ok_or(DynamicsError::MissingStage("b1"))?);
    let phi = time_features(
        tape,
        params,
        dynamics.omega.ok_or(DynamicsError::MissingStage("omega"))?,
        dynamics.theta.ok_or(DynamicsError::MissingStage("theta"))?,
        t - state.last_time,
    )?;
    let mut acc = tape.matmul(&w3, &base)?;
    let drift = tape.matmul(&w4, &phi)?;
    acc = tape.add(&acc, &drift)?;
    let interact = tape.matmul(&w5, &mean)?;
    acc = tape.add(&acc, &interact)?;
    acc = tape.add(&acc, &b1)?;
    let emb = tape.tanh(&acc)?;
    Ok(NodeState {
        embedding: EmbeddingRef::Value(emb),
        last_time: t,
    })
}

/// Advance states and window through one group of concurrent events
/// (`events` share the timestamp `t`):
///
/// 1. embed every involved node at `t` against the pre-`t` window,
/// 2. encode each event, collecting per-node dynamic embeddings,
/// 3. update every involved node once, with the concurrent mean,
/// 4. push the events into the window.
///
/// `encode` maps the member embeddings of one event to its per-node dynamic
/// embeddings; it is only invoked when interaction update is enabled.
pub fn advance_stream<E>(
    tape: &mut Tape,
    params: &ParamSet,
    dynamics: &DynamicsParams,
    states: &mut [NodeState],
    window: &mut HistoryWindow,
    events: &[(Vec<usize>, f64)],
    mut encode: E,
) -> Result<()>
where
    E: FnMut(&mut Tape, &[Tensor]) -> Result<Vec<Tensor>>,
{
    if events.is_empty() {
        return Ok(());
    }
    let t = events[0].1;
    let mut involved: Vec<usize> = events.iter().flat_map(|(n, _)| n.iter().copied()).collect();
    involved.sort_unstable();
    involved.dedup();
    for &v in &involved {
        if v >= states.len() {
            return Err(DynamicsError::UnknownNode(v));
        }
    }

    if dynamics.flags.interaction_update {
        let history = if dynamics.flags.history_aggregation {
            let theta = dynamics
                .hgnn
                .ok_or(DynamicsError::MissingStage("Theta"))?;
            history_aggregate(tape, params, window, states, theta, &involved)?
        } else {
            HashMap::new()
        };
        let mut embeddings: HashMap<usize, Tensor> = HashMap::with_capacity(involved.len());
        for &v in &involved {
            let emb = embedding_at(
                tape,
                params,
                dynamics,
                &states[v],
                history.get(&v),
                t,
            )?;
            embeddings.insert(v, emb);
        }
        let mut incoming: HashMap<usize, Vec<Tensor>> = HashMap::new();
        for (nodes, _) in events {
            let member_embeds: Vec<Tensor> =
                nodes.iter().map(|v| embeddings[v].clone()).collect();
            let dynamic = encode(tape, &member_embeds)?;
            for (v, d) in nodes.iter().zip(dynamic) {
                incoming.entry(*v).or_default().push(d);
            }
        }
        for &v in &involved {
            let ds = incoming.remove(&v).unwrap_or_default();
            states[v] = interaction_update(tape, params, dynamics, &states[v], &ds, t)?;
        }
    } else {
        // the stored embedding never changes, but interaction times advance
        for &v in &involved {
            states[v].last_time = t;
        }
    }

    for (nodes, time) in events {
        window.push(nodes.clone(), *time);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_flags() -> StageFlags {
        StageFlags {
            temporal_drift: true,
            history_aggregation: true,
            interaction_update: true,
        }
    }

    fn make_states<R: rand::Rng>(
        params: &mut ParamSet,
        n: usize,
        dim: usize,
        rng: &mut R,
    ) -> Vec<NodeState> {
        (0..n)
            .map(|v| {
                let id = params
                    .define(
                        &format!("node_embed.{v}"),
                        Tensor::uniform(vec![dim], 1.0 / (dim as f64).sqrt(), rng),
                    )
                    .unwrap();
                NodeState::initial(id)
            })
            .collect()
    }

    #[test]
    fn time_features_analytic_points() {
        let mut params = ParamSet::new();
        let omega = params.define("omega", Tensor::zeros(vec![3])).unwrap();
        let theta = params.define("theta", Tensor::zeros(vec![3])).unwrap();
        let mut tape = Tape::forward_only();
        // omega = 0 makes the features constant cos(theta) = 1
        let phi = time_features(&mut tape, &params, omega, theta, 5.0).unwrap();
        assert_eq!(phi.values(), &[1.0, 1.0, 1.0]);
        // t = 0 gives cos(theta) regardless of omega
        params
            .set_value(omega, Tensor::vector(vec![2.0, 3.0, 4.0]))
            .unwrap();
        let phi = time_features(&mut tape, &params, omega, theta, 0.0).unwrap();
        assert_eq!(phi.values(), &[1.0, 1.0, 1.0]);
        // omega = 1, theta = 0, t = pi lands on -1
        params
            .set_value(omega, Tensor::vector(vec![1.0, 1.0, 1.0]))
            .unwrap();
        let phi = time_features(&mut tape, &params, omega, theta, std::f64::consts::PI).unwrap();
        for v in phi.values() {
            assert!((v + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_event_window_averages_the_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 4;
        let mut params = ParamSet::new();
        let states = make_states(&mut params, 2, dim, &mut rng);
        let eye = {
            let mut vals = vec![0.0; dim * dim];
            for i in 0..dim {
                vals[i * dim + i] = 1.0;
            }
            Tensor::matrix(dim, dim, vals).unwrap()
        };
        let theta = params.define("Theta", eye).unwrap();
        let mut window = HistoryWindow::new(8);
        window.push(vec![0, 1], 1.0);
        let mut tape = Tape::forward_only();
        let vs = history_aggregate(&mut tape, &params, &window, &states, theta, &[0, 1]).unwrap();
        let x0 = params.value(params.id("node_embed.0").unwrap());
        let x1 = params.value(params.id("node_embed.1").unwrap());
        for v in [0, 1] {
            for ((a, b), out) in x0
                .values()
                .iter()
                .zip(x1.values())
                .zip(vs[&v].values())
            {
                assert!((out - (a + b) / 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_window_aggregates_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let states = make_states(&mut params, 3, 4, &mut rng);
        let theta = params
            .define("Theta", Tensor::uniform(vec![4, 4], 0.5, &mut rng))
            .unwrap();
        let window = HistoryWindow::new(4);
        let mut tape = Tape::forward_only();
        let vs = history_aggregate(&mut tape, &params, &window, &states, theta, &[0, 2]).unwrap();
        assert!(vs[&0].values().iter().all(|v| *v == 0.0));
        assert!(vs[&2].values().iter().all(|v| *v == 0.0));
    }

    /// Dense reference: materialize H, D_v, D_e and carry out the full
    /// normalized product with plain loops.
    fn dense_hgnn_oracle(
        window: &HistoryWindow,
        states: &[Vec<f64>],
        theta: &[f64],
        dim: usize,
    ) -> Vec<Vec<f64>> {
        let n = states.len();
        let m = window.len();
        let mut h = vec![vec![0.0; m]; n];
        for (j, (nodes, _)) in window.events().enumerate() {
            for &v in nodes {
                h[v][j] = 1.0;
            }
        }
        let d_v: Vec<f64> = (0..n).map(|v| h[v].iter().sum()).collect();
        let d_e: Vec<f64> = (0..m).map(|j| (0..n).map(|v| h[v][j]).sum()).collect();
        // A = Dv^-1/2 H De^-1 H^T Dv^-1/2 (zero rows for isolated nodes)
        let mut a = vec![vec![0.0; n]; n];
        for u in 0..n {
            if d_v[u] == 0.0 {
                continue;
            }
            for v in 0..n {
                if d_v[v] == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for j in 0..m {
                    if d_e[j] > 0.0 {
                        s += h[u][j] * h[v][j] / d_e[j];
                    }
                }
                a[u][v] = s / (d_v[u].sqrt() * d_v[v].sqrt());
            }
        }
        // out = A X Theta
        let mut out = vec![vec![0.0; dim]; n];
        for u in 0..n {
            let mut mixed = vec![0.0; dim];
            for v in 0..n {
                if a[u][v] == 0.0 {
                    continue;
                }
                for c in 0..dim {
                    mixed[c] += a[u][v] * states[v][c];
                }
            }
            for j in 0..dim {
                let mut s = 0.0;
                for c in 0..dim {
                    s += mixed[c] * theta[c * dim + j];
                }
                out[u][j] = s;
            }
        }
        out
    }

    #[test]
    fn aggregation_matches_dense_oracle() {
        for seed in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 4;
            let n = rng.gen_range(2..=8);
            let mut params = ParamSet::new();
            let states = make_states(&mut params, n, dim, &mut rng);
            let theta = params
                .define("Theta", Tensor::uniform(vec![dim, dim], 0.7, &mut rng))
                .unwrap();
            let mut window = HistoryWindow::new(5);
            let n_events = rng.gen_range(1..=5);
            for e in 0..n_events {
                let size = rng.gen_range(1..=n.min(4));
                let mut nodes: Vec<usize> = (0..n).collect();
                for i in (1..nodes.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    nodes.swap(i, j);
                }
                nodes.truncate(size);
                nodes.sort_unstable();
                window.push(nodes, e as f64);
            }
            let wanted: Vec<usize> = (0..n).collect();
            let mut tape = Tape::forward_only();
            let vs =
                history_aggregate(&mut tape, &params, &window, &states, theta, &wanted).unwrap();
            let dense_states: Vec<Vec<f64>> = (0..n)
                .map(|v| {
                    params
                        .value(params.id(&format!("node_embed.{v}")).unwrap())
                        .values()
                        .to_vec()
                })
                .collect();
            let oracle = dense_hgnn_oracle(
                &window,
                &dense_states,
                params.value(theta).values(),
                dim,
            );
            for v in 0..n {
                for (a, b) in vs[&v].values().iter().zip(&oracle[v]) {
                    assert!((a - b).abs() < 1e-12, "seed {seed} node {v}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn embedding_identity_without_drift_or_history() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let flags = StageFlags {
            temporal_drift: false,
            history_aggregation: false,
            interaction_update: true,
        };
        let dynamics = DynamicsParams::define(&mut params, "", 4, flags, &mut rng).unwrap();
        let states = make_states(&mut params, 1, 4, &mut rng);
        let mut tape = Tape::forward_only();
        let base = states[0].resolve(&mut tape, &params);
        let v = embedding_at(&mut tape, &params, &dynamics, &states[0], None, 7.5).unwrap();
        assert_eq!(v.values(), base.values());
    }

    #[test]
    fn embedding_zero_weights_is_zero_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        let flags = StageFlags {
            temporal_drift: true,
            history_aggregation: false,
            interaction_update: false,
        };
        let mut dynamics = DynamicsParams::define(&mut params, "", 4, flags, &mut rng).unwrap();
        for id in [dynamics.w0, dynamics.w1] {
            params
                .set_value(id.unwrap(), Tensor::zeros(vec![4, 4]))
                .unwrap();
        }
        dynamics.flags = flags;
        let states = make_states(&mut params, 1, 4, &mut rng);
        let mut tape = Tape::forward_only();
        let v = embedding_at(&mut tape, &params, &dynamics, &states[0], None, 3.0).unwrap();
        assert!(v.values().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn embedding_constant_phi_hits_tanh_one() {
        // W0 = W2 = 0, W1 = I, b0 = 0, omega = theta = 0 => tanh(1) each entry
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dim = 4;
        let mut params = ParamSet::new();
        let flags = StageFlags {
            temporal_drift: true,
            history_aggregation: false,
            interaction_update: false,
        };
        let dynamics = DynamicsParams::define(&mut params, "", dim, flags, &mut rng).unwrap();
        params
            .set_value(dynamics.w0.unwrap(), Tensor::zeros(vec![dim, dim]))
            .unwrap();
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        params
            .set_value(dynamics.w1.unwrap(), Tensor::matrix(dim, dim, eye).unwrap())
            .unwrap();
        params
            .set_value(dynamics.omega.unwrap(), Tensor::zeros(vec![dim]))
            .unwrap();
        params
            .set_value(dynamics.theta.unwrap(), Tensor::zeros(vec![dim]))
            .unwrap();
        let states = make_states(&mut params, 1, dim, &mut rng);
        let mut tape = Tape::forward_only();
        let v = embedding_at(&mut tape, &params, &dynamics, &states[0], None, 9.0).unwrap();
        for x in v.values() {
            assert!((x - 1.0f64.tanh()).abs() < 1e-15);
        }
    }

    /// Straight-line oracle for the full embedding expression.
    #[test]
    fn embedding_matches_straight_line_oracle() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 4;
            let mut params = ParamSet::new();
            let flags = all_flags();
            let dynamics = DynamicsParams::define(&mut params, "", dim, flags, &mut rng).unwrap();
            let states = make_states(&mut params, 1, dim, &mut rng);
            let vs = Tensor::uniform(vec![dim], 1.0, &mut rng);
            let t = rng.gen_range(0.1..5.0);

            let mut tape = Tape::forward_only();
            let got = embedding_at(&mut tape, &params, &dynamics, &states[0], Some(&vs), t)
                .unwrap();

            let read = |id: Option<ParamId>| params.value(id.unwrap()).values().to_vec();
            let w0 = read(dynamics.w0);
            let w1 = read(dynamics.w1);
            let w2 = read(dynamics.w2);
            let b0 = read(dynamics.b0);
            let omega = read(dynamics.omega);
            let theta = read(dynamics.theta);
            let base = params
                .value(params.id("node_embed.0").unwrap())
                .values()
                .to_vec();
            let mut expect = vec![0.0; dim];
            for i in 0..dim {
                let mut acc = b0[i];
                for j in 0..dim {
                    acc += w0[i * dim + j] * base[j];
                    acc += w1[i * dim + j] * (omega[j] * t + theta[j]).cos();
                    acc += w2[i * dim + j] * vs.values()[j];
                }
                expect[i] = acc.tanh();
            }
            for (a, b) in got.values().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn update_with_single_embedding_is_plain_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = 4;
        let mut params = ParamSet::new();
        let flags = all_flags();
        let dynamics = DynamicsParams::define(&mut params, "", dim, flags, &mut rng).unwrap();
        let states = make_states(&mut params, 1, dim, &mut rng);
        let d = Tensor::uniform(vec![dim], 1.0, &mut rng);
        let mut tape = Tape::forward_only();
        let one = interaction_update(&mut tape, &params, &dynamics, &states[0], &[d.clone()], 2.0)
            .unwrap();
        let dup = interaction_update(
            &mut tape,
            &params,
            &dynamics,
            &states[0],
            &[d.clone(), d.clone()],
            2.0,
        )
        .unwrap();
        let (a, b) = match (&one.embedding, &dup.embedding) {
            (EmbeddingRef::Value(a), EmbeddingRef::Value(b)) => (a, b),
            _ => panic!("expected evolved embeddings"),
        };
        assert_eq!(a.values(), b.values());
        assert_eq!(one.last_time, 2.0);
    }

    #[test]
    fn update_with_zero_weights_zeroes_the_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dim = 4;
        let mut params = ParamSet::new();
        let flags = all_flags();
        let dynamics = DynamicsParams::define(&mut params, "", dim, flags, &mut rng).unwrap();
        for id in [dynamics.w3, dynamics.w4, dynamics.w5] {
            params
                .set_value(id.unwrap(), Tensor::zeros(vec![dim, dim]))
                .unwrap();
        }
        let states = make_states(&mut params, 1, dim, &mut rng);
        let d = Tensor::uniform(vec![dim], 1.0, &mut rng);
        let mut tape = Tape::forward_only();
        let new = interaction_update(&mut tape, &params, &dynamics, &states[0], &[d], 4.0)
            .unwrap();
        match &new.embedding {
            EmbeddingRef::Value(t) => assert!(t.values().iter().all(|x| *x == 0.0)),
            _ => panic!(),
        }
        assert_eq!(new.last_time, 4.0);
    }

    #[test]
    fn update_mean_of_three_matches_oracle() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = 4;
            let mut params = ParamSet::new();
            let dynamics =
                DynamicsParams::define(&mut params, "", dim, all_flags(), &mut rng).unwrap();
            let states = make_states(&mut params, 1, dim, &mut rng);
            let ds: Vec<Tensor> = (0..3)
                .map(|_| Tensor::uniform(vec![dim], 1.0, &mut rng))
                .collect();
            let t = rng.gen_range(0.5..4.0);
            let mut tape = Tape::forward_only();
            let new =
                interaction_update(&mut tape, &params, &dynamics, &states[0], &ds, t).unwrap();
            let got = match &new.embedding {
                EmbeddingRef::Value(v) => v.values().to_vec(),
                _ => panic!(),
            };

            let read = |id: Option<ParamId>| params.value(id.unwrap()).values().to_vec();
            let w3 = read(dynamics.w3);
            let w4 = read(dynamics.w4);
            let w5 = read(dynamics.w5);
            let b1 = read(dynamics.b1);
            let omega = read(dynamics.omega);
            let theta = read(dynamics.theta);
            let base = params
                .value(params.id("node_embed.0").unwrap())
                .values()
                .to_vec();
            let mean: Vec<f64> = (0..dim)
                .map(|i| ds.iter().map(|d| d.values()[i]).sum::<f64>() / 3.0)
                .collect();
            for i in 0..dim {
                let mut acc = b1[i];
                for j in 0..dim {
                    acc += w3[i * dim + j] * base[j];
                    acc += w4[i * dim + j] * (omega[j] * t + theta[j]).cos();
                    acc += w5[i * dim + j] * mean[j];
                }
                assert!((acc.tanh() - got[i]).abs() < 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn update_rejects_empty_and_stale_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        let dynamics = DynamicsParams::define(&mut params, "", 4, all_flags(), &mut rng).unwrap();
        let mut states = make_states(&mut params, 1, 4, &mut rng);
        states[0].last_time = 5.0;
        let mut tape = Tape::forward_only();
        assert!(matches!(
            interaction_update(&mut tape, &params, &dynamics, &states[0], &[], 6.0),
            Err(DynamicsError::NoDynamicEmbeddings)
        ));
        let d = Tensor::zeros(vec![4]);
        assert!(matches!(
            interaction_update(&mut tape, &params, &dynamics, &states[0], &[d], 4.0),
            Err(DynamicsError::TimeBeforeLastEvent { .. })
        ));
    }

    fn toy_encode(tape: &mut Tape, members: &[Tensor]) -> Result<Vec<Tensor>> {
        // stand-in encoder: each node's dynamic embedding is the mean of its
        // peers (or itself when alone)
        let mut out = Vec::with_capacity(members.len());
        for i in 0..members.len() {
            let peers: Vec<&Tensor> = members
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i || members.len() == 1)
                .map(|(_, m)| m)
                .collect();
            out.push(tape.mean(&peers)?);
        }
        Ok(out)
    }

    #[test]
    fn advance_noop_on_empty_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ParamSet::new();
        let dynamics = DynamicsParams::define(&mut params, "", 4, all_flags(), &mut rng).unwrap();
        let mut states = make_states(&mut params, 2, 4, &mut rng);
        let mut window = HistoryWindow::new(4);
        let mut tape = Tape::forward_only();
        advance_stream(
            &mut tape,
            &params,
            &dynamics,
            &mut states,
            &mut window,
            &[],
            toy_encode,
        )
        .unwrap();
        assert!(window.is_empty());
        assert_eq!(states[0].last_time, 0.0);
    }

    #[test]
    fn advance_touches_exactly_the_event_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ParamSet::new();
        let dynamics = DynamicsParams::define(&mut params, "", 4, all_flags(), &mut rng).unwrap();
        let mut states = make_states(&mut params, 3, 4, &mut rng);
        let mut window = HistoryWindow::new(4);
        let mut tape = Tape::forward_only();
        advance_stream(
            &mut tape,
            &params,
            &dynamics,
            &mut states,
            &mut window,
            &[(vec![0, 1], 2.0)],
            toy_encode,
        )
        .unwrap();
        assert_eq!(states[0].last_time, 2.0);
        assert_eq!(states[1].last_time, 2.0);
        assert_eq!(states[2].last_time, 0.0);
        assert_eq!(window.len(), 1);
    }

    #[test]
    fn concurrent_events_mean_their_dynamic_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let dim = 4;
        let mut params = ParamSet::new();
        let flags = StageFlags {
            temporal_drift: true,
            history_aggregation: false,
            interaction_update: true,
        };
        let dynamics = DynamicsParams::define(&mut params, "", dim, flags, &mut rng).unwrap();
        let mut states = make_states(&mut params, 3, dim, &mut rng);
        let mut window = HistoryWindow::new(4);
        let t = 1.5;

        // two concurrent events sharing node 0
        let mut tape = Tape::forward_only();
        let events = vec![(vec![0, 1], t), (vec![0, 2], t)];
        // capture the embeddings the encoder sees, to replay the mean by hand
        let mut captured: Vec<Vec<Tensor>> = Vec::new();
        advance_stream(
            &mut tape,
            &params,
            &dynamics,
            &mut states,
            &mut window,
            &events,
            |tape, members| {
                captured.push(members.to_vec());
                toy_encode(tape, members)
            },
        )
        .unwrap();
        let got = match &states[0].embedding {
            EmbeddingRef::Value(v) => v.values().to_vec(),
            _ => panic!(),
        };

        // manual: node 0's dynamic embeddings are the peer means from both
        // events; the update uses their average
        let mut tape2 = Tape::forward_only();
        let d_a = captured[0][1].clone(); // peer of node 0 in event one
        let d_b = captured[1][1].clone(); // peer of node 0 in event two
        let mut fresh = make_states(&mut params, 0, dim, &mut rng);
        fresh.clear();
        let state0 = NodeState::initial(params.id("node_embed.0").unwrap());
        let manual = interaction_update(
            &mut tape2,
            &params,
            &dynamics,
            &state0,
            &[d_a, d_b],
            t,
        )
        .unwrap();
        let expect = match &manual.embedding {
            EmbeddingRef::Value(v) => v.values().to_vec(),
            _ => panic!(),
        };
        assert_eq!(got, expect);
    }

    #[test]
    fn causality_future_events_do_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dim = 4;
        let run = |extra_future: bool| -> Vec<f64> {
            let mut r = ChaCha8Rng::seed_from_u64(77);
            let mut params = ParamSet::new();
            let dynamics =
                DynamicsParams::define(&mut params, "", dim, all_flags(), &mut r).unwrap();
            let mut states = make_states(&mut params, 4, dim, &mut r);
            let mut window = HistoryWindow::new(8);
            let mut tape = Tape::forward_only();
            for (nodes, t) in [(vec![0usize, 1], 1.0), (vec![1, 2], 2.0)] {
                advance_stream(
                    &mut tape,
                    &params,
                    &dynamics,
                    &mut states,
                    &mut window,
                    &[(nodes, t)],
                    toy_encode,
                )
                .unwrap();
            }
            let probe =
                embedding_at(&mut tape, &params, &dynamics, &states[0], Some(&Tensor::zeros(vec![dim])), 3.0)
                    .unwrap()
                    .values()
                    .to_vec();
            if extra_future {
                advance_stream(
                    &mut tape,
                    &params,
                    &dynamics,
                    &mut states,
                    &mut window,
                    &[(vec![2, 3], 5.0)],
                    toy_encode,
                )
                .unwrap();
            }
            probe
        };
        let without = run(false);
        let with = run(true);
        assert_eq!(without, with);
        let _ = rng.gen::<u64>();
    }

    #[test]
    fn replay_is_bit_deterministic() {
        let dim = 4;
        let run = || -> Vec<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut params = ParamSet::new();
            let dynamics =
                DynamicsParams::define(&mut params, "", dim, all_flags(), &mut rng).unwrap();
            let mut states = make_states(&mut params, 4, dim, &mut rng);
            let mut window = HistoryWindow::new(4);
            let mut tape = Tape::forward_only();
            for (nodes, t) in [
                (vec![0usize, 1], 1.0),
                (vec![1, 2], 2.0),
                (vec![0, 2, 3], 3.5),
            ] {
                advance_stream(
                    &mut tape,
                    &params,
                    &dynamics,
                    &mut states,
                    &mut window,
                    &[(nodes, t)],
                    toy_encode,
                )
                .unwrap();
            }
            states
                .iter()
                .map(|s| match &s.embedding {
                    EmbeddingRef::Value(v) => v.values().to_vec(),
                    EmbeddingRef::Param(id) => params.value(*id).values().to_vec(),
                })
                .collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn tanh_range_bound_holds_after_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let dim = 6;
        let mut params = ParamSet::new();
        let dynamics = DynamicsParams::define(&mut params, "", dim, all_flags(), &mut rng).unwrap();
        let mut states = make_states(&mut params, 5, dim, &mut rng);
        let mut window = HistoryWindow::new(4);
        let mut tape = Tape::forward_only();
        for step in 0..20 {
            let a = rng.gen_range(0..5);
            let mut b = rng.gen_range(0..5);
            if b == a {
                b = (b + 1) % 5;
            }
            advance_stream(
                &mut tape,
                &params,
                &dynamics,
                &mut states,
                &mut window,
                &[(vec![a.min(b), a.max(b)], step as f64 + 1.0)],
                toy_encode,
            )
            .unwrap();
        }
        for s in &states {
            if let EmbeddingRef::Value(v) = &s.embedding {
                assert!(v.values().iter().all(|x| x.abs() < 1.0));
            }
        }
    }
}
