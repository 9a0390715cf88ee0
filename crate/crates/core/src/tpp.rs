//! Point-process mathematics: event probabilities, survival functions,
//! Monte-Carlo estimators, Rayleigh closed forms, and thinning-based
//! simulation used both by the models and by the test oracles.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TppError {
    #[error("interval start {from} exceeds end {to}")]
    BadInterval { from: f64, to: f64 },
    #[error("Monte-Carlo estimator needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("rayleigh scale must be positive, got {0}")]
    NonPositiveScale(f64),
    #[error("quadrature grid must have at least {min} points, got {got}")]
    GridTooSmall { min: usize, got: usize },
    #[error("horizon factor must be positive, got {0}")]
    BadHorizon(f64),
    #[error("probability mass {mass:e} on the integration window is below 1e-6")]
    VanishingMass { mass: f64 },
    #[error("intensity declares no upper bound on the requested interval")]
    NoBound,
    #[error("hyperedge side must be nonempty")]
    EmptyHyperedge,
    #[error("hawkes branching ratio {0} is not below 1")]
    UnstableHawkes(f64),
}

pub type Result<T> = std::result::Result<T, TppError>;

/// Default quadrature resolution for survival integrals without closed form.
pub const SURVIVAL_QUADRATURE_POINTS: usize = 256;

/// A conditional intensity t -> lambda(t) >= 0.
///
/// `integral` reports a closed-form value of the integrated intensity when
/// one exists; `upper_bound` reports a bound valid on the whole interval,
/// which thinning simulation requires.
pub trait IntensityFn {
    fn lambda(&self, t: f64) -> f64;

    fn integral(&self, _from: f64, _to: f64) -> Option<f64> {
        None
    }

    fn upper_bound(&self, _from: f64, _to: f64) -> Option<f64> {
        None
    }
}

/// Homogeneous Poisson intensity.
#[derive(Debug, Clone, Copy)]
pub struct ConstantIntensity(pub f64);

impl IntensityFn for ConstantIntensity {
    fn lambda(&self, _t: f64) -> f64 {
        self.0
    }
    fn integral(&self, from: f64, to: f64) -> Option<f64> {
        Some(self.0 * (to - from))
    }
    fn upper_bound(&self, _from: f64, _to: f64) -> Option<f64> {
        Some(self.0)
    }
}

/// Rayleigh intensity lambda(t) = alpha * (t - anchor), zero before the anchor.
#[derive(Debug, Clone, Copy)]
pub struct RayleighIntensity {
    pub alpha: f64,
    pub anchor: f64,
}

impl IntensityFn for RayleighIntensity {
    fn lambda(&self, t: f64) -> f64 {
        self.alpha * (t - self.anchor).max(0.0)
    }
    fn integral(&self, from: f64, to: f64) -> Option<f64> {
        let a = (from - self.anchor).max(0.0);
        let b = (to - self.anchor).max(0.0);
        Some(self.alpha * 0.5 * (b * b - a * a))
    }
    fn upper_bound(&self, _from: f64, to: f64) -> Option<f64> {
        Some(self.lambda(to))
    }
}

/// Intensity given by an arbitrary closure (no closed forms, no bound).
pub struct FnIntensity<F: Fn(f64) -> f64>(pub F);

impl<F: Fn(f64) -> f64> IntensityFn for FnIntensity<F> {
    fn lambda(&self, t: f64) -> f64 {
        (self.0)(t)
    }
}

/// A timestamped hyperedge: a node set, or a pair of node sets drawn from
/// disjoint universes for bipartite interactions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hyperedge {
    Homogeneous(Vec<usize>),
    Bipartite(Vec<usize>, Vec<usize>),
}

impl Hyperedge {
    /// Sorted, deduplicated homogeneous hyperedge.
    pub fn homogeneous(mut nodes: Vec<usize>) -> Result<Self> {
        nodes.sort_unstable();
        nodes.dedup();
        if nodes.is_empty() {
            return Err(TppError::EmptyHyperedge);
        }
        Ok(Hyperedge::Homogeneous(nodes))
    }

    /// Sorted, deduplicated bipartite hyperedge; both sides nonempty.
    pub fn bipartite(mut left: Vec<usize>, mut right: Vec<usize>) -> Result<Self> {
        left.sort_unstable();
        left.dedup();
        right.sort_unstable();
        right.dedup();
        if left.is_empty() || right.is_empty() {
            return Err(TppError::EmptyHyperedge);
        }
        Ok(Hyperedge::Bipartite(left, right))
    }

    pub fn size(&self) -> usize {
        match self {
            Hyperedge::Homogeneous(n) => n.len(),
            Hyperedge::Bipartite(l, r) => l.len() + r.len(),
        }
    }

    pub fn is_bipartite(&self) -> bool {
        matches!(self, Hyperedge::Bipartite(..))
    }

    pub fn left(&self) -> &[usize] {
        match self {
            Hyperedge::Homogeneous(n) => n,
            Hyperedge::Bipartite(l, _) => l,
        }
    }

    pub fn right(&self) -> &[usize] {
        match self {
            Hyperedge::Homogeneous(_) => &[],
            Hyperedge::Bipartite(_, r) => r,
        }
    }
}

/// A hyperedge event at a point in time (dataset time units).
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub edge: Hyperedge,
    pub time: f64,
}

/// S(from, to) = exp(-integral of lambda), by closed form when the intensity
/// declares one and trapezoidal quadrature otherwise.
pub fn survival<I: IntensityFn>(intensity: &I, from: f64, to: f64) -> Result<f64> {
    if from > to {
        return Err(TppError::BadInterval { from, to });
    }
    if from == to {
        return Ok(1.0);
    }
    let integral = match intensity.integral(from, to) {
        Some(v) => v,
        None => integrate_trapezoid(intensity, from, to, SURVIVAL_QUADRATURE_POINTS)?,
    };
    Ok((-integral).exp())
}

/// p(t) = lambda(t) * S(anchor, t).
pub fn event_probability<I: IntensityFn>(intensity: &I, t: f64, anchor: f64) -> Result<f64> {
    Ok(intensity.lambda(t) * survival(intensity, anchor, t)?)
}

/// Trapezoidal integral of lambda over [from, to] with `points` grid nodes.
pub fn integrate_trapezoid<I: IntensityFn>(
    intensity: &I,
    from: f64,
    to: f64,
    points: usize,
) -> Result<f64> {
    if points < 2 {
        return Err(TppError::GridTooSmall {
            min: 2,
            got: points,
        });
    }
    if from > to {
        return Err(TppError::BadInterval { from, to });
    }
    let h = (to - from) / (points - 1) as f64;
    let mut sum = 0.5 * (intensity.lambda(from) + intensity.lambda(to));
    for i in 1..points - 1 {
        sum += intensity.lambda(from + h * i as f64);
    }
    Ok(sum * h)
}

/// N uniform samples on [a, b], sorted ascending.
pub fn uniform_sorted_samples<R: Rng>(rng: &mut R, a: f64, b: f64, n: usize) -> Vec<f64> {
    let mut samples: Vec<f64> = (0..n).map(|_| rng.gen_range(a..b)).collect();
    samples.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    samples
}

/// Monte-Carlo estimate of the integrated intensity (the negated log
/// survival) over [t_prev, t_i]: sorted uniform samples t_1 <= ... <= t_N,
/// sum over j >= 2 of (t_j - t_{j-1}) * lambda(t_j).
pub fn mc_log_survival<I: IntensityFn, R: Rng>(
    intensity: &I,
    t_prev: f64,
    t_i: f64,
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    if n < 2 {
        return Err(TppError::TooFewSamples(n));
    }
    if t_prev >= t_i {
        return Err(TppError::BadInterval {
            from: t_prev,
            to: t_i,
        });
    }
    let samples = uniform_sorted_samples(rng, t_prev, t_i, n);
    let mut acc = 0.0;
    for j in 1..n {
        acc += (samples[j] - samples[j - 1]) * intensity.lambda(samples[j]);
    }
    Ok(acc)
}

/// Mean first-event duration of a Rayleigh process with lambda(t) = alpha * t:
/// sqrt(pi / (2 alpha)).
pub fn rayleigh_expected_duration(alpha: f64) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(TppError::NonPositiveScale(alpha));
    }
    Ok((std::f64::consts::PI / (2.0 * alpha)).sqrt())
}

/// Trapezoidal estimate of the expected duration E[t - anchor] under
/// p(t) = lambda(t) S(t), truncated at `anchor + horizon_factor * median_gap`
/// and renormalized by the probability mass on that window.
pub fn expected_duration_numeric<I: IntensityFn>(
    intensity: &I,
    anchor: f64,
    horizon_factor: f64,
    grid: usize,
    median_gap: f64,
) -> Result<f64> {
    if grid < 16 {
        return Err(TppError::GridTooSmall { min: 16, got: grid });
    }
    if horizon_factor <= 0.0 {
        return Err(TppError::BadHorizon(horizon_factor));
    }
    let t_max = anchor + horizon_factor * median_gap;
    let h = (t_max - anchor) / (grid - 1) as f64;

    // Running trapezoid of the integrated intensity gives S at each node.
    let mut mass = 0.0;
    let mut weighted = 0.0;
    let mut cumulative = 0.0;
    let mut prev_lambda = intensity.lambda(anchor);
    let mut prev_p = prev_lambda; // S(anchor) = 1
    for i in 1..grid {
        let t = anchor + h * i as f64;
        let lam = intensity.lambda(t);
        cumulative += 0.5 * (prev_lambda + lam) * h;
        let p = lam * (-cumulative).exp();
        mass += 0.5 * (prev_p + p) * h;
        let w_prev = prev_p * (h * (i - 1) as f64);
        let w_cur = p * (h * i as f64);
        weighted += 0.5 * (w_prev + w_cur) * h;
        prev_lambda = lam;
        prev_p = p;
    }
    if mass < 1e-6 {
        return Err(TppError::VanishingMass { mass });
    }
    Ok(weighted / mass)
}

/// A point process that thinning can simulate: an intensity, a bound valid
/// until the next accepted event, and a state hook for self-excitation.
pub trait ThinnableProcess {
    fn lambda_at(&self, t: f64) -> f64;
    /// Upper bound for lambda on [t, to] assuming no further events.
    fn bound_from(&self, t: f64, to: f64) -> Option<f64>;
    fn register_event(&mut self, _t: f64) {}
}

/// Any bounded intensity is thinnable without state.
pub struct BoundedProcess<'a, I: IntensityFn>(pub &'a I);

impl<I: IntensityFn> ThinnableProcess for BoundedProcess<'_, I> {
    fn lambda_at(&self, t: f64) -> f64 {
        self.0.lambda(t)
    }
    fn bound_from(&self, t: f64, to: f64) -> Option<f64> {
        self.0.upper_bound(t, to)
    }
}

/// Rayleigh renewal process: the anchor resets at every event.
pub struct RayleighRenewalProcess {
    pub alpha: f64,
    pub last_event: f64,
}

impl ThinnableProcess for RayleighRenewalProcess {
    fn lambda_at(&self, t: f64) -> f64 {
        self.alpha * (t - self.last_event).max(0.0)
    }
    fn bound_from(&self, _t: f64, to: f64) -> Option<f64> {
        Some(self.lambda_at(to).max(0.0))
    }
    fn register_event(&mut self, t: f64) {
        self.last_event = t;
    }
}

/// Hawkes process with exponential kernel alpha * exp(-decay * dt).
pub struct HawkesProcess {
    pub mu: f64,
    pub alpha: f64,
    pub decay: f64,
    events: Vec<f64>,
}

impl HawkesProcess {
    pub fn new(mu: f64, alpha: f64, decay: f64) -> Result<Self> {
        let branching = alpha / decay;
        if !(branching < 1.0) {
            return Err(TppError::UnstableHawkes(branching));
        }
        Ok(HawkesProcess {
            mu,
            alpha,
            decay,
            events: Vec::new(),
        })
    }
}

impl ThinnableProcess for HawkesProcess {
    fn lambda_at(&self, t: f64) -> f64 {
        let excitation: f64 = self
            .events
            .iter()
            .filter(|&&ti| ti <= t)
            .map(|&ti| self.alpha * (-self.decay * (t - ti)).exp())
            .sum();
        self.mu + excitation
    }
    fn bound_from(&self, t: f64, _to: f64) -> Option<f64> {
        // Between events the exponential kernel only decays.
        Some(self.lambda_at(t))
    }
    fn register_event(&mut self, t: f64) {
        self.events.push(t);
    }
}

/// Ogata thinning over [from, to]. Errors when the process declares no bound.
pub fn simulate_thinning<P: ThinnableProcess, R: Rng>(
    process: &mut P,
    from: f64,
    to: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if from > to {
        return Err(TppError::BadInterval { from, to });
    }
    let mut t = from;
    let mut out = Vec::new();
    loop {
        let bound = process.bound_from(t, to).ok_or(TppError::NoBound)?;
        if bound <= 0.0 {
            break;
        }
        let u: f64 = rng.gen_range(0.0..1.0f64);
        t += -(1.0 - u).ln() / bound;
        if t >= to {
            break;
        }
        let accept: f64 = rng.gen_range(0.0..1.0f64);
        if accept * bound <= process.lambda_at(t) {
            out.push(t);
            process.register_event(t);
        }
    }
    Ok(out)
}

/// Thinning for a plain bounded [`IntensityFn`].
pub fn simulate_intensity<I: IntensityFn, R: Rng>(
    intensity: &I,
    from: f64,
    to: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut process = BoundedProcess(intensity);
    simulate_thinning(&mut process, from, to, rng)
}
