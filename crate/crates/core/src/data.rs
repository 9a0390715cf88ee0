//! Corpus ingestion, preprocessing, and synthetic stream generation.
//!
//! Homogeneous corpora use the three-file layout of the public simplicial
//! datasets (`*-nverts.txt`, `*-simplices.txt`, `*-times.txt`); bipartite
//! corpora are line-oriented records `time <TAB> left-ids <TAB> right-ids`
//! with comma-separated ids (`|` is accepted as a field separator too).

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::tpp::{
    simulate_thinning, EventRecord, HawkesProcess, Hyperedge, RayleighRenewalProcess,
    ThinnableProcess, TppError,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("count mismatch: {0}")]
    CountMismatch(String),
    #[error("dataset has {got} events but {need} are required")]
    TooFewEvents { got: usize, need: usize },
    #[error("time scaling needs at least two distinct timestamps")]
    DegenerateTimes,
    #[error("planted hyperedge references node {node} outside the universe of {universe}")]
    NodeOutOfRange { node: usize, universe: usize },
    #[error("no corpus found under {0}: expected a *-nverts.txt triple or a .tsv file")]
    NoCorpus(PathBuf),
    #[error(transparent)]
    Process(#[from] TppError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A time-sorted hyperedge event stream over densely remapped node ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub bipartite: bool,
    pub num_left: usize,
    pub num_right: usize,
    pub events: Vec<EventRecord>,
    /// Divisor already applied to all timestamps (1 when unscaled).
    pub time_scale: f64,
    /// Dense id -> original id recovery tables.
    pub left_original_ids: Vec<i64>,
    pub right_original_ids: Vec<i64>,
}

/// Train/validation/test ranges over the sorted stream, split 50/25/25.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Table-style corpus statistics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetStats {
    pub num_left: usize,
    pub num_right: Option<usize>,
    pub num_events: usize,
    pub distinct_left: usize,
    pub distinct_right: Option<usize>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

fn parse_num<T: std::str::FromStr>(
    raw: &str,
    file: &Path,
    line: usize,
    what: &str,
) -> Result<T> {
    raw.parse().map_err(|_| DataError::Parse {
        file: file.display().to_string(),
        line,
        msg: format!("expected {what}, got `{raw}`"),
    })
}

struct Remapper {
    dense: HashMap<i64, usize>,
    originals: Vec<i64>,
}

impl Remapper {
    fn new() -> Self {
        Remapper {
            dense: HashMap::new(),
            originals: Vec::new(),
        }
    }

    fn map(&mut self, original: i64) -> usize {
        *self.dense.entry(original).or_insert_with(|| {
            self.originals.push(original);
            self.originals.len() - 1
        })
    }
}

/// Load the three-file simplex corpus: event j spans the next `nverts[j]`
/// ids of the simplices file and occurs at `times[j]`. Node ids are densely
/// remapped in first-appearance order; duplicate ids within one simplex are
/// dropped; events are stably sorted by time.
pub fn load_simplex_corpus(
    nverts_path: &Path,
    simplices_path: &Path,
    times_path: &Path,
) -> Result<Dataset> {
    let nverts_lines = read_lines(nverts_path)?;
    let simplices_lines = read_lines(simplices_path)?;
    let times_lines = read_lines(times_path)?;

    let mut nverts = Vec::with_capacity(nverts_lines.len());
    for (ix, raw) in nverts_lines.iter().enumerate() {
        if raw.is_empty() {
            continue;
        }
        let n: usize = parse_num(raw, nverts_path, ix + 1, "a vertex count")?;
        nverts.push(n);
    }
    let mut ids = Vec::with_capacity(simplices_lines.len());
    for (ix, raw) in simplices_lines.iter().enumerate() {
        if raw.is_empty() {
            continue;
        }
        let id: i64 = parse_num(raw, simplices_path, ix + 1, "a node id")?;
        ids.push(id);
    }
    let mut times = Vec::with_capacity(times_lines.len());
    for (ix, raw) in times_lines.iter().enumerate() {
        if raw.is_empty() {
            continue;
        }
        let t: f64 = parse_num(raw, times_path, ix + 1, "a timestamp")?;
        times.push(t);
    }

    if times.len() != nverts.len() {
        return Err(DataError::CountMismatch(format!(
            "{} events in {} but {} timestamps in {}",
            nverts.len(),
            nverts_path.display(),
            times.len(),
            times_path.display()
        )));
    }
    let total: usize = nverts.iter().sum();
    if total != ids.len() {
        return Err(DataError::CountMismatch(format!(
            "nverts sums to {total} but {} has {} ids",
            simplices_path.display(),
            ids.len()
        )));
    }

    let mut remap = Remapper::new();
    let mut events = Vec::with_capacity(nverts.len());
    let mut cursor = 0;
    for (j, &n) in nverts.iter().enumerate() {
        let mut nodes: Vec<usize> = ids[cursor..cursor + n]
            .iter()
            .map(|&id| remap.map(id))
            .collect();
        cursor += n;
        nodes.sort_unstable();
        nodes.dedup();
        events.push(EventRecord {
            edge: Hyperedge::Homogeneous(nodes),
            time: times[j],
        });
    }
    events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());

    let stem = nverts_path
        .file_name()
        .map(|f| f.to_string_lossy().replace("-nverts.txt", ""))
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset {
        name: stem,
        bipartite: false,
        num_left: remap.originals.len(),
        num_right: 0,
        events,
        time_scale: 1.0,
        left_original_ids: remap.originals,
        right_original_ids: Vec::new(),
    })
}

fn split_record_fields(line: &str) -> Vec<&str> {
    if line.contains('|') {
        line.split('|').map(|f| f.trim()).collect()
    } else {
        line.split('\t').map(|f| f.trim()).collect()
    }
}

/// Load a bipartite corpus: one event per line, `time`, left id list, right
/// id list. Each side is densely remapped on its own; ids within a side are
/// deduplicated.
pub fn load_bipartite_corpus(path: &Path) -> Result<Dataset> {
    let lines = read_lines(path)?;
    let mut left_remap = Remapper::new();
    let mut right_remap = Remapper::new();
    let mut events = Vec::new();
    for (ix, raw) in lines.iter().enumerate() {
        if raw.is_empty() {
            continue;
        }
        let fields = split_record_fields(raw);
        if fields.len() != 3 {
            return Err(DataError::Parse {
                file: path.display().to_string(),
                line: ix + 1,
                msg: format!("expected 3 fields (time, left ids, right ids), got {}", fields.len()),
            });
        }
        let time: f64 = parse_num(fields[0], path, ix + 1, "a timestamp")?;
        let parse_side = |field: &str, remap: &mut Remapper| -> Result<Vec<usize>> {
            let mut nodes = Vec::new();
            for tok in field.split(',') {
                let tok = tok.trim();
                if tok.is_empty() {
                    continue;
                }
                let id: i64 = parse_num(tok, path, ix + 1, "a node id")?;
                nodes.push(remap.map(id));
            }
            if nodes.is_empty() {
                return Err(DataError::Parse {
                    file: path.display().to_string(),
                    line: ix + 1,
                    msg: "empty hyperedge side".into(),
                });
            }
            nodes.sort_unstable();
            nodes.dedup();
            Ok(nodes)
        };
        let left = parse_side(fields[1], &mut left_remap)?;
        let right = parse_side(fields[2], &mut right_remap)?;
        events.push(EventRecord {
            edge: Hyperedge::Bipartite(left, right),
            time,
        });
    }
    events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    let stem = path
        .file_stem()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok(Dataset {
        name: stem,
        bipartite: true,
        num_left: left_remap.originals.len(),
        num_right: right_remap.originals.len(),
        events,
        time_scale: 1.0,
        left_original_ids: left_remap.originals,
        right_original_ids: right_remap.originals,
    })
}

/// Find and load a corpus under `path`: a directory holding a
/// `*-nverts.txt` triple (or a `.tsv` bipartite file), or a direct file path.
pub fn load_corpus(path: &Path, bipartite: bool) -> Result<Dataset> {
    if path.is_file() {
        return if bipartite {
            load_bipartite_corpus(path)
        } else {
            Err(DataError::NoCorpus(path.to_path_buf()))
        };
    }
    let entries = std::fs::read_dir(path)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect::<Vec<_>>();
    if bipartite {
        let mut tsvs: Vec<&PathBuf> = entries
            .iter()
            .filter(|p| p.extension().is_some_and(|e| e == "tsv"))
            .collect();
        tsvs.sort();
        return match tsvs.first() {
            Some(p) => load_bipartite_corpus(p),
            None => Err(DataError::NoCorpus(path.to_path_buf())),
        };
    }
    let mut nverts: Vec<&PathBuf> = entries
        .iter()
        .filter(|p| {
            p.file_name()
                .is_some_and(|f| f.to_string_lossy().ends_with("-nverts.txt"))
        })
        .collect();
    nverts.sort();
    let nverts_path = nverts.first().ok_or_else(|| DataError::NoCorpus(path.to_path_buf()))?;
    let base = nverts_path
        .to_string_lossy()
        .trim_end_matches("-nverts.txt")
        .to_string();
    load_simplex_corpus(
        nverts_path,
        Path::new(&format!("{base}-simplices.txt")),
        Path::new(&format!("{base}-times.txt")),
    )
}

/// Write the three-file simplex layout with dense ids; returns the paths.
pub fn save_simplex_corpus(ds: &Dataset, dir: &Path, stem: &str) -> Result<[PathBuf; 3]> {
    let mut nverts = String::new();
    let mut simplices = String::new();
    let mut times = String::new();
    for e in &ds.events {
        let nodes = e.edge.left();
        writeln!(nverts, "{}", nodes.len()).unwrap();
        for v in nodes {
            writeln!(simplices, "{v}").unwrap();
        }
        writeln!(times, "{}", e.time).unwrap();
    }
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let paths = [
        dir.join(format!("{stem}-nverts.txt")),
        dir.join(format!("{stem}-simplices.txt")),
        dir.join(format!("{stem}-times.txt")),
    ];
    for (path, body) in paths.iter().zip([nverts, simplices, times]) {
        std::fs::write(path, body).map_err(|source| DataError::Io {
            path: path.clone(),
            source,
        })?;
    }
    Ok(paths)
}

/// Write the line-oriented bipartite layout with dense ids.
pub fn save_bipartite_corpus(ds: &Dataset, path: &Path) -> Result<()> {
    let mut body = String::new();
    for e in &ds.events {
        let join = |nodes: &[usize]| {
            nodes
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(
            body,
            "{}\t{}\t{}",
            e.time,
            join(e.edge.left()),
            join(e.edge.right())
        )
        .unwrap();
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| DataError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, body).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Median of the positive interevent gaps, when one exists.
pub fn median_interevent_gap(events: &[EventRecord]) -> Option<f64> {
    let mut gaps: Vec<f64> = events
        .windows(2)
        .map(|w| w[1].time - w[0].time)
        .filter(|g| *g > 0.0)
        .collect();
    if gaps.is_empty() {
        return None;
    }
    gaps.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = gaps.len();
    Some(if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    })
}

/// Divide all timestamps by the median positive interevent gap, recording
/// the factor so durations can be reported in original units.
pub fn scale_times(mut ds: Dataset) -> Result<Dataset> {
    let factor = median_interevent_gap(&ds.events).ok_or(DataError::DegenerateTimes)?;
    for e in ds.events.iter_mut() {
        e.time /= factor;
    }
    ds.time_scale *= factor;
    Ok(ds)
}

/// 50/25/25 contiguous split at event indices floor(n/2) and floor(3n/4).
pub fn split(ds: &Dataset) -> Result<Split> {
    let n = ds.events.len();
    if n < 4 {
        return Err(DataError::TooFewEvents { got: n, need: 4 });
    }
    let a = n / 2;
    let b = (3 * n) / 4;
    Ok(Split {
        train: 0..a,
        val: a..b,
        test: b..n,
    })
}

/// Distinct-set and size statistics in the shape of the dataset table.
pub fn stats(ds: &Dataset) -> DatasetStats {
    let mut left_sets: BTreeSet<&[usize]> = BTreeSet::new();
    let mut right_sets: BTreeSet<&[usize]> = BTreeSet::new();
    for e in &ds.events {
        left_sets.insert(e.edge.left());
        if ds.bipartite {
            right_sets.insert(e.edge.right());
        }
    }
    DatasetStats {
        num_left: ds.num_left,
        num_right: ds.bipartite.then_some(ds.num_right),
        num_events: ds.events.len(),
        distinct_left: left_sets.len(),
        distinct_right: ds.bipartite.then_some(right_sets.len()),
    }
}

/// Per-hyperedge event process families for the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProcessFamily {
    Poisson { rate: f64 },
    Rayleigh { alpha: f64 },
    Hawkes { mu: f64, alpha: f64, decay: f64 },
}

#[derive(Debug, Clone)]
pub struct PlantedProcess {
    pub edge: Hyperedge,
    pub family: ProcessFamily,
}

/// Declarative synthetic stream: a node universe, a horizon, and one event
/// process per planted hyperedge.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub name: String,
    pub bipartite: bool,
    pub num_left: usize,
    pub num_right: usize,
    pub horizon: f64,
    pub processes: Vec<PlantedProcess>,
}

impl SyntheticSpec {
    /// Random distinct hyperedges all firing under the same process family.
    pub fn planted_random<R: Rng>(
        num_nodes: usize,
        num_edges: usize,
        size_range: (usize, usize),
        family: ProcessFamily,
        horizon: f64,
        rng: &mut R,
    ) -> Self {
        let mut edges: BTreeSet<Vec<usize>> = BTreeSet::new();
        let mut guard = 0;
        while edges.len() < num_edges && guard < num_edges * 100 {
            guard += 1;
            let size = rng.gen_range(size_range.0..=size_range.1.min(num_nodes));
            let mut pool: Vec<usize> = (0..num_nodes).collect();
            for i in (1..pool.len()).rev() {
                let j = rng.gen_range(0..=i);
                pool.swap(i, j);
            }
            let mut nodes = pool[..size].to_vec();
            nodes.sort_unstable();
            edges.insert(nodes);
        }
        SyntheticSpec {
            name: "synthetic".into(),
            bipartite: false,
            num_left: num_nodes,
            num_right: 0,
            horizon,
            processes: edges
                .into_iter()
                .map(|nodes| PlantedProcess {
                    edge: Hyperedge::Homogeneous(nodes),
                    family,
                })
                .collect(),
        }
    }

    /// Random distinct hyperedges firing as independent Poisson processes.
    pub fn planted_poisson<R: Rng>(
        num_nodes: usize,
        num_edges: usize,
        size_range: (usize, usize),
        rate: f64,
        horizon: f64,
        rng: &mut R,
    ) -> Self {
        let mut spec = Self::planted_random(
            num_nodes,
            num_edges,
            size_range,
            ProcessFamily::Poisson { rate },
            horizon,
            rng,
        );
        spec.name = "synthetic-poisson".into();
        spec
    }

    /// The projection-ambiguous benchmark: one node triple interacts as a
    /// genuine 3-hyperedge while a disjoint triple interacts only through
    /// its three pairwise edges. Both groups project onto the same triangle
    /// structure, so models scoring cliques cannot tell them apart.
    pub fn clique_confusable(rate: f64, horizon: f64) -> Self {
        let mut processes = vec![PlantedProcess {
            edge: Hyperedge::Homogeneous(vec![0, 1, 2]),
            family: ProcessFamily::Poisson { rate },
        }];
        for pair in [[3usize, 4], [3, 5], [4, 5]] {
            processes.push(PlantedProcess {
                edge: Hyperedge::Homogeneous(pair.to_vec()),
                family: ProcessFamily::Poisson { rate },
            });
        }
        SyntheticSpec {
            name: "synthetic-clique-confusable".into(),
            bipartite: false,
            num_left: 6,
            num_right: 0,
            horizon,
            processes,
        }
    }

    /// Random bipartite hyperedges firing as independent Poisson processes.
    pub fn planted_bipartite_poisson<R: Rng>(
        num_left: usize,
        num_right: usize,
        num_edges: usize,
        rate: f64,
        horizon: f64,
        rng: &mut R,
    ) -> Self {
        let mut edges: BTreeSet<(Vec<usize>, Vec<usize>)> = BTreeSet::new();
        let mut guard = 0;
        while edges.len() < num_edges && guard < num_edges * 100 {
            guard += 1;
            let pick = |n: usize, k: usize, rng: &mut R| -> Vec<usize> {
                let mut pool: Vec<usize> = (0..n).collect();
                for i in (1..pool.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    pool.swap(i, j);
                }
                let mut out = pool[..k.min(n)].to_vec();
                out.sort_unstable();
                out
            };
            let k_left = rng.gen_range(1..=2.min(num_left));
            let k_right = rng.gen_range(1..=2.min(num_right));
            edges.insert((pick(num_left, k_left, rng), pick(num_right, k_right, rng)));
        }
        SyntheticSpec {
            name: "synthetic-bipartite".into(),
            bipartite: true,
            num_left,
            num_right,
            horizon,
            processes: edges
                .into_iter()
                .map(|(l, r)| PlantedProcess {
                    edge: Hyperedge::Bipartite(l, r),
                    family: ProcessFamily::Poisson { rate },
                })
                .collect(),
        }
    }
}

/// Simulate every planted process over [0, horizon] by thinning and merge
/// the draws into one time-sorted stream.
pub fn generate_synthetic<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Dataset> {
    for p in &spec.processes {
        for &v in p.edge.left() {
            if v >= spec.num_left {
                return Err(DataError::NodeOutOfRange {
                    node: v,
                    universe: spec.num_left,
                });
            }
        }
        for &v in p.edge.right() {
            if v >= spec.num_right {
                return Err(DataError::NodeOutOfRange {
                    node: v,
                    universe: spec.num_right,
                });
            }
        }
    }
    let mut events = Vec::new();
    for p in &spec.processes {
        let times = match p.family {
            ProcessFamily::Poisson { rate } => {
                let mut process = ConstantProcess(rate);
                simulate_thinning(&mut process, 0.0, spec.horizon, rng)?
            }
            ProcessFamily::Rayleigh { alpha } => {
                let mut process = RayleighRenewalProcess {
                    alpha,
                    last_event: 0.0,
                };
                simulate_thinning(&mut process, 0.0, spec.horizon, rng)?
            }
            ProcessFamily::Hawkes { mu, alpha, decay } => {
                let mut process = HawkesProcess::new(mu, alpha, decay)?;
                simulate_thinning(&mut process, 0.0, spec.horizon, rng)?
            }
        };
        for t in times {
            events.push(EventRecord {
                edge: p.edge.clone(),
                time: t,
            });
        }
    }
    events.sort_by(|a, b| a.time.partial_cmp(&b.time).unwrap());
    Ok(Dataset {
        name: spec.name.clone(),
        bipartite: spec.bipartite,
        num_left: spec.num_left,
        num_right: spec.num_right,
        events,
        time_scale: 1.0,
        left_original_ids: (0..spec.num_left as i64).collect(),
        right_original_ids: (0..spec.num_right as i64).collect(),
    })
}

struct ConstantProcess(f64);

impl ThinnableProcess for ConstantProcess {
    fn lambda_at(&self, _t: f64) -> f64 {
        self.0
    }
    fn bound_from(&self, _t: f64, _to: f64) -> Option<f64> {
        Some(self.0)
    }
}

/// Drop homogeneous events below `min_size`; returns the kept dataset and
/// the number of removed events. Attention encoders need k >= 2.
pub fn filter_min_size(mut ds: Dataset, min_size: usize) -> (Dataset, usize) {
    let before = ds.events.len();
    ds.events.retain(|e| e.edge.size() >= min_size);
    let dropped = before - ds.events.len();
    (ds, dropped)
}
