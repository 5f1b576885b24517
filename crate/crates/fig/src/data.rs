//! Graph containers, JSONL serialization, the synthetic motif benchmark, and
//! epoch batching.
//!
//! One graph per line, UTF-8 with LF line endings:
//!
//! ```text
//! {"n": 8, "edges": [[0,1], ...], "x": [[...], ...], "e": [[...], ...]?,
//!  "y": 0, "rationale": [0,1,2,3,4]?}
//! ```
//!
//! `y` is a class index when the JSON number is an integer and a regression
//! target when it carries a fractional form. `e` and `rationale` are
//! optional; both round-trip bit-identically through save/load.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FigError, Result};

// ─── graph and dataset ───

#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn as_class(&self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Value(_) => None,
        }
    }

    pub fn as_value(&self) -> Option<f64> {
        match self {
            Label::Value(v) => Some(*v),
            Label::Class(_) => None,
        }
    }
}

/// One undirected graph. Node features are row-major `n × d_x`; edge
/// features, when present, align with `edges`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    pub x: Vec<f64>,
    pub d_x: usize,
    pub e: Option<Vec<f64>>,
    pub d_e: Option<usize>,
    pub y: Label,
    pub rationale: Option<Vec<usize>>,
}

impl Graph {
    /// Structural validation; `index` names the graph in error messages.
    pub fn validate(&self, index: usize) -> Result<()> {
        let fail = |rule: &str| {
            Err(FigError::Validation {
                graph: index,
                rule: rule.to_string(),
            })
        };
        if self.x.len() != self.n * self.d_x {
            return fail("node feature rows must match n");
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(u, v) in &self.edges {
            if u >= self.n || v >= self.n {
                return fail("edge endpoint out of range");
            }
            if u == v {
                return fail("self loops are not allowed");
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return fail("duplicate undirected edge");
            }
        }
        match (&self.e, self.d_e) {
            (Some(e), Some(d_e)) => {
                if e.len() != self.edges.len() * d_e {
                    return fail("edge feature rows must match edge count");
                }
            }
            (None, None) => {}
            _ => return fail("edge features and their dimension must agree"),
        }
        if let Some(r) = &self.rationale {
            let mut seen = std::collections::BTreeSet::new();
            for &v in r {
                if v >= self.n {
                    return fail("rationale node out of range");
                }
                if !seen.insert(v) {
                    return fail("duplicate rationale node");
                }
            }
        }
        Ok(())
    }

    /// Sorted neighbor lists (used by the generator's structural checks).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let adj = self.adjacency();
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == self.n
    }

    /// Keeps the first `n_max` nodes in input order, dropping incident edges
    /// and restricting features and rationale accordingly.
    pub fn truncate(&self, n_max: usize) -> Graph {
        if self.n <= n_max {
            return self.clone();
        }
        let keep_edge: Vec<bool> = self.edges.iter().map(|&(u, v)| u < n_max && v < n_max).collect();
        let edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .zip(&keep_edge)
            .filter(|(_, &k)| k)
            .map(|(&e, _)| e)
            .collect();
        let e = match (&self.e, self.d_e) {
            (Some(feat), Some(d_e)) => Some(
                self.edges
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| keep_edge[*i])
                    .flat_map(|(i, _)| feat[i * d_e..(i + 1) * d_e].to_vec())
                    .collect(),
            ),
            _ => None,
        };
        Graph {
            n: n_max,
            edges,
            x: self.x[..n_max * self.d_x].to_vec(),
            d_x: self.d_x,
            e,
            d_e: self.d_e,
            y: self.y.clone(),
            rationale: self
                .rationale
                .as_ref()
                .map(|r| r.iter().copied().filter(|&v| v < n_max).collect()),
        }
    }
}

/// A validated collection of graphs with consistent feature dimensions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub graphs: Vec<Graph>,
    pub d_x: usize,
    pub d_e: Option<usize>,
}

impl Dataset {
    pub fn from_graphs(graphs: Vec<Graph>) -> Result<Self> {
        if graphs.is_empty() {
            return Ok(Dataset::default());
        }
        let d_x = graphs[0].d_x;
        let d_e = graphs[0].d_e;
        for (i, g) in graphs.iter().enumerate() {
            g.validate(i)?;
            if g.d_x != d_x {
                return Err(FigError::Validation {
                    graph: i,
                    rule: format!("node feature dimension {} differs from dataset's {}", g.d_x, d_x),
                });
            }
            if g.d_e != d_e {
                return Err(FigError::Validation {
                    graph: i,
                    rule: "edge feature dimension differs across graphs".into(),
                });
            }
        }
        Ok(Dataset { graphs, d_x, d_e })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn mean_n(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        self.graphs.iter().map(|g| g.n as f64).sum::<f64>() / self.graphs.len() as f64
    }

    /// Virtual-node capacity policy: ten times the dataset's mean size,
    /// rounded up.
    pub fn n_max(&self) -> usize {
        (10.0 * self.mean_n()).ceil() as usize
    }
}

// ─── JSONL ───

#[derive(Serialize, Deserialize)]
struct GraphJson {
    n: usize,
    edges: Vec<(usize, usize)>,
    x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    e: Option<Vec<Vec<f64>>>,
    y: LabelJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rationale: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelJson {
    Int(i64),
    Float(f64),
}

fn nested(flat: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|i| flat[i * cols..(i + 1) * cols].to_vec()).collect()
}

fn flatten(rows: &[Vec<f64>], what: &str, graph: usize) -> Result<(Vec<f64>, usize)> {
    let cols = rows.first().map_or(0, |r| r.len());
    for r in rows {
        if r.len() != cols {
            return Err(FigError::Validation {
                graph,
                rule: format!("{what} rows must all have the same length"),
            });
        }
    }
    Ok((rows.iter().flatten().copied().collect(), cols))
}

impl Graph {
    fn to_json(&self) -> GraphJson {
        GraphJson {
            n: self.n,
            edges: self.edges.clone(),
            x: nested(&self.x, self.n, self.d_x),
            e: match (&self.e, self.d_e) {
                (Some(e), Some(d_e)) => Some(nested(e, self.edges.len(), d_e)),
                _ => None,
            },
            y: match &self.y {
                Label::Class(c) => LabelJson::Int(*c as i64),
                Label::Value(v) => LabelJson::Float(*v),
            },
            rationale: self.rationale.clone(),
        }
    }

    fn from_json(j: GraphJson, index: usize) -> Result<Graph> {
        let (x, d_x) = flatten(&j.x, "node feature", index)?;
        let (e, d_e) = match j.e {
            Some(rows) => {
                let (flat, d) = flatten(&rows, "edge feature", index)?;
                (Some(flat), Some(d))
            }
            None => (None, None),
        };
        let y = match j.y {
            LabelJson::Int(i) => {
                if i < 0 {
                    return Err(FigError::Validation {
                        graph: index,
                        rule: format!("class label {i} must be non-negative"),
                    });
                }
                Label::Class(i as usize)
            }
            LabelJson::Float(v) => Label::Value(v),
        };
        let g = Graph {
            n: j.n,
            edges: j.edges,
            x,
            d_x,
            e,
            d_e,
            y,
            rationale: j.rationale,
        };
        g.validate(index)?;
        Ok(g)
    }
}

/// Loads a JSONL dataset, validating every graph. An empty file yields an
/// empty dataset (with a warning on stderr) rather than an error.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| FigError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut graphs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| FigError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let j: GraphJson = serde_json::from_str(&line).map_err(|e| FigError::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        graphs.push(Graph::from_json(j, graphs.len())?);
    }
    if graphs.is_empty() {
        eprintln!("warning: {} contains no graphs", path.display());
    }
    Dataset::from_graphs(graphs)
}

/// Writes a dataset as JSONL (UTF-8, LF).
pub fn save_jsonl(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| FigError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for g in &dataset.graphs {
        let line = serde_json::to_string(&g.to_json()).expect("graph serialization is infallible");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| FigError::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| FigError::io(path.display().to_string(), e))
}

// ─── synthetic motif benchmark ───

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifKind {
    House,
    Cycle5,
}

impl MotifKind {
    /// Node count and edge list of the motif on nodes `0..5`.
    fn edges(self) -> (usize, Vec<(usize, usize)>) {
        match self {
            // square 0-1-2-3 plus a roof node 4 over the 0-1 side
            MotifKind::House => (5, vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 4), (1, 4)]),
            MotifKind::Cycle5 => (5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvModel {
    Tree,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotifGenConfig {
    pub num_graphs: usize,
    pub motifs: Vec<MotifKind>,
    pub env_model: EnvModel,
    pub env_size_range: (usize, usize),
    pub noise: f64,
    /// One-hot degree width; degrees are capped at `feature_dim − 1`.
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for MotifGenConfig {
    fn default() -> Self {
        MotifGenConfig {
            num_graphs: 500,
            motifs: vec![MotifKind::House, MotifKind::Cycle5],
            env_model: EnvModel::Tree,
            env_size_range: (3, 15),
            noise: 0.1,
            feature_dim: 10,
            seed: 0,
        }
    }
}

/// Generates labeled graphs, each one motif (the class) attached to an
/// environment graph by a single bridge edge. Node labels are shuffled per
/// graph; `rationale` records where the motif nodes ended up.
pub fn gen_motif_dataset(cfg: &MotifGenConfig) -> Result<Dataset> {
    if cfg.motifs.is_empty() {
        return Err(FigError::Config("at least one motif class is required".into()));
    }
    if cfg.env_size_range.0 < 1 || cfg.env_size_range.0 > cfg.env_size_range.1 {
        return Err(FigError::Config(format!(
            "env_size_range {:?} must satisfy 1 <= lo <= hi",
            cfg.env_size_range
        )));
    }
    if cfg.feature_dim == 0 {
        return Err(FigError::Config("feature_dim must be positive".into()));
    }
    if !(cfg.noise.is_finite() && cfg.noise >= 0.0) {
        return Err(FigError::Config(format!("noise must be a non-negative finite number, got {}", cfg.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = if cfg.noise > 0.0 {
        Some(Normal::new(0.0, cfg.noise).expect("validated stddev"))
    } else {
        None
    };
    let mut graphs = Vec::with_capacity(cfg.num_graphs);
    for _ in 0..cfg.num_graphs {
        let class = rng.gen_range(0..cfg.motifs.len());
        let (motif_n, motif_edges) = cfg.motifs[class].edges();
        let env_n = rng.gen_range(cfg.env_size_range.0..=cfg.env_size_range.1);
        let n = motif_n + env_n;

        let mut edges = motif_edges;
        // environment: a random tree, optionally densified
        for v in 1..env_n {
            let parent = rng.gen_range(0..v);
            edges.push((motif_n + parent, motif_n + v));
        }
        if cfg.env_model == EnvModel::Random {
            for u in 0..env_n {
                for v in (u + 1)..env_n {
                    let pair = (motif_n + u, motif_n + v);
                    if !edges.contains(&pair) && rng.gen_bool(0.15) {
                        edges.push(pair);
                    }
                }
            }
        }
        // exactly one bridge between motif and environment
        let bridge_m = rng.gen_range(0..motif_n);
        let bridge_e = motif_n + rng.gen_range(0..env_n);
        edges.push((bridge_m, bridge_e));

        // shuffle node labels so the rationale is not positional
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut edges: Vec<(usize, usize)> = edges
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (perm[u], perm[v]);
                (a.min(b), a.max(b))
            })
            .collect();
        edges.sort_unstable();
        let mut rationale: Vec<usize> = (0..motif_n).map(|v| perm[v]).collect();
        rationale.sort_unstable();

        let mut degree = vec![0usize; n];
        for &(u, v) in &edges {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut x = vec![0.0; n * cfg.feature_dim];
        for v in 0..n {
            x[v * cfg.feature_dim + degree[v].min(cfg.feature_dim - 1)] = 1.0;
            if let Some(normal) = &noise {
                for j in 0..cfg.feature_dim {
                    x[v * cfg.feature_dim + j] += normal.sample(&mut rng);
                }
            }
        }

        graphs.push(Graph {
            n,
            edges,
            x,
            d_x: cfg.feature_dim,
            e: None,
            d_e: None,
            y: Label::Class(class),
            rationale: Some(rationale),
        });
    }
    Dataset::from_graphs(graphs)
}

// ─── batching ───

/// Indices of one batch plus the within-batch environment-donor assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Positions into the dataset's graph list.
    pub indices: Vec<usize>,
    /// `partner[i]` is the batch position whose environment graph `i` swaps
    /// in. A derangement whenever the batch has 2+ graphs; `[0]` for a
    /// singleton.
    pub partner: Vec<usize>,
}

/// Shuffles the dataset and chunks it; the final batch may be smaller.
pub fn make_batches(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(FigError::Argument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let partner = sample_derangement(chunk.len(), &mut rng);
        batches.push(Batch {
            indices: chunk.to_vec(),
            partner,
        });
    }
    Ok(batches)
}

/// Uniform random derangement by rejection; identity only for size 1.
fn sample_derangement(size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if size == 0 {
        return Vec::new();
    }
    if size == 1 {
        return vec![0];
    }
    let mut perm: Vec<usize> = (0..size).collect();
    for _ in 0..200 {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
    // rejection is overwhelmingly likely to have returned by now; fall back
    // to a rotation, which is always a derangement
    (0..size).map(|i| (i + 1) % size).collect()
}
