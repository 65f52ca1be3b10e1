//! End-to-end retrieval benchmarking: hash a base set and a query set with
//! some hasher (a trained embedding model, or a random-hyperplane baseline),
//! build one multi-index per radius, run re-ranked queries, and summarize
//! quality, work, and latency.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::code::{binarize, BinaryCode};
use crate::dataset::as_f64_matrix;
use crate::error::{Error, Result};
use crate::index::{MultiIndex, QueryStats};
use crate::metrics::{
    average_precision_at_k, micro_precision_recall, percentile, recall_at_k,
};
use crate::model::DenseNet;

/// Codes plus unit-norm `f32` embeddings for one vector set, row-aligned.
#[derive(Clone, Debug)]
pub struct HashedSet {
    pub codes: Vec<BinaryCode>,
    pub embeddings: Vec<Vec<f32>>,
}

/// Anything that turns raw vectors into binary codes with re-rankable
/// embeddings.
pub trait Hasher {
    /// Code length in bits.
    fn bits(&self) -> u32;
    /// Hashes a batch of vectors.
    fn hash(&self, vecs: &[Vec<f32>]) -> Result<HashedSet>;
}

/// Binarizes embedding rows and L2-normalizes them for storage.
fn rows_to_hashes(y: ArrayView2<'_, f64>, out: &mut HashedSet) -> Result<()> {
    for row in y.axis_iter(Axis(0)) {
        let slice: Vec<f64> = row.to_vec();
        out.codes.push(binarize(&slice)?);
        let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::invalid(format!(
                "embedding row cannot be normalized (norm = {norm})"
            )));
        }
        out.embeddings.push(slice.iter().map(|v| (v / norm) as f32).collect());
    }
    Ok(())
}

/// Hashes through a trained embedding network (inference mode), in chunks.
pub struct ModelHasher {
    net: DenseNet,
}

impl ModelHasher {
    pub fn new(net: DenseNet) -> Result<Self> {
        let bits = net.output_dim();
        if !(8..=256).contains(&bits) {
            return Err(Error::invalid(format!(
                "model produces {bits}-wide embeddings, outside the 8..=256 code range"
            )));
        }
        Ok(ModelHasher { net })
    }

    pub fn network(&self) -> &DenseNet {
        &self.net
    }
}

const HASH_CHUNK: usize = 1024;

impl Hasher for ModelHasher {
    fn bits(&self) -> u32 {
        self.net.output_dim() as u32
    }

    fn hash(&self, vecs: &[Vec<f32>]) -> Result<HashedSet> {
        let mut out = HashedSet { codes: Vec::with_capacity(vecs.len()), embeddings: Vec::with_capacity(vecs.len()) };
        for chunk in vecs.chunks(HASH_CHUNK) {
            let x = as_f64_matrix(chunk)?;
            let y = self.net.forward(x.view())?;
            rows_to_hashes(y.view(), &mut out)?;
        }
        Ok(out)
    }
}

/// The classic data-independent baseline: project onto `bits` random
/// Gaussian hyperplanes and take signs.
pub struct RandomHyperplaneHasher {
    /// Projection matrix, shape `(input_dim, bits)`.
    g: Array2<f64>,
}

impl RandomHyperplaneHasher {
    pub fn new(input_dim: usize, bits: u32, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be at least 1"));
        }
        if !(8..=256).contains(&bits) {
            return Err(Error::invalid(format!("bits={bits} out of range 8..=256")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let g = Array2::from_shape_fn((input_dim, bits as usize), |_| normal.sample(&mut rng));
        Ok(RandomHyperplaneHasher { g })
    }
}

impl Hasher for RandomHyperplaneHasher {
    fn bits(&self) -> u32 {
        self.g.ncols() as u32
    }

    fn hash(&self, vecs: &[Vec<f32>]) -> Result<HashedSet> {
        let mut out = HashedSet { codes: Vec::with_capacity(vecs.len()), embeddings: Vec::with_capacity(vecs.len()) };
        for chunk in vecs.chunks(HASH_CHUNK) {
            let x = as_f64_matrix(chunk)?;
            if x.ncols() != self.g.nrows() {
                return Err(Error::shape(format!(
                    "vectors have dimension {} but the hasher projects from {}",
                    x.ncols(),
                    self.g.nrows()
                )));
            }
            let y = x.dot(&self.g);
            rows_to_hashes(y.view(), &mut out)?;
        }
        Ok(out)
    }
}

/// What to measure: one run per radius, each re-ranking to the best `top_l`.
#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    pub radii: Vec<u32>,
    pub top_l: usize,
}

/// Aggregated results of one (hasher, radius) run.
#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub label: String,
    pub radius: u32,
    pub queries: usize,
    /// Fraction of queries whose single nearest neighbor (the first
    /// ground-truth id) appears in the re-ranked top `l`.
    pub recall_at_l: f64,
    /// Mean average precision of the re-ranked top `l`, with the full
    /// ground-truth row as the relevant set.
    pub map_at_l: f64,
    /// Micro-averaged precision of the raw Hamming ball.
    pub ball_precision: f64,
    /// Micro-averaged recall of the raw Hamming ball.
    pub ball_recall: f64,
    pub mean_candidates: f64,
    pub mean_distance_comparisons: f64,
    pub mean_embedding_comparisons: f64,
    pub mean_results: f64,
    pub latency_p50_us: f64,
    pub latency_p95_us: f64,
    /// Raw per-query counters, in query order.
    pub query_stats: Vec<QueryStats>,
}

/// Hashes `base` and `queries`, builds one index per radius, and runs every
/// query through re-ranked lookup (timed) plus a plain ball lookup (for ball
/// precision/recall). `ground_truth[q]` lists query `q`'s true neighbor ids
/// in `base`.
pub fn run_benchmark(
    label: &str,
    hasher: &dyn Hasher,
    base: &[Vec<f32>],
    queries: &[Vec<f32>],
    ground_truth: &[Vec<u32>],
    cfg: &BenchmarkConfig,
) -> Result<Vec<BenchmarkRun>> {
    if base.is_empty() || queries.is_empty() {
        return Err(Error::invalid("benchmark needs nonempty base and query sets"));
    }
    if ground_truth.len() != queries.len() {
        return Err(Error::shape(format!(
            "{} ground-truth rows for {} queries",
            ground_truth.len(),
            queries.len()
        )));
    }
    if ground_truth.iter().any(|row| row.is_empty()) {
        return Err(Error::invalid("every query needs at least one ground-truth neighbor"));
    }
    if cfg.radii.is_empty() {
        return Err(Error::invalid("benchmark needs at least one radius"));
    }
    if cfg.top_l == 0 {
        return Err(Error::invalid("top_l must be at least 1"));
    }
    let bits = hasher.bits();
    let base_hashed = hasher.hash(base)?;
    let query_hashed = hasher.hash(queries)?;
    let relevant: Vec<Vec<u64>> = ground_truth
        .iter()
        .map(|row| row.iter().map(|&id| id as u64).collect())
        .collect();

    let mut runs = Vec::with_capacity(cfg.radii.len());
    for &radius in &cfg.radii {
        let mut index = MultiIndex::with_embeddings(bits, radius, bits as usize)?;
        for (id, (code, emb)) in base_hashed.codes.iter().zip(&base_hashed.embeddings).enumerate()
        {
            index.insert_with_embedding(id as u64, *code, emb)?;
        }
        let mut retrieved: Vec<Vec<u64>> = Vec::with_capacity(queries.len());
        let mut ball: Vec<Vec<u64>> = Vec::with_capacity(queries.len());
        let mut latencies = Vec::with_capacity(queries.len());
        let mut query_stats = Vec::with_capacity(queries.len());
        let mut sum_candidates = 0.0;
        let mut sum_distance = 0.0;
        let mut sum_embedding = 0.0;
        let mut sum_results = 0.0;
        for (code, emb) in query_hashed.codes.iter().zip(&query_hashed.embeddings) {
            let start = Instant::now();
            let (ranked, stats) = index.lookup_ranked(code, emb, cfg.top_l)?;
            latencies.push(start.elapsed().as_secs_f64() * 1e6);
            retrieved.push(ranked.iter().map(|n| n.id).collect());
            sum_candidates += stats.candidates_fetched as f64;
            sum_distance += stats.distance_comparisons as f64;
            sum_embedding += stats.embedding_comparisons as f64;
            sum_results += stats.results_returned as f64;
            query_stats.push(stats);
            let (in_ball, _) = index.lookup(code)?;
            ball.push(in_ball.iter().map(|n| n.id).collect());
        }
        let nq = queries.len() as f64;
        let mut recall_sum = 0.0;
        let mut ap_sum = 0.0;
        for (ret, rel) in retrieved.iter().zip(&relevant) {
            // recall@l is about the single true nearest neighbor; average
            // precision scores the whole relevant set.
            recall_sum += recall_at_k(ret, &rel[..1], cfg.top_l)?;
            ap_sum += average_precision_at_k(ret, rel, cfg.top_l)?;
        }
        let (ball_precision, ball_recall) = micro_precision_recall(&ball, &relevant)?;
        runs.push(BenchmarkRun {
            label: label.to_string(),
            radius,
            queries: queries.len(),
            recall_at_l: recall_sum / nq,
            map_at_l: ap_sum / nq,
            ball_precision,
            ball_recall,
            mean_candidates: sum_candidates / nq,
            mean_distance_comparisons: sum_distance / nq,
            mean_embedding_comparisons: sum_embedding / nq,
            mean_results: sum_results / nq,
            latency_p50_us: percentile(&latencies, 50.0)?,
            latency_p95_us: percentile(&latencies, 95.0)?,
            query_stats,
        });
    }
    Ok(runs)
}

/// Renders runs as an aligned text table.
pub fn report_table(runs: &[BenchmarkRun]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>3} {:>9} {:>9} {:>8} {:>8} {:>10} {:>10} {:>10} {:>8} {:>9} {:>9}\n",
        "label", "r", "recall@l", "map@l", "ball_p", "ball_r", "cand/q", "dist/q", "emb/q",
        "res/q", "p50(us)", "p95(us)"
    ));
    for run in runs {
        out.push_str(&format!(
            "{:<20} {:>3} {:>9.4} {:>9.4} {:>8.4} {:>8.4} {:>10.1} {:>10.1} {:>10.1} {:>8.1} {:>9.1} {:>9.1}\n",
            run.label,
            run.radius,
            run.recall_at_l,
            run.map_at_l,
            run.ball_precision,
            run.ball_recall,
            run.mean_candidates,
            run.mean_distance_comparisons,
            run.mean_embedding_comparisons,
            run.mean_results,
            run.latency_p50_us,
            run.latency_p95_us,
        ));
    }
    out
}

/// Renders runs as machine-readable flat key-value records, one line per
/// run. Values use the shortest exact decimal form; the label is quoted.
pub fn report_records(runs: &[BenchmarkRun]) -> String {
    let mut out = String::new();
    for run in runs {
        out.push_str(&format!(
            "label={:?} radius={} queries={} recall_at_l={} map_at_l={} ball_precision={} \
             ball_recall={} mean_candidates={} mean_distance_comparisons={} \
             mean_embedding_comparisons={} mean_results={} latency_p50_us={} latency_p95_us={}\n",
            run.label,
            run.radius,
            run.queries,
            run.recall_at_l,
            run.map_at_l,
            run.ball_precision,
            run.ball_recall,
            run.mean_candidates,
            run.mean_distance_comparisons,
            run.mean_embedding_comparisons,
            run.mean_results,
            run.latency_p50_us,
            run.latency_p95_us,
        ));
    }
    out
}

/// Renders one run's raw per-query counters as flat key-value records, one
/// line per query.
pub fn per_query_records(run: &BenchmarkRun) -> String {
    let mut out = String::new();
    for (q, s) in run.query_stats.iter().enumerate() {
        out.push_str(&format!(
            "label={:?} radius={} query={q} candidates_fetched={} distance_comparisons={} \
             embedding_comparisons={} results_returned={}\n",
            run.label,
            run.radius,
            s.candidates_fetched,
            s.distance_comparisons,
            s.embedding_comparisons,
            s.results_returned,
        ));
    }
    out
}
