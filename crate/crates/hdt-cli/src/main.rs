//! `hdt` — learn binary hash codes, index them, and search them.
//!
//! The subcommands chain into a pipeline over simple on-disk formats
//! (fvecs/ivecs vector files, a binary model checkpoint, a binary index
//! snapshot):
//!
//! ```text
//! synth -> ground-truth -> train -> hash/index -> query/bench
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hdt_core::{
    advise_radius, as_f64_matrix, brute_force_knn, expected_candidates, per_query_records,
    read_fvecs, read_ivecs, report_records, report_table, run_benchmark,
    simulate_hamming_distribution, synth_dataset, train, write_fvecs, write_ivecs,
    BenchmarkConfig, BenchmarkRun, DenseNet, Hasher, ModelHasher, MultiIndex,
    RandomHyperplaneHasher, SimilarityRule, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "hdt",
    version,
    about = "Binary hash codes with statistically calibrated Hamming-distance targets",
    long_about = "Trains embedding networks whose sign-binarized outputs make similar \
                  vectors collide within a small Hamming radius, builds multi-block \
                  Hamming indexes over the codes, and benchmarks re-ranked retrieval."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a clustered synthetic dataset as fvecs/ivecs files.
    Synth(SynthArgs),
    /// Compute exact k-nearest-neighbor lists by brute force.
    GroundTruth(GroundTruthArgs),
    /// Train an embedding model from labeled vectors or neighbor lists.
    Train(TrainArgs),
    /// Hash vectors into binary codes with a trained model.
    Hash(HashArgs),
    /// Build a searchable multi-block index over hashed vectors.
    Index(IndexArgs),
    /// Search an index, re-ranking Hamming-ball hits by embedding distance.
    Query(QueryArgs),
    /// Benchmark retrieval quality, work, and latency against ground truth.
    Bench(BenchArgs),
    /// Simulate the Hamming distance distribution at a fixed pair angle.
    SimulateDistribution(SimulateArgs),
    /// Suggest a search radius for a code length and dataset size.
    Advise(AdviseArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for base/train/query fvecs files and their label ivecs.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    clusters: usize,
    #[arg(long, default_value_t = 200)]
    per_cluster: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Standard deviation of the per-coordinate Gaussian spread around each
    /// unit-norm cluster center.
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GroundTruthArgs {
    /// Base vectors (fvecs).
    #[arg(long)]
    base: PathBuf,
    /// Query vectors (fvecs).
    #[arg(long)]
    queries: PathBuf,
    /// Neighbors per query.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Output neighbor lists (ivecs), one row of base ids per query.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training vectors (fvecs).
    #[arg(long)]
    data: PathBuf,
    /// Per-vector class labels (ivecs, one id per row); same label = similar.
    #[arg(long, conflicts_with = "neighbors")]
    labels: Option<PathBuf>,
    /// Per-vector neighbor lists (ivecs); listed pairs = similar.
    #[arg(long)]
    neighbors: Option<PathBuf>,
    /// Config file of `key = value` lines (defaults apply otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set n=32 --set steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output model checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HashArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Vectors to hash (fvecs).
    #[arg(long)]
    data: PathBuf,
    /// Output file of concatenated binary code records.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Vectors to index (fvecs); row number becomes the stored id.
    #[arg(long)]
    data: PathBuf,
    /// Search radius; derived from the code length and dataset size if omitted.
    #[arg(long)]
    radius: Option<u32>,
    /// Output index snapshot.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    /// Index snapshot.
    #[arg(long)]
    index: PathBuf,
    /// The model the index was hashed with.
    #[arg(long)]
    model: PathBuf,
    /// Query vectors (fvecs).
    #[arg(long)]
    queries: PathBuf,
    /// Matches to keep per query after embedding re-ranking.
    #[arg(long, default_value_t = 10)]
    top_l: usize,
    /// Only run the first N queries.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    /// Base vectors (fvecs).
    #[arg(long)]
    base: PathBuf,
    /// Query vectors (fvecs).
    #[arg(long)]
    queries: PathBuf,
    /// True neighbor lists (ivecs), as written by `ground-truth`.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Trained model to benchmark.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Also benchmark a random-hyperplane baseline with this many bits.
    #[arg(long)]
    hyperplane_bits: Option<u32>,
    /// Seed for the baseline's hyperplanes.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Search radii to sweep, e.g. `--radii 0,1,2`.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    radii: Vec<u32>,
    /// Matches to keep per query after re-ranking.
    #[arg(long, default_value_t = 100)]
    top_l: usize,
    /// Also print raw per-query counters, one key-value record per query.
    #[arg(long)]
    per_query: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Code length in bits.
    #[arg(long, default_value_t = 16)]
    bits: usize,
    /// Angle between the pair of unit vectors, in radians.
    #[arg(long, default_value_t = std::f64::consts::PI / 12.0)]
    theta: f64,
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct AdviseArgs {
    /// Code length in bits.
    #[arg(long)]
    bits: u32,
    /// Number of codes the index will hold.
    #[arg(long)]
    dataset_size: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match Cli::parse().cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::GroundTruth(a) => cmd_ground_truth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Hash(a) => cmd_hash(a),
        Cmd::Index(a) => cmd_index(a),
        Cmd::Query(a) => cmd_query(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::SimulateDistribution(a) => cmd_simulate(a),
        Cmd::Advise(a) => cmd_advise(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let data = synth_dataset(a.clusters, a.per_cluster, a.dim, a.noise, a.seed)?;
    std::fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    let labels_rows = |labels: &[u32]| -> Vec<Vec<u32>> { labels.iter().map(|&l| vec![l]).collect() };
    write_fvecs(a.out_dir.join("base.fvecs"), &data.base)?;
    write_ivecs(a.out_dir.join("base_labels.ivecs"), &labels_rows(&data.base_labels))?;
    write_fvecs(a.out_dir.join("train.fvecs"), &data.training)?;
    write_ivecs(a.out_dir.join("train_labels.ivecs"), &labels_rows(&data.training_labels))?;
    write_fvecs(a.out_dir.join("query.fvecs"), &data.queries)?;
    write_ivecs(a.out_dir.join("query_labels.ivecs"), &labels_rows(&data.query_labels))?;
    println!(
        "wrote {} base, {} training, and {} query vectors of dim {} to {}",
        data.base.len(),
        data.training.len(),
        data.queries.len(),
        a.dim,
        a.out_dir.display()
    );
    Ok(())
}

fn cmd_ground_truth(a: GroundTruthArgs) -> Result<()> {
    let base = read_fvecs(&a.base).with_context(|| format!("reading {}", a.base.display()))?;
    let queries =
        read_fvecs(&a.queries).with_context(|| format!("reading {}", a.queries.display()))?;
    let knn = brute_force_knn(&base, &queries, a.k)?;
    write_ivecs(&a.out, &knn)?;
    println!(
        "wrote {}-nearest-neighbor lists for {} queries over {} base vectors to {}",
        a.k,
        queries.len(),
        base.len(),
        a.out.display()
    );
    Ok(())
}

fn load_labels(path: &Path) -> Result<Vec<u32>> {
    let rows = read_ivecs(path).with_context(|| format!("reading {}", path.display()))?;
    rows.into_iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != 1 {
                bail!("{}: row {i} has {} entries, expected one label", path.display(), row.len());
            }
            Ok(row[0])
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    if a.labels.is_none() && a.neighbors.is_none() {
        bail!("pass --labels or --neighbors to define similarity");
    }
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    for kv in &a.sets {
        let (key, value) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv:?} is not of the form KEY=VALUE"))?;
        cfg.set(key.trim(), value)?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let vecs = read_fvecs(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let x = as_f64_matrix(&vecs)?;
    let labels;
    let lists;
    let rule = match (&a.labels, &a.neighbors) {
        (Some(path), None) => {
            labels = load_labels(path)?;
            SimilarityRule::Labels(&labels)
        }
        (None, Some(path)) => {
            lists =
                read_ivecs(path).with_context(|| format!("reading {}", path.display()))?;
            SimilarityRule::Neighbors(&lists)
        }
        (None, None) => bail!("pass --labels or --neighbors to define similarity"),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = DenseNet::new(x.ncols(), &cfg.widths, &mut rng)?;
    log::info!(
        "training {} -> {:?} ({} parameters) on {} vectors, {} steps",
        x.ncols(),
        cfg.widths,
        net.num_parameters(),
        x.nrows(),
        cfg.steps
    );
    train(&mut net, x.view(), &rule, &cfg, |t| {
        log::info!(
            "step {:>6}  J {:>10.4}  J1 {:>9.4}  J2 {:>9.4}  |w|^2 {:>8.2}  lr {:.4}",
            t.step,
            t.j,
            t.j1,
            t.j2,
            t.weights_norm_sq,
            t.lr
        );
    })?;
    let mut out = BufWriter::new(
        File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    net.save(&mut out)?;
    out.flush()?;
    println!("saved {}-bit model to {}", cfg.hdt.n, a.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<DenseNet> {
    let mut input = BufReader::new(
        File::open(path).with_context(|| format!("opening {}", path.display()))?,
    );
    let net = DenseNet::load(&mut input)
        .with_context(|| format!("loading model from {}", path.display()))?;
    Ok(net)
}

fn hash_file(model: &Path, data: &Path) -> Result<(ModelHasher, hdt_core::HashedSet, usize)> {
    let hasher = ModelHasher::new(load_model(model)?)?;
    let vecs = read_fvecs(data).with_context(|| format!("reading {}", data.display()))?;
    let count = vecs.len();
    let hashed = hasher.hash(&vecs)?;
    Ok((hasher, hashed, count))
}

fn cmd_hash(a: HashArgs) -> Result<()> {
    let (hasher, hashed, count) = hash_file(&a.model, &a.data)?;
    let mut out = BufWriter::new(
        File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    for code in &hashed.codes {
        code.write_to(&mut out)?;
    }
    out.flush()?;
    println!("hashed {count} vectors into {}-bit codes at {}", hasher.bits(), a.out.display());
    Ok(())
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let (hasher, hashed, count) = hash_file(&a.model, &a.data)?;
    let bits = hasher.bits();
    let radius = match a.radius {
        Some(r) => r,
        None => {
            let r = advise_radius(bits, count as u64)?;
            log::info!("using advised radius {r} for {count} codes of {bits} bits");
            r
        }
    };
    let dim = hashed.embeddings.first().map(Vec::len).unwrap_or(bits as usize);
    let mut index = MultiIndex::with_embeddings(bits, radius, dim)?;
    for (id, (code, emb)) in hashed.codes.iter().zip(&hashed.embeddings).enumerate() {
        index.insert_with_embedding(id as u64, *code, emb)?;
    }
    let mut out = BufWriter::new(
        File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?,
    );
    index.save(&mut out)?;
    out.flush()?;
    println!(
        "indexed {count} codes ({bits} bits, radius {radius}, ~{:.1} candidates per query) \
         at {}",
        expected_candidates(bits, radius, count as u64),
        a.out.display()
    );
    Ok(())
}

fn cmd_query(a: QueryArgs) -> Result<()> {
    let mut input = BufReader::new(
        File::open(&a.index).with_context(|| format!("opening {}", a.index.display()))?,
    );
    let index = MultiIndex::load(&mut input)
        .with_context(|| format!("loading index from {}", a.index.display()))?;
    let hasher = ModelHasher::new(load_model(&a.model)?)?;
    if hasher.bits() != index.bits() {
        bail!(
            "model produces {}-bit codes but the index holds {}-bit codes",
            hasher.bits(),
            index.bits()
        );
    }
    let queries =
        read_fvecs(&a.queries).with_context(|| format!("reading {}", a.queries.display()))?;
    let limit = a.limit.unwrap_or(queries.len()).min(queries.len());
    let hashed = hasher.hash(&queries[..limit])?;
    for (qi, (code, emb)) in hashed.codes.iter().zip(&hashed.embeddings).enumerate() {
        let (matches, stats) = index.lookup_ranked(code, emb, a.top_l)?;
        println!(
            "query={qi} candidates_fetched={} distance_comparisons={} \
             embedding_comparisons={} results_returned={}",
            stats.candidates_fetched,
            stats.distance_comparisons,
            stats.embedding_comparisons,
            stats.results_returned
        );
        for m in &matches {
            println!("  id {:>8}  hamming {:>3}  embedding {:.4}", m.id, m.distance, m.embedding_distance);
        }
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let base = read_fvecs(&a.base).with_context(|| format!("reading {}", a.base.display()))?;
    let queries =
        read_fvecs(&a.queries).with_context(|| format!("reading {}", a.queries.display()))?;
    let gt = read_ivecs(&a.ground_truth)
        .with_context(|| format!("reading {}", a.ground_truth.display()))?;
    if a.model.is_none() && a.hyperplane_bits.is_none() {
        bail!("pass --model and/or --hyperplane-bits to pick what to benchmark");
    }
    let cfg = BenchmarkConfig { radii: a.radii.clone(), top_l: a.top_l };
    let mut runs: Vec<BenchmarkRun> = Vec::new();
    if let Some(path) = &a.model {
        let hasher = ModelHasher::new(load_model(path)?)?;
        runs.extend(run_benchmark("model", &hasher, &base, &queries, &gt, &cfg)?);
    }
    if let Some(bits) = a.hyperplane_bits {
        let dim = base.first().map(Vec::len).unwrap_or(0);
        let hasher = RandomHyperplaneHasher::new(dim, bits, a.seed)?;
        runs.extend(run_benchmark("hyperplane", &hasher, &base, &queries, &gt, &cfg)?);
    }
    println!("{}", report_table(&runs));
    print!("{}", report_records(&runs));
    if a.per_query {
        for run in &runs {
            print!("{}", per_query_records(run));
        }
    }
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let sim = simulate_hamming_distribution(a.bits, a.theta, a.trials, a.seed)?;
    print!("{}", sim.table());
    println!(
        "flip probability {:.6}; total variation from binomial {:.6} over {} trials",
        sim.flip_probability(),
        sim.tv_distance(),
        a.trials
    );
    Ok(())
}

fn cmd_advise(a: AdviseArgs) -> Result<()> {
    let radius = advise_radius(a.bits, a.dataset_size)?;
    println!(
        "radius {radius}: {} blocks of ~{:.1} bits, ~{:.2} candidates per query at {} codes",
        radius + 1,
        a.bits as f64 / (radius + 1) as f64,
        expected_candidates(a.bits, radius, a.dataset_size),
        a.dataset_size
    );
    Ok(())
}
