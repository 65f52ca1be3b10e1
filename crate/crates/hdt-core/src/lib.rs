//! Learning binary hash codes with Hamming distance targets, plus the
//! multi-index Hamming search structure and retrieval benchmarking around it.
//!
//! The crate covers the full pipeline:
//!
//! * [`code`] — packed binary codes, binarization, Hamming distance, and
//!   substring decomposition.
//! * [`stat`] — the bit-flip probability on the unit hypersphere, the
//!   regularized incomplete beta function, binomial CDFs, and the
//!   underflow-safe log-CDF kernel.
//! * [`loss`] — the pairwise likelihood loss over a batch of embeddings,
//!   its analytic gradient, and dynamic batch similarity.
//! * [`model`] — a small densely connected network trained from scratch with
//!   plain SGD, batch normalization, and checkpointing.
//! * [`train`] — group-structured batch sampling and the training loop.
//! * [`index`] — the multi-index Hamming table with optional stored
//!   embeddings for re-ranked top-`l` retrieval.
//! * [`dataset`] — vector datasets, `fvecs`/`bvecs`/`ivecs` files, synthetic
//!   clustered data, and brute-force nearest neighbors.
//! * [`metrics`] — recall@k, MAP@k, precision/recall at Hamming radii.
//! * [`harness`] — end-to-end retrieval benchmarking with a trained model or
//!   a random-hyperplane baseline.

pub mod code;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod index;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod stat;
pub mod train;

pub use code::{binarize, hamming, BinaryCode, Substring, MAX_BITS};
pub use dataset::{
    as_f64_matrix, brute_force_knn, read_bvecs, read_fvecs, read_ivecs, synth_dataset,
    write_fvecs, write_ivecs, SynthDataset,
};
pub use error::{Error, Result};
pub use harness::{
    per_query_records, report_records, report_table, run_benchmark, BenchmarkConfig,
    BenchmarkRun, HashedSet, Hasher, ModelHasher, RandomHyperplaneHasher,
};
pub use index::{
    advise_radius, expected_candidates, MultiIndex, Neighbor, QueryStats, RankedNeighbor,
};
pub use loss::{
    dynamic_similarity, loss, pairwise_probabilities, EmbeddingBatch, HdtConfig, LossTerms,
    SimilarityMatrix, SimilarityRule,
};
pub use metrics::{
    average_precision_at_k, mean_average_precision_at_k, micro_precision_recall, percentile,
    recall_at_k,
};
pub use model::{DenseNet, ForwardCache, Gradients};
pub use train::{sample_batch, train, BatchPlan, TrainConfig, TrainTrace};
pub use stat::{
    binomial_cdf, binomial_pmf, bit_flip_probability, dlog_binomial_cdf_dp,
    log_binomial_cdf_safe, reg_inc_beta, sample_angled_pair, simulate_hamming_distribution,
    AngleSimulation, LikelihoodParams,
};
