//! The pairwise likelihood loss over a batch of embeddings.
//!
//! For a batch of row embeddings `Y` (one row per input, width `n`), rows are
//! L2-normalized to `Z` and every off-diagonal pair gets a bit-flip
//! probability `P_ij = arccos(Z_i . Z_j) / pi`. With `S` the boolean pairwise
//! similarity matrix, the loss is
//!
//! ```text
//! J = -J1 - lambda * J2 + lambda_w * J3
//! J1 = Avg over similar pairs    of log F(r; n, P_ij)
//! J2 = Avg over dissimilar pairs of log F(n - r - 1; n, 1 - P_ij)
//! J3 = squared L2 norm of the model weights
//! ```
//!
//! where `F` is the binomial CDF: `J1` rewards similar pairs likely to land
//! within Hamming distance `r`, and `J2` rewards dissimilar pairs likely to
//! land outside it. Both terms route through the underflow-safe log kernel
//! ([`crate::stat::LikelihoodParams`]), which takes the beta-side argument:
//! `log F(r; n, p) = log I(1 - p; n - r, r + 1)`, so similar pairs evaluate
//! the kernel at `1 - P_ij` and dissimilar pairs at `P_ij`.
//!
//! Each term is normalized by its own pair count, so batches with unbalanced
//! similarity structure keep both terms on comparable scales. The returned
//! gradient is `dJ/dY`; the `J3` term contributes to the loss value only, its
//! gradient being applied as decoupled weight decay inside the optimizer.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::stat::LikelihoodParams;

/// Hyperparameters shared across the loss, trainer, and retrieval stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HdtConfig {
    /// Code length in bits (8..=256).
    pub n: u32,
    /// Hamming target radius, `r < n`.
    pub r: u32,
    /// Weight of the dissimilar-pair term, `> 0`.
    pub lambda: f64,
    /// Weight-decay coefficient, `>= 0`.
    pub lambda_w: f64,
    /// Extrapolation threshold of the safe log-CDF kernel, in `(0, 1)`.
    pub p0: f64,
    /// Inputs per training batch.
    pub batch_size: usize,
    /// Inputs per similar group (one marker plus `group_size - 1` similars).
    pub group_size: usize,
    /// Result budget for re-ranked retrieval.
    pub top_l: usize,
}

impl Default for HdtConfig {
    fn default() -> Self {
        HdtConfig {
            n: 64,
            r: 2,
            lambda: 300.0,
            lambda_w: 1e-6,
            p0: 0.05,
            batch_size: 128,
            group_size: 4,
            top_l: 100,
        }
    }
}

impl HdtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(8..=256).contains(&self.n) {
            return Err(Error::invalid(format!("n={} out of range 8..=256", self.n)));
        }
        if self.r >= self.n {
            return Err(Error::invalid(format!("r={} must be below n={}", self.r, self.n)));
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::invalid(format!("lambda={} must be positive", self.lambda)));
        }
        if !self.lambda_w.is_finite() || self.lambda_w < 0.0 {
            return Err(Error::invalid(format!("lambda_w={} must be nonnegative", self.lambda_w)));
        }
        if !self.p0.is_finite() || self.p0 <= 0.0 || self.p0 >= 1.0 {
            return Err(Error::invalid(format!("p0={} must lie strictly inside (0, 1)", self.p0)));
        }
        if self.group_size < 2 {
            return Err(Error::invalid(format!(
                "group_size={} must be at least 2",
                self.group_size
            )));
        }
        if self.batch_size < 2 * self.group_size {
            return Err(Error::invalid(format!(
                "batch_size={} must hold at least two groups of {}",
                self.batch_size, self.group_size
            )));
        }
        if self.batch_size % self.group_size != 0 {
            return Err(Error::invalid(format!(
                "group_size={} must divide batch_size={}",
                self.group_size, self.batch_size
            )));
        }
        if self.top_l == 0 {
            return Err(Error::invalid("top_l must be at least 1"));
        }
        Ok(())
    }
}

/// A batch of raw embeddings `Y` with their L2-normalized rows `Z`.
///
/// `Z` and the row norms are computed at construction; the batch is
/// immutable afterwards, so the two can never drift apart.
#[derive(Clone, Debug)]
pub struct EmbeddingBatch {
    y: Array2<f64>,
    z: Array2<f64>,
    row_norms: Vec<f64>,
}

impl EmbeddingBatch {
    pub fn new(y: Array2<f64>) -> Result<Self> {
        let mut z = y.clone();
        let mut row_norms = Vec::with_capacity(y.nrows());
        for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() || norm < 1e-12 {
                return Err(Error::invalid(format!(
                    "embedding row {i} cannot be normalized (norm = {norm})"
                )));
            }
            row.mapv_inplace(|v| v / norm);
            row_norms.push(norm);
        }
        Ok(EmbeddingBatch { y, z, row_norms })
    }

    /// Raw embeddings, one row per input.
    pub fn y(&self) -> ArrayView2<'_, f64> {
        self.y.view()
    }

    /// Unit-normalized embeddings.
    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    /// L2 norm of each raw row.
    pub fn row_norms(&self) -> &[f64] {
        &self.row_norms
    }

    /// Number of inputs in the batch.
    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding width.
    pub fn dim(&self) -> usize {
        self.y.ncols()
    }
}

/// Symmetric boolean pairwise similarity aligned to batch order.
/// The diagonal is ignored and stored as `false`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    s: Array2<bool>,
}

impl SimilarityMatrix {
    pub fn new(mut s: Array2<bool>) -> Result<Self> {
        if s.nrows() != s.ncols() {
            return Err(Error::shape(format!(
                "similarity matrix must be square, got {}x{}",
                s.nrows(),
                s.ncols()
            )));
        }
        for i in 0..s.nrows() {
            s[[i, i]] = false;
            for j in (i + 1)..s.ncols() {
                if s[[i, j]] != s[[j, i]] {
                    return Err(Error::invalid(format!(
                        "similarity matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(SimilarityMatrix { s })
    }

    /// Number of inputs.
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether inputs at batch positions `i` and `j` are similar.
    pub fn is_similar(&self, i: usize, j: usize) -> bool {
        self.s[[i, j]]
    }

    /// `(similar, dissimilar)` unordered off-diagonal pair counts.
    pub fn pair_counts(&self) -> (usize, usize) {
        let b = self.len();
        let mut sim = 0;
        for i in 0..b {
            for j in (i + 1)..b {
                if self.s[[i, j]] {
                    sim += 1;
                }
            }
        }
        (sim, b * (b - 1) / 2 - sim)
    }
}

/// Pairwise bit-flip probabilities `P = arccos(Z Z^T) / pi`: symmetric with a
/// zero diagonal. Rows of `z` must be unit-normalized.
pub fn pairwise_probabilities(z: ArrayView2<'_, f64>) -> Array2<f64> {
    let b = z.nrows();
    let c = z.dot(&z.t());
    let mut p = Array2::zeros((b, b));
    for i in 0..b {
        for j in (i + 1)..b {
            let v = c[[i, j]].clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    p
}

/// Loss value, its components, and the gradient with respect to `Y`.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Total loss `J = -J1 - lambda * J2 + lambda_w * J3`.
    pub j: f64,
    /// Similar-pair term (average log-likelihood, nonpositive).
    pub j1: f64,
    /// Dissimilar-pair term (average log-likelihood, nonpositive).
    pub j2: f64,
    /// Number of unordered similar pairs scored.
    pub n_similar: usize,
    /// Number of unordered dissimilar pairs scored.
    pub n_dissimilar: usize,
    /// `dJ/dY`, one row per input.
    pub grad_y: Array2<f64>,
}

/// Keeps `arccos`' derivative finite when a pair is exactly (anti)parallel.
const ACOS_GUARD: f64 = 1e-7;

/// Evaluates the loss and its gradient for one batch.
///
/// `weights_norm_sq` is the model's current `J3 = ||w||^2`; it contributes to
/// the loss value only (its gradient is the optimizer's weight decay).
/// The batch must contain at least one similar and one dissimilar pair.
pub fn loss(
    batch: &EmbeddingBatch,
    s: &SimilarityMatrix,
    cfg: &HdtConfig,
    weights_norm_sq: f64,
) -> Result<LossTerms> {
    cfg.validate()?;
    let b = batch.len();
    if s.len() != b {
        return Err(Error::shape(format!(
            "similarity matrix is {}x{} but the batch has {} rows",
            s.len(),
            s.len(),
            b
        )));
    }
    if batch.dim() != cfg.n as usize {
        return Err(Error::shape(format!(
            "embedding width {} does not match configured n={}",
            batch.dim(),
            cfg.n
        )));
    }
    let (n_similar, n_dissimilar) = s.pair_counts();
    if n_similar == 0 {
        return Err(Error::DegenerateBatch("batch has no similar pair".into()));
    }
    if n_dissimilar == 0 {
        return Err(Error::DegenerateBatch("batch has no dissimilar pair".into()));
    }

    let lp_sim = LikelihoodParams::new(cfg.n, cfg.r, cfg.p0)?;
    let lp_dis = LikelihoodParams::new(cfg.n, cfg.n - cfg.r - 1, cfg.p0)?;

    let z = batch.z();
    let c = z.dot(&z.t());
    let mut j1 = 0.0;
    let mut j2 = 0.0;
    let mut g = Array2::<f64>::zeros((b, b));
    for i in 0..b {
        for j in (i + 1)..b {
            let raw = c[[i, j]];
            let p = raw.clamp(-1.0, 1.0).acos() / std::f64::consts::PI;
            // dJ/dP for this unordered pair.
            let dj_dp = if s.is_similar(i, j) {
                j1 += lp_sim.log_cdf_safe(1.0 - p);
                lp_sim.dlog_cdf_dp(1.0 - p) / n_similar as f64
            } else {
                j2 += lp_dis.log_cdf_safe(p);
                -cfg.lambda * lp_dis.dlog_cdf_dp(p) / n_dissimilar as f64
            };
            // dP/dc: zero in the clamped region (subgradient of the clamp),
            // guarded near |c| = 1 so the derivative stays finite.
            let dp_dc = if raw.abs() > 1.0 {
                0.0
            } else {
                -1.0 / (std::f64::consts::PI * (1.0 - raw * raw).sqrt().max(ACOS_GUARD))
            };
            let gij = dj_dp * dp_dc;
            g[[i, j]] = gij;
            g[[j, i]] = gij;
        }
    }
    j1 /= n_similar as f64;
    j2 /= n_dissimilar as f64;
    let j = -j1 - cfg.lambda * j2 + cfg.lambda_w * weights_norm_sq;

    // dJ/dZ = G Z, then back through the row normalization:
    // dJ/dY_i = (g_i - (z_i . g_i) z_i) / ||y_i||.
    let mut grad_y = g.dot(&z);
    for i in 0..b {
        let zi = z.row(i);
        let gi = grad_y.row(i);
        let dot: f64 = zi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
        let norm = batch.row_norms()[i];
        let mut row = grad_y.row_mut(i);
        for (k, gk) in row.iter_mut().enumerate() {
            *gk = (*gk - dot * zi[k]) / norm;
        }
    }

    Ok(LossTerms { j, j1, j2, n_similar, n_dissimilar, grad_y })
}

/// Dataset-level similarity metadata.
#[derive(Clone, Copy, Debug)]
pub enum SimilarityRule<'a> {
    /// Inputs are similar when they share a label; `labels[id]` is input
    /// `id`'s label.
    Labels(&'a [u32]),
    /// Inputs are similar when either appears in the other's neighbor list
    /// (symmetrized by OR); `neighbors[id]` lists input `id`'s neighbors.
    Neighbors(&'a [Vec<u32>]),
}

impl SimilarityRule<'_> {
    /// Number of inputs the rule covers.
    pub fn len(&self) -> usize {
        match self {
            SimilarityRule::Labels(labels) => labels.len(),
            SimilarityRule::Neighbors(lists) => lists.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_id(&self, id: usize) -> Result<()> {
        if id >= self.len() {
            return Err(Error::invalid(format!(
                "input id {id} is missing similarity metadata (have {})",
                self.len()
            )));
        }
        Ok(())
    }

    /// Whether dataset items `a` and `b` are similar under the rule.
    pub fn similar(&self, a: usize, b: usize) -> bool {
        match self {
            SimilarityRule::Labels(labels) => labels[a] == labels[b],
            SimilarityRule::Neighbors(lists) => {
                lists[a].contains(&(b as u32)) || lists[b].contains(&(a as u32))
            }
        }
    }
}

/// Builds the batch similarity matrix from dataset ids and the rule.
///
/// `groups`, when given, assigns a group index to every batch position;
/// members of the same group are marked similar even if the rule's metadata
/// does not connect them (groups are built from a similarity seed). Two batch
/// positions holding the same dataset id are always similar. Under the
/// neighbor rule with no group structure, a batch whose referenced lists are
/// all empty carries no similarity signal at all and is rejected.
pub fn dynamic_similarity(
    ids: &[usize],
    rule: &SimilarityRule<'_>,
    groups: Option<&[usize]>,
) -> Result<SimilarityMatrix> {
    let b = ids.len();
    if let Some(g) = groups {
        if g.len() != b {
            return Err(Error::shape(format!(
                "groups cover {} positions but the batch has {b}",
                g.len()
            )));
        }
    }
    for &id in ids {
        rule.check_id(id)?;
    }
    if groups.is_none() {
        if let SimilarityRule::Neighbors(lists) = rule {
            if ids.iter().all(|&id| lists[id].is_empty()) {
                return Err(Error::invalid(
                    "all neighbor lists in the batch are empty and no group structure \
                     is available to fall back on",
                ));
            }
        }
    }
    let mut s = Array2::from_elem((b, b), false);
    for i in 0..b {
        for j in (i + 1)..b {
            let same_group = groups.map_or(false, |g| g[i] == g[j]);
            let v = ids[i] == ids[j] || same_group || rule.similar(ids[i], ids[j]);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    SimilarityMatrix::new(s)
}
