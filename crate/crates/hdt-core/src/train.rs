//! Training loop: group-structured batch sampling, flat key-value
//! configuration, and SGD with a one-step learning-rate decay.
//!
//! Batches are built from groups: each group draws a marker input uniformly
//! at random, then fills the rest of the group with inputs similar to the
//! marker (same label, or drawn from its neighbor list). Group membership
//! seeds the batch similarity matrix, and the full similarity rule is
//! re-applied across the whole batch so same-label or neighboring inputs in
//! *different* groups still count as similar
//! ([`crate::loss::dynamic_similarity`]).
//!
//! A batch needs both similar and dissimilar pairs to carry a training
//! signal; when a draw happens to contain only one class (all markers
//! sharing a label, say), it is rejected and redrawn, with a bounded retry
//! so genuinely single-class data still surfaces an error.
//!
//! The learning rate drops by 10x after two thirds of the steps. Training
//! aborts with [`Error::NonFiniteLoss`] the moment the forward pass or loss
//! stops being finite, reporting the offending step and loss terms.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::{dynamic_similarity, loss, EmbeddingBatch, HdtConfig, SimilarityRule};
use crate::model::DenseNet;

/// Everything a training run needs, parseable from a flat `key=value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hdt: HdtConfig,
    /// Total SGD steps.
    pub steps: usize,
    /// Base learning rate (decays 10x after `2 * steps / 3`).
    pub lr: f64,
    /// Seed for sampling and initialization.
    pub seed: u64,
    /// Layer widths of the embedding network; the last width must equal
    /// the code length `n`.
    pub widths: Vec<usize>,
    /// Emit a trace entry every this many steps (the last step always
    /// traces).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hdt: HdtConfig::default(),
            steps: 3000,
            lr: 0.01,
            seed: 1,
            widths: vec![128, 64],
            log_every: 100,
        }
    }
}

impl TrainConfig {
    /// Applies one `key=value` override. Unknown keys and malformed values
    /// are errors, so typos in config files cannot pass silently.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse::<T>().map_err(|_| {
                Error::invalid(format!("bad value {value:?} for config key {key:?}"))
            })
        }
        match key {
            "n" => self.hdt.n = parse(key, value)?,
            "r" => self.hdt.r = parse(key, value)?,
            "lambda" => self.hdt.lambda = parse(key, value)?,
            "lambda_w" => self.hdt.lambda_w = parse(key, value)?,
            "p0" => self.hdt.p0 = parse(key, value)?,
            "batch_size" => self.hdt.batch_size = parse(key, value)?,
            "group_size" => self.hdt.group_size = parse(key, value)?,
            "top_l" => self.hdt.top_l = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "widths" => {
                let widths = value
                    .split(',')
                    .map(|v| parse::<usize>(key, v))
                    .collect::<Result<Vec<_>>>()?;
                self.widths = widths;
            }
            other => {
                return Err(Error::invalid(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parses a flat config file: one `key=value` per line, `#` comments and
    /// blank lines ignored. Starts from defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!("config line {} is not key=value: {raw:?}", lineno + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hdt.validate()?;
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid(format!("lr={} must be positive", self.lr)));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1"));
        }
        match self.widths.last() {
            None => return Err(Error::invalid("widths must list at least one layer")),
            Some(&last) if last as u32 != self.hdt.n => {
                return Err(Error::invalid(format!(
                    "the final layer width {last} must equal the code length n={}",
                    self.hdt.n
                )));
            }
            Some(_) => {}
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("layer widths must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate at a given step: the base rate for the first two
    /// thirds, a tenth of it afterwards.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.steps * 2 / 3 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// One sampled batch: dataset ids (in batch order) and each position's
/// group index.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub ids: Vec<usize>,
    pub groups: Vec<usize>,
}

/// Samples one group-structured batch. Each group's marker is drawn
/// uniformly; its companions come from the marker's similarity pool (same
/// label, or its neighbor list). A marker with an empty pool keeps the group
/// filled with copies of itself, which still yields valid similar pairs.
pub fn sample_batch(
    rng: &mut impl Rng,
    rule: &SimilarityRule<'_>,
    cfg: &HdtConfig,
) -> Result<BatchPlan> {
    cfg.validate()?;
    let total = rule.len();
    if total < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 training inputs, have {total}"
        )));
    }
    let num_groups = cfg.batch_size / cfg.group_size;
    let mut ids = Vec::with_capacity(cfg.batch_size);
    let mut groups = Vec::with_capacity(cfg.batch_size);
    for group in 0..num_groups {
        let marker = rng.gen_range(0..total);
        ids.push(marker);
        groups.push(group);
        for _ in 1..cfg.group_size {
            let partner = match rule {
                SimilarityRule::Labels(labels) => {
                    // Reservoir-sample a same-label partner (marker allowed).
                    let mut pick = marker;
                    let mut seen = 0usize;
                    for (id, &label) in labels.iter().enumerate() {
                        if label == labels[marker] {
                            seen += 1;
                            if rng.gen_range(0..seen) == 0 {
                                pick = id;
                            }
                        }
                    }
                    pick
                }
                SimilarityRule::Neighbors(lists) => {
                    let pool = &lists[marker];
                    if pool.is_empty() {
                        marker
                    } else {
                        let neighbor = pool[rng.gen_range(0..pool.len())] as usize;
                        if neighbor >= total {
                            return Err(Error::invalid(format!(
                                "input {marker} lists neighbor {neighbor}, beyond the \
                                 {total} training inputs"
                            )));
                        }
                        neighbor
                    }
                }
            };
            ids.push(partner);
            groups.push(group);
        }
    }
    Ok(BatchPlan { ids, groups })
}

/// One trace entry emitted during training.
#[derive(Clone, Copy, Debug)]
pub struct TrainTrace {
    pub step: usize,
    pub j: f64,
    pub j1: f64,
    pub j2: f64,
    pub weights_norm_sq: f64,
    pub lr: f64,
}

/// Trains `model` on `x` (one row per input) under the similarity rule.
/// `on_trace` fires every `log_every` steps and on the final step.
///
/// The model must already match the config (input width, final width `n`).
pub fn train(
    model: &mut DenseNet,
    x: ArrayView2<'_, f64>,
    rule: &SimilarityRule<'_>,
    cfg: &TrainConfig,
    mut on_trace: impl FnMut(&TrainTrace),
) -> Result<()> {
    cfg.validate()?;
    if model.input_dim() != x.ncols() {
        return Err(Error::shape(format!(
            "model expects input width {} but the data has {}",
            model.input_dim(),
            x.ncols()
        )));
    }
    if model.output_dim() as u32 != cfg.hdt.n {
        return Err(Error::shape(format!(
            "model produces {}-wide embeddings but the config wants n={}",
            model.output_dim(),
            cfg.hdt.n
        )));
    }
    if rule.len() != x.nrows() {
        return Err(Error::shape(format!(
            "similarity metadata covers {} inputs but the data has {} rows",
            rule.len(),
            x.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for step in 0..cfg.steps {
        // Rejection-sample until the batch has both pair classes: groups
        // guarantee similar pairs, but a batch whose markers all share a
        // label would have no dissimilar ones.
        let (plan, s) = {
            let mut attempt = 0;
            loop {
                let plan = sample_batch(&mut rng, rule, &cfg.hdt)?;
                let s = dynamic_similarity(&plan.ids, rule, Some(&plan.groups))?;
                let (n_sim, n_dis) = s.pair_counts();
                if n_sim > 0 && n_dis > 0 {
                    break (plan, s);
                }
                attempt += 1;
                if attempt >= 100 {
                    return Err(Error::DegenerateBatch(format!(
                        "no batch with both similar and dissimilar pairs after \
                         {attempt} draws at step {step}; the training data appears \
                         to hold a single similarity class"
                    )));
                }
            }
        };
        let mut xb = Array2::zeros((plan.ids.len(), x.ncols()));
        for (row, &id) in plan.ids.iter().enumerate() {
            xb.index_axis_mut(Axis(0), row).assign(&x.row(id));
        }
        let (y, cache) = model.forward_train(xb.view())?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                j: f64::NAN,
                j1: f64::NAN,
                j2: f64::NAN,
            });
        }
        let batch = EmbeddingBatch::new(y)?;
        let terms = loss(&batch, &s, &cfg.hdt, model.weights_norm_sq())?;
        if !terms.j.is_finite() || !terms.j1.is_finite() || !terms.j2.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                j: terms.j,
                j1: terms.j1,
                j2: terms.j2,
            });
        }
        let grads = model.backward(&cache, terms.grad_y.view())?;
        let lr = cfg.lr_at(step);
        model.sgd_step(&grads, lr, cfg.hdt.lambda_w)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            on_trace(&TrainTrace {
                step,
                j: terms.j,
                j1: terms.j1,
                j2: terms.j2,
                weights_norm_sq: model.weights_norm_sq(),
                lr,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{as_f64_matrix, synth_dataset};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            hdt: HdtConfig {
                n: 8,
                r: 1,
                lambda: 30.0,
                lambda_w: 1e-6,
                p0: 0.05,
                batch_size: 16,
                group_size: 4,
                top_l: 10,
            },
            steps: 30,
            lr: 0.05,
            seed: 9,
            widths: vec![16, 8],
            log_every: 5,
        }
    }

    #[test]
    fn config_parse_and_overrides() {
        let text = "\
# comment
n=16
r=0

lambda = 250
widths=32,16
steps=10
";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.hdt.n, 16);
        assert_eq!(cfg.hdt.r, 0);
        assert_eq!(cfg.hdt.lambda, 250.0);
        assert_eq!(cfg.widths, vec![32, 16]);
        assert_eq!(cfg.steps, 10);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.hdt.batch_size, HdtConfig::default().batch_size);

        let mut cfg = cfg;
        cfg.set("lr", "0.01").unwrap();
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(TrainConfig::parse("lamda=300\n").is_err(), "typo must not pass");
        assert!(TrainConfig::parse("lr=fast\n").is_err());
        assert!(TrainConfig::parse("just a line\n").is_err());
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("widths", "32,oops").is_err());
    }

    #[test]
    fn config_validates_width_code_length_agreement() {
        let mut cfg = TrainConfig::default();
        cfg.hdt.n = 16;
        cfg.widths = vec![32, 8];
        assert!(cfg.validate().is_err(), "final width 8 != n=16");
        cfg.widths = vec![32, 16];
        assert!(cfg.validate().is_ok());
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lr_decays_after_two_thirds() {
        let mut cfg = TrainConfig::default();
        cfg.steps = 300;
        cfg.lr = 0.5;
        assert_eq!(cfg.lr_at(0), 0.5);
        assert_eq!(cfg.lr_at(199), 0.5);
        assert_eq!(cfg.lr_at(200), 0.05);
        assert_eq!(cfg.lr_at(299), 0.05);
    }

    #[test]
    fn sampled_batches_put_similar_inputs_in_groups() {
        let labels: Vec<u32> = (0..40).map(|i| i % 4).collect();
        let rule = SimilarityRule::Labels(&labels);
        let cfg = tiny_cfg().hdt;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let plan = sample_batch(&mut rng, &rule, &cfg).unwrap();
        assert_eq!(plan.ids.len(), 16);
        assert_eq!(plan.groups.len(), 16);
        for g in 0..4 {
            let members: Vec<usize> = (0..16).filter(|&i| plan.groups[i] == g).collect();
            assert_eq!(members.len(), 4);
            let marker_label = labels[plan.ids[members[0]]];
            for &m in &members {
                assert_eq!(
                    labels[plan.ids[m]], marker_label,
                    "group {g} mixes labels"
                );
            }
        }
    }

    #[test]
    fn sampling_follows_neighbor_lists() {
        let lists: Vec<Vec<u32>> = vec![vec![1, 2], vec![0], vec![0], vec![]];
        let rule = SimilarityRule::Neighbors(&lists);
        let mut cfg = tiny_cfg().hdt;
        cfg.batch_size = 8;
        cfg.group_size = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let plan = sample_batch(&mut rng, &rule, &cfg).unwrap();
            for g in 0..4 {
                let members: Vec<usize> = (0..8).filter(|&i| plan.groups[i] == g).collect();
                let marker = plan.ids[members[0]];
                let partner = plan.ids[members[1]];
                if lists[marker].is_empty() {
                    assert_eq!(partner, marker, "empty pool falls back to the marker");
                } else {
                    assert!(
                        lists[marker].contains(&(partner as u32)),
                        "partner {partner} is not a neighbor of marker {marker}"
                    );
                }
            }
        }
    }

    #[test]
    fn sampling_rejects_out_of_range_neighbor_ids() {
        let lists: Vec<Vec<u32>> = vec![vec![9], vec![0]];
        let rule = SimilarityRule::Neighbors(&lists);
        let mut cfg = tiny_cfg().hdt;
        cfg.batch_size = 4;
        cfg.group_size = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Marker 0 references neighbor 9 which does not exist; whichever
        // batch draws it must fail.
        let mut saw_error = false;
        for _ in 0..20 {
            if sample_batch(&mut rng, &rule, &cfg).is_err() {
                saw_error = true;
                break;
            }
        }
        assert!(saw_error);
    }

    #[test]
    fn training_reduces_the_loss_on_separable_clusters() {
        let data = synth_dataset(4, 30, 12, 0.05, 11).unwrap();
        let x = as_f64_matrix(&data.training).unwrap();
        let rule = SimilarityRule::Labels(&data.training_labels);
        let mut cfg = tiny_cfg();
        cfg.steps = 250;
        cfg.log_every = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = DenseNet::new(x.ncols(), &cfg.widths, &mut rng).unwrap();
        let mut traces: Vec<TrainTrace> = Vec::new();
        train(&mut model, x.view(), &rule, &cfg, |t| traces.push(*t)).unwrap();
        assert_eq!(traces.len(), 250);
        let early: f64 = traces[..20].iter().map(|t| t.j).sum::<f64>() / 20.0;
        let late: f64 = traces[230..].iter().map(|t| t.j).sum::<f64>() / 20.0;
        assert!(
            late < early,
            "loss should fall on separable data: early {early}, late {late}"
        );
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = synth_dataset(3, 20, 8, 0.1, 21).unwrap();
        let x = as_f64_matrix(&data.training).unwrap();
        let rule = SimilarityRule::Labels(&data.training_labels);
        let cfg = tiny_cfg();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut model = DenseNet::new(x.ncols(), &cfg.widths, &mut rng).unwrap();
            train(&mut model, x.view(), &rule, &cfg, |_| {}).unwrap();
            let mut buf = Vec::new();
            model.save(&mut buf).unwrap();
            buf
        };
        assert_eq!(run(), run(), "same seed must give identical weights");
    }

    #[test]
    fn training_aborts_on_non_finite_forward() {
        let x = Array2::from_elem((20, 8), f64::NAN);
        let labels: Vec<u32> = (0..20).map(|i| i % 2).collect();
        let rule = SimilarityRule::Labels(&labels);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = DenseNet::new(8, &cfg.widths, &mut rng).unwrap();
        match train(&mut model, x.view(), &rule, &cfg, |_| {}) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn training_rejects_single_class_data() {
        // Every input shares one label: no batch can hold a dissimilar pair.
        let data = synth_dataset(1, 30, 8, 0.1, 4).unwrap();
        let x = as_f64_matrix(&data.training).unwrap();
        let rule = SimilarityRule::Labels(&data.training_labels);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = DenseNet::new(8, &cfg.widths, &mut rng).unwrap();
        match train(&mut model, x.view(), &rule, &cfg, |_| {}) {
            Err(Error::DegenerateBatch(_)) => {}
            other => panic!("expected DegenerateBatch, got {other:?}"),
        }
    }

    #[test]
    fn train_rejects_mismatched_shapes() {
        let data = synth_dataset(2, 10, 8, 0.1, 2).unwrap();
        let x = as_f64_matrix(&data.training).unwrap();
        let rule = SimilarityRule::Labels(&data.training_labels);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Wrong input width.
        let mut model = DenseNet::new(5, &cfg.widths, &mut rng).unwrap();
        assert!(train(&mut model, x.view(), &rule, &cfg, |_| {}).is_err());
        // Wrong output width.
        let mut model = DenseNet::new(8, &[16, 12], &mut rng).unwrap();
        assert!(train(&mut model, x.view(), &rule, &cfg, |_| {}).is_err());
        // Labels shorter than the data.
        let short: Vec<u32> = vec![0, 1];
        let rule2 = SimilarityRule::Labels(&short);
        let mut model = DenseNet::new(8, &cfg.widths, &mut rng).unwrap();
        assert!(train(&mut model, x.view(), &rule2, &cfg, |_| {}).is_err());
    }
}
