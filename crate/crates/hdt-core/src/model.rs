//! A small densely connected embedding network trained from scratch.
//!
//! Layer `k` receives the concatenation of the raw input and every earlier
//! hidden layer's output, so features stay reusable across depth. Each hidden
//! layer is `dense (no bias) -> batch norm (affine) -> ReLU`; the final layer
//! is `dense (no bias) -> batch norm (non-affine)`, producing an embedding
//! whose coordinates are centered and variance-normalized — the natural input
//! to sign binarization. Batch norm uses biased batch variance with
//! `epsilon = 1e-8` and keeps running statistics (EMA momentum 0.99) that
//! inference uses in place of batch statistics.
//!
//! Dense weights start from He initialization, `N(0, 2 / fan_in)`. The
//! optimizer is plain SGD; weight decay is decoupled (`w -= lr * 2 *
//! lambda_w * w` alongside the gradient step) and applies to dense weights
//! only, matching the loss' `J3 = ||w||^2` term.

use std::io::{Read, Write};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"HDTCKPT1";
const BN_EPS: f64 = 1e-8;
const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: Array1<f64>,
    beta: Array1<f64>,
    running_mean: Array1<f64>,
    running_var: Array1<f64>,
    /// Whether `gamma`/`beta` are trainable. The final layer freezes them at
    /// `1`/`0` so the embedding keeps its normalized scale.
    affine: bool,
}

impl BatchNorm {
    fn new(width: usize, affine: bool) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            affine,
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    /// Dense weights, shape `(fan_in, width)`.
    w: Array2<f64>,
    bn: BatchNorm,
    /// Hidden layers apply ReLU; the final layer is identity.
    relu: bool,
}

/// Per-layer activations captured by a training-mode forward pass, consumed
/// by [`DenseNet::backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Concatenated input/hidden buffer, shape `(batch, input_dim + sum of
    /// hidden widths)`.
    acc: Array2<f64>,
    layers: Vec<LayerCache>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    /// Batch-normalized pre-affine activations.
    xhat: Array2<f64>,
    /// Per-column `sqrt(var + eps)` of the batch.
    std: Array1<f64>,
    /// Post-activation output.
    h: Array2<f64>,
}

/// Parameter gradients aligned with the network's layers.
#[derive(Clone, Debug)]
pub struct Gradients {
    layers: Vec<LayerGrads>,
}

impl Gradients {
    /// Gradients flattened in [`DenseNet::parameters`] order. Non-affine
    /// batch norms contribute nothing, matching the parameter layout.
    pub fn parameters(&self, net: &DenseNet) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.num_parameters());
        for (g, layer) in self.layers.iter().zip(&net.layers) {
            out.extend(g.dw.iter());
            if layer.bn.affine {
                out.extend(g.dgamma.iter());
                out.extend(g.dbeta.iter());
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
struct LayerGrads {
    dw: Array2<f64>,
    dgamma: Array1<f64>,
    dbeta: Array1<f64>,
}

/// Densely connected embedding network.
#[derive(Clone, Debug)]
pub struct DenseNet {
    input_dim: usize,
    widths: Vec<usize>,
    layers: Vec<Layer>,
}

impl DenseNet {
    /// Builds a network with He-initialized dense weights. `widths` lists
    /// every layer width; the last entry is the embedding width.
    pub fn new(input_dim: usize, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be at least 1"));
        }
        if widths.is_empty() {
            return Err(Error::invalid("the network needs at least one layer"));
        }
        if let Some(w) = widths.iter().find(|&&w| w == 0) {
            return Err(Error::invalid(format!("layer width {w} must be at least 1")));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for (k, &width) in widths.iter().enumerate() {
            let last = k + 1 == widths.len();
            let sd = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, sd).expect("finite standard deviation");
            let w = Array2::from_shape_fn((fan_in, width), |_| dist.sample(rng));
            layers.push(Layer { w, bn: BatchNorm::new(width, !last), relu: !last });
            fan_in += width;
        }
        Ok(DenseNet { input_dim, widths: widths.to_vec(), layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Embedding width (the final layer's width).
    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least one layer")
    }

    /// All layer widths, hidden layers first.
    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Trainable parameter count (dense weights plus affine batch-norm
    /// scales and shifts).
    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + if l.bn.affine { 2 * l.w.ncols() } else { 0 })
            .sum()
    }

    /// `J3 = ||w||^2` over dense weights.
    pub fn weights_norm_sq(&self) -> f64 {
        self.layers.iter().map(|l| l.w.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    /// All trainable parameters flattened: per layer, the dense weights in
    /// row-major order, then the affine batch-norm scale and shift.
    /// Length equals [`Self::num_parameters`].
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in &self.layers {
            out.extend(layer.w.iter());
            if layer.bn.affine {
                out.extend(layer.bn.gamma.iter());
                out.extend(layer.bn.beta.iter());
            }
        }
        out
    }

    /// Overwrites all trainable parameters from a flat slice in
    /// [`Self::parameters`] order.
    pub fn set_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_parameters() {
            return Err(Error::shape(format!(
                "{} parameter values for a network with {}",
                values.len(),
                self.num_parameters()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite parameter value {v}")));
        }
        let mut it = values.iter();
        for layer in &mut self.layers {
            for w in layer.w.iter_mut() {
                *w = *it.next().expect("length checked");
            }
            if layer.bn.affine {
                for g in layer.bn.gamma.iter_mut() {
                    *g = *it.next().expect("length checked");
                }
                for b in layer.bn.beta.iter_mut() {
                    *b = *it.next().expect("length checked");
                }
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "input width {} does not match the network's input_dim {}",
                x.ncols(),
                self.input_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid("forward pass needs at least one row"));
        }
        Ok(())
    }

    /// Width of the concatenated input/hidden buffer.
    fn acc_width(&self) -> usize {
        self.input_dim + self.widths[..self.widths.len() - 1].iter().sum::<usize>()
    }

    /// Training-mode forward pass: batch-norm uses batch statistics, running
    /// statistics are updated in place, and activations are cached for
    /// [`Self::backward`]. Needs at least two rows for batch statistics.
    pub fn forward_train(&mut self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let b = x.nrows();
        if b < 2 {
            return Err(Error::invalid("training-mode forward needs a batch of at least 2"));
        }
        let mut acc = Array2::zeros((b, self.acc_width()));
        acc.slice_mut(s![.., 0..self.input_dim]).assign(&x);
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut offset = self.input_dim;
        let mut output = None;
        for layer in &mut self.layers {
            let a = acc.slice(s![.., 0..offset]).dot(&layer.w);
            let mean = a.mean_axis(Axis(0)).expect("nonempty batch");
            let var = a.var_axis(Axis(0), 0.0); // biased batch variance
            let std = var.mapv(|v| (v + BN_EPS).sqrt());
            let mut xhat = a;
            for mut row in xhat.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(&mean, |v, m| *v -= m);
                row.zip_mut_with(&std, |v, s| *v /= s);
            }
            layer
                .bn
                .running_mean
                .zip_mut_with(&mean, |r, m| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
            layer
                .bn
                .running_var
                .zip_mut_with(&var, |r, v| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
            let mut h = xhat.clone();
            if layer.bn.affine {
                for mut row in h.axis_iter_mut(Axis(0)) {
                    row.zip_mut_with(&layer.bn.gamma, |v, g| *v *= g);
                    row.zip_mut_with(&layer.bn.beta, |v, bb| *v += bb);
                }
            }
            if layer.relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
            let width = layer.w.ncols();
            if layer.relu {
                acc.slice_mut(s![.., offset..offset + width]).assign(&h);
                offset += width;
            } else {
                output = Some(h.clone());
            }
            caches.push(LayerCache { xhat, std, h });
        }
        let y = output.expect("final layer produces the output");
        Ok((y, ForwardCache { acc, layers: caches }))
    }

    /// Inference-mode forward pass using running batch-norm statistics.
    /// Works row by row (any batch size from 1 up) and never mutates state.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let b = x.nrows();
        let mut acc = Array2::zeros((b, self.acc_width()));
        acc.slice_mut(s![.., 0..self.input_dim]).assign(&x);
        let mut offset = self.input_dim;
        for layer in &self.layers {
            let a = acc.slice(s![.., 0..offset]).dot(&layer.w);
            let std = layer.bn.running_var.mapv(|v| (v + BN_EPS).sqrt());
            let mut h = a;
            for mut row in h.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(&layer.bn.running_mean, |v, m| *v -= m);
                row.zip_mut_with(&std, |v, s| *v /= s);
                if layer.bn.affine {
                    row.zip_mut_with(&layer.bn.gamma, |v, g| *v *= g);
                    row.zip_mut_with(&layer.bn.beta, |v, bb| *v += bb);
                }
            }
            if layer.relu {
                h.mapv_inplace(|v| v.max(0.0));
                let width = layer.w.ncols();
                acc.slice_mut(s![.., offset..offset + width]).assign(&h);
                offset += width;
            } else {
                return Ok(h);
            }
        }
        unreachable!("the final layer returns")
    }

    /// Backpropagates `dJ/dY` through the cached forward pass and returns
    /// parameter gradients. The cache must come from the immediately
    /// preceding [`Self::forward_train`] on this network.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_y: ArrayView2<'_, f64>,
    ) -> Result<Gradients> {
        let b = cache.acc.nrows();
        if grad_y.nrows() != b || grad_y.ncols() != self.output_dim() {
            return Err(Error::shape(format!(
                "output gradient is {}x{} but the forward pass produced {}x{}",
                grad_y.nrows(),
                grad_y.ncols(),
                b,
                self.output_dim()
            )));
        }
        if cache.layers.len() != self.layers.len()
            || cache.acc.ncols() != self.acc_width()
            || cache
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(c, l)| c.h.ncols() != l.w.ncols())
        {
            return Err(Error::shape("forward cache does not match this network"));
        }
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        // Upstream gradient flowing into each hidden layer's output,
        // accumulated from every later layer that consumed it.
        let mut dh: Vec<Array2<f64>> = self
            .layers
            .iter()
            .filter(|l| l.relu)
            .map(|l| Array2::zeros((b, l.w.ncols())))
            .collect();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = self.input_dim;
        for layer in &self.layers {
            offsets.push(off);
            if layer.relu {
                off += layer.w.ncols();
            }
        }
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let lc = &cache.layers[k];
            let mut dout = if layer.relu {
                let mut d = dh[k].clone();
                d.zip_mut_with(&lc.h, |g, &h| {
                    if h <= 0.0 {
                        *g = 0.0;
                    }
                });
                d
            } else {
                grad_y.to_owned()
            };
            let (dgamma, dbeta) = if layer.bn.affine {
                let dgamma = (&dout * &lc.xhat).sum_axis(Axis(0));
                let dbeta = dout.sum_axis(Axis(0));
                for mut row in dout.axis_iter_mut(Axis(0)) {
                    row.zip_mut_with(&layer.bn.gamma, |v, g| *v *= g);
                }
                (dgamma, dbeta)
            } else {
                let w = layer.w.ncols();
                (Array1::zeros(w), Array1::zeros(w))
            };
            // Batch-norm backward with biased variance: dout is now dJ/dxhat.
            let m = b as f64;
            let sum_dxhat = dout.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dout * &lc.xhat).sum_axis(Axis(0));
            let mut da = dout;
            for mut row in da.axis_iter_mut(Axis(0)) {
                row.mapv_inplace(|v| m * v);
                row.zip_mut_with(&sum_dxhat, |v, s| *v -= s);
            }
            ndarray::Zip::from(&mut da)
                .and(&lc.xhat)
                .and_broadcast(&sum_dxhat_xhat)
                .for_each(|v, &xh, &sxx| *v -= xh * sxx);
            for mut row in da.axis_iter_mut(Axis(0)) {
                row.zip_mut_with(&lc.std, |v, s| *v /= m * s);
            }
            let input = cache.acc.slice(s![.., 0..offsets[k]]);
            let dw = input.t().dot(&da);
            let dinput = da.dot(&layer.w.t());
            // Route the input gradient back to x (discarded) and to each
            // earlier hidden layer's output.
            let mut col = self.input_dim;
            for (j, d) in dh.iter_mut().enumerate().take(k) {
                let w = self.layers[j].w.ncols();
                if col >= offsets[k] {
                    break;
                }
                let seg = dinput.slice(s![.., col..col + w]);
                *d += &seg;
                col += w;
            }
            grads.push(LayerGrads { dw, dgamma, dbeta });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// One SGD step with decoupled weight decay on the dense weights:
    /// `w -= lr * (dw + 2 * lambda_w * w)`. Affine batch-norm parameters get
    /// plain gradient steps and no decay; the final non-affine batch norm
    /// stays frozen.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, lambda_w: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "gradients cover {} layers but the network has {}",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if layer.w.dim() != g.dw.dim() {
                return Err(Error::shape("gradient shape does not match layer weights"));
            }
            ndarray::Zip::from(&mut layer.w)
                .and(&g.dw)
                .for_each(|w, &dw| *w -= lr * (dw + 2.0 * lambda_w * *w));
            if layer.bn.affine {
                layer.bn.gamma.zip_mut_with(&g.dgamma, |p, &d| *p -= lr * d);
                layer.bn.beta.zip_mut_with(&g.dbeta, |p, &d| *p -= lr * d);
            }
        }
        Ok(())
    }

    /// Serializes the network: magic, a small text header with the
    /// architecture, then all parameters and running statistics as
    /// little-endian `f64`.
    pub fn save(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let header = format!("input_dim={}\nwidths={}\n", self.input_dim, widths.join(","));
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::format("checkpoint header too large"))?;
        out.write_all(&header_len.to_le_bytes())?;
        out.write_all(header.as_bytes())?;
        let write_arr1 = |out: &mut dyn Write, a: &Array1<f64>| -> Result<()> {
            for v in a.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for layer in &self.layers {
            for v in layer.w.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
            write_arr1(out, &layer.bn.gamma)?;
            write_arr1(out, &layer.bn.beta)?;
            write_arr1(out, &layer.bn.running_mean)?;
            write_arr1(out, &layer.bn.running_var)?;
        }
        Ok(())
    }

    /// Loads a checkpoint written by [`Self::save`], validating the magic,
    /// header, and exact payload length.
    pub fn load(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| Error::format("checkpoint too short"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a model checkpoint (bad magic)"));
        }
        let mut len_bytes = [0u8; 4];
        input.read_exact(&mut len_bytes).map_err(|_| Error::format("checkpoint too short"))?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        if header_len > 1 << 16 {
            return Err(Error::format("checkpoint header is implausibly large"));
        }
        let mut header = vec![0u8; header_len];
        input
            .read_exact(&mut header)
            .map_err(|_| Error::format("checkpoint header is truncated"))?;
        let header = String::from_utf8(header)
            .map_err(|_| Error::format("checkpoint header is not valid UTF-8"))?;
        let mut input_dim = None;
        let mut widths: Option<Vec<usize>> = None;
        for line in header.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("malformed checkpoint header line {line:?}")))?;
            match key {
                "input_dim" => {
                    input_dim = Some(value.parse::<usize>().map_err(|_| {
                        Error::format(format!("bad input_dim in checkpoint header: {value:?}"))
                    })?);
                }
                "widths" => {
                    let parsed = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| {
                            Error::format(format!("bad widths in checkpoint header: {value:?}"))
                        })?;
                    widths = Some(parsed);
                }
                other => {
                    return Err(Error::format(format!(
                        "unknown checkpoint header key {other:?}"
                    )));
                }
            }
        }
        let input_dim =
            input_dim.ok_or_else(|| Error::format("checkpoint header is missing input_dim"))?;
        let widths = widths.ok_or_else(|| Error::format("checkpoint header is missing widths"))?;
        if input_dim == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::format("checkpoint header describes an empty network"));
        }

        let read_f64 = |input: &mut dyn Read| -> Result<f64> {
            let mut buf = [0u8; 8];
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::format("checkpoint parameters are truncated"))?;
            let v = f64::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::format("checkpoint holds a non-finite parameter"));
            }
            Ok(v)
        };
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for (k, &width) in widths.iter().enumerate() {
            let last = k + 1 == widths.len();
            let mut w = Array2::zeros((fan_in, width));
            for v in w.iter_mut() {
                *v = read_f64(input)?;
            }
            let mut bn = BatchNorm::new(width, !last);
            for arr in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var] {
                for v in arr.iter_mut() {
                    *v = read_f64(input)?;
                }
            }
            if bn.running_var.iter().any(|&v| v < 0.0) {
                return Err(Error::format("checkpoint holds a negative running variance"));
            }
            layers.push(Layer { w, bn, relu: !last });
            fan_in += width;
        }
        let mut trailing = [0u8; 1];
        match input.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => return Err(Error::format("checkpoint has trailing bytes")),
            Err(e) => return Err(e.into()),
        }
        Ok(DenseNet { input_dim, widths, layers })
    }
}
