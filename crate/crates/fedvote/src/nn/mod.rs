//! Multilayer perceptron with trainable hidden layers and a fixed output
//! layer, set up for weight quantization.
//!
//! The trainable weights are the hidden linear layers, flattened into one
//! vector so they can be normalized, quantized and voted on coordinate by
//! coordinate. The output layer stays real-valued and fixed for the whole
//! run, so every client shares it. Hidden layers can route their pre-
//! activations through a parameter-free batch normalization, which removes
//! the scale ambiguity that binary weights cannot express.

mod normalize;

pub use normalize::{NormalizationFamily, NormalizationFn};

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Default epsilon inside the batch-norm square root.
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

/// Energy cost of one 32-bit floating multiply, in picojoules (45 nm CMOS).
pub const MUL_ENERGY_PJ: f64 = 3.7;
/// Energy cost of one 32-bit floating add, in picojoules (45 nm CMOS).
pub const ADD_ENERGY_PJ: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Shape of one trainable layer: `rows x cols`, stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flattened latent weights together with the layer shapes they reshape to.
///
/// Flattening is layer-major, each layer row-major, so the slice for layer
/// `l` starts at the sum of the preceding layer sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWeights {
    values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl LatentWeights {
    pub fn new(values: Vec<f64>, shapes: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = shapes.iter().map(LayerShape::len).sum();
        if values.len() != expected {
            return Err(Error::invalid(format!(
                "latent vector has {} entries but shapes require {expected}",
                values.len()
            )));
        }
        Ok(LatentWeights { values, shapes })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    /// Borrows the slice holding layer `l`.
    pub fn layer(&self, l: usize) -> Result<&[f64]> {
        if l >= self.shapes.len() {
            return Err(Error::invalid(format!(
                "layer index {l} out of range ({} layers)",
                self.shapes.len()
            )));
        }
        let start: usize = self.shapes[..l].iter().map(LayerShape::len).sum();
        Ok(&self.values[start..start + self.shapes[l].len()])
    }
}

/// A minibatch of training or evaluation rows, stored row-major.
#[derive(Debug, Clone)]
pub struct Batch {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    n: usize,
    input_dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("batch input dimension must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("batch must contain at least one row"));
        }
        if inputs.len() != labels.len() * input_dim {
            return Err(Error::invalid(format!(
                "batch has {} values, expected {} rows x {} features",
                inputs.len(),
                labels.len(),
                input_dim
            )));
        }
        let n = labels.len();
        Ok(Batch {
            inputs,
            labels,
            n,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Weight representation assumed when counting forward-pass arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightKind {
    Float,
    Binary,
}

/// Multiply and add counts for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCount {
    pub muls: u64,
    pub adds: u64,
}

impl OpCount {
    /// Energy estimate in millijoules under the per-op picojoule costs.
    pub fn energy_millijoules(&self) -> f64 {
        (MUL_ENERGY_PJ * self.muls as f64 + ADD_ENERGY_PJ * self.adds as f64) * 1e-9
    }
}

/// The network. Hidden layers are trainable and quantizable; the output
/// layer is a fixed real matrix shared by server and clients.
#[derive(Debug, Clone)]
pub struct Model {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    classes: usize,
    activation: Activation,
    static_bn: bool,
    bn_epsilon: f64,
    output_layer: Vec<f64>,
}

impl Model {
    /// Builds a model, drawing the fixed output layer from a symmetric
    /// uniform distribution with Xavier-style width.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dims: &[usize],
        classes: usize,
        activation: Activation,
        static_bn: bool,
        bn_epsilon: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let last_hidden = *hidden_dims.last().ok_or_else(|| {
            Error::invalid("model needs at least one trainable hidden layer")
        })?;
        let limit = (6.0 / (last_hidden + classes) as f64).sqrt();
        let output_layer = (0..last_hidden * classes)
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit)
            .collect();
        Model::with_output_layer(
            input_dim,
            hidden_dims,
            classes,
            activation,
            static_bn,
            bn_epsilon,
            output_layer,
        )
    }

    /// Builds a model with an explicitly supplied output layer
    /// (`last_hidden x classes`, row-major).
    pub fn with_output_layer(
        input_dim: usize,
        hidden_dims: &[usize],
        classes: usize,
        activation: Activation,
        static_bn: bool,
        bn_epsilon: f64,
        output_layer: Vec<f64>,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if classes < 2 {
            return Err(Error::invalid("model needs at least two classes"));
        }
        if hidden_dims.is_empty() {
            return Err(Error::invalid("model needs at least one trainable hidden layer"));
        }
        if hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        if !bn_epsilon.is_finite() || bn_epsilon <= 0.0 {
            return Err(Error::invalid(format!(
                "batch-norm epsilon must be finite and positive, got {bn_epsilon}"
            )));
        }
        let last_hidden = *hidden_dims.last().unwrap();
        if output_layer.len() != last_hidden * classes {
            return Err(Error::invalid(format!(
                "output layer has {} entries, expected {last_hidden} x {classes}",
                output_layer.len()
            )));
        }
        Ok(Model {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            classes,
            activation,
            static_bn,
            bn_epsilon,
            output_layer,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn output_layer(&self) -> &[f64] {
        &self.output_layer
    }

    /// Shapes of the trainable layers, in forward order.
    pub fn weight_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.hidden_dims.len());
        let mut rows = self.input_dim;
        for (l, &cols) in self.hidden_dims.iter().enumerate() {
            shapes.push(LayerShape { layer: l, rows, cols });
            rows = cols;
        }
        shapes
    }

    /// Total number of trainable weights.
    pub fn weight_dim(&self) -> usize {
        self.weight_shapes().iter().map(LayerShape::len).sum()
    }

    /// Draws an initial latent vector, Xavier-width uniform per layer.
    pub fn init_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentWeights {
        let shapes = self.weight_shapes();
        let mut values = Vec::with_capacity(self.weight_dim());
        for s in &shapes {
            let limit = (6.0 / (s.rows + s.cols) as f64).sqrt();
            values.extend((0..s.len()).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * limit));
        }
        LatentWeights::new(values, shapes).expect("shapes derived from the same model")
    }

    /// Forward pass: returns logits, one row of `classes` scores per batch
    /// row. `weights` is the flattened trainable-weight vector; it may hold
    /// normalized weights, a quantized vote cast to f64, or raw real weights.
    pub fn forward(&self, weights: &[f64], batch: &Batch) -> Result<Vec<f64>> {
        Ok(self.forward_trace(weights, batch)?.logits)
    }

    /// Mean softmax cross-entropy and its gradient with respect to the
    /// flattened trainable weights.
    pub fn loss_and_grad(&self, weights: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let trace = self.forward_trace(weights, batch)?;
        let n = batch.len();
        let c = self.classes;

        let mut loss = 0.0;
        let mut dlogits = vec![0.0; n * c];
        for r in 0..n {
            let row = &trace.logits[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - max).exp();
            }
            let label = batch.labels[r];
            loss += denom.ln() + max - row[label];
            for j in 0..c {
                let p = (row[j] - max).exp() / denom;
                dlogits[r * c + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        loss /= n as f64;

        let shapes = self.weight_shapes();
        let layers = shapes.len();
        let last_hidden = *self.hidden_dims.last().unwrap();

        // back through the fixed output layer
        let mut dx = mat_mul_bt(&dlogits, &self.output_layer, n, c, last_hidden);

        let mut grad = vec![0.0; self.weight_dim()];
        let mut offsets: Vec<usize> = Vec::with_capacity(layers);
        let mut acc = 0;
        for s in &shapes {
            offsets.push(acc);
            acc += s.len();
        }

        for l in (0..layers).rev() {
            let s = shapes[l];
            let d2 = s.cols;
            let post = &trace.post_bn[l];

            // through the activation
            let mut dy = vec![0.0; n * d2];
            match self.activation {
                Activation::Relu => {
                    for i in 0..n * d2 {
                        dy[i] = if post[i] > 0.0 { dx[i] } else { 0.0 };
                    }
                }
                Activation::Tanh => {
                    let act = &trace.acts[l + 1];
                    for i in 0..n * d2 {
                        dy[i] = dx[i] * (1.0 - act[i] * act[i]);
                    }
                }
            }

            // through batch norm, whose statistics depend on the whole batch
            let dz = match &trace.bn[l] {
                Some(cache) => bn_backward(&dy, cache, n, d2),
                None => dy,
            };

            let x = &trace.acts[l];
            let dw = mat_mul_at(x, &dz, n, s.rows, d2);
            grad[offsets[l]..offsets[l] + s.len()].copy_from_slice(&dw);
            if l > 0 {
                let w = &weights[offsets[l]..offsets[l] + s.len()];
                dx = mat_mul_bt(&dz, w, n, d2, s.rows);
            }
        }

        Ok((loss, grad))
    }

    /// Classification accuracy of `weights` on `batch` (argmax of logits,
    /// lowest index on ties).
    pub fn accuracy(&self, weights: &[f64], batch: &Batch) -> Result<f64> {
        let logits = self.forward(weights, batch)?;
        let c = self.classes;
        let hits = batch
            .labels
            .iter()
            .enumerate()
            .filter(|&(r, &label)| {
                let row = &logits[r * c..(r + 1) * c];
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best == label
            })
            .count();
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Counts forward-pass multiplies and adds over the linear layers for a
    /// batch of `batch_size` rows.
    ///
    /// Binary counting treats every weight-matrix multiply as an add (a sign
    /// application) on the hidden layers; the fixed output layer stays in
    /// floating point either way. Batch norm and activations are excluded:
    /// they are vector ops, negligible next to the matrix work.
    pub fn op_count(&self, kind: WeightKind, batch_size: usize) -> OpCount {
        let b = batch_size as u64;
        let mut muls = 0u64;
        let mut adds = 0u64;
        for s in self.weight_shapes() {
            let (d1, d2) = (s.rows as u64, s.cols as u64);
            match kind {
                WeightKind::Float => {
                    muls += b * d1 * d2;
                    adds += b * d2 * (d1 - 1);
                }
                WeightKind::Binary => {
                    adds += b * d2 * (2 * d1 - 1);
                }
            }
        }
        let (d1, d2) = (*self.hidden_dims.last().unwrap() as u64, self.classes as u64);
        muls += b * d1 * d2;
        adds += b * d2 * (d1 - 1);
        OpCount { muls, adds }
    }

    fn forward_trace(&self, weights: &[f64], batch: &Batch) -> Result<ForwardTrace> {
        if batch.input_dim != self.input_dim {
            return Err(Error::invalid(format!(
                "batch feature width {} does not match model input {}",
                batch.input_dim, self.input_dim
            )));
        }
        if weights.len() != self.weight_dim() {
            return Err(Error::invalid(format!(
                "weight vector has {} entries, model expects {}",
                weights.len(),
                self.weight_dim()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("weight vector contains non-finite values"));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.classes
            )));
        }
        if self.static_bn && batch.len() < 2 {
            return Err(Error::invalid(
                "static batch norm needs at least two rows per batch",
            ));
        }

        let n = batch.len();
        let shapes = self.weight_shapes();
        let mut acts: Vec<Vec<f64>> = vec![batch.inputs.clone()];
        let mut post_bn: Vec<Vec<f64>> = Vec::with_capacity(shapes.len());
        let mut bn: Vec<Option<BnCache>> = Vec::with_capacity(shapes.len());

        let mut offset = 0;
        for s in &shapes {
            let w = &weights[offset..offset + s.len()];
            offset += s.len();
            let z = mat_mul(acts.last().unwrap(), w, n, s.rows, s.cols);
            let (y, cache) = if self.static_bn {
                let (y, cache) = bn_forward(&z, n, s.cols, self.bn_epsilon);
                (y, Some(cache))
            } else {
                (z, None)
            };
            let mut a = vec![0.0; n * s.cols];
            match self.activation {
                Activation::Relu => {
                    for i in 0..a.len() {
                        a[i] = y[i].max(0.0);
                    }
                }
                Activation::Tanh => {
                    for i in 0..a.len() {
                        a[i] = y[i].tanh();
                    }
                }
            }
            post_bn.push(y);
            bn.push(cache);
            acts.push(a);
        }

        let last_hidden = *self.hidden_dims.last().unwrap();
        let logits = mat_mul(acts.last().unwrap(), &self.output_layer, n, last_hidden, self.classes);
        Ok(ForwardTrace {
            acts,
            post_bn,
            bn,
            logits,
        })
    }
}

struct ForwardTrace {
    /// acts[0] is the batch input, acts[l+1] the activation after layer l.
    acts: Vec<Vec<f64>>,
    /// Pre-activation after batch norm (or the raw pre-activation when BN
    /// is off), needed for the ReLU mask.
    post_bn: Vec<Vec<f64>>,
    bn: Vec<Option<BnCache>>,
    logits: Vec<f64>,
}

struct BnCache {
    inv_std: Vec<f64>,
    normalized: Vec<f64>,
}

/// Parameter-free batch normalization over a `rows x cols` matrix: each
/// column is shifted to mean zero and scaled by its population standard
/// deviation, with `epsilon` guarding the square root.
pub fn static_batch_norm(x: &[f64], rows: usize, cols: usize, epsilon: f64) -> Result<Vec<f64>> {
    if rows < 2 {
        return Err(Error::invalid(
            "static batch norm needs at least two rows per batch",
        ));
    }
    if x.len() != rows * cols {
        return Err(Error::invalid(format!(
            "batch-norm input has {} values, expected {rows} x {cols}",
            x.len()
        )));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::invalid(format!(
            "batch-norm epsilon must be finite and positive, got {epsilon}"
        )));
    }
    Ok(bn_forward(x, rows, cols, epsilon).0)
}

fn bn_forward(x: &[f64], rows: usize, cols: usize, epsilon: f64) -> (Vec<f64>, BnCache) {
    let mut mean = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += x[r * cols + c];
        }
    }
    for m in &mut mean {
        *m /= rows as f64;
    }
    let mut var = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = x[r * cols + c] - mean[c];
            var[c] += d * d;
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v / rows as f64 + epsilon).sqrt())
        .collect();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = (x[r * cols + c] - mean[c]) * inv_std[c];
        }
    }
    let cache = BnCache {
        inv_std,
        normalized: out.clone(),
    };
    (out, cache)
}

fn bn_backward(dy: &[f64], cache: &BnCache, rows: usize, cols: usize) -> Vec<f64> {
    let mut mean_dy = vec![0.0; cols];
    let mut mean_dy_yhat = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            let g = dy[r * cols + c];
            mean_dy[c] += g;
            mean_dy_yhat[c] += g * cache.normalized[r * cols + c];
        }
    }
    for c in 0..cols {
        mean_dy[c] /= rows as f64;
        mean_dy_yhat[c] /= rows as f64;
    }
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            dx[i] = cache.inv_std[c]
                * (dy[i] - mean_dy[c] - cache.normalized[i] * mean_dy_yhat[c]);
        }
    }
    dx
}

/// Chain rule through the normalization map: turns a gradient with respect
/// to normalized weights into one with respect to the latent weights.
pub fn latent_gradient(
    phi: &NormalizationFn,
    latent: &[f64],
    grad_normalized: &[f64],
) -> Result<Vec<f64>> {
    if latent.len() != grad_normalized.len() {
        return Err(Error::invalid(format!(
            "latent vector has {} entries, gradient has {}",
            latent.len(),
            grad_normalized.len()
        )));
    }
    latent
        .iter()
        .zip(grad_normalized)
        .map(|(&h, &g)| Ok(phi.derivative(h)? * g))
        .collect()
}

/// (n x k) times (k x m), all row-major.
fn mat_mul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        for i in 0..k {
            let av = a[r * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * m..(i + 1) * m];
            let orow = &mut out[r * m..(r + 1) * m];
            for c in 0..m {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

/// `a^T (n x k) times b (n x m)` giving `k x m`: weight gradients.
fn mat_mul_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for r in 0..n {
        for i in 0..k {
            let av = a[r * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[r * m..(r + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for c in 0..m {
                orow[c] += av * brow[c];
            }
        }
    }
    out
}

/// `a (n x m) times b^T (k x m)` giving `n x k`: input gradients.
fn mat_mul_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        for i in 0..k {
            let brow = &b[i * m..(i + 1) * m];
            let arow = &a[r * m..(r + 1) * m];
            let mut acc = 0.0;
            for c in 0..m {
                acc += arow[c] * brow[c];
            }
            out[r * k + i] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamKind};

    fn batch(rows: &[(&[f64], usize)]) -> Batch {
        let d = rows[0].0.len();
        let inputs: Vec<f64> = rows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let labels: Vec<usize> = rows.iter().map(|&(_, y)| y).collect();
        Batch::new(inputs, labels, d).unwrap()
    }

    #[test]
    fn identity_layer_exposes_output_row() {
        let f = vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9];
        let model = Model::with_output_layer(3, &[3], 2, Activation::Relu, false, 1e-5, f.clone())
            .unwrap();
        let identity = vec![
            1.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, //
            0.0, 0.0, 1.0,
        ];
        let b = batch(&[(&[1.0, 0.0, 0.0], 0)]);
        let logits = model.forward(&identity, &b).unwrap();
        assert_eq!(logits, vec![f[0], f[1]]);
    }

    #[test]
    fn zero_weights_give_uniform_logits_and_log_c_loss() {
        let mut rng = stream(1, StreamKind::Init, 0, 0);
        let model = Model::new(4, &[5], 3, Activation::Relu, false, 1e-5, &mut rng).unwrap();
        let w = vec![0.0; model.weight_dim()];
        let b = batch(&[(&[0.4, -0.2, 1.0, 0.0], 1), (&[1.0, 1.0, 1.0, 1.0], 2)]);
        let logits = model.forward(&w, &b).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
        let (loss, _) = model.loss_and_grad(&w, &b).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_drives_loss_and_gradient_to_zero() {
        let model = Model::with_output_layer(
            1,
            &[1],
            2,
            Activation::Relu,
            false,
            1e-5,
            vec![1e4, -1e4],
        )
        .unwrap();
        let b = batch(&[(&[1.0], 0)]);
        let (loss, grad) = model.loss_and_grad(&[1.0], &b).unwrap();
        assert!(loss < 1e-8, "loss {loss}");
        assert!(grad.iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = stream(7, StreamKind::Init, 0, 0);
        let model = Model::new(6, &[8, 4], 3, Activation::Tanh, true, 1e-5, &mut rng).unwrap();
        let w: Vec<f64> = (0..model.weight_dim()).map(|i| ((i * 37 % 19) as f64 - 9.0) / 10.0).collect();
        let b = batch(&[(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 0), (&[-0.5; 6], 2)]);
        let a = model.forward(&w, &b).unwrap();
        let c = model.forward(&w, &b).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn batch_norm_two_point_column() {
        let out = static_batch_norm(&[1.0, -1.0], 2, 1, 1e-5).unwrap();
        let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((out[0] - expected).abs() < 1e-15);
        assert!((out[1] + expected).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_constant_column_is_zeroed() {
        let out = static_batch_norm(&[3.5, 3.5, 3.5], 3, 1, 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_centers_and_scales() {
        let mut rng = stream(3, StreamKind::Init, 0, 0);
        let rows = 64;
        let cols = 5;
        let x: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random::<f64>() * 10.0 - 2.0)
            .collect();
        let out = static_batch_norm(&x, rows, cols, 1e-9).unwrap();
        for c in 0..cols {
            let mean: f64 = (0..rows).map(|r| out[r * cols + c]).sum::<f64>() / rows as f64;
            let var: f64 =
                (0..rows).map(|r| out[r * cols + c].powi(2)).sum::<f64>() / rows as f64;
            assert!(mean.abs() < 1e-12, "column {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "column {c} variance {var}");
        }
    }

    #[test]
    fn batch_norm_rejects_single_row() {
        assert!(static_batch_norm(&[1.0, 2.0], 1, 2, 1e-5).is_err());
        let mut rng = stream(4, StreamKind::Init, 0, 0);
        let model = Model::new(2, &[2], 2, Activation::Relu, true, 1e-5, &mut rng).unwrap();
        let single = batch(&[(&[1.0, 2.0], 0)]);
        assert!(model.forward(&vec![0.1; 4], &single).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (bn, act) in [(false, Activation::Tanh), (true, Activation::Tanh)] {
            let mut rng = stream(11, StreamKind::Init, 0, 0);
            let model = Model::new(3, &[4, 3], 2, act, bn, 1e-5, &mut rng).unwrap();
            let mut w: Vec<f64> = (0..model.weight_dim())
                .map(|_| rng.random::<f64>() * 1.6 - 0.8)
                .collect();
            let b = batch(&[
                (&[0.2, -1.1, 0.7], 0),
                (&[1.3, 0.4, -0.6], 1),
                (&[-0.9, 0.8, 0.1], 0),
                (&[0.5, 0.5, -1.2], 1),
            ]);
            let (_, grad) = model.loss_and_grad(&w, &b).unwrap();
            let eps = 1e-5;
            for i in 0..w.len() {
                let orig = w[i];
                w[i] = orig + eps;
                let (lp, _) = model.loss_and_grad(&w, &b).unwrap();
                w[i] = orig - eps;
                let (lm, _) = model.loss_and_grad(&w, &b).unwrap();
                w[i] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let tol = (1e-3 * grad[i].abs()).max(1e-4);
                assert!(
                    (fd - grad[i]).abs() <= tol,
                    "bn={bn} coordinate {i}: fd {fd} vs analytic {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn latent_gradient_composes_with_chain_rule() {
        let phi = NormalizationFn::default_tanh();
        let mut rng = stream(13, StreamKind::Init, 0, 0);
        let model = Model::new(2, &[3], 2, Activation::Tanh, false, 1e-5, &mut rng).unwrap();
        let h: Vec<f64> = (0..model.weight_dim())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let b = batch(&[(&[0.3, -0.4], 0), (&[-1.0, 0.9], 1)]);

        let loss_of = |h: &[f64]| -> f64 {
            let w: Vec<f64> = h.iter().map(|&v| phi.apply(v).unwrap()).collect();
            model.loss_and_grad(&w, &b).unwrap().0
        };
        let w: Vec<f64> = h.iter().map(|&v| phi.apply(v).unwrap()).collect();
        let (_, gw) = model.loss_and_grad(&w, &b).unwrap();
        let gh = latent_gradient(&phi, &h, &gw).unwrap();

        let eps = 1e-5;
        let mut hp = h.clone();
        for i in 0..h.len() {
            hp[i] = h[i] + eps;
            let lp = loss_of(&hp);
            hp[i] = h[i] - eps;
            let lm = loss_of(&hp);
            hp[i] = h[i];
            let fd = (lp - lm) / (2.0 * eps);
            let tol = (1e-3 * gh[i].abs()).max(1e-4);
            assert!((fd - gh[i]).abs() <= tol, "coordinate {i}: {fd} vs {}", gh[i]);
        }
    }

    #[test]
    fn latent_gradient_at_origin_scales_by_slope() {
        let phi = NormalizationFn::default_tanh();
        let g = vec![0.25, -1.5, 0.0];
        let gh = latent_gradient(&phi, &[0.0, 0.0, 0.0], &g).unwrap();
        assert_eq!(gh, vec![0.25 * 1.5, -1.5 * 1.5, 0.0]);
        assert!(latent_gradient(&phi, &[0.0], &g).is_err());
    }

    #[test]
    fn op_count_hand_formulas() {
        let model = Model::with_output_layer(
            784,
            &[100],
            10,
            Activation::Relu,
            true,
            1e-5,
            vec![0.0; 1000],
        )
        .unwrap();
        let float = model.op_count(WeightKind::Float, 1);
        assert_eq!(float.muls, 784 * 100 + 100 * 10);
        assert_eq!(float.adds, 100 * 783 + 10 * 99);
        let binary = model.op_count(WeightKind::Binary, 1);
        assert_eq!(binary.muls, 100 * 10);
        assert_eq!(binary.adds, 100 * (2 * 784 - 1) + 10 * 99);

        let doubled = model.op_count(WeightKind::Float, 2);
        assert_eq!(doubled.muls, 2 * float.muls);
        assert_eq!(doubled.adds, 2 * float.adds);

        let ratio = float.energy_millijoules() / binary.energy_millijoules();
        assert!(ratio > 1.0, "float/binary energy ratio {ratio}");
    }

    #[test]
    fn shape_and_label_validation() {
        let mut rng = stream(5, StreamKind::Init, 0, 0);
        let model = Model::new(3, &[2], 2, Activation::Relu, false, 1e-5, &mut rng).unwrap();
        let b = batch(&[(&[1.0, 2.0, 3.0], 0)]);
        assert!(model.forward(&[0.0; 5], &b).is_err());
        assert!(model.forward(&[f64::NAN; 6], &b).is_err());
        let bad_label = batch(&[(&[1.0, 2.0, 3.0], 2)]);
        assert!(model.forward(&[0.0; 6], &bad_label).is_err());
        let bad_width = batch(&[(&[1.0, 2.0], 0)]);
        assert!(model.forward(&[0.0; 6], &bad_width).is_err());
    }

    #[test]
    fn latent_weights_reshape_round_trip() {
        let shapes = vec![
            LayerShape { layer: 0, rows: 2, cols: 3 },
            LayerShape { layer: 1, rows: 3, cols: 1 },
        ];
        let values: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let lw = LatentWeights::new(values.clone(), shapes).unwrap();
        assert_eq!(lw.dim(), 9);
        assert_eq!(lw.layer(0).unwrap(), &values[0..6]);
        assert_eq!(lw.layer(1).unwrap(), &values[6..9]);
        assert!(lw.layer(2).is_err());
        assert!(LatentWeights::new(vec![0.0; 8], lw.shapes().to_vec()).is_err());
    }

    #[test]
    fn model_rejects_degenerate_configs() {
        let mut rng = stream(6, StreamKind::Init, 0, 0);
        assert!(Model::new(0, &[2], 2, Activation::Relu, false, 1e-5, &mut rng).is_err());
        assert!(Model::new(3, &[], 2, Activation::Relu, false, 1e-5, &mut rng).is_err());
        assert!(Model::new(3, &[0], 2, Activation::Relu, false, 1e-5, &mut rng).is_err());
        assert!(Model::new(3, &[2], 1, Activation::Relu, false, 1e-5, &mut rng).is_err());
        assert!(Model::new(3, &[2], 2, Activation::Relu, false, 0.0, &mut rng).is_err());
    }
}
