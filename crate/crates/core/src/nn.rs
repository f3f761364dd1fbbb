//! Small dense networks with hand-written reverse-mode gradients.
//!
//! Everything is batched: inputs are row-major `batch × features` buffers and
//! the affine maps go through `matrixmultiply::dgemm`. Weights are stored
//! row-major as `rows = outputs`, `cols = inputs`.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn tag(self) -> u64 {
        match self {
            Activation::Linear => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
        }
    }

    pub fn from_tag(tag: u64) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Linear),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Sigmoid),
            t => Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => tanh(x),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// `tanh` through a single `exp`; absolute error stays at the rounding
/// level and it is several times cheaper than the libm routine.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            rows: outputs,
            cols: inputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// `c = a · b + beta · c` on strided views; `c` is row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the slices cover every strided element visited (checked above
    // in debug builds and guaranteed by the callers' shape bookkeeping).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Activations of every layer for one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub batch: usize,
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }
}

/// Parameter gradients with the same layout as [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + Clone {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists every layer width
    /// including input and output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes, hidden, output);
        for layer in &mut net.layers {
            let bound = (6.0 / (layer.rows + layer.cols) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        net
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::zeros(w[0], w[1], if i == last { output } else { hidden }))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().rows
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.layers.windows(2) {
            check_dim("mlp: consecutive layers", pair[0].rows, pair[1].cols)?;
        }
        for l in &self.layers {
            check_dim("mlp: weight count", l.rows * l.cols, l.weights.len())?;
            check_dim("mlp: bias count", l.rows, l.biases.len())?;
        }
        if !self.params().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("mlp parameters"));
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer, input: &[f64], batch: usize, out: &mut Vec<f64>) {
        out.clear();
        out.resize(batch * layer.rows, 0.0);
        for row in out.chunks_exact_mut(layer.rows) {
            row.copy_from_slice(&layer.biases);
        }
        gemm(
            batch,
            layer.cols,
            layer.rows,
            input,
            layer.cols,
            1,
            &layer.weights,
            1,
            layer.cols,
            1.0,
            out,
        );
        if layer.activation != Activation::Linear {
            for v in out.iter_mut() {
                *v = layer.activation.apply(*v);
            }
        }
    }

    /// Batched forward pass keeping every activation for [`Mlp::backward`].
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<ForwardCache> {
        check_dim("mlp input", batch * self.input_dim(), inputs.len())?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_vec());
        for layer in &self.layers {
            let mut out = Vec::new();
            Self::layer_forward(layer, activations.last().unwrap(), batch, &mut out);
            activations.push(out);
        }
        Ok(ForwardCache { batch, activations })
    }

    /// Batched forward pass returning only the output.
    pub fn predict_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        check_dim("mlp input", batch * self.input_dim(), inputs.len())?;
        let mut current = inputs.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            Self::layer_forward(layer, &current, batch, &mut next);
            std::mem::swap(&mut current, &mut next);
        }
        Ok(current)
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let cache = self.forward_batch(input, 1)?;
        Ok((cache.output().to_vec(), cache))
    }

    /// Reverse pass. `output_grad` is `∂L/∂output` for every batch row; the
    /// returned parameter gradients are summed over the batch. The input
    /// gradient is only computed when requested.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        want_input_grad: bool,
    ) -> Result<(MlpGrads, Option<Vec<f64>>)> {
        let batch = cache.batch;
        check_dim("mlp output gradient", batch * self.output_dim(), output_grad.len())?;
        check_dim("mlp cache depth", self.layers.len() + 1, cache.activations.len())?;
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = output_grad.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let output = &cache.activations[i + 1];
            if layer.activation != Activation::Linear {
                for (d, y) in delta.iter_mut().zip(output) {
                    *d *= layer.activation.derivative_from_output(*y);
                }
            }
            let input = &cache.activations[i];
            // dW = δᵀ X
            gemm(
                layer.rows,
                batch,
                layer.cols,
                &delta,
                1,
                layer.rows,
                input,
                layer.cols,
                1,
                0.0,
                &mut grads.weights[i],
            );
            let db = &mut grads.biases[i];
            for row in delta.chunks_exact(layer.rows) {
                db.iter_mut().zip(row).for_each(|(b, d)| *b += d);
            }
            if i > 0 || want_input_grad {
                // dX = δ W
                let mut prev = vec![0.0; batch * layer.cols];
                gemm(
                    batch,
                    layer.rows,
                    layer.cols,
                    &delta,
                    layer.rows,
                    1,
                    &layer.weights,
                    layer.cols,
                    1,
                    0.0,
                    &mut prev,
                );
                delta = prev;
            }
        }
        Ok((grads, want_input_grad.then_some(delta)))
    }

    /// Overwrites every parameter with `other`'s.
    pub fn copy_from(&mut self, other: &Mlp) {
        self.clone_from(other);
    }
}

/// Adam moments for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_mlp(net: &Mlp) -> Self {
        Self::new(net.param_count())
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients without
    /// touching parameters or moments.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64> + Clone,
        lr: f64,
    ) -> Result<()> {
        if grads.clone().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut count = 0;
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            count += 1;
        }
        debug_assert_eq!(count, self.m.len());
        Ok(())
    }
}

/// Applies an Adam step to every parameter of `net`.
pub fn adam_step(net: &mut Mlp, grads: &MlpGrads, adam: &mut AdamState, lr: f64) -> Result<()> {
    check_dim("adam state", net.param_count(), adam.m.len())?;
    let g = grads.iter();
    adam.step(net.params_mut(), g, lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    Triangular,
    Constant,
}

/// Learning rate as a function of the episode index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub period: usize,
    pub mode: ScheduleMode,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_min: 1e-4,
            lr_max: 4e-4,
            period: 100,
            mode: ScheduleMode::Triangular,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) || self.period == 0 {
            return Err(Error::InvalidParameter(
                "schedule needs 0 < lr_min <= lr_max and period >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Rises linearly from `lr_min` to `lr_max` over the first half period
    /// and falls back over the second.
    pub fn lr_at(&self, episode: usize) -> f64 {
        match self.mode {
            ScheduleMode::Constant => self.lr_min,
            ScheduleMode::Triangular => {
                let phase = (episode % self.period) as f64 / self.period as f64;
                let rise = if phase <= 0.5 { 2.0 * phase } else { 2.0 * (1.0 - phase) };
                self.lr_min + (self.lr_max - self.lr_min) * rise
            }
        }
    }
}

const MAGIC: &[u8; 5] = b"SRCP1";
const MAX_ELEMENTS: u64 = 1 << 32;

/// Binary checkpoint: the magic `SRCP1`, then networks, then flat `f64`
/// vectors, then `u64` counters. Every number is little-endian 64-bit.
///
/// Network segment: layer count, then per layer rows, cols, activation tag,
/// row-major weights and biases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub networks: Vec<Mlp>,
    pub vectors: Vec<Vec<f64>>,
    pub counters: Vec<u64>,
}

fn put_u64<W: Write>(w: &mut W, x: u64) -> std::io::Result<()> {
    w.write_all(&x.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

fn get_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let n = get_u64(r)?;
    if n > MAX_ELEMENTS {
        return Err(Error::Checkpoint(format!("implausible {what} {n}")));
    }
    Ok(n as usize)
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes one network segment.
pub fn write_network<W: Write>(w: &mut W, net: &Mlp) -> Result<()> {
    put_u64(w, net.layers.len() as u64)?;
    for l in &net.layers {
        put_u64(w, l.rows as u64)?;
        put_u64(w, l.cols as u64)?;
        put_u64(w, l.activation.tag())?;
        put_f64s(w, &l.weights)?;
        put_f64s(w, &l.biases)?;
    }
    Ok(())
}

pub fn read_network<R: Read>(r: &mut R) -> Result<Mlp> {
    let n_layers = get_len(r, "layer count")?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let rows = get_len(r, "row count")?;
        let cols = get_len(r, "column count")?;
        let activation = Activation::from_tag(get_u64(r)?)?;
        let weights = get_f64s(r, rows * cols)?;
        let biases = get_f64s(r, rows)?;
        layers.push(Layer {
            rows,
            cols,
            weights,
            biases,
            activation,
        });
    }
    if layers.is_empty() {
        return Err(Error::Checkpoint("network without layers".into()));
    }
    let net = Mlp { layers };
    for pair in net.layers.windows(2) {
        if pair[0].rows != pair[1].cols {
            return Err(Error::Checkpoint("inconsistent layer shapes".into()));
        }
    }
    Ok(net)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u64(&mut w, self.networks.len() as u64)?;
        for net in &self.networks {
            write_network(&mut w, net)?;
        }
        put_u64(&mut w, self.vectors.len() as u64)?;
        for v in &self.vectors {
            put_u64(&mut w, v.len() as u64)?;
            put_f64s(&mut w, v)?;
        }
        put_u64(&mut w, self.counters.len() as u64)?;
        for &c in &self.counters {
            put_u64(&mut w, c)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("missing magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let n_nets = get_len(&mut r, "network count")?;
        let networks = (0..n_nets).map(|_| read_network(&mut r)).collect::<Result<Vec<_>>>()?;
        let n_vecs = get_len(&mut r, "vector count")?;
        let mut vectors = Vec::with_capacity(n_vecs.min(1024));
        for _ in 0..n_vecs {
            let len = get_len(&mut r, "vector length")?;
            vectors.push(get_f64s(&mut r, len)?);
        }
        let n_counters = get_len(&mut r, "counter count")?;
        let counters = (0..n_counters).map(|_| get_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            networks,
            vectors,
            counters,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        self.write_to(std::io::BufWriter::new(std::fs::File::create(&tmp)?))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::MissingInput {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -20_000..=20_000 {
            let x = i as f64 * 1e-3;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15);
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(800.0), 1.0);
        assert_eq!(tanh(-800.0), -1.0);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 4, 2], Activation::Tanh, Activation::Linear);
        let (y, _) = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut net = Mlp::zeros(&[2, 2], Activation::Tanh, Activation::Linear);
        net.layers[0].weights = vec![1.0, 2.0, 3.0, 4.0];
        net.layers[0].biases = vec![0.5, -0.5];
        let (y, _) = net.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0 - 2.0 + 0.5, 3.0 - 4.0 - 0.5]);
    }

    #[test]
    fn hand_computed_tanh_network() {
        let mut net = Mlp::zeros(&[2, 2, 1], Activation::Tanh, Activation::Linear);
        net.layers[0].weights = vec![0.5, -0.3, 0.8, 0.2];
        net.layers[0].biases = vec![0.1, -0.2];
        net.layers[1].weights = vec![1.5, -0.7];
        net.layers[1].biases = vec![0.05];
        let x = [0.4, -1.2];
        let h0 = (0.5 * 0.4 + -0.3 * -1.2 + 0.1f64).tanh();
        let h1 = (0.8 * 0.4 + 0.2 * -1.2 - 0.2f64).tanh();
        let expect = 1.5 * h0 - 0.7 * h1 + 0.05;
        let (y, _) = net.forward(&x).unwrap();
        assert!((y[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Mlp::zeros(&[3, 2], Activation::Tanh, Activation::Linear);
        assert!(net.forward(&[1.0]).is_err());
        let (_, cache) = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(net.backward(&cache, &[1.0], false).is_err());
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 2], Activation::Tanh, Activation::Linear, &mut rng);
        let x = [0.3, -0.7, 1.1];
        let (_, cache) = net.forward(&x).unwrap();
        let dy = [0.5, -2.0];
        let (g, dx) = net.backward(&cache, &dy, true).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((g.weights[0][o * 3 + i] - dy[o] * x[i]).abs() < 1e-15);
            }
        }
        assert_eq!(g.biases[0], dy.to_vec());
        let dx = dx.unwrap();
        for i in 0..3 {
            let expect = net.layers[0].weights[i] * dy[0] + net.layers[0].weights[3 + i] * dy[1];
            assert!((dx[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[4, 5, 3], Activation::Tanh, Activation::Sigmoid, &mut rng);
        let cache = net.forward_batch(&[0.1; 8], 2).unwrap();
        let (g, _) = net.backward(&cache, &[0.0; 6], false).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn batch_rows_match_single_sample_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 6, 2], Activation::Tanh, Activation::Sigmoid, &mut rng);
        let xs: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let batched = net.predict_batch(&xs, 4).unwrap();
        for b in 0..4 {
            let (y, _) = net.forward(&xs[b * 3..b * 3 + 3]).unwrap();
            for o in 0..2 {
                assert!((y[o] - batched[b * 2 + o]).abs() < 1e-14);
            }
        }
        let cache = net.forward_batch(&xs, 4).unwrap();
        assert_eq!(cache.output(), batched.as_slice());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Linear, &mut rng);
        let before = net.clone();
        let mut adam = AdamState::for_mlp(&net);
        let zeros = MlpGrads::zeros_like(&net);
        adam_step(&mut net, &zeros, &mut adam, 1e-3).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut adam = AdamState::new(1);
        let mut p = [1.0f64];
        let g = [1.0f64];
        adam.step(p.iter_mut(), g.iter(), 0.01).unwrap();
        // m̂ = 1, v̂ = 1 → step = lr / (1 + eps).
        assert!((p[0] - (1.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut adam = AdamState::new(2);
        let mut p = [1.0, 2.0];
        let g = [0.5, f64::NAN];
        assert!(adam.step(p.iter_mut(), g.iter(), 0.1).is_err());
        assert_eq!(p, [1.0, 2.0]);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Mlp::new(&[3, 4, 2], Activation::Tanh, Activation::Linear, &mut rng);
        let before = net.clone();
        let mut adam = AdamState::for_mlp(&net);
        let mut grads = MlpGrads::zeros_like(&net);
        grads.weights[0][0] = 3.0;
        adam_step(&mut net, &grads, &mut adam, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn adam_runs_are_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut net = Mlp::new(&[3, 8, 1], Activation::Tanh, Activation::Linear, &mut rng);
            let mut adam = AdamState::for_mlp(&net);
            for k in 0..20 {
                let x: Vec<f64> = (0..12).map(|i| ((i + k) as f64).cos()).collect();
                let cache = net.forward_batch(&x, 4).unwrap();
                let dy: Vec<f64> = cache.output().iter().map(|y| y - 0.5).collect();
                let (g, _) = net.backward(&cache, &dy, false).unwrap();
                adam_step(&mut net, &g, &mut adam, 1e-2).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn triangular_schedule_endpoints() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-4);
        assert!((s.lr_at(50) - 4e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(100), 1e-4);
        assert!((s.lr_at(25) - 2.5e-4).abs() < 1e-18);
        assert!((s.lr_at(75) - 2.5e-4).abs() < 1e-18);
        for e in 0..500 {
            let lr = s.lr_at(e);
            assert!((1e-4..=4e-4).contains(&lr));
            assert_eq!(lr, s.lr_at(e + 100));
        }
        let c = LrSchedule {
            mode: ScheduleMode::Constant,
            ..s
        };
        assert_eq!(c.lr_at(37), 1e-4);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ck = Checkpoint {
            networks: vec![
                Mlp::new(&[4, 3, 2], Activation::Tanh, Activation::Sigmoid, &mut rng),
                Mlp::new(&[5, 1], Activation::Tanh, Activation::Linear, &mut rng),
            ],
            vectors: vec![vec![1.0, f64::MIN_POSITIVE, -0.0], vec![]],
            counters: vec![7, u64::MAX],
        };
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..5], b"SRCP1");
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.vectors[0][2].to_bits(), (-0.0f64).to_bits());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn network_segment_layout() {
        let mut net = Mlp::zeros(&[2, 1], Activation::Tanh, Activation::Sigmoid);
        net.layers[0].weights = vec![1.5, -2.0];
        net.layers[0].biases = vec![0.25];
        let mut buf = Vec::new();
        write_network(&mut buf, &net).unwrap();
        let words: Vec<[u8; 8]> = buf.chunks_exact(8).map(|c| c.try_into().unwrap()).collect();
        assert_eq!(u64::from_le_bytes(words[0]), 1);
        assert_eq!(u64::from_le_bytes(words[1]), 1);
        assert_eq!(u64::from_le_bytes(words[2]), 2);
        assert_eq!(u64::from_le_bytes(words[3]), Activation::Sigmoid.tag());
        assert_eq!(f64::from_le_bytes(words[4]), 1.5);
        assert_eq!(f64::from_le_bytes(words[5]), -2.0);
        assert_eq!(f64::from_le_bytes(words[6]), 0.25);
    }
}
