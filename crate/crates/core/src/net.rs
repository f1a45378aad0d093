//! Bias-free fully-connected networks in standard ("fan-in") parameterization.
//!
//! Layer recursion: `f⁰(x) = x`, `fˡ(x) = φ(W⁽ˡ⁾ fˡ⁻¹(x))` for hidden layers and
//! a linear readout `f(x) = W⁽ᴸ⁾ fᴸ⁻¹(x)`. Parameters are flattened layer by
//! layer, each weight matrix row-major.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

const NTKW_MAGIC: &[u8; 4] = b"NTKW";
const NTKW_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Exact Gaussian-CDF form, `x·Φ(x)`.
    Gelu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => x * std_normal_cdf(x),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                std_normal_cdf(x) + x * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// `N(0, 1/n_{l-1})`.
    HeFanInGaussian,
    /// Entries bounded by `2/sqrt(n_{l-1})` with variance `1/n_{l-1}`.
    HeFanInTruncated,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    #[default]
    Standard,
    /// Reserved; rejected by [`Network::new`].
    NtkFanOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub init: Init,
    #[serde(default)]
    pub parameterization: Parameterization,
    pub seed: u64,
}

impl NetworkSpec {
    /// ReLU net with Gaussian fan-in init.
    pub fn relu(input_dim: usize, hidden_widths: Vec<usize>, output_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation: Activation::Relu,
            init: Init::HeFanInGaussian,
            parameterization: Parameterization::Standard,
            seed,
        }
    }

    /// Number of weight layers, `L`.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    /// `[D, n_1, …, n_{L-1}, O]`.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.depth() + 1);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim);
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.output_dim == 0 {
            return Err(Error::InvalidSpec("output_dim must be >= 1".into()));
        }
        if let Some(i) = self.hidden_widths.iter().position(|&w| w == 0) {
            return Err(Error::InvalidSpec(format!("hidden layer {i} has zero width")));
        }
        if let Activation::LeakyRelu { slope } = self.activation {
            if !slope.is_finite() {
                return Err(Error::InvalidSpec("leaky_relu slope must be finite".into()));
            }
        }
        if self.parameterization == Parameterization::NtkFanOut {
            return Err(Error::InvalidSpec(
                "NTK fan-out parameterization is reserved and not implemented".into(),
            ));
        }
        Ok(())
    }
}

/// Location of one weight matrix inside the flattened parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerSlot {
    pub fn extent(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.extent()
    }
}

/// Activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `h⁽ˡ⁾ = W⁽ˡ⁾ fˡ⁻¹(x)` for `l = 1..=L`; the last entry is the output.
    pub pre: Vec<Vec<f64>>,
    /// `fˡ(x)` for `l = 0..L` (so `post[0] = x`, `post[L-1]` is the penultimate layer).
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("network has at least one layer")
    }

    /// `g(x)`, the input to the readout layer.
    pub fn penultimate(&self) -> &[f64] {
        self.post.last().expect("trace has input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    weights: Vec<Matrix>,
    slots: Vec<LayerSlot>,
}

impl Network {
    /// Draw weights i.i.d. from the spec's fan-in law. Deterministic in `spec.seed`.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let dims = spec.layer_dims();
        let trunc = TruncatedFanIn::new();
        let weights = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (1.0 / fan_in as f64).sqrt();
                match spec.init {
                    Init::HeFanInGaussian => {
                        let normal = Normal::new(0.0, std).expect("positive std");
                        Matrix::from_fn(fan_out, fan_in, |_, _| normal.sample(&mut rng))
                    }
                    Init::HeFanInTruncated => {
                        Matrix::from_fn(fan_out, fan_in, |_, _| trunc.sample(std, &mut rng))
                    }
                }
            })
            .collect();
        Self::from_weights(spec, weights)
    }

    pub fn from_weights(spec: NetworkSpec, weights: Vec<Matrix>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if weights.len() != spec.depth() {
            return Err(Error::ShapeMismatch(format!(
                "{} weight matrices for depth {}",
                weights.len(),
                spec.depth()
            )));
        }
        let mut slots = Vec::with_capacity(weights.len());
        let mut offset = 0;
        for (l, w) in weights.iter().enumerate() {
            if w.shape() != (dims[l + 1], dims[l]) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} has shape {:?}, expected {:?}",
                    l + 1,
                    w.shape(),
                    (dims[l + 1], dims[l])
                )));
            }
            if !w.is_finite() {
                return Err(Error::InvalidMatrix(format!("layer {} has non-finite weights", l + 1)));
            }
            slots.push(LayerSlot {
                offset,
                rows: w.rows(),
                cols: w.cols(),
            });
            offset += w.rows() * w.cols();
        }
        Ok(Self {
            spec,
            weights,
            slots,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn activation(&self) -> Activation {
        self.spec.activation
    }

    /// `W⁽ˡ⁾` for `l` in `1..=L`.
    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer - 1]
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn param_count(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.extent())
    }

    /// Per-layer `(offset, extent)` into the flattened parameter vector.
    pub fn param_index(&self) -> &[LayerSlot] {
        &self.slots
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for w in &self.weights {
            out.extend_from_slice(w.as_slice());
        }
        out
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a network with {}",
                theta.len(),
                self.param_count()
            )));
        }
        for (w, s) in self.weights.iter_mut().zip(&self.slots) {
            w.as_mut_slice().copy_from_slice(&theta[s.range()]);
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite input".into()));
        }
        let act = self.activation();
        let depth = self.depth();
        let mut pre = Vec::with_capacity(depth);
        let mut post = Vec::with_capacity(depth);
        post.push(x.to_vec());
        for (l, w) in self.weights.iter().enumerate() {
            let h = w.matvec(post.last().expect("input pushed"))?;
            if l + 1 < depth {
                post.push(h.iter().map(|&v| act.apply(v)).collect());
            }
            pre.push(h);
        }
        Ok(ForwardTrace { pre, post })
    }

    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.pre.pop().expect("at least one layer"))
    }

    /// `f0` evaluated on every row.
    pub fn outputs(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(inputs.rows(), self.output_dim());
        for i in 0..inputs.rows() {
            let y = self.output(inputs.row(i))?;
            out.row_mut(i).copy_from_slice(&y);
        }
        Ok(out)
    }

    /// Full `O × P` Jacobian of the outputs with respect to the flattened parameters.
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        self.jacobian_columns(x, 0..self.param_count())
    }

    /// Columns `cols` of the Jacobian. Every logit gets its own reverse sweep;
    /// sweeps stop at the lowest layer the column range touches.
    pub fn jacobian_columns(&self, x: &[f64], cols: Range<usize>) -> Result<Matrix> {
        let trace = self.forward(x)?;
        let mut out = vec![0.0; self.output_dim() * cols.len()];
        let width = cols.len();
        self.write_jacobian_columns(&trace, cols, &mut out)?;
        Matrix::from_vec(self.output_dim(), width, out)
    }

    /// Write columns `cols` of the Jacobian at `trace` into `out`, an
    /// `O × cols.len()` row-major buffer.
    pub(crate) fn write_jacobian_columns(
        &self,
        trace: &ForwardTrace,
        cols: Range<usize>,
        out: &mut [f64],
    ) -> Result<()> {
        let p = self.param_count();
        if cols.start > cols.end || cols.end > p {
            return Err(Error::OutOfRange(format!(
                "column range {cols:?} outside 0..{p}"
            )));
        }
        let o = self.output_dim();
        let width = cols.len();
        if out.len() != o * width {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} cannot hold {o} x {width}",
                out.len()
            )));
        }
        if cols.is_empty() {
            return Ok(());
        }
        // Rows of `delta` are the per-logit adjoints dF_i/dh⁽ˡ⁾.
        let delta = Matrix::identity(o);
        self.reverse_sweep(trace, self.depth(), delta, |layer, delta, input| {
            let slot = self.slots[layer - 1];
            let lo = cols.start.max(slot.offset);
            let hi = cols.end.min(slot.offset + slot.extent());
            if lo < hi {
                for i in 0..o {
                    let row = &mut out[i * width..(i + 1) * width];
                    let dst = &mut row[lo - cols.start..hi - cols.start];
                    fill_outer_slice(delta.row(i), input, lo - slot.offset, dst);
                }
            }
            // Continue while lower layers still intersect the range.
            cols.start < slot.offset
        })
    }

    /// `vᵀ·J(x)` from a single reverse sweep seeded with `v`.
    pub fn grad_scalar(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.output_dim() {
            return Err(Error::ShapeMismatch(format!(
                "readout has length {}, network has {} outputs",
                v.len(),
                self.output_dim()
            )));
        }
        let trace = self.forward(x)?;
        let mut g = vec![0.0; self.param_count()];
        self.accumulate_grad(&trace, v, 1.0, &mut g)?;
        Ok(g)
    }

    /// `grad += scale · vᵀ·J` at a recorded trace.
    pub(crate) fn accumulate_grad(
        &self,
        trace: &ForwardTrace,
        v: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        let seed = Matrix::from_vec(1, v.len(), v.iter().map(|&x| x * scale).collect())?;
        self.reverse_sweep(trace, self.depth(), seed, |layer, delta, input| {
            let slot = self.slots[layer - 1];
            let dst = &mut grad[slot.range()];
            let d = delta.row(0);
            for (r, &dr) in d.iter().enumerate() {
                if dr != 0.0 {
                    linalg::axpy(dr, input, &mut dst[r * slot.cols..(r + 1) * slot.cols]);
                }
            }
            true
        })
    }

    /// Jacobian of the penultimate representation `g(x) = fᴸ⁻¹(x)` with
    /// respect to `W⁽¹⁾..W⁽ᴸ⁻¹⁾`: shape `n_{L-1} × P_body`.
    pub fn body_jacobian(&self, x: &[f64]) -> Result<Matrix> {
        let depth = self.depth();
        if depth < 2 {
            return Err(Error::Unsupported(
                "depth-1 network has no penultimate layer".into(),
            ));
        }
        let trace = self.forward(x)?;
        let top = depth - 1;
        let width = self.spec.layer_dims()[top];
        let p_body = self.slots[top - 1].offset + self.slots[top - 1].extent();
        let act = self.activation();
        let mut delta = Matrix::zeros(width, width);
        for k in 0..width {
            delta.set(k, k, act.derivative(trace.pre[top - 1][k]));
        }
        let mut out = Matrix::zeros(width, p_body);
        self.reverse_sweep(&trace, top, delta, |layer, delta, input| {
            let slot = self.slots[layer - 1];
            for i in 0..width {
                let dst = &mut out.row_mut(i)[slot.range()];
                fill_outer_slice(delta.row(i), input, 0, dst);
            }
            true
        })?;
        Ok(out)
    }

    /// Backpropagate adjoint rows from pre-activation `h⁽ᵗᵒᵖ⁾` downwards.
    /// `visit(layer, delta, f^{layer-1})` sees the adjoint at `h⁽ˡᵃʸᵉʳ⁾`
    /// and returns whether lower layers are still needed.
    fn reverse_sweep(
        &self,
        trace: &ForwardTrace,
        top: usize,
        mut delta: Matrix,
        mut visit: impl FnMut(usize, &Matrix, &[f64]) -> bool,
    ) -> Result<()> {
        let act = self.activation();
        let mut layer = top;
        loop {
            let keep_going = visit(layer, &delta, &trace.post[layer - 1]);
            if layer == 1 || !keep_going {
                return Ok(());
            }
            // dF/df^{l-1} = delta · W⁽ˡ⁾, then through φ' at h^{l-1}.
            let mut next = delta.matmul(&self.weights[layer - 1])?;
            let h = &trace.pre[layer - 2];
            for i in 0..next.rows() {
                for (v, &hk) in next.row_mut(i).iter_mut().zip(h) {
                    *v *= act.derivative(hk);
                }
            }
            delta = next;
            layer -= 1;
        }
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<()> {
        let spec = serde_json::to_vec(&self.spec)
            .map_err(|e| Error::Format(format!("spec serialization: {e}")))?;
        w.write_all(NTKW_MAGIC)?;
        w.write_all(&NTKW_VERSION.to_le_bytes())?;
        w.write_all(&(spec.len() as u64).to_le_bytes())?;
        w.write_all(&spec)?;
        for m in &self.weights {
            linalg::write_matrix(w, m)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != NTKW_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != NTKW_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut spec = vec![0u8; len];
        r.read_exact(&mut spec)?;
        let spec: NetworkSpec = serde_json::from_slice(&spec)
            .map_err(|e| Error::Format(format!("checkpoint spec: {e}")))?;
        let weights = (0..spec.depth())
            .map(|_| linalg::read_matrix(r))
            .collect::<Result<Vec<_>>>()?;
        Self::from_weights(spec, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// SHA-256 of the checkpoint encoding, hex.
    pub fn checkpoint_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

/// `dst[k] = d[r]·input[c]` for flattened index `start + k = r·cols + c`.
fn fill_outer_slice(d: &[f64], input: &[f64], start: usize, dst: &mut [f64]) {
    let cols = input.len();
    let mut k = 0;
    let mut idx = start;
    while k < dst.len() {
        let r = idx / cols;
        let c = idx % cols;
        let run = (cols - c).min(dst.len() - k);
        let dr = d[r];
        for (o, &a) in dst[k..k + run].iter_mut().zip(&input[c..c + run]) {
            *o = dr * a;
        }
        k += run;
        idx += run;
    }
}

/// Rejection sampler for a normal truncated at `±2/sqrt(fan_in)` whose
/// variance is still `1/fan_in`.
struct TruncatedFanIn {
    /// Cut-off in units of the raw normal's standard deviation.
    cut: f64,
}

impl TruncatedFanIn {
    fn new() -> Self {
        // Solve Var(Z | |Z| < t) = t²/4, so that scaling the raw normal by
        // 2·std/t yields variance std² with support [-2·std, 2·std].
        let excess = |t: f64| {
            let var = 1.0 - 2.0 * t * std_normal_pdf(t) / (2.0 * std_normal_cdf(t) - 1.0);
            var - t * t / 4.0
        };
        let (mut lo, mut hi) = (0.5, 2.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if excess(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self { cut: 0.5 * (lo + hi) }
    }

    fn sample(&self, std: f64, rng: &mut ChaCha8Rng) -> f64 {
        let scale = 2.0 * std / self.cut;
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() < self.cut {
                return z * scale;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs after which a snapshot is kept; `0` is the initial network.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 40,
            seed: 0,
            checkpoints: vec![0, 5, 10, 20, 40],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !self.momentum.is_finite() || !self.weight_decay.is_finite() {
            return Err(Error::InvalidConfig("momentum and weight_decay must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub network: Network,
    /// `(epoch, network)` for each requested checkpoint that was reached.
    pub snapshots: Vec<(usize, Network)>,
    /// Mean softmax cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Loss used by [`sgd_train`]; recorded in run metadata.
pub const TRAINING_LOSS: &str = "softmax_cross_entropy";

/// Minibatch SGD on softmax cross-entropy with heavy-ball momentum and
/// coupled weight decay (`g ← ∇L + λθ; b ← μb + g; θ ← θ − ηb`).
pub fn sgd_train(net: Network, data: &LabeledSet, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::EmptySet);
    }
    if data.input_dim() != net.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} features, network expects {}",
            data.input_dim(),
            net.input_dim()
        )));
    }
    if data.num_classes() != net.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} classes, network has {} outputs",
            data.num_classes(),
            net.output_dim()
        )));
    }
    let mut net = net;
    let mut snapshots = Vec::new();
    if cfg.checkpoints.contains(&0) {
        snapshots.push((0, net.clone()));
    }
    let p = net.param_count();
    let mut theta = net.flat_params();
    let mut buf = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let o = net.output_dim();
    let mut probs = vec![0.0; o];

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let inv = 1.0 / batch.len() as f64;
            for &i in batch {
                let trace = net.forward(data.inputs().row(i))?;
                let label = data.labels()[i];
                total += softmax_xent(trace.output(), label, &mut probs);
                probs[label] -= 1.0;
                net.accumulate_grad(&trace, &probs, inv, &mut grad)?;
            }
            if !total.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            for k in 0..p {
                let g = grad[k] + cfg.weight_decay * theta[k];
                buf[k] = cfg.momentum * buf[k] + g;
                theta[k] -= cfg.lr * buf[k];
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
            net.set_flat_params(&theta)?;
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        epoch_loss.push(mean);
        if cfg.checkpoints.contains(&epoch) {
            snapshots.push((epoch, net.clone()));
        }
    }
    Ok(TrainOutcome {
        network: net,
        snapshots,
        epoch_loss,
    })
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Cross-entropy of `logits` at `label`; leaves softmax probabilities in `probs`.
fn softmax_xent(logits: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &l) in probs.iter_mut().zip(logits) {
        *p = (l - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    -(logits[label] - max - z.ln())
}

/// Argmax with lowest-index tie-break.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose network argmax equals the label.
pub fn accuracy(net: &Network, data: &LabeledSet) -> Result<f64> {
    if data.len() == 0 {
        return Err(Error::EmptySet);
    }
    let mut hits = 0usize;
    for i in 0..data.len() {
        if argmax(&net.output(data.inputs().row(i))?) == data.labels()[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}
