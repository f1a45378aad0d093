//! Empirical NTK (eNTK) blocks and Grams, the pseudo-NTK (pNTK), the
//! linear-readout decomposition, the layer-wise recursion, and resource
//! estimates.
//!
//! Gram layout: row `i·O + a` is output `a` at point `i`.

use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, SymmetricMatrix};
use crate::net::{ForwardTrace, Network};

const SYRK_BLOCK: usize = 256;

/// `J(x1)·J(x2)ᵀ`.
pub fn entk_block(net: &Network, x1: &[f64], x2: &[f64]) -> Result<Matrix> {
    let j1 = net.jacobian(x1)?;
    let j2 = net.jacobian(x2)?;
    j1.matmul_t(&j2)
}

/// eNTK restricted to the parameters of layers `layers` (1-based, half-open).
pub fn entk_block_layers(
    net: &Network,
    x1: &[f64],
    x2: &[f64],
    layers: Range<usize>,
) -> Result<Matrix> {
    if layers.start < 1 || layers.end > net.depth() + 1 || layers.start >= layers.end {
        return Err(Error::OutOfRange(format!(
            "layer range {layers:?} for depth {}",
            net.depth()
        )));
    }
    let slots = net.param_index();
    let cols = slots[layers.start - 1].offset..slots[layers.end - 2].range().end;
    let j1 = net.jacobian_columns(x1, cols.clone())?;
    let j2 = net.jacobian_columns(x2, cols)?;
    j1.matmul_t(&j2)
}

/// Limits for Gram assembly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    /// Jacobian working set, in units of full per-point Jacobians.
    pub batch_points: usize,
    /// Upper bound on the Jacobian working set in bytes.
    pub jacobian_bytes: u64,
    /// Refuse any single allocation above this many bytes.
    pub memory_cap_bytes: u64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            batch_points: 64,
            jacobian_bytes: 512 << 20,
            memory_cap_bytes: 4 << 30,
        }
    }
}

impl KernelConfig {
    fn guard(&self, what: &str, elems: u128) -> Result<()> {
        let bytes = elems.saturating_mul(8);
        if bytes > self.memory_cap_bytes as u128 {
            return Err(Error::MemoryCap {
                what: what.to_string(),
                requested_bytes: u64::try_from(bytes).unwrap_or(u64::MAX),
                cap_bytes: self.memory_cap_bytes,
            });
        }
        Ok(())
    }
}

/// `N1·O × N2·O` eNTK Gram; block `(i, j)` is `Θ(X1[i], X2[j])`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntkBlockMatrix {
    n1: usize,
    n2: usize,
    o: usize,
    data: Matrix,
}

impl EntkBlockMatrix {
    pub fn from_matrix(data: Matrix, o: usize) -> Result<Self> {
        if o == 0 || data.rows() % o != 0 || data.cols() % o != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{:?} is not a grid of {o}x{o} blocks",
                data.shape()
            )));
        }
        Ok(Self {
            n1: data.rows() / o,
            n2: data.cols() / o,
            o,
            data,
        })
    }

    pub fn n1(&self) -> usize {
        self.n1
    }

    pub fn n2(&self) -> usize {
        self.n2
    }

    pub fn output_dim(&self) -> usize {
        self.o
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn block(&self, i: usize, j: usize) -> Matrix {
        let o = self.o;
        Matrix::from_fn(o, o, |a, b| self.data.get(i * o + a, j * o + b))
    }

    /// Symmetric view; fails unless the Gram is square and symmetric.
    pub fn symmetric(&self) -> Result<SymmetricMatrix> {
        SymmetricMatrix::new(self.data.clone())
    }
}

fn forward_all(net: &Network, x: &Matrix) -> Result<Vec<ForwardTrace>> {
    if x.rows() == 0 {
        return Err(Error::EmptySet);
    }
    (0..x.rows())
        .into_par_iter()
        .map(|i| net.forward(x.row(i)))
        .collect()
}

/// Jacobian columns `cols` for every trace, stacked point-major.
fn stacked_columns(net: &Network, traces: &[ForwardTrace], cols: Range<usize>) -> Result<Matrix> {
    let o = net.output_dim();
    let width = cols.len();
    let mut buf = vec![0.0; traces.len() * o * width];
    buf.par_chunks_mut(o * width)
        .zip(traces.par_iter())
        .try_for_each(|(dst, t)| net.write_jacobian_columns(t, cols.clone(), dst))?;
    Matrix::from_vec(traces.len() * o, width, buf)
}

/// Columns per Jacobian chunk so that `rows` stacked rows fit the working set.
fn chunk_width(net: &Network, rows: usize, cfg: &KernelConfig) -> usize {
    let p = net.param_count() as u64;
    let per_point = net.output_dim() as u64 * p * 8;
    let budget = cfg
        .jacobian_bytes
        .min(per_point.saturating_mul(cfg.batch_points.max(1) as u64));
    ((budget / (rows.max(1) as u64 * 8)) as usize).clamp(1, p as usize)
}

/// eNTK Gram between the rows of `x1` and `x2`.
///
/// Jacobians are materialized a column slice at a time and accumulated as
/// `Σ_c J1_c·J2_cᵀ`. When `x1` and `x2` coincide only the upper triangle is
/// formed and then mirrored.
pub fn entk_matrix(
    net: &Network,
    x1: &Matrix,
    x2: &Matrix,
    cfg: &KernelConfig,
) -> Result<EntkBlockMatrix> {
    if std::ptr::eq(x1, x2) || x1 == x2 {
        return entk_gram(net, x1, cfg);
    }
    let o = net.output_dim();
    let (r1, r2) = (x1.rows() * o, x2.rows() * o);
    cfg.guard("eNTK Gram", r1 as u128 * r2 as u128)?;
    let t1 = forward_all(net, x1)?;
    let t2 = forward_all(net, x2)?;
    let p = net.param_count();
    let width = chunk_width(net, r1 + r2, cfg);
    cfg.guard("Jacobian chunk", (r1 + r2) as u128 * width as u128)?;
    let mut out = Matrix::zeros(r1, r2);
    let mut start = 0;
    while start < p {
        let cols = start..(start + width).min(p);
        let j1 = stacked_columns(net, &t1, cols.clone())?;
        let j2 = stacked_columns(net, &t2, cols.clone())?;
        linalg::gemm_nt_acc(&j1, &j2, &mut out, 1.0);
        start = cols.end;
    }
    EntkBlockMatrix::from_matrix(out, o)
}

/// Symmetric eNTK Gram of the rows of `x`.
pub fn entk_gram(net: &Network, x: &Matrix, cfg: &KernelConfig) -> Result<EntkBlockMatrix> {
    let o = net.output_dim();
    let r = x.rows() * o;
    cfg.guard("eNTK Gram", r as u128 * r as u128)?;
    let traces = forward_all(net, x)?;
    let p = net.param_count();
    let width = chunk_width(net, r, cfg);
    cfg.guard("Jacobian chunk", r as u128 * width as u128)?;
    let mut out = Matrix::zeros(r, r);
    let mut start = 0;
    while start < p {
        let cols = start..(start + width).min(p);
        let j = stacked_columns(net, &traces, cols.clone())?;
        linalg::syrk_upper_acc(&j, &mut out, SYRK_BLOCK);
        start = cols.end;
    }
    linalg::mirror_upper(&mut out);
    EntkBlockMatrix::from_matrix(out, o)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PntkMode {
    /// `v = 𝟙/√O`.
    #[default]
    SumOfLogits,
    /// `v = e_i`.
    SingleLogit(usize),
}

impl PntkMode {
    pub fn readout(self, o: usize) -> Result<Vec<f64>> {
        match self {
            PntkMode::SumOfLogits => Ok(vec![1.0 / (o as f64).sqrt(); o]),
            PntkMode::SingleLogit(i) if i < o => {
                let mut v = vec![0.0; o];
                v[i] = 1.0;
                Ok(v)
            }
            PntkMode::SingleLogit(i) => Err(Error::OutOfRange(format!(
                "logit {i} of a network with {o} outputs"
            ))),
        }
    }

    pub fn label(self) -> String {
        match self {
            PntkMode::SumOfLogits => "sum_of_logits".into(),
            PntkMode::SingleLogit(i) => format!("single_logit({i})"),
        }
    }
}

/// `∇(vᵀf)(x1) · ∇(vᵀf)(x2)`.
pub fn pntk(net: &Network, x1: &[f64], x2: &[f64], mode: PntkMode) -> Result<f64> {
    let v = mode.readout(net.output_dim())?;
    let g1 = net.grad_scalar(x1, &v)?;
    let g2 = net.grad_scalar(x2, &v)?;
    Ok(linalg::dot(&g1, &g2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PntkMatrix {
    mode: PntkMode,
    data: Matrix,
}

impl PntkMatrix {
    pub fn new(data: Matrix, mode: PntkMode) -> Self {
        Self { mode, data }
    }

    pub fn n1(&self) -> usize {
        self.data.rows()
    }

    pub fn n2(&self) -> usize {
        self.data.cols()
    }

    pub fn mode(&self) -> PntkMode {
        self.mode
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn into_matrix(self) -> Matrix {
        self.data
    }

    pub fn symmetric(&self) -> Result<SymmetricMatrix> {
        SymmetricMatrix::new(self.data.clone())
    }

    /// `Θ̂ ⊗ I_O`, comparable entrywise with an eNTK Gram.
    pub fn kron_lift(&self, o: usize) -> EntkBlockMatrix {
        EntkBlockMatrix {
            n1: self.n1(),
            n2: self.n2(),
            o,
            data: self.data.kron_identity(o),
        }
    }
}

/// One reverse sweep per row: `N × P` matrix of `∇(vᵀf)`.
fn readout_gradients(net: &Network, x: &Matrix, v: &[f64], cfg: &KernelConfig) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::EmptySet);
    }
    let p = net.param_count();
    cfg.guard("pNTK gradients", x.rows() as u128 * p as u128)?;
    let mut buf = vec![0.0; x.rows() * p];
    buf.par_chunks_mut(p)
        .enumerate()
        .try_for_each(|(i, dst)| {
            let g = net.grad_scalar(x.row(i), v)?;
            dst.copy_from_slice(&g);
            Ok::<_, Error>(())
        })?;
    Matrix::from_vec(x.rows(), p, buf)
}

/// pNTK Gram. Gradients are computed once per point, then paired by dot products.
pub fn pntk_matrix(
    net: &Network,
    x1: &Matrix,
    x2: &Matrix,
    mode: PntkMode,
    cfg: &KernelConfig,
) -> Result<PntkMatrix> {
    let v = mode.readout(net.output_dim())?;
    let symmetric = std::ptr::eq(x1, x2) || x1 == x2;
    cfg.guard("pNTK Gram", x1.rows() as u128 * x2.rows() as u128)?;
    let g1 = readout_gradients(net, x1, &v, cfg)?;
    let data = if symmetric {
        let mut out = Matrix::zeros(x1.rows(), x1.rows());
        linalg::syrk_upper_acc(&g1, &mut out, SYRK_BLOCK);
        linalg::mirror_upper(&mut out);
        out
    } else {
        let g2 = readout_gradients(net, x2, &v, cfg)?;
        let mut out = Matrix::zeros(x1.rows(), x2.rows());
        linalg::gemm_nt_acc(&g1, &g2, &mut out, 1.0);
        out
    };
    Ok(PntkMatrix { mode, data })
}

/// The two terms of the eNTK of a network with a dense readout.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadoutTerms {
    /// `θ_L·Θ_g(x1, x2)·θ_Lᵀ`: contribution of every layer below the readout.
    pub body: Matrix,
    /// `g(x1)ᵀg(x2)`: the readout layer's contribution is this times `I_O`.
    pub readout_scale: f64,
}

impl ReadoutTerms {
    pub fn total(&self) -> Matrix {
        let mut m = self.body.clone();
        for a in 0..m.rows() {
            m.set(a, a, m.get(a, a) + self.readout_scale);
        }
        m
    }
}

/// Decompose `Θ(x1, x2)` through the penultimate representation `g`.
/// `Θ_g` is assembled from the Jacobian of `g` itself.
pub fn readout_terms(net: &Network, x1: &[f64], x2: &[f64]) -> Result<ReadoutTerms> {
    if net.depth() < 2 {
        return Err(Error::Unsupported(
            "readout decomposition needs a penultimate layer (depth >= 2)".into(),
        ));
    }
    let jg1 = net.body_jacobian(x1)?;
    let jg2 = net.body_jacobian(x2)?;
    let theta_g = jg1.matmul_t(&jg2)?;
    let w = net.weight(net.depth());
    let body = w.matmul(&theta_g)?.matmul_t(w)?;
    let g1 = net.forward(x1)?;
    let g2 = net.forward(x2)?;
    Ok(ReadoutTerms {
        body,
        readout_scale: linalg::dot(g1.penultimate(), g2.penultimate()),
    })
}

pub fn readout_decomposition(net: &Network, x1: &[f64], x2: &[f64]) -> Result<Matrix> {
    Ok(readout_terms(net, x1, x2)?.total())
}

/// `Θ⁽ˡ⁾(x1, x2)` for `l = 1..=L`, the eNTK of `fˡ` with respect to
/// `W⁽¹⁾..W⁽ˡ⁾`, built by
/// `Θ⁽ˡ⁺¹⁾ = V(x1)·Θ⁽ˡ⁾·V(x2)ᵀ + (fˡ(x1)·fˡ(x2))·diag(φ'(h⁽ˡ⁺¹⁾(x1)) ⊙ φ'(h⁽ˡ⁺¹⁾(x2)))`
/// with `V(x) = diag(φ'(h⁽ˡ⁺¹⁾(x)))·W⁽ˡ⁺¹⁾` and `φ' = 1` on the readout.
pub fn recursive_entk(net: &Network, x1: &[f64], x2: &[f64]) -> Result<Vec<Matrix>> {
    let t1 = net.forward(x1)?;
    let t2 = net.forward(x2)?;
    let act = net.activation();
    let depth = net.depth();
    let slope = |t: &ForwardTrace, l: usize| -> Vec<f64> {
        if l == depth {
            vec![1.0; t.pre[l - 1].len()]
        } else {
            t.pre[l - 1].iter().map(|&h| act.derivative(h)).collect()
        }
    };
    let mut layers: Vec<Matrix> = Vec::with_capacity(depth);
    for l in 1..=depth {
        let d1 = slope(&t1, l);
        let d2 = slope(&t2, l);
        let k = linalg::dot(&t1.post[l - 1], &t2.post[l - 1]);
        let mut theta = match layers.last() {
            None => Matrix::zeros(d1.len(), d2.len()),
            Some(prev) => {
                let w = net.weight(l);
                let v1 = Matrix::from_fn(w.rows(), w.cols(), |i, j| d1[i] * w.get(i, j));
                let v2 = Matrix::from_fn(w.rows(), w.cols(), |i, j| d2[i] * w.get(i, j));
                v1.matmul(prev)?.matmul_t(&v2)?
            }
        };
        for i in 0..d1.len() {
            theta.set(i, i, theta.get(i, i) + k * d1[i] * d2[i]);
        }
        layers.push(theta);
    }
    Ok(layers)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Entk,
    Pntk,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub kind: KernelKind,
    pub n: u64,
    pub o: u64,
    pub element_bytes: u64,
    pub kernel_bytes: u64,
    /// One JVP per kernel entry: `(N·O)²` for the eNTK, `N²` for the pNTK.
    pub jvp_count: u64,
    /// The count as quoted in the literature for full-data regression
    /// (`25×10¹⁰` eNTK / `25×10⁸` pNTK at `N = 50000, O = 10`).
    pub jvp_count_quoted_convention: u64,
    /// Some product overflowed `u64` and was clamped.
    pub saturated: bool,
}

pub fn resource_estimate(
    n: u64,
    o: u64,
    element_bytes: u64,
    kind: KernelKind,
) -> Result<ResourceEstimate> {
    if n == 0 || o == 0 || element_bytes == 0 {
        return Err(Error::InvalidConfig(
            "N, O and element_bytes must be positive".into(),
        ));
    }
    let side = match kind {
        KernelKind::Entk => n.checked_mul(o),
        KernelKind::Pntk => Some(n),
    };
    let entries = side.and_then(|s| s.checked_mul(s));
    let bytes = entries.and_then(|e| e.checked_mul(element_bytes));
    let saturated = bytes.is_none();
    let entries = entries.unwrap_or(u64::MAX);
    Ok(ResourceEstimate {
        kind,
        n,
        o,
        element_bytes,
        kernel_bytes: bytes.unwrap_or(u64::MAX),
        jvp_count: entries,
        jvp_count_quoted_convention: entries,
        saturated,
    })
}

/// Sidecar written next to every persisted kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub kind: KernelKind,
    pub mode: Option<String>,
    #[serde(rename = "N1")]
    pub n1: usize,
    #[serde(rename = "N2")]
    pub n2: usize,
    #[serde(rename = "O")]
    pub o: usize,
    pub net_checkpoint_hash: String,
    pub epoch: Option<usize>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Write `m` in `NTKM` format at `path` and `meta` as `<path>.json`.
pub fn save_kernel(path: &Path, m: &Matrix, meta: &KernelMeta) -> Result<()> {
    linalg::save_matrix(path, m)?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Format(format!("kernel sidecar: {e}")))?;
    let mut f = std::fs::File::create(sidecar_path(path))?;
    f.write_all(json.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_kernel(path: &Path) -> Result<(Matrix, KernelMeta)> {
    let m = linalg::load_matrix(path)?;
    let meta: KernelMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)
        .map_err(|e| Error::Format(format!("kernel sidecar: {e}")))?;
    Ok((m, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, Init, NetworkSpec, Parameterization};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Leaky units keep every layer alive at these tiny widths.
    fn net(o: usize, widths: Vec<usize>, seed: u64) -> Network {
        let spec = NetworkSpec {
            activation: Activation::LeakyRelu { slope: 0.1 },
            ..NetworkSpec::relu(4, widths, o, seed)
        };
        Network::new(spec).unwrap()
    }

    fn inputs(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn rel_fro(a: &Matrix, b: &Matrix) -> f64 {
        linalg::frobenius_norm(&a.sub(b).unwrap()) / linalg::frobenius_norm(b)
    }

    #[test]
    fn single_output_entk_equals_pntk() {
        let n = net(1, vec![8, 8], 1);
        let x = inputs(2, 4, 2);
        let b = entk_block(&n, x.row(0), x.row(1)).unwrap();
        assert_eq!(b.shape(), (1, 1));
        let p = pntk(&n, x.row(0), x.row(1), PntkMode::SumOfLogits).unwrap();
        assert!((b.get(0, 0) - p).abs() <= 1e-14 * p.abs().max(1.0));
    }

    #[test]
    fn depth_one_block_is_diagonal() {
        let n = net(3, vec![], 4);
        let x = inputs(2, 4, 5);
        let b = entk_block(&n, x.row(0), x.row(1)).unwrap();
        let k = linalg::dot(x.row(0), x.row(1));
        for a in 0..3 {
            for c in 0..3 {
                if a == c {
                    assert!((b.get(a, c) - k).abs() < 1e-14);
                } else {
                    assert_eq!(b.get(a, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn block_symmetry_under_swap() {
        let n = net(4, vec![10, 9], 6);
        let x = inputs(2, 4, 7);
        let a = entk_block(&n, x.row(0), x.row(1)).unwrap();
        let b = entk_block(&n, x.row(1), x.row(0)).unwrap();
        assert!(rel_fro(&a, &b.transpose()) < 1e-14);
    }

    #[test]
    fn single_logit_picks_diagonal_entry() {
        let n = net(3, vec![6, 6], 8);
        let x = inputs(2, 4, 9);
        let b = entk_block(&n, x.row(0), x.row(1)).unwrap();
        let p = pntk(&n, x.row(0), x.row(1), PntkMode::SingleLogit(1)).unwrap();
        assert!((p - b.get(1, 1)).abs() <= 1e-14 * p.abs().max(1.0));
        assert!(matches!(
            pntk(&n, x.row(0), x.row(1), PntkMode::SingleLogit(3)),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn gram_blocks_match_pointwise_blocks() {
        let n = net(3, vec![7, 5], 10);
        let x = inputs(5, 4, 11);
        let cfg = KernelConfig {
            jacobian_bytes: 3 * 15 * 8 * 7,
            ..KernelConfig::default()
        };
        let g = entk_gram(&n, &x, &cfg).unwrap();
        assert_eq!(g.matrix().shape(), (15, 15));
        for i in 0..5 {
            for j in 0..5 {
                let b = entk_block(&n, x.row(i), x.row(j)).unwrap();
                assert!(rel_fro(&g.block(i, j), &b) < 1e-12);
            }
        }
        let y = inputs(3, 4, 12);
        let cross = entk_matrix(&n, &x, &y, &cfg).unwrap();
        assert_eq!(cross.matrix().shape(), (15, 9));
        for i in 0..5 {
            for j in 0..3 {
                let b = entk_block(&n, x.row(i), y.row(j)).unwrap();
                assert!(rel_fro(&cross.block(i, j), &b) < 1e-12);
            }
        }
        let sym = g.symmetric().unwrap();
        let (max, min) = linalg::sym_eig_extremes(&sym).unwrap();
        assert!(min >= -1e-9 * max);
    }

    #[test]
    fn pntk_gram_matches_pointwise() {
        let n = net(4, vec![9, 9], 13);
        let x = inputs(6, 4, 14);
        let cfg = KernelConfig::default();
        for mode in [PntkMode::SumOfLogits, PntkMode::SingleLogit(2)] {
            let g = pntk_matrix(&n, &x, &x, mode, &cfg).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    let p = pntk(&n, x.row(i), x.row(j), mode).unwrap();
                    assert!((g.matrix().get(i, j) - p).abs() <= 1e-12 * p.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn memory_cap_is_enforced() {
        let n = net(10, vec![8], 1);
        let x = inputs(100, 4, 2);
        let cfg = KernelConfig {
            memory_cap_bytes: 1000,
            ..KernelConfig::default()
        };
        match entk_gram(&n, &x, &cfg) {
            Err(Error::MemoryCap {
                requested_bytes, ..
            }) => assert_eq!(requested_bytes, 1000 * 1000 * 8),
            other => panic!("expected MemoryCap, got {other:?}"),
        }
    }

    #[test]
    fn readout_decomposition_needs_depth_two() {
        let n = net(2, vec![], 1);
        let x = inputs(2, 4, 2);
        assert!(matches!(
            readout_decomposition(&n, x.row(0), x.row(1)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn readout_layer_alone_is_scaled_identity() {
        let n = net(5, vec![8, 6], 3);
        let x = inputs(2, 4, 4);
        let last = entk_block_layers(&n, x.row(0), x.row(1), 3..4).unwrap();
        let terms = readout_terms(&n, x.row(0), x.row(1)).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let expected = if a == b { terms.readout_scale } else { 0.0 };
                assert!((last.get(a, b) - expected).abs() < 1e-14);
            }
        }
        let body = entk_block_layers(&n, x.row(0), x.row(1), 1..3).unwrap();
        assert!(rel_fro(&body, &terms.body) < 1e-12);
        let same = readout_terms(&n, x.row(0), x.row(0)).unwrap();
        assert!(same.readout_scale >= 0.0);
    }

    #[test]
    fn recursion_first_layer_bounds_and_zero_inputs() {
        let n = net(3, vec![6, 5], 5);
        let x = inputs(2, 4, 6);
        let layers = recursive_entk(&n, x.row(0), x.row(1)).unwrap();
        let c1: f64 = x.row(0).iter().zip(x.row(1)).map(|(a, b)| (a * b).abs()).sum();
        let t1 = &layers[0];
        for i in 0..t1.rows() {
            for j in 0..t1.cols() {
                if i != j {
                    assert_eq!(t1.get(i, j), 0.0);
                }
            }
            assert!(t1.get(i, i).abs() <= c1 + 1e-15);
        }
        let zero = [0.0; 4];
        for t in recursive_entk(&n, &zero, &zero).unwrap() {
            assert!(t.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn recursion_reaches_entk_block() {
        for act in [Activation::LeakyRelu { slope: 0.1 }, Activation::Gelu] {
            let spec = NetworkSpec {
                input_dim: 4,
                hidden_widths: vec![7, 6, 5],
                output_dim: 3,
                activation: act,
                init: Init::HeFanInGaussian,
                parameterization: Parameterization::Standard,
                seed: 9,
            };
            let n = Network::new(spec).unwrap();
            let x = inputs(2, 4, 10);
            let layers = recursive_entk(&n, x.row(0), x.row(1)).unwrap();
            let b = entk_block(&n, x.row(0), x.row(1)).unwrap();
            assert!(rel_fro(layers.last().unwrap(), &b) < 1e-9);
        }
    }

    #[test]
    fn resource_estimates() {
        let e = resource_estimate(50_000, 10, 8, KernelKind::Entk).unwrap();
        assert_eq!(e.kernel_bytes, 2_000_000_000_000);
        assert_eq!(e.jvp_count, 250_000_000_000);
        let p = resource_estimate(50_000, 10, 8, KernelKind::Pntk).unwrap();
        assert_eq!(p.kernel_bytes, 20_000_000_000);
        assert_eq!(p.jvp_count, 2_500_000_000);
        assert_eq!(e.kernel_bytes, 100 * p.kernel_bytes);
        let one = resource_estimate(1, 1, 4, KernelKind::Entk).unwrap();
        assert_eq!(one.kernel_bytes, 4);
        let big = resource_estimate(u64::MAX / 2, 10, 8, KernelKind::Entk).unwrap();
        assert!(big.saturated);
        assert_eq!(big.kernel_bytes, u64::MAX);
    }

    #[test]
    fn kernel_persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.ntkm");
        let m = inputs(3, 3, 1);
        let meta = KernelMeta {
            kind: KernelKind::Pntk,
            mode: Some("sum_of_logits".into()),
            n1: 3,
            n2: 3,
            o: 10,
            net_checkpoint_hash: "abc".into(),
            epoch: Some(0),
        };
        save_kernel(&path, &m, &meta).unwrap();
        let (back, back_meta) = load_kernel(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back_meta, meta);
        let json: serde_json::Value =
            serde_json::from_slice(&std::fs::read(sidecar_path(&path)).unwrap()).unwrap();
        for key in ["kind", "mode", "N1", "N2", "O", "net_checkpoint_hash", "epoch"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
