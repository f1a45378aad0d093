//! Pool-based active learning with a look-ahead acquisition function.
//!
//! Acquisition functional (`lookahead-v1`): each candidate `x` is given the
//! current network's argmax label, and its score is the Frobenius norm of
//! the change in kernel-regression predictions on a reference set when
//! `(x, label)` is added to the labeled set. The change is computed from a
//! bordered solve against the cached training factorization:
//!
//! `Δ = (K_rx − K_rD·K⁻¹·K_Dx) · S⁻¹ · (r_x − K_xD·K⁻¹·R)`,
//! `S = K_xx − K_xD·K⁻¹·K_Dx`,
//!
//! where `R` and `r_x` are the (centered) targets.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor, Matrix, SymmetricMatrix};
use crate::metrics::csv_err;
use crate::net::{self, argmax, Network, NetworkSpec, TrainConfig};
use crate::ntk::{self, KernelConfig, KernelKind, PntkMode};
use crate::regress::Jitter;

/// Version tag of the acquisition functional, emitted with every trace.
pub const ACQUISITION_POLICY: &str =
    "lookahead-v1: argmax pseudo-label; score = ||delta kernel-regression predictions on ref set||_F";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    Pntk(PntkMode),
    Entk,
    /// Seeded uniform noise scores.
    Random,
}

impl Acquisition {
    pub fn label(self) -> String {
        match self {
            Acquisition::Pntk(m) => format!("pntk[{}]", m.label()),
            Acquisition::Entk => "entk".into(),
            Acquisition::Random => "random".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookaheadOptions {
    pub jitter: Jitter,
    pub center_with_f0: bool,
    pub kernel: KernelConfig,
}

impl Default for LookaheadOptions {
    fn default() -> Self {
        Self {
            jitter: Jitter::default(),
            center_with_f0: true,
            kernel: KernelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub scores: Vec<f64>,
    /// Candidates whose Schur complement needed extra jitter.
    pub flagged: Vec<bool>,
    /// Jitter on the labeled Gram.
    pub jitter: f64,
}

/// Gram over `[labeled; pool; ref]` rows plus the bookkeeping to slice it.
struct UnionGram {
    k: Matrix,
    /// Rows per point: 1 for the pNTK, `O` for the eNTK.
    s: usize,
    n_lab: usize,
    n_pool: usize,
    n_ref: usize,
}

impl UnionGram {
    fn build(
        net: &Network,
        labeled: &Matrix,
        pool: &Matrix,
        reference: &Matrix,
        kernel: Acquisition,
        cfg: &KernelConfig,
    ) -> Result<Self> {
        let z = stack_rows(&[labeled, pool, reference])?;
        let (k, s) = match kernel {
            Acquisition::Pntk(mode) => (ntk::pntk_matrix(net, &z, &z, mode, cfg)?.into_matrix(), 1),
            Acquisition::Entk => (ntk::entk_gram(net, &z, cfg)?.into_matrix(), net.output_dim()),
            Acquisition::Random => {
                return Err(Error::Unsupported("random acquisition has no kernel".into()))
            }
        };
        Ok(Self {
            k,
            s,
            n_lab: labeled.rows(),
            n_pool: pool.rows(),
            n_ref: reference.rows(),
        })
    }

    fn lab(&self) -> std::ops::Range<usize> {
        0..self.n_lab
    }

    fn pool(&self) -> std::ops::Range<usize> {
        self.n_lab..self.n_lab + self.n_pool
    }

    fn reference(&self) -> std::ops::Range<usize> {
        let start = self.n_lab + self.n_pool;
        start..start + self.n_ref
    }

    /// Kernel rows of points `rows` against points `cols`.
    fn block(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        let s = self.s;
        Matrix::from_fn(rows.len() * s, cols.len() * s, |r, c| {
            self.k
                .get(rows[r / s] * s + r % s, cols[c / s] * s + c % s)
        })
    }
}

fn stack_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let d = parts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != d {
            return Err(Error::ShapeMismatch("row blocks differ in width".into()));
        }
        data.extend_from_slice(p.as_slice());
        rows += p.rows();
    }
    Matrix::from_vec(rows, d, data)
}

/// Targets in kernel layout: `N × O` for a scalar kernel, `N·O × 1` for a block kernel.
fn kernel_layout(r: &Matrix, s: usize) -> Matrix {
    if s == 1 {
        r.clone()
    } else {
        Matrix::from_vec(r.rows() * r.cols(), 1, r.as_slice().to_vec()).expect("same length")
    }
}

/// `Y − f0` (or `Y`) for `inputs` labeled `labels`.
fn residuals(net: &Network, inputs: &Matrix, labels: &[usize], center: bool) -> Result<Matrix> {
    let y = crate::data::one_hot(labels, net.output_dim());
    if center {
        y.sub(&net.outputs(inputs)?)
    } else {
        Ok(y)
    }
}

fn pseudo_labels(net: &Network, pool: &Matrix) -> Result<Vec<usize>> {
    (0..pool.rows())
        .map(|i| Ok(argmax(&net.output(pool.row(i))?)))
        .collect()
}

fn check_inputs(net: &Network, labeled: &LabeledSet, pool: &Matrix, reference: &Matrix) -> Result<()> {
    if labeled.is_empty() || pool.rows() == 0 || reference.rows() == 0 {
        return Err(Error::EmptySet);
    }
    for d in [labeled.input_dim(), pool.cols(), reference.cols()] {
        if d != net.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {d} features, network expects {}",
                net.input_dim()
            )));
        }
    }
    if labeled.num_classes() != net.output_dim() {
        return Err(Error::ShapeMismatch("class count differs from network outputs".into()));
    }
    Ok(())
}

/// Look-ahead scores for every row of `pool`, via one factorization of
/// the labeled Gram and a bordered solve per candidate.
pub fn lookahead_scores(
    net: &Network,
    labeled: &LabeledSet,
    pool: &Matrix,
    reference: &Matrix,
    kernel: Acquisition,
    opts: &LookaheadOptions,
) -> Result<Scores> {
    check_inputs(net, labeled, pool, reference)?;
    let g = UnionGram::build(net, labeled.inputs(), pool, reference, kernel, &opts.kernel)?;
    let s = g.s;
    let lab: Vec<usize> = g.lab().collect();
    let cand: Vec<usize> = g.pool().collect();
    let refs: Vec<usize> = g.reference().collect();

    let k_dd = SymmetricMatrix::new(g.block(&lab, &lab))?;
    let jitter = opts.jitter.resolve(&k_dd);
    let chol = CholeskyFactor::new(&k_dd, jitter)?;
    let jitter = chol.jitter();

    let r_d = kernel_layout(
        &residuals(net, labeled.inputs(), labeled.labels(), opts.center_with_f0)?,
        s,
    );
    let alpha = chol.solve(&r_d)?;
    let k_dp = g.block(&lab, &cand);
    let a_dp = chol.solve(&k_dp)?;
    // K_rP − K_rD·K⁻¹·K_DP for all candidates at once.
    let mut b = g.block(&refs, &cand);
    linalg::gemm_nt_acc(&g.block(&refs, &lab), &a_dp.transpose(), &mut b, -1.0);
    let k_pd = k_dp.transpose();
    let fit_p = k_pd.matmul(&alpha)?;
    let r_p = kernel_layout(
        &residuals(net, pool, &pseudo_labels(net, pool)?, opts.center_with_f0)?,
        s,
    );

    let results: Vec<(f64, bool)> = (0..cand.len())
        .into_par_iter()
        .map(|c| {
            let rows = c * s..(c + 1) * s;
            // S = K_xx + jI − K_xD·K⁻¹·K_Dx.
            let mut schur = Matrix::from_fn(s, s, |a, bb| {
                let kxx = g.k.get(cand[c] * s + a, cand[c] * s + bb);
                let corr = linalg::dot(k_pd.row(c * s + a), &column(&a_dp, c * s + bb));
                kxx - corr + if a == bb { jitter } else { 0.0 }
            });
            symmetrize(&mut schur);
            let u = Matrix::from_fn(s, r_p.cols(), |a, k| {
                r_p.get(c * s + a, k) - fit_p.get(c * s + a, k)
            });
            let (w, flagged) = schur_solve(schur, &u)?;
            let bx = Matrix::from_fn(b.rows(), s, |i, a| b.get(i, rows.start + a));
            Ok((linalg::frobenius_norm(&bx.matmul(&w)?), flagged))
        })
        .collect::<Result<_>>()?;
    Ok(Scores {
        scores: results.iter().map(|r| r.0).collect(),
        flagged: results.iter().map(|r| r.1).collect(),
        jitter,
    })
}

fn column(m: &Matrix, j: usize) -> Vec<f64> {
    (0..m.rows()).map(|i| m.get(i, j)).collect()
}

fn symmetrize(m: &mut Matrix) {
    for i in 0..m.rows() {
        for j in i + 1..m.cols() {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}

/// `S⁻¹·u`; flags the candidate when `S` needed jitter to factor.
fn schur_solve(schur: Matrix, u: &Matrix) -> Result<(Matrix, bool)> {
    let s = SymmetricMatrix::new(schur)?;
    let chol = CholeskyFactor::new(&s, 0.0)?;
    Ok((chol.solve(u)?, chol.jitter() > 0.0))
}

/// Reference implementation: refit on `D ∪ {x}` from scratch for every
/// candidate and diff the reference predictions.
pub fn lookahead_scores_from_scratch(
    net: &Network,
    labeled: &LabeledSet,
    pool: &Matrix,
    reference: &Matrix,
    kernel: Acquisition,
    opts: &LookaheadOptions,
) -> Result<Scores> {
    check_inputs(net, labeled, pool, reference)?;
    let g = UnionGram::build(net, labeled.inputs(), pool, reference, kernel, &opts.kernel)?;
    let s = g.s;
    let lab: Vec<usize> = g.lab().collect();
    let refs: Vec<usize> = g.reference().collect();
    let k_dd = SymmetricMatrix::new(g.block(&lab, &lab))?;
    let jitter = CholeskyFactor::new(&k_dd, opts.jitter.resolve(&k_dd))?.jitter();

    let r_lab = residuals(net, labeled.inputs(), labeled.labels(), opts.center_with_f0)?;
    let base = g
        .block(&refs, &lab)
        .matmul(&linalg::solve_psd(&k_dd, &kernel_layout(&r_lab, s), jitter)?)?;
    let pseudo = pseudo_labels(net, pool)?;
    let r_pool = residuals(net, pool, &pseudo, opts.center_with_f0)?;

    let mut scores = Vec::with_capacity(pool.rows());
    let mut flagged = Vec::with_capacity(pool.rows());
    for (c, x) in g.pool().enumerate() {
        let mut aug = lab.clone();
        aug.push(x);
        let k = SymmetricMatrix::new(g.block(&aug, &aug))?;
        let mut r = r_lab.as_slice().to_vec();
        r.extend_from_slice(r_pool.row(c));
        let r = Matrix::from_vec(aug.len(), r_lab.cols(), r)?;
        let chol = CholeskyFactor::new(&k, jitter)?;
        let pred = g.block(&refs, &aug).matmul(&chol.solve(&kernel_layout(&r, s))?)?;
        scores.push(linalg::frobenius_norm(&pred.sub(&base)?));
        flagged.push(chol.jitter() > jitter);
    }
    Ok(Scores {
        scores,
        flagged,
        jitter,
    })
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ALConfig {
    pub initial_labeled: usize,
    pub per_cycle: usize,
    pub cycles: usize,
    pub acquisition: Acquisition,
    /// Candidates scored per cycle (a seeded subset of the pool); 0 = all.
    pub candidate_pool_cap: usize,
    /// Reference points drawn from the test inputs; their labels are unused.
    pub ref_set_size: usize,
    /// Epochs for the initial fit and for each warm-started retrain.
    pub retrain_epochs: usize,
    pub seed: u64,
    pub net: NetworkSpec,
    pub train: TrainConfig,
    pub lookahead: LookaheadOptions,
}

impl ALConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_cycle == 0 {
            return Err(Error::InvalidConfig("per_cycle must be >= 1".into()));
        }
        if self.initial_labeled == 0 {
            return Err(Error::InvalidConfig("initial_labeled must be >= 1".into()));
        }
        if self.ref_set_size == 0 {
            return Err(Error::InvalidConfig("ref_set_size must be >= 1".into()));
        }
        self.net.validate()?;
        self.train.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub labeled_count: usize,
    pub accuracy: f64,
    pub acq_seconds: f64,
    /// Pool-set row indices acquired this cycle.
    pub selected: Vec<usize>,
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ALTrace {
    pub acquisition: Acquisition,
    pub policy: String,
    /// Cycle 0 is the initial fit.
    pub records: Vec<CycleRecord>,
    pub pool_exhausted: bool,
}

impl ALTrace {
    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.accuracy)
    }

    pub fn total_acq_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.acq_seconds).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cycle", "labeled_count", "accuracy", "acq_seconds", "kernel_kind"])
            .map_err(csv_err)?;
        let kind = self.acquisition.label();
        for r in &self.records {
            out.write_record([
                r.cycle.to_string(),
                r.labeled_count.to_string(),
                r.accuracy.to_string(),
                r.acq_seconds.to_string(),
                kind.clone(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Simulate acquisition over `pool_set` (labels revealed on acquisition),
/// measuring network accuracy on `test_set` after every warm-started retrain.
pub fn run_al(cfg: &ALConfig, pool_set: &LabeledSet, test_set: &LabeledSet) -> Result<ALTrace> {
    cfg.validate()?;
    if cfg.initial_labeled > pool_set.len() {
        return Err(Error::InsufficientData(format!(
            "{} initial labels from a pool of {}",
            cfg.initial_labeled,
            pool_set.len()
        )));
    }
    if test_set.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pool_set.len()).collect();
    order.shuffle(&mut rng);
    let mut labeled: Vec<usize> = order[..cfg.initial_labeled].to_vec();
    let mut unlabeled: Vec<usize> = order[cfg.initial_labeled..].to_vec();
    unlabeled.sort_unstable();

    let mut ref_rows: Vec<usize> = (0..test_set.len()).collect();
    ref_rows.shuffle(&mut rng);
    ref_rows.truncate(cfg.ref_set_size.min(test_set.len()));
    let reference = test_set.subset(&ref_rows)?.inputs().clone();

    let train_cfg = TrainConfig {
        epochs: cfg.retrain_epochs,
        checkpoints: Vec::new(),
        ..cfg.train.clone()
    };
    let fit = |net: Network, labeled: &[usize], cycle: usize| -> Result<Network> {
        let set = pool_set.subset(labeled)?;
        let tc = TrainConfig {
            seed: train_cfg.seed ^ (cycle as u64).wrapping_mul(0xA24B_AED4_963E_E407),
            ..train_cfg.clone()
        };
        Ok(net::sgd_train(net, &set, &tc)?.network)
    };

    let mut network = fit(Network::new(cfg.net.clone())?, &labeled, 0)?;
    let mut records = vec![CycleRecord {
        cycle: 0,
        labeled_count: labeled.len(),
        accuracy: net::accuracy(&network, test_set)?,
        acq_seconds: 0.0,
        selected: Vec::new(),
        flagged: 0,
    }];
    let mut pool_exhausted = false;

    for cycle in 1..=cfg.cycles {
        if unlabeled.is_empty() {
            pool_exhausted = true;
            break;
        }
        let mut candidates = unlabeled.clone();
        if cfg.candidate_pool_cap > 0 && candidates.len() > cfg.candidate_pool_cap {
            candidates.shuffle(&mut rng);
            candidates.truncate(cfg.candidate_pool_cap);
            candidates.sort_unstable();
        }
        let start = Instant::now();
        let (scores, flagged) = match cfg.acquisition {
            Acquisition::Random => ((0..candidates.len()).map(|_| rng.gen::<f64>()).collect(), 0),
            kernel => {
                let lab_set = pool_set.subset(&labeled)?;
                let pool = pool_set.subset(&candidates)?;
                let s = lookahead_scores(
                    &network,
                    &lab_set,
                    pool.inputs(),
                    &reference,
                    kernel,
                    &cfg.lookahead,
                )?;
                let n_flagged = s.flagged.iter().filter(|&&f| f).count();
                (s.scores, n_flagged)
            }
        };
        let picks = top_k(&scores, cfg.per_cycle);
        let acq_seconds = start.elapsed().as_secs_f64();
        let selected: Vec<usize> = picks.iter().map(|&p| candidates[p]).collect();
        unlabeled.retain(|i| !selected.contains(i));
        labeled.extend_from_slice(&selected);
        network = fit(network, &labeled, cycle)?;
        records.push(CycleRecord {
            cycle,
            labeled_count: labeled.len(),
            accuracy: net::accuracy(&network, test_set)?,
            acq_seconds,
            selected,
            flagged,
        });
    }
    if unlabeled.is_empty() && records.len() <= cfg.cycles {
        pool_exhausted = true;
    }
    Ok(ALTrace {
        acquisition: cfg.acquisition,
        policy: ACQUISITION_POLICY.into(),
        records,
        pool_exhausted,
    })
}

/// Kernel kind used by an acquisition, if any.
pub fn acquisition_kernel(a: Acquisition) -> Option<KernelKind> {
    match a {
        Acquisition::Pntk(_) => Some(KernelKind::Pntk),
        Acquisition::Entk => Some(KernelKind::Entk),
        Acquisition::Random => None,
    }
}
