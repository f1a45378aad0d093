//! Kernel regression with the eNTK and the pNTK.
//!
//! Both predictors fit `Y − f0(D)` and add `f0(x)` back when centering is on.
//! Outputs use one row per test point.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor, Matrix, SymmetricMatrix};
use crate::metrics::csv_err;
use crate::net::{argmax, Network};
use crate::ntk::{self, KernelConfig, KernelKind, PntkMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    /// Multiple of `trace(K)/dim`.
    Relative(f64),
    Absolute(f64),
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::Relative(1e-8)
    }
}

impl Jitter {
    pub fn resolve(self, k: &SymmetricMatrix) -> f64 {
        match self {
            Jitter::Relative(c) => c * k.mean_diag().abs(),
            Jitter::Absolute(j) => j,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    pub train_inputs: Matrix,
    /// `N × O` one-hot rows.
    pub train_targets: Matrix,
    pub test_inputs: Matrix,
    pub center_with_f0: bool,
    pub jitter: Jitter,
}

impl RegressionProblem {
    pub fn new(train_inputs: Matrix, train_targets: Matrix, test_inputs: Matrix) -> Result<Self> {
        let p = Self {
            train_inputs,
            train_targets,
            test_inputs,
            center_with_f0: true,
            jitter: Jitter::default(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_inputs.rows() == 0 || self.test_inputs.rows() == 0 {
            return Err(Error::EmptySet);
        }
        if self.train_targets.rows() != self.train_inputs.rows() {
            return Err(Error::CountMismatch(format!(
                "{} training inputs but {} target rows",
                self.train_inputs.rows(),
                self.train_targets.rows()
            )));
        }
        if self.train_inputs.cols() != self.test_inputs.cols() {
            return Err(Error::ShapeMismatch("train and test feature counts differ".into()));
        }
        for i in 0..self.train_targets.rows() {
            let row = self.train_targets.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::InvalidMatrix(format!("target row {i} is not one-hot")));
            }
        }
        Ok(())
    }

    fn check_net(&self, net: &Network) -> Result<()> {
        self.validate()?;
        if net.input_dim() != self.train_inputs.cols() {
            return Err(Error::ShapeMismatch(format!(
                "inputs have {} features, network expects {}",
                self.train_inputs.cols(),
                net.input_dim()
            )));
        }
        if net.output_dim() != self.train_targets.cols() {
            return Err(Error::ShapeMismatch(format!(
                "{} target classes, network has {} outputs",
                self.train_targets.cols(),
                net.output_dim()
            )));
        }
        Ok(())
    }

    /// `(Y − f0(D), f0(X))`, or `(Y, 0)` without centering.
    fn residual_and_offset(&self, net: &Network) -> Result<(Matrix, Matrix)> {
        if self.center_with_f0 {
            let f_train = net.outputs(&self.train_inputs)?;
            let f_test = net.outputs(&self.test_inputs)?;
            Ok((self.train_targets.sub(&f_train)?, f_test))
        } else {
            Ok((
                self.train_targets.clone(),
                Matrix::zeros(self.test_inputs.rows(), self.train_targets.cols()),
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionOutput {
    /// `M × O`.
    pub predictions: Matrix,
    pub labels: Vec<usize>,
    pub kernel_kind: KernelKind,
    pub mode: Option<PntkMode>,
    /// Diagonal jitter actually added to the training Gram.
    pub jitter: f64,
    pub centered: bool,
}

impl RegressionOutput {
    fn new(
        predictions: Matrix,
        kernel_kind: KernelKind,
        mode: Option<PntkMode>,
        jitter: f64,
        centered: bool,
    ) -> Self {
        let labels = (0..predictions.rows())
            .map(|i| argmax(predictions.row(i)))
            .collect();
        Self {
            predictions,
            labels,
            kernel_kind,
            mode,
            jitter,
            centered,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let o = self.predictions.cols();
        let mut header = vec!["test_index".to_string()];
        header.extend((0..o).map(|c| format!("class_{c}")));
        header.push("argmax".into());
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.predictions.rows() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.predictions.row(i).iter().map(|v| format!("{v:e}")));
            rec.push(self.labels[i].to_string());
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Metadata without the prediction matrix.
    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kernel_kind": self.kernel_kind,
            "mode": self.mode.map(|m| m.label()),
            "jitter": self.jitter,
            "centering": self.centered,
            "test_points": self.predictions.rows(),
            "classes": self.predictions.cols(),
        })
    }
}

/// `K_xD · K_DD⁻¹ · R` for a scalar kernel and an `N × O` right-hand side.
pub fn kernel_regress(
    k_dd: &SymmetricMatrix,
    k_xd: &Matrix,
    r: &Matrix,
    jitter: f64,
) -> Result<(Matrix, f64)> {
    if k_xd.cols() != k_dd.dim() || r.rows() != k_dd.dim() {
        return Err(Error::ShapeMismatch(format!(
            "Gram {}x{}, cross {:?}, targets {:?}",
            k_dd.dim(),
            k_dd.dim(),
            k_xd.shape(),
            r.shape()
        )));
    }
    let chol = CholeskyFactor::new(k_dd, jitter)?;
    let alpha = chol.solve(r)?;
    Ok((k_xd.matmul(&alpha)?, chol.jitter()))
}

/// Block-kernel regression: `K_xD · K_DD⁻¹ · vec(R)` where `vec` stacks
/// the rows of the `N × O` matrix `R`. Returns `M × O`.
pub fn block_kernel_regress(
    k_dd: &SymmetricMatrix,
    k_xd: &Matrix,
    r: &Matrix,
    jitter: f64,
) -> Result<(Matrix, f64)> {
    let o = r.cols();
    let flat = Matrix::from_vec(r.rows() * o, 1, r.as_slice().to_vec())?;
    let (pred, used) = kernel_regress(k_dd, k_xd, &flat, jitter)?;
    if pred.rows() % o != 0 {
        return Err(Error::ShapeMismatch(format!(
            "cross kernel has {} rows, not a multiple of {o}",
            pred.rows()
        )));
    }
    Ok((Matrix::from_vec(pred.rows() / o, o, pred.into_vec())?, used))
}

pub fn predict_entk(
    net: &Network,
    prob: &RegressionProblem,
    cfg: &KernelConfig,
) -> Result<RegressionOutput> {
    prob.check_net(net)?;
    let (r, offset) = prob.residual_and_offset(net)?;
    let k_dd = ntk::entk_gram(net, &prob.train_inputs, cfg)?.symmetric()?;
    let k_xd = ntk::entk_matrix(net, &prob.test_inputs, &prob.train_inputs, cfg)?;
    let jitter = prob.jitter.resolve(&k_dd);
    let (fit, used) = block_kernel_regress(&k_dd, k_xd.matrix(), &r, jitter)?;
    Ok(RegressionOutput::new(
        fit.add(&offset)?,
        KernelKind::Entk,
        None,
        used,
        prob.center_with_f0,
    ))
}

pub fn predict_pntk(
    net: &Network,
    prob: &RegressionProblem,
    mode: PntkMode,
    cfg: &KernelConfig,
) -> Result<RegressionOutput> {
    prob.check_net(net)?;
    let (r, offset) = prob.residual_and_offset(net)?;
    let k_dd = ntk::pntk_matrix(net, &prob.train_inputs, &prob.train_inputs, mode, cfg)?.symmetric()?;
    let k_xd = ntk::pntk_matrix(net, &prob.test_inputs, &prob.train_inputs, mode, cfg)?;
    let jitter = prob.jitter.resolve(&k_dd);
    let (fit, used) = kernel_regress(&k_dd, k_xd.matrix(), &r, jitter)?;
    Ok(RegressionOutput::new(
        fit.add(&offset)?,
        KernelKind::Pntk,
        Some(mode),
        used,
        prob.center_with_f0,
    ))
}

/// pNTK regression run through the block route with `Θ̂ ⊗ I_O`.
pub fn predict_pntk_kron(
    net: &Network,
    prob: &RegressionProblem,
    mode: PntkMode,
    cfg: &KernelConfig,
) -> Result<RegressionOutput> {
    prob.check_net(net)?;
    let o = net.output_dim();
    let (r, offset) = prob.residual_and_offset(net)?;
    let k_dd = ntk::pntk_matrix(net, &prob.train_inputs, &prob.train_inputs, mode, cfg)?;
    let k_xd = ntk::pntk_matrix(net, &prob.test_inputs, &prob.train_inputs, mode, cfg)?;
    let lifted = SymmetricMatrix::new(k_dd.kron_lift(o).into_matrix())?;
    let jitter = prob.jitter.resolve(&lifted);
    let (fit, used) = block_kernel_regress(&lifted, k_xd.kron_lift(o).matrix(), &r, jitter)?;
    Ok(RegressionOutput::new(
        fit.add(&offset)?,
        KernelKind::Pntk,
        Some(mode),
        used,
        prob.center_with_f0,
    ))
}

/// `‖A − B‖_F`, divided by `‖B‖_F` when `normalize`.
pub fn prediction_diff(a: &RegressionOutput, b: &RegressionOutput, normalize: bool) -> Result<f64> {
    let d = linalg::frobenius_norm(&a.predictions.sub(&b.predictions)?);
    if !normalize {
        return Ok(d);
    }
    let n = linalg::frobenius_norm(&b.predictions);
    if n == 0.0 {
        return Err(Error::DegenerateKernel("reference predictions are zero".into()));
    }
    Ok(d / n)
}

/// Fraction of predicted labels equal to `truth`.
pub fn accuracy(out: &RegressionOutput, truth: &[usize]) -> Result<f64> {
    if truth.len() != out.labels.len() {
        return Err(Error::CountMismatch(format!(
            "{} predictions but {} labels",
            out.labels.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::EmptySet);
    }
    let hits = out.labels.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}
