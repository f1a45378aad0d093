//! Comparison statistics between eNTK and pNTK Grams and log-log slope fits.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SymmetricMatrix};
use crate::ntk::{EntkBlockMatrix, PntkMatrix};

/// Acceptance band for fitted convergence slopes.
pub const SLOPE_BAND: (f64, f64) = (-0.8, -0.3);

/// Per-block diagonal and off-diagonal mass, averaged over all `N1·N2` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMass {
    /// Mean of `Σ_a |B_aa|`.
    pub diag: f64,
    /// Mean of `Σ_{a≠b} |B_ab|`.
    pub offdiag: f64,
    pub diag_signed: f64,
    pub offdiag_signed: f64,
}

pub fn diag_offdiag_mass(k: &EntkBlockMatrix) -> BlockMass {
    let o = k.output_dim();
    let m = k.matrix();
    let mut mass = BlockMass {
        diag: 0.0,
        offdiag: 0.0,
        diag_signed: 0.0,
        offdiag_signed: 0.0,
    };
    for r in 0..m.rows() {
        let a = r % o;
        for (c, &v) in m.row(r).iter().enumerate() {
            if c % o == a {
                mass.diag += v.abs();
                mass.diag_signed += v;
            } else {
                mass.offdiag += v.abs();
                mass.offdiag_signed += v;
            }
        }
    }
    let blocks = (k.n1() * k.n2()) as f64;
    mass.diag /= blocks;
    mass.offdiag /= blocks;
    mass.diag_signed /= blocks;
    mass.offdiag_signed /= blocks;
    mass
}

/// `‖Θ̂ ⊗ I_O − Θ‖_F / ‖Θ‖_F`, without forming the Kronecker product.
pub fn rel_frobenius_diff(theta: &EntkBlockMatrix, pntk: &PntkMatrix) -> Result<f64> {
    if theta.n1() != pntk.n1() || theta.n2() != pntk.n2() {
        return Err(Error::ShapeMismatch(format!(
            "eNTK has {}x{} blocks, pNTK is {}x{}",
            theta.n1(),
            theta.n2(),
            pntk.n1(),
            pntk.n2()
        )));
    }
    let o = theta.output_dim();
    let m = theta.matrix();
    let p = pntk.matrix();
    let mut diff = 0.0;
    for r in 0..m.rows() {
        let (i, a) = (r / o, r % o);
        for (c, &v) in m.row(r).iter().enumerate() {
            let (j, b) = (c / o, c % o);
            let lifted = if a == b { p.get(i, j) } else { 0.0 };
            diff += (lifted - v) * (lifted - v);
        }
    }
    let norm = linalg::frobenius_norm(m);
    if norm == 0.0 {
        return Err(Error::DegenerateKernel("eNTK has zero Frobenius norm".into()));
    }
    Ok(diff.sqrt() / norm)
}

/// Per-pair form: `‖p·I_O − Θ(x1, x2)‖_F / ‖Θ(x1, x2)‖_F`.
pub fn rel_frobenius_diff_block(block: &linalg::Matrix, p: f64) -> Result<f64> {
    let n = linalg::frobenius_norm(block);
    if n == 0.0 {
        return Err(Error::DegenerateKernel("eNTK block is zero".into()));
    }
    let mut diff = 0.0;
    for a in 0..block.rows() {
        for b in 0..block.cols() {
            let lifted = if a == b { p } else { 0.0 };
            diff += (lifted - block.get(a, b)).powi(2);
        }
    }
    Ok(diff.sqrt() / n)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// `λmax/λmin`; infinite when `λmin ≤ 0`.
    pub condition_number: f64,
    pub frob_norm: f64,
}

impl SpectralSummary {
    pub fn condition_is_finite(&self) -> bool {
        self.condition_number.is_finite()
    }

    /// Summary of `K ⊗ I_O` given the summary of `K`.
    pub fn kron_lift(&self, o: usize) -> Self {
        Self {
            frob_norm: self.frob_norm * (o as f64).sqrt(),
            ..*self
        }
    }
}

pub fn spectral_summary(k: &SymmetricMatrix) -> Result<SpectralSummary> {
    let (lambda_max, lambda_min) = linalg::sym_eig_extremes(k)?;
    let condition_number = if lambda_min > 0.0 {
        lambda_max / lambda_min
    } else {
        f64::INFINITY
    };
    Ok(SpectralSummary {
        lambda_max,
        lambda_min,
        condition_number,
        frob_norm: linalg::frobenius_norm(k.matrix()),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigStat {
    Max,
    Min,
    Cond,
}

impl EigStat {
    pub fn name(self) -> &'static str {
        match self {
            EigStat::Max => "lambda_max",
            EigStat::Min => "lambda_min",
            EigStat::Cond => "condition_number",
        }
    }

    fn pick(self, s: &SpectralSummary) -> f64 {
        match self {
            EigStat::Max => s.lambda_max,
            EigStat::Min => s.lambda_min,
            EigStat::Cond => s.condition_number,
        }
    }
}

/// `|a − b| / |b|` with `b` taken from the eNTK summary.
pub fn rel_eig_diff(entk: &SpectralSummary, pntk: &SpectralSummary, which: EigStat) -> Result<f64> {
    let a = which.pick(pntk);
    let b = which.pick(entk);
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::DegenerateKernel(format!("{} is not finite", which.name())));
    }
    if b == 0.0 {
        return Err(Error::DegenerateKernel(format!("eNTK {} is zero", which.name())));
    }
    Ok((a - b).abs() / b.abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub widths: Vec<usize>,
    pub values: Vec<f64>,
    pub fitted_slope: f64,
    pub intercept: f64,
    pub fit_r2: f64,
}

impl SweepResult {
    pub fn slope_in_band(&self, band: (f64, f64)) -> bool {
        self.fitted_slope >= band.0 && self.fitted_slope <= band.1
    }
}

/// Least-squares fit of `log(value)` against `log(width)`.
pub fn loglog_slope(widths: &[usize], values: &[f64]) -> Result<SweepResult> {
    if widths.len() != values.len() {
        return Err(Error::InvalidSweep(format!(
            "{} widths but {} values",
            widths.len(),
            values.len()
        )));
    }
    if widths.len() < 3 {
        return Err(Error::InvalidSweep("need at least three widths".into()));
    }
    if widths.windows(2).any(|w| w[0] >= w[1]) || widths[0] == 0 {
        return Err(Error::InvalidSweep("widths must be positive and strictly increasing".into()));
    }
    if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidSweep(format!("value {v} is not positive")));
    }
    let xs: Vec<f64> = widths.iter().map(|&w| (w as f64).ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    // A perfectly flat series is fitted exactly.
    let fit_r2 = if syy <= 1e-30 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(SweepResult {
        widths: widths.to_vec(),
        values: values.to_vec(),
        fitted_slope: slope,
        intercept,
        fit_r2,
    })
}

/// One measurement row: `width,seed,epoch,metric,value`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub width: usize,
    pub seed: u64,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: std::io::Read>(r: R) -> Result<Vec<SweepRecord>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(csv_err))
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
