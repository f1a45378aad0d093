//! Experiment drivers behind the subcommands.
//!
//! Each driver is a pure function of its config plus an [`Artifacts`] sink,
//! and returns its results so callers can check them without reading files.

use std::path::PathBuf;
use std::time::Instant;

use pntk::active::{self, ALConfig, ALTrace, Acquisition};
use pntk::data::{self, LabeledSet, SplitSpec, Standardizer};
use pntk::linalg::Matrix;
use pntk::metrics::{self, EigStat, SpectralSummary, SweepRecord};
use pntk::net::{self, Network, NetworkSpec, TrainOutcome};
use pntk::ntk::{self, KernelKind, KernelMeta, ResourceEstimate};
use pntk::regress::{self, RegressionProblem};
use pntk::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::artifacts::Artifacts;
use crate::config::{DataSource, ExperimentConfig, REFERENCE_CHECKPOINTS};

/// Train/test split after loading and optional standardization.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub input_files: Vec<PathBuf>,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    let need = |what: &str, p: &Option<PathBuf>| {
        p.clone()
            .ok_or_else(|| Error::InvalidConfig(format!("data.{what} is required for this source")))
    };
    let (full, input_files) = match d.source {
        DataSource::Synthetic => (
            data::synth_clusters(d.classes, d.per_class, d.dim, d.separation, d.seed)?,
            Vec::new(),
        ),
        DataSource::Idx => {
            let (images, labels) = (need("images", &d.images)?, need("labels", &d.labels)?);
            (data::load_idx(&images, &labels)?, vec![images, labels])
        }
        DataSource::Cifar => {
            if d.batches.is_empty() {
                return Err(Error::InvalidConfig("data.batches is required for this source".into()));
            }
            let paths: Vec<&std::path::Path> = d.batches.iter().map(|p| p.as_path()).collect();
            (data::load_cifar_binary(&paths)?, d.batches.clone())
        }
        DataSource::Ntkd => {
            let path = need("path", &d.path)?;
            (LabeledSet::load(&path)?, vec![path])
        }
    };
    let spec = SplitSpec {
        train_n: d.train_n,
        test_n: d.test_n,
        seed: d.split_seed,
        stratified: d.stratified,
    };
    let (mut train, mut test) = data::split(&full, &spec)?;
    if d.standardize {
        let stats = Standardizer::fit(&train)?;
        train = stats.apply(&train)?;
        test = stats.apply(&test)?;
    }
    Ok(Dataset {
        train,
        test,
        input_files,
    })
}

fn record_inputs(out: &mut Artifacts, ds: &Dataset) -> Result<()> {
    for p in &ds.input_files {
        out.add_input(p)?;
    }
    out.note("train_provenance", ds.train.provenance());
    out.note("test_provenance", ds.test.provenance());
    Ok(())
}

fn note_checkpoints(out: &mut Artifacts, checkpoints: &[usize]) {
    let mut sorted = checkpoints.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mapping: Vec<serde_json::Value> = sorted
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            serde_json::json!({
                "epoch": e,
                "reference_epoch": REFERENCE_CHECKPOINTS.get(i).copied(),
            })
        })
        .collect();
    out.note("checkpoint_mapping", mapping);
}

/// Network snapshots at the requested epochs plus the learning rate that was
/// actually used (the fallback when training at the configured rate diverges).
#[derive(Clone, Debug)]
pub struct Snapshots {
    pub nets: Vec<(usize, Network)>,
    pub lr: f64,
    pub epoch_loss: Vec<f64>,
}

pub fn train_snapshots(
    cfg: &ExperimentConfig,
    spec: NetworkSpec,
    train: &LabeledSet,
    checkpoints: &[usize],
) -> Result<Snapshots> {
    let mut wanted = checkpoints.to_vec();
    wanted.sort_unstable();
    wanted.dedup();
    let net = Network::new(spec)?;
    let epochs = wanted.last().copied().unwrap_or(0);
    if epochs == 0 {
        return Ok(Snapshots {
            nets: vec![(0, net)],
            lr: cfg.train.lr,
            epoch_loss: Vec::new(),
        });
    }
    let tc = cfg.train.to_train_config(epochs, wanted);
    let run = |lr: f64| -> Result<TrainOutcome> {
        net::sgd_train(net.clone(), train, &pntk::net::TrainConfig { lr, ..tc.clone() })
    };
    let (outcome, lr) = match run(cfg.train.lr) {
        Err(Error::Diverged { .. }) if cfg.train.lr_fallback > 0.0 => {
            (run(cfg.train.lr_fallback)?, cfg.train.lr_fallback)
        }
        other => (other?, cfg.train.lr),
    };
    Ok(Snapshots {
        nets: outcome.snapshots,
        lr,
        epoch_loss: outcome.epoch_loss,
    })
}

fn first_rows(set: &LabeledSet, n: usize) -> Result<LabeledSet> {
    if n > set.len() {
        return Err(Error::InsufficientData(format!(
            "{n} points requested from a split of {}",
            set.len()
        )));
    }
    set.subset(&(0..n).collect::<Vec<_>>())
}

fn push(rows: &mut Vec<SweepRecord>, width: usize, seed: u64, epoch: usize, metric: &str, value: f64) {
    rows.push(SweepRecord {
        width,
        seed,
        epoch,
        metric: metric.into(),
        value,
    });
}

/// Log-log fit of one metric's seed-mean against width at one epoch.
#[derive(Clone, Debug, Serialize)]
pub struct SlopeFit {
    pub metric: String,
    pub epoch: usize,
    pub widths: Vec<usize>,
    pub means: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub band: (f64, f64),
    pub in_band: bool,
}

/// Mean of `metric` over seeds at each width, skipping non-finite values.
pub fn seed_means(rows: &[SweepRecord], metric: &str, epoch: usize) -> (Vec<usize>, Vec<f64>) {
    let mut widths: Vec<usize> = rows
        .iter()
        .filter(|r| r.metric == metric && r.epoch == epoch)
        .map(|r| r.width)
        .collect();
    widths.sort_unstable();
    widths.dedup();
    let mut out = (Vec::new(), Vec::new());
    for w in widths {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.metric == metric && r.epoch == epoch && r.width == w && r.value.is_finite())
            .map(|r| r.value)
            .collect();
        if !vals.is_empty() {
            out.0.push(w);
            out.1.push(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    out
}

fn fit_all(rows: &[SweepRecord], metric_names: &[&str], epochs: &[usize], band: (f64, f64)) -> Vec<SlopeFit> {
    let mut fits = Vec::new();
    for &epoch in epochs {
        for &m in metric_names {
            let (widths, means) = seed_means(rows, m, epoch);
            if widths.len() < 2 || means.iter().any(|&v| v <= 0.0) {
                continue;
            }
            if let Ok(f) = metrics::loglog_slope(&widths, &means) {
                fits.push(SlopeFit {
                    metric: m.into(),
                    epoch,
                    in_band: f.slope_in_band(band),
                    widths,
                    means,
                    slope: f.fitted_slope,
                    intercept: f.intercept,
                    r2: f.fit_r2,
                    band,
                });
            }
        }
    }
    fits
}

fn write_records(out: &mut Artifacts, name: &str, rows: &[SweepRecord]) -> Result<()> {
    out.write_with(name, |w| metrics::write_sweep_csv(w, rows))
}

fn write_fits(out: &mut Artifacts, name: &str, fits: &[SlopeFit]) -> Result<()> {
    out.write_with(name, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["metric", "epoch", "slope", "intercept", "r2", "band_lo", "band_hi", "in_band"])
            .map_err(csv_err)?;
        for f in fits {
            c.write_record([
                f.metric.clone(),
                f.epoch.to_string(),
                f.slope.to_string(),
                f.intercept.to_string(),
                f.r2.to_string(),
                f.band.0.to_string(),
                f.band.1.to_string(),
                f.in_band.to_string(),
            ])
            .map_err(csv_err)?;
        }
        c.flush()?;
        Ok(())
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub records: Vec<SweepRecord>,
    pub fits: Vec<SlopeFit>,
}

impl SweepReport {
    pub fn fit(&self, metric: &str, epoch: usize) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.metric == metric && f.epoch == epoch)
    }
}

/// Metrics whose width slopes are fitted; the first two are asserted by theory.
pub const SWEEP_FITTED: [&str; 4] = [
    "rel_frobenius_diff",
    "rel_eig_diff_max",
    "rel_eig_diff_min",
    "rel_eig_diff_cond",
];

fn spectral_rows(rows: &mut Vec<SweepRecord>, key: (usize, u64, usize), prefix: &str, s: &SpectralSummary) {
    let (w, seed, e) = key;
    push(rows, w, seed, e, &format!("{prefix}_lambda_max"), s.lambda_max);
    push(rows, w, seed, e, &format!("{prefix}_lambda_min"), s.lambda_min);
    push(rows, w, seed, e, &format!("{prefix}_condition_number"), s.condition_number);
    push(rows, w, seed, e, &format!("{prefix}_frob_norm"), s.frob_norm);
}

/// Width sweep of kernel-level metrics on the first `sweep.points` training
/// points, at every `sweep.checkpoints` epoch.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<SweepReport> {
    let ds = load_data(cfg)?;
    record_inputs(out, &ds)?;
    note_checkpoints(out, &cfg.sweep.checkpoints);
    let x = first_rows(&ds.train, cfg.sweep.points)?;
    let limits = cfg.kernel.limits();
    let mode = cfg.kernel.mode;
    let o = ds.train.num_classes();
    let mut rows = Vec::new();
    let mut lrs = Vec::new();
    for &width in &cfg.sweep.widths {
        for &seed in &cfg.sweep.seeds {
            let spec = cfg.net.spec(ds.train.input_dim(), width, o, seed);
            let snaps = train_snapshots(cfg, spec, &ds.train, &cfg.sweep.checkpoints)?;
            lrs.push(serde_json::json!({"width": width, "seed": seed, "lr": snaps.lr}));
            for (epoch, net) in &snaps.nets {
                let key = (width, seed, *epoch);
                let e = if cfg.kernel.wants_entk() {
                    Some(ntk::entk_gram(net, x.inputs(), &limits)?)
                } else {
                    None
                };
                let p = if cfg.kernel.wants_pntk() {
                    Some(ntk::pntk_matrix(net, x.inputs(), x.inputs(), mode, &limits)?)
                } else {
                    None
                };
                let es = match &e {
                    Some(e) => {
                        let mass = metrics::diag_offdiag_mass(e);
                        push(&mut rows, width, seed, *epoch, "diag_mass", mass.diag);
                        push(&mut rows, width, seed, *epoch, "offdiag_mass", mass.offdiag);
                        push(&mut rows, width, seed, *epoch, "diag_mass_signed", mass.diag_signed);
                        push(&mut rows, width, seed, *epoch, "offdiag_mass_signed", mass.offdiag_signed);
                        let s = metrics::spectral_summary(&e.symmetric()?)?;
                        spectral_rows(&mut rows, key, "entk", &s);
                        Some(s)
                    }
                    None => None,
                };
                let ps = match &p {
                    Some(p) => {
                        let s = metrics::spectral_summary(&p.symmetric()?)?.kron_lift(o);
                        spectral_rows(&mut rows, key, "pntk_lifted", &s);
                        Some(s)
                    }
                    None => None,
                };
                if let (Some(e), Some(p)) = (&e, &p) {
                    let v = metrics::rel_frobenius_diff(e, p)?;
                    push(&mut rows, width, seed, *epoch, "rel_frobenius_diff", v);
                }
                if let (Some(es), Some(ps)) = (&es, &ps) {
                    for (stat, name) in [
                        (EigStat::Max, "rel_eig_diff_max"),
                        (EigStat::Min, "rel_eig_diff_min"),
                        (EigStat::Cond, "rel_eig_diff_cond"),
                    ] {
                        // Undefined for a singular reference kernel; recorded as NaN.
                        let v = metrics::rel_eig_diff(es, ps, stat).unwrap_or(f64::NAN);
                        push(&mut rows, width, seed, *epoch, name, v);
                    }
                }
            }
        }
    }
    let mut epochs = cfg.sweep.checkpoints.clone();
    epochs.sort_unstable();
    epochs.dedup();
    let fits = fit_all(&rows, &SWEEP_FITTED, &epochs, metrics::SLOPE_BAND);
    out.note("pntk_mode", mode.label());
    out.note("training_lr", lrs);
    out.note("training_loss", net::TRAINING_LOSS);
    out.note("asserted_slopes", ["rel_frobenius_diff", "rel_eig_diff_max"]);
    if out_has(cfg, "csv") {
        write_records(out, "sweep.csv", &rows)?;
        write_fits(out, "fits.csv", &fits)?;
    }
    if out_has(cfg, "json") {
        out.write_json("fits.json", &fits)?;
    }
    Ok(SweepReport { records: rows, fits })
}

fn out_has(cfg: &ExperimentConfig, format: &str) -> bool {
    cfg.output.has(format)
}

/// Band for the prediction-difference slope.
pub const REGRESS_SLOPE_BAND: (f64, f64) = (-0.9, -0.2);

#[derive(Clone, Debug)]
pub struct RegressReport {
    pub records: Vec<SweepRecord>,
    pub fits: Vec<SlopeFit>,
}

impl RegressReport {
    pub fn fit(&self, metric: &str, epoch: usize) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.metric == metric && f.epoch == epoch)
    }
}

/// Kernel regression with the eNTK and the pNTK on the full train/test split
/// for every width, seed and checkpoint.
pub fn cmd_regress(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<RegressReport> {
    let ds = load_data(cfg)?;
    record_inputs(out, &ds)?;
    note_checkpoints(out, &cfg.sweep.checkpoints);
    let limits = cfg.kernel.limits();
    let mode = cfg.kernel.mode;
    let o = ds.train.num_classes();
    let mut prob = RegressionProblem::new(
        ds.train.inputs().clone(),
        ds.train.one_hot(),
        ds.test.inputs().clone(),
    )?;
    prob.jitter = cfg.kernel.jitter;
    prob.center_with_f0 = cfg.kernel.center_with_f0;
    let mut rows = Vec::new();
    for &width in &cfg.sweep.widths {
        for &seed in &cfg.sweep.seeds {
            let spec = cfg.net.spec(ds.train.input_dim(), width, o, seed);
            let snaps = train_snapshots(cfg, spec, &ds.train, &cfg.sweep.checkpoints)?;
            for (epoch, net) in &snaps.nets {
                let e = if cfg.kernel.wants_entk() {
                    Some(regress::predict_entk(net, &prob, &limits)?)
                } else {
                    None
                };
                let p = if cfg.kernel.wants_pntk() {
                    Some(regress::predict_pntk(net, &prob, mode, &limits)?)
                } else {
                    None
                };
                for (kind, r) in [("entk", &e), ("pntk", &p)] {
                    let Some(r) = r else { continue };
                    let acc = regress::accuracy(r, ds.test.labels())?;
                    push(&mut rows, width, seed, *epoch, &format!("{kind}_accuracy"), acc);
                    push(&mut rows, width, seed, *epoch, &format!("{kind}_jitter"), r.jitter);
                    if out_has(cfg, "predictions") {
                        let stem = format!("predictions/w{width}_s{seed}_e{epoch}_{kind}");
                        out.write_with(&format!("{stem}.csv"), |w| r.write_csv(w))?;
                        out.write_json(&format!("{stem}.json"), &r.metadata_json())?;
                    }
                }
                if let (Some(e), Some(p)) = (&e, &p) {
                    let abs = regress::prediction_diff(p, e, false)?;
                    let rel = regress::prediction_diff(p, e, true).unwrap_or(f64::NAN);
                    push(&mut rows, width, seed, *epoch, "prediction_diff", abs);
                    push(&mut rows, width, seed, *epoch, "rel_prediction_diff", rel);
                }
            }
        }
    }
    let mut epochs = cfg.sweep.checkpoints.clone();
    epochs.sort_unstable();
    epochs.dedup();
    let fits = fit_all(
        &rows,
        &["rel_prediction_diff", "prediction_diff"],
        &epochs,
        REGRESS_SLOPE_BAND,
    );
    out.note("pntk_mode", mode.label());
    out.note("center_with_f0", cfg.kernel.center_with_f0);
    out.note("jitter", cfg.kernel.jitter);
    if out_has(cfg, "csv") {
        write_records(out, "regress.csv", &rows)?;
        write_fits(out, "fits.csv", &fits)?;
    }
    if out_has(cfg, "json") {
        out.write_json("fits.json", &fits)?;
    }
    Ok(RegressReport { records: rows, fits })
}

#[derive(Clone, Debug, Serialize)]
pub struct PersistedKernel {
    pub path: PathBuf,
    pub meta: KernelMeta,
}

/// Build and persist Grams on `sweep.points` training points for the
/// `[net]` network at every checkpoint. Requires an enabled sink.
pub fn cmd_kernel(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<Vec<PersistedKernel>> {
    if !out.enabled() {
        return Err(Error::InvalidConfig("kernel needs an output directory".into()));
    }
    let ds = load_data(cfg)?;
    record_inputs(out, &ds)?;
    note_checkpoints(out, &cfg.sweep.checkpoints);
    let x = first_rows(&ds.train, cfg.sweep.points)?;
    let limits = cfg.kernel.limits();
    let o = ds.train.num_classes();
    let spec = cfg.net.spec(ds.train.input_dim(), cfg.net.width, o, cfg.net.seed);
    let snaps = train_snapshots(cfg, spec, &ds.train, &cfg.sweep.checkpoints)?;
    let mut written = Vec::new();
    for (epoch, net) in &snaps.nets {
        if let Some(p) = out.path(&format!("nets/e{epoch}.ntkw"))? {
            net.save(&p)?;
        }
        let hash = net.checkpoint_hash();
        let n = x.len();
        let mut emit = |kind: KernelKind, mode: Option<String>, m: &Matrix| -> Result<()> {
            let name = match kind {
                KernelKind::Entk => format!("kernels/entk_e{epoch}.ntkm"),
                KernelKind::Pntk => format!("kernels/pntk_e{epoch}.ntkm"),
            };
            let meta = KernelMeta {
                kind,
                mode,
                n1: n,
                n2: n,
                o,
                net_checkpoint_hash: hash.clone(),
                epoch: Some(*epoch),
            };
            if let Some(path) = out.path(&name)? {
                ntk::save_kernel(&path, m, &meta)?;
                written.push(PersistedKernel { path, meta });
            }
            Ok(())
        };
        if cfg.kernel.wants_entk() {
            let e = ntk::entk_gram(net, x.inputs(), &limits)?;
            emit(KernelKind::Entk, None, e.matrix())?;
        }
        if cfg.kernel.wants_pntk() {
            let p = ntk::pntk_matrix(net, x.inputs(), x.inputs(), cfg.kernel.mode, &limits)?;
            emit(KernelKind::Pntk, Some(cfg.kernel.mode.label()), p.matrix())?;
        }
    }
    out.note("training_lr", snaps.lr);
    out.write_json("kernels.json", &written)?;
    Ok(written)
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRecord {
    pub n: usize,
    pub o: usize,
    pub width: usize,
    pub kind: KernelKind,
    pub rep: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchCell {
    pub n: usize,
    pub o: usize,
    pub width: usize,
    pub entk_median: f64,
    pub pntk_median: f64,
    /// `pntk_median / entk_median`.
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
    pub cells: Vec<BenchCell>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

/// Paired wall-clock timing of full Gram assembly, eNTK then pNTK, over the
/// `[bench]` grid on uniform inputs of dimension `data.dim`.
pub fn cmd_bench(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<BenchReport> {
    let b = &cfg.bench;
    let limits = cfg.kernel.limits();
    let mode = cfg.kernel.mode;
    let mut records = Vec::new();
    let mut cells = Vec::new();
    for &n in &b.points {
        for &o in &b.outputs {
            for &width in &b.widths {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.net.seed ^ n as u64);
                let x = Matrix::from_fn(n, cfg.data.dim, |_, _| rng.gen_range(-1.0..1.0));
                let net = Network::new(cfg.net.spec(cfg.data.dim, width, o, cfg.net.seed))?;
                let time_entk = || -> Result<f64> {
                    let t = Instant::now();
                    ntk::entk_matrix(&net, &x, &x, &limits)?;
                    Ok(t.elapsed().as_secs_f64())
                };
                let time_pntk = || -> Result<f64> {
                    let t = Instant::now();
                    ntk::pntk_matrix(&net, &x, &x, mode, &limits)?;
                    Ok(t.elapsed().as_secs_f64())
                };
                for _ in 0..b.warmup {
                    time_entk()?;
                    time_pntk()?;
                }
                let (mut te, mut tp) = (Vec::new(), Vec::new());
                for rep in 0..b.repetitions {
                    let e = time_entk()?;
                    let p = time_pntk()?;
                    te.push(e);
                    tp.push(p);
                    for (kind, seconds) in [(KernelKind::Entk, e), (KernelKind::Pntk, p)] {
                        records.push(BenchRecord {
                            n,
                            o,
                            width,
                            kind,
                            rep,
                            seconds,
                        });
                    }
                }
                let (em, pm) = (median(&te), median(&tp));
                cells.push(BenchCell {
                    n,
                    o,
                    width,
                    entk_median: em,
                    pntk_median: pm,
                    ratio: pm / em,
                });
            }
        }
    }
    out.note("pntk_mode", mode.label());
    out.note("threads", rayon::current_num_threads());
    if out_has(cfg, "csv") {
        out.write_with("bench.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["n", "o", "width", "kind", "rep", "seconds"]).map_err(csv_err)?;
            for r in &records {
                let kind = match r.kind {
                    KernelKind::Entk => "entk",
                    KernelKind::Pntk => "pntk",
                };
                c.write_record([
                    r.n.to_string(),
                    r.o.to_string(),
                    r.width.to_string(),
                    kind.to_string(),
                    r.rep.to_string(),
                    r.seconds.to_string(),
                ])
                .map_err(csv_err)?;
            }
            c.flush()?;
            Ok(())
        })?;
    }
    if out_has(cfg, "json") {
        out.write_json("bench_summary.json", &cells)?;
    }
    Ok(BenchReport { records, cells })
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimateReport {
    pub entk: ResourceEstimate,
    pub pntk: ResourceEstimate,
}

impl EstimateReport {
    pub fn entk_terabytes(&self) -> f64 {
        self.entk.kernel_bytes as f64 / 1e12
    }

    pub fn entk_tebibytes(&self) -> f64 {
        self.entk.kernel_bytes as f64 / (1u64 << 40) as f64
    }

    pub fn pntk_gigabytes(&self) -> f64 {
        self.pntk.kernel_bytes as f64 / 1e9
    }

    pub fn pntk_gibibytes(&self) -> f64 {
        self.pntk.kernel_bytes as f64 / (1u64 << 30) as f64
    }

    pub fn render(&self) -> String {
        format!(
            "N = {}, O = {}, {} bytes per entry\n\
             eNTK: {} x {} entries, {:.3} TB ({:.3} TiB), {} JVPs\n\
             pNTK: {} x {} entries, {:.3} GB ({:.3} GiB), {} JVPs\n\
             memory ratio: {}\n",
            self.entk.n,
            self.entk.o,
            self.entk.element_bytes,
            self.entk.n * self.entk.o,
            self.entk.n * self.entk.o,
            self.entk_terabytes(),
            self.entk_tebibytes(),
            self.entk.jvp_count,
            self.pntk.n,
            self.pntk.n,
            self.pntk_gigabytes(),
            self.pntk_gibibytes(),
            self.pntk.jvp_count,
            self.entk.kernel_bytes / self.pntk.kernel_bytes.max(1),
        )
    }
}

pub fn cmd_estimate(n: u64, o: u64, element_bytes: u64, out: &mut Artifacts) -> Result<EstimateReport> {
    let report = EstimateReport {
        entk: ntk::resource_estimate(n, o, element_bytes, KernelKind::Entk)?,
        pntk: ntk::resource_estimate(n, o, element_bytes, KernelKind::Pntk)?,
    };
    out.write_json("estimate.json", &report)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct ActiveReport {
    pub traces: Vec<ALTrace>,
}

impl ActiveReport {
    pub fn trace(&self, a: Acquisition) -> Option<&ALTrace> {
        self.traces.iter().find(|t| t.acquisition == a)
    }
}

#[derive(Serialize)]
struct TraceSummary<'a> {
    acquisition: String,
    policy: &'a str,
    final_accuracy: f64,
    total_acq_seconds: f64,
    pool_exhausted: bool,
    cycles: &'a [active::CycleRecord],
}

/// Pool-based active learning with every acquisition in `active.acquisitions`.
pub fn cmd_active(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<ActiveReport> {
    let ds = load_data(cfg)?;
    record_inputs(out, &ds)?;
    let a = &cfg.active;
    let pool = if a.pool == 0 {
        ds.train.clone()
    } else {
        first_rows(&ds.train, a.pool)?
    };
    let o = ds.train.num_classes();
    let mut traces = Vec::new();
    for choice in &a.acquisitions {
        let al = ALConfig {
            initial_labeled: a.initial_labeled,
            per_cycle: a.per_cycle,
            cycles: a.cycles,
            acquisition: choice.resolve(cfg.kernel.mode),
            candidate_pool_cap: a.candidate_pool_cap,
            ref_set_size: a.ref_set_size,
            retrain_epochs: a.retrain_epochs,
            seed: a.seed,
            net: cfg.net.spec(ds.train.input_dim(), cfg.net.width, o, cfg.net.seed),
            train: cfg.train.to_train_config(a.retrain_epochs, Vec::new()),
            lookahead: a.lookahead(&cfg.kernel),
        };
        let trace = active::run_al(&al, &pool, &ds.test)?;
        let name = match choice {
            crate::config::AcquisitionChoice::Pntk => "pntk",
            crate::config::AcquisitionChoice::Entk => "entk",
            crate::config::AcquisitionChoice::Random => "random",
        };
        if out_has(cfg, "csv") {
            out.write_with(&format!("al_{name}.csv"), |w| trace.write_csv(w))?;
        }
        if out_has(cfg, "json") {
            out.write_json(
                &format!("al_{name}.json"),
                &TraceSummary {
                    acquisition: trace.acquisition.label(),
                    policy: &trace.policy,
                    final_accuracy: trace.final_accuracy(),
                    total_acq_seconds: trace.total_acq_seconds(),
                    pool_exhausted: trace.pool_exhausted,
                    cycles: &trace.records,
                },
            )?;
        }
        traces.push(trace);
    }
    out.note("acquisition_policy", active::ACQUISITION_POLICY);
    out.note("training_loss", net::TRAINING_LOSS);
    Ok(ActiveReport { traces })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub checkpoint_hash: String,
}

/// Train the `[net]` network and save it at every checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, out: &mut Artifacts) -> Result<Vec<TrainRecord>> {
    let ds = load_data(cfg)?;
    record_inputs(out, &ds)?;
    note_checkpoints(out, &cfg.sweep.checkpoints);
    let o = ds.train.num_classes();
    let spec = cfg.net.spec(ds.train.input_dim(), cfg.net.width, o, cfg.net.seed);
    let snaps = train_snapshots(cfg, spec, &ds.train, &cfg.sweep.checkpoints)?;
    let mut records = Vec::new();
    for (epoch, net) in &snaps.nets {
        if let Some(p) = out.path(&format!("nets/e{epoch}.ntkw"))? {
            net.save(&p)?;
        }
        records.push(TrainRecord {
            epoch: *epoch,
            train_accuracy: net::accuracy(net, &ds.train)?,
            test_accuracy: net::accuracy(net, &ds.test)?,
            checkpoint_hash: net.checkpoint_hash(),
        });
    }
    out.note("training_lr", snaps.lr);
    out.note("training_loss", net::TRAINING_LOSS);
    if out_has(cfg, "csv") {
        out.write_with("loss.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["epoch", "loss"]).map_err(csv_err)?;
            for (i, l) in snaps.epoch_loss.iter().enumerate() {
                c.write_record([(i + 1).to_string(), l.to_string()]).map_err(csv_err)?;
            }
            c.flush()?;
            Ok(())
        })?;
    }
    out.write_json("checkpoints.json", &records)?;
    Ok(records)
}
