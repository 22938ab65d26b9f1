//! One function per subcommand. Every command writes its artifacts under the
//! resolved output root with a fixed layout (`aligned/`, `checkpoints/`,
//! `reports/`, `fused/`), echoes its configuration, and appends wall time to
//! `reports/run.log`. All other artifacts are byte-reproducible for a given
//! configuration.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use aerofuse_core::dataset::{
    gen_synthetic, split_leave_half_out, split_mach_blocks, Column, DataSet, Role, SyntheticConfig,
    SyntheticKind,
};
use aerofuse_core::gpr::{fic_predict, select_inducing, GpModel, NoiseMode, UncertaintyReport};
use aerofuse_core::kriging::{align_datasets, AlignedPair};
use aerofuse_core::lgfnet::{fuse_inference, ArchConfig, FusionModel};
use aerofuse_core::linalg::Mat;
use aerofuse_core::training::{train, Metrics, TrainConfig};

use crate::config::{
    log_run, write_echo, AlignConfig, EvaluateConfig, InferConfig, SynthConfig, TrainCliConfig,
    UqConfig,
};

/// Rows of two tables count as the same state point within this tolerance.
const STATE_MATCH_TOL: f64 = 1e-9;

pub fn run_synth(cfg: &SynthConfig) -> Result<()> {
    let t0 = Instant::now();
    let kind = SyntheticKind::parse(&cfg.kind)?;
    let (lf, hf) = gen_synthetic(&SyntheticConfig {
        kind,
        n_lf: cfg.n_lf,
        n_hf: cfg.n_hf,
        noise_sigma: cfg.noise,
        seed: cfg.seed,
    })?;
    fs::create_dir_all(&cfg.out)?;
    let lf_path = cfg.out.join("lf.csv");
    let hf_path = cfg.out.join("hf.csv");
    lf.save_csv(&lf_path)?;
    hf.save_csv(&hf_path)?;
    write_echo(&cfg.out, "synth", cfg)?;
    println!("wrote {} ({} rows)", lf_path.display(), lf.n_rows());
    println!("wrote {} ({} rows)", hf_path.display(), hf.n_rows());
    log_run(&cfg.out, "synth", t0.elapsed().as_secs_f64())
}

pub fn run_align(cfg: &AlignConfig) -> Result<()> {
    let t0 = Instant::now();
    let lf = DataSet::load_csv(&cfg.lf)?;
    let hf = DataSet::load_csv(&cfg.hf)?;
    let pair = align_datasets(&lf, &hf)?;
    let dir = cfg.out.join("aligned");
    fs::create_dir_all(&dir)?;
    let pair_path = dir.join("pair.csv");
    let train_path = dir.join("train.csv");
    pair.reference_dataset()?.save_csv(&pair_path)?;
    pair.training_dataset()?.save_csv(&train_path)?;
    write_echo(&cfg.out, "align", cfg)?;
    println!(
        "aligned {} states x [{}] over {} rows",
        pair.state_names.join(","),
        pair.response_names.join(","),
        pair.states.rows()
    );
    println!("wrote {}", pair_path.display());
    println!("wrote {}", train_path.display());
    log_run(&cfg.out, "align", t0.elapsed().as_secs_f64())
}

/// Applies at most one of the split options and returns (train, test) tables.
fn split_tables(cfg: &TrainCliConfig, data: DataSet) -> Result<(DataSet, Option<DataSet>)> {
    let chosen = [
        cfg.test_data.is_some(),
        cfg.holdout_every > 0,
        cfg.split_case.is_some(),
        cfg.split_mach.is_some(),
    ]
    .iter()
    .filter(|&&c| c)
    .count();
    if chosen > 1 {
        bail!("choose at most one of --test-data, --holdout-every, --split-case, --split-mach");
    }
    if let Some(path) = &cfg.test_data {
        let test = DataSet::load_csv(path)?;
        return Ok((data, Some(test)));
    }
    if cfg.holdout_every > 0 {
        let k = cfg.holdout_every;
        if k == 1 {
            bail!("--holdout-every 1 leaves nothing to train on");
        }
        let test_rows: Vec<usize> = (0..data.n_rows()).filter(|r| (r + 1) % k == 0).collect();
        let train_rows: Vec<usize> = (0..data.n_rows()).filter(|r| (r + 1) % k != 0).collect();
        if test_rows.is_empty() {
            bail!("--holdout-every {k} selects no test rows out of {}", data.n_rows());
        }
        return Ok((data.take_rows(&train_rows), Some(data.take_rows(&test_rows))));
    }
    if let Some(spec) = &cfg.split_case {
        let (col, value) = spec
            .split_once('=')
            .with_context(|| format!("--split-case '{spec}' must be column=value"))?;
        let value: f64 = value
            .parse()
            .with_context(|| format!("--split-case value '{value}' is not a number"))?;
        let (tr, te) = split_leave_half_out(&data, col, value)?;
        return Ok((tr, Some(te)));
    }
    if let Some(spec) = &cfg.split_mach {
        let parts: Vec<&str> = spec.split(':').collect();
        let [col, jump, train_parts, test_parts] = parts.as_slice() else {
            bail!("--split-mach '{spec}' must be column:jump:train_parts:test_parts");
        };
        let jump: f64 = jump
            .parse()
            .with_context(|| format!("--split-mach jump '{jump}' is not a number"))?;
        let a: usize = train_parts.parse().context("--split-mach train_parts")?;
        let b: usize = test_parts.parse().context("--split-mach test_parts")?;
        let (tr, te) = split_mach_blocks(&data, col, jump, a, b)?;
        return Ok((tr, Some(te)));
    }
    Ok((data, None))
}

fn lf_rmse(pair: &AlignedPair, response: usize) -> f64 {
    let n = pair.y_l.rows();
    let mut ss = 0.0;
    for i in 0..n {
        let d = pair.y_l[(i, response)] - pair.y_h[(i, response)];
        ss += d * d;
    }
    (ss / n as f64).sqrt()
}

fn write_metric_rows(
    w: &mut impl Write,
    split: &str,
    pair: &AlignedPair,
    metrics: &[(String, Metrics)],
) -> Result<()> {
    for (j, (name, m)) in metrics.iter().enumerate() {
        writeln!(
            w,
            "{},{},{:.16e},{:.16e},{:.16e},{},{:.16e}",
            name,
            split,
            m.rmse,
            m.mae,
            m.r2,
            m.constant_truth,
            lf_rmse(pair, j)
        )?;
    }
    Ok(())
}

pub fn run_train(cfg: &TrainCliConfig) -> Result<()> {
    let t0 = Instant::now();
    let data = DataSet::load_csv(&cfg.data)?;
    let (train_ds, test_ds) = split_tables(cfg, data)?;
    let pair = AlignedPair::from_training_dataset(&train_ds)?;
    let test_pair = match &test_ds {
        Some(ds) => Some(AlignedPair::from_training_dataset(ds)?),
        None => None,
    };

    let channels: [usize; 5] = cfg.channels.clone().try_into().map_err(|v: Vec<usize>| {
        anyhow::anyhow!("--channels needs exactly 5 widths, got {}", v.len())
    })?;
    let p = pair.state_names.len();
    let m = pair.response_names.len();
    let arch = ArchConfig {
        channels,
        window: cfg.window,
        stride: cfg.stride,
        d_in: p + m,
        d_out: m,
        heads: cfg.heads,
        dropout: cfg.dropout,
        use_sliding_window: cfg.sliding_window,
        use_attention: cfg.attention,
    };
    // Small tables produce fewer windows than the default batch size; the
    // clamp is deterministic, so replaying the echoed config still matches.
    let n = pair.states.rows();
    let n_windows = if cfg.sliding_window && n >= cfg.window {
        (n - cfg.window) / cfg.stride + 1
    } else {
        n.div_ceil(cfg.window)
    };
    let batch = cfg.batch.min(n_windows).max(1);
    if batch < cfg.batch {
        println!("batch {} clamped to {batch} ({n_windows} windows)", cfg.batch);
    }
    let hyper = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.epochs,
        batch,
        seed: cfg.seed,
        decay_factor: cfg.decay_factor,
        patience: cfg.patience,
        min_delta: cfg.min_delta,
        min_lr: cfg.min_lr,
    };
    let (model, report) = train(&pair, arch, &hyper, test_pair.as_ref())?;

    let ckpt_dir = cfg.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let model_path = ckpt_dir.join("model.json");
    model.save(&model_path)?;

    let report_dir = cfg.out.join("reports");
    fs::create_dir_all(&report_dir)?;
    let mut curve = BufWriter::new(fs::File::create(report_dir.join("train.csv"))?);
    report.write_csv(&mut curve)?;
    curve.flush()?;

    let mut mfile = BufWriter::new(fs::File::create(report_dir.join("train_metrics.csv"))?);
    writeln!(mfile, "column,split,rmse,mae,r2,constant_truth,lf_rmse")?;
    write_metric_rows(&mut mfile, "train", &pair, &report.train_metrics)?;
    if let Some(tp) = &test_pair {
        write_metric_rows(&mut mfile, "test", tp, &report.test_metrics)?;
    }
    mfile.flush()?;

    write_echo(&cfg.out, "train", cfg)?;
    let ran = report.losses.len();
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    if report.stopped_early {
        println!("trained {ran} epochs (early stop), final loss {last:.6e}");
    } else {
        println!("trained {ran} epochs, final loss {last:.6e}");
    }
    for (j, (name, m)) in report.train_metrics.iter().enumerate() {
        println!(
            "train {name}: fused rmse {:.6e} (lf rmse {:.6e})",
            m.rmse,
            lf_rmse(&pair, j)
        );
    }
    if let Some(tp) = &test_pair {
        for (j, (name, m)) in report.test_metrics.iter().enumerate() {
            println!(
                "test  {name}: fused rmse {:.6e} (lf rmse {:.6e})",
                m.rmse,
                lf_rmse(tp, j)
            );
        }
    }
    println!("wrote {}", model_path.display());
    log_run(&cfg.out, "train", t0.elapsed().as_secs_f64())
}

/// Finds the column the model expects for response `r`: the aligned name
/// `<r>_lf` when present, otherwise the bare response name.
fn lf_column(data: &DataSet, response: &str) -> Option<usize> {
    data.column_index(&format!("{response}_lf"))
        .or_else(|| data.column_index(response))
}

pub fn run_infer(cfg: &InferConfig) -> Result<()> {
    let t0 = Instant::now();
    let mut model = FusionModel::load(&cfg.model)?;
    let data = DataSet::load_csv(&cfg.data)?;
    let n = data.n_rows();

    let mut col_idx = Vec::new();
    for s in &model.state_names {
        let idx = data
            .column_index(s)
            .with_context(|| format!("input table lacks state column '{s}'"))?;
        col_idx.push(idx);
    }
    for r in &model.response_names {
        let idx = lf_column(&data, r)
            .with_context(|| format!("input table lacks '{r}_lf' (or '{r}')"))?;
        col_idx.push(idx);
    }
    let mut inputs = Mat::zeros(n, col_idx.len());
    for i in 0..n {
        for (j, &c) in col_idx.iter().enumerate() {
            inputs[(i, j)] = data.value(i, c);
        }
    }

    let out = fuse_inference(&mut model, &inputs)?;

    let p = model.state_names.len();
    let mut columns: Vec<Column> = model.state_names.iter().map(|s| Column::state(s)).collect();
    for r in &model.response_names {
        columns.push(Column::response(&format!("{r}_lf")));
        columns.push(Column::response(&format!("{r}_delta_pred")));
        columns.push(Column::response(&format!("{r}_fused")));
    }
    let mut flat = Vec::with_capacity(n * columns.len());
    for i in 0..n {
        for j in 0..p {
            flat.push(inputs[(i, j)]);
        }
        for (j, _) in model.response_names.iter().enumerate() {
            flat.push(inputs[(i, p + j)]);
            flat.push(out.delta[(i, j)]);
            flat.push(out.fused[(i, j)]);
        }
    }
    let fused_ds = DataSet::new(columns, flat)?;
    let dir = cfg.out.join("fused");
    fs::create_dir_all(&dir)?;
    let fused_path = dir.join("fused.csv");
    fused_ds.save_csv(&fused_path)?;

    write_echo(&cfg.out, "infer", cfg)?;
    for (j, r) in model.response_names.iter().enumerate() {
        let mean_abs =
            (0..n).map(|i| out.delta[(i, j)].abs()).sum::<f64>() / n.max(1) as f64;
        println!("{r}: mean |residual| {mean_abs:.6e} over {n} rows");
    }
    println!("wrote {}", fused_path.display());
    log_run(&cfg.out, "infer", t0.elapsed().as_secs_f64())
}

/// Truth/prediction column pairs to score, as (label, truth idx, pred idx).
fn evaluation_pairs(
    cfg: &EvaluateConfig,
    pred: &DataSet,
    truth: &DataSet,
) -> Result<Vec<(String, usize, usize)>> {
    if let Some(tc) = &cfg.truth_col {
        let ti = truth
            .column_index(tc)
            .with_context(|| format!("truth table lacks column '{tc}'"))?;
        let pc = cfg.pred_col.clone().unwrap_or_else(|| tc.clone());
        let pi = pred
            .column_index(&format!("{pc}_fused"))
            .or_else(|| pred.column_index(&pc))
            .with_context(|| format!("prediction table lacks column '{pc}'"))?;
        return Ok(vec![(tc.clone(), ti, pi)]);
    }
    let responses: Vec<(String, usize)> = truth
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.role == Role::Response)
        .map(|(i, c)| (c.name.clone(), i))
        .collect();
    if responses.is_empty() {
        bail!("truth table has no response columns");
    }
    if cfg.pred_col.is_some() && responses.len() > 1 {
        bail!("--pred-col with several truth responses is ambiguous; add --truth-col");
    }
    let mut pairs = Vec::new();
    for (name, ti) in responses {
        let pi = match &cfg.pred_col {
            Some(pc) => pred.column_index(pc),
            None => pred
                .column_index(&format!("{name}_fused"))
                .or_else(|| pred.column_index(&name)),
        }
        .with_context(|| {
            format!("no prediction column for truth response '{name}' (looked for '{name}_fused' and '{name}'); pass --pred-col/--truth-col")
        })?;
        pairs.push((name, ti, pi));
    }
    Ok(pairs)
}

/// Shared state columns must agree row by row, otherwise the tables are not
/// describing the same points and the metrics would be meaningless.
fn check_state_agreement(pred: &DataSet, truth: &DataSet) -> Result<()> {
    for (ti, col) in truth.columns().iter().enumerate() {
        if col.role != Role::State {
            continue;
        }
        let Some(pi) = pred.column_index(&col.name) else {
            continue;
        };
        for r in 0..truth.n_rows() {
            let a = truth.value(r, ti);
            let b = pred.value(r, pi);
            if (a - b).abs() > STATE_MATCH_TOL {
                bail!(
                    "state '{}' disagrees at row {r} ({a} vs {b}); rows are not aligned",
                    col.name
                );
            }
        }
    }
    Ok(())
}

pub fn run_evaluate(cfg: &EvaluateConfig) -> Result<()> {
    let t0 = Instant::now();
    let pred = DataSet::load_csv(&cfg.pred)?;
    let truth = DataSet::load_csv(&cfg.truth)?;
    if pred.n_rows() != truth.n_rows() {
        bail!(
            "row count mismatch: {} prediction rows vs {} truth rows",
            pred.n_rows(),
            truth.n_rows()
        );
    }
    check_state_agreement(&pred, &truth)?;
    let pairs = evaluation_pairs(cfg, &pred, &truth)?;

    let dir = cfg.out.join("reports");
    fs::create_dir_all(&dir)?;
    let mut f = BufWriter::new(fs::File::create(dir.join("metrics.csv"))?);
    writeln!(f, "column,rmse,mae,r2,constant_truth")?;
    for (name, ti, pi) in &pairs {
        let m = aerofuse_core::training::evaluate_metrics(&truth.column(*ti), &pred.column(*pi))?;
        writeln!(
            f,
            "{},{:.16e},{:.16e},{:.16e},{}",
            name, m.rmse, m.mae, m.r2, m.constant_truth
        )?;
        println!(
            "{name}: rmse {:.6e}, mae {:.6e}, r2 {:.6}",
            m.rmse, m.mae, m.r2
        );
    }
    f.flush()?;
    write_echo(&cfg.out, "evaluate", cfg)?;
    log_run(&cfg.out, "evaluate", t0.elapsed().as_secs_f64())
}

fn dataset_matrix(ds: &DataSet, cols: &[usize]) -> Mat {
    let mut m = Mat::zeros(ds.n_rows(), cols.len());
    for r in 0..ds.n_rows() {
        for (j, &c) in cols.iter().enumerate() {
            m[(r, j)] = ds.value(r, c);
        }
    }
    m
}

/// Predicts at every row of `sites`, optionally through the inducing-point
/// approximation, and returns the interval report.
fn surface_report(
    gp: &GpModel,
    sites: &Mat,
    inducing: Option<usize>,
    alpha: f64,
) -> Result<UncertaintyReport> {
    let subset = match inducing {
        Some(m) => Some(select_inducing(gp, m)?),
        None => None,
    };
    let mut means = Vec::with_capacity(sites.rows());
    let mut sigmas = Vec::with_capacity(sites.rows());
    for i in 0..sites.rows() {
        let x = sites.row(i);
        let (mean, var) = match &subset {
            Some(s) => fic_predict(gp, s, x)?,
            None => gp.predict(x)?,
        };
        means.push(mean);
        sigmas.push(var.max(0.0).sqrt());
    }
    Ok(UncertaintyReport::new(means, sigmas, alpha)?)
}

fn write_report(path: &Path, report: &UncertaintyReport) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    report.write_csv(&mut f)?;
    f.flush()?;
    Ok(())
}

pub fn run_uq(cfg: &UqConfig) -> Result<()> {
    let t0 = Instant::now();
    let hf = DataSet::load_csv(&cfg.hf)?;
    let fused = DataSet::load_csv(&cfg.fused)?;

    let state_names: Vec<String> = hf
        .columns()
        .iter()
        .filter(|c| c.role == Role::State)
        .map(|c| c.name.clone())
        .collect();
    if state_names.is_empty() {
        bail!("high-fidelity table has no state columns");
    }
    let hf_state_idx: Vec<usize> = state_names
        .iter()
        .map(|s| hf.column_index(s).unwrap())
        .collect();
    let mut fused_state_idx = Vec::new();
    for s in &state_names {
        let idx = fused
            .column_index(s)
            .with_context(|| format!("fused table lacks state column '{s}'"))?;
        fused_state_idx.push(idx);
    }
    let responses: Vec<(String, usize)> = hf
        .columns()
        .iter()
        .enumerate()
        .filter(|(_, c)| c.role == Role::Response)
        .map(|(i, c)| (c.name.clone(), i))
        .collect();
    if responses.is_empty() {
        bail!("high-fidelity table has no response columns");
    }

    let x_raw = dataset_matrix(&hf, &hf_state_idx);
    let sites = dataset_matrix(&fused, &fused_state_idx);
    let dir = cfg.out.join("reports");
    fs::create_dir_all(&dir)?;
    let mut summary = BufWriter::new(fs::File::create(dir.join("uq_summary.csv"))?);
    writeln!(summary, "dataset,column,u,alpha,n_test")?;

    for (name, ti) in &responses {
        let y_raw = hf.column(*ti);
        let gp_raw = GpModel::fit(&x_raw, &y_raw, NoiseMode::Optimize)?;
        let raw = surface_report(&gp_raw, &sites, None, cfg.alpha)?;
        write_report(&dir.join(format!("uq_raw_{name}.csv")), &raw)?;

        let fi = fused
            .column_index(&format!("{name}_fused"))
            .or_else(|| fused.column_index(name))
            .with_context(|| format!("fused table lacks column '{name}_fused' (or '{name}')"))?;
        let y_fused = fused.column(fi);
        let gp_fused = GpModel::fit(&sites, &y_fused, NoiseMode::Optimize)?;
        let fus = surface_report(&gp_fused, &sites, cfg.inducing, cfg.alpha)?;
        write_report(&dir.join(format!("uq_fused_{name}.csv")), &fus)?;

        writeln!(summary, "raw,{name},{:.16e},{},{}", raw.u, raw.alpha, raw.sigmas.len())?;
        writeln!(summary, "fused,{name},{:.16e},{},{}", fus.u, fus.alpha, fus.sigmas.len())?;
        println!("{name}: U(raw) {:.6e}, U(fused) {:.6e}", raw.u, fus.u);
    }
    summary.flush()?;
    write_echo(&cfg.out, "uq", cfg)?;
    log_run(&cfg.out, "uq", t0.elapsed().as_secs_f64())
}
