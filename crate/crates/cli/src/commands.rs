//! Subcommand bodies. Each writes its report to `out` and returns a
//! [`CliError`] whose exit code the binary forwards.

use std::io::Write;
use std::path::Path;

use tnaf_core::data::{
    load_matrix, make_splits, save_csv, DataError, DatasetMatrix, Format, StandardizationStats,
};
use tnaf_core::flow::{self, FlowModel, HeadType};
use tnaf_core::trainer::{self, evaluate};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::oracles;
use crate::CliError;

/// Raw-space mean log-likelihood and standard error of `raw` rows.
pub fn raw_log_likelihood(
    model: &FlowModel,
    stats: &StandardizationStats,
    raw: &DatasetMatrix,
) -> Result<(f64, f64), CliError> {
    if raw.cols() != model.dim() {
        return Err(DataError::DimensionMismatch {
            expected: model.dim(),
            found: raw.cols(),
        }
        .into());
    }
    let (ll, se) = evaluate(model, &stats.apply(raw)?)?;
    Ok((ll + stats.log_jacobian(), se))
}

fn ll_line(ll: f64, se: f64) -> String {
    format!("test_ll={ll:.6} ± {se:.6}")
}

/// Train from a config file and write the checkpoint. The reported test
/// log-likelihood is that of the model as stored (f32 parameters).
pub fn train(config_path: &Path, checkpoint_path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = RunConfig::load(config_path)?;
    let (splits, stats) = config.prepare()?;
    let mut model = FlowModel::init(config.model.clone(), config.train.seed)?;
    let mut io_err = None;
    trainer::train(&mut model, &splits, &config.train, |rec| {
        if let Err(e) = writeln!(out, "{rec}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let bytes = Checkpoint {
        config,
        stats,
        model,
    }
    .to_bytes();
    let stored = Checkpoint::from_bytes(&bytes)?;
    let (ll, se) = evaluate(&stored.model, &splits.test)?;
    std::fs::write(checkpoint_path, &bytes)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", checkpoint_path.display())))?;
    writeln!(
        out,
        "{} param_count={}",
        ll_line(ll + stored.stats.log_jacobian(), se),
        stored.model.param_count()
    )?;
    Ok(())
}

/// Raw test split of the run that produced `ck`.
pub fn stored_test_split(ck: &Checkpoint) -> Result<DatasetMatrix, CliError> {
    let matrix = ck.config.load_data()?;
    Ok(make_splits(&matrix, ck.config.data.fractions, ck.config.data.seed)?.test)
}

/// Evaluate a checkpoint on a raw data file, or on the training run's own
/// test split when no file is given.
pub fn eval(
    checkpoint_path: &Path,
    data: Option<&Path>,
    format: Format,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint_path)?;
    let raw = match data {
        Some(p) => load_matrix(p, format)?,
        None => stored_test_split(&ck)?,
    };
    let (ll, se) = raw_log_likelihood(&ck.model, &ck.stats, &raw)?;
    writeln!(out, "{}", ll_line(ll, se))?;
    Ok(())
}

fn column_names(dim: usize) -> Vec<String> {
    (1..=dim).map(|i| format!("x{i}")).collect()
}

/// Draw `n` samples in raw data space and write them as csv.
pub fn sample(checkpoint_path: &Path, n: usize, seed: u64, out_csv: &Path) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("-n must be at least 1".into()));
    }
    let ck = Checkpoint::load(checkpoint_path)?;
    let x = flow::sample(&ck.model, n, seed)?;
    let raw = ck.stats.invert(&DatasetMatrix::from_tensor(&x)?)?;
    save_csv(&raw.with_names(column_names(ck.model.dim()))?, out_csv)?;
    Ok(())
}

/// Map base-space points (csv) back to raw data space.
pub fn invert(checkpoint_path: &Path, input: &Path, out_csv: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint_path)?;
    let y = load_matrix(input, Format::Csv)?;
    if y.cols() != ck.model.dim() {
        return Err(DataError::DimensionMismatch {
            expected: ck.model.dim(),
            found: y.cols(),
        }
        .into());
    }
    let x = flow::invert(&ck.model, &y.to_tensor())?;
    let raw = ck.stats.invert(&DatasetMatrix::from_tensor(&x)?)?;
    save_csv(&raw.with_names(column_names(ck.model.dim()))?, out_csv)?;
    Ok(())
}

/// Model from a checkpoint, or freshly initialized from a config (seeded
/// with `train.seed`; `D` is read from the data when absent).
pub fn load_model(checkpoint: Option<&Path>, config: Option<&Path>) -> Result<FlowModel, CliError> {
    match (checkpoint, config) {
        (Some(p), None) => Ok(Checkpoint::load(p)?.model),
        (None, Some(p)) => {
            let mut cfg = RunConfig::load(p)?;
            if cfg.model.dim == 0 {
                cfg.prepare()?;
            }
            cfg.model.validate()?;
            Ok(FlowModel::init(cfg.model, cfg.train.seed)?)
        }
        _ => Err(CliError::Usage("give exactly one of -m <checkpoint> or -c <config>".into())),
    }
}

/// Run the oracle suite; fails with the number of failed oracles.
pub fn check(checkpoint: Option<&Path>, config: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_model(checkpoint, config)?;
    let results = oracles::run_all(&model, 0)?;
    for r in &results {
        writeln!(out, "{r}")?;
    }
    match results.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::OracleFailure(n)),
    }
}

/// Parameter manifest and count. With `with_psi`, the count also includes
/// the `D·psi_dim` pseudo-parameters emitted per input.
pub fn inspect(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    with_psi: bool,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let model = load_model(checkpoint, config)?;
    let cfg = &model.config;
    writeln!(
        out,
        "head_type={} D={} E={} heads={} layers={} mlp_hidden={}",
        cfg.head_type, cfg.dim, cfg.embed, cfg.heads, cfg.layers, cfg.mlp_hidden
    )?;
    for (name, p) in model.params.iter() {
        writeln!(out, "param {name} {:?}", p.value.shape())?;
    }
    let mut count = model.param_count();
    if with_psi {
        count += cfg.dim * cfg.psi_dim();
    }
    writeln!(out, "param_count={count}")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub head_type: HeadType,
    pub layers: usize,
    pub param_count: usize,
    pub best_step: u64,
    pub val_nll: f64,
    pub test_ll: f64,
    pub test_se: f64,
}

/// Train every (head type, depth) pair on the config's dataset and print a
/// comparison table. All runs share the same splits and seeds.
pub fn ablate(
    config_path: &Path,
    head_types: &[HeadType],
    layers: &[usize],
    out: &mut dyn Write,
) -> Result<Vec<AblationRow>, CliError> {
    if head_types.is_empty() || layers.is_empty() {
        return Err(CliError::Usage("ablation needs at least one head type and one depth".into()));
    }
    let mut base = RunConfig::load(config_path)?;
    let (splits, stats) = base.prepare()?;
    let mut rows = Vec::new();
    for &head_type in head_types {
        for &depth in layers {
            let mut cfg = base.model.clone();
            cfg.head_type = head_type;
            cfg.layers = depth;
            cfg.validate()?;
            let mut model = FlowModel::init(cfg, base.train.seed)?;
            let report = trainer::train(&mut model, &splits, &base.train, |_| {})?;
            let (ll, se) = evaluate(&model, &splits.test)?;
            rows.push(AblationRow {
                head_type,
                layers: depth,
                param_count: model.param_count(),
                best_step: report.best_step,
                val_nll: report.best_val_nll - stats.log_jacobian(),
                test_ll: ll + stats.log_jacobian(),
                test_se: se,
            });
        }
    }
    writeln!(out, "| head_type | layers | param_count | best_step | val_nll | test_ll |")?;
    writeln!(out, "|---|---|---|---|---|---|")?;
    for r in &rows {
        writeln!(
            out,
            "| {} | {} | {} | {} | {:.4} | {:.4} ± {:.4} |",
            r.head_type, r.layers, r.param_count, r.best_step, r.val_nll, r.test_ll, r.test_se
        )?;
    }
    Ok(rows)
}
