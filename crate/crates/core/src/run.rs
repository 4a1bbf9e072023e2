//! End-to-end commands driven by a [`RunConfig`]: prepare data and model,
//! train, evaluate a checkpoint, run an ablation variant, check gradients.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};
use sfad_tensor::{checkpoint, grad_check, GradCheckConfig, GradCheckReport, ParamStore, Tape};

use crate::config::{DataSource, GraphMode, RunConfig};
use crate::data::{
    load_predefined_graph, load_series, make_synthetic, split_and_window, Normalizer, Splits,
    SyntheticParams, TrafficSeries,
};
use crate::error::{Error, Result, StageExt};
use crate::model::Sfadnet;
use crate::train::{evaluate, masked_mae_loss, stream_rng, train, EpochRecord, MetricReport, Variant};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Data, splits and an uninitialised network for one config.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub series: Arc<TrafficSeries>,
    pub synthetic: Option<SyntheticParams>,
    pub splits: Splits,
    pub net: Sfadnet,
}

impl Prepared {
    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        self.net.init_params(&mut stream_rng(seed, 0))
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (series, synthetic) = match cfg.data.source {
        DataSource::Synthetic => {
            let (s, p) = make_synthetic(&cfg.synthetic).stage("data")?;
            (s, Some(p))
        }
        DataSource::Csv => {
            let data = cfg.data.series.as_ref().expect("validated");
            let meta = cfg.meta_path().expect("validated");
            (load_series(data, &meta).stage("data")?, None)
        }
    };
    if series.channels() != cfg.model.channels {
        return Err(Error::config(format!(
            "series has {} channels, model.channels is {}",
            series.channels(),
            cfg.model.channels
        )));
    }
    let series = Arc::new(series);
    let splits = split_and_window(series.clone(), cfg.model.history, cfg.model.horizon, &cfg.data.split)
        .stage("windowing")?;
    let normalizer = Normalizer::fit(&splits.train).stage("normalization")?;
    let predefined = match (&cfg.data.graph, cfg.graph.mode) {
        (Some(path), GraphMode::Predefined) => {
            Some(load_predefined_graph(path, series.nodes(), cfg.data.graph_directed)?.adjacency)
        }
        _ => None,
    };
    let net = Sfadnet::new(
        cfg.model.clone(),
        cfg.graph.clone(),
        series.nodes(),
        series.steps_per_day,
        normalizer,
        predefined,
    )?;
    Ok(Prepared { series, synthetic, splits, net })
}

/// What a training run produced on disk and in memory.
#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub param_count: usize,
    pub val: MetricReport,
    pub test: MetricReport,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn manifest(cfg: &RunConfig, command: &str, overrides: &[String], prepared: &Prepared, extra: Value) -> Value {
    let config: serde_json::Map<String, Value> =
        cfg.entries().into_iter().map(|(k, v)| (k.to_string(), Value::String(v))).collect();
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "overrides": overrides,
        "series": {
            "name": prepared.series.name,
            "steps": prepared.series.steps(),
            "nodes": prepared.series.nodes(),
            "steps_per_day": prepared.series.steps_per_day,
        },
        "synthetic": prepared.synthetic,
        "normalizer": prepared.net.normalizer,
        "param_count": prepared.net.param_count(),
        "head_dim": prepared.net.head_dim(),
        "extra": extra,
    })
}

/// Trains from `cfg`, writing checkpoint, history, report and manifest into
/// `out_dir`.
pub fn run_train(cfg: &RunConfig, overrides: &[String], out_dir: &Path) -> Result<TrainReport> {
    run_train_as(cfg, overrides, out_dir, "train", Value::Null)
}

fn run_train_as(
    cfg: &RunConfig,
    overrides: &[String],
    out_dir: &Path,
    command: &str,
    extra: Value,
) -> Result<TrainReport> {
    let prepared = prepare(cfg)?;
    create_dir(out_dir)?;
    write_json(&out_dir.join(MANIFEST_FILE), &manifest(cfg, command, overrides, &prepared, extra))?;

    let history_path = out_dir.join(HISTORY_FILE);
    let file = fs::File::create(&history_path).map_err(|e| Error::io(&history_path, e))?;
    let mut history = BufWriter::new(file);
    let mut write_err: Option<std::io::Error> = None;
    let params = prepared.init_params(cfg.train.seed);
    let outcome = train(&prepared.net, params, &prepared.splits, &cfg.train, |r: &EpochRecord| {
        let line = serde_json::to_string(r).expect("record serializes");
        if write_err.is_none() {
            if let Err(e) = writeln!(history, "{line}").and_then(|_| history.flush()) {
                write_err = Some(e);
            }
        }
    })
    .stage("training")?;
    drop(history);
    if let Some(e) = write_err {
        return Err(Error::io(history_path, e));
    }

    checkpoint::save(&outcome.best_params, &out_dir.join(CHECKPOINT_FILE))?;
    let test = evaluate(
        &prepared.net,
        &outcome.best_params,
        &prepared.splits.test,
        cfg.train.batch_size,
        cfg.train.mask_threshold,
    )?;
    let report = TrainReport {
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        stopped_early: outcome.stopped_early,
        param_count: prepared.net.param_count(),
        val: outcome.best_val,
        test,
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub val: MetricReport,
    pub test: MetricReport,
}

/// Evaluates a saved checkpoint on the validation and test splits.
pub fn run_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalReport> {
    let prepared = prepare(cfg)?;
    let loaded: ParamStore<f32> = checkpoint::load(checkpoint_path)?;
    let mut params = prepared.init_params(cfg.train.seed);
    params.load_from(&loaded).map_err(|e| Error::config(format!("checkpoint does not fit model: {e}")))?;
    if loaded.len() != params.len() {
        return Err(Error::config(format!(
            "checkpoint holds {} tensors, model has {}",
            loaded.len(),
            params.len()
        )));
    }
    let (bs, thr) = (cfg.train.batch_size, cfg.train.mask_threshold);
    Ok(EvalReport {
        checkpoint: checkpoint_path.to_path_buf(),
        val: evaluate(&prepared.net, &params, &prepared.splits.val, bs, thr)?,
        test: evaluate(&prepared.net, &params, &prepared.splits.test, bs, thr)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub patterns: usize,
    pub graph_mode: GraphMode,
    #[serde(flatten)]
    pub train: TrainReport,
}

/// Trains one ablation variant of `cfg` into `out_dir`.
pub fn run_ablation(
    cfg: &RunConfig,
    variant: Variant,
    overrides: &[String],
    out_dir: &Path,
) -> Result<AblationReport> {
    let mut cfg = cfg.clone();
    variant.apply(&mut cfg)?;
    let train = run_train_as(&cfg, overrides, out_dir, "ablate", json!({ "variant": variant }))?;
    let report = AblationReport {
        variant,
        patterns: cfg.model.patterns,
        graph_mode: cfg.graph.mode,
        train,
    };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Finite-difference check of the full masked-MAE training loss at 64-bit
/// on the first `gradcheck.windows` training windows, dropout included
/// (the mask is re-drawn identically for every evaluation).
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    let prepared = prepare(cfg)?;
    let net = &prepared.net;
    let params: ParamStore<f64> = net.init_params(&mut stream_rng(cfg.train.seed, 0));
    let count = cfg.gradcheck.windows.min(prepared.splits.train.len());
    let indices: Vec<usize> = (0..count).collect();
    let batch = prepared.splits.train.batch::<f64>(&indices, &net.normalizer);
    let horizon = net.model.horizon;
    let check = GradCheckConfig { h: cfg.gradcheck.h, tol: cfg.gradcheck.tol, floor: cfg.gradcheck.floor };
    grad_check(
        &params,
        |tape: &Tape<f64>, bound| -> Result<_> {
            let x = tape.constant(batch.x.clone());
            let mut rng = stream_rng(cfg.train.seed, 7);
            let out = net.forward(tape, &params, bound, x, &batch.tod, &batch.dow, true, &mut rng)?;
            Ok(masked_mae_loss(tape, out.prediction, &batch.target, horizon)?.loss)
        },
        check,
    )
}
