//! Command bodies. Each returns a short summary for stdout and writes its
//! artifacts, the effective config and a run manifest into the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use tsfm_peft::adapters::{count_trainable_params, format_millions, Adapter};
use tsfm_peft::metrics::evaluate;
use tsfm_peft::model::{ForecastModel, WeightAdapter};
use tsfm_peft::numerics::Rng;
use tsfm_peft::pipeline::{
    generate_with_episodes, ingest_anchors, ingest_csv, preprocess, default_episodes, write_anchors_csv,
    write_records_csv, SplitDataset,
};
use tsfm_peft::trainer::{finetune, pretrain, sweep, sweep_budget, ExperimentLog, ExperimentSpec};
use tsfm_peft::{Error, Result};

use crate::config::RunConfig;
use crate::Command;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates the run directory and records the effective configuration.
fn open_run(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_text(&dir.join("config.toml"), &cfg.to_toml()?)?;
    let manifest = format!(
        "command = {command:?}\nseed = {}\nversion = {:?}\n",
        cfg.seed,
        env!("CARGO_PKG_VERSION")
    );
    write_text(&dir.join("manifest.toml"), &manifest)?;
    Ok(dir)
}

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<String> {
    match command {
        Command::Generate(_) => generate(cfg),
        Command::Preprocess(_) => run_preprocess(cfg),
        Command::Pretrain(_) => run_pretrain(cfg),
        Command::Finetune(_) => run_finetune(cfg),
        Command::Evaluate(_) => run_evaluate(cfg),
        Command::Sweep(_) => run_sweep(cfg),
        Command::CountParams(_) => Ok(count_params(cfg)),
    }
}

pub fn generate(cfg: &RunConfig) -> Result<String> {
    let dir = open_run(cfg, "generate")?;
    let g = &cfg.generate;
    let episodes = g.episodes.unwrap_or_else(|| default_episodes(g.patients).max(g.patients));
    let mut rng = Rng::new(cfg.seed).child_named("generate");
    let data = generate_with_episodes(g.patients, episodes, &mut rng, g.domain);
    write_records_csv(&dir.join("vitals.csv"), &data.records)?;
    write_anchors_csv(&dir.join("anchors.csv"), &data.anchors)?;
    Ok(format!(
        "wrote {} records and {} anchors for {} patients to {}",
        data.records.len(),
        data.anchors.len(),
        g.patients,
        dir.display()
    ))
}

pub fn run_preprocess(cfg: &RunConfig) -> Result<String> {
    let records = cfg.require(&cfg.paths.records, "records")?;
    let anchors = cfg.require(&cfg.paths.anchors, "anchors")?;
    let dir = open_run(cfg, "preprocess")?;
    let ingested = ingest_csv(records)?;
    let anchors = ingest_anchors(anchors)?;
    let mut rejects = String::from("line,reason\n");
    for r in &ingested.rejects {
        rejects.push_str(&format!("{},{:?}\n", r.line, r.reason));
    }
    write_text(&dir.join("rejects.csv"), &rejects)?;
    let mut rng = Rng::new(cfg.seed).child_named("preprocess");
    let data = preprocess(&ingested.records, &anchors, &cfg.pipeline, &mut rng)?;
    data.save(&dir.join("dataset.bin"))?;
    let s = &data.splits;
    let summary = format!(
        "records={} rejected_rows={} anchors={} dropped_windows={} train={} val={} test={}",
        ingested.records.len(),
        ingested.rejects.len(),
        anchors.len(),
        data.dropped,
        s.train.len(),
        s.val.len(),
        s.test.len()
    );
    write_text(&dir.join("summary.txt"), &format!("{summary}\n"))?;
    Ok(summary)
}

fn load_dataset(cfg: &RunConfig) -> Result<SplitDataset> {
    SplitDataset::load(cfg.require(&cfg.paths.dataset, "dataset")?)
}

/// The configured base weights, or a freshly initialized model of the
/// configured preset when no base is given.
fn load_base(cfg: &RunConfig) -> Result<ForecastModel> {
    let model = match &cfg.paths.base {
        Some(p) => ForecastModel::load(p)?,
        None => ForecastModel::new(cfg.model.config(), &mut Rng::new(cfg.seed).child_named("init"))?,
    };
    if model.config() != &cfg.model.config() {
        return Err(Error::Config(format!(
            "base weights do not match model.preset = {}",
            cfg.model.preset.name()
        )));
    }
    Ok(model)
}

pub fn run_pretrain(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let dir = open_run(cfg, "pretrain")?;
    let model = load_base(cfg)?;
    let mut log = ExperimentLog::new();
    let out = pretrain(model, &data, &cfg.train, &mut log);
    log.save(&dir.join("log.txt"))?;
    let out = out?;
    out.model.save(&dir.join("base.bin"))?;
    Ok(format!(
        "pretrained {} steps: val_loss {:.4} -> {:.4}; weights in {}",
        out.losses.len(),
        out.initial_val_loss,
        out.final_val_loss,
        dir.join("base.bin").display()
    ))
}

pub fn run_finetune(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let dir = open_run(cfg, "finetune")?;
    let base = load_base(cfg)?;
    let mut log = ExperimentLog::new();
    let out = finetune(&base, &cfg.adapter, &data, &cfg.train, &cfg.eval.config(), &mut log);
    log.save(&dir.join("log.txt"))?;
    let out = out?;
    out.adapter.save(&out.model, &dir.join("adapter.bin"))?;
    write_text(&dir.join("report.txt"), &out.report.to_text())?;
    out.report.table().save_csv(&dir.join("metrics.csv"))?;
    write_text(&dir.join("budget.txt"), &format!("{}\n", out.budget))?;
    let lr = out.learning_rate.map_or("none".to_string(), |l| format!("{l:e}"));
    Ok(format!(
        "{}: lr={lr} steps={} trainable={} ({}M)\n{}",
        cfg.adapter.method.name(),
        out.steps,
        out.budget.total,
        format_millions(out.budget.total),
        out.report
    ))
}

pub fn run_evaluate(cfg: &RunConfig) -> Result<String> {
    let data = load_dataset(cfg)?;
    let dir = open_run(cfg, "evaluate")?;
    let mut model = load_base(cfg)?;
    let adapter = match &cfg.paths.adapter {
        Some(p) => Some(Adapter::load(p, &mut model)?),
        None => None,
    };
    let windows = data.splits.get(cfg.eval.split);
    let windows = match cfg.eval.max_windows {
        0 => windows,
        n => &windows[..n.min(windows.len())],
    };
    let mut rng = Rng::new(cfg.seed).child_named("test");
    let report = evaluate(
        &model,
        adapter.as_ref().map(|a| a as &dyn WeightAdapter),
        windows,
        &cfg.eval.config(),
        &mut rng,
    )?;
    write_text(&dir.join("report.txt"), &report.to_text())?;
    report.table().save_csv(&dir.join("metrics.csv"))?;
    Ok(report.to_string())
}

fn spec(cfg: &RunConfig) -> ExperimentSpec {
    ExperimentSpec {
        preset: cfg.model.preset,
        adapter: cfg.adapter.clone(),
        train: cfg.train.clone(),
        eval: cfg.eval.config(),
        axis: cfg.sweep.axis,
        values: cfg.sweep.values.clone(),
    }
}

pub fn run_sweep(cfg: &RunConfig) -> Result<String> {
    let spec = spec(cfg);
    if cfg.sweep.dry_run {
        let table = sweep_budget(&spec)?;
        let dir = open_run(cfg, "sweep")?;
        table.save_csv(&dir.join("budget.csv"))?;
        return table.to_csv();
    }
    let data = load_dataset(cfg)?;
    let dir = open_run(cfg, "sweep")?;
    let base = load_base(cfg)?;
    let mut log = ExperimentLog::new();
    let table = sweep(&spec, &base, &data, &mut log);
    log.save(&dir.join("log.txt"))?;
    let table = table?;
    table.save_csv(&dir.join("sweep.csv"))?;
    table.to_csv()
}

/// `count (millions M)` followed by the per-group breakdown.
pub fn count_params(cfg: &RunConfig) -> String {
    count_trainable_params(&cfg.adapter, &cfg.model.config()).to_string().trim_end().to_string()
}
