use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hiam::aggregation::{build_compression_maps, build_dataset, load_dataset, load_maps, save_dataset, save_maps, Dataset};
use hiam::config::ExperimentConfig;
use hiam::evaluation::{evaluate as score, HistoricalAverage, Report};
use hiam::hiam::{InputVariant, InteractionMode};
use hiam::synthgen::{generate_log, read_log, write_log, Transaction};
use hiam::topology::{load_graph, MetroGraph};
use hiam::training::{self, fit_norm_stats, history_csv, load_model, read_history_csv, save_model, NormStats};
use hiam::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::plots;
use crate::Common;

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    io(path, fs::write(path, body))
}

fn setup(common: &Common, command: &str) -> Result<Ctx> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    io(&common.out, fs::create_dir_all(common.out.join("meta")))?;
    // Run timestamps live only here so every other artifact is reproducible.
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "config": common.config,
        "seed": cfg.seed,
        "finished_unix": now,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let path = common.out.join("meta").join(format!("{command}.json"));
    write(&path, serde_json::to_string_pretty(&meta).expect("json") + "\n")?;
    Ok(Ctx { cfg, out: common.out.clone() })
}

impl Ctx {
    fn graph(&self) -> Result<MetroGraph> {
        load_graph(&self.cfg.graph_path())
    }

    fn dataset(&self) -> Result<Dataset> {
        load_dataset(&self.out.join("dataset"))
    }

    fn norm(&self) -> Result<NormStats> {
        let path = self.out.join("norm.json");
        let text = io(&path, fs::read_to_string(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse { path, line: e.line(), message: e.to_string() })
    }

    fn baseline(&self, ds: &Dataset) -> Result<HistoricalAverage> {
        HistoricalAverage::fit(&ds.od, &ds.do_, ds.options.splits.train.clone(), ds.options.intervals_per_day)
    }
}

pub fn simulate(common: &Common) -> Result<()> {
    let ctx = setup(common, "simulate")?;
    let graph = ctx.graph()?;
    let log = generate_log(&ctx.cfg.sim_config(&graph))?;
    write_log(&log, &ctx.out.join("log.csv"))?;
    log::info!("simulated {} trips", log.len());
    Ok(())
}

pub fn preprocess(common: &Common, log_path: Option<&Path>) -> Result<()> {
    let ctx = setup(common, "preprocess")?;
    let graph = ctx.graph()?;
    let log = read_log(&log_path.map(Path::to_path_buf).unwrap_or_else(|| ctx.out.join("log.csv")))?;
    let splits = ctx.cfg.splits();
    let training: Vec<Transaction> = log.iter().copied().filter(|t| t.entry_interval < splits.train.end).collect();
    let maps = build_compression_maps(&training, graph.station_count(), ctx.cfg.data.k)?;
    save_maps(&maps, &ctx.out)?;
    let ds = build_dataset(&log, &maps, &ctx.cfg.dataset_options())?;
    save_dataset(&ds, &ctx.out.join("dataset"))?;
    let norm = fit_norm_stats(&ds.train)?;
    write(&ctx.out.join("norm.json"), serde_json::to_string_pretty(&norm).expect("json") + "\n")?;
    log::info!("{} train / {} val / {} test samples", ds.train.len(), ds.val.len(), ds.test.len());
    Ok(())
}

pub fn train(common: &Common) -> Result<()> {
    let ctx = setup(common, "train")?;
    let graph = ctx.graph()?;
    let ds = ctx.dataset()?;
    // The maps must exist; loading them validates the preprocess output.
    load_maps(&ctx.out)?;
    let norm = ctx.norm()?;
    let model_cfg = ctx.cfg.model_config(graph.station_count());
    let out = training::train(&model_cfg, &graph, &ds.train, &ds.val, &norm, &ctx.cfg.train_config())?;
    save_model(&ctx.out.join("model.ckpt"), &out.best, &norm, out.best_epoch, out.best_score)?;
    write(&ctx.out.join("history.csv"), history_csv(&out.history))?;
    Ok(())
}

pub fn evaluate(common: &Common) -> Result<()> {
    let ctx = setup(common, "evaluate")?;
    let graph = ctx.graph()?;
    let ds = ctx.dataset()?;
    let (model, manifest) = load_model(&ctx.out.join("model.ckpt"))?;
    let report = score(&model, &graph, &manifest.norm, &ds.test, &ctx.baseline(&ds)?)?;
    report.save(&ctx.out)?;
    let plot_dir = ctx.out.join("plots");
    io(&plot_dir, fs::create_dir_all(&plot_dir))?;
    plots::mape_bars(&report, &plot_dir.join("mape.svg"))?;
    let history = ctx.out.join("history.csv");
    if history.exists() {
        plots::loss_curve(&read_history_csv(&history)?, &plot_dir.join("loss.svg"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: InputVariant,
    pub interaction: InteractionMode,
    pub best_epoch: usize,
    pub report: Report,
}

pub fn ablate(common: &Common) -> Result<()> {
    let ctx = setup(common, "ablate")?;
    let graph = ctx.graph()?;
    let ds = ctx.dataset()?;
    let norm = ctx.norm()?;
    let baseline = ctx.baseline(&ds)?;
    let mut rows = Vec::new();
    for interaction in InteractionMode::ALL {
        for variant in InputVariant::ALL {
            let mut model_cfg = ctx.cfg.model_config(graph.station_count()).with_variant(variant);
            model_cfg.interaction = interaction;
            log::info!("training {} with {} interaction", variant.label(), interaction.label());
            let out = training::train(&model_cfg, &graph, &ds.train, &ds.val, &norm, &ctx.cfg.train_config())?;
            let report = score(&out.best, &graph, &norm, &ds.test, &baseline)?;
            rows.push(AblationRow { variant, interaction, best_epoch: out.best_epoch, report });
        }
    }
    write(&ctx.out.join("ablation.json"), serde_json::to_string_pretty(&rows).expect("json") + "\n")?;
    write(&ctx.out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(())
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("interaction,variant,horizon,od_mape,do_mape\n");
    for r in rows {
        for h in &r.report.horizons {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.interaction.label(),
                r.variant.label(),
                h.horizon,
                cell(h.od_mape),
                cell(h.do_mape)
            );
        }
    }
    out
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

fn report_table(report: &Report) -> String {
    let mut out = String::from("| Horizon | OD | OD (HA) | DO | DO (HA) | OD top K-1 | OD remainder |\n");
    out.push_str("|---|---|---|---|---|---|---|\n");
    for h in &report.horizons {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            h.horizon,
            pct(h.od_mape),
            pct(h.ha_od_mape),
            pct(h.do_mape),
            pct(h.ha_do_mape),
            pct(h.od_mape_topk),
            pct(h.od_mape_remainder)
        );
    }
    let _ = writeln!(
        out,
        "| mean | {} | {} | {} | {} | | |",
        pct(report.od_mape_mean),
        pct(report.ha_od_mape_mean),
        pct(report.do_mape_mean),
        pct(report.ha_do_mape_mean)
    );
    out
}

/// One table per interaction mode; columns follow `InputVariant::ALL`.
fn ablation_tables(rows: &[AblationRow], metric: fn(&hiam::evaluation::HorizonMetrics) -> Option<f64>) -> String {
    let mut out = String::new();
    for mode in InteractionMode::ALL {
        let group: Vec<&AblationRow> = rows.iter().filter(|r| r.interaction == mode).collect();
        if group.is_empty() {
            continue;
        }
        let _ = writeln!(out, "\nInteraction: `{}`\n", mode.label());
        out.push_str("| Horizon |");
        for r in &group {
            let _ = write!(out, " {} |", r.variant.label());
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(group.len()));
        out.push('\n');
        let horizons = group[0].report.horizons.len();
        for h in 0..horizons {
            let _ = write!(out, "| {} |", h + 1);
            for r in &group {
                let _ = write!(out, " {} |", pct(metric(&r.report.horizons[h])));
            }
            out.push('\n');
        }
    }
    out
}

pub fn report(common: &Common) -> Result<()> {
    let ctx = setup(common, "report")?;
    let mut md = String::from("# Results\n");
    let mut found = false;
    let report_path = ctx.out.join("report.json");
    if report_path.exists() {
        found = true;
        md.push_str("\n## Test split\n\n");
        md.push_str(&report_table(&Report::load(&report_path)?));
    }
    let ablation_path = ctx.out.join("ablation.json");
    if ablation_path.exists() {
        found = true;
        let text = io(&ablation_path, fs::read_to_string(&ablation_path))?;
        let rows: Vec<AblationRow> = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: ablation_path.clone(), line: e.line(), message: e.to_string() })?;
        md.push_str("\n## Ablation: OD MAPE\n");
        md.push_str(&ablation_tables(&rows, |h| h.od_mape));
        md.push_str("\n## Ablation: DO MAPE\n");
        md.push_str(&ablation_tables(&rows, |h| h.do_mape));
    }
    if !found {
        return Err(Error::EmptyInput("no report.json or ablation.json in the output directory"));
    }
    write(&ctx.out.join("report.md"), md)
}
