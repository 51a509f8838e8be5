use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use gadmore::align::align_features;
use gadmore::graph::{load_graph_dir, read_labels, write_graph_dir};
use gadmore::inference::{
    histogram_to_csv, metrics, read_scores_tsv, report_from_scores, score_nodes, scores_to_tsv, Metrics,
};
use gadmore::model::ModelState;
use gadmore::sweep::{sweep, sweep_to_csv, SweepConfig};
use gadmore::synth::{gen_synth, SynthKind, SynthParams, SynthSpec};
use gadmore::training::train;
use gadmore::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    spec: &'a SynthSpec,
    num_nodes: usize,
    num_edges: usize,
    num_anomalies: usize,
    anomalies: Vec<usize>,
}

pub fn synth(kind: SynthKind, n: usize, seed: u64, d0: usize, fraction: f64, out: &Path) -> Result<()> {
    let spec = SynthSpec {
        kind,
        n,
        d0,
        anomaly_fraction: fraction,
        seed,
        params: SynthParams::default(),
    };
    let g = gen_synth(&spec)?;
    write_graph_dir(&g, out)?;
    let labels = g.labels().expect("synthetic graphs are labeled");
    let anomalies: Vec<usize> = (0..n).filter(|&i| labels[i] == 1).collect();
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            spec: &spec,
            num_nodes: n,
            num_edges: g.num_edges(),
            num_anomalies: anomalies.len(),
            anomalies,
        },
    )?;
    eprintln!("{kind}: {n} nodes, {} edges written to {}", g.num_edges(), out.display());
    Ok(())
}

pub fn align(config: &Path, graph: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let g = load_graph_dir(graph)?;
    let aligned = align_features(&g, &cfg.align)?;
    aligned.export(out)?;
    eprintln!("aligned {}×{} features written to {}", aligned.matrix.nrows(), aligned.matrix.ncols(), out.display());
    Ok(())
}

pub fn train_cmd(config: &Path, out: Option<&Path>, seed: Option<u64>, log: Option<&Path>) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if cfg.sources.is_empty() {
        return Err(Error::Config("config lists no source graphs".into()));
    }
    let out_dir = cfg.out_dir.clone();
    let model_path = match (out, &out_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(d)) => d.join("model.json"),
        (None, None) => return Err(Error::Config("pass --out or set out_dir in the config".into())),
    };
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| model_path.with_extension("log.jsonl"));
    let sources = cfg
        .sources
        .iter()
        .map(|p| load_graph_dir(p))
        .collect::<Result<Vec<_>>>()?;
    let state = ModelState::init(cfg.model.clone(), cfg.align.clone(), cfg.router.clone(), cfg.train.clone())?;

    if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let epochs = cfg.train.epochs;
    let state = train(&sources, state, |rec| {
        serde_json::to_writer(&mut log_file, rec)?;
        log_file.write_all(b"\n")?;
        if rec.graph + 1 == sources.len() && rec.batch == 0 {
            eprintln!("epoch {}/{epochs}: total {:.6}", rec.epoch + 1, rec.total);
        }
        Ok(())
    })?;
    log_file.flush()?;
    state.save(&model_path)?;
    eprintln!("checkpoint written to {}", model_path.display());

    for (i, target) in cfg.targets.iter().enumerate() {
        let dir = out_dir.clone().unwrap_or_else(|| model_path.parent().map(Path::to_path_buf).unwrap_or_default());
        let name = target.file_name().map_or_else(|| format!("target{i}"), |s| s.to_string_lossy().into_owned());
        score(&model_path, target, &dir.join(format!("{name}.scores.tsv")), None, 50)?;
    }
    Ok(())
}

/// Sibling path `scores.tsv` → `scores.<suffix>`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    out.with_extension(suffix)
}

pub fn score(model: &Path, graph: &Path, out: &Path, config: Option<&Path>, bins: usize) -> Result<Option<Metrics>> {
    let mut state = ModelState::load(model)?;
    if let Some(c) = config {
        let cfg = RunConfig::load(c)?;
        if cfg.align.total_dim != state.feature_dim() {
            return Err(Error::Dimension(format!(
                "config aligns graphs to width {} but the checkpoint expects {}",
                cfg.align.total_dim,
                state.feature_dim()
            )));
        }
        state.align = cfg.align;
    }
    let g = load_graph_dir(graph)?;
    let scores = score_nodes(&g, &state)?;
    write_text(out, &scores_to_tsv(&scores))?;
    let report = report_from_scores(scores, g.labels(), bins)?;
    write_text(&sibling(out, "hist.csv"), &histogram_to_csv(&report.histogram))?;
    if let Some(m) = &report.metrics {
        write_json(&sibling(out, "metrics.json"), m)?;
        eprintln!("{}: AUROC {:.4}, AUPRC {:.4}", graph.display(), m.auroc, m.auprc);
    }
    eprintln!("{} scores written to {}", report.scores.len(), out.display());
    Ok(report.metrics)
}

pub fn eval(scores: &Path, labels: &Path, out: Option<&Path>) -> Result<Metrics> {
    let s = read_scores_tsv(scores)?;
    let l = read_labels(labels, s.len())?;
    let m = metrics(&s, &l)?;
    let text = serde_json::to_string_pretty(&m)?;
    match out {
        Some(p) => write_text(p, &(text + "\n"))?,
        None => println!("{text}"),
    }
    Ok(m)
}

pub fn sweep_cmd(graph: &Path, cfg: &SweepConfig, out: &Path) -> Result<()> {
    let g = load_graph_dir(graph)?;
    let rows = sweep(&g, cfg)?;
    write_text(out, &sweep_to_csv(&rows))?;
    for r in &rows {
        eprintln!("κ = {:>5}: AUROC {:.4}", r.kappa, r.auroc);
    }
    Ok(())
}
