use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use vgssl::costmodel::{bench_mining as run_bench, write_bench_csv, BenchGrid};
use vgssl::encoder::{Checkpoint, EncoderEmbedder};
use vgssl::geodata::{synth_dataset, GeoDataset, SynthConfig};
use vgssl::gradcheck::{audit_flags, run_gradcheck, GradcheckConfig};
use vgssl::method::{Method, MethodConfig};
use vgssl::retrieval::{build_index, recall_at_n, DEFAULT_THRESHOLD_M};
use vgssl::trainer::{run_seeds, ExperimentReport, RunRecord, TrainConfig, Trainer};

use crate::manifest::RunManifest;

pub struct Global {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Global {
    /// Parses the config file, or the type's defaults without one.
    fn load<T: DeserializeOwned + Default>(&self) -> Result<T> {
        match &self.config {
            Some(p) => read_json(p),
            None => Ok(T::default()),
        }
    }

    /// Relative paths inside a config resolve against the config's directory.
    fn resolve(&self, p: &Path) -> PathBuf {
        match self.config.as_ref().and_then(|c| c.parent()) {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn read_json<T: DeserializeOwned>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
}

fn load_dataset(p: &Path) -> Result<GeoDataset> {
    if !p.exists() {
        bail!("dataset {} does not exist", p.display());
    }
    GeoDataset::read_csv(p).with_context(|| format!("loading dataset {}", p.display()))
}

pub fn synth(g: &Global) -> Result<()> {
    let mut cfg: SynthConfig = g.load()?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let ds = synth_dataset(&cfg).context("synth")?;
    let out = g.out_dir()?;
    ds.write_csv(&out.join("dataset.csv"))?;
    RunManifest::new("synth", &cfg, vec![cfg.seed], vec!["dataset.csv".into(), "dataset.meta.json".into()])?
        .write(out)?;
    println!(
        "places {} queries {} database {} feature_dim {}",
        cfg.n_places,
        ds.queries().len(),
        ds.database().len(),
        ds.feature_dim()
    );
    Ok(())
}

/// Shorthand for the method part of a training config: the standard feature set of
/// `method`, sized for the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Preset {
    method: Method,
    #[serde(default = "one")]
    proj_layers: usize,
    #[serde(default = "sixty_four")]
    embed_dim: usize,
    #[serde(default = "unit")]
    eta: f64,
    #[serde(default)]
    hidden_dims: Option<Vec<usize>>,
}

fn one() -> usize {
    1
}
fn sixty_four() -> usize {
    64
}
fn unit() -> f64 {
    1.0
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    dataset: PathBuf,
    #[serde(default = "one")]
    seeds: usize,
    /// When set, replaces `train.method`.
    #[serde(default)]
    preset: Option<Preset>,
    #[serde(default)]
    train: TrainConfig,
}

impl TrainFile {
    fn resolve_method(&mut self, input_dim: usize) -> Result<()> {
        if let Some(p) = &self.preset {
            let mut mc = MethodConfig::preset(p.method, input_dim, p.proj_layers, p.embed_dim, p.eta);
            if let Some(h) = &p.hidden_dims {
                mc.encoder.hidden_dims = h.clone();
                if p.method == Method::Triplet {
                    mc.encoder.embed_dim = mc.encoder.trunk_out();
                }
            }
            self.train.method = mc;
        }
        let want = self.train.method.encoder.input_dim;
        if want != input_dim {
            bail!("dimension mismatch: encoder input_dim {want} but dataset feature_dim {input_dim}");
        }
        self.train.validate().context("train config")?;
        Ok(())
    }
}

pub fn train(g: &Global, resume: Option<PathBuf>) -> Result<()> {
    let cfg_path = g.config.as_ref().ok_or_else(|| anyhow!("train needs --config"))?;
    let mut file: TrainFile = read_json(cfg_path)?;
    if let Some(s) = g.seed {
        file.train.seed = s;
    }
    let ds = load_dataset(&g.resolve(&file.dataset))?;
    file.resolve_method(ds.feature_dim())?;
    let out = g.out_dir()?;

    if let Some(ck_path) = resume {
        if file.seeds != 1 {
            bail!("resume continues a single run; set seeds to 1");
        }
        let ck = Checkpoint::read(&ck_path).with_context(|| format!("reading checkpoint {}", ck_path.display()))?;
        let mut t = Trainer::resume(file.train.clone(), &ds, &ck).context("resume")?;
        let rec = t.run().context("training")?;
        let dir = out.join(file.train.run_name());
        fs::create_dir_all(&dir)?;
        append_epochs(&rec, &dir.join("epochs.csv"))?;
        t.checkpoint().write(&dir.join("checkpoint.json"))?;
        RunManifest::new("train --resume", &file, vec![file.train.seed], run_outputs())?.write(&dir)?;
        println!("{} resumed at epoch {} and ran to {}", file.train.run_name(), ck.epoch, file.train.epochs);
        return Ok(());
    }

    let runs = run_seeds(&file.train, &ds, file.seeds).context("training")?;
    let mut records = Vec::new();
    for (rec, ck) in runs {
        let run_cfg =
            TrainFile { train: TrainConfig { seed: rec.seed, ..file.train.clone() }, seeds: 1, ..file.clone() };
        let dir = out.join(run_cfg.train.run_name());
        fs::create_dir_all(&dir)?;
        rec.write_csv(&dir.join("epochs.csv"))?;
        ck.write(&dir.join("checkpoint.json"))?;
        RunManifest::new("train", &run_cfg, vec![rec.seed], run_outputs())?.write(&dir)?;
        records.push(rec);
    }
    let report = ExperimentReport::from_runs(file.train.method.label(), &file.train.n_values, records);
    write_summary(&report, &out.join("summary.csv"))?;
    let mut outputs = vec!["summary.csv".to_string()];
    outputs.extend(report.runs.iter().map(|r| TrainConfig { seed: r.seed, ..file.train.clone() }.run_name()));
    RunManifest::new("train", &file, report.seeds.clone(), outputs)?.write(out)?;

    println!("{} over {} seed(s)", report.label, report.seeds.len());
    for (metric, ms) in &report.aggregate {
        println!("  {metric:<10} {:.4} ± {:.4}", ms.mean, ms.std);
    }
    Ok(())
}

fn run_outputs() -> Vec<String> {
    vec!["epochs.csv".into(), "checkpoint.json".into()]
}

fn write_summary(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "metric", "mean", "std", "median", "runs"])?;
    for (metric, ms) in &report.aggregate {
        let median = report.median(metric).unwrap_or(f64::NAN);
        w.write_record([
            report.label.clone(),
            metric.clone(),
            ms.mean.to_string(),
            ms.std.to_string(),
            median.to_string(),
            report.runs.len().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps earlier epochs of an existing CSV and appends the resumed ones.
fn append_epochs(rec: &RunRecord, path: &Path) -> Result<()> {
    let fresh = path.with_extension("csv.part");
    rec.write_csv(&fresh)?;
    let first = rec.epochs.first().map(|e| e.epoch).unwrap_or(usize::MAX);
    let mut new_r = csv::Reader::from_path(&fresh)?;
    let header = new_r.headers()?.clone();
    let mut rows: Vec<csv::StringRecord> = Vec::new();
    if path.exists() {
        let mut old = csv::Reader::from_path(path)?;
        if old.headers()? != &header {
            bail!("{} has different columns than the resumed run", path.display());
        }
        let col = header.iter().position(|h| h == "epoch").ok_or_else(|| anyhow!("epoch column missing"))?;
        for r in old.records() {
            let r = r?;
            let e: usize = r[col].parse().with_context(|| format!("bad epoch in {}", path.display()))?;
            if e < first {
                rows.push(r);
            }
        }
    }
    for r in new_r.records() {
        rows.push(r?);
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&header)?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush()?;
    fs::remove_file(&fresh)?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFile {
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    #[serde(default = "default_n")]
    n_values: Vec<usize>,
    #[serde(default = "default_threshold")]
    threshold_m: f64,
}

impl Default for EvalFile {
    fn default() -> Self {
        Self { checkpoint: None, dataset: None, n_values: default_n(), threshold_m: default_threshold() }
    }
}

fn default_n() -> Vec<usize> {
    vec![1, 5, 10]
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD_M
}

pub fn eval(g: &Global, checkpoint: Option<PathBuf>, dataset: Option<PathBuf>, n: Option<Vec<usize>>) -> Result<()> {
    let mut file: EvalFile = g.load()?;
    file.checkpoint = checkpoint.or(file.checkpoint.map(|p| g.resolve(&p)));
    file.dataset = dataset.or(file.dataset.map(|p| g.resolve(&p)));
    if let Some(n) = n {
        file.n_values = n;
    }
    let ck_path = file.checkpoint.clone().ok_or_else(|| anyhow!("eval needs a checkpoint"))?;
    let ds_path = file.dataset.clone().ok_or_else(|| anyhow!("eval needs a dataset"))?;
    let ck = Checkpoint::read(&ck_path).with_context(|| format!("reading checkpoint {}", ck_path.display()))?;
    let ds = load_dataset(&ds_path)?;
    if ck.encoder.input_dim != ds.feature_dim() {
        bail!(
            "dimension mismatch: checkpoint input_dim {} but dataset feature_dim {}",
            ck.encoder.input_dim,
            ds.feature_dim()
        );
    }
    let (state, _) = ck.restore()?;
    let emb = EncoderEmbedder { state: &state, cfg: &ck.encoder };
    let index = build_index(&ds, &emb)?;
    let report = recall_at_n(&ds, &index, &emb, &file.n_values, file.threshold_m)?;
    let out = g.out_dir()?;
    report.write_csv(&out.join("recall.csv"))?;
    RunManifest::new("eval", &file, vec![], vec!["recall.csv".into()])?.write(out)?;
    report.print_table(&mut std::io::stdout())?;
    Ok(())
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<Method>().map_err(|e| anyhow!("{e}")))
        .collect()
}

pub fn gradcheck(g: &Global, methods: Option<String>, audit: bool, flip: Option<String>) -> Result<()> {
    let mut cfg: GradcheckConfig = g.load()?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(f) = flip {
        cfg.flip_sign_for = Some(f.parse::<Method>().map_err(|e| anyhow!("{e}"))?);
    }
    let methods = match methods {
        Some(s) => parse_methods(&s)?,
        None => Method::ALL.to_vec(),
    };
    let rows = run_gradcheck(&methods, &cfg)?;
    let out = g.out_dir()?;

    let mut w = csv::Writer::from_path(out.join("gradcheck.csv"))?;
    w.write_record(["method", "instances", "degenerate_skipped", "parameters", "max_rel_error", "pass"])?;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "{:<8} {:>9} {:>7} {:>10} {:>13}  result",
        "method", "instances", "skipped", "parameters", "max rel err"
    )?;
    for r in &rows {
        w.write_record([
            r.method.to_string(),
            r.instances.to_string(),
            r.degenerate_skipped.to_string(),
            r.parameters.to_string(),
            r.max_rel_error.to_string(),
            r.pass.to_string(),
        ])?;
        writeln!(
            stdout,
            "{:<8} {:>9} {:>7} {:>10} {:>13.3e}  {}",
            r.method.to_string(),
            r.instances,
            r.degenerate_skipped,
            r.parameters,
            r.max_rel_error,
            if r.pass { "pass" } else { "FAIL" }
        )?;
    }
    w.flush()?;
    let mut outputs = vec!["gradcheck.csv".to_string()];

    let mut audit_fail = Vec::new();
    if audit {
        let mut w = csv::Writer::from_path(out.join("audit.csv"))?;
        w.write_record(["method", "feature", "expected", "detected"])?;
        writeln!(stdout)?;
        writeln!(stdout, "{:<8} {:>5} {:>5} {:>5} {:>5}  result", "method", "ME", "SG", "PR", "BN")?;
        for &m in &methods {
            let a = audit_flags(m, cfg.seed)?;
            let (e, d) = (a.expected, a.detected);
            let feats = [
                ("ME", e.momentum_target, d.momentum_target),
                ("SG", e.stop_gradient, d.stop_gradient),
                ("PR", e.predictor, d.predictor),
                ("BN", e.batchnorm, d.batchnorm),
            ];
            let mark = |x: bool, y: bool| match (x, y) {
                (true, true) => "yes",
                (false, false) => "-",
                (true, false) => "MISS",
                (false, true) => "XTRA",
            };
            for (name, x, y) in feats {
                w.write_record([m.to_string(), name.to_string(), x.to_string(), y.to_string()])?;
            }
            writeln!(
                stdout,
                "{:<8} {:>5} {:>5} {:>5} {:>5}  {}",
                m.to_string(),
                mark(feats[0].1, feats[0].2),
                mark(feats[1].1, feats[1].2),
                mark(feats[2].1, feats[2].2),
                mark(feats[3].1, feats[3].2),
                if a.pass { "pass" } else { "FAIL" }
            )?;
            if !a.pass {
                audit_fail.push(m.to_string());
            }
        }
        w.flush()?;
        outputs.push("audit.csv".into());
    }
    RunManifest::new("gradcheck", &cfg, vec![cfg.seed], outputs)?.write(out)?;

    let failed: Vec<String> = rows.iter().filter(|r| !r.pass).map(|r| r.method.to_string()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    if !audit_fail.is_empty() {
        bail!("feature audit failed for {}", audit_fail.join(", "));
    }
    Ok(())
}

pub fn bench_mining(g: &Global) -> Result<()> {
    let mut grid: BenchGrid = g.load()?;
    if let Some(s) = g.seed {
        grid.seed = s;
    }
    let rows = run_bench(&grid)?;
    let out = g.out_dir()?;
    write_bench_csv(&rows, &out.join("bench.csv"))?;
    RunManifest::new("bench-mining", &grid, vec![grid.seed], vec!["bench.csv".into()])?.write(out)?;
    let mut failed = Vec::new();
    for r in &rows {
        println!("{:<11} n_q={:<5} n_k={:<6} {}", r.mode.to_string(), r.n_q, r.n_k, r.check);
        if !r.check.pass {
            failed.push(format!("{} at n_q={}, n_k={}: {}", r.mode, r.n_q, r.n_k, r.check.failures().join(", ")));
        }
    }
    if !failed.is_empty() {
        bail!("cost model mismatch: {}", failed.join("; "));
    }
    Ok(())
}
