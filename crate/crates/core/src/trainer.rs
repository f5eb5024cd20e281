//! Training loop, optimizer and multi-seed orchestration.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::costmodel::CostLedger;
use crate::encoder::{init_encoder, Bindings, BnUpdate, Branch, Checkpoint, EncoderEmbedder, EncoderState};
use crate::error::{Error, Result, ResultExt};
use crate::geodata::{GeoDataset, GeoSample};
use crate::losses::{compute_loss, LossOutput, Views};
use crate::method::{Method, MethodConfig};
use crate::retrieval::{build_index, recall_at_n, RecallReport, DEFAULT_THRESHOLD_M};
use crate::sampling::{account_pairs, build_pairs, mine_triplets, Pair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: MethodConfig,
    pub batch_size: usize,
    pub queries_per_epoch: usize,
    pub epochs: usize,
    /// Falls back to the method's default rate when absent.
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 evaluates only after the last.
    pub eval_every: usize,
    pub n_values: Vec<usize>,
    pub threshold_m: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: MethodConfig::default(),
            batch_size: 64,
            queries_per_epoch: 256,
            epochs: 10,
            lr: None,
            weight_decay: 1e-6,
            decoupled_weight_decay: false,
            seed: 0,
            eval_every: 1,
            n_values: vec![1, 5, 10],
            threshold_m: DEFAULT_THRESHOLD_M,
        }
    }
}

impl TrainConfig {
    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| self.method.method().default_lr())
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be a finite non-negative rate, got {lr}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.queries_per_epoch == 0 {
            return Err(Error::invalid("queries_per_epoch must be positive"));
        }
        Ok(())
    }

    /// Directory-friendly run name: strategy label plus seed.
    pub fn run_name(&self) -> String {
        format!("{}-seed{}", self.method.label(), self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Apply weight decay to the parameters directly instead of adding it
    /// to the gradient.
    pub decoupled: bool,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, decoupled: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(params: &[&mut Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.check_same_shape(g, "adam_step")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = if cfg.decoupled { gv } else { gv + cfg.weight_decay * *pv };
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            if cfg.decoupled {
                *pv -= cfg.lr * cfg.weight_decay * *pv;
            }
            *pv -= cfg.lr * update;
        }
    }
    Ok(())
}

/// One epoch of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub terms: BTreeMap<String, f64>,
    pub recall: Option<RecallReport>,
    pub ledger: CostLedger,
    pub examples: usize,
    pub batches: usize,
    pub dropped: usize,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub seed: u64,
    pub n_values: Vec<usize>,
    pub initial_recall: Option<RecallReport>,
    pub epochs: Vec<EpochRow>,
}

impl RunRecord {
    pub fn final_recall(&self) -> Option<&RecallReport> {
        self.epochs.iter().rev().find_map(|e| e.recall.as_ref())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    fn term_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.epochs.iter().flat_map(|e| e.terms.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["label", "seed", "epoch", "loss"].map(String::from).to_vec();
        h.extend(self.term_names().into_iter().map(|t| format!("term_{t}")));
        h.extend(self.n_values.iter().map(|n| format!("R@{n}")));
        h.extend(["extractions", "comparisons", "peak_cached", "examples", "batches", "dropped"].map(String::from));
        h
    }

    /// One row per epoch; wall-clock time is left to the manifest so the
    /// file is reproducible byte for byte.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let terms = self.term_names();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.csv_header())?;
        for e in &self.epochs {
            let mut rec = vec![self.label.clone(), self.seed.to_string(), e.epoch.to_string(), e.loss.to_string()];
            rec.extend(terms.iter().map(|t| e.terms.get(t).map(f64::to_string).unwrap_or_default()));
            rec.extend(
                self.n_values
                    .iter()
                    .map(|n| e.recall.as_ref().and_then(|r| r.at(*n)).map(|v| v.to_string()).unwrap_or_default()),
            );
            rec.extend(
                [
                    e.ledger.extractions,
                    e.ledger.comparisons,
                    e.ledger.peak_cached,
                    e.examples as u64,
                    e.batches as u64,
                    e.dropped as u64,
                ]
                .map(|v| v.to_string()),
            );
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 over the pair keeps per-epoch streams independent
    let mut z = seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training examples for one batch, as dataset rows.
enum BatchRows<'a> {
    Pairs { anchor: Vec<&'a GeoSample>, partner: Vec<&'a GeoSample> },
    Triplets { query: Vec<&'a GeoSample>, positive: Vec<&'a GeoSample>, negative: Vec<&'a GeoSample> },
}

fn features(tape: &mut Tape, rows: &[&GeoSample]) -> Result<Var> {
    let r: Vec<&[f64]> = rows.iter().map(|s| s.features.as_slice()).collect();
    Ok(tape.constant(Tensor::from_rows(&r)?))
}

/// A single batch recorded on a fresh tape and differentiated.
pub struct StepGraph {
    pub tape: Tape,
    pub bind: Bindings,
    pub loss: LossOutput,
    pub views: Views,
    /// Pre-stop target outputs, when a target branch ran.
    pub target_pre_stop: Vec<Var>,
    online_bn: Vec<BnUpdate>,
    predictor_bn: Vec<BnUpdate>,
}

/// Runs the method's forward passes over `x_a`/`x_b` (and `x_n` for
/// triplets) and differentiates the loss. With `frozen_target` the target
/// branch reads that snapshot instead of `state`, so perturbing `state`
/// leaves target outputs fixed.
pub fn build_step(
    state: &EncoderState,
    cfg: &MethodConfig,
    x_a: &Tensor,
    x_b: &Tensor,
    x_n: Option<&Tensor>,
    frozen_target: Option<&EncoderState>,
) -> Result<StepGraph> {
    let mut tape = Tape::new();
    let bind = state.bind(&mut tape);
    let frozen = frozen_target.map(|f| (f, f.bind_constants(&mut tape)));
    let a = tape.constant(x_a.clone());
    let b = tape.constant(x_b.clone());
    let n = x_n.map(|x| tape.constant(x.clone()));
    assemble(state, cfg, tape, bind, a, b, n, frozen.as_ref().map(|(f, fb)| (*f, fb)))
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    state: &EncoderState,
    cfg: &MethodConfig,
    mut tape: Tape,
    bind: Bindings,
    a: Var,
    b: Var,
    n: Option<Var>,
    frozen: Option<(&EncoderState, &Bindings)>,
) -> Result<StepGraph> {
    let enc = &cfg.encoder;
    let m = cfg.method();
    let mut online_bn = Vec::new();
    let mut predictor_bn = Vec::new();
    let mut target_pre_stop = Vec::new();
    let online = |tape: &mut Tape, x: Var, bn: &mut Vec<BnUpdate>| -> Result<Var> {
        let out = state.forward(enc, tape, &bind, x, Branch::Online, true)?;
        bn.extend(out.bn_updates);
        Ok(out.output)
    };
    let mut views = Views::default();
    match m {
        Method::Triplet => {
            let n = n.ok_or_else(|| Error::invalid("Triplet batches need negatives"))?;
            views.anchor = Some(online(&mut tape, a, &mut online_bn)?);
            views.partner = Some(online(&mut tape, b, &mut online_bn)?);
            views.negative = Some(online(&mut tape, n, &mut online_bn)?);
        }
        Method::SimCLR | Method::BarlowTwins | Method::VICReg => {
            views.anchor = Some(online(&mut tape, a, &mut online_bn)?);
            views.partner = Some(online(&mut tape, b, &mut online_bn)?);
        }
        Method::MoCov2 | Method::BYOL | Method::SimSiam => {
            let za = online(&mut tape, a, &mut online_bn)?;
            let zb = online(&mut tape, b, &mut online_bn)?;
            views.anchor = Some(za);
            views.partner = Some(zb);
            // target-branch batch statistics are not folded into running stats
            let (ts, tbind) = frozen.unwrap_or((state, &bind));
            let ta = ts.forward(enc, &mut tape, tbind, a, Branch::Target, true)?;
            let tb = ts.forward(enc, &mut tape, tbind, b, Branch::Target, true)?;
            target_pre_stop.extend([ta.pre_stop, tb.pre_stop]);
            views.anchor_target = Some(ta.output);
            views.partner_target = Some(tb.output);
            if m != Method::MoCov2 {
                let pa = state.predictor_forward(&mut tape, &bind, za, true)?;
                let pb = state.predictor_forward(&mut tape, &bind, zb, true)?;
                predictor_bn.extend(pa.bn_updates);
                predictor_bn.extend(pb.bn_updates);
                views.anchor_pred = Some(pa.output);
                views.partner_pred = Some(pb.output);
            }
        }
    }
    let loss = compute_loss(&mut tape, &cfg.loss, &views)?;
    tape.backward(loss.loss)?;
    Ok(StepGraph { tape, bind, loss, views, target_pre_stop, online_bn, predictor_bn })
}

/// Owns one run's mutable state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    ds: &'a GeoDataset,
    state: EncoderState,
    adam: AdamState,
    epoch: usize,
    n_pair_queries: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, ds: &'a GeoDataset) -> Result<Self> {
        cfg.validate()?;
        if ds.feature_dim() != cfg.method.encoder.input_dim {
            return Err(Error::invalid(format!(
                "dataset has {} features per sample but the encoder expects {}",
                ds.feature_dim(),
                cfg.method.encoder.input_dim
            )));
        }
        let mut state = init_encoder(&cfg.method.encoder, cfg.seed)?;
        let adam = AdamState::for_params(&state.trainable_mut());
        let n_pair_queries = ds.queries().iter().filter(|q| !ds.positive_set(q).is_empty()).count();
        Ok(Self { cfg, ds, state, adam, epoch: 0, n_pair_queries })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ds: &'a GeoDataset, ck: &Checkpoint) -> Result<Self> {
        let mut t = Self::new(cfg, ds)?;
        if ck.encoder != t.cfg.method.encoder {
            return Err(Error::invalid("checkpoint encoder config differs from the run config"));
        }
        let (state, aux) = ck.restore()?;
        t.state = state;
        let names = t.state.trainable_names();
        for (i, name) in names.iter().enumerate() {
            for (slot, key) in [(&mut t.adam.m[i], "m"), (&mut t.adam.v[i], "v")] {
                let k = format!("adam.{key}.{name}");
                *slot = aux.get(&k).cloned().ok_or_else(|| Error::Parse(format!("checkpoint lacks {k}")))?;
            }
        }
        t.adam.step = aux.get("adam.step").map(|s| s.data()[0] as u64).unwrap_or(0);
        t.epoch = ck.epoch;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let names = self.state.trainable_names();
        let step = Tensor::scalar(self.adam.step as f64);
        let mut aux: Vec<(String, &Tensor)> = vec![("adam.step".into(), &step)];
        for (i, name) in names.iter().enumerate() {
            aux.push((format!("adam.m.{name}"), &self.adam.m[i]));
            aux.push((format!("adam.v.{name}"), &self.adam.v[i]));
        }
        Checkpoint::from_state(&self.state, &self.cfg.method.encoder, self.epoch, &aux)
    }

    pub fn state(&self) -> &EncoderState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn embedder(&self) -> EncoderEmbedder<'_> {
        EncoderEmbedder { state: &self.state, cfg: &self.cfg.method.encoder }
    }

    pub fn evaluate(&self) -> Result<RecallReport> {
        let emb = self.embedder();
        let index = build_index(self.ds, &emb)?;
        recall_at_n(self.ds, &index, &emb, &self.cfg.n_values, self.cfg.threshold_m)
    }

    fn sample_batches(&self, seed: u64, ledger: &mut CostLedger) -> Result<(Vec<BatchRows<'a>>, usize)> {
        let ds = self.ds;
        let bs = self.cfg.batch_size;
        let get = |id: u64| ds.sample(id).expect("sampled ids come from the dataset");
        let mc = &self.cfg.method;
        let (batches, total) = if mc.method().uses_pairs() {
            let m_q = self.cfg.queries_per_epoch.min(self.n_pair_queries);
            let pairs: Vec<Pair> = build_pairs(ds, m_q, mc.eta, seed)?;
            account_pairs(&pairs, bs, ledger);
            let batches = pairs
                .chunks(bs)
                .map(|c| BatchRows::Pairs {
                    anchor: c.iter().map(|p| get(p.anchor_id)).collect(),
                    partner: c.iter().map(|p| get(p.partner_id)).collect(),
                })
                .collect();
            (batches, pairs.len())
        } else {
            let m_q = self.cfg.queries_per_epoch.min(ds.queries().len());
            let mined = mine_triplets(ds, m_q, &mc.mining, &self.embedder(), seed, ledger)?;
            let batches = mined
                .triplets
                .chunks(bs)
                .map(|c| BatchRows::Triplets {
                    query: c.iter().map(|t| get(t.query_id)).collect(),
                    positive: c.iter().map(|t| get(t.positive_id)).collect(),
                    negative: c.iter().map(|t| get(t.negative_id)).collect(),
                })
                .collect();
            (batches, mined.triplets.len())
        };
        Ok((batches, total))
    }

    fn step(&mut self, rows: &BatchRows<'_>) -> Result<LossOutput> {
        let mut tape = Tape::new();
        let bind = self.state.bind(&mut tape);
        let (a, b, n) = match rows {
            BatchRows::Pairs { anchor, partner } => (features(&mut tape, anchor)?, features(&mut tape, partner)?, None),
            BatchRows::Triplets { query, positive, negative } => {
                (features(&mut tape, query)?, features(&mut tape, positive)?, Some(features(&mut tape, negative)?))
            }
        };
        let g = assemble(&self.state, &self.cfg.method, tape, bind, a, b, n, None)?;
        let grads: Vec<Tensor> = g.bind.trainable().iter().map(|v| g.tape.grad_or_zeros(*v)).collect();
        let adam = AdamConfig {
            decoupled: self.cfg.decoupled_weight_decay,
            ..AdamConfig::new(self.cfg.lr(), self.cfg.weight_decay)
        };
        adam_step(&mut self.state.trainable_mut(), &grads, &mut self.adam, &adam)?;
        self.state.apply_online_bn(&g.online_bn);
        self.state.apply_predictor_bn(&g.predictor_bn);
        if self.cfg.method.encoder.momentum_target {
            self.state.momentum_update(self.cfg.method.encoder.momentum)?;
        }
        Ok(g.loss)
    }

    /// Samples, batches and trains one epoch; evaluates when scheduled.
    pub fn train_epoch(&mut self) -> Result<EpochRow> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let mut ledger = CostLedger::default();
        let (batches, examples) =
            self.sample_batches(epoch_seed(self.cfg.seed, epoch), &mut ledger).context(|| format!("epoch {epoch}"))?;
        let mut loss_sum = 0.0;
        let mut term_sums: BTreeMap<String, f64> = BTreeMap::new();
        let (mut used, mut dropped) = (0, 0);
        for (bi, rows) in batches.iter().enumerate() {
            let len = match rows {
                BatchRows::Pairs { anchor, .. } => anchor.len(),
                BatchRows::Triplets { query, .. } => query.len(),
            };
            if len < 2 {
                dropped += len;
                continue;
            }
            let out = self.step(rows).context(|| format!("epoch {epoch}, batch {bi}"))?;
            loss_sum += out.value;
            for (k, v) in out.terms {
                *term_sums.entry(k).or_default() += v;
            }
            used += 1;
        }
        self.epoch = epoch;
        let denom = used.max(1) as f64;
        let due = if self.cfg.eval_every == 0 { epoch == self.cfg.epochs } else { epoch.is_multiple_of(self.cfg.eval_every) };
        let recall = if due || epoch == self.cfg.epochs {
            Some(self.evaluate().context(|| format!("epoch {epoch} evaluation"))?)
        } else {
            None
        };
        Ok(EpochRow {
            epoch,
            loss: if used == 0 { f64::NAN } else { loss_sum / denom },
            terms: term_sums.into_iter().map(|(k, v)| (k, v / denom)).collect(),
            recall,
            ledger,
            examples,
            batches: used,
            dropped,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `cfg.epochs`, continuing the epoch count of a resumed run.
    pub fn run(&mut self) -> Result<RunRecord> {
        let initial_recall = if self.epoch == 0 { Some(self.evaluate()?) } else { None };
        let mut epochs = Vec::new();
        while self.epoch < self.cfg.epochs {
            epochs.push(self.train_epoch()?);
        }
        Ok(RunRecord {
            label: self.cfg.method.label(),
            seed: self.cfg.seed,
            n_values: self.cfg.n_values.clone(),
            initial_recall,
            epochs,
        })
    }
}

/// Trains one run from scratch.
pub fn train(cfg: &TrainConfig, ds: &GeoDataset) -> Result<(RunRecord, Checkpoint)> {
    let mut t = Trainer::new(cfg.clone(), ds)?;
    let record = t.run()?;
    Ok((record, t.checkpoint()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    /// `final_loss` and `R@N` aggregated over runs.
    pub aggregate: BTreeMap<String, MeanStd>,
}

impl ExperimentReport {
    pub fn median(&self, metric: &str) -> Option<f64> {
        let mut v: Vec<f64> = self.runs.iter().filter_map(|r| run_metric(r, metric)).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }
}

fn run_metric(r: &RunRecord, metric: &str) -> Option<f64> {
    if metric == "final_loss" {
        return r.final_loss();
    }
    let n: usize = metric.strip_prefix("R@")?.parse().ok()?;
    r.final_recall()?.at(n)
}

/// Worker threads from `VGSSL_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("VGSSL_THREADS").ok()?.parse().ok().filter(|n| *n > 0)
}

/// Trains seeds `cfg.seed .. cfg.seed + n_seeds` in parallel, keeping each
/// run's final checkpoint. Honors `VGSSL_THREADS`.
pub fn run_seeds(cfg: &TrainConfig, ds: &GeoDataset, n_seeds: usize) -> Result<Vec<(RunRecord, Checkpoint)>> {
    if n_seeds == 0 {
        return Err(Error::invalid("run_experiment needs at least one seed"));
    }
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.seed + i).collect();
    let job = || -> Result<Vec<(RunRecord, Checkpoint)>> {
        seeds
            .par_iter()
            .map(|&s| train(&TrainConfig { seed: s, ..cfg.clone() }, ds).context(|| format!("seed {s}")))
            .collect()
    };
    match thread_cap() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?
            .install(job),
        None => job(),
    }
}

impl ExperimentReport {
    /// Aggregates final metrics as mean ± population std.
    pub fn from_runs(label: String, n_values: &[usize], runs: Vec<RunRecord>) -> Self {
        let mut aggregate = BTreeMap::new();
        let metrics = std::iter::once("final_loss".to_string()).chain(n_values.iter().map(|n| format!("R@{n}")));
        for metric in metrics {
            let vals: Vec<f64> = runs.iter().filter_map(|r| run_metric(r, &metric)).collect();
            if !vals.is_empty() && vals.len() == runs.len() {
                aggregate.insert(metric, MeanStd::of(&vals));
            }
        }
        let seeds = runs.iter().map(|r| r.seed).collect();
        Self { label, seeds, runs, aggregate }
    }
}

/// [`run_seeds`] without the checkpoints, aggregated.
pub fn run_experiment(cfg: &TrainConfig, ds: &GeoDataset, n_seeds: usize) -> Result<ExperimentReport> {
    let runs = run_seeds(cfg, ds, n_seeds)?.into_iter().map(|(r, _)| r).collect();
    Ok(ExperimentReport::from_runs(cfg.method.label(), &cfg.n_values, runs))
}
