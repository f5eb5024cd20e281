//! Training objectives on tape values.
//!
//! Triplet margin and InfoNCE work on L2-normalized embeddings,
//! embedding prediction normalizes internally (cosine form), and the
//! Barlow Twins / VICReg objectives take raw embeddings since row
//! normalization interferes with their batch-wise statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::method::Method;

/// Added to the per-dimension population variance before the square root.
pub const VICREG_VAR_EPS: f64 = 1e-4;
pub const MIN_ROW_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub method: Method,
    pub tau: f64,
    pub margin: f64,
    pub lambda_bt: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub std_margin: f64,
    pub symmetric: bool,
    pub normalize_inputs: bool,
    /// Also report the unsigned InfoNCE variant whose denominator skips the
    /// positive. Diagnostic only; never trained on.
    pub literal_infonce: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::for_method(Method::SimCLR)
    }
}

impl LossConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            tau: 0.07,
            margin: 0.1,
            lambda_bt: 5e-3,
            lambda1: 25.0,
            lambda2: 25.0,
            lambda3: 1.0,
            std_margin: 1.0,
            symmetric: !matches!(method, Method::Triplet | Method::MoCov2),
            normalize_inputs: method.normalizes_embeddings(),
            literal_infonce: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.std_margin > 0.0) {
            return Err(Error::invalid(format!("std_margin must be positive, got {}", self.std_margin)));
        }
        for (name, v) in [
            ("margin", self.margin),
            ("lambda_bt", self.lambda_bt),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.normalize_inputs != self.method.normalizes_embeddings() {
            return Err(Error::invalid(format!(
                "normalize_inputs must be {} for {}",
                self.method.normalizes_embeddings(),
                self.method
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: Var,
    pub value: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossOutput {
    fn new(tape: &Tape, loss: Var) -> Result<Self> {
        let value = tape.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NumericDegeneracy(format!("loss evaluated to {value}")));
        }
        Ok(Self { loss, value, terms: BTreeMap::new() })
    }

    fn with_term(mut self, name: &str, v: f64) -> Self {
        self.terms.insert(name.to_string(), v);
        self
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::invalid(format!("{what}: shape mismatch {:?} vs {:?}", tape.shape(a), tape.shape(b))));
    }
    Ok(())
}

/// Divides every row by its L2 norm.
pub fn l2_normalize_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let norms = tape.l2norm_rows(x);
    if let Some(r) = tape.value(norms).data().iter().position(|&n| !(n > MIN_ROW_NORM)) {
        return Err(Error::NumericDegeneracy(format!(
            "row {r} has norm {:e}, cannot normalize",
            tape.value(norms).data()[r]
        )));
    }
    let nb = tape.broadcast_like(norms, x)?;
    tape.div(x, nb)
}

/// Mean over the batch of `max(‖q−k⁺‖ − ‖q−k⁻‖ + margin, 0)`.
pub fn triplet_margin_loss(tape: &mut Tape, q: Var, kp: Var, kn: Var, margin: f64) -> Result<LossOutput> {
    same_shape(tape, q, kp, "triplet_margin_loss")?;
    same_shape(tape, q, kn, "triplet_margin_loss")?;
    let dp = tape.sub(q, kp)?;
    let dp = tape.l2norm_rows(dp);
    let dn = tape.sub(q, kn)?;
    let dn = tape.l2norm_rows(dn);
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    let loss = tape.mean(hinge, Axis::All);
    let active = tape.value(hinge).data().iter().filter(|&&h| h > 0.0).count() as f64;
    let n = tape.shape(q)[0] as f64;
    Ok(LossOutput::new(tape, loss)?.with_term("active_fraction", active / n))
}

/// Row-wise log-sum-exp, `rows×1`. The row max is a constant shift, so
/// detaching it leaves the gradient exact.
fn logsumexp_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let t = tape.value(x);
    let maxes: Vec<f64> = t.row_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let m = tape.constant(Tensor::new(t.rows(), 1, maxes)?);
    let mb = tape.broadcast_like(m, x)?;
    let shifted = tape.sub(x, mb)?;
    let e = tape.exp(shifted);
    let s = tape.sum(e, Axis::Cols);
    let l = tape.log(s);
    tape.add(l, m)
}

fn infonce_direction(tape: &mut Tape, q: Var, k: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(q)[0];
    let kt = tape.transpose(k);
    let sim = tape.matmul(q, kt)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let eye = tape.constant(Tensor::identity(n));
    let diag = tape.mul(logits, eye)?;
    let pos = tape.sum(diag, Axis::Cols);
    let lse = logsumexp_rows(tape, logits)?;
    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean(per_row, Axis::All))
}

/// `mean_b −log softmax_b(q̃_b · k̃⁺ / τ)` over in-batch keys, the positive
/// included in the denominator. `symmetric` averages both directions.
pub fn infonce_loss(tape: &mut Tape, q: Var, kp: Var, tau: f64, symmetric: bool) -> Result<LossOutput> {
    same_shape(tape, q, kp, "infonce_loss")?;
    let n = tape.shape(q)[0];
    if n < 2 {
        return Err(Error::invalid(format!("infonce_loss needs at least 2 rows for in-batch negatives, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let forward = infonce_direction(tape, q, kp, tau)?;
    if !symmetric {
        return LossOutput::new(tape, forward);
    }
    let backward = infonce_direction(tape, kp, q, tau)?;
    let both = tape.add(forward, backward)?;
    let loss = tape.scale(both, 0.5);
    let (f, b) = (tape.value(forward).item()?, tape.value(backward).item()?);
    Ok(LossOutput::new(tape, loss)?.with_term("forward", f).with_term("backward", b))
}

/// `mean_b log(e^{s_bb/τ} / Σ_{i≠b} e^{s_bi/τ})`: no leading minus and the
/// positive left out of the denominator. Minimizing it would push positives
/// apart, so it is reported, never optimized.
pub fn infonce_literal(q: &Tensor, kp: &Tensor, tau: f64) -> Result<f64> {
    q.check_same_shape(kp, "infonce_literal")?;
    let sim = q.matmul(&kp.transpose())?;
    let n = q.rows();
    if n < 2 {
        return Err(Error::invalid("infonce_literal needs at least 2 rows"));
    }
    let mut total = 0.0;
    for b in 0..n {
        let pos = (sim.get(b, b) / tau).exp();
        let others: f64 = (0..n).filter(|&i| i != b).map(|i| (sim.get(b, i) / tau).exp()).sum();
        total += (pos / others).ln();
    }
    Ok(total / n as f64)
}

/// `mean_b (2 − 2⟨p̂_b, t̂_b⟩)`. `target` should already be tape-stopped.
pub fn embedding_prediction_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<LossOutput> {
    same_shape(tape, pred, target, "embedding_prediction_loss")?;
    let p = l2_normalize_rows(tape, pred)?;
    let t = l2_normalize_rows(tape, target)?;
    let prod = tape.mul(p, t)?;
    let cos = tape.sum(prod, Axis::Cols);
    let two_cos = tape.scale(cos, -2.0);
    let per_row = tape.add_scalar(two_cos, 2.0);
    let loss = tape.mean(per_row, Axis::All);
    LossOutput::new(tape, loss)
}

/// Average of the two prediction directions `(p₁ → t₂)` and `(p₂ → t₁)`.
pub fn symmetric_embedding_prediction_loss(
    tape: &mut Tape,
    first: (Var, Var),
    second: (Var, Var),
) -> Result<LossOutput> {
    let a = embedding_prediction_loss(tape, first.0, first.1)?;
    let b = embedding_prediction_loss(tape, second.0, second.1)?;
    let both = tape.add(a.loss, b.loss)?;
    let loss = tape.scale(both, 0.5);
    Ok(LossOutput::new(tape, loss)?.with_term("forward", a.value).with_term("backward", b.value))
}

fn column_norms(tape: &mut Tape, x: Var, what: &str) -> Result<Var> {
    let sq = tape.square(x)?;
    let ss = tape.sum(sq, Axis::Rows);
    if let Some(c) = tape.value(ss).data().iter().position(|&v| !(v > 0.0)) {
        return Err(Error::NumericDegeneracy(format!("{what}: column {c} is all zeros")));
    }
    Ok(tape.sqrt(ss))
}

/// `C_ij = Σ_b q_bi k_bj / (‖q_·i‖ ‖k_·j‖)`, uncentered.
pub fn cross_correlation_matrix(tape: &mut Tape, q: Var, kp: Var) -> Result<Var> {
    same_shape(tape, q, kp, "cross_correlation_matrix")?;
    let nq = column_norms(tape, q, "cross_correlation_matrix q")?;
    let nk = column_norms(tape, kp, "cross_correlation_matrix kp")?;
    let qt = tape.transpose(q);
    let num = tape.matmul(qt, kp)?;
    let nqt = tape.transpose(nq);
    let den = tape.matmul(nqt, nk)?;
    tape.div(num, den)
}

/// `Σ_i (1 − C_ii)² + λ Σ_{i≠j} C_ij²`.
pub fn barlow_twins_loss(tape: &mut Tape, c: Var, lambda: f64) -> Result<LossOutput> {
    let [d, d2] = tape.shape(c);
    if d != d2 {
        return Err(Error::invalid(format!("barlow_twins_loss needs a square matrix, got {:?}", [d, d2])));
    }
    let eye = tape.constant(Tensor::identity(d));
    let off_mask = tape.constant(Tensor::ones(d, d).zip_map(&Tensor::identity(d), |a, b| a - b)?);
    let diag = tape.mul(c, eye)?;
    let diag = tape.sum(diag, Axis::Cols);
    let one_minus = tape.scale(diag, -1.0);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let on_sq = tape.square(one_minus)?;
    let on = tape.sum(on_sq, Axis::All);
    let off = tape.mul(c, off_mask)?;
    let off_sq = tape.square(off)?;
    let off = tape.sum(off_sq, Axis::All);
    let off_w = tape.scale(off, lambda);
    let loss = tape.add(on, off_w)?;
    let (on_v, off_v) = (tape.value(on).item()?, tape.value(off_w).item()?);
    Ok(LossOutput::new(tape, loss)?.with_term("on_diagonal", on_v).with_term("off_diagonal", off_v))
}

fn centered(tape: &mut Tape, x: Var) -> Result<Var> {
    let m = tape.mean(x, Axis::Rows);
    let mb = tape.broadcast_like(m, x)?;
    tape.sub(x, mb)
}

/// `Σ_i max(d2 − √(var_i + ε), 0)` over columns.
fn variance_hinge(tape: &mut Tape, c: Var, d2: f64) -> Result<Var> {
    let sq = tape.square(c)?;
    let var = tape.mean(sq, Axis::Rows);
    let var = tape.add_scalar(var, VICREG_VAR_EPS);
    let std = tape.sqrt(var);
    let neg = tape.scale(std, -1.0);
    let gap = tape.add_scalar(neg, d2);
    let hinge = tape.relu(gap);
    Ok(tape.sum(hinge, Axis::All))
}

/// Sum of squared off-diagonal entries of `cᵀc / (N−1)`.
fn off_diagonal_covariance(tape: &mut Tape, c: Var) -> Result<Var> {
    let [n, d] = tape.shape(c);
    let ct = tape.transpose(c);
    let cov = tape.matmul(ct, c)?;
    let cov = tape.scale(cov, 1.0 / (n as f64 - 1.0));
    let mask = tape.constant(Tensor::ones(d, d).zip_map(&Tensor::identity(d), |a, b| a - b)?);
    let off = tape.mul(cov, mask)?;
    let sq = tape.square(off)?;
    Ok(tape.sum(sq, Axis::All))
}

/// Invariance + variance hinge + covariance suppression.
pub fn vicreg_loss(
    tape: &mut Tape,
    q: Var,
    kp: Var,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
    d2: f64,
) -> Result<LossOutput> {
    same_shape(tape, q, kp, "vicreg_loss")?;
    let [n, d] = tape.shape(q);
    if n < 2 {
        return Err(Error::invalid(format!("vicreg_loss needs at least 2 rows for covariance, got {n}")));
    }
    let diff = tape.sub(q, kp)?;
    let sq = tape.square(diff)?;
    let inv = tape.sum(sq, Axis::All);
    let inv = tape.scale(inv, lambda1 / (n * d) as f64);

    let cq = centered(tape, q)?;
    let ck = centered(tape, kp)?;
    let vq = variance_hinge(tape, cq, d2)?;
    let vk = variance_hinge(tape, ck, d2)?;
    let var = tape.add(vq, vk)?;
    let var = tape.scale(var, lambda2 / d as f64);

    let oq = off_diagonal_covariance(tape, cq)?;
    let ok = off_diagonal_covariance(tape, ck)?;
    let cov = tape.add(oq, ok)?;
    let cov = tape.scale(cov, lambda3 / d as f64);

    let partial = tape.add(inv, var)?;
    let loss = tape.add(partial, cov)?;
    let terms = [
        ("invariance", tape.value(inv).item()?),
        ("variance", tape.value(var).item()?),
        ("covariance", tape.value(cov).item()?),
    ];
    let mut out = LossOutput::new(tape, loss)?;
    for (k, v) in terms {
        out = out.with_term(k, v);
    }
    Ok(out)
}

/// Embeddings of one batch, per branch. Which fields are required depends
/// on the method; see [`compute_loss`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Views {
    /// Online embedding of the anchor view (query, or the duplicated negative).
    pub anchor: Option<Var>,
    /// Online embedding of the partner view.
    pub partner: Option<Var>,
    /// Target-branch embeddings.
    pub anchor_target: Option<Var>,
    pub partner_target: Option<Var>,
    /// Predictor outputs on the online embeddings.
    pub anchor_pred: Option<Var>,
    pub partner_pred: Option<Var>,
    /// Online embedding of explicit negatives (triplets only).
    pub negative: Option<Var>,
}

fn need(v: Option<Var>, method: Method, what: &str) -> Result<Var> {
    v.ok_or_else(|| Error::invalid(format!("{method} needs the {what} embeddings")))
}

/// Dispatches the method's objective over the batch views.
pub fn compute_loss(tape: &mut Tape, cfg: &LossConfig, views: &Views) -> Result<LossOutput> {
    cfg.validate()?;
    let m = cfg.method;
    let norm = |tape: &mut Tape, v: Var| -> Result<Var> {
        if cfg.normalize_inputs {
            l2_normalize_rows(tape, v)
        } else {
            Ok(v)
        }
    };
    let mut out = match m {
        Method::Triplet => {
            let q = need(views.anchor, m, "query")?;
            let kp = need(views.partner, m, "positive")?;
            let kn = views
                .negative
                .ok_or_else(|| Error::invalid("Triplet needs explicit negatives; pair batches are not accepted"))?;
            let (q, kp, kn) = (norm(tape, q)?, norm(tape, kp)?, norm(tape, kn)?);
            triplet_margin_loss(tape, q, kp, kn, cfg.margin)?
        }
        Method::SimCLR => {
            let a = need(views.anchor, m, "anchor")?;
            let b = need(views.partner, m, "partner")?;
            let (a, b) = (norm(tape, a)?, norm(tape, b)?);
            infonce_loss(tape, a, b, cfg.tau, cfg.symmetric)?
        }
        Method::MoCov2 => {
            let q = need(views.anchor, m, "anchor")?;
            let k = need(views.partner_target, m, "partner target")?;
            let (q, k) = (norm(tape, q)?, norm(tape, k)?);
            let first = infonce_loss(tape, q, k, cfg.tau, false)?;
            if cfg.symmetric {
                let q2 = need(views.partner, m, "partner")?;
                let k2 = need(views.anchor_target, m, "anchor target")?;
                let (q2, k2) = (norm(tape, q2)?, norm(tape, k2)?);
                let second = infonce_loss(tape, q2, k2, cfg.tau, false)?;
                let both = tape.add(first.loss, second.loss)?;
                let loss = tape.scale(both, 0.5);
                LossOutput::new(tape, loss)?.with_term("forward", first.value).with_term("backward", second.value)
            } else {
                first
            }
        }
        Method::BYOL | Method::SimSiam => {
            let p = need(views.anchor_pred, m, "anchor predictor")?;
            let t = need(views.partner_target, m, "partner target")?;
            if cfg.symmetric {
                let p2 = need(views.partner_pred, m, "partner predictor")?;
                let t2 = need(views.anchor_target, m, "anchor target")?;
                symmetric_embedding_prediction_loss(tape, (p, t), (p2, t2))?
            } else {
                embedding_prediction_loss(tape, p, t)?
            }
        }
        Method::BarlowTwins => {
            let a = need(views.anchor, m, "anchor")?;
            let b = need(views.partner, m, "partner")?;
            let c = cross_correlation_matrix(tape, a, b)?;
            barlow_twins_loss(tape, c, cfg.lambda_bt)?
        }
        Method::VICReg => {
            let a = need(views.anchor, m, "anchor")?;
            let b = need(views.partner, m, "partner")?;
            vicreg_loss(tape, a, b, cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.std_margin)?
        }
    };
    if cfg.literal_infonce && matches!(m, Method::SimCLR | Method::MoCov2) {
        let a = need(views.anchor, m, "anchor")?;
        let b = match m {
            Method::MoCov2 => need(views.partner_target, m, "partner target")?,
            _ => need(views.partner, m, "partner")?,
        };
        let (a, b) = (norm(tape, a)?, norm(tape, b)?);
        let literal = infonce_literal(tape.value(a), tape.value(b), cfg.tau)?;
        out = out.with_term("literal_infonce", literal);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{numeric_grad, relative_error};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn value_of(f: impl FnOnce(&mut Tape) -> Result<LossOutput>) -> f64 {
        let mut tape = Tape::new();
        f(&mut tape).unwrap().value
    }

    fn unit_at(angle: f64) -> [f64; 2] {
        [angle.cos(), angle.sin()]
    }

    #[test]
    fn normalize_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[3.0, 4.0], &[0.0, 2.0]]));
        let y = l2_normalize_rows(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8, 0.0, 1.0]);
        let again = l2_normalize_rows(&mut tape, y).unwrap();
        assert!(tape.value(again).max_abs_diff(tape.value(y)) < 1e-12);

        let z = tape.leaf(t(&[&[1.0, 1.0], &[0.0, 1e-13]]));
        let err = l2_normalize_rows(&mut tape, z).unwrap_err();
        assert!(matches!(err, Error::NumericDegeneracy(ref m) if m.contains("row 1")), "{err}");
    }

    #[test]
    fn normalize_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = random(&mut rng, 4, 5);
        let w = random(&mut rng, 4, 5);
        let eval = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let y = l2_normalize_rows(&mut tape, xv).unwrap();
            let wv = tape.constant(w.clone());
            let p = tape.mul(y, wv).unwrap();
            let s = tape.sum(p, Axis::All);
            (tape, xv, s)
        };
        let (mut tape, xv, s) = eval(&x0);
        tape.backward(s).unwrap();
        let numeric = numeric_grad(
            |x| {
                let (t, _, s) = eval(x);
                t.value(s).item().unwrap()
            },
            &x0,
            1e-5,
        );
        assert!(relative_error(tape.grad(xv).unwrap(), &numeric) < 1e-5);
    }

    #[test]
    fn triplet_cases() {
        // hinge inactive: q = k⁺, ‖q − k⁻‖ = 1
        let q = unit_at(0.0);
        let kn = unit_at(std::f64::consts::FRAC_PI_3);
        let v = value_of(|tp| {
            let (a, b, c) = (tp.leaf(t(&[&q])), tp.leaf(t(&[&q])), tp.leaf(t(&[&kn])));
            triplet_margin_loss(tp, a, b, c, 0.1)
        });
        assert_eq!(v, 0.0);

        // chords of 1.2 and 1.0 on the unit circle: 1.2 − 1.0 + 0.1
        let kp = unit_at(2.0 * 0.6f64.asin());
        let v = value_of(|tp| {
            let (a, b, c) = (tp.leaf(t(&[&q, &q])), tp.leaf(t(&[&kp, &kp])), tp.leaf(t(&[&kn, &kn])));
            triplet_margin_loss(tp, a, b, c, 0.1)
        });
        assert!((v - 0.3).abs() < 1e-12, "{v}");

        let v = value_of(|tp| {
            let (a, b, c) = (tp.leaf(t(&[&q])), tp.leaf(t(&[&kn])), tp.leaf(t(&[&kn])));
            triplet_margin_loss(tp, a, b, c, 0.0)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn triplet_inactive_hinge_has_finite_zero_gradient() {
        let mut tape = Tape::new();
        let q = tape.leaf(t(&[&[1.0, 0.0]]));
        let kn = tape.leaf(t(&[&[0.0, 1.0]]));
        let out = triplet_margin_loss(&mut tape, q, q, kn, 0.1).unwrap();
        tape.backward(out.loss).unwrap();
        assert!(tape.grad_or_zeros(q).data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn infonce_hand_values() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((expected - 0.31326).abs() < 1e-5);
        for sym in [false, true] {
            let v = value_of(|tp| {
                let (a, b) = (tp.leaf(e.clone()), tp.leaf(e.clone()));
                infonce_loss(tp, a, b, 1.0, sym)
            });
            assert!((v - expected).abs() < 1e-12);
        }
        // uniform-softmax limit
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 6, 4);
        let v = value_of(|tp| {
            let a = tp.leaf(x.clone());
            let a = l2_normalize_rows(tp, a)?;
            infonce_loss(tp, a, a, 1e3, false)
        });
        assert!((v - 6f64.ln()).abs() < 5e-3, "{v}");
    }

    #[test]
    fn infonce_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[&[1.0, 0.0]]));
        assert!(matches!(infonce_loss(&mut tape, a, a, 0.1, false), Err(Error::InvalidArgument(_))));
        let b = tape.leaf(t(&[&[1.0, 0.0, 0.0]]));
        assert!(infonce_loss(&mut tape, a, b, 0.1, false).is_err());
    }

    #[test]
    fn literal_infonce_differs_from_trained_form() {
        let e = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        // log(e^1 / e^0) per row
        assert!((infonce_literal(&e, &e, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_prediction_range_points() {
        let p = t(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let ortho = t(&[&[-2.0, 1.0], &[0.5, 3.0]]);
        let neg = p.map(|x| -x);
        for (target, expected) in [(p.clone(), 0.0), (ortho, 2.0), (neg, 4.0)] {
            let v = value_of(|tp| {
                let a = tp.leaf(p.clone());
                let b = tp.constant(target.clone());
                let b = tp.stop_gradient(b);
                embedding_prediction_loss(tp, a, b)
            });
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn cross_correlation_cases() {
        // orthogonal columns → identity
        let q = t(&[&[1.0, 0.0], &[0.0, 2.0], &[0.0, 0.0]]);
        let mut tape = Tape::new();
        let a = tape.leaf(q.clone());
        let c = cross_correlation_matrix(&mut tape, a, a).unwrap();
        assert!(tape.value(c).max_abs_diff(&Tensor::identity(2)) < 1e-15);

        let q = t(&[&[1.0, -1.0], &[2.0, -2.0], &[-0.5, 0.5]]);
        let a = tape.leaf(q);
        let c = cross_correlation_matrix(&mut tape, a, a).unwrap();
        assert!((tape.value(c).get(0, 1) + 1.0).abs() < 1e-15);
        assert!((tape.value(c).get(1, 0) + 1.0).abs() < 1e-15);

        let z = tape.leaf(t(&[&[1.0, 0.0], &[2.0, 0.0]]));
        assert!(matches!(cross_correlation_matrix(&mut tape, z, z), Err(Error::NumericDegeneracy(_))));
    }

    #[test]
    fn barlow_twins_cases() {
        let bt = |c: Tensor, l: f64| {
            value_of(|tp| {
                let v = tp.leaf(c);
                barlow_twins_loss(tp, v, l)
            })
        };
        assert_eq!(bt(Tensor::identity(4), 0.005), 0.0);
        assert_eq!(bt(Tensor::zeros(3, 3), 0.005), 3.0);
        let v = bt(t(&[&[1.0, 0.5], &[0.5, 1.0]]), 0.005);
        assert!((v - 0.0025).abs() < 1e-15, "{v}");
    }

    #[test]
    fn vicreg_cases() {
        // orthogonal centered ±1 columns, std = √(1 + ε) ≥ 1
        let q = t(&[&[1.0, 1.0], &[-1.0, 1.0], &[1.0, -1.0], &[-1.0, -1.0]]);
        let v = value_of(|tp| {
            let (a, b) = (tp.leaf(q.clone()), tp.leaf(q.clone()));
            vicreg_loss(tp, a, b, 25.0, 25.0, 1.0, 1.0)
        });
        assert!(v.abs() < 1e-6, "{v}");

        // all-zero embeddings: each column's std is √ε = 0.01, hinge 0.99 per branch
        let z = Tensor::zeros(4, 3);
        let v = value_of(|tp| {
            let (a, b) = (tp.leaf(z.clone()), tp.leaf(z.clone()));
            vicreg_loss(tp, a, b, 0.0, 1.0, 0.0, 1.0)
        });
        assert!((v - 2.0 * (1.0 - VICREG_VAR_EPS.sqrt())).abs() < 1e-12, "{v}");
        assert!((v - 2.0).abs() <= 0.02 + 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 5, 3);
        let v = value_of(|tp| {
            let a = tp.leaf(x.clone());
            let b = tp.leaf(x.map(|v| v + 1.0));
            vicreg_loss(tp, a, b, 1.0, 0.0, 0.0, 1.0)
        });
        assert!((v - 1.0).abs() < 1e-12);

        let mut tape = Tape::new();
        let one = tape.leaf(t(&[&[1.0, 2.0]]));
        assert!(vicreg_loss(&mut tape, one, one, 1.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn simclr_duplicated_pair_scores_worse_than_distinct_pairs() {
        let cfg = LossConfig::for_method(Method::SimCLR);
        let dup = t(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let distinct = Tensor::identity(3);
        let run = |x: &Tensor| {
            value_of(|tp| {
                let (a, b) = (tp.leaf(x.clone()), tp.leaf(x.clone()));
                compute_loss(tp, &cfg, &Views { anchor: Some(a), partner: Some(b), ..Views::default() })
            })
        };
        // duplicated: log 3; distinct: log(1 + 2 e^{−1/τ})
        assert!((run(&dup) - 3f64.ln()).abs() < 1e-12);
        assert!(run(&dup) > run(&distinct));
    }

    #[test]
    fn prediction_of_identical_views_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 6, 4);
        let cfg = LossConfig::for_method(Method::BYOL);
        let v = value_of(|tp| {
            let p = tp.leaf(x.clone());
            let tgt = tp.constant(x.clone());
            let tgt = tp.stop_gradient(tgt);
            compute_loss(
                tp,
                &cfg,
                &Views {
                    anchor_pred: Some(p),
                    partner_pred: Some(p),
                    anchor_target: Some(tgt),
                    partner_target: Some(tgt),
                    ..Views::default()
                },
            )
        });
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn triplet_dispatch_rejects_pairs() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::identity(2));
        let cfg = LossConfig::for_method(Method::Triplet);
        let err = compute_loss(&mut tape, &cfg, &Views { anchor: Some(a), partner: Some(a), ..Views::default() })
            .unwrap_err()
            .to_string();
        assert!(err.contains("negatives"), "{err}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::for_method(Method::VICReg);
        assert!(!cfg.normalize_inputs);
        cfg.normalize_inputs = true;
        assert!(cfg.validate().is_err());
        let cfg = LossConfig { tau: 0.0, ..LossConfig::for_method(Method::SimCLR) };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn infonce_permutation_equivariant(seed in 0u64..1000, n in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, n, 5);
            let k = random(&mut rng, n, 5);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let run = |q: Tensor, k: Tensor| value_of(|tp| {
                let (a, b) = (tp.leaf(q), tp.leaf(k));
                let (a, b) = (l2_normalize_rows(tp, a)?, l2_normalize_rows(tp, b)?);
                infonce_loss(tp, a, b, 0.2, true)
            });
            let base = run(q.clone(), k.clone());
            let permuted = run(q.select_rows(&perm), k.select_rows(&perm));
            prop_assert!((base - permuted).abs() < 1e-12);
            prop_assert!(base >= 0.0);
            // argument swap under the symmetric form
            prop_assert!((base - run(k, q)).abs() < 1e-12);
        }

        #[test]
        fn correlation_entries_bounded(seed in 0u64..1000, n in 2usize..8, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&mut rng, n, d);
            let k = random(&mut rng, n, d);
            let mut tape = Tape::new();
            let (a, b) = (tape.leaf(q), tape.leaf(k));
            let c = cross_correlation_matrix(&mut tape, a, b).unwrap();
            prop_assert!(tape.value(c).data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        }

        #[test]
        fn embedding_prediction_in_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random(&mut rng, 4, 3);
            let q = random(&mut rng, 4, 3);
            let v = value_of(|tp| { let (a, b) = (tp.leaf(p), tp.constant(q)); embedding_prediction_loss(tp, a, b) });
            prop_assert!((0.0..=4.0).contains(&v));
        }

        #[test]
        fn barlow_twins_zero_only_at_identity(seed in 0u64..1000, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random(&mut rng, d, d);
            let v = value_of(|tp| { let x = tp.leaf(c); barlow_twins_loss(tp, x, 0.005) });
            prop_assert!(v > 0.0);
        }
    }
}
