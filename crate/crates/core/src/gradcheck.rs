//! Finite-difference verification of full training objectives, and an
//! audit of which architectural features actually carry gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{relative_error, Tape, Tensor};
use crate::encoder::{init_encoder, Branch, EncoderState};
use crate::error::{Error, Result};
use crate::method::{FeatureFlags, Method, MethodConfig};
use crate::trainer::{adam_step, build_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub batch: usize,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub proj_layers: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Test hook: negate the analytic gradient for this method.
    pub flip_sign_for: Option<Method>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            batch: 6,
            input_dim: 5,
            hidden_dims: vec![6],
            embed_dim: 4,
            proj_layers: 2,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            flip_sign_for: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub method: Method,
    pub instances: usize,
    pub degenerate_skipped: usize,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

fn method_config(m: Method, cfg: &GradcheckConfig) -> MethodConfig {
    let mut mc = MethodConfig::preset(m, cfg.input_dim, cfg.proj_layers, cfg.embed_dim, 1.0);
    mc.encoder.hidden_dims = cfg.hidden_dims.clone();
    if m == Method::Triplet {
        mc.encoder.embed_dim = mc.encoder.trunk_out();
    }
    // a larger temperature keeps logits moderate at random init
    mc.loss.tau = 0.5;
    mc
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

fn flatten(ts: &[Tensor]) -> Tensor {
    let data: Vec<f64> = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::row_vector(data)
}

struct Instance {
    state: EncoderState,
    x_a: Tensor,
    x_b: Tensor,
    x_n: Option<Tensor>,
}

impl Instance {
    fn new(m: Method, mc: &MethodConfig, cfg: &GradcheckConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = init_encoder(&mc.encoder, rng.gen())?;
        // move the target away from the online copy so both paths matter
        if let Some(t) = &mut state.target {
            for p in t.params.tensors.iter_mut() {
                let noise = random(&mut rng, p.rows(), p.cols());
                *p = p.zip_map(&noise, |a, b| a + 0.1 * b)?;
            }
        }
        let (n, f) = (cfg.batch, cfg.input_dim);
        let x_a = random(&mut rng, n, f);
        let x_b = x_a.zip_map(&random(&mut rng, n, f), |a, b| a + 0.3 * b)?;
        // hard negatives, as close as the positive, so hinges stay active
        let x_n = match m {
            Method::Triplet => Some(x_a.zip_map(&random(&mut rng, n, f), |a, b| a + 0.3 * b)?),
            _ => None,
        };
        Ok(Self { state, x_a, x_b, x_n })
    }

    fn loss(&self, mc: &MethodConfig, state: &EncoderState) -> Result<f64> {
        let g = build_step(state, mc, &self.x_a, &self.x_b, self.x_n.as_ref(), Some(&self.state))?;
        Ok(g.loss.value)
    }
}

/// An instance is degenerate (every trunk unit dead so all embeddings
/// coincide, or an inactive hinge) when its analytic gradient is not clearly
/// above the rounding noise of the difference quotients, roughly
/// eps * |f| * sqrt(P) / h, scaled so noise alone stays well under tolerance.
fn degenerate_floor(loss: f64, params: usize, cfg: &GradcheckConfig) -> f64 {
    10.0 * f64::EPSILON * loss.abs().max(1.0) * (params as f64).sqrt() / (cfg.step * cfg.tolerance)
}

/// Relative error between analytic and central-difference gradients of the
/// full objective over all trainable parameters, for one instance. `None`
/// marks a degenerate instance.
fn check_instance(m: Method, mc: &MethodConfig, cfg: &GradcheckConfig, seed: u64) -> Result<Option<(usize, f64)>> {
    let inst = Instance::new(m, mc, cfg, seed)?;
    let g = build_step(&inst.state, mc, &inst.x_a, &inst.x_b, inst.x_n.as_ref(), Some(&inst.state))?;
    let mut analytic: Vec<Tensor> = g.bind.trainable().iter().map(|v| g.tape.grad_or_zeros(*v)).collect();
    let flat = flatten(&analytic);
    if flat.l2() < degenerate_floor(g.loss.value, flat.len(), cfg) {
        return Ok(None);
    }
    if cfg.flip_sign_for == Some(m) {
        analytic = analytic.iter().map(|t| t.map(|x| -x)).collect();
    }
    let mut probe = inst.state.clone();
    let mut numeric = Vec::with_capacity(analytic.len());
    let count = analytic.len();
    for i in 0..count {
        let base = probe.trainable_mut()[i].clone();
        let mut grad = Tensor::zeros(base.rows(), base.cols());
        for j in 0..base.len() {
            let mut at = |delta: f64| -> Result<f64> {
                probe.trainable_mut()[i].data_mut()[j] = base.data()[j] + delta;
                inst.loss(mc, &probe)
            };
            // fourth-order central stencil; batch norm makes the objective
            // curved enough that the two-point error nears the tolerance
            let h = cfg.step;
            let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
            grad.data_mut()[j] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            probe.trainable_mut()[i].data_mut()[j] = base.data()[j];
        }
        *probe.trainable_mut()[i] = base;
        numeric.push(grad);
    }
    let a = flatten(&analytic);
    Ok(Some((a.len(), relative_error(&a, &flatten(&numeric)))))
}

/// Runs `cfg.instances` random instances per method.
pub fn run_gradcheck(methods: &[Method], cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    if cfg.batch < 2 || cfg.step <= 0.0 {
        return Err(Error::invalid("gradcheck needs batch >= 2 and a positive step"));
    }
    methods
        .iter()
        .map(|&m| {
            let mc = method_config(m, cfg);
            mc.validate()?;
            // draw in rounds until enough non-degenerate instances exist
            let mut results: Vec<(usize, f64)> = Vec::new();
            let mut skipped = 0;
            let mut next = 0u64;
            while results.len() < cfg.instances {
                if next >= 10 * cfg.instances as u64 + 10 {
                    return Err(Error::NumericDegeneracy(format!(
                        "{m}: only {} of {next} gradcheck instances were non-degenerate",
                        results.len()
                    )));
                }
                let want = (cfg.instances - results.len()) as u64;
                let round: Vec<Option<(usize, f64)>> = (next..next + want)
                    .into_par_iter()
                    .map(|i| check_instance(m, &mc, cfg, cfg.seed.wrapping_mul(1_000_003).wrapping_add(i)))
                    .collect::<Result<_>>()?;
                next += want;
                skipped += round.iter().filter(|r| r.is_none()).count();
                results.extend(round.into_iter().flatten());
            }
            let max_rel_error = results.iter().map(|r| r.1).fold(0.0, f64::max);
            Ok(GradcheckRow {
                method: m,
                instances: results.len(),
                degenerate_skipped: skipped,
                parameters: results.first().map_or(0, |r| r.0),
                max_rel_error,
                pass: max_rel_error < cfg.tolerance,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub method: Method,
    pub expected: FeatureFlags,
    pub detected: FeatureFlags,
    pub pass: bool,
}

fn nonzero(t: &Tensor) -> bool {
    t.data().iter().any(|v| *v != 0.0)
}

/// Infers each feature flag from gradient flow on one random batch and one
/// optimizer step, then compares with the method's declared feature set.
///
/// - predictor: predictor parameters exist and receive gradient;
/// - stop-gradient: a target branch runs but its output passes no gradient back;
/// - momentum target: after a step, the target branch lags the online one;
/// - batch norm: some normalization scale parameter receives gradient.
pub fn audit_flags(m: Method, seed: u64) -> Result<AuditRow> {
    let cfg = GradcheckConfig { seed, ..GradcheckConfig::default() };
    let mc = method_config(m, &cfg);
    mc.validate()?;
    let inst = Instance::new(m, &mc, &cfg, seed)?;
    let mut state = init_encoder(&mc.encoder, seed)?;
    let g = build_step(&state, &mc, &inst.x_a, &inst.x_b, inst.x_n.as_ref(), None)?;

    let predictor = g.bind.predictor.as_ref().is_some_and(|vs| vs.iter().any(|v| nonzero(&g.tape.grad_or_zeros(*v))));
    let stop_gradient =
        !g.target_pre_stop.is_empty() && g.target_pre_stop.iter().all(|v| !nonzero(&g.tape.grad_or_zeros(*v)));
    let mut batchnorm = false;
    let nets = [(Some(&state.online), Some(&g.bind.online)), (state.predictor.as_ref(), g.bind.predictor.as_ref())];
    for (net, vars) in nets {
        if let (Some(net), Some(vars)) = (net, vars) {
            for (name, v) in net.params.names.iter().zip(vars) {
                if name.ends_with(".gamma") && nonzero(&g.tape.grad_or_zeros(*v)) {
                    batchnorm = true;
                }
            }
        }
    }

    // one real update, then compare branch outputs on fresh input
    let grads: Vec<Tensor> = g.bind.trainable().iter().map(|v| g.tape.grad_or_zeros(*v)).collect();
    let mut adam = AdamState::for_params(&state.trainable_mut());
    adam_step(&mut state.trainable_mut(), &grads, &mut adam, &AdamConfig::new(1e-2, 0.0))?;
    state.momentum_update(mc.encoder.momentum)?;
    let momentum_target = if mc.encoder.momentum_target || mc.encoder.stop_grad_target {
        let mut tape = Tape::new();
        let bind = state.bind(&mut tape);
        let x = tape.constant(inst.x_a.clone());
        let on = state.forward(&mc.encoder, &mut tape, &bind, x, Branch::Online, false)?;
        let tg = state.forward(&mc.encoder, &mut tape, &bind, x, Branch::Target, false)?;
        tape.value(on.output) != tape.value(tg.output)
    } else {
        false
    };

    let detected = FeatureFlags { momentum_target, stop_gradient, predictor, batchnorm };
    let expected = m.flags();
    Ok(AuditRow { method: m, expected, detected, pass: expected == detected })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradcheckConfig {
        GradcheckConfig { instances: 3, ..GradcheckConfig::default() }
    }

    #[test]
    fn every_method_passes_quick_check() {
        let rows = run_gradcheck(&Method::ALL, &quick()).unwrap();
        for r in &rows {
            assert!(r.pass, "{:?}", r);
            assert!(r.parameters > 0);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let cfg = GradcheckConfig { flip_sign_for: Some(Method::VICReg), ..quick() };
        let rows = run_gradcheck(&[Method::SimCLR, Method::VICReg], &cfg).unwrap();
        assert!(rows[0].pass);
        assert!(!rows[1].pass);
        assert!(rows[1].max_rel_error > 1.0);
    }

    #[test]
    fn empty_method_list() {
        assert!(run_gradcheck(&[], &quick()).unwrap().is_empty());
    }

    #[test]
    fn audit_matches_declared_features() {
        for m in Method::ALL {
            let row = audit_flags(m, 1).unwrap();
            assert!(row.pass, "{:?}", row);
        }
    }

    #[test]
    fn audit_detects_a_missing_stop_gradient() {
        // BYOL features, but with the stop-gradient removed from the config
        let cfg = GradcheckConfig::default();
        let mut mc = method_config(Method::BYOL, &cfg);
        mc.encoder.stop_grad_target = false;
        let inst = Instance::new(Method::BYOL, &mc, &cfg, 0).unwrap();
        let g = build_step(&inst.state, &mc, &inst.x_a, &inst.x_b, None, None).unwrap();
        assert!(g.target_pre_stop.iter().any(|v| nonzero(&g.tape.grad_or_zeros(*v))));
    }
}
