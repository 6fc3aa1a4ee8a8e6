//! Reverse-mode gradients of the softmax MSSA layer, a finite-difference
//! oracle for them, and gradient-descent training of untied layer bases on
//! a synthetic denoising objective.

use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{layer_step, mssa_inspect, AttentionConfig, LayerStack, Phi};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, matmul, matmul_nt, matmul_tn, orthonormalize, Matrix};
use crate::metrics::snr_all;
use crate::model::{
    clean_signal, rng_for, standard_normal_matrix, ModelDims, SubspaceModel, TokenBatch,
    INIT_STREAM,
};

/// Central-difference step of [`finite_diff_gradcheck`].
pub const FD_STEP: f64 = 1e-5;

/// Per-head intermediates of one forward layer.
#[derive(Clone, Debug)]
pub struct HeadCache {
    /// `P = Uᵀ Z`.
    pub coords: Matrix,
    /// `S = softmax(PᵀP / T)`.
    pub weights: Matrix,
    /// `H = P S`.
    pub mixed: Matrix,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Matrix,
    pub bases: Vec<Matrix>,
    pub eta: f64,
    pub temperature: f64,
    pub heads: Vec<HeadCache>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradients {
    pub d_z: Matrix,
    pub d_bases: Vec<Matrix>,
}

fn softmax_temperature(cfg: &AttentionConfig) -> Result<f64> {
    match cfg.phi {
        Phi::Softmax { temperature } if !cfg.prenorm => Ok(temperature),
        Phi::Softmax { .. } => Err(Error::param("gradients through prenorm are not supported")),
        Phi::ThresholdedSoftmax { .. } => Err(Error::param(
            "the thresholded nonlinearity has zero gradient almost everywhere",
        )),
    }
}

/// `Z + η · MSSA(Z)` plus what the backward pass needs.
///
/// The output goes through the same code path as the plain forward pass, so
/// it is bit-identical to a one-layer unroll.
pub fn mssa_forward_cached(bases: &[Matrix], z: &Matrix, cfg: &AttentionConfig) -> Result<(Matrix, ForwardCache)> {
    let temperature = softmax_temperature(cfg)?;
    let captured: Mutex<Vec<Option<Matrix>>> = Mutex::new(vec![None; bases.len()]);
    let update = mssa_inspect(bases, z, cfg, |k, w| {
        captured.lock().expect("weight capture")[k] = Some(w.clone());
        Ok(())
    })?;
    let out = layer_step(z, &update, cfg.eta)?;
    let heads = bases
        .iter()
        .zip(captured.into_inner().expect("weight capture"))
        .map(|(u, w)| {
            let coords = matmul_tn(u, z)?;
            let weights = w.expect("every head inspected");
            let mixed = matmul(&coords, &weights)?;
            Ok(HeadCache { coords, weights, mixed })
        })
        .collect::<Result<_>>()?;
    Ok((
        out,
        ForwardCache {
            input: z.clone(),
            bases: bases.to_vec(),
            eta: cfg.eta,
            temperature,
            heads,
        },
    ))
}

/// Gradients of `⟨upstream, output⟩` with respect to the layer input and
/// every basis.
pub fn mssa_backward(cache: &ForwardCache, upstream: &Matrix) -> Result<LayerGradients> {
    if upstream.shape() != cache.input.shape() {
        return Err(Error::dim(format!(
            "upstream {:?} does not match layer output {:?}",
            upstream.shape(),
            cache.input.shape()
        )));
    }
    let n = cache.input.cols();
    let scale = 1.0 / cache.temperature;
    let d_out = upstream.scale(cache.eta);
    let mut d_z = upstream.clone();
    let mut d_bases = Vec::with_capacity(cache.bases.len());

    for (u, head) in cache.bases.iter().zip(&cache.heads) {
        // Output U H.
        let mut d_u = matmul_nt(&d_out, &head.mixed)?;
        let d_h = matmul_tn(u, &d_out)?;
        // H = P S.
        let mut d_p = matmul_nt(&d_h, &head.weights)?;
        let d_s = matmul_tn(&head.coords, &d_h)?;
        // Column softmax Jacobian diag(s) - s sᵀ.
        let mut d_logits = Matrix::zeros(n, n);
        for j in 0..n {
            let inner: f64 = (0..n).map(|i| head.weights[(i, j)] * d_s[(i, j)]).sum();
            for i in 0..n {
                d_logits[(i, j)] = scale * head.weights[(i, j)] * (d_s[(i, j)] - inner);
            }
        }
        // Logits PᵀP: both factors depend on P.
        let sym = d_logits.add(&d_logits.transpose())?;
        d_p.axpy(1.0, &matmul(&head.coords, &sym)?)?;
        // P = Uᵀ Z.
        d_u.axpy(1.0, &matmul_nt(&cache.input, &d_p)?)?;
        d_z.axpy(1.0, &matmul(u, &d_p)?)?;
        d_bases.push(d_u);
    }
    if !d_z.is_finite() || d_bases.iter().any(|m| !m.is_finite()) {
        return Err(Error::Numeric {
            layer: None,
            msg: "non-finite gradient".into(),
        });
    }
    Ok(LayerGradients { d_z, d_bases })
}

/// `‖UᵀU − I‖_F²`.
pub fn orthonormality_penalty(u: &Matrix) -> Result<f64> {
    let g = matmul_tn(u, u)?.sub(&Matrix::identity(u.cols()))?;
    Ok(g.dot(&g))
}

/// Gradient of [`orthonormality_penalty`]: `4 U (UᵀU − I)`.
pub fn orthonormality_penalty_grad(u: &Matrix) -> Result<Matrix> {
    let g = matmul_tn(u, u)?.sub(&Matrix::identity(u.cols()))?;
    Ok(matmul(u, &g)?.scale(4.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// No coordinate was probed; the error is 0 by convention.
    pub degenerate: bool,
}

/// Discrepancy between an analytic and a numeric derivative, relative to
/// the larger of the two with a floor of 1.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares [`mssa_backward`] against central differences of the test loss
/// `½‖output‖_F²` on `probes` random coordinates of `z` and of each basis.
pub fn finite_diff_gradcheck(
    bases: &[Matrix],
    z: &Matrix,
    cfg: &AttentionConfig,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if probes == 0 {
        return Ok(GradCheckReport {
            max_rel_error: 0.0,
            probes: 0,
            degenerate: true,
        });
    }
    let (out, cache) = mssa_forward_cached(bases, z, cfg)?;
    let grads = mssa_backward(&cache, &out)?;
    let loss = |bases: &[Matrix], z: &Matrix| -> Result<f64> {
        let (o, _) = mssa_forward_cached(bases, z, cfg)?;
        Ok(0.5 * o.dot(&o))
    };
    let mut rng = rng_for(seed, INIT_STREAM);
    let mut worst: f64 = 0.0;

    for _ in 0..probes {
        let (i, j) = (rng.random_range(0..z.rows()), rng.random_range(0..z.cols()));
        let mut plus = z.clone();
        plus[(i, j)] += FD_STEP;
        let mut minus = z.clone();
        minus[(i, j)] -= FD_STEP;
        let numeric = (loss(bases, &plus)? - loss(bases, &minus)?) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(grads.d_z[(i, j)], numeric));
    }
    for k in 0..bases.len() {
        for _ in 0..probes {
            let (i, j) = (rng.random_range(0..bases[k].rows()), rng.random_range(0..bases[k].cols()));
            let mut plus = bases.to_vec();
            plus[k][(i, j)] += FD_STEP;
            let mut minus = bases.to_vec();
            minus[k][(i, j)] -= FD_STEP;
            let numeric = (loss(&plus, z)? - loss(&minus, z)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads.d_bases[k][(i, j)], numeric));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        probes,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    /// Heavy-ball momentum with coefficient 0.9.
    Momentum,
}

pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½‖Z^(L) − Z*‖_F²` against the clean per-cluster signal.
    #[default]
    Denoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    #[serde(default)]
    pub loss: LossKind,
    pub layers: usize,
    pub eta: f64,
    /// Softmax temperature of every layer.
    pub temperature: f64,
    pub seed: u64,
    /// Weight of the orthonormality penalty on every basis.
    pub lambda: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("penalty weight {} must be >= 0", self.lambda)));
        }
        self.attention().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig::new(self.eta, Phi::Softmax { temperature: self.temperature })
    }
}

/// `layers` independent random orthonormal sets of `K` bases, drawn from
/// the initialization stream of `seed`.
pub fn random_stack(dims: ModelDims, layers: usize, seed: u64) -> Result<LayerStack> {
    dims.validate()?;
    let mut rng = rng_for(seed, INIT_STREAM);
    let mut stack = Vec::with_capacity(layers);
    for _ in 0..layers {
        let heads = (0..dims.num_subspaces)
            .map(|_| {
                let g = standard_normal_matrix(&mut rng, dims.ambient_dim, dims.subspace_dim);
                Ok(orthonormalize(&g)?.matrix().clone())
            })
            .collect::<Result<_>>()?;
        stack.push(heads);
    }
    Ok(LayerStack::Untied { layers: stack })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    /// Objective (penalty included) before this step's update.
    pub loss: f64,
    /// Mean over clusters of the final-layer SNR before the update.
    pub mean_final_snr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    /// Mean input SNR of the first batch.
    pub initial_mean_snr: f64,
    pub steps: Vec<TrainStep>,
    /// `‖U_kᵀU_k − I‖_F` per layer and head after training.
    pub orthonormality: Vec<Vec<f64>>,
    /// Loss and mean final SNR of the trained stack on the first batch.
    pub final_loss: f64,
    pub final_mean_snr: f64,
    pub stack: LayerStack,
}

struct Evaluation {
    loss: f64,
    mean_final_snr: f64,
    grads: Vec<Vec<Matrix>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn evaluate(
    layers: &[Vec<Matrix>],
    batch: &TokenBatch,
    target: &Matrix,
    model: &SubspaceModel,
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<Evaluation> {
    let attn = cfg.attention();
    let mut z = batch.z.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for (l, bases) in layers.iter().enumerate() {
        let (next, cache) = mssa_forward_cached(bases, &z, &attn).map_err(|e| match e {
            Error::Numeric { msg, .. } => Error::Numeric { layer: Some(l), msg },
            other => other,
        })?;
        z = next;
        caches.push(cache);
    }
    let residual = z.sub(target)?;
    let mut loss = 0.5 * residual.dot(&residual);
    for bases in layers {
        for u in bases {
            loss += cfg.lambda * orthonormality_penalty(u)?;
        }
    }
    let mean_final_snr = mean(&snr_all(model, &z, &batch.partition)?);

    let mut grads = Vec::new();
    if with_grads {
        grads = vec![Vec::new(); layers.len()];
        let mut upstream = residual;
        for l in (0..layers.len()).rev() {
            let g = mssa_backward(&caches[l], &upstream)?;
            upstream = g.d_z;
            grads[l] = g.d_bases;
            if cfg.lambda > 0.0 {
                for (d_u, u) in grads[l].iter_mut().zip(&layers[l]) {
                    d_u.axpy(cfg.lambda, &orthonormality_penalty_grad(u)?)?;
                }
            }
        }
    }
    Ok(Evaluation {
        loss,
        mean_final_snr,
        grads,
    })
}

/// Gradient descent on the untied bases of `stack`, cycling through
/// `batches` one per step. SNR is measured against the ground-truth `model`.
pub fn train(stack: &LayerStack, batches: &[TokenBatch], model: &SubspaceModel, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    stack.validate()?;
    let mut layers = match stack {
        LayerStack::Untied { layers } => layers.clone(),
        LayerStack::Tied { .. } => return Err(Error::param("training needs an untied layer stack")),
    };
    if layers.len() != cfg.layers {
        return Err(Error::param(format!(
            "stack has {} layers, config asks for {}",
            layers.len(),
            cfg.layers
        )));
    }
    if batches.is_empty() {
        return Err(Error::param("no training batches"));
    }
    let targets: Vec<Matrix> = batches
        .iter()
        .map(|b| clean_signal(b, model))
        .collect::<Result<_>>()?;

    let initial_mean_snr = mean(&snr_all(model, &batches[0].z, &batches[0].partition)?);
    let mut velocity: Vec<Vec<Matrix>> = layers
        .iter()
        .map(|heads| heads.iter().map(|u| Matrix::zeros(u.rows(), u.cols())).collect())
        .collect();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let b = step % batches.len();
        let eval = match evaluate(&layers, &batches[b], &targets[b], model, cfg, true) {
            Ok(e) => e,
            Err(Error::Numeric { .. }) => return Err(Error::Diverged { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !eval.loss.is_finite() {
            return Err(Error::Diverged { step, loss: eval.loss });
        }
        log.push(TrainStep {
            step,
            loss: eval.loss,
            mean_final_snr: eval.mean_final_snr,
        });
        for (l, grads) in eval.grads.iter().enumerate() {
            for (k, g) in grads.iter().enumerate() {
                let direction = match cfg.optimizer {
                    Optimizer::GradientDescent => g.clone(),
                    Optimizer::Momentum => {
                        let v = velocity[l][k].scale(MOMENTUM).add(g)?;
                        velocity[l][k] = v.clone();
                        v
                    }
                };
                layers[l][k].axpy(-cfg.learning_rate, &direction)?;
            }
        }
    }

    let last = evaluate(&layers, &batches[0], &targets[0], model, cfg, false)?;
    if !last.loss.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: last.loss,
        });
    }
    let orthonormality = layers
        .iter()
        .map(|heads| {
            heads
                .iter()
                .map(|u| orthonormality_penalty(u).map(f64::sqrt))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    Ok(TrainLog {
        config: cfg.clone(),
        initial_mean_snr,
        steps: log,
        orthonormality,
        final_loss: last.loss,
        final_mean_snr: last.mean_final_snr,
        stack: LayerStack::Untied { layers },
    })
}

/// Frobenius norm of the difference of two gradient sets, for tests and
/// diagnostics.
pub fn gradient_distance(a: &LayerGradients, b: &LayerGradients) -> Result<f64> {
    let mut total = frobenius_norm(&a.d_z.sub(&b.d_z)?).powi(2);
    for (x, y) in a.d_bases.iter().zip(&b.d_bases) {
        total += frobenius_norm(&x.sub(y)?).powi(2);
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::unroll;
    use crate::model::{sample_bases, sample_tokens, GaussianMixtureConfig};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        standard_normal_matrix(&mut rng_for(seed, 99), rows, cols)
    }

    #[test]
    fn forward_matches_one_layer_unroll() {
        let bases: Vec<Matrix> = (0..2).map(|k| random(8, 3, k)).collect();
        let z = random(8, 12, 7);
        let cfg = AttentionConfig::new(0.5, Phi::softmax());
        let (out, cache) = mssa_forward_cached(&bases, &z, &cfg).unwrap();
        let stack = LayerStack::Untied { layers: vec![bases.clone()] };
        let (unrolled, _) = unroll(&stack, &z, &cfg, None).unwrap();
        assert_eq!(out, unrolled);

        // Cache-free recomputation.
        let mut update = Matrix::zeros(8, 12);
        for (u, h) in bases.iter().zip(&cache.heads) {
            let p = matmul_tn(u, &z).unwrap();
            let s = crate::linalg::column_softmax(&matmul_tn(&p, &p).unwrap());
            assert_eq!(p, h.coords);
            assert_eq!(s, h.weights);
            update.axpy(1.0, &matmul(u, &matmul(&p, &s).unwrap()).unwrap()).unwrap();
        }
        assert_eq!(out, layer_step(&z, &update, 0.5).unwrap());
    }

    #[test]
    fn zero_step_keeps_input_and_cache() {
        let bases = vec![random(6, 2, 1)];
        let z = random(6, 5, 2);
        let (out, cache) = mssa_forward_cached(&bases, &z, &AttentionConfig::new(0.0, Phi::softmax())).unwrap();
        assert_eq!(out, z);
        assert_eq!(cache.heads.len(), 1);
        let g = mssa_backward(&cache, &z).unwrap();
        assert_eq!(g.d_z, z);
        assert!(g.d_bases[0].max_abs() == 0.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let bases: Vec<Matrix> = (0..2).map(|k| random(5, 2, k + 10)).collect();
        let z = random(5, 6, 3);
        let (_, cache) = mssa_forward_cached(&bases, &z, &AttentionConfig::new(0.7, Phi::softmax())).unwrap();
        let g = mssa_backward(&cache, &Matrix::zeros(5, 6)).unwrap();
        assert_eq!(g.d_z.max_abs(), 0.0);
        assert!(g.d_bases.iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn tiny_instance_against_central_differences() {
        let bases = vec![random(2, 1, 4)];
        let z = random(2, 2, 5);
        let cfg = AttentionConfig::new(0.5, Phi::softmax());
        let (out, cache) = mssa_forward_cached(&bases, &z, &cfg).unwrap();
        let g = mssa_backward(&cache, &out).unwrap();
        let loss = |b: &[Matrix], z: &Matrix| {
            let (o, _) = mssa_forward_cached(b, z, &cfg).unwrap();
            0.5 * o.dot(&o)
        };
        for i in 0..2 {
            for j in 0..2 {
                let mut p = z.clone();
                p[(i, j)] += FD_STEP;
                let mut m = z.clone();
                m[(i, j)] -= FD_STEP;
                let numeric = (loss(&bases, &p) - loss(&bases, &m)) / (2.0 * FD_STEP);
                let a = g.d_z[(i, j)];
                assert!((a - numeric).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {numeric}");
            }
            let mut p = bases.clone();
            p[0][(i, 0)] += FD_STEP;
            let mut m = bases.clone();
            m[0][(i, 0)] -= FD_STEP;
            let numeric = (loss(&p, &z) - loss(&m, &z)) / (2.0 * FD_STEP);
            let a = g.d_bases[0][(i, 0)];
            assert!((a - numeric).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {numeric}");
        }
    }

    #[test]
    fn gradcheck_small_instance() {
        let bases: Vec<Matrix> = (0..2).map(|k| random(8, 2, k + 20)).collect();
        let z = random(8, 16, 21).scale(0.5);
        let r = finite_diff_gradcheck(&bases, &z, &AttentionConfig::new(0.5, Phi::softmax()), 30, 1).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
        let none = finite_diff_gradcheck(&bases, &z, &AttentionConfig::new(0.5, Phi::softmax()), 0, 1).unwrap();
        assert!(none.degenerate && none.max_rel_error == 0.0);
    }

    #[test]
    fn causal_and_temperature_gradients() {
        let bases: Vec<Matrix> = (0..2).map(|k| random(6, 2, k + 30)).collect();
        let z = random(6, 9, 31);
        let mut cfg = AttentionConfig::new(0.3, Phi::Softmax { temperature: 2.5 });
        cfg.causal = true;
        let r = finite_diff_gradcheck(&bases, &z, &cfg, 25, 2).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn shared_basis_gradient_is_sum_of_heads() {
        let u = random(6, 2, 40);
        let z = random(6, 7, 41);
        let cfg = AttentionConfig::new(0.4, Phi::softmax());
        let (out, cache) = mssa_forward_cached(&[u.clone(), u.clone()], &z, &cfg).unwrap();
        let g = mssa_backward(&cache, &out).unwrap();

        // Tied: loss of the layer built from one parameter used twice.
        let loss = |u: &Matrix| {
            let (o, _) = mssa_forward_cached(&[u.clone(), u.clone()], &z, &cfg).unwrap();
            0.5 * o.dot(&o)
        };
        let summed = g.d_bases[0].add(&g.d_bases[1]).unwrap();
        for i in 0..6 {
            let mut p = u.clone();
            p[(i, 1)] += FD_STEP;
            let mut m = u.clone();
            m[(i, 1)] -= FD_STEP;
            let numeric = (loss(&p) - loss(&m)) / (2.0 * FD_STEP);
            assert!(relative_error(summed[(i, 1)], numeric) <= 1e-6);
        }
    }

    #[test]
    fn doubling_upstream_doubles_gradients() {
        let bases: Vec<Matrix> = (0..3).map(|k| random(9, 2, k + 50)).collect();
        let z = random(9, 10, 51);
        let up = random(9, 10, 52);
        let (_, cache) = mssa_forward_cached(&bases, &z, &AttentionConfig::new(0.5, Phi::softmax())).unwrap();
        let g1 = mssa_backward(&cache, &up).unwrap();
        let g2 = mssa_backward(&cache, &up.scale(2.0)).unwrap();
        assert_eq!(g2.d_z, g1.d_z.scale(2.0));
        for (a, b) in g1.d_bases.iter().zip(&g2.d_bases) {
            assert_eq!(*b, a.scale(2.0));
        }
        assert!(gradient_distance(&g1, &g1).unwrap() == 0.0);
    }

    #[test]
    fn penalty_gradient_against_central_differences() {
        let u = random(7, 3, 60);
        let g = orthonormality_penalty_grad(&u).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut p = u.clone();
                p[(i, j)] += FD_STEP;
                let mut m = u.clone();
                m[(i, j)] -= FD_STEP;
                let numeric =
                    (orthonormality_penalty(&p).unwrap() - orthonormality_penalty(&m).unwrap()) / (2.0 * FD_STEP);
                assert!(relative_error(g[(i, j)], numeric) <= 1e-6, "{} vs {numeric}", g[(i, j)]);
            }
        }
        let q = orthonormalize(&u).unwrap();
        assert!(orthonormality_penalty(q.matrix()).unwrap() < 1e-20);
    }

    #[test]
    fn thresholded_and_prenorm_rejected() {
        let bases = vec![random(4, 1, 1)];
        let z = random(4, 3, 2);
        assert!(matches!(
            mssa_forward_cached(&bases, &z, &AttentionConfig::new(0.5, Phi::threshold(0.8))),
            Err(Error::Parameter(_))
        ));
        let mut cfg = AttentionConfig::new(0.5, Phi::softmax());
        cfg.prenorm = true;
        assert!(mssa_forward_cached(&bases, &z, &cfg).is_err());
    }

    fn small_problem(seed: u64) -> (SubspaceModel, TokenBatch) {
        let dims = ModelDims::new(16, 2, 3).unwrap();
        let model = sample_bases(dims, seed).unwrap();
        let batch = sample_tokens(
            &model,
            &GaussianMixtureConfig {
                dims,
                tokens_per_cluster: 20,
                delta: 0.3,
                seed,
            },
        )
        .unwrap();
        (model, batch)
    }

    fn config(layers: usize, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            learning_rate: 1e-3,
            optimizer: Optimizer::GradientDescent,
            loss: LossKind::Denoise,
            layers,
            eta: 0.5,
            temperature: 1.0,
            seed: 3,
            lambda: 0.0,
        }
    }

    #[test]
    fn zero_layer_training_is_a_no_op() {
        let (model, batch) = small_problem(1);
        let stack = LayerStack::Untied { layers: vec![] };
        let log = train(&stack, &[batch], &model, &config(0, 5)).unwrap();
        assert!(log.steps.windows(2).all(|w| w[0].loss == w[1].loss));
        assert_eq!(log.stack, stack);
    }

    #[test]
    fn ground_truth_init_does_not_increase_loss() {
        let (model, batch) = small_problem(2);
        let stack = LayerStack::Untied {
            layers: vec![model.basis_matrices(); 2],
        };
        let log = train(&stack, &[batch], &model, &config(2, 10)).unwrap();
        for w in log.steps.windows(2) {
            assert!(w[1].loss <= w[0].loss, "{} -> {}", w[0].loss, w[1].loss);
        }
    }

    #[test]
    fn training_is_deterministic_and_rejects_bad_configs() {
        let (model, batch) = small_problem(3);
        let stack = random_stack(model.dims(), 2, 3).unwrap();
        let mut cfg = config(2, 15);
        cfg.optimizer = Optimizer::Momentum;
        cfg.lambda = 0.1;
        let a = train(&stack, std::slice::from_ref(&batch), &model, &cfg).unwrap();
        let b = train(&stack, std::slice::from_ref(&batch), &model, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.orthonormality.len(), 2);

        assert!(train(&stack, std::slice::from_ref(&batch), &model, &config(3, 1)).is_err());
        let tied = LayerStack::tied(&model, 2);
        assert!(train(&tied, std::slice::from_ref(&batch), &model, &config(2, 1)).is_err());
        let mut zero_steps = config(2, 1);
        zero_steps.steps = 0;
        assert!(train(&stack, &[batch], &model, &zero_steps).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let (model, batch) = small_problem(4);
        let stack = random_stack(model.dims(), 2, 4).unwrap();
        let mut cfg = config(2, 200);
        cfg.learning_rate = 1e6;
        match train(&stack, &[batch], &model, &cfg) {
            Err(Error::Diverged { step, .. }) => assert!(step < 200),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
