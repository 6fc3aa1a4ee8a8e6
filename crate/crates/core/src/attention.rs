//! Forward pass of the attention-only transformer: subspace self-attention
//! (MSSA), general multi-head self-attention (MHSA), the parameter tying that
//! turns one into the other, the skip-connection step and the `L`-layer unroll.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    block_pattern_match, column_softmax, hard_threshold, matmul, matmul_tn, Matrix,
};
use crate::metrics::snr_all;
use crate::model::{Partition, SubspaceModel};
use crate::trace::{DenoiseTrace, TraceParams};

/// Logit written into masked (future) positions before the softmax.
pub const CAUSAL_MASK_VALUE: f64 = -1e30;

/// Standardization floor added to the per-column variance in [`prenorm`].
pub const PRENORM_EPS: f64 = 1e-6;

/// Column-wise attention nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phi {
    /// Softmax of `logits / temperature`.
    Softmax { temperature: f64 },
    /// `tau * 1{softmax(logits) > tau}`.
    ThresholdedSoftmax { tau: f64 },
}

impl Phi {
    pub fn softmax() -> Self {
        Phi::Softmax { temperature: 1.0 }
    }

    pub fn threshold(tau: f64) -> Self {
        Phi::ThresholdedSoftmax { tau }
    }

    pub fn tau(&self) -> Option<f64> {
        match *self {
            Phi::ThresholdedSoftmax { tau } => Some(tau),
            Phi::Softmax { .. } => None,
        }
    }
}

impl std::fmt::Display for Phi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phi::Softmax { temperature } if *temperature == 1.0 => write!(f, "softmax"),
            Phi::Softmax { temperature } => write!(f, "softmax@{temperature}"),
            Phi::ThresholdedSoftmax { tau } => write!(f, "threshold:{tau}"),
        }
    }
}

impl std::str::FromStr for Phi {
    type Err = Error;

    /// Accepts `softmax`, `softmax@T` (temperature `T`) and `threshold:TAU`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::param(format!("unrecognized attention nonlinearity {s:?}"));
        if s == "softmax" {
            return Ok(Phi::softmax());
        }
        if let Some(t) = s.strip_prefix("softmax@") {
            let temperature = t.parse().map_err(|_| bad())?;
            return Ok(Phi::Softmax { temperature });
        }
        if let Some(t) = s.strip_prefix("threshold:") {
            let tau = t.parse().map_err(|_| bad())?;
            return Ok(Phi::ThresholdedSoftmax { tau });
        }
        Err(bad())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Step size of the skip-connection update.
    pub eta: f64,
    pub phi: Phi,
    /// Token `j` attends only to tokens `0..=j`.
    pub causal: bool,
    /// Standardize each token before attention.
    pub prenorm: bool,
}

impl AttentionConfig {
    pub fn new(eta: f64, phi: Phi) -> Self {
        AttentionConfig {
            eta,
            phi,
            causal: false,
            prenorm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::param(format!("step size {} must be finite and >= 0", self.eta)));
        }
        match self.phi {
            Phi::Softmax { temperature } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::param(format!("temperature {temperature} must be > 0")));
                }
            }
            Phi::ThresholdedSoftmax { tau } => {
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(Error::param(format!("threshold {tau} outside (0, 1)")));
                }
                if self.causal {
                    return Err(Error::param(
                        "causal masking is not defined for the thresholded softmax",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Per-head weights of standard multi-head self-attention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MhsaParams {
    pub query: Vec<Matrix>,
    pub key: Vec<Matrix>,
    pub value: Vec<Matrix>,
    /// `d x (K p)`; column block `k` maps head `k` back to token space.
    pub output: Matrix,
}

impl MhsaParams {
    pub fn num_heads(&self) -> usize {
        self.query.len()
    }

    pub fn validate(&self) -> Result<()> {
        let heads = self.query.len();
        if heads == 0 || self.key.len() != heads || self.value.len() != heads {
            return Err(Error::dim("query/key/value head counts differ"));
        }
        let shape = self.query[0].shape();
        let all = self.query.iter().chain(&self.key).chain(&self.value);
        if all.clone().any(|w| w.shape() != shape) {
            return Err(Error::dim("per-head projection shapes differ"));
        }
        if self.output.shape() != (shape.0, heads * shape.1) {
            return Err(Error::dim(format!(
                "output map is {:?}, expected {:?}",
                self.output.shape(),
                (shape.0, heads * shape.1)
            )));
        }
        if !all.chain(std::iter::once(&self.output)).all(Matrix::is_finite) {
            return Err(Error::Numeric {
                layer: None,
                msg: "non-finite attention weight".into(),
            });
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let per = |w: &Vec<Matrix>| w.iter().map(|m| m.rows() * m.cols()).sum::<usize>();
        per(&self.query) + per(&self.key) + per(&self.value) + self.output.rows() * self.output.cols()
    }
}

/// Each token standardized across its coordinates: `(x - mean) / sqrt(var + eps)`.
pub fn prenorm(z: &Matrix) -> Matrix {
    let (d, n) = z.shape();
    let mut out = z.clone();
    for j in 0..n {
        let col = z.column(j);
        let mean = col.iter().sum::<f64>() / d as f64;
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + PRENORM_EPS).sqrt();
        let normed: Vec<f64> = col.iter().map(|x| (x - mean) * inv).collect();
        out.set_column(j, &normed);
    }
    out
}

fn apply_causal_mask(logits: &mut Matrix) {
    let n = logits.rows();
    for i in 0..n {
        for j in 0..i {
            logits[(i, j)] = CAUSAL_MASK_VALUE;
        }
    }
}

/// `φ(Qᵀ K)` for per-head coordinates `Q`, `K` (`p x N`).
pub(crate) fn attention_weights(q: &Matrix, k: &Matrix, cfg: &AttentionConfig) -> Result<Matrix> {
    let mut logits = matmul_tn(q, k)?;
    if let Phi::Softmax { temperature } = cfg.phi {
        if temperature != 1.0 {
            logits = logits.scale(1.0 / temperature);
        }
    }
    if cfg.causal {
        apply_causal_mask(&mut logits);
    }
    let s = column_softmax(&logits);
    match cfg.phi {
        Phi::Softmax { .. } => Ok(s),
        Phi::ThresholdedSoftmax { tau } => hard_threshold(&s, tau),
    }
}

fn check_tokens(rows: usize, z: &Matrix) -> Result<()> {
    if rows != z.rows() {
        return Err(Error::dim(format!(
            "head maps act on dimension {rows}, tokens have dimension {}",
            z.rows()
        )));
    }
    if !z.is_finite() {
        return Err(Error::Numeric {
            layer: None,
            msg: "non-finite token matrix".into(),
        });
    }
    Ok(())
}

/// MSSA with a hook that sees every head's attention matrix `φ(M_k)`.
///
/// Heads are evaluated in parallel and summed in head order.
pub fn mssa_inspect<B, F>(bases: &[B], z: &Matrix, cfg: &AttentionConfig, inspect: F) -> Result<Matrix>
where
    B: AsRef<Matrix> + Sync,
    F: Fn(usize, &Matrix) -> Result<()> + Sync,
{
    cfg.validate()?;
    let first = bases.first().ok_or_else(|| Error::param("no attention heads"))?.as_ref();
    if bases.iter().any(|b| b.as_ref().shape() != first.shape()) {
        return Err(Error::dim("heads of differing shape"));
    }
    check_tokens(first.rows(), z)?;
    let x = if cfg.prenorm { prenorm(z) } else { z.clone() };

    let heads: Vec<Matrix> = bases
        .par_iter()
        .enumerate()
        .map(|(k, basis)| {
            let u = basis.as_ref();
            let coords = matmul_tn(u, &x)?;
            let weights = attention_weights(&coords, &coords, cfg)?;
            inspect(k, &weights)?;
            matmul(u, &matmul(&coords, &weights)?)
        })
        .collect::<Result<_>>()?;

    let mut out = Matrix::zeros(z.rows(), z.cols());
    for h in &heads {
        out.axpy(1.0, h)?;
    }
    if !out.is_finite() {
        return Err(Error::Numeric {
            layer: None,
            msg: "attention produced non-finite values".into(),
        });
    }
    Ok(out)
}

/// `Σ_k U_k U_kᵀ Z φ(Zᵀ U_k U_kᵀ Z)`, evaluated through the `p`-dimensional
/// coordinates `U_kᵀ Z`.
pub fn mssa<B: AsRef<Matrix> + Sync>(bases: &[B], z: &Matrix, cfg: &AttentionConfig) -> Result<Matrix> {
    mssa_inspect(bases, z, cfg, |_, _| Ok(()))
}

/// `W_O [head_1; …; head_K]` with `head_k = W_Vᵀ Z φ(Zᵀ W_Q W_Kᵀ Z)`.
pub fn mhsa(params: &MhsaParams, z: &Matrix, cfg: &AttentionConfig) -> Result<Matrix> {
    cfg.validate()?;
    params.validate()?;
    check_tokens(params.query[0].rows(), z)?;
    let x = if cfg.prenorm { prenorm(z) } else { z.clone() };
    let p = params.query[0].cols();

    let heads: Vec<Matrix> = (0..params.num_heads())
        .into_par_iter()
        .map(|k| {
            let q = matmul_tn(&params.query[k], &x)?;
            let kk = matmul_tn(&params.key[k], &x)?;
            let v = matmul_tn(&params.value[k], &x)?;
            let weights = attention_weights(&q, &kk, cfg)?;
            let head = matmul(&v, &weights)?;
            matmul(&params.output.column_block(k * p, (k + 1) * p), &head)
        })
        .collect::<Result<_>>()?;

    let mut out = Matrix::zeros(z.rows(), z.cols());
    for h in &heads {
        out.axpy(1.0, h)?;
    }
    Ok(out)
}

/// Ties `W_Q = W_K = W_V = U_k` and `W_O = [U_1 … U_K]`.
pub fn mssa_as_mhsa(model: &SubspaceModel) -> MhsaParams {
    let bases = model.basis_matrices();
    MhsaParams {
        query: bases.clone(),
        key: bases.clone(),
        value: bases,
        output: model.stacked(),
    }
}

/// `Z + η · update`.
pub fn layer_step(z: &Matrix, update: &Matrix, eta: f64) -> Result<Matrix> {
    if z.shape() != update.shape() {
        return Err(Error::dim(format!(
            "skip connection of {:?} and {:?}",
            z.shape(),
            update.shape()
        )));
    }
    let mut out = z.clone();
    out.axpy(eta, update)?;
    Ok(out)
}

/// Layer parameters of an unrolled network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerStack {
    /// The same bases at every layer.
    Tied { bases: Vec<Matrix>, layers: usize },
    /// Separate (trainable) bases per layer: `layers[l][k]`.
    Untied { layers: Vec<Vec<Matrix>> },
}

impl LayerStack {
    pub fn tied(model: &SubspaceModel, layers: usize) -> Self {
        LayerStack::Tied {
            bases: model.basis_matrices(),
            layers,
        }
    }

    /// `layers` independent copies of `bases`.
    pub fn untied_from(bases: &[Matrix], layers: usize) -> Self {
        LayerStack::Untied {
            layers: vec![bases.to_vec(); layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        match self {
            LayerStack::Tied { layers, .. } => *layers,
            LayerStack::Untied { layers } => layers.len(),
        }
    }

    pub fn layer(&self, l: usize) -> &[Matrix] {
        match self {
            LayerStack::Tied { bases, .. } => bases,
            LayerStack::Untied { layers } => &layers[l],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut shapes = (0..self.num_layers()).flat_map(|l| self.layer(l).iter().map(Matrix::shape));
        if let Some(first) = shapes.next() {
            if shapes.any(|s| s != first) {
                return Err(Error::dim("layer bases of differing shape"));
            }
        }
        let heads = (0..self.num_layers()).map(|l| self.layer(l).len());
        if heads.clone().any(|h| h == 0) || heads.clone().min() != heads.max() {
            return Err(Error::dim("layers with differing head counts"));
        }
        Ok(())
    }
}

/// What [`unroll`] records besides the final state.
#[derive(Clone, Copy, Debug)]
pub struct TraceOptions<'a> {
    /// Ground-truth subspaces used for SNR.
    pub model: &'a SubspaceModel,
    pub partition: &'a Partition,
    pub params: &'a TraceParams,
}

/// Runs `Z ← Z + η · MSSA(Z)` through every layer of `stack`.
///
/// With trace options, SNR is recorded for every layer state (including the
/// input) and, for the thresholded nonlinearity, whether every head's
/// attention matrix had the block pattern `BlkDiag(τI)` on its own cluster.
pub fn unroll(
    stack: &LayerStack,
    z0: &Matrix,
    cfg: &AttentionConfig,
    record: Option<TraceOptions<'_>>,
) -> Result<(Matrix, Option<DenoiseTrace>)> {
    unroll_observed(stack, z0, cfg, record, |_, _| {})
}

/// [`unroll`] that also hands every layer state `(l, Z^(l))`, input included,
/// to `observe`.
pub fn unroll_observed(
    stack: &LayerStack,
    z0: &Matrix,
    cfg: &AttentionConfig,
    record: Option<TraceOptions<'_>>,
    mut observe: impl FnMut(usize, &Matrix),
) -> Result<(Matrix, Option<DenoiseTrace>)> {
    cfg.validate()?;
    stack.validate()?;
    let mut trace = match record {
        Some(opts) => {
            if opts.partition.total() != z0.cols() {
                return Err(Error::dim("partition does not cover every token"));
            }
            let mut t = DenoiseTrace::new(opts.params.clone());
            t.push_snr(snr_all(opts.model, z0, opts.partition)?);
            Some(t)
        }
        None => None,
    };

    observe(0, z0);
    let mut z = z0.clone();
    for l in 0..stack.num_layers() {
        let layer_err = |e: Error| match e {
            Error::Numeric { msg, .. } => Error::Numeric { layer: Some(l), msg },
            other => other,
        };
        let bases = stack.layer(l);
        let update = match (record, cfg.phi) {
            (Some(opts), Phi::ThresholdedSoftmax { tau }) => {
                if bases.len() != opts.partition.num_clusters() {
                    return Err(Error::dim("pattern check needs one head per cluster"));
                }
                let held = std::sync::atomic::AtomicUsize::new(0);
                let update = mssa_inspect(bases, &z, cfg, |k, phi| {
                    if block_pattern_match(phi, opts.partition.sizes(), k, tau)? {
                        held.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    }
                    Ok(())
                })
                .map_err(layer_err)?;
                if let Some(t) = trace.as_mut() {
                    t.push_pattern(held.into_inner() == bases.len());
                }
                update
            }
            _ => mssa(bases, &z, cfg).map_err(layer_err)?,
        };
        z = layer_step(&z, &update, cfg.eta)?;
        if !z.is_finite() {
            return Err(Error::Numeric {
                layer: Some(l),
                msg: "state became non-finite".into(),
            });
        }
        if let (Some(t), Some(opts)) = (trace.as_mut(), record) {
            t.push_snr(snr_all(opts.model, &z, opts.partition)?);
        }
        observe(l + 1, &z);
    }
    Ok((z, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_norm;
    use crate::model::{sample_bases, ModelDims};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn softmax_cfg() -> AttentionConfig {
        AttentionConfig::new(0.5, Phi::softmax())
    }

    #[test]
    fn zero_tokens_give_zero_output() {
        let model = sample_bases(ModelDims::new(6, 2, 2).unwrap(), 1).unwrap();
        let z = Matrix::zeros(6, 5);
        assert_eq!(mssa(model.bases(), &z, &softmax_cfg()).unwrap(), z);
        assert_eq!(mhsa(&mssa_as_mhsa(&model), &z, &softmax_cfg()).unwrap(), z);
    }

    /// d=2, K=1, U = e1, Z = [[1,2],[0,0]]: output = Z σ(ZᵀZ) on the first row.
    #[test]
    fn scalar_mssa_example() {
        let u = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let z = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let out = mssa(&[u], &z, &softmax_cfg()).unwrap();
        // Column 0 logits (1·1, 2·1) = (1, 2); column 1 logits (2, 4).
        let c0 = [1f64.exp(), 2f64.exp()];
        let c1 = [2f64.exp(), 4f64.exp()];
        let o0 = (1.0 * c0[0] + 2.0 * c0[1]) / (c0[0] + c0[1]);
        let o1 = (1.0 * c1[0] + 2.0 * c1[1]) / (c1[0] + c1[1]);
        assert!((out[(0, 0)] - o0).abs() < 1e-14);
        assert!((out[(0, 1)] - o1).abs() < 1e-14);
        assert_eq!(out[(1, 0)], 0.0);
        assert_eq!(out[(1, 1)], 0.0);
    }

    #[test]
    fn identity_mhsa_scalar_example() {
        let id = Matrix::identity(2);
        let params = MhsaParams {
            query: vec![id.clone()],
            key: vec![id.clone()],
            value: vec![id.clone()],
            output: id,
        };
        let z = Matrix::from_rows(&[vec![0.5, -1.0], vec![1.0, 0.25]]).unwrap();
        let out = mhsa(&params, &z, &softmax_cfg()).unwrap();
        for j in 0..2 {
            let logits: Vec<f64> = (0..2)
                .map(|i| z[(0, i)] * z[(0, j)] + z[(1, i)] * z[(1, j)])
                .collect();
            let w: Vec<f64> = logits.iter().map(|x| x.exp()).collect();
            let total = w[0] + w[1];
            for r in 0..2 {
                let expected = (z[(r, 0)] * w[0] + z[(r, 1)] * w[1]) / total;
                assert!((out[(r, j)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn inner_form_matches_full_gram() {
        let model = sample_bases(ModelDims::new(7, 2, 3).unwrap(), 4).unwrap();
        let z = gaussian(7, 5, 5);
        let u = model.basis(1);
        let coords = u.coordinates(&z).unwrap();
        let inner = matmul_tn(&coords, &coords).unwrap();
        let full = matmul_tn(&z, &matmul(&u.projector(), &z).unwrap()).unwrap();
        assert!(inner.max_abs_diff(&full) <= 1e-12);
    }

    #[test]
    fn reduction_parameter_tying() {
        let model = sample_bases(ModelDims::new(9, 1, 3).unwrap(), 2).unwrap();
        let params = mssa_as_mhsa(&model);
        assert_eq!(&params.output, model.basis(0).matrix());
        let big = sample_bases(ModelDims::new(128, 4, 32).unwrap(), 0).unwrap();
        assert_eq!(mssa_as_mhsa(&big).parameter_count(), 4 * 128 * 4 * 32);
    }

    #[test]
    fn reduction_identity_softmax_and_causal() {
        let model = sample_bases(ModelDims::new(10, 3, 2).unwrap(), 3).unwrap();
        let z = gaussian(10, 8, 6);
        let params = mssa_as_mhsa(&model);
        for causal in [false, true] {
            let cfg = AttentionConfig {
                causal,
                ..softmax_cfg()
            };
            let a = mssa(model.bases(), &z, &cfg).unwrap();
            let b = mhsa(&params, &z, &cfg).unwrap();
            assert!(frobenius_norm(&a.sub(&b).unwrap()) <= 1e-12 * frobenius_norm(&z));
        }
    }

    #[test]
    fn layer_step_cases() {
        let z = gaussian(3, 4, 1);
        let u = gaussian(3, 4, 2);
        assert_eq!(layer_step(&z, &u, 0.0).unwrap(), z);
        assert_eq!(layer_step(&z, &Matrix::zeros(3, 4), 0.7).unwrap(), z);
        assert!(layer_step(&z, &Matrix::zeros(4, 3), 0.7).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttentionConfig::new(0.5, Phi::threshold(0.8));
        assert!(cfg.validate().is_ok());
        cfg.causal = true;
        assert!(matches!(cfg.validate(), Err(Error::Parameter(_))));
        assert!(AttentionConfig::new(-0.1, Phi::softmax()).validate().is_err());
        assert!(AttentionConfig::new(0.1, Phi::threshold(1.0)).validate().is_err());
        assert!(AttentionConfig::new(0.1, Phi::Softmax { temperature: 0.0 }).validate().is_err());
    }

    #[test]
    fn phi_parsing() {
        assert_eq!("softmax".parse::<Phi>().unwrap(), Phi::softmax());
        assert_eq!("threshold:0.8".parse::<Phi>().unwrap(), Phi::threshold(0.8));
        assert_eq!(
            "softmax@4".parse::<Phi>().unwrap(),
            Phi::Softmax { temperature: 4.0 }
        );
        assert!("relu".parse::<Phi>().is_err());
        assert_eq!(Phi::threshold(0.8).to_string(), "threshold:0.8");
    }

    #[test]
    fn prenorm_cases() {
        let constant = Matrix::from_fn(5, 2, |_, _| 3.5);
        assert_eq!(prenorm(&constant), Matrix::zeros(5, 2));

        // mean 0, population variance 1
        let standard = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![1.0], vec![-1.0]]).unwrap();
        assert!(prenorm(&standard).max_abs_diff(&standard) <= 1e-6);

        let random = gaussian(64, 3, 9).scale(3.0).map(|v| v + 2.0);
        let normed = prenorm(&random);
        for j in 0..3 {
            let col = normed.column(j);
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn unroll_zero_layers() {
        let model = sample_bases(ModelDims::new(6, 2, 2).unwrap(), 1).unwrap();
        let z = gaussian(6, 4, 3);
        let (out, trace) = unroll(&LayerStack::tied(&model, 0), &z, &softmax_cfg(), None).unwrap();
        assert_eq!(out, z);
        assert!(trace.is_none());
    }

    #[test]
    fn unroll_reports_failing_layer() {
        let model = sample_bases(ModelDims::new(6, 2, 2).unwrap(), 1).unwrap();
        let z = gaussian(6, 4, 3).scale(1e200);
        let err = unroll(&LayerStack::tied(&model, 3), &z, &softmax_cfg(), None).unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: Some(_), .. }), "{err}");
    }
}
