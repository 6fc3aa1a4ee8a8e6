//! Union-of-subspaces token model: jointly orthonormal subspace bases and
//! token batches drawn from a mixture of noisy low-rank Gaussians.
//!
//! Randomness comes from ChaCha8 seeded with a 64-bit seed, with a separate
//! ChaCha stream per purpose (see [`rng_for`]). Gaussians are drawn with the
//! ziggurat sampler behind `rand_distr::StandardNormal`.
//!
//! Token stream order: clusters outer, tokens inner; for each token the `p`
//! signal coordinates come first, then the `p` noise coordinates for every
//! other subspace in increasing subspace index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, matmul, orthonormalize, Matrix, OrthonormalBasis};

/// ChaCha stream used to draw subspace bases.
pub const BASIS_STREAM: u64 = 0;
/// ChaCha stream used to draw tokens.
pub const TOKEN_STREAM: u64 = 1;
/// ChaCha stream used to initialize trainable parameters.
pub const INIT_STREAM: u64 = 2;
/// First stream handed out to independent Monte Carlo trials.
pub const TRIAL_STREAM_BASE: u64 = 1 << 32;

/// Deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn standard_normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub ambient_dim: usize,
    pub num_subspaces: usize,
    pub subspace_dim: usize,
}

impl ModelDims {
    pub fn new(ambient_dim: usize, num_subspaces: usize, subspace_dim: usize) -> Result<Self> {
        let dims = ModelDims {
            ambient_dim,
            num_subspaces,
            subspace_dim,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_subspaces == 0 || self.subspace_dim == 0 {
            return Err(Error::param("need at least one subspace of dimension >= 1"));
        }
        if self.ambient_dim < self.num_subspaces * self.subspace_dim {
            return Err(Error::param(format!(
                "ambient dimension {} < {} subspaces x dimension {}",
                self.ambient_dim, self.num_subspaces, self.subspace_dim
            )));
        }
        Ok(())
    }
}

/// `K` subspaces of equal dimension whose stacked bases are orthonormal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceModel {
    dims: ModelDims,
    bases: Vec<OrthonormalBasis>,
}

impl SubspaceModel {
    /// Wraps explicit bases, checking joint orthonormality to 1e-9.
    pub fn from_bases(bases: Vec<OrthonormalBasis>) -> Result<Self> {
        let first = bases.first().ok_or_else(|| Error::param("no bases"))?;
        let dims = ModelDims::new(first.ambient_dim(), bases.len(), first.rank())?;
        if bases
            .iter()
            .any(|b| b.ambient_dim() != dims.ambient_dim || b.rank() != dims.subspace_dim)
        {
            return Err(Error::dim("bases of differing shape"));
        }
        let model = SubspaceModel { dims, bases };
        let residual = crate::linalg::orthonormality_residual(&model.stacked());
        if residual > 1e-9 {
            return Err(Error::Degenerate(format!(
                "stacked bases not jointly orthonormal (residual {residual:.3e})"
            )));
        }
        Ok(model)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn bases(&self) -> &[OrthonormalBasis] {
        &self.bases
    }

    pub fn basis(&self, k: usize) -> &OrthonormalBasis {
        &self.bases[k]
    }

    /// `[U_1 ... U_K]`.
    pub fn stacked(&self) -> Matrix {
        let refs: Vec<&Matrix> = self.bases.iter().map(OrthonormalBasis::matrix).collect();
        Matrix::hstack(&refs).expect("bases share a row count")
    }

    /// Plain basis matrices, e.g. as the initial point of an untied layer.
    pub fn basis_matrices(&self) -> Vec<Matrix> {
        self.bases.iter().map(|b| b.matrix().clone()).collect()
    }
}

/// Draws a `d x Kp` standard Gaussian matrix (row-major fill order),
/// orthonormalizes it, and splits it into `K` blocks of `p` columns.
pub fn sample_bases(dims: ModelDims, seed: u64) -> Result<SubspaceModel> {
    dims.validate()?;
    let mut rng = rng_for(seed, BASIS_STREAM);
    let total = dims.num_subspaces * dims.subspace_dim;
    let g = standard_normal_matrix(&mut rng, dims.ambient_dim, total);
    let q = orthonormalize(&g)?;
    let bases = (0..dims.num_subspaces)
        .map(|k| {
            let start = k * dims.subspace_dim;
            OrthonormalBasis::new(q.matrix().column_block(start, start + dims.subspace_dim))
        })
        .collect::<Result<Vec<_>>>()?;
    SubspaceModel::from_bases(bases)
}

/// Contiguous cluster layout of token columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    sizes: Vec<usize>,
}

impl Partition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::param("partition needs non-empty clusters"));
        }
        Ok(Partition { sizes })
    }

    pub fn equal(clusters: usize, per_cluster: usize) -> Result<Self> {
        Partition::new(vec![per_cluster; clusters])
    }

    /// Rebuilds a partition from per-column labels, which must be
    /// non-decreasing and cover `0..K` without gaps.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let mut sizes: Vec<usize> = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            match l.cmp(&sizes.len()) {
                std::cmp::Ordering::Less if l + 1 == sizes.len() => *sizes.last_mut().unwrap() += 1,
                std::cmp::Ordering::Equal => sizes.push(1),
                _ => {
                    return Err(Error::Format(format!(
                        "labels must be contiguous and increasing; column {i} has label {l}"
                    )))
                }
            }
        }
        Partition::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_clusters(&self) -> usize {
        self.sizes.len()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Column range of cluster `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.sizes[..k].iter().sum();
        start..start + self.sizes[k]
    }

    pub fn labels(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| std::iter::repeat_n(k, n))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureConfig {
    pub dims: ModelDims,
    pub tokens_per_cluster: usize,
    /// Standard deviation of the off-subspace noise coefficients.
    pub delta: f64,
    pub seed: u64,
}

impl GaussianMixtureConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.tokens_per_cluster == 0 {
            return Err(Error::param("tokens_per_cluster must be >= 1"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::param(format!("noise scale {} must be >= 0", self.delta)));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.dims.num_subspaces * self.tokens_per_cluster
    }
}

/// Latent factors behind a sampled batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    /// `signal[k]`: `p x N_k` coefficients in subspace `k` of cluster `k` tokens.
    signal: Vec<Matrix>,
    /// `noise[k][j]`: `p x N_k` coefficients of cluster `k` tokens in subspace
    /// `j`; the diagonal `j == k` entries are zero and unused.
    noise: Vec<Vec<Matrix>>,
}

impl Latents {
    pub fn new(signal: Vec<Matrix>, noise: Vec<Vec<Matrix>>) -> Result<Self> {
        let k = signal.len();
        if noise.len() != k || noise.iter().any(|row| row.len() != k) {
            return Err(Error::dim("noise factors must form a K x K table"));
        }
        for (c, a) in signal.iter().enumerate() {
            if noise[c].iter().any(|e| e.shape() != a.shape()) {
                return Err(Error::dim(format!("cluster {c} latent shapes differ")));
            }
        }
        Ok(Latents { signal, noise })
    }

    pub fn signal(&self, k: usize) -> &Matrix {
        &self.signal[k]
    }

    /// Noise coefficients of cluster `k` in subspace `j`; `None` when `j == k`.
    pub fn noise(&self, k: usize, j: usize) -> Option<&Matrix> {
        (j != k).then(|| &self.noise[k][j])
    }

    pub fn num_clusters(&self) -> usize {
        self.signal.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    /// `d x N` token matrix; columns are tokens, clusters contiguous.
    pub z: Matrix,
    pub partition: Partition,
    pub latents: Option<Latents>,
}

impl TokenBatch {
    pub fn new(z: Matrix, partition: Partition, latents: Option<Latents>) -> Result<Self> {
        if z.cols() != partition.total() {
            return Err(Error::dim(format!(
                "{} token columns but partition covers {}",
                z.cols(),
                partition.total()
            )));
        }
        if let Some(l) = &latents {
            if l.num_clusters() != partition.num_clusters() {
                return Err(Error::dim("latent cluster count differs from partition"));
            }
        }
        Ok(TokenBatch { z, partition, latents })
    }

    pub fn cluster(&self, k: usize) -> Matrix {
        let r = self.partition.range(k);
        self.z.column_block(r.start, r.end)
    }

    fn latents(&self) -> Result<&Latents> {
        self.latents
            .as_ref()
            .ok_or_else(|| Error::OracleUnavailable("batch carries no latent factors".into()))
    }
}

/// Off-subspace part `Σ_{j≠k} U_j E_{k,j}` of cluster `k`.
fn cluster_noise(model: &SubspaceModel, latents: &Latents, k: usize) -> Result<Matrix> {
    let n = latents.signal(k).cols();
    let mut acc = Matrix::zeros(model.dims().ambient_dim, n);
    for j in 0..model.dims().num_subspaces {
        if let Some(e) = latents.noise(k, j) {
            acc = acc.add(&matmul(model.basis(j).matrix(), e)?)?;
        }
    }
    Ok(acc)
}

/// Cluster `k` state `scale * U_k A_k + Σ_{j≠k} U_j E_{k,j}`.
fn assemble_cluster(model: &SubspaceModel, latents: &Latents, k: usize, scale: f64) -> Result<Matrix> {
    let signal = matmul(model.basis(k).matrix(), latents.signal(k))?.scale(scale);
    signal.add(&cluster_noise(model, latents, k)?)
}

fn check_dims(model: &SubspaceModel, dims: ModelDims) -> Result<()> {
    if model.dims() != dims {
        return Err(Error::dim(format!(
            "config dims {dims:?} differ from model dims {:?}",
            model.dims()
        )));
    }
    Ok(())
}

/// Draws the latent factors of one batch in the documented stream order.
pub(crate) fn draw_latents(cfg: &GaussianMixtureConfig, rng: &mut impl Rng) -> Result<Latents> {
    let ModelDims {
        num_subspaces: k_count,
        subspace_dim: p,
        ..
    } = cfg.dims;
    let n_k = cfg.tokens_per_cluster;
    let mut signal = Vec::with_capacity(k_count);
    let mut noise = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut a = Matrix::zeros(p, n_k);
        let mut e: Vec<Matrix> = (0..k_count).map(|_| Matrix::zeros(p, n_k)).collect();
        for i in 0..n_k {
            for r in 0..p {
                a[(r, i)] = rng.sample(StandardNormal);
            }
            for (j, ej) in e.iter_mut().enumerate() {
                if j == k {
                    continue;
                }
                for r in 0..p {
                    let x: f64 = rng.sample(StandardNormal);
                    ej[(r, i)] = cfg.delta * x;
                }
            }
        }
        signal.push(a);
        noise.push(e);
    }
    Latents::new(signal, noise)
}

pub fn sample_tokens(model: &SubspaceModel, cfg: &GaussianMixtureConfig) -> Result<TokenBatch> {
    cfg.validate()?;
    check_dims(model, cfg.dims)?;
    let mut rng = rng_for(cfg.seed, TOKEN_STREAM);
    let latents = draw_latents(cfg, &mut rng)?;
    let z = scaled_signal_state(model, &latents, 1.0)?;
    TokenBatch::new(
        z,
        Partition::equal(cfg.dims.num_subspaces, cfg.tokens_per_cluster)?,
        Some(latents),
    )
}

/// Token matrix with every cluster's signal part multiplied by `scale`.
fn scaled_signal_state(model: &SubspaceModel, latents: &Latents, scale: f64) -> Result<Matrix> {
    if latents.num_clusters() != model.dims().num_subspaces {
        return Err(Error::dim("latent cluster count differs from model"));
    }
    let blocks = (0..latents.num_clusters())
        .map(|k| assemble_cluster(model, latents, k, scale))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = blocks.iter().collect();
    Matrix::hstack(&refs)
}

/// Batch state with the signal scaled by `scale` and the noise untouched.
pub fn signal_scaled_state(batch: &TokenBatch, model: &SubspaceModel, scale: f64) -> Result<Matrix> {
    scaled_signal_state(model, batch.latents()?, scale)
}

/// `U Uᵀ z`.
pub fn project(basis: &OrthonormalBasis, z: &Matrix) -> Result<Matrix> {
    if basis.ambient_dim() != z.rows() {
        return Err(Error::dim(format!(
            "basis in dimension {} applied to {}-row tokens",
            basis.ambient_dim(),
            z.rows()
        )));
    }
    basis.project(z)
}

/// Analytic layer-`l` state of the thresholded unroll while the block pattern
/// holds: cluster `k` is `(1+ητ)^l U_k A_k + Σ_{j≠k} U_j E_{k,j}`.
pub fn closed_form_state(
    batch: &TokenBatch,
    model: &SubspaceModel,
    layer: usize,
    eta: f64,
    tau: f64,
) -> Result<Matrix> {
    let growth = (1.0 + eta * tau).powi(layer as i32);
    signal_scaled_state(batch, model, growth)
}

/// `‖A_k‖_F / ‖Σ_{j≠k} U_j E_{k,j}‖_F` from the latent factors.
pub fn latent_snr(batch: &TokenBatch, model: &SubspaceModel, k: usize) -> Result<f64> {
    let latents = batch.latents()?;
    let noise = frobenius_norm(&cluster_noise(model, latents, k)?);
    Ok(frobenius_norm(latents.signal(k)) / noise)
}

/// Clean target `U_k A_k` per cluster, laid out like `batch.z`.
pub fn clean_signal(batch: &TokenBatch, model: &SubspaceModel) -> Result<Matrix> {
    let latents = batch.latents()?;
    let blocks = (0..latents.num_clusters())
        .map(|k| matmul(model.basis(k).matrix(), latents.signal(k)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Matrix> = blocks.iter().collect();
    Matrix::hstack(&refs)
}
