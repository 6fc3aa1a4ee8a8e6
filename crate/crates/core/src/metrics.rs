//! Per-cluster SNR, the exact-rate verifier for thresholded unrolls, and
//! Monte Carlo checkers for the Gaussian concentration lemmas that the rate
//! argument rests on.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{unroll_observed, AttentionConfig, LayerStack, Phi, TraceOptions};
use crate::error::{Error, Result};
use crate::linalg::{
    block_pattern_match, column_softmax, frobenius_norm, hard_threshold, matmul_tn, Matrix,
};
use crate::model::{
    closed_form_state, draw_latents, rng_for, signal_scaled_state, GaussianMixtureConfig,
    Latents, Partition, SubspaceModel, TokenBatch, TRIAL_STREAM_BASE,
};
use crate::trace::{DenoiseTrace, TraceParams};

/// Below this fraction of the signal norm the noise counts as zero.
pub const INFINITE_SNR_RATIO: f64 = 1e-14;
/// Relative tolerance of the per-layer SNR ratio check.
pub const RATIO_TOL: f64 = 1e-9;
/// Relative tolerance of the final-state closed-form comparison.
pub const CLOSED_FORM_TOL: f64 = 1e-8;

/// `‖U_k U_kᵀ Z_k‖_F / ‖(I − U_k U_kᵀ) Z_k‖_F` for the columns of cluster `k`.
/// Returns `+∞` when the residual vanishes relative to the signal.
pub fn snr(model: &SubspaceModel, z: &Matrix, partition: &Partition, k: usize) -> Result<f64> {
    if k >= partition.num_clusters() || k >= model.dims().num_subspaces {
        return Err(Error::dim(format!("no cluster {k}")));
    }
    if partition.total() != z.cols() || model.dims().ambient_dim != z.rows() {
        return Err(Error::dim("token matrix does not match model and partition"));
    }
    let r = partition.range(k);
    let zk = z.column_block(r.start, r.end);
    let on = model.basis(k).project(&zk)?;
    let off = zk.sub(&on)?;
    let (num, den) = (frobenius_norm(&on), frobenius_norm(&off));
    if num < 1e-300 && den < 1e-300 {
        return Err(Error::Degenerate(format!("cluster {k} is identically zero")));
    }
    if den < INFINITE_SNR_RATIO * num {
        return Ok(f64::INFINITY);
    }
    Ok(num / den)
}

pub fn snr_all(model: &SubspaceModel, z: &Matrix, partition: &Partition) -> Result<Vec<f64>> {
    (0..partition.num_clusters())
        .map(|k| snr(model, z, partition, k))
        .collect()
}

/// Base of the logarithm in the lemma conditions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Two,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
        }
    }
}

/// Admissible threshold interval `(1/2, 1/(1 + N e^{-9p/32})]`.
pub fn tau_interval(num_tokens: usize, subspace_dim: usize) -> (f64, f64) {
    let upper = 1.0 / (1.0 + num_tokens as f64 * (-9.0 * subspace_dim as f64 / 32.0).exp());
    (0.5, upper)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TheoremReport {
    pub trace: DenoiseTrace,
    pub expected_ratio: f64,
    pub tau_interval: (f64, f64),
    /// Layers whose pattern held, i.e. where the ratio was asserted.
    pub checked_layers: Vec<usize>,
    /// Largest relative deviation of an asserted ratio from `1 + ητ`.
    pub max_ratio_error: f64,
    pub pattern_frequency: f64,
    pub held_prefix: usize,
    /// `‖Z^(h) − closed form(h)‖ / ‖Z^(h)‖` at the end `h` of the held prefix.
    pub prefix_closed_form_error: f64,
    /// Same at the final layer, when every layer held.
    pub final_closed_form_error: Option<f64>,
    pub passed: bool,
}

/// Runs the thresholded unroll with tied bases and checks the exact SNR
/// growth `(1 + ητ)` on every layer whose attention pattern was block
/// diagonal, plus agreement with the closed-form state while it held.
pub fn verify_theorem(
    model: &SubspaceModel,
    batch: &TokenBatch,
    layers: usize,
    eta: f64,
    tau: f64,
    seed: Option<u64>,
    delta: Option<f64>,
) -> Result<TheoremReport> {
    let dims = model.dims();
    let n = batch.partition.total();
    let interval = tau_interval(n, dims.subspace_dim);
    if interval.1 <= interval.0 {
        return Err(Error::param(format!(
            "threshold interval ({}, {:.6}] is empty for N = {n}, p = {}",
            interval.0, interval.1, dims.subspace_dim
        )));
    }
    if !(tau > interval.0 && tau <= interval.1) {
        return Err(Error::param(format!(
            "threshold {tau} outside admissible interval ({}, {:.6}]",
            interval.0, interval.1
        )));
    }
    if batch.latents.is_none() {
        return Err(Error::OracleUnavailable("verification needs latent factors".into()));
    }
    let cfg = AttentionConfig::new(eta, Phi::threshold(tau));
    let params = TraceParams {
        dims,
        tokens_per_cluster: batch.partition.sizes()[0],
        eta,
        phi: cfg.phi,
        causal: false,
        prenorm: false,
        delta,
        seed,
    };
    let opts = TraceOptions {
        model,
        partition: &batch.partition,
        params: &params,
    };
    let mut states = Vec::with_capacity(layers + 1);
    let (_, trace) = unroll_observed(&LayerStack::tied(model, layers), &batch.z, &cfg, Some(opts), |_, z| {
        states.push(z.clone())
    })?;
    let trace = trace.expect("trace requested");

    let expected = 1.0 + eta * tau;
    let mut checked = Vec::new();
    let mut max_err: f64 = 0.0;
    for (l, ratios) in trace.ratios().iter().enumerate() {
        if !trace.pattern()[l] {
            continue;
        }
        checked.push(l);
        for (k, &r) in ratios.iter().enumerate() {
            let both_infinite = trace.snr()[l][k].is_infinite() && trace.snr()[l + 1][k].is_infinite();
            if !both_infinite {
                max_err = max_err.max((r - expected).abs() / expected);
            }
        }
    }

    let closed_form_error = |l: usize| -> Result<f64> {
        let cf = closed_form_state(batch, model, l, eta, tau)?;
        let z = &states[l];
        Ok(frobenius_norm(&z.sub(&cf)?) / frobenius_norm(z))
    };
    let held = trace.held_prefix();
    let prefix_err = closed_form_error(held)?;
    let final_err = if held == layers { Some(prefix_err) } else { None };
    let ratio_ok = !max_err.is_nan() && max_err <= RATIO_TOL;
    let closed_ok = final_err.is_none_or(|e| e <= CLOSED_FORM_TOL);

    Ok(TheoremReport {
        expected_ratio: expected,
        tau_interval: interval,
        checked_layers: checked,
        max_ratio_error: max_err,
        pattern_frequency: trace.pattern_frequency().unwrap_or(1.0),
        held_prefix: held,
        prefix_closed_form_error: prefix_err,
        final_closed_form_error: final_err,
        passed: ratio_ok && closed_ok,
        trace,
    })
}

/// Binomial slack `3 √(f (1 − f) / trials)` around a probability floor `f`.
pub fn binomial_slack(floor: f64, trials: usize) -> f64 {
    let f = floor.clamp(0.0, 1.0);
    3.0 * (f * (1.0 - f) / trials as f64).sqrt()
}

/// Empirical satisfaction rate of one inequality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub label: String,
    pub trials: usize,
    pub satisfied: usize,
    pub frequency: f64,
    /// Probability floor claimed for the inequality, when one is stated.
    pub floor: Option<f64>,
    pub slack: f64,
    /// Fraction of individual index instances satisfied, pooled over
    /// trials, for inequalities quantified over many indices.
    #[serde(default)]
    pub instance_frequency: Option<f64>,
}

impl InequalityCheck {
    fn new(label: impl Into<String>, trials: usize, satisfied: usize, floor: Option<f64>) -> Self {
        InequalityCheck {
            label: label.into(),
            trials,
            satisfied,
            frequency: if trials == 0 { 0.0 } else { satisfied as f64 / trials as f64 },
            floor,
            slack: floor.map_or(0.0, |f| binomial_slack(f, trials.max(1))),
            instance_frequency: None,
        }
    }

    /// Frequency at or above the floor minus binomial slack (always true
    /// without a floor).
    pub fn meets_floor(&self) -> bool {
        self.floor.is_none_or(|f| self.frequency >= f - self.slack)
    }
}

/// Whether a regime condition of a lemma holds at the chosen parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeCondition {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub num_tokens: Option<usize>,
    pub num_subspaces: Option<usize>,
    pub subspace_dim: Option<usize>,
    pub ambient_dim: Option<usize>,
    pub delta: Option<f64>,
    pub tau: Option<f64>,
    pub theta: Option<f64>,
    pub t: Option<f64>,
    pub log_base: LogBase,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub lemma: String,
    pub regime: Regime,
    pub conditions: Vec<RegimeCondition>,
    pub checks: Vec<InequalityCheck>,
}

impl LemmaReport {
    pub fn check(&self, label: &str) -> Option<&InequalityCheck> {
        self.checks.iter().find(|c| c.label == label)
    }

    pub fn all_meet_floor(&self) -> bool {
        self.checks.iter().all(InequalityCheck::meets_floor)
    }
}

/// Norm concentration of `x ~ N(0, δ² I_d)`:
/// `|‖x‖ − δ√d| ≤ t + 2δ` with probability at least `1 − 2 exp(−t²/2δ²)`.
pub fn check_lemma_a1(d: usize, delta: f64, t: f64, trials: usize, seed: u64) -> Result<LemmaReport> {
    if trials == 0 || d == 0 {
        return Err(Error::param("need d >= 1 and trials >= 1"));
    }
    if !(delta >= 0.0 && t >= 0.0) {
        return Err(Error::param("delta and t must be >= 0"));
    }
    let mut rng = rng_for(seed, TRIAL_STREAM_BASE);
    let center = delta * (d as f64).sqrt();
    let bound = t + 2.0 * delta;
    let satisfied = (0..trials)
        .filter(|_| {
            let x = crate::model::standard_normal_matrix(&mut rng, d, 1);
            (delta * frobenius_norm(&x) - center).abs() <= bound
        })
        .count();
    let floor = if delta == 0.0 {
        1.0
    } else {
        1.0 - 2.0 * (-t * t / (2.0 * delta * delta)).exp()
    };
    Ok(LemmaReport {
        lemma: "gaussian_norm_concentration".into(),
        regime: Regime {
            ambient_dim: Some(d),
            delta: Some(delta),
            t: Some(t),
            seed,
            ..Regime::default()
        },
        conditions: Vec::new(),
        checks: vec![InequalityCheck::new("norm_deviation", trials, satisfied, Some(floor))],
    })
}

/// Labels of the inequalities checked by [`check_lemma_a2`], in order.
pub const LEMMA_A2_LABELS: [&str; 8] = [
    "signal_norm",
    "noise_norm",
    "signal_signal_inner",
    "signal_noise_inner",
    "noise_noise_inner",
    "max_signal_noise_inner",
    "signal_noise_softmax",
    "noise_noise_softmax",
];

/// Satisfied and total index instances of one inequality within a trial.
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    satisfied: usize,
    total: usize,
}

impl Tally {
    fn record(&mut self, holds: bool) {
        self.satisfied += holds as usize;
        self.total += 1;
    }

    fn all(&self) -> bool {
        self.satisfied == self.total
    }
}

/// Instance counts of every inequality for one draw of the latent factors.
fn lemma_a2_trial(latents: &Latents, delta: f64, log_n: f64) -> Result<[Tally; 8]> {
    let k_count = latents.num_clusters();
    let p = latents.signal(0).rows() as f64;
    let sq = log_n.sqrt();
    let col_norms = |m: &Matrix| -> Vec<f64> {
        (0..m.cols())
            .map(|j| m.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    };

    let mut t = [Tally::default(); 8];
    for k in 0..k_count {
        let a = latents.signal(k);
        let a_norms = col_norms(a);
        for n in &a_norms {
            t[0].record((n - p.sqrt()).abs() <= 2.0 * (sq + 1.0));
        }
        // Noise of cluster-k tokens in every other subspace.
        for l in (0..k_count).filter(|&l| l != k) {
            let e = latents.noise(k, l).expect("off-diagonal");
            for n in col_norms(e) {
                t[1].record((n - delta * p.sqrt()).abs() <= 2.0 * delta * (sq + 1.0));
            }
        }

        // Within-cluster signal inner products.
        let gaa = matmul_tn(a, a)?;
        for i in 0..a.cols() {
            for j in (0..a.cols()).filter(|&j| j != i) {
                t[2].record(gaa[(i, j)].abs() <= 3.0 * sq * a_norms[i]);
            }
        }

        // Noise of every other cluster's tokens in subspace k, stacked.
        let others: Vec<&Matrix> = (0..k_count)
            .filter(|&l| l != k)
            .map(|l| latents.noise(l, k).expect("off-diagonal"))
            .collect();
        let sizes: Vec<usize> = others.iter().map(|m| m.cols()).collect();
        let ek = Matrix::hstack(&others)?;
        let ek_norms = col_norms(&ek);

        let gae = matmul_tn(a, &ek)?;
        let soft_ae = column_softmax(&gae);
        for j in 0..ek.cols() {
            let column = gae.column(j);
            for v in &column {
                t[3].record(v.abs() <= 3.0 * sq * ek_norms[j]);
            }
            let max = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            t[5].record(max >= sq * ek_norms[j]);
            for i in 0..a.cols() {
                t[6].record(soft_ae[(i, j)] <= 0.5);
            }
        }

        let gee = matmul_tn(&ek, &ek)?;
        for i in 0..ek.cols() {
            for j in (0..ek.cols()).filter(|&j| j != i) {
                t[4].record(gee[(i, j)].abs() <= 3.0 * delta * sq * ek_norms[j]);
            }
        }
        // For token j, softmax over each other-cluster block C_l with j
        // itself left out of the normalization.
        let mut block_start = 0;
        for &size in &sizes {
            for j in 0..ek.cols() {
                let rows: Vec<usize> = (block_start..block_start + size).filter(|&i| i != j).collect();
                if rows.is_empty() {
                    continue;
                }
                let max = rows.iter().map(|&i| gee[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = rows.iter().map(|&i| (gee[(i, j)] - max).exp()).sum();
                for &i in &rows {
                    t[7].record((gee[(i, j)] - max).exp() / total <= 0.5);
                }
            }
            block_start += size;
        }
    }
    Ok(t)
}

/// Regime conditions of the inner-product lemma at `(N, K, p, δ)`.
pub fn lemma_a2_conditions(num_tokens: usize, k: usize, p: usize, delta: f64, base: LogBase) -> Vec<RegimeCondition> {
    let n = num_tokens as f64;
    let log_n = base.log(n);
    let cond = |name: &str, lhs: f64, rhs: f64, holds: bool| RegimeCondition {
        name: name.into(),
        lhs,
        rhs,
        holds,
    };
    let p_floor = 16.0 * (log_n.sqrt() + 1.0).powi(2);
    let delta_cap = (log_n / p as f64).sqrt() / 8.0;
    let n_floor = 8.0 * std::f64::consts::PI * (k * k) as f64 * log_n.powi(3);
    vec![
        cond("p >= 16(sqrt(log N) + 1)^2", p as f64, p_floor, p as f64 >= p_floor),
        cond("delta <= sqrt(log N / p) / 8", delta, delta_cap, delta <= delta_cap),
        cond("N >= 8 pi K^2 log^3 N", n, n_floor, n >= n_floor),
    ]
}

/// Monte Carlo frequencies of the norm, inner-product, maximum and softmax
/// bounds on the latent factors, one fresh draw per trial.
///
/// Each trial draws a full batch; an inequality counts as satisfied only if
/// it holds for every index combination it quantifies over.
pub fn check_lemma_a2(
    cfg: &GaussianMixtureConfig,
    trials: usize,
    seed: u64,
    base: LogBase,
) -> Result<LemmaReport> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::param("trials must be >= 1"));
    }
    let n = cfg.num_tokens();
    let k = cfg.dims.num_subspaces;
    if k < 2 {
        return Err(Error::param("inner-product bounds need at least two subspaces"));
    }
    let log_n = base.log(n as f64);
    let outcomes: Vec<[Tally; 8]> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(seed, TRIAL_STREAM_BASE + t);
            let latents = draw_latents(cfg, &mut rng)?;
            lemma_a2_trial(&latents, cfg.delta, log_n)
        })
        .collect::<Result<_>>()?;

    let nf = n as f64;
    let kf = k as f64;
    let floors = [
        1.0 - 2.0 * kf / nf,
        1.0 - 2.0 * kf / nf,
        1.0 - 4.0 * kf / (nf * nf),
        1.0 - 4.0 * kf / (nf * nf),
        1.0 - 4.0 * kf / (nf * nf),
        1.0 - 2.0 / nf,
        1.0 - 4.0 * kf / nf,
        1.0 - 4.0 * kf / nf,
    ];
    let checks = LEMMA_A2_LABELS
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let satisfied = outcomes.iter().filter(|o| o[i].all()).count();
            let mut check = InequalityCheck::new(*label, trials, satisfied, Some(floors[i]));
            let (hit, total) = outcomes
                .iter()
                .fold((0, 0), |(h, n), o| (h + o[i].satisfied, n + o[i].total));
            check.instance_frequency = Some(if total == 0 { 1.0 } else { hit as f64 / total as f64 });
            check
        })
        .collect();
    Ok(LemmaReport {
        lemma: "latent_inner_products".into(),
        regime: Regime {
            num_tokens: Some(n),
            num_subspaces: Some(k),
            subspace_dim: Some(cfg.dims.subspace_dim),
            delta: Some(cfg.delta),
            log_base: base,
            seed,
            ..Regime::default()
        },
        conditions: lemma_a2_conditions(n, k, cfg.dims.subspace_dim, cfg.delta, base),
        checks,
    })
}

/// Whether `h(σ(M_k))` is `τ I` on cluster `k` and zero elsewhere, for each
/// head, when the signal coordinates are scaled by `theta`.
pub fn lemma_a3_patterns(model: &SubspaceModel, batch: &TokenBatch, theta: f64, tau: f64) -> Result<Vec<bool>> {
    if theta < 1.0 {
        return Err(Error::param(format!("signal scale {theta} must be >= 1")));
    }
    let z = signal_scaled_state(batch, model, theta)?;
    (0..model.dims().num_subspaces)
        .map(|k| {
            let coords = model.basis(k).coordinates(&z)?;
            let phi = hard_threshold(&column_softmax(&matmul_tn(&coords, &coords)?), tau)?;
            block_pattern_match(&phi, batch.partition.sizes(), k, tau)
        })
        .collect()
}

fn lemma_a3_report(per_trial: &[Vec<bool>], regime: Regime) -> LemmaReport {
    let trials = per_trial.len();
    let heads = per_trial.first().map_or(0, Vec::len);
    let mut checks: Vec<InequalityCheck> = (0..heads)
        .map(|k| {
            let hits = per_trial.iter().filter(|t| t[k]).count();
            InequalityCheck::new(format!("head_{k}"), trials, hits, None)
        })
        .collect();
    let all = per_trial.iter().filter(|t| t.iter().all(|&h| h)).count();
    checks.push(InequalityCheck::new("all_heads", trials, all, None));
    LemmaReport {
        lemma: "block_diagonal_attention".into(),
        regime,
        conditions: Vec::new(),
        checks,
    }
}

/// Block-pattern check on one batch; each head contributes a single trial.
pub fn check_lemma_a3(model: &SubspaceModel, batch: &TokenBatch, theta: f64, tau: f64) -> Result<LemmaReport> {
    let dims = model.dims();
    let patterns = lemma_a3_patterns(model, batch, theta, tau)?;
    Ok(lemma_a3_report(
        &[patterns],
        Regime {
            num_tokens: Some(batch.partition.total()),
            num_subspaces: Some(dims.num_subspaces),
            subspace_dim: Some(dims.subspace_dim),
            ambient_dim: Some(dims.ambient_dim),
            tau: Some(tau),
            theta: Some(theta),
            ..Regime::default()
        },
    ))
}

/// Per-head pattern frequency over `seeds`; each seed draws its own bases
/// and batch.
pub fn sweep_lemma_a3(cfg: &GaussianMixtureConfig, theta: f64, tau: f64, seeds: std::ops::Range<u64>) -> Result<LemmaReport> {
    cfg.validate()?;
    let per_trial: Vec<Vec<bool>> = seeds
        .clone()
        .into_par_iter()
        .map(|s| {
            let model = crate::model::sample_bases(cfg.dims, s)?;
            let batch = crate::model::sample_tokens(&model, &GaussianMixtureConfig { seed: s, ..cfg.clone() })?;
            lemma_a3_patterns(&model, &batch, theta, tau)
        })
        .collect::<Result<_>>()?;
    Ok(lemma_a3_report(
        &per_trial,
        Regime {
            num_tokens: Some(cfg.num_tokens()),
            num_subspaces: Some(cfg.dims.num_subspaces),
            subspace_dim: Some(cfg.dims.subspace_dim),
            ambient_dim: Some(cfg.dims.ambient_dim),
            delta: Some(cfg.delta),
            tau: Some(tau),
            theta: Some(theta),
            seed: seeds.start,
            ..Regime::default()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{latent_snr, sample_bases, sample_tokens, ModelDims};

    fn batch(d: usize, k: usize, p: usize, n_k: usize, delta: f64, seed: u64) -> (SubspaceModel, TokenBatch) {
        let dims = ModelDims::new(d, k, p).unwrap();
        let model = sample_bases(dims, seed).unwrap();
        let cfg = GaussianMixtureConfig {
            dims,
            tokens_per_cluster: n_k,
            delta,
            seed,
        };
        let b = sample_tokens(&model, &cfg).unwrap();
        (model, b)
    }

    #[test]
    fn noise_free_batch_is_infinite() {
        let (model, b) = batch(12, 3, 2, 5, 0.0, 1);
        for v in snr_all(&model, &b.z, &b.partition).unwrap() {
            assert_eq!(v, f64::INFINITY);
        }
    }

    #[test]
    fn equal_energy_token() {
        let (model, _) = batch(6, 2, 1, 1, 0.0, 2);
        let u0 = model.basis(0).matrix().column(0);
        let u1 = model.basis(1).matrix().column(0);
        let z = Matrix::from_columns(&[u0.iter().zip(&u1).map(|(a, b)| a + b).collect()]).unwrap();
        let s = snr(&model, &z, &Partition::new(vec![1]).unwrap(), 0).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matches_latent_side_computation() {
        let (model, b) = batch(40, 4, 6, 20, 0.5, 3);
        for k in 0..4 {
            let direct = snr(&model, &b.z, &b.partition, k).unwrap();
            let latent = latent_snr(&b, &model, k).unwrap();
            assert!((direct - latent).abs() <= 1e-10 * latent);
        }
    }

    #[test]
    fn zero_cluster_is_an_error() {
        let (model, b) = batch(8, 2, 2, 3, 0.1, 4);
        let z = Matrix::zeros(8, 6);
        assert!(matches!(snr(&model, &z, &b.partition, 0), Err(Error::Degenerate(_))));
        assert!(snr(&model, &b.z, &b.partition, 5).is_err());
    }

    #[test]
    fn tau_interval_value() {
        let (lo, hi) = tau_interval(1024, 32);
        assert_eq!(lo, 0.5);
        let expected = 1.0 / (1.0 + 1024.0 * (-9.0f64).exp());
        assert!((hi - expected).abs() < 1e-15);
        assert!((hi - 0.8878).abs() < 1e-4);
    }

    #[test]
    fn empty_tau_interval_rejected() {
        // N e^{-9p/32} >= 1 makes the interval empty.
        let (model, b) = batch(8, 2, 2, 50, 0.1, 5);
        let err = verify_theorem(&model, &b, 2, 0.5, 0.6, None, None).unwrap_err();
        assert!(matches!(err, Error::Parameter(ref m) if m.contains("empty")), "{err}");
    }

    #[test]
    fn zero_step_is_vacuous_pass() {
        let (model, b) = batch(64, 2, 24, 32, 0.05, 6);
        let report = verify_theorem(&model, &b, 3, 0.0, 0.8, Some(6), Some(0.05)).unwrap();
        assert!(report.passed);
        for row in report.trace.ratios() {
            for r in row {
                assert_eq!(r, 1.0);
            }
        }
    }

    #[test]
    fn lemma_a1_edge_cases() {
        let zero = check_lemma_a1(16, 0.0, 1.0, 50, 1).unwrap();
        assert_eq!(zero.checks[0].frequency, 1.0);
        let vacuous = check_lemma_a1(16, 1.0, 0.0, 50, 1).unwrap();
        assert!(vacuous.checks[0].floor.unwrap() < 0.0);
        assert!(vacuous.all_meet_floor());
    }

    #[test]
    fn lemma_a1_monte_carlo() {
        let r = check_lemma_a1(64, 1.0, 3.0, 10_000, 7).unwrap();
        let c = &r.checks[0];
        assert!((c.floor.unwrap() - (1.0 - 2.0 * (-4.5f64).exp())).abs() < 1e-15);
        assert!(c.meets_floor(), "{c:?}");
    }

    #[test]
    fn lemma_a2_noise_free() {
        let cfg = GaussianMixtureConfig {
            dims: ModelDims::new(48, 3, 16).unwrap(),
            tokens_per_cluster: 16,
            delta: 0.0,
            seed: 0,
        };
        let r = check_lemma_a2(&cfg, 5, 9, LogBase::Natural).unwrap();
        for label in ["noise_norm", "signal_noise_inner", "noise_noise_inner"] {
            assert_eq!(r.check(label).unwrap().frequency, 1.0, "{label}");
        }
        assert!(check_lemma_a2(&cfg, 5, 9, LogBase::Natural).unwrap() == r);
    }

    #[test]
    fn lemma_a2_signal_norm_frequency() {
        let cfg = GaussianMixtureConfig {
            dims: ModelDims::new(128, 2, 64).unwrap(),
            tokens_per_cluster: 64,
            delta: 0.05,
            seed: 0,
        };
        let r = check_lemma_a2(&cfg, 100, 11, LogBase::Natural).unwrap();
        let c = r.check("signal_norm").unwrap();
        assert!(c.frequency >= 0.99, "{c:?}");
        assert!(c.instance_frequency.unwrap() >= c.frequency);
        assert_eq!(r.conditions.len(), 3);
        let two = check_lemma_a2(&cfg, 5, 11, LogBase::Two).unwrap();
        assert!(two.conditions[0].rhs > r.conditions[0].rhs);
    }

    #[test]
    fn lemma_a3_single_cluster_exact() {
        // K = 1: no off-subspace noise, M = AᵀA.
        let tau = 0.8;
        let mut dominant_seen = 0;
        for seed in 0..20 {
            let (model, b) = batch(16, 1, 16, 4, 0.3, seed);
            let a = b.latents.as_ref().unwrap().signal(0).clone();
            let m = matmul_tn(&a, &a).unwrap();
            let mut diag_dominant = true;
            for j in 0..4 {
                let w: Vec<f64> = (0..4).map(|i| m[(i, j)].exp()).collect();
                let total: f64 = w.iter().sum();
                if w[j] / total <= tau || (0..4).any(|i| i != j && w[i] / total > tau) {
                    diag_dominant = false;
                }
            }
            dominant_seen += diag_dominant as usize;
            let patterns = lemma_a3_patterns(&model, &b, 1.0, tau).unwrap();
            assert_eq!(patterns, vec![diag_dominant], "seed {seed}");
        }
        assert!(dominant_seen > 0);
    }

    #[test]
    fn lemma_a3_theta_one_matches_layer_zero_check() {
        let (model, b) = batch(64, 2, 24, 32, 0.05, 13);
        let direct = lemma_a3_patterns(&model, &b, 1.0, 0.8).unwrap();
        let report = verify_theorem(&model, &b, 1, 0.5, 0.8, None, None).unwrap();
        assert_eq!(report.trace.pattern()[0], direct.iter().all(|&h| h));
        assert!(lemma_a3_patterns(&model, &b, 0.5, 0.8).is_err());
    }
}
