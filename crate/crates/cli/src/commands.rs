use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use aot_core::attention::{unroll, AttentionConfig, LayerStack, Phi, TraceOptions};
use aot_core::io::{self, ExperimentManifest};
use aot_core::linalg::OrthonormalBasis;
use aot_core::metrics::{self, LogBase};
use aot_core::model::{sample_bases, sample_tokens, GaussianMixtureConfig, ModelDims, SubspaceModel};
use aot_core::trace::TraceParams;
use aot_core::train::{self, LossKind, Optimizer, TrainConfig};

use crate::{
    Cli, Command, DenoiseArgs, DimsArgs, GenerateArgs, Lemma, LemmaArgs, LogBaseArg, PlotArgs, TrainArgs,
    VerifyArgs, EXIT_VERIFY_FAIL,
};

pub fn run(cli: &Cli, argv: &[String]) -> Result<u8> {
    let out = cli.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (name, params, seed) = match &cli.command {
        Command::Generate(a) => ("generate", to_json(a), Some(a.seed)),
        Command::Denoise(a) => ("denoise", to_json(a), None),
        Command::Verify(a) => ("verify", to_json(a), Some(a.seed)),
        Command::LemmaCheck(a) => ("lemma-check", to_json(a), Some(a.seed)),
        Command::Train(a) => ("train", to_json(a), Some(a.seed)),
        Command::Plot(a) => ("plot", to_json(a), None),
    };
    let mut manifest = ExperimentManifest::new(name, seed, params);
    manifest.argv = argv.iter().skip(1).cloned().collect();

    let code = match &cli.command {
        Command::Generate(a) => generate(a, out, &mut manifest)?,
        Command::Denoise(a) => denoise(a, out, &mut manifest)?,
        Command::Verify(a) => verify(a, out, &mut manifest)?,
        Command::LemmaCheck(a) => lemma_check(a, out, &mut manifest)?,
        Command::Train(a) => train_bases(a, out, &mut manifest)?,
        Command::Plot(a) => plot(a, out, &mut manifest)?,
    };
    let path = out.join(format!("{name}.manifest.json"));
    manifest.write(&path)?;
    println!("manifest: {}", path.display());
    Ok(code)
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("argument structs serialize")
}

/// Records an artifact under its path relative to the output directory.
fn record(manifest: &mut ExperimentManifest, out: &Path, role: &str, path: &Path) {
    let rel = path.strip_prefix(out).unwrap_or(path);
    manifest.artifacts.insert(role.to_string(), rel.to_path_buf());
}

fn mixture(dims: &DimsArgs, seed: u64) -> Result<GaussianMixtureConfig> {
    let cfg = GaussianMixtureConfig {
        dims: ModelDims::new(dims.d, dims.k, dims.p)?,
        tokens_per_cluster: dims.tokens_per_cluster,
        delta: dims.delta,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn generate(a: &GenerateArgs, out: &Path, manifest: &mut ExperimentManifest) -> Result<u8> {
    let cfg = mixture(&a.dims, a.seed)?;
    let model = sample_bases(cfg.dims, a.seed)?;
    let batch = sample_tokens(&model, &cfg)?;

    let tokens = out.join("tokens.csv");
    io::write_matrix_csv(&tokens, &batch.z)?;
    record(manifest, out, "tokens", &tokens);
    let partition = out.join("partition.csv");
    io::write_partition_csv(&partition, &batch.partition)?;
    record(manifest, out, "partition", &partition);
    for (k, basis) in model.bases().iter().enumerate() {
        let path = out.join("bases").join(format!("basis_{k}.csv"));
        io::write_matrix_csv(&path, basis.matrix())?;
        record(manifest, out, &format!("basis_{k}"), &path);
    }
    let latents = batch.latents.as_ref().expect("sampled batches carry latents");
    for (role, path) in io::write_latents(&out.join("latents"), latents)? {
        record(manifest, out, &role, &path);
    }
    manifest.params = json!({
        "d": cfg.dims.ambient_dim,
        "K": cfg.dims.num_subspaces,
        "p": cfg.dims.subspace_dim,
        "N": cfg.num_tokens(),
        "tokens_per_cluster": cfg.tokens_per_cluster,
        "delta": cfg.delta,
        "seed": a.seed,
    });
    println!(
        "generated {} tokens in {} subspaces of dimension {} (d = {})",
        cfg.num_tokens(),
        cfg.dims.num_subspaces,
        cfg.dims.subspace_dim,
        cfg.dims.ambient_dim
    );
    Ok(0)
}

/// Bases, tokens and partition of a `generate` run.
fn load_generated(path: &Path) -> Result<(SubspaceModel, aot_core::TokenBatch, GaussianMixtureConfig)> {
    let manifest = ExperimentManifest::read(path)?;
    if manifest.command != "generate" {
        bail!("{} was written by `{}`, not `generate`", path.display(), manifest.command);
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let artifact = |role: &str| -> Result<PathBuf> {
        let rel = manifest
            .artifacts
            .get(role)
            .with_context(|| format!("manifest lists no {role} artifact"))?;
        Ok(dir.join(rel))
    };
    let field = |key: &str| -> Result<u64> {
        manifest.params[key]
            .as_u64()
            .with_context(|| format!("manifest parameter {key} missing"))
    };
    let k = field("K")? as usize;
    let bases = (0..k)
        .map(|i| Ok(OrthonormalBasis::new(io::read_matrix_csv(&artifact(&format!("basis_{i}"))?)?)?))
        .collect::<Result<Vec<_>>>()?;
    let model = SubspaceModel::from_bases(bases)?;
    let z = io::read_matrix_csv(&artifact("tokens")?)?;
    let partition = io::read_partition_csv(&artifact("partition")?)?;
    let cfg = GaussianMixtureConfig {
        dims: model.dims(),
        tokens_per_cluster: field("tokens_per_cluster")? as usize,
        delta: manifest.params["delta"].as_f64().context("manifest parameter delta missing")?,
        seed: field("seed")?,
    };
    let batch = aot_core::TokenBatch::new(z, partition, None)?;
    Ok((model, batch, cfg))
}

fn denoise(a: &DenoiseArgs, out: &Path, manifest: &mut ExperimentManifest) -> Result<u8> {
    let (model, batch, gen) = load_generated(&a.manifest)?;
    manifest.seed = Some(gen.seed);
    let phi: Phi = a.phi.parse()?;
    let cfg = AttentionConfig {
        eta: a.eta,
        phi,
        causal: a.causal,
        prenorm: a.prenorm,
    };
    cfg.validate()?;
    let params = TraceParams {
        dims: model.dims(),
        tokens_per_cluster: gen.tokens_per_cluster,
        eta: a.eta,
        phi,
        causal: a.causal,
        prenorm: a.prenorm,
        delta: Some(gen.delta),
        seed: Some(gen.seed),
    };
    let opts = TraceOptions {
        model: &model,
        partition: &batch.partition,
        params: &params,
    };
    let (state, trace) = unroll(&LayerStack::tied(&model, a.layers), &batch.z, &cfg, Some(opts))?;
    let trace = trace.expect("trace requested");

    let state_path = out.join(&a.state);
    io::write_matrix_csv(&state_path, &state)?;
    record(manifest, out, "state", &state_path);
    let trace_path = out.join(&a.trace);
    io::write_trace(&trace_path, &trace)?;
    record(manifest, out, "trace", &trace_path);

    let first = trace.mean_snr(0);
    let last = trace.mean_snr(trace.num_layers());
    manifest.result = json!({ "mean_snr_input": first, "mean_snr_output": last });
    println!("mean SNR {first:.4} -> {last:.4} over {} layers", a.layers);
    Ok(0)
}

fn verify(a: &VerifyArgs, out: &Path, manifest: &mut ExperimentManifest) -> Result<u8> {
    if a.seeds == 0 {
        bail!("--seeds must be >= 1");
    }
    let mut reports = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        let cfg = mixture(&a.dims, seed)?;
        let model = sample_bases(cfg.dims, seed)?;
        let batch = sample_tokens(&model, &cfg)?;
        let r = metrics::verify_theorem(&model, &batch, a.layers, a.eta, a.tau, Some(seed), Some(cfg.delta))?;
        println!(
            "seed {seed}: {} (ratio error {:.2e} on {} pattern-held layers of {}, held prefix {})",
            if r.passed { "PASS" } else { "FAIL" },
            r.max_ratio_error,
            r.checked_layers.len(),
            a.layers,
            r.held_prefix
        );
        reports.push(r);
    }
    let passed = reports.iter().all(|r| r.passed);
    let held: usize = reports.iter().map(|r| r.checked_layers.len()).sum();
    let frequency = if a.layers == 0 { 1.0 } else { held as f64 / (a.layers as u64 * a.seeds) as f64 };
    println!(
        "verdict: {} (expected ratio {}, pattern-hold frequency {frequency:.3})",
        if passed { "PASS" } else { "FAIL" },
        reports[0].expected_ratio
    );

    let report_path = out.join("verify_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&reports)? + "\n")
        .with_context(|| format!("writing {}", report_path.display()))?;
    record(manifest, out, "report", &report_path);
    let trace_path = out.join("trace.json");
    io::write_trace(&trace_path, &reports[0].trace)?;
    record(manifest, out, "trace", &trace_path);
    let csv = out.join("snr.csv");
    let svg = a.svg.then(|| out.join("snr.svg"));
    io::emit_fig3_artifacts(&reports[0].trace, &csv, svg.as_deref(), a.log_scale)?;
    record(manifest, out, "snr_table", &csv);
    if let Some(svg) = &svg {
        record(manifest, out, "snr_chart", svg);
    }
    manifest.result = json!({ "passed": passed, "pattern_frequency": frequency });
    Ok(if passed { 0 } else { EXIT_VERIFY_FAIL })
}

fn lemma_check(a: &LemmaArgs, out: &Path, manifest: &mut ExperimentManifest) -> Result<u8> {
    let base = match a.log_base {
        LogBaseArg::Natural => LogBase::Natural,
        LogBaseArg::Two => LogBase::Two,
    };
    let report = match a.lemma {
        Lemma::A1 => metrics::check_lemma_a1(a.dims.d, a.dims.delta, a.t, a.trials, a.seed)?,
        Lemma::A2 => metrics::check_lemma_a2(&mixture(&a.dims, a.seed)?, a.trials, a.seed, base)?,
        Lemma::A3 => {
            if a.seeds == 0 {
                bail!("--seeds must be >= 1");
            }
            metrics::sweep_lemma_a3(&mixture(&a.dims, a.seed)?, a.theta, a.tau, a.seed..a.seed + a.seeds)?
        }
    };
    for c in &report.conditions {
        println!("regime {}: {} ({:.4} vs {:.4})", c.name, if c.holds { "holds" } else { "fails" }, c.lhs, c.rhs);
    }
    for c in &report.checks {
        let floor = c.floor.map_or("-".to_string(), |f| format!("{f:.4}"));
        println!(
            "{}: {}/{} = {:.4} (floor {floor}, slack {:.4}){}",
            c.label,
            c.satisfied,
            c.trials,
            c.frequency,
            c.slack,
            if c.meets_floor() { "" } else { "  BELOW FLOOR" }
        );
    }
    let path = out.join("lemma_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    record(manifest, out, "report", &path);
    manifest.result = json!({ "all_meet_floor": report.all_meet_floor() });
    Ok(0)
}

fn train_bases(a: &TrainArgs, out: &Path, manifest: &mut ExperimentManifest) -> Result<u8> {
    let dims = ModelDims::new(a.d, a.k, a.p)?;
    let data = GaussianMixtureConfig {
        dims,
        tokens_per_cluster: a.tokens_per_cluster,
        delta: a.delta,
        seed: a.seed,
    };
    data.validate()?;
    let model = sample_bases(dims, a.seed)?;
    let batch = sample_tokens(&model, &data)?;
    let cfg = TrainConfig {
        steps: a.steps,
        learning_rate: a.lr,
        optimizer: if a.momentum { Optimizer::Momentum } else { Optimizer::GradientDescent },
        loss: LossKind::Denoise,
        layers: a.layers,
        eta: a.eta,
        temperature: a.temperature,
        seed: a.seed,
        lambda: a.lambda,
    };
    let stack = train::random_stack(dims, a.layers, a.seed)?;
    let log = train::train(&stack, &[batch], &model, &cfg)?;

    let log_path = out.join("train_log.json");
    std::fs::write(&log_path, serde_json::to_string_pretty(&log)? + "\n")
        .with_context(|| format!("writing {}", log_path.display()))?;
    record(manifest, out, "log", &log_path);
    if let LayerStack::Untied { layers } = &log.stack {
        for (l, heads) in layers.iter().enumerate() {
            for (k, u) in heads.iter().enumerate() {
                let path = out.join("bases").join(format!("layer_{l}_head_{k}.csv"));
                io::write_matrix_csv(&path, u)?;
                record(manifest, out, &format!("layer_{l}_head_{k}"), &path);
            }
        }
    }
    let first = log.steps.first().map_or(log.final_loss, |s| s.loss);
    println!(
        "loss {first:.4} -> {:.4}; mean SNR {:.4} at input, {:.4} after the last layer",
        log.final_loss, log.initial_mean_snr, log.final_mean_snr
    );
    manifest.result = json!({
        "final_loss": log.final_loss,
        "initial_mean_snr": log.initial_mean_snr,
        "final_mean_snr": log.final_mean_snr,
    });
    Ok(0)
}

fn plot(a: &PlotArgs, out: &Path, manifest: &mut ExperimentManifest) -> Result<u8> {
    let trace = io::read_trace(&a.trace)?;
    manifest.seed = trace.params.seed;
    let csv = out.join(&a.csv);
    let svg = out.join(&a.svg);
    io::emit_fig3_artifacts(&trace, &csv, Some(&svg), a.log_scale)?;
    let mut artifacts = BTreeMap::new();
    artifacts.insert("snr_table", csv);
    artifacts.insert("snr_chart", svg);
    for (role, path) in &artifacts {
        record(manifest, out, role, path);
        println!("{role}: {}", path.display());
    }
    Ok(0)
}
