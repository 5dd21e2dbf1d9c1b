//! Command implementations: thin drivers over the library.

use std::path::Path;

use invact::activation::{
    self, approx_error_for, resolve_silu_assignment, validate_gelu_left_parse, ActivationKind,
    Branch, BranchCoefficients, BranchSel, ErrorReport, Measure,
};
use invact::bench::{run_bench, BenchPreset, PresetKind};
use invact::layer::{
    estimate_memory, mlp_block_spec, transformer_block_spec, BlockSpec, ElementFormat,
    LayerConfig, Strategy,
};
use invact::quant::{build_quantizer, quantizer_error};
use invact::tape::{
    gradcheck as run_gradcheck, model_forward, train_compare as run_train_compare, ActStrategy,
    Arch, Matrix, ParamSet, SplitMix64, Tape, TrainConfig,
};
use serde_json::json;

use crate::output::{Csv, OutputDir};
use crate::{ApproxErrorArgs, BenchArgs, CoeffValidateArgs, GradcheckArgs, MemoryArgs,
    TrainCompareArgs};
use crate::{CliError, CliResult};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_kinds(s: &str) -> CliResult<Vec<ActivationKind>> {
    match s {
        "both" | "all" => Ok(ActivationKind::ALL.to_vec()),
        other => Ok(vec![ActivationKind::parse_name(other)?]),
    }
}

fn parse_measures(s: &str) -> CliResult<Vec<Measure>> {
    match s {
        "both" | "all" => Ok(Measure::ALL.to_vec()),
        other => Ok(vec![Measure::parse_name(other)?]),
    }
}

fn read_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// approx-error
// ---------------------------------------------------------------------------

pub fn approx_error_cmd_rows(
    csv: &mut Csv,
    source: &str,
    kind: ActivationKind,
    branch: &str,
    measure: Measure,
    points: usize,
    rep: &ErrorReport,
) {
    for (metric, value) in [("l2", rep.l2), ("linf", rep.linf)] {
        csv.row(&[
            source.to_string(),
            kind.name().to_string(),
            branch.to_string(),
            measure.name().to_string(),
            metric.to_string(),
            format!("{value:.12e}"),
            points.to_string(),
        ]);
    }
}

pub fn approx_error(args: &ApproxErrorArgs, out: &OutputDir) -> CliResult<()> {
    let kinds = parse_kinds(&args.kind)?;
    let measures = parse_measures(&args.measure)?;
    let branches: Vec<(BranchSel, &str)> = match args.branch.as_str() {
        "all" => vec![
            (BranchSel::Left, "left"),
            (BranchSel::Right, "right"),
            (BranchSel::Combined, "combined"),
        ],
        "left" => vec![(BranchSel::Left, "left")],
        "right" => vec![(BranchSel::Right, "right")],
        "combined" => vec![(BranchSel::Combined, "combined")],
        other => return Err(usage(format!("unknown branch {other:?}"))),
    };
    if args.points < 2 {
        return Err(usage("--points must be at least 2"));
    }

    let mut csv = Csv::new(
        "approx-error",
        "source,kind,branch,measure,metric,value,points",
    );
    for &kind in &kinds {
        for &measure in &measures {
            for &(sel, label) in &branches {
                let rep = activation::approx_error(kind, sel, args.points, measure);
                approx_error_cmd_rows(&mut csv, "invact", kind, label, measure, args.points, &rep);
            }
            for bits in 1..=8u8 {
                let table = build_quantizer(kind, bits, measure)?;
                let rep = quantizer_error(&table, args.points);
                approx_error_cmd_rows(
                    &mut csv,
                    &format!("lloyd-max-k{bits}"),
                    kind,
                    "combined",
                    measure,
                    args.points,
                    &rep,
                );
                if let Some(dir) = &args.save_tables {
                    std::fs::create_dir_all(dir).map_err(CliError::from)?;
                    let path = dir.join(format!(
                        "lloyd-max-{}-{}bit-{}.kv",
                        kind.name(),
                        bits,
                        measure.name()
                    ));
                    std::fs::write(&path, table.to_kv()).map_err(CliError::from)?;
                }
            }
        }
    }

    if let Some(path) = &args.coeffs {
        let coeffs = BranchCoefficients::from_kv(&read_file(path)?)?;
        let branch = match coeffs.branch {
            Branch::Left => "left",
            Branch::Right => "right",
        };
        for &measure in &measures {
            let rep = approx_error_for(&coeffs, args.points, measure)
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            approx_error_cmd_rows(
                &mut csv,
                "custom",
                coeffs.kind,
                branch,
                measure,
                args.points,
                &rep,
            );
        }
    }

    out.write(&args.out, &csv.finish())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub fn bench(args: &BenchArgs, out: &OutputDir) -> CliResult<()> {
    let (kind, strategy, format) = match &args.config {
        Some(path) => {
            let cfg = LayerConfig::from_kv(&read_file(path)?)?;
            (cfg.kind, cfg.strategy, cfg.format)
        }
        None => (
            ActivationKind::parse_name(&args.kind)?,
            Strategy::parse_name(&args.strategy)?,
            ElementFormat::parse_name(&args.format)?,
        ),
    };
    if strategy == Strategy::Baseline {
        return Err(usage("--strategy must differ from the baseline"));
    }
    let presets: Vec<BenchPreset> = match args.preset.as_str() {
        "all" => BenchPreset::published_shapes(),
        name => vec![BenchPreset::by_name(name)?],
    };

    let mut reports = Vec::new();
    for preset in &presets {
        let (scaled, shrink) = if args.full {
            // budget check: the plain preset holds ~4 live tensors of the
            // working size; matmul presets are dominated by activations of
            // batch x hidden
            let mut scaled = preset.clone();
            let mut shrink = 1usize;
            let budget = (args.max_gib * (1u64 << 30) as f64) as usize;
            loop {
                let elems = match scaled.kind {
                    PresetKind::PlainAct => scaled.batch * 4,
                    _ => scaled.batch * (scaled.features + 4 * scaled.hidden),
                };
                if elems * format.bytes() <= budget || scaled.batch == 1 {
                    break;
                }
                scaled.batch /= 2;
                shrink *= 2;
            }
            (scaled, shrink)
        } else {
            preset.desk_scale()
        };
        let report = run_bench(
            &scaled,
            kind,
            format,
            strategy,
            args.trials,
            args.warmup,
            args.threads,
            shrink,
        )?;
        let mut metadata = serde_json::Map::new();
        for (k, v) in &report.metadata {
            metadata.insert(k.clone(), json!(v));
        }
        reports.push(json!({
            "preset": report.preset,
            "shape": report.shape,
            "kind": report.kind.name(),
            "format": report.format.name(),
            "trials": report.trials,
            "warmup": report.warmup,
            "shrink": report.shrink,
            "threads": report.threads,
            "baseline": {
                "strategy": report.baseline.strategy.name(),
                "median_forward_s": report.baseline.median_forward_s,
                "median_backward_s": report.baseline.median_backward_s,
                "saved_bytes": report.baseline.saved_bytes,
            },
            "candidate": {
                "strategy": report.candidate.strategy.name(),
                "median_forward_s": report.candidate.median_forward_s,
                "median_backward_s": report.candidate.median_backward_s,
                "saved_bytes": report.candidate.saved_bytes,
            },
            "time_ratio": report.time_ratio,
            "bytes_saved": report.bytes_saved,
            "low_confidence": report.low_confidence,
            "metadata": metadata,
        }));
    }
    let doc = json!({
        "schema": "invact-bench v1",
        "reports": reports,
    });
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| CliError::Runtime(format!("json: {e}")))?;
    text.push('\n');
    out.write(&args.out, &text)
}

// ---------------------------------------------------------------------------
// train-compare
// ---------------------------------------------------------------------------

pub fn train_compare(args: &TrainCompareArgs, out: &OutputDir) -> CliResult<()> {
    let base = TrainConfig::from_kv(&read_file(&args.config)?)?;
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let mut csv = Csv::new("train-compare", "step,loss_exact,loss_invact,seed");
    for offset in 0..args.seeds {
        let mut cfg = base.clone();
        cfg.seed = base.seed + offset;
        let pair = run_train_compare(&cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
        if pair.diverged() {
            eprintln!("seed {}: run diverged (non-finite loss); truncated", cfg.seed);
        }
        for (step, (le, li)) in pair
            .exact
            .losses
            .iter()
            .zip(&pair.other.losses)
            .enumerate()
        {
            csv.row(&[
                step.to_string(),
                format!("{le:.12e}"),
                format!("{li:.12e}"),
                cfg.seed.to_string(),
            ]);
        }
        eprintln!(
            "seed {}: final val exact {:.6} vs {} {:.6}; max paired rel gap {:.3e}",
            cfg.seed,
            pair.exact.val_loss,
            base.strategy.name(),
            pair.other.val_loss,
            pair.max_rel_gap()
        );
    }
    out.write(&args.out, &csv.finish())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    if args.h <= 0.0 {
        return Err(usage("--h must be positive"));
    }
    let max_rel = match args.target.as_str() {
        "quadratic" => {
            let point = [0.4, -1.2, 2.5];
            let analytic: Vec<f64> = point.iter().map(|&v| 2.0 * v).collect();
            run_gradcheck(
                |p| p.iter().map(|&v| v * v).sum(),
                &point,
                &analytic,
                args.h,
            )
            .max_rel
        }
        "forward" => {
            let mut worst: f64 = 0.0;
            for kind in ActivationKind::ALL {
                for i in -40..=40 {
                    let x = i as f64 / 8.0;
                    let report =
                        run_gradcheck(|p| kind.eval(p[0]), &[x], &[kind.derivative(x)], args.h);
                    worst = worst.max(report.max_rel);
                }
            }
            worst
        }
        "mlp" | "mlp-invact" => mlp_gradcheck(args.target == "mlp-invact", args.h)?,
        other => return Err(usage(format!("unknown gradcheck target {other:?}"))),
    };
    println!("gradcheck {}: max relative error {max_rel:.3e}", args.target);
    if max_rel > args.tol {
        return Err(CliError::Runtime(format!(
            "max relative error {max_rel:.3e} exceeds tolerance {:.1e}",
            args.tol
        )));
    }
    Ok(())
}

/// Checks MLP parameter gradients against central differences. For the
/// inverted strategy the comparison runs against the exact-gradient loss, so
/// the reported number is the approximation-induced deviation rather than a
/// bug detector; it is compared against a looser ceiling by the caller.
fn mlp_gradcheck(invact: bool, h: f64) -> CliResult<f64> {
    let mut rng = SplitMix64::new(0x6C);
    let params = ParamSet {
        values: vec![
            Matrix::from_fn(4, 12, |_, _| rng.normal() * 0.5),
            Matrix::zeros(1, 12),
            Matrix::from_fn(12, 2, |_, _| rng.normal() * 0.3),
            Matrix::zeros(1, 2),
        ],
    };
    let arch = Arch::Mlp {
        input: 4,
        hidden: 12,
        output: 2,
    };
    let x = Matrix::from_fn(8, 4, |_, _| rng.normal());
    let y = Matrix::from_fn(8, 2, |_, _| rng.normal());
    let strategy = if invact {
        ActStrategy::Invact
    } else {
        ActStrategy::Exact
    };

    let mut tape = Tape::new();
    let pred = model_forward(
        &mut tape,
        arch,
        ActivationKind::Gelu,
        &strategy,
        &params,
        x.clone(),
    );
    let loss = tape
        .mse_loss(pred, y.clone())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let grads = tape
        .backward(loss, &params)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let point: Vec<f64> = params
        .values
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect();
    let analytic: Vec<f64> = grads
        .grads
        .iter()
        .flat_map(|m| m.as_slice().iter().copied())
        .collect();
    let report = run_gradcheck(
        |p| {
            let mut probe = params.clone();
            let mut k = 0;
            for m in &mut probe.values {
                let len = m.len();
                m.as_mut_slice().copy_from_slice(&p[k..k + len]);
                k += len;
            }
            let mut tape = Tape::new();
            let pred = model_forward(
                &mut tape,
                arch,
                ActivationKind::Gelu,
                &ActStrategy::Exact,
                &probe,
                x.clone(),
            );
            let loss = tape.mse_loss(pred, y.clone()).unwrap();
            tape.scalar(loss)
        },
        &point,
        &analytic,
        h,
    );
    Ok(report.max_rel)
}

// ---------------------------------------------------------------------------
// memory
// ---------------------------------------------------------------------------

pub fn memory(args: &MemoryArgs) -> CliResult<()> {
    let strategy = Strategy::parse_name(&args.strategy)?;
    let format = ElementFormat::parse_name(&args.format)?;
    let spec = match args.spec.as_str() {
        "mlp" => mlp_block_spec(1 << 10, 4, 1 << 12),
        "transformer" => transformer_block_spec(12, 768, 4, 1024),
        path => BlockSpec::from_kv(&read_file(Path::new(path))?)?,
    };
    let est = estimate_memory(&spec, strategy, format);
    let baseline = estimate_memory(&spec, Strategy::Baseline, format);

    println!("block: {} ({} tokens, {})", est.block, spec.tokens, format.name());
    println!("{:<12} {:>14} {:>14}", "layer", "baseline", strategy.name());
    for (layer, base) in est.per_layer.iter().zip(&baseline.per_layer) {
        println!(
            "{:<12} {:>14} {:>14}",
            layer.label, base.baseline, layer.with_strategy
        );
    }
    println!(
        "{:<12} {:>14} {:>14}",
        "total", est.baseline_total, est.total
    );
    println!("saving: {:.2}%", est.saving() * 100.0);
    for warning in &est.warnings {
        eprintln!("warning: {warning}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// coeff-validate
// ---------------------------------------------------------------------------

pub fn coeff_validate(args: &CoeffValidateArgs) -> CliResult<()> {
    let kinds = parse_kinds(&args.kind)?;
    for kind in kinds {
        match kind {
            ActivationKind::Gelu => {
                println!("gelu left-branch grouping candidates ({} points):", args.points);
                let candidates = validate_gelu_left_parse(args.points);
                for cand in &candidates {
                    let rep = cand.left.as_ref().unwrap();
                    println!(
                        "  {:<10} linf {:.6e}  l2 {:.6e}",
                        cand.label, rep.linf, rep.l2
                    );
                }
                let adopted = candidates
                    .iter()
                    .min_by(|a, b| a.combined_linf.partial_cmp(&b.combined_linf).unwrap())
                    .unwrap();
                println!("  adopted: {}", adopted.label);
            }
            ActivationKind::Silu => {
                println!(
                    "silu coefficient-table assignment candidates ({} points):",
                    args.points
                );
                for cand in resolve_silu_assignment(args.points) {
                    print!("  {:<8} feasible={:<5}", cand.label, cand.feasible);
                    if let Some(rep) = &cand.left {
                        print!("  left linf {:.6e}", rep.linf);
                    }
                    if let Some(rep) = &cand.right {
                        print!("  right linf {:.6e}", rep.linf);
                    } else {
                        print!("  right not evaluable (4 coefficients for a 5-coefficient form)");
                    }
                    println!();
                }
                println!("  adopted: swapped");
            }
        }
        if args.dump {
            for branch in [Branch::Left, Branch::Right] {
                println!("\n# {} {:?}", kind.name(), branch);
                print!("{}", BranchCoefficients::published(kind, branch).to_kv());
            }
        }
    }
    Ok(())
}
