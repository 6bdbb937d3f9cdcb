mod args;
mod experiment;
mod output;

use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use vrcd_core::overhead::pair_stage_cost;
use vrcd_core::trace::AttentionEncoding;
use vrcd_core::{
    aggregate, selection_overhead, sign_test, validate_trace, PolicyKind, RunAggregate, RunOutput,
    Schedule, TimingOptions, VrcdPolicy,
};

use args::{BenchArgs, Cli, Command, CompareArgs, ReplayArgs, RunArgs, ValidateArgs};
use experiment::{commit_agreement, load_trace, load_traces, Corpus, Export};
use output::{
    curve_rows, label, write_csv, BenchRow, CompareRow, PairCostRow, PolicyColumns, SummaryRow,
    CSV_SCHEMA_VERSION,
};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_workers() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Run(a) => run(&a).map(|()| ExitCode::SUCCESS),
        Command::Replay(a) => replay(&a).map(|()| ExitCode::SUCCESS),
        Command::Compare(a) => compare(&a).map(|()| ExitCode::SUCCESS),
        Command::Validate(a) => validate(&a),
        Command::Bench(a) => bench(&a).map(|()| ExitCode::SUCCESS),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}

/// `VRCD_WORKERS` caps the number of runs decoded in parallel.
fn configure_workers() -> Result<()> {
    let Ok(value) = std::env::var("VRCD_WORKERS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .with_context(|| format!("VRCD_WORKERS={value} is not a thread count"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn metrics_of(runs: &[RunOutput]) -> RunAggregate {
    aggregate(&runs.iter().map(|r| &r.metrics[..]).collect::<Vec<_>>())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_summary(name: &str, agg: &RunAggregate) {
    println!(
        "{name:<16} runs={:<4} mean_vri={} D={} rho={}",
        agg.runs,
        fmt_opt(agg.mean_vri_micro),
        fmt_opt(agg.mean_change_count),
        fmt_opt(agg.change_rate)
    );
}

fn run(a: &RunArgs) -> Result<()> {
    let corpus = Corpus::Oracle {
        oracle: &a.oracle,
        seeds: a.seeds.seeds(),
        forward_ratio: a.fr,
    };
    let mut summary = Vec::new();
    let mut curves = Vec::new();
    for (kind, config) in a.policy.configs() {
        let name = label(kind, &config);
        let policy = kind.build(config)?;
        let export = a.export_traces.as_deref().map(|dir| Export {
            dir,
            label: &name,
            attention_window: a.attention_window,
            encoding: if a.dense_attention {
                AttentionEncoding::Dense
            } else {
                AttentionEncoding::default()
            },
        });
        let runs = corpus.run(policy.as_ref(), export.as_ref())?;
        let agg = metrics_of(&runs);
        print_summary(&name, &agg);

        let overhead = match (kind, a.no_timing, a.seeds.seeds().first()) {
            (PolicyKind::Vrcd, false, Some(&seed)) => {
                let states = experiment::oracle_states(&a.oracle, seed, a.fr, policy.as_ref())?;
                let k = Schedule::uniform(a.oracle.config(seed).length, a.fr)?.commit_sizes()[0];
                let report = selection_overhead(&VrcdPolicy::new(config)?, &states, k, TimingOptions::default())?;
                Some(report.ratio)
            }
            _ => None,
        };
        curves.extend(curve_rows(&name, &agg));
        summary.push(SummaryRow::new(
            PolicyColumns::new(kind, &config),
            corpus.length(),
            corpus.forward_ratio(),
            &agg,
            overhead,
        ));
    }
    write_csv(&a.out, "summary.csv", &summary)?;
    write_csv(&a.out, "curves.csv", &curves)
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let traces = load_traces(&a.trace)?;
    let corpus = Corpus::Traces(&traces);
    let mut summary = Vec::new();
    let mut curves = Vec::new();
    for (kind, config) in a.policy.configs() {
        let name = label(kind, &config);
        let runs = corpus.run(kind.build(config)?.as_ref(), None)?;
        let (mut same, mut recorded) = (0, 0);
        for ((_, trace), out) in traces.iter().zip(&runs) {
            let (s, r) = commit_agreement(trace, out);
            same += s;
            recorded += r;
        }
        let agg = metrics_of(&runs);
        print_summary(&name, &agg);
        println!("{:<16} commits matching the recording: {same}/{recorded} steps", "");
        curves.extend(curve_rows(&name, &agg));
        summary.push(SummaryRow::new(PolicyColumns::new(kind, &config), None, None, &agg, None));
    }
    write_csv(&a.out, "summary.csv", &summary)?;
    write_csv(&a.out, "curves.csv", &curves)
}

fn compare(a: &CompareArgs) -> Result<()> {
    let traces;
    let corpus = if a.trace.is_empty() {
        Corpus::Oracle {
            oracle: &a.oracle,
            seeds: a.seeds.seeds(),
            forward_ratio: a.fr,
        }
    } else {
        traces = load_traces(&a.trace)?;
        Corpus::Traces(&traces)
    };
    if corpus.len() == 0 {
        bail!("nothing to compare: no seeds or traces");
    }
    let base_config = a.policy.configs()[0].1;
    let base_name = label(a.baseline, &base_config);
    let base_runs = corpus.run(a.baseline.build(base_config)?.as_ref(), None)?;
    let base = metrics_of(&base_runs);
    let run_means = |runs: &[RunOutput]| -> Vec<f64> {
        runs.iter()
            .map(|r| r.metrics.iter().map(|m| m.vri).sum::<f64>() / r.metrics.len().max(1) as f64)
            .collect()
    };

    let mut summary = vec![SummaryRow::new(
        PolicyColumns::new(a.baseline, &base_config),
        corpus.length(),
        corpus.forward_ratio(),
        &base,
        None,
    )];
    let mut rows = Vec::new();
    print_summary(&base_name, &base);
    for (kind, config) in a.policy.configs() {
        let name = label(kind, &config);
        let runs = corpus.run(kind.build(config)?.as_ref(), None)?;
        let agg = metrics_of(&runs);
        print_summary(&name, &agg);
        let test = sign_test(&run_means(&runs), &run_means(&base_runs));
        println!(
            "{:<16} per-run mean VRI below {base_name} in {}/{} runs, one-sided p={:.3e}",
            "",
            test.below,
            test.below + test.above,
            test.p_less
        );
        for (p, b) in agg.curve.iter().zip(&base.curve) {
            rows.push(CompareRow {
                schema_version: CSV_SCHEMA_VERSION,
                policy: name.clone(),
                baseline: base_name.clone(),
                step_index: p.step_index,
                runs: p.runs.min(b.runs),
                mean_vri: p.mean_vri,
                baseline_mean_vri: b.mean_vri,
                vri_delta: p.mean_vri - b.mean_vri,
                mean_remaining_entropy: p.mean_remaining_entropy,
                baseline_mean_remaining_entropy: b.mean_remaining_entropy,
                entropy_delta: p.mean_remaining_entropy.zip(b.mean_remaining_entropy).map(|(x, y)| x - y),
            });
        }
        summary.push(SummaryRow::new(
            PolicyColumns::new(kind, &config),
            corpus.length(),
            corpus.forward_ratio(),
            &agg,
            None,
        ));
    }
    write_csv(&a.out, "compare.csv", &rows)?;
    write_csv(&a.out, "summary.csv", &summary)
}

fn validate(a: &ValidateArgs) -> Result<ExitCode> {
    let mut total = 0;
    for path in experiment::trace_paths(&a.trace)? {
        let trace = load_trace(&path)?;
        let report = validate_trace(&trace);
        if report.is_valid() {
            println!("{}: ok ({} steps)", path.display(), trace.steps.len());
        } else {
            println!("{}: {} violations", path.display(), report.violations.len());
            for v in &report.violations {
                let at = v.step.map_or_else(|| "header".to_string(), |s| format!("step {s}"));
                println!("  {at}: {:?}: {}", v.kind, v.detail);
            }
        }
        total += report.violations.len();
    }
    Ok(if total == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn bench(a: &BenchArgs) -> Result<()> {
    let opts = TimingOptions {
        warmup: a.warmup,
        repetitions: a.repetitions,
    };
    let mut rows = Vec::new();
    for (kind, config) in a.policy.configs() {
        if kind != PolicyKind::Vrcd {
            bail!("bench times the vrcd policy against confidence; got --policy {kind}");
        }
        let policy = VrcdPolicy::new(config)?;
        for &fr in &a.fr {
            let mut states = Vec::new();
            for seed in a.seeds.seeds() {
                states.extend(experiment::oracle_states(&a.oracle, seed, fr, &policy)?);
            }
            let k = Schedule::uniform(a.oracle.config(0).length, fr)?.commit_sizes()[0];
            // the final state may hold fewer than k positions
            states.retain(|s| s.num_masked() >= k);
            let r = selection_overhead(&policy, &states, k, opts)?;
            println!(
                "{:<16} FR={fr} K={k} M={:.1} N={}: confidence {:.1}us, vrcd {:.1}us, ratio {:.2}",
                label(kind, &config),
                r.mean_window,
                r.num_image_tokens,
                r.confidence_ns / 1e3,
                r.policy_ns / 1e3,
                r.ratio
            );
            let c = PolicyColumns::new(kind, &config);
            rows.push(BenchRow {
                schema_version: CSV_SCHEMA_VERSION,
                policy: c.policy,
                alpha: c.alpha,
                lambda: c.lambda,
                aggregation: c.aggregation,
                vse: c.vse,
                forward_ratio: fr,
                commit_size: k,
                states: r.states,
                mean_window: r.mean_window,
                num_image_tokens: r.num_image_tokens,
                confidence_ns: r.confidence_ns,
                policy_ns: r.policy_ns,
                ratio: r.ratio,
                saliency_ns: r.saliency_ns,
                pair_ns: r.pair_ns,
                scoring_ns: r.scoring_ns,
            });
        }
    }
    write_csv(&a.out, "bench.csv", &rows)?;

    if !a.pair_windows.is_empty() {
        let mut pairs = Vec::new();
        for &n in &a.pair_tokens {
            for &m in &a.pair_windows {
                let cost = pair_stage_cost(m, n, opts, 0);
                println!("pair stage M={m} N={n}: {:.1}us", cost.as_secs_f64() * 1e6);
                pairs.push(PairCostRow {
                    schema_version: CSV_SCHEMA_VERSION,
                    window: m,
                    num_image_tokens: n,
                    median_ns: cost.as_nanos() as u64,
                });
            }
        }
        write_csv(&a.out, "pair_cost.csv", &pairs)?;
    }
    Ok(())
}
