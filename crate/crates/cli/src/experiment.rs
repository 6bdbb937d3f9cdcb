//! Running policies over seeded oracle corpora and recorded traces.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use vrcd_core::trace::{AttentionEncoding, TraceRecorder, TraceReplay, TraceSourceKind, SCHEMA_VERSION};
use vrcd_core::{
    init_run, read_trace, run_decoding, write_trace, CommitRecord, DecodingState, RunOptions,
    RunOutput, Schedule, SelectionPolicy, StateSource, Trace, TraceHeader,
};

use crate::args::OracleArgs;

/// Keeps a copy of every state the inner source yields.
struct Capture<S> {
    inner: S,
    states: Vec<DecodingState>,
}

impl<S: StateSource> StateSource for Capture<S> {
    fn current(&self) -> Option<&DecodingState> {
        self.inner.current()
    }

    fn advance(&mut self, commit: &CommitRecord) -> vrcd_core::Result<()> {
        if let Some(s) = self.inner.current() {
            self.states.push(s.clone());
        }
        self.inner.advance(commit)
    }
}

pub struct Export<'a> {
    pub dir: &'a Path,
    pub label: &'a str,
    pub attention_window: Option<usize>,
    pub encoding: AttentionEncoding,
}

/// Inputs a policy can be evaluated on.
pub enum Corpus<'a> {
    Oracle {
        oracle: &'a OracleArgs,
        seeds: Vec<u64>,
        forward_ratio: f64,
    },
    Traces(&'a [(PathBuf, Trace)]),
}

impl Corpus<'_> {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Oracle { seeds, .. } => seeds.len(),
            Corpus::Traces(t) => t.len(),
        }
    }

    pub fn length(&self) -> Option<usize> {
        match self {
            Corpus::Oracle { oracle, .. } => Some(oracle.config(0).length),
            Corpus::Traces(_) => None,
        }
    }

    pub fn forward_ratio(&self) -> Option<f64> {
        match self {
            Corpus::Oracle { forward_ratio, .. } => Some(*forward_ratio),
            Corpus::Traces(_) => None,
        }
    }

    /// One run per seed or trace, in corpus order.
    pub fn run(&self, policy: &dyn SelectionPolicy, export: Option<&Export>) -> Result<Vec<RunOutput>> {
        match self {
            Corpus::Oracle {
                oracle,
                seeds,
                forward_ratio,
            } => seeds
                .par_iter()
                .map(|&seed| oracle_run(oracle, seed, *forward_ratio, policy, export))
                .collect(),
            Corpus::Traces(traces) => {
                if export.is_some() {
                    bail!("trace export is only available for oracle runs");
                }
                traces
                    .par_iter()
                    .map(|(path, trace)| {
                        replay_run(trace, policy).with_context(|| format!("replaying {}", path.display()))
                    })
                    .collect()
            }
        }
    }
}

pub fn oracle_run(
    oracle: &OracleArgs,
    seed: u64,
    forward_ratio: f64,
    policy: &dyn SelectionPolicy,
    export: Option<&Export>,
) -> Result<RunOutput> {
    let config = oracle.config(seed);
    let schedule = Schedule::uniform(config.length, forward_ratio)?;
    let mut source = init_run(config.clone())?;
    let Some(export) = export else {
        return Ok(run_decoding(&mut source, policy, &schedule, &RunOptions::default())?);
    };

    let k = schedule.commit_sizes().first().copied().unwrap_or(1);
    let window = export
        .attention_window
        .unwrap_or_else(|| vrcd_core::trace::default_attention_window(k));
    let mut recorder = TraceRecorder::new(source, window);
    let out = run_decoding(&mut recorder, policy, &schedule, &RunOptions::default())?;
    let run_id = format!("{}_seed{seed}", export.label);
    let trace = recorder.into_trace(TraceHeader {
        schema_version: SCHEMA_VERSION,
        run_id: run_id.clone(),
        length: config.length,
        num_image_tokens: config.num_image_tokens,
        vocab_size: config.vocab_size,
        forward_ratio,
        attention_window: window,
        source: TraceSourceKind::Synthetic,
        conditioning_note: format!("synthetic oracle seed {seed}"),
    });
    fs::create_dir_all(export.dir)?;
    let path = export.dir.join(format!("{run_id}.jsonl"));
    let mut file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    write_trace(&mut file, &trace, export.encoding)?;
    Ok(out)
}

/// States seen while running `policy` on one oracle seed.
pub fn oracle_states(
    oracle: &OracleArgs,
    seed: u64,
    forward_ratio: f64,
    policy: &dyn SelectionPolicy,
) -> Result<Vec<DecodingState>> {
    let config = oracle.config(seed);
    let schedule = Schedule::uniform(config.length, forward_ratio)?;
    let mut capture = Capture {
        inner: init_run(config)?,
        states: Vec::new(),
    };
    run_decoding(&mut capture, policy, &schedule, &RunOptions::default())?;
    Ok(capture.states)
}

pub fn replay_run(trace: &Trace, policy: &dyn SelectionPolicy) -> Result<RunOutput> {
    let mut replay = TraceReplay::new(trace.clone())?;
    let schedule = replay.schedule()?;
    Ok(run_decoding(&mut replay, policy, &schedule, &RunOptions::default())?)
}

/// Steps whose replayed commit equals the recorded one, and steps with a
/// recorded commit at all.
pub fn commit_agreement(trace: &Trace, out: &RunOutput) -> (usize, usize) {
    let mut same = 0;
    let mut recorded = 0;
    for (step, commit) in trace.steps.iter().zip(&out.commits) {
        if let Some(c) = &step.committed {
            recorded += 1;
            let mut c = c.clone();
            c.sort_unstable();
            if c == commit.committed_positions {
                same += 1;
            }
        }
    }
    (same, recorded)
}

/// Expands directories into their `.jsonl` files, sorted by name.
pub fn trace_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            if found.is_empty() {
                bail!("no .jsonl traces in {}", input.display());
            }
            paths.extend(found);
        } else {
            paths.push(input.clone());
        }
    }
    Ok(paths)
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_trace(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))
}

pub fn load_traces(inputs: &[PathBuf]) -> Result<Vec<(PathBuf, Trace)>> {
    trace_paths(inputs)?
        .into_iter()
        .map(|p| load_trace(&p).map(|t| (p, t)))
        .collect()
}
