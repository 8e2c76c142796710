use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ttvprune::analysis::{
    heatmap_svg, histogram_from_reports, layer_summaries, layer_summaries_csv, run_ablation, transition_rows,
    transitions_csv, AblationSource, AblationSuite, AttentionProfile, BiasCriterion, BiasHistogram, HeatValue,
    SyntheticTraceSpec,
};
use ttvprune::flops::{self, Convention, ModelPreset};
use ttvprune::pruning::{replay_on_trace, run_pruned_forward, run_pruned_forward_with_capture, PruningReport};
use ttvprune::runtime::{ActivationTrace, CaptureOnly, CapturePlan, CaptureScope, DType};
use ttvprune::trace_io::{self, StorageDType, TraceReader};
use ttvprune::transition::SubBlock;
use ttvprune::{PruningSchedule, Runtime, RuntimeConfig, TokenSequence};

use crate::args::*;

/// Writes a line to stdout; a closed pipe is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn say_raw(text: &str) {
    use std::io::Write as _;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

/// Invalid flag values found after parsing; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse<T: std::str::FromStr<Err = String>>(value: &str) -> Result<T> {
    value.parse().map_err(usage)
}

pub const STAGES_CSV_HEADER: &str =
    "stage,pruning_layer,decision_layer,ttv_layers,retained_ratio,input_count,retained_count,fallback,approximate";

fn build_schedule(a: &ScheduleArgs) -> Result<PruningSchedule> {
    let mut s = match &a.schedule_file {
        Some(path) => PruningSchedule::load(path)?,
        None => PruningSchedule::preset(&a.preset).ok_or_else(|| {
            usage(format!("unknown preset `{}` (transprune-high or transprune-low)", a.preset))
        })?,
    };
    if let Some(r) = &a.ratios {
        s.retained_ratios = match r.as_slice() {
            [single] => vec![*single; s.pruning_layers.len()],
            many => many.to_vec(),
        };
    }
    if let Some(alpha) = a.alpha {
        s.alpha = alpha;
    }
    if let Some(m) = &a.mode {
        s.mode = parse(m)?;
    }
    if let Some(n) = &a.normalization {
        s.normalization = parse(n)?;
    }
    if a.no_accumulate {
        s.accumulate = false;
    }
    if let Some(shift) = a.accumulation_shift {
        s.accumulation_shift = shift;
    }
    if let Some(h) = &a.head_reduction {
        s.head_reduction = parse(h)?;
    }
    Ok(s)
}

fn build_runtime(t: &ToyArgs) -> Result<Runtime> {
    let dtype: DType = parse(&t.dtype)?;
    let config = RuntimeConfig {
        n_layers: t.layers,
        d_model: t.d_model,
        n_heads: t.heads,
        d_ffn: t.d_ffn,
        vocab_size: t.vocab,
        seed: t.seed,
        dtype,
    };
    Ok(Runtime::new(config)?)
}

fn toy_sequence(t: &ToyArgs, seed: u64) -> Result<TokenSequence> {
    Ok(TokenSequence::synthetic(t.system_tokens, t.image_tokens, t.instruction_tokens, t.vocab, seed)?)
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn stages_csv(report: &PruningReport) -> String {
    let mut out = String::from(STAGES_CSV_HEADER);
    out.push('\n');
    for s in &report.stages {
        let layers: Vec<String> = s.ttv_layers.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.stage,
            s.pruning_layer,
            s.decision_layer,
            layers.join(";"),
            s.retained_ratio,
            s.input_count,
            s.retained.count(),
            s.fallback.as_deref().unwrap_or(""),
            s.approximate
        );
    }
    out
}

/// Per-token scores. The TTV column is absent when the mode ignores TTV and
/// the IGA column is absent when the mode ignores IGA.
fn scores_csv(report: &PruningReport, schedule: &PruningSchedule) -> String {
    let (ttv, iga) = (schedule.mode.uses_ttv(), schedule.mode.uses_iga());
    let mut header = vec!["stage", "pruning_layer", "original_index"];
    if ttv {
        header.push("accumulated_ttv");
    }
    if iga {
        header.push("iga");
    }
    header.extend(["combined_score", "retained"]);
    let mut out = header.join(",");
    out.push('\n');
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in &report.stages {
        for e in &s.board.entries {
            let mut cols = vec![s.stage.to_string(), s.pruning_layer.to_string(), e.original_index.to_string()];
            if ttv {
                cols.push(opt(e.accumulated_ttv));
            }
            if iga {
                cols.push(opt(e.iga));
            }
            cols.push(e.combined_score.to_string());
            cols.push(u8::from(s.retained.contains(e.original_index)).to_string());
            out.push_str(&cols.join(","));
            out.push('\n');
        }
    }
    out
}

fn counts(report: &PruningReport) -> String {
    report.stage_counts().iter().map(|c| c.to_string()).collect::<Vec<_>>().join("/")
}

pub fn simulate(out_dir: &Path, a: &SimulateArgs) -> Result<()> {
    let schedule = build_schedule(&a.schedule)?;
    let runtime = build_runtime(&a.toy)?;
    let seq = toy_sequence(&a.toy, a.toy.seed)?;
    let extra = CapturePlan {
        sub_block_layers: (1..=runtime.n_layers()).collect(),
        ..CapturePlan::default()
    };
    let pruned = run_pruned_forward_with_capture(&runtime, &seq, &schedule, &extra)?;
    let baseline = runtime.forward(&seq)?;
    let no_prune = schedule.retained_ratios.iter().all(|&r| r == 1.0);
    let identical = pruned.output.tokens == baseline.tokens
        && pruned.output.logits.data.len() == baseline.logits.data.len()
        && pruned
            .output
            .logits
            .data
            .iter()
            .zip(&baseline.logits.data)
            .all(|(x, y)| x.to_bits() == y.to_bits());

    let rows = transition_rows(&pruned.output.trace)?;
    let summaries = layer_summaries(&rows);
    write_out(out_dir, "stages.csv", &stages_csv(&pruned.report))?;
    write_out(out_dir, "scores.csv", &scores_csv(&pruned.report, &schedule))?;
    write_out(out_dir, "transitions.csv", &transitions_csv(&rows))?;
    write_out(out_dir, "layer_summary.csv", &layer_summaries_csv(&summaries))?;
    if a.svg {
        for (sb, v, name) in [
            (SubBlock::Attention, HeatValue::Magnitude, "attention_magnitude.svg"),
            (SubBlock::Attention, HeatValue::OneMinusAbsCos, "attention_direction.svg"),
            (SubBlock::Ffn, HeatValue::Magnitude, "ffn_magnitude.svg"),
            (SubBlock::Ffn, HeatValue::OneMinusAbsCos, "ffn_direction.svg"),
        ] {
            write_out(out_dir, name, &heatmap_svg(&rows, sb, v))?;
        }
    }

    let base_ops = baseline.ops.block_total() as f64;
    let pruned_ops = pruned.output.ops.block_total() as f64;
    let mut md = String::from("# Simulation report\n\n");
    let _ = writeln!(md, "- image tokens: {}", pruned.report.original_image_count);
    let _ = writeln!(md, "- mode: {}", schedule.mode.as_str());
    let _ = writeln!(md, "- stage counts: {}", counts(&pruned.report));
    let _ = writeln!(md, "- logits digest (crc32): {:08x}", pruned.output.logits_digest());
    let _ = writeln!(md, "- baseline logits digest (crc32): {:08x}", baseline.logits_digest());
    if no_prune {
        let verdict = if identical { "bit-identical to" } else { "DIFFERENT from" };
        let _ = writeln!(md, "- no-prune run: logits are {verdict} the hookless baseline");
    }
    let _ = writeln!(
        md,
        "- counted block FLOPs: {:.0} of {:.0} ({:.2}%)",
        pruned_ops,
        base_ops,
        100.0 * pruned_ops / base_ops
    );
    md.push_str("\n| stage | pruning layer | input | retained |\n|---|---|---|---|\n");
    for s in &pruned.report.stages {
        let _ = writeln!(md, "| {} | {} | {} | {} |", s.stage, s.pruning_layer, s.input_count, s.retained.count());
    }
    write_out(out_dir, "report.md", &md)?;
    say_raw(&md);
    say!("\nreports written to {}", out_dir.display());
    Ok(())
}

fn load_trace(path: &Path) -> Result<ActivationTrace> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(trace_io::trace_from_json(&text)?)
    } else {
        trace_io::read_trace_file(path).with_context(|| format!("reading {}", path.display()))
    }
}

pub fn bias_stats(out_dir: &Path, a: &BiasArgs) -> Result<()> {
    let criterion: BiasCriterion = parse(&a.criterion)?;
    let schedule = build_schedule(&a.schedule)?;
    let hist: BiasHistogram = match a.source {
        BiasSource::Synthetic => {
            if a.samples == 0 {
                return Err(usage("empty batch: --samples must be at least 1"));
            }
            let profile = match a.profile {
                Profile::Content => AttentionProfile::Content,
                Profile::EndHeavy => AttentionProfile::EndHeavy { strength: a.strength },
            };
            let spec = SyntheticTraceSpec { n_image: a.image_tokens, profile, pool_seed: a.seed, ..Default::default() };
            spec.bias_histogram(&schedule, criterion, a.samples, a.seed.wrapping_add(1))?
        }
        BiasSource::Toy => {
            if a.samples == 0 {
                return Err(usage("empty batch: --samples must be at least 1"));
            }
            let toy = ToyArgs {
                system_tokens: 4,
                image_tokens: a.image_tokens,
                instruction_tokens: 8,
                layers: 14,
                d_model: 64,
                heads: 4,
                d_ffn: 176,
                vocab: 256,
                seed: a.seed,
                dtype: "float32".into(),
            };
            let runtime = build_runtime(&toy)?;
            let sched = criterion.apply(&schedule);
            let mut reports = Vec::with_capacity(a.samples);
            let mut roles = Vec::new();
            for s in 0..a.samples as u64 {
                let seq = toy_sequence(&toy, a.seed.wrapping_add(1 + s))?;
                roles = seq.roles().to_vec();
                reports.push(run_pruned_forward(&runtime, &seq, &sched)?.report);
            }
            histogram_from_reports(criterion, &roles, &reports)?
        }
        BiasSource::Traces => {
            if a.traces.is_empty() {
                return Err(usage("empty batch: pass at least one --trace"));
            }
            let sched = criterion.apply(&schedule);
            let mut reports = Vec::new();
            let mut roles: Option<Vec<_>> = None;
            for path in &a.traces {
                let trace = load_trace(path)?;
                match &roles {
                    Some(r) if *r != trace.roles => {
                        return Err(usage(format!("{} has a different token layout", path.display())))
                    }
                    _ => roles = Some(trace.roles.clone()),
                }
                reports.push(replay_on_trace(&mut &trace, &sched)?);
            }
            histogram_from_reports(criterion, roles.as_deref().unwrap_or_default(), &reports)?
        }
    };
    let name = format!("bias_{}.csv", criterion.as_str());
    write_out(out_dir, &name, &hist.to_csv(a.sigma))?;
    if a.svg {
        write_out(out_dir, &format!("bias_{}.svg", criterion.as_str()), &hist.to_svg(a.sigma))?;
    }
    let (lo, hi) = hist.null_band(a.sigma);
    say!("criterion: {}", criterion.as_str());
    say!("samples: {}", hist.sample_count);
    say!("retained per sample: {} of {}", hist.retained_per_sample, hist.bins.len());
    say!("uniform rate: {:.4}", hist.uniform_rate());
    say!("max deviation from uniform: {:.4}", hist.max_deviation());
    say!("{}-sigma band: [{lo:.4}, {hi:.4}]", a.sigma);
    say!("positions outside band: {:?}", hist.outside_band(a.sigma));
    say!("edge ratio (4 positions per end): {:.3}", hist.edge_ratio(4));
    say!("histogram written to {}", out_dir.join(name).display());
    Ok(())
}

pub fn flops(out_dir: &Path, a: &FlopsArgs) -> Result<()> {
    let preset = ModelPreset::named(&a.preset)
        .ok_or_else(|| {
            usage(format!("unknown model preset `{}` ({})", a.preset, flops::MODEL_PRESET_NAMES.join(", ")))
        })?
        .with_text_tokens(0, a.text_tokens);
    let convention: Convention = parse(&a.convention)?;
    let config = match a.schedule.as_str() {
        "none" => preset.unpruned(),
        name => {
            let schedule = match PruningSchedule::preset(name) {
                Some(s) => s,
                None if Path::new(name).exists() => PruningSchedule::load(Path::new(name))?,
                None => return Err(usage(format!("unknown schedule `{name}`"))),
            };
            preset.with_schedule(&schedule)?
        }
    }
    .with_convention(convention);
    let report = flops::transprune_flops(&config)?;
    let path = write_out(out_dir, "flops.csv", &report.to_csv())?;
    say_raw(&report.to_table());
    say!("csv written to {}", path.display());
    Ok(())
}

pub fn ablate(out_dir: &Path, a: &AblateArgs) -> Result<()> {
    let suite: AblationSuite = parse(&a.suite)?;
    let schedule = build_schedule(&a.schedule)?;
    let table = if a.traces.is_empty() {
        if a.samples == 0 {
            return Err(usage("--samples must be at least 1"));
        }
        let runtime = build_runtime(&a.toy)?;
        let sequences = (0..a.samples as u64)
            .map(|s| toy_sequence(&a.toy, a.toy.seed.wrapping_add(1 + s)))
            .collect::<Result<Vec<_>>>()?;
        run_ablation(suite, &schedule, &AblationSource::Toy { runtime: &runtime, sequences: &sequences })?
    } else {
        let traces = a.traces.iter().map(|p| load_trace(p)).collect::<Result<Vec<_>>>()?;
        run_ablation(suite, &schedule, &AblationSource::Traces(&traces))?
    };
    write_out(out_dir, &format!("ablation_{}.csv", suite.as_str()), &table.to_csv())?;
    let md = format!(
        "# Ablation: {}\n\nSelection overlap against the reference variant. Accuracy deltas are not measured.\n\n{}",
        suite.as_str(),
        table.to_markdown()
    );
    write_out(out_dir, &format!("ablation_{}.md", suite.as_str()), &md)?;
    say_raw(&md);
    Ok(())
}

pub fn score(out_dir: &Path, a: &ScoreArgs) -> Result<()> {
    let schedule = build_schedule(&a.schedule)?;
    let is_json = a.trace.extension().is_some_and(|e| e == "json");
    let report = if is_json || a.whole_file {
        let trace = load_trace(&a.trace)?;
        replay_on_trace(&mut &trace, &schedule)?
    } else {
        let mut reader = TraceReader::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
        replay_on_trace(&mut reader, &schedule)?
    };
    write_out(out_dir, "stages.csv", &stages_csv(&report))?;
    write_out(out_dir, "scores.csv", &scores_csv(&report, &schedule))?;
    say!("stage counts: {}", counts(&report));
    if report.approximate() {
        say!("note: the trace's token population differs from the schedule's at some stages; scores there are approximate");
    }
    say!("reports written to {}", out_dir.display());
    Ok(())
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let reader = TraceReader::open(&a.trace).with_context(|| format!("opening {}", a.trace.display()))?;
    let m = reader.manifest();
    if a.json {
        say!("{}", serde_json::to_string_pretty(m)?);
        return Ok(());
    }
    say!("model: {}", m.model_name);
    say!("format version: {}", m.format_version);
    say!("layers: {}  d_model: {}  heads: {}", m.n_layers, m.d_model, m.n_heads);
    say!("dtype: {:?}  payload bytes: {}", m.dtype, m.payload_bytes);
    let roles: Vec<String> = m.token_roles.iter().map(|r| format!("{:?} x{}", r.role, r.count)).collect();
    say!("tokens: {}", roles.join(", "));
    say!("captured layers:");
    for e in &m.layers {
        let f = e.flags();
        let mut parts = Vec::new();
        if let Some(s) = &e.attention {
            parts.push(format!("attention {}x{}", s.input.rows, s.input.cols));
        }
        if let Some(s) = &e.ffn {
            parts.push(format!("ffn {}x{}", s.input.rows, s.input.cols));
        }
        if let Some(s) = &e.attention_slice {
            parts.push(format!("slice {}x{}", s.weights.rows, s.weights.cols));
        }
        debug_assert_eq!(parts.len(), usize::from(f.attention) + usize::from(f.ffn) + usize::from(f.attention_slice));
        say!("  {:>3}: live {:>4}  {}", e.layer, e.live_tokens.len(), parts.join(", "));
    }
    Ok(())
}

pub fn export_toy(out_dir: &Path, a: &ExportArgs) -> Result<()> {
    let runtime = build_runtime(&a.toy)?;
    let seq = toy_sequence(&a.toy, a.toy.seed)?;
    let storage: StorageDType = parse(&a.storage)?;
    let plan = match a.capture {
        CaptureSet::All => CapturePlan::everything(runtime.n_layers()),
        CaptureSet::Minimal => {
            let schedule = build_schedule(&a.schedule)?;
            schedule.validate(runtime.n_layers())?;
            CapturePlan {
                sub_block_layers: schedule.all_ttv_layers(),
                slice_layers: schedule.decision_layers(),
                head_reduction: schedule.head_reduction,
                ..CapturePlan::default()
            }
        }
    };
    let plan = CapturePlan { scope: CaptureScope::ImageOnly, ..plan };
    let output = runtime.forward_with_hooks(&seq, &mut CaptureOnly(plan))?;
    let path = a.output.clone().unwrap_or_else(|| {
        out_dir.join(if a.json { "toy.json" } else { "toy.ttvt" })
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let bytes = if a.json {
        let text = trace_io::trace_to_json(&output.trace);
        fs::write(&path, &text)?;
        text.len() as u64
    } else {
        trace_io::write_trace_file(&output.trace, storage, &path)?
    };
    say!("wrote {} ({bytes} bytes, {} layers)", path.display(), output.trace.layers.len());
    Ok(())
}
