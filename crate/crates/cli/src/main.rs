//! `wfp`: generate synthetic captures, train and evaluate app/action
//! classifiers, profile users and identify them across MAC rotation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use wfp_core::classifier::{load_bundle, save_bundle, ClassifierBundle, DecisionMode};
use wfp_core::config::RunConfig;
use wfp_core::pipeline::{
    evaluate, kde_export, label_recorder_traces, measure_runtime, operation_traces, profile_rooms, profiling_cutoff,
    profiling_samples, score_identification, segment_captures, split_by_app, train_bundle, CaptureSet, LabeledTrace,
    OperationTrace, RoomProfiles, RoomScore,
};
use wfp_core::profiler::{behavior_windows, collapse_timed, identify_trace, ProfilesFile};
use wfp_core::ingest::write_capture;
use wfp_core::synthgen::{
    capture_file_name, generate_scenario, log_file_name, presets, GroundTruth, MAPPING_FILE, RECORDERS_FILE, SCENARIO_FILE,
    TRUTH_FILE,
};
use wfp_core::trace_model::MacAddr;

const MODEL_FILE: &str = "model.wfpb";

#[derive(Parser, Debug)]
#[command(name = "wfp", version, about = "Wi-Fi MAC-layer app, action and user fingerprinting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (TOML); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Withhold `training.withheld_apps` from training and score them as unknown.
    #[arg(long, global = true)]
    open_world: bool,
    /// Drop this fraction of captured frames before processing.
    #[arg(long, global = true)]
    loss_rate: Option<f64>,
    /// Output directory for models, reports and the manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic capture campaign (captures, logs, ground truth).
    Generate,
    /// Train the app and action classifiers on the training split.
    Train,
    /// Score a trained model on the test split.
    Eval,
    /// Build per-room user profiles from the first part of the capture.
    Profile,
    /// Identify users of the remaining traces against saved profiles.
    Identify,
    /// Measure per-sample inference time.
    Runtime,
}

struct Run {
    cfg: RunConfig,
    base: Option<PathBuf>,
    out: PathBuf,
    open_world: bool,
    command: &'static str,
    files: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool_version: &'a str,
    config_hash: String,
    seed: u64,
    loss_rate: f64,
    open_world: bool,
    scenario: &'a str,
    data_dir: Option<&'a Path>,
    files: &'a [String],
}

impl Run {
    fn new(common: &Common, command: &'static str) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(l) = common.loss_rate {
            cfg.loss_rate = l;
        }
        let base = common.config.as_ref().and_then(|p| p.parent().map(Path::to_path_buf));
        let resolve = |p: &PathBuf| match &base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.clone(),
        };
        cfg.paths.data_dir = cfg.paths.data_dir.as_ref().map(resolve);
        cfg.paths.model = cfg.paths.model.as_ref().map(resolve);
        cfg.paths.profiles = cfg.paths.profiles.as_ref().map(resolve);
        cfg.evaluation.ground_truth = cfg.evaluation.ground_truth.as_ref().map(resolve);
        let out = common
            .out
            .clone()
            .or_else(|| cfg.paths.out_dir.as_ref().map(resolve))
            .unwrap_or_else(|| PathBuf::from("out"));
        if common.open_world && cfg.training.withheld_apps.is_empty() {
            cfg.training.withheld_apps = presets::withheld_apps();
        }
        if !common.open_world {
            cfg.training.withheld_apps.clear();
        }
        cfg.validate()?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Run {
            cfg,
            base,
            out,
            open_world: common.open_world,
            command,
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.out.join(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, &serde_json::to_string_pretty(value)?)
    }

    fn finish(mut self) -> Result<()> {
        self.write("config.toml", &self.cfg.to_toml())?;
        let manifest = Manifest {
            command: self.command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            loss_rate: self.cfg.loss_rate,
            open_world: self.open_world,
            scenario: &self.cfg.scenario,
            data_dir: self.cfg.paths.data_dir.as_deref(),
            files: &self.files,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.out.join("manifest.json"), text)?;
        Ok(())
    }

    /// Capture data from `paths.data_dir` or, without one, generated in
    /// memory from the configured scenario. Ground truth is returned only
    /// for scoring.
    fn data(&self) -> Result<(CaptureSet, Option<GroundTruth>)> {
        let (set, truth) = match &self.cfg.paths.data_dir {
            Some(dir) => {
                let set = CaptureSet::load(dir).with_context(|| format!("loading captures from {}", dir.display()))?;
                let truth = match &self.cfg.evaluation.ground_truth {
                    Some(p) => Some(GroundTruth::load(p)?),
                    None => None,
                };
                (set, truth)
            }
            None => {
                let scenario = self.cfg.resolve_scenario(self.base.as_deref())?;
                let gen = generate_scenario(&scenario)?;
                (CaptureSet::from_generated(&gen, &scenario), Some(gen.truth))
            }
        };
        if self.cfg.loss_rate > 0.0 {
            log::info!("dropping {:.1}% of captured frames", self.cfg.loss_rate * 100.0);
            return Ok((set.with_loss(self.cfg.loss_rate, self.cfg.seed)?, truth));
        }
        Ok((set, truth))
    }

    fn model_path(&self) -> PathBuf {
        self.cfg.paths.model.clone().unwrap_or_else(|| self.out.join(MODEL_FILE))
    }

    fn model(&self) -> Result<ClassifierBundle> {
        let p = self.model_path();
        load_bundle(&p).with_context(|| format!("loading model {} (run `wfp train` first)", p.display()))
    }

    fn profiles_dir(&self) -> PathBuf {
        self.cfg.paths.profiles.clone().unwrap_or_else(|| self.out.clone())
    }
}

struct Split {
    labeled: Vec<LabeledTrace>,
    train: Vec<usize>,
    test: Vec<usize>,
}

fn labeled_split(ctx: &Run, set: &CaptureSet) -> Result<Split> {
    let traces = segment_captures(set, &ctx.cfg.segmenter);
    let labeled = label_recorder_traces(set, &traces)?;
    if labeled.is_empty() {
        bail!("no traces of label-recorder devices found in the captures");
    }
    let (train, test) = split_by_app(&labeled, ctx.cfg.training.train_fraction, ctx.cfg.seed);
    log::info!("{} labeled traces: {} train, {} test", labeled.len(), train.len(), test.len());
    Ok(Split { labeled, train, test })
}

fn cmd_generate(mut ctx: Run) -> Result<()> {
    let scenario = ctx.cfg.resolve_scenario(ctx.base.as_deref())?;
    let gen = generate_scenario(&scenario)?;
    gen.write_to_dir(&ctx.out, &scenario)?;
    let mut files: Vec<String> = gen.captures.keys().map(|r| capture_file_name(r)).collect();
    if ctx.cfg.loss_rate > 0.0 {
        let set = CaptureSet::from_generated(&gen, &scenario).with_loss(ctx.cfg.loss_rate, ctx.cfg.seed)?;
        for (room, frames) in &set.captures {
            write_capture(&ctx.out.join(capture_file_name(room)), frames)?;
        }
    }
    files.extend(gen.logs.keys().map(|u| log_file_name(u)));
    files.extend([TRUTH_FILE, MAPPING_FILE, RECORDERS_FILE, SCENARIO_FILE].map(String::from));
    let frames: usize = gen.captures.values().map(Vec::len).sum();
    println!(
        "wrote {} rooms, {frames} frames, {} interaction logs to {}",
        gen.captures.len(),
        gen.logs.len(),
        ctx.out.display()
    );
    ctx.files.extend(files);
    ctx.finish()
}

fn cmd_train(mut ctx: Run) -> Result<()> {
    let (set, _) = ctx.data()?;
    let split = labeled_split(&ctx, &set)?;
    let train: Vec<&LabeledTrace> = split.train.iter().map(|&i| &split.labeled[i]).collect();
    let (bundle, summary) = train_bundle(&train, &set.app_categories, &set.mapping, &ctx.cfg)?;
    let path = ctx.model_path();
    save_bundle(&path, &bundle)?;
    ctx.files.push(path.display().to_string());
    ctx.write_json("train_report.json", &summary)?;
    ctx.write("kde_features.csv", &kde_export(&train, &ctx.cfg, &[2, 4, 7, 10], 64))?;
    println!(
        "trained {} apps on {} samples (loss {:.4} -> {:.4}); {} action classifiers; model at {}",
        bundle.apps.len(),
        summary.app_samples,
        summary.app_report.initial_loss,
        summary.app_report.final_loss(),
        bundle.actions.len(),
        path.display()
    );
    ctx.finish()
}

#[derive(Serialize)]
struct EvalReport {
    mode: String,
    app_accuracy: f64,
    action_accuracy: f64,
    unknown_recall: Option<f64>,
    outcome: wfp_core::pipeline::EvalOutcome,
}

fn cmd_eval(mut ctx: Run) -> Result<()> {
    let bundle = ctx.model()?;
    let (set, _) = ctx.data()?;
    let split = labeled_split(&ctx, &set)?;
    let test: Vec<&LabeledTrace> = split
        .test
        .iter()
        .map(|&i| &split.labeled[i])
        .filter(|t| ctx.open_world || bundle.apps.contains(&t.dominant_app))
        .collect();
    let modes: &[(DecisionMode, &str)] = if ctx.open_world {
        &[(DecisionMode::OpenMax, "openmax"), (DecisionMode::SoftmaxOnly, "softmax")]
    } else {
        &[(DecisionMode::SoftmaxOnly, "softmax"), (DecisionMode::OpenMax, "openmax")]
    };
    let mut reports = Vec::new();
    let mut text = String::new();
    for (mode, name) in modes {
        let out = evaluate(&bundle, &test, *mode)?;
        text.push_str(&out.app.to_table(&format!("apps ({name})")));
        text.push('\n');
        text.push_str(&out.action.to_table(&format!("actions ({name})")));
        text.push('\n');
        println!(
            "{name}: app accuracy {:.4}, action accuracy {:.4}{}",
            out.app.accuracy,
            out.action.accuracy,
            out.unknown_recall.map(|r| format!(", unknown recall {r:.4}")).unwrap_or_default()
        );
        reports.push(EvalReport {
            mode: name.to_string(),
            app_accuracy: out.app.accuracy,
            action_accuracy: out.action.accuracy,
            unknown_recall: out.unknown_recall,
            outcome: out,
        });
    }
    ctx.write_json("eval.json", &reports)?;
    ctx.write("eval.txt", &text)?;
    ctx.finish()
}

fn operations(ctx: &Run, set: &CaptureSet) -> Result<(Vec<OperationTrace>, f64)> {
    let bundle = ctx.model()?;
    let traces = segment_captures(set, &ctx.cfg.segmenter);
    let ops = operation_traces(&bundle, &traces, DecisionMode::OpenMax)?;
    let cutoff = profiling_cutoff(set, ctx.cfg.profiler.profile_fraction).context("captures are empty")?;
    Ok((ops, cutoff))
}

fn profile_file(room: &str) -> String {
    format!("profiles_{room}.json")
}

fn write_scores(ctx: &mut Run, scores: &[RoomScore]) -> Result<()> {
    let mut text = String::from("room      k_op  users  purity   windows  accuracy  traces  trace_acc\n");
    for s in scores {
        text.push_str(&format!(
            "{:<9} {:>4}  {:>5}  {:>6.4}  {:>8}  {:>8.4}  {:>6}  {:>9.4}\n",
            s.room,
            s.k_op,
            s.true_users,
            s.profile_purity,
            s.identified,
            s.accuracy(),
            s.traces,
            if s.traces > 0 { s.trace_correct as f64 / s.traces as f64 } else { 0.0 }
        ));
    }
    print!("{text}");
    ctx.write_json("identification_scores.json", &scores)?;
    ctx.write("identification_scores.txt", &text)
}

fn cmd_profile(mut ctx: Run) -> Result<()> {
    let (set, truth) = ctx.data()?;
    let (ops, cutoff) = operations(&ctx, &set)?;
    let rooms = profile_rooms(&ops, cutoff, &ctx.cfg)?;
    let dir = ctx.profiles_dir();
    fs::create_dir_all(&dir)?;
    for rp in &rooms {
        let p = dir.join(profile_file(&rp.room));
        fs::write(&p, serde_json::to_string_pretty(&ProfilesFile::from_profiles(&rp.profiles))?)?;
        ctx.files.push(p.display().to_string());
        println!("{}: {} samples from {} MACs -> {} profiles", rp.room, rp.samples.len(), rp.macs, rp.profiles.k_op);
    }
    if let Some(truth) = truth {
        let scores = score_identification(&rooms, &ops, cutoff, &truth.user_of_mac(), &ctx.cfg)?;
        write_scores(&mut ctx, &scores)?;
    }
    ctx.finish()
}

#[derive(Serialize)]
struct Identification {
    room: String,
    mac: MacAddr,
    start: f64,
    windows: usize,
    profile: Option<usize>,
}

fn cmd_identify(mut ctx: Run) -> Result<()> {
    let (set, truth) = ctx.data()?;
    let (ops, cutoff) = operations(&ctx, &set)?;
    let dir = ctx.profiles_dir();
    let wb = ctx.cfg.profiler.behavior_window;
    let mut rooms = Vec::new();
    for (room, samples) in profiling_samples(&ops, cutoff, wb) {
        let p = dir.join(profile_file(&room));
        let text = fs::read_to_string(&p).with_context(|| format!("reading {} (run `wfp profile` first)", p.display()))?;
        let file: ProfilesFile = serde_json::from_str(&text)?;
        let macs = samples.iter().map(|s| s.mac).collect::<std::collections::BTreeSet<_>>().len();
        rooms.push(RoomProfiles {
            profiles: file.to_profiles()?,
            room,
            macs,
            samples,
        });
    }
    let by_room: BTreeMap<&str, &RoomProfiles> = rooms.iter().map(|r| (r.room.as_str(), r)).collect();
    let mut out = Vec::new();
    for o in ops.iter().filter(|o| o.start >= cutoff) {
        let Some(rp) = by_room.get(o.room.as_str()) else { continue };
        let samples = behavior_windows(&collapse_timed(o.mac, &o.operations, &o.times), wb);
        out.push(Identification {
            room: o.room.clone(),
            mac: o.mac,
            start: o.start,
            windows: samples.len(),
            profile: identify_trace(&samples, &rp.profiles),
        });
    }
    let lines: Vec<String> = out.iter().map(serde_json::to_string).collect::<Result<_, _>>()?;
    ctx.write("identifications.jsonl", &(lines.join("\n") + "\n"))?;
    println!("identified {} held-out traces", out.iter().filter(|i| i.profile.is_some()).count());
    if let Some(truth) = truth {
        let scores = score_identification(&rooms, &ops, cutoff, &truth.user_of_mac(), &ctx.cfg)?;
        write_scores(&mut ctx, &scores)?;
    }
    ctx.finish()
}

fn cmd_runtime(mut ctx: Run) -> Result<()> {
    let bundle = ctx.model()?;
    let (set, _) = ctx.data()?;
    let split = labeled_split(&ctx, &set)?;
    let traces: Vec<_> = split.test.iter().map(|&i| &split.labeled[i].annotated.trace).collect();
    let rt = measure_runtime(&bundle, &traces, 10_000, DecisionMode::OpenMax)?;
    let mut text = format!("{} samples, {:.4} ms/sample end to end\n", rt.samples, rt.total_ms_per_sample);
    for (stage, ms) in &rt.stages_ms_per_sample {
        text.push_str(&format!("  {stage:<32} {ms:.4} ms/sample\n"));
    }
    print!("{text}");
    ctx.write_json("runtime.json", &rt)?;
    ctx.write("runtime.txt", &text)?;
    ctx.finish()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let name = match cli.command {
        Command::Generate => "generate",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Profile => "profile",
        Command::Identify => "identify",
        Command::Runtime => "runtime",
    };
    let ctx = Run::new(&cli.common, name)?;
    match cli.command {
        Command::Generate => cmd_generate(ctx),
        Command::Train => cmd_train(ctx),
        Command::Eval => cmd_eval(ctx),
        Command::Profile => cmd_profile(ctx),
        Command::Identify => cmd_identify(ctx),
        Command::Runtime => cmd_runtime(ctx),
    }
}
