use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::Serialize;

use stgdat_core::config::{Ablation, RunConfig};
use stgdat_core::context::ContextLibrary;
use stgdat_core::data::{load_csv, make_samples, resample, save_csv, AgentTrajectory, CsvSchema, SceneSample, SceneTag};
use stgdat_core::model::{prepare, Model};
use stgdat_core::nn::{content_hash, Checkpoint, GradCheckReport};
use stgdat_core::pipeline::{Recording, SplitSpec, Windows};
use stgdat_core::predict::{forecast, score_forecasts, PredictMode, PredictOptions, SceneForecast};
use stgdat_core::synth::{generate_set, Archetype, ScenarioSpec, SynthScene};
use stgdat_core::tracker::{
    pooled_rmse, run_tracking, tune_process_noise, Occlusion, ProcessMode, TrackerConfig, TrackingReport, TrackingStream,
};
use stgdat_core::trainer::{self, point_metrics, ToyCheck};

use crate::manifest::{write_json, RunManifest};
use crate::{EvalArgs, GenSyntheticArgs, GradCheckArgs, PredictArgs, PreprocessArgs, TrackArgs, TrainArgs};

/// A command-line value that cannot be used.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

pub struct Context {
    pub seed: u64,
    #[allow(dead_code)]
    pub threads: usize,
}

/// Log-spaced process noise intensities searched when tuning.
const NOISE_GRID: [f64; 11] = [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0];

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v = serde_json::from_str(&s).map_err(stgdat_core::Error::from).with_context(|| format!("parsing {}", path.display()))?;
    Ok(v)
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::from_json(&s).with_context(|| format!("config {}", p.display()))?)
        }
        None => Ok(RunConfig::default()),
    }
}

/// CSV files named directly or found (non-recursively) in directories,
/// in sorted order.
fn csv_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(invalid("no CSV inputs found"));
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn parent_name(p: &Path) -> String {
    p.parent()
        .and_then(|d| d.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into())
}

fn load_resampled(path: &Path, frame_dt: f64, dt: f64) -> Result<Vec<AgentTrajectory>> {
    let raw = load_csv(path, &CsvSchema { frame_dt }).with_context(|| format!("loading {}", path.display()))?;
    Ok(raw.iter().map(|a| resample(a, dt)).collect::<stgdat_core::Result<_>>()?)
}

fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| invalid(format!("--split `{s}` is not three comma-separated numbers")))?;
    let [a, b, c] = parts[..] else {
        return Err(invalid(format!("--split `{s}` needs exactly three fractions")));
    };
    if [a, b, c].iter().any(|v| !(*v >= 0.0)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("--split fractions must be >= 0 and sum to 1, got {s}")));
    }
    Ok([a, b, c])
}

pub fn preprocess(ctx: &Context, args: PreprocessArgs) -> Result<()> {
    let cfg = run_config(args.config.as_deref())?;
    if !(args.frame_dt > 0.0) {
        return Err(invalid("--frame-dt must be > 0 s"));
    }
    let ratios = parse_split(&args.split)?;
    let files = csv_files(&args.input)?;
    let m = &cfg.model;
    let mut recordings = Vec::with_capacity(files.len());
    for f in &files {
        recordings.push(Recording {
            tag: SceneTag {
                scene_id: stem(f),
                location: args.location.clone().unwrap_or_else(|| parent_name(f)),
            },
            trajectories: load_resampled(f, args.frame_dt, m.dt)?,
        });
    }
    let horizon = stgdat_core::data::HorizonConfig {
        t_h: m.t_h,
        t_f: m.t_f,
        dt: m.dt,
    };
    let spec = SplitSpec {
        ratios,
        seed: ctx.seed,
        stride: args.stride,
    };
    let windows = Windows::from_recordings(&recordings, &horizon, &spec, m.cell_size)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut manifest = RunManifest::new(
        "preprocess",
        ctx.seed,
        serde_json::json!({ "model": m, "split": spec, "frame_dt": args.frame_dt }),
    )
    .inputs(&files);
    for (name, set) in [("train", &windows.train), ("val", &windows.val), ("test", &windows.test)] {
        let p = args.out.join(format!("{name}.json"));
        write_json(&p, set)?;
        manifest = manifest.output(&p);
    }
    let maps = args.out.join("maps");
    windows.library.save_dir(&maps)?;
    manifest.output(&maps).write(&args.out.join("manifest.json"))?;
    println!(
        "windows train={} val={} test={} maps={}",
        windows.train.len(),
        windows.val.len(),
        windows.test.len(),
        windows.library.maps.len()
    );
    Ok(())
}

pub fn gen_synthetic(ctx: &Context, args: GenSyntheticArgs) -> Result<()> {
    let archetype: Archetype = args.archetype.parse()?;
    let spec = ScenarioSpec::new(archetype, args.agents, args.steps, args.dt, args.noise, ctx.seed);
    spec.validate()?;
    if args.scenes == 0 {
        return Err(invalid("--scenes must be >= 1"));
    }
    let scenes = generate_set(&spec, args.scenes)?;
    let dir = args.out.join(archetype.as_str());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut manifest = RunManifest::new("gen-synthetic", ctx.seed, serde_json::to_value(&spec)?);
    for s in &scenes {
        let csv = dir.join(format!("{}.csv", s.tag.scene_id));
        save_csv(&csv, &s.trajectories, args.dt)?;
        let json = dir.join(format!("{}.json", s.tag.scene_id));
        write_json(&json, s)?;
        manifest = manifest.output(&csv).output(&json);
    }
    manifest.write(&args.out.join("manifest.json"))?;
    println!("scenes={} dir={}", scenes.len(), dir.display());
    Ok(())
}

pub fn train(ctx: &Context, args: TrainArgs) -> Result<()> {
    let mut cfg = run_config(args.config.as_deref())?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.seed = ctx.seed;
    cfg.validate()?;
    let data = args.data.ok_or_else(|| invalid("train needs --data <DIR>"))?;
    let out = args.out.ok_or_else(|| invalid("train needs --out <DIR>"))?;
    let windows = Windows {
        train: read_json(&data.join("train.json"))?,
        val: read_json(&data.join("val.json"))?,
        test: read_json(&data.join("test.json"))?,
        library: ContextLibrary::load_dir(data.join("maps"))?,
    };
    let dataset = windows.prepare(&cfg.model)?;
    let mut model = Model::new(cfg.model.clone(), ctx.seed)?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = BufWriter::new(File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?);
    let mut write_err = None;
    let report = trainer::train(&mut model, &dataset.train, &dataset.val, &cfg.train, |m| {
        let line = serde_json::to_string(m).map_err(anyhow::Error::from).and_then(|l| Ok(writeln!(metrics, "{l}")?));
        if let Err(e) = line {
            write_err.get_or_insert(e);
        }
        eprintln!("epoch {} loss {:.5} val_ade {:.4} m", m.epoch, m.loss.total, m.val_ade);
    })?;
    if let Some(e) = write_err {
        return Err(e.context("writing metrics"));
    }
    metrics.flush()?;
    let ckpt_path = out.join("checkpoint.json");
    let hash = model.to_checkpoint()?.save(&ckpt_path)?;
    let test = if dataset.test.is_empty() { None } else { Some(point_metrics(&model, &dataset.test)?) };
    let summary_path = out.join("report.json");
    write_json(
        &summary_path,
        &serde_json::json!({
            "report": report,
            "test_ade": test.map(|t| t.0),
            "test_fde": test.map(|t| t.1),
        }),
    )?;
    let mut manifest = RunManifest::new("train", ctx.seed, serde_json::to_value(&cfg)?)
        .input(&data)
        .output(&ckpt_path)
        .output(&metrics_path)
        .output(&summary_path);
    manifest.checkpoint_hash = Some(hash);
    manifest.write(&out.join("manifest.json"))?;
    println!(
        "best_epoch={} val_ade={} test_ade={}",
        report.best_epoch,
        report.best_val_ade,
        test.map_or("n/a".into(), |t| t.0.to_string())
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model, String)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt = Checkpoint::from_json(&text).with_context(|| format!("checkpoint {}", path.display()))?;
    Ok((Model::from_checkpoint(&ckpt)?, content_hash(text.as_bytes())))
}

fn load_maps(explicit: Option<&Path>, beside: Option<&Path>) -> Result<Option<ContextLibrary>> {
    if let Some(d) = explicit {
        return Ok(Some(ContextLibrary::load_dir(d)?));
    }
    match beside.and_then(|p| p.parent()).map(|d| d.join("maps")) {
        Some(d) if d.is_dir() => Ok(Some(ContextLibrary::load_dir(d)?)),
        _ => Ok(None),
    }
}

pub fn predict(ctx: &Context, args: PredictArgs) -> Result<()> {
    let mode: PredictMode = args.mode.parse()?;
    let (model, hash) = load_model(&args.checkpoint)?;
    let cfg = &model.config;
    let is_csv = args.input.extension().is_some_and(|e| e == "csv");
    let windows: Vec<SceneSample> = if is_csv {
        let trajs = load_resampled(&args.input, args.frame_dt, cfg.dt)?;
        let tag = SceneTag {
            scene_id: stem(&args.input),
            location: parent_name(&args.input),
        };
        let h = stgdat_core::data::HorizonConfig {
            t_h: cfg.t_h,
            t_f: cfg.t_f,
            dt: cfg.dt,
        };
        make_samples(&trajs, &h, &tag, args.stride)?
    } else {
        read_json(&args.input)?
    };
    if windows.is_empty() {
        return Err(invalid(format!("{} holds no complete window", args.input.display())));
    }
    let maps = load_maps(args.maps.as_deref(), (!is_csv).then_some(args.input.as_path()))?;
    if cfg.ablation.uses_context() && maps.is_none() {
        eprintln!("warning: no context maps given; context crops are zero");
    }
    let prepared = windows
        .iter()
        .map(|w| prepare(w, cfg, maps.as_ref(), false))
        .collect::<stgdat_core::Result<Vec<_>>>()?;
    let options = PredictOptions {
        mode,
        k: args.k,
        particles: args.particles,
        seed: ctx.seed,
        zero_latent: args.zero_latent,
    };
    let forecasts = forecast(&model, &prepared, &options)?;
    write_json(&args.out, &forecasts)?;
    let mut manifest = RunManifest::new("predict", ctx.seed, serde_json::to_value(&options)?)
        .input(&args.checkpoint)
        .input(&args.input)
        .output(&args.out);
    manifest.checkpoint_hash = Some(hash);
    manifest.write_beside(&args.out)?;
    println!("windows={} k={} mode={mode}", forecasts.len(), args.k);
    Ok(())
}

fn load_stream(path: &Path, frame_dt: f64) -> Result<TrackingStream> {
    if path.extension().is_some_and(|e| e == "csv") {
        let tag = SceneTag {
            scene_id: stem(path),
            location: parent_name(path),
        };
        let trajs = load_resampled(path, frame_dt, frame_dt)?;
        Ok(TrackingStream::from_trajectories(tag, &trajs, frame_dt)?)
    } else {
        let scene: SynthScene = read_json(path)?;
        Ok(TrackingStream::from_synth(&scene)?)
    }
}

#[derive(Serialize)]
struct ModeSummary {
    mode: ProcessMode,
    position_rmse: f64,
    velocity_rmse: f64,
    scenes: Vec<TrackingReport>,
}

#[derive(Serialize)]
struct TrackOutput {
    config: TrackerConfig,
    /// Pooled position RMSE on the tuning scenes per tuned mode.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    tuning: Vec<(ProcessMode, f64)>,
    modes: Vec<ModeSummary>,
}

pub fn track(ctx: &Context, args: TrackArgs) -> Result<()> {
    let mut cfg: TrackerConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrackerConfig::default(),
    };
    if let Some(s) = args.measurement_std {
        cfg.measurement_std = s;
    }
    if let Some(start) = args.occlusion_start {
        cfg.occlusions = vec![Occlusion {
            start,
            len: args.occlusion_len,
        }];
    }
    cfg.validate()?;
    let model = args.checkpoint.as_deref().map(load_model).transpose()?;
    let modes: Vec<ProcessMode> = match args.mode.as_str() {
        "all" if model.is_some() => ProcessMode::ALL.to_vec(),
        "all" => vec![ProcessMode::Cvm, ProcessMode::Cam],
        m => vec![m.parse()?],
    };
    if modes.contains(&ProcessMode::Model) && model.is_none() {
        return Err(invalid("model mode needs --checkpoint"));
    }
    let maps = match &args.maps {
        Some(d) => Some(ContextLibrary::load_dir(d)?),
        None => None,
    };
    let m = model.as_ref().map(|m| &m.0);
    let streams = args.input.iter().map(|p| load_stream(p, args.frame_dt)).collect::<Result<Vec<_>>>()?;
    let mut tuning = Vec::new();
    if !args.tune_on.is_empty() {
        let held = args.tune_on.iter().map(|p| load_stream(p, args.frame_dt)).collect::<Result<Vec<_>>>()?;
        for &mode in &modes {
            let (q, rmse) = tune_process_noise(&held, mode, &cfg, &NOISE_GRID, m, maps.as_ref())?;
            cfg.noise.set(mode, q);
            tuning.push((mode, rmse));
        }
    }
    let mut out = TrackOutput {
        config: cfg.clone(),
        tuning,
        modes: Vec::new(),
    };
    for &mode in &modes {
        let scenes = streams
            .iter()
            .map(|s| run_tracking(s, mode, &cfg, m, maps.as_ref()))
            .collect::<stgdat_core::Result<Vec<_>>>()?;
        let (p, v) = pooled_rmse(&scenes);
        println!("mode={mode} position_rmse={p} velocity_rmse={v}");
        out.modes.push(ModeSummary {
            mode,
            position_rmse: p,
            velocity_rmse: v,
            scenes,
        });
    }
    write_json(&args.out, &out)?;
    let mut manifest = RunManifest::new("track", ctx.seed, serde_json::to_value(&cfg)?)
        .inputs(&args.input)
        .inputs(&args.tune_on)
        .output(&args.out);
    manifest.checkpoint_hash = model.map(|m| m.1);
    manifest.write_beside(&args.out)?;
    Ok(())
}

pub fn eval(ctx: &Context, args: EvalArgs) -> Result<()> {
    if !(args.frame_dt > 0.0) {
        return Err(invalid("--frame-dt must be > 0 s"));
    }
    let forecasts: Vec<SceneForecast> = read_json(&args.pred)?;
    let truth = load_csv(&args.truth, &CsvSchema { frame_dt: args.frame_dt })
        .with_context(|| format!("loading {}", args.truth.display()))?;
    // A truth CSV holds one scene; restrict to its windows when ids line up.
    let scene = stem(&args.truth);
    let same: Vec<SceneForecast> = forecasts.iter().filter(|f| f.scene_id == scene).cloned().collect();
    let forecasts = if same.is_empty() { forecasts } else { same };
    let score = score_forecasts(&forecasts, &truth)?;
    println!(
        "ade={} fde={} min_ade={} min_fde={} agents={}",
        score.ade, score.fde, score.min_ade, score.min_fde, score.agents
    );
    if let Some(out) = &args.out {
        write_json(out, &score)?;
        RunManifest::new("eval", ctx.seed, serde_json::json!({ "frame_dt": args.frame_dt }))
            .input(&args.pred)
            .input(&args.truth)
            .output(out)
            .write_beside(out)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GradCheckEntry {
    check: ToyCheck,
    max_rel_error: f64,
    max_norm_rel_error: f64,
    report: GradCheckReport,
}

pub fn grad_check(ctx: &Context, args: GradCheckArgs) -> Result<()> {
    let ablations: Vec<Ablation> = if args.ablation == "all" {
        Ablation::ALL.to_vec()
    } else {
        vec![args.ablation.parse()?]
    };
    if !(args.h > 0.0) || !(args.tolerance > 0.0) {
        return Err(invalid("--h and --tolerance must be > 0"));
    }
    let mut entries = Vec::new();
    let mut failed = Vec::new();
    for a in ablations {
        let check = ToyCheck {
            warmup_steps: args.warmup_steps,
            h: args.h,
            fallback_h: vec![args.h / 10.0],
            ..ToyCheck::new(a, ctx.seed)
        };
        let report = check.run()?;
        let err = report.max_rel_error();
        let worst = report.worst().map_or(String::new(), |w| {
            format!(" worst={}[{}] analytic={:e} numeric={:e}", w.name, w.worst.0, w.worst.1, w.worst.2)
        });
        let ok = err < args.tolerance;
        println!(
            "{a} max_rel_error={err:e} entries={}{worst} {}",
            report.entries_checked,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(a.to_string());
        }
        entries.push(GradCheckEntry {
            max_rel_error: err,
            max_norm_rel_error: report.max_norm_rel_error(),
            check,
            report,
        });
    }
    if let Some(out) = &args.out {
        write_json(out, &entries)?;
        RunManifest::new("grad-check", ctx.seed, serde_json::json!({ "h": args.h, "tolerance": args.tolerance }))
            .output(out)
            .write_beside(out)?;
    }
    if !failed.is_empty() {
        bail!("gradient check above tolerance {} for {}", args.tolerance, failed.join(", "));
    }
    Ok(())
}
