use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use periscope::calib::{calibrate as run_calibration, save_trace};
use periscope::image::{DepthMap, GrayImage};
use periscope::network::{Checkpoint, Model};
use periscope::pipeline::{measure_stream, region_mae, CorneaModel};
use periscope::synthgen::{
    generate_dataset, load_dataset, load_stream, render_stream, save_stream, Dataset, SceneGeometry,
    SceneSpec, Split, Surface, SyntheticProvider, FORMAT_VERSION,
};
use periscope::training::{evaluate_model, train_with, write_history, Pair};
use periscope::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{log_resolved, resolve, Overrides};
use crate::{
    CalibrateArgs, EvalArgs, MeasureArgs, PredictArgs, ProviderArg, RefractionArgs, SplitArg, SynthArgs,
    SynthStreamArgs, TrainArgs,
};

/// JSON object carrying a `format_version` field.
fn versioned<T: Serialize>(value: &T) -> Result<Value> {
    let mut out = serde_json::Map::new();
    out.insert("format_version".into(), json!(FORMAT_VERSION));
    match serde_json::to_value(value)? {
        Value::Object(fields) => out.extend(fields),
        other => {
            out.insert("value".into(), other);
        }
    }
    Ok(Value::Object(out))
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).map_err(|e| with_path(e, path)),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.to_model()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set(&["seed"], a.seed);
    let cfg = resolve(a.config.as_deref(), o)?;
    log_resolved(
        "synth",
        json!({"n": a.n, "resolution": a.resolution, "out": a.out}),
        &cfg,
    );
    let manifest = generate_dataset(a.n, cfg.seed, a.resolution, &a.out)?;
    eprintln!("wrote {} samples to {}", manifest.samples.len(), a.out.display());
    Ok(())
}

pub fn synth_stream(a: SynthStreamArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set(&["seed"], a.seed)
        .set(&["stream", "fps"], a.fps)
        .set(&["stream", "frames"], a.frames)
        .set(&["stream", "resolution"], a.resolution)
        .set(&["stream", "gaze_sweep_deg"], a.gaze_sweep_deg)
        .set(&["stream", "blink_period_s"], a.blink_period_s);
    let cfg = resolve(a.config.as_deref(), o)?;
    log_resolved("synth-stream", json!({"out": a.out, "spec": a.spec}), &cfg);
    let mut base = match &a.spec {
        Some(p) => read_json::<SceneSpec>(p)?,
        None => SceneSpec::canonical(),
    };
    base.seed = cfg.seed;
    let s = render_stream(&base, &cfg.stream)?;
    save_stream(&a.out, &s)?;
    eprintln!("wrote {} frames to {}", s.stream.len(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set(&["seed"], a.seed)
        .set(&["train", "max_epochs"], a.epochs)
        .set(&["train", "lr"], a.lr)
        .set(&["train", "patience"], a.patience)
        .set(&["train", "batch_size"], a.batch_size)
        .set(&["network", "base_channels"], a.base_channels)
        .set(&["network", "dropout_p"], a.dropout);
    let mut cfg = resolve(a.config.as_deref(), o)?;
    let data = load_dataset(&a.data)?;
    // the network input size follows the data
    cfg.network.input_resolution = data.manifest.resolution;
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut p = a.out_checkpoint.clone().into_os_string();
        p.push(".history.jsonl");
        PathBuf::from(p)
    });
    log_resolved(
        "train",
        json!({"data": a.data, "out_checkpoint": a.out_checkpoint, "history": history_path}),
        &cfg,
    );
    let split = data.to_split_dataset()?;
    let mut model = Model::build(cfg.network, cfg.seed)?;
    eprintln!(
        "{} parameters; {} train / {} val / {} test pairs",
        model.num_parameters(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let outcome = train_with(&mut model, &split, &cfg.train, |r| {
        eprintln!(
            "epoch {:>4}  train {:.6}  val {:.6}",
            r.epoch, r.train_loss, r.val_loss
        );
    })?;
    outcome.best.save(&a.out_checkpoint)?;
    write_history(&history_path, &outcome.history)?;
    eprintln!(
        "best epoch {} of {}{}",
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

fn split_pairs(data: &Dataset, which: SplitArg) -> Result<Vec<Pair>> {
    let which = match which {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    data.split(which)
        .map(|s| Pair::from_maps(&s.image, &s.depth))
        .collect()
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let data = load_dataset(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let pairs = split_pairs(&data, a.split)?;
    if pairs.is_empty() {
        return Err(Error::Input(format!("split {:?} of {} is empty", a.split, a.data.display())));
    }
    let report = evaluate_model(&model, &pairs)?;
    emit(&versioned(&report)?, a.out.as_deref())
}

fn write_depth(dir: &Path, stem: &str, depth: &DepthMap, png: bool) -> Result<()> {
    let path = dir.join(format!("{stem}_depth.f32"));
    fs::write(&path, depth.to_f32_bytes()).map_err(|e| with_path(e, &path))?;
    let meta = json!({
        "format_version": FORMAT_VERSION,
        "width": depth.width(),
        "height": depth.height(),
        "units": "mm",
        "layout": "row-major f32 little-endian",
    });
    emit(&meta, Some(&dir.join(format!("{stem}_depth.json"))))?;
    if png {
        depth
            .to_visualization()
            .save_png(&dir.join(format!("{stem}_depth.png")))?;
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    fs::create_dir_all(&a.out).map_err(|e| with_path(e, &a.out))?;
    if let Some(image) = &a.image {
        let frame = GrayImage::load_png(image)?;
        let stem = image
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        write_depth(&a.out, &stem, &model.predict(&frame)?, a.png)?;
        return Ok(());
    }
    let dir = a.stream_dir.as_ref().expect("clap requires a source");
    let (stream, _) = load_stream(dir)?;
    for (i, frame) in stream.frames.iter().enumerate() {
        write_depth(&a.out, &format!("frame_{i:05}"), &model.predict(frame)?, a.png)?;
    }
    eprintln!("wrote {} depth maps to {}", stream.len(), a.out.display());
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set(&["calib", "block_grid"], a.block_grid)
        .set(&["calib", "alpha"], a.alpha)
        .set(&["calib", "max_steps"], a.max_steps);
    let cfg = resolve(a.config.as_deref(), o)?;
    log_resolved(
        "calibrate",
        json!({"target": a.target, "spec0": a.spec0, "out_trace": a.out_trace, "out": a.out}),
        &cfg,
    );
    let target = GrayImage::load_png(&a.target)?;
    let spec0: SceneSpec = read_json(&a.spec0)?;
    let c = run_calibration(&target, &spec0, &cfg.calib)?;
    save_trace(&a.out_trace, &c.trace)?;
    eprintln!("{}", c.diagnostic());
    let out = versioned(&json!({
        "status": c.status,
        "mae_total": c.mae_total,
        "max_block_error": c.max_block_error,
        "steps": c.trace.len(),
        "spec": c.spec,
    }))?;
    emit(&out, a.out.as_deref())
}

pub fn measure_pupil(a: MeasureArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set(&["gate", "capacity"], a.capacity)
        .set(&["gate", "gaze_epsilon_deg"], a.gaze_epsilon_deg)
        .set(&["gate", "openness_tolerance"], a.openness_tolerance)
        .set(&["gate", "outlier_mode"], a.outlier_mode.clone());
    let cfg = resolve(a.config.as_deref(), o)?;
    log_resolved(
        "measure-pupil",
        json!({"stream_dir": a.stream_dir, "checkpoint": a.checkpoint, "provider": "synthetic"}),
        &cfg,
    );
    let (stream, file) = load_stream(&a.stream_dir)?;
    let provider = match a.provider {
        ProviderArg::Synthetic => SyntheticProvider::from_specs(&file.specs, file.resolution)?,
    };
    let model = load_model(&a.checkpoint)?;
    let (mut report, fused) = measure_stream(&stream, &provider, &model, &file.intrinsics, &cfg.gate)?;
    if a.with_ground_truth {
        let first = report.frame_indices[0];
        let geo = SceneGeometry::of(&file.specs[first], file.resolution)?;
        let regions = vec![
            ("eyeball".to_string(), geo.mask(Surface::is_eyeball)),
            ("pupil".to_string(), geo.mask(|s| s == Surface::Pupil)),
            ("skin".to_string(), geo.mask(|s| s == Surface::Skin)),
        ];
        report.per_region_mae = Some(region_mae(&fused.map, &geo.depth, &regions)?);
    }
    if !report.complete {
        eprintln!(
            "warning: stream ended with {} of {} frames collected",
            report.n_maps_used, cfg.gate.capacity
        );
    }
    emit(&versioned(&report)?, a.out.as_deref())
}

fn parse_angles(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("angles {spec:?} must look like start:stop:step"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if !(step > 0.0) || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + step * i as f64).collect())
}

pub fn refraction_sim(a: RefractionArgs) -> Result<()> {
    let model = CorneaModel {
        radius_mm: a.radius_mm,
        chamber_depth_mm: a.chamber_depth_mm,
        refractive_index: a.refractive_index,
        pupil_diameter_mm: a.diameter_mm,
    };
    let rows = parse_angles(&a.angles)?
        .into_iter()
        .map(|angle| model.apparent_size(angle))
        .collect::<Result<Vec<_>>>()?;
    if a.json {
        return emit(&versioned(&json!({ "model": model, "rows": rows }))?, None);
    }
    let mut out = String::from("angle, actual, observed, error%\n");
    for r in &rows {
        out.push_str(&format!(
            "{}, {:.2}, {:.2}, {:.2}\n",
            r.angle_deg, r.actual_mm, r.observed_mm, r.error_pct
        ));
    }
    std::io::stdout().write_all(out.as_bytes())?;
    Ok(())
}
