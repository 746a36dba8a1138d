use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lang4d::checkpoint::Checkpoint;
use lang4d::config::RunConfig;
use lang4d::error::{Error, Result};
use lang4d::fsutil;
use lang4d::metrics::Report;
use lang4d::pipeline::{embedding_query, evaluate, prediction_cases, query_scene, train_model_with, EvalSelection, Model};
use lang4d::query::{lift_frame, PointCloud};
use lang4d::sbd::Branch;
use lang4d::selftest;
use lang4d::synth::{self, Scene, SceneSpec};
use lang4d::tensor::lft;
use lang4d::{ParamStore, Tensor};

#[derive(Parser)]
#[command(name = "lang4d", version, about = "Streaming 4D language fields on synthetic and recorded clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene bundle.
    GenSynth(GenSynthArgs),
    /// Train the decoder (and optionally the encoder) on a bundle.
    Train(TrainArgs),
    /// Write semantic, RGB and depth maps for every frame of a clip.
    Infer(InferArgs),
    /// Run an open-vocabulary query through a clip.
    Query(QueryArgs),
    /// Score a checkpoint, or stored query outputs, against ground truth.
    Eval(EvalArgs),
    /// Export per-frame point clouds of a clip.
    ExportPly(ExportArgs),
    /// Run the invariant and end-to-end acceptance suite.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenSynthArgs {
    /// `default` for the four-scene suite, or a JSON file with a list of
    /// scene specs.
    #[arg(long, default_value = "default")]
    spec: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "data")]
    bundle: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    scene: Option<String>,
    /// Directory of `f000.lft, f001.lft, ...` frames instead of a bundle scene.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    scene: String,
    /// Name of a query stored in the bundle.
    #[arg(long, conflicts_with = "embedding")]
    query: Option<String>,
    /// LFT1 file with a query vector, full-size or already compressed.
    #[arg(long, requires = "branch")]
    embedding: Option<PathBuf>,
    #[arg(long)]
    branch: Option<String>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    tau_t: Option<f32>,
    /// Lift with ground-truth depth and cameras.
    #[arg(long)]
    oracle_geometry: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "data")]
    bundle: PathBuf,
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// Directory of stored query outputs, one subdirectory per scene.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
    #[arg(long, default_value = "agnostic")]
    branch: String,
    #[arg(long)]
    paraphrases: bool,
    /// Score every frame instead of the held-out ones.
    #[arg(long)]
    all_frames: bool,
    /// Token-grid patch size when scoring stored outputs.
    #[arg(long, default_value_t = 8)]
    patch: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    scene: String,
    #[arg(long, default_value = "agnostic")]
    branch: String,
    #[arg(long)]
    oracle_geometry: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Skip the criteria that need full training runs.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::ExportPly(a) => export_ply(a),
        Command::Selftest(a) => {
            let results = selftest::run(&selftest::Options {
                quick: a.quick,
                seed: a.seed,
            });
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} passed, {failed} failed", results.len() - failed);
            Ok(ExitCode::from(u8::from(failed > 0)))
        }
    }
}

fn gen_synth(a: GenSynthArgs) -> Result<ExitCode> {
    let specs: Vec<SceneSpec> = if a.spec == "default" {
        synth::default_suite(a.seed)
    } else {
        serde_json::from_str(&fsutil::read_text(Path::new(&a.spec))?)?
    };
    let scenes = specs.iter().map(synth::generate).collect::<Result<Vec<_>>>()?;
    synth::write_bundle(&a.out, &scenes)?;
    log::info!("wrote {} scenes to {}", scenes.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(b) = &a.bundle {
        cfg.paths.bundle = b.display().to_string();
    }
    if let Some(o) = &a.out {
        cfg.paths.output = o.display().to_string();
    }
    cfg.validate()?;
    let scenes = synth::read_bundle(Path::new(&cfg.paths.bundle))?;
    let out = PathBuf::from(&cfg.paths.output);
    fsutil::create_dir(&out)?;
    cfg.save(&out.join("config.json"))?;
    let log_path = out.join("train_log.ndjson");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);

    let every = cfg.checkpoint_every;
    let seed = cfg.train.seed;
    let mut periodic = |epoch: usize, stores: &[&ParamStore]| -> Result<()> {
        if every > 0 && epoch.is_multiple_of(every) {
            Checkpoint::from_stores(stores, &cfg, seed).save(&out.join(format!("checkpoint_e{epoch:04}.l4ck")))?;
        }
        Ok(())
    };
    let t = train_model_with(&cfg, &scenes, Some(&mut log), Some(&mut periodic))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(last) = t.report.epoch_loss.last() {
        log::info!("final epoch loss {last:.6}");
    }
    let path = out.join("checkpoint.l4ck");
    Checkpoint::from_model(&t.model, &cfg, seed).save(&path)?;
    log::info!("checkpoint written to {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<(Model, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let (model, _) = ck.to_model(None)?;
    Ok((model, ck.config))
}

fn find_scene(bundle: &Path, name: &str) -> Result<Scene> {
    synth::read_scene(&bundle.join("scene").join(name))
}

fn read_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "lft"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Contract(format!("no .lft frames in {}", dir.display())));
    }
    files.iter().map(|p| lft::read_tensor(p)).collect()
}

fn infer(a: InferArgs) -> Result<ExitCode> {
    let (model, _) = load_model(&a.model.checkpoint)?;
    let frames = match (&a.frames, &a.scene) {
        (Some(d), _) => read_frames(d)?,
        (None, Some(s)) => find_scene(&a.model.bundle, s)?.frames.into_iter().map(|f| f.image).collect(),
        (None, None) => return Err(Error::Config("infer needs --scene or --frames".into())),
    };
    fsutil::create_dir(&a.out)?;
    let tokens = model.encoder.encode_video(&frames)?;
    for (t, tok) in tokens.iter().enumerate() {
        for &b in &model.sbd.config.branches {
            let (map, rgb) = model.sbd.decode(tok, b)?;
            lft::write_tensor(&a.out.join(format!("semantic_{b}_f{t:03}.lft")), &map.values)?;
            if let (Some(rgb), true) = (rgb, b == model.sbd.rgb_source()) {
                lft::write_tensor(&a.out.join(format!("rgb_f{t:03}.lft")), &rgb)?;
            }
        }
        lft::write_tensor(&a.out.join(format!("depth_f{t:03}.lft")), &model.encoder.depth_head(tok)?)?;
        let cam = model.encoder.camera_head(&tok.camera_token)?;
        fsutil::write_text(&a.out.join(format!("camera_f{t:03}.txt")), &cam.to_text())?;
    }
    log::info!("wrote {} frames to {}", tokens.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn query(a: QueryArgs) -> Result<ExitCode> {
    let (model, cfg) = load_model(&a.model.checkpoint)?;
    let scene = find_scene(&a.model.bundle, &a.scene)?;
    let codec = model.codec(scene.name())?;
    let mut tq = match (&a.query, &a.embedding) {
        (Some(name), _) => {
            let q = scene
                .query(name)
                .ok_or_else(|| Error::Contract(format!("scene {} has no query {name}", scene.name())))?;
            codec.compress(q)?
        }
        (None, Some(path)) => {
            let branch = Branch::parse(a.branch.as_deref().unwrap_or_default())?;
            let name = path.file_stem().map_or("query".into(), |s| s.to_string_lossy().to_string());
            embedding_query(codec, &name, branch, lft::read_tensor(path)?.into_data())?
        }
        (None, None) => return Err(Error::Config("query needs --query or --embedding".into())),
    };
    tq.tau = a.tau.unwrap_or(cfg.eval.tau);
    let result = query_scene(&model, &scene, &tq, a.oracle_geometry, a.tau_t.unwrap_or(cfg.eval.tau_t))?;
    result.write(&a.out, &tq.name)?;
    let points: usize = result.clouds.iter().map(PointCloud::len).sum();
    log::info!(
        "query {}: segment {:?}, {points} points written to {}",
        tq.name,
        result.temporal_segment,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let scenes = synth::read_bundle(&a.bundle)?;
    let sel = EvalSelection {
        branch: Branch::parse(&a.branch)?,
        paraphrases: a.paraphrases,
        held_out_only: !a.all_frames,
    };
    let report = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let (model, cfg) = load_model(ck)?;
            evaluate(&model, &scenes, sel, &cfg.eval)?
        }
        (None, Some(dir)) => Report::from_cases(&prediction_cases(dir, &scenes, sel, a.patch)?)?,
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --predictions".into())),
    };
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        fsutil::write_text(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn export_ply(a: ExportArgs) -> Result<ExitCode> {
    let (model, _) = load_model(&a.model.checkpoint)?;
    let scene = find_scene(&a.model.bundle, &a.scene)?;
    let branch = Branch::parse(&a.branch)?;
    let images: Vec<Tensor> = scene.frames.iter().map(|f| f.image.clone()).collect();
    let tokens = model.encoder.encode_video(&images)?;
    fsutil::create_dir(&a.out)?;
    let g = model.sbd.grid();
    for (t, tok) in tokens.iter().enumerate() {
        let (map, rgb) = model.sbd.decode(tok, branch)?;
        let (depth, cam) = if a.oracle_geometry {
            (scene.frames[t].depth.clone(), scene.frames[t].camera.clone())
        } else {
            (model.encoder.depth_head(tok)?, model.encoder.camera_head(&tok.camera_token)?)
        };
        let colors = rgb.unwrap_or_else(|| images[t].clone());
        let cloud = lift_frame(&vec![1; g * g], (g, g), &depth, &cam, Some(&colors), Some(&map))?;
        cloud.write_ply(&a.out.join(format!("cloud_f{t}.ply")))?;
    }
    log::info!("wrote {} clouds to {}", tokens.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
