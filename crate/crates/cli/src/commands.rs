use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, ValueEnum};
use loopcheck::backends::{build_backend_for, BackendError, BackendKind, ChatBackend, ImageAttachment, ReplayBackend, SimulatorBackend};
use loopcheck::eval::{
    attribute_count_stats, evaluate_mme, evaluate_pope, load_records, match_transcripts, mme_pairs, predictions,
    run_records, save_records, sweep_lambda, to_f64, Confusion, EvalError, EvalRecord, Label, Setting,
};
use loopcheck::pipeline::{build_helper, read_transcript_dir, write_transcript_dir, Helper, PipelineError, PipelineTranscript, RunInput};
use loopcheck::score::Threshold;
use loopcheck::simulator::{generate_fixtures, load_scenes, save_scenes, FixtureConfig, SceneGraph, SimulatorError};
use loopcheck::storage::{load_transcript, persist_transcript, Role, StorageError, TranscriptEvent};
use loopcheck::{ConfigError, RunConfig};
use serde_json::{json, Value};
use thiserror::Error;

use crate::CommonArgs;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Backend(BackendError::Config(_)) | CliError::Pipeline(PipelineError::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Args)]
pub struct RunArgs {
    /// The question or instruction for the model.
    #[arg(long)]
    instruction: String,
    /// Image file sent with every model call.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Image id; picks the scene when the simulator holds several.
    #[arg(long)]
    image_id: Option<String>,
    /// Write the run transcript here (JSON lines).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Benchmark records, one JSON object per line.
    #[arg(long)]
    records: PathBuf,
    /// Directory for transcripts and report.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Directory holding `{image_id}.{jpg,png,...}` for the HTTP backend.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    records: PathBuf,
    /// Directory of saved transcripts.
    #[arg(long)]
    transcripts: PathBuf,
    /// Thresholds to try; defaults to 0.0, 0.1, ..., 0.9.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SettingArg {
    Random,
    Popular,
    Adversarial,
    Existence,
    All,
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Number of scenes (images).
    #[arg(long = "scenes", default_value_t = 100)]
    n_scenes: usize,
    #[arg(long, default_value_t = 5)]
    objects_per_scene: usize,
    #[arg(long, default_value_t = 6)]
    questions_per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SettingArg::Random)]
    setting: SettingArg,
    /// Output directory for scenes.json and records-{setting}.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory of saved transcripts.
    #[arg(long)]
    transcripts: PathBuf,
}

#[derive(Clone, Copy)]
pub enum Benchmark {
    Pope,
    Mme,
}

fn resolve(c: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(c.config.as_deref(), &c.overrides())?;
    if let Some(s) = &c.scene_file {
        cfg.lvlm.scene_path = Some(s.clone());
    }
    Ok(cfg)
}

fn helper_backend(cfg: &RunConfig) -> Result<Option<Arc<dyn ChatBackend>>> {
    match &cfg.helper {
        Some(h) => Ok(Some(Arc::from(build_backend_for(h, Role::Helper, None)?))),
        None => Ok(None),
    }
}

fn helper(cfg: &RunConfig, backend: Option<Arc<dyn ChatBackend>>) -> Result<Arc<dyn Helper>> {
    Ok(build_helper(cfg.pipeline.helper_mode, backend, cfg.pipeline.seed)?)
}

fn media_type(path: &Path) -> Option<&'static str> {
    match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
        "jpg" | "jpeg" => Some("image/jpeg"),
        "png" => Some("image/png"),
        "webp" => Some("image/webp"),
        "gif" => Some("image/gif"),
        _ => None,
    }
}

fn read_image(path: &Path) -> Result<ImageAttachment> {
    let media_type = media_type(path).ok_or_else(|| CliError::Usage(format!("{}: unknown image type", path.display())))?;
    let data = std::fs::read(path).map_err(io_err(path))?;
    Ok(ImageAttachment { media_type: media_type.into(), data })
}

fn find_image(dir: &Path, image_id: &str) -> Result<ImageAttachment> {
    for ext in ["jpg", "jpeg", "png", "webp", "gif"] {
        let p = dir.join(format!("{image_id}.{ext}"));
        if p.is_file() {
            return read_image(&p);
        }
    }
    Err(CliError::Failed(format!("no image for `{image_id}` in {}", dir.display())))
}

/// Recorded events from a transcript file or a directory of them.
fn replay_events(path: &Path) -> Result<Vec<(Option<String>, Vec<TranscriptEvent>)>> {
    if path.is_dir() {
        return Ok(read_transcript_dir(path)?.into_iter().map(|t| (t.header.image_id, t.events)).collect());
    }
    let loaded = load_transcript(path)?;
    let t = PipelineTranscript::from_lines(loaded.lines)
        .ok_or_else(|| CliError::Usage(format!("{}: not a transcript", path.display())))?;
    Ok(vec![(t.header.image_id, t.events)])
}

/// Where model answers come from when running a record file.
enum LvlmSource {
    Simulator(HashMap<String, SceneGraph>, loopcheck::HallucinationProfile),
    Http(Arc<dyn ChatBackend>, Option<PathBuf>),
    Replay(HashMap<String, Vec<TranscriptEvent>>),
}

impl LvlmSource {
    fn new(cfg: &RunConfig, images: Option<PathBuf>) -> Result<Self> {
        let lvlm = &cfg.lvlm;
        lvlm.validate()?;
        Ok(match lvlm.kind {
            BackendKind::Simulator => {
                let scenes = load_scenes(lvlm.scene_path.as_deref().expect("validated"))?;
                LvlmSource::Simulator(scenes.into_iter().map(|s| (s.image_id.clone(), s)).collect(), lvlm.profile.clone())
            }
            BackendKind::Http => {
                if images.is_none() {
                    tracing::warn!("no --images directory; questions are sent without images");
                }
                LvlmSource::Http(Arc::from(build_backend_for(lvlm, Role::Lvlm, None)?), images)
            }
            BackendKind::Replay => {
                let mut by_image: HashMap<String, Vec<TranscriptEvent>> = HashMap::new();
                for (id, events) in replay_events(lvlm.transcript_path.as_deref().expect("validated"))? {
                    by_image.entry(id.unwrap_or_default()).or_default().extend(events);
                }
                LvlmSource::Replay(by_image)
            }
        })
    }

    fn for_image(&self, image_id: &str) -> Result<(Arc<dyn ChatBackend>, Option<ImageAttachment>)> {
        match self {
            LvlmSource::Simulator(scenes, profile) => {
                let scene = scenes
                    .get(image_id)
                    .ok_or_else(|| CliError::Usage(format!("no scene for image `{image_id}`")))?;
                profile.validate_for(scene)?;
                Ok((Arc::new(SimulatorBackend::new(scene.clone(), profile.clone())), None))
            }
            LvlmSource::Http(backend, dir) => {
                let image = dir.as_deref().map(|d| find_image(d, image_id)).transpose()?;
                Ok((backend.clone(), image))
            }
            LvlmSource::Replay(by_image) => {
                let events = by_image.get(image_id).map(Vec::as_slice).unwrap_or_default();
                Ok((Arc::new(ReplayBackend::new(events, Role::Lvlm)), None))
            }
        }
    }
}

pub fn run(c: &CommonArgs, a: &RunArgs) -> Result<()> {
    let cfg = resolve(c)?;
    let lvlm: Arc<dyn ChatBackend> = Arc::from(build_backend_for(&cfg.lvlm, Role::Lvlm, a.image_id.as_deref())?);
    let helper = helper(&cfg, helper_backend(&cfg)?)?;
    let pipeline = loopcheck::Pipeline::new(cfg.pipeline.clone(), lvlm, helper)?;
    if cfg.pipeline.preflight {
        pipeline.preflight()?;
    }
    let mut input = RunInput::new(&a.instruction);
    if let Some(id) = &a.image_id {
        input = input.with_image_id(id);
    }
    if let Some(p) = &a.image {
        input = input.with_image(read_image(p)?);
    }
    let (transcript, failure) = match pipeline.run(&input) {
        Ok(t) => (t, None),
        Err(e) => (*e.transcript, Some(e.source)),
    };
    if let Some(out) = &a.out {
        persist_transcript(out, &transcript.to_lines())?;
    }
    if let Some(e) = failure {
        return Err(e.into());
    }
    let result = transcript.result.as_ref().expect("finished run has a result");
    for o in &transcript.objects {
        if let Some(v) = &o.verdict {
            eprintln!("{:<20} {:.3} {:?}", o.name, o.score().value(), v.kind);
        }
    }
    println!("{}", result.revised_response);
    Ok(())
}

fn settings_of(records: &[EvalRecord]) -> Vec<Setting> {
    let mut s: Vec<Setting> = records.iter().map(|r| r.setting).collect();
    s.sort();
    s.dedup();
    s
}

fn ratio_json(r: loopcheck::eval::Rational) -> Value {
    json!(to_f64(r))
}

pub fn eval(c: &CommonArgs, a: &EvalArgs, bench: Benchmark) -> Result<()> {
    let cfg = resolve(c)?;
    let records = load_records(&a.records)?;
    if records.is_empty() {
        return Err(CliError::Usage(format!("{}: no records", a.records.display())));
    }
    let hb = helper_backend(&cfg)?;
    let judge = match (cfg.judge_unparseable, &hb) {
        (true, None) => return Err(CliError::Usage("judge_unparseable needs a `helper` backend".into())),
        (true, Some(b)) => Some(b.clone()),
        (false, _) => None,
    };
    let helper = helper(&cfg, hb)?;
    let source = LvlmSource::new(&cfg, a.images.clone())?;
    let mut source_err = None;
    let runs = run_records(&records, &cfg.pipeline, helper, |id| {
        source.for_image(id).map_err(|e| {
            let msg = e.to_string();
            source_err = Some(e);
            PipelineError::Config(msg)
        })
    });
    let runs = match (runs, source_err) {
        (Ok(r), _) => r,
        (Err(_), Some(e)) => return Err(e),
        (Err(e), None) => return Err(e.into()),
    };

    let mut failed = 0usize;
    let transcripts: Vec<PipelineTranscript> = runs
        .into_iter()
        .zip(&records)
        .map(|(r, rec)| {
            r.unwrap_or_else(|e| {
                failed += 1;
                tracing::warn!("run for ({}, {:?}) failed: {}", rec.image_id, rec.question, e.source);
                *e.transcript
            })
        })
        .collect();
    if let Some(dir) = &a.out_dir {
        write_transcript_dir(&dir.join("transcripts"), &transcripts)?;
    }

    let matched = match_transcripts(&transcripts, &records)?;
    let (vanilla, mitigated) = predictions(&matched, &records, judge.as_deref());
    let mut per_setting = serde_json::Map::new();
    for setting in settings_of(&records) {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].setting == setting).collect();
        let recs: Vec<EvalRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        let pick = |preds: &[Label]| -> Vec<Label> { idx.iter().map(|&i| preds[i]).collect() };
        let entry = match bench {
            Benchmark::Pope => {
                let v = evaluate_pope(&pick(&vanilla), &recs)?;
                let m = evaluate_pope(&pick(&mitigated), &recs)?;
                println!("{setting:<12} vanilla   {v}");
                println!("{setting:<12} mitigated {m}");
                json!({ "vanilla": v, "mitigated": m })
            }
            Benchmark::Mme => {
                let correct = |preds: &[Label]| -> Vec<bool> { pick(preds).iter().zip(&recs).map(|(p, r)| *p == r.label).collect() };
                let v = evaluate_mme(&mme_pairs(&recs, &correct(&vanilla))?)?;
                let m = evaluate_mme(&mme_pairs(&recs, &correct(&mitigated))?)?;
                println!("{setting:<12} vanilla   acc/acc+ {v}");
                println!("{setting:<12} mitigated acc/acc+ {m}");
                let scores = |s: loopcheck::eval::MmeScores| json!({ "acc": ratio_json(s.acc), "acc_plus": ratio_json(s.acc_plus) });
                json!({ "vanilla": scores(v), "mitigated": scores(m) })
            }
        };
        per_setting.insert(setting.to_string(), entry);
    }
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; their answers count as wrong", records.len());
    }
    if let Some(dir) = &a.out_dir {
        let report = json!({
            "benchmark": match bench { Benchmark::Pope => "pope", Benchmark::Mme => "mme" },
            "threshold": cfg.pipeline.lambda_threshold.value(),
            "records": records.len(),
            "failed_runs": failed,
            "settings": per_setting,
        });
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes")).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn sweep(_c: &CommonArgs, a: &SweepArgs) -> Result<()> {
    let records = load_records(&a.records)?;
    let transcripts = read_transcript_dir(&a.transcripts)?;
    let grid = if a.grid.is_empty() {
        Threshold::default_grid()
    } else {
        a.grid
            .iter()
            .map(|&g| Threshold::new(g).map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<Vec<_>>>()?
    };
    for setting in settings_of(&records) {
        let recs: Vec<EvalRecord> = records.iter().filter(|r| r.setting == setting).cloned().collect();
        println!("{setting}");
        for point in sweep_lambda(&transcripts, &grid, &recs)? {
            println!("  λ={:.2}  {}", point.threshold.value(), point.report);
        }
    }
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let settings = match a.setting {
        SettingArg::Random => vec![Setting::Random],
        SettingArg::Popular => vec![Setting::Popular],
        SettingArg::Adversarial => vec![Setting::Adversarial],
        SettingArg::Existence => vec![Setting::Existence],
        SettingArg::All => vec![Setting::Random, Setting::Popular, Setting::Adversarial],
    };
    let cfg = FixtureConfig {
        settings: settings.clone(),
        ..FixtureConfig::standard(a.n_scenes, a.objects_per_scene, a.questions_per_image, a.seed)
    };
    let fx = generate_fixtures(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let scenes = a.out.join("scenes.json");
    save_scenes(&scenes, &fx.scenes).map_err(io_err(&scenes))?;
    for s in settings {
        let recs: Vec<EvalRecord> = fx.records.iter().filter(|r| r.setting == s).cloned().collect();
        let path = a.out.join(format!("records-{s}.jsonl"));
        save_records(&path, &recs).map_err(io_err(&path))?;
        println!("{} ({} records)", path.display(), recs.len());
    }
    println!("{} ({} scenes)", scenes.display(), fx.scenes.len());
    Ok(())
}

pub fn report(c: &CommonArgs, a: &ReportArgs) -> Result<()> {
    let transcripts = read_transcript_dir(&a.transcripts)?;
    let n_objects: usize = transcripts.iter().map(|t| t.objects.len()).sum();
    let flagged = transcripts.iter().flat_map(|t| &t.objects).filter(|o| o.verdict.is_some_and(|v| v.is_hallucinated())).count();
    let unfinished = transcripts.iter().filter(|t| t.result.is_none()).count();
    println!("runs {} (unfinished {unfinished}) | objects {n_objects} | flagged {flagged}", transcripts.len());

    let scene_path = c.scene_file.clone().or_else(|| resolve(c).ok().and_then(|cfg| cfg.lvlm.scene_path));
    let Some(scene_path) = scene_path else {
        return Ok(());
    };
    let scenes: BTreeMap<String, SceneGraph> = load_scenes(&scene_path)?.into_iter().map(|s| (s.image_id.clone(), s)).collect();
    let exists = |image: &str, object: &str| scenes.get(image).map(|s| s.contains(object));
    println!("attributes per object");
    println!("{}", attribute_count_stats(&transcripts, exists)?);

    // Detection of invented objects: "yes" means flagged / absent.
    let mut c = Confusion::default();
    for t in &transcripts {
        let image = t.header.image_id.as_deref().unwrap_or("");
        for o in &t.objects {
            let (Some(present), Some(v)) = (exists(image, &o.name), o.verdict) else {
                continue;
            };
            let label = |b: bool| if b { Label::Yes } else { Label::No };
            c.add(label(v.is_hallucinated()), label(!present));
        }
    }
    if c.total() > 0 {
        println!("hallucination detection  {}", c.report());
    }
    Ok(())
}
