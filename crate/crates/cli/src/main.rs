use std::collections::{BTreeMap, HashMap, HashSet};
use std::error::Error;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use goldmark_core::cohort::{define_tasks, make_splits, SplitConfig, DEFAULT_MIN_POSITIVES};
use goldmark_core::embed::{ingest_embeddings, EncoderSpec};
use goldmark_core::eval::{evaluate, read_predictions, write_predictions, Context, PredictionRecord};
use goldmark_core::formats::{
    read_artifact, read_labels_csv, read_manifest_csv, write_artifact, write_splits_csv, SlideRecord, TileManifest,
};
use goldmark_core::gma::{infer, train, write_training_log, AttentionExport, GmaModel, LabeledBag, TrainingConfig};
use goldmark_core::pipeline::{
    data_dir_override, discover_slides, embed_slide, export_attention_overlay, generate_synthetic_cohort, run_pipeline,
    tile_one, write_tasks_csv, EncoderConfig, Layout, RunConfig, SynthOptions, TileOutcome,
};
use goldmark_core::qc::QcReport;
use goldmark_core::tiler::TilingConfig;

type Result<T = ()> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "goldmark", version, about = "Slide-level biomarker pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Detect tissue and write tile manifests and overlays.
    Tile {
        #[arg(long)]
        slides: PathBuf,
        /// Run config; only its `[tiling]` table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed tiled slides with the deterministic stub encoder.
    Embed {
        #[arg(long)]
        slides: PathBuf,
        /// Run directory holding `tiles/`; embeddings are written under it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "stub-v1")]
        encoder: String,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Wrap a raw little-endian f32 tensor (rows × dim) as an embedding artifact.
    Ingest {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit embedding artifacts against tile manifests.
    Qc {
        /// Run directory with `tiles/` and `embeddings/<encoder>/`.
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        encoders: Vec<String>,
        /// Combined report; each encoder's report is also written to `qc/<encoder>.qc.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Count patients per task and apply the inclusion threshold.
    Tasks {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        slides: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_POSITIVES)]
        min_positives: usize,
        /// Restrict to slides passing these QC reports.
        #[arg(long)]
        qc: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Make the five stratified patient-level splits for one task.
    Split {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        slides: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_MIN_POSITIVES)]
        min_positives: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attention head on every split.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long)]
        encoder: String,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        #[arg(long, default_value_t = 120)]
        epochs: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for weights and the training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply frozen weights to embedding artifacts.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        embeddings: Vec<PathBuf>,
        #[arg(long, default_value = "cv")]
        context: String,
        #[arg(long)]
        attention: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics, calibration, ranks and plot data from predictions.
    Eval {
        /// `ENCODER=PATH`, repeatable.
        #[arg(long, required = true)]
        predictions: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shade tiles at or above an attention percentile on the slide thumbnail.
    Overlay {
        /// The slide's `.res.json` sidecar.
        #[arg(long)]
        slide: PathBuf,
        #[arg(long)]
        tiles: PathBuf,
        #[arg(long)]
        attention: PathBuf,
        #[arg(long, default_value_t = 90.0)]
        percentile: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from a config file; finished stages are skipped.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve a run directory read-only over HTTP.
    Serve {
        /// Defaults to `$GOLDMARK_DATA_DIR/run`.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Write a small synthetic cohort with a ready-to-run config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        slides: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn tiled_slides(slides: &Path, layout: &Layout) -> Result<Vec<(SlideRecord, TileManifest)>> {
    let mut out = Vec::new();
    for (slide, _) in discover_slides(slides)? {
        let p = layout.tile_manifest(&slide.slide_id);
        if p.exists() {
            let m = read_manifest_csv(&p)?;
            out.push((slide, m));
        }
    }
    Ok(out)
}

fn tiling_config(config: Option<&Path>) -> Result<TilingConfig> {
    Ok(match config {
        Some(p) => RunConfig::from_toml(&std::fs::read_to_string(p)?)?.tiling,
        None => TilingConfig::default(),
    })
}

fn cmd_tile(slides: &Path, config: Option<&Path>, out: &Path) -> Result {
    let cfg = tiling_config(config)?;
    let layout = Layout::new(out);
    for (slide, _) in discover_slides(slides)? {
        match tile_one(&slide, &cfg, &layout)?.0 {
            TileOutcome::Tiled(m) => println!("{}\t{} tiles\t{} px", slide.slide_id, m.len(), m.tile_px),
            TileOutcome::Rejected(reason) => println!("{}\trejected\t{reason}", slide.slide_id),
        }
    }
    Ok(())
}

fn cmd_embed(slides: &Path, out: &Path, encoder: &str, dim: usize, seed: u64) -> Result {
    let layout = Layout::new(out);
    let enc = EncoderConfig {
        id: encoder.to_string(),
        version: "1".into(),
        dim,
        kind: goldmark_core::embed::EncoderKind::Stub,
        source: None,
    };
    for (slide, manifest) in tiled_slides(slides, &layout)? {
        if let Some(a) = embed_slide(&slide, &manifest, &enc, seed)? {
            let path = layout.embedding(encoder, &slide.slide_id);
            let digest = write_artifact(&a, &path)?;
            println!("{}\t{}\t{digest}", slide.slide_id, path.display());
        }
    }
    Ok(())
}

fn cmd_ingest(raw: &Path, tiles: &Path, encoder: &str, dim: usize, out: &Path) -> Result {
    let manifest = read_manifest_csv(tiles)?;
    let bytes = std::fs::metadata(raw)?.len() as usize;
    if dim == 0 || !bytes.is_multiple_of(4 * dim) {
        return Err(format!("{bytes} bytes is not a whole number of {dim}-dim f32 rows").into());
    }
    let artifact = ingest_embeddings(raw, &manifest, &EncoderSpec::ingested(encoder, dim), bytes / (4 * dim), dim)?;
    let digest = write_artifact(&artifact, out)?;
    println!("{}\t{} rows\t{digest}", out.display(), artifact.n_tiles());
    Ok(())
}

fn cmd_qc(cohort: &Path, encoders: &[String], report: Option<&Path>) -> Result {
    let layout = Layout::new(cohort);
    let tiles_dir = cohort.join("tiles");
    let mut tiled = Vec::new();
    let entries = std::fs::read_dir(&tiles_dir).map_err(|e| format!("{}: {e}", tiles_dir.display()))?;
    for entry in entries {
        let p = entry?.path();
        if p.to_string_lossy().ends_with(".tiles.csv") {
            let m = read_manifest_csv(&p)?;
            tiled.push(m);
        }
    }
    tiled.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for enc in encoders {
        let targets: Vec<_> = tiled
            .iter()
            .map(|m| goldmark_core::qc::QcTarget {
                slide_id: m.slide_id.clone(),
                encoder_id: enc.clone(),
                manifest: Some(m.clone()),
                emb_path: layout.embedding(enc, &m.slide_id),
            })
            .collect();
        let r = goldmark_core::qc::run_qc(&targets, &Default::default(), true)?;
        println!("{enc}\t{}", r.summary());
        r.write_csv(&layout.qc_report(enc))?;
        rows.extend(r.rows);
        missing.extend(r.missing);
    }
    for (slide, enc) in &missing {
        eprintln!("missing artifact: {slide} ({enc})");
    }
    if let Some(report) = report {
        QcReport::new(rows, missing).write_csv(report)?;
    }
    Ok(())
}

fn passing_from(reports: &[PathBuf]) -> Result<Option<HashSet<String>>> {
    if reports.is_empty() {
        return Ok(None);
    }
    let mut all = Vec::new();
    for p in reports {
        all.extend(QcReport::read_csv(p)?.rows);
    }
    let mut by_slide: BTreeMap<&str, bool> = BTreeMap::new();
    for r in &all {
        let e = by_slide.entry(&r.slide_id).or_insert(true);
        *e &= r.status.is_pass();
    }
    Ok(Some(by_slide.into_iter().filter(|(_, ok)| *ok).map(|(s, _)| s.to_string()).collect()))
}

fn slide_records(dir: &Path) -> Result<Vec<SlideRecord>> {
    Ok(discover_slides(dir)?.into_iter().map(|(s, _)| s).collect())
}

fn cmd_tasks(labels: &Path, slides: &Path, min_positives: usize, qc: &[PathBuf], out: &Path) -> Result {
    let labels = read_labels_csv(labels)?;
    let passing = passing_from(qc)?;
    let tasks = define_tasks(&labels, &slide_records(slides)?, passing.as_ref(), min_positives)?;
    for t in &tasks {
        println!(
            "{}\t{}\t{}/{}/{}\t{}",
            t.task_id,
            t.cohort_id,
            t.n_total,
            t.n_positive,
            t.n_negative,
            if t.included { "included" } else { "excluded" }
        );
    }
    write_tasks_csv(&tasks, out)?;
    Ok(())
}

fn cmd_split(labels: &Path, slides: &Path, task: &str, seed: u64, min_positives: usize, out: &Path) -> Result {
    let labels = read_labels_csv(labels)?;
    let defs = define_tasks(&labels, &slide_records(slides)?, None, min_positives)?;
    let def = defs.iter().find(|t| t.task_id == task).ok_or_else(|| format!("unknown task {task}"))?;
    let task_labels = goldmark_core::formats::LabelManifest::new(labels.for_task(task).cloned().collect())?;
    let splits = make_splits(def, &task_labels, seed, &SplitConfig::default())?;
    write_splits_csv(&splits, out)?;
    println!("{}\t{}", splits.task_id, splits.manifest_version);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cohort: &Path,
    task: &str,
    encoder: &str,
    labels: &Path,
    splits: &Path,
    epochs: u32,
    seed: u64,
    out: &Path,
) -> Result {
    let layout = Layout::new(cohort);
    let qc_path = layout.qc_report(encoder);
    if !qc_path.exists() {
        return Err(format!("{} not found; run `goldmark qc` first", qc_path.display()).into());
    }
    let qc = QcReport::read_csv(&qc_path)?;
    let labels = read_labels_csv(labels)?;
    let splits = goldmark_core::formats::read_splits_csv(splits)?;
    let rows: Vec<_> = labels.for_task(task).collect();
    let mut artifacts = HashMap::new();
    for r in &rows {
        let p = layout.embedding(encoder, &r.slide_id);
        if p.exists() {
            artifacts.insert(r.slide_id.as_str(), read_artifact(&p, true)?);
        }
    }
    let bags: Vec<LabeledBag<'_>> = rows
        .iter()
        .map(|r| LabeledBag {
            slide_id: &r.slide_id,
            patient_id: &r.patient_id,
            label: r.label,
            artifact: artifacts.get(r.slide_id.as_str()),
            qc_pass: qc.get(&r.slide_id, encoder).is_some_and(|q| q.status.is_pass()),
        })
        .collect();
    let cfg = TrainingConfig { epochs, seed, ..TrainingConfig::default() };
    let run = train(task, encoder, &splits, &bags, &cfg)?;
    for m in run.models() {
        let p = out.join(format!("split{}.{}.gmw", m.split_index, m.checkpoint.kind));
        m.save(&p)?;
        println!("{}\tepoch {}\tval AUROC {:.4}", p.display(), m.checkpoint.epoch, m.checkpoint.val_auroc);
    }
    write_training_log(&run.log().cloned().collect::<Vec<_>>(), &out.join("train.csv"))?;
    Ok(())
}

fn cmd_infer(
    weights: &Path,
    labels: &Path,
    embeddings: &[PathBuf],
    context: &str,
    attention: Option<&Path>,
    out: &Path,
) -> Result {
    let model = GmaModel::load(weights)?;
    let context: Context = context.parse()?;
    let labels = read_labels_csv(labels)?;
    let by_slide: HashMap<&str, (&str, u8)> =
        labels.for_task(&model.task_id).map(|r| (r.slide_id.as_str(), (r.patient_id.as_str(), r.label))).collect();
    let artifacts = embeddings.iter().map(|p| read_artifact(p, true)).collect::<std::result::Result<Vec<_>, _>>()?;
    let inputs: Vec<_> = artifacts.iter().map(|a| (a.header.slide_id.as_str(), a)).collect();
    let result = infer(&model, &inputs)?;
    let mut preds = Vec::new();
    for p in &result.predictions {
        let (patient, label) = by_slide
            .get(p.slide_id.as_str())
            .ok_or_else(|| format!("no {} label for {}", model.task_id, p.slide_id))?;
        preds.push(PredictionRecord {
            slide_id: p.slide_id.clone(),
            patient_id: patient.to_string(),
            task_id: model.task_id.clone(),
            split_index: model.split_index,
            checkpoint_kind: model.checkpoint.kind,
            context,
            probability: p.probability,
            label: *label,
        });
    }
    write_predictions(&preds, out)?;
    if let Some(a) = attention {
        result.attention.write_csv(a)?;
    }
    println!("{} predictions", preds.len());
    Ok(())
}

fn cmd_eval(predictions: &[String], out: &Path) -> Result {
    let mut tables: BTreeMap<String, Vec<PredictionRecord>> = BTreeMap::new();
    for spec in predictions {
        let (enc, path) = spec.split_once('=').ok_or_else(|| format!("expected ENCODER=PATH, got `{spec}`"))?;
        tables.entry(enc.to_string()).or_default().extend(read_predictions(Path::new(path))?);
    }
    let report = evaluate(&tables.into_iter().collect::<Vec<_>>())?;
    for c in &report.cells {
        let mean = c.mean_auroc().map_or("n/a".to_string(), |m| format!("{m:.4}"));
        println!("{}\t{}\t{}\t{}\t{mean}", c.task_id, c.encoder_id, c.context, c.checkpoint_kind);
    }
    report.write_to(out)?;
    Ok(())
}

fn cmd_overlay(slide: &Path, tiles: &Path, attention: &Path, percentile: f64, out: &Path) -> Result {
    let slide = SlideRecord::from_sidecar(slide)?;
    let manifest = read_manifest_csv(tiles)?;
    let export = AttentionExport::read_csv(attention)?;
    let rows: Vec<_> = export.for_slide(&slide.slide_id).cloned().collect();
    export_attention_overlay(&slide, &manifest, &rows, percentile, out)?;
    Ok(())
}

fn cmd_run(config: &Path) -> Result {
    let cfg = RunConfig::load(config)?;
    let outcome = run_pipeline(&cfg)?;
    for s in &outcome.stages {
        println!("{:<6}\texecuted {}\tskipped {}", s.stage, s.executed, s.skipped);
    }
    println!("{}\t{}\t{} artifacts", outcome.run_dir.display(), outcome.run_version, outcome.index.artifacts.len());
    Ok(())
}

fn cmd_serve(run: Option<PathBuf>, bind: SocketAddr) -> Result {
    let run = match run {
        Some(r) => r,
        None => data_dir_override().ok_or("--run not given and GOLDMARK_DATA_DIR unset")?.join("run"),
    };
    let catalog = goldmark_serve::Catalog::load(&run)?;
    catalog.index.verify(&run)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(bind).await?;
        eprintln!("serving {} on http://{}", run.display(), listener.local_addr()?);
        goldmark_serve::serve_on(listener, catalog).await
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tile { slides, config, out } => cmd_tile(&slides, config.as_deref(), &out),
        Command::Embed { slides, out, encoder, dim, seed } => cmd_embed(&slides, &out, &encoder, dim, seed),
        Command::Ingest { raw, tiles, encoder, dim, out } => cmd_ingest(&raw, &tiles, &encoder, dim, &out),
        Command::Qc { cohort, encoders, report } => cmd_qc(&cohort, &encoders, report.as_deref()),
        Command::Tasks { labels, slides, min_positives, qc, out } => {
            cmd_tasks(&labels, &slides, min_positives, &qc, &out)
        }
        Command::Split { labels, slides, task, seed, min_positives, out } => {
            cmd_split(&labels, &slides, &task, seed, min_positives, &out)
        }
        Command::Train { cohort, task, encoder, labels, splits, epochs, seed, out } => {
            cmd_train(&cohort, &task, &encoder, &labels, &splits, epochs, seed, &out)
        }
        Command::Infer { weights, labels, embeddings, context, attention, out } => {
            cmd_infer(&weights, &labels, &embeddings, &context, attention.as_deref(), &out)
        }
        Command::Eval { predictions, out } => cmd_eval(&predictions, &out),
        Command::Overlay { slide, tiles, attention, percentile, out } => {
            cmd_overlay(&slide, &tiles, &attention, percentile, &out)
        }
        Command::Run { config } => cmd_run(&config),
        Command::Serve { run, bind } => cmd_serve(run, bind),
        Command::Synth { out, slides, seed } => {
            generate_synthetic_cohort(&out, &SynthOptions { n_slides: slides, seed, ..SynthOptions::default() })
                .map(|p| println!("{}", p.display()))
                .map_err(Into::into)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("goldmark: {e}");
            ExitCode::FAILURE
        }
    }
}
