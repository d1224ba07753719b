//! Pipeline commands behind the CLI subcommands. Each one is a pure function
//! of its config and input files, so runs are reproducible byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use foresight::captioner::{
    build_captioner, build_input_text, train_captioner, CaptionPair, CaptionerModel,
    Seq2SeqConfig, TokenSequence, Vocabulary, EOS,
};
use foresight::checkpoint::{
    load_captioner, load_predictor, save_captioner, save_predictor, CheckpointError,
};
use foresight::datagen::generate_dataset;
use foresight::dataset::{
    read_manifest, read_videos, write_manifest, write_videos, DataError, DatasetManifest,
    VideoRecord,
};
use foresight::metrics::{caption_scores, classification_report, tokenize_caption, MetricError};
use foresight::optim::make_optimizer;
use foresight::predictor::{
    build_predictor, make_windows, top_k, train_predictor, unknown_gate, FeatureDims, GatedLabel,
    TrainingWindow,
};

use crate::config::{worker_threads, ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl CliError {
    /// 2 for config errors, 3 for data errors, 4 for checkpoint errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }

    fn data(err: impl std::fmt::Display) -> Self {
        CliError::Data(err.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::data(e)
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::data(e)
    }
}

/// Map a pure function over items with at most `worker_threads()` threads,
/// preserving input order.
fn parallel_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>, CliError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = worker_threads()?.min(items.len().max(1));
    if workers <= 1 {
        return Ok(items.iter().map(&f).collect());
    }
    let chunk_size = items.len().div_ceil(workers);
    let mut out: Vec<Vec<R>> = Vec::new();
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk_size)
            .map(|chunk| scope.spawn(|| chunk.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        for h in handles {
            out.push(h.join().expect("worker thread panicked"));
        }
    });
    Ok(out.into_iter().flatten().collect())
}

#[derive(Debug, Serialize)]
pub struct GenSummary {
    pub dataset: PathBuf,
    pub manifest: PathBuf,
    pub n_videos: usize,
    pub n_activities: usize,
    pub seed: u64,
}

/// Generate a synthetic dataset and its manifest.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenSummary, CliError> {
    cfg.validate()?;
    let grammar = cfg.resolve_grammar()?;
    let out = cfg
        .out
        .clone()
        .or_else(|| cfg.dataset.clone())
        .ok_or(ConfigError::MissingKey("dataset"))?;
    let videos = generate_dataset(
        &grammar,
        cfg.n_videos,
        (cfg.min_len, cfg.max_len),
        cfg.feature_dim,
        cfg.noise_sigma,
        cfg.seed,
    )
    .map_err(CliError::data)?;
    let n_activities = videos.iter().map(|v| v.activities.len()).sum();
    write_videos(&out, &videos)?;
    let manifest = DatasetManifest {
        grammar: grammar.name.clone(),
        seed: cfg.seed,
        n_videos: videos.len(),
        n_activities,
        feature_dim: cfg.feature_dim,
        classes: grammar.classes.clone(),
        objects: grammar.objects.clone(),
    };
    let manifest_path = DatasetManifest::path_for(&out);
    write_manifest(&manifest_path, &manifest)?;
    Ok(GenSummary {
        dataset: out,
        manifest: manifest_path,
        n_videos: videos.len(),
        n_activities,
        seed: cfg.seed,
    })
}

fn load_dataset(cfg: &RunConfig) -> Result<(Vec<VideoRecord>, DatasetManifest), CliError> {
    let path = RunConfig::require(&cfg.dataset, "dataset")?;
    let videos = read_videos(&path)?;
    if videos.is_empty() {
        return Err(CliError::Data(format!(
            "dataset {} holds no videos",
            path.display()
        )));
    }
    let manifest = read_manifest(&DatasetManifest::path_for(&path))?;
    Ok((videos, manifest))
}

fn feature_dims(videos: &[VideoRecord]) -> Result<FeatureDims, CliError> {
    let first = videos
        .iter()
        .flat_map(|v| v.activities.first())
        .next()
        .ok_or_else(|| CliError::Data("dataset has no activities".into()))?;
    Ok(FeatureDims {
        activity: first.activity_feature.len(),
        scene: first.scene_feature.len(),
    })
}

fn resolve_classes(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<usize, CliError> {
    let from_data = manifest.classes.len();
    if cfg.num_classes != 0 && cfg.num_classes != from_data {
        return Err(CliError::Data(format!(
            "config says {} classes but the dataset has {}",
            cfg.num_classes, from_data
        )));
    }
    Ok(from_data)
}

fn write_loss_log(path: &Path, curve: &[f64]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    for (epoch, loss) in curve.iter().enumerate() {
        let line = serde_json::json!({ "epoch": epoch + 1, "loss": loss });
        writeln!(out, "{line}").map_err(|e| CliError::Data(e.to_string()))?;
    }
    out.flush().map_err(|e| CliError::Data(e.to_string()))
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs: usize,
    pub examples: usize,
    pub final_loss: f64,
}

fn log_path_for(checkpoint: &Path) -> PathBuf {
    let mut os = checkpoint.as_os_str().to_owned();
    os.push(".train.log");
    PathBuf::from(os)
}

/// Train the label/time prediction network and write its checkpoint plus a
/// per-epoch loss log.
pub fn cmd_train_predictor(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let (videos, manifest) = load_dataset(cfg)?;
    let num_classes = resolve_classes(cfg, &manifest)?;
    let dims = feature_dims(&videos)?;
    let pcfg = cfg.predictor_config(num_classes);
    pcfg.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let windows: Vec<TrainingWindow> =
        videos.iter().flat_map(|v| make_windows(v, &pcfg)).collect();
    if windows.is_empty() {
        return Err(CliError::Data(
            "no training windows: videos are shorter than window + horizon".into(),
        ));
    }
    let mut model = build_predictor(&pcfg, dims, cfg.seed).map_err(CliError::data)?;
    let mut opt =
        make_optimizer(cfg.optimizer, cfg.lr).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let curve = train_predictor(&mut model, &windows, cfg.epochs, cfg.batch, &mut opt, cfg.seed)
        .map_err(CliError::data)?;
    let ckpt = cfg
        .out
        .clone()
        .or_else(|| cfg.checkpoint.clone())
        .ok_or(ConfigError::MissingKey("checkpoint"))?;
    save_predictor(&ckpt, &model)?;
    let log = log_path_for(&ckpt);
    write_loss_log(&log, &curve)?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        log,
        epochs: cfg.epochs,
        examples: windows.len(),
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
    })
}

/// Stored (encoder input, caption) pair, the captioner's file interface.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub input: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<Vec<String>>,
}

fn read_pairs(path: &Path) -> Result<Vec<PairRecord>, CliError> {
    let file =
        File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| {
            CliError::Data(format!("{}:{}: {e}", path.display(), idx + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Caption pairs from gold windows: for each window and each head h, the
/// input is the future activity's label followed by the observed scene
/// objects, and the target is that activity's reference caption.
fn gold_caption_pairs(
    videos: &[VideoRecord],
    manifest: &DatasetManifest,
    window: usize,
    horizon: usize,
) -> Result<Vec<PairRecord>, CliError> {
    let mut out = Vec::new();
    for video in videos {
        let m = video.activities.len();
        if m < window + horizon {
            continue;
        }
        for i in 0..=(m - window - horizon) {
            let last_obs = &video.activities[i + window - 1];
            for h in 0..horizon {
                let future = &video.activities[i + window + h];
                let label = manifest.classes.get(future.label).ok_or_else(|| {
                    CliError::Data(format!(
                        "label {} outside the manifest's class list",
                        future.label
                    ))
                })?;
                let input = build_input_text(label, &last_obs.scene_objects)
                    .map_err(CliError::data)?;
                out.push(PairRecord {
                    id: format!("{}:{}:h{}", video.video_id, i, h),
                    input,
                    caption: Some(future.caption_tokens.clone()),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Data(
            "no caption pairs: videos are shorter than window + horizon".into(),
        ));
    }
    Ok(out)
}

fn pairs_to_training(
    records: &[PairRecord],
    vocab: &Vocabulary,
) -> Result<Vec<CaptionPair>, CliError> {
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let caption_words = rec.caption.as_ref().ok_or_else(|| {
            CliError::Data(format!("pair {} has no caption to train on", rec.id))
        })?;
        let input =
            TokenSequence::encoder_input(vocab.to_indices(&rec.input)).map_err(CliError::data)?;
        let mut indices = vocab.to_indices(caption_words);
        indices.push(EOS);
        let caption = TokenSequence::caption(indices).map_err(CliError::data)?;
        out.push(CaptionPair {
            id: rec.id.clone(),
            input,
            caption,
        });
    }
    Ok(out)
}

/// Train the encoder-decoder captioner on gold (input, caption) pairs from
/// the dataset, or on an explicit pairs file when one is configured.
pub fn cmd_train_captioner(cfg: &RunConfig) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let records = match &cfg.pairs {
        Some(path) => read_pairs(path)?,
        None => {
            let (videos, manifest) = load_dataset(cfg)?;
            gold_caption_pairs(&videos, &manifest, cfg.window, cfg.horizon)?
        }
    };
    let mut docs: Vec<&[String]> = Vec::new();
    for rec in &records {
        docs.push(&rec.input);
        if let Some(c) = &rec.caption {
            docs.push(c);
        }
    }
    let vocab = Vocabulary::build(docs, cfg.vocab_max).map_err(CliError::data)?;
    let pairs = pairs_to_training(&records, &vocab)?;
    let scfg = Seq2SeqConfig {
        layers: cfg.cap_layers,
        hidden: cfg.cap_hidden,
        max_decode_len: cfg.max_decode_len,
    };
    let mut model = build_captioner(&scfg, vocab, cfg.seed).map_err(CliError::data)?;
    let mut opt =
        make_optimizer(cfg.optimizer, cfg.lr).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let curve = train_captioner(&mut model, &pairs, cfg.epochs, cfg.cap_batch, &mut opt, cfg.seed)
        .map_err(CliError::data)?;
    let ckpt = cfg
        .out
        .clone()
        .or_else(|| cfg.cap_checkpoint.clone())
        .ok_or(ConfigError::MissingKey("cap_checkpoint"))?;
    save_captioner(&ckpt, &model)?;
    let log = log_path_for(&ckpt);
    write_loss_log(&log, &curve)?;
    Ok(TrainSummary {
        checkpoint: ckpt,
        log,
        epochs: cfg.epochs,
        examples: pairs.len(),
        final_loss: curve.last().copied().unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredMeta {
    pub window: usize,
    pub horizon: usize,
    pub num_classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaLine {
    meta: PredMeta,
}

/// One prediction record: per-head class distributions, ranked top-k lists,
/// gate decisions, the predicted start time, and optionally one decoded
/// caption per head.
#[derive(Debug, Serialize, Deserialize)]
pub struct PredRecord {
    pub id: String,
    pub label_dists: Vec<Vec<f64>>,
    pub top: Vec<Vec<(usize, f64)>>,
    pub gated: Vec<Option<usize>>,
    pub start_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
}

#[derive(Debug, Serialize)]
pub struct PredictSummary {
    pub predictions: PathBuf,
    pub windows: usize,
    pub captioned: bool,
}

/// Predict future labels (and captions, when a captioner checkpoint is
/// given) for every window of the dataset.
pub fn cmd_predict(cfg: &RunConfig) -> Result<PredictSummary, CliError> {
    cfg.validate()?;
    let ckpt = RunConfig::require(&cfg.checkpoint, "checkpoint")?;
    let model = load_predictor(&ckpt)?;
    let captioner: Option<CaptionerModel> = match &cfg.cap_checkpoint {
        Some(path) => Some(load_captioner(path)?),
        None => None,
    };
    let (videos, manifest) = load_dataset(cfg)?;
    if manifest.classes.len() != model.cfg.num_classes {
        return Err(CliError::Data(format!(
            "checkpoint expects {} classes, dataset manifest has {}",
            model.cfg.num_classes,
            manifest.classes.len()
        )));
    }
    let mut windows = Vec::new();
    let mut scene_objects = Vec::new();
    for video in &videos {
        let ws = make_windows(video, &model.cfg);
        for w in &ws {
            // Scene objects of the last observed activity, for captioning.
            let idx: usize = w.id.rsplit(':').next().unwrap().parse().unwrap();
            scene_objects.push(video.activities[idx + model.cfg.window - 1].scene_objects.clone());
        }
        windows.extend(ws);
    }
    if windows.is_empty() {
        return Err(CliError::Data("dataset yields no windows".into()));
    }

    let inputs: Vec<(TrainingWindow, Vec<String>)> =
        windows.into_iter().zip(scene_objects).collect();
    let records: Vec<Result<PredRecord, String>> = parallel_map(&inputs, |(w, objects)| {
        let out = model.predict_window(w).map_err(|e| e.to_string())?;
        let k = model.cfg.num_classes.min(5);
        let mut top = Vec::with_capacity(out.label_dists.len());
        let mut gated = Vec::with_capacity(out.label_dists.len());
        let mut captions = Vec::new();
        for dist in &out.label_dists {
            top.push(top_k(dist, k).map_err(|e| e.to_string())?);
            gated.push(
                match unknown_gate(dist, model.cfg.unknown_threshold).map_err(|e| e.to_string())? {
                    GatedLabel::Known(c) => Some(c),
                    GatedLabel::Unknown => None,
                },
            );
            if let Some(cap) = &captioner {
                let predicted = top_k(dist, 1).map_err(|e| e.to_string())?[0].0;
                let words = build_input_text(&manifest.classes[predicted], objects)
                    .map_err(|e| e.to_string())?;
                let input = TokenSequence::encoder_input(cap.vocab.to_indices(&words))
                    .map_err(|e| e.to_string())?;
                let decoded = cap
                    .decode_greedy(&input, cap.cfg.max_decode_len)
                    .map_err(|e| e.to_string())?;
                let words: Vec<String> = decoded
                    .indices()
                    .iter()
                    .filter(|&&t| t != EOS)
                    .map(|&t| cap.vocab.token(t).to_string())
                    .collect();
                captions.push(words.join(" "));
            }
        }
        Ok(PredRecord {
            id: w.id.clone(),
            label_dists: out.label_dists,
            top,
            gated,
            start_time: out.start_time,
            captions: captioner.as_ref().map(|_| captions),
        })
    })?;

    let out_path = cfg
        .out
        .clone()
        .or_else(|| cfg.predictions.clone())
        .ok_or(ConfigError::MissingKey("predictions"))?;
    let file = File::create(&out_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_path.display())))?;
    let mut out = BufWriter::new(file);
    let meta = MetaLine {
        meta: PredMeta {
            window: model.cfg.window,
            horizon: model.cfg.horizon,
            num_classes: model.cfg.num_classes,
        },
    };
    writeln!(out, "{}", serde_json::to_string(&meta).unwrap())
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut n = 0usize;
    for rec in records {
        let rec = rec.map_err(CliError::Data)?;
        writeln!(out, "{}", serde_json::to_string(&rec).unwrap())
            .map_err(|e| CliError::Data(e.to_string()))?;
        n += 1;
    }
    out.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(PredictSummary {
        predictions: out_path,
        windows: n,
        captioned: captioner.is_some(),
    })
}

#[derive(Debug, Serialize)]
pub struct CaptionSummary {
    pub out: PathBuf,
    pub captions: usize,
}

/// Decode captions for an (id, input) pairs file, one `id<TAB>caption` line
/// per example.
pub fn cmd_caption(cfg: &RunConfig) -> Result<CaptionSummary, CliError> {
    cfg.validate()?;
    let ckpt = RunConfig::require(&cfg.cap_checkpoint, "cap_checkpoint")?;
    let model = load_captioner(&ckpt)?;
    let pairs_path = RunConfig::require(&cfg.pairs, "pairs")?;
    let records = read_pairs(&pairs_path)?;
    if records.is_empty() {
        return Err(CliError::Data("pairs file holds no records".into()));
    }
    let decoded: Vec<Result<(String, String), String>> = parallel_map(&records, |rec| {
        let input = TokenSequence::encoder_input(model.vocab.to_indices(&rec.input))
            .map_err(|e| e.to_string())?;
        let out = model
            .decode_greedy(&input, model.cfg.max_decode_len)
            .map_err(|e| e.to_string())?;
        let words: Vec<String> = out
            .indices()
            .iter()
            .filter(|&&t| t != EOS)
            .map(|&t| model.vocab.token(t).to_string())
            .collect();
        Ok((rec.id.clone(), words.join(" ")))
    })?;
    let out_path = cfg
        .out
        .clone()
        .ok_or(ConfigError::MissingKey("out"))?;
    let file = File::create(&out_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", out_path.display())))?;
    let mut out = BufWriter::new(file);
    let mut n = 0usize;
    for item in decoded {
        let (id, caption) = item.map_err(CliError::Data)?;
        writeln!(out, "{id}\t{caption}").map_err(|e| CliError::Data(e.to_string()))?;
        n += 1;
    }
    out.flush().map_err(|e| CliError::Data(e.to_string()))?;
    Ok(CaptionSummary {
        out: out_path,
        captions: n,
    })
}

/// Evaluation report with the fixed field names. METEOR and SPICE need
/// external linguistic resources and are deliberately reported as absent.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub pr: f64,
    pub rc: f64,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
    pub per_head_top1: Vec<f64>,
    pub bleu4: Option<f64>,
    pub bleu4_sent: Option<f64>,
    pub rouge_l: Option<f64>,
    pub cider: Option<f64>,
    pub caption_pairs: usize,
    pub meteor: Option<f64>,
    pub spice: Option<f64>,
}

fn read_predictions(path: &Path) -> Result<(PredMeta, Vec<PredRecord>), CliError> {
    let file =
        File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| CliError::Data("empty predictions file".into()))?
        .map_err(|e| CliError::Data(e.to_string()))?;
    let meta: MetaLine = serde_json::from_str(&first)
        .map_err(|e| CliError::Data(format!("predictions meta line: {e}")))?;
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| CliError::Data(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), idx + 2)))?;
        records.push(rec);
    }
    Ok((meta.meta, records))
}

/// Score predictions against the gold windows reconstructed from the
/// dataset: classification metrics over every (window, head) pair and
/// caption metrics when the predictions carry captions.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport, CliError> {
    cfg.validate()?;
    let pred_path = RunConfig::require(&cfg.predictions, "predictions")?;
    let (meta, records) = read_predictions(&pred_path)?;
    let (videos, _manifest) = load_dataset(cfg)?;
    let pcfg = foresight::predictor::PredictorConfig {
        num_classes: meta.num_classes,
        window: meta.window,
        horizon: meta.horizon,
        hidden: 1,
        dropout: 0.0,
        ..Default::default()
    };
    let mut references = std::collections::HashMap::new();
    let mut ref_captions = std::collections::HashMap::new();
    for video in &videos {
        for w in make_windows(video, &pcfg) {
            let idx: usize = w.id.rsplit(':').next().unwrap().parse().unwrap();
            let caps: Vec<Vec<String>> = (0..meta.horizon)
                .map(|h| video.activities[idx + meta.window + h].caption_tokens.clone())
                .collect();
            ref_captions.insert(w.id.clone(), caps);
            references.insert(w.id.clone(), w);
        }
    }

    let missing: Vec<&str> = records
        .iter()
        .filter(|r| !references.contains_key(&r.id))
        .map(|r| r.id.as_str())
        .collect();
    if missing.len() == records.len() {
        return Err(CliError::Data(
            "no prediction id matches the dataset's windows".into(),
        ));
    }
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "{} prediction ids have no reference window: {}",
            missing.len(),
            missing.join(", ")
        )));
    }

    let mut dists: Vec<Vec<f64>> = Vec::new();
    let mut golds: Vec<usize> = Vec::new();
    let mut per_head: Vec<(Vec<Vec<f64>>, Vec<usize>)> =
        vec![(Vec::new(), Vec::new()); meta.horizon];
    let mut cands: Vec<Vec<String>> = Vec::new();
    let mut refs: Vec<Vec<Vec<String>>> = Vec::new();
    for rec in &records {
        let gold = &references[&rec.id];
        if rec.label_dists.len() != meta.horizon {
            return Err(CliError::Data(format!(
                "prediction {} has {} heads, expected {}",
                rec.id,
                rec.label_dists.len(),
                meta.horizon
            )));
        }
        for (h, dist) in rec.label_dists.iter().enumerate() {
            dists.push(dist.clone());
            golds.push(gold.target_labels[h]);
            per_head[h].0.push(dist.clone());
            per_head[h].1.push(gold.target_labels[h]);
        }
        if let Some(captions) = &rec.captions {
            for (h, caption) in captions.iter().enumerate() {
                cands.push(tokenize_caption(caption));
                refs.push(vec![ref_captions[&rec.id][h].clone()]);
            }
        }
    }

    let report = classification_report(&dists, &golds, &[1, 3, 5])?;
    let mut per_head_top1 = Vec::with_capacity(meta.horizon);
    for (p, g) in &per_head {
        per_head_top1.push(classification_report(p, g, &[1])?.top_accuracy(1).unwrap());
    }
    let caption = if cands.is_empty() {
        None
    } else {
        Some(caption_scores(&cands, &refs)?)
    };

    let eval = EvalReport {
        examples: records.len(),
        pr: report.macro_precision,
        rc: report.macro_recall,
        top1: report.top_accuracy(1).unwrap(),
        top3: report.top_accuracy(3).unwrap(),
        top5: report.top_accuracy(5).unwrap(),
        per_head_top1,
        bleu4: caption.as_ref().map(|c| c.bleu4),
        bleu4_sent: caption.as_ref().map(|c| c.bleu4_sent),
        rouge_l: caption.as_ref().map(|c| c.rouge_l),
        cider: caption.as_ref().map(|c| c.cider),
        caption_pairs: caption.as_ref().map(|c| c.pairs).unwrap_or(0),
        meteor: None,
        spice: None,
    };
    if let Some(report_path) = cfg.out.clone().or_else(|| cfg.report.clone()) {
        let text = serde_json::to_string_pretty(&eval).unwrap();
        std::fs::write(&report_path, text + "\n")
            .map_err(|e| CliError::Data(format!("{}: {e}", report_path.display())))?;
    }
    Ok(eval)
}

/// Reconstruct gold-window prediction records, used by tests to check the
/// self-evaluation fixed point.
pub fn gold_predictions(
    videos: &[VideoRecord],
    num_classes: usize,
    window: usize,
    horizon: usize,
) -> (PredMeta, Vec<PredRecord>) {
    let pcfg = foresight::predictor::PredictorConfig {
        num_classes,
        window,
        horizon,
        hidden: 1,
        dropout: 0.0,
        ..Default::default()
    };
    let mut records = Vec::new();
    for video in videos {
        for w in make_windows(video, &pcfg) {
            let idx: usize = w.id.rsplit(':').next().unwrap().parse().unwrap();
            let mut dists = Vec::new();
            let mut top = Vec::new();
            let mut gated = Vec::new();
            let mut captions = Vec::new();
            for h in 0..horizon {
                let gold = w.target_labels[h];
                let mut dist = vec![0.0; num_classes];
                dist[gold] = 1.0;
                top.push(vec![(gold, 1.0)]);
                gated.push(Some(gold));
                dists.push(dist);
                captions.push(
                    video.activities[idx + window + h]
                        .caption_tokens
                        .join(" "),
                );
            }
            records.push(PredRecord {
                id: w.id,
                label_dists: dists,
                top,
                gated,
                start_time: Some(w.inter_time),
                captions: Some(captions),
            });
        }
    }
    (
        PredMeta {
            window,
            horizon,
            num_classes,
        },
        records,
    )
}

/// Write a predictions file in the format `cmd_predict` produces.
pub fn write_predictions(
    path: &Path,
    meta: &PredMeta,
    records: &[PredRecord],
) -> Result<(), CliError> {
    let file =
        File::create(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = BufWriter::new(file);
    let meta_line = serde_json::json!({ "meta": meta });
    writeln!(out, "{meta_line}").map_err(|e| CliError::Data(e.to_string()))?;
    for rec in records {
        writeln!(out, "{}", serde_json::to_string(rec).unwrap())
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    out.flush().map_err(|e| CliError::Data(e.to_string()))
}
