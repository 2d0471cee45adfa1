use std::fs;
use std::path::{Path, PathBuf};

use cellattn::config::Settings;
use cellattn::data::{
    build_training_set, derive_seed, generate_synthetic_dataset, save_png, stratified_kfold, Dataset, Label,
};
use cellattn::error::{Error, Result};
use cellattn::explain::{
    correlation_image, gmean, gradcam, overlay_heatmap, ratio_scores, shape_map, LayerSelector, Map, RatioReport,
};
use cellattn::metrics::{compute_metrics, roc_curve, AggregateReport};
use cellattn::model::Model;
use cellattn::params::ParamStore;
use cellattn::stats::TTestMatrix;
use cellattn::tensor::Tensor;
use cellattn::train::{cross_validate, predict_batched, train_model};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::GlobalArgs;

pub const SNAPSHOT: &str = "config.json";
pub const MANIFEST: &str = "manifest.json";
pub const EXPLAIN_INDEX: &str = "explain.json";

pub fn settings(global: &GlobalArgs, overrides: Vec<(String, String)>) -> Result<Settings> {
    let s = Settings::resolve(global.config.as_deref(), &overrides)?;
    s.validate()?;
    Ok(s)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Creates `out` and writes the resolved settings into it.
fn start_run(s: &Settings, out: &Path) -> Result<()> {
    create_dir(out)?;
    s.save_snapshot(&out.join(SNAPSHOT))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn csv_file(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(MANIFEST)
    } else {
        data.to_path_buf()
    }
}

/// Loads the dataset and aligns image size and fold count with it.
fn load_dataset(s: &mut Settings, data: &Path) -> Result<Dataset> {
    let dataset = Dataset::load(&manifest_path(data))?;
    s.set("image_side", &dataset.manifest.image_side.to_string())?;
    s.folds = dataset.manifest.fold_count();
    Ok(dataset)
}

/// Raw images of `fold`, or every raw image.
fn select(dataset: &Dataset, fold: Option<usize>) -> Result<Vec<usize>> {
    if let Some(f) = fold {
        let k = dataset.manifest.fold_count();
        if f >= k {
            return Err(Error::Usage(format!("fold {f} out of range for {k} folds")));
        }
    }
    Ok(dataset
        .manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.augmented && fold.is_none_or(|f| e.fold == Some(f)))
        .map(|(i, _)| i)
        .collect())
}

fn require_checkpoint(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("checkpoint {} does not exist", path.display())))
    }
}

/// Model for a checkpoint, preferring the encoder settings saved beside it.
fn load_model(s: &mut Settings, checkpoint: &Path) -> Result<(Model, ParamStore)> {
    require_checkpoint(checkpoint)?;
    let snapshot = checkpoint.parent().unwrap_or(Path::new(".")).join(SNAPSHOT);
    if snapshot.is_file() {
        let saved = Settings::load_snapshot(&snapshot)?;
        if saved.encoder.image_side != s.encoder.image_side {
            return Err(Error::Config(format!(
                "checkpoint was trained on {0}x{0} images, dataset has {1}x{1}",
                saved.encoder.image_side, s.encoder.image_side
            )));
        }
        s.encoder = saved.encoder;
    }
    let model = Model::new(s.encoder.clone())?;
    let mut params = model.init_params(0);
    params.load_checkpoint(checkpoint)?;
    Ok((model, params))
}

#[derive(Serialize, Deserialize)]
struct LossTrace {
    epochs: usize,
    loss: Vec<f64>,
}

fn write_predictions(path: &Path, ids: &[String], labels: &[usize], probs: &Tensor) -> Result<()> {
    let fail = |e: csv::Error| Error::Format(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_writer(csv_file(path)?);
    let classes = probs.shape()[1];
    let mut header = vec!["image_id".to_string(), "label".to_string()];
    header.extend(Label::ALL.iter().take(classes).map(|l| format!("p_{l}")));
    w.write_record(&header).map_err(fail)?;
    for (i, (id, &y)) in ids.iter().zip(labels).enumerate() {
        let mut row = vec![id.clone(), Label::ALL[y].to_string()];
        row.extend(probs.data()[i * classes..(i + 1) * classes].iter().map(|p| p.to_string()));
        w.write_record(&row).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// ROC of the metastasizing class; skipped when one class is absent.
fn write_roc(path: &Path, labels: &[usize], probs: &Tensor) -> Result<()> {
    let positive = Label::Metastasizing.index();
    let scores: Vec<f64> = probs.data().chunks(probs.shape()[1]).map(|r| f64::from(r[positive])).collect();
    match roc_curve(&scores, labels, positive) {
        Ok(curve) => curve.write_csv(csv_file(path)?),
        Err(Error::Input(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

pub fn gen(s: &Settings, out: &Path) -> Result<()> {
    start_run(s, out)?;
    let manifest = generate_synthetic_dataset(&s.synthetic, s.seed, out)?;
    let manifest = stratified_kfold(&manifest, s.folds, s.seed)?;
    manifest.save(&out.join(MANIFEST))?;
    println!(
        "generated {} images ({} normal, {} metastasizing) in {} folds under {}",
        manifest.entries.len(),
        manifest.count(Label::Normal),
        manifest.count(Label::Metastasizing),
        manifest.fold_count(),
        out.display()
    );
    Ok(())
}

pub fn train(mut s: Settings, data: &Path, fold: Option<usize>, init: Option<&Path>, out: &Path) -> Result<()> {
    if let Some(p) = init {
        require_checkpoint(p)?;
    }
    let dataset = load_dataset(&mut s, data)?;
    s.validate()?;
    start_run(&s, out)?;
    let (images, labels): (Vec<&Tensor>, Vec<Label>);
    let split;
    match fold {
        Some(f) => {
            select(&dataset, Some(f))?;
            split = build_training_set(&dataset, f, s.train.augment_factor, derive_seed(s.seed, "augment"))?;
            images = split.train.iter().map(|x| &x.image).collect();
            labels = split.train.iter().map(|x| x.entry.label).collect();
        }
        None => {
            let idx = select(&dataset, None)?;
            images = idx.iter().map(|&i| &dataset.images[i]).collect();
            labels = idx.iter().map(|&i| dataset.manifest.entries[i].label).collect();
        }
    }
    let model = Model::new(s.encoder.clone())?;
    let mut start = model.init_params(derive_seed(s.seed, "init"));
    if let Some(p) = init {
        start.load_checkpoint(p)?;
    }
    start.save_checkpoint(&out.join("init.ckpt"))?;
    let outcome = train_model(&model, start, &s.train, &images, &labels)?;
    outcome.params.save_checkpoint(&out.join("model.ckpt"))?;
    write_json(&out.join("loss_trace.json"), &LossTrace { epochs: s.train.epochs, loss: outcome.loss_trace.clone() })?;
    println!(
        "trained {} {} on {} images for {} epochs ({} steps), final loss {:.6}",
        s.encoder.family,
        s.encoder.backbone.kind,
        images.len(),
        s.train.epochs,
        outcome.steps,
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

pub fn cv(mut s: Settings, data: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(&mut s, data)?;
    s.validate()?;
    start_run(&s, out)?;
    let model = Model::new(s.encoder.clone())?;
    let result = cross_validate(&model, &s.train, &dataset)?;
    for f in &result.folds {
        let dir = out.join(format!("fold_{}", f.fold));
        create_dir(&dir)?;
        write_json(&dir.join("metrics.json"), &f.metrics)?;
        write_json(&dir.join("loss_trace.json"), &LossTrace { epochs: s.train.epochs, loss: f.loss_trace.clone() })?;
        write_json(&dir.join("audit.json"), &f.audit)?;
        write_predictions(&dir.join("predictions.csv"), &f.test_ids, &f.test_labels, &f.test_probs)?;
        write_roc(&dir.join("roc.csv"), &f.test_labels, &f.test_probs)?;
        f.params.save_checkpoint(&dir.join("model.ckpt"))?;
        s.save_snapshot(&dir.join(SNAPSHOT))?;
    }
    result.report.save_json(&out.join("aggregate.json"))?;
    result.report.write_csv(csv_file(&out.join("metrics.csv"))?)?;
    let table = format!(
        "{} / {} / {} epochs ({:?} regime), {} folds\n{}",
        s.encoder.family,
        s.encoder.backbone.kind,
        s.train.epochs,
        s.train.regime(),
        result.folds.len(),
        result.report.summary_table()
    );
    fs::write(out.join("summary.txt"), &table).map_err(|e| Error::io(out.join("summary.txt"), e))?;
    print!("{table}");
    Ok(())
}

pub fn eval(mut s: Settings, data: &Path, checkpoint: &Path, fold: Option<usize>, out: &Path) -> Result<()> {
    let dataset = load_dataset(&mut s, data)?;
    let (model, params) = load_model(&mut s, checkpoint)?;
    start_run(&s, out)?;
    let idx = select(&dataset, fold)?;
    let images: Vec<&Tensor> = idx.iter().map(|&i| &dataset.images[i]).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.manifest.entries[i].label.index()).collect();
    let ids: Vec<String> = idx.iter().map(|&i| dataset.manifest.entries[i].image_id.clone()).collect();
    let probs = predict_batched(&model, &params, &images, 16)?;
    let metrics = compute_metrics(&probs, &labels)?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_predictions(&out.join("predictions.csv"), &ids, &labels, &probs)?;
    write_roc(&out.join("roc.csv"), &labels, &probs)?;
    println!("evaluated {} images", ids.len());
    for (key, label) in cellattn::metrics::METRIC_ROWS {
        let v = metrics.get(key).flatten();
        println!("{label:<16} {}", v.map_or("undefined".into(), |v| format!("{:.2}", v * 100.0)));
    }
    Ok(())
}

/// One row of `explain.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainEntry {
    pub image_id: String,
    pub label: Label,
    pub target_class: usize,
    /// Maximum of the raw map before normalization.
    pub raw_max: f64,
    pub tnsr: PathBuf,
    pub png: PathBuf,
    pub overlay: PathBuf,
}

pub fn explain(
    mut s: Settings,
    data: &Path,
    checkpoint: &Path,
    fold: Option<usize>,
    class: Option<Label>,
    out: &Path,
) -> Result<()> {
    require_checkpoint(checkpoint)?;
    let dataset = load_dataset(&mut s, data)?;
    let (model, params) = load_model(&mut s, checkpoint)?;
    let selector: LayerSelector = s.explain.layer.parse()?;
    start_run(&s, out)?;
    for sub in ["saliency", "overlay"] {
        create_dir(&out.join(sub))?;
    }
    let idx = select(&dataset, fold)?;
    let entries = idx
        .par_iter()
        .map(|&i| {
            let e = &dataset.manifest.entries[i];
            let image = &dataset.images[i];
            let target = class.unwrap_or(e.label).index();
            let mut sal = gradcam(&model, &params, image, &e.image_id, target, &selector)?;
            let raw_max = sal.map.max();
            sal.normalize();
            let entry = ExplainEntry {
                image_id: e.image_id.clone(),
                label: e.label,
                target_class: target,
                raw_max,
                tnsr: PathBuf::from("saliency").join(format!("{}.tnsr", e.image_id)),
                png: PathBuf::from("saliency").join(format!("{}.png", e.image_id)),
                overlay: PathBuf::from("overlay").join(format!("{}.png", e.image_id)),
            };
            sal.map.save_tnsr(&out.join(&entry.tnsr))?;
            sal.map.save_png(&out.join(&entry.png), 0.0, 1.0)?;
            save_png(&overlay_heatmap(image, &sal.map)?, &out.join(&entry.overlay))?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&out.join(EXPLAIN_INDEX), &entries)?;
    println!("explained {} images into {}", entries.len(), out.display());
    Ok(())
}

fn load_map(path: &Path) -> Result<Map> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Map::from_tensor(&Tensor::read_tnsr(&mut bytes.as_slice())?)
}

fn save_map(map: &Map, dir: &Path, name: &str, lo: f64, hi: f64) -> Result<()> {
    map.save_tnsr(&dir.join(format!("{name}.tnsr")))?;
    map.save_png(&dir.join(format!("{name}.png")), lo, hi)
}

pub fn aggregate(mut s: Settings, data: &Path, saliency: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(&mut s, data)?;
    let index_path = saliency.join(EXPLAIN_INDEX);
    if !index_path.is_file() {
        return Err(Error::Usage(format!("{} not found; run `explain` first", index_path.display())));
    }
    let entries: Vec<ExplainEntry> = read_json(&index_path)?;
    start_run(&s, out)?;
    let by_id: std::collections::HashMap<&str, usize> =
        dataset.manifest.entries.iter().enumerate().map(|(i, e)| (e.image_id.as_str(), i)).collect();
    for label in Label::ALL {
        let members: Vec<&ExplainEntry> = entries.iter().filter(|e| e.label == label).collect();
        if members.is_empty() {
            continue;
        }
        let mut shapes = Vec::with_capacity(members.len());
        let mut maps = Vec::with_capacity(members.len());
        for e in &members {
            let i = *by_id
                .get(e.image_id.as_str())
                .ok_or_else(|| Error::Input(format!("image `{}` is not in the dataset", e.image_id)))?;
            shapes.push(shape_map(&dataset.images[i])?);
            maps.push(load_map(&saliency.join(&e.tnsr))?);
        }
        let weights = vec![1.0; members.len()];
        let g_shape = gmean(&shapes.iter().collect::<Vec<_>>(), &weights)?;
        let g_cam = gmean(&maps.iter().collect::<Vec<_>>(), &weights)?;
        let corr = correlation_image(&g_shape, &g_cam, s.explain.halfwidth)?;
        let ratios = ratio_scores(&corr, s.explain.threshold)?;
        let dir = out.join(label.as_str());
        create_dir(&dir)?;
        save_map(&g_shape, &dir, "gmean_shape", 0.0, g_shape.max())?;
        save_map(&g_cam, &dir, "gmean_gradcam", 0.0, g_cam.max())?;
        save_map(&corr.values, &dir, "correlation", -1.0, 1.0)?;
        RatioReport::new(ratios, s.explain.threshold, s.explain.halfwidth).save(&dir.join("ratios.json"))?;
        println!(
            "{label}: {} images, positive {:.4}, negative {:.4}, neutral {:.4}",
            members.len(),
            ratios.positive,
            ratios.negative,
            ratios.neutral
        );
    }
    Ok(())
}

/// `NAME=PATH` or `PATH`; a directory means its `aggregate.json`.
fn report_source(arg: &str) -> (Option<String>, PathBuf) {
    let (name, path) = match arg.split_once('=') {
        Some((n, p)) if !n.is_empty() => (Some(n.to_string()), PathBuf::from(p)),
        _ => (None, PathBuf::from(arg)),
    };
    let path = if path.is_dir() { path.join("aggregate.json") } else { path };
    (name, path)
}

fn default_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(|p| p.file_name()) {
        Some(dir) if stem == "aggregate" => dir.to_string_lossy().into_owned(),
        _ => stem,
    }
}

pub fn stats(s: Settings, reports: &[String], alpha: f64, out: &Path) -> Result<()> {
    if reports.len() < 2 {
        return Err(Error::Usage(format!("stats needs at least 2 metric reports, got {}", reports.len())));
    }
    let loaded = reports
        .iter()
        .map(|arg| {
            let (name, path) = report_source(arg);
            let report = AggregateReport::load_json(&path)?;
            Ok((name.unwrap_or_else(|| default_name(&path)), report))
        })
        .collect::<Result<Vec<_>>>()?;
    let matrix = TTestMatrix::build(&loaded, alpha)?;
    start_run(&s, out)?;
    matrix.write_csv(csv_file(&out.join("ttest.csv"))?)?;
    write_json(&out.join("ttest.json"), &matrix)?;
    let significant = matrix.tests.iter().filter(|t| t.significant).count();
    println!(
        "{} reports, {} tests per metric, threshold {:.4}: {significant} of {} comparisons significant",
        matrix.names.len(),
        matrix.tests_per_metric,
        matrix.threshold,
        matrix.tests.len()
    );
    for t in matrix.tests.iter().filter(|t| t.significant) {
        println!("  {} {} vs {}: p = {:.6}", t.metric, t.a, t.b, t.p);
    }
    Ok(())
}
