use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use segmeta_core::augment::{self, AugmentConfig, Composition};
use segmeta_core::decision::{bayes_decide, cost_decide, estimate_priors, ml_decide, CostMatrix, PriorMap};
use segmeta_core::evaluation::{self, build_cdf, dominance, CdfReport, MetricKind};
use segmeta_core::io::corpus::MANIFEST_NAME;
use segmeta_core::io::{atomic_write, load_corpus, npy, CorpusConfig, CorpusError, CorpusLayout, FrameEntry, Split};
use segmeta_core::meta::{self, FeatureSet, MetaModel, ModelKind, Penalty, Protocol, Task, TrainSpec};
use segmeta_core::metrics::{frame_metrics, MEAN_ENTROPY};
use segmeta_core::segments::{extract_segments, match_segments, segment_precision_recall, segment_table_csv, SegmentSet};
use segmeta_core::synth::{write_corpus, SceneSpec};
use segmeta_core::tracking::{assemble_time_series, build_tracks, tracks_csv, MatchConfig, ShiftMode};
use segmeta_core::{LabelMap, MetricsDataset, ProbabilityVolume};

use crate::error::{CliError, Context};
use crate::{
    AugmentArgs, CdfArgs, ComposeArgs, EvalArgs, FeaturesArg, KindArg, MetricsArgs, ModelArg, ModelChoice, Outcome,
    PenaltyArg, PredictArgs, PriorsArgs, RenderArgs, RenderMode, Rule, SegmentsArgs, ShiftArg, SynthArgs, TaskArg,
    TrackArgs, TrainArgs,
};

pub(crate) fn read_volume(path: &Path) -> Result<ProbabilityVolume, CliError> {
    npy::read_volume(path).ctx("NPY", format!("reading {}", path.display()))
}

pub(crate) fn read_labels(path: &Path) -> Result<LabelMap, CliError> {
    npy::read_labels(path).ctx("NPY", format!("reading {}", path.display()))
}

pub(crate) fn write_labels(labels: &LabelMap, path: &Path) -> Result<(), CliError> {
    npy::write_labels(labels, path).ctx("NPY", format!("writing {}", path.display()))
}

pub(crate) fn read_table(path: &Path) -> Result<MetricsDataset, CliError> {
    MetricsDataset::read_csv(path).ctx("DATA", format!("reading {}", path.display()))
}

pub(crate) fn read_tables(paths: &[PathBuf]) -> Result<MetricsDataset, CliError> {
    let mut out: Option<MetricsDataset> = None;
    for p in paths {
        let t = read_table(p)?;
        match &mut out {
            None => out = Some(t),
            Some(all) => all.extend(&t).ctx("DATA", format!("joining {}", p.display()))?,
        }
    }
    out.ok_or_else(|| CliError::validation("BADARG", "no input table"))
}

pub(crate) fn write_table(data: &MetricsDataset, path: &Path) -> Result<(), CliError> {
    data.write_csv(path).ctx("DATA", format!("writing {}", path.display()))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    atomic_write(path, text.as_bytes()).map_err(|e| CliError::io(format!("writing {}: {e}", path.display())))
}

pub(crate) fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("json") + "\n"))
}

pub(crate) fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))
}

/// Accepts a corpus directory or the manifest inside it.
pub(crate) fn corpus_root(path: &Path) -> Result<PathBuf, CliError> {
    if path.is_dir() {
        return Ok(path.to_path_buf());
    }
    if !path.exists() {
        return Err(CliError::io(format!("{} does not exist", path.display())));
    }
    match (path.file_name(), path.parent()) {
        (Some(name), Some(parent)) if name == MANIFEST_NAME => Ok(parent.to_path_buf()),
        _ => Err(CliError::validation(
            "CORPUS",
            format!("{} is neither a corpus directory nor a {MANIFEST_NAME}", path.display()),
        )),
    }
}

pub(crate) fn open_corpus(path: &Path, ratios: &[f64], seed: u64) -> Result<CorpusLayout, CliError> {
    let root = corpus_root(path)?;
    let config = CorpusConfig {
        ratios: ratios.to_vec(),
        seed,
    };
    match load_corpus(&root, &config) {
        Err(e @ CorpusError::MissingManifest(_)) => Err(CliError::io(e.to_string())),
        other => other.ctx("CORPUS", format!("loading {}", root.display())),
    }
}

/// A decision rule with its parameters loaded.
pub(crate) enum Decider {
    Bayes,
    Cost(CostMatrix),
    Ml(PriorMap),
}

impl Decider {
    pub(crate) fn load(rule: Rule, priors: Option<&Path>, cost: Option<&Path>) -> Result<Self, CliError> {
        match rule {
            Rule::Bayes => Ok(Decider::Bayes),
            Rule::Cost => {
                let path = cost.ok_or_else(|| CliError::validation("BADARG", "the cost rule needs --cost"))?;
                CostMatrix::from_csv(&read_text(path)?)
                    .map(Decider::Cost)
                    .ctx("DECISION", format!("cost matrix {}", path.display()))
            }
            Rule::Ml => {
                let path = priors.ok_or_else(|| CliError::validation("BADARG", "the ml rule needs --priors"))?;
                PriorMap::read(path)
                    .map(Decider::Ml)
                    .ctx("DECISION", format!("priors {}", path.display()))
            }
        }
    }

    pub(crate) fn decide(&self, probs: &ProbabilityVolume) -> Result<LabelMap, CliError> {
        match self {
            Decider::Bayes => Ok(bayes_decide(probs)),
            Decider::Cost(c) => cost_decide(probs, c).ctx("DECISION", "cost rule"),
            Decider::Ml(p) => {
                let fitted = p.clone().fit_to(probs.height(), probs.width()).ctx("DECISION", "priors")?;
                ml_decide(probs, &fitted).ctx("DECISION", "ml rule")
            }
        }
    }
}

/// Metrics and segments of a corpus frame. Frames without ground truth
/// take their targets from pseudo labels when present.
pub(crate) fn frame_table(
    entry: &FrameEntry,
    probs: &ProbabilityVolume,
    mask: &LabelMap,
) -> Result<(MetricsDataset, SegmentSet), CliError> {
    let id = entry.id();
    let what = format!("metrics of {id}");
    if let Some(gt) = &entry.gt {
        frame_metrics(&id, probs, mask, Some(&read_labels(gt)?)).ctx("METRICS", what)
    } else if let Some(pseudo) = &entry.pseudo {
        let (data, set) = frame_metrics(&id, probs, mask, Some(&read_labels(pseudo)?)).ctx("METRICS", what)?;
        Ok((augment::mark_pseudo(data), set))
    } else {
        frame_metrics(&id, probs, mask, None).ctx("METRICS", what)
    }
}

pub(crate) fn task_of(t: TaskArg) -> Task {
    match t {
        TaskArg::Fp => Task::ClassifyFp,
        TaskArg::Iou => Task::RegressIou,
    }
}

pub(crate) fn features_of(f: FeaturesArg) -> FeatureSet {
    match f {
        FeaturesArg::All => FeatureSet::All,
        FeaturesArg::EntropyOnly => FeatureSet::EntropyOnly,
    }
}

pub(crate) fn train_spec(choice: &ModelChoice, seed: u64) -> TrainSpec {
    let task = task_of(choice.task);
    let kind = match choice.model {
        Some(ModelArg::Linear) => ModelKind::Linear,
        Some(ModelArg::Logistic) => ModelKind::Logistic,
        Some(ModelArg::Gbt) => ModelKind::Gbt,
        Some(ModelArg::Mlp) => ModelKind::Mlp,
        None => match task {
            Task::ClassifyFp => ModelKind::Logistic,
            Task::RegressIou => ModelKind::Linear,
        },
    };
    let mut spec = TrainSpec::new(task, kind).with_seed(seed);
    spec.penalty = match (choice.penalty, choice.lambda) {
        (None, None) => spec.penalty,
        (None, Some(l)) => match spec.penalty {
            Penalty::L1(_) => Penalty::L1(l),
            _ => Penalty::L2(l),
        },
        (Some(PenaltyArg::None), _) => Penalty::None,
        (Some(PenaltyArg::L1), l) => Penalty::L1(l.unwrap_or(Penalty::DEFAULT_L1)),
        (Some(PenaltyArg::L2), l) => Penalty::L2(l.unwrap_or(Penalty::DEFAULT_L2)),
    };
    if let Some(e) = choice.epochs {
        spec.mlp.epochs = e;
    }
    if let Some(s) = choice.stages {
        spec.gbt.stages = s;
    }
    spec
}

pub(crate) fn restrict(data: &MetricsDataset, features: FeatureSet) -> Result<MetricsDataset, CliError> {
    match features {
        FeatureSet::All => Ok(data.clone()),
        FeatureSet::EntropyOnly => data.select(&[MEAN_ENTROPY]).ctx("DATA", "selecting features"),
    }
}

fn shift_of(s: ShiftArg) -> ShiftMode {
    match s {
        ShiftArg::None => ShiftMode::None,
        ShiftArg::Linear => ShiftMode::Linear,
    }
}

pub(crate) fn match_config(shift: ShiftArg, min_overlap: usize) -> MatchConfig {
    MatchConfig {
        min_overlap,
        shift: shift_of(shift),
    }
}

pub fn synth(a: &SynthArgs, _config: &Value) -> Outcome {
    let mut spec = SceneSpec::preset(&a.preset)
        .ok_or_else(|| CliError::validation("BADARG", format!("unknown preset '{}'", a.preset)))?;
    if let Some(path) = &a.spec {
        spec.apply(&read_text(path)?).ctx("SYNTH", format!("spec {}", path.display()))?;
    }
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(len) = a.sequence_length {
        spec.sequence_length = len;
    }
    if a.frames == 0 {
        return Err(CliError::validation("BADARG", "--frames must be positive"));
    }
    let entries = write_corpus(&spec, a.frames, &a.out).ctx("SYNTH", format!("writing corpus {}", a.out.display()))?;
    write_text(&a.out.join("spec.txt"), &spec.to_text())?;
    let sequences = entries.iter().filter(|e| e.frame_index == 0).count();
    Ok(json!({
        "frames": entries.len(),
        "sequences": sequences,
        "labeled": entries.iter().filter(|e| e.gt.is_some()).count(),
        "manifest": a.out.join(MANIFEST_NAME),
        "spec": spec,
    }))
}

pub fn predict(a: &PredictArgs, _config: &Value) -> Outcome {
    let probs = read_volume(&a.probs)?;
    let mask = Decider::load(a.rule, a.priors.as_deref(), a.cost.as_deref())?.decide(&probs)?;
    write_labels(&mask, &a.out)?;
    let mut counts = vec![0usize; probs.classes()];
    for &c in mask.as_slice() {
        counts[c as usize] += 1;
    }
    Ok(json!({ "height": mask.height(), "width": mask.width(), "pixels_per_class": counts }))
}

pub fn segments(a: &SegmentsArgs, _config: &Value) -> Outcome {
    let mask = read_labels(&a.mask)?;
    let gt = a.gt.as_deref().map(read_labels).transpose()?;
    let pred = extract_segments(&mask, gt.as_ref()).tagged(&a.frame_id, segmeta_core::segments::SegmentSource::Predicted);
    let matches = match &gt {
        Some(g) => Some(match_segments(&pred, &extract_segments(g, None)).ctx("SEGMENTS", "matching")?),
        None => None,
    };
    write_text(&a.out, &segment_table_csv(&pred, matches.as_ref()))?;
    Ok(json!({
        "segments": pred.len(),
        "false_positives": matches.map(|m| m.predicted.iter().filter(|p| p.is_fp).count()),
    }))
}

pub fn metrics(a: &MetricsArgs, _config: &Value) -> Outcome {
    let probs = read_volume(&a.probs)?;
    let mask = read_labels(&a.mask)?;
    let gt = a.gt.as_deref().map(read_labels).transpose()?;
    let (data, _) = frame_metrics(&a.frame_id, &probs, &mask, gt.as_ref()).ctx("METRICS", "aggregating")?;
    write_table(&data, &a.out)?;
    Ok(json!({ "rows": data.len(), "features": data.schema().len() }))
}

pub(crate) fn fit_model(data: &MetricsDataset, spec: &TrainSpec, features: FeatureSet) -> Result<MetaModel, CliError> {
    let rows = restrict(&data.labeled(), features)?;
    meta::train(&rows, spec).ctx("META", "training")
}

pub fn train_meta(a: &TrainArgs, _config: &Value) -> Outcome {
    let data = read_tables(&a.input)?;
    let spec = train_spec(&a.model, a.seed);
    let model = fit_model(&data, &spec, features_of(a.model.features))?;
    write_text(&a.out, &model.to_json())?;
    Ok(json!({
        "rows": data.labeled().len(),
        "features": model.schema.len(),
        "task": model.task,
        "kind": model.kind,
        "penalty": model.penalty,
    }))
}

pub(crate) fn read_model(path: &Path) -> Result<MetaModel, CliError> {
    MetaModel::from_json(&read_text(path)?).ctx("META", format!("model {}", path.display()))
}

/// Feature set a model was trained on.
pub(crate) fn model_features(model: &MetaModel, data: &MetricsDataset) -> Result<FeatureSet, CliError> {
    if model.schema == [MEAN_ENTROPY] {
        Ok(FeatureSet::EntropyOnly)
    } else if model.schema == data.schema() {
        Ok(FeatureSet::All)
    } else {
        Err(CliError::validation("META", "the table's features differ from the model's"))
    }
}

pub(crate) fn evaluation_json(
    data: &MetricsDataset,
    spec: &TrainSpec,
    features: FeatureSet,
    protocol: &Protocol,
) -> Result<(Value, Value), CliError> {
    let report = meta::evaluate(data, spec, features, protocol).ctx("META", "evaluation")?;
    let naive = meta::naive_random(data, spec.task, protocol).ctx("META", "random baseline")?;
    let summary = json!({ "train": report.train, "validation": report.validation, "test": report.test });
    Ok((json!({ "evaluation": report, "naive_random": naive.test }), summary))
}

pub fn eval_meta(a: &EvalArgs, config: &Value) -> Outcome {
    let model = read_model(&a.model)?;
    let data = read_tables(&a.input)?;
    let features = model_features(&model, &data)?;
    let protocol = Protocol {
        runs: a.runs,
        base_seed: a.seed,
        ratios: a.ratios.clone(),
    };
    let (mut report, summary) = evaluation_json(&data, &model.spec, features, &protocol)?;
    report["config"] = config.clone();
    write_json(&a.report, &report)?;
    Ok(summary)
}

/// Masks, metrics and segments of one sequence, in frame order.
pub(crate) struct SequenceFrames {
    pub tables: Vec<MetricsDataset>,
    pub sets: Vec<SegmentSet>,
    pub indices: Vec<u32>,
}

fn sequence_frames(layout: &CorpusLayout, positions: &[usize], decider: &Decider) -> Result<SequenceFrames, CliError> {
    let mut out = SequenceFrames {
        tables: Vec::new(),
        sets: Vec::new(),
        indices: Vec::new(),
    };
    for &i in positions {
        let entry = &layout.frames[i];
        let probs = read_volume(&entry.probs)?;
        let mask = decider.decide(&probs)?;
        let (table, set) = frame_table(entry, &probs, &mask)?;
        out.tables.push(table);
        out.sets.push(set);
        out.indices.push(entry.frame_index);
    }
    Ok(out)
}

/// Track table lines of one sequence, prefixed with its id.
pub(crate) fn sequence_track_lines(sequence: &str, csv: &str) -> String {
    csv.lines().skip(1).map(|l| format!("{sequence},{l}\n")).collect()
}

pub(crate) fn track_header() -> String {
    format!("sequence_id,{}\n", tracks_csv(&[], &[]).trim_end())
}

pub fn track(a: &TrackArgs, _config: &Value) -> Outcome {
    let layout = open_corpus(&a.manifest, &[0.7, 0.1, 0.2], 0)?;
    let decider = Decider::load(a.rule, a.priors.as_deref(), a.cost.as_deref())?;
    let cfg = match_config(a.shift, a.min_overlap);
    let sequences = layout.sequences();
    let results: Vec<(String, MetricsDataset, usize)> = sequences
        .par_iter()
        .map(|(name, positions)| {
            let frames = sequence_frames(&layout, positions, &decider)?;
            let tracks = build_tracks(&frames.sets, &cfg).ctx("TRACK", format!("tracking {name}"))?;
            let series = assemble_time_series(&tracks, &frames.tables, a.depth).ctx("TRACK", format!("series of {name}"))?;
            let lines = sequence_track_lines(name, &tracks_csv(&tracks, &frames.indices));
            Ok((lines, series, tracks.len()))
        })
        .collect::<Result<_, CliError>>()?;
    let mut text = track_header();
    let mut series: Option<MetricsDataset> = None;
    let mut count = 0;
    for (lines, s, n) in results {
        text.push_str(&lines);
        count += n;
        match &mut series {
            None => series = Some(s),
            Some(all) => all.extend(&s).ctx("DATA", "joining sequences")?,
        }
    }
    write_text(&a.out, &text)?;
    let rows = series.as_ref().map_or(0, |s| s.len());
    if let (Some(path), Some(s)) = (&a.series, &series) {
        write_table(s, path)?;
    }
    Ok(json!({ "sequences": sequences.len(), "tracks": count, "series_rows": rows }))
}

pub(crate) fn augment_config(a: &AugmentArgs) -> AugmentConfig {
    AugmentConfig {
        k_neighbors: a.k,
        factor: a.factor,
        bins: a.bins,
        rare_mass: a.rare_mass,
        seed: a.seed,
    }
}

pub fn augment(a: &AugmentArgs, _config: &Value) -> Outcome {
    let data = read_tables(&a.input)?;
    let real = data.labeled().filter(|r| r.source == segmeta_core::Source::Real);
    let rows = augment::smote_rows(&real, &augment_config(a)).ctx("AUGMENT", "smote")?;
    write_table(&rows, &a.out)?;
    Ok(json!({ "input_rows": real.len(), "augmented_rows": rows.len() }))
}

pub fn compose(a: &ComposeArgs, _config: &Value) -> Outcome {
    let spec: Composition = a.spec.parse().ctx("BADARG", "--spec")?;
    let load = |p: &Option<PathBuf>, needed: bool, name: &str| -> Result<Option<MetricsDataset>, CliError> {
        match (p, needed) {
            (Some(p), true) => read_table(p).map(Some),
            (None, true) => Err(CliError::validation("BADARG", format!("composition {spec} needs --{name}"))),
            _ => Ok(None),
        }
    };
    let real = load(&a.real, spec.real(), "real")?;
    let aug = load(&a.aug, spec.augmented(), "aug")?;
    let pseudo = load(&a.pseudo, spec.pseudo(), "pseudo")?;
    let schema = [&real, &aug, &pseudo]
        .into_iter()
        .flatten()
        .next()
        .map(|d| d.schema().to_vec())
        .unwrap_or_default();
    let empty = MetricsDataset::new(schema);
    let out = augment::compose(
        real.as_ref().unwrap_or(&empty),
        aug.as_ref().unwrap_or(&empty),
        pseudo.as_ref().unwrap_or(&empty),
        spec,
    )
    .ctx("AUGMENT", "compose")?;
    write_table(&out, &a.out)?;
    Ok(json!({ "spec": spec.to_string(), "rows": out.len() }))
}

pub(crate) fn estimate_from(paths: &[PathBuf], classes: usize, alpha: f64, scale: usize) -> Result<PriorMap, CliError> {
    let maps = paths.iter().map(|p| read_labels(p)).collect::<Result<Vec<_>, _>>()?;
    let map = estimate_priors(&maps, classes, alpha).ctx("DECISION", "estimating priors")?;
    Ok(if scale > 1 { map.downscale(scale) } else { map })
}

pub fn priors(a: &PriorsArgs, _config: &Value) -> Outcome {
    let paths: Vec<PathBuf> = match &a.manifest {
        Some(m) => open_corpus(m, &a.ratios, a.seed)?
            .frames_in(Split::Train)
            .filter_map(|f| f.gt.clone())
            .collect(),
        None => a.gt.clone(),
    };
    if paths.is_empty() {
        return Err(CliError::validation("BADARG", "no ground truth given"));
    }
    let map = estimate_from(&paths, a.classes, a.alpha, a.scale)?;
    map.write(&a.out).ctx("NPY", format!("writing {}", a.out.display()))?;
    Ok(json!({ "maps": paths.len(), "height": map.height(), "width": map.width(), "classes": map.classes() }))
}

fn cdf_values(pred: &[PathBuf], gt: &[PathBuf], classes: &[u8], kind: MetricKind) -> Result<Vec<f64>, CliError> {
    if pred.len() != gt.len() {
        return Err(CliError::validation(
            "BADARG",
            format!("{} masks but {} ground-truth maps", pred.len(), gt.len()),
        ));
    }
    let mut values = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let gt = read_labels(g)?;
        let set = extract_segments(&read_labels(p)?, Some(&gt));
        let m = segment_precision_recall(&set, &extract_segments(&gt, None), classes)
            .ctx("SEGMENTS", format!("matching {}", p.display()))?;
        match kind {
            MetricKind::Precision => values.extend(m.predicted.iter().map(|x| x.precision)),
            MetricKind::Recall => values.extend(m.ground_truth.iter().map(|x| x.recall)),
        }
    }
    Ok(values)
}

pub fn cdf(a: &CdfArgs, config: &Value) -> Outcome {
    let kind = match a.kind {
        KindArg::Precision => MetricKind::Precision,
        KindArg::Recall => MetricKind::Recall,
    };
    let build = |pred: &[PathBuf], tag: &str| -> Result<_, CliError> {
        let values = cdf_values(pred, &a.gt, &a.classes, kind)?;
        Ok(build_cdf(&values, kind).ctx("EVAL", "cdf")?.with_tags(&a.classes, tag))
    };
    let main = build(&a.pred, &a.rule_tag)?;
    let mut report = serde_json::to_value(CdfReport::from(&main)).expect("json");
    if !a.against_pred.is_empty() {
        let other = build(&a.against_pred, &a.against_tag)?;
        let d = dominance(&main, &other, a.tol).ctx("EVAL", "dominance")?;
        report["against"] = serde_json::to_value(CdfReport::from(&other)).expect("json");
        report["dominance"] = serde_json::to_value(d).expect("json");
    }
    report["config"] = config.clone();
    write_json(&a.out, &report)?;
    Ok(json!({ "n": main.len(), "f_r_zero": report["f_r_zero"], "dominance": report.get("dominance") }))
}

pub fn render(a: &RenderArgs, _config: &Value) -> Outcome {
    let probs = read_volume(&a.probs)?;
    let mask = read_labels(&a.mask)?;
    let gt = read_labels(&a.gt)?;
    let (data, set) = frame_metrics("frame", &probs, &mask, Some(&gt)).ctx("METRICS", "aggregating")?;
    let mut truth = vec![0.0; set.len()];
    for r in data.rows() {
        truth[r.segment_id as usize] = r.iou.unwrap_or(0.0);
    }
    let predicted = || -> Result<Vec<f64>, CliError> {
        let path = a
            .model
            .as_deref()
            .ok_or_else(|| CliError::validation("BADARG", "predicted IoU needs --model"))?;
        let model = read_model(path)?;
        let table = restrict(&data, model_features(&model, &data)?)?;
        let scores = model.predict(&table).ctx("META", "predicting")?;
        let mut v = vec![0.0; set.len()];
        for (r, s) in data.rows().iter().zip(scores) {
            v[r.segment_id as usize] = if model.task == Task::ClassifyFp { 1.0 - s } else { s };
        }
        Ok(v)
    };
    let heat = |values: &[f64]| evaluation::render_heatmap(values, &set, Some(&gt)).ctx("EVAL", "rendering");
    let save = |bytes: Vec<u8>, path: &Path| {
        evaluation::write_image(&bytes, path).ctx("EVAL", format!("writing {}", path.display()))
    };
    let mut written = Vec::new();
    match a.mode {
        RenderMode::IouTrue => {
            save(heat(&truth)?, &a.out)?;
            written.push(a.out.clone());
        }
        RenderMode::IouPred => {
            save(heat(&predicted()?)?, &a.out)?;
            written.push(a.out.clone());
        }
        RenderMode::Panels => {
            let labels = |m: &LabelMap, ignore: Option<&LabelMap>| {
                evaluation::render_labels(m, ignore).ctx("EVAL", "rendering")
            };
            let mut panels = vec![
                ("ground_truth.ppm", labels(&gt, Some(&gt))?),
                ("prediction.ppm", labels(&mask, None)?),
                ("iou_true.ppm", heat(&truth)?),
            ];
            if a.model.is_some() {
                panels.push(("iou_pred.ppm", heat(&predicted()?)?));
            }
            for (name, bytes) in panels {
                let path = a.out.join(name);
                save(bytes, &path)?;
                written.push(path);
            }
        }
    }
    Ok(json!({ "segments": set.len(), "files": written }))
}
