//! End-to-end run with stage caching. A stage is skipped when the digest of
//! its parameters and input files matches the one recorded at its last run
//! and its outputs still exist.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use segmeta_core::augment::{self, AugmentConfig, Composition};
use segmeta_core::io::corpus::MANIFEST_NAME;
use segmeta_core::io::{CorpusLayout, FrameEntry, Split};
use segmeta_core::meta::{self, Protocol};
use segmeta_core::segments::{extract_segments, match_segments, segment_table_csv, SegmentSet, SegmentSource};
use segmeta_core::synth::{write_corpus, SceneSpec};
use segmeta_core::tracking::{assemble_time_series, build_tracks, tracks_csv};
use segmeta_core::{LabelMap, MetricsDataset, Row, Source};

use crate::commands::{
    self, corpus_root, estimate_from, features_of, frame_table, match_config, open_corpus, read_labels, read_table,
    read_text, read_volume, sequence_track_lines, track_header, train_spec, write_json, write_labels, write_table,
    write_text, Decider,
};
use crate::error::{CliError, Context};
use crate::{Outcome, PipelineArgs, Rule};

const CACHE_FILE: &str = "stages.json";

/// Digest of a stage's parameters and input file contents.
struct Key(Sha256);

impl Key {
    fn new(stage: &str) -> Self {
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        Key(h)
    }

    fn param(&mut self, name: &str, value: impl std::fmt::Display) -> &mut Self {
        self.0.update(format!("\0{name}={value}").as_bytes());
        self
    }

    fn file(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::io(format!("reading {}: {e}", path.display())))?;
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(&bytes);
        Ok(self)
    }

    fn files<'a>(&mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> Result<&mut Self, CliError> {
        for p in paths {
            self.file(p)?;
        }
        Ok(self)
    }

    fn finish(&mut self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}

struct Cache {
    path: PathBuf,
    keys: BTreeMap<String, String>,
    force: bool,
    log: Vec<Value>,
}

impl Cache {
    fn open(work: &Path, force: bool) -> Self {
        let path = work.join(CACHE_FILE);
        let keys = fs::read_to_string(&path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        Cache {
            path,
            keys,
            force,
            log: Vec::new(),
        }
    }

    fn stage(
        &mut self,
        name: &str,
        key: String,
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<(), CliError>,
    ) -> Result<(), CliError> {
        let fresh = !self.force && self.keys.get(name) == Some(&key) && outputs.iter().all(|p| p.exists());
        let status = if fresh {
            "cached"
        } else {
            body().map_err(|e| e.in_stage(name))?;
            self.keys.insert(name.to_string(), key.clone());
            write_json(&self.path, &serde_json::to_value(&self.keys).expect("json"))?;
            "ran"
        };
        log::info!("stage {name}: {status}");
        self.log.push(json!({ "stage": name, "status": status, "key": key }));
        Ok(())
    }
}

fn mask_path(work: &Path, f: &FrameEntry) -> PathBuf {
    work.join("masks").join(format!("{}_{:06}.npy", f.sequence_id, f.frame_index))
}

/// Map whose ignore pixels are removed before segmentation, as done for
/// the metrics of the frame.
fn ignore_map(f: &FrameEntry) -> Result<Option<LabelMap>, CliError> {
    f.gt.as_ref().or(f.pseudo.as_ref()).map(|p| read_labels(p)).transpose()
}

fn concat(schema: Vec<String>, parts: Vec<MetricsDataset>) -> Result<MetricsDataset, CliError> {
    let mut out = MetricsDataset::new(schema);
    for p in parts {
        out.extend(&p).ctx("DATA", "joining frames")?;
    }
    Ok(out)
}

fn scene_spec(a: &PipelineArgs) -> Result<SceneSpec, CliError> {
    let mut spec = SceneSpec::preset(&a.preset)
        .ok_or_else(|| CliError::validation("BADARG", format!("unknown preset '{}'", a.preset)))?;
    if let Some(path) = &a.spec {
        spec.apply(&read_text(path)?).ctx("SYNTH", format!("spec {}", path.display()))?;
    }
    Ok(spec)
}

fn all_files<'a>(frames: &'a [FrameEntry], pick: impl Fn(&'a FrameEntry) -> Option<&'a PathBuf>) -> Vec<PathBuf> {
    frames.iter().filter_map(pick).cloned().collect()
}

pub fn run(a: &PipelineArgs, config: &Value) -> Outcome {
    let work = a.work.clone();
    fs::create_dir_all(&work).map_err(|e| CliError::io(format!("creating {}: {e}", work.display())))?;
    let mut cache = Cache::open(&work, a.force);
    let composition: Composition = a.composition.parse().ctx("BADARG", "--composition")?;
    let ratios = a
        .ratios
        .clone()
        .unwrap_or_else(|| if a.depth.is_some() { vec![0.7, 0.1, 0.2] } else { vec![0.8, 0.2] });

    let corpus = match &a.corpus {
        Some(c) => corpus_root(c)?,
        None => {
            let dir = work.join("corpus");
            let spec = scene_spec(a)?;
            let key = Key::new("synth").param("spec", spec.to_text()).param("frames", a.frames).finish();
            cache.stage("synth", key, &[dir.join(MANIFEST_NAME)], || {
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| CliError::io(format!("clearing {}: {e}", dir.display())))?;
                }
                write_corpus(&spec, a.frames, &dir).ctx("SYNTH", "writing corpus")?;
                write_text(&dir.join("spec.txt"), &spec.to_text())
            })?;
            dir
        }
    };
    let layout = open_corpus(&corpus, &ratios, a.seed)?;
    let frames = &layout.frames;
    if frames.is_empty() {
        return Err(CliError::validation("CORPUS", "the corpus has no frames"));
    }
    let manifest = corpus.join(MANIFEST_NAME);
    let probs_files = all_files(frames, |f| Some(&f.probs));
    let gt_files = all_files(frames, |f| f.gt.as_ref());
    let pseudo_files = all_files(frames, |f| f.pseudo.as_ref());
    let mask_files: Vec<PathBuf> = frames.iter().map(|f| mask_path(&work, f)).collect();

    // Decision rule parameters.
    let priors_path = work.join("priors.npy");
    if a.rule == Rule::Ml {
        let train_gt: Vec<PathBuf> = layout.frames_in(Split::Train).filter_map(|f| f.gt.clone()).collect();
        let key = Key::new("priors")
            .param("alpha", a.alpha)
            .param("seed", a.seed)
            .param("ratios", format!("{ratios:?}"))
            .files(&train_gt)?
            .finish();
        cache.stage("priors", key, &[priors_path.clone()], || {
            let classes = read_volume(&frames[0].probs)?.classes();
            let map = estimate_from(&train_gt, classes, a.alpha, 1)?;
            map.write(&priors_path).ctx("NPY", "writing priors")
        })?;
    }
    let mut key = Key::new("predict");
    key.param("rule", format!("{:?}", a.rule)).file(&manifest)?.files(&probs_files)?;
    match a.rule {
        Rule::Ml => {
            key.file(&priors_path)?;
        }
        Rule::Cost => {
            let path = a.cost.as_ref().ok_or_else(|| CliError::validation("BADARG", "the cost rule needs --cost"))?;
            key.file(path)?;
        }
        Rule::Bayes => {}
    }
    cache.stage("predict", key.finish(), &mask_files, || {
        let decider = Decider::load(a.rule, Some(&priors_path), a.cost.as_deref())?;
        frames.par_iter().zip(&mask_files).try_for_each(|(f, out)| {
            let mask = decider.decide(&read_volume(&f.probs)?)?;
            write_labels(&mask, out)
        })
    })?;

    let segments_csv = work.join("segments.csv");
    let key = Key::new("segments").files(&mask_files)?.files(&gt_files)?.finish();
    cache.stage("segments", key, &[segments_csv.clone()], || {
        let tables = frames
            .par_iter()
            .zip(&mask_files)
            .map(|(f, m)| {
                let gt = f.gt.as_ref().map(|p| read_labels(p)).transpose()?;
                let set = extract_segments(&read_labels(m)?, gt.as_ref()).tagged(f.id(), SegmentSource::Predicted);
                let matches = match &gt {
                    Some(g) => Some(match_segments(&set, &extract_segments(g, None)).ctx("SEGMENTS", f.id())?),
                    None => None,
                };
                Ok(segment_table_csv(&set, matches.as_ref()))
            })
            .collect::<Result<Vec<String>, CliError>>()?;
        let mut text = String::new();
        for (i, t) in tables.iter().enumerate() {
            text.extend(t.lines().skip(usize::from(i > 0)).map(|l| format!("{l}\n")));
        }
        write_text(&segments_csv, &text)
    })?;

    let metrics_csv = work.join("metrics.csv");
    let key = Key::new("metrics")
        .file(&manifest)?
        .files(&probs_files)?
        .files(&mask_files)?
        .files(&gt_files)?
        .files(&pseudo_files)?
        .finish();
    cache.stage("metrics", key, &[metrics_csv.clone()], || {
        let tables = frames
            .par_iter()
            .zip(&mask_files)
            .map(|(f, m)| Ok(frame_table(f, &read_volume(&f.probs)?, &read_labels(m)?)?.0))
            .collect::<Result<Vec<_>, CliError>>()?;
        let schema = tables[0].schema().to_vec();
        write_table(&concat(schema, tables)?, &metrics_csv)
    })?;

    let table_path = match a.depth {
        None => metrics_csv.clone(),
        Some(depth) => {
            let series_csv = work.join("series.csv");
            let tracks_path = work.join("tracks.csv");
            let key = Key::new("track")
                .param("depth", depth)
                .param("shift", format!("{:?}", a.shift))
                .file(&metrics_csv)?
                .files(&mask_files)?
                .files(&gt_files)?
                .files(&pseudo_files)?
                .finish();
            cache.stage("track", key, &[series_csv.clone(), tracks_path.clone()], || {
                track_stage(&layout, &mask_files, &metrics_csv, depth, a, &series_csv, &tracks_path)
            })?;
            series_csv
        }
    };

    let spec = train_spec(&a.model, a.seed);
    let features = features_of(a.model.features);
    let spec_text = serde_json::to_string(&spec).expect("json");
    let model_path = work.join("model.json");
    let key = Key::new("train-meta")
        .param("spec", &spec_text)
        .param("features", format!("{features:?}"))
        .param("ratios", format!("{ratios:?}"))
        .file(&table_path)?
        .finish();
    cache.stage("train-meta", key, &[model_path.clone()], || {
        let data = read_table(&table_path)?;
        let train = data.filter(|r| r.source == Source::Real && layout.split_of(&r.frame_id) == Some(Split::Train));
        let model = commands::fit_model(&train, &spec, features)?;
        write_text(&model_path, &model.to_json())
    })?;

    let evaluation_path = work.join("evaluation.json");
    let protocol = Protocol {
        runs: a.runs,
        base_seed: a.seed,
        ratios: ratios.clone(),
    };
    let augment_cfg = AugmentConfig {
        seed: a.seed,
        ..AugmentConfig::default()
    };
    let key = Key::new("eval-meta")
        .param("spec", &spec_text)
        .param("features", format!("{features:?}"))
        .param("protocol", serde_json::to_string(&protocol).expect("json"))
        .param("composition", composition)
        .file(&table_path)?
        .file(&model_path)?
        .finish();
    cache.stage("eval-meta", key, &[evaluation_path.clone()], || {
        let data = read_table(&table_path)?;
        let real = data.filter(|r| r.source == Source::Real);
        let pseudo = data.filter(|r| r.source == Source::Pseudo);
        let report = augment::evaluate_composition(&real, &pseudo, composition, &spec, features, &protocol, &augment_cfg)
            .ctx("META", "evaluation")?;
        let naive = meta::naive_random(&real, spec.task, &protocol).ctx("META", "random baseline")?;
        write_json(&evaluation_path, &json!({ "evaluation": report, "naive_random": naive.test }))
    })?;

    let evaluation: Value = serde_json::from_str(&read_text(&evaluation_path)?)
        .map_err(|e| CliError::validation("STAGE", format!("stage 'eval-meta' output unreadable: {e}")))?;
    let report = json!({
        "config": config,
        "seed": a.seed,
        "corpus": corpus,
        "frames": frames.len(),
        "stages": cache.log,
        "evaluation": evaluation["evaluation"],
        "naive_random": evaluation["naive_random"],
    });
    let report_path = a.report.clone().unwrap_or_else(|| work.join("report.json"));
    write_json(&report_path, &report)?;
    Ok(json!({
        "report": report_path,
        "stages": report["stages"],
        "test": report["evaluation"]["test"],
    }))
}

fn track_stage(
    layout: &CorpusLayout,
    mask_files: &[PathBuf],
    metrics_csv: &Path,
    depth: usize,
    a: &PipelineArgs,
    series_csv: &Path,
    tracks_path: &Path,
) -> Result<(), CliError> {
    let metrics = read_table(metrics_csv)?;
    let schema = metrics.schema().to_vec();
    let mut by_frame: HashMap<&str, Vec<Row>> = HashMap::new();
    for r in metrics.rows() {
        by_frame.entry(r.frame_id.as_str()).or_default().push(r.clone());
    }
    let cfg = match_config(a.shift, 1);
    let results = layout
        .sequences()
        .par_iter()
        .map(|(name, positions)| {
            let mut sets: Vec<SegmentSet> = Vec::new();
            let mut tables = Vec::new();
            let mut indices = Vec::new();
            for &i in positions {
                let f = &layout.frames[i];
                let ignore = ignore_map(f)?;
                sets.push(extract_segments(&read_labels(&mask_files[i])?, ignore.as_ref()));
                let rows = by_frame.get(f.id().as_str()).cloned().unwrap_or_default();
                tables.push(MetricsDataset::from_rows(schema.clone(), rows).ctx("DATA", f.id())?);
                indices.push(f.frame_index);
            }
            let tracks = build_tracks(&sets, &cfg).ctx("TRACK", format!("tracking {name}"))?;
            let series = assemble_time_series(&tracks, &tables, depth).ctx("TRACK", format!("series of {name}"))?;
            Ok((sequence_track_lines(name, &tracks_csv(&tracks, &indices)), series))
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    // Rows follow the order of the metrics table.
    let mut text = track_header();
    let mut lookup: HashMap<(String, u32), Row> = HashMap::new();
    let mut series_schema = None;
    for (lines, series) in results {
        text.push_str(&lines);
        series_schema.get_or_insert_with(|| series.schema().to_vec());
        for r in series.rows() {
            lookup.insert((r.frame_id.clone(), r.segment_id), r.clone());
        }
    }
    let rows = metrics
        .rows()
        .iter()
        .map(|r| lookup.remove(&(r.frame_id.clone(), r.segment_id)))
        .collect::<Option<Vec<Row>>>()
        .ok_or_else(|| CliError::validation("TRACK", "time series lost a metrics row"))?;
    let out = MetricsDataset::from_rows(series_schema.unwrap_or_default(), rows).ctx("DATA", "time series")?;
    write_text(tracks_path, &text)?;
    write_table(&out, series_csv)
}
