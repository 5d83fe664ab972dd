//! End-to-end commands: corpus generation, training, evaluation and
//! attention export. Each is a deterministic function of its inputs.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    gen_synthetic_corpus, load_features_checked, read_enrollments, read_manifest, save_features, write_enrollments,
    write_manifest, Corpus, CorpusSpec, Enrollment, FeatureSequence, ManifestEntry,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, format_report, format_report_kv, ConditionMetrics};
use crate::model::Model;
use crate::tokens::supervector_from_trace;
use crate::train::{EpochLog, Example, Trainer};
use crate::verify::{enroll_model, read_trials, score_set, score_trials, write_scores, write_trials, Trial, TrialSet};

pub const TRAIN_MANIFEST: &str = "train.txt";
pub const EVAL_MANIFEST: &str = "eval.txt";
pub const ENROLLMENTS: &str = "enroll.txt";
pub const CORPUS_CONFIG: &str = "corpus.toml";
pub const FEATURE_DIR: &str = "features";

/// Labeled training examples; the label is the (speaker, phrase) class.
pub fn training_examples(spec: &CorpusSpec, sequences: &[FeatureSequence]) -> Result<Vec<Example>> {
    sequences
        .iter()
        .map(|s| {
            if s.speaker_id >= spec.speakers || s.phrase_id >= spec.phrases {
                return Err(Error::invalid(format!(
                    "{}: speaker {} / phrase {} outside the configured {} speakers and {} phrases",
                    s.utterance_id, s.speaker_id, s.phrase_id, spec.speakers, spec.phrases
                )));
            }
            Ok(Example {
                sequence: s.clone(),
                label: spec.class_of(s.speaker_id, s.phrase_id),
            })
        })
        .collect()
}

/// Embeddings of every utterance plus one length-normalized mean per
/// enrollment model, keyed by id.
pub fn embed_for_trials(
    model: &Model,
    utterances: &[FeatureSequence],
    enrollments: &[Enrollment],
) -> Result<HashMap<String, Vec<f64>>> {
    let mut table = HashMap::with_capacity(utterances.len() + enrollments.len());
    for u in utterances {
        table.insert(u.utterance_id.clone(), model.embed(u)?);
    }
    for e in enrollments {
        let sessions = e
            .utterances
            .iter()
            .map(|id| table.get(id).cloned().ok_or_else(|| Error::MissingId(id.clone())))
            .collect::<Result<Vec<_>>>()?;
        table.insert(e.model_id.clone(), enroll_model(&sessions)?);
    }
    Ok(table)
}

/// Scores each named trial list and computes its metrics.
pub fn evaluate_conditions(
    embeddings: &HashMap<String, Vec<f64>>,
    conditions: &[(String, Vec<Trial>)],
) -> Result<Vec<(String, ConditionMetrics)>> {
    let mut set = TrialSet {
        trials: Vec::new(),
        embeddings: embeddings.clone(),
    };
    let mut rows = Vec::with_capacity(conditions.len());
    for (name, trials) in conditions {
        set.trials = trials.clone();
        let scored = score_trials(&set)?;
        rows.push((name.clone(), evaluate(&score_set(&scored))?));
    }
    Ok(rows)
}

/// In-memory evaluation of a model on a generated corpus.
pub fn evaluate_corpus(model: &Model, corpus: &Corpus) -> Result<Vec<(String, ConditionMetrics)>> {
    let table = embed_for_trials(model, &corpus.eval, &corpus.enrollments)?;
    evaluate_conditions(&table, &corpus.conditions)
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "{} exists and is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_split(seqs: &[FeatureSequence], out: &Path, manifest: &str) -> Result<()> {
    let mut entries = Vec::with_capacity(seqs.len());
    for s in seqs {
        let rel = PathBuf::from(FEATURE_DIR).join(format!("{}.tpf", s.utterance_id));
        save_features(s, &out.join(&rel))?;
        entries.push(ManifestEntry {
            utterance_id: s.utterance_id.clone(),
            speaker_id: s.speaker_id,
            phrase_id: s.phrase_id,
            path: rel,
        });
    }
    write_manifest(&entries, &out.join(manifest))
}

/// Writes the corpus described by `config.corpus` under `out`: manifests,
/// feature files, enrollments, one trial file per condition and a copy of
/// the corpus spec.
pub fn cmd_gen_data(config: &RunConfig, out: &Path, force: bool) -> Result<Corpus> {
    config.corpus.validate()?;
    prepare_out_dir(out, force)?;
    let corpus = gen_synthetic_corpus(&config.corpus)?;
    let features = out.join(FEATURE_DIR);
    fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    write_split(&corpus.train, out, TRAIN_MANIFEST)?;
    write_split(&corpus.eval, out, EVAL_MANIFEST)?;
    write_enrollments(&corpus.enrollments, &out.join(ENROLLMENTS))?;
    for (name, trials) in &corpus.conditions {
        write_trials(trials, &out.join(format!("trials_{name}.txt")))?;
    }
    let spec = toml::to_string(&config.corpus).expect("corpus spec serializes");
    let path = out.join(CORPUS_CONFIG);
    fs::write(&path, spec).map_err(|e| Error::io(&path, e))?;
    Ok(corpus)
}

/// Loads every utterance of a manifest, restoring speaker and phrase ids.
pub fn load_split(corpus_dir: &Path, manifest: &str, spec: &CorpusSpec) -> Result<Vec<FeatureSequence>> {
    let entries = read_manifest(&corpus_dir.join(manifest))?;
    entries
        .into_iter()
        .map(|e| {
            let path = if e.path.is_absolute() { e.path } else { corpus_dir.join(e.path) };
            let mut seq = load_features_checked(&path, spec.feature_dim, spec.position_dim())?;
            seq.utterance_id = e.utterance_id;
            seq.speaker_id = e.speaker_id;
            seq.phrase_id = e.phrase_id;
            Ok(seq)
        })
        .collect()
}

/// Training log header and rows: tab-separated, one row per epoch.
pub fn log_header(two_models: bool) -> &'static str {
    if two_models {
        "epoch\talpha\tlr\tloss_t\tloss_s"
    } else {
        "epoch\talpha\tlr\tloss_t"
    }
}

pub fn log_row(log: &EpochLog) -> String {
    let mut row = format!("{}\t{}\t{:?}\t{:?}", log.epoch, log.alpha, log.lr, log.loss_t);
    if let Some(s) = log.loss_s {
        row.push_str(&format!("\t{s:?}"));
    }
    row
}

/// Trains on the corpus in `corpus_dir`, writing the checkpoint to `out`
/// and the log next to it (`<out>.log`). A non-finite loss stops training;
/// the offending step is written to the log before the error is returned.
pub fn cmd_train(config: &RunConfig, corpus_dir: &Path, out: &Path) -> Result<Vec<EpochLog>> {
    config.validate()?;
    let sequences = load_split(corpus_dir, TRAIN_MANIFEST, &config.corpus)?;
    let data = training_examples(&config.corpus, &sequences)?;
    let mut trainer = Trainer::new(config.clone())?;
    let log_path = log_path_for(out);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let two = matches!(trainer.models, crate::train::Models::Pair(_));
    writeln!(log, "{}", log_header(two)).map_err(|e| Error::io(&log_path, e))?;
    let mut logs = Vec::new();
    while !trainer.is_finished() {
        match trainer.run_epoch(&data, |_, _| {}) {
            Ok(row) => {
                writeln!(log, "{}", log_row(&row)).map_err(|e| Error::io(&log_path, e))?;
                logs.push(row);
            }
            Err(e) => {
                writeln!(log, "# aborted: {e}").map_err(|e| Error::io(&log_path, e))?;
                return Err(e);
            }
        }
    }
    save_checkpoint(&trainer, out)?;
    Ok(logs)
}

pub fn log_path_for(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log");
    checkpoint.with_file_name(name)
}

/// Scores the given trial files (default: every `trials_*.txt` in the
/// corpus) with the checkpoint's embedding model, the student for a
/// teacher–student run. Writes `scores_<name>.txt`, `report.txt` and
/// `metrics.toml` to `out`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    corpus_dir: &Path,
    trial_files: &[PathBuf],
    out: &Path,
) -> Result<Vec<(String, ConditionMetrics)>> {
    let trainer = load_checkpoint(checkpoint)?;
    let model = trainer.models.embedder();
    let utterances = load_split(corpus_dir, EVAL_MANIFEST, &trainer.config.corpus)?;
    let enrollments = read_enrollments(&corpus_dir.join(ENROLLMENTS))?;
    let files = if trial_files.is_empty() {
        default_trial_files(corpus_dir)?
    } else {
        trial_files.to_vec()
    };
    let mut conditions = Vec::with_capacity(files.len());
    for f in &files {
        conditions.push((condition_name(f), read_trials(f)?));
    }
    let table = embed_for_trials(model, &utterances, &enrollments)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut set = TrialSet {
        trials: Vec::new(),
        embeddings: table,
    };
    let mut rows = Vec::with_capacity(conditions.len());
    for (name, trials) in conditions {
        set.trials = trials;
        let scored = score_trials(&set)?;
        write_scores(&scored, &out.join(format!("scores_{name}.txt")))?;
        rows.push((name, evaluate(&score_set(&scored))?));
    }
    let report = out.join("report.txt");
    fs::write(&report, format_report(&rows)).map_err(|e| Error::io(&report, e))?;
    let kv = out.join("metrics.toml");
    fs::write(&kv, format_report_kv(&rows)).map_err(|e| Error::io(&kv, e))?;
    Ok(rows)
}

fn default_trial_files(corpus_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(corpus_dir)
        .map_err(|e| Error::io(corpus_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trials_") && n.ends_with(".txt"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no trials_*.txt files in {}", corpus_dir.display())));
    }
    Ok(files)
}

fn condition_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.strip_prefix("trials_").unwrap_or(&stem).to_string()
}

/// Attention of the last MSA layer for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionExport {
    /// Per head, the full `T' × T'` attention matrix.
    pub heads: Vec<crate::tensor::Tensor>,
    /// Per head, the class-token row (empty for models without tokens).
    pub cls_rows: Vec<Vec<f64>>,
    /// Across-head sum of the class-token rows.
    pub cls_sum: Vec<f64>,
}

pub fn attention_export(model: &Model, seq: &FeatureSequence) -> Result<AttentionExport> {
    let ins = model.inspect(seq)?;
    let record = ins.trace.attention_record(&ins.graph);
    let heads = record
        .last_layer()
        .ok_or_else(|| Error::Config("model has no attention layers".into()))?
        .to_vec();
    let (cls_rows, cls_sum) = match ins.token_row {
        Some(row) => {
            let view = supervector_from_trace(&ins.graph, &ins.trace, row)?;
            let mut sum = vec![0.0; view.attention_rows[0].len()];
            for r in &view.attention_rows {
                sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
            }
            (view.attention_rows, sum)
        }
        None => (Vec::new(), Vec::new()),
    };
    Ok(AttentionExport {
        heads,
        cls_rows,
        cls_sum,
    })
}

fn format_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> String {
    let mut s = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&cells.join(" "));
        s.push('\n');
    }
    s
}

/// Writes `head_<h>.txt` (full matrices), `cls_rows.txt` (one class-token
/// row per head) and `cls_sum.txt` (their sum) for the last MSA layer.
/// Values are printed in shortest round-trip form.
pub fn cmd_inspect_attention(checkpoint: &Path, utterance: &Path, out: &Path) -> Result<AttentionExport> {
    let trainer = load_checkpoint(checkpoint)?;
    let model = trainer.models.embedder();
    let spec = &trainer.config.corpus;
    let seq = load_features_checked(utterance, spec.feature_dim, spec.position_dim())?;
    let export = attention_export(model, &seq)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: String, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    for (h, a) in export.heads.iter().enumerate() {
        let t = a.rows();
        write(format!("head_{h}.txt"), format_rows((0..t).map(|r| a.row_slice(r))))?;
    }
    if !export.cls_rows.is_empty() {
        write("cls_rows.txt".into(), format_rows(export.cls_rows.iter().map(Vec::as_slice)))?;
        write("cls_sum.txt".into(), format_rows(std::iter::once(export.cls_sum.as_slice())))?;
    }
    Ok(export)
}

/// Parses a file written by [`cmd_inspect_attention`].
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| {
            l.split_whitespace()
                .map(|c| {
                    c.parse::<f64>().map_err(|_| Error::Malformed {
                        path: path.to_path_buf(),
                        detail: format!("not a number: {c}"),
                    })
                })
                .collect()
        })
        .collect()
}
