//! Experiment orchestration: splits, training stages, evaluation,
//! aggregation, and plot data.
//!
//! Every stage persists its artifacts under the output directory and is
//! skipped on rerun when they already exist, so interrupted experiments
//! resume where they stopped and individual stages can be re-driven from
//! the CLI. One output directory belongs to one resolved configuration;
//! mixing is refused via a marker file.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, RunMode};

use crate::data::{
    load_dataset, make_open_set_split, pad_and_normalize, DatasetSpec, OpenSetSplit,
};
use crate::error::{Error, Result};
use crate::finetune::{
    export_content_embeddings, finetune_ce, finetune_triplet, read_embedding_csv,
    write_embedding_csv, EmbeddingRow, ExportSample, FinetuneConfig, FinetuneLoss, TrainSample,
};
use crate::metrics::{f1_report, iir, pearson, roc_auc_at_fpr, EvalReport, Truth, Verdict};
use crate::network::{checkpoint, EncoderConfig, ModelState, TransformHeadInput};
use crate::osr::{
    cluster_contents, compute_centroids, compute_threshold, CentroidMode, CentroidModel,
};
use crate::pretrain::{pretrain, PretrainConfig, PretrainMethod};
use crate::transforms::rotation_family;

/// Pipeline stages in execution order; each CLI subcommand runs the
/// pipeline up to one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Split,
    Pretrain,
    Finetune,
    Cluster,
    Evaluate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub method: PretrainMethod,
    pub loss: FinetuneLoss,
    pub mode: RunMode,
    pub split_seed: u64,
    pub run_seed: u64,
    pub checkpoint_path: PathBuf,
    pub embedding_path: PathBuf,
    /// Present once the evaluate stage has run.
    pub eval: Option<EvalReport>,
    /// Set when any stage of this run failed; the experiment continues.
    pub error: Option<String>,
}

struct PreparedSplit {
    split: OpenSetSplit,
    /// (sample_id, padded image, dataset label) for known-class training.
    train: Vec<(u32, Array2<f32>, usize)>,
    test: Vec<ExportSample>,
}

pub fn run_experiment(cfg: &ExperimentConfig, upto: Stage) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    claim_output_dir(cfg)?;
    let spec = DatasetSpec::by_name(&cfg.dataset)?;
    let dataset = load_dataset(&spec, &cfg.data_dir)?;

    let mut records = Vec::new();
    for &split_seed in &cfg.split_seeds {
        let split = make_open_set_split(&dataset, split_seed)?;
        let manifest = split.manifest(&cfg.dataset);
        let manifest_path = cfg.output_dir.join(format!("split_{split_seed}.json"));
        std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
        if upto == Stage::Split {
            continue;
        }
        let prepared = prepare_split(cfg, &spec, split)?;
        for run_idx in 0..cfg.runs {
            let record = match run_one(cfg, &spec, &prepared, run_idx, upto) {
                Ok(r) => r,
                Err(e) => failed_record(cfg, &prepared.split, run_idx, e),
            };
            records.push(record);
        }
    }
    Ok(records)
}

/// Refuse to mix artifacts from different configurations in one
/// directory; stale intermediate files would otherwise be reused.
fn claim_output_dir(cfg: &ExperimentConfig) -> Result<()> {
    let marker = cfg.output_dir.join("config.json");
    let hash = cfg.hash();
    if marker.exists() {
        let existing: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&marker)?)?;
        let prior = existing["hash"].as_str().unwrap_or_default();
        if prior != hash {
            return Err(Error::Config(format!(
                "output dir {} was produced by a different configuration ({prior} != {hash})",
                cfg.output_dir.display()
            )));
        }
        return Ok(());
    }
    let body = serde_json::json!({ "hash": hash, "config": cfg });
    std::fs::write(&marker, serde_json::to_string_pretty(&body)?)?;
    Ok(())
}

fn prepare_split(
    cfg: &ExperimentConfig,
    spec: &DatasetSpec,
    split: OpenSetSplit,
) -> Result<PreparedSplit> {
    let mut train = Vec::with_capacity(split.train_set.len());
    for img in &split.train_set {
        train.push((img.sample_id, pad_and_normalize(img, spec)?, img.label));
    }
    if let Some(limit) = cfg.limit {
        train.truncate(limit);
    }
    let mut test = Vec::with_capacity(split.test_set.len());
    for ts in &split.test_set {
        test.push(ExportSample {
            sample_id: ts.image.sample_id,
            image: pad_and_normalize(&ts.image, spec)?,
            label: ts.image.label,
            is_unknown: ts.is_unknown,
        });
    }
    if let Some(limit) = cfg.test_limit {
        test.truncate(limit);
    }
    Ok(PreparedSplit { split, train, test })
}

fn run_id(cfg: &ExperimentConfig, split_seed: u64, run_idx: usize) -> String {
    let mode = match cfg.mode {
        RunMode::Supervised => "sup",
        RunMode::Unsupervised => "unsup",
    };
    format!(
        "{:?}_{:?}_{mode}_s{split_seed}_r{run_idx}",
        cfg.method, cfg.loss
    )
    .to_lowercase()
}

fn failed_record(
    cfg: &ExperimentConfig,
    split: &OpenSetSplit,
    run_idx: usize,
    err: Error,
) -> RunRecord {
    RunRecord {
        run_id: run_id(cfg, split.split_seed, run_idx),
        config_hash: cfg.hash(),
        method: cfg.method,
        loss: cfg.loss,
        mode: cfg.mode,
        split_seed: split.split_seed,
        run_seed: cfg.run_seed(split.split_seed, run_idx),
        checkpoint_path: PathBuf::new(),
        embedding_path: PathBuf::new(),
        eval: None,
        error: Some(err.to_string()),
    }
}

fn encoder_config(cfg: &ExperimentConfig, spec: &DatasetSpec, n_classes: usize) -> EncoderConfig {
    // the decoupled method carries a 3-dim transformation part; all
    // comparison methods use a pure 6-dim content representation
    let (transform_dim, head) = match cfg.method {
        PretrainMethod::Fd => (3, TransformHeadInput::TransformPart),
        _ => (0, TransformHeadInput::FullRep),
    };
    EncoderConfig {
        input_hw: spec.padded_dims.0,
        conv_channels: vec![32, 64],
        fc_widths: vec![256, 128],
        content_dim: 6,
        transform_dim,
        n_transforms: 4,
        n_classes,
        dropout_keep: cfg.dropout_keep,
        t_head_input: head,
    }
}

fn run_one(
    cfg: &ExperimentConfig,
    spec: &DatasetSpec,
    prepared: &PreparedSplit,
    run_idx: usize,
    upto: Stage,
) -> Result<RunRecord> {
    let split = &prepared.split;
    let split_seed = split.split_seed;
    let run_seed = cfg.run_seed(split_seed, run_idx);
    let id = run_id(cfg, split_seed, run_idx);
    let out = &cfg.output_dir;
    let hash = cfg.hash();

    let report_path = out.join(format!("report_{id}.json"));
    if let Ok(text) = std::fs::read_to_string(&report_path) {
        if let Ok(rec) = serde_json::from_str::<RunRecord>(&text) {
            if rec.config_hash == hash && rec.error.is_none() {
                return Ok(rec);
            }
        }
    }

    let enc_cfg = encoder_config(cfg, spec, split.known_class_ids.len());

    // --- pretrain ---
    let pre_tag = if cfg.share_pretrain {
        format!("s{split_seed}_shared")
    } else {
        format!("s{split_seed}_r{run_idx}")
    };
    let pre_path = out.join(format!(
        "pre_{}_{pre_tag}_{}.ckpt",
        cfg.method,
        cfg.pretrain_hash()
    ));
    let pretrain_seed = if cfg.share_pretrain {
        cfg.run_seed(split_seed, 0)
    } else {
        run_seed
    };
    let mut model = if cfg.method == PretrainMethod::None {
        let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
        ModelState::<f32>::new(enc_cfg.clone(), &mut rng)?
    } else if pre_path.exists() {
        checkpoint::load(&pre_path)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(pretrain_seed);
        let mut model = ModelState::<f32>::new(enc_cfg.clone(), &mut rng)?;
        let pcfg = PretrainConfig {
            method: cfg.method,
            epochs: cfg.pretrain_epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            barlow_lambda: cfg.barlow_lambda,
            fd_combined: false,
            seed: pretrain_seed,
        };
        let originals: Vec<(u32, Array2<f32>)> = prepared
            .train
            .iter()
            .map(|(sid, img, _)| (*sid, img.clone()))
            .collect();
        let loss_path = out.join(format!("losses_pre_{}_{pre_tag}.csv", cfg.method));
        let mut loss_log = String::from("epoch,content_loss,transform_loss\n");
        pretrain(&mut model, &originals, &rotation_family(), &pcfg, &mut |s| {
            writeln!(loss_log, "{},{},{}", s.epoch, s.content_loss, s.transform_loss).unwrap();
            // flush per epoch so long runs are observable
            let _ = std::fs::write(&loss_path, &loss_log);
        })?;
        checkpoint::save(&mut model, &pre_path)?;
        model
    };
    let mut record = RunRecord {
        run_id: id.clone(),
        config_hash: hash.clone(),
        method: cfg.method,
        loss: cfg.loss,
        mode: cfg.mode,
        split_seed,
        run_seed,
        checkpoint_path: pre_path.clone(),
        embedding_path: PathBuf::new(),
        eval: None,
        error: None,
    };
    if upto == Stage::Pretrain {
        return Ok(record);
    }

    // --- finetune (supervised only) ---
    if cfg.mode == RunMode::Supervised {
        let ft_path = out.join(format!("model_{id}.ckpt"));
        if ft_path.exists() {
            model = checkpoint::load(&ft_path)?;
        } else {
            let train_samples: Vec<TrainSample> = prepared
                .train
                .iter()
                .map(|(sid, img, label)| TrainSample {
                    sample_id: *sid,
                    image: img.clone(),
                    class_index: split.known_index(*label).expect("train label is known"),
                })
                .collect();
            let fcfg = FinetuneConfig {
                loss: cfg.loss,
                epochs: cfg.finetune_epochs,
                batch_size: cfg.batch_size,
                lr: cfg.lr,
                margin: cfg.margin,
                k_per_class: cfg.k_per_class,
                seed: run_seed ^ 0x5eed_0000,
            };
            let stats = match cfg.loss {
                FinetuneLoss::Ce => finetune_ce(&mut model, &train_samples, &fcfg)?,
                FinetuneLoss::Triplet => finetune_triplet(&mut model, &train_samples, &fcfg)?,
                FinetuneLoss::None => unreachable!("validated"),
            };
            let mut loss_log = String::from("epoch,loss\n");
            for (e, l) in stats.epoch_losses.iter().enumerate() {
                writeln!(loss_log, "{e},{l}").unwrap();
            }
            std::fs::write(out.join(format!("losses_ft_{id}.csv")), loss_log)?;
            if stats.skipped_batches > 0 {
                eprintln!(
                    "warning: {id}: skipped {} single-class triplet batches",
                    stats.skipped_batches
                );
            }
            checkpoint::save(&mut model, &ft_path)?;
        }
        record.checkpoint_path = ft_path;
    }
    if upto == Stage::Finetune {
        return Ok(record);
    }

    // --- embeddings ---
    let train_emb_path = out.join(format!("emb_train_{id}.csv"));
    let test_emb_path = out.join(format!("embeddings_{id}.csv"));
    let train_rows = if train_emb_path.exists() {
        read_embedding_csv(&train_emb_path)?
    } else {
        let samples: Vec<ExportSample> = prepared
            .train
            .iter()
            .map(|(sid, img, label)| ExportSample {
                sample_id: *sid,
                image: img.clone(),
                label: *label,
                is_unknown: false,
            })
            .collect();
        let rows = export_content_embeddings(&mut model, &samples)?;
        write_embedding_csv(&rows, &train_emb_path)?;
        rows
    };
    let test_rows = if test_emb_path.exists() {
        read_embedding_csv(&test_emb_path)?
    } else {
        let rows = export_content_embeddings(&mut model, &prepared.test)?;
        write_embedding_csv(&rows, &test_emb_path)?;
        rows
    };
    record.embedding_path = test_emb_path.clone();

    // class-head probabilities for classification-loss runs (Eq. 6 uses
    // the decision layer's output there); persisted so evaluation is
    // recomputable from artifacts
    let probs_path = out.join(format!("probs_{id}.csv"));
    let use_class_head = cfg.mode == RunMode::Supervised && cfg.loss == FinetuneLoss::Ce;
    let probs: Option<BTreeMap<u32, Vec<f64>>> = if use_class_head {
        if probs_path.exists() {
            Some(read_probs_csv(&probs_path)?)
        } else {
            let map = class_head_probs(&mut model, &prepared.test)?;
            write_probs_csv(&map, &probs_path)?;
            Some(map)
        }
    } else {
        None
    };

    // --- centroids + threshold ---
    let cent_path = out.join(format!("centroids_{id}.json"));
    let cmodel: CentroidModel = if cent_path.exists() {
        serde_json::from_str(&std::fs::read_to_string(&cent_path)?)?
    } else {
        let train_zc: Vec<Vec<f64>> = train_rows.iter().map(|r| r.zc.clone()).collect();
        let centroids = match cfg.mode {
            RunMode::Supervised => {
                let labels: Vec<usize> = train_rows.iter().map(|r| r.label).collect();
                compute_centroids(&train_zc, &labels)?
            }
            RunMode::Unsupervised => cluster_contents(&train_zc, cfg.k, run_seed)?,
        };
        let mut cmodel = CentroidModel {
            mode: match cfg.mode {
                RunMode::Supervised => CentroidMode::Supervised,
                RunMode::Unsupervised => CentroidMode::Unsupervised,
            },
            threshold: 0.0,
            centroids,
        };
        cmodel.threshold = compute_threshold(&cmodel, &train_zc, 0.99)?;
        std::fs::write(&cent_path, serde_json::to_string_pretty(&cmodel)?)?;
        cmodel
    };
    if upto == Stage::Cluster {
        return Ok(record);
    }

    // --- evaluate ---
    let eval = evaluate_run(
        &test_rows,
        &train_rows,
        &cmodel,
        probs.as_ref(),
        &split.known_class_ids,
    )?;
    let hist = outlier_histogram_data(&test_rows, &cmodel, 50)?;
    write_hist_csv(&hist, &out.join(format!("hist_{id}.csv")))?;
    record.eval = Some(eval);
    std::fs::write(&report_path, serde_json::to_string_pretty(&record)?)?;
    Ok(record)
}

/// Class-head softmax over the content part, keyed by sample id.
fn class_head_probs(
    model: &mut ModelState<f32>,
    samples: &[ExportSample],
) -> Result<BTreeMap<u32, Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = BTreeMap::new();
    for chunk in samples.chunks(256) {
        let x = crate::network::batch_images(
            &chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>(),
        );
        let rep = model.embed(&x, &mut rng);
        let zc = model.content_of(&rep);
        let logits = model.class_head.infer(&zc);
        for (row, s) in logits.outer_iter().zip(chunk) {
            let logits64: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let max = logits64.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits64.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.insert(s.sample_id, exps.into_iter().map(|e| e / sum).collect());
        }
    }
    Ok(out)
}

fn write_probs_csv(map: &BTreeMap<u32, Vec<f64>>, path: &Path) -> Result<()> {
    let k = map.values().next().map_or(0, Vec::len);
    let mut out = String::from("sample_id");
    for i in 0..k {
        write!(out, ",p{i}").unwrap();
    }
    out.push('\n');
    for (sid, ps) in map {
        write!(out, "{sid}").unwrap();
        for p in ps {
            write!(out, ",{p}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_probs_csv(path: &Path) -> Result<BTreeMap<u32, Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let bad = || Error::DataLoad {
            path: path.to_path_buf(),
            reason: "bad probability row".into(),
        };
        let sid: u32 = fields.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let ps: Vec<f64> = fields
            .map(|f| f.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        map.insert(sid, ps);
    }
    Ok(map)
}

/// Compute the full evaluation report from persisted artifacts alone.
///
/// For unsupervised centroid models, cluster ids are translated to
/// dataset labels by majority vote over the training table — labels are
/// used only here, for metric computation.
pub fn evaluate_run(
    test_rows: &[EmbeddingRow],
    train_rows: &[EmbeddingRow],
    cmodel: &CentroidModel,
    probs: Option<&BTreeMap<u32, Vec<f64>>>,
    known_class_ids: &[usize],
) -> Result<EvalReport> {
    if test_rows.is_empty() {
        return Err(Error::Eval("empty test embedding table".into()));
    }
    let cluster_to_label: Option<BTreeMap<usize, usize>> = match cmodel.mode {
        CentroidMode::Supervised => None,
        CentroidMode::Unsupervised => Some(majority_label_map(train_rows, cmodel)?),
    };

    let mut scores = Vec::with_capacity(test_rows.len());
    let mut is_unknown = Vec::with_capacity(test_rows.len());
    let mut preds = Vec::with_capacity(test_rows.len());
    let mut truths = Vec::with_capacity(test_rows.len());
    for row in test_rows {
        let p = probs
            .and_then(|m| m.get(&row.sample_id))
            .map(|v| v.as_slice());
        let pred = cmodel.predict(&row.zc, p)?;
        scores.push(pred.outlier_score);
        is_unknown.push(row.is_unknown);
        let verdict = match (pred.verdict, &cluster_to_label) {
            (Verdict::Known(c), Some(map)) => {
                Verdict::Known(*map.get(&c).unwrap_or(&usize::MAX))
            }
            (v, _) => v,
        };
        preds.push(verdict);
        truths.push(Truth {
            label: row.label,
            is_unknown: row.is_unknown,
        });
    }

    let auc_full = roc_auc_at_fpr(&scores, &is_unknown, 1.0)?;
    let auc_at_10fpr = roc_auc_at_fpr(&scores, &is_unknown, 0.1)?;
    let (f1_known, f1_unknown, f1_overall) = f1_report(&preds, &truths, known_class_ids)?;

    // representation-quality ratio over known-class test embeddings
    let known_zc: Vec<Vec<f64>> = test_rows
        .iter()
        .filter(|r| !r.is_unknown)
        .map(|r| r.zc.clone())
        .collect();
    let known_labels: Vec<usize> = test_rows
        .iter()
        .filter(|r| !r.is_unknown)
        .map(|r| r.label)
        .collect();
    let (iir_value, per_class_iir) = iir(&known_zc, &known_labels)?;

    Ok(EvalReport {
        auc_full,
        auc_at_10fpr,
        f1_known,
        f1_unknown,
        f1_overall,
        iir: iir_value,
        per_class_iir,
    })
}

/// Majority dataset label of each centroid's nearest-assigned training
/// rows. Empty clusters map to an id no truth label can match.
fn majority_label_map(
    train_rows: &[EmbeddingRow],
    cmodel: &CentroidModel,
) -> Result<BTreeMap<usize, usize>> {
    let mut votes: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for row in train_rows {
        let probs = cmodel.class_probabilities(&row.zc)?;
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let cid = cmodel.centroids[best].id;
        *votes.entry(cid).or_default().entry(row.label).or_default() += 1;
    }
    let mut map = BTreeMap::new();
    for c in &cmodel.centroids {
        let label = votes
            .get(&c.id)
            .and_then(|v| v.iter().max_by_key(|(_, &n)| n).map(|(&l, _)| l))
            .unwrap_or(usize::MAX);
        map.insert(c.id, label);
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// Histogram, aggregation, correlation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramData {
    pub lo: f64,
    pub hi: f64,
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
}

/// Bin the outlier scores of known and unknown test samples over a shared
/// range.
pub fn outlier_histogram_data(
    rows: &[EmbeddingRow],
    cmodel: &CentroidModel,
    bins: usize,
) -> Result<HistogramData> {
    if bins < 1 {
        return Err(Error::Eval("need at least one histogram bin".into()));
    }
    if rows.is_empty() {
        return Err(Error::Eval("empty embedding table".into()));
    }
    let scores: Vec<(f64, bool)> = rows
        .iter()
        .map(|r| Ok((cmodel.outlier_score(&r.zc)?, r.is_unknown)))
        .collect::<Result<_>>()?;
    let lo = scores.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let hi = scores.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut known = vec![0usize; bins];
    let mut unknown = vec![0usize; bins];
    for (s, unk) in scores {
        let b = (((s - lo) / width) as usize).min(bins - 1);
        if unk {
            unknown[b] += 1;
        } else {
            known[b] += 1;
        }
    }
    Ok(HistogramData {
        lo,
        hi,
        known,
        unknown,
    })
}

fn write_hist_csv(h: &HistogramData, path: &Path) -> Result<()> {
    let bins = h.known.len();
    let width = if h.hi > h.lo {
        (h.hi - h.lo) / bins as f64
    } else {
        1.0
    };
    let mut out = String::from("bin_lo,bin_hi,known,unknown\n");
    for i in 0..bins {
        writeln!(
            out,
            "{},{},{},{}",
            h.lo + i as f64 * width,
            h.lo + (i + 1) as f64 * width,
            h.known[i],
            h.unknown[i]
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: PretrainMethod,
    pub loss: FinetuneLoss,
    pub mode: RunMode,
    pub runs: usize,
    pub failed: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub auc10_mean: f64,
    pub auc10_std: f64,
    pub f1_overall_mean: f64,
    pub f1_overall_std: f64,
    pub f1_unknown_mean: f64,
    pub f1_unknown_std: f64,
    pub f1_known_mean: f64,
    pub f1_known_std: f64,
    pub iir_mean: f64,
    pub iir_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

/// Mean ± sample standard deviation per metric, grouped by
/// (method, loss, mode). Failed runs are counted but excluded from the
/// statistics.
pub fn aggregate_reports(records: &[RunRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::Eval("no run records to aggregate".into()));
    }
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = format!("{:?}|{:?}|{:?}", r.method, r.loss, r.mode);
        groups.entry(key).or_default().push(r);
    }
    let mut rows = Vec::new();
    for group in groups.values() {
        let ok: Vec<&EvalReport> = group.iter().filter_map(|r| r.eval.as_ref()).collect();
        let failed = group.iter().filter(|r| r.error.is_some()).count();
        let pick = |f: fn(&EvalReport) -> f64| -> (f64, f64) {
            if ok.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                mean_std(&ok.iter().map(|e| f(e)).collect::<Vec<_>>())
            }
        };
        let (auc_mean, auc_std) = pick(|e| e.auc_full);
        let (auc10_mean, auc10_std) = pick(|e| e.auc_at_10fpr);
        let (f1o_mean, f1o_std) = pick(|e| e.f1_overall);
        let (f1u_mean, f1u_std) = pick(|e| e.f1_unknown);
        let (f1k_mean, f1k_std) = pick(|e| e.f1_known);
        let (iir_mean, iir_std) = pick(|e| e.iir);
        rows.push(SummaryRow {
            method: group[0].method,
            loss: group[0].loss,
            mode: group[0].mode,
            runs: group.len(),
            failed,
            auc_mean,
            auc_std,
            auc10_mean,
            auc10_std,
            f1_overall_mean: f1o_mean,
            f1_overall_std: f1o_std,
            f1_unknown_mean: f1u_mean,
            f1_unknown_std: f1u_std,
            f1_known_mean: f1k_mean,
            f1_known_std: f1k_std,
            iir_mean,
            iir_std,
        });
    }
    Ok(rows)
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = String::from(
        "method,loss,mode,runs,failed,auc_mean,auc_std,auc10_mean,auc10_std,\
         f1_overall_mean,f1_overall_std,f1_unknown_mean,f1_unknown_std,\
         f1_known_mean,f1_known_std,iir_mean,iir_std\n",
    );
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.loss,
            r.mode,
            r.runs,
            r.failed,
            r.auc_mean,
            r.auc_std,
            r.auc10_mean,
            r.auc10_std,
            r.f1_overall_mean,
            r.f1_overall_std,
            r.f1_unknown_mean,
            r.f1_unknown_std,
            r.f1_known_mean,
            r.f1_known_std,
            r.iir_mean,
            r.iir_std
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Pearson correlation between overall F1 and IIR across runs, plus the
/// (IIR, F1) scatter points.
pub fn correlation_report(records: &[RunRecord]) -> Result<(f64, Vec<(f64, f64)>)> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| r.eval.as_ref())
        .map(|e| (e.iir, e.f1_overall))
        .collect();
    if points.len() < 2 {
        return Err(Error::Eval(
            "need at least two evaluated runs for a correlation".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let r = pearson(&xs, &ys)?;
    Ok((r, points))
}

pub fn write_scatter_csv(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("iir,f1_overall\n");
    for (x, y) in points {
        writeln!(out, "{x},{y}").unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load every persisted run record under an output directory.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::DataLoad {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map_or(false, |n| n.starts_with("report_") && n.ends_with(".json"))
        })
        .collect();
    paths.sort();
    for p in paths {
        records.push(serde_json::from_str(&std::fs::read_to_string(&p)?)?);
    }
    Ok(records)
}
