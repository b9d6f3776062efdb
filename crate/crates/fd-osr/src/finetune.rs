//! Supervised refinement of the content features, plus embedding export.
//!
//! Stage 2 sees only untransformed originals — these functions do not
//! even take a transformation family, so the views pipeline cannot be
//! invoked here. The content decoder and transformation head are left
//! untouched; training updates flow through the encoder and (for
//! cross-entropy) a class head attached to the content part.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, NdFloat};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::layers::{c, Mode};
use crate::network::{batch_images, ModelState, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FinetuneLoss {
    Ce,
    Triplet,
    /// Skip stage 2 entirely (unsupervised pipeline).
    None,
}

impl std::fmt::Display for FinetuneLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FinetuneLoss::Ce => "CE",
            FinetuneLoss::Triplet => "TRIPLET",
            FinetuneLoss::None => "NONE",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FinetuneLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CE" => Ok(FinetuneLoss::Ce),
            "TRIPLET" => Ok(FinetuneLoss::Triplet),
            "NONE" => Ok(FinetuneLoss::None),
            other => Err(Error::Config(format!("unknown finetune loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub loss: FinetuneLoss,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    /// Samples drawn per class in each class-balanced triplet batch.
    pub k_per_class: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            loss: FinetuneLoss::Ce,
            epochs: 50,
            batch_size: 64,
            lr: 0.001,
            margin: 0.2,
            k_per_class: 4,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.loss == FinetuneLoss::Triplet && self.margin <= 0.0 {
            return Err(Error::Config("triplet margin must be positive".into()));
        }
        Ok(())
    }
}

/// An untransformed training image with its known-class index.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub sample_id: u32,
    pub image: Array2<f32>,
    pub class_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneStats {
    pub epoch_losses: Vec<f64>,
    /// Triplet batches skipped because they held fewer than two classes.
    pub skipped_batches: usize,
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Batch-all triplet loss over squared Euclidean distances: the mean of
/// max(0, d(a,p)^2 - d(a,n)^2 + margin) over every valid (anchor,
/// positive, negative) triple in the batch. Returns `None` when the batch
/// has no valid triplet (fewer than two classes, or no repeated class).
pub fn triplet_loss<T: NdFloat>(
    zc: &Array2<T>,
    labels: &[usize],
    margin: T,
) -> Option<(T, Array2<T>)> {
    let n = zc.nrows();
    assert_eq!(n, labels.len());
    // pairwise squared distances
    let mut d2 = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (&zc.row(i) - &zc.row(j)).mapv(|v| v * v).sum();
            d2[[i, j]] = d;
            d2[[j, i]] = d;
        }
    }
    let mut loss_sum = T::zero();
    let mut grad = Array2::<T>::zeros(zc.raw_dim());
    let mut count = 0u64;
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                count += 1;
                let h = d2[[a, p]] - d2[[a, neg]] + margin;
                if h > T::zero() {
                    loss_sum = loss_sum + h;
                    for d in 0..zc.ncols() {
                        let za = zc[[a, d]];
                        let zp = zc[[p, d]];
                        let zn = zc[[neg, d]];
                        let two = c::<T>(2.0);
                        grad[[a, d]] = grad[[a, d]] + two * (zn - zp);
                        grad[[p, d]] = grad[[p, d]] + two * (zp - za);
                        grad[[neg, d]] = grad[[neg, d]] + two * (za - zn);
                    }
                }
            }
        }
    }
    if count == 0 {
        return None;
    }
    let cf = c::<T>(count as f64);
    Some((loss_sum / cf, grad.mapv(|g| g / cf)))
}

// ---------------------------------------------------------------------------
// Per-batch backward passes
// ---------------------------------------------------------------------------

/// Class-head cross-entropy on the content part. Leaves encoder and
/// class-head gradients set.
pub fn ce_backward<T: NdFloat>(
    model: &mut ModelState<T>,
    x: &ndarray::Array4<T>,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> T {
    let rep = model.encode(x, Mode::Train, rng);
    let zc = model.content_of(&rep);
    let logits = model.class_head.forward(&zc);
    let (loss, g_logits) = crate::pretrain::softmax_cross_entropy(&logits, labels);
    let g_zc = model.class_head.backward(&g_logits);
    let g_rep = model.content_grad_to_rep(&g_zc);
    model.encoder.backward(&g_rep);
    loss
}

/// Triplet loss on the content part. Returns `None` (gradients untouched)
/// when the batch has no valid triplet.
pub fn triplet_backward<T: NdFloat>(
    model: &mut ModelState<T>,
    x: &ndarray::Array4<T>,
    labels: &[usize],
    margin: T,
    rng: &mut ChaCha8Rng,
) -> Option<T> {
    let rep = model.encode(x, Mode::Train, rng);
    let zc = model.content_of(&rep);
    let (loss, g_zc) = triplet_loss(&zc, labels, margin)?;
    let g_rep = model.content_grad_to_rep(&g_zc);
    model.encoder.backward(&g_rep);
    Some(loss)
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

pub fn finetune_ce(
    model: &mut ModelState<f32>,
    train: &[TrainSample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneStats> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Train("empty fine-tuning set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch_images(
                &chunk.iter().map(|&i| train[i].image.clone()).collect::<Vec<_>>(),
            );
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].class_index).collect();
            let loss = ce_backward(model, &x, &labels, &mut rng);
            model.adam_update(&[ParamGroup::Encoder, ParamGroup::ClassHead], cfg.lr as f32);
            sum += loss as f64;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(FinetuneStats {
        epoch_losses,
        skipped_batches: 0,
    })
}

pub fn finetune_triplet(
    model: &mut ModelState<f32>,
    train: &[TrainSample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneStats> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Train("empty fine-tuning set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // group sample indices by class for class-balanced batches
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in train.iter().enumerate() {
        by_class.entry(s.class_index).or_default().push(i);
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    let k = cfg.k_per_class.max(2);
    let p = (cfg.batch_size / k).max(2).min(classes.len());
    let batches_per_epoch = (train.len() + cfg.batch_size - 1) / cfg.batch_size;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut skipped = 0usize;
    for _ in 0..cfg.epochs {
        let mut sum = 0.0f64;
        let mut counted = 0usize;
        for _ in 0..batches_per_epoch {
            // P classes, K samples each (with replacement within a class
            // when it is smaller than K)
            let mut chosen = classes.clone();
            chosen.shuffle(&mut rng);
            chosen.truncate(p);
            let mut idx = Vec::with_capacity(p * k);
            for class in &chosen {
                let pool = &by_class[class];
                for _ in 0..k {
                    idx.push(pool[rand::Rng::gen_range(&mut rng, 0..pool.len())]);
                }
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].class_index).collect();
            let distinct = {
                let mut l = labels.clone();
                l.sort_unstable();
                l.dedup();
                l.len()
            };
            if distinct < 2 {
                skipped += 1;
                continue;
            }
            let x = batch_images(
                &idx.iter().map(|&i| train[i].image.clone()).collect::<Vec<_>>(),
            );
            match triplet_backward(model, &x, &labels, cfg.margin as f32, &mut rng) {
                Some(loss) => {
                    model.adam_update(&[ParamGroup::Encoder], cfg.lr as f32);
                    sum += loss as f64;
                    counted += 1;
                }
                None => {
                    model.zero_all_grads();
                    skipped += 1;
                }
            }
        }
        epoch_losses.push(if counted > 0 { sum / counted as f64 } else { 0.0 });
    }
    Ok(FinetuneStats {
        epoch_losses,
        skipped_batches: skipped,
    })
}

/// Fraction of training samples the class head gets right.
pub fn train_accuracy(model: &mut ModelState<f32>, train: &[TrainSample]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0usize;
    for chunk in train.chunks(256) {
        let x = batch_images(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
        let rep = model.embed(&x, &mut rng);
        let zc = model.content_of(&rep);
        let logits = model.class_head.infer(&zc);
        for (row, s) in logits.outer_iter().zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred == s.class_index {
                correct += 1;
            }
        }
    }
    correct as f64 / train.len() as f64
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// A sample to embed: the original dataset label is kept (not the known
/// index) so exported tables are self-describing.
#[derive(Debug, Clone)]
pub struct ExportSample {
    pub sample_id: u32,
    pub image: Array2<f32>,
    pub label: usize,
    pub is_unknown: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub sample_id: u32,
    pub label: usize,
    pub is_unknown: bool,
    pub zc: Vec<f64>,
    pub zt: Vec<f64>,
}

pub const EMBEDDING_CSV_HEADER: &str =
    "sample_id,label,is_unknown,zc0,zc1,zc2,zc3,zc4,zc5,zt0,zt1,zt2";
const ZC_COLS: usize = 6;
const ZT_COLS: usize = 3;

/// Embed samples with the encoder in inference mode, splitting content
/// and transformation coordinates. Row order matches input order.
pub fn export_content_embeddings(
    model: &mut ModelState<f32>,
    samples: &[ExportSample],
) -> Result<Vec<EmbeddingRow>> {
    if model.cfg.content_dim > ZC_COLS || model.cfg.transform_dim > ZT_COLS {
        return Err(Error::Config(format!(
            "representation ({} + {}) exceeds the embedding table layout",
            model.cfg.content_dim, model.cfg.transform_dim
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let x = batch_images(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>());
        let rep = model.embed(&x, &mut rng);
        for (r, s) in rep.outer_iter().zip(chunk) {
            let mut zc = vec![0.0f64; ZC_COLS];
            let mut zt = vec![0.0f64; ZT_COLS];
            for i in 0..model.cfg.content_dim {
                zc[i] = r[i] as f64;
            }
            for i in 0..model.cfg.transform_dim {
                zt[i] = r[model.cfg.content_dim + i] as f64;
            }
            rows.push(EmbeddingRow {
                sample_id: s.sample_id,
                label: s.label,
                is_unknown: s.is_unknown,
                zc,
                zt,
            });
        }
    }
    Ok(rows)
}

pub fn write_embedding_csv(rows: &[EmbeddingRow], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 120);
    out.push_str(EMBEDDING_CSV_HEADER);
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{}", r.sample_id, r.label, u8::from(r.is_unknown)).unwrap();
        for v in r.zc.iter().chain(&r.zt) {
            // shortest round-trippable f64 formatting
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_embedding_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == EMBEDDING_CSV_HEADER => {}
        _ => {
            return Err(Error::DataLoad {
                path: path.to_path_buf(),
                reason: "missing or unexpected embedding CSV header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 + ZC_COLS + ZT_COLS {
            return Err(Error::DataLoad {
                path: path.to_path_buf(),
                reason: format!("line {}: wrong field count", lineno + 2),
            });
        }
        let parse_err = |what: &str| Error::DataLoad {
            path: path.to_path_buf(),
            reason: format!("line {}: bad {what}", lineno + 2),
        };
        rows.push(EmbeddingRow {
            sample_id: fields[0].parse().map_err(|_| parse_err("sample_id"))?,
            label: fields[1].parse().map_err(|_| parse_err("label"))?,
            is_unknown: fields[2] == "1",
            zc: fields[3..3 + ZC_COLS]
                .iter()
                .map(|f| f.parse().map_err(|_| parse_err("zc value")))
                .collect::<Result<_>>()?,
            zt: fields[3 + ZC_COLS..]
                .iter()
                .map(|f| f.parse().map_err(|_| parse_err("zt value")))
                .collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}
