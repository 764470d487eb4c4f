//! Experiment drivers: pre-training with the two cross-supervision tasks,
//! label-supervised pre-training, fine-tuning with a linear classifier, and
//! checkpoint/resume plumbing.

pub mod checkpoint;
pub mod schedule;
pub mod sgd;

pub use checkpoint::{Checkpoint, TensorRecord, MAGIC};
pub use schedule::{Schedule, GROUP_RADIOGRAPH, GROUP_TEXT};
pub use sgd::SgdState;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::data::{
    self, derive_rng, AugmentParams, Finding, GrayImage, Manifest, StudyRecord, NUM_CLASSES,
    SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL,
};
use crate::error::{Error, Result};
use crate::eval::{roc_auc, MetricsRecord};
use crate::fusion::{
    contrastive_loss, study_memory, total_loss, view_fusion, FusionHead, ProjectionPair,
};
use crate::nn::{Linear, Param};
use crate::tensor::Tensor;
use crate::text::{language_loss, tokenize, ReportDecoder, TextEncoder, Vocabulary};
use crate::vision::RadiographEncoder;

// rng stream tags; every consumer derives its own stream from (seed, tags)
const STREAM_INIT: u64 = 0x01;
const STREAM_BATCH: u64 = 0x02;
const STREAM_STUDY: u64 = 0x03;
const STREAM_FT_INIT: u64 = 0x11;
const STREAM_FT_BATCH: u64 = 0x12;
const STREAM_FT_STUDY: u64 = 0x13;

fn hash_str(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Learning-rate group of a named parameter: the text stack forms group 1,
/// everything else (radiograph transformer, fusion head, projection heads,
/// classifier heads) group 0.
pub fn lr_group_of(name: &str) -> usize {
    if name.starts_with("text_encoder.") || name.starts_with("decoder.") {
        GROUP_TEXT
    } else {
        GROUP_RADIOGRAPH
    }
}

// ── corpus in memory ──────────────────────────────────────────────────────

pub struct LoadedStudy {
    pub record: StudyRecord,
    pub views: Vec<GrayImage>,
}

pub fn load_split(manifest: &Manifest, tag: &str) -> Result<Vec<LoadedStudy>> {
    let mut out = Vec::new();
    for rec in manifest.split(tag) {
        let mut views = Vec::with_capacity(rec.views.len());
        for rel in &rec.views {
            views.push(data::read_pgm(&manifest.view_path(rel))?);
        }
        if views.is_empty() {
            return Err(Error::Data(format!("study {} has no views", rec.study_id)));
        }
        out.push(LoadedStudy { record: rec.clone(), views });
    }
    Ok(out)
}

/// Swap the laterality label bits to match a horizontal flip.
fn flip_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = labels.to_vec();
    out.swap(Finding::DiskLeft.index(), Finding::DiskRight.index());
    out
}

/// Deterministic three-view selection for validation and testing.
fn deterministic_trio(views: &[GrayImage]) -> [GrayImage; 3] {
    match views.len() {
        1 => [views[0].clone(), views[0].clone(), views[0].clone()],
        2 => [views[0].clone(), views[1].clone(), views[0].clone()],
        _ => [views[0].clone(), views[1].clone(), views[2].clone()],
    }
}

fn center_crop(img: &GrayImage) -> Result<GrayImage> {
    data::apply_image(img, &AugmentParams::identity())
}

// ── pre-training model ────────────────────────────────────────────────────

/// Everything pre-training optimizes; components absent under the chosen
/// ablation are simply not built.
pub struct PretrainModel {
    pub cfg: ExperimentConfig,
    pub vocab: Vocabulary,
    pub encoder: RadiographEncoder<f32>,
    pub fusion_head: Option<FusionHead<f32>>,
    pub text_encoder: Option<TextEncoder<f32>>,
    pub decoder: Option<ReportDecoder<f32>>,
    pub projections: Option<ProjectionPair<f32>>,
    pub lsp_head: Option<Linear<f32>>,
}

impl PretrainModel {
    pub fn new(cfg: &ExperimentConfig, vocab: Vocabulary) -> Result<PretrainModel> {
        cfg.validate()?;
        let lc = cfg.loss_config();
        let mut rng = derive_rng(cfg.seed, &[STREAM_INIT]);
        let encoder = RadiographEncoder::new(&cfg.vision_config(), &mut rng)?;
        let fusion_head = (!lc.lsp_mode && lc.view_fusion_enabled)
            .then(|| FusionHead::new(cfg.dim, &mut rng));
        let text_cfg = cfg.text_config(vocab.len());
        let text_encoder = (!lc.lsp_mode && lc.task2_enabled)
            .then(|| TextEncoder::new(&text_cfg, &mut rng))
            .transpose()?;
        let decoder = (!lc.lsp_mode && lc.task1_enabled)
            .then(|| ReportDecoder::new(&text_cfg, &mut rng))
            .transpose()?;
        let projections = (!lc.lsp_mode && lc.task2_enabled).then(|| {
            ProjectionPair::new(3 * cfg.dim, cfg.text_dim, cfg.contrast_dim, &mut rng)
        });
        let lsp_head = lc.lsp_mode.then(|| Linear::new(cfg.dim, NUM_CLASSES, &mut rng));
        Ok(PretrainModel {
            cfg: cfg.clone(),
            vocab,
            encoder,
            fusion_head,
            text_encoder,
            decoder,
            projections,
            lsp_head,
        })
    }

    pub fn params(&self) -> Vec<Param<f32>> {
        let mut out = Vec::new();
        self.encoder.params("radiograph", &mut out);
        if let Some(head) = &self.fusion_head {
            head.params("fusion", &mut out);
        }
        if let Some(proj) = &self.projections {
            proj.params("proj", &mut out);
        }
        if let Some(head) = &self.lsp_head {
            head.params("lsp_head", &mut out);
        }
        if let Some(te) = &self.text_encoder {
            te.params("text_encoder", &mut out);
        }
        if let Some(dec) = &self.decoder {
            dec.params("decoder", &mut out);
        }
        out
    }

    /// One study's fused feature from three already-augmented views.
    fn study_feature(&self, trio: &[GrayImage; 3]) -> Result<Tensor<f32>> {
        let f1 = self.encoder.forward(&trio[0])?;
        let f2 = self.encoder.forward(&trio[1])?;
        let f3 = self.encoder.forward(&trio[2])?;
        view_fusion(self.fusion_head.as_ref(), &f1, &f2, &f3)
    }

    /// Total loss over one prepared batch, with its task components.
    fn batch_loss(&self, batch: &[PreparedStudy]) -> Result<(Tensor<f32>, f32, f32)> {
        let lc = self.cfg.loss_config();
        if lc.lsp_mode {
            let head = self.lsp_head.as_ref().expect("lsp head built in lsp mode");
            let mut rows = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len() * NUM_CLASSES);
            for sample in batch {
                let feat = self.encoder.forward(&sample.views[0])?;
                rows.push(feat.reshape(&[1, self.cfg.dim])?);
                targets.extend(sample.labels.iter().map(|&l| l as f32));
            }
            let logits = head.forward(&Tensor::concat(&rows, 0)?)?;
            let loss = logits.bce_with_logits(&targets)?;
            return Ok((loss, 0.0, 0.0));
        }

        let mut study_feats = Vec::with_capacity(batch.len());
        let mut report_feats = Vec::with_capacity(batch.len());
        let mut lang_sum: Option<Tensor<f32>> = None;
        for sample in batch {
            let v = self.study_feature(&sample.views)?;
            let seq = tokenize(&self.vocab, &sample.report);
            if lc.task1_enabled {
                let decoder = self.decoder.as_ref().expect("decoder built for task 1");
                let logits = decoder.decode_logits(&study_memory(&v)?, &seq)?;
                let lk = language_loss(&logits, &seq)?;
                lang_sum = Some(match lang_sum {
                    Some(acc) => acc.add(&lk)?,
                    None => lk,
                });
            }
            if lc.task2_enabled {
                let te = self.text_encoder.as_ref().expect("text encoder built for task 2");
                report_feats.push(te.encode_report(&seq)?);
                study_feats.push(v.clone());
            }
        }
        let lang_mean = lang_sum
            .map(|s| s.scale(1.0 / batch.len() as f32));
        let contrast = if lc.task2_enabled {
            Some(contrastive_loss(
                self.projections.as_ref().expect("projections built for task 2"),
                &study_feats,
                &report_feats,
                lc.temperature,
            )?)
        } else {
            None
        };
        let lm_value = lang_mean.as_ref().map(|t| t.item().unwrap_or(f32::NAN)).unwrap_or(0.0);
        let con_value = contrast.as_ref().map(|t| t.item().unwrap_or(f32::NAN)).unwrap_or(0.0);
        let total = total_loss(&lc, lang_mean, contrast, None)?;
        Ok((total, lm_value, con_value))
    }
}

struct PreparedStudy {
    views: [GrayImage; 3],
    report: String,
    labels: Vec<u8>,
}

/// Augment one study for a pre-training step. The flip decision is made once
/// per study so all three views stay consistent with the shared report (and
/// with the laterality labels in label-supervised mode).
fn prepare_study(study: &LoadedStudy, rng: &mut ChaCha8Rng) -> Result<PreparedStudy> {
    let trio = crate::fusion::assemble_views(&study.views, rng)?;
    let study_flip = rng.gen_bool(0.5);
    let mut views = Vec::with_capacity(3);
    for view in &trio {
        let mut params = AugmentParams::sample(rng);
        params.flip = study_flip;
        views.push(data::apply_image(view, &params)?);
    }
    let report = if study_flip {
        data::swap_left_right(&study.record.report)
    } else {
        study.record.report.clone()
    };
    let labels = if study_flip {
        flip_labels(&study.record.labels)
    } else {
        study.record.labels.clone()
    };
    let mut it = views.into_iter();
    Ok(PreparedStudy {
        views: [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
        report,
        labels,
    })
}

fn sample_batch(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    if n >= batch {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        idx.truncate(batch);
        idx
    } else {
        (0..batch).map(|_| rng.gen_range(0..n)).collect()
    }
}

// ── pre-training driver ───────────────────────────────────────────────────

pub struct PretrainOutcome {
    pub best_val_loss: f32,
    pub best_iteration: u64,
    pub completed_iters: usize,
    pub checkpoint_path: PathBuf,
    pub last_path: PathBuf,
    pub loss_csv_path: PathBuf,
}

pub const BEST_CHECKPOINT: &str = "checkpoint.bin";
pub const LAST_CHECKPOINT: &str = "last.bin";
pub const LOSS_CSV: &str = "loss.csv";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Session controls for [`pretrain`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from a `last.bin` written by an earlier session with the
    /// identical configuration.
    pub resume_from: Option<PathBuf>,
    /// Train at most this many iterations in this call (interrupted-session
    /// simulation and incremental runs); the schedule still spans the full
    /// configured length.
    pub session_iters: Option<usize>,
}

/// Pre-train on a screened corpus; keeps the checkpoint with the lowest
/// validation loss plus the final state for resuming.
pub fn pretrain(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let manifest = Manifest::load(&data_dir.join(data::MANIFEST_FILE))?;
    let screened = data::screen(&manifest);
    let train = load_split(&screened, SPLIT_TRAIN)?;
    let val = load_split(&screened, SPLIT_VAL)?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty after screening".to_string()));
    }

    let vocab = Vocabulary::build(train.iter().map(|s| s.record.report.as_str()))?;
    let model = PretrainModel::new(cfg, vocab)?;
    let params = model.params();
    let mut sgd = SgdState::new(&params, cfg.momentum, cfg.weight_decay);
    let sched = Schedule::new(
        vec![cfg.lr_radiograph, cfg.lr_text],
        cfg.warmup_iters,
        cfg.total_iters,
    )?;
    let lr_groups: Vec<usize> = params.iter().map(|p| lr_group_of(&p.name)).collect();

    let mut start_iter = 0usize;
    let mut best_val = f32::INFINITY;
    let mut best_iteration = 0u64;
    let mut csv = String::from("iter,loss_total,loss_lm,loss_contrast,lr_group0,lr_group1\n");
    if let Some(resume_path) = &opts.resume_from {
        let ckpt = Checkpoint::load(resume_path)?;
        if ckpt.meta_str("config_digest")? != cfg.digest() {
            return Err(Error::Config(
                "resume checkpoint was produced by a different configuration".to_string(),
            ));
        }
        restore_params(&ckpt, &params)?;
        restore_velocities(&ckpt, &params, &mut sgd)?;
        start_iter = ckpt.meta_u64("iteration")? as usize;
        best_val = ckpt.meta_f32("best_val_loss")?;
        best_iteration = ckpt.meta_u64("best_iteration").unwrap_or(0);
        csv = ckpt.meta_str("loss_csv").unwrap_or(csv);
    }
    let end_iter = match opts.session_iters {
        Some(limit) => cfg.total_iters.min(start_iter + limit),
        None => cfg.total_iters,
    };

    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);

    for iter in start_iter..end_iter {
        let mut brng = derive_rng(cfg.seed, &[STREAM_BATCH, iter as u64]);
        let batch_idx = sample_batch(&mut brng, train.len(), cfg.batch_size);
        let mut batch = Vec::with_capacity(batch_idx.len());
        for &i in &batch_idx {
            let mut srng = derive_rng(
                cfg.seed,
                &[STREAM_STUDY, iter as u64, hash_str(&train[i].record.study_id)],
            );
            batch.push(prepare_study(&train[i], &mut srng)?);
        }
        let (loss, lm, con) = model.batch_loss(&batch)?;
        let loss_value = loss.item()?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged: loss {loss_value} at iteration {iter}"
            )));
        }
        loss.backward()?;
        let lr0 = sched.lr_at(iter, GROUP_RADIOGRAPH)?;
        let lr1 = sched.lr_at(iter, GROUP_TEXT)?;
        let lrs: Vec<f64> = lr_groups
            .iter()
            .map(|&g| if g == GROUP_RADIOGRAPH { lr0 } else { lr1 })
            .collect();
        sgd.step(&params, &lrs)?;
        let _ = writeln!(csv, "{iter},{loss_value},{lm},{con},{lr0},{lr1}");

        let is_last = iter + 1 == cfg.total_iters;
        if (iter + 1) % cfg.val_every == 0 || is_last {
            let val_loss = validation_loss(&model, &val)?;
            if val_loss < best_val {
                best_val = val_loss;
                best_iteration = (iter + 1) as u64;
                let ckpt = build_checkpoint(cfg, &model, &params, &sgd, iter + 1, best_val, best_iteration, &csv);
                ckpt.save(&best_path)?;
            }
        }
    }

    let ckpt = build_checkpoint(cfg, &model, &params, &sgd, end_iter, best_val, best_iteration, &csv);
    ckpt.save(&last_path)?;
    if !best_path.exists() {
        // no validation improvement recorded (e.g. empty val split): keep the
        // final state so fine-tuning always has a checkpoint
        ckpt.save(&best_path)?;
    }
    let loss_csv_path = out_dir.join(LOSS_CSV);
    std::fs::write(&loss_csv_path, &csv)?;
    model.vocab.save(&out_dir.join(VOCAB_FILE))?;
    cfg.save(&out_dir.join("config.toml"))?;
    Ok(PretrainOutcome {
        best_val_loss: best_val,
        best_iteration,
        completed_iters: end_iter,
        checkpoint_path: best_path,
        last_path,
        loss_csv_path,
    })
}

fn validation_loss(model: &PretrainModel, val: &[LoadedStudy]) -> Result<f32> {
    if val.is_empty() {
        return Ok(f32::INFINITY);
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in val.chunks(model.cfg.batch_size.max(1)) {
        let batch: Vec<PreparedStudy> = chunk
            .iter()
            .map(|s| {
                let trio = deterministic_trio(&s.views);
                Ok(PreparedStudy {
                    views: [
                        center_crop(&trio[0])?,
                        center_crop(&trio[1])?,
                        center_crop(&trio[2])?,
                    ],
                    report: s.record.report.clone(),
                    labels: s.record.labels.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let (loss, _, _) = model.batch_loss(&batch)?;
        total += loss.item()? as f64 * chunk.len() as f64;
        count += chunk.len();
    }
    Ok((total / count as f64) as f32)
}

#[allow(clippy::too_many_arguments)]
fn build_checkpoint(
    cfg: &ExperimentConfig,
    model: &PretrainModel,
    params: &[Param<f32>],
    sgd: &SgdState<f32>,
    iteration: usize,
    best_val: f32,
    best_iteration: u64,
    csv: &str,
) -> Checkpoint {
    let mut ckpt = Checkpoint::default();
    for p in params {
        ckpt.params.push(TensorRecord {
            name: p.name.clone(),
            dims: p.tensor.shape().iter().map(|&d| d as u64).collect(),
            values: p.tensor.to_vec(),
        });
    }
    for (i, p) in params.iter().enumerate() {
        ckpt.velocities.push(TensorRecord {
            name: p.name.clone(),
            dims: p.tensor.shape().iter().map(|&d| d as u64).collect(),
            values: sgd.velocity(i).to_vec(),
        });
    }
    ckpt.set_meta_u64("iteration", iteration as u64);
    ckpt.set_meta_f32("best_val_loss", best_val);
    ckpt.set_meta_u64("best_iteration", best_iteration);
    ckpt.set_meta_str("config", &cfg.canonical_string());
    ckpt.set_meta_str("config_digest", &cfg.digest());
    // rng state under per-iteration derivation: the seed plus the iteration
    // counter fully determine every stream
    let mut rng_state = Vec::with_capacity(16);
    rng_state.extend_from_slice(&cfg.seed.to_le_bytes());
    rng_state.extend_from_slice(&(iteration as u64).to_le_bytes());
    ckpt.meta.insert("rng".to_string(), rng_state);
    ckpt.set_meta_str("vocab", &model.vocab.to_file_string());
    ckpt.set_meta_str("loss_csv", csv);
    ckpt
}

fn restore_params(ckpt: &Checkpoint, params: &[Param<f32>]) -> Result<()> {
    for p in params {
        let rec = ckpt.param(&p.name).ok_or_else(|| {
            Error::Config(format!("checkpoint lacks parameter {}", p.name))
        })?;
        let dims: Vec<usize> = rec.dims.iter().map(|&d| d as usize).collect();
        if dims != p.tensor.shape() {
            return Err(Error::Config(format!(
                "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                p.name,
                dims,
                p.tensor.shape()
            )));
        }
        p.tensor.set_data(&rec.values)?;
    }
    Ok(())
}

fn restore_velocities(
    ckpt: &Checkpoint,
    params: &[Param<f32>],
    sgd: &mut SgdState<f32>,
) -> Result<()> {
    for (i, p) in params.iter().enumerate() {
        let rec = ckpt
            .velocities
            .iter()
            .find(|r| r.name == p.name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks velocity for {}", p.name)))?;
        if rec.values.len() != p.tensor.numel() {
            return Err(Error::Config(format!(
                "velocity {} length mismatch: {} vs {}",
                p.name,
                rec.values.len(),
                p.tensor.numel()
            )));
        }
        sgd.velocity_mut(i).copy_from_slice(&rec.values);
    }
    Ok(())
}

// ── fine-tuning ───────────────────────────────────────────────────────────

pub struct FinetuneModel {
    pub cfg: ExperimentConfig,
    pub encoder: RadiographEncoder<f32>,
    pub classifier: Linear<f32>,
}

impl FinetuneModel {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<FinetuneModel> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, &[STREAM_FT_INIT]);
        Ok(FinetuneModel {
            cfg: cfg.clone(),
            encoder: RadiographEncoder::new(&cfg.vision_config(), &mut rng)?,
            classifier: Linear::new(cfg.dim, NUM_CLASSES, &mut rng),
        })
    }

    pub fn params(&self) -> Vec<Param<f32>> {
        let mut out = Vec::new();
        self.encoder.params("radiograph", &mut out);
        self.classifier.params("classifier", &mut out);
        out
    }

    /// Sigmoid class scores for one already-cropped image.
    pub fn scores(&self, image: &GrayImage) -> Result<Vec<f32>> {
        let feat = self.encoder.forward(image)?;
        let logits = self.classifier.forward(&feat.reshape(&[1, self.cfg.dim])?)?;
        Ok(logits.sigmoid().to_vec())
    }

    /// Classifier weight column for one class, as the CAM weight vector.
    pub fn class_weight(&self, class: usize) -> Result<Tensor<f32>> {
        if class >= NUM_CLASSES {
            return Err(Error::Contract(format!(
                "class index {class} out of range for {NUM_CLASSES} classes"
            )));
        }
        self.classifier.weight.narrow(1, class, 1)?.reshape(&[self.cfg.dim])
    }
}

pub struct FinetuneOutcome {
    pub metrics: MetricsRecord,
    pub best_val_loss: f32,
    pub checkpoint_path: PathBuf,
    pub loss_csv_path: PathBuf,
}

pub const FT_CHECKPOINT: &str = "finetune.bin";
pub const METRICS_FILE: &str = "metrics.json";

/// Fine-tune a (possibly pre-trained) encoder with a fresh linear classifier
/// on the labelled target corpus, then evaluate per-class AUC on the test
/// split. `checkpoint == None` is the train-from-scratch baseline.
pub fn finetune(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    out_dir: &Path,
    checkpoint: Option<&Path>,
    label_ratio: f64,
    seed: u64,
    method: &str,
) -> Result<FinetuneOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let manifest = Manifest::load(&data_dir.join(data::MANIFEST_FILE))?;
    let train_all = load_split(&manifest, SPLIT_TRAIN)?;
    let val = load_split(&manifest, SPLIT_VAL)?;
    let test = load_split(&manifest, SPLIT_TEST)?;
    if train_all.is_empty() || test.is_empty() {
        return Err(Error::Data("fine-tuning needs non-empty train and test splits".into()));
    }
    let train_indices: Vec<usize> = (0..train_all.len()).collect();
    let subset = data::label_ratio_sample(&train_indices, label_ratio, seed)?;
    let train: Vec<&LoadedStudy> = subset.iter().map(|&i| &train_all[i]).collect();

    let model = FinetuneModel::new(cfg, seed)?;
    if let Some(ckpt_path) = checkpoint {
        let ckpt = Checkpoint::load(ckpt_path)?;
        let encoder_params: Vec<Param<f32>> = model
            .params()
            .into_iter()
            .filter(|p| p.name.starts_with("radiograph."))
            .collect();
        restore_params(&ckpt, &encoder_params)?;
    }
    let params = model.params();
    let mut sgd = SgdState::new(&params, cfg.momentum, cfg.weight_decay);
    let sched = Schedule::new(vec![cfg.ft_lr], cfg.ft_warmup_iters, cfg.ft_total_iters)?;

    let mut best_val = f32::INFINITY;
    let mut best_snapshot: Option<Vec<Vec<f32>>> = None;
    let mut csv = String::from("iter,loss_bce,lr\n");

    for iter in 0..cfg.ft_total_iters {
        let mut brng = derive_rng(seed, &[STREAM_FT_BATCH, iter as u64]);
        let batch_idx = sample_batch(&mut brng, train.len(), cfg.ft_batch_size);
        let mut rows = Vec::with_capacity(batch_idx.len());
        let mut targets = Vec::with_capacity(batch_idx.len() * NUM_CLASSES);
        for &i in &batch_idx {
            let study = train[i];
            let mut srng = derive_rng(
                seed,
                &[STREAM_FT_STUDY, iter as u64, hash_str(&study.record.study_id)],
            );
            let aug = AugmentParams::sample(&mut srng);
            let image = data::apply_image(&study.views[0], &aug)?;
            let labels = if aug.flip {
                flip_labels(&study.record.labels)
            } else {
                study.record.labels.clone()
            };
            let feat = model.encoder.forward(&image)?;
            rows.push(feat.reshape(&[1, cfg.dim])?);
            targets.extend(labels.iter().map(|&l| l as f32));
        }
        let logits = model.classifier.forward(&Tensor::concat(&rows, 0)?)?;
        let loss = logits.bce_with_logits(&targets)?;
        let loss_value = loss.item()?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!(
                "fine-tuning diverged: loss {loss_value} at iteration {iter}"
            )));
        }
        loss.backward()?;
        let lr = sched.lr_at(iter, 0)?;
        sgd.step(&params, &vec![lr; params.len()])?;
        let _ = writeln!(csv, "{iter},{loss_value},{lr}");

        if (iter + 1) % cfg.ft_val_every == 0 || iter + 1 == cfg.ft_total_iters {
            let val_loss = finetune_validation_loss(&model, &val)?;
            if val_loss < best_val {
                best_val = val_loss;
                best_snapshot = Some(params.iter().map(|p| p.tensor.to_vec()).collect());
            }
        }
    }

    if let Some(snapshot) = &best_snapshot {
        for (p, values) in params.iter().zip(snapshot) {
            p.tensor.set_data(values)?;
        }
    }

    // test-split evaluation: per-class AUC over sigmoid scores
    let class_names: Vec<String> = Finding::ALL.iter().map(|f| f.name().to_string()).collect();
    let mut scores = vec![Vec::with_capacity(test.len()); NUM_CLASSES];
    let mut labels = vec![Vec::with_capacity(test.len()); NUM_CLASSES];
    for study in &test {
        let image = center_crop(&study.views[0])?;
        let s = model.scores(&image)?;
        for c in 0..NUM_CLASSES {
            scores[c].push(s[c] as f64);
            labels[c].push(study.record.labels[c]);
        }
    }
    let per_class: Vec<f64> = (0..NUM_CLASSES)
        .map(|c| roc_auc(&scores[c], &labels[c]))
        .collect::<Result<_>>()?;
    let metrics = MetricsRecord::new(method, label_ratio, seed, class_names, per_class);

    let ckpt_path = out_dir.join(FT_CHECKPOINT);
    let mut ckpt = Checkpoint::default();
    for p in &params {
        ckpt.params.push(TensorRecord {
            name: p.name.clone(),
            dims: p.tensor.shape().iter().map(|&d| d as u64).collect(),
            values: p.tensor.to_vec(),
        });
    }
    ckpt.set_meta_u64("iteration", cfg.ft_total_iters as u64);
    ckpt.set_meta_f32("best_val_loss", best_val);
    ckpt.set_meta_str("config", &cfg.canonical_string());
    ckpt.set_meta_str("config_digest", &cfg.digest());
    ckpt.set_meta_str("method", method);
    ckpt.set_meta_u64("seed", seed);
    ckpt.save(&ckpt_path)?;

    let loss_csv_path = out_dir.join(LOSS_CSV);
    std::fs::write(&loss_csv_path, &csv)?;
    metrics.save(&out_dir.join(METRICS_FILE))?;
    Ok(FinetuneOutcome {
        metrics,
        best_val_loss: best_val,
        checkpoint_path: ckpt_path,
        loss_csv_path,
    })
}

fn finetune_validation_loss(model: &FinetuneModel, val: &[LoadedStudy]) -> Result<f32> {
    if val.is_empty() {
        return Ok(f32::INFINITY);
    }
    let mut rows = Vec::with_capacity(val.len());
    let mut targets = Vec::with_capacity(val.len() * NUM_CLASSES);
    for study in val {
        let image = center_crop(&study.views[0])?;
        let feat = model.encoder.forward(&image)?;
        rows.push(feat.reshape(&[1, model.cfg.dim])?);
        targets.extend(study.record.labels.iter().map(|&l| l as f32));
    }
    let logits = model.classifier.forward(&Tensor::concat(&rows, 0)?)?;
    logits.bce_with_logits(&targets)?.item()
}

/// Rebuild a fine-tuned model from its checkpoint (the embedded config text
/// restores the architecture).
pub fn load_finetuned(path: &Path) -> Result<FinetuneModel> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = ExperimentConfig::from_toml_str(&ckpt.meta_str("config")?)?;
    let seed = ckpt.meta_u64("seed").unwrap_or(0);
    let model = FinetuneModel::new(&cfg, seed)?;
    restore_params(&ckpt, &model.params())?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, write_corpus, GenConfig};

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.image_size = 32;
        cfg.patch_size = 16;
        cfg.dim = 16;
        cfg.pos_dim = 4;
        cfg.heads = 2;
        cfg.blocks = 2;
        cfg.mlp_ratio = 2;
        cfg.text_dim = 16;
        cfg.text_heads = 2;
        cfg.text_enc_blocks = 1;
        cfg.text_dec_blocks = 1;
        cfg.contrast_dim = 8;
        cfg.batch_size = 2;
        cfg.total_iters = 6;
        cfg.warmup_iters = 2;
        cfg.val_every = 3;
        cfg.ft_batch_size = 2;
        cfg.ft_total_iters = 4;
        cfg.ft_warmup_iters = 1;
        cfg.ft_val_every = 2;
        cfg
    }

    fn corpus_dir(n: usize, seed: u64) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let studies = generate_corpus(&GenConfig { n_studies: n, canonical_size: 64 }, seed).unwrap();
        write_corpus(&studies, dir.path()).unwrap();
        dir
    }

    #[test]
    fn parameter_groups_partition_the_model() {
        let cfg = tiny_cfg();
        let vocab = Vocabulary::build(["no acute findings ."]).unwrap();
        let model = PretrainModel::new(&cfg, vocab).unwrap();
        let params = model.params();
        assert!(!params.is_empty());
        let mut seen = std::collections::BTreeSet::new();
        let mut group_counts = [0usize; 2];
        for p in &params {
            assert!(seen.insert(p.name.clone()), "duplicate parameter name {}", p.name);
            group_counts[lr_group_of(&p.name)] += 1;
        }
        assert!(group_counts[0] > 0, "radiograph group empty");
        assert!(group_counts[1] > 0, "text group empty");
        assert_eq!(group_counts[0] + group_counts[1], params.len());
        // the fusion and projection heads ride with the radiograph group
        assert_eq!(lr_group_of("fusion.fc1.weight"), GROUP_RADIOGRAPH);
        assert_eq!(lr_group_of("proj.visual.weight"), GROUP_RADIOGRAPH);
        assert_eq!(lr_group_of("text_encoder.blocks.0.ln1.gain"), GROUP_TEXT);
        assert_eq!(lr_group_of("decoder.out_proj.bias"), GROUP_TEXT);
    }

    #[test]
    fn pretrain_smoke_runs_and_is_deterministic() {
        let data = corpus_dir(12, 21);
        let cfg = tiny_cfg();

        let out1 = tempfile::tempdir().unwrap();
        let r1 = pretrain(&cfg, data.path(), out1.path(), &RunOptions::default()).unwrap();
        let out2 = tempfile::tempdir().unwrap();
        let r2 = pretrain(&cfg, data.path(), out2.path(), &RunOptions::default()).unwrap();
        assert_eq!(
            std::fs::read(&r1.loss_csv_path).unwrap(),
            std::fs::read(&r2.loss_csv_path).unwrap()
        );
        assert!(r1.checkpoint_path.exists());
        assert!(out1.path().join(VOCAB_FILE).exists());

        // vocabulary file honours the reserved prefix
        let vocab_text = std::fs::read_to_string(out1.path().join(VOCAB_FILE)).unwrap();
        assert!(vocab_text.starts_with("<pad>\n<bos>\n<eos>\n<unk>\n"));
    }

    #[test]
    fn resume_after_interruption_is_bitwise_equivalent() {
        let data = corpus_dir(10, 22);
        let mut cfg = tiny_cfg();
        cfg.total_iters = 5;
        cfg.warmup_iters = 2;
        cfg.val_every = 2;

        // uninterrupted run
        let out_full = tempfile::tempdir().unwrap();
        let full = pretrain(&cfg, data.path(), out_full.path(), &RunOptions::default()).unwrap();

        // interrupted after 4 iterations, then resumed for the final one
        let out_part = tempfile::tempdir().unwrap();
        let part = pretrain(
            &cfg,
            data.path(),
            out_part.path(),
            &RunOptions { resume_from: None, session_iters: Some(4) },
        )
        .unwrap();
        assert_eq!(part.completed_iters, 4);
        let out_resumed = tempfile::tempdir().unwrap();
        let resumed = pretrain(
            &cfg,
            data.path(),
            out_resumed.path(),
            &RunOptions { resume_from: Some(part.last_path.clone()), session_iters: None },
        )
        .unwrap();

        // final states and loss histories are byte-identical
        assert_eq!(
            std::fs::read(&full.last_path).unwrap(),
            std::fs::read(&resumed.last_path).unwrap()
        );
        assert_eq!(
            std::fs::read(&full.loss_csv_path).unwrap(),
            std::fs::read(&resumed.loss_csv_path).unwrap()
        );

        // a mismatched configuration is refused
        let mut other = cfg.clone();
        other.seed = 77;
        let out_bad = tempfile::tempdir().unwrap();
        let err = pretrain(
            &other,
            data.path(),
            out_bad.path(),
            &RunOptions { resume_from: Some(part.last_path), session_iters: None },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn finetune_smoke_produces_metrics_and_checkpoint() {
        let data = corpus_dir(120, 23);
        let cfg = tiny_cfg();
        let out = tempfile::tempdir().unwrap();
        let result = finetune(&cfg, data.path(), out.path(), None, 1.0, 3, "scratch").unwrap();
        assert_eq!(result.metrics.per_class_auc.len(), NUM_CLASSES);
        assert!(result.metrics.per_class_auc.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!(result.checkpoint_path.exists());

        let reloaded = load_finetuned(&result.checkpoint_path).unwrap();
        let probe = GrayImage::new(32);
        let s1 = reloaded.scores(&probe).unwrap();
        let s2 = reloaded.scores(&probe).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.len(), NUM_CLASSES);
    }
}
