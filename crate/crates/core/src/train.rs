//! Training loop, evaluation and checkpoint resume.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{apply_sample_augs, eval_transform, mix_dispatch, AugPolicy};
use crate::autodiff::{softmax_rows, Graph, Mode};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Task};
use crate::data::{fold_plan, Manifest};
use crate::error::{Error, Result};
use crate::img::{Image, NormStats};
use crate::layers::ForwardCtx;
use crate::metrics::{EvalBuffer, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::optim::{Optimizer, Schedule};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

pub const LOG_SCHEMA_VERSION: u32 = 1;
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.json";
pub const REPORT_FILE: &str = "report.json";

/// Decoded images held at the policy's resize side, with labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    /// Decode every manifest entry in parallel and resize to `side` square.
    pub fn load(manifest: &Manifest, side: usize) -> Result<Self> {
        let decoded: Vec<Result<Image>> = (0..manifest.len())
            .into_par_iter()
            .map(|i| Image::open(&manifest.path(i)).map(|im| im.resize(side, side)))
            .collect();
        let images = decoded.into_iter().collect::<Result<Vec<_>>>()?;
        Self::new(images, manifest.labels(), manifest.num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps the class count of the parent set.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Validation,
    Holdout,
    /// No held-out data was configured; the training images are scored.
    Train,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
    pub eval_split: EvalSplit,
}

/// Read a manifest and apply the run's task mapping.
pub fn load_manifest(cfg: &RunConfig, csv: &Path, root: &Path) -> Result<Manifest> {
    let m = Manifest::load(csv, root)?;
    if m.is_empty() {
        return Err(Error::Manifest(format!("{} lists no images", csv.display())));
    }
    Ok(match cfg.task {
        Task::Multiclass => m,
        Task::Binarized => m.binarize(cfg.binarize_threshold),
    })
}

/// Train and eval sets for a single run, as configured under `[data]`.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let manifest = load_manifest(cfg, &cfg.data.manifest, &cfg.data.root())?;
    let side = cfg.aug.resize;
    if let (Some(val), Some(root)) = (&cfg.data.val_manifest, cfg.data.val_root()) {
        let vm = load_manifest(cfg, val, &root)?;
        let k = manifest.num_classes.max(vm.num_classes);
        let mut train = Dataset::load(&manifest, side)?;
        let mut eval = Dataset::load(&vm, side)?;
        train.num_classes = k;
        eval.num_classes = k;
        return Ok(Splits {
            train,
            eval,
            eval_split: EvalSplit::Validation,
        });
    }
    let all = Dataset::load(&manifest, side)?;
    match cfg.data.holdout_k {
        Some(k) => {
            let plan = fold_plan(&manifest, k, cfg.seed)?;
            let (tr, held) = plan.split(0);
            if tr.is_empty() || held.is_empty() {
                return Err(Error::Manifest(format!(
                    "holdout split with k = {k} leaves an empty side ({} train, {} held out)",
                    tr.len(),
                    held.len()
                )));
            }
            Ok(Splits {
                train: all.subset(&tr),
                eval: all.subset(&held),
                eval_split: EvalSplit::Holdout,
            })
        }
        None => Ok(Splits {
            eval: all.clone(),
            train: all,
            eval_split: EvalSplit::Train,
        }),
    }
}

/// Stack `[0, 1]` images into a normalized `[N, 3, H, W]` batch.
pub fn batch_tensor(images: &[Image], stats: &NormStats) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::Dimension("images in a batch differ in size".into()));
        }
        data.extend_from_slice(img.to_tensor::<f32>(stats).data());
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

fn normalize_batch(t: &mut Tensor<f32>, stats: &NormStats) -> Result<()> {
    let (_, _, h, w) = t.nchw()?;
    let plane = h * w;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % 3;
        *v = (*v - stats.mean[c]) / stats.std[c];
    }
    Ok(())
}

fn raw_batch(images: &[Image]) -> Result<Tensor<f32>> {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend_from_slice(&img.data);
    }
    Tensor::new(&[images.len(), 3, h, w], data)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode scoring: centre crop, no dropout, batch-norm running statistics.
/// The data may use fewer classes than the model but not more.
pub fn evaluate(
    model: &mut Model<f32>,
    stats: &NormStats,
    policy: &AugPolicy,
    data: &Dataset,
    batch_size: usize,
) -> Result<MetricsReport> {
    let k = model.config.num_classes;
    if data.num_classes > k {
        return Err(Error::Compatibility(format!(
            "data has {} classes but the model predicts {k}",
            data.num_classes
        )));
    }
    let mut buf = EvalBuffer::new(k);
    let order: Vec<usize> = (0..data.len()).collect();
    // Eval mode never draws from the stream; it only satisfies the signature.
    let mut unused = rng::stream(0, Stream::Dropout, &[]);
    for chunk in order.chunks(batch_size.max(1)) {
        let imgs: Vec<Image> = chunk
            .par_iter()
            .map(|&i| eval_transform(&data.images[i], policy))
            .collect();
        let x = batch_tensor(&imgs, stats)?;
        let logits = model.logits(x, Mode::Eval, &mut unused)?;
        if !logits.all_finite() {
            return Err(Error::NonFinite("eval logits".into()));
        }
        let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
        let probs = softmax_rows(&z, k);
        for (r, &i) in chunk.iter().enumerate() {
            buf.push(data.labels[i], &probs[r * k..(r + 1) * k])?;
        }
    }
    MetricsReport::from_buffer(&buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Agreement of train-mode predictions with the unmixed labels.
    pub train_acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub schema_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub run_config: RunConfig,
    pub num_classes: usize,
    pub param_count: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub eval_split: EvalSplit,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_score: Option<f64>,
    /// Evaluation of the model after the last epoch.
    pub final_report: Option<MetricsReport>,
}

impl TrainLog {
    /// Append one epoch; epochs must arrive in order with no gaps.
    pub fn push(&mut self, rec: EpochRecord) -> Result<()> {
        if rec.epoch != self.epochs.len() {
            return Err(Error::Contract(format!(
                "epoch {} appended after {} recorded epochs",
                rec.epoch,
                self.epochs.len()
            )));
        }
        self.epochs.push(rec);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("log serializes")
    }
}

/// Where and how long [`Trainer::run`] goes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write checkpoints, the log and the final report here.
    pub output_dir: Option<PathBuf>,
    /// Stop once this many epochs are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub optimizer: Optimizer<f32>,
    pub stats: NormStats,
    pub log: TrainLog,
    schedule: Schedule,
}

impl Trainer {
    /// Fresh run. Normalization statistics come from the training images.
    pub fn new(config: &RunConfig, train: &Dataset, eval: &Dataset, split: EvalSplit) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Manifest("training set is empty".into()));
        }
        let model_cfg = config.model.resolve(train.num_classes)?;
        let model = Model::build(&model_cfg, config.seed)?;
        let stats = NormStats::compute(&train.images)?;
        let log = TrainLog {
            schema_version: LOG_SCHEMA_VERSION,
            seed: config.seed,
            config_hash: config.hash(),
            run_config: config.clone(),
            num_classes: train.num_classes,
            param_count: model.count_params(),
            train_size: train.len(),
            eval_size: eval.len(),
            eval_split: split,
            epochs: Vec::new(),
            best_epoch: None,
            best_score: None,
            final_report: None,
        };
        Ok(Self {
            config: config.clone(),
            optimizer: Optimizer::new(config.optimizer.clone()),
            schedule: config.schedule(),
            model,
            stats,
            log,
        })
    }

    /// Continue a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let meta = RunMeta::from_checkpoint(ckpt)?;
        if meta.config_hash != config.hash() {
            return Err(Error::Compatibility(format!(
                "checkpoint was written by config {} but this config hashes to {}",
                meta.config_hash,
                config.hash()
            )));
        }
        let (model, stats) = restore_model(ckpt, &meta)?;
        let mut optimizer = Optimizer::new(config.optimizer.clone());
        if meta.optimizer_step > 0 {
            let mut first = Vec::with_capacity(model.params.len());
            let mut second = Vec::with_capacity(model.params.len());
            for (_, p) in model.params.iter() {
                let zeros = || vec![0.0f32; p.value.numel()];
                if !p.kind.trainable() {
                    first.push(zeros());
                    second.push(zeros());
                    continue;
                }
                let fetch = |prefix: &str| -> Result<Vec<f32>> {
                    let name = format!("{prefix}{}", p.name);
                    let t = ckpt
                        .get(&name)
                        .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
                    if t.dims() != p.value.dims() {
                        return Err(Error::Format(format!("`{name}` has dims {:?}", t.dims())));
                    }
                    Ok(t.data().to_vec())
                };
                first.push(fetch(OPT_FIRST)?);
                second.push(fetch(OPT_SECOND)?);
            }
            optimizer.set_state(meta.optimizer_step, first, second);
        }
        if meta.log.epochs.len() != meta.epoch {
            return Err(Error::Format(format!(
                "checkpoint at epoch {} carries a log of {} epochs",
                meta.epoch,
                meta.log.epochs.len()
            )));
        }
        Ok(Self {
            config: config.clone(),
            optimizer,
            schedule: config.schedule(),
            model,
            stats,
            log: meta.log,
        })
    }

    /// Number of completed epochs.
    pub fn epochs_done(&self) -> usize {
        self.log.epochs.len()
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.config.epochs
    }

    /// One pass over `train`. Returns mean loss and train-mode accuracy.
    pub fn train_epoch(&mut self, train: &Dataset, epoch: usize) -> Result<(f64, f64)> {
        let lr = self.schedule.lr_at(epoch)?;
        let seed = self.config.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(seed, Stream::Shuffle, &[epoch as u64]));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let (l, c) = self.train_batch(train, idx, epoch, b, lr)?;
            loss_sum += l * idx.len() as f64;
            correct += c;
        }
        Ok((loss_sum / train.len() as f64, correct as f64 / train.len() as f64))
    }

    fn train_batch(
        &mut self,
        train: &Dataset,
        idx: &[usize],
        epoch: usize,
        batch: usize,
        lr: f64,
    ) -> Result<(f64, usize)> {
        let seed = self.config.seed;
        let policy = &self.config.aug;
        let imgs: Vec<Image> = idx
            .par_iter()
            .map(|&i| {
                let mut r = rng::stream(seed, Stream::Augment, &[epoch as u64, i as u64]);
                apply_sample_augs(&train.images[i], policy, &mut r)
            })
            .collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let raw = raw_batch(&imgs)?;
        let keys = [epoch as u64, batch as u64];
        let mixed = mix_dispatch(
            &raw,
            &labels,
            train.num_classes,
            policy,
            &mut rng::stream(seed, Stream::Mix, &keys),
        )?;
        let mut x = mixed.images;
        normalize_batch(&mut x, &self.stats)?;

        self.model.params.zero_grad();
        let mut drop_rng = rng::stream(seed, Stream::Dropout, &keys);
        let (net, store) = self.model.split_mut();
        let mut g = Graph::with_params(store);
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::new(Mode::Train, &mut drop_rng);
        let logits = net.forward(&mut g, xv, &mut ctx)?;
        let loss = g.softmax_cross_entropy(logits, &mixed.soft_labels)?;
        let loss_value = g.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {epoch}, batch {batch}"
            )));
        }
        let k = train.num_classes;
        let correct = g
            .value(logits)
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        g.backward(loss)?;
        drop(g);
        self.optimizer.step(&mut self.model.params, lr)?;
        Ok((loss_value, correct))
    }

    pub fn evaluate(&mut self, data: &Dataset) -> Result<MetricsReport> {
        evaluate(
            &mut self.model,
            &self.stats,
            &self.config.aug,
            data,
            self.config.batch_size,
        )
    }

    /// Train until the configured epoch count (or `opts.stop_after`), evaluating
    /// on `eval` every `eval_every` epochs and after the last one.
    pub fn run(&mut self, train: &Dataset, eval: &Dataset, opts: &RunOptions) -> Result<()> {
        if let Some(dir) = &opts.output_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let total = self.config.epochs;
        let stop = opts.stop_after.unwrap_or(total).min(total);
        while self.epochs_done() < stop {
            let epoch = self.epochs_done();
            let lr = self.schedule.lr_at(epoch)?;
            let started = std::time::Instant::now();
            let (train_loss, train_acc) = self.train_epoch(train, epoch)?;
            let last = epoch + 1 == total;
            let report = if last || (epoch + 1).is_multiple_of(self.config.eval_every) {
                Some(self.evaluate(eval)?)
            } else {
                None
            };
            let mut improved = false;
            if let Some(r) = &report {
                let s = r.selection_score();
                if self.log.best_score.is_none_or(|b| s > b) {
                    self.log.best_score = Some(s);
                    self.log.best_epoch = Some(epoch);
                    improved = true;
                }
            }
            if last {
                self.log.final_report = report.clone();
            }
            log::info!(
                "epoch {epoch:>4} lr {lr:.3e} loss {train_loss:.4} acc {train_acc:.3}{} ({:.1}s)",
                report
                    .as_ref()
                    .map(|r| format!(" | eval acc {:.3} score {:.4}", r.acc, r.selection_score()))
                    .unwrap_or_default(),
                started.elapsed().as_secs_f64()
            );
            self.log.push(EpochRecord {
                epoch,
                lr,
                train_loss,
                train_acc,
                eval: report,
            })?;
            if let Some(dir) = &opts.output_dir {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join(LAST_CHECKPOINT))?;
                if improved {
                    ckpt.save(&dir.join(BEST_CHECKPOINT))?;
                }
                write_text(&dir.join(LOG_FILE), &self.log.to_json())?;
                if let Some(r) = &self.log.final_report {
                    write_text(&dir.join(REPORT_FILE), &r.to_json())?;
                }
            }
        }
        Ok(())
    }

    /// Parameters, batch-norm buffers, optimizer moments, normalization
    /// statistics and the run metadata.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .model
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        for (name, m, v) in self.optimizer.state_tensors(&self.model.params) {
            tensors.push((format!("{OPT_FIRST}{name}"), m));
            tensors.push((format!("{OPT_SECOND}{name}"), v));
        }
        tensors.push((NORM_MEAN.into(), Tensor::new(&[3], self.stats.mean.to_vec()).expect("3")));
        tensors.push((NORM_STD.into(), Tensor::new(&[3], self.stats.std.to_vec()).expect("3")));
        let meta = json!({
            "format": META_FORMAT,
            "epoch": self.epochs_done(),
            "seed": self.config.seed,
            "config_hash": self.config.hash(),
            "run_config": self.config,
            "model_config": self.model.config,
            "num_classes": self.model.config.num_classes,
            "optimizer": self.config.optimizer.name,
            "optimizer_step": self.optimizer.step,
            "log": self.log,
        });
        Checkpoint { tensors, meta }
    }
}

const META_FORMAT: &str = "nnmobile-run";
const OPT_FIRST: &str = "opt.m.";
const OPT_SECOND: &str = "opt.v.";
const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

/// Typed view of a run checkpoint's metadata.
#[derive(Debug, Clone, Deserialize)]
pub struct RunMeta {
    pub format: String,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub run_config: RunConfig,
    pub model_config: ModelConfig,
    pub num_classes: usize,
    pub optimizer_step: u64,
    pub log: TrainLog,
}

impl RunMeta {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: RunMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.format != META_FORMAT {
            return Err(Error::Format(format!("unexpected metadata format `{}`", meta.format)));
        }
        Ok(meta)
    }
}

fn restore_model(ckpt: &Checkpoint, meta: &RunMeta) -> Result<(Model<f32>, NormStats)> {
    let mut model = Model::<f32>::build(&meta.model_config, meta.seed)?;
    let names: Vec<String> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let t = ckpt
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
        model
            .params
            .assign(&name, t.clone())
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let three = |name: &str| -> Result<[f32; 3]> {
        let t = ckpt
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
        <[f32; 3]>::try_from(t.data()).map_err(|_| Error::Format(format!("`{name}` must hold 3 values")))
    };
    let stats = NormStats {
        mean: three(NORM_MEAN)?,
        std: three(NORM_STD)?,
    };
    stats.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok((model, stats))
}

/// Rebuild the model, normalization and run config stored in a checkpoint.
pub fn load_for_eval(ckpt: &Checkpoint) -> Result<(RunConfig, Model<f32>, NormStats)> {
    let meta = RunMeta::from_checkpoint(ckpt)?;
    let (model, stats) = restore_model(ckpt, &meta)?;
    Ok((meta.run_config, model, stats))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train a single run from its config, optionally resuming.
pub fn train_run(cfg: &RunConfig, resume: Option<&Checkpoint>, opts: &RunOptions) -> Result<Trainer> {
    let splits = load_splits(cfg)?;
    let mut trainer = match resume {
        Some(c) => Trainer::resume(cfg, c)?,
        None => Trainer::new(cfg, &splits.train, &splits.eval, splits.eval_split)?,
    };
    if trainer.log.num_classes != splits.train.num_classes {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} classes, data has {}",
            trainer.log.num_classes, splits.train.num_classes
        )));
    }
    trainer.run(&splits.train, &splits.eval, opts)?;
    Ok(trainer)
}
