//! Mini-batch training with Adam and cross-entropy, and top-1 evaluation.
//!
//! The shuffle order of epoch `e` is drawn from a generator seeded with
//! `(seed, e)`, so a run resumed from a checkpoint replays exactly the
//! batches an uninterrupted run would have seen.
//!
//! Each epoch logs up to three records: `fit` (running mean loss and
//! accuracy of the training-mode mini-batches), `train` (an inference-mode
//! pass over the training set after the epoch) and `val` (the same over the
//! held-out set).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::softmax_cross_entropy;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub epochs: u64,
    #[serde(default)]
    pub seed: u64,
    /// Single-threaded kernels and zeroed wall-clock fields, so repeated
    /// runs produce byte-identical logs and checkpoints.
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub precision: Precision,
}

fn default_batch() -> usize {
    128
}

fn default_beta1() -> f64 {
    AdamConfig::default().beta1
}

fn default_beta2() -> f64 {
    AdamConfig::default().beta2
}

fn default_eps() -> f64 {
    AdamConfig::default().eps
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let a = self.adam();
        if !(a.lr >= 0.0 && a.lr.is_finite()) {
            return bad("train.lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if a.eps.is_nan() || a.eps <= 0.0 {
            return bad("train.eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if self.precision != Precision::F64 {
            return bad("train.precision: only \"f64\" is implemented");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn render_confusion(&self) -> String {
        self.confusion
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

/// Inference-mode pass. Ties in the logits go to the lowest class index.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = model.config.num_classes;
    let mut confusion = vec![vec![0u64; k]; k];
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk)?;
        let logits = model.forward(&x)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += loss * chunk.len() as f64;
        for (pred, &truth) in logits.argmax_rows()?.into_iter().zip(&labels) {
            confusion[truth][pred] += 1;
            predictions.push(pred);
        }
    }
    let correct: u64 = (0..k).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        loss: loss_sum / data.len() as f64,
        top1: correct as f64 / data.len() as f64,
        confusion,
        predictions,
    })
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: u64,
    pub best_top1: Option<f64>,
    pub best_epoch: Option<u64>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t));
        Self {
            model,
            adam,
            epoch: 0,
            best_top1: None,
            best_epoch: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.restore_model()?;
        let adam = match ck.restore_adam(&model)? {
            Some(a) => a,
            None => AdamState::new(model.named_params().into_iter().map(|(_, t)| t)),
        };
        Ok(Self {
            model,
            adam,
            epoch: ck.meta.epoch,
            best_top1: ck.meta.best_top1,
            best_epoch: ck.meta.best_epoch,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            Some(&self.adam),
            CheckpointMeta {
                epoch: self.epoch,
                best_top1: self.best_top1,
                best_epoch: self.best_epoch,
                ..Default::default()
            },
        )
    }
}

/// Where a run writes `metrics.jsonl`, `last.ckpt` and `best.ckpt`.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn metrics(&self) -> PathBuf {
        self.0.join("metrics.jsonl")
    }

    pub fn last(&self) -> PathBuf {
        self.0.join("last.ckpt")
    }

    pub fn best(&self) -> PathBuf {
        self.0.join("best.ckpt")
    }
}

/// Mini-batch index lists for one epoch. A trailing batch of one sample
/// joins the previous batch so batch norm always sees two values.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

fn read_log(path: &Path, upto_epoch: u64) -> Result<Vec<MetricRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::from(e).in_file(path)),
    };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: MetricRecord = serde_json::from_str(line).map_err(|e| Error::from(e).in_file(path))?;
        if r.epoch <= upto_epoch {
            out.push(r);
        }
    }
    Ok(out)
}

fn write_log(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::from(e).in_file(path))
}

fn append_log(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::from(e).in_file(path))?;
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    f.write_all(&buf).map_err(|e| Error::from(e).in_file(path))
}

/// Runs epochs `state.epoch + 1 ..= cfg.epochs`, returning the records
/// written in this call. With a run directory, the metrics log is first cut
/// back to the state's epoch so a resumed run's log matches an
/// uninterrupted one.
pub fn train(
    state: &mut TrainState,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    run_dir: Option<&RunDir>,
    mut on_record: impl FnMut(&MetricRecord) + Send,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(v) = val_set {
        if v.is_empty() {
            return Err(Error::EmptyDataset);
        }
    }
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(&dir.0).map_err(|e| Error::from(e).in_file(&dir.0))?;
        let kept = read_log(&dir.metrics(), state.epoch)?;
        write_log(&dir.metrics(), &kept)?;
    }
    let threads = if cfg.deterministic { 1 } else { 0 };
    par::with_threads(threads, || run_epochs(state, train_set, val_set, cfg, run_dir, &mut on_record))
}

fn run_epochs(
    state: &mut TrainState,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    run_dir: Option<&RunDir>,
    on_record: &mut (dyn FnMut(&MetricRecord) + Send),
) -> Result<Vec<MetricRecord>> {
    let mut written = Vec::new();
    let started = Instant::now();
    let clock = |t: &Instant| if cfg.deterministic { 0.0 } else { t.elapsed().as_secs_f64() };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in epoch_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch) {
            let (x, labels) = train_set.batch(&batch)?;
            let (logits, cache) = state.model.forward_train(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "training diverged at epoch {epoch} (non-finite loss)"
                )));
            }
            let (_, grads) = state.model.backward(&cache, &dlogits)?;
            adam_step(&mut state.model.params_mut(), &grads.0, &mut state.adam, &cfg.adam())?;
            loss_sum += loss * batch.len() as f64;
            correct += logits
                .argmax_rows()?
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();
        }
        let n = train_set.len() as f64;
        let mut records = vec![MetricRecord {
            epoch,
            split: "fit".into(),
            loss: loss_sum / n,
            top1: correct as f64 / n,
            wall_time_s: clock(&started),
        }];
        let tr = evaluate(&state.model, train_set, cfg.batch_size)?;
        records.push(MetricRecord {
            epoch,
            split: "train".into(),
            loss: tr.loss,
            top1: tr.top1,
            wall_time_s: clock(&started),
        });
        let mut score = tr.top1;
        if let Some(v) = val_set {
            let ev = evaluate(&state.model, v, cfg.batch_size)?;
            score = ev.top1;
            records.push(MetricRecord {
                epoch,
                split: "val".into(),
                loss: ev.loss,
                top1: ev.top1,
                wall_time_s: clock(&started),
            });
        }
        state.epoch = epoch;
        let improved = state.best_top1.is_none_or(|b| score > b);
        if improved {
            state.best_top1 = Some(score);
            state.best_epoch = Some(epoch);
        }
        if let Some(dir) = run_dir {
            let ck = state.checkpoint();
            if improved {
                ck.save(&dir.best())?;
            }
            ck.save(&dir.last())?;
            append_log(&dir.metrics(), &records)?;
        }
        for r in &records {
            on_record(r);
        }
        written.extend(records);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::CbamSettings;
    use crate::dataset::Sample;
    use crate::model::{build_model, HeadConfig, ModelConfig};
    use crate::nn::gradcheck::random_tensor;
    use crate::tensor::Tensor;

    fn tiny_config(classes: usize) -> ModelConfig {
        ModelConfig {
            input_channels: 2,
            input_height: 8,
            input_width: 8,
            stage_channels: vec![4, 8],
            convs_per_block: 2,
            cbam_stages: None,
            cbam: CbamSettings {
                reduction: 2,
                kernel: 3,
                ..Default::default()
            },
            num_classes: classes,
            head: HeadConfig::default(),
        }
    }

    fn random_set(n: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset {
            samples: (0..n)
                .map(|i| Sample {
                    input: random_tensor(vec![2, 8, 8], &mut rng),
                    label: i % classes,
                })
                .collect(),
            classes: (0..classes).map(|c| c.to_string()).collect(),
        }
    }

    fn cfg(epochs: u64) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs,
            seed: 5,
            deterministic: true,
            precision: Precision::F64,
        }
    }

    #[test]
    fn overfits_eight_samples() {
        let data = random_set(8, 2, 1);
        let mut st = TrainState::new(build_model(&tiny_config(2), 2).unwrap());
        let log = train(&mut st, &data, None, &cfg(200), None, |_| {}).unwrap();
        let fit: Vec<f64> = log.iter().filter(|r| r.split == "fit").map(|r| r.loss).collect();
        for w in fit[..10].windows(2) {
            assert!(w[1] < w[0], "{fit:?}");
        }
        let best = log
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.top1)
            .fold(0.0, f64::max);
        assert_eq!(best, 1.0);
    }

    #[test]
    fn zero_lr_freezes_params() {
        let data = random_set(6, 2, 3);
        let model = build_model(&tiny_config(2), 4).unwrap();
        let mut st = TrainState::new(model.clone());
        let mut c = cfg(3);
        c.lr = 0.0;
        train(&mut st, &data, None, &c, None, |_| {}).unwrap();
        assert_eq!(st.model.named_params(), model.named_params());
    }

    #[test]
    fn random_model_accuracy_near_chance() {
        let data = random_set(1000, 10, 7);
        let model = build_model(&tiny_config(10), 8).unwrap();
        let ev = evaluate(&model, &data, 128).unwrap();
        assert!((0.05..=0.15).contains(&ev.top1), "{}", ev.top1);
        let total: u64 = ev.confusion.iter().flatten().sum();
        assert_eq!(total, 1000);
    }

    #[test]
    fn evaluate_ties_and_empty() {
        let mut model = build_model(&tiny_config(3), 0).unwrap();
        model.head.classifier.weight = Tensor::zeros(vec![3, 8]);
        model.head.classifier.bias = Tensor::zeros(vec![3]);
        let data = random_set(6, 3, 0);
        let ev = evaluate(&model, &data, 4).unwrap();
        assert!(ev.predictions.iter().all(|&p| p == 0));
        assert!((ev.top1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((ev.loss - 3f64.ln()).abs() < 1e-12);
        assert!(matches!(
            evaluate(&model, &Dataset::default(), 4),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn batches_cover_everything_without_singletons() {
        for n in [1, 7, 9, 17, 64] {
            let b = epoch_batches(n, 8, 1, 3);
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(n == 1 || b.iter().all(|x| x.len() >= 2));
        }
        assert_ne!(epoch_batches(32, 8, 1, 1), epoch_batches(32, 8, 1, 2));
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = random_set(12, 2, 11);
        let val = random_set(4, 2, 12);
        let dir = tempfile::tempdir().unwrap();
        let full = RunDir(dir.path().join("full"));
        let part = RunDir(dir.path().join("part"));
        let model = build_model(&tiny_config(2), 1).unwrap();

        let mut a = TrainState::new(model.clone());
        train(&mut a, &data, Some(&val), &cfg(4), Some(&full), |_| {}).unwrap();

        let mut b = TrainState::new(model);
        train(&mut b, &data, Some(&val), &cfg(2), Some(&part), |_| {}).unwrap();
        // a stale third epoch in the log must be discarded on resume
        train(&mut b.clone(), &data, Some(&val), &cfg(3), Some(&part), |_| {}).unwrap();
        let ck = Checkpoint::load(&part.last()).unwrap();
        assert_eq!(ck.meta.epoch, 3);
        let mut resumed = TrainState::from_checkpoint(&Checkpoint::decode(&b.checkpoint().encode()).unwrap()).unwrap();
        train(&mut resumed, &data, Some(&val), &cfg(4), Some(&part), |_| {}).unwrap();

        assert_eq!(resumed, a);
        let la = std::fs::read(full.metrics()).unwrap();
        let lb = std::fs::read(part.metrics()).unwrap();
        assert_eq!(la, lb);
        assert_eq!(std::fs::read(full.last()).unwrap(), std::fs::read(part.last()).unwrap());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(1);
        c.precision = Precision::F32;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
        let mut c = cfg(1);
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        let toml_like: TrainConfig = serde_json::from_str(r#"{"lr":0.001,"epochs":3}"#).unwrap();
        assert_eq!(toml_like.batch_size, 128);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"lr":0.001,"epochs":3,"lr_decay":1}"#).is_err());
    }
}
