//! Learning-rate schedule, momentum SGD, confusion-matrix metrics and the
//! training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::data::{SegmentationSample, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{predict, SegModel};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_steps: usize,
    /// `(step_count, lr)` phases, applied back to back from step 0.
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub flip: bool,
    /// Metrics line every `log_interval` steps (0 disables).
    pub log_interval: usize,
    /// Held-out mIoU every `eval_interval` steps (0 disables).
    pub eval_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            warmup_start_lr: 0.001,
            warmup_steps: 100,
            schedule: vec![(1230, 0.01), (460, 0.0001), (310, 0.0001)],
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 8,
            total_steps: 2000,
            seed: 0,
            flip: true,
            log_interval: 100,
            eval_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schedule.is_empty() {
            return bad("schedule needs at least one phase".into());
        }
        let lrs = [self.base_lr, self.warmup_start_lr].into_iter().chain(self.schedule.iter().map(|p| p.1));
        for lr in lrs {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rates must be positive, got {lr}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then the piecewise-constant schedule. Steps past
/// the last phase keep its rate.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        let t = step as f64 / cfg.warmup_steps as f64;
        return cfg.warmup_start_lr + t * (cfg.base_lr - cfg.warmup_start_lr);
    }
    let mut end = 0;
    for &(n, lr) in &cfg.schedule {
        end += n;
        if step < end {
            return lr;
        }
    }
    cfg.schedule.last().map_or(cfg.base_lr, |p| p.1)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptState {
    pub velocity: BTreeMap<String, Tensor>,
    pub step: usize,
}

/// Heavy-ball momentum with L2 weight decay folded into the gradient:
/// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor>,
    opt: &mut OptState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::InvalidArgument(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch { left: p.shape().to_vec(), right: g.shape().to_vec() });
        }
    }
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let v = opt.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(p));
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + (gv + weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    opt.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore_index: usize,
    /// Row = true class, column = predicted class.
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self::with_ignore_index(num_classes, IGNORE_INDEX as usize)
    }

    pub fn with_ignore_index(num_classes: usize, ignore_index: usize) -> Self {
        Self { num_classes, ignore_index, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch { left: vec![pred.len()], right: vec![truth.len()] });
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == self.ignore_index {
                continue;
            }
            if t >= k || p >= k {
                return Err(Error::Metric(format!("class out of range: truth {t}, prediction {p}, {k} classes")));
            }
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != self.ignore_index {
                self.counts[t * k + p] += 1;
            }
        }
        Ok(())
    }

    /// IoU per class, `None` for classes absent from both truth and prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::Metric("no evaluated classes".into()));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn update_confusion(cm: &mut ConfusionMatrix, pred: &[usize], truth: &[usize]) -> Result<()> {
    cm.update(pred, truth)
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    cm.miou()
}

/// Stacks samples into a `[B, 3, H, W]` batch and a flat label vector.
pub fn collate(samples: &[&SegmentationSample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    let mut labels = Vec::with_capacity(samples.len() * first.labels.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch { left: shape, right: s.image.shape().to_vec() });
        }
        data.extend_from_slice(s.image.data());
        labels.extend(s.labels.iter().map(|&l| l as usize));
    }
    let batch = Tensor::new(vec![samples.len(), shape[0], shape[1], shape[2]], data)?;
    Ok((batch, labels))
}

/// Confusion matrix of `model` over `samples`, evaluated `batch_size` at a time.
pub fn evaluate(model: &SegModel, samples: &[SegmentationSample], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&SegmentationSample> = chunk.iter().collect();
        let (x, labels) = collate(&refs)?;
        let pred = predict(&model.infer(&x)?)?;
        cm.update(&pred, &labels)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub steps: Vec<StepRecord>,
    /// `(step, mIoU)` of the periodic held-out evaluations.
    pub evals: Vec<(usize, f64)>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }
}

/// Formats one metrics-log line.
pub fn metrics_line(rec: &StepRecord, miou: Option<f64>) -> String {
    let mut s = format!("step={} lr={:.6} loss={:.6}", rec.step, rec.lr, rec.loss);
    if let Some(m) = miou {
        s.push_str(&format!(" miou={m:.4}"));
    }
    s
}

/// Runs `cfg.total_steps` SGD updates on `model`. Batches are drawn from a
/// per-epoch shuffle of `train`; `sink` receives every metrics line.
pub fn train_steps(
    model: &mut SegModel,
    train: &[SegmentationSample],
    eval: Option<&[SegmentationSample]>,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&str),
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let k = model.num_classes();
    for s in train {
        s.check_labels(k)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut opt = OptState::default();
    let mut history = History::default();

    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &train[order[cursor]];
            cursor += 1;
            batch.push(if cfg.flip && rng.random_bool(0.5) { s.flipped() } else { s.clone() });
        }
        let refs: Vec<&SegmentationSample> = batch.iter().collect();
        let (x, labels) = collate(&refs)?;

        let mut tape = Tape::new();
        let vars = model.params.register(&mut tape, true);
        let xv = tape.leaf(x, false);
        let out = model.forward(&mut tape, &vars, xv)?;
        let loss_var = tape.cross_entropy(out.logits, &labels, IGNORE_INDEX as usize)?;
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        tape.backward(loss_var)?;
        let grads = vars.grads(&tape);
        let lr = lr_at_step(step, cfg);
        sgd_momentum_step(&mut model.params, &grads, &mut opt, lr, cfg.momentum, cfg.weight_decay)?;

        let rec = StepRecord { step, loss, lr };
        history.steps.push(rec);
        let last = step + 1 == cfg.total_steps;
        let eval_now = cfg.eval_interval > 0 && (step % cfg.eval_interval == 0 || last);
        let miou = match (eval, eval_now) {
            (Some(ev), true) if !ev.is_empty() => {
                let m = evaluate(model, ev, cfg.batch_size)?.miou()?;
                history.evals.push((step, m));
                Some(m)
            }
            _ => None,
        };
        let log_now = cfg.log_interval > 0 && (step % cfg.log_interval == 0 || last);
        if log_now || miou.is_some() {
            sink(&metrics_line(&rec, miou));
        }
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at_step(0, &cfg), 0.001);
        assert_eq!(lr_at_step(100, &cfg), 0.01);
        assert!((lr_at_step(50, &cfg) - 0.0055).abs() < 1e-15);
        assert_eq!(lr_at_step(1229, &cfg), 0.01);
        assert_eq!(lr_at_step(1230, &cfg), 0.0001);
        assert_eq!(lr_at_step(5000, &cfg), 0.0001);
    }

    #[test]
    fn plain_gradient_step() {
        let mut p: ParamSet = [("w".to_string(), Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())].into_iter().collect();
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::new(vec![2], vec![0.5, -1.0]).unwrap())].into();
        let mut opt = OptState::default();
        sgd_momentum_step(&mut p, &g, &mut opt, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.95, 2.1]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_grad_decays_velocity() {
        let mut p: ParamSet = [("w".to_string(), Tensor::new(vec![1], vec![1.0]).unwrap())].into_iter().collect();
        let mut opt = OptState::default();
        opt.velocity.insert("w".into(), Tensor::new(vec![1], vec![2.0]).unwrap());
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::zeros(&[1]))].into();
        sgd_momentum_step(&mut p, &g, &mut opt, 0.5, 0.9, 0.0).unwrap();
        assert!((opt.velocity["w"].data()[0] - 1.8).abs() < 1e-15);
        assert!((p.get("w").unwrap().data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn quadratic_recurrence() {
        // f(w) = 0.5 * a * w^2, so g = a * w
        let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 0.01);
        let mut p: ParamSet = [("w".to_string(), Tensor::new(vec![1], vec![1.5]).unwrap())].into_iter().collect();
        let mut opt = OptState::default();
        let (mut w, mut v) = (1.5f64, 0.0f64);
        for _ in 0..2 {
            let g: BTreeMap<_, _> = [("w".to_string(), p.get("w").unwrap().scaled(a))].into();
            sgd_momentum_step(&mut p, &g, &mut opt, lr, mu, wd).unwrap();
            v = mu * v + a * w + wd * w;
            w -= lr * v;
        }
        assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p: ParamSet = [("w".to_string(), Tensor::zeros(&[2]))].into_iter().collect();
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::zeros(&[3]))].into();
        assert!(sgd_momentum_step(&mut p, &g, &mut OptState::default(), 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn confusion_counts() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1, 1], &[0, 0, 1, 255]).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 1));
        assert_eq!(cm.total(), 3);
        let before = cm.clone();
        cm.update(&[0, 1], &[255, 255]).unwrap();
        assert_eq!(cm, before);
        assert!(cm.update(&[2], &[0]).is_err());
    }

    #[test]
    fn miou_cases() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);

        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[1, 0, 1], &[0, 1, 0]).unwrap();
        assert_eq!(cm.miou().unwrap(), 0.0);

        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 0, 0, 1, 1, 1, 1, 0], &[0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        assert!((cm.miou().unwrap() - 0.6).abs() < 1e-15);

        assert!(ConfusionMatrix::new(4).miou().unwrap_err().to_string().contains("no evaluated classes"));
    }

    #[test]
    fn absent_classes_are_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(cm.class_iou(), vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn metrics_line_format() {
        let rec = StepRecord { step: 10, loss: 0.5, lr: 0.01 };
        assert_eq!(metrics_line(&rec, None), "step=10 lr=0.010000 loss=0.500000");
        assert_eq!(metrics_line(&rec, Some(0.25)), "step=10 lr=0.010000 loss=0.500000 miou=0.2500");
    }
}
