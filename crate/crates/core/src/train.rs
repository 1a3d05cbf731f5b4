//! Optimization: AdamW, warmup + cosine schedule, adaptive gradient
//! clipping, parameter EMA, random erasing and the training loop.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{save_checkpoint, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{confusion, metrics, ConfusionMatrix, Metrics};
use crate::nn::{Binder, Module};
use crate::tensor::Tensor;
use crate::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_warmup_start: f64,
    pub lr_min: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub agc_lambda: f64,
    pub agc_eps: f64,
    pub erase_prob: f64,
    pub flip_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr_init: 3.0e-3,
            lr_warmup_start: 1.0e-4,
            lr_min: 1.0e-5,
            warmup_epochs: 5.0,
            weight_decay: 0.025,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.99996,
            agc_lambda: 0.02,
            agc_eps: 1e-3,
            erase_prob: 0.25,
            flip_prob: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr_warmup_start < self.lr_init && self.lr_min < self.lr_init) {
            return bad("warmup start and minimum lr must be below lr_init");
        }
        if self.lr_min < 0.0 || self.lr_warmup_start < 0.0 {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..=self.epochs as f64).contains(&self.warmup_epochs) {
            return bad("warmup must fit inside the run");
        }
        for (name, p) in [
            ("erase_prob", self.erase_prob),
            ("flip_prob", self.flip_prob),
            ("ema_decay", self.ema_decay),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.agc_lambda <= 0.0 || self.weight_decay < 0.0 {
            return bad("agc_lambda must be positive and weight_decay non-negative");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("train config: {e}")))
    }
}

/// Learning rate after `t` epochs (fractional): linear from
/// `lr_warmup_start` to `lr_init` over the warmup, then cosine down to
/// `lr_min` at `epochs`.
pub fn lr_at(cfg: &TrainConfig, t: f64) -> f64 {
    let w = cfg.warmup_epochs;
    let t = t.clamp(0.0, cfg.epochs as f64);
    if t < w {
        let a = t / w;
        cfg.lr_warmup_start * (1.0 - a) + cfg.lr_init * a
    } else {
        let span = cfg.epochs as f64 - w;
        let p = if span > 0.0 { (t - w) / span } else { 1.0 };
        let c = 0.5 * (1.0 + (PI * p).cos());
        cfg.lr_init * c + cfg.lr_min * (1.0 - c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW update of a flat parameter: decoupled decay `p·(1 − lr·wd)`,
/// then the bias-corrected Adam step. `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
    wd: f64,
    h: AdamHyper,
) {
    let c1 = 1.0 - h.beta1.powi(step as i32);
    let c2 = 1.0 - h.beta2.powi(step as i32);
    let decay = (1.0 - lr * wd) as f32;
    let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] as f64 / c1;
        let v_hat = v[i] as f64 / c2;
        p[i] = p[i] * decay - (lr * m_hat / (v_hat.sqrt() + h.eps)) as f32;
    }
}

/// Moments for every parameter of a model, in visit order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimState {
    pub fn for_model(model: &impl Module) -> Self {
        let mut s = Self::default();
        model.visit("", &mut |_, t| {
            s.m.push(vec![0.0; t.numel()]);
            s.v.push(vec![0.0; t.numel()]);
        });
        s
    }
}

/// Applies AdamW to every named parameter of `model`.
pub fn adamw_step(
    model: &mut impl Module,
    grads: &HashMap<String, Vec<f32>>,
    state: &mut OptimState,
    lr: f64,
    wd: f64,
    h: AdamHyper,
) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let mut i = 0;
    let mut missing = None;
    model.visit_mut("", &mut |name, t| {
        match grads.get(&name) {
            Some(g) if g.len() == t.numel() => adamw_update(
                t.data_mut(),
                g,
                &mut state.m[i],
                &mut state.v[i],
                step,
                lr,
                wd,
                h,
            ),
            _ => {
                missing.get_or_insert(name);
            }
        }
        i += 1;
    });
    missing.map_or(Ok(()), |n| Err(Error::MissingTensor(n)))
}

/// Unit-wise adaptive gradient clipping. Units are output rows (first
/// dim) for rank ≥ 2 and the whole tensor otherwise. A unit whose gradient
/// norm exceeds `λ·max(‖w‖, eps)` is rescaled to exactly that norm.
pub fn agc_clip(param: &Tensor, grad: &mut [f32], lambda: f64, eps: f64) {
    let rows = if param.rank() >= 2 {
        param.dims()[0]
    } else {
        1
    };
    let unit = param.numel() / rows.max(1);
    if unit == 0 {
        return;
    }
    for (w, g) in param.data().chunks(unit).zip(grad.chunks_mut(unit)) {
        let norm = |x: &[f32]| x.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let max = lambda * norm(w).max(eps);
        let gn = norm(g);
        if gn > max {
            let s = (max / gn) as f32;
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// `e ← d·e + (1 − d)·p`, accumulated in f64.
pub fn ema_update(ema: &mut [f64], params: &[f32], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * *p as f64;
    }
}

/// Exponential moving average of a model's parameters. The average lives
/// in f64: at decay 0.99996 a single f32 step would round away.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    shadow: Vec<Vec<f64>>,
}

impl Ema {
    pub fn new(model: &impl Module, decay: f64) -> Self {
        let mut shadow = Vec::new();
        model.visit("", &mut |_, t| {
            shadow.push(t.data().iter().map(|v| *v as f64).collect())
        });
        Self { decay, shadow }
    }

    pub fn update(&mut self, model: &impl Module) {
        let mut i = 0;
        let decay = self.decay;
        let shadow = &mut self.shadow;
        model.visit("", &mut |_, t| {
            ema_update(&mut shadow[i], t.data(), decay);
            i += 1;
        });
    }

    pub fn shadow(&self) -> &[Vec<f64>] {
        &self.shadow
    }

    /// Copies the averaged values into a model of the same schema.
    pub fn write_into<M: Module>(&self, model: &mut M) {
        let mut i = 0;
        model.visit_mut("", &mut |_, t| {
            for (d, s) in t.data_mut().iter_mut().zip(&self.shadow[i]) {
                *d = *s as f32;
            }
            i += 1;
        });
    }
}

/// Erased rectangle: top-left corner and extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// With probability `p`, replaces a random rectangle covering 2–33 % of
/// the area (aspect 0.3–3.3) of a `[c, h, w]` image with uniform noise in
/// `[-1, 1]`.
pub fn random_erase(img: &mut Tensor, rng: &mut impl Rng, p: f64) -> Option<Region> {
    let [c, h, w] = *img.dims() else { return None };
    if !rng.gen_bool(p.clamp(0.0, 1.0)) || h == 0 || w == 0 {
        return None;
    }
    let area = (h * w) as f64;
    let mut size = (1, 1);
    for attempt in 0..10 {
        let target = area * rng.gen_range(0.02..0.33);
        let aspect = rng.gen_range(0.3f64.ln()..3.3f64.ln()).exp();
        let eh = ((target * aspect).sqrt().round() as usize).max(1);
        let ew = ((target / aspect).sqrt().round() as usize).max(1);
        size = (eh.min(h), ew.min(w));
        if (eh <= h && ew <= w) || attempt == 9 {
            break;
        }
    }
    let (eh, ew) = size;
    let y0 = rng.gen_range(0..=h - eh);
    let x0 = rng.gen_range(0..=w - ew);
    let d = img.data_mut();
    for ch in 0..c {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                d[(ch * h + y) * w + x] = rng.gen_range(-1.0..1.0);
            }
        }
    }
    Some(Region {
        y: y0,
        x: x0,
        h: eh,
        w: ew,
    })
}

/// Mirrors a `[c, h, w]` image left-right in place.
pub fn hflip(img: &mut Tensor) {
    let [_, _, w] = *img.dims() else { return };
    for row in img.data_mut().chunks_mut(w) {
        row.reverse();
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_f1: f64,
    pub ema_val_acc: f64,
    pub ema_val_f1: f64,
}

/// History as CSV; `header` lines are emitted first as `#` comments.
pub fn history_csv(records: &[EpochRecord], header: &str) -> String {
    let mut s = String::new();
    for line in header.lines() {
        s += &format!("# {line}\n");
    }
    s += "epoch,lr,train_loss,train_acc,val_acc,val_f1,ema_val_acc,ema_val_f1\n";
    for r in records {
        s += &format!(
            "{},{:.8e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc,
            r.val_acc,
            r.val_f1,
            r.ema_val_acc,
            r.ema_val_f1
        );
    }
    s
}

/// Predictions, confusion matrix and metrics of `model` on `ds`.
pub struct Evaluation {
    pub preds: Vec<usize>,
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

pub fn evaluate(model: &Model, ds: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if model.classes() != ds.classes() {
        return Err(Error::ClassCount {
            model: model.classes(),
            data: ds.classes(),
        });
    }
    let mut preds = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = ds.batch(chunk)?;
        let logits = model.predict(&x)?;
        preds.extend(argmax_rows(&logits));
    }
    let cm = confusion(&preds, &ds.labels(), ds.classes())?;
    Ok(Evaluation {
        metrics: metrics(&cm),
        confusion: cm,
        preds,
    })
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f32::NEG_INFINITY),
                    |b, (i, &v)| if v > b.1 { (i, v) } else { b },
                )
                .0
        })
        .collect()
}

pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub ema: Model,
}

/// Trains `model` in place. Under `out`, writes `best.stck` (best
/// validation accuracy, or train accuracy without a validation set) as it
/// improves, then `ema.stck` and `last.stck`. `on_epoch` sees every record
/// as it is produced.
pub fn fit(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    for ds in std::iter::once(train).chain(val) {
        if ds.classes() != model.classes() {
            return Err(Error::ClassCount {
                model: model.classes(),
                data: ds.classes(),
            });
        }
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimState::for_model(model);
    let mut ema = Ema::new(model, cfg.ema_decay);
    let mut ema_model = model.clone();
    let hyper = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0f64, 0usize, 0.0);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut img = train.image(i)?;
                if rng.gen_bool(cfg.flip_prob) {
                    hflip(&mut img);
                }
                random_erase(&mut img, &mut rng, cfg.erase_prob);
                images.push(img);
            }
            let s = train.resolution;
            let data: Vec<f32> = images
                .iter()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            let x = Tensor::new(&[chunk.len(), 3, s, s], data)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.items[i].label).collect();

            let tape = Tape::new();
            let mut binder = Binder::new(&tape);
            let xv = tape.constant(x);
            let fwd = model.forward(&mut binder, xv)?;
            let (loss, probs) = tape.cross_entropy(fwd.logits, &labels)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    batch: b + 1,
                    value: loss_value,
                });
            }
            loss_sum += loss_value as f64 * chunk.len() as f64;
            correct += argmax_rows(&probs)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();

            let mut grads = tape.backward(loss);
            let mut named = binder.gradients(&mut grads);
            drop(binder);
            model.visit("", &mut |name, t| {
                if let Some(g) = named.get_mut(&name) {
                    agc_clip(t, g, cfg.agc_lambda, cfg.agc_eps);
                }
            });
            lr = lr_at(cfg, step as f64 / steps_per_epoch as f64);
            adamw_step(model, &named, &mut state, lr, cfg.weight_decay, hyper)?;
            ema.update(model);
            step += 1;
        }
        let mut record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc: 0.0,
            val_f1: 0.0,
            ema_val_acc: 0.0,
            ema_val_f1: 0.0,
        };
        if let Some(v) = val.filter(|v| !v.is_empty()) {
            let live = evaluate(model, v, cfg.batch_size)?;
            ema.write_into(&mut ema_model);
            let smoothed = evaluate(&ema_model, v, cfg.batch_size)?;
            record.val_acc = live.metrics.accuracy;
            record.val_f1 = live.metrics.macro_f1;
            record.ema_val_acc = smoothed.metrics.accuracy;
            record.ema_val_f1 = smoothed.metrics.macro_f1;
        }
        let score = if val.is_some_and(|v| !v.is_empty()) {
            record.val_acc
        } else {
            record.train_acc
        };
        if score > best {
            best = score;
            if let Some(dir) = out {
                save_checkpoint(model, &dir.join("best.stck"))?;
            }
        }
        on_epoch(&record);
        history.push(record);
    }
    ema.write_into(&mut ema_model);
    if let Some(dir) = out {
        save_checkpoint(&ema_model, &dir.join("ema.stck"))?;
        save_checkpoint(model, &dir.join("last.stck"))?;
    }
    Ok(FitOutcome {
        history,
        ema: ema_model,
    })
}
