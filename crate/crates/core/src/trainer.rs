//! Frozen-backbone fine-tuning: synthetic tasks, AdamW with warmup and cosine
//! decay, and the training loop. Only adapter-bank tensors and the head are
//! ever updated; the backbone is borrowed immutably throughout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::arc::{AdapterBank, ArcConfig, BankGrad, Mode, Variant};
use crate::autodiff::{gradcheck, GradCheckReport, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::kernel::{matmul, Matrix, Rng};
use crate::vit::{self, BackboneConfig, BackboneWeights, Head, Image, TapeModel, HEAD_B, HEAD_W};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 100,
            warmup_epochs: 10,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 500 full-batch steps over the 16-sample fixture.
    pub fn separable_fixture() -> Self {
        Self {
            lr: 1.5e-2,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 500,
            warmup_epochs: 10,
            schedule: Schedule::Cosine,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    /// Learning rate for 0-based step `t` of `total`, with `warmup` warmup
    /// steps: `lr (t+1)/warmup` during warmup, then `lr 0.5 (1 + cos(pi s/S))`
    /// with `s` steps since warmup out of `S` remaining (or `lr` when constant).
    pub fn lr_at(&self, t: usize, warmup: usize, total: usize) -> f64 {
        if t < warmup {
            return self.lr * (t + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (total - warmup).max(1) as f64;
                let s = (t - warmup) as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * s / span).cos())
            }
        }
    }
}

/// How class means are placed around the shared base image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLayout {
    /// `base + separation * pattern_k`, one random pattern per class.
    #[default]
    Independent,
    /// `base + separation * k * direction`, all means on one line.
    Collinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub classes: usize,
    /// Per-pixel Gaussian noise around the class mean.
    pub noise: f64,
    pub separation: f64,
    pub layout: ClassLayout,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            classes: 4,
            noise: 0.0,
            separation: 1.0,
            layout: ClassLayout::Independent,
            train_samples: 16,
            eval_samples: 16,
        }
    }
}

impl SyntheticTask {
    /// Noise-free 4-class task with collinear means 0.02 apart: separable,
    /// but the frozen features of the middle classes lie almost on the
    /// segment between the outer ones.
    pub fn separable_fixture() -> Self {
        Self {
            classes: 4,
            noise: 0.0,
            separation: 0.02,
            layout: ClassLayout::Collinear,
            train_samples: 16,
            eval_samples: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub means: Vec<Image>,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

/// Class-conditional Gaussian images; sample `i` has label `i mod K`.
pub fn make_task(task: &SyntheticTask, backbone: &BackboneConfig, rng: &mut Rng) -> Result<Dataset> {
    if task.classes == 0 || task.classes > backbone.classes {
        return Err(Error::Config(format!(
            "task classes must be in 1..={}, got {}",
            backbone.classes, task.classes
        )));
    }
    if !(task.noise >= 0.0 && task.noise.is_finite() && task.separation.is_finite()) {
        return Err(Error::Config("noise must be non-negative and separation finite".into()));
    }
    if task.train_samples == 0 {
        return Err(Error::Config("train_samples must be positive".into()));
    }
    let base = Image::random(backbone, rng);
    let direction = Image::random(backbone, rng);
    let means: Vec<Image> = (0..task.classes)
        .map(|k| {
            let (pattern, scale) = match task.layout {
                ClassLayout::Independent => (Image::random(backbone, rng), task.separation),
                ClassLayout::Collinear => (direction.clone(), task.separation * k as f64),
            };
            let mut m = base.clone();
            for (v, p) in m.data.iter_mut().zip(&pattern.data) {
                *v += scale * p;
            }
            m
        })
        .collect();
    let draw = |n: usize, rng: &mut Rng| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let label = i % task.classes;
                let mut image = means[label].clone();
                if task.noise > 0.0 {
                    for v in &mut image.data {
                        *v += task.noise * rng.normal();
                    }
                }
                Sample { image, label }
            })
            .collect()
    };
    let train = draw(task.train_samples, rng);
    let eval = draw(task.eval_samples, rng);
    Ok(Dataset { means, train, eval })
}

/// Random images labelled by a teacher: the frozen backbone plus a full-rank
/// bank whose every adaptation matrix is a random rank-`rank` product scaled
/// by `strength`. Returns the dataset and the teacher bank.
pub fn teacher_task(
    weights: &BackboneWeights,
    arc: &ArcConfig,
    rank: usize,
    strength: f64,
    samples: usize,
    rng: &mut Rng,
) -> Result<(Dataset, AdapterBank)> {
    let cfg = &weights.config;
    let arc = arc.clone().with_variant(Variant::FullRank);
    let mut teacher = AdapterBank::init(&arc, cfg, rng)?;
    let d = cfg.embed_dim;
    let names: Vec<String> = teacher.tensors().keys().cloned().collect();
    for name in names {
        let u = rng.normal_matrix(d, rank, 1.0 / (d as f64).sqrt());
        let v = rng.normal_matrix(rank, d, 1.0 / (d as f64).sqrt());
        *teacher.tensor_mut(&name).expect("listed name") = matmul(&u, &v)?.scale(strength);
    }
    let draw = |rng: &mut Rng| -> Result<Vec<Sample>> {
        (0..samples)
            .map(|_| {
                let image = Image::random(cfg, rng);
                let label = vit::predict(&vit::forward(&image, weights, Some(&teacher), Mode::Eval)?);
                Ok(Sample { image, label })
            })
            .collect()
    };
    let train = draw(rng)?;
    let eval = draw(rng)?;
    Ok((
        Dataset {
            means: Vec::new(),
            train,
            eval,
        },
        teacher,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Accuracy on the step's batch, from the training-mode logits.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bank: Option<AdapterBank>,
    pub head: Head,
    pub curve: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    m: Matrix,
    v: Matrix,
}

/// AdamW over a named parameter set, with decoupled weight decay
/// `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    state: std::collections::BTreeMap<String, AdamState>,
    t: i32,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet, lr: f64, weight_decay: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
        let shrink = 1.0 - lr * weight_decay;
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for trainable `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim("AdamW::step", p.shape(), g.shape()));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: Matrix::zeros(p.rows(), p.cols()),
                v: Matrix::zeros(p.rows(), p.cols()),
            });
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gv;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gv * gv;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                *pv = *pv * shrink - lr * update;
            }
        }
        Ok(())
    }
}

fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            arg == labels[r]
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Trains the bank (if any) and the head on `data.train` with the backbone
/// frozen. `bank = None` is a linear probe.
pub fn train(
    backbone: &BackboneWeights,
    bank: Option<AdapterBank>,
    head: Head,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(b) = &bank {
        b.config().validate(&backbone.config)?;
    }
    let mut bank = bank;
    if let Some(b) = bank.as_mut() {
        b.set_training(true);
    }
    let mut head = head;
    let spe = cfg.steps_per_epoch(data.train.len());
    let total = cfg.epochs * spe;
    let warmup = cfg.warmup_epochs * spe;

    let mut rng = Rng::new(cfg.seed);
    let mut order_rng = rng.fork();
    let mut dropout_rng = rng.fork();
    let mut opt = AdamW::new();
    let mut curve = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for step in 0..total {
        if step % spe == 0 {
            order_rng.shuffle(&mut order);
        }
        let start = (step % spe) * cfg.batch_size;
        let idx = &order[start..(start + cfg.batch_size).min(order.len())];
        let images: Vec<&Image> = idx.iter().map(|&i| &data.train[i].image).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.train[i].label).collect();
        let lr = cfg.lr_at(step, warmup, total);

        let model = TapeModel {
            backbone,
            head: &head,
            head_trainable: true,
            bank: bank.as_ref(),
            bank_grad: BankGrad::Trainable,
        };
        let mut tape = Tape::new();
        let mut batch_logits = None;
        let (out, loss) = tape.record(|t| {
            let mut rows = Vec::with_capacity(images.len());
            for img in &images {
                rows.push(vit::logits_tape(t, &model, img, Mode::Train(&mut dropout_rng))?);
            }
            let logits = t.concat_rows(&rows)?;
            batch_logits = Some(logits);
            t.cross_entropy(logits, &labels)
        })?;
        let grads = tape.backward(out)?;
        if !loss.is_finite() {
            let max_grad = grads.values().map(Matrix::max_abs).fold(0.0, f64::max);
            return Err(Error::NonFiniteLoss { step, lr, max_grad });
        }
        let acc = accuracy(tape.value(batch_logits.expect("set in record")), &labels);

        let mut params = ParamSet::new();
        params.insert(HEAD_W.to_string(), head.w.clone());
        params.insert(HEAD_B.to_string(), head.b.clone());
        if let Some(b) = &bank {
            params.extend(b.tensors().iter().map(|(n, m)| (n.clone(), m.clone())));
        }
        opt.step(&mut params, &grads, lr, cfg.weight_decay)?;
        head.w = params.remove(HEAD_W).expect("inserted");
        head.b = params.remove(HEAD_B).expect("inserted");
        if let Some(b) = bank.as_mut() {
            for (name, value) in params {
                *b.tensor_mut(&name).expect("bank tensor") = value;
            }
        }
        curve.push(StepRecord {
            step,
            lr,
            loss,
            accuracy: acc,
        });
    }
    if let Some(b) = bank.as_mut() {
        b.set_training(false);
    }
    Ok(TrainOutcome { bank, head, curve })
}

/// Eval-mode accuracy over `samples`.
pub fn evaluate(backbone: &BackboneWeights, bank: Option<&AdapterBank>, head: &Head, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for s in samples {
        let logits = vit::forward_with_head(&s.image, backbone, head, bank, Mode::Eval)?;
        hits += usize::from(vit::predict(&logits) == s.label);
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Finite-difference check of the batch loss against every bank tensor, with
/// dropout active under a fixed mask seed so both passes see the same masks.
pub fn bank_gradcheck(
    backbone: &BackboneWeights,
    bank: &AdapterBank,
    samples: &[Sample],
    mask_seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let params: ParamSet = bank.tensors().clone();
    gradcheck(
        |t, p| {
            let bank = bank.with_params(p)?;
            let model = TapeModel {
                backbone,
                head: &backbone.head,
                head_trainable: false,
                bank: Some(&bank),
                bank_grad: BankGrad::Trainable,
            };
            let mut rng = Rng::new(mask_seed);
            vit::loss_tape(t, &model, &images, &labels, Mode::Train(&mut rng))
        },
        &params,
        h,
        tol,
    )
}

pub fn write_loss_csv(curve: &[StepRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,lr,loss,accuracy")?;
    for r in curve {
        writeln!(out, "{},{},{},{}", r.step, r.lr, r.loss, r.accuracy)?;
    }
    Ok(())
}
