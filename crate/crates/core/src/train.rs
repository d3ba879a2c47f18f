//! Adam optimization, the training loop and detection metrics.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape};
use crate::config::value;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::Real;
use crate::tensor::Tensor;

/// Labeled images held in memory. Label 1 is the fake class.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub sources: Vec<String>,
}

impl<T: Real> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, sources: Vec<String>) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.rank() != 4 || labels.len() != n || sources.len() != n {
            return Err(Error::Shape(format!(
                "dataset of {:?} images with {} labels and {} sources",
                images.shape(),
                labels.len(),
                sources.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Data(format!("label {bad} is not binary")));
        }
        Ok(Dataset { images, labels, sources })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Dataset {
            images: self.images.select(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            sources: indices.iter().map(|&i| self.sources[i].clone()).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Small-corpus preset: lr 1e-3, 20 epochs, batch 16.
    pub fn desk() -> Self {
        TrainConfig {
            lr0: 1e-3,
            batch_size: 16,
            epochs: 20,
            decay_every: 10,
            decay: 0.8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }

    /// Full-corpus preset: lr 2e-2, 100 epochs, batch 32.
    pub fn full_corpus() -> Self {
        TrainConfig { lr0: 2e-2, batch_size: 32, epochs: 100, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size and decay_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        [
            ("lr0", self.lr0.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("decay", self.decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "lr0" => self.lr0 = value(key, v)?,
            "batch_size" => self.batch_size = value(key, v)?,
            "epochs" => self.epochs = value(key, v)?,
            "decay_every" => self.decay_every = value(key, v)?,
            "decay" => self.decay = value(key, v)?,
            "beta1" => self.beta1 = value(key, v)?,
            "beta2" => self.beta2 = value(key, v)?,
            "eps" => self.eps = value(key, v)?,
            "seed" => self.seed = value(key, v)?,
            _ => return Err(Error::Config(format!("unknown train key {key:?}"))),
        }
        Ok(())
    }
}

/// `lr0 * decay^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<'a, T: Real + 'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} parameters, {} gradients, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Contract(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(cfg.eps));
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,lr,loss,train_acc";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:e},{:.9},{:.6}", self.epoch, self.lr, self.loss, self.train_acc)
    }
}

fn check_two_classes<T: Real>(data: &Dataset<T>) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let fakes = data.labels.iter().filter(|&&l| l == 1).count();
    if fakes == 0 || fakes == data.len() {
        return Err(Error::Data(format!(
            "training needs both classes, got {} real and {fakes} fake images",
            data.len() - fakes
        )));
    }
    Ok(())
}

fn predicted(row: &[impl Real]) -> usize {
    usize::from(fake_probability(row) >= 0.5)
}

/// Softmax probability of class 1 from a pair of logits.
pub fn fake_probability<T: Real>(row: &[T]) -> f64 {
    let d = row[0].f64() - row[1].f64();
    1.0 / (1.0 + d.exp())
}

/// Trains `model` in place. `on_epoch` sees each log line as it is
/// produced.
pub fn train<T: Real>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_two_classes(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.params().iter().map(|(_, t)| t));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let x = data.images.select(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &x, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &labels)?;
            loss_sum += tape.tensor(loss)?.item()?.f64() * idx.len() as f64;
            let logits = tape.tensor(pass.logits)?;
            correct += logits.data().chunks(2).zip(&labels).filter(|(r, &l)| predicted(r) == l).count();
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor<T>> = pass
                .params
                .iter()
                .zip(model.params())
                .map(|(&v, (_, p))| grads.real_or_zeros(v, p))
                .collect();
            drop(grads);
            drop(tape);
            adam_step(model.params_mut(), &g, &mut state, lr, cfg)?;
            model.commit_stats(pass.stats)?;
        }
        let log = EpochLog {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Non-interpolated average precision: the mean, over positive items, of
/// the precision within the top-k list ending at that item. Items are
/// ranked by descending score; ties keep their input order.
pub fn average_precision(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("scores contain NaN".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let (mut hits, mut total) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Input("average precision needs at least one positive".into()));
    }
    Ok(total / hits as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceRow {
    pub source: String,
    pub count: usize,
    pub correct: usize,
    /// Undefined for a source without fake images.
    pub average_precision: Option<f64>,
}

impl SourceRow {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub count: usize,
    pub real: usize,
    pub fake: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub average_precision: f64,
    /// Rows in order of first appearance of the source tag.
    pub per_source: Vec<SourceRow>,
    /// Fake-class probability per item, in dataset order.
    pub scores: Vec<f64>,
}

impl EvalReport {
    pub fn error_rate(&self) -> f64 {
        (self.count - self.correct) as f64 / self.count as f64
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        format!(
            "count = {}\nreal = {}\nfake = {}\ncorrect = {}\naccuracy = {:.6}\naverage_precision = {:.6}\n",
            self.count, self.real, self.fake, self.correct, self.accuracy, self.average_precision
        )
    }

    pub fn per_source_csv(&self) -> String {
        let mut out = String::from("source,count,correct,accuracy,average_precision\n");
        for r in &self.per_source {
            let ap = r.average_precision.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!("{},{},{},{:.6},{ap}\n", r.source, r.count, r.correct, r.accuracy()));
        }
        out
    }
}

/// Scores `data` in eval mode.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset<T>) -> Result<EvalReport> {
    const CHUNK: usize = 64;
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate an empty dataset".into()));
    }
    let mut scores = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        let logits = model.logits(&data.images.select(idx)?)?;
        scores.extend(logits.data().chunks(2).map(fake_probability));
    }
    report(&scores, &data.labels, &data.sources)
}

/// Builds a report from fake-class probabilities.
pub fn report(scores: &[f64], labels: &[usize], sources: &[String]) -> Result<EvalReport> {
    if scores.is_empty() || scores.len() != labels.len() || scores.len() != sources.len() {
        return Err(Error::Input(format!(
            "{} scores, {} labels, {} sources",
            scores.len(),
            labels.len(),
            sources.len()
        )));
    }
    let hit = |i: usize| usize::from(scores[i] >= 0.5) == labels[i];
    let correct = (0..scores.len()).filter(|&i| hit(i)).count();
    let fake = labels.iter().filter(|&&l| l == 1).count();
    let mut names: Vec<&String> = Vec::new();
    for s in sources {
        if !names.contains(&s) {
            names.push(s);
        }
    }
    let per_source = names
        .into_iter()
        .map(|name| {
            let idx: Vec<usize> = (0..scores.len()).filter(|&i| &sources[i] == name).collect();
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            SourceRow {
                source: name.clone(),
                count: idx.len(),
                correct: idx.iter().filter(|&&i| hit(i)).count(),
                average_precision: average_precision(&s, &l).ok(),
            }
        })
        .collect();
    let average_precision = if fake == 0 { 0.0 } else { average_precision(scores, labels)? };
    Ok(EvalReport {
        count: scores.len(),
        real: scores.len() - fake,
        fake,
        correct,
        accuracy: correct as f64 / scores.len() as f64,
        average_precision,
        per_source,
        scores: scores.to_vec(),
    })
}
