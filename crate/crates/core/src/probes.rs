//! Frozen-feature evaluation: linear and k-nearest-neighbour probes over
//! full-sequence `[CLS]` embeddings.

use log::warn;
use rayon::prelude::*;

use crate::encoder::{Encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::numeric::{l2_normalize_rows, Tensor};
use crate::patching::ImageGray;

/// Embedding rows with their integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    embeddings: Tensor,
    labels: Vec<usize>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: Tensor, labels: Vec<usize>) -> Result<Self> {
        match embeddings.dims2() {
            Some((rows, _)) if embeddings.rank() == 2 && rows == labels.len() => {}
            _ => return Err(Error::shape("labeled embeddings", embeddings.shape(), &[labels.len(), 0])),
        }
        if !embeddings.is_finite() {
            return Err(Error::NonFinite("embedding values".into()));
        }
        Ok(LabeledEmbeddings { embeddings, labels })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Same rows with every vector mapped through `f` (used for rotations).
    pub fn map_rows(&self, mut f: impl FnMut(&[f32]) -> Vec<f32>) -> Result<Self> {
        let data: Vec<f32> = (0..self.len()).flat_map(|i| f(self.embeddings.row(i))).collect();
        let dim = data.len() / self.len().max(1);
        Self::new(Tensor::new(&[self.len(), dim], data)?, self.labels.clone())
    }
}

/// Full-sequence embeddings of labelled images under frozen parameters,
/// L2-normalized. Row order follows `images`.
pub fn embed_dataset(
    cfg: &EncoderConfig,
    params: &EncoderParams,
    images: &[(ImageGray, usize)],
) -> Result<LabeledEmbeddings> {
    if images.is_empty() {
        return Err(Error::Config("no images to embed".into()));
    }
    let encoder = Encoder::new(cfg.clone())?;
    let rows: Vec<Tensor> = images
        .par_iter()
        .map(|(img, _)| encoder.embed_image(params, img))
        .collect::<Result<_>>()?;
    let data = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    let raw = Tensor::new(&[images.len(), cfg.dim], data)?;
    LabeledEmbeddings::new(l2_normalize_rows(&raw)?, images.iter().map(|(_, l)| *l).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Z-score features with training-set statistics before fitting (the
    /// fitted map stays affine in the raw embedding).
    pub standardize: bool,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            epochs: 500,
            lr: 0.5,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub accuracy: f64,
    /// Test accuracy per class; `None` for classes missing from train or test.
    pub per_class: Vec<Option<f64>>,
    pub train_accuracy: f64,
    /// Mean training cross-entropy before each epoch's update, then final.
    pub loss_curve: Vec<f64>,
}

struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &LabeledEmbeddings, enabled: bool) -> Self {
        let d = x.dim();
        if !enabled {
            return Standardizer {
                mean: vec![0.0; d],
                inv_std: vec![1.0; d],
            };
        }
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for i in 0..x.len() {
            for (m, &v) in mean.iter_mut().zip(x.embeddings().row(i)) {
                *m += f64::from(v) / n;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..x.len() {
            for ((s, &v), m) in var.iter_mut().zip(x.embeddings().row(i)).zip(&mean) {
                *s += (f64::from(v) - m).powi(2) / n;
            }
        }
        let inv_std = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, inv_std }
    }

    fn apply(&self, x: &LabeledEmbeddings) -> Vec<Vec<f64>> {
        (0..x.len())
            .map(|i| {
                x.embeddings()
                    .row(i)
                    .iter()
                    .zip(&self.mean)
                    .zip(&self.inv_std)
                    .map(|((&v, m), s)| (f64::from(v) - m) * s)
                    .collect()
            })
            .collect()
    }
}

struct Linear {
    w: Vec<f64>, // D x C
    b: Vec<f64>,
    classes: usize,
}

impl Linear {
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut logits = self.b.clone();
        for (k, &xv) in x.iter().enumerate() {
            for (l, w) in logits.iter_mut().zip(&self.w[k * c..(k + 1) * c]) {
                *l += xv * w;
            }
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logits.iter_mut().for_each(|l| *l /= total);
        logits
    }

    fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.probs(x))
    }
}

fn argmax(v: &[f64]) -> usize {
    // lowest index wins ties
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression on frozen features: one linear map to
/// class logits, softmax cross-entropy, full-batch gradient descent from zero.
pub fn linear_probe(train: &LabeledEmbeddings, test: &LabeledEmbeddings, cfg: &LinearProbeConfig) -> Result<ProbeReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("probe sets must be nonempty".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::shape("linear_probe", train.embeddings().shape(), test.embeddings().shape()));
    }
    let classes = train.num_classes().max(test.num_classes());
    if classes < 2 {
        return Err(Error::Config("probing needs at least two classes".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("probe lr must be positive, got {}", cfg.lr)));
    }
    let mut present = vec![false; classes];
    train.labels().iter().for_each(|&l| present[l] = true);
    for (c, _) in present.iter().enumerate().filter(|(_, p)| !**p) {
        warn!("class {c} is absent from the probe training set");
    }

    let scaler = Standardizer::fit(train, cfg.standardize);
    let xs = scaler.apply(train);
    let d = train.dim();
    let n = xs.len() as f64;
    let mut model = Linear {
        w: vec![0.0; d * classes],
        b: vec![0.0; classes],
        classes,
    };
    let mut loss_curve = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let mut gw = vec![0.0; d * classes];
        let mut gb = vec![0.0; classes];
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(train.labels()) {
            let mut p = model.probs(x);
            loss -= p[y].max(1e-300).ln();
            p[y] -= 1.0;
            for (k, &xv) in x.iter().enumerate() {
                for (g, &pc) in gw[k * classes..(k + 1) * classes].iter_mut().zip(&p) {
                    *g += xv * pc;
                }
            }
            gb.iter_mut().zip(&p).for_each(|(g, &pc)| *g += pc);
        }
        loss_curve.push(loss / n);
        if epoch == cfg.epochs {
            break;
        }
        let step = cfg.lr / n;
        model.w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= step * g);
        model.b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= step * g);
    }
    if loss_curve.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("linear probe loss".into()));
    }

    let accuracy_on = |set: &LabeledEmbeddings| -> (f64, Vec<(usize, usize)>) {
        let mut per = vec![(0usize, 0usize); classes];
        for (x, &y) in scaler.apply(set).iter().zip(set.labels()) {
            per[y].1 += 1;
            if model.predict(x) == y {
                per[y].0 += 1;
            }
        }
        let hits: usize = per.iter().map(|p| p.0).sum();
        (hits as f64 / set.len() as f64, per)
    };
    let (train_accuracy, _) = accuracy_on(train);
    let (accuracy, per) = accuracy_on(test);
    let per_class = per
        .iter()
        .zip(&present)
        .map(|(&(hit, total), &seen)| (seen && total > 0).then(|| hit as f64 / total as f64))
        .collect();
    Ok(ProbeReport {
        accuracy,
        per_class,
        train_accuracy,
        loss_curve,
    })
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    if denom > 0.0 {
        dot / denom
    } else {
        0.0
    }
}

/// Majority label among the `k` most cosine-similar bank rows. Ties go to the
/// larger summed similarity, then the lowest label.
pub fn knn_predict(bank: &LabeledEmbeddings, query: &[f32], k: usize) -> Result<usize> {
    if bank.is_empty() {
        return Err(Error::Config("kNN bank is empty".into()));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::Config(format!("k = {k} must lie in 1..={}", bank.len())));
    }
    if query.len() != bank.dim() {
        return Err(Error::shape("knn_predict", &[query.len()], bank.embeddings().shape()));
    }
    let mut sims: Vec<(f64, usize)> = (0..bank.len())
        .map(|i| (cosine(bank.embeddings().row(i), query), i))
        .collect();
    // stable on index for equal similarities
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let classes = bank.num_classes();
    let mut votes = vec![(0usize, 0.0f64); classes];
    for &(s, i) in &sims[..k] {
        let v = &mut votes[bank.labels()[i]];
        v.0 += 1;
        v.1 += s;
    }
    let mut best = 0;
    for c in 1..classes {
        let (bc, bs) = votes[best];
        let (cc, cs) = votes[c];
        if cc > bc || (cc == bc && cs > bs) {
            best = c;
        }
    }
    Ok(best)
}

pub fn knn_probe(bank: &LabeledEmbeddings, queries: &LabeledEmbeddings, k: usize) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Config("no kNN queries".into()));
    }
    let predictions: Vec<usize> = (0..queries.len())
        .into_par_iter()
        .map(|i| knn_predict(bank, queries.embeddings().row(i), k))
        .collect::<Result<_>>()?;
    let hits = predictions.iter().zip(queries.labels()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / queries.len() as f64)
}
