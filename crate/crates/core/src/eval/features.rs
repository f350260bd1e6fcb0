//! Metric feature extractor: a small 1-D residual classifier over the five
//! diagnostic classes whose penultimate activations serve as the feature
//! space for the distribution metrics.

use ecgtwin_nn::seed::Stream;
use ecgtwin_nn::{AdamW, Graph, ParamStore, Real, Tensor, Var};

use crate::data::preprocess::TARGET_LEN;
use crate::data::record::EcgRecord;
use crate::model::{BoundParams, IN_LEADS};
use crate::{Error, Result, F};

pub const FEATURE_DIM: usize = 64;
pub const N_CLASSES: usize = 5;

/// Channel schedule of the classifier trunk; each stage halves the length.
const STAGE_CHANNELS: [usize; 5] = [8, 12, 16, 24, 32];

/// An N x d matrix of extracted feature vectors with a provenance tag.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub vectors: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub source: String,
}

impl FeatureSet {
    pub fn new(vectors: Vec<f64>, n: usize, d: usize, source: &str) -> Result<Self> {
        if vectors.len() != n * d {
            return Err(Error::validation(format!(
                "feature set {source}: {} values cannot fill {n} x {d}",
                vectors.len()
            )));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::data(format!("feature set {source} has non-finite values")));
        }
        Ok(FeatureSet {
            vectors,
            n,
            d,
            source: source.to_string(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }
}

/// Squared Euclidean distance between two equal-length vectors.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn param_shapes() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |n: &str, s: &[usize]| out.push((n.to_string(), s.to_vec()));
    push("clf.stem.w", &[STAGE_CHANNELS[0], IN_LEADS, 3]);
    push("clf.stem.b", &[STAGE_CHANNELS[0]]);
    for i in 0..4 {
        let (cin, cout) = (STAGE_CHANNELS[i], STAGE_CHANNELS[i + 1]);
        push(&format!("clf.stage{i}.conv1.w"), &[cout, cin, 3]);
        push(&format!("clf.stage{i}.conv1.b"), &[cout]);
        push(&format!("clf.stage{i}.conv2.w"), &[cout, cout, 3]);
        push(&format!("clf.stage{i}.conv2.b"), &[cout]);
        push(&format!("clf.stage{i}.skip.w"), &[cout, cin, 1]);
        push(&format!("clf.stage{i}.skip.b"), &[cout]);
    }
    push("clf.fc1.w", &[FEATURE_DIM, STAGE_CHANNELS[4]]);
    push("clf.fc1.b", &[FEATURE_DIM]);
    push("clf.fc2.w", &[N_CLASSES, FEATURE_DIM]);
    push("clf.fc2.b", &[N_CLASSES]);
    out
}

fn init_store(seed: u64) -> ParamStore<F> {
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes() {
        let numel: usize = shape.iter().product();
        let data: Vec<F> = if name.ends_with(".b") {
            vec![0.0; numel]
        } else {
            // He-normal over fan-in (product of all dims but the first).
            let fan_in: usize = shape.iter().skip(1).product();
            let std = (2.0 / fan_in as f64).sqrt();
            let mut s = Stream::named(seed, &name);
            (0..numel).map(|_| (s.normal() * std) as F).collect()
        };
        store.insert(&name, Tensor::from_vec(&shape, data));
    }
    store
}

/// Small residual classifier; features are the penultimate activations.
pub struct Classifier {
    pub store: ParamStore<F>,
}

fn forward<T: Real>(g: &mut Graph<T>, p: &BoundParams, x: Var, n: usize) -> (Var, Var) {
    let mut h = g.conv1d(x, p.v("clf.stem.w"), p.v("clf.stem.b"), 2, 1);
    h = g.relu(h);
    h = g.avgpool2(h);
    for i in 0..4 {
        let c1 = g.conv1d(
            h,
            p.v(&format!("clf.stage{i}.conv1.w")),
            p.v(&format!("clf.stage{i}.conv1.b")),
            2,
            1,
        );
        let r = g.relu(c1);
        let c2 = g.conv1d(
            r,
            p.v(&format!("clf.stage{i}.conv2.w")),
            p.v(&format!("clf.stage{i}.conv2.b")),
            1,
            1,
        );
        let skip = g.conv1d(
            h,
            p.v(&format!("clf.stage{i}.skip.w")),
            p.v(&format!("clf.stage{i}.skip.b")),
            2,
            0,
        );
        let sum = g.add(c2, skip);
        h = g.relu(sum);
    }
    // Global mean over the remaining length via repeated pair-averaging.
    let mut len = TARGET_LEN / 2 / 2 / 16; // stem stride, stem pool, 4 stage strides
    while len > 1 {
        h = g.avgpool2(h);
        len /= 2;
    }
    let flat = g.reshape(h, &[n, STAGE_CHANNELS[4]]);
    let z = g.linear(flat, p.v("clf.fc1.w"), p.v("clf.fc1.b"));
    let feats = g.relu(z);
    let logits = g.linear(feats, p.v("clf.fc2.w"), p.v("clf.fc2.b"));
    (feats, logits)
}

fn batch_tensor(records: &[&EcgRecord]) -> Result<Tensor<F>> {
    let n = records.len();
    let mut data = Vec::with_capacity(n * IN_LEADS * TARGET_LEN);
    for rec in records {
        if rec.samples_per_lead != TARGET_LEN {
            return Err(Error::validation(format!(
                "record {} has {} samples per lead; expected preprocessed length {}",
                rec.id, rec.samples_per_lead, TARGET_LEN
            )));
        }
        data.extend_from_slice(&rec.samples);
    }
    Ok(Tensor::from_vec(&[n, IN_LEADS, TARGET_LEN], data))
}

fn softmax_probs<T: Real>(g: &mut Graph<T>, logits: Var, n: usize) -> Var {
    let three_d = g.reshape(logits, &[1, n, N_CLASSES]);
    let sm = g.softmax_last(three_d);
    g.reshape(sm, &[n, N_CLASSES])
}

impl Classifier {
    /// Trains from scratch on the given labeled records. Deterministic given
    /// the seed; errors if fewer than two classes are present.
    pub fn train(records: &[&EcgRecord], seed: u64, epochs: usize) -> Result<Classifier> {
        let labels: Vec<usize> = records.iter().map(|r| r.label.as_u8() as usize).collect();
        let distinct = {
            let mut seen = [false; N_CLASSES];
            labels.iter().for_each(|&l| seen[l] = true);
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::data(
                "classifier training needs at least two distinct labels",
            ));
        }
        let mut store = init_store(seed);
        let mut opt = AdamW::new(1e-3, 0.0);
        let batch = 16usize;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..records.len()).collect();
            let mut s = Stream::named(seed, &format!("clf.epoch{epoch}"));
            s.shuffle(&mut order);
            for chunk in order.chunks(batch) {
                let recs: Vec<&EcgRecord> = chunk.iter().map(|&i| records[i]).collect();
                let x = batch_tensor(&recs)?;
                let n = recs.len();
                let mut g: Graph<F> = Graph::new();
                let p = crate::model::bind_params(&mut g, &store, &|_| true);
                let xv = g.constant(x);
                let (_feats, logits) = forward(&mut g, &p, xv, n);
                let probs = softmax_probs(&mut g, logits, n);
                // Cross-entropy against one-hot targets, guarded for ln(0).
                let mut onehot = vec![0.0 as F; n * N_CLASSES];
                for (row, &i) in chunk.iter().enumerate() {
                    onehot[row * N_CLASSES + labels[i]] = 1.0;
                }
                let target = g.constant(Tensor::from_vec(&[n, N_CLASSES], onehot));
                let shifted = g.add_scalar(probs, 1e-12);
                let logp = g.ln(shifted);
                let picked = g.mul(logp, target);
                let total = g.sum_all(picked);
                let loss = g.scale(total, -1.0 / n as f64);
                g.backward(loss);
                if !g.val(loss).item().to_f64().is_finite() {
                    return Err(Error::data(format!(
                        "classifier loss became non-finite at epoch {epoch}"
                    )));
                }
                let grads = crate::model::collect_grads(&mut g, &p);
                opt.step(&mut store, &grads);
            }
        }
        Ok(Classifier { store })
    }

    fn infer(&self, records: &[&EcgRecord]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut feats = Vec::with_capacity(records.len() * FEATURE_DIM);
        let mut probs = Vec::with_capacity(records.len() * N_CLASSES);
        for chunk in records.chunks(16) {
            let x = batch_tensor(chunk)?;
            let n = chunk.len();
            let mut g: Graph<F> = Graph::new();
            let p = crate::model::bind_params(&mut g, &self.store, &crate::model::trainable_none);
            let xv = g.constant(x);
            let (f, logits) = forward(&mut g, &p, xv, n);
            let pr = softmax_probs(&mut g, logits, n);
            feats.extend(g.val(f).data().iter().map(|v| v.to_f64()));
            probs.extend(g.val(pr).data().iter().map(|v| v.to_f64()));
        }
        Ok((feats, probs))
    }

    pub fn features(&self, records: &[&EcgRecord], source: &str) -> Result<FeatureSet> {
        let (feats, _) = self.infer(records)?;
        FeatureSet::new(feats, records.len(), FEATURE_DIM, source)
    }

    /// Class probabilities, flat [N, 5] row-major.
    pub fn probabilities(&self, records: &[&EcgRecord]) -> Result<Vec<f64>> {
        Ok(self.infer(records)?.1)
    }

    /// Argmax predictions; ties resolve to the lowest class index.
    pub fn predictions(&self, records: &[&EcgRecord]) -> Result<Vec<usize>> {
        let probs = self.probabilities(records)?;
        Ok(argmax_rows(&probs, N_CLASSES))
    }
}

pub fn argmax_rows(flat: &[f64], width: usize) -> Vec<usize> {
    flat.chunks(width)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / preds.len() as f64
}
