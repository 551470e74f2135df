//! K-nearest-neighbor and linear one-vs-rest SVM classifiers over feature
//! vectors, with accuracy and confusion-matrix evaluation.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{dot, squared_distance, Matrix};

pub const DEFAULT_K: usize = 5;

/// Anything that maps a feature vector to a class label.
pub trait Classifier: Sync {
    fn dim(&self) -> usize;
    fn class_count(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<u8>;

    /// Predicts every row in parallel.
    fn predict_rows(&self, samples: &Matrix) -> Result<Vec<u8>> {
        Error::check_dim(self.dim(), samples.cols())?;
        (0..samples.rows())
            .into_par_iter()
            .map(|i| self.predict(samples.row(i)))
            .collect()
    }
}

fn class_count_of(labels: &[u8]) -> usize {
    labels.iter().max().map_or(0, |&m| m as usize + 1)
}

/// Brute-force KNN over stored training vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    k: usize,
    train: Matrix,
    labels: Vec<u8>,
    classes: usize,
}

impl KnnModel {
    pub fn new(k: usize, train: Matrix, labels: Vec<u8>) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if train.rows() == 0 {
            return Err(Error::Empty("KNN training set"));
        }
        Error::check_dim(train.rows(), labels.len())?;
        if k > train.rows() {
            return Err(Error::invalid(format!(
                "K = {k} exceeds {} training samples",
                train.rows()
            )));
        }
        let classes = class_count_of(&labels);
        Ok(KnnModel {
            k,
            train,
            labels,
            classes,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn train(&self) -> &Matrix {
        &self.train
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The K nearest training indices with squared distances, nearest
    /// first; equal distances keep the smaller index.
    pub fn neighbors(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        Error::check_dim(self.train.cols(), x.len())?;
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(self.k + 1);
        for (i, row) in self.train.iter_rows().enumerate() {
            let d = squared_distance(row, x);
            if best.len() == self.k && d >= best[self.k - 1].1 {
                continue;
            }
            let pos = best.partition_point(|&(_, bd)| bd <= d);
            best.insert(pos, (i, d));
            best.truncate(self.k);
        }
        Ok(best)
    }
}

impl Classifier for KnnModel {
    fn dim(&self) -> usize {
        self.train.cols()
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    /// Majority vote; ties go to the smaller summed distance, then the
    /// smaller label.
    fn predict(&self, x: &[f64]) -> Result<u8> {
        let mut votes = vec![(0usize, 0.0f64); self.classes];
        for (i, d) in self.neighbors(x)? {
            let v = &mut votes[self.labels[i] as usize];
            v.0 += 1;
            v.1 += d.sqrt();
        }
        let mut winner = 0;
        for c in 1..self.classes {
            let (n, s) = votes[c];
            let (bn, bs) = votes[winner];
            if n > bn || (n == bn && n > 0 && s < bs) {
                winner = c;
            }
        }
        Ok(winner as u8)
    }
}

/// Hinge-loss training parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmParams {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Initial step size of the decaying schedule `η₀ / (1 + λ η₀ t)`.
    pub eta0: f64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            lambda: 1e-4,
            epochs: 20,
            seed: 0,
            eta0: 0.1,
        }
    }
}

/// Linear one-vs-rest SVM. Inputs are standardized with the stored
/// per-feature mean and scale before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `classes × dim`.
    weights: Matrix,
    bias: Vec<f64>,
    params: SvmParams,
}

impl SvmModel {
    pub fn from_parts(
        mean: Vec<f64>,
        scale: Vec<f64>,
        weights: Matrix,
        bias: Vec<f64>,
        params: SvmParams,
    ) -> Result<Self> {
        Error::check_dim(weights.cols(), mean.len())?;
        Error::check_dim(weights.cols(), scale.len())?;
        Error::check_dim(weights.rows(), bias.len())?;
        if scale.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return Err(Error::Format("SVM feature scales must be positive".into()));
        }
        Ok(SvmModel {
            mean,
            scale,
            weights,
            bias,
            params,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn params(&self) -> SvmParams {
        self.params
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    /// One-vs-rest scores `wᵀx + b` for every class.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), x.len())?;
        let z = self.standardize(x);
        Ok(self
            .weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, &z) + b)
            .collect())
    }

    /// Multiplies every class score by `factor`.
    pub fn rescaled(&self, factor: f64) -> SvmModel {
        let mut out = self.clone();
        out.weights.as_mut_slice().iter_mut().for_each(|w| *w *= factor);
        out.bias.iter_mut().for_each(|b| *b *= factor);
        out
    }
}

/// Index of the largest score; the first wins ties.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

impl Classifier for SvmModel {
    fn dim(&self) -> usize {
        self.weights.cols()
    }

    fn class_count(&self) -> usize {
        self.weights.rows()
    }

    fn predict(&self, x: &[f64]) -> Result<u8> {
        Ok(argmax(&self.scores(x)?) as u8)
    }
}

/// Trains one binary hinge-loss model on standardized rows. Returns the
/// iterate average over all steps after the first epoch.
fn train_binary(z: &Matrix, targets: &[f64], orders: &[Vec<usize>], params: &SvmParams) -> (Vec<f64>, f64) {
    let dim = z.cols();
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let (mut w_avg, mut b_avg, mut averaged) = (vec![0.0; dim], 0.0, 0usize);
    let mut t = 0usize;
    for (epoch, order) in orders.iter().enumerate() {
        for &i in order {
            let eta = params.eta0 / (1.0 + params.lambda * params.eta0 * t as f64);
            let x = z.row(i);
            let y = targets[i];
            let margin = y * (dot(&w, x) + b);
            let shrink = 1.0 - eta * params.lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if margin < 1.0 {
                for (v, xi) in w.iter_mut().zip(x) {
                    *v += eta * y * xi;
                }
                b += eta * y;
            }
            t += 1;
            if epoch > 0 || orders.len() == 1 {
                averaged += 1;
                let r = 1.0 / averaged as f64;
                for (a, v) in w_avg.iter_mut().zip(&w) {
                    *a += (v - *a) * r;
                }
                b_avg += (b - b_avg) * r;
            }
        }
    }
    (w_avg, b_avg)
}

/// Fits a linear one-vs-rest SVM by regularized hinge subgradient descent.
/// Every class sees the same seeded shuffle per epoch.
pub fn svm_fit(train: &Matrix, labels: &[u8], params: SvmParams) -> Result<SvmModel> {
    Error::check_dim(train.rows(), labels.len())?;
    if train.rows() == 0 {
        return Err(Error::Empty("SVM training set"));
    }
    let classes = class_count_of(labels);
    let mut present = vec![false; classes];
    labels.iter().for_each(|&l| present[l as usize] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("SVM training needs at least two classes"));
    }
    if params.epochs == 0
        || params.lambda.is_nan()
        || params.lambda <= 0.0
        || params.eta0.is_nan()
        || params.eta0 <= 0.0
    {
        return Err(Error::invalid("SVM needs positive epochs, λ and η₀"));
    }
    let (n, dim) = (train.rows(), train.cols());
    let mut mean = vec![0.0; dim];
    for row in train.iter_rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut scale = vec![0.0; dim];
    for row in train.iter_rows() {
        for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = scale
        .into_iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let mut z = train.clone();
    for r in 0..n {
        for ((v, m), s) in z.row_mut(r).iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - m) / s;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let orders: Vec<Vec<usize>> = (0..params.epochs)
        .map(|_| {
            let mut o: Vec<usize> = (0..n).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect();
    let fitted: Vec<(Vec<f64>, f64)> = (0..classes)
        .into_par_iter()
        .map(|c| {
            if !present[c] {
                // never predicted: a large negative bias
                return (vec![0.0; dim], f64::MIN / 4.0);
            }
            let targets: Vec<f64> = labels
                .iter()
                .map(|&l| if l as usize == c { 1.0 } else { -1.0 })
                .collect();
            train_binary(&z, &targets, &orders, &params)
        })
        .collect();
    let mut weights = Vec::with_capacity(classes * dim);
    let mut bias = Vec::with_capacity(classes);
    for (w, b) in fitted {
        weights.extend(w);
        bias.push(b);
    }
    SvmModel::from_parts(mean, scale, Matrix::from_vec(classes, dim, weights)?, bias, params)
}

/// Accuracy and confusion counts (`confusion[true][predicted]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub confusion: Vec<Vec<u64>>,
}

impl Evaluation {
    pub fn from_predictions(predicted: &[u8], truth: &[u8]) -> Result<Self> {
        Error::check_dim(truth.len(), predicted.len())?;
        if truth.is_empty() {
            return Err(Error::Empty("test set"));
        }
        let classes = class_count_of(truth).max(class_count_of(predicted));
        let mut confusion = vec![vec![0u64; classes]; classes];
        let mut correct = 0;
        for (&p, &t) in predicted.iter().zip(truth) {
            confusion[t as usize][p as usize] += 1;
            correct += usize::from(p == t);
        }
        Ok(Evaluation {
            accuracy: 100.0 * correct as f64 / truth.len() as f64,
            correct,
            total: truth.len(),
            confusion,
        })
    }

    /// Confusion matrix as CSV: header `true\predicted,0,1,…`, one row per
    /// true class.
    pub fn write_confusion_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["true\\predicted".to_string()];
        header.extend((0..self.confusion.len()).map(|c| c.to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.confusion.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!("accuracy {:.2}% ({}/{})", self.accuracy, self.correct, self.total)
    }
}

/// Predicts every test row and scores it against `labels`.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, test: &Matrix, labels: &[u8]) -> Result<Evaluation> {
    Error::check_dim(test.rows(), labels.len())?;
    if test.rows() == 0 {
        return Err(Error::Empty("test set"));
    }
    Evaluation::from_predictions(&model.predict_rows(test)?, labels)
}
