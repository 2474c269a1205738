//! One-vs-one RBF support vector machine on frame-difference features.
//!
//! Features are standardized per dimension with training statistics; each
//! pair of classes gets a binary C-SVM trained by SMO, and prediction is a
//! majority vote over the pairs.

mod features;
mod smo;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wide::f64x4;

use crate::error::{Error, Result};

pub use features::{difference_features, featurize, FEATURE_DIM, FEATURE_GRID};

pub const DEFAULT_C: f64 = 10.0;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    /// Index into [`Dataset::classes`].
    pub label: usize,
    /// Source sequence; train and test sets must not share one.
    pub sequence: String,
}

/// Labeled feature vectors. Class ids follow the sorted class names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset from `(class name, sequence id, features)` triples.
    pub fn from_labeled(items: impl IntoIterator<Item = (String, String, Vec<f64>)>) -> Self {
        let items: Vec<_> = items.into_iter().collect();
        let classes: Vec<String> = items
            .iter()
            .map(|(c, _, _)| c.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let samples = items
            .into_iter()
            .map(|(c, sequence, values)| Sample {
                label: classes.binary_search(&c).expect("class collected above"),
                sequence,
                values,
            })
            .collect();
        Self { classes, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sequences(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.sequence.as_str()).collect()
    }
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population statistics of `rows`; constant dimensions get unit scale.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub c: f64,
    /// RBF width; `None` selects `1 / (d · var)` over the standardized
    /// training matrix.
    pub gamma: Option<f64>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: DEFAULT_C,
            gamma: None,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: 10_000_000,
        }
    }
}

/// Binary machine separating class `a` (positive) from class `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairModel {
    pub a: usize,
    pub b: usize,
    /// Indices into [`SvmModel::support_vectors`].
    pub support: Vec<usize>,
    /// `α_i · y_i` for each support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub classes: Vec<String>,
    pub c: f64,
    pub gamma: f64,
    pub tolerance: f64,
    pub standardizer: Standardizer,
    /// Standardized support vectors shared by all pairs.
    pub support_vectors: Vec<Vec<f64>>,
    pub pairs: Vec<PairModel>,
    pub training_sequences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub votes: Vec<usize>,
    /// Summed `|f|` of the pairwise decisions won by each class.
    pub margins: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = f64x4::ZERO;
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        acc += f64x4::from([x[0], x[1], x[2], x[3]]) * f64x4::from([y[0], y[1], y[2], y[3]]);
    }
    acc.reduce_add() + tail
}

fn rbf(gamma: f64, na: f64, nb: f64, ab: f64) -> f64 {
    (-gamma * (na + nb - 2.0 * ab).max(0.0)).exp()
}

/// Classes `a`, `b`, support indices, coefficients and bias of one pair.
type PairSolution = (usize, usize, Vec<usize>, Vec<f64>, f64);

pub fn train_svm(data: &Dataset, params: &SvmParams) -> Result<SvmModel> {
    let k = data.classes.len();
    if k < 2 {
        return Err(Error::Training(format!("need at least 2 classes, got {k}")));
    }
    let mut per_class = vec![Vec::new(); k];
    for (i, s) in data.samples.iter().enumerate() {
        per_class
            .get_mut(s.label)
            .ok_or_else(|| Error::Training(format!("sample {i} has unknown label {}", s.label)))?
            .push(i);
    }
    if let Some(c) = per_class.iter().position(|v| v.len() < 2) {
        return Err(Error::Training(format!(
            "class `{}` has {} examples, need at least 2",
            data.classes[c],
            per_class[c].len()
        )));
    }
    let d = data.samples[0].values.len();
    if let Some(i) = data.samples.iter().position(|s| s.values.len() != d) {
        return Err(Error::Training(format!(
            "sample {i} has dimension {}, expected {d}",
            data.samples[i].values.len()
        )));
    }
    if data.samples.iter().any(|s| s.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::Training("non-finite feature value".into()));
    }
    if !(params.c > 0.0) || !(params.tolerance > 0.0) {
        return Err(Error::InvalidArgument("C and tolerance must be positive".into()));
    }

    let rows: Vec<&[f64]> = data.samples.iter().map(|s| s.values.as_slice()).collect();
    let standardizer = Standardizer::fit(&rows);
    let x: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.apply(r)).collect();
    let gamma = match params.gamma {
        Some(g) if g > 0.0 => g,
        Some(g) => return Err(Error::InvalidArgument(format!("gamma must be positive, got {g}"))),
        None => {
            let all: Vec<f64> = x.iter().flatten().copied().collect();
            let var = crate::stats::variance(&all);
            if var > 0.0 {
                1.0 / (d as f64 * var)
            } else {
                1.0 / d as f64
            }
        }
    };

    let n = x.len();
    let norms: Vec<f64> = x.iter().map(|v| dot(v, v)).collect();
    let gram: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| rbf(gamma, norms[i], norms[j], dot(&x[i], &x[j])))
                .collect()
        })
        .collect();

    let pair_list: Vec<(usize, usize)> = (0..k).flat_map(|a| (a + 1..k).map(move |b| (a, b))).collect();
    let solved: Vec<Result<PairSolution>> = pair_list
        .par_iter()
        .map(|&(a, b)| {
            let idx: Vec<usize> = per_class[a].iter().chain(&per_class[b]).copied().collect();
            let first = &x[idx[0]];
            if idx.iter().all(|&i| x[i] == *first) {
                return Err(Error::Training(format!(
                    "classes `{}` and `{}` have identical feature vectors",
                    data.classes[a], data.classes[b]
                )));
            }
            let y: Vec<f64> = idx
                .iter()
                .map(|&i| if data.samples[i].label == a { 1.0 } else { -1.0 })
                .collect();
            let sol = smo::solve(
                &y,
                |p, q| gram[idx[p]][idx[q]],
                params.c,
                params.tolerance,
                params.max_iterations,
            );
            let (sv, coef): (Vec<usize>, Vec<f64>) = sol
                .alpha
                .iter()
                .enumerate()
                .filter(|(_, &al)| al > 0.0)
                .map(|(p, &al)| (idx[p], al * y[p]))
                .unzip();
            if sv.is_empty() {
                return Err(Error::Training(format!(
                    "no support vectors for classes `{}` and `{}`",
                    data.classes[a], data.classes[b]
                )));
            }
            Ok((a, b, sv, coef, sol.bias))
        })
        .collect();

    // Pool support vectors in training order.
    let mut pool_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut raw_pairs = Vec::with_capacity(solved.len());
    for r in solved {
        let p = r?;
        for &i in &p.2 {
            pool_of.insert(i, 0);
        }
        raw_pairs.push(p);
    }
    for (slot, v) in pool_of.values_mut().enumerate() {
        *v = slot;
    }
    let support_vectors: Vec<Vec<f64>> = pool_of.keys().map(|&i| x[i].clone()).collect();
    let pairs = raw_pairs
        .into_iter()
        .map(|(a, b, sv, coef, bias)| PairModel {
            a,
            b,
            support: sv.iter().map(|i| pool_of[i]).collect(),
            coef,
            bias,
        })
        .collect();

    Ok(SvmModel {
        classes: data.classes.clone(),
        c: params.c,
        gamma,
        tolerance: params.tolerance,
        standardizer,
        support_vectors,
        pairs,
        training_sequences: data.sequences().into_iter().map(String::from).collect(),
    })
}

impl SvmModel {
    /// Pairwise decision values `f_ab(x)`, positive for class `a`.
    pub fn decision_values(&self, features: &[f64]) -> Vec<f64> {
        let z = self.standardizer.apply(features);
        let nz = dot(&z, &z);
        let kern: Vec<f64> = self
            .support_vectors
            .iter()
            .map(|sv| rbf(self.gamma, dot(sv, sv), nz, dot(sv, &z)))
            .collect();
        self.pairs
            .iter()
            .map(|p| p.support.iter().zip(&p.coef).map(|(&s, c)| c * kern[s]).sum::<f64>() + p.bias)
            .collect()
    }

    /// Majority vote; ties go to the larger summed margin, then the lower id.
    pub fn predict(&self, features: &[f64]) -> Prediction {
        let k = self.classes.len();
        let mut votes = vec![0usize; k];
        let mut margins = vec![0.0; k];
        for (p, f) in self.pairs.iter().zip(self.decision_values(features)) {
            let winner = if f > 0.0 { p.a } else { p.b };
            votes[winner] += 1;
            margins[winner] += f.abs();
        }
        let label = (0..k)
            .reduce(|best, c| {
                let better = votes[c] > votes[best] || (votes[c] == votes[best] && margins[c] > margins[best]);
                if better {
                    c
                } else {
                    best
                }
            })
            .unwrap_or(0);
        Prediction { label, votes, margins }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = io::BufWriter::new(file);
        write_json_17(&mut w, self).map_err(|e| Error::json(path, e))?;
        io::Write::write_all(&mut w, b"\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// JSON formatter printing every float with 17 significant digits.
struct SeventeenDigits;

impl serde_json::ser::Formatter for SeventeenDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        self.write_f64(w, v as f64)
    }
}

/// Serializes `value` as compact JSON with 17-significant-digit floats.
pub fn write_json_17<W: io::Write, T: Serialize>(w: W, value: &T) -> serde_json::Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(w, SeventeenDigits);
    value.serialize(&mut ser)
}

/// Counts of `[true][predicted]` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub recall: Vec<f64>,
}

impl ConfusionMatrix {
    /// `pairs` are `(true, predicted)` class ids.
    pub fn from_pairs(classes: Vec<String>, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let k = classes.len();
        let mut counts = vec![vec![0usize; k]; k];
        for (t, p) in pairs {
            counts[t][p] += 1;
        }
        let total: usize = counts.iter().flatten().sum();
        let diag: usize = (0..k).map(|i| counts[i][i]).sum();
        let recall = (0..k)
            .map(|i| {
                let row: usize = counts[i].iter().sum();
                if row > 0 {
                    counts[i][i] as f64 / row as f64
                } else {
                    0.0
                }
            })
            .collect();
        let accuracy = if total > 0 { diag as f64 / total as f64 } else { 0.0 };
        Self {
            classes,
            counts,
            accuracy,
            recall,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Merges classes: `group[c]` is the new id of class `c`.
    pub fn regroup(&self, names: Vec<String>, group: &[usize]) -> Self {
        let k = self.classes.len();
        let pairs =
            (0..k).flat_map(|t| (0..k).flat_map(move |p| std::iter::repeat_n((group[t], group[p]), self.counts[t][p])));
        Self::from_pairs(names, pairs)
    }

    /// CSV with a header row of predicted labels and one row per true label.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in &self.classes {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            s.push_str(c);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Predicts every test sample. Test sequences must not appear in training.
pub fn evaluate(model: &SvmModel, test: &Dataset) -> Result<ConfusionMatrix> {
    let trained: BTreeSet<&str> = model.training_sequences.iter().map(String::as_str).collect();
    if let Some(shared) = test.sequences().into_iter().find(|s| trained.contains(s)) {
        return Err(Error::InvalidArgument(format!(
            "sequence `{shared}` appears in both training and test sets"
        )));
    }
    let mut map = Vec::with_capacity(test.classes.len());
    for c in &test.classes {
        let id = model
            .classes
            .iter()
            .position(|m| m == c)
            .ok_or_else(|| Error::InvalidArgument(format!("test class `{c}` is unknown to the model")))?;
        map.push(id);
    }
    let preds: Vec<(usize, usize)> = test
        .samples
        .par_iter()
        .map(|s| (map[s.label], model.predict(&s.values).label))
        .collect();
    Ok(ConfusionMatrix::from_pairs(model.classes.clone(), preds))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(points: &[([f64; 2], &str)]) -> Dataset {
        Dataset::from_labeled(
            points
                .iter()
                .enumerate()
                .map(|(i, (p, c))| (c.to_string(), format!("s{i}"), p.to_vec())),
        )
    }

    fn training_accuracy(model: &SvmModel, data: &Dataset) -> f64 {
        let ok = data
            .samples
            .iter()
            .filter(|s| model.predict(&s.values).label == s.label)
            .count();
        ok as f64 / data.len() as f64
    }

    #[test]
    fn separable_classes() {
        let data = toy(&[
            ([0.0, 0.0], "a"),
            ([0.3, 0.1], "a"),
            ([0.1, 0.4], "a"),
            ([3.0, 3.0], "b"),
            ([3.2, 2.8], "b"),
            ([2.9, 3.3], "b"),
        ]);
        let model = train_svm(&data, &SvmParams::default()).unwrap();
        assert_eq!(training_accuracy(&model, &data), 1.0);
        for p in &model.pairs {
            assert!(!p.support.is_empty());
        }
    }

    #[test]
    fn xor_is_learned() {
        let data = toy(&[
            ([0.0, 0.0], "even"),
            ([1.0, 1.0], "even"),
            ([0.1, -0.1], "even"),
            ([0.9, 1.1], "even"),
            ([0.0, 1.0], "odd"),
            ([1.0, 0.0], "odd"),
            ([-0.1, 0.9], "odd"),
            ([1.1, 0.1], "odd"),
        ]);
        let model = train_svm(
            &data,
            &SvmParams {
                gamma: Some(2.0),
                ..SvmParams::default()
            },
        )
        .unwrap();
        assert_eq!(training_accuracy(&model, &data), 1.0);
    }

    #[test]
    fn dual_coefficients_feasible() {
        let data = toy(&[
            ([0.0, 0.0], "a"),
            ([1.0, 0.2], "a"),
            ([0.5, 0.9], "b"),
            ([0.2, 0.8], "b"),
            ([0.6, 0.4], "a"),
            ([0.4, 0.5], "b"),
        ]);
        let model = train_svm(&data, &SvmParams::default()).unwrap();
        for p in &model.pairs {
            let sum: f64 = p.coef.iter().sum();
            assert!(sum.abs() < 1e-6);
            assert!(p.coef.iter().all(|c| c.abs() <= model.c + 1e-12));
        }
    }

    #[test]
    fn identical_classes_are_a_training_error() {
        let data = toy(&[
            ([1.0, 1.0], "a"),
            ([1.0, 1.0], "a"),
            ([1.0, 1.0], "b"),
            ([1.0, 1.0], "b"),
        ]);
        let err = train_svm(&data, &SvmParams::default()).unwrap_err();
        assert!(
            matches!(&err, Error::Training(m) if m.contains("`a`") && m.contains("`b`")),
            "{err}"
        );
    }

    #[test]
    fn precondition_errors() {
        assert!(train_svm(&toy(&[([0.0, 0.0], "a"), ([1.0, 0.0], "a")]), &SvmParams::default()).is_err());
        assert!(train_svm(
            &toy(&[([0.0, 0.0], "a"), ([1.0, 0.0], "a"), ([5.0, 5.0], "b")]),
            &SvmParams::default()
        )
        .is_err());
    }

    #[test]
    fn tie_break_uses_margin_then_lowest_id() {
        // Three classes, each pair voting for a different winner.
        let model = SvmModel {
            classes: vec!["a".into(), "b".into(), "c".into()],
            c: 1.0,
            gamma: 1.0,
            tolerance: 1e-3,
            standardizer: Standardizer {
                mean: vec![0.0],
                std: vec![1.0],
            },
            support_vectors: vec![vec![0.0]],
            pairs: vec![
                PairModel {
                    a: 0,
                    b: 1,
                    support: vec![0],
                    coef: vec![0.0],
                    bias: 1.0,
                },
                PairModel {
                    a: 0,
                    b: 2,
                    support: vec![0],
                    coef: vec![0.0],
                    bias: -1.0,
                },
                PairModel {
                    a: 1,
                    b: 2,
                    support: vec![0],
                    coef: vec![0.0],
                    bias: 2.0,
                },
            ],
            training_sequences: vec![],
        };
        let p = model.predict(&[0.0]);
        assert_eq!(p.votes, vec![1, 1, 1]);
        assert_eq!(p.label, 1);
        let mut sym = model.clone();
        sym.pairs[2].bias = 1.0;
        assert_eq!(sym.predict(&[0.0]).label, 0);
    }

    #[test]
    fn confusion_matrix_basics() {
        let classes: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
        let perfect = ConfusionMatrix::from_pairs(classes.clone(), [(0, 0), (1, 1), (2, 2), (2, 2)]);
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.counts[2][2], 2);
        let constant = ConfusionMatrix::from_pairs(classes.clone(), [(0, 0), (1, 0), (2, 0)]);
        assert!((constant.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(constant.recall, vec![1.0, 0.0, 0.0]);
        let merged = constant.regroup(vec!["low".into(), "high".into()], &[0, 0, 1]);
        assert_eq!(merged.counts, vec![vec![2, 0], vec![1, 0]]);
        assert!(merged.accuracy >= constant.accuracy);
        assert!(constant.to_csv().starts_with("true\\predicted,x,y,z\n"));
    }

    #[test]
    fn evaluate_rejects_shared_sequences() {
        let data = toy(&[
            ([0.0, 0.0], "a"),
            ([0.3, 0.1], "a"),
            ([3.0, 3.0], "b"),
            ([3.2, 2.8], "b"),
        ]);
        let model = train_svm(&data, &SvmParams::default()).unwrap();
        assert!(evaluate(&model, &data).is_err());
    }

    #[test]
    fn model_json_round_trips_with_17_digits() {
        let data = toy(&[
            ([0.0, 0.0], "a"),
            ([0.3, 0.1], "a"),
            ([3.0, 3.0], "b"),
            ([3.2, 2.8], "b"),
        ]);
        let model = train_svm(&data, &SvmParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        model.save(&p).unwrap();
        assert_eq!(SvmModel::load(&p).unwrap(), model);
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.contains(&format!("{:.16e}", model.gamma)));
    }
}
