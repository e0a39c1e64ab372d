//! Inspection of trained annotator embeddings: TSV export, a deterministic
//! PCA projection to 2D and a leave-one-out separation score.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, SyntheticPolicy};
use crate::model::Model;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unsupported model: {0}")]
    UnsupportedModel(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("grouping error: {0}")]
    Grouping(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub annotator: String,
    pub vector: Vec<f64>,
    pub similarity_to_majority: Option<f64>,
    pub contributions: usize,
    pub synthetic: Option<SyntheticPolicy>,
}

/// The annotator embedding matrix of an AART model.
pub fn annotator_embeddings(model: &Model) -> Result<&Array2<f64>> {
    match model {
        Model::Aart(p) if p.annotators.ncols() > 0 => Ok(&p.annotators),
        Model::Aart(_) => Err(AnalysisError::UnsupportedModel(
            "the one-hot combiner has no annotator embeddings".into(),
        )),
        other => Err(AnalysisError::UnsupportedModel(format!(
            "{} models have no annotator embeddings",
            other.kind()
        ))),
    }
}

/// One row per annotator with its embedding and corpus statistics.
pub fn export_embeddings(model: &Model, corpus: &Corpus) -> Result<Vec<EmbeddingRow>> {
    let f = annotator_embeddings(model)?;
    if f.nrows() != corpus.num_annotators() {
        return Err(AnalysisError::InvalidInput(format!(
            "model has {} annotators, corpus has {}",
            f.nrows(),
            corpus.num_annotators()
        )));
    }
    Ok((0..f.nrows())
        .map(|j| EmbeddingRow {
            annotator: corpus.annotator_id(j).to_string(),
            vector: f.row(j).to_vec(),
            similarity_to_majority: corpus.similarity_to_majority(j).ok(),
            contributions: corpus.contribution_count(j),
            synthetic: corpus.synthetic_policy(j),
        })
        .collect())
}

fn policy_name(p: Option<SyntheticPolicy>) -> &'static str {
    match p {
        None => "none",
        Some(SyntheticPolicy::Majority) => "majority",
        Some(SyntheticPolicy::AntiMajority) => "anti_majority",
    }
}

/// Tab-separated rows with a header line.
pub fn embeddings_tsv(rows: &[EmbeddingRow]) -> String {
    let d = rows.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("annotator");
    for k in 0..d {
        let _ = write!(out, "\tf{k}");
    }
    out.push_str("\tsimilarity_to_majority\tcontributions\tsynthetic\n");
    for r in rows {
        out.push_str(&r.annotator);
        for v in &r.vector {
            let _ = write!(out, "\t{v}");
        }
        match r.similarity_to_majority {
            Some(s) => {
                let _ = write!(out, "\t{s}");
            }
            None => out.push_str("\tNA"),
        }
        let _ = writeln!(out, "\t{}\t{}", r.contributions, policy_name(r.synthetic));
    }
    out
}

/// Projected coordinates, one `(pc1, pc2)` row per annotator.
pub fn coordinates_tsv(rows: &[EmbeddingRow], coords: &Array2<f64>) -> String {
    let mut out = String::from("annotator\tpc1\tpc2\tsynthetic\n");
    for (r, c) in rows.iter().zip(coords.rows()) {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.annotator, c[0], c[1], policy_name(r.synthetic));
    }
    out
}

/// Mean-centres the rows and projects them onto the top two right singular
/// vectors. Each component is signed so its largest-magnitude loading is
/// non-negative.
pub fn pca_project(points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (m, d) = points.dim();
    if m < 2 || d < 2 {
        return Err(AnalysisError::InvalidInput(format!(
            "need at least 2 points in at least 2 dimensions, got {m}×{d}"
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::InvalidInput("non-finite coordinates".into()));
    }
    let mean = points.mean_axis(ndarray::Axis(0)).expect("m >= 2");
    let centered = &points - &mean;
    if centered.iter().all(|&v| v == 0.0) {
        return Err(AnalysisError::DegenerateInput("all points coincide".into()));
    }
    let x = DMatrix::from_fn(m, d, |i, j| centered[[i, j]]);
    let svd = x.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });
    let mut coords = Array2::zeros((m, 2));
    for (c, &k) in order.iter().take(2).enumerate() {
        let mut loading: Vec<f64> = v_t.row(k).iter().copied().collect();
        let pivot = loading
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > loading[best].abs() { i } else { best });
        if loading[pivot] < 0.0 {
            loading.iter_mut().for_each(|v| *v = -*v);
        }
        for i in 0..m {
            coords[[i, c]] = centered.row(i).iter().zip(&loading).map(|(a, b)| a * b).sum();
        }
    }
    Ok(coords)
}

/// Leave-one-out nearest-centroid accuracy at telling group `a` from group
/// `b`. A point equidistant from both centroids counts as misclassified.
pub fn separation_score(points: ArrayView2<'_, f64>, a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(AnalysisError::Grouping(format!(
            "each group needs >= 2 members, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(&bad) = a.iter().chain(b).find(|&&i| i >= points.nrows()) {
        return Err(AnalysisError::InvalidInput(format!("row {bad} out of range")));
    }
    if a.iter().any(|i| b.contains(i)) {
        return Err(AnalysisError::Grouping("groups overlap".into()));
    }
    let d = points.ncols();
    let sum = |group: &[usize]| {
        let mut s = vec![0.0; d];
        for &i in group {
            for (acc, v) in s.iter_mut().zip(points.row(i)) {
                *acc += v;
            }
        }
        s
    };
    let (sum_a, sum_b) = (sum(a), sum(b));
    let dist = |i: usize, s: &[f64], n: usize, exclude: bool| -> f64 {
        let row = points.row(i);
        (0..d)
            .map(|k| {
                let c = if exclude {
                    (s[k] - row[k]) / (n - 1) as f64
                } else {
                    s[k] / n as f64
                };
                (row[k] - c) * (row[k] - c)
            })
            .sum()
    };
    let mut correct = 0usize;
    for &i in a {
        correct += usize::from(dist(i, &sum_a, a.len(), true) < dist(i, &sum_b, b.len(), false));
    }
    for &i in b {
        correct += usize::from(dist(i, &sum_b, b.len(), true) < dist(i, &sum_a, a.len(), false));
    }
    Ok(correct as f64 / (a.len() + b.len()) as f64)
}

/// Indices of the synthetic annotators following each policy.
pub fn synthetic_groups(corpus: &Corpus) -> (Vec<usize>, Vec<usize>) {
    let pick = |p| {
        (0..corpus.num_annotators())
            .filter(|&j| corpus.synthetic_policy(j) == Some(p))
            .collect()
    };
    (pick(SyntheticPolicy::Majority), pick(SyntheticPolicy::AntiMajority))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn distances(x: &Array2<f64>) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 0..x.nrows() {
            for j in 0..x.nrows() {
                let diff = &x.row(i) - &x.row(j);
                out.push(diff.dot(&diff).sqrt());
            }
        }
        out
    }

    #[test]
    fn planar_points_keep_their_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let d = 6;
            let u = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let w = Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0));
            let offset = Array1::from_shape_fn(d, |_| rng.random_range(-3.0..3.0));
            let pts = Array2::from_shape_fn((10, d), |_| 0.0);
            let mut pts = pts;
            for mut row in pts.rows_mut() {
                let (s, t): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                row.assign(&(&offset + &(&u * s) + &(&w * t)));
            }
            let coords = pca_project(pts.view()).unwrap();
            for (a, b) in distances(&pts).iter().zip(distances(&coords)) {
                assert!((a - b).abs() < 1e-9);
            }
            for c in 0..2 {
                assert!(coords.column(c).sum().abs() / 10.0 <= 1e-12);
            }
        }
    }

    #[test]
    fn duplicates_translation_and_degenerate_input() {
        let pts = array![[0.0, 1.0, 2.0], [3.0, -1.0, 0.5], [1.0, 1.0, 1.0], [-2.0, 0.0, 4.0]];
        let base = pca_project(pts.view()).unwrap();
        let doubled = ndarray::concatenate![ndarray::Axis(0), pts, pts];
        let coords = pca_project(doubled.view()).unwrap();
        for i in 0..4 {
            for c in 0..2 {
                assert_eq!(coords[[i, c]], coords[[i + 4, c]]);
                assert!((coords[[i, c]] - base[[i, c]]).abs() < 1e-9);
            }
        }
        let shifted = &pts + &array![10.0, -5.0, 2.5];
        let moved = pca_project(shifted.view()).unwrap();
        assert!(moved.iter().zip(&base).all(|(a, b)| (a - b).abs() < 1e-9));
        let same = array![[1.0, 2.0], [1.0, 2.0]];
        assert!(matches!(
            pca_project(same.view()),
            Err(AnalysisError::DegenerateInput(_))
        ));
        assert!(pca_project(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn separation_examples() {
        let pts = array![[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0], [5.0, 5.1]];
        assert_eq!(separation_score(pts.view(), &[0, 1, 2], &[3, 4, 5]).unwrap(), 1.0);
        assert!(matches!(
            separation_score(pts.view(), &[0], &[3, 4, 5]),
            Err(AnalysisError::Grouping(_))
        ));
    }

    #[test]
    fn separation_is_rigid_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts = Array2::from_shape_fn((12, 2), |(i, _)| {
            rng.random_range(-1.0..1.0) + if i < 6 { 0.0 } else { 0.7 }
        });
        let a: Vec<usize> = (0..6).collect();
        let b: Vec<usize> = (6..12).collect();
        let base = separation_score(pts.view(), &a, &b).unwrap();
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = array![[c, -s], [s, c]];
        let moved = pts.dot(&rot) + &array![4.0, -2.0];
        assert_eq!(separation_score(moved.view(), &a, &b).unwrap(), base);
    }

    #[test]
    fn identical_groups_score_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 20;
        let mut total = 0.0;
        let trials = 1000;
        for _ in 0..trials {
            let pts = Array2::from_shape_fn((2 * n, 3), |_| StandardNormal.sample(&mut rng));
            let a: Vec<usize> = (0..2 * n).step_by(2).collect();
            let b: Vec<usize> = (1..2 * n).step_by(2).collect();
            total += separation_score(pts.view(), &a, &b).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - 0.5).abs() <= 0.1, "{mean}");
    }
}
