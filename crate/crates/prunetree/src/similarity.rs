//! Representation similarity: Gram matrices, the HSIC statistic, and the
//! normalized CKA score used to compare candidate networks.
//!
//! Representations are row-per-example matrices; the two sides of a
//! comparison may have different feature widths but must share the probe
//! (same examples, same order). All statistics accumulate in f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::{Error, Result};

/// Bandwidth choice for the RBF kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RbfSigma {
    Fixed(f64),
    /// Median of the positive pairwise row distances; 1.0 when every pair
    /// coincides (the kernel is then all ones regardless).
    Median,
}

/// Kernel used to turn a representation into a Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SimilarityMetric {
    Linear,
    Rbf(RbfSigma),
}

/// Symmetric kernel matrix over probe examples, stored dense in f64.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    data: Vec<f64>,
    m: usize,
}

impl GramMatrix {
    /// Wraps a row-major symmetric matrix. Intended for direct construction
    /// in tests; `gram` is the production path.
    pub fn new(data: Vec<f64>, m: usize) -> Result<GramMatrix> {
        if m < 2 {
            return Err(Error::validation("gram matrix needs at least 2 examples".to_string()));
        }
        if data.len() != m * m {
            return Err(Error::validation(format!(
                "gram matrix data length {} is not {}x{}",
                data.len(),
                m,
                m
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("gram matrix has non-finite entries".to_string()));
        }
        for i in 0..m {
            for j in (i + 1)..m {
                if (data[i * m + j] - data[j * m + i]).abs() > 1e-9 {
                    return Err(Error::validation(format!(
                        "gram matrix is not symmetric at ({}, {})",
                        i, j
                    )));
                }
            }
        }
        Ok(GramMatrix { data, m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.m + j]
    }
}

fn row_f64(rep: &Matrix, i: usize) -> impl Iterator<Item = f64> + '_ {
    rep.row(i).iter().map(|&v| v as f64)
}

/// Kernel matrix of a representation under the chosen metric.
pub fn gram(metric: &SimilarityMetric, rep: &Matrix) -> Result<GramMatrix> {
    let m = rep.rows();
    if m < 4 {
        return Err(Error::validation(format!(
            "similarity probe needs at least 4 examples, got {}",
            m
        )));
    }
    if !rep.is_finite() {
        return Err(Error::validation("representation has non-finite entries".to_string()));
    }
    let data = match metric {
        SimilarityMetric::Linear => {
            let mut k = vec![0.0f64; m * m];
            for i in 0..m {
                for j in i..m {
                    let dot: f64 = row_f64(rep, i).zip(row_f64(rep, j)).map(|(a, b)| a * b).sum();
                    k[i * m + j] = dot;
                    k[j * m + i] = dot;
                }
            }
            k
        }
        SimilarityMetric::Rbf(sigma) => {
            let mut dist2 = vec![0.0f64; m * m];
            for i in 0..m {
                for j in (i + 1)..m {
                    let d2: f64 = row_f64(rep, i)
                        .zip(row_f64(rep, j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    dist2[i * m + j] = d2;
                    dist2[j * m + i] = d2;
                }
            }
            let s = match sigma {
                RbfSigma::Fixed(s) => {
                    if !(s.is_finite() && *s > 0.0) {
                        return Err(Error::validation("rbf sigma must be finite and positive".to_string()));
                    }
                    *s
                }
                RbfSigma::Median => {
                    let mut d: Vec<f64> = (0..m)
                        .flat_map(|i| ((i + 1)..m).map(move |j| (i, j)))
                        .map(|(i, j)| dist2[i * m + j])
                        .filter(|&d2| d2 > 0.0)
                        .map(f64::sqrt)
                        .collect();
                    if d.is_empty() {
                        1.0
                    } else {
                        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        let mid = d.len() / 2;
                        if d.len() % 2 == 1 {
                            d[mid]
                        } else {
                            0.5 * (d[mid - 1] + d[mid])
                        }
                    }
                }
            };
            let denom = 2.0 * s * s;
            dist2.iter().map(|&d2| (-d2 / denom).exp()).collect()
        }
    };
    Ok(GramMatrix { data, m })
}

/// Biased HSIC estimate between two Gram matrices over the same probe:
/// the trace of `K H L H` divided by `(m - 1)^2`, with `H` the centering
/// map. Only one matrix is centered; the trace then reduces to an
/// elementwise dot product, which is how it is computed here. Tiny negative
/// results from float noise are clamped to zero.
pub fn hsic(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    if k.m != l.m {
        return Err(Error::validation(format!(
            "gram matrices disagree on probe size: {} vs {}",
            k.m, l.m
        )));
    }
    let m = k.m;
    let mut row_mean = vec![0.0f64; m];
    let mut total = 0.0f64;
    for i in 0..m {
        let s: f64 = k.data[i * m..(i + 1) * m].iter().sum();
        row_mean[i] = s / m as f64;
        total += s;
    }
    let grand = total / (m * m) as f64;
    let mut acc = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let centered = k.data[i * m + j] - row_mean[i] - row_mean[j] + grand;
            acc += centered * l.data[i * m + j];
        }
    }
    let denom = ((m - 1) * (m - 1)) as f64;
    let v = acc / denom;
    if v < 0.0 && v > -1e-9 {
        Ok(0.0)
    } else {
        Ok(v)
    }
}

/// Normalized similarity of two representations over the same probe:
/// `HSIC(K, L) / sqrt(HSIC(K, K) * HSIC(L, L))`, clamped to [0, 1].
/// A representation whose self-HSIC vanishes (constant rows) has no
/// geometry to compare and is reported as degenerate.
pub fn cka(metric: &SimilarityMetric, a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::validation(format!(
            "representations disagree on probe size: {} vs {}",
            a.rows(),
            b.rows()
        )));
    }
    let ka = gram(metric, a)?;
    let kb = gram(metric, b)?;
    let cross = hsic(&ka, &kb)?;
    let self_a = hsic(&ka, &ka)?;
    let self_b = hsic(&kb, &kb)?;
    if self_a < 1e-12 || self_b < 1e-12 {
        return Err(Error::DegenerateRepresentation(format!(
            "self-similarity vanished ({:.3e}, {:.3e}); representation is constant over the probe",
            self_a, self_b
        )));
    }
    Ok((cross / (self_a * self_b).sqrt()).clamp(0.0, 1.0))
}

// ---- representation CSV ----------------------------------------------------

/// Writes a representation as plain CSV, one probe example per line.
pub fn write_rep_csv(rep: &Matrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..rep.rows() {
        let line: Vec<String> = rep.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a representation written by `write_rep_csv`.
pub fn read_rep_csv(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::ingest(path, format!("line {}: '{}' is not a number", ln + 1, field.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::ingest(path, format!("line {}: non-finite value", ln + 1)));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::ingest(
                    path,
                    format!("line {}: {} fields, expected {}", ln + 1, row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::ingest(path, "no data rows"));
    }
    let cols = rows[0].len();
    let m = rows.len();
    Matrix::from_vec(rows.into_iter().flatten().collect(), m, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_rep(seed: u64, m: usize, d: usize) -> Matrix {
        let mut rng = crate::rng::stream(seed, &[42]);
        let data: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(data, m, d).unwrap()
    }

    #[test]
    fn linear_gram_hand_example() {
        // Rows (1,0), (0,1), (1,1), (2,0): pairwise dot products.
        let rep = Matrix::from_vec(vec![1., 0., 0., 1., 1., 1., 2., 0.], 4, 2).unwrap();
        let k = gram(&SimilarityMetric::Linear, &rep).unwrap();
        let want = [
            1., 0., 1., 2., //
            0., 1., 1., 0., //
            1., 1., 2., 2., //
            2., 0., 2., 4.,
        ];
        for (got, want) in k.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hsic_of_two_by_two_identity_is_one() {
        let id = GramMatrix::new(vec![1., 0., 0., 1.], 2).unwrap();
        let v = hsic(&id, &id).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{}", v);
    }

    #[test]
    fn hsic_matches_literal_centering_product() {
        // Oracle: materialize H, compute tr(K H L H) with explicit matrix
        // products, compare against the single-centering fast path.
        let m = 8;
        let ra = random_rep(1, m, 5);
        let rb = random_rep(2, m, 3);
        let k = gram(&SimilarityMetric::Linear, &ra).unwrap();
        let l = gram(&SimilarityMetric::Linear, &rb).unwrap();

        let mut h = vec![0.0f64; m * m];
        for i in 0..m {
            for j in 0..m {
                h[i * m + j] = if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64;
            }
        }
        let matmul = |a: &[f64], b: &[f64]| -> Vec<f64> {
            let mut c = vec![0.0f64; m * m];
            for i in 0..m {
                for t in 0..m {
                    let av = a[i * m + t];
                    for j in 0..m {
                        c[i * m + j] += av * b[t * m + j];
                    }
                }
            }
            c
        };
        let khlh = matmul(&matmul(&matmul(k.data(), &h), l.data()), &h);
        let trace: f64 = (0..m).map(|i| khlh[i * m + i]).sum();
        let literal = trace / ((m - 1) * (m - 1)) as f64;

        let fast = hsic(&k, &l).unwrap();
        assert!((fast - literal).abs() < 1e-9, "{} vs {}", fast, literal);
    }

    #[test]
    fn rbf_gram_identical_rows_is_all_ones() {
        let rep = Matrix::from_vec(vec![0.5; 4 * 3], 4, 3).unwrap();
        let k = gram(&SimilarityMetric::Rbf(RbfSigma::Median), &rep).unwrap();
        assert!(k.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rbf_fixed_sigma_hand_value() {
        // Rows at distance 1 along one axis, sigma = 0.5:
        // k = exp(-1 / (2 * 0.25)) = exp(-2).
        let rep = Matrix::from_vec(vec![0., 0., 1., 0., 0., 0., 1., 0.], 4, 2).unwrap();
        let k = gram(&SimilarityMetric::Rbf(RbfSigma::Fixed(0.5)), &rep).unwrap();
        assert!((k.get(0, 1) - (-2.0f64).exp()).abs() < 1e-12);
        assert!((k.get(0, 2) - 1.0).abs() < 1e-12); // identical rows
    }

    #[test]
    fn self_similarity_is_one() {
        let rep = random_rep(3, 10, 6);
        for metric in [
            SimilarityMetric::Linear,
            SimilarityMetric::Rbf(RbfSigma::Median),
            SimilarityMetric::Rbf(RbfSigma::Fixed(1.3)),
        ] {
            let v = cka(&metric, &rep, &rep).unwrap();
            assert!((v - 1.0).abs() < 1e-9, "{:?}: {}", metric, v);
        }
    }

    #[test]
    fn linear_score_ignores_feature_permutation_and_scale() {
        let rep = random_rep(4, 9, 5);
        let m = rep.rows();
        // Columns reversed.
        let permuted: Vec<f32> = (0..m)
            .flat_map(|i| rep.row(i).iter().rev().copied().collect::<Vec<_>>())
            .collect();
        let permuted = Matrix::from_vec(permuted, m, 5).unwrap();
        let v = cka(&SimilarityMetric::Linear, &rep, &permuted).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{}", v);
        // Isotropic scaling.
        let scaled: Vec<f32> = rep.data().iter().map(|&x| 2.5 * x).collect();
        let scaled = Matrix::from_vec(scaled, m, 5).unwrap();
        let v = cka(&SimilarityMetric::Linear, &rep, &scaled).unwrap();
        assert!((v - 1.0).abs() < 1e-9, "{}", v);
    }

    #[test]
    fn independent_representations_score_below_one() {
        let a = random_rep(5, 12, 6);
        let b = random_rep(6, 12, 6);
        let v = cka(&SimilarityMetric::Linear, &a, &b).unwrap();
        assert!(v < 0.9, "{}", v);
        assert!(v >= 0.0);
    }

    #[test]
    fn widths_may_differ_across_the_comparison() {
        let a = random_rep(7, 8, 10);
        let b = random_rep(8, 8, 3);
        let v = cka(&SimilarityMetric::Linear, &a, &b).unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn constant_representation_is_degenerate() {
        let a = random_rep(9, 8, 4);
        let b = Matrix::from_vec(vec![0.7; 8 * 4], 8, 4).unwrap();
        match cka(&SimilarityMetric::Linear, &a, &b) {
            Err(Error::DegenerateRepresentation(_)) => {}
            other => panic!("expected degenerate error, got {:?}", other.ok()),
        }
    }

    #[test]
    fn probe_size_mismatch_is_rejected() {
        let a = random_rep(1, 8, 4);
        let b = random_rep(2, 9, 4);
        assert!(cka(&SimilarityMetric::Linear, &a, &b).is_err());
        let ka = gram(&SimilarityMetric::Linear, &a).unwrap();
        let kb = gram(&SimilarityMetric::Linear, &b).unwrap();
        assert!(hsic(&ka, &kb).is_err());
    }

    #[test]
    fn tiny_probe_and_nonfinite_entries_are_rejected() {
        let small = random_rep(1, 3, 4);
        assert!(gram(&SimilarityMetric::Linear, &small).is_err());
        let mut bad = random_rep(1, 6, 4);
        let m = bad.rows();
        let data = bad.data().to_vec();
        let mut data = data;
        data[5] = f32::NAN;
        bad = Matrix::from_vec(data, m, 4).unwrap();
        assert!(gram(&SimilarityMetric::Linear, &bad).is_err());
    }

    #[test]
    fn gram_matrices_are_positive_semidefinite() {
        use nalgebra::DMatrix;
        for (seed, metric) in [
            (11u64, SimilarityMetric::Linear),
            (12, SimilarityMetric::Rbf(RbfSigma::Median)),
            (13, SimilarityMetric::Rbf(RbfSigma::Fixed(0.8))),
        ] {
            let rep = random_rep(seed, 10, 5);
            let k = gram(&metric, &rep).unwrap();
            let mat = DMatrix::from_row_slice(10, 10, k.data());
            let eig = mat.symmetric_eigen();
            for &ev in eig.eigenvalues.iter() {
                assert!(ev > -1e-8, "{:?}: eigenvalue {}", metric, ev);
            }
        }
    }

    #[test]
    fn rep_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rep.csv");
        let rep = random_rep(14, 6, 3);
        write_rep_csv(&rep, &path).unwrap();
        let back = read_rep_csv(&path).unwrap();
        assert_eq!(back.rows(), 6);
        assert_eq!(back.cols(), 3);
        assert_eq!(back.data(), rep.data());
    }

    #[test]
    fn rep_csv_parse_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.csv");
        std::fs::write(&path, "1.0,2.0\n3.0,oops\n").unwrap();
        let err = read_rep_csv(&path).unwrap_err().to_string();
        assert!(err.contains("junk.csv"), "{}", err);
        std::fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        assert!(read_rep_csv(&path).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn rep_strategy(m: usize, d: usize) -> impl Strategy<Value = Matrix> {
            proptest::collection::vec(-10.0f32..10.0, m * d)
                .prop_map(move |v| Matrix::from_vec(v, m, d).unwrap())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn score_is_symmetric_and_in_range(
                a in rep_strategy(6, 4),
                b in rep_strategy(6, 4),
            ) {
                let ab = cka(&SimilarityMetric::Linear, &a, &b);
                let ba = cka(&SimilarityMetric::Linear, &b, &a);
                prop_assume!(ab.is_ok() && ba.is_ok());
                let (ab, ba) = (ab.unwrap(), ba.unwrap());
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert!((ab - ba).abs() < 1e-9);
            }

            #[test]
            fn joint_row_permutation_leaves_score_unchanged(
                a in rep_strategy(6, 4),
                b in rep_strategy(6, 3),
                perm_seed in 0u64..1000,
            ) {
                let base = cka(&SimilarityMetric::Rbf(RbfSigma::Fixed(2.0)), &a, &b);
                prop_assume!(base.is_ok());
                use rand::seq::SliceRandom;
                let mut order: Vec<usize> = (0..6).collect();
                order.shuffle(&mut crate::rng::stream(perm_seed, &[1]));
                let reorder = |m: &Matrix| {
                    let data: Vec<f32> = order.iter().flat_map(|&i| m.row(i).to_vec()).collect();
                    Matrix::from_vec(data, 6, m.cols()).unwrap()
                };
                let permuted = cka(
                    &SimilarityMetric::Rbf(RbfSigma::Fixed(2.0)),
                    &reorder(&a),
                    &reorder(&b),
                ).unwrap();
                prop_assert!((base.unwrap() - permuted).abs() < 1e-9);
            }
        }
    }
}
