use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FlatVector, PromptEmbedding};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Current embedding first, then the candidates in order.
    pub points: Vec<Point2>,
    /// Set when fewer than two distinct points exist; all points sit at the origin.
    pub degenerate: bool,
}

const RANK_EPS: f64 = 1e-12;

/// PCA of the current embedding and its candidates onto the top two
/// principal axes, scaled by one common factor into `[-1, 1]^2`.
pub fn project_neighborhood(
    current: &PromptEmbedding,
    candidates: &[PromptEmbedding],
) -> Result<Projection> {
    let mut rows: Vec<&[f64]> = vec![current.flat()];
    rows.extend(candidates.iter().map(FlatVector::flat));
    if rows.len() < 2 {
        return Err(Error::invalid("projection", "needs at least two points"));
    }
    let coords = pca_coordinates(&rows, 2);
    let n = rows.len();
    let max_abs = coords
        .iter()
        .flat_map(|c| c.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max_abs <= RANK_EPS {
        return Ok(Projection {
            points: vec![Point2::default(); n],
            degenerate: true,
        });
    }
    let points = coords
        .iter()
        .map(|c| Point2 {
            x: c[0] / max_abs,
            y: c[1] / max_abs,
        })
        .collect();
    Ok(Projection {
        points,
        degenerate: false,
    })
}

/// Coordinates of each row on the top `dims` principal axes of the centred
/// data. Axes with zero variance contribute zeros.
pub fn pca_coordinates(rows: &[&[f64]], dims: usize) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();

    // The n x n Gram matrix shares its non-zero spectrum with the covariance;
    // the projection of row i on axis k is sqrt(lambda_k) * u_k[i].
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = v;
            gram[j][i] = v;
        }
    }
    let (values, vectors) = jacobi_eigen(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut coords = vec![vec![0.0; dims]; n];
    for (k, &axis) in order.iter().take(dims).enumerate() {
        let lambda = values[axis];
        if lambda <= RANK_EPS * scale {
            continue;
        }
        let mut u: Vec<f64> = (0..n).map(|i| vectors[i][axis]).collect();
        // Fix the sign: largest-magnitude component positive.
        let pivot = u
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if u[pivot] < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        let s = lambda.sqrt();
        for i in 0..n {
            coords[i][k] = s * u[i];
        }
    }
    coords
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix.
/// Returns eigenvalues and the matrix whose columns are eigenvectors.
#[allow(clippy::needless_range_loop)]
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(data: Vec<f64>) -> PromptEmbedding {
        let n = data.len();
        PromptEmbedding::new(1, n, data).unwrap()
    }

    #[test]
    fn jacobi_diagonalises() {
        let a = vec![
            vec![4.0, 1.0, 2.0],
            vec![1.0, 3.0, 0.5],
            vec![2.0, 0.5, 5.0],
        ];
        let (vals, vecs) = jacobi_eigen(a.clone());
        for k in 0..3 {
            for i in 0..3 {
                let av: f64 = (0..3).map(|j| a[i][j] * vecs[j][k]).sum();
                assert!((av - vals[k] * vecs[i][k]).abs() < 1e-12);
            }
        }
        let trace: f64 = vals.iter().sum();
        assert!((trace - 12.0).abs() < 1e-12);
    }

    #[test]
    fn two_points_lie_on_a_line_through_origin() {
        let p = project_neighborhood(&emb(vec![1.0, 2.0, 3.0]), &[emb(vec![0.0, 1.0, -1.0])]).unwrap();
        assert!(!p.degenerate);
        assert_eq!(p.points.len(), 2);
        let (a, b) = (p.points[0], p.points[1]);
        assert!(a.y.abs() < 1e-12 && b.y.abs() < 1e-12);
        assert!((a.x + b.x).abs() < 1e-12);
        assert!((a.x.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_of_current_is_degenerate() {
        let c = emb(vec![1.0, 2.0, 3.0]);
        let p = project_neighborhood(&c, std::slice::from_ref(&c)).unwrap();
        assert!(p.degenerate);
        assert!(p.points.iter().all(|q| q.x == 0.0 && q.y == 0.0));
    }

    #[test]
    fn coordinates_fit_unit_square() {
        let c = emb(vec![1.0, 0.0, 0.0, 0.5]);
        let cands = vec![
            emb(vec![0.0, 1.0, 0.0, 0.1]),
            emb(vec![0.0, 0.0, 1.0, -0.3]),
            emb(vec![0.3, 0.3, 0.3, 0.9]),
        ];
        let p = project_neighborhood(&c, &cands).unwrap();
        let max = p
            .points
            .iter()
            .map(|q| q.x.abs().max(q.y.abs()))
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
    }
}
