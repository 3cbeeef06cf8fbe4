//! Principal components of a small set of vectors.
//!
//! The eigendecomposition runs on the `n x n` Gram matrix of the centred rows,
//! which is cheap because there is one row per label.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions in the input space, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// Variance (sum of squares / n) along each direction.
    pub variances: Vec<f64>,
    /// Coordinates of every input row on each direction.
    pub coords: Vec<Vec<f64>>,
}

/// Top-`k` principal components of `rows`. Directions beyond the rank of the
/// data are reported as zero vectors with zero coordinates.
///
/// Sign convention: the largest-magnitude entry of every direction is
/// positive (the earliest such entry on ties).
pub fn pca(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    let Some(d) = rows.first().map(Vec::len) else {
        return Err(Error::Data("cannot run PCA on zero rows".into()));
    };
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Data(
            "PCA rows must be non-empty and of equal length".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let gram = &x * x.transpose();
    let eig = SymmetricEigen::new(gram);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(0.0);

    let mut components = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for idx in 0..k {
        let lambda = order.get(idx).map_or(0.0, |&o| eig.eigenvalues[o]);
        if idx >= n || lambda <= RANK_TOLERANCE * top || lambda <= 0.0 {
            components.push(vec![0.0; d]);
            variances.push(0.0);
            continue;
        }
        let u = eig.eigenvectors.column(order[idx]);
        let v = x.transpose() * u / lambda.sqrt();
        let mut dir: Vec<f64> = v.iter().copied().collect();
        let mut pivot = 0;
        for (j, val) in dir.iter().enumerate() {
            if val.abs() > dir[pivot].abs() {
                pivot = j;
            }
        }
        if dir[pivot] < 0.0 {
            dir.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(dir);
        variances.push(lambda / n as f64);
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..d).map(|j| x[(i, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        variances,
        coords,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::rng::seeded;

    fn projected_variance(rows: &[Vec<f64>], mean: &[f64], dir: &[f64]) -> f64 {
        rows.iter()
            .map(|r| {
                let p: f64 = r
                    .iter()
                    .zip(mean)
                    .zip(dir)
                    .map(|((v, m), d)| (v - m) * d)
                    .sum();
                p * p
            })
            .sum::<f64>()
            / rows.len() as f64
    }

    #[test]
    fn axis_aligned_data_keeps_its_coordinates() {
        let rows = vec![
            vec![3.0, 0.0],
            vec![-3.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ];
        let p = pca(&rows, 2).unwrap();
        for (r, c) in rows.iter().zip(&p.coords) {
            assert!((r[0].abs() - c[0].abs()).abs() < 1e-12);
            assert!((r[1].abs() - c[1].abs()).abs() < 1e-12);
        }
        assert!((p.variances[0] - 4.5).abs() < 1e-12);
        assert!((p.variances[1] - 0.5).abs() < 1e-12);
        assert!((p.components[0][0] - 1.0).abs() < 1e-12 && p.components[0][1].abs() < 1e-12);
    }

    #[test]
    fn top_directions_beat_random_probes() {
        let mut rng = seeded(7, 0);
        let rows: Vec<Vec<f64>> = (0..9)
            .map(|_| {
                let a: f64 = rng.random_range(-3.0..3.0);
                let b: f64 = rng.random_range(-1.0..1.0);
                vec![a + b, a - b, 0.3 * b, rng.random_range(-0.2..0.2), a]
            })
            .collect();
        let p = pca(&rows, 2).unwrap();
        let v1 = projected_variance(&rows, &p.mean, &p.components[0]);
        let v2 = projected_variance(&rows, &p.mean, &p.components[1]);
        assert!((v1 - p.variances[0]).abs() < 1e-9);
        assert!(v1 >= v2);
        for _ in 0..100 {
            let mut probe: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = probe.iter().map(|v| v * v).sum::<f64>().sqrt();
            probe.iter_mut().for_each(|v| *v /= norm);
            assert!(projected_variance(&rows, &p.mean, &probe) <= v1 + 1e-9);
            // remove the first direction; PC2 dominates the remainder
            let dot: f64 = probe.iter().zip(&p.components[0]).map(|(a, b)| a * b).sum();
            let mut orth: Vec<f64> = probe
                .iter()
                .zip(&p.components[0])
                .map(|(a, b)| a - dot * b)
                .collect();
            let norm = orth.iter().map(|v| v * v).sum::<f64>().sqrt();
            orth.iter_mut().for_each(|v| *v /= norm);
            assert!(projected_variance(&rows, &p.mean, &orth) <= v2 + 1e-9);
        }
    }

    #[test]
    fn duplicate_rows_share_coordinates() {
        let rows = vec![
            vec![1.0, 2.0, 3.0],
            vec![0.5, -1.0, 2.0],
            vec![1.0, 2.0, 3.0],
            vec![-2.0, 0.0, 1.0],
        ];
        let p = pca(&rows, 2).unwrap();
        assert_eq!(p.coords[0], p.coords[2]);
    }

    #[test]
    fn sign_convention_and_rank_deficiency() {
        let rows = vec![vec![0.0, -2.0], vec![0.0, 2.0]];
        let p = pca(&rows, 3).unwrap();
        assert!(p.components[0][0].abs() < 1e-12 && (p.components[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(p.components[1], vec![0.0, 0.0]);
        assert_eq!(p.components[2], vec![0.0, 0.0]);
        assert_eq!(p.coords[0][1], 0.0);
        assert!((p.coords[0][0] + 2.0).abs() < 1e-12);
        assert!(pca(&[], 2).is_err());
        assert!(pca(&[vec![1.0], vec![1.0, 2.0]], 2).is_err());
    }
}
