//! PCA by power iteration with deflation on the covariance matrix.
//! Components are sign-fixed so the largest-magnitude coordinate of each
//! eigenvector is positive; explained variance is eigenvalue over total
//! variance (covariance trace).

#[derive(Debug, thiserror::Error)]
pub enum PcaError {
    #[error("need more rows than components: {rows} rows for k={k}")]
    NotEnoughRows { rows: usize, k: usize },
    #[error("empty input")]
    Empty,
    #[error("power iteration failed to converge for component {component}: residual {residual:.3e}")]
    NoConvergence { component: usize, residual: f64 },
}

#[derive(Debug, Clone)]
pub struct PcaResult {
    /// `k` eigenvectors, each of dimension `d`.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue over total variance, per component.
    pub explained: Vec<f64>,
    /// `n x k` projected coordinates, row order preserved.
    pub coords: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

pub const TOLERANCE: f64 = 1e-9;
pub const MAX_ITERS: usize = 1000;

fn mat_vec(c: &[f64], d: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let row = &c[i * d..(i + 1) * d];
        out[i] = row.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Project `n x d` row-major data onto its top `k` principal components.
pub fn pca_project(data: &[f64], n: usize, d: usize, k: usize) -> Result<PcaResult, PcaError> {
    if n == 0 || d == 0 {
        return Err(PcaError::Empty);
    }
    assert_eq!(data.len(), n * d);
    if n <= k {
        return Err(PcaError::NotEnoughRows { rows: n, k });
    }

    let mut mean = vec![0.0f64; d];
    for row in data.chunks(d) {
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let centered: Vec<f64> = data
        .chunks(d)
        .flat_map(|row| row.iter().zip(mean.iter()).map(|(&v, &m)| v - m).collect::<Vec<_>>())
        .collect();

    // covariance with the sample (n-1) normalization
    let mut cov = vec![0.0f64; d * d];
    for row in centered.chunks(d) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for c in cov.iter_mut() {
        *c /= denom;
    }
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();

    let mut components = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut work = cov.clone();
    for comp in 0..k {
        // deterministic start: uniform direction with a small index ramp
        // to avoid starting orthogonal to the leading eigenvector
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.001 * i as f64).collect();
        normalize(&mut v);
        let mut next = vec![0.0f64; d];
        let mut converged = false;
        for _ in 0..MAX_ITERS {
            mat_vec(&work, d, &v, &mut next);
            if normalize(&mut next) == 0.0 {
                // matrix annihilated the iterate: remaining variance is 0
                converged = true;
                next.copy_from_slice(&v);
                break;
            }
            // sign-align before measuring the step
            let dot: f64 = next.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
            let sign = if dot < 0.0 { -1.0 } else { 1.0 };
            let delta = next
                .iter()
                .zip(v.iter())
                .map(|(&a, &b)| (sign * a - b).abs())
                .fold(0.0f64, f64::max);
            for x in next.iter_mut() {
                *x *= sign;
            }
            std::mem::swap(&mut v, &mut next);
            if delta < TOLERANCE {
                converged = true;
                break;
            }
        }
        mat_vec(&work, d, &v, &mut next);
        let lambda: f64 = next.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
        if !converged {
            let residual = next
                .iter()
                .zip(v.iter())
                .map(|(&cv, &vv)| (cv - lambda * vv).abs())
                .fold(0.0f64, f64::max);
            return Err(PcaError::NoConvergence { component: comp, residual });
        }
        // sign convention: largest-magnitude coordinate positive
        let lead = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if v[lead] < 0.0 {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        // deflate: work -= lambda v v^T
        for i in 0..d {
            for j in 0..d {
                work[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        eigenvalues.push(lambda.max(0.0));
        components.push(v.clone());
    }

    let explained = eigenvalues
        .iter()
        .map(|&l| if total_variance > 0.0 { l / total_variance } else { 0.0 })
        .collect();
    let coords = centered
        .chunks(d)
        .map(|row| {
            components
                .iter()
                .map(|c| row.iter().zip(c.iter()).map(|(&a, &b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(PcaResult { components, eigenvalues, explained, coords, mean })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Jacobi eigensolver for small symmetric matrices (classic cyclic
    /// pivoting): the independent oracle for the power-iteration path.
    /// Returns (eigenvalues, column eigenvectors).
    fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
        let mut v = vec![0.0f64; d * d];
        for i in 0..d {
            v[i * d + i] = 1.0;
        }
        for _sweep in 0..100 {
            let off: f64 = (0..d)
                .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
                .map(|(i, j)| a[i * d + j] * a[i * d + j])
                .sum();
            if off < 1e-24 {
                break;
            }
            for p in 0..d {
                for q in p + 1..d {
                    let apq = a[p * d + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let app = a[p * d + p];
                    let aqq = a[q * d + q];
                    let tau = (aqq - app) / (2.0 * apq);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    a[p * d + p] = app - t * apq;
                    a[q * d + q] = aqq + t * apq;
                    a[p * d + q] = 0.0;
                    a[q * d + p] = 0.0;
                    for k in 0..d {
                        if k != p && k != q {
                            let akp = a[k * d + p];
                            let akq = a[k * d + q];
                            a[k * d + p] = c * akp - s * akq;
                            a[p * d + k] = a[k * d + p];
                            a[k * d + q] = s * akp + c * akq;
                            a[q * d + k] = a[k * d + q];
                        }
                    }
                    for k in 0..d {
                        let vkp = v[k * d + p];
                        let vkq = v[k * d + q];
                        v[k * d + p] = c * vkp - s * vkq;
                        v[k * d + q] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let eigvals: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
        (eigvals, v)
    }

    #[test]
    fn line_in_3d_explained_by_first_component() {
        let dir = [0.6f64, -0.64, 0.48];
        let mut data = Vec::new();
        for i in 0..50 {
            let t = i as f64 * 0.37 - 9.0;
            data.extend(dir.iter().map(|&d| d * t));
        }
        let r = pca_project(&data, 50, 3, 2).unwrap();
        assert!(r.explained[0] > 0.999, "explained {:?}", r.explained);
    }

    #[test]
    fn isotropic_gaussian_projections_nearly_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 10_000;
        let mut data = Vec::with_capacity(n * 2);
        for _ in 0..n * 2 {
            // sum of uniforms is close enough to gaussian here
            let v: f64 = (0..6).map(|_| rng.random_range(-0.5..0.5)).sum();
            data.push(v);
        }
        let r = pca_project(&data, n, 2, 2).unwrap();
        let mut cross = 0.0f64;
        let (mut var0, mut var1) = (0.0f64, 0.0f64);
        for c in &r.coords {
            cross += c[0] * c[1];
            var0 += c[0] * c[0];
            var1 += c[1] * c[1];
        }
        let corr = cross / (var0.sqrt() * var1.sqrt());
        assert!(corr.abs() < 0.05, "projection correlation {corr}");
    }

    #[test]
    fn fixed_matrix_matches_dense_eigensolver_oracle() {
        let data: Vec<f64> = vec![
            1.0, 2.0, 0.5,
            -0.3, 0.9, 1.4,
            2.2, -1.0, 0.3,
            0.1, 0.4, -0.8,
            -1.5, 0.6, 2.0,
        ];
        let r = pca_project(&data, 5, 3, 2).unwrap();

        // oracle: covariance + jacobi on the 3x3
        let d = 3;
        let mut mean = [0.0f64; 3];
        for row in data.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v / 5.0;
            }
        }
        let mut cov = vec![0.0f64; 9];
        for row in data.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]) / 4.0;
                }
            }
        }
        let (vals, vecs) = jacobi_eigen(cov, d);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
        for comp in 0..2 {
            let idx = order[comp];
            assert!(
                (r.eigenvalues[comp] - vals[idx]).abs() < 1e-6,
                "eigenvalue {comp}: {} vs {}",
                r.eigenvalues[comp],
                vals[idx]
            );
            let oracle_vec: Vec<f64> = (0..d).map(|i| vecs[i * d + idx]).collect();
            // compare up to sign
            let dot: f64 =
                r.components[comp].iter().zip(&oracle_vec).map(|(&a, &b)| a * b).sum();
            let sign = if dot < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                assert!(
                    (r.components[comp][i] - sign * oracle_vec[i]).abs() < 1e-6,
                    "component {comp}[{i}] differs from oracle"
                );
            }
        }
    }

    #[test]
    fn sign_convention_largest_coordinate_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..40 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = pca_project(&data, 40, 4, 2).unwrap();
        for c in &r.components {
            let lead = c.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(lead > 0.0, "leading coordinate not positive: {c:?}");
        }
    }

    #[test]
    fn explained_fractions_sum_below_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..30 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = pca_project(&data, 30, 5, 2).unwrap();
        let sum: f64 = r.explained.iter().sum();
        assert!(sum <= 1.0 + 1e-12);
        assert!(r.explained.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn rejects_too_few_rows() {
        assert!(matches!(
            pca_project(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2),
            Err(PcaError::NotEnoughRows { .. })
        ));
    }
}
