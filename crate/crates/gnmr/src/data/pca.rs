//! Principal component analysis over pooled window rows.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::binfmt::{read_f64s, write_f64s};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GNMRPCA\0";
const VERSION: u32 = 1;

/// A fitted linear projection onto the top-k principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaTransform {
    pub dims: usize,
    pub k: usize,
    pub mean: Vec<f64>,
    /// k×dims row-major; rows are orthonormal principal directions ordered
    /// by descending explained variance.
    pub components: Vec<f64>,
    /// Fraction of total variance captured by each kept component.
    pub explained_variance_ratio: Vec<f64>,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n×n).
/// Returns (eigenvalues, eigenvectors as columns), unsorted.
fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // smaller-angle root keeps the rotation stable
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let mip = m[i * n + p];
                    let miq = m[i * n + q];
                    m[i * n + p] = c * mip - s * miq;
                    m[i * n + q] = s * mip + c * miq;
                }
                for i in 0..n {
                    let mpi = m[p * n + i];
                    let mqi = m[q * n + i];
                    m[p * n + i] = c * mpi - s * mqi;
                    m[q * n + i] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues = (0..n).map(|i| m[i * n + i]).collect();
    (eigenvalues, v)
}

/// Fit on pooled rows (count×dims row-major): mean-center, eigendecompose
/// the covariance, keep the k leading directions.
pub fn pca_fit(rows: &[f64], dims: usize, k: usize) -> Result<PcaTransform> {
    if dims == 0 || rows.is_empty() || rows.len() % dims != 0 {
        return Err(Error::Config(format!(
            "projection input must be a non-empty multiple of {dims} values, got {}",
            rows.len()
        )));
    }
    if k == 0 || k > dims {
        return Err(Error::Config(format!(
            "component count must be in 1..={dims}, got {k}"
        )));
    }
    let count = rows.len() / dims;
    let mut mean = vec![0.0; dims];
    for r in 0..count {
        for c in 0..dims {
            mean[c] += rows[r * dims + c];
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let denom = if count > 1 { (count - 1) as f64 } else { 1.0 };
    let mut cov = vec![0.0; dims * dims];
    for r in 0..count {
        let row = &rows[r * dims..(r + 1) * dims];
        for i in 0..dims {
            let di = row[i] - mean[i];
            for j in i..dims {
                cov[i * dims + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..dims {
        for j in i..dims {
            cov[i * dims + j] /= denom;
            cov[j * dims + i] = cov[i * dims + j];
        }
    }

    let (eigenvalues, vectors) = jacobi_eigen(&cov, dims);
    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).unwrap());
    let total: f64 = eigenvalues.iter().map(|v| v.max(0.0)).sum();

    let mut components = Vec::with_capacity(k * dims);
    let mut explained_variance_ratio = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        for i in 0..dims {
            components.push(vectors[i * dims + idx]);
        }
        explained_variance_ratio.push(if total > 0.0 {
            eigenvalues[idx].max(0.0) / total
        } else {
            0.0
        });
    }
    Ok(PcaTransform {
        dims,
        k,
        mean,
        components,
        explained_variance_ratio,
    })
}

impl PcaTransform {
    /// Project rows (count×dims) onto the kept directions (count×k).
    pub fn apply(&self, rows: &[f64]) -> Result<Vec<f64>> {
        if rows.len() % self.dims != 0 {
            return Err(Error::Config(format!(
                "projection input length {} is not a multiple of {}",
                rows.len(),
                self.dims
            )));
        }
        let count = rows.len() / self.dims;
        let mut out = Vec::with_capacity(count * self.k);
        for r in 0..count {
            let row = &rows[r * self.dims..(r + 1) * self.dims];
            for comp in 0..self.k {
                let dir = &self.components[comp * self.dims..(comp + 1) * self.dims];
                let mut dot = 0.0;
                for i in 0..self.dims {
                    dot += (row[i] - self.mean[i]) * dir[i];
                }
                out.push(dot);
            }
        }
        Ok(out)
    }

    /// Max deviation of component rows from pairwise orthonormality.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.k {
            for b in 0..self.k {
                let ra = &self.components[a * self.dims..(a + 1) * self.dims];
                let rb = &self.components[b * self.dims..(b + 1) * self.dims];
                let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    /// Writes the fitted projection to a standalone binary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.dims as u32)?;
        w.write_u32::<LittleEndian>(self.k as u32)?;
        write_f64s(&mut w, &self.mean)?;
        write_f64s(&mut w, &self.components)?;
        write_f64s(&mut w, &self.explained_variance_ratio)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "{} is not a projection file",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Incompatible(format!(
                "projection version {version} (supported: {VERSION})"
            )));
        }
        let dims = r.read_u32::<LittleEndian>()? as usize;
        let k = r.read_u32::<LittleEndian>()? as usize;
        if dims == 0 || k == 0 || k > dims || dims > 1 << 20 {
            return Err(Error::Format(format!(
                "implausible projection shape {k}x{dims}"
            )));
        }
        let mean = read_f64s(&mut r, dims)?;
        let components = read_f64s(&mut r, k * dims)?;
        let explained_variance_ratio = read_f64s(&mut r, k)?;
        Ok(Self {
            dims,
            k,
            mean,
            components,
            explained_variance_ratio,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn jacobi_recovers_known_eigenpairs() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1
        let (vals, vecs) = jacobi_eigen(&[2.0, 1.0, 1.0, 2.0], 2);
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((sorted[0] - 3.0).abs() < 1e-12);
        assert!((sorted[1] - 1.0).abs() < 1e-12);
        // columns are unit length
        for j in 0..2 {
            let norm: f64 = (0..2).map(|i| vecs[i * 2 + j] * vecs[i * 2 + j]).sum();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobi_diagonalizes_random_symmetric_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 8;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let (vals, vecs) = jacobi_eigen(&a, n);
        // A v_j == lambda_j v_j for every eigenpair
        for j in 0..n {
            for i in 0..n {
                let av: f64 = (0..n).map(|k| a[i * n + k] * vecs[k * n + j]).sum();
                assert!((av - vals[j] * vecs[i * n + j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = 10;
        let rows: Vec<f64> = (0..200 * dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pca = pca_fit(&rows, dims, 6).unwrap();
        assert!(pca.orthonormality_error() < 1e-8);
    }

    #[test]
    fn rank_two_data_is_fully_explained_by_two_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = 7;
        let u: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut rows = Vec::new();
        for _ in 0..120 {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            for i in 0..dims {
                rows.push(a * u[i] + b * w[i]);
            }
        }
        let pca = pca_fit(&rows, dims, 2).unwrap();
        let evr: f64 = pca.explained_variance_ratio.iter().sum();
        assert!((evr - 1.0).abs() < 1e-9, "evr {evr}");
        assert!(pca.explained_variance_ratio[0] >= pca.explained_variance_ratio[1]);
    }

    #[test]
    fn full_rank_projection_preserves_centered_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = 5;
        let rows: Vec<f64> = (0..40 * dims).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pca = pca_fit(&rows, dims, dims).unwrap();
        let projected = pca.apply(&rows).unwrap();
        // reconstruct through the orthonormal basis and compare
        for r in 0..40 {
            for i in 0..dims {
                let mut rec = pca.mean[i];
                for c in 0..dims {
                    rec += projected[r * dims + c] * pca.components[c * dims + i];
                }
                assert!((rec - rows[r * dims + i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn variance_ratios_are_descending() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = 9;
        let rows: Vec<f64> = (0..300 * dims)
            .map(|i| {
                let col = i % dims;
                // anisotropic scales so the spectrum is well separated
                (col as f64 + 1.0) * rng.gen_range(-1.0..1.0)
            })
            .collect();
        let pca = pca_fit(&rows, dims, dims).unwrap();
        for w in pca.explained_variance_ratio.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
        let total: f64 = pca.explained_variance_ratio.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_many_components_is_a_config_error() {
        let rows = vec![0.0; 30];
        assert!(matches!(
            pca_fit(&rows, 3, 4),
            Err(crate::error::Error::Config(_))
        ));
        assert!(matches!(
            pca_fit(&rows, 3, 0),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn apply_rejects_ragged_input() {
        let rows = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let pca = pca_fit(&rows, 3, 2).unwrap();
        assert!(pca.apply(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn saved_projection_round_trips_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = 6;
        let rows: Vec<f64> = (0..50 * dims).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let pca = pca_fit(&rows, dims, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pca.bin");
        pca.save(&path).unwrap();
        let back = PcaTransform::load(&path).unwrap();
        assert_eq!(pca, back);
    }

    #[test]
    fn foreign_projection_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"definitely not a projection").unwrap();
        assert!(matches!(
            PcaTransform::load(&path),
            Err(crate::error::Error::Format(_))
        ));
    }
}
