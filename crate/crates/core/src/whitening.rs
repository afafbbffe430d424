//! Approximate whitening matrices from cross-block PMI matrices.
//!
//! The three asymmetric products
//! `Q_a = c^{-1/3} PMI_ab [PMI_bc^T]_m^+ PMI_ca` (and cyclic shifts), with
//! `c = rho / (1 - rho)`, approximate the block Gram matrices
//! `(c^{1/3} F_Sa)(c^{1/3} F_Sa)^T` without ever touching the unreliable
//! same-index PMI entries. The middle pseudo-inverse is truncated to rank
//! `m`, which is the analyzed form of the estimator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{
    mat_serde, psd_inv_sqrt, rank_m_pinv, spectral_norm, Matrix,
};
use crate::pmi::PmiBlocks;
use crate::{Error, Result};

/// Whitening matrices for the three partition blocks together with their
/// rank-`m` PSD inverse square roots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WhiteningSet {
    #[serde(with = "mat_serde")]
    pub q_a: Matrix,
    #[serde(with = "mat_serde")]
    pub q_b: Matrix,
    #[serde(with = "mat_serde")]
    pub q_c: Matrix,
    #[serde(with = "mat_serde")]
    pub inv_sqrt_a: Matrix,
    #[serde(with = "mat_serde")]
    pub inv_sqrt_b: Matrix,
    #[serde(with = "mat_serde")]
    pub inv_sqrt_c: Matrix,
    pub rank: usize,
}

impl WhiteningSet {
    /// Builds a set directly from given symmetric PSD matrices. Used by
    /// tests and calibration runs that bypass the PMI estimate.
    pub fn from_matrices(q_a: Matrix, q_b: Matrix, q_c: Matrix, rank: usize) -> Result<Self> {
        let inv_sqrt_a = psd_inv_sqrt(&q_a, rank)?;
        let inv_sqrt_b = psd_inv_sqrt(&q_b, rank)?;
        let inv_sqrt_c = psd_inv_sqrt(&q_c, rank)?;
        Ok(WhiteningSet {
            q_a,
            q_b,
            q_c,
            inv_sqrt_a,
            inv_sqrt_b,
            inv_sqrt_c,
            rank,
        })
    }

    /// Scales all three whitening matrices by `factor` (inverse square roots
    /// by `1/sqrt(factor)`).
    pub fn scaled(&self, factor: f64) -> Self {
        assert!(factor > 0.0, "scale must be positive");
        WhiteningSet {
            q_a: &self.q_a * factor,
            q_b: &self.q_b * factor,
            q_c: &self.q_c * factor,
            inv_sqrt_a: &self.inv_sqrt_a / factor.sqrt(),
            inv_sqrt_b: &self.inv_sqrt_b / factor.sqrt(),
            inv_sqrt_c: &self.inv_sqrt_c / factor.sqrt(),
            rank: self.rank,
        }
    }
}

/// Prior-dependent scale `rho / (1 - rho)` shared by the PMI series
/// expansion and the whitening/assembly stages.
pub fn rho_scale(rho: f64) -> f64 {
    rho / (1.0 - rho)
}

/// Computes the three whitening matrices from PMI blocks. The middle
/// pseudo-inverse of each product is truncated to rank `m`; each product is
/// symmetrized as `(Q + Q^T)/2` before the PSD inverse square root, and
/// trailing negative eigenvalues are dropped by the rank-`m` truncation.
pub fn whitening_matrices(blocks: &PmiBlocks, rho: f64, m: usize) -> Result<WhiteningSet> {
    whitening_matrices_with_rank(blocks, rho, m, m)
}

/// As [`whitening_matrices`], with an explicit truncation rank for the
/// middle pseudo-inverse.
pub fn whitening_matrices_with_rank(
    blocks: &PmiBlocks,
    rho: f64,
    m: usize,
    middle_rank: usize,
) -> Result<WhiteningSet> {
    if rho <= 0.0 || rho >= 1.0 {
        return Err(Error::InvalidInput(format!("rho must be in (0,1), got {rho}")));
    }
    let (la, lb, lc) = blocks.part.block_sizes();
    let min_dim = la.min(lb).min(lc);
    if m == 0 || m > min_dim {
        return Err(Error::InvalidInput(format!(
            "rank m = {m} out of range for block sizes ({la}, {lb}, {lc})"
        )));
    }
    if middle_rank < m || middle_rank > min_dim {
        return Err(Error::InvalidInput(format!(
            "middle truncation rank {middle_rank} must lie in [{m}, {min_dim}]"
        )));
    }
    let scale = rho_scale(rho).powf(-1.0 / 3.0);

    let product = |left: &Matrix, middle: &Matrix, right: &Matrix| -> Result<Matrix> {
        let mid_pinv = rank_m_pinv(&middle.transpose(), middle_rank)?;
        let q = left * mid_pinv * right * scale;
        Ok((&q + q.transpose()) * 0.5)
    };

    let q_a = product(&blocks.pmi_ab, &blocks.pmi_bc, &blocks.pmi_ca)?;
    let q_b = product(&blocks.pmi_bc, &blocks.pmi_ca, &blocks.pmi_ab)?;
    let q_c = product(&blocks.pmi_ca, &blocks.pmi_ab, &blocks.pmi_bc)?;
    WhiteningSet::from_matrices(q_a, q_b, q_c, m)
}

/// Measures how well `Q` whitens the columns of `A`:
/// `|((Q^+)^{1/2} A)^T ((Q^+)^{1/2} A) - Id_m|` in spectral norm. Zero means
/// the whitened columns are exactly orthonormal.
pub fn check_whitening(q: &Matrix, a: &Matrix, m: usize) -> Result<f64> {
    if q.nrows() != a.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "Q is {}x{} but A has {} rows",
            q.nrows(),
            q.ncols(),
            a.nrows()
        )));
    }
    let inv_sqrt = psd_inv_sqrt(q, m)?;
    let whitened = &inv_sqrt * a;
    let gram = whitened.transpose() * &whitened;
    let k = gram.nrows();
    let diff = gram - Matrix::identity(k, k);
    Ok(spectral_norm(&diff))
}

// ---- PMIB container with whitening section -------------------------------

fn write_whitening_section(white: &WhiteningSet, w: &mut impl Write) -> Result<()> {
    w.write_all(&(white.rank as u32).to_le_bytes())?;
    for m in [
        &white.q_a,
        &white.q_b,
        &white.q_c,
        &white.inv_sqrt_a,
        &white.inv_sqrt_b,
        &white.inv_sqrt_c,
    ] {
        crate::pmi::write_matrix(w, m)?;
    }
    Ok(())
}

fn read_whitening_section(r: &mut impl Read) -> Result<WhiteningSet> {
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let rank = u32::from_le_bytes(buf4) as usize;
    let q_a = crate::pmi::read_matrix(r)?;
    let q_b = crate::pmi::read_matrix(r)?;
    let q_c = crate::pmi::read_matrix(r)?;
    let inv_sqrt_a = crate::pmi::read_matrix(r)?;
    let inv_sqrt_b = crate::pmi::read_matrix(r)?;
    let inv_sqrt_c = crate::pmi::read_matrix(r)?;
    Ok(WhiteningSet {
        q_a,
        q_b,
        q_c,
        inv_sqrt_a,
        inv_sqrt_b,
        inv_sqrt_c,
        rank,
    })
}

/// Writes PMI blocks plus an optional whitening set into one PMIB file.
pub fn write_pmib_file(
    blocks: &PmiBlocks,
    white: Option<&WhiteningSet>,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    blocks.write_body(&mut w)?;
    match white {
        None => w.write_all(&[0u8])?,
        Some(set) => {
            w.write_all(&[1u8])?;
            write_whitening_section(set, &mut w)?;
        }
    }
    Ok(())
}

/// Reads a PMIB file, returning the blocks and the whitening section if one
/// was stored.
pub fn read_pmib_file(path: &Path) -> Result<(PmiBlocks, Option<WhiteningSet>)> {
    let mut r = BufReader::new(File::open(path)?);
    let wrap = |e: Error| Error::MalformedFile {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let blocks = PmiBlocks::read_body(&mut r).map_err(wrap)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let white = match flag[0] {
        0 => None,
        1 => Some(read_whitening_section(&mut r).map_err(wrap)?),
        other => {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!("unknown whitening flag {other}"),
            })
        }
    };
    Ok((blocks, white))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{truncated_svd, Tensor3};
    use crate::pmi::{Partition, PmiSource};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn blocks_from_products(
        ab: Matrix,
        bc: Matrix,
        ca: Matrix,
        la: usize,
        lb: usize,
        lc: usize,
    ) -> PmiBlocks {
        let n = la + lb + lc;
        let part = Partition {
            sa: (0..la).collect(),
            sb: (la..la + lb).collect(),
            sc: (la + lb..n).collect(),
            seed: 0,
        };
        PmiBlocks {
            part,
            pmi_ab: ab,
            pmi_bc: bc,
            pmi_ca: ca,
            pmit: Tensor3::zeros(la, lb, lc),
            source: PmiSource::Population,
        }
    }

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn projector_blocks_reproduce_projector() {
        // A = B = C with orthonormal columns and c_rho = 1 (rho = 1/2):
        // every block is U U^T and Q_a must come back as U U^T.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw = random_matrix(&mut rng, 12, 3);
        let u = truncated_svd(&raw, 3).unwrap().u;
        let proj = &u * u.transpose();
        let blocks = blocks_from_products(proj.clone(), proj.clone(), proj.clone(), 12, 12, 12);
        let white = whitening_matrices(&blocks, 0.5, 3).unwrap();
        let diff = &white.q_a - &proj;
        assert!(spectral_norm(&diff) < 1e-8, "Q_a differs from projector");
    }

    #[test]
    fn exact_products_reproduce_gram() {
        // Error-free blocks A B^T, B C^T, C A^T with c_rho = 1 must give
        // exactly A A^T: the middle factors cancel.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 10, 4);
        let b = random_matrix(&mut rng, 10, 4);
        let c = random_matrix(&mut rng, 10, 4);
        let blocks = blocks_from_products(
            &a * b.transpose(),
            &b * c.transpose(),
            &c * a.transpose(),
            10,
            10,
            10,
        );
        let white = whitening_matrices(&blocks, 0.5, 4).unwrap();
        let gram = &a * a.transpose();
        let diff = &white.q_a - &gram;
        assert!(
            spectral_norm(&diff) < 1e-8 * spectral_norm(&gram).max(1.0),
            "Q_a differs from AA^T by {}",
            spectral_norm(&diff)
        );
        let gram_b = &b * b.transpose();
        let diff_b = &white.q_b - &gram_b;
        assert!(spectral_norm(&diff_b) < 1e-8 * spectral_norm(&gram_b).max(1.0));
    }

    #[test]
    fn check_whitening_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_matrix(&mut rng, 10, 3);
        let q = &a * a.transpose();
        let eps = check_whitening(&q, &a, 3).unwrap();
        assert!(eps < 1e-8, "exact Gram should whiten perfectly, got {eps}");

        let doubled = &q * 2.0;
        let eps2 = check_whitening(&doubled, &a, 3).unwrap();
        assert!((eps2 - 0.5).abs() < 1e-8, "expected 0.5, got {eps2}");
    }

    #[test]
    fn check_whitening_rejects_mismatch() {
        let q = Matrix::identity(4, 4);
        let a = Matrix::zeros(5, 2);
        assert!(check_whitening(&q, &a, 2).is_err());
    }

    #[test]
    fn whitening_rejects_bad_rank() {
        let blocks = blocks_from_products(
            Matrix::identity(4, 4),
            Matrix::identity(4, 4),
            Matrix::identity(4, 4),
            4,
            4,
            4,
        );
        assert!(whitening_matrices(&blocks, 0.5, 0).is_err());
        assert!(whitening_matrices(&blocks, 0.5, 5).is_err());
        assert!(whitening_matrices_with_rank(&blocks, 0.5, 2, 1).is_err());
    }

    #[test]
    fn pmib_with_whitening_roundtrip() {
        let params = crate::model::RandomModelParams::new(12, 2, 0.6, 0.2, 3);
        let model = crate::model::generate_random_model(&params).unwrap();
        let part = crate::pmi::random_partition(12, 7).unwrap();
        let blocks = crate::model::population_pmi(&model, &part).unwrap();
        let white = whitening_matrices(&blocks, model.rho, 2).unwrap();

        let dir = std::env::temp_dir().join("noisyor_pmib_white_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("blocks.pmib");
        write_pmib_file(&blocks, Some(&white), &path).unwrap();
        let (back_blocks, back_white) = read_pmib_file(&path).unwrap();
        let back_white = back_white.expect("whitening section present");
        assert_eq!(blocks.pmi_ab, back_blocks.pmi_ab);
        assert_eq!(white.q_a, back_white.q_a);
        assert_eq!(white.rank, back_white.rank);
        std::fs::remove_file(&path).ok();
    }
}
