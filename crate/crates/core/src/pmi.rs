//! Plug-in PMI estimation from samples: random equipartitions, a bit-parallel
//! zero-pattern counting engine, and the log-ratio estimator for cross-block
//! PMI matrices and the PMI tensor block.
//!
//! Only cross-block entries are ever produced. Same-index entries of the PMI
//! statistics obey a different formula than distinct-index entries, so the
//! partition structurally excludes them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{mat_serde, Matrix, Tensor3};
use crate::model::SampleBatch;
use crate::{Error, Result};

pub const PMIB_MAGIC: &[u8; 4] = b"PMIB";
pub const PMIB_VERSION: u16 = 1;

/// A disjoint three-way split of the observation indices, block sizes within
/// one of `n/3`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub sa: Vec<usize>,
    pub sb: Vec<usize>,
    pub sc: Vec<usize>,
    pub seed: u64,
}

impl Partition {
    pub fn n(&self) -> usize {
        self.sa.len() + self.sb.len() + self.sc.len()
    }

    pub fn block_sizes(&self) -> (usize, usize, usize) {
        (self.sa.len(), self.sb.len(), self.sc.len())
    }

    /// Checks disjointness, coverage of `[0, n)`, and the size balance.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n() != n {
            return Err(Error::InvalidInput(format!(
                "partition covers {} indices, expected {n}",
                self.n()
            )));
        }
        let mut seen = vec![false; n];
        for &i in self.sa.iter().chain(&self.sb).chain(&self.sc) {
            if i >= n {
                return Err(Error::InvalidInput(format!("partition index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::InvalidInput(format!("partition repeats index {i}")));
            }
            seen[i] = true;
        }
        let lo = n / 3;
        let hi = n.div_ceil(3);
        for (name, len) in [("S_a", self.sa.len()), ("S_b", self.sb.len()), ("S_c", self.sc.len())] {
            if len < lo || len > hi {
                return Err(Error::InvalidInput(format!(
                    "block {name} has {len} indices, not an equipartition of {n}"
                )));
            }
        }
        Ok(())
    }
}

/// Uniformly random equipartition of `[0, n)`, deterministic given the seed.
pub fn random_partition(n: usize, seed: u64) -> Result<Partition> {
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "need n >= 3 to form three blocks, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng);
    let base = n / 3;
    let rem = n % 3;
    let la = base + usize::from(rem > 0);
    let lb = base + usize::from(rem > 1);
    let mut sa = indices[..la].to_vec();
    let mut sb = indices[la..la + lb].to_vec();
    let mut sc = indices[la + lb..].to_vec();
    sa.sort_unstable();
    sb.sort_unstable();
    sc.sort_unstable();
    Ok(Partition { sa, sb, sc, seed })
}

/// Row-major grid of co-zero counts for one cross-block pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u64>,
}

impl CountGrid {
    fn zeros(rows: usize, cols: usize) -> Self {
        CountGrid {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.data[r * self.cols + c]
    }
}

/// Exact zero-pattern counts over a sample batch: `z_i = 1` singles for all
/// indices, cross-block co-zero pairs, and the full triple grid over
/// `S_a x S_b x S_c`.
#[derive(Debug, Clone)]
pub struct ZeroCounts {
    pub n_samples: u64,
    pub part: Partition,
    /// Count of samples with `z_i = 1`, for every index `i` in `[0, n)`.
    pub singles: Vec<u64>,
    pub pairs_ab: CountGrid,
    pub pairs_bc: CountGrid,
    pub pairs_ca: CountGrid,
    /// `triples[(r * |S_b| + c) * |S_c| + d]` counts samples with all three
    /// of `z` set at `(S_a[r], S_b[c], S_c[d])`.
    pub triples: Vec<u64>,
}

impl ZeroCounts {
    #[inline]
    pub fn triple(&self, r: usize, c: usize, d: usize) -> u64 {
        self.triples[(r * self.part.sb.len() + c) * self.part.sc.len() + d]
    }
}

fn popcount_and2(a: &[u64], b: &[u64]) -> u64 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones() as u64).sum()
}

/// Counts zero patterns with per-index bit columns: one bitmap of `z_i` per
/// index over all samples, pair counts by `AND` + popcount, triple counts by
/// reusing each `(i, j)` intersection against every third column.
pub fn count_zero_patterns(batch: &SampleBatch, part: &Partition) -> Result<ZeroCounts> {
    part.validate(batch.n)?;
    let n = batch.n;
    let n_samples = batch.n_samples as usize;
    let col_words = n_samples.div_ceil(64);

    // z columns start as all-ones (symptom absent) and get cleared wherever
    // a symptom fires; symptoms are sparse so this touches few bits.
    let mut cols: Vec<Vec<u64>> = vec![vec![u64::MAX; col_words]; n];
    for t in 0..n_samples {
        let row = batch.row_words(t);
        for (w, &word) in row.iter().enumerate() {
            let mut bits = word;
            while bits != 0 {
                let b = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let i = w * 64 + b;
                cols[i][t / 64] &= !(1u64 << (t % 64));
            }
        }
    }
    // mask the tail beyond the last sample
    if n_samples % 64 != 0 {
        let mask = (1u64 << (n_samples % 64)) - 1;
        for col in cols.iter_mut() {
            *col.last_mut().expect("nonempty column") &= mask;
        }
    }

    let singles: Vec<u64> = cols
        .iter()
        .map(|col| col.iter().map(|w| w.count_ones() as u64).sum())
        .collect();

    let pair_grid = |rows: &[usize], cols_idx: &[usize]| -> CountGrid {
        let mut grid = CountGrid::zeros(rows.len(), cols_idx.len());
        grid.data
            .par_chunks_mut(cols_idx.len())
            .enumerate()
            .for_each(|(r, out)| {
                let ci = &cols[rows[r]];
                for (c, &j) in cols_idx.iter().enumerate() {
                    out[c] = popcount_and2(ci, &cols[j]);
                }
            });
        grid
    };
    let pairs_ab = pair_grid(&part.sa, &part.sb);
    let pairs_bc = pair_grid(&part.sb, &part.sc);
    let pairs_ca = pair_grid(&part.sc, &part.sa);

    let (la, lb, lc) = part.block_sizes();
    let mut triples = vec![0u64; la * lb * lc];
    triples
        .par_chunks_mut(lc)
        .enumerate()
        .for_each_init(
            || vec![0u64; col_words],
            |scratch, (rc, out)| {
                let r = rc / lb;
                let c = rc % lb;
                let ca = &cols[part.sa[r]];
                let cb = &cols[part.sb[c]];
                for (s, (x, y)) in scratch.iter_mut().zip(ca.iter().zip(cb)) {
                    *s = x & y;
                }
                for (d, &k) in part.sc.iter().enumerate() {
                    out[d] = popcount_and2(scratch, &cols[k]);
                }
            },
        );

    Ok(ZeroCounts {
        n_samples: batch.n_samples,
        part: part.clone(),
        singles,
        pairs_ab,
        pairs_bc,
        pairs_ca,
        triples,
    })
}

/// Which estimator produced a set of PMI blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmiSource {
    Empirical,
    Population,
}

/// Cross-block PMI matrices and the PMI tensor block for one partition.
///
/// `pmi_ab` has rows indexed by `S_a` and columns by `S_b` (likewise for the
/// cyclic blocks); `pmit` is indexed by `(S_a, S_b, S_c)` positions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PmiBlocks {
    pub part: Partition,
    #[serde(with = "mat_serde")]
    pub pmi_ab: Matrix,
    #[serde(with = "mat_serde")]
    pub pmi_bc: Matrix,
    #[serde(with = "mat_serde")]
    pub pmi_ca: Matrix,
    pub pmit: Tensor3,
    pub source: PmiSource,
}

impl PmiBlocks {
    /// Largest absolute entry across the matrices and the tensor.
    pub fn max_abs_entry(&self) -> f64 {
        let mats = [&self.pmi_ab, &self.pmi_bc, &self.pmi_ca];
        let mat_max = mats
            .iter()
            .flat_map(|m| m.iter())
            .fold(0.0f64, |acc, x| acc.max(x.abs()));
        self.pmit
            .data
            .iter()
            .fold(mat_max, |acc, x| acc.max(x.abs()))
    }
}

/// Plug-in PMI from zero-pattern counts:
/// matrix entries `log(c_ij N / (c_i c_j))`, tensor entries
/// `log(c_ij c_jk c_ki N / (c_ijk c_i c_j c_k))`.
///
/// Any zero count used by an entry is an error naming the offending index
/// set; in the intended regime all zero-patterns have `Omega(1)` probability,
/// so a zero count signals too few samples rather than a smoothing problem.
pub fn pmi_from_counts(counts: &ZeroCounts) -> Result<PmiBlocks> {
    let part = &counts.part;
    let n = counts.n_samples;
    if n == 0 {
        return Err(Error::InvalidInput("empty sample batch".into()));
    }
    let ln_n = (n as f64).ln();

    let need = |c: u64, what: String| -> Result<f64> {
        if c == 0 {
            Err(Error::InsufficientData { pattern: what })
        } else {
            Ok((c as f64).ln())
        }
    };

    let mut ln_singles = vec![0.0f64; counts.singles.len()];
    for (i, &c) in counts.singles.iter().enumerate() {
        ln_singles[i] = need(c, format!("z_{i}"))?;
    }

    let ln_grid = |grid: &CountGrid, rows: &[usize], cols: &[usize]| -> Result<Matrix> {
        let mut out = Matrix::zeros(grid.rows, grid.cols);
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                out[(r, c)] = need(grid.get(r, c), format!("z_{} & z_{}", rows[r], cols[c]))?;
            }
        }
        Ok(out)
    };
    let ln_ab = ln_grid(&counts.pairs_ab, &part.sa, &part.sb)?;
    let ln_bc = ln_grid(&counts.pairs_bc, &part.sb, &part.sc)?;
    let ln_ca = ln_grid(&counts.pairs_ca, &part.sc, &part.sa)?;

    let pair_pmi = |ln_pairs: &Matrix, rows: &[usize], cols: &[usize]| -> Matrix {
        Matrix::from_fn(rows.len(), cols.len(), |r, c| {
            ln_pairs[(r, c)] + ln_n - ln_singles[rows[r]] - ln_singles[cols[c]]
        })
    };
    let pmi_ab = pair_pmi(&ln_ab, &part.sa, &part.sb);
    let pmi_bc = pair_pmi(&ln_bc, &part.sb, &part.sc);
    let pmi_ca = pair_pmi(&ln_ca, &part.sc, &part.sa);

    let (la, lb, lc) = part.block_sizes();
    let mut pmit = Tensor3::zeros(la, lb, lc);
    for r in 0..la {
        let i = part.sa[r];
        for c in 0..lb {
            let j = part.sb[c];
            for d in 0..lc {
                let k = part.sc[d];
                let c_ijk = counts.triple(r, c, d);
                let ln_triple = need(c_ijk, format!("z_{i} & z_{j} & z_{k}"))?;
                let value = ln_ab[(r, c)] + ln_bc[(c, d)] + ln_ca[(d, r)] + ln_n
                    - ln_triple
                    - ln_singles[i]
                    - ln_singles[j]
                    - ln_singles[k];
                pmit.set(r, c, d, value);
            }
        }
    }

    Ok(PmiBlocks {
        part: part.clone(),
        pmi_ab,
        pmi_bc,
        pmi_ca,
        pmit,
        source: PmiSource::Empirical,
    })
}

// ---- binary container ("PMIB") ------------------------------------------

fn write_u32(w: &mut impl Write, x: u32) -> Result<()> {
    w.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_index_list(w: &mut impl Write, list: &[usize]) -> Result<()> {
    write_u32(w, list.len() as u32)?;
    for &i in list {
        write_u32(w, i as u32)?;
    }
    Ok(())
}

pub(crate) fn write_matrix(w: &mut impl Write, m: &Matrix) -> Result<()> {
    write_u32(w, m.nrows() as u32)?;
    write_u32(w, m.ncols() as u32)?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_all(&m[(r, c)].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_index_list(r: &mut impl Read) -> Result<Vec<usize>> {
    let len = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(read_u32(r)? as usize);
    }
    Ok(out)
}

pub(crate) fn read_matrix(r: &mut impl Read) -> Result<Matrix> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    let mut m = Matrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = read_f64(r)?;
        }
    }
    Ok(m)
}

impl PmiBlocks {
    /// Writes the PMIB container body: partition lists, the three matrices,
    /// then the tensor. A trailing flag byte marks an optional whitening
    /// section, written by the whitening module.
    pub(crate) fn write_body(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(PMIB_MAGIC)?;
        w.write_all(&PMIB_VERSION.to_le_bytes())?;
        w.write_all(&[match self.source {
            PmiSource::Empirical => 0u8,
            PmiSource::Population => 1u8,
        }])?;
        w.write_all(&self.part.seed.to_le_bytes())?;
        write_index_list(w, &self.part.sa)?;
        write_index_list(w, &self.part.sb)?;
        write_index_list(w, &self.part.sc)?;
        write_matrix(w, &self.pmi_ab)?;
        write_matrix(w, &self.pmi_bc)?;
        write_matrix(w, &self.pmi_ca)?;
        let (d1, d2, d3) = self.pmit.dims;
        write_u32(w, d1 as u32)?;
        write_u32(w, d2 as u32)?;
        write_u32(w, d3 as u32)?;
        for &x in &self.pmit.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub(crate) fn read_body(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PMIB_MAGIC {
            return Err(Error::InvalidInput("bad magic, not a PMIB container".into()));
        }
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        if u16::from_le_bytes(buf2) != PMIB_VERSION {
            return Err(Error::InvalidInput("unsupported PMIB version".into()));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let source = match flag[0] {
            0 => PmiSource::Empirical,
            1 => PmiSource::Population,
            other => {
                return Err(Error::InvalidInput(format!("unknown PMI source tag {other}")))
            }
        };
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let seed = u64::from_le_bytes(buf8);
        let sa = read_index_list(r)?;
        let sb = read_index_list(r)?;
        let sc = read_index_list(r)?;
        let pmi_ab = read_matrix(r)?;
        let pmi_bc = read_matrix(r)?;
        let pmi_ca = read_matrix(r)?;
        let d1 = read_u32(r)? as usize;
        let d2 = read_u32(r)? as usize;
        let d3 = read_u32(r)? as usize;
        let mut pmit = Tensor3::zeros(d1, d2, d3);
        for x in pmit.data.iter_mut() {
            *x = read_f64(r)?;
        }
        Ok(PmiBlocks {
            part: Partition { sa, sb, sc, seed },
            pmi_ab,
            pmi_bc,
            pmi_ca,
            pmit,
            source,
        })
    }

    /// Standalone PMIB file without a whitening section.
    pub fn write_binary_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_body(&mut w)?;
        w.write_all(&[0u8])?;
        Ok(())
    }

    pub fn read_binary_file(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let blocks = Self::read_body(&mut r).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(blocks)
    }
}
