//! Ground-truth noisy-or model: random generation, forward sampling, the
//! derived matrices `1 - exp(-l W)`, and two exact oracles for zero-pattern
//! moments and population PMI (closed form and brute-force enumeration).
//!
//! The observation model: hidden causes `d_j ~ Ber(rho)` i.i.d., and
//! `Pr[s_i = 0 | d] = exp(-<W^i, d>)`, all observations independent given
//! `d`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Tensor3};
use crate::pmi::{Partition, PmiBlocks, PmiSource};
use crate::{Error, Result};

pub const SAMPLE_MAGIC: &[u8; 4] = b"NOIR";
pub const SAMPLE_VERSION: u16 = 1;
pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// Most moments cost `O(2^m)` under enumeration; refuse beyond this.
pub const BRUTE_FORCE_MAX_M: usize = 20;

/// Parameters of the random weight-matrix generator.
///
/// Each entry of `W` is zero with probability `1 - p` and otherwise drawn
/// uniformly from `[w_lo, nu_u]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RandomModelParams {
    pub n: usize,
    pub m: usize,
    pub p: f64,
    pub rho: f64,
    pub nu_l: f64,
    pub nu_u: f64,
    pub w_lo: f64,
    pub seed: u64,
}

impl RandomModelParams {
    /// Defaults (`nu_l = 0.5`, `nu_u = 3`, `w_lo = 0.5`) keep the nonzero
    /// weights bounded away from zero: `E[exp(-W^2)] <= 1 - nu_l` holds.
    pub fn new(n: usize, m: usize, p: f64, rho: f64, seed: u64) -> Self {
        RandomModelParams {
            n,
            m,
            p,
            rho,
            nu_l: 0.5,
            nu_u: 3.0,
            w_lo: 0.5,
            seed,
        }
    }
}

/// A fully specified noisy-or network.
#[derive(Debug, Clone)]
pub struct NoisyOrModel {
    pub n: usize,
    pub m: usize,
    pub rho: f64,
    /// Nonnegative `n x m` weight matrix.
    pub w: Matrix,
    pub nu_u: f64,
    pub nu_l: f64,
    /// Present when the model came out of `generate_random_model`.
    pub gen_params: Option<RandomModelParams>,
}

impl NoisyOrModel {
    pub fn new(w: Matrix, rho: f64, nu_u: f64, nu_l: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) || rho <= 0.0 {
            return Err(Error::InvalidInput(format!("rho must be in (0,1), got {rho}")));
        }
        if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and nonnegative".into(),
            ));
        }
        Ok(NoisyOrModel {
            n: w.nrows(),
            m: w.ncols(),
            rho,
            w,
            nu_u,
            nu_l,
            gen_params: None,
        })
    }

    /// Same weights, different prior. Useful for prior-scaling experiments.
    pub fn with_rho(&self, rho: f64) -> Self {
        let mut m = self.clone();
        m.rho = rho;
        m
    }

    /// Fraction of nonzero weight entries.
    pub fn empirical_density(&self) -> f64 {
        let nnz = self.w.iter().filter(|&&x| x > 0.0).count();
        nnz as f64 / (self.n * self.m) as f64
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        let file = ModelFile::from_model(self);
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, &file)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json_file(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let file: ModelFile = serde_json::from_reader(r).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        file.into_model(path)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    n: usize,
    m: usize,
    rho: f64,
    nu_u: f64,
    nu_l: f64,
    /// Row-major `n x m` weights.
    w: Vec<f64>,
    gen_params: Option<RandomModelParams>,
    seed: Option<u64>,
}

impl ModelFile {
    fn from_model(model: &NoisyOrModel) -> Self {
        let mut w = Vec::with_capacity(model.n * model.m);
        for i in 0..model.n {
            for j in 0..model.m {
                w.push(model.w[(i, j)]);
            }
        }
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            n: model.n,
            m: model.m,
            rho: model.rho,
            nu_u: model.nu_u,
            nu_l: model.nu_l,
            w,
            gen_params: model.gen_params,
            seed: model.gen_params.map(|p| p.seed),
        }
    }

    fn into_model(self, path: &Path) -> Result<NoisyOrModel> {
        if self.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!("unsupported schema version {}", self.schema_version),
            });
        }
        if self.w.len() != self.n * self.m {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!(
                    "weight payload has {} entries, expected {}x{}",
                    self.w.len(),
                    self.n,
                    self.m
                ),
            });
        }
        let w = Matrix::from_row_slice(self.n, self.m, &self.w);
        let mut model = NoisyOrModel::new(w, self.rho, self.nu_u, self.nu_l)?;
        model.gen_params = self.gen_params;
        Ok(model)
    }
}

/// `N` bit-packed binary observation vectors; bit `i` of a row is `s_i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleBatch {
    pub n: usize,
    pub n_samples: u64,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl SampleBatch {
    pub fn zeros(n: usize, n_samples: u64) -> Self {
        let words_per_row = n.div_ceil(64);
        SampleBatch {
            n,
            n_samples,
            words_per_row,
            bits: vec![0u64; words_per_row * n_samples as usize],
        }
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    #[inline]
    pub fn bit(&self, sample: usize, i: usize) -> bool {
        let word = self.bits[sample * self.words_per_row + i / 64];
        (word >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set_bit(&mut self, sample: usize, i: usize) {
        self.bits[sample * self.words_per_row + i / 64] |= 1 << (i % 64);
    }

    pub fn row_words(&self, sample: usize) -> &[u64] {
        &self.bits[sample * self.words_per_row..(sample + 1) * self.words_per_row]
    }

    pub fn write_binary_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SAMPLE_MAGIC)?;
        w.write_all(&SAMPLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&self.n_samples.to_le_bytes())?;
        for word in &self.bits {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary_file(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let bad = |reason: String| Error::MalformedFile {
            path: path.display().to_string(),
            reason,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SAMPLE_MAGIC {
            return Err(bad("bad magic, not a sample file".into()));
        }
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2)?;
        let version = u16::from_le_bytes(buf2);
        if version != SAMPLE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)?;
        let n = u32::from_le_bytes(buf4) as usize;
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8)?;
        let n_samples = u64::from_le_bytes(buf8);
        if n == 0 || n_samples == 0 {
            return Err(bad("empty sample file".into()));
        }
        let words_per_row = n.div_ceil(64);
        let total = words_per_row * n_samples as usize;
        let mut bits = vec![0u64; total];
        for word in bits.iter_mut() {
            r.read_exact(&mut buf8)?;
            *word = u64::from_le_bytes(buf8);
        }
        Ok(SampleBatch {
            n,
            n_samples,
            words_per_row,
            bits,
        })
    }
}

/// Draws a weight matrix entrywise: zero with probability `1 - p`, otherwise
/// uniform on `[w_lo, nu_u]`. Deterministic given the seed.
pub fn generate_random_model(params: &RandomModelParams) -> Result<NoisyOrModel> {
    if params.n == 0 || params.m == 0 {
        return Err(Error::InvalidInput("n and m must be positive".into()));
    }
    if !(0.0..=1.0).contains(&params.p) {
        return Err(Error::InvalidInput(format!(
            "edge probability p must be in [0, 1], got {}",
            params.p
        )));
    }
    if params.rho <= 0.0 || params.rho >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "rho must be in (0,1), got {}",
            params.rho
        )));
    }
    if !(params.w_lo >= 0.0 && params.w_lo <= params.nu_u) {
        return Err(Error::InvalidInput(format!(
            "need 0 <= w_lo <= nu_u, got w_lo = {}, nu_u = {}",
            params.w_lo, params.nu_u
        )));
    }
    if params.nu_l <= 0.0 || params.nu_l >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "nu_l must be in (0,1), got {}",
            params.nu_l
        )));
    }
    if params.rho * params.p * params.m as f64 >= 1.0 {
        log::warn!(
            "rho*p*m = {:.3} >= 1: observations will be mostly active and recovery degrades",
            params.rho * params.p * params.m as f64
        );
    }
    let lower_bound_mean = expected_exp_neg_sq(params.w_lo, params.nu_u);
    if lower_bound_mean > 1.0 - params.nu_l {
        log::warn!(
            "weight distribution violates the lower-bound condition: E[exp(-W^2)] = {:.4} > 1 - nu_l = {:.4}",
            lower_bound_mean,
            1.0 - params.nu_l
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut w = Matrix::zeros(params.n, params.m);
    for i in 0..params.n {
        for j in 0..params.m {
            if rng.gen::<f64>() < params.p {
                w[(i, j)] = if params.w_lo == params.nu_u {
                    params.nu_u
                } else {
                    rng.gen_range(params.w_lo..=params.nu_u)
                };
            }
        }
    }
    let mut model = NoisyOrModel::new(w, params.rho, params.nu_u, params.nu_l)?;
    model.gen_params = Some(*params);
    Ok(model)
}

/// `E[exp(-X^2)]` for `X ~ U[a, b]`, by Simpson quadrature.
fn expected_exp_neg_sq(a: f64, b: f64) -> f64 {
    if a == b {
        return (-a * a).exp();
    }
    let steps = 2048;
    let h = (b - a) / steps as f64;
    let f = |x: f64| (-x * x).exp();
    let mut acc = f(a) + f(b);
    for k in 1..steps {
        let x = a + k as f64 * h;
        acc += if k % 2 == 1 { 4.0 * f(x) } else { 2.0 * f(x) };
    }
    acc * h / 3.0 / (b - a)
}

/// Entrywise `1 - exp(-l W)`: `l = 1` is `F`, `2` is `G`, `3` is `H`,
/// `4` is `L`.
pub fn derived_matrix(model: &NoisyOrModel, l: u32) -> Matrix {
    assert!(l >= 1, "derived matrix order must be >= 1");
    let lf = l as f64;
    Matrix::from_fn(model.n, model.m, |i, j| 1.0 - (-lf * model.w[(i, j)]).exp())
}

/// Forward-samples `n_samples` observation vectors. Each sample uses its own
/// counter-indexed RNG stream, so the result is independent of how samples
/// are scheduled across threads.
pub fn sample(model: &NoisyOrModel, n_samples: u64, seed: u64) -> SampleBatch {
    assert!(n_samples >= 1, "need at least one sample");
    let mut batch = SampleBatch::zeros(model.n, n_samples);
    let words_per_row = batch.words_per_row;
    let n = model.n;
    let m = model.m;
    let rho = model.rho;
    let w = &model.w;

    batch
        .bits
        .par_chunks_mut(words_per_row)
        .enumerate()
        .for_each(|(t, row)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let mut active: Vec<usize> = Vec::new();
            for j in 0..m {
                if rng.gen::<f64>() < rho {
                    active.push(j);
                }
            }
            if active.is_empty() {
                return;
            }
            for i in 0..n {
                let mut load = 0.0;
                for &j in &active {
                    load += w[(i, j)];
                }
                let p_active = 1.0 - (-load).exp();
                if rng.gen::<f64>() < p_active {
                    row[i / 64] |= 1 << (i % 64);
                }
            }
        });
    batch
}

fn check_indices(model: &NoisyOrModel, idx: &[usize]) -> Result<()> {
    if idx.is_empty() || idx.len() > 3 {
        return Err(Error::InvalidInput(format!(
            "moment oracle takes 1-3 indices, got {}",
            idx.len()
        )));
    }
    for (a, &i) in idx.iter().enumerate() {
        if i >= model.n {
            return Err(Error::InvalidInput(format!(
                "index {i} out of range for n = {}",
                model.n
            )));
        }
        if idx[a + 1..].contains(&i) {
            return Err(Error::InvalidInput(format!("repeated index {i}")));
        }
    }
    Ok(())
}

/// `log Pr[s_i = 0 for all i in idx]` in closed form:
/// `sum_k log(1 - rho (1 - exp(-sum_i W_ik)))`.
pub fn log_zero_moment(model: &NoisyOrModel, idx: &[usize]) -> Result<f64> {
    check_indices(model, idx)?;
    let mut acc = 0.0;
    for k in 0..model.m {
        let mut load = 0.0;
        for &i in idx {
            load += model.w[(i, k)];
        }
        let factor = 1.0 - model.rho * (1.0 - (-load).exp());
        if factor <= 0.0 {
            return Err(Error::DegenerateModel(format!(
                "zero probability for indices {idx:?} at cause {k}"
            )));
        }
        acc += factor.ln();
    }
    Ok(acc)
}

/// `Pr[s_i = 0 for all i in idx]` in closed form.
pub fn exact_zero_moment(model: &NoisyOrModel, idx: &[usize]) -> Result<f64> {
    Ok(log_zero_moment(model, idx)?.exp())
}

/// Same moment by summing over all `2^m` cause configurations. Independent
/// of the closed form; limited to `m <= 20`.
pub fn brute_force_zero_moment(model: &NoisyOrModel, idx: &[usize]) -> Result<f64> {
    check_indices(model, idx)?;
    if model.m > BRUTE_FORCE_MAX_M {
        return Err(Error::InvalidInput(format!(
            "brute-force enumeration limited to m <= {BRUTE_FORCE_MAX_M}, got {}",
            model.m
        )));
    }
    let m = model.m;
    let mut total = 0.0;
    for mask in 0u64..(1u64 << m) {
        let actives = mask.count_ones() as i32;
        let prob_d =
            model.rho.powi(actives) * (1.0 - model.rho).powi(m as i32 - actives);
        let mut load = 0.0;
        for k in 0..m {
            if (mask >> k) & 1 == 1 {
                for &i in idx {
                    load += model.w[(i, k)];
                }
            }
        }
        total += prob_d * (-load).exp();
    }
    Ok(total)
}

fn pmi_blocks_from_moments(
    model: &NoisyOrModel,
    part: &Partition,
    log_moment: &dyn Fn(&NoisyOrModel, &[usize]) -> Result<f64>,
) -> Result<PmiBlocks> {
    part.validate(model.n)?;
    let singles: Vec<f64> = (0..model.n)
        .map(|i| log_moment(model, &[i]))
        .collect::<Result<_>>()?;

    let pair_block = |rows: &[usize], cols: &[usize]| -> Result<Matrix> {
        let mut out = Matrix::zeros(rows.len(), cols.len());
        for (r, &i) in rows.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                out[(r, c)] = log_moment(model, &[i, j])? - singles[i] - singles[j];
            }
        }
        Ok(out)
    };
    let pmi_ab = pair_block(&part.sa, &part.sb)?;
    let pmi_bc = pair_block(&part.sb, &part.sc)?;
    let pmi_ca = pair_block(&part.sc, &part.sa)?;

    // log of pairwise moments, reused by every tensor entry
    let lp_ab = {
        let mut m2 = Matrix::zeros(part.sa.len(), part.sb.len());
        for (r, &i) in part.sa.iter().enumerate() {
            for (c, &j) in part.sb.iter().enumerate() {
                m2[(r, c)] = log_moment(model, &[i, j])?;
            }
        }
        m2
    };
    let lp_bc = {
        let mut m2 = Matrix::zeros(part.sb.len(), part.sc.len());
        for (r, &j) in part.sb.iter().enumerate() {
            for (c, &k) in part.sc.iter().enumerate() {
                m2[(r, c)] = log_moment(model, &[j, k])?;
            }
        }
        m2
    };
    let lp_ca = {
        let mut m2 = Matrix::zeros(part.sc.len(), part.sa.len());
        for (r, &k) in part.sc.iter().enumerate() {
            for (c, &i) in part.sa.iter().enumerate() {
                m2[(r, c)] = log_moment(model, &[k, i])?;
            }
        }
        m2
    };

    let (la, lb, lc) = (part.sa.len(), part.sb.len(), part.sc.len());
    let mut pmit = Tensor3::zeros(la, lb, lc);
    for (r, &i) in part.sa.iter().enumerate() {
        for (c, &j) in part.sb.iter().enumerate() {
            for (d, &k) in part.sc.iter().enumerate() {
                let triple = log_moment(model, &[i, j, k])?;
                let value = lp_ab[(r, c)] + lp_bc[(c, d)] + lp_ca[(d, r)]
                    - triple
                    - singles[i]
                    - singles[j]
                    - singles[k];
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
        source: PmiSource::Population,
    })
}

/// Population (infinite-sample) PMI blocks and PMI tensor block for the
/// given partition, from the closed-form moments.
pub fn population_pmi(model: &NoisyOrModel, part: &Partition) -> Result<PmiBlocks> {
    pmi_blocks_from_moments(model, part, &log_zero_moment)
}

/// Population PMI blocks from brute-force enumeration over all cause
/// configurations. Slow; the independent cross-check for `population_pmi`.
pub fn brute_force_pmi(model: &NoisyOrModel, part: &Partition) -> Result<PmiBlocks> {
    let log_bf = |model: &NoisyOrModel, idx: &[usize]| -> Result<f64> {
        let p = brute_force_zero_moment(model, idx)?;
        if p <= 0.0 {
            return Err(Error::DegenerateModel(format!(
                "zero probability for indices {idx:?}"
            )));
        }
        Ok(p.ln())
    };
    pmi_blocks_from_moments(model, part, &log_bf)
}
