//! End-to-end recovery: partition, PMI estimation, whitening, tensor
//! decomposition, and reassembly of the weight matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::ColumnErrorReport;
use crate::linalg::{mat_serde, Matrix};
use crate::model::{population_pmi, NoisyOrModel, SampleBatch};
use crate::pmi::{count_zero_patterns, pmi_from_counts, random_partition, Partition, PmiSource};
use crate::tensor::{whitened_decompose, ComponentSet, DecompParams};
use crate::whitening::{rho_scale, whitening_matrices_with_rank};
use crate::{Error, Result};

pub const RECOVERY_SCHEMA_VERSION: u32 = 1;

/// splitmix64 step; used to derive stage seeds from one user-facing seed.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Configuration of one recovery run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Prior on each hidden cause (a given, not estimated).
    pub rho: f64,
    /// Number of hidden causes to recover.
    pub m: usize,
    /// Upper clamp for recovered weights.
    pub nu_u: f64,
    pub decomp: DecompParams,
    pub pmi_source: PmiSource,
    /// User-facing seed; the partition seed is derived from it.
    pub seed: u64,
    /// Truncation rank of the middle pseudo-inverse in the whitening
    /// products; defaults to `m`.
    pub middle_rank: Option<usize>,
}

impl FitConfig {
    pub fn new(rho: f64, m: usize, nu_u: f64, source: PmiSource, seed: u64) -> Self {
        FitConfig {
            rho,
            m,
            nu_u,
            decomp: DecompParams::new(m, derive_seed(seed, 2)),
            pmi_source: source,
            seed,
            middle_rank: None,
        }
    }

    pub fn partition_seed(&self) -> u64 {
        derive_seed(self.seed, 1)
    }

    fn validate(&self) -> Result<()> {
        if self.rho <= 0.0 || self.rho >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "rho must be in (0,1), got {}",
                self.rho
            )));
        }
        if self.m == 0 {
            return Err(Error::InvalidInput("m must be positive".into()));
        }
        if self.nu_u <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "nu_u must be positive, got {}",
                self.nu_u
            )));
        }
        if self.decomp.target_r != self.m {
            return Err(Error::InvalidInput(format!(
                "decomposition target_r {} must equal m {}",
                self.decomp.target_r, self.m
            )));
        }
        Ok(())
    }
}

/// Input of [`fit`]: raw samples or a known model evaluated in closed form.
pub enum FitInput<'a> {
    Samples(&'a SampleBatch),
    Population(&'a NoisyOrModel),
}

/// Wall-clock milliseconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub pmi_ms: u64,
    pub whitening_ms: u64,
    pub decomposition_ms: u64,
    pub assembly_ms: u64,
}

/// Output of one recovery run.
#[derive(Debug, Clone)]
pub struct RecoveryResult {
    /// Recovered `n x m` weight matrix, entries in `[0, nu_u]`.
    pub w_hat: Matrix,
    pub components: ComponentSet,
    pub partition: Partition,
    /// Filled by evaluation against a known model, not by `fit`.
    pub per_column_error: Option<ColumnErrorReport>,
    pub stage_ms: StageTimings,
}

/// Runs the full pipeline. Deterministic given the seeds in `cfg`.
pub fn fit(input: FitInput<'_>, cfg: &FitConfig) -> Result<RecoveryResult> {
    cfg.validate()?;
    let n = match &input {
        FitInput::Samples(batch) => batch.n,
        FitInput::Population(model) => model.n,
    };
    match (&input, cfg.pmi_source) {
        (FitInput::Samples(_), PmiSource::Empirical)
        | (FitInput::Population(_), PmiSource::Population) => {}
        _ => {
            return Err(Error::InvalidInput(
                "pmi_source does not match the input kind".into(),
            ))
        }
    }
    if let FitInput::Population(model) = &input {
        let pm = model.rho * model.empirical_density() * model.m as f64;
        if pm > 0.1 {
            log::warn!("rho*p*m = {pm:.3} > 0.1: outside the regime the method is designed for");
        }
    }

    let mut timings = StageTimings::default();

    let t0 = Instant::now();
    let partition =
        random_partition(n, cfg.partition_seed()).map_err(|e| e.in_stage("pmi"))?;
    let blocks = match &input {
        FitInput::Samples(batch) => count_zero_patterns(batch, &partition)
            .and_then(|counts| pmi_from_counts(&counts))
            .map_err(|e| e.in_stage("pmi"))?,
        FitInput::Population(model) => {
            population_pmi(model, &partition).map_err(|e| e.in_stage("pmi"))?
        }
    };
    if blocks.max_abs_entry() < 1e-12 {
        return Err(Error::DegenerateModel(
            "all cross-block PMI entries vanish; the observations carry no correlations".into(),
        )
        .in_stage("pmi"));
    }
    timings.pmi_ms = t0.elapsed().as_millis() as u64;

    let t1 = Instant::now();
    let middle_rank = cfg.middle_rank.unwrap_or(cfg.m);
    let white = whitening_matrices_with_rank(&blocks, cfg.rho, cfg.m, middle_rank)
        .map_err(|e| e.in_stage("whitening"))?;
    timings.whitening_ms = t1.elapsed().as_millis() as u64;

    let t2 = Instant::now();
    let components = whitened_decompose(&blocks.pmit, &white, &cfg.decomp)
        .map_err(|e| e.in_stage("decomposition"))?;
    timings.decomposition_ms = t2.elapsed().as_millis() as u64;

    let t3 = Instant::now();
    let w_hat = assemble_w(&components, &partition, cfg.rho, cfg.nu_u)
        .map_err(|e| e.in_stage("assembly"))?;
    timings.assembly_ms = t3.elapsed().as_millis() as u64;

    Ok(RecoveryResult {
        w_hat,
        components,
        partition,
        per_column_error: None,
        stage_ms: timings,
    })
}

/// Turns recovered component triples back into weight columns.
///
/// Per component `i`, the three block vectors are rescaled by
/// `((1-rho)/rho)^{1/3}`, scattered to their original indices, and each
/// entry `y` maps to `-log y` clamped into `[0, nu_u]`: values at or below
/// `exp(-nu_u)` clamp to `nu_u`, values above `1` clamp to `0`.
pub fn assemble_w(
    components: &ComponentSet,
    part: &Partition,
    rho: f64,
    nu_u: f64,
) -> Result<Matrix> {
    if rho <= 0.0 || rho >= 1.0 {
        return Err(Error::InvalidInput(format!("rho must be in (0,1), got {rho}")));
    }
    let n = part.n();
    let k = components.len();
    let inv_scale = rho_scale(rho).powf(-1.0 / 3.0);
    let floor = (-nu_u).exp();

    let mut w = Matrix::zeros(n, k);
    for (col, (a, b, c)) in components.triples.iter().enumerate() {
        if a.len() != part.sa.len() || b.len() != part.sb.len() || c.len() != part.sc.len() {
            return Err(Error::ShapeMismatch(format!(
                "component {col} has block lengths ({}, {}, {}), partition has {:?}",
                a.len(),
                b.len(),
                c.len(),
                part.block_sizes()
            )));
        }
        let mut scatter = |indices: &[usize], values: &crate::linalg::Vector| {
            for (local, &global) in indices.iter().enumerate() {
                let y = 1.0 - inv_scale * values[local];
                w[(global, col)] = if y > floor { (-y.ln()).max(0.0) } else { nu_u };
            }
        };
        scatter(&part.sa, a);
        scatter(&part.sb, b);
        scatter(&part.sc, c);
    }
    Ok(w)
}

// ---- recovery JSON --------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedEcho {
    pub seed: u64,
    pub partition_seed: u64,
    pub decomp_seed: u64,
}

/// On-disk recovery record: resolved configuration, seeds, partition, stage
/// timings, and the dense recovered weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryFile {
    pub schema_version: u32,
    pub config: FitConfig,
    pub seeds: SeedEcho,
    pub partition: Partition,
    pub stage_ms: StageTimings,
    #[serde(with = "mat_serde")]
    pub w_hat: Matrix,
}

impl RecoveryFile {
    pub fn new(result: &RecoveryResult, cfg: &FitConfig) -> Self {
        RecoveryFile {
            schema_version: RECOVERY_SCHEMA_VERSION,
            config: cfg.clone(),
            seeds: SeedEcho {
                seed: cfg.seed,
                partition_seed: cfg.partition_seed(),
                decomp_seed: cfg.decomp.seed,
            },
            partition: result.partition.clone(),
            stage_ms: result.stage_ms,
            w_hat: result.w_hat.clone(),
        }
    }

    pub fn write_json_file(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn read_json_file(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let file: RecoveryFile = serde_json::from_reader(r).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if file.schema_version != RECOVERY_SCHEMA_VERSION {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!("unsupported schema version {}", file.schema_version),
            });
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use approx::assert_relative_eq;

    fn singleton_partition() -> Partition {
        Partition {
            sa: vec![0],
            sb: vec![1],
            sc: vec![2],
            seed: 0,
        }
    }

    fn one_component(a: f64, b: f64, c: f64) -> ComponentSet {
        ComponentSet {
            triples: vec![(
                Vector::from_vec(vec![a]),
                Vector::from_vec(vec![b]),
                Vector::from_vec(vec![c]),
            )],
            accept_scores: vec![1.0],
        }
    }

    /// With rho = 1/2 the rescaling factor is 1, so y = 1 - component.
    #[test]
    fn assemble_w_direct_formula() {
        let comps = one_component(0.5, 0.99, -0.2);
        let w = assemble_w(&comps, &singleton_partition(), 0.5, 3.0).unwrap();
        // y = 0.5 -> ln 2
        assert_relative_eq!(w[(0, 0)], std::f64::consts::LN_2, epsilon = 1e-12);
        // y = 0.01 < e^{-3} -> clamp to nu_u
        assert_relative_eq!(w[(1, 0)], 3.0, epsilon = 1e-12);
        // y = 1.2 > 1 -> clamp to 0
        assert_relative_eq!(w[(2, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn assemble_w_respects_bounds() {
        let mut rng_vals = vec![];
        for i in 0..30 {
            rng_vals.push((i as f64) * 0.1 - 1.0);
        }
        let comps = ComponentSet {
            triples: vec![(
                Vector::from_vec(rng_vals[..10].to_vec()),
                Vector::from_vec(rng_vals[10..20].to_vec()),
                Vector::from_vec(rng_vals[20..].to_vec()),
            )],
            accept_scores: vec![1.0],
        };
        let part = crate::pmi::random_partition(30, 8).unwrap();
        let w = assemble_w(&comps, &part, 0.05, 2.5).unwrap();
        for &x in w.iter() {
            assert!((0.0..=2.5).contains(&x), "entry {x} out of [0, nu_u]");
        }
    }

    #[test]
    fn assemble_w_rejects_block_mismatch() {
        let comps = one_component(0.5, 0.5, 0.5);
        let part = crate::pmi::random_partition(9, 1).unwrap();
        assert!(assemble_w(&comps, &part, 0.5, 3.0).is_err());
    }

    #[test]
    fn fit_rejects_mismatched_source() {
        let params = crate::model::RandomModelParams::new(12, 2, 0.5, 0.2, 3);
        let model = crate::model::generate_random_model(&params).unwrap();
        let cfg = FitConfig::new(0.2, 2, 3.0, PmiSource::Empirical, 7);
        assert!(matches!(
            fit(FitInput::Population(&model), &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn fit_zero_model_degenerate() {
        let model =
            crate::model::NoisyOrModel::new(Matrix::zeros(12, 2), 0.2, 3.0, 0.5).unwrap();
        let cfg = FitConfig::new(0.2, 2, 3.0, PmiSource::Population, 7);
        match fit(FitInput::Population(&model), &cfg) {
            Err(Error::Stage { stage, source }) => {
                assert_eq!(stage, "pmi");
                assert!(matches!(*source, Error::DegenerateModel(_)));
            }
            other => panic!("expected staged degenerate-model error, got {other:?}"),
        }
    }

    #[test]
    fn fit_config_validation() {
        let mut cfg = FitConfig::new(0.2, 2, 3.0, PmiSource::Population, 7);
        cfg.decomp.target_r = 3;
        let model =
            crate::model::NoisyOrModel::new(Matrix::zeros(12, 2), 0.2, 3.0, 0.5).unwrap();
        assert!(fit(FitInput::Population(&model), &cfg).is_err());
    }

    #[test]
    fn derive_seed_spreads() {
        let a = derive_seed(1, 1);
        let b = derive_seed(1, 2);
        let c = derive_seed(2, 1);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
