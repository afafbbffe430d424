//! Randomized orthogonal tensor decomposition that tolerates structured
//! error, and its whitened wrapper.
//!
//! Each trial contracts the tensor with a Gaussian vector along mode 3,
//! takes the top singular pair of the resulting matrix, reconstructs the
//! third direction by contracting the first two modes, and keeps the triple
//! only if the trilinear verification score clears `1 - zeta` and the first
//! direction is far from everything already accepted. Trials run on
//! counter-indexed RNG streams and are accepted in trial order, so the
//! output does not depend on scheduling.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linalg::{psd_sqrt, truncated_svd, Tensor3, Vector};
use crate::whitening::WhiteningSet;
use crate::{Error, Result};

/// Multiplier in the trial budget `ceil(C d^{1+delta} log d)`.
pub const TRIAL_BUDGET_C: f64 = 4.0;

/// Knobs for the randomized decomposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompParams {
    /// Oversampling exponent in the trial budget.
    pub delta: f64,
    /// Acceptance slack: a triple passes when its score is >= `1 - zeta`.
    pub zeta: f64,
    /// Minimum distance (after sign alignment) between accepted first
    /// directions.
    pub dedup_dist: f64,
    /// Explicit cap on trials; `None` uses `ceil(C d^{1+delta} log d)`.
    pub max_trials: Option<usize>,
    /// Number of components to recover.
    pub target_r: usize,
    pub seed: u64,
}

impl DecompParams {
    pub fn new(target_r: usize, seed: u64) -> Self {
        DecompParams {
            delta: 0.25,
            zeta: 0.1,
            dedup_dist: 0.5,
            max_trials: None,
            target_r,
            seed,
        }
    }

    pub fn trial_budget(&self, d: usize) -> usize {
        self.max_trials.unwrap_or_else(|| {
            let df = d as f64;
            (TRIAL_BUDGET_C * df.powf(1.0 + self.delta) * df.ln().max(1.0)).ceil() as usize
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidInput(format!(
                "delta must be in (0,1), got {}",
                self.delta
            )));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return Err(Error::InvalidInput(format!(
                "zeta must be in (0,1), got {}",
                self.zeta
            )));
        }
        if !(self.dedup_dist > 0.0 && self.dedup_dist <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "dedup_dist must be in (0,1], got {}",
                self.dedup_dist
            )));
        }
        if self.target_r == 0 {
            return Err(Error::InvalidInput("target_r must be positive".into()));
        }
        Ok(())
    }
}

/// Accepted component triples with their verification scores.
#[derive(Debug, Clone, Default)]
pub struct ComponentSet {
    pub triples: Vec<(Vector, Vector, Vector)>,
    pub accept_scores: Vec<f64>,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }
}

/// `M_ij = sum_k T_ijk g_k`: contraction of mode 3 with a vector.
pub fn contract_mode3(t: &Tensor3, g: &Vector) -> Result<crate::linalg::Matrix> {
    let (d1, d2, d3) = t.dims;
    if g.len() != d3 {
        return Err(Error::ShapeMismatch(format!(
            "mode-3 contraction vector has length {}, tensor mode 3 is {d3}",
            g.len()
        )));
    }
    let mut m = crate::linalg::Matrix::zeros(d1, d2);
    for i in 0..d1 {
        for j in 0..d2 {
            let fiber = &t.data[(i * d2 + j) * d3..(i * d2 + j + 1) * d3];
            let mut acc = 0.0;
            for (k, &x) in fiber.iter().enumerate() {
                acc += x * g[k];
            }
            m[(i, j)] = acc;
        }
    }
    Ok(m)
}

/// `z_k = sum_ij T_ijk u_i v_j`: contraction of modes 1 and 2 with vectors.
pub fn contract_modes12(t: &Tensor3, u: &Vector, v: &Vector) -> Result<Vector> {
    let (d1, d2, d3) = t.dims;
    if u.len() != d1 || v.len() != d2 {
        return Err(Error::ShapeMismatch(format!(
            "mode-1/2 contraction vectors have lengths {}/{}, tensor modes are {d1}/{d2}",
            u.len(),
            v.len()
        )));
    }
    let mut z = Vector::zeros(d3);
    for i in 0..d1 {
        let ui = u[i];
        if ui == 0.0 {
            continue;
        }
        for j in 0..d2 {
            let w = ui * v[j];
            if w == 0.0 {
                continue;
            }
            let fiber = &t.data[(i * d2 + j) * d3..(i * d2 + j + 1) * d3];
            for (k, &x) in fiber.iter().enumerate() {
                z[k] += w * x;
            }
        }
    }
    Ok(z)
}

/// Full trilinear form `sum_ijk T_ijk u_i v_j w_k`.
pub fn trilinear(t: &Tensor3, u: &Vector, v: &Vector, w: &Vector) -> Result<f64> {
    let z = contract_modes12(t, u, v)?;
    if w.len() != z.len() {
        return Err(Error::ShapeMismatch(format!(
            "mode-3 vector has length {}, tensor mode 3 is {}",
            w.len(),
            z.len()
        )));
    }
    Ok(z.dot(w))
}

struct Candidate {
    u: Vector,
    v: Vector,
    w: Vector,
    score: f64,
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; one value per pair of uniforms keeps the stream layout
    // simple and deterministic.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn run_trial(t: &Tensor3, seed: u64, trial: u64) -> Option<Candidate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let d3 = t.dims.2;
    let g = Vector::from_fn(d3, |_, _| standard_normal(&mut rng));
    let m = contract_mode3(t, &g).ok()?;
    let svd = truncated_svd(&m, 1).ok()?;
    if svd.singular_values[0] <= 0.0 {
        return None;
    }
    let u: Vector = svd.u.column(0).into();
    let v: Vector = svd.v.column(0).into();
    let z = contract_modes12(t, &u, &v).ok()?;
    let score = z.norm();
    if score < 1e-12 {
        return None;
    }
    Some(Candidate {
        u,
        v,
        w: &z / score,
        score,
    })
}

fn sign_aligned_distance(a: &Vector, b: &Vector) -> f64 {
    let plus = (a - b).norm();
    let minus = (a + b).norm();
    plus.min(minus)
}

/// Recovers up to `target_r` near-orthonormal rank-one components of `t`.
///
/// Errors with [`Error::PartialDecomposition`] carrying whatever was found
/// when the trial budget runs out early.
pub fn orthogonal_decompose(t: &Tensor3, params: &DecompParams) -> Result<ComponentSet> {
    params.validate()?;
    if !t.is_finite() {
        return Err(Error::InvalidInput("tensor has non-finite entries".into()));
    }
    let (d1, d2, d3) = t.dims;
    let min_dim = d1.min(d2).min(d3);
    if min_dim < params.target_r {
        return Err(Error::InvalidInput(format!(
            "tensor dims {:?} cannot hold {} components",
            t.dims, params.target_r
        )));
    }
    let budget = params.trial_budget(d1.max(d2).max(d3));
    let threshold = 1.0 - params.zeta;

    let mut found = ComponentSet::default();
    let batch = 64usize;
    let mut trial = 0usize;
    'outer: while trial < budget && found.len() < params.target_r {
        let upto = (trial + batch).min(budget);
        let candidates: Vec<Option<Candidate>> = (trial..upto)
            .into_par_iter()
            .map(|s| run_trial(t, params.seed, s as u64))
            .collect();
        for cand in candidates.into_iter().flatten() {
            if cand.score < threshold {
                continue;
            }
            let far = found
                .triples
                .iter()
                .all(|(u, _, _)| sign_aligned_distance(u, &cand.u) >= params.dedup_dist);
            if !far {
                continue;
            }
            found.triples.push((cand.u, cand.v, cand.w));
            found.accept_scores.push(cand.score);
            if found.len() >= params.target_r {
                trial = upto;
                break 'outer;
            }
        }
        trial = upto;
    }

    if found.len() < params.target_r {
        return Err(Error::PartialDecomposition {
            target: params.target_r,
            trials: trial,
            found,
        });
    }
    Ok(found)
}

fn flip_nonnegative_sum(v: &mut Vector) {
    if v.iter().sum::<f64>() < 0.0 {
        *v = -&*v;
    }
}

/// Whitens the tensor with the rank-`m` inverse square roots, decomposes,
/// and maps the components back through `Q^{1/2}` into original coordinates.
/// Each returned component is sign-flipped to have a nonnegative entry sum,
/// matching the nonnegative factors this pipeline recovers.
pub fn whitened_decompose(
    t: &Tensor3,
    white: &WhiteningSet,
    params: &DecompParams,
) -> Result<ComponentSet> {
    params.validate()?;
    if white.rank != params.target_r {
        return Err(Error::InvalidInput(format!(
            "whitening rank {} does not match target_r {}",
            white.rank, params.target_r
        )));
    }
    let (d1, d2, d3) = t.dims;
    if white.q_a.nrows() != d1 || white.q_b.nrows() != d2 || white.q_c.nrows() != d3 {
        return Err(Error::ShapeMismatch(format!(
            "whitening blocks ({}, {}, {}) do not match tensor dims {:?}",
            white.q_a.nrows(),
            white.q_b.nrows(),
            white.q_c.nrows(),
            t.dims
        )));
    }

    let whitened = t
        .mode1_multiply(&white.inv_sqrt_a)
        .mode2_multiply(&white.inv_sqrt_b)
        .mode3_multiply(&white.inv_sqrt_c);

    let sqrt_a = psd_sqrt(&white.q_a, white.rank)?;
    let sqrt_b = psd_sqrt(&white.q_b, white.rank)?;
    let sqrt_c = psd_sqrt(&white.q_c, white.rank)?;
    let map_back = |set: ComponentSet| -> ComponentSet {
        let mut out = ComponentSet::default();
        out.accept_scores = set.accept_scores;
        for (u, v, w) in set.triples {
            let mut a = &sqrt_a * u;
            let mut b = &sqrt_b * v;
            let mut c = &sqrt_c * w;
            flip_nonnegative_sum(&mut a);
            flip_nonnegative_sum(&mut b);
            flip_nonnegative_sum(&mut c);
            out.triples.push((a, b, c));
        }
        out
    };

    match orthogonal_decompose(&whitened, params) {
        Ok(set) => Ok(map_back(set)),
        Err(Error::PartialDecomposition {
            found,
            target,
            trials,
        }) => Err(Error::PartialDecomposition {
            found: map_back(found),
            target,
            trials,
        }),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use approx::assert_relative_eq;

    fn basis(d: usize, i: usize) -> Vector {
        let mut v = Vector::zeros(d);
        v[i] = 1.0;
        v
    }

    #[test]
    fn contract_mode3_cases() {
        let mut t = Tensor3::zeros(3, 3, 3);
        t.add_rank1(1.0, &basis(3, 0), &basis(3, 0), &basis(3, 0));
        let m = contract_mode3(&t, &basis(3, 0)).unwrap();
        assert_relative_eq!(m[(0, 0)], 1.0);
        assert_relative_eq!(m.iter().map(|x| x * x).sum::<f64>(), 1.0);

        let zero_g = Vector::zeros(3);
        let mz = contract_mode3(&t, &zero_g).unwrap();
        assert!(mz.iter().all(|&x| x == 0.0));

        assert!(contract_mode3(&t, &Vector::zeros(4)).is_err());
    }

    #[test]
    fn contract_modes12_cases() {
        let mut t = Tensor3::zeros(2, 3, 4);
        let a = basis(2, 1);
        let b = basis(3, 2);
        let c = Vector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        t.add_rank1(1.5, &a, &b, &c);
        let z = contract_modes12(&t, &a, &b).unwrap();
        for k in 0..4 {
            assert_relative_eq!(z[k], 1.5 * c[k], epsilon = 1e-12);
        }
        assert!(contract_modes12(&t, &basis(3, 0), &b).is_err());
    }

    #[test]
    fn contractions_match_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor3::from_fn(4, 5, 6, |_, _, _| rng.gen::<f64>() - 0.5);
        let g = Vector::from_fn(6, |_, _| rng.gen::<f64>() - 0.5);
        let u = Vector::from_fn(4, |_, _| rng.gen::<f64>() - 0.5);
        let v = Vector::from_fn(5, |_, _| rng.gen::<f64>() - 0.5);

        let m = contract_mode3(&t, &g).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..6 {
                    acc += t.get(i, j, k) * g[k];
                }
                assert_relative_eq!(m[(i, j)], acc, epsilon = 1e-12);
            }
        }

        let z = contract_modes12(&t, &u, &v).unwrap();
        for k in 0..6 {
            let mut acc = 0.0;
            for i in 0..4 {
                for j in 0..5 {
                    acc += t.get(i, j, k) * u[i] * v[j];
                }
            }
            assert_relative_eq!(z[k], acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn decompose_two_axis_components() {
        let mut t = Tensor3::zeros(3, 3, 3);
        t.add_rank1(1.0, &basis(3, 0), &basis(3, 0), &basis(3, 0));
        t.add_rank1(1.0, &basis(3, 1), &basis(3, 1), &basis(3, 1));
        let mut params = DecompParams::new(2, 77);
        params.zeta = 0.05;
        let set = orthogonal_decompose(&t, &params).unwrap();
        assert_eq!(set.len(), 2);
        for score in &set.accept_scores {
            assert!(*score >= 0.999, "score {score} too small");
        }
        // each recovered u is +-e0 or +-e1
        let mut hits = [false, false];
        for (u, _, _) in &set.triples {
            for i in 0..2 {
                if sign_aligned_distance(u, &basis(3, i)) < 1e-6 {
                    hits[i] = true;
                }
            }
        }
        assert!(hits[0] && hits[1], "did not recover both axis components");
    }

    #[test]
    fn decompose_zero_tensor_is_empty_partial() {
        let t = Tensor3::zeros(4, 4, 4);
        let params = DecompParams::new(2, 5);
        match orthogonal_decompose(&t, &params) {
            Err(Error::PartialDecomposition { found, target, .. }) => {
                assert_eq!(target, 2);
                assert!(found.is_empty());
            }
            other => panic!("expected partial-result error, got {other:?}"),
        }
    }

    #[test]
    fn decompose_respects_explicit_trial_cap() {
        let t = Tensor3::zeros(4, 4, 4);
        let mut params = DecompParams::new(1, 5);
        params.max_trials = Some(3);
        match orthogonal_decompose(&t, &params) {
            Err(Error::PartialDecomposition { trials, .. }) => assert_eq!(trials, 3),
            other => panic!("expected partial-result error, got {other:?}"),
        }
    }

    #[test]
    fn decompose_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let t = Tensor3::from_fn(5, 5, 5, |_, _, _| rng.gen::<f64>() * 0.01)
            .mode1_multiply(&Matrix::identity(5, 5));
        let mut base = Tensor3::zeros(5, 5, 5);
        base.add_rank1(1.0, &basis(5, 2), &basis(5, 2), &basis(5, 2));
        let t = &base + &t;
        let params = DecompParams::new(1, 9);
        let a = orthogonal_decompose(&t, &params).unwrap();
        let b = orthogonal_decompose(&t, &params).unwrap();
        assert_eq!(a.triples[0].0, b.triples[0].0);
        assert_eq!(a.accept_scores, b.accept_scores);
    }

    #[test]
    fn whitened_decompose_rejects_rank_mismatch() {
        let t = Tensor3::zeros(4, 4, 4);
        let white = WhiteningSet::from_matrices(
            Matrix::identity(4, 4),
            Matrix::identity(4, 4),
            Matrix::identity(4, 4),
            3,
        )
        .unwrap();
        let params = DecompParams::new(2, 5);
        assert!(matches!(
            whitened_decompose(&t, &white, &params),
            Err(Error::InvalidInput(_))
        ));
    }
}
