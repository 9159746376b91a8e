//! Closed-form linear-Gaussian chains `z -> h -> x` with an optional direct
//! path `z -> x`:
//!
//! ```text
//! z ~ N(0, I),  h = B z + e_h,  x = C h + D z + e_x,
//! e_h ~ N(0, s_h^2 I),  e_x ~ N(0, s_x^2 I)
//! ```
//!
//! Marginally `x | z ~ N(A z, Psi)` with `A = C B + D` and
//! `Psi = s_h^2 C C^T + s_x^2 I`, so posteriors, marginal likelihoods and
//! mutual informations are all available exactly.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::distributions::GaussianParams;
use crate::rng;
use crate::training::LatentLikelihood;
use crate::{Error, Result};

const JITTER: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    /// `d_h x D`.
    pub b: DMatrix<f64>,
    /// `d_x x d_h`.
    pub c: DMatrix<f64>,
    /// `d_x x D`; zero for the plain chain.
    pub d_skip: DMatrix<f64>,
    pub s_h2: f64,
    pub s_x2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pair {
    XZ,
    HZ,
    XH,
}

/// Cholesky factor of a symmetric positive-definite matrix, retrying once with
/// a small diagonal jitter.
fn spd_factor(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let scale = m.diagonal().abs().max().max(1.0);
    let jittered = m + DMatrix::identity(m.nrows(), m.ncols()) * (JITTER * scale);
    Cholesky::new(jittered).ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

fn log_det(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let l = spd_factor(m, what)?;
    Ok(2.0 * l.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_vec(rows, cols, rng::standard_normals(rng, rows * cols))
}

impl LinearGaussianModel {
    pub fn new(b: DMatrix<f64>, c: DMatrix<f64>, d_skip: DMatrix<f64>, s_h2: f64, s_x2: f64) -> Result<Self> {
        if c.ncols() != b.nrows() || d_skip.nrows() != c.nrows() || d_skip.ncols() != b.ncols() {
            return Err(Error::InvalidInput(format!(
                "incompatible shapes: B {}x{}, C {}x{}, D {}x{}",
                b.nrows(),
                b.ncols(),
                c.nrows(),
                c.ncols(),
                d_skip.nrows(),
                d_skip.ncols()
            )));
        }
        if !(s_h2 > 0.0 && s_x2 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "noise variances must be positive (s_h^2 = {s_h2}, s_x^2 = {s_x2})"
            )));
        }
        Ok(Self {
            b,
            c,
            d_skip,
            s_h2,
            s_x2,
        })
    }

    /// The chain without the direct `z -> x` path.
    pub fn plain(b: DMatrix<f64>, c: DMatrix<f64>, s_h2: f64, s_x2: f64) -> Result<Self> {
        let d = DMatrix::zeros(c.nrows(), b.ncols());
        Self::new(b, c, d, s_h2, s_x2)
    }

    /// Entries of `B` and `C` standard normal, noise variances uniform on `[0.1, 2]`.
    pub fn random_plain(rng: &mut impl Rng, d_x: usize, d_h: usize, d_z: usize) -> Self {
        let b = gaussian_matrix(rng, d_h, d_z);
        let c = gaussian_matrix(rng, d_x, d_h);
        let s_h2 = rng.random_range(0.1..=2.0);
        let s_x2 = rng.random_range(0.1..=2.0);
        Self::plain(b, c, s_h2, s_x2).expect("consistent shapes")
    }

    pub fn with_skip(&self, d_skip: DMatrix<f64>) -> Result<Self> {
        Self::new(self.b.clone(), self.c.clone(), d_skip, self.s_h2, self.s_x2)
    }

    pub fn latent_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.b.nrows()
    }

    pub fn data_dim(&self) -> usize {
        self.c.nrows()
    }

    /// `A = C B + D`: the mean map from `z` to `x`.
    pub fn loading(&self) -> DMatrix<f64> {
        &self.c * &self.b + &self.d_skip
    }

    /// `Cov(x | z) = s_h^2 C C^T + s_x^2 I`.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        &self.c * self.c.transpose() * self.s_h2 + DMatrix::identity(self.data_dim(), self.data_dim()) * self.s_x2
    }

    pub fn cov_hh(&self) -> DMatrix<f64> {
        &self.b * self.b.transpose() + DMatrix::identity(self.hidden_dim(), self.hidden_dim()) * self.s_h2
    }

    pub fn cov_xx(&self) -> DMatrix<f64> {
        let a = self.loading();
        &a * a.transpose() + self.noise_cov()
    }

    /// `Cov(x, h) = C Cov(h) + D B^T`.
    pub fn cov_xh(&self) -> DMatrix<f64> {
        &self.c * self.cov_hh() + &self.d_skip * self.b.transpose()
    }

    /// `I(a; b) = 0.5 (ln det Cov(a) - ln det Cov(a | b))` in nats.
    pub fn exact_mi(&self, pair: Pair) -> Result<f64> {
        let d = self.latent_dim();
        let mi = match pair {
            Pair::XZ => {
                // 0.5 ln det(I + A^T Psi^-1 A), identical to the covariance form.
                let a = self.loading();
                let psi = spd_factor(&self.noise_cov(), "Cov(x | z)")?;
                let m = DMatrix::identity(d, d) + a.transpose() * psi.solve(&a);
                0.5 * log_det(&m, "I + A^T Psi^-1 A")?
            }
            Pair::HZ => {
                let m = DMatrix::identity(d, d) + self.b.transpose() * &self.b / self.s_h2;
                0.5 * log_det(&m, "I + B^T B / s_h^2")?
            }
            Pair::XH => {
                let sxx = self.cov_xx();
                let sxh = self.cov_xh();
                let shh = spd_factor(&self.cov_hh(), "Cov(h)")?;
                let cond = &sxx - &sxh * shh.solve(&sxh.transpose());
                0.5 * (log_det(&sxx, "Cov(x)")? - log_det(&cond, "Cov(x | h)")?)
            }
        };
        Ok(mi.max(0.0))
    }

    /// Posterior precision `I + A^T Psi^-1 A`.
    fn posterior_precision(&self) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let a = self.loading();
        let psi = spd_factor(&self.noise_cov(), "Cov(x | z)")?;
        let psi_inv_a = psi.solve(&a);
        let d = self.latent_dim();
        Ok((DMatrix::identity(d, d) + a.transpose() * &psi_inv_a, psi_inv_a))
    }

    /// Mean and covariance of `p(z | x)`.
    pub fn exact_posterior(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if x.len() != self.data_dim() {
            return Err(Error::InvalidInput(format!("x has {} entries, model has {}", x.len(), self.data_dim())));
        }
        let (prec, psi_inv_a) = self.posterior_precision()?;
        let f = spd_factor(&prec, "posterior precision")?;
        let cov = f.inverse();
        let mean = &cov * (psi_inv_a.transpose() * x);
        Ok((mean, cov))
    }

    /// `log p(x)` under `x ~ N(0, Cov(x))`.
    pub fn exact_log_marginal(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.data_dim() {
            return Err(Error::InvalidInput(format!("x has {} entries, model has {}", x.len(), self.data_dim())));
        }
        let sxx = self.cov_xx();
        let f = spd_factor(&sxx, "Cov(x)")?;
        let quad = x.dot(&f.solve(x));
        let ld = 2.0 * f.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (self.data_dim() as f64 * LN_2PI + ld + quad))
    }

    /// `log p(x | z)`.
    pub fn log_likelihood(&self, x: &DVector<f64>, z: &DVector<f64>) -> Result<f64> {
        let psi = self.noise_cov();
        let f = spd_factor(&psi, "Cov(x | z)")?;
        let r = x - self.loading() * z;
        let ld = 2.0 * f.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (self.data_dim() as f64 * LN_2PI + ld + r.dot(&f.solve(&r))))
    }

    /// The same model with latent space rotated by `V` (`z = V z'`), where `V`
    /// diagonalizes the posterior covariance. Returns the rotated model and `V`.
    pub fn diagonalized(&self) -> Result<(Self, DMatrix<f64>)> {
        let (prec, _) = self.posterior_precision()?;
        let v = SymmetricEigen::new(prec).eigenvectors;
        Ok((self.rotated(&v)?, v))
    }

    /// `B V`, `D V`: the model in coordinates `z' = V^T z` for orthogonal `V`.
    pub fn rotated(&self, v: &DMatrix<f64>) -> Result<Self> {
        Self::new(&self.b * v, self.c.clone(), &self.d_skip * v, self.s_h2, self.s_x2)
    }

    /// Diagonal Gaussian posteriors (`mean`, `ln diag(cov)`) for rows of `xs`.
    /// Exact only when the posterior covariance is diagonal, e.g. after
    /// [`Self::diagonalized`].
    pub fn diagonal_posteriors(&self, xs: &[DVector<f64>]) -> Result<GaussianParams> {
        let d = self.latent_dim();
        let (prec, psi_inv_a) = self.posterior_precision()?;
        let cov = spd_factor(&prec, "posterior precision")?.inverse();
        let gain = &cov * psi_inv_a.transpose();
        let logvar: Vec<f64> = cov.diagonal().iter().map(|v| v.ln()).collect();
        let mut means = Vec::with_capacity(xs.len() * d);
        let mut logvars = Vec::with_capacity(xs.len() * d);
        for x in xs {
            means.extend((&gain * x).iter());
            logvars.extend_from_slice(&logvar);
        }
        GaussianParams::new(Tensor::matrix(xs.len(), d, means)?, Tensor::matrix(xs.len(), d, logvars)?)
    }

    /// Ancestral draws of `x`.
    pub fn sample_x(&self, rng: &mut impl Rng, n: usize) -> Vec<DVector<f64>> {
        let (sh, sx) = (self.s_h2.sqrt(), self.s_x2.sqrt());
        (0..n)
            .map(|_| {
                let z = DVector::from_vec(rng::standard_normals(rng, self.latent_dim()));
                let eh = DVector::from_vec(rng::standard_normals(rng, self.hidden_dim()));
                let ex = DVector::from_vec(rng::standard_normals(rng, self.data_dim()));
                let h = &self.b * &z + eh * sh;
                &self.c * h + &self.d_skip * z + ex * sx
            })
            .collect()
    }
}

/// Gaussian likelihood `log N(x; A z, Psi)` of one observation, on the tape.
pub struct LinearGaussianLikelihood {
    at: Tensor,
    x: Tensor,
    /// `L` with `L L^T = Psi^-1`.
    whiten: Tensor,
    log_norm: f64,
    latent_dim: usize,
}

fn to_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let data: Vec<f64> = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
    Ok(Tensor::matrix(m.nrows(), m.ncols(), data)?)
}

impl LinearGaussianLikelihood {
    pub fn new(model: &LinearGaussianModel, x: &DVector<f64>) -> Result<Self> {
        let psi = model.noise_cov();
        let f = spd_factor(&psi, "Cov(x | z)")?;
        let psi_inv = f.inverse();
        let w = spd_factor(&psi_inv, "Cov(x | z)^-1")?.l();
        let ld = 2.0 * f.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            at: to_tensor(&model.loading().transpose())?,
            x: Tensor::vector(x.iter().copied().collect())?,
            whiten: to_tensor(&w)?,
            log_norm: -0.5 * (model.data_dim() as f64 * LN_2PI + ld),
            latent_dim: model.latent_dim(),
        })
    }
}

impl LatentLikelihood for LinearGaussianLikelihood {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn log_likelihood<'t>(&self, z: &Var<'t>) -> Result<Var<'t>> {
        let tape = z.tape();
        let mean = z.matmul(&tape.constant(self.at.clone()))?;
        let r = mean.neg()?.add(&tape.constant(self.x.clone()))?;
        let w = r.matmul(&tape.constant(self.whiten.clone()))?;
        Ok(w.mul(&w)?.sum_axis(1)?.scale(-0.5)?.shift(self.log_norm)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremRow {
    pub config_id: usize,
    pub i_plain: f64,
    pub i_skip: f64,
    /// `i_skip - i_plain`; negative values contradict the ordering.
    pub margin: f64,
}

impl TheoremRow {
    pub fn holds(&self) -> bool {
        self.margin >= 0.0
    }
}

/// Exact `I(x; z)` of `base` against the same chain with each direct path added.
pub fn theorem1_check(base: &LinearGaussianModel, skips: &[DMatrix<f64>]) -> Result<Vec<TheoremRow>> {
    if base.d_skip.iter().any(|&v| v != 0.0) {
        return Err(Error::InvalidInput("the base chain must not have a direct z -> x path".into()));
    }
    let i_plain = base.exact_mi(Pair::XZ)?;
    skips
        .iter()
        .enumerate()
        .map(|(k, d)| {
            let i_skip = base.with_skip(d.clone())?.exact_mi(Pair::XZ)?;
            Ok(TheoremRow {
                config_id: k,
                i_plain,
                i_skip,
                margin: i_skip - i_plain,
            })
        })
        .collect()
}

/// A random chain with `d_x, d_h, D` in `1..=8` and one standard-normal
/// direct path: `(plain, skip)`.
pub fn random_pair(rng: &mut impl Rng) -> (LinearGaussianModel, DMatrix<f64>) {
    let (dx, dh, dz) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8));
    let base = LinearGaussianModel::random_plain(rng, dx, dh, dz);
    let d = gaussian_matrix(rng, dx, dz);
    (base, d)
}

/// `n` draws of [`random_pair`], each reported as a [`TheoremRow`].
pub fn theorem1_sweep(n: usize, seed: u64) -> Result<Vec<TheoremRow>> {
    let mut rng = rng::substream(seed, "oracle-sweep");
    (0..n)
        .map(|k| {
            let (base, d) = random_pair(&mut rng);
            let mut row = theorem1_check(&base, &[d])?.remove(0);
            row.config_id = k;
            Ok(row)
        })
        .collect()
}

/// The Monte-Carlo MI estimate on one chain against its exact value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiValidationRow {
    pub model_id: usize,
    pub d_x: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub exact: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub error: f64,
}

impl MiValidationRow {
    pub fn holds(&self) -> bool {
        self.error.abs() <= self.tolerance
    }
}

/// Feeds the exact posterior of `n_models` random skip chains (those of
/// [`random_pair`] whose `I(x; z) <= max_mi`) to the aggregated-posterior
/// estimator. Each row passes if the error is within
/// `max(3 stderr, abs_tolerance)`.
pub fn mi_validation(
    n_models: usize,
    n_points: usize,
    samples_per_point: usize,
    max_mi: f64,
    abs_tolerance: f64,
    seed: u64,
) -> Result<Vec<MiValidationRow>> {
    let mut model_rng = rng::substream(seed, "mi-validation-models");
    let mut data_rng = rng::substream(seed, "mi-validation-data");
    let mut rows = Vec::with_capacity(n_models);
    let mut draws = 0usize;
    while rows.len() < n_models {
        draws += 1;
        if draws > 1000 * n_models.max(1) {
            return Err(Error::InvalidInput(format!("no random chain has I(x; z) <= {max_mi}")));
        }
        let (base, d) = random_pair(&mut model_rng);
        let model = base.with_skip(d)?;
        let exact = model.exact_mi(Pair::XZ)?;
        if exact > max_mi {
            continue;
        }
        let (model, _) = model.diagonalized()?;
        let xs = model.sample_x(&mut data_rng, n_points);
        let q = model.diagonal_posteriors(&xs)?;
        let est = crate::metrics::mutual_information(&q, n_points, samples_per_point, &mut data_rng)?;
        rows.push(MiValidationRow {
            model_id: rows.len(),
            d_x: model.data_dim(),
            d_h: model.hidden_dim(),
            d_z: model.latent_dim(),
            exact,
            estimate: est.mi,
            stderr: est.stderr,
            tolerance: (3.0 * est.stderr).max(abs_tolerance),
            error: est.mi - exact,
        });
    }
    Ok(rows)
}

pub fn write_mi_validation_csv(rows: &[MiValidationRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["model_id", "d_x", "d_h", "d_z", "exact", "estimate", "stderr", "tolerance", "error"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_theorem_csv(rows: &[TheoremRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(["config_id", "i_plain", "i_skip", "margin"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::metrics::mutual_information;
    use crate::training::{refine_variational, RefineConfig, RefineNoise};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn independent_chain_has_zero_information() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = gaussian_matrix(&mut rng, 3, 2);
        let model = LinearGaussianModel::plain(b, DMatrix::zeros(4, 3), 0.5, 1.0).unwrap();
        assert_eq!(model.exact_mi(Pair::XZ).unwrap(), 0.0);
        let (mean, cov) = model.exact_posterior(&DVector::from_element(4, 2.0)).unwrap();
        assert!(mean.norm() < 1e-15);
        assert!((cov - DMatrix::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn one_dimensional_examples() {
        let chain = LinearGaussianModel::plain(m1(1.0), m1(1.0), 1e-12, 1.0).unwrap();
        assert!((chain.exact_mi(Pair::XZ).unwrap() - 0.5 * 2f64.ln()).abs() < 1e-9);

        // x = z + noise with unit variance (h carries z almost exactly).
        let (mean, cov) = chain.exact_posterior(&DVector::from_element(1, 1.4)).unwrap();
        assert!((mean[0] - 0.7).abs() < 1e-9);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-9);

        let lm = chain.exact_log_marginal(&DVector::from_element(1, 0.0)).unwrap();
        assert!((lm + 0.5 * (4.0 * std::f64::consts::PI).ln()).abs() < 1e-9);
        assert!((lm + 1.26551).abs() < 1e-5);
    }

    #[test]
    fn skip_strength_monotonicity_in_one_dimension() {
        let base = LinearGaussianModel::plain(m1(0.8), m1(1.3), 0.4, 0.7).unwrap();
        let mut prev = base.exact_mi(Pair::XZ).unwrap();
        for alpha in [0.5, 1.0, 1.5, 2.0, 4.0] {
            let i = base.with_skip(m1(0.6 * alpha)).unwrap().exact_mi(Pair::XZ).unwrap();
            assert!(i > prev);
            prev = i;
        }
    }

    #[test]
    fn zero_skip_is_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = LinearGaussianModel::random_plain(&mut rng, 4, 3, 2);
        let rows = theorem1_check(&base, &[DMatrix::zeros(4, 2)]).unwrap();
        assert_eq!(rows[0].margin, 0.0);
        assert!(theorem1_check(&base.with_skip(DMatrix::from_element(4, 2, 1.0)).unwrap(), &[]).is_err());
    }

    #[test]
    fn sweep_is_seeded_and_reports_every_config() {
        let a = theorem1_sweep(30, 4).unwrap();
        assert_eq!(a, theorem1_sweep(30, 4).unwrap());
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(|r| r.i_plain >= 0.0 && r.i_skip >= 0.0));
        assert!(theorem1_sweep(0, 4).unwrap().is_empty());
    }

    fn random_model(seed: u64, skip: bool) -> LinearGaussianModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dx = rng.random_range(1..=6);
        let dh = rng.random_range(1..=6);
        let dz = rng.random_range(1..=6);
        let m = LinearGaussianModel::random_plain(&mut rng, dx, dh, dz);
        if skip {
            let d = gaussian_matrix(&mut rng, dx, dz);
            m.with_skip(d).unwrap()
        } else {
            m
        }
    }

    fn random_orthogonal(seed: u64, n: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        gaussian_matrix(&mut rng, n, n).qr().q()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn data_processing_inequality(seed in 0u64..10_000) {
            let m = random_model(seed, false);
            let xz = m.exact_mi(Pair::XZ).unwrap();
            let hz = m.exact_mi(Pair::HZ).unwrap();
            let xh = m.exact_mi(Pair::XH).unwrap();
            prop_assert!(xz <= hz.min(xh) * (1.0 + 1e-12) + 1e-12, "{} {} {}", xz, hz, xh);
        }

        #[test]
        fn mi_and_marginal_are_rotation_invariant(seed in 0u64..10_000) {
            let m = random_model(seed, true);
            let v = random_orthogonal(seed + 1, m.latent_dim());
            let r = m.rotated(&v).unwrap();
            for pair in [Pair::XZ, Pair::HZ, Pair::XH] {
                let (a, b) = (m.exact_mi(pair).unwrap(), r.exact_mi(pair).unwrap());
                prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
            }
            let x = m.sample_x(&mut ChaCha8Rng::seed_from_u64(seed), 1).remove(0);
            let (a, b) = (m.exact_log_marginal(&x).unwrap(), r.exact_log_marginal(&x).unwrap());
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }

        #[test]
        fn posterior_shrinks_and_marginal_bounds_elbo(seed in 0u64..10_000) {
            let m = random_model(seed, true);
            let x = m.sample_x(&mut ChaCha8Rng::seed_from_u64(seed), 1).remove(0);
            let (mean, cov) = m.exact_posterior(&x).unwrap();
            let d = m.latent_dim();
            let gap = DMatrix::identity(d, d) - &cov;
            prop_assert!(SymmetricEigen::new(gap).eigenvalues.iter().all(|&e| e >= -1e-12));

            // Closed-form ELBO for a mismatched diagonal Gaussian.
            let mu = &mean + DVector::from_element(d, 0.3);
            let var = DVector::from_iterator(d, cov.diagonal().iter().map(|v| v * 1.7));
            let a = m.loading();
            let psi = m.noise_cov();
            let pf = Cholesky::new(psi.clone()).unwrap();
            let s = DMatrix::from_diagonal(&var);
            let r = &x - &a * &mu;
            let ld = 2.0 * pf.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let expected_ll = -0.5 * (m.data_dim() as f64 * LN_2PI + ld + r.dot(&pf.solve(&r))
                + (a.transpose() * pf.solve(&(&a * &s))).trace());
            let kl = 0.5 * (mu.dot(&mu) + var.sum() - var.iter().map(|v| v.ln()).sum::<f64>() - d as f64);
            prop_assert!(m.exact_log_marginal(&x).unwrap() >= expected_ll - kl);
        }
    }

    #[test]
    fn diagonalized_posterior_is_diagonal_and_exact() {
        let m = random_model(7, true);
        let (r, _) = m.diagonalized().unwrap();
        let x = r.sample_x(&mut ChaCha8Rng::seed_from_u64(1), 1).remove(0);
        let (mean, cov) = r.exact_posterior(&x).unwrap();
        let off: f64 = (0..cov.nrows()).flat_map(|i| (0..cov.ncols()).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| cov[(i, j)].abs()).sum();
        assert!(off < 1e-10);
        let q = r.diagonal_posteriors(&[x]).unwrap();
        for k in 0..r.latent_dim() {
            assert!((q.mean.row(0)[k] - mean[k]).abs() < 1e-10);
            assert!((q.logvar.row(0)[k] - cov[(k, k)].ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn tape_likelihood_matches_closed_form() {
        let m = random_model(9, true);
        let x = m.sample_x(&mut ChaCha8Rng::seed_from_u64(2), 1).remove(0);
        let lik = LinearGaussianLikelihood::new(&m, &x).unwrap();
        let z = DVector::from_vec(rng::standard_normals(&mut ChaCha8Rng::seed_from_u64(3), m.latent_dim()));
        let tape = Tape::new();
        let zv = tape.constant(Tensor::matrix(1, m.latent_dim(), z.iter().copied().collect()).unwrap());
        let got = lik.log_likelihood(&zv).unwrap().value().data()[0];
        assert!((got - m.log_likelihood(&x, &z).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn exact_posterior_is_a_refinement_fixed_point() {
        for seed in 0..5 {
            let (m, _) = random_model(20 + seed, true).diagonalized().unwrap();
            let x = m.sample_x(&mut ChaCha8Rng::seed_from_u64(seed), 1).remove(0);
            let q = m.diagonal_posteriors(std::slice::from_ref(&x)).unwrap();
            let lik = LinearGaussianLikelihood::new(&m, &x).unwrap();
            let cfg = RefineConfig { steps: 10, step_size: 1.0, noise: RefineNoise::SigmaPoints };
            let r = refine_variational(&lik, &q, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let moved = r.params.mean.data().iter().zip(q.mean.data())
                .chain(r.params.logvar.data().iter().zip(q.logvar.data()))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(moved < 1e-8, "seed {seed}: moved {moved}");
        }
    }

    #[test]
    fn mc_estimator_tracks_exact_mi() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = LinearGaussianModel::random_plain(&mut rng, 4, 3, 2);
        let (m, _) = base.diagonalized().unwrap();
        let exact = m.exact_mi(Pair::XZ).unwrap();
        let xs = m.sample_x(&mut rng, 800);
        let q = m.diagonal_posteriors(&xs).unwrap();
        let est = mutual_information(&q, 800, 4, &mut rng).unwrap();
        assert!((est.mi - exact).abs() <= (3.0 * est.stderr).max(0.05), "{} vs {exact}", est.mi);
    }

    #[test]
    fn estimator_bias_shrinks_with_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = loop {
            let (base, d) = random_pair(&mut rng);
            let m = base.with_skip(d).unwrap();
            let mi = m.exact_mi(Pair::XZ).unwrap();
            if (4.0..6.0).contains(&mi) {
                break m.diagonalized().unwrap().0;
            }
        };
        let exact = model.exact_mi(Pair::XZ).unwrap();
        let mut mean_error = |n: usize| {
            let reps = 4;
            (0..reps)
                .map(|_| {
                    let q = model.diagonal_posteriors(&model.sample_x(&mut rng, n)).unwrap();
                    mutual_information(&q, n, 1, &mut rng).unwrap().mi - exact
                })
                .sum::<f64>()
                / reps as f64
        };
        let (e500, e2000) = (mean_error(500), mean_error(2000));
        assert!(e500 < 0.0 && e2000 < 0.0, "{e500} {e2000}");
        let ratio = e2000 / e500;
        assert!((0.25..=0.75).contains(&ratio), "{e500} -> {e2000}");
    }

    #[test]
    fn validation_rows_respect_the_cap_and_seed() {
        let a = mi_validation(3, 300, 2, 1.5, 0.05, 4).unwrap();
        assert_eq!(a, mi_validation(3, 300, 2, 1.5, 0.05, 4).unwrap());
        for r in &a {
            assert!(r.exact <= 1.5);
            assert!(r.estimate <= (300f64).ln() + 1e-12);
            assert_eq!(r.tolerance, (3.0 * r.stderr).max(0.05));
        }
        assert!(mi_validation(0, 300, 2, 1.5, 0.05, 4).unwrap().is_empty());
    }
}
