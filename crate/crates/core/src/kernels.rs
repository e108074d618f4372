//! Kernel functions and Gram matrices.
//!
//! All stationary kernels are written in terms of the Euclidean distance
//! `r = ||x - x'||` scaled by the length scale. Matérn kernels use the closed
//! forms for half-integer smoothness; `nu = inf` is the RBF kernel.

use nalgebra::{DMatrix, Dim, Matrix, RawStorage, U1};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
    Infinity,
}

impl MaternNu {
    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
            MaternNu::Infinity => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    /// `exp(-r^2 / (2 l^2))`
    Rbf,
    /// `x . x' / (2 l^2) + 1`
    Linear,
    Matern(MaternNu),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub length_scale: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, length_scale: f64) -> Result<Self> {
        let spec = KernelSpec {
            family,
            length_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn rbf(length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Rbf, length_scale)
    }

    pub fn linear(length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Linear, length_scale)
    }

    pub fn matern(nu: MaternNu, length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern(nu), length_scale)
    }

    /// RBF kernel with the square-root-of-dimension length scale.
    pub fn rbf_for_dim(dim: usize) -> Result<Self> {
        Self::rbf((dim.max(1) as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.length_scale > 0.0 && self.length_scale.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidLengthScale(self.length_scale))
        }
    }

    /// Evaluates `k(x, x2)`.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        self.validate()?;
        if x.len() != x2.len() {
            return Err(Error::DimensionMismatch(format!(
                "kernel arguments have lengths {} and {}",
                x.len(),
                x2.len()
            )));
        }
        let (sq, dot) = x
            .iter()
            .zip(x2)
            .fold((0.0, 0.0), |(sq, dot), (a, b)| {
                let d = a - b;
                (sq + d * d, dot + a * b)
            });
        Ok(self.eval_parts(sq, dot))
    }

    fn eval_rows<C1, C2, S1, S2>(&self, x: &Matrix<f64, U1, C1, S1>, x2: &Matrix<f64, U1, C2, S2>) -> f64
    where
        C1: Dim,
        C2: Dim,
        S1: RawStorage<f64, U1, C1>,
        S2: RawStorage<f64, U1, C2>,
    {
        let mut sq = 0.0;
        let mut dot = 0.0;
        for (a, b) in x.iter().zip(x2.iter()) {
            let d = a - b;
            sq += d * d;
            dot += a * b;
        }
        self.eval_parts(sq, dot)
    }

    fn eval_parts(&self, sq_dist: f64, dot: f64) -> f64 {
        let l = self.length_scale;
        match self.family {
            KernelFamily::Linear => dot / (2.0 * l * l) + 1.0,
            KernelFamily::Rbf | KernelFamily::Matern(MaternNu::Infinity) => {
                (-sq_dist.max(0.0) / (2.0 * l * l)).exp()
            }
            KernelFamily::Matern(nu) => {
                let t = sq_dist.max(0.0).sqrt() / l;
                if t == 0.0 {
                    return 1.0;
                }
                match nu {
                    MaternNu::Half => (-t).exp(),
                    MaternNu::ThreeHalves => {
                        let s = 3f64.sqrt() * t;
                        (1.0 + s) * (-s).exp()
                    }
                    MaternNu::FiveHalves => {
                        let s = 5f64.sqrt() * t;
                        (1.0 + s + 5.0 * t * t / 3.0) * (-s).exp()
                    }
                    MaternNu::Infinity => unreachable!(),
                }
            }
        }
    }
}

/// Kernel evaluations between two sample sets.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    /// Built from a single sample set; entries are mirrored across the diagonal.
    pub symmetric: bool,
}

impl GramMatrix {
    pub fn new(entries: DMatrix<f64>, symmetric: bool) -> Self {
        GramMatrix { entries, symmetric }
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }

    pub fn scaled(&self, factor: f64) -> GramMatrix {
        GramMatrix::new(&self.entries * factor, self.symmetric)
    }
}

impl std::ops::Deref for GramMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.entries
    }
}

/// Builds the Gram matrix `K[i][j] = k(x_i, x2_j)` over sample rows.
///
/// Without `x2` the result is symmetric; only the upper triangle is evaluated
/// and mirrored so the transpose is bit-identical.
pub fn gram(spec: &KernelSpec, x: &DMatrix<f64>, x2: Option<&DMatrix<f64>>) -> Result<GramMatrix> {
    spec.validate()?;
    if x.nrows() == 0 {
        return Err(Error::Empty("gram: sample set has no rows"));
    }
    match x2 {
        None => {
            let n = x.nrows();
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                let xi = x.row(i);
                for j in i..n {
                    let v = spec.eval_rows(&xi, &x.row(j));
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            Ok(GramMatrix::new(k, true))
        }
        Some(x2) => {
            if x2.nrows() == 0 {
                return Err(Error::Empty("gram: second sample set has no rows"));
            }
            if x.ncols() != x2.ncols() {
                return Err(Error::DimensionMismatch(format!(
                    "gram: sample dimensions {} and {}",
                    x.ncols(),
                    x2.ncols()
                )));
            }
            let k = DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
                spec.eval_rows(&x.row(i), &x2.row(j))
            });
            Ok(GramMatrix::new(k, false))
        }
    }
}

/// Elementwise product of two equally shaped Gram matrices.
pub fn hadamard(k: &GramMatrix, k2: &GramMatrix) -> Result<GramMatrix> {
    if k.shape() != k2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "hadamard: shapes {:?} and {:?}",
            k.shape(),
            k2.shape()
        )));
    }
    Ok(GramMatrix::new(
        k.entries.component_mul(&k2.entries),
        k.symmetric && k2.symmetric,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0))
    }

    // K_nu(z) = int_0^inf exp(-z cosh t) cosh(nu t) dt, trapezoid on a truncated range.
    fn bessel_k(nu: f64, z: f64) -> f64 {
        let h = 1e-4;
        let steps = 200_000;
        let f = |t: f64| (-z * t.cosh()).exp() * (nu * t).cosh();
        let mut s = 0.5 * (f(0.0) + f(steps as f64 * h));
        for i in 1..steps {
            s += f(i as f64 * h);
        }
        s * h
    }

    fn matern_general(nu: f64, gamma_nu: f64, r: f64, l: f64) -> f64 {
        let z = (2.0 * nu).sqrt() * r / l;
        2f64.powf(1.0 - nu) / gamma_nu * z.powf(nu) * bessel_k(nu, z)
    }

    #[test]
    fn rbf_at_zero_distance_is_one() {
        for l in [0.1, 1.0, 7.5] {
            let k = KernelSpec::rbf(l).unwrap();
            assert_eq!(k.eval(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 1.0);
        }
    }

    #[test]
    fn linear_at_origin_is_bias_only() {
        let k = KernelSpec::linear(2.0).unwrap();
        assert_eq!(k.eval(&[0.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn matern_closed_forms_match_bessel_quadrature() {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let cases = [
            (MaternNu::Half, sqrt_pi),
            (MaternNu::ThreeHalves, sqrt_pi / 2.0),
            (MaternNu::FiveHalves, 3.0 * sqrt_pi / 4.0),
        ];
        let l = 1.7;
        for (nu, gamma_nu) in cases {
            let spec = KernelSpec::matern(nu, l).unwrap();
            for r in [0.3, 1.7, 4.0] {
                let closed = spec.eval(&[0.0, 0.0], &[r, 0.0]).unwrap();
                let oracle = matern_general(nu.value(), gamma_nu, r, l);
                assert!((closed - oracle).abs() < 1e-7, "{nu:?} r={r}: {closed} vs {oracle}");
            }
        }
        // distance equal to the length scale
        let spec = KernelSpec::matern(MaternNu::Half, 1.7).unwrap();
        let v = spec.eval(&[0.0], &[1.7]).unwrap();
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn matern_at_zero_distance_is_exactly_one() {
        for nu in [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves] {
            let spec = KernelSpec::matern(nu, 0.5).unwrap();
            assert_eq!(spec.eval(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        }
    }

    #[test]
    fn matern_infinity_equals_rbf() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rbf = KernelSpec::rbf(1.3).unwrap();
        let mat = KernelSpec::matern(MaternNu::Infinity, 1.3).unwrap();
        for _ in 0..100 {
            let a: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let d = rbf.eval(&a, &b).unwrap() - mat.eval(&a, &b).unwrap();
            assert!(d.abs() <= 1e-12);
        }
    }

    #[test]
    fn eval_errors() {
        let k = KernelSpec::rbf(1.0).unwrap();
        assert!(matches!(k.eval(&[1.0], &[1.0, 2.0]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(KernelSpec::rbf(0.0), Err(Error::InvalidLengthScale(_))));
        assert!(matches!(KernelSpec::linear(-1.0), Err(Error::InvalidLengthScale(_))));
        let bad = KernelSpec { family: KernelFamily::Rbf, length_scale: f64::NAN };
        assert!(bad.eval(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn gram_of_identical_rows_is_all_ones() {
        let x = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 0.5, 1.0, 0.5, 1.0]);
        let k = gram(&KernelSpec::rbf(1.0).unwrap(), &x, None).unwrap();
        assert_eq!(k.entries, DMatrix::from_element(3, 3, 1.0));
        assert!(k.symmetric);
    }

    #[test]
    fn linear_gram_on_identity_rows() {
        let x = DMatrix::<f64>::identity(2, 2);
        let k = gram(&KernelSpec::linear(0.5f64.sqrt()).unwrap(), &x, None).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert!((k.entries - expect).amax() < 1e-15);
    }

    #[test]
    fn symmetric_gram_is_bit_exact_transpose_and_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let families = [
            KernelFamily::Rbf,
            KernelFamily::Linear,
            KernelFamily::Matern(MaternNu::Half),
            KernelFamily::Matern(MaternNu::ThreeHalves),
            KernelFamily::Matern(MaternNu::FiveHalves),
        ];
        for (t, fam) in families.iter().cycle().take(20).enumerate() {
            let n = 5 + 2 * t;
            let x = random_matrix(&mut rng, n, 3);
            let k = gram(&KernelSpec::new(*fam, 1.5).unwrap(), &x, None).unwrap();
            assert_eq!(k.entries, k.entries.transpose());
            if !matches!(fam, KernelFamily::Linear) {
                assert!(k.entries.diagonal().iter().all(|&d| d == 1.0));
            }
            let min = SymmetricEigen::new(k.entries.clone()).eigenvalues.min();
            assert!(min >= -1e-8, "{fam:?}: min eig {min}");
        }
    }

    #[test]
    fn cross_gram_matches_pointwise_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 6, 3);
        let spec = KernelSpec::matern(MaternNu::FiveHalves, 0.8).unwrap();
        let k = gram(&spec, &a, Some(&b)).unwrap();
        assert!(!k.symmetric);
        for i in 0..4 {
            for j in 0..6 {
                let ai: Vec<f64> = a.row(i).iter().copied().collect();
                let bj: Vec<f64> = b.row(j).iter().copied().collect();
                assert_eq!(k[(i, j)], spec.eval(&ai, &bj).unwrap());
            }
        }
        let c = random_matrix(&mut rng, 2, 2);
        assert!(gram(&spec, &a, Some(&c)).is_err());
        assert!(gram(&spec, &DMatrix::zeros(0, 3), None).is_err());
    }

    #[test]
    fn hadamard_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 4, 2);
        let k = gram(&KernelSpec::rbf(1.0).unwrap(), &x, None).unwrap();
        let ones = GramMatrix::new(DMatrix::from_element(4, 4, 1.0), true);
        assert_eq!(hadamard(&k, &ones).unwrap(), k);
        let eye = GramMatrix::new(DMatrix::identity(4, 4), true);
        let diag = hadamard(&eye, &k).unwrap();
        assert_eq!(diag.entries, DMatrix::from_diagonal(&k.entries.diagonal()));
        let wrong = GramMatrix::new(DMatrix::zeros(3, 3), true);
        assert!(hadamard(&k, &wrong).is_err());
    }

    #[test]
    fn hadamard_of_psd_pair_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 4, 4);
            let b = random_matrix(&mut rng, 4, 4);
            let p = GramMatrix::new(&a * a.transpose(), true);
            let q = GramMatrix::new(&b * b.transpose(), true);
            let h = hadamard(&p, &q).unwrap();
            let min = SymmetricEigen::new(h.entries.clone()).eigenvalues.min();
            assert!(min >= -1e-10);
        }
    }

    proptest::proptest! {
        #[test]
        fn kernels_are_symmetric_in_arguments(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            l in 0.05f64..10.0,
            which in 0usize..5,
        ) {
            let fam = [
                KernelFamily::Rbf,
                KernelFamily::Linear,
                KernelFamily::Matern(MaternNu::Half),
                KernelFamily::Matern(MaternNu::ThreeHalves),
                KernelFamily::Matern(MaternNu::FiveHalves),
            ][which];
            let spec = KernelSpec::new(fam, l).unwrap();
            proptest::prop_assert_eq!(spec.eval(&a, &b).unwrap(), spec.eval(&b, &a).unwrap());
        }
    }
}
