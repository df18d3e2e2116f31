//! Positive-definite kernels for SVGD.
//!
//! All kernels share the exponent convention `k(x, x') = exp(-‖e(x) − e(x')‖² / h²)`
//! where `e` is either the identity ([`RbfKernel`]) or a learned encoder
//! ([`FeatureKernel`]).

use crate::adcore::{input_jacobians, Mlp, Tensor};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Smallest bandwidth the median heuristic will return.
pub const MIN_BANDWIDTH: f64 = 1e-6;

/// Maps points into the space the kernel measures distances in.
pub trait Embedder: Sync {
    fn embed(&self, points: &Tensor) -> Result<Tensor>;

    /// Per-row Jacobians of the embedding, each `code_dim × input_dim`.
    fn jacobians(&self, points: &Tensor) -> Result<Vec<Tensor>>;
}

impl Embedder for Mlp {
    fn embed(&self, points: &Tensor) -> Result<Tensor> {
        self.forward(points)
    }

    fn jacobians(&self, points: &Tensor) -> Result<Vec<Tensor>> {
        input_jacobians(self, points)
    }
}

/// Gram matrix and summed kernel gradients for one particle set.
#[derive(Clone, Debug)]
pub struct SteinTerms {
    /// `gram[j][i] = k(x_j, x_i)`, symmetric.
    pub gram: Tensor,
    /// `repulsion[i] = Σ_j ∇_{x_j} k(x_j, x_i)`.
    pub repulsion: Tensor,
}

pub trait Kernel: Sync {
    fn bandwidth(&self) -> f64;

    fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64>;

    /// `∇_x k(x, x2)`.
    fn grad_x(&self, x: &[f64], x2: &[f64]) -> Result<Vec<f64>>;

    /// Points in the space distances are measured in.
    fn embed(&self, points: &Tensor) -> Result<Tensor>;

    fn stein_terms(&self, points: &Tensor, exec: Exec) -> Result<SteinTerms>;
}

fn check_pair(x: &[f64], x2: &[f64]) -> Result<()> {
    if x.len() != x2.len() {
        return Err(Error::dim(format!("kernel arguments have dims {} and {}", x.len(), x2.len())));
    }
    if x.iter().chain(x2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel argument".into()));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RbfKernel {
    bandwidth: f64,
}

impl RbfKernel {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || bandwidth.is_nan() {
            return Err(Error::contract(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { bandwidth })
    }
}

impl Kernel for RbfKernel {
    fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        check_pair(x, x2)?;
        Ok((-sq_dist(x, x2) / (self.bandwidth * self.bandwidth)).exp())
    }

    fn grad_x(&self, x: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
        let k = self.eval(x, x2)?;
        let c = -2.0 * k / (self.bandwidth * self.bandwidth);
        Ok(x.iter().zip(x2).map(|(a, b)| c * (a - b)).collect())
    }

    fn embed(&self, points: &Tensor) -> Result<Tensor> {
        Ok(points.as_matrix())
    }

    fn stein_terms(&self, points: &Tensor, exec: Exec) -> Result<SteinTerms> {
        stein_terms_from(&points.as_matrix(), None, points.cols(), self.bandwidth, exec)
    }
}

/// RBF kernel on learned codes: `k(x, x') = exp(-‖E(x) − E(x')‖² / h²)`.
#[derive(Clone, Copy)]
pub struct FeatureKernel<'a, E: Embedder + ?Sized> {
    base: RbfKernel,
    embedder: &'a E,
}

impl<'a, E: Embedder + ?Sized> FeatureKernel<'a, E> {
    pub fn new(bandwidth: f64, embedder: &'a E) -> Result<Self> {
        Ok(Self { base: RbfKernel::new(bandwidth)?, embedder })
    }

    fn embed_one(&self, x: &[f64]) -> Result<Tensor> {
        self.embedder.embed(&Tensor::matrix(1, x.len(), x.to_vec())?)
    }
}

impl<E: Embedder + ?Sized> Kernel for FeatureKernel<'_, E> {
    fn bandwidth(&self) -> f64 {
        self.base.bandwidth
    }

    fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        check_pair(x, x2)?;
        let (a, b) = (self.embed_one(x)?, self.embed_one(x2)?);
        self.base.eval(a.data(), b.data())
    }

    fn grad_x(&self, x: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
        check_pair(x, x2)?;
        let xt = Tensor::matrix(1, x.len(), x.to_vec())?;
        let a = self.embedder.embed(&xt)?;
        let b = self.embed_one(x2)?;
        let gz = self.base.grad_x(a.data(), b.data())?;
        let jac = &self.embedder.jacobians(&xt)?[0];
        Ok(jt_vec(jac, &gz))
    }

    fn embed(&self, points: &Tensor) -> Result<Tensor> {
        self.embedder.embed(points)
    }

    fn stein_terms(&self, points: &Tensor, exec: Exec) -> Result<SteinTerms> {
        let z = self.embedder.embed(points)?;
        let jac = self.embedder.jacobians(points)?;
        stein_terms_from(&z, Some(&jac), points.cols(), self.base.bandwidth, exec)
    }
}

/// `Jᵀ v` for `J` of shape `c × d`.
fn jt_vec(jac: &Tensor, v: &[f64]) -> Vec<f64> {
    let d = jac.cols();
    let mut out = vec![0.0; d];
    for (k, &vk) in v.iter().enumerate() {
        for (o, &jv) in out.iter_mut().zip(jac.row(k)) {
            *o += jv * vk;
        }
    }
    out
}

fn stein_terms_from(
    z: &Tensor,
    jac: Option<&[Tensor]>,
    input_dim: usize,
    h: f64,
    exec: Exec,
) -> Result<SteinTerms> {
    let n = z.rows();
    let inv_h2 = 1.0 / (h * h);
    let rows = par::map_range(exec, n, |i| {
        let zi = z.row(i);
        let mut krow = Vec::with_capacity(n);
        let mut rep = vec![0.0; input_dim];
        for j in 0..n {
            let zj = z.row(j);
            let k = (-sq_dist(zj, zi) * inv_h2).exp();
            krow.push(k);
            if j == i {
                continue;
            }
            let c = -2.0 * k * inv_h2;
            let gz: Vec<f64> = zj.iter().zip(zi).map(|(a, b)| c * (a - b)).collect();
            match jac {
                None => {
                    for (r, g) in rep.iter_mut().zip(&gz) {
                        *r += g;
                    }
                }
                Some(js) => {
                    for (r, g) in rep.iter_mut().zip(jt_vec(&js[j], &gz)) {
                        *r += g;
                    }
                }
            }
        }
        (krow, rep)
    });
    let mut gram = Vec::with_capacity(n * n);
    let mut repulsion = Vec::with_capacity(n * input_dim);
    for (krow, rep) in rows {
        gram.extend(krow);
        repulsion.extend(rep);
    }
    // Rows were built per target i; the layout is gram[i][j] = k(x_j, x_i),
    // which equals gram[j][i] by symmetry.
    Ok(SteinTerms {
        gram: Tensor::raw_matrix(n, n, gram),
        repulsion: Tensor::raw_matrix(n, input_dim, repulsion),
    })
}

/// `scale × median` of all pairwise distances, optionally in embedded space.
///
/// Even-sized distance lists use the lower median. The result is floored at
/// [`MIN_BANDWIDTH`].
pub fn median_bandwidth(points: &Tensor, scale: f64, embed: Option<&dyn Embedder>) -> Result<f64> {
    median_bandwidth_with(points, scale, embed, Exec::default())
}

pub fn median_bandwidth_with(
    points: &Tensor,
    scale: f64,
    embed: Option<&dyn Embedder>,
    exec: Exec,
) -> Result<f64> {
    let n = points.rows();
    if n < 2 || points.is_empty() {
        return Err(Error::contract(format!("median bandwidth needs at least 2 points, got {n}")));
    }
    if !(scale > 0.0) {
        return Err(Error::contract(format!("bandwidth scale must be positive, got {scale}")));
    }
    let z = match embed {
        Some(e) => e.embed(points)?,
        None => points.as_matrix(),
    };
    let med = median_pairwise_distance(&z, exec);
    Ok((scale * med).max(MIN_BANDWIDTH))
}

fn median_pairwise_distance(z: &Tensor, exec: Exec) -> f64 {
    let n = z.rows();
    let mut dists: Vec<f64> = par::map_range(exec, n, |i| {
        ((i + 1)..n).map(|j| sq_dist(z.row(i), z.row(j)).sqrt()).collect::<Vec<_>>()
    })
    .concat();
    let mid = (dists.len() - 1) / 2;
    let (_, m, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adcore::MlpSpec;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn eval_examples() {
        let k = RbfKernel::new(1.0).unwrap();
        assert_eq!(k.eval(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert!((k.eval(&[1.0], &[0.0]).unwrap() - 0.367_879_441_171_442_3).abs() < 1e-15);
        let flat = RbfKernel::new(1e8).unwrap();
        assert!((flat.eval(&[3.0, 1.0], &[-2.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(k.eval(&[f64::NAN], &[0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(k.eval(&[1.0, 2.0], &[0.0]), Err(Error::Dimension(_))));
        assert!(RbfKernel::new(0.0).is_err());
        assert!(RbfKernel::new(-1.0).is_err());
    }

    #[test]
    fn grad_examples() {
        let k = RbfKernel::new(1.0).unwrap();
        assert_eq!(k.grad_x(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), vec![0.0, 0.0]);
        let g = k.grad_x(&[1.0], &[0.0]).unwrap();
        assert!((g[0] + 0.735_758_882_342_884_6).abs() < 1e-15);
    }

    #[test]
    fn median_examples() {
        let pts = Tensor::matrix(3, 1, vec![0.0, 1.0, 3.0]).unwrap();
        assert_eq!(median_bandwidth(&pts, 1.0, None).unwrap(), 2.0);
        assert_eq!(median_bandwidth(&pts, 0.5, None).unwrap(), 1.0);
        // four points: distances {1,2,3,1,2,1} sorted {1,1,1,2,2,3}, lower median 1
        let pts = Tensor::matrix(4, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(median_bandwidth(&pts, 1.0, None).unwrap(), 1.0);
        let same = Tensor::matrix(5, 2, vec![1.0; 10]).unwrap();
        assert_eq!(median_bandwidth(&same, 0.5, None).unwrap(), MIN_BANDWIDTH);
        let one = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(median_bandwidth(&one, 1.0, None), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_embedder_feature_kernel_reduces_to_rbf() {
        let id = crate::adcore::Mlp::new(vec![crate::adcore::Layer::new(
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(&[2]),
            crate::adcore::Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let fk = FeatureKernel::new(0.7, &id).unwrap();
        let rk = RbfKernel::new(0.7).unwrap();
        let (x, y) = ([0.2, -1.0], [1.1, 0.4]);
        assert!((fk.eval(&x, &y).unwrap() - rk.eval(&x, &y).unwrap()).abs() < 1e-15);
        let (gf, gr) = (fk.grad_x(&x, &y).unwrap(), rk.grad_x(&x, &y).unwrap());
        assert!(gf.iter().zip(&gr).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn feature_kernel_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(3, &[6], 2);
        let mut rng = seeded(21);
        for _ in 0..20 {
            let enc = Mlp::init_gaussian(&spec, 0.8, &mut rng).unwrap();
            let fk = FeatureKernel::new(rng.random_range(0.5..2.0), &enc).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g = fk.grad_x(&x, &y).unwrap();
            let fd: Vec<f64> = (0..3)
                .map(|i| {
                    let (mut a, mut b) = (x.clone(), x.clone());
                    a[i] += 1e-5;
                    b[i] -= 1e-5;
                    (fk.eval(&a, &y).unwrap() - fk.eval(&b, &y).unwrap()) / 2e-5
                })
                .collect();
            let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-8);
            assert!(num / den < 1e-6, "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn stein_terms_match_pairwise_definitions() {
        let spec = MlpSpec::new(2, &[5], 3);
        let enc = Mlp::init_gaussian(&spec, 0.7, &mut seeded(4)).unwrap();
        let fk = FeatureKernel::new(0.9, &enc).unwrap();
        let pts = Tensor::from_rows(&[vec![0.1, 0.2], vec![-1.0, 0.5], vec![0.7, -0.3], vec![2.0, 1.0]])
            .unwrap();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let st = fk.stein_terms(&pts, exec).unwrap();
            for i in 0..4 {
                let mut rep = [0.0; 2];
                for j in 0..4 {
                    let k = fk.eval(pts.row(j), pts.row(i)).unwrap();
                    assert!((st.gram.get(i, j) - k).abs() < 1e-14);
                    let g = fk.grad_x(pts.row(j), pts.row(i)).unwrap();
                    rep[0] += g[0];
                    rep[1] += g[1];
                }
                assert!((st.repulsion.get(i, 0) - rep[0]).abs() < 1e-12);
                assert!((st.repulsion.get(i, 1) - rep[1]).abs() < 1e-12);
            }
        }
    }

    fn min_eigenvalue(gram: &Tensor) -> f64 {
        let n = gram.rows();
        let m = nalgebra::DMatrix::from_row_slice(n, n, gram.data());
        m.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
    }

    proptest! {
        #[test]
        fn symmetric_and_stationary(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
            h in 0.1f64..10.0,
        ) {
            let k = RbfKernel::new(h).unwrap();
            let (a, b) = (k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap());
            prop_assert!((a - b).abs() <= 1e-15);
            prop_assert!((0.0..=1.0).contains(&a));
            let (gxy, gyx) = (k.grad_x(&x, &y).unwrap(), k.grad_x(&y, &x).unwrap());
            for (p, q) in gxy.iter().zip(&gyx) {
                prop_assert!((p + q).abs() <= 1e-15);
            }
        }

        #[test]
        fn gram_is_psd(
            pts in proptest::collection::vec(-3.0f64..3.0, 4..=40),
            h in 0.2f64..4.0,
        ) {
            let n = pts.len() / 2;
            let t = Tensor::matrix(n, 2, pts[..2 * n].to_vec()).unwrap();
            let st = RbfKernel::new(h).unwrap().stein_terms(&t, Exec::Sequential).unwrap();
            prop_assert!(min_eigenvalue(&st.gram) >= -1e-10);
        }

        #[test]
        fn median_is_permutation_and_translation_invariant(
            pts in proptest::collection::vec(-10.0f64..10.0, 6..40),
            shift in -100.0f64..100.0,
            rot in 0usize..20,
        ) {
            let n = pts.len() / 2;
            let base = Tensor::matrix(n, 2, pts[..2 * n].to_vec()).unwrap();
            let h = median_bandwidth(&base, 0.5, None).unwrap();
            let mut rows: Vec<Vec<f64>> = base.iter_rows().map(<[f64]>::to_vec).collect();
            rows.rotate_left(rot % n);
            rows.reverse();
            let perm = Tensor::from_rows(&rows).unwrap();
            prop_assert_eq!(h, median_bandwidth(&perm, 0.5, None).unwrap());
            let moved = Tensor::matrix(n, 2, base.data().iter().map(|v| v + shift).collect()).unwrap();
            let hm = median_bandwidth(&moved, 0.5, None).unwrap();
            prop_assert!((h - hm).abs() <= 1e-9 * (1.0 + h));
        }
    }
}
