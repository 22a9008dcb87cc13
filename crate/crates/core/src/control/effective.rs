use super::{Atom, ControlError};
use crate::model::{MeasureView, ModelSpec};
use crate::Scalar;

const PSD_GUARD: f64 = -1e-10;

/// Eigen-decomposition of a symmetric `d × d` matrix by cyclic Jacobi
/// rotations. Returns eigenvalues and the row-major eigenvector matrix
/// whose columns are the eigenvectors.
pub fn symmetric_eigen<S: Scalar>(m: &[S], d: usize) -> (Vec<S>, Vec<S>) {
    let mut a = m.to_vec();
    let mut v = vec![S::zero(); d * d];
    for i in 0..d {
        v[i * d + i] = S::one();
    }
    let scale = a.iter().fold(S::zero(), |acc, x| acc.max(x.abs()));
    let tol = S::epsilon() * S::epsilon() * scale * scale;
    for _sweep in 0..64 {
        let off: S = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == S::zero() {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
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
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

/// Symmetric positive semidefinite square root of a symmetric matrix.
/// Eigenvalues in `[-1e-10, 0)` are clamped to zero; anything lower is
/// rejected.
pub fn psd_sqrt<S: Scalar>(m: &[S], d: usize) -> Result<Vec<S>, ControlError> {
    if d == 1 {
        return if m[0] < S::lit(PSD_GUARD) {
            Err(ControlError::NotPsd(m[0].as_f64()))
        } else {
            Ok(vec![m[0].max(S::zero()).sqrt()])
        };
    }
    let (lambda, v) = symmetric_eigen(m, d);
    let mut root = vec![S::zero(); d * d];
    for (k, &l) in lambda.iter().enumerate() {
        if l < S::lit(PSD_GUARD) {
            return Err(ControlError::NotPsd(l.as_f64()));
        }
        let s = l.max(S::zero()).sqrt();
        for i in 0..d {
            for j in i..d {
                root[i * d + j] = root[i * d + j] + s * v[i * d + k] * v[j * d + k];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            root[i * d + j] = root[j * d + i];
        }
    }
    Ok(root)
}

/// Weight-averaged `σσᵀ` (d × d) over the atoms.
pub(crate) fn averaged_diffusion<S: Scalar>(
    model: &ModelSpec<S>,
    t: S,
    x: &[S],
    m: &MeasureView<S>,
    atoms: &[Atom<S>],
    sigma_buf: &mut [S],
    out: &mut [S],
) {
    let (d, dw) = (model.dim_state, model.dim_noise);
    out.iter_mut().for_each(|v| *v = S::zero());
    for atom in atoms {
        model
            .coefficients
            .volatility(t, x, m, &atom.action, sigma_buf);
        for i in 0..d {
            for j in 0..d {
                let s: S = (0..dw)
                    .map(|l| sigma_buf[i * dw + l] * sigma_buf[j * dw + l])
                    .sum();
                out[i * d + j] = out[i * d + j] + atom.weight * s;
            }
        }
    }
}

/// Drift and volatility of the dynamics driven by the relaxed action
/// `atoms` at `(t, x, m)`: the weight-averaged drift and the symmetric PSD
/// root (d × d, row-major) of the weight-averaged `σσᵀ`.
pub fn effective_coefficients<S: Scalar>(
    model: &ModelSpec<S>,
    t: S,
    x: &[S],
    m: &MeasureView<S>,
    atoms: &[Atom<S>],
) -> Result<(Vec<S>, Vec<S>), ControlError> {
    let d = model.dim_state;
    let mut drift = vec![S::zero(); d];
    let mut buf = vec![S::zero(); d];
    for atom in atoms {
        model.coefficients.drift(t, x, m, &atom.action, &mut buf);
        for (o, &b) in drift.iter_mut().zip(&buf) {
            *o = *o + atom.weight * b;
        }
    }
    let mut sigma = vec![S::zero(); d * model.dim_noise];
    let mut cov = vec![S::zero(); d * d];
    averaged_diffusion(model, t, x, m, atoms, &mut sigma, &mut cov);
    Ok((drift, psd_sqrt(&cov, d)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSet, Exponents, FnCoefficients, InitialLaw};
    use std::sync::Arc;

    fn matmul_t(a: &[f64], d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum();
            }
        }
        out
    }

    fn sigma_is_action() -> ModelSpec<f64> {
        let c = FnCoefficients::new(
            |_, _, _, a, out| out[0] = a[0],
            |_, _, _, a, out| out[0] = a[0],
            |_, _, _, _| 0.0,
            |_, _| 0.0,
        );
        ModelSpec::new(
            "sigma_is_action",
            1,
            1,
            1.0,
            ActionSet::interval(-5.0, 5.0).unwrap(),
            Exponents::new(1.0, 2.0, 0.0).unwrap(),
            Arc::new(c),
            InitialLaw::Dirac { point: vec![0.0] },
        )
        .unwrap()
    }

    #[test]
    fn mixture_of_two_volatilities() {
        let model = sigma_is_action();
        let m = MeasureView::dirac(&[0.0], 1.0);
        let atoms = vec![Atom::new(vec![1.0], 0.5), Atom::new(vec![3.0], 0.5)];
        let (b, v) = effective_coefficients(&model, 0.0, &[0.0], &m, &atoms).unwrap();
        assert_eq!(b, vec![2.0]);
        assert!((v[0] - 5f64.sqrt()).abs() < 1e-15);
        let (b, v) =
            effective_coefficients(&model, 0.0, &[0.0], &m, &[Atom::new(vec![-2.0], 1.0)]).unwrap();
        assert_eq!((b[0], v[0] * v[0]), (-2.0, 4.0));
        let (_, v) =
            effective_coefficients(&model, 0.0, &[0.0], &m, &[Atom::new(vec![0.0], 1.0)]).unwrap();
        assert_eq!(v, vec![0.0]);
    }

    #[test]
    fn root_of_spd_matrix() {
        let m = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let r = psd_sqrt(&m, 3).unwrap();
        for (a, b) in matmul_t(&r, 3).iter().zip(&m) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(r[i * 3 + j], r[j * 3 + i]);
            }
        }
    }

    #[test]
    fn clamps_tiny_negatives_and_rejects_large() {
        assert_eq!(psd_sqrt(&[-1e-12], 1).unwrap(), vec![0.0]);
        assert!(matches!(
            psd_sqrt(&[-1e-6], 1),
            Err(ControlError::NotPsd(_))
        ));
        let m = vec![1.0, 0.0, 0.0, -1e-3];
        assert!(matches!(psd_sqrt(&m, 2), Err(ControlError::NotPsd(_))));
        let singular = vec![1.0, 1.0, 1.0, 1.0];
        let r = psd_sqrt(&singular, 2).unwrap();
        for (a, b) in matmul_t(&r, 2).iter().zip(&singular) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
