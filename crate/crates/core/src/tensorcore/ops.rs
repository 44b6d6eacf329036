//! Scalar and vector primitives shared by the tape and the plain-value paths.

use super::tensor::Tensor;
use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    super::tape::softmax_in_place(&mut out);
    out
}

/// Negative log-likelihood of `target` under `softmax(logits)`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index { what: "target class", index: target, len: logits.len() });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(lse - logits[target])
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine(u: &Tensor, v: &Tensor) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine", u.shape(), v.shape()));
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 {
        return Err(Error::DegenerateVector("cosine left operand"));
    }
    if nv == 0.0 {
        return Err(Error::DegenerateVector("cosine right operand"));
    }
    Ok((dot(u.values(), v.values()) / (nu * nv)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);
        // 0.5 * (1 + erf(1/sqrt 2)) = 0.841344746068543
        assert!((gelu_scalar(1.0) - 0.841_345).abs() < 1e-6);
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
    }

    #[test]
    fn xent_reference_values() {
        assert_eq!(softmax_xent(&[3.7], 0).unwrap(), 0.0);
        assert!((softmax_xent(&[0.2; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        let e = std::f64::consts::E;
        let oracle = -(e / (e + 1.0)).ln();
        assert!((oracle - 0.313_262).abs() < 1e-6);
        assert!((softmax_xent(&[1.0, 0.0], 0).unwrap() - oracle).abs() < 1e-15);
        assert!(matches!(softmax_xent(&[1.0, 2.0], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&[1000.0, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_cases() {
        let u = Tensor::row_vector(vec![0.3, -1.2, 2.0]);
        assert!((cosine(&u, &u.scale(2.0)).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&u, &u.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        let e1 = Tensor::row_vector(vec![1.0, 0.0]);
        let e2 = Tensor::row_vector(vec![0.0, 1.0]);
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
        assert!(matches!(cosine(&e1, &Tensor::zeros(1, 2)), Err(Error::DegenerateVector(_))));
    }
}
