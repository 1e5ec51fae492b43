//! Parameter initializers.

use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape, data).expect("shape product matches data length")
}

/// Random `rows × cols` matrix with orthonormal columns (tall) or rows (wide).
///
/// Drawn from the QR factor of a Gaussian matrix, with column signs fixed by
/// the diagonal of `R` so the result is Haar distributed.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let (tall, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            for i in 0..tall {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(if rows >= cols { q[(i, j)] } else { q[(j, i)] });
        }
    }
    Tensor::new(&[rows, cols], data).expect("shape product matches data length")
}

/// `‖MᵀM − I‖∞` for tall matrices, `‖MMᵀ − I‖∞` for wide ones.
pub fn orthogonality_defect(m: &Tensor) -> f64 {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let gram = if rows >= cols {
        m.matmul_tn(m).expect("matrix")
    } else {
        m.matmul_nt(m).expect("matrix")
    };
    let n = gram.shape()[0];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.data()[i * n + j] - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_shapes_pass_the_defect_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(5, 5), (9, 4), (4, 9), (1, 6), (64, 32)] {
            let m = orthogonal(&mut rng, r, c);
            assert_eq!(m.shape(), &[r, c]);
            assert!(orthogonality_defect(&m) < 1e-8, "{r}x{c}");
        }
    }

    #[test]
    fn gaussian_is_seeded() {
        let a = gaussian(&mut ChaCha8Rng::seed_from_u64(1), &[3, 2], 0.5);
        let b = gaussian(&mut ChaCha8Rng::seed_from_u64(1), &[3, 2], 0.5);
        assert_eq!(a, b);
    }
}
