//! Orthonormal 8x8 DCT-II and its inverse, plus a tape op that transforms
//! every 8x8 tile of a 2-D tensor.

use std::sync::OnceLock;

use crate::autodiff::{AutodiffError, CustomOp, Tape, Tensor, Var};

const N: usize = 8;

/// `C[k][n] = a_k cos(pi (2n + 1) k / 16)`, so `X = C x C^T`.
fn basis() -> &'static [[f64; N]; N] {
    static BASIS: OnceLock<[[f64; N]; N]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut c = [[0.0; N]; N];
        for (k, row) in c.iter_mut().enumerate() {
            let a = if k == 0 { (1.0 / N as f64).sqrt() } else { (2.0 / N as f64).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * N) as f64).cos();
            }
        }
        c
    })
}

/// `out = C x C^T` (forward) or `C^T x C` (inverse) on one row-major block
/// with the given row stride.
fn transform(src: &[f32], src_stride: usize, dst: &mut [f32], dst_stride: usize, inverse: bool) {
    let c = basis();
    let mut tmp = [[0f64; N]; N];
    // Rows first: tmp = x C^T (forward) or x C (inverse).
    for y in 0..N {
        let row = &src[y * src_stride..y * src_stride + N];
        for k in 0..N {
            tmp[y][k] = (0..N)
                .map(|n| row[n] as f64 * if inverse { c[n][k] } else { c[k][n] })
                .sum();
        }
    }
    for k in 0..N {
        for x in 0..N {
            let v: f64 = (0..N)
                .map(|y| tmp[y][x] * if inverse { c[y][k] } else { c[k][y] })
                .sum();
            dst[k * dst_stride + x] = v as f32;
        }
    }
}

pub fn dct8_forward(block: &[f32; 64]) -> [f32; 64] {
    let mut out = [0f32; 64];
    transform(block, N, &mut out, N, false);
    out
}

pub fn dct8_inverse(coeffs: &[f32; 64]) -> [f32; 64] {
    let mut out = [0f32; 64];
    transform(coeffs, N, &mut out, N, true);
    out
}

/// Applies the (inverse) DCT to every 8x8 tile of an `[H, W]` array in place
/// layout.
pub fn transform_tiles(data: &[f32], h: usize, w: usize, inverse: bool) -> Vec<f32> {
    let mut out = vec![0f32; data.len()];
    for ty in (0..h).step_by(N) {
        for tx in (0..w).step_by(N) {
            let o = ty * w + tx;
            transform(&data[o..], w, &mut out[o..], w, inverse);
        }
    }
    out
}

struct TileDct {
    inverse: bool,
    h: usize,
    w: usize,
}

impl CustomOp for TileDct {
    fn name(&self) -> &'static str {
        if self.inverse {
            "idct8_tiles"
        } else {
            "dct8_tiles"
        }
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &[f32]) -> Vec<Option<Vec<f32>>> {
        // Orthonormal: the adjoint of the transform is its inverse.
        vec![Some(transform_tiles(grad_out, self.h, self.w, !self.inverse))]
    }
}

impl Tape {
    /// Tile-wise 8x8 DCT (or inverse) of a 2-D tensor whose sides are
    /// multiples of 8.
    pub fn dct8_tiles(&mut self, a: Var, inverse: bool) -> Result<Var, AutodiffError> {
        let shape = self.shape(a).to_vec();
        let [h, w] = shape[..] else {
            return Err(AutodiffError::invalid("dct8_tiles", format!("expected 2-D input, got {shape:?}")));
        };
        if h % N != 0 || w % N != 0 {
            return Err(AutodiffError::invalid("dct8_tiles", format!("{h}x{w} is not 8-aligned")));
        }
        let out = transform_tiles(self.value(a).data(), h, w, inverse);
        let value = Tensor::new(shape, out)?;
        Ok(self.custom(&[a], value, Box::new(TileDct { inverse, h, w })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_block_has_only_dc() {
        let c = dct8_forward(&[0.3; 64]);
        assert!((c[0] - 2.4).abs() < 1e-5);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn basis_is_orthonormal() {
        let c = basis();
        for i in 0..N {
            for j in 0..N {
                let d: f64 = (0..N).map(|n| c[i][n] * c[j][n]).sum();
                assert!((d - (i == j) as u8 as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiles_are_independent() {
        let data: Vec<f32> = (0..16 * 8).map(|i| (i % 11) as f32 * 0.1).collect();
        let all = transform_tiles(&data, 8, 16, false);
        let mut right = [0f32; 64];
        for y in 0..8 {
            right[y * 8..y * 8 + 8].copy_from_slice(&data[y * 16 + 8..y * 16 + 16]);
        }
        let c = dct8_forward(&right);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(all[y * 16 + 8 + x], c[y * 8 + x]);
            }
        }
    }
}
