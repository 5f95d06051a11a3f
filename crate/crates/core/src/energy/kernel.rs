use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// Normalized 3×3 Gaussian smoothing with replicate padding at borders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    weights: [[f64; 3]; 3],
}

impl Default for GaussianKernel {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl GaussianKernel {
    pub fn new(sigma: f64) -> Self {
        let mut weights = [[0.0; 3]; 3];
        let mut total = 0.0;
        for (i, row) in weights.iter_mut().enumerate() {
            for (j, w) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 1.0, j as f64 - 1.0);
                *w = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
                total += *w;
            }
        }
        for row in weights.iter_mut() {
            for w in row.iter_mut() {
                *w /= total;
            }
        }
        Self { weights }
    }

    pub fn center_weight(&self) -> f64 {
        self.weights[1][1]
    }

    pub fn weights(&self) -> &[[f64; 3]; 3] {
        &self.weights
    }

    fn neighbors(side: usize, y: usize, x: usize) -> impl Iterator<Item = (usize, usize, usize)> {
        let clamp = move |v: isize| v.clamp(0, side as isize - 1) as usize;
        (0..3).flat_map(move |i| {
            (0..3).map(move |j| {
                let yy = clamp(y as isize + i as isize - 1);
                let xx = clamp(x as isize + j as isize - 1);
                (i, j, yy * side + xx)
            })
        })
    }

    /// Smooths a row-major square map.
    pub fn smooth(&self, map: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let side = square_side(map.len())?;
        let mut out = Array1::zeros(map.len());
        for y in 0..side {
            for x in 0..side {
                // Weighted offsets from the center keep constant maps exact.
                let c = map[y * side + x];
                out[y * side + x] = c + Self::neighbors(side, y, x)
                    .map(|(i, j, k)| self.weights[i][j] * (map[k] - c))
                    .sum::<f64>();
            }
        }
        Ok(out)
    }

    /// Adds `scale · ∂smooth(map)[pos]/∂map` into `grad`.
    pub fn accumulate_position_grad(&self, side: usize, pos: usize, scale: f64, grad: &mut Array1<f64>) {
        let (y, x) = (pos / side, pos % side);
        for (i, j, k) in Self::neighbors(side, y, x) {
            grad[k] += scale * self.weights[i][j];
        }
    }
}

pub(crate) fn square_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len || side == 0 {
        return Err(Error::input(format!("map of length {} is not square", len)));
    }
    Ok(side)
}
