//! Rotary position embedding over three coordinate axes (glyph index, x, y).
//!
//! Each head vector is split into three even chunks, one per axis. Inside a
//! chunk of width `d` the pairs `(i, i + d/2)` rotate by `pos * theta^(-2i/d)`.

use candle_core::{DType, Device, Tensor};

use crate::error::{invalid, Result};

pub const DEFAULT_THETA: f64 = 10_000.0;

pub type Coord = [i64; 3];

/// Coordinates `(idx, x, y)` for `num_glyphs` grids of side `latent_side`,
/// glyph blocks in order and `(x, y)` row-major inside each block.
pub fn build_3d_grid(num_glyphs: usize, latent_side: usize) -> Result<Vec<Coord>> {
    if num_glyphs == 0 || latent_side == 0 {
        return Err(invalid("num_glyphs and latent_side must be >= 1"));
    }
    let mut out = Vec::with_capacity(num_glyphs * latent_side * latent_side);
    for g in 0..num_glyphs {
        for x in 0..latent_side {
            for y in 0..latent_side {
                out.push([g as i64, x as i64, y as i64]);
            }
        }
    }
    Ok(out)
}

/// Near-equal thirds, each even, summing to `head_dim`.
pub fn default_split(head_dim: usize) -> Result<[usize; 3]> {
    if head_dim % 2 != 0 || head_dim < 6 {
        return Err(invalid(format!("head_dim {head_dim} must be even and >= 6")));
    }
    let base = (head_dim / 3) / 2 * 2;
    Ok([base, base, head_dim - 2 * base])
}

pub fn validate_split(split: [usize; 3], head_dim: usize) -> Result<()> {
    if split.iter().any(|s| *s == 0 || s % 2 != 0) {
        return Err(invalid(format!("rope split {split:?} must hold positive even parts")));
    }
    if split.iter().sum::<usize>() != head_dim {
        return Err(invalid(format!("rope split {split:?} does not sum to head_dim {head_dim}")));
    }
    Ok(())
}

/// Precomputed cos/sin tables for one coordinate list.
#[derive(Clone)]
pub struct RopeTable {
    cos: Tensor,
    sin: Tensor,
    /// Signed permutation implementing the per-chunk half rotation `[-x2, x1]`.
    rot: Tensor,
    len: usize,
}

impl RopeTable {
    pub fn new(coords: &[Coord], split: [usize; 3], theta: f64, dtype: DType, device: &Device) -> Result<Self> {
        let hd: usize = split.iter().sum();
        validate_split(split, hd)?;
        if coords.iter().flatten().any(|c| *c < 0) {
            return Err(invalid("rope coordinates must be nonnegative"));
        }
        let l = coords.len();
        let mut cos = vec![0.0f64; l * hd];
        let mut sin = vec![0.0f64; l * hd];
        for (row, c) in coords.iter().enumerate() {
            let mut off = 0;
            for (axis, &d) in split.iter().enumerate() {
                let half = d / 2;
                for i in 0..half {
                    let freq = theta.powf(-2.0 * i as f64 / d as f64);
                    let a = c[axis] as f64 * freq;
                    for j in [off + i, off + half + i] {
                        cos[row * hd + j] = a.cos();
                        sin[row * hd + j] = a.sin();
                    }
                }
                off += d;
            }
        }
        // column j of x @ rot holds the rotated partner of j
        let mut rot = vec![0.0f64; hd * hd];
        let mut off = 0;
        for &d in &split {
            let half = d / 2;
            for i in 0..half {
                // out[off+i] = -x[off+half+i]; out[off+half+i] = x[off+i]
                rot[(off + half + i) * hd + off + i] = -1.0;
                rot[(off + i) * hd + off + half + i] = 1.0;
            }
            off += d;
        }
        Ok(Self {
            cos: Tensor::from_vec(cos, (l, hd), device)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(sin, (l, hd), device)?.to_dtype(dtype)?,
            rot: Tensor::from_vec(rot, (hd, hd), device)?.to_dtype(dtype)?,
            len: l,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Rotate `x` of shape `(..., L, hd)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() < 2 || dims[dims.len() - 2] != self.len {
            return Err(invalid(format!(
                "rope table covers {} positions, tensor has shape {dims:?}",
                self.len
            )));
        }
        let rotated = x.broadcast_matmul(&self.rot)?;
        Ok((x.broadcast_mul(&self.cos)? + rotated.broadcast_mul(&self.sin)?)?)
    }
}

/// Rotate `vectors` of shape `(K, heads, head_dim)` by `coords` (one per row).
pub fn apply_rope3d(vectors: &Tensor, coords: &[Coord], split: [usize; 3]) -> Result<Tensor> {
    let (k, _, hd) = vectors.dims3()?;
    validate_split(split, hd)?;
    if coords.len() != k {
        return Err(invalid(format!("{} coordinates for {k} vectors", coords.len())));
    }
    let table = RopeTable::new(coords, split, DEFAULT_THETA, vectors.dtype(), vectors.device())?;
    let x = vectors.transpose(0, 1)?.contiguous()?;
    Ok(table.apply(&x)?.transpose(0, 1)?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        assert_eq!(
            build_3d_grid(1, 2).unwrap(),
            vec![[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]
        );
        assert_eq!(build_3d_grid(2, 1).unwrap(), vec![[0, 0, 0], [1, 0, 0]]);
        let g = build_3d_grid(3, 4).unwrap();
        assert_eq!(g.len(), 48);
        assert_eq!(g.iter().map(|c| c[0]).max(), Some(2));
        assert!(build_3d_grid(0, 2).is_err());
    }

    #[test]
    fn default_split_is_even_and_sums() {
        for hd in (6..=64).step_by(2) {
            let s = default_split(hd).unwrap();
            validate_split(s, hd).unwrap();
        }
        assert_eq!(default_split(32).unwrap(), [10, 10, 12]);
        assert!(default_split(7).is_err());
    }

    #[test]
    fn bad_split_is_rejected() {
        let x = Tensor::zeros((1, 1, 6), DType::F64, &Device::Cpu).unwrap();
        assert!(apply_rope3d(&x, &[[0, 0, 0]], [3, 1, 2]).is_err());
        assert!(apply_rope3d(&x, &[[0, 0, 0]], [2, 2, 4]).is_err());
    }

    #[test]
    fn zero_coordinates_are_identity() {
        let x = Tensor::arange(0.0f64, 24.0, &Device::Cpu).unwrap().reshape((2, 2, 6)).unwrap();
        let y = apply_rope3d(&x, &[[0, 0, 0], [0, 0, 0]], [2, 2, 2]).unwrap();
        assert_eq!(x.to_vec3::<f64>().unwrap(), y.to_vec3::<f64>().unwrap());
    }
}
