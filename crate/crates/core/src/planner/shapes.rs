//! Patch grids, connector output sizes and position-embedding resampling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("resolution {res} is not divisible by patch size {patch}")]
    NotDivisible { res: u32, patch: u32 },
    #[error("convolution k={k} s={s} p={p} does not fit input side {side}")]
    BadConv { side: u32, k: u32, s: u32, p: u32 },
    #[error("grid side must be at least 2, got {0}")]
    DegenerateGrid(usize),
    #[error("grid holds {got} values, expected {expected}")]
    BadGridData { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub encoder_res: u32,
    pub patch: u32,
    pub pretrain_res: u32,
    pub kernel: u32,
    pub stride: u32,
    pub padding: u32,
}

impl Default for ShapeSpec {
    /// A ViT-L/14 encoder pre-trained at 336 and run at 1022, followed by a
    /// 3x3 stride-2 pad-1 down-sampling convolution.
    fn default() -> Self {
        Self {
            encoder_res: 1022,
            patch: 14,
            pretrain_res: 336,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }
}

/// `(side, side^2)` patch tokens for a square input.
pub fn patch_grid(res: u32, patch: u32) -> Result<(u32, u64), ShapeError> {
    if patch == 0 || res % patch != 0 {
        return Err(ShapeError::NotDivisible { res, patch });
    }
    let side = res / patch;
    Ok((side, side as u64 * side as u64))
}

/// Output side and token count of a square convolution:
/// `floor((in + 2p - k) / s) + 1`.
pub fn conv_tokens(side: u32, k: u32, s: u32, p: u32) -> Result<(u32, u64), ShapeError> {
    let padded = side as u64 + 2 * p as u64;
    if s == 0 || k == 0 || padded < k as u64 {
        return Err(ShapeError::BadConv { side, k, s, p });
    }
    let out = ((padded - k as u64) / s as u64 + 1) as u32;
    Ok((out, out as u64 * out as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub side: u32,
    pub tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub spec: ShapeSpec,
    pub pretrain_grid: GridShape,
    pub encoder_grid: GridShape,
    pub connector_grid: GridShape,
}

pub fn shape_report(spec: ShapeSpec) -> Result<ShapeReport, ShapeError> {
    let g = |(side, tokens)| GridShape { side, tokens };
    let (pre_side, pre_tokens) = patch_grid(spec.pretrain_res, spec.patch)?;
    let (enc_side, enc_tokens) = patch_grid(spec.encoder_res, spec.patch)?;
    let conn = conv_tokens(enc_side, spec.kernel, spec.stride, spec.padding)?;
    Ok(ShapeReport {
        spec,
        pretrain_grid: g((pre_side, pre_tokens)),
        encoder_grid: g((enc_side, enc_tokens)),
        connector_grid: g(conn),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InterpMode {
    /// Destination index `i` samples source `i * (src - 1) / (dst - 1)`.
    #[default]
    CornerAligned,
    /// Destination index `i` samples source `(i + 0.5) * src / dst - 0.5`,
    /// clamped to the grid.
    HalfPixel,
}

/// Row-major square grid of `dim`-vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosGrid {
    pub side: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl PosGrid {
    pub fn new(side: usize, dim: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        let expected = side * side * dim;
        if data.len() != expected {
            return Err(ShapeError::BadGridData {
                expected,
                got: data.len(),
            });
        }
        Ok(Self { side, dim, data })
    }

    pub fn from_fn(side: usize, dim: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(side * side * dim);
        for r in 0..side {
            for c in 0..side {
                for d in 0..dim {
                    data.push(f(r, c, d));
                }
            }
        }
        Self { side, dim, data }
    }

    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.side + c) * self.dim;
        &self.data[i..i + self.dim]
    }
}

/// Position embeddings with an optional class token, which resampling leaves
/// untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosEmbedding {
    pub cls: Option<Vec<f64>>,
    pub grid: PosGrid,
}

/// Source coordinate and its two neighbours along one axis.
fn taps(i: usize, src: usize, dst: usize, mode: InterpMode) -> (usize, usize, f64) {
    let x = match mode {
        InterpMode::CornerAligned => {
            // Integer numerator keeps grid-aligned positions exact.
            let num = (i * (src - 1)) as u64;
            let den = (dst - 1) as u64;
            let lo = (num / den) as usize;
            return if lo + 1 >= src {
                (src - 1, src - 1, 0.0)
            } else {
                (lo, lo + 1, (num % den) as f64 / den as f64)
            };
        }
        InterpMode::HalfPixel => ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64),
    };
    let lo = (x.floor() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, x - lo as f64)
}

/// Bilinear resampling of a square grid to `dst_side`. Rows are computed in
/// parallel; the result does not depend on the thread count.
pub fn interpolate_pos_grid(src: &PosGrid, dst_side: usize, mode: InterpMode) -> Result<PosGrid, ShapeError> {
    if src.side < 2 {
        return Err(ShapeError::DegenerateGrid(src.side));
    }
    if dst_side < 2 {
        return Err(ShapeError::DegenerateGrid(dst_side));
    }
    if src.data.len() != src.side * src.side * src.dim {
        return Err(ShapeError::BadGridData {
            expected: src.side * src.side * src.dim,
            got: src.data.len(),
        });
    }
    if dst_side == src.side {
        return Ok(src.clone());
    }
    let dim = src.dim;
    let cols: Vec<_> = (0..dst_side).map(|j| taps(j, src.side, dst_side, mode)).collect();
    let mut data = vec![0.0; dst_side * dst_side * dim];
    data.par_chunks_mut(dst_side * dim.max(1))
        .enumerate()
        .for_each(|(i, row)| {
            let (r0, r1, ty) = taps(i, src.side, dst_side, mode);
            for (j, &(c0, c1, tx)) in cols.iter().enumerate() {
                let (a, b, c, d) = (src.at(r0, c0), src.at(r0, c1), src.at(r1, c0), src.at(r1, c1));
                let out = &mut row[j * dim..(j + 1) * dim];
                for k in 0..dim {
                    let top = a[k] + (b[k] - a[k]) * tx;
                    let bottom = c[k] + (d[k] - c[k]) * tx;
                    out[k] = top + (bottom - top) * ty;
                }
            }
        });
    Ok(PosGrid {
        side: dst_side,
        dim,
        data,
    })
}

pub fn interpolate_embedding(src: &PosEmbedding, dst_side: usize, mode: InterpMode) -> Result<PosEmbedding, ShapeError> {
    Ok(PosEmbedding {
        cls: src.cls.clone(),
        grid: interpolate_pos_grid(&src.grid, dst_side, mode)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(patch_grid(336, 14), Ok((24, 576)));
        assert_eq!(patch_grid(1022, 14), Ok((73, 5329)));
        assert!(matches!(patch_grid(1023, 14), Err(ShapeError::NotDivisible { .. })));
        assert_eq!(conv_tokens(73, 3, 2, 1), Ok((37, 1369)));
        assert_eq!(conv_tokens(24, 3, 2, 1), Ok((12, 144)));
        assert_eq!(conv_tokens(5, 5, 1, 0), Ok((1, 1)));
        assert!(conv_tokens(2, 5, 1, 0).is_err());
        let r = shape_report(ShapeSpec::default()).unwrap();
        assert_eq!(r.connector_grid, GridShape { side: 37, tokens: 1369 });
    }

    #[test]
    fn identity_and_corners() {
        let g = PosGrid::from_fn(5, 3, |r, c, d| (r * 31 + c * 7 + d) as f64 * 0.37 - 4.0);
        assert_eq!(interpolate_pos_grid(&g, 5, InterpMode::CornerAligned).unwrap(), g);
        for dst in [2, 3, 9, 16] {
            let o = interpolate_pos_grid(&g, dst, InterpMode::CornerAligned).unwrap();
            for (r, c) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
                let (rr, cc) = (r * (dst - 1) / 4, c * (dst - 1) / 4);
                assert_eq!(o.at(rr, cc), g.at(r, c));
            }
        }
    }

    #[test]
    fn half_pixel_keeps_constant_fields() {
        let g = PosGrid::from_fn(4, 2, |_, _, d| d as f64 + 1.5);
        let o = interpolate_pos_grid(&g, 7, InterpMode::HalfPixel).unwrap();
        assert!(o.data.chunks(2).all(|v| v == [1.5, 2.5]));
    }

    #[test]
    fn degenerate() {
        let g = PosGrid::from_fn(1, 1, |_, _, _| 0.0);
        assert!(matches!(interpolate_pos_grid(&g, 4, InterpMode::CornerAligned), Err(ShapeError::DegenerateGrid(1))));
        let g = PosGrid::from_fn(3, 1, |_, _, _| 0.0);
        assert!(interpolate_pos_grid(&g, 1, InterpMode::CornerAligned).is_err());
    }

    #[test]
    fn class_token_passes_through() {
        let e = PosEmbedding { cls: Some(vec![9.0, -1.0]), grid: PosGrid::from_fn(3, 2, |r, c, _| (r + c) as f64) };
        let o = interpolate_embedding(&e, 6, InterpMode::CornerAligned).unwrap();
        assert_eq!(o.cls, e.cls);
        assert_eq!(o.grid.side, 6);
    }
}
