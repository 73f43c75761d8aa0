//! Axis-aligned boxes and the pixel <-> grid coordinate conversions used by the
//! textual-coordinate protocol.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Default number of grid bins used when boxes are written into conversation text.
pub const DEFAULT_COORD_BINS: u32 = 1000;

/// Coordinate space a [`BBox`] lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoordSpace {
    AbsolutePixels,
    /// Integer coordinates in `[0, bins]`, independent of image resolution.
    NormalizedGrid { bins: u32 },
}

/// Axis-aligned rectangle `[x1, y1, x2, y2]`.
///
/// On disk a box is always a 4-element array in absolute pixels; grid boxes only
/// ever appear inside conversation text (see `convo::serialize_box`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub space: CoordSpace,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BoxError {
    #[error("inverted box [{x1}, {y1}, {x2}, {y2}]")]
    Inverted { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box [{x1}, {y1}, {x2}, {y2}] outside {width}x{height}")]
    OutOfBounds {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: f64,
        height: f64,
    },
    #[error("grid coordinate {0} is not an integer")]
    NonIntegerGridCoordinate(f64),
    #[error("grid box has zero area")]
    Degenerate,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("image extent must be positive, got {width}x{height}")]
    BadExtent { width: f64, height: f64 },
    #[error("grid needs at least 2 bins, got {0}")]
    TooFewBins(u32),
}

impl BBox {
    pub fn pixels(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            space: CoordSpace::AbsolutePixels,
        }
    }

    pub fn grid(x1: u32, y1: u32, x2: u32, y2: u32, bins: u32) -> Self {
        Self {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: x2 as f64,
            y2: y2 as f64,
            space: CoordSpace::NormalizedGrid { bins },
        }
    }

    /// Converts a COCO-style `[x, y, w, h]` box into corner form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::pixels(x, y, x + w, y + h)
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Grid coordinates as integers. Only meaningful for grid boxes.
    pub fn grid_coords(&self) -> [u32; 4] {
        [
            self.x1 as u32,
            self.y1 as u32,
            self.x2 as u32,
            self.y2 as u32,
        ]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    /// Continuous area `(x2 - x1) * (y2 - y1)`, no `+1` pixel convention.
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
            space: self.space,
        }
    }

    /// Clamps an absolute box to the image, returning the largest per-coordinate
    /// displacement that was applied.
    pub fn clamp_to(&self, width: f64, height: f64) -> (Self, f64) {
        let clamped = Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
            space: self.space,
        };
        let shift = self
            .coords()
            .iter()
            .zip(clamped.coords())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        (clamped, shift)
    }
}

/// Intersection over union with the continuous area convention.
///
/// Returns 0 when the union is empty (two zero-area boxes).
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Checks a box against its invariants for an image of `width` x `height`.
///
/// Pixel boxes must be ordered and lie within `[0, width] x [0, height]`.
/// Grid boxes must hold integers in `[0, bins]`, be ordered and have positive
/// area (quantization never emits a collapsed box). Nothing is clamped here.
pub fn validate_box(b: BBox, width: f64, height: f64) -> Result<BBox, BoxError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(BoxError::BadExtent { width, height });
    }
    let c = b.coords();
    if c.iter().any(|v| !v.is_finite()) {
        return Err(BoxError::NonFinite);
    }
    if let CoordSpace::NormalizedGrid { .. } = b.space {
        if let Some(v) = c.iter().find(|v| v.fract() != 0.0) {
            return Err(BoxError::NonIntegerGridCoordinate(*v));
        }
    }
    if b.x1 > b.x2 || b.y1 > b.y2 {
        return Err(BoxError::Inverted {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        });
    }
    let (w, h) = match b.space {
        CoordSpace::AbsolutePixels => (width, height),
        CoordSpace::NormalizedGrid { bins } => (bins as f64, bins as f64),
    };
    if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
        return Err(BoxError::OutOfBounds {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            width: w,
            height: h,
        });
    }
    if matches!(b.space, CoordSpace::NormalizedGrid { .. }) && (b.x1 == b.x2 || b.y1 == b.y2) {
        return Err(BoxError::Degenerate);
    }
    Ok(b)
}

/// Quantizes one axis. A span that rounds to a single grid line is widened to
/// one cell on the side of its centre, which keeps the reconstruction within
/// one cell of the original.
fn quantize_axis(lo: f64, hi: f64, extent: f64, bins: u32) -> (u32, u32) {
    let n = bins as f64;
    // Multiply before dividing: one rounding, exact whenever the result is.
    let q = |v: f64| ((v * n / extent).round() as i64).clamp(0, bins as i64) as u32;
    let (a, b) = (q(lo), q(hi));
    if a < b {
        return (a, b);
    }
    let centre = (lo + hi) * 0.5 * n / extent;
    if (centre >= a as f64 && a < bins) || a == 0 {
        (a, a + 1)
    } else {
        (a - 1, a)
    }
}

/// Maps a pixel box onto `NormalizedGrid(bins)` via `round(coord / extent * bins)`.
pub fn to_grid(b: BBox, width: f64, height: f64, bins: u32) -> Result<BBox, BoxError> {
    if bins < 2 {
        return Err(BoxError::TooFewBins(bins));
    }
    let b = validate_box(
        BBox {
            space: CoordSpace::AbsolutePixels,
            ..b
        },
        width,
        height,
    )?;
    let (x1, x2) = quantize_axis(b.x1, b.x2, width, bins);
    let (y1, y2) = quantize_axis(b.y1, b.y2, height, bins);
    Ok(BBox::grid(x1, y1, x2, y2, bins))
}

/// Inverse scaling `coord * extent / bins`. A pixel box is returned unchanged.
pub fn from_grid(b: BBox, width: f64, height: f64) -> BBox {
    match b.space {
        CoordSpace::AbsolutePixels => b,
        CoordSpace::NormalizedGrid { bins } => {
            let n = bins as f64;
            BBox::pixels(
                b.x1 * width / n,
                b.y1 * height / n,
                b.x2 * width / n,
                b.y2 * height / n,
            )
        }
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.coords().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        Ok(BBox::pixels(x1, y1, x2, y2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::pixels(x1, y1, x2, y2)
    }

    #[test]
    fn validate_examples() {
        assert!(validate_box(px(0., 0., 10., 10.), 100., 100.).is_ok());
        assert!(matches!(
            validate_box(px(10., 10., 5., 20.), 100., 100.),
            Err(BoxError::Inverted { .. })
        ));
        assert!(matches!(
            validate_box(px(0., 0., 101., 50.), 100., 100.),
            Err(BoxError::OutOfBounds { .. })
        ));
        assert!(matches!(
            validate_box(BBox::grid(500, 500, 500, 500, 1000), 1., 1.),
            Err(BoxError::Degenerate)
        ));
        let mut g = BBox::grid(1, 1, 3, 3, 10);
        g.x2 = 2.5;
        assert!(matches!(
            validate_box(g, 1., 1.),
            Err(BoxError::NonIntegerGridCoordinate(_))
        ));
        assert!(matches!(
            validate_box(px(0., 0., 1., 1.), 0., 10.),
            Err(BoxError::BadExtent { .. })
        ));
    }

    /// Independent restatement of the box invariants, used for enumeration.
    fn admissible(c: [i32; 4], grid: bool, n: i32) -> bool {
        let [x1, y1, x2, y2] = c;
        let ordered = x1 <= x2 && y1 <= y2;
        let inside = [x1, y1, x2, y2].iter().all(|&v| (0..=n).contains(&v));
        let area = !grid || (x1 < x2 && y1 < y2);
        ordered && inside && area
    }

    #[test]
    fn validate_matches_invariants_on_small_grid() {
        let n = 4;
        for x1 in -1..=n + 1 {
            for y1 in -1..=n + 1 {
                for x2 in -1..=n + 1 {
                    for y2 in -1..=n + 1 {
                        let c = [x1, y1, x2, y2];
                        let p = px(x1 as f64, y1 as f64, x2 as f64, y2 as f64);
                        assert_eq!(
                            validate_box(p, n as f64, n as f64).is_ok(),
                            admissible(c, false, n),
                            "pixel {c:?}"
                        );
                        let g = BBox {
                            space: CoordSpace::NormalizedGrid { bins: n as u32 },
                            ..p
                        };
                        assert_eq!(
                            validate_box(g, 7., 9.).is_ok(),
                            admissible(c, true, n),
                            "grid {c:?}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn to_grid_examples() {
        let g = to_grid(px(0., 0., 100., 100.), 100., 100., 1000).unwrap();
        assert_eq!(g.grid_coords(), [0, 0, 1000, 1000]);
        let g = to_grid(px(25., 25., 75., 75.), 100., 100., 1000).unwrap();
        assert_eq!(g.grid_coords(), [250, 250, 750, 750]);
        // 0.4 px is four cells wide at 1000 bins over 100 px: plain rounding applies.
        let g = to_grid(px(10., 10., 10.4, 20.), 100., 100., 1000).unwrap();
        assert_eq!(g.grid_coords(), [100, 100, 104, 200]);
        // Sub-cell width collapses under rounding and is widened by one cell.
        let g = to_grid(px(10., 10., 10.04, 20.), 100., 100., 1000).unwrap();
        assert_eq!(g.grid_coords(), [100, 100, 101, 200]);
        // Collapse on the far edge widens inwards.
        let g = to_grid(px(99.99, 0., 100., 100.), 100., 100., 1000).unwrap();
        assert_eq!(g.grid_coords(), [999, 0, 1000, 1000]);
        assert!(to_grid(px(0., 0., 1., 1.), 10., 10., 1).is_err());
    }

    #[test]
    fn from_grid_examples() {
        let b = from_grid(BBox::grid(0, 0, 1000, 1000, 1000), 640., 480.);
        assert_eq!(b.coords(), [0., 0., 640., 480.]);
        let b = from_grid(BBox::grid(250, 250, 750, 750, 1000), 100., 100.);
        assert_eq!(b.coords(), [25., 25., 75., 75.]);
    }

    #[test]
    fn iou_examples() {
        let a = px(0., 0., 10., 10.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &px(20., 20., 30., 30.)), 0.0);
        assert!((iou(&a, &px(5., 5., 15., 15.)) - 25.0 / 175.0).abs() < 1e-15);
        assert_eq!(iou(&a, &px(0., 0., 10., 5.)), 0.5);
        assert_eq!(iou(&px(1., 1., 1., 1.), &px(1., 1., 1., 1.)), 0.0);
    }

    fn pixel_box() -> impl Strategy<Value = (BBox, f64, f64)> {
        (1.0f64..4000.0, 1.0f64..4000.0)
            .prop_flat_map(|(w, h)| {
                (
                    Just(w),
                    Just(h),
                    0.0..=w,
                    0.0..=w,
                    0.0..=h,
                    0.0..=h,
                )
            })
            .prop_map(|(w, h, a, b, c, d)| (px(a.min(b), c.min(d), a.max(b), c.max(d)), w, h))
    }

    proptest! {
        #[test]
        fn grid_round_trip_within_one_cell((b, w, h) in pixel_box(), bins in 2u32..2000) {
            let g = to_grid(b, w, h, bins).unwrap();
            prop_assert!(validate_box(g, w, h).is_ok());
            let back = from_grid(g, w, h);
            let (cx, cy) = (w / bins as f64, h / bins as f64);
            let tol = 1e-9;
            prop_assert!((back.x1 - b.x1).abs() <= cx + tol);
            prop_assert!((back.x2 - b.x2).abs() <= cx + tol);
            prop_assert!((back.y1 - b.y1).abs() <= cy + tol);
            prop_assert!((back.y2 - b.y2).abs() <= cy + tol);
        }

        #[test]
        fn to_grid_is_monotone((outer, w, h) in pixel_box(), f in proptest::array::uniform4(0.0f64..1.0)) {
            let inner = px(
                outer.x1 + f[0] * outer.width() * 0.5,
                outer.y1 + f[1] * outer.height() * 0.5,
                outer.x2 - f[2] * outer.width() * 0.5,
                outer.y2 - f[3] * outer.height() * 0.5,
            );
            let (gi, go) = (to_grid(inner, w, h, 1000).unwrap(), to_grid(outer, w, h, 1000).unwrap());
            prop_assert!(gi.x1 + 1.0 >= go.x1 && gi.y1 + 1.0 >= go.y1);
            prop_assert!(gi.x2 <= go.x2 + 1.0 && gi.y2 <= go.y2 + 1.0);
        }

        #[test]
        fn iou_symmetric_and_bounded((a, _, _) in pixel_box(), (b, _, _) in pixel_box()) {
            let (ab, ba) = (iou(&a, &b), iou(&b, &a));
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.area() > 0.0 {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
            if ab == 1.0 {
                prop_assert!((a.x1 - b.x1).abs() < 1e-9 && (a.y2 - b.y2).abs() < 1e-9);
            }
        }
    }
}
