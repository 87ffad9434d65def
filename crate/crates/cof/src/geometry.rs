//! Bounding-box arithmetic on the normalized image square.
//!
//! Boxes live in `[0,1]²` with the origin at the top-left corner, x growing
//! right and y growing down. The stage-1 grounding box is expanded around its
//! center by a factor `alpha`, shifted back inside the image if it spills
//! over an edge, and finally rasterized onto the visual-token patch grid as a
//! binary [`TokenMask`].

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("box corners must be ordered and inside [0,1]: ({0}, {1}, {2}, {3})")]
    OutOfBounds(f64, f64, f64, f64),
    #[error("expansion factor must be a positive finite number, got {0}")]
    InvalidAlpha(f64),
    #[error("patch grid must have at least one row and one column, got {rows}x{cols}")]
    InvalidGrid { rows: usize, cols: usize },
    #[error("mask bit string length {got} does not match grid {rows}x{cols}")]
    MaskLength {
        rows: usize,
        cols: usize,
        got: usize,
    },
}

/// Axis-aligned box in normalized image coordinates.
///
/// Invariants (enforced at construction): all coordinates finite,
/// `0 ≤ x1 ≤ x2 ≤ 1` and `0 ≤ y1 ≤ y2 ≤ 1`. Zero-area boxes are legal
/// degenerate inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl NormBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite(x1, y1, x2, y2));
        }
        let ordered = x1 <= x2 && y1 <= y2;
        let inside = (0.0..=1.0).contains(&x1)
            && (0.0..=1.0).contains(&x2)
            && (0.0..=1.0).contains(&y1)
            && (0.0..=1.0).contains(&y2);
        if !ordered || !inside {
            return Err(GeometryError::OutOfBounds(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// The whole image: `(0, 0, 1, 1)`. Used as the grounding fallback.
    pub fn full() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// True when `other` lies entirely inside `self` (boundaries included).
    pub fn contains_box(&self, other: &NormBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Serialize for NormBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.corners().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NormBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(deserializer)?;
        NormBox::new(x1, y1, x2, y2).map_err(D::Error::custom)
    }
}

/// A box that may extend past the image after center-preserving expansion.
///
/// Corners are still ordered (`x1 ≤ x2`, `y1 ≤ y2`) and finite, but are not
/// confined to `[0,1]`; [`clamp_box`] brings it back inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct UnclampedBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl UnclampedBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

impl From<NormBox> for UnclampedBox {
    fn from(b: NormBox) -> Self {
        Self {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

impl From<UnclampedBox> for [f64; 4] {
    fn from(b: UnclampedBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl TryFrom<[f64; 4]> for UnclampedBox {
    type Error = GeometryError;

    fn try_from([x1, y1, x2, y2]: [f64; 4]) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite(x1, y1, x2, y2));
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::OutOfBounds(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }
}

/// The rows×cols tiling of the image; cell (r, c) corresponds one-to-one
/// with visual token `r * cols + c`.
///
/// Patch (r, c) covers the half-open rectangle
/// `[c/cols, (c+1)/cols) × [r/rows, (r+1)/rows)`, so a point on a shared
/// boundary belongs to exactly one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    rows: usize,
    cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self, GeometryError> {
        if rows == 0 || cols == 0 {
            return Err(GeometryError::InvalidGrid { rows, cols });
        }
        Ok(Self { rows, cols })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Total patch (= visual token) count.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Normalized rectangle `(x1, y1, x2, y2)` of patch (r, c).
    pub fn patch_rect(&self, r: usize, c: usize) -> (f64, f64, f64, f64) {
        let cols = self.cols as f64;
        let rows = self.rows as f64;
        (
            c as f64 / cols,
            r as f64 / rows,
            (c + 1) as f64 / cols,
            (r + 1) as f64 / rows,
        )
    }

    /// Patch containing the point, honoring the half-open cell convention;
    /// points on the far image edge map to the last row/column.
    pub fn patch_of_point(&self, x: f64, y: f64) -> (usize, usize) {
        let c = ((x * self.cols as f64).floor() as usize).min(self.cols - 1);
        let r = ((y * self.rows as f64).floor() as usize).min(self.rows - 1);
        (r, c)
    }
}

/// Binary mask over the visual-token grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    grid: PatchGrid,
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn new(grid: PatchGrid, bits: Vec<bool>) -> Result<Self, GeometryError> {
        if bits.len() != grid.len() {
            return Err(GeometryError::MaskLength {
                rows: grid.rows,
                cols: grid.cols,
                got: bits.len(),
            });
        }
        Ok(Self { grid, bits })
    }

    /// Mask with every patch selected (the reweight-all ablation and the
    /// grounding fallback both use this).
    pub fn full(grid: PatchGrid) -> Self {
        let bits = vec![true; grid.len()];
        Self { grid, bits }
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bit(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.grid.cols + c]
    }

    /// Number of selected patches.
    pub fn cardinality(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// True if every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &TokenMask) -> bool {
        self.grid == other.grid && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

#[derive(Serialize, Deserialize)]
struct TokenMaskRepr {
    rows: usize,
    cols: usize,
    bits: String,
}

impl Serialize for TokenMask {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let bits: String = self
            .bits
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        TokenMaskRepr {
            rows: self.grid.rows,
            cols: self.grid.cols,
            bits,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TokenMask {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = TokenMaskRepr::deserialize(deserializer)?;
        let grid = PatchGrid::new(repr.rows, repr.cols).map_err(D::Error::custom)?;
        let bits: Result<Vec<bool>, D::Error> = repr
            .bits
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(D::Error::custom(format!(
                    "mask bit string may only contain 0/1, found {other:?}"
                ))),
            })
            .collect();
        TokenMask::new(grid, bits?).map_err(D::Error::custom)
    }
}

/// Scale `box_` around its center by `alpha` (width and height each scale by
/// `alpha`). The result may spill outside the image; clamping is a separate
/// step so callers can observe both stages.
pub fn expand_box(box_: &NormBox, alpha: f64) -> Result<UnclampedBox, GeometryError> {
    if !alpha.is_finite() || alpha <= 0.0 {
        return Err(GeometryError::InvalidAlpha(alpha));
    }
    let (cx, cy) = box_.center();
    let half_w = box_.width() / 2.0 * alpha;
    let half_h = box_.height() / 2.0 * alpha;
    Ok(UnclampedBox {
        x1: cx - half_w,
        y1: cy - half_h,
        x2: cx + half_w,
        y2: cy + half_h,
    })
}

/// Translate the box back inside `[0,1]²` by the minimal per-axis shift,
/// preserving width and height. An axis whose extent exceeds the image is
/// clipped to `[0,1]` outright, the only feasible placement.
pub fn clamp_box(box_: &UnclampedBox) -> NormBox {
    let (x1, x2) = clamp_axis(box_.x1, box_.x2);
    let (y1, y2) = clamp_axis(box_.y1, box_.y2);
    NormBox { x1, y1, x2, y2 }
}

fn clamp_axis(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo >= 1.0 {
        return (0.0, 1.0);
    }
    let shift = if lo < 0.0 {
        -lo
    } else if hi > 1.0 {
        1.0 - hi
    } else {
        0.0
    };
    // Rounding in the shift can leave a coordinate a few ulps outside; snap.
    ((lo + shift).clamp(0.0, 1.0), (hi + shift).clamp(0.0, 1.0))
}

/// Rasterize a box onto the patch grid: bit (r, c) is set iff the patch
/// rectangle overlaps the box with positive area. A zero-area box selects
/// exactly the patch containing its center, so the mask is never empty.
pub fn box_to_mask(box_: &NormBox, grid: &PatchGrid) -> TokenMask {
    let mut bits = vec![false; grid.len()];
    if box_.area() == 0.0 {
        let (cx, cy) = box_.center();
        let (r, c) = grid.patch_of_point(cx, cy);
        bits[r * grid.cols() + c] = true;
        return TokenMask { grid: *grid, bits };
    }
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let (px1, py1, px2, py2) = grid.patch_rect(r, c);
            let overlap_w = box_.x2.min(px2) - box_.x1.max(px1);
            let overlap_h = box_.y2.min(py2) - box_.y1.max(py1);
            if overlap_w > 0.0 && overlap_h > 0.0 {
                bits[r * grid.cols() + c] = true;
            }
        }
    }
    TokenMask { grid: *grid, bits }
}
