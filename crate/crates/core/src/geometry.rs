//! Axis-aligned boxes in pixel space.
//!
//! Coordinates use a top-left origin with `x` growing rightward and `y`
//! growing downward. Areas follow the continuous convention
//! `(x2 - x1) * (y2 - y1)`, with no `+1` pixel inclusivity, so the same
//! arithmetic serves both perturbation and scoring. Two boxes that only
//! share an edge have zero intersection.

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("coordinate is not finite: [{x1}, {y1}, {x2}, {y2}]")]
    NonFinite { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box has non-positive extent: [{x1}, {y1}, {x2}, {y2}]")]
    NonPositiveExtent { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("center/size has non-positive extent: w={w}, h={h}")]
    NonPositiveSize { w: f64, h: f64 },
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("box [{x1}, {y1}, {x2}, {y2}] has no area inside a {width}x{height} image")]
    DegenerateClip {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        width: u32,
        height: u32,
    },
}

/// Image width and height in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ImageDims {
    width: u32,
    height: u32,
}

impl ImageDims {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }

    #[inline]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[inline]
    pub fn height(&self) -> u32 {
        self.height
    }
}

/// An axis-aligned box `(x1, y1, x2, y2)` with `x2 > x1`, `y2 > y1` and
/// finite coordinates. The invariant is checked on construction, so every
/// operation on a `BBox` is total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<T> {
    x1: T,
    y1: T,
    x2: T,
    y2: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x1: T, y1: T, x2: T, y2: T) -> Result<Self, GeometryError> {
        let raw = || (x1.as_f64(), y1.as_f64(), x2.as_f64(), y2.as_f64());
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            let (x1, y1, x2, y2) = raw();
            return Err(GeometryError::NonFinite { x1, y1, x2, y2 });
        }
        if !(x2 > x1 && y2 > y1) {
            let (x1, y1, x2, y2) = raw();
            return Err(GeometryError::NonPositiveExtent { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_array(c: [T; 4]) -> Result<Self, GeometryError> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    #[inline]
    pub fn x1(&self) -> T {
        self.x1
    }

    #[inline]
    pub fn y1(&self) -> T {
        self.y1
    }

    #[inline]
    pub fn x2(&self) -> T {
        self.x2
    }

    #[inline]
    pub fn y2(&self) -> T {
        self.y2
    }

    #[inline]
    pub fn to_array(&self) -> [T; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y2 - self.y1
    }

    #[inline]
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`; zero when the interiors are disjoint.
    pub fn intersection_area(&self, other: &Self) -> T {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= T::zero() || ih <= T::zero() {
            T::zero()
        } else {
            iw * ih
        }
    }

    /// Intersection over union, in `[0, 1]`. Identical boxes give exactly 1.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection_area(other);
        if inter == T::zero() {
            return T::zero();
        }
        let union = self.area() + other.area() - inter;
        inter / union
    }

    pub fn to_center_size(&self) -> CenterSize<T> {
        let two = T::of(2.0);
        CenterSize {
            cx: (self.x1 + self.x2) / two,
            cy: (self.y1 + self.y2) / two,
            w: self.width(),
            h: self.height(),
        }
    }

    /// Clamps the box to `[0, W] x [0, H]`.
    pub fn clip_to_image(&self, dims: ImageDims) -> Result<Self, GeometryError> {
        let w = T::of(f64::from(dims.width));
        let h = T::of(f64::from(dims.height));
        let x1 = self.x1.max(T::zero()).min(w);
        let y1 = self.y1.max(T::zero()).min(h);
        let x2 = self.x2.max(T::zero()).min(w);
        let y2 = self.y2.max(T::zero()).min(h);
        Self::new(x1, y1, x2, y2).map_err(|_| GeometryError::DegenerateClip {
            x1: self.x1.as_f64(),
            y1: self.y1.as_f64(),
            x2: self.x2.as_f64(),
            y2: self.y2.as_f64(),
            width: dims.width,
            height: dims.height,
        })
    }

    /// True when the box lies within `[0, W] x [0, H]`.
    pub fn is_inside(&self, dims: ImageDims) -> bool {
        let w = T::of(f64::from(dims.width));
        let h = T::of(f64::from(dims.height));
        self.x1 >= T::zero() && self.y1 >= T::zero() && self.x2 <= w && self.y2 <= h
    }

    /// Rounds every coordinate half-away-from-zero. Fails if rounding
    /// collapses an extent.
    pub fn rounded(&self) -> Result<Self, GeometryError> {
        Self::new(
            self.x1.round(),
            self.y1.round(),
            self.x2.round(),
            self.y2.round(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox {
            x1: U::of(self.x1.as_f64()),
            y1: U::of(self.y1.as_f64()),
            x2: U::of(self.x2.as_f64()),
            y2: U::of(self.y2.as_f64()),
        }
    }
}

/// Intersection over union of two boxes.
#[inline]
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    a.iou(b)
}

/// Center/size form `(cx, cy, w, h)` of a box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterSize<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> CenterSize<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        if !(w > T::zero() && h > T::zero()) {
            return Err(GeometryError::NonPositiveSize {
                w: w.as_f64(),
                h: h.as_f64(),
            });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn to_box(&self) -> Result<BBox<T>, GeometryError> {
        if !(self.w > T::zero() && self.h > T::zero()) {
            return Err(GeometryError::NonPositiveSize {
                w: self.w.as_f64(),
                h: self.h.as_f64(),
            });
        }
        let two = T::of(2.0);
        let hw = self.w / two;
        let hh = self.h / two;
        BBox::new(self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }
}
