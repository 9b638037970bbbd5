//! The eight axis-aligned symmetries of a raster grid, used for training
//! augmentation and test-time ensembling. An element mirrors horizontally
//! first (when `flip` is set), then rotates clockwise in 90-degree steps.

/// Half-open pixel window: rows `top..top + height`, columns
/// `left..left + width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// Overlap with another window, or None when disjoint.
    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let top = self.top.max(other.top);
        let left = self.left.max(other.left);
        let bottom = (self.top + self.height).min(other.top + other.height);
        let right = (self.left + self.width).min(other.left + other.width);
        if top < bottom && left < right {
            Some(Rect { top, left, height: bottom - top, width: right - left })
        } else {
            None
        }
    }

    /// Smallest window covering both.
    pub fn union(&self, other: &Rect) -> Rect {
        let top = self.top.min(other.top);
        let left = self.left.min(other.left);
        let bottom = (self.top + self.height).max(other.top + other.height);
        let right = (self.left + self.width).max(other.left + other.width);
        Rect { top, left, height: bottom - top, width: right - left }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral {
    /// Clockwise quarter turns, 0..4.
    pub rot: u8,
    /// Horizontal mirror (columns reversed), applied before the rotation.
    pub flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { rot: 0, flip: false };

    /// The eight distinct symmetries.
    pub fn elements() -> [Dihedral; 8] {
        let mut out = [Dihedral::IDENTITY; 8];
        for (i, e) in out.iter_mut().enumerate() {
            *e = Dihedral { rot: (i % 4) as u8, flip: i >= 4 };
        }
        out
    }

    /// Canonical form of (rotation, horizontal flip, vertical flip). A
    /// vertical mirror equals a half turn of a horizontal one, so the 16
    /// combinations cover the group exactly twice.
    pub fn from_triple(rot: u8, hflip: bool, vflip: bool) -> Dihedral {
        let extra = if vflip { 2 } else { 0 };
        Dihedral { rot: (rot + extra) % 4, flip: hflip != vflip }
    }

    /// All 16 (rotation, hflip, vflip) combinations in a fixed order.
    pub fn tta_variants() -> [Dihedral; 16] {
        let mut out = [Dihedral::IDENTITY; 16];
        let mut i = 0;
        for rot in 0..4u8 {
            for hflip in [false, true] {
                for vflip in [false, true] {
                    out[i] = Dihedral::from_triple(rot, hflip, vflip);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn inverse(self) -> Dihedral {
        if self.flip {
            // reflections are involutions
            self
        } else {
            Dihedral { rot: (4 - self.rot) % 4, flip: false }
        }
    }

    /// Grid size after the transform.
    pub fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.rot % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Image of a pixel; `(h, w)` are the input dims.
    pub fn map_point(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        let (mut h, mut w) = (h, w);
        if self.flip {
            x = w - 1 - x;
        }
        for _ in 0..self.rot {
            let (ny, nx) = (x, h - 1 - y);
            y = ny;
            x = nx;
            std::mem::swap(&mut h, &mut w);
        }
        (y, x)
    }

    /// Image of a window; axis-aligned windows map to axis-aligned windows.
    pub fn map_rect(self, r: Rect, h: usize, w: usize) -> Rect {
        let (y0, x0) = self.map_point(r.top, r.left, h, w);
        let (y1, x1) = self.map_point(r.top + r.height - 1, r.left + r.width - 1, h, w);
        let (top, bottom) = (y0.min(y1), y0.max(y1));
        let (left, right) = (x0.min(x1), x0.max(x1));
        Rect { top, left, height: bottom - top + 1, width: right - left + 1 }
    }

    /// Transforms one plane, gathering through the inverse map.
    pub fn apply_plane<T: Copy>(self, data: &[T], h: usize, w: usize) -> Vec<T> {
        debug_assert_eq!(data.len(), h * w);
        let (oh, ow) = self.out_dims(h, w);
        let inv = self.inverse();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = inv.map_point(y, x, oh, ow);
                out.push(data[sy * w + sx]);
            }
        }
        out
    }

    /// Transforms a CHW stack channel by channel.
    pub fn apply_chw(self, data: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(data.len());
        for ci in 0..c {
            out.extend(self.apply_plane(&data[ci * h * w..][..h * w], h, w));
        }
        out
    }
}
