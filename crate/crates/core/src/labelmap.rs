//! Integer label maps (0 = background), binary masks, and the normalized
//! boundary-distance transform used as the seed regression target.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Large-but-finite stand-in for infinity inside the distance transform;
/// avoids NaN from inf - inf in the parabola intersections.
const BIG: f64 = 1e20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bbox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Bbox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }
}

macro_rules! grid_impl {
    ($ty:ident, $elem:ty, $zero:expr) => {
        impl $ty {
            pub fn new(h: usize, w: usize) -> Self {
                Self { h, w, data: vec![$zero; h * w] }
            }

            pub fn from_raw(h: usize, w: usize, data: Vec<$elem>) -> Result<Self> {
                if data.len() != h * w {
                    return Err(Error::invalid(
                        stringify!($ty),
                        format!("{}x{} needs {} elements, got {}", h, w, h * w, data.len()),
                    ));
                }
                Ok(Self { h, w, data })
            }

            pub fn height(&self) -> usize {
                self.h
            }

            pub fn width(&self) -> usize {
                self.w
            }

            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [$elem] {
                &mut self.data
            }

            #[inline]
            pub fn get(&self, y: usize, x: usize) -> $elem {
                self.data[y * self.w + x]
            }

            #[inline]
            pub fn set(&mut self, y: usize, x: usize, v: $elem) {
                self.data[y * self.w + x] = v;
            }
        }
    };
}

grid_impl!(LabelMap, u32, 0);
grid_impl!(BinaryMask, bool, false);
grid_impl!(DistanceMap, f64, 0.0);

impl LabelMap {
    /// Distinct nonzero labels in ascending order.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Bounding box and pixel count per label, keyed by label.
    pub fn instance_stats(&self) -> HashMap<u32, (Bbox, usize)> {
        let mut out: HashMap<u32, (Bbox, usize)> = HashMap::new();
        for y in 0..self.h {
            for x in 0..self.w {
                let v = self.get(y, x);
                if v == 0 {
                    continue;
                }
                out.entry(v)
                    .and_modify(|(b, n)| {
                        b.top = b.top.min(y);
                        b.left = b.left.min(x);
                        b.bottom = b.bottom.max(y);
                        b.right = b.right.max(x);
                        *n += 1;
                    })
                    .or_insert((Bbox { top: y, left: x, bottom: y, right: x }, 1));
            }
        }
        out
    }

    pub fn binary_mask(&self, label: u32) -> BinaryMask {
        BinaryMask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| v == label && v != 0).collect(),
        }
    }

    pub fn foreground(&self) -> BinaryMask {
        BinaryMask { h: self.h, w: self.w, data: self.data.iter().map(|&v| v != 0).collect() }
    }

    /// Renumbers labels to 1..=n in order of first appearance in raster scan.
    pub fn relabel_sequential(&self) -> LabelMap {
        let mut mapping: HashMap<u32, u32> = HashMap::new();
        let mut next = 1u32;
        let mut out = LabelMap::new(self.h, self.w);
        for (i, &v) in self.data.iter().enumerate() {
            if v == 0 {
                continue;
            }
            let nv = *mapping.entry(v).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            });
            out.data[i] = nv;
        }
        out
    }
}

/// 4-connected components of a binary mask. Labels are assigned in order of
/// each component's first pixel in raster scan, starting at 1.
pub fn connected_components(mask: &BinaryMask) -> LabelMap {
    let (h, w) = (mask.h, mask.w);
    let mut out = LabelMap::new(h, w);
    let mut next = 1u32;
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sy, sx) || out.get(sy, sx) != 0 {
                continue;
            }
            out.set(sy, sx, next);
            stack.push((sy, sx));
            while let Some((y, x)) = stack.pop() {
                let visit = |ny: usize, nx: usize, out: &mut LabelMap, stack: &mut Vec<_>| {
                    if mask.get(ny, nx) && out.get(ny, nx) == 0 {
                        out.set(ny, nx, next);
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x, &mut out, &mut stack);
                }
                if y + 1 < h {
                    visit(y + 1, x, &mut out, &mut stack);
                }
                if x > 0 {
                    visit(y, x - 1, &mut out, &mut stack);
                }
                if x + 1 < w {
                    visit(y, x + 1, &mut out, &mut stack);
                }
            }
            next += 1;
        }
    }
    out
}

/// Intersection over union of two same-size binary masks; 0/0 counts as 0.
pub fn binary_iou(a: &[bool], b: &[bool]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// One horizontal+vertical pass of the lower-envelope distance transform,
/// in place over squared distances.
fn edt_sq_in_place(grid: &mut [f64], h: usize, w: usize) {
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..][..w]);
        dt1d(&f[..w], &mut d[..w], &mut v[..w], &mut z[..w + 1]);
        grid[y * w..][..w].copy_from_slice(&d[..w]);
    }
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        dt1d(&f[..h], &mut d[..h], &mut v[..h], &mut z[..h + 1]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
}

#[allow(clippy::needless_range_loop)]
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        d[0] = f[0];
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -BIG;
    z[1] = BIG;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2 * q - 2 * p) as f64;
            if s <= z[k] {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = BIG;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Distance from each instance pixel to the nearest pixel outside its
/// instance, normalized per instance so the interior peak is exactly 1.
/// Background stays 0. Exact Euclidean distances: the transform runs on each
/// instance's bounding box grown by one pixel, which always contains a
/// nearest outside pixel (clamping any farther candidate's coordinates into
/// the window yields an outside pixel at most as far away).
pub fn boundary_distance(labels: &LabelMap) -> DistanceMap {
    let (h, w) = (labels.h, labels.w);
    let mut out = DistanceMap::new(h, w);
    let stats = labels.instance_stats();
    let mut ids: Vec<u32> = stats.keys().copied().collect();
    ids.sort_unstable();

    for id in ids {
        let (bbox, _) = stats[&id];
        let top = bbox.top.saturating_sub(1);
        let left = bbox.left.saturating_sub(1);
        let bottom = (bbox.bottom + 1).min(h - 1);
        let right = (bbox.right + 1).min(w - 1);
        let (wh, ww) = (bottom - top + 1, right - left + 1);

        let mut grid = vec![0.0f64; wh * ww];
        let mut any_outside = false;
        for y in 0..wh {
            for x in 0..ww {
                if labels.get(top + y, left + x) == id {
                    grid[y * ww + x] = BIG;
                } else {
                    any_outside = true;
                }
            }
        }
        if !any_outside {
            // instance fills the whole image; flat interior
            for v in out.data.iter_mut() {
                *v = 1.0;
            }
            continue;
        }
        edt_sq_in_place(&mut grid, wh, ww);
        let mut peak = 0.0f64;
        for y in 0..wh {
            for x in 0..ww {
                if labels.get(top + y, left + x) == id {
                    peak = peak.max(grid[y * ww + x]);
                }
            }
        }
        let peak = peak.sqrt();
        for y in 0..wh {
            for x in 0..ww {
                if labels.get(top + y, left + x) == id {
                    out.set(top + y, left + x, grid[y * ww + x].sqrt() / peak);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// PNG I/O (labels as 16-bit grayscale)
// ---------------------------------------------------------------------------

pub fn save_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut buf: Vec<u16> = Vec::with_capacity(labels.data.len());
    for &v in &labels.data {
        if v > u16::MAX as u32 {
            return Err(Error::invalid(
                "save_label_png",
                format!("label {v} exceeds 16-bit range"),
            ));
        }
        buf.push(v as u16);
    }
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
        labels.w as u32,
        labels.h as u32,
        buf,
    )
    .expect("sized buffer");
    img.save(path).map_err(|e| Error::Image { path: path.display().to_string(), source: e })
}

pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| Error::Image { path: path.display().to_string(), source: e })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u32> = match img {
        image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        _ => {
            return Err(Error::format(
                path.display().to_string(),
                "label image must be single-channel grayscale",
            ))
        }
    };
    LabelMap::from_raw(h, w, data)
}
