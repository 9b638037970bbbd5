//! Tiled inference for images larger than one forward pass. Tiles overlap;
//! each is segmented independently and the labels are reconciled in the
//! shared bands, so only a tile of raw pixels plus the growing label store
//! is ever resident.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dihedral::Rect;
use crate::error::{Error, Result};
use crate::labelmap::{Bbox, LabelMap};
use crate::model::ModelParams;
use crate::pipeline::{infer, PipelineConfig};
use crate::synth::load_image_png;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileConfig {
    pub tile_size: usize,
    /// Width of the band shared between adjacent tiles, in pixels.
    pub overlap: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self { tile_size: 512, overlap: 80 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TilePlan {
    pub tile_size: usize,
    pub overlap: usize,
    pub row_origins: Vec<usize>,
    pub col_origins: Vec<usize>,
    pub tiles: Vec<Rect>,
}

fn axis_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        origins.push(o);
        if o + tile >= len {
            return origins;
        }
        o = (o + stride).min(len - tile);
    }
}

/// Raster-order tile rectangles covering an image, with a fixed stride of
/// tile_size - overlap and the trailing origin clamped to the border.
pub fn plan_tiles(h: usize, w: usize, tile_size: usize, overlap: usize) -> Result<TilePlan> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("plan_tiles", "image has zero extent"));
    }
    if tile_size <= 2 * overlap {
        return Err(Error::invalid(
            "plan_tiles",
            format!("tile_size {tile_size} must exceed twice the overlap {overlap}"),
        ));
    }
    let stride = tile_size - overlap;
    let row_origins = axis_origins(h, tile_size, stride);
    let col_origins = axis_origins(w, tile_size, stride);
    let mut tiles = Vec::with_capacity(row_origins.len() * col_origins.len());
    for &top in &row_origins {
        for &left in &col_origins {
            tiles.push(Rect {
                top,
                left,
                height: tile_size.min(h),
                width: tile_size.min(w),
            });
        }
    }
    Ok(TilePlan { tile_size, overlap, row_origins, col_origins, tiles })
}

/// Pixel source that serves rectangular blocks on demand, so callers never
/// need the full image resident.
pub trait ImageProvider {
    /// (channels, height, width)
    fn dims(&self) -> (usize, usize, usize);
    fn read_block(&mut self, rect: Rect) -> Result<Tensor>;
}

/// Whole-tensor provider for images already in memory.
pub struct MemoryProvider {
    image: Tensor,
}

impl MemoryProvider {
    pub fn new(image: Tensor) -> Result<Self> {
        if image.shape().len() != 3 {
            return Err(Error::invalid(
                "image provider",
                format!("expected (c, h, w), got {:?}", image.shape()),
            ));
        }
        Ok(Self { image })
    }
}

impl ImageProvider for MemoryProvider {
    fn dims(&self) -> (usize, usize, usize) {
        let s = self.image.shape();
        (s[0], s[1], s[2])
    }

    fn read_block(&mut self, rect: Rect) -> Result<Tensor> {
        let (c, h, w) = self.dims();
        if rect.top + rect.height > h || rect.left + rect.width > w {
            return Err(Error::invalid(
                "image provider",
                format!("block {rect:?} outside {h}x{w}"),
            ));
        }
        let src = self.image.data();
        let mut out = Vec::with_capacity(c * rect.area());
        for ci in 0..c {
            for y in rect.top..rect.top + rect.height {
                let s = ci * h * w + y * w + rect.left;
                out.extend_from_slice(&src[s..s + rect.width]);
            }
        }
        Tensor::new(vec![c, rect.height, rect.width], out)
    }
}

/// PNG-backed provider. The file is decoded once up front (fine at this
/// scale) but consumers still see only the blocks they ask for.
pub struct PngProvider {
    inner: MemoryProvider,
}

impl PngProvider {
    pub fn open(path: &Path) -> Result<Self> {
        Ok(Self { inner: MemoryProvider::new(load_image_png(path)?)? })
    }
}

impl ImageProvider for PngProvider {
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    fn read_block(&mut self, rect: Rect) -> Result<Tensor> {
        self.inner.read_block(rect)
    }
}

/// Wrapper that records every block request, for asserting that tiled
/// inference touches pixels tile by tile instead of loading the image.
pub struct CountingProvider<P: ImageProvider> {
    inner: P,
    pub block_pixels: Vec<usize>,
}

impl<P: ImageProvider> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, block_pixels: Vec::new() }
    }

    pub fn max_block_pixels(&self) -> usize {
        self.block_pixels.iter().copied().max().unwrap_or(0)
    }
}

impl<P: ImageProvider> ImageProvider for CountingProvider<P> {
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    fn read_block(&mut self, rect: Rect) -> Result<Tensor> {
        self.block_pixels.push(rect.area());
        self.inner.read_block(rect)
    }
}

/// Incrementally maintained global label image, with per-label bounding
/// boxes for overlap queries and the set of tiles each label was seen in.
struct LabelStore {
    map: LabelMap,
    boxes: HashMap<u32, Bbox>,
    seen_in: HashMap<u32, Vec<Rect>>,
    next: u32,
}

impl LabelStore {
    fn new(h: usize, w: usize) -> Self {
        Self { map: LabelMap::new(h, w), boxes: HashMap::new(), seen_in: HashMap::new(), next: 1 }
    }

    fn fresh(&mut self) -> u32 {
        let l = self.next;
        self.next += 1;
        l
    }

    /// Claims every still-unlabeled pixel for `label`; pixels already owned
    /// by an earlier tile are left with their owner.
    fn write(&mut self, label: u32, pixels: &[(usize, usize)], tile: Rect) {
        for &(y, x) in pixels {
            if self.map.get(y, x) == 0 {
                self.map.set(y, x, label);
                self.boxes
                    .entry(label)
                    .and_modify(|b| {
                        b.top = b.top.min(y);
                        b.left = b.left.min(x);
                        b.bottom = b.bottom.max(y);
                        b.right = b.right.max(x);
                    })
                    .or_insert(Bbox { top: y, left: x, bottom: y, right: x });
            }
        }
        let tiles = self.seen_in.entry(label).or_default();
        if !tiles.contains(&tile) {
            tiles.push(tile);
        }
    }
}

/// Tiled segmentation around a caller-supplied per-tile segmenter. Local
/// instances that touch no previously labeled pixel (the interior case)
/// are committed as new labels outright. Instances that do touch one are
/// compared against it by IoU restricted to the region both predictions
/// actually saw: the current tile intersected with the tiles that built
/// the committed instance. The best match at IoU >= 0.5 absorbs the local
/// instance; anything else becomes a new label. Earlier tiles keep
/// ownership of contested pixels, so the result is a partition and is
/// deterministic in plan order.
pub fn infer_tiled_with(
    source: &mut dyn ImageProvider,
    tiles: &TileConfig,
    segment: &mut dyn FnMut(&Tensor) -> Result<LabelMap>,
) -> Result<LabelMap> {
    let (_, h, w) = source.dims();
    let plan = plan_tiles(h, w, tiles.tile_size, tiles.overlap)?;

    let mut store = LabelStore::new(h, w);
    for rect in &plan.tiles {
        let block = source.read_block(*rect)?;
        let local = segment(&block)?;
        if (local.height(), local.width()) != (rect.height, rect.width) {
            return Err(Error::invalid(
                "infer_tiled",
                format!(
                    "segmenter returned {}x{} for a {}x{} tile",
                    local.height(),
                    local.width(),
                    rect.height,
                    rect.width
                ),
            ));
        }

        let stats = local.instance_stats();
        let mut ids: Vec<u32> = stats.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let (bbox, _) = stats[&id];
            // global pixel list of this local instance
            let mut pixels = Vec::new();
            for y in bbox.top..=bbox.bottom {
                for x in bbox.left..=bbox.right {
                    if local.get(y, x) == id {
                        pixels.push((rect.top + y, rect.left + x));
                    }
                }
            }

            let mut inter: HashMap<u32, usize> = HashMap::new();
            for &(y, x) in &pixels {
                let owner = store.map.get(y, x);
                if owner > 0 {
                    *inter.entry(owner).or_insert(0) += 1;
                }
            }
            if inter.is_empty() {
                let label = store.fresh();
                store.write(label, &pixels, *rect);
                continue;
            }

            let mut best: Option<(f64, u32)> = None;
            let mut owners: Vec<u32> = inter.keys().copied().collect();
            owners.sort_unstable();
            for owner in owners {
                let seen = &store.seen_in[&owner];
                // committed pixels visible to the current tile
                let ob = store.boxes[&owner];
                let mut owner_vis = 0usize;
                for y in ob.top.max(rect.top)..=ob.bottom.min(rect.top + rect.height - 1) {
                    for x in ob.left.max(rect.left)..=ob.right.min(rect.left + rect.width - 1) {
                        if store.map.get(y, x) == owner {
                            owner_vis += 1;
                        }
                    }
                }
                // local pixels visible to any tile the owner was seen in
                let local_vis = pixels
                    .iter()
                    .filter(|&&(y, x)| seen.iter().any(|t| t.contains(y, x)))
                    .count();
                let i = inter[&owner];
                let union = local_vis + owner_vis - i;
                if union == 0 {
                    continue;
                }
                let iou = i as f64 / union as f64;
                if best.map(|(b, _)| iou > b).unwrap_or(true) {
                    best = Some((iou, owner));
                }
            }
            let label = match best {
                Some((iou, owner)) if iou >= 0.5 => owner,
                _ => store.fresh(),
            };
            store.write(label, &pixels, *rect);
        }
    }
    Ok(store.map.relabel_sequential())
}

/// Tiled model inference: each tile runs the normal single-image path.
pub fn infer_tiled(
    source: &mut dyn ImageProvider,
    params: &ModelParams,
    cfg: &PipelineConfig,
    tiles: &TileConfig,
) -> Result<LabelMap> {
    let mut segment = |block: &Tensor| infer(block, params, cfg);
    infer_tiled_with(source, tiles, &mut segment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{analytic_bundle, infer_with};
    use crate::synth::{gen_sample, SynthConfig};

    fn labels_as_image(l: &LabelMap) -> Tensor {
        let data: Vec<f64> = l.data().iter().map(|&v| v as f64).collect();
        Tensor::new(vec![1, l.height(), l.width()], data).unwrap()
    }

    fn image_as_labels(t: &Tensor) -> LabelMap {
        let s = t.shape();
        let data: Vec<u32> = t.data().iter().map(|&v| v.round() as u32).collect();
        LabelMap::from_raw(s[1], s[2], data).unwrap()
    }

    /// Per-tile segmenter with exact features: decodes the label-encoded
    /// block and runs the analytic fixture on it, truncation and all.
    fn fixture_segment(block: &Tensor) -> crate::error::Result<LabelMap> {
        let local = image_as_labels(block).relabel_sequential();
        let (bundle, params) = analytic_bundle(&local, 2, 1)?;
        let cfg = PipelineConfig { crop_size: 48, ..Default::default() };
        infer_with(&bundle, &params, &cfg)
    }

    fn canonical_eq(a: &LabelMap, b: &LabelMap) -> bool {
        a.relabel_sequential().data() == b.relabel_sequential().data()
    }

    #[test]
    fn plan_matches_stride_arithmetic() {
        let plan = plan_tiles(1000, 1000, 512, 80).unwrap();
        assert_eq!(plan.row_origins, vec![0, 432, 488]);
        assert_eq!(plan.col_origins, vec![0, 432, 488]);
        assert_eq!(plan.tiles.len(), 9);
    }

    #[test]
    fn small_image_is_a_single_tile() {
        let plan = plan_tiles(300, 200, 512, 80).unwrap();
        assert_eq!(plan.tiles, vec![Rect { top: 0, left: 0, height: 300, width: 200 }]);
    }

    #[test]
    fn exact_fit_yields_single_origin_per_axis() {
        let plan = plan_tiles(512, 1000, 512, 80).unwrap();
        assert_eq!(plan.row_origins, vec![0]);
        assert_eq!(plan.col_origins.len(), 3);
    }

    #[test]
    fn thin_tiles_are_rejected() {
        assert!(plan_tiles(1000, 1000, 160, 80).is_err());
        assert!(plan_tiles(1000, 1000, 159, 80).is_err());
        assert!(plan_tiles(1000, 1000, 161, 80).is_ok());
    }

    #[test]
    fn plans_cover_and_overlap_for_many_sizes() {
        for &(len, tile, overlap) in
            &[(1000, 512, 80), (513, 512, 80), (700, 256, 60), (64, 48, 10), (300, 100, 30)]
        {
            let plan = plan_tiles(len, len, tile, overlap).unwrap();
            let o = &plan.row_origins;
            assert_eq!(o[0], 0);
            let extent = tile.min(len);
            assert_eq!(o.last().unwrap() + extent, len.max(extent), "no border reach for {len}");
            let mut covered = vec![false; len];
            for &org in o {
                for c in covered.iter_mut().skip(org).take(extent) {
                    *c = true;
                }
            }
            assert!(covered.iter().all(|&c| c), "gap in coverage for {len}");
            for pair in o.windows(2) {
                assert!(
                    pair[0] + extent >= pair[1] + overlap,
                    "adjacent tiles under-overlap for {len}"
                );
            }
        }
    }

    #[test]
    fn tiled_matches_whole_image_on_exact_features() {
        let cfg = SynthConfig {
            size: 128,
            count_min: 8,
            count_max: 14,
            radius_min: 3.0,
            radius_max: 6.0,
            channels: 1,
            seed: 7,
            ..Default::default()
        };
        for index in 0..3 {
            let (_, gt) = gen_sample(&cfg, index).unwrap();
            let whole = fixture_segment(&labels_as_image(&gt)).unwrap();
            let mut provider = MemoryProvider::new(labels_as_image(&gt)).unwrap();
            let tiles = TileConfig { tile_size: 64, overlap: 24 };
            let tiled =
                infer_tiled_with(&mut provider, &tiles, &mut fixture_segment).unwrap();
            assert!(canonical_eq(&tiled, &whole), "tile seams changed sample {index}");
        }
    }

    #[test]
    fn instance_spanning_the_band_stays_single() {
        // one disk across the horizontal seam of two vertically stacked tiles
        let mut gt = LabelMap::new(96, 64);
        for y in 0..96usize {
            for x in 0..64usize {
                let dy = y as f64 - 60.0;
                let dx = x as f64 - 30.0;
                if dy * dy + dx * dx <= 64.0 {
                    gt.set(y, x, 1);
                }
            }
        }
        let mut provider = MemoryProvider::new(labels_as_image(&gt)).unwrap();
        let tiles = TileConfig { tile_size: 64, overlap: 24 };
        let out = infer_tiled_with(&mut provider, &tiles, &mut fixture_segment).unwrap();
        assert_eq!(out.instance_ids().len(), 1);
        assert!(canonical_eq(&out, &gt));
    }

    #[test]
    fn empty_image_stays_empty() {
        let mut provider =
            MemoryProvider::new(Tensor::zeros(vec![1, 100, 90])).unwrap();
        let tiles = TileConfig { tile_size: 64, overlap: 24 };
        let out = infer_tiled_with(&mut provider, &tiles, &mut fixture_segment).unwrap();
        assert!(out.instance_ids().is_empty());
    }

    #[test]
    fn reads_stay_tile_sized() {
        let cfg = SynthConfig { size: 192, channels: 1, seed: 9, ..Default::default() };
        let (_, gt) = gen_sample(&cfg, 0).unwrap();
        let tiles = TileConfig { tile_size: 64, overlap: 24 };
        let mut provider =
            CountingProvider::new(MemoryProvider::new(labels_as_image(&gt)).unwrap());
        infer_tiled_with(&mut provider, &tiles, &mut fixture_segment).unwrap();
        let plan = plan_tiles(192, 192, 64, 24).unwrap();
        assert_eq!(provider.block_pixels.len(), plan.tiles.len());
        assert!(provider.max_block_pixels() <= 64 * 64);
    }

    #[test]
    fn tiling_is_deterministic() {
        let cfg = SynthConfig { size: 128, channels: 1, seed: 11, ..Default::default() };
        let (_, gt) = gen_sample(&cfg, 1).unwrap();
        let tiles = TileConfig { tile_size: 64, overlap: 24 };
        let run = || {
            let mut provider = MemoryProvider::new(labels_as_image(&gt)).unwrap();
            infer_tiled_with(&mut provider, &tiles, &mut fixture_segment).unwrap()
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn wrong_segmenter_dims_are_rejected() {
        let mut provider =
            MemoryProvider::new(Tensor::zeros(vec![1, 100, 100])).unwrap();
        let tiles = TileConfig { tile_size: 64, overlap: 24 };
        let mut bad = |_: &Tensor| Ok(LabelMap::new(10, 10));
        assert!(infer_tiled_with(&mut provider, &tiles, &mut bad).is_err());
    }

    #[test]
    fn real_model_runs_tiled() {
        let params = ModelParams::build(crate::model::ArchitectureConfig {
            in_channels: 1,
            widths: vec![4, 8],
            d_f: 4,
            d_p: 2,
            d_e: 2,
            phi_hidden: 6,
            seed: 3,
        })
        .unwrap();
        let cfg = SynthConfig { size: 128, channels: 1, seed: 13, ..Default::default() };
        let (img, _) = gen_sample(&cfg, 0).unwrap();
        let mut provider = MemoryProvider::new(img).unwrap();
        let tiles = TileConfig { tile_size: 64, overlap: 24 };
        let pcfg = PipelineConfig { crop_size: 32, ..Default::default() };
        let out = infer_tiled(&mut provider, &params, &pcfg, &tiles).unwrap();
        assert_eq!((out.height(), out.width()), (128, 128));
    }
}
